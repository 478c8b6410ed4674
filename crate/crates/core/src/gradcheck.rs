//! Central finite-difference oracle for the pooling backward pass.
//!
//! The oracle only ever calls the forward operator; it never touches the
//! analytic gradient code it is checking.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{MivcError, Result};
use crate::numkern::{Matrix, Rng, Vector};
use crate::par;
use crate::pooling::{pool, pool_backward, Bag, PoolGradients, PoolingKind, PoolingParams};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn central_difference(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(x);
        x[i] = orig - h;
        let minus = f(x);
        x[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

fn probe_loss(params: &PoolingParams, bag: &Bag, upstream: &Vector) -> f64 {
    let out = pool(params, bag).expect("probe forward");
    upstream.dot(&out.embedding).expect("probe dims")
}

fn with_array(params: &PoolingParams, name: &str, values: &[f64]) -> PoolingParams {
    let mut p = params.clone();
    for (n, arr) in p.arrays_mut() {
        if n == name {
            arr.copy_from_slice(values);
        }
    }
    p
}

fn bag_with_instance(bag: &Bag, n: usize, values: &[f64]) -> Bag {
    let rows = (0..bag.len())
        .map(|i| if i == n { values.to_vec() } else { bag.instance(i).to_vec() })
        .collect();
    Bag::from_rows(bag.id.clone(), rows).expect("probe bag")
}

/// Numerical gradients of `L = upstream . pool(params, bag).E`, laid out
/// like [`PoolGradients`].
pub fn numerical_gradients(params: &PoolingParams, bag: &Bag, upstream: &Vector, h: f64) -> PoolGradients {
    let mut by_name: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for (name, arr) in params.arrays() {
        let mut x = arr.to_vec();
        let g = central_difference(&mut x, h, |v| probe_loss(&with_array(params, name, v), bag, upstream));
        by_name.insert(name, g);
    }
    let d_instances = (0..bag.len())
        .map(|n| {
            let mut x = bag.instance(n).to_vec();
            Vector::new(central_difference(&mut x, h, |v| {
                probe_loss(params, &bag_with_instance(bag, n, v), upstream)
            }))
        })
        .collect();
    let rows = params.hidden().unwrap_or(0);
    let cols = bag.dim();
    let mat = |v: Vec<f64>| Matrix::new(rows, cols, v).expect("probe matrix");
    PoolGradients {
        d_w: by_name.remove("w").map(Vector::new),
        d_z: by_name.remove("Z").map(mat),
        d_g: by_name.remove("G").map(mat),
        d_instances,
    }
}

/// Largest relative error per parameter group (`w`, `Z`, `G`, `e`).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GroupErrors(pub BTreeMap<String, f64>);

impl GroupErrors {
    fn absorb(&mut self, group: &str, analytic: &[f64], numeric: &[f64]) {
        let worst = analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        let slot = self.0.entry(group.to_string()).or_insert(0.0);
        *slot = slot.max(worst);
    }

    fn merge(&mut self, other: &GroupErrors) {
        for (k, &v) in &other.0 {
            let slot = self.0.entry(k.clone()).or_insert(0.0);
            *slot = slot.max(v);
        }
    }

    pub fn max(&self) -> f64 {
        self.0.values().copied().fold(0.0, f64::max)
    }
}

pub fn compare(analytic: &PoolGradients, numeric: &PoolGradients) -> GroupErrors {
    let mut errs = GroupErrors::default();
    for ((name, a), (_, n)) in analytic.param_arrays().into_iter().zip(numeric.param_arrays()) {
        errs.absorb(name, a, n);
    }
    for (a, n) in analytic.d_instances.iter().zip(&numeric.d_instances) {
        errs.absorb("e", a.as_slice(), n.as_slice());
    }
    errs
}

/// Random `(params, bag, upstream)` triple with `K, M <= 6`, `N <= 5`.
pub fn random_case(kind: PoolingKind, rng: &mut Rng) -> Result<(PoolingParams, Bag, Vector)> {
    let k = rng.range_inclusive(1, 6);
    let m = rng.range_inclusive(1, 6);
    let n = rng.range_inclusive(1, 5);
    // Central differences at h = 1e-5 carry ~1e-11 absolute noise, so the
    // draw keeps gradient entries away from zero: |w_k| in [0.5, 1] and
    // pre-activations of unit scale, out of tanh/sigmoid saturation.
    let w = Vector::new(
        (0..k)
            .map(|_| {
                let mag = rng.uniform(0.5, 1.0);
                if rng.bernoulli(0.5) { mag } else { -mag }
            })
            .collect(),
    );
    let bound = (3.0 / m as f64).sqrt();
    let z = Matrix::uniform(k, m, bound, rng);
    let params = match kind {
        PoolingKind::Attn => PoolingParams::attention(w, z)?,
        PoolingKind::Gated => PoolingParams::gated(w, z, Matrix::uniform(k, m, bound, rng))?,
        other => {
            return Err(MivcError::Usage(format!(
                "gradient check covers attn and gated only, got {other}"
            )))
        }
    };
    let rows = (0..n)
        .map(|_| (0..m).map(|_| rng.normal()).collect())
        .collect();
    let bag = Bag::from_rows("gradcheck", rows)?;
    let upstream = Vector::new((0..m).map(|_| rng.normal()).collect());
    Ok((params, bag, upstream))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub kind: PoolingKind,
    pub trials: usize,
    pub seed: u64,
    pub max_relative_error: GroupErrors,
    pub passed: bool,
}

/// Runs `trials` random checks for one attention kind. With `inject_fault`
/// the analytic `w` gradient is perturbed before comparison, which must
/// make the check fail.
pub fn run(kind: PoolingKind, trials: usize, seed: u64, inject_fault: bool) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(MivcError::Usage("gradient check needs at least one trial".into()));
    }
    if !kind.is_attention() {
        return Err(MivcError::Usage(format!(
            "gradient check covers attn and gated only, got {kind}"
        )));
    }
    let root = Rng::new(seed);
    let per_trial = par::map_range(trials, |t| -> Result<GroupErrors> {
        let mut rng = root.fork(t as u64 ^ ((kind as u64) << 32));
        let (params, bag, upstream) = random_case(kind, &mut rng)?;
        let mut analytic = pool_backward(&params, &bag, &upstream)?;
        if inject_fault {
            if let Some(dw) = analytic.d_w.as_mut() {
                dw[0] = dw[0] * 1.01 + 1e-3;
            }
        }
        let numeric = numerical_gradients(&params, &bag, &upstream, STEP);
        Ok(compare(&analytic, &numeric))
    });
    let mut worst = GroupErrors::default();
    for e in per_trial {
        worst.merge(&e?);
    }
    Ok(GradCheckReport {
        kind,
        trials,
        seed,
        passed: worst.max() < TOLERANCE,
        max_relative_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_a_cubic() {
        let mut x = vec![1.0, -2.0];
        let g = central_difference(&mut x, 1e-5, |v| v[0].powi(3) + 2.0 * v[1]);
        assert!((g[0] - 3.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
        assert_eq!(x, vec![1.0, -2.0]);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn attn_example_case_matches() {
        // K=3, M=4, N=3
        let mut rng = Rng::new(2024);
        let params = PoolingParams::init(PoolingKind::Attn, 3, 4, &mut rng).unwrap();
        let rows = (0..3).map(|_| rng.uniform_vector(4, 1.0).into_inner()).collect();
        let bag = Bag::from_rows("x", rows).unwrap();
        let up = rng.uniform_vector(4, 1.0);
        let analytic = pool_backward(&params, &bag, &up).unwrap();
        let numeric = numerical_gradients(&params, &bag, &up, STEP);
        let errs = compare(&analytic, &numeric);
        assert!(errs.max() < 1e-6, "{errs:?}");
    }

    #[test]
    fn both_kinds_pass_and_fault_is_caught() {
        for kind in [PoolingKind::Attn, PoolingKind::Gated] {
            assert!(run(kind, 20, 1, false).unwrap().passed);
            assert!(!run(kind, 3, 1, true).unwrap().passed);
        }
    }

    #[test]
    fn rejects_bad_requests() {
        assert!(matches!(run(PoolingKind::Attn, 0, 1, false), Err(MivcError::Usage(_))));
        assert!(matches!(run(PoolingKind::Avg, 1, 1, false), Err(MivcError::Usage(_))));
    }
}
