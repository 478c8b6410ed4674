//! Non-pooling ways of feeding a bag to a single-image model: take the first
//! instance, tile all instances into a square grid, or concatenate a capped
//! number of embeddings and project them back down to one embedding.
//!
//! None of these are permutation invariant.

use serde::{Deserialize, Serialize};

use crate::error::{MivcError, Result};
use crate::numkern::{matvec_into, matvec_t_acc, Matrix, Rng, Vector};
use crate::pooling::{Bag, InstanceEmbedding, PooledOutput};

pub const DEFAULT_MAX_IMAGES: usize = 6;

/// E = e_1; weight 1 on the first instance and 0 elsewhere.
pub fn single_first(bag: &Bag) -> Result<PooledOutput> {
    if bag.is_empty() {
        return Err(MivcError::Precondition("cannot pool an empty bag".into()));
    }
    let mut alpha = Vector::zeros(bag.len());
    alpha[0] = 1.0;
    Ok(PooledOutput {
        embedding: Vector::new(bag.instance(0).to_vec()),
        alpha: Some(alpha),
        argmax_index: None,
        shape: bag.shape(),
    })
}

/// Square layout used to tile `filled` instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub side: usize,
    pub filled: usize,
    pub blank_value: f64,
}

impl GridSpec {
    pub fn for_count(n: usize) -> Self {
        GridSpec {
            side: grid_side(n),
            filled: n,
            blank_value: 0.0,
        }
    }

    pub fn blank_cells(&self) -> usize {
        self.side * self.side - self.filled
    }
}

/// Smallest `s >= 1` with `s * s >= n`.
pub fn grid_side(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s < n {
        s += 1;
    }
    while s > 1 && (s - 1) * (s - 1) >= n {
        s -= 1;
    }
    s.max(1)
}

/// Tiles shaped `(P, D)` instances row-major into a `side x side` grid of
/// blocks, giving one `(side*P, side*D)` instance. Unused cells hold
/// `blank_value`.
pub fn grid_concat(bag: &Bag, blank_value: f64) -> Result<(InstanceEmbedding, GridSpec)> {
    let (p, d) = bag
        .shape()
        .ok_or_else(|| MivcError::Usage("grid concatenation needs shaped (P, D) instances".into()))?;
    let spec = GridSpec {
        blank_value,
        ..GridSpec::for_count(bag.len())
    };
    let side = spec.side;
    let cols = side * d;
    let mut grid = vec![blank_value; side * p * cols];
    for (i, inst) in bag.instances().iter().enumerate() {
        let (r, c) = (i / side, i % side);
        for row in 0..p {
            let dst = (r * p + row) * cols + c * d;
            grid[dst..dst + d].copy_from_slice(&inst.values()[row * d..(row + 1) * d]);
        }
    }
    Ok((InstanceEmbedding::with_shape(grid, (side * p, side * d))?, spec))
}

/// Area-averages a `(side*P, side*D)` grid back down to `(P, D)`: each output
/// cell is the mean of a `side x side` block. Stands in for resizing the
/// tiled image to the encoder's fixed input resolution.
pub fn grid_downsample(grid: &InstanceEmbedding, side: usize) -> Result<InstanceEmbedding> {
    let (gp, gd) = grid
        .shape()
        .ok_or_else(|| MivcError::Usage("grid_downsample needs a shaped grid".into()))?;
    if side == 0 || gp % side != 0 || gd % side != 0 {
        return Err(MivcError::shape(
            "grid_downsample",
            format!("grid dims divisible by {side}"),
            format!("{gp}x{gd}"),
        ));
    }
    let (p, d) = (gp / side, gd / side);
    let scale = 1.0 / (side * side) as f64;
    let mut out = vec![0.0; p * d];
    let vals = grid.values();
    for gr in 0..gp {
        for gc in 0..gd {
            out[(gr / side) * d + gc / side] += vals[gr * gd + gc];
        }
    }
    out.iter_mut().for_each(|x| *x *= scale);
    InstanceEmbedding::with_shape(out, (p, d))
}

/// Grid-tile the bag and area-average it back to one `(P, D)` instance.
pub fn grid_pool(bag: &Bag) -> Result<PooledOutput> {
    let (grid, spec) = grid_concat(bag, 0.0)?;
    let pooled = grid_downsample(&grid, spec.side)?;
    Ok(PooledOutput {
        embedding: pooled.vector().clone(),
        alpha: None,
        argmax_index: None,
        shape: pooled.shape(),
    })
}

/// Gradient of [`grid_pool`] with respect to each instance.
pub fn grid_pool_backward(bag: &Bag, upstream: &Vector) -> Result<Vec<Vector>> {
    let (p, d) = bag
        .shape()
        .ok_or_else(|| MivcError::Usage("grid concatenation needs shaped (P, D) instances".into()))?;
    if upstream.len() != p * d {
        return Err(MivcError::shape(
            "grid_pool_backward",
            format!("length {}", p * d),
            format!("length {}", upstream.len()),
        ));
    }
    let side = grid_side(bag.len());
    let scale = 1.0 / (side * side) as f64;
    let mut grads = Vec::with_capacity(bag.len());
    for i in 0..bag.len() {
        let (r, c) = (i / side, i % side);
        let mut g = Vector::zeros(p * d);
        for row in 0..p {
            for col in 0..d {
                let (gr, gc) = (r * p + row, c * d + col);
                g[row * d + col] = scale * upstream[(gr / side) * d + gc / side];
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Two-layer projection of the concatenated first `max_images` embeddings:
/// `W2 relu(W1 [e_1; ...; e_max])`. Missing slots are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatProjParams {
    pub max_images: usize,
    pub w1: Matrix,
    pub w2: Matrix,
}

impl ConcatProjParams {
    pub fn new(max_images: usize, w1: Matrix, w2: Matrix) -> Result<Self> {
        let hidden = w1.rows();
        let dim = w2.rows();
        if max_images == 0 || hidden == 0 || w1.cols() != max_images * dim || w2.cols() != hidden {
            return Err(MivcError::shape(
                "concat projection",
                format!("W1 {hidden}x{} and W2 {dim}x{hidden}", max_images * dim),
                format!("W1 {}x{} and W2 {}x{}", w1.rows(), w1.cols(), w2.rows(), w2.cols()),
            ));
        }
        Ok(ConcatProjParams { max_images, w1, w2 })
    }

    pub fn zeros(max_images: usize, hidden: usize, dim: usize) -> Result<Self> {
        ConcatProjParams::new(
            max_images,
            Matrix::zeros(hidden, max_images * dim),
            Matrix::zeros(dim, hidden),
        )
    }

    /// Uniform fan-in init, W1 then W2.
    pub fn init(max_images: usize, hidden: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if max_images == 0 || hidden == 0 || dim == 0 {
            return Err(MivcError::Usage(format!(
                "concat projection needs positive sizes, got max_images={max_images} hidden={hidden} M={dim}"
            )));
        }
        let w1 = Matrix::uniform(hidden, max_images * dim, 1.0 / ((max_images * dim) as f64).sqrt(), rng);
        let w2 = Matrix::uniform(dim, hidden, 1.0 / (hidden as f64).sqrt(), rng);
        ConcatProjParams::new(max_images, w1, w2)
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w1.as_slice().len() + self.w2.as_slice().len()
    }

    fn concat(&self, bag: &Bag) -> Result<Vec<f64>> {
        let m = self.dim();
        if bag.dim() != m {
            return Err(MivcError::shape(
                "concat_project",
                format!("instances of dim {m}"),
                format!("instances of dim {}", bag.dim()),
            ));
        }
        let mut x = vec![0.0; self.max_images * m];
        for (slot, inst) in bag.instances().iter().take(self.max_images).enumerate() {
            x[slot * m..(slot + 1) * m].copy_from_slice(inst.values());
        }
        Ok(x)
    }
}

pub fn concat_project(params: &ConcatProjParams, bag: &Bag) -> Result<Vector> {
    let x = params.concat(bag)?;
    let mut h = vec![0.0; params.hidden()];
    matvec_into(&params.w1, &x, &mut h);
    h.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut out = vec![0.0; params.dim()];
    matvec_into(&params.w2, &h, &mut out);
    Ok(Vector::new(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcatProjGradients {
    pub d_w1: Matrix,
    pub d_w2: Matrix,
    /// One entry per bag instance; zero beyond `max_images`.
    pub d_instances: Vec<Vector>,
}

pub fn concat_project_backward(
    params: &ConcatProjParams,
    bag: &Bag,
    upstream: &Vector,
) -> Result<ConcatProjGradients> {
    let m = params.dim();
    if upstream.len() != m {
        return Err(MivcError::shape(
            "concat_project_backward",
            format!("length {m}"),
            format!("length {}", upstream.len()),
        ));
    }
    let x = params.concat(bag)?;
    let mut pre = vec![0.0; params.hidden()];
    matvec_into(&params.w1, &x, &mut pre);
    let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();

    let mut d_w2 = Matrix::zeros(m, params.hidden());
    d_w2.add_outer(1.0, upstream.as_slice(), &h);
    let mut d_h = vec![0.0; params.hidden()];
    matvec_t_acc(&params.w2, upstream.as_slice(), &mut d_h);
    for (g, &p) in d_h.iter_mut().zip(&pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    let mut d_w1 = Matrix::zeros(params.hidden(), x.len());
    d_w1.add_outer(1.0, &d_h, &x);
    let mut d_x = vec![0.0; x.len()];
    matvec_t_acc(&params.w1, &d_h, &mut d_x);
    let d_instances = (0..bag.len())
        .map(|n| {
            if n < params.max_images {
                Vector::new(d_x[n * m..(n + 1) * m].to_vec())
            } else {
                Vector::zeros(m)
            }
        })
        .collect();
    Ok(ConcatProjGradients {
        d_w1,
        d_w2,
        d_instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shaped(n: usize, p: usize, d: usize) -> Bag {
        let insts = (0..n)
            .map(|i| {
                let vals = (0..p * d).map(|j| (i * 100 + j + 1) as f64).collect::<Vec<_>>();
                InstanceEmbedding::with_shape(vals, (p, d)).unwrap()
            })
            .collect();
        Bag::new("g", insts).unwrap()
    }

    #[test]
    fn single_first_examples() {
        let b = Bag::from_rows("b", vec![vec![1.0, 2.0], vec![9.0, 9.0]]).unwrap();
        let out = single_first(&b).unwrap();
        assert_eq!(out.embedding.as_slice(), &[1.0, 2.0]);
        assert_eq!(out.alpha.unwrap().as_slice(), &[1.0, 0.0]);
        let b = Bag::from_rows("b", vec![vec![5.0]]).unwrap();
        assert_eq!(single_first(&b).unwrap().embedding.as_slice(), &[5.0]);
    }

    #[test]
    fn grid_side_rule() {
        let expected = [(1, 1), (2, 2), (4, 2), (5, 3), (9, 3), (10, 4), (16, 4), (17, 5), (21, 5)];
        for (n, side) in expected {
            assert_eq!(grid_side(n), side, "n={n}");
        }
    }

    #[test]
    fn grid_of_four_has_no_blanks() {
        let b = shaped(4, 2, 2);
        let (g, spec) = grid_concat(&b, 0.0).unwrap();
        assert_eq!(g.shape(), Some((4, 4)));
        assert_eq!(spec.blank_cells(), 0);
        // instance 1 sits top-right, instance 2 bottom-left
        assert_eq!(g.row(0).unwrap(), &[1.0, 2.0, 101.0, 102.0]);
        assert_eq!(g.row(3).unwrap(), &[203.0, 204.0, 303.0, 304.0]);
    }

    #[test]
    fn grid_of_five_fills_four_blank_blocks() {
        let b = shaped(5, 2, 2);
        let (g, spec) = grid_concat(&b, 0.0).unwrap();
        assert_eq!(g.shape(), Some((6, 6)));
        assert_eq!(spec.side, 3);
        assert_eq!(spec.blank_cells(), 4);
        assert_eq!(g.values().iter().filter(|&&v| v == 0.0).count(), 4 * 4);
        assert_eq!(g.row(2).unwrap(), &[301.0, 302.0, 401.0, 402.0, 0.0, 0.0]);
    }

    #[test]
    fn grid_of_one_is_identity() {
        let b = shaped(1, 2, 3);
        let (g, _) = grid_concat(&b, 0.0).unwrap();
        assert_eq!(&g, &b.instances()[0]);
    }

    #[test]
    fn grid_needs_shape() {
        let b = Bag::from_rows("b", vec![vec![1.0]]).unwrap();
        assert!(matches!(grid_concat(&b, 0.0), Err(MivcError::Usage(_))));
    }

    #[test]
    fn downsample_of_single_is_identity() {
        let b = shaped(1, 2, 2);
        let out = grid_pool(&b).unwrap();
        assert_eq!(out.embedding.as_slice(), b.instance(0));
    }

    #[test]
    fn downsample_averages_blocks() {
        let g = InstanceEmbedding::from_rows(&[vec![1.0, 3.0, 0.0, 0.0], vec![5.0, 7.0, 4.0, 4.0]]).unwrap();
        let out = grid_downsample(&g, 2).unwrap();
        assert_eq!(out.shape(), Some((1, 2)));
        assert_eq!(out.values(), &[4.0, 2.0]);
    }

    #[test]
    fn grid_backward_matches_unit_bumps() {
        let b = shaped(3, 2, 2);
        let up = Vector::new(vec![0.3, -1.0, 2.0, 0.5]);
        let grads = grid_pool_backward(&b, &up).unwrap();
        let base = grid_pool(&b).unwrap();
        // grid_pool is linear, so a unit bump recovers the gradient exactly
        for n in 0..3 {
            for j in 0..4 {
                let mut insts = b.instances().to_vec();
                let mut v = insts[n].values().to_vec();
                v[j] += 1.0;
                insts[n] = InstanceEmbedding::with_shape(v, (2, 2)).unwrap();
                let bumped = grid_pool(&Bag::new("g", insts).unwrap()).unwrap();
                let delta: f64 = bumped
                    .embedding
                    .iter()
                    .zip(base.embedding.iter())
                    .zip(up.iter())
                    .map(|((a, c), u)| (a - c) * u)
                    .sum();
                assert!((delta - grads[n][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_project_zero_params() {
        let p = ConcatProjParams::zeros(6, 4, 2).unwrap();
        let b = Bag::from_rows("b", vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(concat_project(&p, &b).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_project_selector_reproduces_first() {
        // max_images=1, M=hidden=2: W1 = W2 = I passes a non-negative e_1 through
        let id = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = ConcatProjParams::new(1, id.clone(), id).unwrap();
        let b = Bag::from_rows("b", vec![vec![3.0, 0.5]]).unwrap();
        assert_eq!(concat_project(&p, &b).unwrap().as_slice(), &[3.0, 0.5]);
        // two slots, W1 = [I 0] selects slot 0
        let w1 = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let w2 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = ConcatProjParams::new(2, w1, w2).unwrap();
        assert_eq!(concat_project(&p, &b).unwrap().as_slice(), &[3.0, 0.5]);
    }

    #[test]
    fn concat_project_ignores_tail() {
        let mut rng = Rng::new(5);
        let p = ConcatProjParams::init(6, 8, 3, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..8).map(|_| rng.uniform_vector(3, 1.0).into_inner()).collect();
        let base = concat_project(&p, &Bag::from_rows("a", rows.clone()).unwrap()).unwrap();
        let mut changed = rows;
        changed[6] = vec![9.0, 9.0, 9.0];
        changed[7] = vec![-9.0, 4.0, 1.0];
        let out = concat_project(&p, &Bag::from_rows("a", changed).unwrap()).unwrap();
        assert_eq!(base, out);
    }

    #[test]
    fn concat_project_rejects_wrong_dim() {
        let p = ConcatProjParams::zeros(2, 2, 3).unwrap();
        let b = Bag::from_rows("b", vec![vec![1.0, 2.0]]).unwrap();
        assert!(matches!(concat_project(&p, &b), Err(MivcError::Shape { .. })));
    }

    #[test]
    fn baselines_are_order_sensitive() {
        let mut rng = Rng::new(11);
        let insts: Vec<InstanceEmbedding> = (0..5)
            .map(|_| InstanceEmbedding::with_shape(rng.uniform_vector(4, 1.0), (2, 2)).unwrap())
            .collect();
        let b = Bag::new("o", insts).unwrap();
        let r = b.permuted(&[4, 3, 2, 1, 0]).unwrap();
        assert_ne!(single_first(&b).unwrap().embedding, single_first(&r).unwrap().embedding);
        assert_ne!(grid_concat(&b, 0.0).unwrap().0, grid_concat(&r, 0.0).unwrap().0);
        let p = ConcatProjParams::init(6, 8, 4, &mut rng).unwrap();
        assert_ne!(concat_project(&p, &b).unwrap(), concat_project(&p, &r).unwrap());
    }

    #[test]
    fn concat_backward_matches_finite_difference() {
        let mut rng = Rng::new(21);
        let p = ConcatProjParams::init(3, 5, 2, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|_| rng.uniform_vector(2, 1.0).into_inner()).collect();
        let b = Bag::from_rows("c", rows.clone()).unwrap();
        let up = rng.uniform_vector(2, 1.0);
        let g = concat_project_backward(&p, &b, &up).unwrap();
        let loss = |p: &ConcatProjParams, rows: &[Vec<f64>]| {
            concat_project(p, &Bag::from_rows("c", rows.to_vec()).unwrap())
                .unwrap()
                .dot(&up)
                .unwrap()
        };
        let h = 1e-6;
        for i in 0..p.w1.as_slice().len() {
            let (mut a, mut c) = (p.clone(), p.clone());
            a.w1.as_mut_slice()[i] += h;
            c.w1.as_mut_slice()[i] -= h;
            let fd = (loss(&a, &rows) - loss(&c, &rows)) / (2.0 * h);
            assert!((fd - g.d_w1.as_slice()[i]).abs() < 1e-7);
        }
        for n in 0..4 {
            for j in 0..2 {
                let (mut a, mut c) = (rows.clone(), rows.clone());
                a[n][j] += h;
                c[n][j] -= h;
                let fd = (loss(&p, &a) - loss(&p, &c)) / (2.0 * h);
                assert!((fd - g.d_instances[n][j]).abs() < 1e-7);
            }
        }
    }
}
