use mivc::gradcheck::{central_difference, relative_error, STEP};
use mivc::model::{self, EncoderKind, Model, OptimizerKind, Strategy, TrainConfig};
use mivc::par::Exec;
use mivc::{checkpoint, Bag, Rng};
use proptest::prelude::*;

fn config(strategy: Strategy, seed: u64) -> TrainConfig {
    TrainConfig {
        strategy,
        input_dim: 5,
        dim: 4,
        hidden: 3,
        classes: 3,
        encoder: EncoderKind::Mlp1,
        patch_shape: Some((2, 2)),
        concat_max_images: 3,
        concat_hidden: 5,
        freeze_encoder: false,
        epochs: 3,
        batch_size: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn random_bag(rng: &mut mivc::Rng, id: &str, n: usize, m: usize, classes: usize) -> Bag {
    let rows = (0..n).map(|_| (0..m).map(|_| rng.normal()).collect()).collect();
    let label = rng.range_inclusive(0, classes - 1);
    Bag::from_rows(id, rows).unwrap().with_label(label)
}

fn batch(seed: u64, count: usize) -> Vec<Bag> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|i| {
            let n = rng.range_inclusive(1, 5);
            random_bag(&mut rng, &format!("b{i}"), n, 5, 3)
        })
        .collect()
}

fn set_param(model: &mut Model, name: &str, values: &[f64]) {
    for (n, arr) in model.trainable_arrays_mut() {
        if n == name {
            arr.copy_from_slice(values);
        }
    }
}

/// Full-model check on a 2-bag batch: every trainable array against central
/// differences of the batch loss.
#[test]
fn model_gradients_match_finite_differences() {
    for strategy in Strategy::ALL {
        for seed in 0..3 {
            let model = Model::init(&config(strategy, seed)).unwrap();
            let bags = batch(100 + seed, 2);
            let (_, grads) = model.loss_and_grads(&bags).unwrap();
            let arrays: Vec<(&str, Vec<f64>)> = model
                .arrays()
                .into_iter()
                .filter(|a| a.trainable)
                .map(|a| (a.name, a.data.to_vec()))
                .collect();
            assert_eq!(arrays.len(), grads.arrays.len());
            for (name, mut values) in arrays {
                let analytic = grads.get(name).unwrap().to_vec();
                let numeric = central_difference(&mut values, STEP, |v| {
                    let mut probe = model.clone();
                    set_param(&mut probe, name, v);
                    probe.loss(&bags).unwrap()
                });
                let worst = analytic
                    .iter()
                    .zip(&numeric)
                    .map(|(&a, &n)| relative_error(a, n))
                    .fold(0.0, f64::max);
                assert!(worst < 1e-5, "{strategy} seed {seed} {name}: {worst:e}");
            }
        }
    }
}

#[test]
fn frozen_blocks_stay_bit_identical() {
    let bags = batch(7, 12);
    for strategy in [Strategy::Attn, Strategy::Gated, Strategy::ConcatEmbed] {
        for (fe, fp, fh) in [(true, false, false), (false, true, false), (false, false, true), (true, true, false)] {
            let cfg = TrainConfig {
                freeze_encoder: fe,
                freeze_pooling: fp,
                freeze_head: fh,
                optimizer: OptimizerKind::Adam,
                learning_rate: 0.05,
                ..config(strategy, 3)
            };
            let before = Model::init(&cfg).unwrap();
            let after = model::train(&cfg, &bags).unwrap().model;
            for (a, b) in before.arrays().iter().zip(after.arrays().iter()) {
                assert_eq!(a.name, b.name);
                let frozen = match a.name.split('.').next().unwrap() {
                    "encoder" => fe,
                    "pool" | "concat" => fp,
                    _ => fh,
                };
                if frozen {
                    assert!(!a.trainable);
                    assert_eq!(a.data, b.data, "{strategy} {} moved while frozen", a.name);
                } else {
                    assert_ne!(a.data, b.data, "{strategy} {} never moved", a.name);
                }
            }
        }
    }
}

#[test]
fn parallel_and_sequential_paths_agree_bitwise() {
    let bags = batch(11, 33);
    for strategy in Strategy::ALL {
        let model = Model::init(&config(strategy, 5)).unwrap();
        let (la, ga) = model.loss_and_grads_with(&bags, Exec::Auto).unwrap();
        let (ls, gs) = model.loss_and_grads_with(&bags, Exec::Sequential).unwrap();
        assert_eq!(la.to_bits(), ls.to_bits());
        assert_eq!(ga, gs);
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_roundtrip() {
    let bags = batch(13, 20);
    let dir = tempfile::tempdir().unwrap();
    for strategy in Strategy::ALL {
        let cfg = config(strategy, 21);
        let a = model::train(&cfg, &bags).unwrap().model;
        let b = model::train(&cfg, &bags).unwrap().model;
        assert_eq!(checkpoint::encode_model(&a), checkpoint::encode_model(&b));
        let path = dir.path().join(format!("{strategy}.mivm"));
        checkpoint::save(&a, &path).unwrap();
        let back = checkpoint::load(&path).unwrap();
        assert_eq!(back, a);
        for bag in &bags {
            assert_eq!(back.forward(bag).unwrap().logits, a.forward(bag).unwrap().logits);
        }
    }
}

fn permutation(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logits_are_permutation_invariant(seed in any::<u64>(), n in 1usize..=21, kind in 0usize..4) {
        let strategy = [Strategy::Avg, Strategy::Max, Strategy::Attn, Strategy::Gated][kind];
        let model = Model::init(&config(strategy, seed)).unwrap();
        let mut rng = Rng::new(seed);
        let bag = random_bag(&mut rng, "p", n, 5, 3);
        let shuffled = bag.permuted(&permutation(&mut rng, n)).unwrap();
        let a = model.forward(&bag).unwrap().logits;
        let b = model.forward(&shuffled).unwrap().logits;
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn single_and_concat_embed_ignore_the_tail(seed in any::<u64>(), n in 4usize..=10) {
        let mut rng = Rng::new(seed);
        let bag = random_bag(&mut rng, "t", n, 5, 3);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|i| bag.instance(i).to_vec()).collect();
        for row in rows.iter_mut().skip(3) {
            for x in row.iter_mut() {
                *x = rng.normal();
            }
        }
        let changed = Bag::from_rows("t", rows).unwrap();
        for strategy in [Strategy::Single, Strategy::ConcatEmbed] {
            let model = Model::init(&config(strategy, seed)).unwrap();
            prop_assert_eq!(model.forward(&bag).unwrap().logits, model.forward(&changed).unwrap().logits);
        }
    }
}
