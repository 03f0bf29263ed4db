use proptest::prelude::*;

use setpool::data::{gen_ambiguous_pair, make_louo_splits_with, read_posture_csv, write_posture_to, Instance};
use setpool::layers::{pool, softmax_xent, DropoutMask, PoolMode};
use setpool::model::{EmbeddingKind, Family, Mode, Model, ModelConfig};
use setpool::numkit::{Axis, Matrix, Reduction};
use setpool::optim::RmsProp;
use setpool::params::ParamStore;
use setpool::train::{EarlyStopping, Verdict};
use setpool::{Permutation, Rng, SetBatch};

fn random_set(rng: &mut Rng, n: usize, dim: usize, scale: f64) -> Matrix {
    Matrix::from_vec(n, dim, (0..n * dim).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn family_strategy() -> impl Strategy<Value = Family> {
    prop_oneof![Just(Family::Cdan), Just(Family::Pdan), Just(Family::Pcdan)]
}

fn pool_strategy() -> impl Strategy<Value = PoolMode> {
    prop_oneof![Just(PoolMode::Sum), Just(PoolMode::Average), Just(PoolMode::Max)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn eval_logits_ignore_element_order(
        seed in any::<u64>(),
        family in family_strategy(),
        pooling in pool_strategy(),
        n in 1usize..=12,
    ) {
        let mut rng = Rng::new(seed);
        let model = {
            let mut m = Model::build(&ModelConfig::family(family, 6, pooling), 3, &mut rng).unwrap();
            m.set_mode(Mode::Eval);
            m
        };
        let set = random_set(&mut rng, n, 3, 40.0);
        let perm = Permutation::random(&mut rng, n);
        let a = model.eval_logits(&SetBatch::build(std::slice::from_ref(&set)).unwrap()).unwrap();
        let b = model.eval_logits(&SetBatch::build(&[perm.apply_rows(&set).unwrap()]).unwrap()).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-9);
    }

    #[test]
    fn batching_does_not_change_predictions(seed in any::<u64>(), sizes in prop::collection::vec(1usize..=12, 1..6)) {
        let mut rng = Rng::new(seed);
        let model = Model::build(&ModelConfig::family(Family::Pcdan, 5, PoolMode::Max), 3, &mut rng).unwrap();
        let sets: Vec<Matrix> = sizes.iter().map(|&n| random_set(&mut rng, n, 3, 10.0)).collect();
        let together = model.eval_logits(&SetBatch::build(&sets).unwrap()).unwrap();
        for (i, s) in sets.iter().enumerate() {
            let alone = model.eval_logits(&SetBatch::build(std::slice::from_ref(s)).unwrap()).unwrap();
            let row = Matrix::from_vec(1, alone.cols(), together.row(i).to_vec()).unwrap();
            prop_assert!(alone.max_abs_diff(&row).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn masked_pooling_matches_per_set_reduction(seed in any::<u64>(), sizes in prop::collection::vec(1usize..=12, 1..6)) {
        let mut rng = Rng::new(seed);
        let sets: Vec<Matrix> = sizes.iter().map(|&n| random_set(&mut rng, n, 4, 3.0)).collect();
        let b = SetBatch::build(&sets).unwrap();
        for (mode, red) in [(PoolMode::Sum, Reduction::Sum), (PoolMode::Average, Reduction::Mean), (PoolMode::Max, Reduction::Max)] {
            let pooled = pool(&b, mode).unwrap();
            for (i, s) in sets.iter().enumerate() {
                let want = s.reduce(Axis::Col, red).unwrap();
                for (x, y) in pooled.row(i).iter().zip(want.row(0)) {
                    prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                }
            }
        }
    }

    #[test]
    fn xent_gradient_rows_sum_to_zero(seed in any::<u64>(), rows in 1usize..8) {
        let mut rng = Rng::new(seed);
        let logits = random_set(&mut rng, rows, 5, 30.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.below(5)).collect();
        let (loss, g) = softmax_xent(&logits, &labels).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        for r in g.iter_rows() {
            prop_assert!(r.iter().sum::<f64>().abs() <= 1e-12);
        }
    }

    #[test]
    fn rmsprop_first_step_is_bounded(seed in any::<u64>(), scale in 1e-6f64..1e6) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        store.add_weight("w", 3, 4, &mut rng);
        let before = store.flat_values();
        let grads = random_set(&mut rng, 3, 4, scale);
        store.split_mut().1[0] = grads;
        let mut opt = RmsProp::default();
        opt.step(&mut store).unwrap();
        let bound = opt.lr / (1.0 - opt.rho).sqrt() * (1.0 + 1e-12);
        for (a, b) in before.iter().zip(store.flat_values()) {
            prop_assert!((a - b).abs() <= bound);
        }
    }

    #[test]
    fn per_set_dropout_shares_masks(seed in any::<u64>(), sizes in prop::collection::vec(1usize..=6, 1..5)) {
        let mut rng = Rng::new(seed);
        let mut offsets = vec![0];
        for s in &sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let mask = DropoutMask::per_set(&mut rng, &offsets, 7, 0.5);
        for w in offsets.windows(2) {
            for r in w[0]..w[1] {
                prop_assert_eq!(mask.scale().row(r), mask.scale().row(w[0]));
            }
        }
    }

    #[test]
    fn best_loss_never_increases(losses in prop::collection::vec(0.0f64..10.0, 1..200), patience in 1usize..50) {
        let mut es = EarlyStopping::new(patience);
        let mut best = f64::INFINITY;
        for (i, &l) in losses.iter().enumerate() {
            let verdict = es.observe(l);
            prop_assert!(es.best() <= best);
            best = es.best();
            prop_assert_eq!(best, losses[..=i].iter().cloned().fold(f64::INFINITY, f64::min));
            if verdict == Verdict::Stop {
                prop_assert_eq!(i + 1 - es.best_epoch(), patience);
                break;
            }
        }
    }

    #[test]
    fn louo_plans_are_disjoint_and_balanced(seed in any::<u64>(), users in 2u32..5, per in 1usize..6) {
        let mut corpus = Vec::new();
        for u in 1..=users {
            for c in 1..=3 {
                for _ in 0..(2 * per + (u as usize % 3)) {
                    corpus.push(Instance { points: Matrix::zeros(3, 3), class_label: c, user_id: u });
                }
            }
        }
        let plan = make_louo_splits_with(&corpus, 1, seed, per).unwrap();
        let mut all: Vec<usize> = plan.train.iter().chain(&plan.validation).chain(&plan.test).copied().collect();
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), total);
        prop_assert_eq!(plan.test.len(), 3 * per);
        prop_assert_eq!(plan.train.len(), (users as usize - 1) * 3 * per);
        prop_assert_eq!(plan.validation.len(), plan.train.len());
        prop_assert!(plan.test.iter().all(|&i| corpus[i].user_id == 1));
    }

    #[test]
    fn ambiguous_pairs_are_exact(seed in any::<u64>(), n in 4usize..=16) {
        let (a, b) = gen_ambiguous_pair(&mut Rng::new(seed), n).unwrap();
        prop_assert_eq!(a.reduce(Axis::Col, Reduction::Sum).unwrap(), b.reduce(Axis::Col, Reduction::Sum).unwrap());
        prop_assert_eq!(a.reduce(Axis::Col, Reduction::Max).unwrap(), b.reduce(Axis::Col, Reduction::Max).unwrap());
        prop_assert_ne!(a, b);
    }

    #[test]
    fn posture_round_trip(seed in any::<u64>(), count in 1usize..6) {
        let mut rng = Rng::new(seed);
        let insts: Vec<Instance> = (0..count)
            .map(|_| {
                let n = rng.range_inclusive(1, 12);
                Instance {
                    points: random_set(&mut rng, n, 3, 500.0),
                    class_label: rng.range_inclusive(1, 5),
                    user_id: rng.below(20) as u32,
                }
            })
            .collect();
        let mut buf = Vec::new();
        write_posture_to(&mut buf, &insts).unwrap();
        let back = read_posture_csv(buf.as_slice(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, insts);
    }
}

#[test]
fn identity_embedding_needs_matching_width() {
    let cfg = ModelConfig::cdan(EmbeddingKind::None, 11, PoolMode::Sum);
    assert!(Model::build(&cfg, 3, &mut Rng::new(0)).is_err());
}
