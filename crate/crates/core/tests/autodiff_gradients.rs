//! Adjoints of every primitive against central finite differences.
//!
//! Randomized sweeps run the double-precision instantiation of the engine:
//! in single precision the difference quotient carries rounding noise of
//! roughly ulp(loss) / eps, which swamps small gradient coordinates.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use toponet::autodiff::{
    grad_check, Coeff, GradCheckConfig, Mode, ParamId, ParamStore, Role, RunningStats, Scalar, Tape, Tensor, Var,
};

fn random_tensor<T: Scalar>(rng: &mut Xoshiro256StarStar, rows: usize, cols: usize, scale: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::of(rng.random_range(-scale..scale))).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Contracts `y` with a fixed random projection so every output element
/// carries a distinct upstream gradient.
fn project<T: Scalar>(tape: &mut Tape<T>, y: Var, seed: u64) -> Var {
    let (r, c) = tape.value(y).shape();
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed ^ 0xABCD);
    let proj = tape.constant(random_tensor(&mut rng, r, c, 1.0));
    let p = tape.mul(y, proj).unwrap();
    tape.sum(p)
}

fn shape(rng: &mut Xoshiro256StarStar) -> (usize, usize) {
    (rng.random_range(2..=8), rng.random_range(1..=16))
}

const SEEDS: u64 = 20;
const TOL: f64 = 1e-3;

fn check<T: Scalar, F>(store: &mut ParamStore<T>, f: F) -> f64
where
    F: FnMut(&ParamStore<T>, &mut Tape<T>) -> toponet::autodiff::Result<Var>,
{
    let cfg = GradCheckConfig { eps: 1e-3, max_coords: 400, ..Default::default() };
    grad_check(store, f, &cfg).unwrap().max_rel_error
}

#[test]
fn linear_matches_finite_differences() {
    // single 3x4 case at the tighter tolerance
    let mut rng = Xoshiro256StarStar::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    let x = store.add(random_tensor(&mut rng, 3, 4, 1.0), Role::NodeWeight);
    let w = store.add(random_tensor(&mut rng, 4, 2, 1.0), Role::NodeWeight);
    let b = store.add(random_tensor(&mut rng, 1, 2, 1.0), Role::NodeWeight);
    let err = check(&mut store, |s, t| {
        let (xv, wv, bv) = (t.param(s, x), t.param(s, w), t.param(s, b));
        let y = t.linear(xv, wv, bv)?;
        Ok(project(t, y, 1))
    });
    assert!(err < 1e-4, "linear 3x4 relative error {err}");

    for seed in 0..SEEDS {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let (n, k) = shape(&mut rng);
        let m = rng.random_range(1..=16);
        let mut store = ParamStore::<f64>::new();
        let x = store.add(random_tensor(&mut rng, n, k, 1.0), Role::NodeWeight);
        let w = store.add(random_tensor(&mut rng, k, m, 1.0), Role::NodeWeight);
        let b = store.add(random_tensor(&mut rng, 1, m, 1.0), Role::NodeWeight);
        let err = check(&mut store, |s, t| {
            let (xv, wv, bv) = (t.param(s, x), t.param(s, w), t.param(s, b));
            let y = t.linear(xv, wv, bv)?;
            Ok(project(t, y, seed))
        });
        assert!(err < TOL, "seed {seed}: linear relative error {err}");
    }
}

#[test]
fn weighted_sum_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let (n, k) = shape(&mut rng);
        let count = rng.random_range(1..=5);
        let mut store = ParamStore::<f64>::new();
        let xs: Vec<ParamId> =
            (0..count).map(|_| store.add(random_tensor(&mut rng, n, k, 1.0), Role::NodeWeight)).collect();
        let alpha = store.add(random_tensor(&mut rng, 1, count, 1.5), Role::EdgeWeight);
        let err = check(&mut store, |s, t| {
            let inputs: Vec<Var> = xs.iter().map(|&id| t.param(s, id)).collect();
            let a = t.param(s, alpha);
            let coeffs: Vec<Coeff> = (0..count).map(|i| Coeff { var: a, index: i }).collect();
            let y = t.weighted_sum(&inputs, &coeffs)?;
            Ok(project(t, y, seed))
        });
        assert!(err < TOL, "seed {seed}: weighted_sum relative error {err}");
    }
}

#[test]
fn relu_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let (n, k) = shape(&mut rng);
        let mut store = ParamStore::<f64>::new();
        // keep inputs away from the kink so the difference quotient is exact
        let data: Vec<f64> = (0..n * k)
            .map(|_| {
                let v: f64 = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) { v } else { -v }
            })
            .collect();
        let x = store.add(Tensor::from_vec(n, k, data).unwrap(), Role::NodeWeight);
        let err = check(&mut store, |s, t| {
            let xv = t.param(s, x);
            let y = t.relu(xv);
            Ok(project(t, y, seed))
        });
        assert!(err < TOL, "seed {seed}: relu relative error {err}");
    }
}

#[test]
fn batch_norm_matches_finite_differences() {
    // the 4x3 case in single precision
    let mut rng = Xoshiro256StarStar::seed_from_u64(3);
    let mut store = ParamStore::<f32>::new();
    let x = store.add(random_tensor(&mut rng, 4, 3, 2.0), Role::NodeWeight);
    let g = store.add(random_tensor(&mut rng, 1, 3, 2.0), Role::NormScale);
    let b = store.add(random_tensor(&mut rng, 1, 3, 1.0), Role::NormShift);
    let stats = RunningStats::new(3);
    let err = check(&mut store, |s, t| {
        let (xv, gv, bv) = (t.param(s, x), t.param(s, g), t.param(s, b));
        let (y, _) = t.batch_norm(xv, gv, bv, &stats, Mode::Train)?;
        Ok(project(t, y, 3))
    });
    assert!(err < TOL, "batch_norm 4x3 relative error {err}");

    // normalized outputs sum to zero per column, so the input gradient is a
    // difference of nearly equal terms; the randomized sweep runs in f64
    for seed in 0..SEEDS {
        for mode in [Mode::Train, Mode::Eval] {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let (n, k) = shape(&mut rng);
            let mut store = ParamStore::<f64>::new();
            let x = store.add(random_tensor(&mut rng, n, k, 2.0), Role::NodeWeight);
            let g = store.add(random_tensor(&mut rng, 1, k, 2.0), Role::NormScale);
            let b = store.add(random_tensor(&mut rng, 1, k, 1.0), Role::NormShift);
            let stats = RunningStats {
                mean: (0..k).map(|_| rng.random_range(-0.5..0.5)).collect(),
                var: (0..k).map(|_| rng.random_range(0.5..2.0)).collect(),
            };
            let err = check(&mut store, |s, t| {
                let (xv, gv, bv) = (t.param(s, x), t.param(s, g), t.param(s, b));
                let (y, _) = t.batch_norm(xv, gv, bv, &stats, mode)?;
                Ok(project(t, y, seed))
            });
            assert!(err < TOL, "seed {seed} {mode:?}: batch_norm relative error {err}");
        }
    }
}

#[test]
fn cross_entropy_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let n = rng.random_range(1..=8);
        let k = rng.random_range(2..=16);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let smoothing = if seed % 2 == 0 { 0.0 } else { 0.1 };
        let mut store = ParamStore::<f64>::new();
        let logits = store.add(random_tensor(&mut rng, n, k, 2.0), Role::Classifier);
        let err = check(&mut store, |s, t| {
            let l = t.param(s, logits);
            t.softmax_cross_entropy(l, &labels, smoothing)
        });
        assert!(err < TOL, "seed {seed}: cross-entropy relative error {err}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    // the logit gradient is (softmax - target) / batch; targets sum to one
    let mut rng = Xoshiro256StarStar::seed_from_u64(9);
    let mut store = ParamStore::<f32>::new();
    let logits = store.add(random_tensor(&mut rng, 6, 10, 5.0), Role::Classifier);
    let mut tape = Tape::new();
    let l = tape.param(&store, logits);
    let loss = tape.softmax_cross_entropy(l, &[0, 1, 2, 3, 4, 5], 0.1).unwrap();
    tape.backward(loss, &mut store).unwrap();
    let g = store.grad(logits);
    for r in 0..6 {
        let row_sum: f64 = g.row(r).iter().map(|&v| v as f64 * 6.0).sum();
        assert!(row_sum.abs() < 1e-6, "row {r}: softmax sums to {}", 1.0 + row_sum);
    }
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::<f32>::new();
    let w = store.add(Tensor::scalar(3.0), Role::NodeWeight);
    let unused = store.add(Tensor::full(2, 2, 5.0), Role::NodeWeight);
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let sq = tape.mul(wv, wv).unwrap();
    tape.backward(sq, &mut store).unwrap();
    assert_eq!(store.grad(w).item(), 6.0);
    assert!(store.grad(unused).data().iter().all(|&g| g == 0.0));

    let mut tape = Tape::new();
    let m = tape.param(&store, unused);
    assert!(tape.backward(m, &mut store).is_err());
}

#[test]
fn alpha_into_relu_masked_node_has_zero_gradient() {
    // node input is negative everywhere, so the ReLU kills the aggregate
    let mut store = ParamStore::<f32>::new();
    let alpha = store.add(Tensor::from_vec(1, 2, vec![1.0, 0.5]).unwrap(), Role::EdgeWeight);
    let build = |s: &ParamStore<f32>, t: &mut Tape<f32>| {
        let x0 = t.constant(Tensor::from_vec(2, 2, vec![-1.0, -2.0, -0.5, -3.0]).unwrap());
        let x1 = t.constant(Tensor::from_vec(2, 2, vec![-0.2, -1.0, -1.5, -0.1]).unwrap());
        let a = t.param(s, alpha);
        let agg = t.weighted_sum(&[x0, x1], &[Coeff { var: a, index: 0 }, Coeff { var: a, index: 1 }])?;
        let h = t.relu(agg);
        Ok(project(t, h, 4))
    };
    let mut tape = Tape::new();
    let loss = build(&store, &mut tape).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(alpha).data(), &[0.0, 0.0]);
    let report = grad_check(&mut store, build, &GradCheckConfig::default()).unwrap();
    assert_eq!(report.worst.unwrap().numeric, 0.0);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(5);
    let mut store = ParamStore::<f32>::new();
    let x = store.add(random_tensor(&mut rng, 4, 6, 1.0), Role::NodeWeight);
    let w = store.add(random_tensor(&mut rng, 6, 3, 1.0), Role::NodeWeight);
    let b = store.add(random_tensor(&mut rng, 1, 3, 1.0), Role::NodeWeight);
    let (ca, cb) = (0.7f32, -1.3f32);

    let losses = |s: &ParamStore<f32>, t: &mut Tape<f32>| {
        let (xv, wv, bv) = (t.param(s, x), t.param(s, w), t.param(s, b));
        let y = t.linear(xv, wv, bv).unwrap();
        let h = t.relu(y);
        let l1 = project(t, h, 1);
        let l2 = t.softmax_cross_entropy(y, &[0, 1, 2, 0], 0.1).unwrap();
        (l1, l2)
    };
    let grads_of = |which: u8, store: &mut ParamStore<f32>| {
        let mut tape = Tape::new();
        let (l1, l2) = losses(store, &mut tape);
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => {
                let a = tape.scale(l1, ca);
                let b2 = tape.scale(l2, cb);
                tape.add(a, b2).unwrap()
            }
        };
        tape.backward(loss, store).unwrap();
        [x, w, b].map(|id| store.grad(id).clone())
    };
    let g1 = grads_of(1, &mut store);
    let g2 = grads_of(2, &mut store);
    let gc = grads_of(0, &mut store);
    for k in 0..3 {
        for i in 0..gc[k].len() {
            let expected = ca as f64 * g1[k].data()[i] as f64 + cb as f64 * g2[k].data()[i] as f64;
            let got = gc[k].data()[i] as f64;
            assert!((got - expected).abs() <= 1e-6 * expected.abs().max(1.0), "{got} vs {expected}");
        }
    }
}

#[test]
fn eval_mode_leaves_running_stats_untouched() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 7.0]).unwrap());
    let g = tape.constant(Tensor::full(1, 2, 1.0));
    let b = tape.constant(Tensor::zeros(1, 2));
    let stats = RunningStats { mean: vec![0.5, -0.5], var: vec![2.0, 3.0] };
    let before = stats.clone();
    let (_, updated) = tape.batch_norm(x, g, b, &stats, Mode::Eval).unwrap();
    assert!(updated.is_none());
    assert_eq!(stats, before);
}
