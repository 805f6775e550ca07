#![allow(clippy::excessive_precision, clippy::approx_constant)] // reference digits kept as printed

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use preftree::loss::synthetic::{clusters, ClusterSpec};
use preftree::loss::{
    bt_loss, dpo_loss, dr_loss, kto_loss, log_sigmoid, nca_loss, objective_loss, sigmoid, train_toy_rm, ultra_loss,
    LossError, Objective, PairSource, PolicyPairLogRatio, PrefExample, RewardParams, TrainConfig,
};
use preftree::Scalar;

const H: f64 = 1e-5;
const LN2: f64 = std::f64::consts::LN_2;

/// `-ln(1 + e^-x)` evaluated at 50 significant digits.
const LOG_SIGMOID_REFERENCE: &[(f64, f64)] = &[
    (-10000.0, -10000.0),
    (-745.5, -745.5),
    (-40.0, -40.000000000000000004),
    (-20.0, -20.00000000206115362),
    (-3.7, -3.7244228459337793328),
    (-1.0, -1.313261687518222834),
    (-1e-08, -0.69314718555994532192),
    (0.0, -0.69314718055994530942),
    (1e-08, -0.69314717555994532192),
    (0.25, -0.57593941987884356221),
    (1.0, -0.31326168751822283405),
    (2.5, -0.078889734292549623344),
    (17.0, -4.1399376330897474477e-8),
    (36.0, -2.3195228302435691193e-16),
    (40.0, -4.2483542552915889863e-18),
    (700.0, -9.8596765437597708567e-305),
    (-10.005615, -10.005660144704471901),
    (-58.7797, -58.779699999999998283),
    (39.024781, -1.1265564390734945848e-17),
    (-24.163217, -24.163217000032065753),
    (-15.790597, -15.79059713874930832),
    (-36.760638, -36.760638000000000256),
    (7.92098, -0.00036298048127753232637),
    (-40.597461, -40.597461000000002687),
    (-45.087974, -45.087974000000002661),
    (-8.047648, -8.0479678021913439985),
    (7.449419, -0.00058161035982507666231),
    (-39.078773, -39.078772999999998216),
    (6.38653, -0.0016826733767313562557),
    (-17.411834, -17.411834027424363139),
    (54.967774, -1.3421438611291470322e-24),
    (-49.044708, -49.04470799999999997),
    (57.436799, -1.1363579015386260933e-25),
    (-10.545673, -10.545699306719598824),
    (0.472244, -0.48464672861529549086),
    (-42.22246, -42.222459999999998104),
    (26.276057, -3.8766218451544475994e-12),
    (-37.203435, -37.203434999999998992),
    (-19.012749, -19.012749005531819228),
    (-57.177454, -57.177453999999997336),
    (-19.257867, -19.257867004329270516),
    (56.097895, -4.3350464481206224834e-25),
    (57.455815, -1.1149530817192195736e-25),
    (29.343605, -1.803990596281366686e-13),
    (-59.585447, -59.585447000000002049),
    (52.82862, -1.1397821399803288838e-23),
    (44.492036, -4.7572313976710019714e-20),
    (32.500121, -7.6802753156631466829e-15),
];

#[test]
fn log_sigmoid_matches_extended_precision() {
    for &(x, want) in LOG_SIGMOID_REFERENCE {
        let got = log_sigmoid(x);
        let rel = (got - want).abs() / want.abs();
        assert!(rel <= 1e-12, "x={x}: {got} vs {want} (rel {rel:e})");
    }
    assert!((log_sigmoid(1e4f64)).abs() < 1e-300);
    assert!((log_sigmoid(-1e4f64) + 1e4).abs() < 1e-9);
}

#[test]
fn log_sigmoid_is_monotone_and_bounded() {
    let mut prev = f64::NEG_INFINITY;
    for k in -4000..=4000 {
        let v = log_sigmoid(k as f64 * 0.01);
        assert!(v <= 0.0 && v >= prev);
        prev = v;
    }
}

#[test]
fn scalar_examples() {
    let bt = bt_loss(0.0, 0.0);
    assert!((bt.loss - LN2).abs() < 1e-12);
    assert_eq!((bt.d_chosen, bt.d_rejected), (-0.5, 0.5));
    assert!((bt_loss(2.0f64, -1.0).loss - 0.048587).abs() < 1e-6);
    assert!((dr_loss(0.0, 0.0).loss - 2.0 * LN2).abs() < 1e-12);
    assert!((dr_loss(2.0f64, -1.0).loss - 0.440190).abs() < 1e-6);
    assert!(dr_loss(1e3, -1e3).loss < 1e-300);
    assert!((dpo_loss(&PolicyPairLogRatio::new(1.0f64, -1.0), 0.1).loss - 0.598139).abs() < 1e-6);
    for c in [-3.0, 0.0, 42.0] {
        assert!((dpo_loss(&PolicyPairLogRatio::new(c, c), 0.1).loss - LN2).abs() < 1e-12);
    }
    let kto = kto_loss(&PolicyPairLogRatio::new(0.0f64, 0.0), 0.1, 1.33, 0.0).unwrap();
    assert!((kto.loss - 1.165).abs() < 1e-12);
}

#[test]
fn kto_rejects_non_positive_ratio() {
    let p = PolicyPairLogRatio::new(0.0, 0.0);
    for bad in [0.0, -1.0, f64::NAN] {
        assert!(matches!(kto_loss(&p, 0.1, bad, 0.0), Err(LossError::Config(_))));
    }
}

#[test]
fn ultra_by_source() {
    let params = RewardParams { w: vec![0.0; 3], b: 0.0 };
    let mut e = PrefExample { phi_chosen: vec![1.0, -2.0, 0.5], phi_rejected: vec![0.3, 0.0, 9.0], source: PairSource::TreePipeline };
    assert!((ultra_loss(&e, &params).loss - 3.0 * LN2).abs() < 1e-9);
    e.source = PairSource::General;
    assert!((ultra_loss(&e, &params).loss - LN2).abs() < 1e-9);
}

fn random_example(rng: &mut ChaCha8Rng, dim: usize) -> (PrefExample<f64>, RewardParams<f64>) {
    let v = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
    let source = if rng.gen_bool(0.5) { PairSource::TreePipeline } else { PairSource::General };
    let e = PrefExample { phi_chosen: v(rng), phi_rejected: v(rng), source };
    let p = RewardParams { w: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), b: rng.gen_range(-1.0..1.0) };
    (e, p)
}

#[test]
fn ultra_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (e, p) = random_example(&mut rng, 4);
        let g = ultra_loss(&e, &p).grad;
        for j in 0..=p.w.len() {
            let f = |x: f64| {
                let mut q = p.clone();
                if j < q.w.len() { q.w[j] = x } else { q.b = x }
                ultra_loss(&e, &q).loss
            };
            let x0 = if j < p.w.len() { p.w[j] } else { p.b };
            let analytic = if j < p.w.len() { g.w[j] } else { g.b };
            worst = worst.max(common::rel_err(analytic, common::central_diff(f, x0, H)));
        }
    }
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}

type PairFn = fn(&PolicyPairLogRatio<f64>, f64, f64, f64) -> (f64, f64, f64);

fn pair_losses() -> Vec<(&'static str, PairFn)> {
    vec![
        ("bt", |p, _, _, _| { let l = bt_loss(p.delta_chosen, p.delta_rejected); (l.loss, l.d_chosen, l.d_rejected) }),
        ("dr", |p, _, _, _| { let l = dr_loss(p.delta_chosen, p.delta_rejected); (l.loss, l.d_chosen, l.d_rejected) }),
        ("dpo", |p, b, _, _| { let l = dpo_loss(p, b); (l.loss, l.d_chosen, l.d_rejected) }),
        ("kto", |p, b, lam, z| { let l = kto_loss(p, b, lam, z).unwrap(); (l.loss, l.d_chosen, l.d_rejected) }),
        ("nca", |p, b, _, _| { let l = nca_loss(p, b); (l.loss, l.d_chosen, l.d_rejected) }),
    ]
}

#[test]
fn pair_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (name, f) in pair_losses() {
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let p = PolicyPairLogRatio::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0));
            let (beta, lam, z) = (rng.gen_range(0.05..1.0), rng.gen_range(0.5..2.0), rng.gen_range(-1.0..1.0));
            let (_, dc, dr) = f(&p, beta, lam, z);
            let fc = |x: f64| f(&PolicyPairLogRatio::new(x, p.delta_rejected), beta, lam, z).0;
            let fr = |x: f64| f(&PolicyPairLogRatio::new(p.delta_chosen, x), beta, lam, z).0;
            worst = worst.max(common::rel_err(dc, common::central_diff(fc, p.delta_chosen, H)));
            worst = worst.max(common::rel_err(dr, common::central_diff(fr, p.delta_rejected, H)));
        }
        assert!(worst < 1e-6, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn relative_losses_are_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (a, b, c): (f64, f64, f64) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-10.0..10.0));
        assert!((bt_loss(a, b).loss - bt_loss(a + c, b + c).loss).abs() <= 1e-12);
        let p = PolicyPairLogRatio::new(a, b);
        let q = PolicyPairLogRatio::new(a + c, b + c);
        assert!((dpo_loss(&p, 0.1).loss - dpo_loss(&q, 0.1).loss).abs() <= 1e-12);
        let g = dpo_loss(&p, 0.1);
        assert_eq!(g.d_chosen + g.d_rejected, 0.0);
    }
}

#[test]
fn absolute_losses_are_not_shift_invariant() {
    for (a, b) in [(0.0f64, 0.0), (1.0, -1.0), (2.0, 0.5)] {
        let p = PolicyPairLogRatio::new(a, b);
        let q = PolicyPairLogRatio::new(a + 1.0, b + 1.0);
        assert!((dr_loss(a, b).loss - dr_loss(a + 1.0, b + 1.0).loss).abs() > 1e-3);
        let k = |x: &PolicyPairLogRatio<f64>| kto_loss(x, 0.1, 1.33, 0.0).unwrap().loss;
        assert!((k(&p) - k(&q)).abs() > 1e-3);
        assert!((nca_loss(&p, 0.1).loss - nca_loss(&q, 0.1).loss).abs() > 1e-3);
    }
    let g = nca_loss(&PolicyPairLogRatio::new(0.0, 0.0), 0.1);
    assert!(g.d_chosen < 0.0 && g.d_rejected > 0.0);
}

#[test]
fn dr_is_convex_and_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let (a, b) = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        let h = 1e-2;
        let f = |x: f64, y: f64| dr_loss(x, y).loss;
        assert!(f(a, b) >= 0.0);
        assert!(f(a + h, b) + f(a - h, b) - 2.0 * f(a, b) > 0.0);
        assert!(f(a, b + h) + f(a, b - h) - 2.0 * f(a, b) > 0.0);
        let g = dr_loss(a, b);
        assert!(g.d_chosen < 0.0 && g.d_rejected > 0.0);
    }
}

#[test]
fn sigmoid_matches_log_sigmoid() {
    for k in -300..300 {
        let x = k as f64 * 0.1;
        assert!((sigmoid(x).ln() - log_sigmoid(x)).abs() < 1e-12);
    }
}

fn separable(n: usize, bias_feature: bool) -> Vec<PrefExample<f64>> {
    clusters(&ClusterSpec { n, dim: 6, separation: 3.0, noise: 1.0, bias_feature, seed: 5, ..ClusterSpec::default() })
}

#[test]
fn ultra_training_grounds_rewards() {
    let data = separable(1000, false);
    let cfg = TrainConfig { steps: 300, learning_rate: 0.1, ..TrainConfig::default() };
    let (_, trace) = train_toy_rm(&data, &cfg).unwrap();
    assert_eq!(trace.len(), 300);
    assert!(*trace.chosen_mean.last().unwrap() > 0.0);
    assert!(*trace.rejected_mean.last().unwrap() < 0.0);
    for w in trace.chosen_mean[30..].windows(2) {
        assert!(w[1] >= w[0], "chosen mean decreased: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn bt_leaves_shared_bias_untouched() {
    let data = separable(1000, true);
    let cfg = TrainConfig { steps: 200, objective: Objective::BtOnly, init_bias: 0.37, ..TrainConfig::default() };
    let (params, _) = train_toy_rm(&data, &cfg).unwrap();
    assert!((params.b - 0.37).abs() <= 1e-9);
    for e in data.iter().take(50) {
        assert_eq!(objective_loss(Objective::BtOnly, e, &params).grad.b, 0.0);
    }
    // the absolute term does move it
    let cfg = TrainConfig { objective: Objective::Ultra, ..cfg };
    let (params, _) = train_toy_rm(&data, &cfg).unwrap();
    assert!((params.b - 0.37).abs() > 1e-3);
}

#[test]
fn training_is_deterministic() {
    let data = separable(200, false);
    let cfg = TrainConfig { steps: 50, seed: 9, init_scale: 0.5, ..TrainConfig::default() };
    let a = train_toy_rm(&data, &cfg).unwrap();
    let b = train_toy_rm(&data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1.to_csv(), b.1.to_csv());
}

fn generic_bt_at_origin<F: Scalar>() -> F {
    bt_loss(F::zero(), F::zero()).loss
}

#[test]
fn f32_kernels_agree() {
    assert!((generic_bt_at_origin::<f32>() - std::f32::consts::LN_2).abs() < 1e-6);
    let data: Vec<PrefExample<f32>> = clusters(&ClusterSpec { n: 200, ..ClusterSpec::default() });
    let (_, trace) = train_toy_rm(&data, &TrainConfig::<f32>::default()).unwrap();
    assert!(*trace.margin.last().unwrap() > 0.0);
}
