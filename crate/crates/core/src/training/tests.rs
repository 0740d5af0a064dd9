use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffusion::{diffusion_step, run_diffusion};
use crate::influence::InfluenceFunction;
use crate::model::{StageParams, Variant};
use crate::speckle::{sample_speckle, SpeckleConfig};

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> Image {
    Image::from_fn(w, h, |_, _| rng.random_range(lo..hi))
}

fn random_stage(rng: &mut ChaCha8Rng, nk: usize, rbf: usize, range: f64) -> StageParams {
    StageParams {
        beta: rng.random_range(-1.5..0.5),
        filters: (0..nk)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
        influences: (0..nk)
            .map(|_| {
                InfluenceFunction::new((0..rbf).map(|_| rng.random_range(-0.5..0.5)).collect(), range)
                    .unwrap()
            })
            .collect(),
    }
}

fn small_model(seed: u64, stages: usize, nk: usize, variant: Variant) -> DiffusionModel {
    let spec = ModelSpec {
        stages,
        filter_size: 3,
        num_filters: Some(nk),
        rbf_count: 5,
        looks: 2,
        value_range: 4.0,
        variant,
        init_slope: 0.05,
        init_lambda: 0.3,
        seed,
    };
    let mut m = DiffusionModel::init(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for s in &mut m.stages {
        for phi in &mut s.influences {
            for w in phi.weights_mut() {
                *w += rng.random_range(-0.3..0.3);
            }
        }
    }
    m
}

fn small_pair(seed: u64, side: usize) -> NoisyPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = random_image(&mut rng, side, side, 0.5, 4.0);
    sample_speckle(&clean, &SpeckleConfig::new(2, seed).unwrap()).unwrap()
}

#[test]
fn loss_values() {
    let a = Image::filled(1, 1, 3.0);
    let b = Image::filled(1, 1, 1.0);
    assert_eq!(loss(&a, &b).unwrap(), 2.0);
    assert_eq!(loss(&a, &a).unwrap(), 0.0);
    assert_eq!(loss_gradient(&a, &b).unwrap().as_slice(), &[2.0]);
    assert!(loss(&a, &Image::filled(2, 1, 0.0)).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u = random_image(&mut rng, 7, 5, -3.0, 3.0);
    let g = random_image(&mut rng, 7, 5, -3.0, 3.0);
    let mut expect = 0.0;
    for y in 0..5 {
        for x in 0..7 {
            expect += 0.5 * (u.get(x, y) - g.get(x, y)).powi(2);
        }
    }
    assert!((loss(&u, &g).unwrap() - expect).abs() < 1e-12);
}

/// Dense Jacobian of `u_prev ↦ u_next` by central differences; column j = ∂u_next/∂u_prev[j].
fn fd_jacobian(u: &Image, f: &Image, stage: &StageParams) -> Vec<Vec<f64>> {
    let n = u.len();
    (0..n)
        .map(|j| {
            let h = 1e-6 * u.as_slice()[j].abs().max(1.0);
            let mut up = u.clone();
            up.as_mut_slice()[j] += h;
            let mut dn = u.clone();
            dn.as_mut_slice()[j] -= h;
            let a = diffusion_step(&up, f, stage).unwrap().0;
            let b = diffusion_step(&dn, f, stage).unwrap().0;
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(x, y)| (x - y) / (2.0 * h))
                .collect()
        })
        .collect()
}

#[test]
fn backprop_matches_dense_fd_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = random_image(&mut rng, 8, 8, 0.5, 4.0);
    let f = random_image(&mut rng, 8, 8, 0.5, 4.0);
    let stage = random_stage(&mut rng, 1, 5, 4.0);
    let adj = random_image(&mut rng, 8, 8, -1.0, 1.0);
    let (_, trace) = diffusion_step(&u, &f, &stage).unwrap();
    let got = backprop_adjoint(&trace, &stage, &f, &adj).unwrap();
    let cols = fd_jacobian(&u, &f, &stage);
    let expect: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().zip(adj.as_slice()).map(|(a, b)| a * b).sum())
        .collect();
    let scale = expect.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (g, e) in got.as_slice().iter().zip(&expect) {
        assert!((g - e).abs() / scale < 1e-5, "{g} vs {e}");
    }
}

#[test]
fn identity_stage_passes_adjoint_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = random_image(&mut rng, 6, 6, 0.5, 4.0);
    let f = random_image(&mut rng, 6, 6, 0.5, 4.0);
    let stage = StageParams {
        beta: 1e-8f64.ln(),
        filters: vec![vec![0.5; 8]],
        influences: vec![InfluenceFunction::zeros(5, 4.0).unwrap()],
    };
    let adj = random_image(&mut rng, 6, 6, -1.0, 1.0);
    let (_, trace) = diffusion_step(&u, &f, &stage).unwrap();
    let got = backprop_adjoint(&trace, &stage, &f, &adj).unwrap();
    // finite-difference Jacobian-vector oracle
    let cols = fd_jacobian(&u, &f, &stage);
    for (j, c) in cols.iter().enumerate() {
        let e: f64 = c.iter().zip(adj.as_slice()).map(|(a, b)| a * b).sum();
        assert!((got.as_slice()[j] - e).abs() < 1e-6);
        assert!((got.as_slice()[j] - adj.as_slice()[j]).abs() < 1e-6);
    }
}

#[test]
fn zero_adjoint_gives_zero_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let u = random_image(&mut rng, 8, 8, 0.5, 4.0);
    let f = random_image(&mut rng, 8, 8, 0.5, 4.0);
    let stage = random_stage(&mut rng, 2, 5, 4.0);
    let (_, trace) = diffusion_step(&u, &f, &stage).unwrap();
    let zero = Image::zeros(8, 8);
    assert!(backprop_adjoint(&trace, &stage, &f, &zero)
        .unwrap()
        .as_slice()
        .iter()
        .all(|&v| v == 0.0));
    assert!(grad_stage_params(&trace, &stage, &f, &zero).unwrap().is_zero());
}

#[test]
fn workspace_y_is_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = random_image(&mut rng, 8, 8, 0.5, 4.0);
    let f = random_image(&mut rng, 8, 8, 0.0, 4.0);
    let stage = random_stage(&mut rng, 2, 5, 4.0);
    let (_, trace) = diffusion_step(&u, &f, &stage).unwrap();
    let ws = gradient_workspace(&trace, &stage, &f, &u).unwrap();
    let cap = 1.0 / (1.0 + 2.0 * stage.lambda());
    assert!(ws.y.as_slice().iter().all(|&y| y > 0.0 && y <= cap));
    assert_eq!(ws.lambda_diag.len(), 2);
    assert_eq!(ws.x.dims(), (8, 8));
}

/// Loss of a single-stage model as a function of its flattened parameters.
fn stage_loss(stage: &StageParams, u: &Image, f: &Image, gt: &Image) -> f64 {
    let (next, _) = diffusion_step(u, f, stage).unwrap();
    loss(&next, gt).unwrap()
}

#[test]
fn stage_param_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let u = random_image(&mut rng, 8, 8, 0.5, 4.0);
    let f = random_image(&mut rng, 8, 8, 0.5, 4.0);
    let gt = random_image(&mut rng, 8, 8, 0.5, 4.0);
    let stage = random_stage(&mut rng, 2, 5, 4.0);
    let (next, trace) = diffusion_step(&u, &f, &stage).unwrap();
    let adj = loss_gradient(&next, &gt).unwrap();
    let analytic = grad_stage_params(&trace, &stage, &f, &adj).unwrap().to_vec();
    let theta = stage.to_vec();
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for j in 0..theta.len() {
        let h = 1e-5 * theta[j].abs().max(1.0);
        let mut s = stage.clone();
        let mut v = theta.clone();
        v[j] += h;
        s.set_from_slice(&v);
        let up = stage_loss(&s, &u, &f, &gt);
        v[j] -= 2.0 * h;
        s.set_from_slice(&v);
        let dn = stage_loss(&s, &u, &f, &gt);
        let fd = (up - dn) / (2.0 * h);
        let err = (fd - analytic[j]).abs() / fd.abs().max(analytic[j].abs()).max(1e-6 * scale);
        assert!(err < 1e-4, "param {j}: analytic {} fd {fd}", analytic[j]);
    }
}

#[test]
fn beta_gradient_vanishes_at_its_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = random_image(&mut rng, 8, 8, 0.5, 4.0);
    let gt = random_image(&mut rng, 8, 8, 1.0, 3.0);
    let base = StageParams {
        beta: 0.0,
        filters: vec![vec![0.3; 8]],
        influences: vec![InfluenceFunction::zeros(5, 4.0).unwrap()],
    };
    let objective = |beta: f64| {
        let mut s = base.clone();
        s.beta = beta;
        stage_loss(&s, &f, &f, &gt)
    };
    // golden section over β
    let (mut lo, mut hi) = (-8.0f64, 4.0f64);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    while hi - lo > 1e-10 {
        let a = hi - r * (hi - lo);
        let b = lo + r * (hi - lo);
        if objective(a) < objective(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let mut stage = base.clone();
    stage.beta = 0.5 * (lo + hi);
    let (next, trace) = diffusion_step(&f, &f, &stage).unwrap();
    let adj = loss_gradient(&next, &gt).unwrap();
    let g = grad_stage_params(&trace, &stage, &f, &adj).unwrap();
    let scale = objective(stage.beta);
    let h = 1e-5;
    let fd = (objective(stage.beta + h) - objective(stage.beta - h)) / (2.0 * h);
    assert!(g.beta.abs() < 1e-8 * scale.max(1.0) * 100.0, "analytic {}", g.beta);
    assert!(fd.abs() < 1e-6 * scale.max(1.0), "fd {fd}");
}

#[test]
fn multi_stage_adjoint_equals_jacobian_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = random_image(&mut rng, 6, 6, 0.5, 4.0);
    let s1 = random_stage(&mut rng, 2, 5, 4.0);
    let s2 = random_stage(&mut rng, 2, 5, 4.0);
    let adj = random_image(&mut rng, 6, 6, -1.0, 1.0);

    let (u1, t1) = diffusion_step(&f, &f, &s1).unwrap();
    let (_, t2) = diffusion_step(&u1, &f, &s2).unwrap();
    let a1 = backprop_adjoint(&t2, &s2, &f, &adj).unwrap();
    let a0 = backprop_adjoint(&t1, &s1, &f, &a1).unwrap();

    let j1 = fd_jacobian(&f, &f, &s1);
    let j2 = fd_jacobian(&u1, &f, &s2);
    // (J2 J1)ᵀ adj = J1ᵀ (J2ᵀ adj)
    let v: Vec<f64> = j2
        .iter()
        .map(|c| c.iter().zip(adj.as_slice()).map(|(a, b)| a * b).sum())
        .collect();
    let w: Vec<f64> = j1
        .iter()
        .map(|c| c.iter().zip(&v).map(|(a, b)| a * b).sum())
        .collect();
    for (g, e) in a0.as_slice().iter().zip(&w) {
        assert!((g - e).abs() < 1e-6, "{g} vs {e}");
    }
}

#[test]
fn finite_diff_check_passes_and_catches_sign_flip() {
    for (seed, stages, nk) in [(1, 1, 2), (2, 2, 8)] {
        let model = small_model(seed, stages, nk, Variant::Prox);
        let pair = small_pair(seed, 8);
        let report = finite_diff_check(&model, &pair, 1e-4).unwrap();
        assert!(report.passed, "{report}");

        let (_, mut g) = model_gradient(&model, std::slice::from_ref(&pair)).unwrap();
        let worst = g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        g[worst] = -g[worst];
        let bad = compare_gradients(&model, &pair, &g, 1e-4).unwrap();
        assert!(!bad.passed);
    }
}

#[test]
fn zero_weight_model_gradcheck() {
    let mut model = small_model(3, 1, 2, Variant::Prox);
    for phi in &mut model.stages[0].influences {
        phi.weights_mut().fill(0.0);
    }
    let report = finite_diff_check(&model, &small_pair(3, 8), 1e-4).unwrap();
    assert!(report.passed, "{report}");
}

#[test]
fn projected_variant_gradients() {
    let mut model = small_model(4, 2, 2, Variant::Projected { floor: 1.0 });
    model.stages.iter_mut().for_each(|s| s.beta = 0.1f64.ln());
    let report = finite_diff_check(&model, &small_pair(4, 8), 1e-4).unwrap();
    assert!(report.passed, "{report}");
}

fn tiny_config(stages: usize, schedule: Schedule, iters: usize) -> TrainConfig {
    TrainConfig {
        model: ModelSpec {
            stages,
            filter_size: 3,
            num_filters: Some(4),
            rbf_count: 9,
            looks: 2,
            value_range: 4.0,
            seed: 17,
            ..ModelSpec::default()
        },
        schedule,
        greedy_iters: iters,
        joint_iters: iters,
        ..TrainConfig::default()
    }
}

#[test]
fn schedules_coincide_for_one_stage() {
    let samples: Vec<NoisyPair> = (0..2).map(|i| small_pair(40 + i, 10)).collect();
    let a = train(&tiny_config(1, Schedule::Greedy, 8), &samples).unwrap();
    let b = train(&tiny_config(1, Schedule::Joint, 8), &samples).unwrap();
    assert_eq!(a.model.stages, b.model.stages);
}

#[test]
fn training_decreases_loss_monotonically() {
    let samples: Vec<NoisyPair> = (0..3).map(|i| small_pair(50 + i, 12)).collect();
    let cfg = tiny_config(2, Schedule::GreedyThenJoint, 10);
    let mut lines = Vec::new();
    let out = train_with_progress(&cfg, &samples, &mut |r| lines.push(r.to_string())).unwrap();
    assert!(out.final_loss <= out.initial_loss);
    let joint: Vec<f64> = out
        .history
        .iter()
        .filter(|r| r.phase == Phase::Joint)
        .map(|r| r.loss)
        .collect();
    assert!(!joint.is_empty());
    assert!(joint.windows(2).all(|w| w[1] <= w[0]));
    for t in 1..=2 {
        let stage: Vec<f64> = out
            .history
            .iter()
            .filter(|r| r.phase == Phase::Stage(t))
            .map(|r| r.loss)
            .collect();
        assert!(stage.windows(2).all(|w| w[1] <= w[0]));
    }
    assert!(lines[0].starts_with("stage=1 iter=1 loss="));
    assert!(lines.iter().any(|l| l.starts_with("stage=joint ")));
    let again = train(&cfg, &samples).unwrap();
    assert_eq!(again.model, out.model);
}

#[test]
fn degenerate_clean_data_trains_towards_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let samples: Vec<NoisyPair> = (0..2)
        .map(|_| {
            let img = random_image(&mut rng, 10, 10, 0.5, 4.0);
            NoisyPair {
                clean: img.clone(),
                noisy: img,
                config: SpeckleConfig::new(2, 0).unwrap(),
            }
        })
        .collect();
    let out = train(&tiny_config(1, Schedule::Joint, 20), &samples).unwrap();
    assert!(out.final_loss < out.initial_loss);
    let (u, _) = run_diffusion(&samples[0].noisy, &out.model, false).unwrap();
    let rms = (2.0 * loss(&u, &samples[0].clean).unwrap() / 100.0).sqrt();
    assert!(rms < 0.1, "rms {rms}");
}

#[test]
fn gradient_check_before_training() {
    let samples: Vec<NoisyPair> = (0..2).map(|i| small_pair(70 + i, 10)).collect();
    let mut cfg = tiny_config(1, Schedule::Joint, 2);
    cfg.gradient_check = true;
    assert!(train(&cfg, &samples).is_ok());
}

#[test]
fn rejects_bad_sample_sets() {
    let cfg = tiny_config(1, Schedule::Joint, 2);
    assert!(matches!(train(&cfg, &[]), Err(Error::Training(_))));
    let mut a = small_pair(1, 8);
    let b = small_pair(2, 8);
    a.config.looks = 5;
    assert!(train(&cfg, &[a, b]).is_err());
}

#[test]
fn schedule_names_round_trip() {
    for s in [Schedule::Greedy, Schedule::Joint, Schedule::GreedyThenJoint] {
        assert_eq!(Schedule::parse(s.name()).unwrap(), s);
    }
    assert_eq!(Schedule::parse("both").unwrap(), Schedule::GreedyThenJoint);
    assert!(Schedule::parse("nope").is_err());
}
