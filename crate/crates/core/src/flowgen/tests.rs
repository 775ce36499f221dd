use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::oracles::{ConstantDenoiser, GmmDenoiser, IdentityFlow};
use super::*;
use crate::diffcore::AdamW;
use crate::error::Error;

fn unit_schedule() -> NoiseSchedule {
    NoiseSchedule {
        weighting: Weighting::Unit,
        ..NoiseSchedule::default()
    }
}

fn gauss_logpdf(v: &[f64], var: f64) -> f64 {
    let d = v.len() as f64;
    -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * v.iter().map(|x| x * x).sum::<f64>() / var
}

fn small_policy(data_dim: usize, cond_dim: usize, seed: u64) -> FlowPolicy {
    FlowPolicy::new(FlowArch::new(cond_dim, vec![32, 32], Normalizer::identity(data_dim)), seed).unwrap()
}

#[test]
fn perfect_denoiser_has_zero_loss_and_maximal_proxy() {
    let v = vec![0.3, -1.2, 2.0];
    let oracle = ConstantDenoiser {
        value: v.clone(),
        cond_dim: 1,
    };
    for n in [1, 5, 64] {
        let est = cfm_loss(&oracle, &v, &[0.5], &NoiseSchedule::default(), n, 11).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.n_samples, n);
        assert_eq!(proxy_loglik(&oracle, &v, &[0.5], &NoiseSchedule::default(), n, 11).unwrap(), 0.0);
    }
}

#[test]
fn zero_predictor_loss_matches_squared_norm() {
    let v = vec![1.0, -2.0, 0.5, 3.0];
    let q: f64 = v.iter().map(|x| x * x).sum();
    let zero = ConstantDenoiser {
        value: vec![0.0; 4],
        cond_dim: 0,
    };
    let est = cfm_loss(&zero, &v, &[], &unit_schedule(), 256, 3).unwrap();
    let se = crate::stats::sample_variance(&est.terms).sqrt() / 16.0;
    // with w ≡ 1 and D ≡ 0 every term is exactly ‖v‖²
    assert!((est.value - q).abs() <= 3.0 * se + 1e-12);
    assert!(est.terms.iter().all(|t| (t - q).abs() < 1e-12));
}

#[test]
fn estimates_are_deterministic_and_seed_pinned() {
    let p1 = small_policy(3, 2, 1);
    let p2 = small_policy(3, 2, 2);
    let (v, c) = (vec![0.1, 0.2, 0.3], vec![1.0, -1.0]);
    let s = NoiseSchedule::default();
    let a = cfm_loss(&p1, &v, &c, &s, 5, 42).unwrap();
    let b = cfm_loss(&p1, &v, &c, &s, 5, 42).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.value, cfm_loss(&p2, &v, &c, &s, 5, 42).unwrap().value);
    // the draws depend on the key alone
    assert_eq!(draw_noise(42, 5, 3, &s), draw_noise(42, 5, 3, &s));
    assert_ne!(draw_noise(42, 5, 3, &s), draw_noise(43, 5, 3, &s));
    let draws = draw_noise(42, 5, 3, &s);
    assert!(draws.sigmas.iter().all(|x| (s.sigma_min..=s.sigma_max).contains(x)));
    // the policy's recorded path and the default path agree on the same draws
    let z = p1.encode(&v, &c);
    let via_trait = p1.cfm_terms(&z, &c, &draws, &s).unwrap();
    let mut tape = crate::diffcore::Tape::new();
    let var = p1.record_loss_on_tape(&mut tape, &z, &c, &draws, &s).unwrap();
    assert_eq!(tape.scalar(var), via_trait.iter().sum::<f64>() / 5.0);
}

#[test]
fn dimension_mismatch_is_a_contract_error() {
    let p = small_policy(3, 2, 1);
    let s = NoiseSchedule::default();
    assert!(matches!(cfm_loss(&p, &[0.0; 4], &[0.0; 2], &s, 5, 1), Err(Error::Contract(_))));
    assert!(matches!(cfm_loss(&p, &[0.0; 3], &[0.0; 1], &s, 5, 1), Err(Error::Contract(_))));
    assert!(matches!(cfm_loss(&p, &[0.0; 3], &[0.0; 2], &s, 0, 1), Err(Error::Contract(_))));
    assert!(sample(&p, &[0.0; 2], &s, 0, 1).is_err());
    assert!(NoiseSchedule {
        sigma_min: 2.0,
        sigma_max: 1.0,
        ..s
    }
    .validate()
    .is_err());
}

#[test]
fn estimate_variance_falls_as_one_over_n() {
    let p = small_policy(2, 0, 5);
    let s = NoiseSchedule::default();
    let v = [0.7, -0.4];
    let ns = [1usize, 4, 16, 64, 256];
    let mut log_n = Vec::new();
    let mut log_var = Vec::new();
    for &n in &ns {
        let vals: Vec<f64> = (0..200)
            .map(|k| cfm_loss(&p, &v, &[], &s, n, 1000 + k).unwrap().value)
            .collect();
        log_n.push((n as f64).ln());
        log_var.push(crate::stats::sample_variance(&vals).ln());
    }
    let slope = crate::stats::slope(&log_n, &log_var).unwrap();
    assert!((slope + 1.0).abs() <= 0.2, "slope {slope}");
}

#[test]
fn single_step_collapses_onto_the_prediction() {
    let target = vec![1.5, -0.25, 4.0];
    let oracle = ConstantDenoiser {
        value: target.clone(),
        cond_dim: 1,
    };
    let out = sample(&oracle, &[0.0], &NoiseSchedule::default(), 1, 9).unwrap();
    assert_eq!(out, target);
}

#[test]
fn sampling_is_deterministic_per_key() {
    let p = small_policy(3, 1, 1);
    let s = NoiseSchedule::default();
    let a = sample(&p, &[0.5], &s, 8, 3).unwrap();
    assert_eq!(a, sample(&p, &[0.5], &s, 8, 3).unwrap());
    assert_ne!(a, sample(&p, &[0.5], &s, 8, 4).unwrap());
}

#[test]
fn point_mass_training_concentrates_samples() {
    let target = vec![1.0, -2.0, 0.5, 1.5];
    let norm: f64 = target.iter().map(|x| x * x).sum::<f64>().sqrt();
    let data = vec![(target.clone(), vec![1.0]); 8];
    let mut p = small_policy(4, 1, 3);
    let cfg = TrainConfig {
        steps: 2000,
        batch_size: 32,
        optimizer: AdamW::with_lr(3e-3),
        ..TrainConfig::default()
    };
    train_denoiser(&mut p, &data, &NoiseSchedule::default(), &cfg, 1).unwrap();
    let keys: Vec<u64> = (0..16).collect();
    let outs = sample_batch(&p, &Array2::ones((16, 1)), &NoiseSchedule::default(), 32, &keys).unwrap();
    let mean_dist = outs
        .iter()
        .map(|o| o.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / 16.0;
    assert!(mean_dist < 0.1 * norm, "mean distance {mean_dist}");
}

fn trained_gaussian_policy() -> (FlowPolicy, NoiseSchedule) {
    let mut rng = crate::seed::rng(17, &[0]);
    let data: Vec<(Vec<f64>, Vec<f64>)> = (0..2048)
        .map(|_| ((0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(), vec![]))
        .collect();
    let schedule = NoiseSchedule {
        sigma_min: 0.01,
        sigma_max: 10.0,
        weighting: Weighting::InvSigmaSq,
    };
    let mut p = FlowPolicy::new(FlowArch::new(0, vec![32, 32], Normalizer::identity(2)), 4).unwrap();
    let cfg = TrainConfig {
        steps: 1500,
        batch_size: 128,
        optimizer: AdamW::with_lr(2e-3),
        ..TrainConfig::default()
    };
    train_denoiser(&mut p, &data, &schedule, &cfg, 2).unwrap();
    (p, schedule)
}

#[test]
fn step_doubling_shrinks_the_discretization_error() {
    let (p, s) = trained_gaussian_policy();
    let keys: Vec<u64> = (0..20).collect();
    let cond = Array2::zeros((20, 0));
    let run = |steps| sample_batch(&p, &cond, &s, steps, &keys).unwrap();
    let (x16, x32, x64) = (run(16), run(32), run(64));
    let gap = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(u, w)| u.iter().zip(w).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .collect()
    };
    let (fine, coarse) = (gap(&x64, &x32), gap(&x32, &x16));
    for (f, c) in fine.iter().zip(&coarse) {
        assert!(f < c, "64-vs-32 move {f} not below 32-vs-16 estimate {c}");
    }
}

#[test]
fn identity_flow_gives_the_base_density_at_any_step_count() {
    let flow = IdentityFlow { dim: 3, cond_dim: 0 };
    let s = NoiseSchedule::default();
    let v = [0.4, -1.1, 2.3];
    let base = gauss_logpdf(&v, s.sigma_max * s.sigma_max);
    for steps in [8, 13, 40] {
        let lp = exact_loglik(&flow, &v, &[], &s, steps).unwrap();
        assert!((lp - base).abs() < 1e-6, "{lp} vs {base}");
    }
}

#[test]
fn exact_loglik_matches_closed_form_gaussians() {
    // the exact Gaussian denoiser scales x by √((s² + σ²)/(s² + σ_min²)) between
    // σ_min and σ, so the density is the base density at the end point plus
    // the log-volume change of that scaling
    let s = NoiseSchedule::default();
    let g = GmmDenoiser::gaussian(vec![0.0, 0.0], 0.7, 0);
    let mut rng = crate::seed::rng(1, &[0]);
    for _ in 0..10 {
        let v: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let lp = exact_loglik(&g, &v, &[], &s, 32).unwrap();
        let growth = (0.49 + s.sigma_max.powi(2)) / (0.49 + s.sigma_min.powi(2));
        let end: Vec<f64> = v.iter().map(|x| x * growth.sqrt()).collect();
        let truth = gauss_logpdf(&end, s.sigma_max.powi(2)) + growth.ln();
        assert!((lp - truth).abs() < 1e-4, "{lp} vs {truth}");
    }
    // a point mass at zero ends up as N(0, σ_min² I)
    let zero = ConstantDenoiser {
        value: vec![0.0; 2],
        cond_dim: 0,
    };
    let lp = exact_loglik(&zero, &[0.01, -0.02], &[], &s, 64).unwrap();
    let want = gauss_logpdf(&[0.01, -0.02], s.sigma_min * s.sigma_min);
    assert!((lp - want).abs() < 1e-5, "{lp} vs {want}");
}

#[test]
fn exact_loglik_is_gated_by_dimension_and_steps() {
    let big = IdentityFlow { dim: 17, cond_dim: 0 };
    let r = exact_loglik(&big, &[0.0; 17], &[], &NoiseSchedule::default(), 8);
    assert!(matches!(r, Err(Error::Capability(_))));
    let small = IdentityFlow { dim: 2, cond_dim: 0 };
    assert!(matches!(
        exact_loglik(&small, &[0.0; 2], &[], &NoiseSchedule::default(), 7),
        Err(Error::Contract(_))
    ));
}

#[test]
fn trained_gaussian_policy_recovers_the_density() {
    let (p, s) = trained_gaussian_policy();
    let mut rng = crate::seed::rng(23, &[0]);
    let pts: Vec<f64> = (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let v = Array2::from_shape_vec((100, 2), pts).unwrap();
    let lp = exact_loglik_batch(&p, &v, &Array2::zeros((100, 0)), &s, 32).unwrap();
    let err: f64 = lp
        .iter()
        .zip(v.rows())
        .map(|(l, r)| l - gauss_logpdf(r.as_slice().unwrap(), 1.0 + s.sigma_min * s.sigma_min))
        .sum::<f64>()
        / 100.0;
    assert!(err.abs() < 0.1, "mean log-density error {err}");

    // a draw shifted five standard deviations away scores lower
    let mut shifted = v.clone();
    shifted.column_mut(0).mapv_inplace(|x| x + 5.0);
    let lp_far = exact_loglik_batch(&p, &shifted, &Array2::zeros((100, 0)), &s, 32).unwrap();
    let wins = lp.iter().zip(&lp_far).filter(|(a, b)| a > b).count();
    assert!(wins >= 95, "{wins} of 100");
}

#[test]
fn normalizer_pins_constant_coordinates() {
    let data = vec![
        (vec![1.0, 2.0, 5.0, 3.0], vec![1.0, 2.0]),
        (vec![1.0, 2.0, 7.0, 1.0], vec![1.0, 2.0]),
        (vec![0.0, 4.0, 4.0, 8.0], vec![0.0, 4.0]),
    ];
    let n = Normalizer::fit(&data, 2, 1e-3).unwrap();
    // the first frame equals the anchor, so it is fixed
    assert_eq!(n.scale[0], 0.0);
    assert_eq!(n.scale[1], 0.0);
    for (v, c) in &data {
        let z = n.encode(v, c);
        assert_eq!(&z[..2], &[0.0, 0.0]);
        let back = n.decode(&z, c);
        assert_eq!(&back[..2], &v[..2]);
        for (a, b) in back.iter().zip(v) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let p = small_policy(3, 2, 8);
    let bytes = p.checkpoint(5).unwrap().to_bytes().unwrap();
    let q = FlowPolicy::from_checkpoint(&crate::diffcore::Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(q.arch, p.arch);
    let (v, c) = ([0.2, 0.1, -0.3], [0.0, 1.0]);
    let s = NoiseSchedule::default();
    let a = cfm_loss(&p, &v, &c, &s, 4, 1).unwrap().value;
    let b = cfm_loss(&q, &v, &c, &s, 4, 1).unwrap().value;
    // tensors are stored as f32
    assert!((a - b).abs() < 1e-4 * a.abs().max(1.0));
}
