mod common;

use common::*;
use fedsenone::dp::gaussian_sigma;
use fedsenone::dpsgd::{dataset_loss, dp_gradient_release, dp_gradient_release_observed, l2_clip, mean_gradient, train_step, warm_start, BatchSampler};
use fedsenone::nn::per_example_gradients;
use fedsenone::{
    synth_generate, AccountLedger, Adjacency, DpSgdConfig, Error, FeatureSequence, FlatGradient, Network, NetworkDims,
    PrivacyParams, RandomSource, Sensitivity, SynthSpec,
};
use proptest::prelude::*;

fn vecs(rng: &mut RandomSource, n: usize, len: usize, scale: f64) -> Vec<FlatGradient> {
    (0..n).map(|_| FlatGradient::new((0..len).map(|_| rng.normal(0.0, scale)).collect())).collect()
}

#[test]
fn noise_is_unbiased() {
    let mut rng = RandomSource::new(1);
    let grads = vecs(&mut rng, 4, 6, 2.0);
    let cfg = DpSgdConfig { noise_override: Some(0.5), ..DpSgdConfig::reference() };
    let clipped: Vec<FlatGradient> = grads.iter().map(|g| l2_clip(g, cfg.clip_bound).unwrap()).collect();
    let target = mean_gradient(&clipped).unwrap();
    let reps = 10_000;
    let mut sum = [0.0; 6];
    for i in 0..reps {
        let mut ledger = AccountLedger::new(unlimited());
        let r = dp_gradient_release(&grads, &cfg, &mut ledger, &mut rng, i).unwrap();
        sum.iter_mut().zip(r.vector.as_slice()).for_each(|(s, v)| *s += v);
    }
    let tol = 3.0 * 0.5 / (reps as f64).sqrt();
    for (s, t) in sum.iter().zip(target.as_slice()) {
        assert!((s / reps as f64 - t).abs() < tol, "{} vs {t}", s / reps as f64);
    }
}

#[test]
fn classic_calibration_uses_batch_sensitivity() {
    let step = PrivacyParams::new(1.0, 1e-5).unwrap();
    let cfg = DpSgdConfig { noise_override: None, step_params: step, clip_bound: 2.0, ..DpSgdConfig::reference() };
    let add_remove = gaussian_sigma(Sensitivity::new(2.0 / 5.0, Adjacency::AddRemove).unwrap(), step).unwrap();
    assert_eq!(cfg.noise_sd(5).unwrap(), add_remove);
    let replace = DpSgdConfig { adjacency: Adjacency::Replace, ..cfg };
    let expected = gaussian_sigma(Sensitivity::new(4.0 / 5.0, Adjacency::Replace).unwrap(), step).unwrap();
    assert_eq!(replace.noise_sd(5).unwrap(), expected);
}

#[test]
fn reference_noise_sd_is_observed() {
    let mut rng = RandomSource::new(2);
    let grads = vec![FlatGradient::zeros(20_000)];
    let mut ledger = AccountLedger::new(unlimited());
    let r = dp_gradient_release(&grads, &DpSgdConfig::reference(), &mut ledger, &mut rng, 0).unwrap();
    let v = r.vector.as_slice();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
    assert!((sd - 0.098).abs() < 0.002, "sd {sd}");
}

#[test]
fn accounting_is_exact_over_many_steps() {
    let step = PrivacyParams::new(0.25, 2f64.powi(-30)).unwrap();
    let cfg = DpSgdConfig { step_params: step, noise_override: Some(0.0), ..DpSgdConfig::reference() };
    let mut ledger = AccountLedger::new(unlimited());
    let mut rng = RandomSource::new(3);
    let grads = vecs(&mut rng, 2, 3, 1.0);
    for i in 0..10_000 {
        dp_gradient_release(&grads, &cfg, &mut ledger, &mut rng, i).unwrap();
    }
    assert_eq!(ledger.spent(), PrivacyParams { epsilon: 2500.0, delta: 10_000.0 * 2f64.powi(-30) });
}

#[test]
fn exhausted_budget_emits_nothing() {
    let step = PrivacyParams::new(1.0, 1e-6).unwrap();
    let cfg = DpSgdConfig { step_params: step, ..DpSgdConfig::reference() };
    let mut ledger = AccountLedger::new(PrivacyParams::new(2.0, 2e-6).unwrap());
    let mut rng = RandomSource::new(4);
    let grads = vecs(&mut rng, 2, 3, 1.0);
    for i in 0..2 {
        dp_gradient_release(&grads, &cfg, &mut ledger, &mut rng, i).unwrap();
    }
    let before = rng.clone().next_u64();
    let err = dp_gradient_release(&grads, &cfg, &mut ledger, &mut rng, 2);
    assert!(matches!(err, Err(Error::BudgetExceeded { .. })));
    assert_eq!(ledger.entries().len(), 2);
    assert_eq!(rng.next_u64(), before, "no noise drawn for a refused step");
}

#[test]
fn open_release_leaves_ledger_untouched() {
    let mut rng = RandomSource::new(5);
    let grads = vecs(&mut rng, 3, 4, 1.0);
    let mut ledger = AccountLedger::new(PrivacyParams::new(1.0, 0.0).unwrap());
    let cfg = DpSgdConfig::open(1e9, 0.1, 3);
    let r = dp_gradient_release(&grads, &cfg, &mut ledger, &mut rng, 0).unwrap();
    assert!(r.spent.is_zero() && !r.noisy);
    assert!(ledger.entries().is_empty());
    let plain = mean_gradient(&grads).unwrap();
    for (a, b) in r.vector.as_slice().iter().zip(plain.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn train_step_records_actual_batch_size() {
    let mut rng = RandomSource::new(6);
    let net = Network::init(NetworkDims::new(3, 4, 5).unwrap(), &mut rng);
    let data = random_dataset(&mut rng, 3, 5, 3, 4);
    let batch: Vec<&FeatureSequence> = data.sequences.iter().collect();
    let cfg = DpSgdConfig { batch_size: 8, ..DpSgdConfig::reference() };
    let mut ledger = AccountLedger::new(unlimited());
    let r = train_step(&net, &batch, &cfg, &mut ledger, &mut rng, 0).unwrap();
    assert_eq!(r.batch_size, 3);
    assert_eq!(ledger.spent(), cfg.step_params);
}

#[test]
fn warm_start_improves_and_is_deterministic() {
    for seed in 0..3 {
        let spec = SynthSpec { n_speakers: 3, sequences_per_speaker: 6, frames_per_sequence: 8, num_classes: 4, outlier: None, ..SynthSpec::default() };
        let mut rng = RandomSource::new(seed);
        let data = synth_generate(&spec, &mut rng).unwrap();
        let net = Network::init(NetworkDims::new(13, 8, 4).unwrap(), &mut rng);
        let trained = warm_start(&net, &data, 51, 0.1, 4, &mut rng.clone()).unwrap();
        assert!(dataset_loss(&trained, &data).unwrap() < dataset_loss(&net, &data).unwrap());
        let again = warm_start(&net, &data, 51, 0.1, 4, &mut rng.clone()).unwrap();
        assert_eq!(trained.to_bytes(), again.to_bytes());
        let none = warm_start(&net, &data, 0, 0.1, 4, &mut rng).unwrap();
        assert_eq!(none.to_bytes(), net.to_bytes());
    }
}

#[test]
fn sampler_covers_each_epoch_once() {
    let mut s = BatchSampler::new(10, 4, RandomSource::new(7)).unwrap();
    assert_eq!(s.steps_per_epoch(), 3);
    for _ in 0..3 {
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_clipped_gradient_respects_the_bound(n in 1usize..8, len in 1usize..20, scale in 0.01f64..50.0, c in 0.1f64..5.0, seed in any::<u64>()) {
        let mut rng = RandomSource::new(seed);
        let grads = vecs(&mut rng, n, len, scale);
        let cfg = DpSgdConfig { clip_bound: c, ..DpSgdConfig::reference() };
        let mut ledger = AccountLedger::new(unlimited());
        let mut seen = 0;
        dp_gradient_release_observed(&grads, &cfg, &mut ledger, &mut rng, 0, |i, g| {
            seen += 1;
            assert!(g.l2_norm() <= c + 1e-12);
            if grads[i].l2_norm() <= c {
                assert_eq!(g, &grads[i]);
            }
        }).unwrap();
        prop_assert_eq!(seen, n);
    }

    #[test]
    fn real_batches_respect_the_bound(seed in any::<u64>()) {
        let mut rng = RandomSource::new(seed);
        let net = Network::init(NetworkDims::new(3, 4, 5).unwrap(), &mut rng);
        let data = random_dataset(&mut rng, 3, 5, 6, 5);
        let grads = per_example_gradients(&net, data.sequences.iter().map(|s| (s.frames(), s.labels()))).unwrap();
        let cfg = DpSgdConfig { clip_bound: 0.05, ..DpSgdConfig::reference() };
        let mut ledger = AccountLedger::new(unlimited());
        dp_gradient_release_observed(&grads, &cfg, &mut ledger, &mut rng, 0, |_, g| assert!(g.l2_norm() <= 0.05 + 1e-12)).unwrap();
    }
}
