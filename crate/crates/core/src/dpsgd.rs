//! DP-SGD: per-example L2 clipping, a Gaussian-noised mean release per step
//! with linear privacy accounting, and the plain SGD used for warm starts.

use crate::data::{Dataset, FeatureSequence};
use crate::dp::{gaussian_sample, gaussian_sigma, AccountLedger, Adjacency, PrivacyParams, Sensitivity};
use crate::error::{Error, Result};
use crate::nn::{per_example_gradients, FlatGradient, Network};
use crate::rng::RandomSource;

#[derive(Debug, Clone, PartialEq)]
pub struct DpSgdConfig {
    /// L2 bound `C` applied to every per-example gradient.
    pub clip_bound: f64,
    /// Privacy cost of one release.
    pub step_params: PrivacyParams,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adjacency: Adjacency,
    /// Per-coordinate noise SD used instead of the calibrated value.
    pub noise_override: Option<f64>,
    /// `false` for a worker contributing non-noisy gradients (no noise, no spend).
    pub noisy: bool,
}

impl DpSgdConfig {
    /// Step epsilon 100, delta 1e-6, learning rate 1e-4, clip 1, noise SD 0.098.
    pub fn reference() -> Self {
        Self {
            clip_bound: 1.0,
            step_params: PrivacyParams { epsilon: 100.0, delta: 1e-6 },
            learning_rate: 1e-4,
            batch_size: 8,
            adjacency: Adjacency::AddRemove,
            noise_override: Some(0.098),
            noisy: true,
        }
    }

    /// Non-noisy contributor with the given clip bound.
    pub fn open(clip_bound: f64, learning_rate: f64, batch_size: usize) -> Self {
        Self {
            clip_bound,
            step_params: PrivacyParams::zero(),
            learning_rate,
            batch_size,
            adjacency: Adjacency::AddRemove,
            noise_override: None,
            noisy: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_bound.is_finite() && self.clip_bound > 0.0) {
            return Err(Error::Config(format!("clip bound must be > 0, got {}", self.clip_bound)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if let Some(sd) = self.noise_override {
            if !(sd.is_finite() && sd >= 0.0) {
                return Err(Error::Config(format!("noise override must be >= 0, got {sd}")));
            }
        }
        if self.noisy {
            PrivacyParams::new(self.step_params.epsilon, self.step_params.delta)?;
            if self.noise_override.is_none() && self.step_params.delta <= 0.0 {
                return Err(Error::GaussianRequiresDelta);
            }
        }
        Ok(())
    }

    /// Sensitivity of the clipped mean over `batch` examples.
    pub fn sensitivity(&self, batch: usize) -> Result<Sensitivity> {
        let base = self.clip_bound / batch as f64;
        let value = match self.adjacency {
            Adjacency::AddRemove => base,
            Adjacency::Replace => 2.0 * base,
        };
        Sensitivity::new(value, self.adjacency)
    }

    /// Per-coordinate noise SD for a release over `batch` examples.
    pub fn noise_sd(&self, batch: usize) -> Result<f64> {
        if !self.noisy {
            return Ok(0.0);
        }
        match self.noise_override {
            Some(sd) => Ok(sd),
            None => gaussian_sigma(self.sensitivity(batch)?, self.step_params),
        }
    }
}

/// A privatized (or openly contributed) mean gradient: the only
/// data-derived object a worker ever sends.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRelease {
    pub step_id: u32,
    pub vector: FlatGradient,
    /// Privacy spent on this release; zero when `noisy` is false.
    pub spent: PrivacyParams,
    pub noisy: bool,
    pub clip_bound: f64,
    pub batch_size: u32,
}

/// Scales `grad` onto the L2 ball of radius `c` when it lies outside.
pub fn l2_clip(grad: &FlatGradient, c: f64) -> Result<FlatGradient> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidValue(format!("clip bound must be > 0, got {c}")));
    }
    if !grad.is_finite() {
        return Err(Error::InvalidGradient);
    }
    let norm = grad.l2_norm();
    if norm <= c {
        return Ok(grad.clone());
    }
    let scale = c / norm;
    Ok(FlatGradient::new(grad.as_slice().iter().map(|g| g * scale).collect()))
}

/// Coordinate-wise mean, summed in slice order.
pub fn mean_gradient(grads: &[FlatGradient]) -> Result<FlatGradient> {
    let first = grads.first().ok_or(Error::EmptyDataset)?;
    let mut sum = vec![0.0; first.len()];
    for g in grads {
        if g.len() != sum.len() {
            return Err(Error::Shape(format!("gradient lengths differ: {} vs {}", g.len(), sum.len())));
        }
        sum.iter_mut().zip(g.as_slice()).for_each(|(s, v)| *s += v);
    }
    let b = grads.len() as f64;
    sum.iter_mut().for_each(|s| *s /= b);
    Ok(FlatGradient::new(sum))
}

/// Clip, average, add noise, account. See [`dp_gradient_release_observed`].
pub fn dp_gradient_release(
    per_example: &[FlatGradient],
    cfg: &DpSgdConfig,
    ledger: &mut AccountLedger,
    rng: &mut RandomSource,
    step_id: u32,
) -> Result<GradientRelease> {
    dp_gradient_release_observed(per_example, cfg, ledger, rng, step_id, |_, _| {})
}

/// Builds one release from per-example gradients:
/// `sum_i clip(g_i, C) / B + N(0, sigma^2 I)`, composing `step_params` into
/// `ledger` when the config is noisy. `observe` sees every clipped gradient
/// before it is summed.
///
/// On any error (including `BudgetExceeded`) nothing is released and the
/// ledger is unchanged.
pub fn dp_gradient_release_observed<F>(
    per_example: &[FlatGradient],
    cfg: &DpSgdConfig,
    ledger: &mut AccountLedger,
    rng: &mut RandomSource,
    step_id: u32,
    mut observe: F,
) -> Result<GradientRelease>
where
    F: FnMut(usize, &FlatGradient),
{
    cfg.validate()?;
    if per_example.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.noisy && !ledger.can_afford(cfg.step_params) {
        return Err(Error::BudgetExceeded {
            requested: cfg.step_params,
            spent: ledger.spent(),
            budget: ledger.budget(),
        });
    }
    let clipped = per_example
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let c = l2_clip(g, cfg.clip_bound)?;
            observe(i, &c);
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut vector = mean_gradient(&clipped)?;
    let batch = per_example.len();
    let sd = cfg.noise_sd(batch)?;
    if sd > 0.0 {
        for v in vector.as_mut_slice() {
            *v += gaussian_sample(sd, rng)?;
        }
    }
    let spent = if cfg.noisy {
        ledger.compose(format!("step-{step_id}"), cfg.step_params)?;
        cfg.step_params
    } else {
        PrivacyParams::zero()
    };
    Ok(GradientRelease {
        step_id,
        vector,
        spent,
        noisy: cfg.noisy,
        clip_bound: cfg.clip_bound,
        batch_size: u32::try_from(batch).map_err(|_| Error::Shape("batch exceeds u32".into()))?,
    })
}

/// Per-example gradients of `batch` followed by [`dp_gradient_release`].
/// Does not touch `net`; updates are applied after federation.
pub fn train_step(
    net: &Network,
    batch: &[&FeatureSequence],
    cfg: &DpSgdConfig,
    ledger: &mut AccountLedger,
    rng: &mut RandomSource,
    step_id: u32,
) -> Result<GradientRelease> {
    // Fail before spending compute when the budget is already exhausted.
    if cfg.noisy && !ledger.can_afford(cfg.step_params) {
        return Err(Error::BudgetExceeded {
            requested: cfg.step_params,
            spent: ledger.spent(),
            budget: ledger.budget(),
        });
    }
    let grads = per_example_gradients(net, batch.iter().map(|s| (s.frames(), s.labels())))?;
    dp_gradient_release(&grads, cfg, ledger, rng, step_id)
}

/// Epoch-shuffled mini-batches over sequence indices. Each epoch starts with
/// a fresh Fisher-Yates shuffle; the final batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: RandomSource,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, rng: RandomSource) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(Self { order: (0..n).collect(), cursor: n, batch_size, rng, epoch: 0 })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Completed epochs, counting the one in progress.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.sort_unstable();
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

/// `steps` of plain mini-batch SGD: mean per-example gradient, then
/// `p <- p - lr * g`.
pub fn sgd_steps(net: &mut Network, data: &Dataset, steps: usize, lr: f64, sampler: &mut BatchSampler) -> Result<()> {
    data.require_nonempty()?;
    for _ in 0..steps {
        let idx = sampler.next_batch();
        let grads = per_example_gradients(net, idx.iter().map(|&i| {
            let s = &data.sequences[i];
            (s.frames(), s.labels())
        }))?;
        net.apply_update(&mean_gradient(&grads)?, lr)?;
    }
    Ok(())
}

/// Non-private pretraining: `epochs` passes of mini-batch SGD with a
/// per-epoch shuffle drawn from `rng`.
pub fn warm_start(
    net: &Network,
    data: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut RandomSource,
) -> Result<Network> {
    data.require_nonempty()?;
    let mut out = net.clone();
    let mut sampler = BatchSampler::new(data.len(), batch_size, rng.fork(0))?;
    let steps = epochs * sampler.steps_per_epoch();
    sgd_steps(&mut out, data, steps, lr, &mut sampler)?;
    Ok(out)
}

/// Mean per-sequence loss over a dataset.
pub fn dataset_loss(net: &Network, data: &Dataset) -> Result<f64> {
    data.require_nonempty()?;
    let mut total = 0.0;
    for s in &data.sequences {
        total += net.sequence_loss(s.frames(), s.labels())?;
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::nn::NetworkDims;

    fn fg(v: &[f64]) -> FlatGradient {
        FlatGradient::new(v.to_vec())
    }

    fn unlimited() -> AccountLedger {
        AccountLedger::new(PrivacyParams::new(1e9, 0.5).unwrap())
    }

    #[test]
    fn l2_clip_examples() {
        let c = l2_clip(&fg(&[3.0, 4.0]), 1.0).unwrap();
        assert!((c.as_slice()[0] - 0.6).abs() < 1e-15 && (c.as_slice()[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_clip(&fg(&[0.3, 0.4]), 1.0).unwrap(), fg(&[0.3, 0.4]));
        assert_eq!(l2_clip(&fg(&[0.0, 0.0]), 0.5).unwrap(), fg(&[0.0, 0.0]));
        assert!(matches!(l2_clip(&fg(&[f64::NAN]), 1.0), Err(Error::InvalidGradient)));
    }

    #[test]
    fn release_without_noise_is_clipped_mean() {
        let cfg = DpSgdConfig { noise_override: Some(0.0), ..DpSgdConfig::reference() };
        let mut ledger = unlimited();
        let r = dp_gradient_release(&[fg(&[3.0, 4.0]), fg(&[0.0, 0.0])], &cfg, &mut ledger, &mut RandomSource::new(0), 0).unwrap();
        assert!((r.vector.as_slice()[0] - 0.3).abs() < 1e-15);
        assert!((r.vector.as_slice()[1] - 0.4).abs() < 1e-15);
        assert_eq!(r.spent, cfg.step_params);
        assert_eq!(ledger.entries().len(), 1);
    }

    #[test]
    fn open_release_is_plain_mean() {
        let cfg = DpSgdConfig::open(1e9, 0.1, 2);
        let mut ledger = unlimited();
        let grads = [fg(&[3.0, -4.0, 1.0]), fg(&[1.0, 2.0, 7.5])];
        let r = dp_gradient_release(&grads, &cfg, &mut ledger, &mut RandomSource::new(0), 3).unwrap();
        assert_eq!(r.vector, fg(&[2.0, -1.0, 4.25]));
        assert!(r.spent.is_zero() && !r.noisy);
        assert!(ledger.entries().is_empty());
    }

    #[test]
    fn reference_noise_sd() {
        let cfg = DpSgdConfig::reference();
        assert_eq!(cfg.noise_sd(1).unwrap(), 0.098);
        let mut ledger = unlimited();
        let zeros: Vec<FlatGradient> = (0..4).map(|_| FlatGradient::zeros(50_000)).collect();
        let r = dp_gradient_release(&zeros, &cfg, &mut ledger, &mut RandomSource::new(9), 0).unwrap();
        let n = r.vector.len() as f64;
        let mean = r.vector.as_slice().iter().sum::<f64>() / n;
        let sd = (r.vector.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 0.098).abs() < 0.002, "{sd}");
    }

    #[test]
    fn calibrated_noise_uses_batch_sensitivity() {
        let cfg = DpSgdConfig { noise_override: None, ..DpSgdConfig::reference() };
        let one = cfg.noise_sd(1).unwrap();
        assert!((one - 0.052988).abs() < 1e-5);
        assert!((cfg.noise_sd(4).unwrap() - one / 4.0).abs() < 1e-15);
        let replace = DpSgdConfig { adjacency: Adjacency::Replace, ..cfg };
        assert!((replace.noise_sd(4).unwrap() - one / 2.0).abs() < 1e-15);
    }

    #[test]
    fn budget_exhaustion_leaves_ledger_unchanged() {
        let cfg = DpSgdConfig { noise_override: Some(0.0), ..DpSgdConfig::reference() };
        let mut ledger = AccountLedger::new(PrivacyParams::new(300.0, 1e-5).unwrap());
        let g = [fg(&[1.0])];
        let mut rng = RandomSource::new(0);
        for step in 0..3 {
            dp_gradient_release(&g, &cfg, &mut ledger, &mut rng, step).unwrap();
        }
        assert_eq!(ledger.spent().epsilon, 300.0);
        let err = dp_gradient_release(&g, &cfg, &mut ledger, &mut rng, 3);
        assert!(matches!(err, Err(Error::BudgetExceeded { .. })));
        assert_eq!(ledger.entries().len(), 3);
    }

    #[test]
    fn invalid_gradient_does_not_spend() {
        let cfg = DpSgdConfig::reference();
        let mut ledger = unlimited();
        let res = dp_gradient_release(&[fg(&[f64::INFINITY])], &cfg, &mut ledger, &mut RandomSource::new(0), 0);
        assert!(matches!(res, Err(Error::InvalidGradient)));
        assert!(ledger.entries().is_empty());
    }

    #[test]
    fn batch_sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 4, RandomSource::new(1)).unwrap();
        assert_eq!(s.steps_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        assert_eq!(seen.len(), 10);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.next_batch().len(), 4);
        assert_eq!(s.epoch(), 2);
    }

    fn toy() -> (Network, Dataset) {
        let spec = SynthSpec {
            feature_dim: 4,
            num_classes: 3,
            n_speakers: 2,
            sequences_per_speaker: 6,
            frames_per_sequence: 6,
            outlier: None,
            noise_scale: 0.2,
            ..Default::default()
        };
        let data = synth_generate(&spec, &mut RandomSource::new(3)).unwrap();
        let net = Network::init(NetworkDims::new(4, 5, 3).unwrap(), &mut RandomSource::new(4));
        (net, data)
    }

    #[test]
    fn warm_start_examples() {
        let (net, data) = toy();
        let same = warm_start(&net, &data, 0, 0.5, 4, &mut RandomSource::new(1)).unwrap();
        assert_eq!(same, net);
        let a = warm_start(&net, &data, 3, 0.5, 4, &mut RandomSource::new(1)).unwrap();
        let b = warm_start(&net, &data, 3, 0.5, 4, &mut RandomSource::new(1)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let empty = Dataset::new(4, 3, "empty");
        assert!(matches!(warm_start(&net, &empty, 1, 0.5, 4, &mut RandomSource::new(1)), Err(Error::EmptyDataset)));
    }

    #[test]
    fn train_step_matches_plain_gradient() {
        let (net, data) = toy();
        let batch: Vec<&FeatureSequence> = data.sequences.iter().take(4).collect();
        let cfg = DpSgdConfig::open(1e9, 0.1, 4);
        let r = train_step(&net, &batch, &cfg, &mut unlimited(), &mut RandomSource::new(0), 0).unwrap();
        let grads = per_example_gradients(&net, batch.iter().map(|s| (s.frames(), s.labels()))).unwrap();
        assert_eq!(r.vector, mean_gradient(&grads).unwrap());
        assert_eq!(r.batch_size, 4);
    }
}
