//! Differential-privacy primitives: clamping, sensitivity, the Laplace and
//! Gaussian mechanisms, the clamped Laplace mean, linear composition and an
//! empirical distinguishability probe.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// An `(epsilon, delta)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyParams {
    /// Validated constructor: `epsilon > 0`, `0 <= delta < 1`.
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidParams(format!("epsilon must be > 0, got {epsilon}")));
        }
        if !(delta.is_finite() && (0.0..1.0).contains(&delta)) {
            return Err(Error::InvalidParams(format!("delta must be in [0, 1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }

    /// Zero spend. Only valid as a ledger total or a non-noisy release tag.
    pub const fn zero() -> Self {
        Self { epsilon: 0.0, delta: 0.0 }
    }

    pub fn is_zero(&self) -> bool {
        self.epsilon == 0.0 && self.delta == 0.0
    }
}

impl fmt::Display for PrivacyParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(eps={}, delta={})", self.epsilon, self.delta)
    }
}

/// Clamp interval `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClampBounds {
    lower: f64,
    upper: f64,
}

impl ClampBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if lower.is_finite() && upper.is_finite() && lower < upper {
            Ok(Self { lower, upper })
        } else {
            Err(Error::InvalidBounds { lower, upper })
        }
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Neighbouring-dataset relation used to derive sensitivities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Adjacency {
    /// One record added or removed.
    #[default]
    AddRemove,
    /// One record replaced by another.
    Replace,
}

impl std::str::FromStr for Adjacency {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add-remove" | "addremove" | "AddRemove" => Ok(Adjacency::AddRemove),
            "replace" | "Replace" => Ok(Adjacency::Replace),
            other => Err(Error::Config(format!("unknown adjacency {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensitivity {
    value: f64,
    adjacency: Adjacency,
}

impl Sensitivity {
    pub fn new(value: f64, adjacency: Adjacency) -> Result<Self> {
        if value.is_finite() && value >= 0.0 {
            Ok(Self { value, adjacency })
        } else {
            Err(Error::InvalidValue(format!("sensitivity must be finite and >= 0, got {value}")))
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn adjacency(&self) -> Adjacency {
        self.adjacency
    }
}

pub fn clamp(x: f64, bounds: ClampBounds) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::InvalidValue("NaN passed to clamp".into()));
    }
    Ok(x.max(bounds.lower).min(bounds.upper))
}

/// Sensitivity of the mean of `n` clamped records, `(U - L) / n`.
///
/// With the record count public, both conventions give the same bound: a
/// replaced record moves the mean by at most `(U - L) / n`, and under
/// add/remove the count is held fixed by the caller.
pub fn mean_sensitivity(bounds: ClampBounds, n: usize, adjacency: Adjacency) -> Result<Sensitivity> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Sensitivity::new(bounds.width() / n as f64, adjacency)
}

/// Inverse CDF of `Laplace(0, scale)` evaluated at `u` in `(0, 1)`:
/// `-scale * sgn(u - 1/2) * ln(1 - 2|u - 1/2|)`.
pub fn laplace_inverse_cdf(u: f64, scale: f64) -> f64 {
    let centered = u - 0.5;
    if centered == 0.0 {
        return 0.0;
    }
    -scale * centered.signum() * (1.0 - 2.0 * centered.abs()).ln()
}

/// One draw from `Laplace(0, scale)`, taking a single `uniform_open` from
/// `rng` and mapping it through [`laplace_inverse_cdf`].
pub fn laplace_sample(scale: f64, rng: &mut RandomSource) -> Result<f64> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidScale(scale));
    }
    Ok(laplace_inverse_cdf(rng.uniform_open(), scale))
}

/// One draw from `N(0, sd^2)`. `sd = 0` returns exactly zero without
/// consuming randomness.
pub fn gaussian_sample(sd: f64, rng: &mut RandomSource) -> Result<f64> {
    if !(sd.is_finite() && sd >= 0.0) {
        return Err(Error::InvalidScale(sd));
    }
    if sd == 0.0 {
        return Ok(0.0);
    }
    Ok(sd * rng.standard_normal())
}

/// Classic Gaussian-mechanism calibration,
/// `sigma = sensitivity * sqrt(2 ln(1.25 / delta)) / epsilon`.
///
/// The analysis behind this constant covers `epsilon <= 1`; larger values
/// are accepted as a convention.
pub fn gaussian_sigma(sensitivity: Sensitivity, params: PrivacyParams) -> Result<f64> {
    if params.delta <= 0.0 {
        return Err(Error::GaussianRequiresDelta);
    }
    if params.epsilon.is_nan() || params.epsilon <= 0.0 {
        return Err(Error::InvalidParams(format!("epsilon must be > 0, got {}", params.epsilon)));
    }
    Ok(sensitivity.value() * (2.0 * (1.25 / params.delta).ln()).sqrt() / params.epsilon)
}

/// Laplace scale used by [`dp_mean`]: `(U - L) / (n * epsilon)`.
pub fn dp_mean_noise_scale(bounds: ClampBounds, n: usize, epsilon: f64) -> Result<f64> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidParams(format!("epsilon must be > 0, got {epsilon}")));
    }
    Ok(mean_sensitivity(bounds, n, Adjacency::AddRemove)?.value() / epsilon)
}

/// Mean of the clamped values, without noise.
pub fn clamped_mean(values: &[f64], bounds: ClampBounds) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum = 0.0;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::InvalidValue(format!("non-finite record {v}")));
        }
        sum += clamp(v, bounds)?;
    }
    Ok(sum / values.len() as f64)
}

/// `value + Laplace(0, scale)`. A zero scale returns `value` untouched and
/// draws nothing.
pub fn laplace_mechanism(value: f64, scale: f64, rng: &mut RandomSource) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::InvalidValue(format!("non-finite statistic {value}")));
    }
    if scale == 0.0 {
        return Ok(value);
    }
    Ok(value + laplace_sample(scale, rng)?)
}

/// `(epsilon, 0)`-DP mean: clamped mean plus `Laplace((U - L) / (n epsilon))`.
pub fn dp_mean(values: &[f64], bounds: ClampBounds, epsilon: f64, rng: &mut RandomSource) -> Result<f64> {
    let mean = clamped_mean(values, bounds)?;
    let scale = dp_mean_noise_scale(bounds, values.len(), epsilon)?;
    laplace_mechanism(mean, scale, rng)
}

/// Correctly rounded running sum of `f64` values (Shewchuk's
/// non-overlapping partials, as in Python's `math.fsum`).
#[derive(Debug, Clone, Default)]
pub(crate) struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub(crate) fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub(crate) fn value(&self) -> f64 {
        let p = &self.partials;
        let Some(mut n) = p.len().checked_sub(1) else {
            return 0.0;
        };
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            n -= 1;
            let x = hi;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Round-half-even correction across the remaining partials.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }

    /// Sign of `self + extra` computed exactly.
    fn exceeds(&self, extra: f64, limit: f64) -> bool {
        let mut probe = self.clone();
        probe.add(extra);
        probe.add(-limit);
        probe.value() > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub label: String,
    pub params: PrivacyParams,
}

/// Running record of privacy spend under linear composition.
///
/// Totals are kept as exact sums of the entries and rounded once, so
/// `spent` equals the correctly rounded sum of every entry and the grouping
/// of compositions never matters.
#[derive(Debug, Clone)]
pub struct AccountLedger {
    budget: PrivacyParams,
    entries: Vec<LedgerEntry>,
    eps_sum: ExactSum,
    delta_sum: ExactSum,
}

impl AccountLedger {
    pub fn new(budget: PrivacyParams) -> Self {
        Self {
            budget,
            entries: Vec::new(),
            eps_sum: ExactSum::default(),
            delta_sum: ExactSum::default(),
        }
    }

    pub fn budget(&self) -> PrivacyParams {
        self.budget
    }

    pub fn spent(&self) -> PrivacyParams {
        PrivacyParams {
            epsilon: self.eps_sum.value(),
            delta: self.delta_sum.value(),
        }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Whether `step` fits in the remaining budget.
    pub fn can_afford(&self, step: PrivacyParams) -> bool {
        !self.eps_sum.exceeds(step.epsilon, self.budget.epsilon)
            && !self.delta_sum.exceeds(step.delta, self.budget.delta)
    }

    /// Appends `step`, or returns `BudgetExceeded` leaving the ledger as it was.
    pub fn compose(&mut self, label: impl Into<String>, step: PrivacyParams) -> Result<()> {
        PrivacyParams::new(step.epsilon, step.delta)?;
        if !self.can_afford(step) {
            return Err(Error::BudgetExceeded {
                requested: step,
                spent: self.spent(),
                budget: self.budget,
            });
        }
        self.eps_sum.add(step.epsilon);
        self.delta_sum.add(step.delta);
        self.entries.push(LedgerEntry { label: label.into(), params: step });
        Ok(())
    }

    /// Text report: a `#` header with the budget, a column header, then one
    /// tab-separated line per entry with the cumulative spend after it.
    pub fn report(&self) -> String {
        let mut out = format!(
            "# budget_epsilon={} budget_delta={}\nlabel\tepsilon\tdelta\tcum_epsilon\tcum_delta\n",
            self.budget.epsilon, self.budget.delta
        );
        let mut eps = ExactSum::default();
        let mut delta = ExactSum::default();
        for e in &self.entries {
            eps.add(e.params.epsilon);
            delta.add(e.params.delta);
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.label,
                e.params.epsilon,
                e.params.delta,
                eps.value(),
                delta.value()
            ));
        }
        out
    }

    /// Rebuilds a ledger from [`AccountLedger::report`] output.
    pub fn parse_report(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("ledger report: {m}"));
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| bad("missing header"))?;
        let mut eps = None;
        let mut delta = None;
        for kv in head.trim_start_matches('#').split_whitespace() {
            match kv.split_once('=') {
                Some(("budget_epsilon", v)) => eps = v.parse::<f64>().ok(),
                Some(("budget_delta", v)) => delta = v.parse::<f64>().ok(),
                _ => {}
            }
        }
        let budget = PrivacyParams {
            epsilon: eps.ok_or_else(|| bad("budget_epsilon"))?,
            delta: delta.ok_or_else(|| bad("budget_delta"))?,
        };
        let mut ledger = AccountLedger::new(budget);
        lines.next().ok_or_else(|| bad("missing column header"))?;
        for line in lines.filter(|l| !l.is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad("expected 5 columns"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            ledger.compose(cols[0], PrivacyParams { epsilon: num(cols[1])?, delta: num(cols[2])? })?;
        }
        Ok(ledger)
    }
}

/// Result of [`distinguishability_probe`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    /// Largest empirical `P(bin | A) / (P(bin | B) + delta / n_bins)` over
    /// both orderings of the two datasets, restricted to bins whose
    /// numerator count reaches [`PROBE_MIN_BIN_COUNT`].
    pub max_ratio: f64,
    /// Total empirical mass by which bins exceed `e^eps * P(bin | B) + delta / n_bins`
    /// (worst ordering), over all bins.
    pub violated_mass: f64,
    /// Number of bins that entered `max_ratio`.
    pub bins_compared: usize,
}

/// Bins with fewer numerator samples are excluded from `max_ratio`; their
/// frequency estimates are too noisy to compare against `e^eps`.
pub const PROBE_MIN_BIN_COUNT: u64 = 10_000;

/// True when the multisets `a` and `b` are equal up to one added, removed
/// or replaced record.
pub fn differ_by_at_most_one(a: &[f64], b: &[f64]) -> bool {
    let mut x: Vec<f64> = a.to_vec();
    let mut y: Vec<f64> = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    // Count elements present in only one side via a sorted merge.
    let (mut i, mut j, mut only_x, mut only_y) = (0, 0, 0usize, 0usize);
    while i < x.len() && j < y.len() {
        match x[i].total_cmp(&y[j]) {
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => {
                only_x += 1;
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                only_y += 1;
                j += 1;
            }
        }
    }
    only_x += x.len() - i;
    only_y += y.len() - j;
    only_x <= 1 && only_y <= 1
}

/// Monte-Carlo check of the `(epsilon, delta)` inequality for a mechanism on
/// a pair of neighbouring datasets. Draws `n_samples` releases on each,
/// histograms them on `n_bins` equal-width bins spanning both sample sets and
/// compares bin frequencies. A test oracle, not a proof.
pub fn distinguishability_probe<M>(
    mut mechanism: M,
    d: &[f64],
    d_adjacent: &[f64],
    params: PrivacyParams,
    n_samples: usize,
    n_bins: usize,
    rng: &mut RandomSource,
) -> Result<ProbeReport>
where
    M: FnMut(&[f64], &mut RandomSource) -> Result<f64>,
{
    if !differ_by_at_most_one(d, d_adjacent) {
        return Err(Error::NotAdjacent);
    }
    if n_samples == 0 || n_bins == 0 {
        return Err(Error::InvalidValue("probe needs n_samples >= 1 and n_bins >= 1".into()));
    }
    let mut draw = |data: &[f64], rng: &mut RandomSource| -> Result<Vec<f64>> {
        (0..n_samples)
            .map(|_| {
                let v = mechanism(data, rng)?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::InvalidValue("mechanism released a non-finite value".into()))
                }
            })
            .collect()
    };
    let a = draw(d, rng)?;
    let b = draw(d_adjacent, rng)?;

    let (lo, hi) = a.iter().chain(&b).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
    let histogram = |xs: &[f64]| {
        let mut counts = vec![0u64; n_bins];
        for &v in xs {
            let k = (((v - lo) / width) as usize).min(n_bins - 1);
            counts[k] += 1;
        }
        counts
    };
    let ca = histogram(&a);
    let cb = histogram(&b);

    let floor = params.delta / n_bins as f64;
    let bound = params.epsilon.exp();
    let total = n_samples as f64;
    let mut max_ratio: f64 = 0.0;
    let mut bins_compared = 0;
    let mut violated = [0.0f64; 2];
    for (dir, (num, den)) in [(&ca, &cb), (&cb, &ca)].into_iter().enumerate() {
        for k in 0..n_bins {
            let p = num[k] as f64 / total;
            let q = den[k] as f64 / total;
            violated[dir] += (p - bound * q - floor).max(0.0);
            if num[k] >= PROBE_MIN_BIN_COUNT {
                bins_compared += 1;
                let ratio = if q + floor > 0.0 { p / (q + floor) } else { f64::INFINITY };
                max_ratio = max_ratio.max(ratio);
            }
        }
    }
    Ok(ProbeReport {
        max_ratio,
        violated_mass: violated[0].max(violated[1]),
        bins_compared,
    })
}
