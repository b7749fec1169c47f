//! Frame accuracy and the membership-gap probe.
//!
//! An outlier contributor is exposed when a model trained with their data is
//! markedly more accurate on them than a model trained without it. The gap
//! between the two accuracies on the outlier's held-out frames is the attack
//! statistic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;

/// Gap, in percentage points, above which a run is flagged as leaking.
pub const LEAK_THRESHOLD_POINTS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub n_frames_total: usize,
    pub n_correct: usize,
    /// `speaker_id -> (frames, accuracy)`.
    pub per_speaker: BTreeMap<u32, (usize, f64)>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Frame-level accuracy of `net` on `data`, overall and per speaker.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<EvalReport> {
    data.require_nonempty()?;
    let dims = net.dims();
    if data.feature_dim != dims.input_dim {
        return Err(Error::Shape(format!(
            "model expects {} features, data has {}",
            dims.input_dim, data.feature_dim
        )));
    }
    if data.num_classes > dims.output_dim {
        return Err(Error::Shape(format!(
            "data has {} classes, model only {}",
            data.num_classes, dims.output_dim
        )));
    }
    let o = dims.output_dim;
    let mut per: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for seq in &data.sequences {
        let cache = net.forward(seq.frames())?;
        let entry = per.entry(seq.speaker_id).or_default();
        for (row, &label) in cache.logits().chunks_exact(o).zip(seq.labels()) {
            entry.0 += 1;
            entry.1 += usize::from(argmax(row) == label as usize);
        }
    }
    let total: usize = per.values().map(|v| v.0).sum();
    let correct: usize = per.values().map(|v| v.1).sum();
    Ok(EvalReport {
        overall_accuracy: correct as f64 / total as f64,
        n_frames_total: total,
        n_correct: correct,
        per_speaker: per.into_iter().map(|(s, (n, c))| (s, (n, c as f64 / n as f64))).collect(),
    })
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = format!(
            "overall accuracy: {:.2}% ({}/{} frames)\nspeaker\tframes\taccuracy\n",
            100.0 * self.overall_accuracy,
            self.n_correct,
            self.n_frames_total
        );
        for (s, (n, acc)) in &self.per_speaker {
            let _ = writeln!(out, "{s}\t{n}\t{:.2}", 100.0 * acc);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapProbe {
    pub baseline_acc: f64,
    pub candidate_acc: f64,
    /// `candidate - baseline`, as a fraction.
    pub gap: f64,
}

impl GapProbe {
    pub fn gap_points(&self) -> f64 {
        100.0 * self.gap
    }

    /// Whether the gap exceeds [`LEAK_THRESHOLD_POINTS`].
    pub fn leaks(&self) -> bool {
        self.gap_points() > LEAK_THRESHOLD_POINTS
    }

    pub fn verdict(&self) -> &'static str {
        if self.leaks() {
            "LEAK"
        } else {
            "NO-LEAK"
        }
    }
}

pub fn membership_gap(candidate: &Network, baseline: &Network, outlier_test: &Dataset) -> Result<GapProbe> {
    if candidate.dims() != baseline.dims() {
        return Err(Error::Shape(format!("candidate is {}, baseline is {}", candidate.dims(), baseline.dims())));
    }
    let candidate_acc = accuracy(candidate, outlier_test)?.overall_accuracy;
    let baseline_acc = accuracy(baseline, outlier_test)?.overall_accuracy;
    Ok(GapProbe { baseline_acc, candidate_acc, gap: candidate_acc - baseline_acc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub testset: String,
    /// Percent, as rendered.
    pub accuracy: f64,
    pub frames: usize,
}

/// Cross product of models and test sets, model-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

pub fn experiment_report(models: &[(String, &Network)], testsets: &[(String, &Dataset)]) -> Result<ExperimentReport> {
    if models.is_empty() || testsets.is_empty() {
        return Err(Error::InvalidValue("experiment report needs at least one model and one test set".into()));
    }
    let mut rows = Vec::with_capacity(models.len() * testsets.len());
    for (mname, net) in models {
        for (tname, data) in testsets {
            let r = accuracy(net, data)?;
            rows.push(ReportRow {
                model: mname.clone(),
                testset: tname.clone(),
                accuracy: (100.0 * r.overall_accuracy * 100.0).round() / 100.0,
                frames: r.n_frames_total,
            });
        }
    }
    Ok(ExperimentReport { rows })
}

impl ExperimentReport {
    /// Aligned plain-text table; the model name is shown on its first row only.
    pub fn render_text(&self) -> String {
        let w_model = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max("Training Set".len());
        let w_test = self.rows.iter().map(|r| r.testset.len()).max().unwrap_or(0).max("Test Set".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<w_model$}  {:<w_test$}  {:>8}", "Training Set", "Test Set", "Accuracy");
        let _ = writeln!(out, "{}", "-".repeat(w_model + w_test + 12));
        let mut last: Option<&str> = None;
        for r in &self.rows {
            let name = if last == Some(r.model.as_str()) { "" } else { r.model.as_str() };
            last = Some(&r.model);
            let _ = writeln!(out, "{:<w_model$}  {:<w_test$}  {:>8.2}", name, r.testset, r.accuracy);
        }
        out
    }

    /// Tab-separated with a one-line header.
    pub fn render_tsv(&self) -> String {
        let mut out = String::from("model\ttestset\taccuracy\tframes\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{:.2}\t{}", r.model, r.testset, r.accuracy, r.frames);
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("report: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some("model\ttestset\taccuracy\tframes") {
            return Err(bad("missing header"));
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let c: Vec<&str> = l.split('\t').collect();
                if c.len() != 4 {
                    return Err(bad("expected 4 columns"));
                }
                Ok(ReportRow {
                    model: c[0].to_string(),
                    testset: c[1].to_string(),
                    accuracy: c[2].parse().map_err(|_| bad("accuracy"))?,
                    frames: c[3].parse().map_err(|_| bad("frames"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, FeatureSequence, SynthSpec};
    use crate::nn::NetworkDims;
    use crate::rng::RandomSource;

    fn data() -> Dataset {
        let spec = SynthSpec {
            feature_dim: 3,
            num_classes: 4,
            n_speakers: 3,
            sequences_per_speaker: 2,
            frames_per_sequence: 6,
            outlier: None,
            ..Default::default()
        };
        synth_generate(&spec, &mut RandomSource::new(1)).unwrap()
    }

    /// Output bias `big` on the class read from feature 0, via a network
    /// whose LSTM passes feature 0 through: only possible for a fixed label.
    fn constant_class_net(dims: NetworkDims, class: usize) -> Network {
        let mut net = Network::zeros(dims);
        let n = net.parameter_count();
        net.params_mut()[n - dims.output_dim + class] = 1e3;
        net
    }

    #[test]
    fn zero_network_predicts_class_zero() {
        let ds = data();
        let net = Network::zeros(NetworkDims::new(3, 2, 4).unwrap());
        let r = accuracy(&net, &ds).unwrap();
        let zeros = ds.sequences.iter().flat_map(|s| s.labels()).filter(|&&l| l == 0).count();
        assert_eq!(r.n_correct, zeros);
        assert_eq!(r.overall_accuracy, zeros as f64 / ds.total_frames() as f64);
        assert_eq!(r.per_speaker.values().map(|v| v.0).sum::<usize>(), r.n_frames_total);
    }

    #[test]
    fn perfect_model_scores_one() {
        let dims = NetworkDims::new(3, 2, 4).unwrap();
        let mut ds = Dataset::new(3, 4, "const");
        for s in 0..3 {
            ds.push(FeatureSequence::new(s, 3, vec![0.5; 12], vec![2; 4]).unwrap()).unwrap();
        }
        let r = accuracy(&constant_class_net(dims, 2), &ds).unwrap();
        assert_eq!(r.overall_accuracy, 1.0);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn argmax_invariance_under_monotone_transform() {
        let ds = data();
        let dims = NetworkDims::new(3, 5, 4).unwrap();
        let net = Network::init(dims, &mut RandomSource::new(3));
        let base = accuracy(&net, &ds).unwrap();
        // Scale the output layer by 7 and add 3 to every output bias:
        // logits become 7 z + 3.
        let mut scaled = net.clone();
        let n = scaled.parameter_count();
        let wo_start = n - dims.output_dim * (dims.hidden_dim + 1);
        for (i, p) in scaled.params_mut()[wo_start..].iter_mut().enumerate() {
            *p *= 7.0;
            if i >= dims.output_dim * dims.hidden_dim {
                *p += 3.0;
            }
        }
        assert_eq!(accuracy(&scaled, &ds).unwrap(), base);
    }

    #[test]
    fn permutation_invariance_and_determinism() {
        let ds = data();
        let net = Network::init(NetworkDims::new(3, 5, 4).unwrap(), &mut RandomSource::new(3));
        let mut rev = ds.clone();
        rev.sequences.reverse();
        let a = accuracy(&net, &ds).unwrap();
        assert_eq!(accuracy(&net, &rev).unwrap(), a);
        assert_eq!(accuracy(&net, &ds).unwrap(), a);
    }

    #[test]
    fn gap_examples() {
        let ds = data();
        let dims = NetworkDims::new(3, 5, 4).unwrap();
        let net = Network::init(dims, &mut RandomSource::new(3));
        let g = membership_gap(&net, &net, &ds).unwrap();
        assert_eq!(g.gap, 0.0);
        assert_eq!(g.verdict(), "NO-LEAK");
        let other = Network::zeros(NetworkDims::new(3, 6, 4).unwrap());
        assert!(matches!(membership_gap(&net, &other, &ds), Err(Error::Shape(_))));

        let open_run = GapProbe { baseline_acc: 0.231, candidate_acc: 0.460, gap: 0.460 - 0.231 };
        assert!((open_run.gap_points() - 22.9).abs() < 1e-9);
        assert!(open_run.leaks());
        let dp_run = GapProbe { baseline_acc: 0.231, candidate_acc: 0.220, gap: 0.220 - 0.231 };
        assert!((dp_run.gap_points() + 1.1).abs() < 1e-9);
        assert!(!dp_run.leaks());
    }

    #[test]
    fn shape_mismatch() {
        let ds = data();
        let net = Network::zeros(NetworkDims::new(4, 2, 4).unwrap());
        assert!(matches!(accuracy(&net, &ds), Err(Error::Shape(_))));
    }

    #[test]
    fn report_shapes_and_round_trip() {
        let ds = data();
        let (tr, te) = ds.split(0.5, &mut RandomSource::new(2)).unwrap();
        let dims = NetworkDims::new(3, 5, 4).unwrap();
        let nets: Vec<Network> = (0..3).map(|s| Network::init(dims, &mut RandomSource::new(s))).collect();
        let one = experiment_report(&[("m".into(), &nets[0])], &[("t".into(), &te)]).unwrap();
        assert_eq!(one.rows.len(), 1);
        let models: Vec<(String, &Network)> = nets.iter().enumerate().map(|(i, n)| (format!("model-{i}"), n)).collect();
        let rep = experiment_report(&models, &[("train".into(), &tr), ("test".into(), &te)]).unwrap();
        assert_eq!(rep.rows.len(), 6);
        assert_eq!(rep.rows[0].model, "model-0");
        assert_eq!(rep.rows[1].model, "model-0");
        assert_eq!(rep.rows[2].model, "model-1");
        assert_eq!(ExperimentReport::parse_tsv(&rep.render_tsv()).unwrap(), rep);
        assert_eq!(rep.render_text().lines().count(), 2 + 6);
        assert!(experiment_report(&[], &[("t".into(), &te)]).is_err());
    }
}
