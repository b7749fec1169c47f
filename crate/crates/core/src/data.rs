//! Feature-sequence datasets: the `SENO0001` container, a synthetic
//! generator with an optional outlier speaker, and speaker-stratified splits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::read_exact_or;
use crate::rng::RandomSource;

pub const DATASET_MAGIC: &[u8; 8] = b"SENO0001";

/// One utterance: `T` frames of `dim` features plus a class label per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub speaker_id: u32,
    dim: usize,
    frames: Vec<f64>,
    labels: Vec<u32>,
}

impl FeatureSequence {
    pub fn new(speaker_id: u32, dim: usize, frames: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        if dim == 0 || labels.is_empty() || frames.len() != dim * labels.len() {
            return Err(Error::Shape(format!(
                "{} feature values for {} labels at dim {dim}",
                frames.len(),
                labels.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite feature value".into()));
        }
        Ok(Self { speaker_id, dim, frames, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `T x dim` features.
    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub sequences: Vec<FeatureSequence>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(feature_dim: usize, num_classes: usize, provenance: impl Into<String>) -> Self {
        Self { feature_dim, num_classes, sequences: Vec::new(), provenance: provenance.into() }
    }

    /// Appends `seq` after checking it against the dataset's shape.
    pub fn push(&mut self, seq: FeatureSequence) -> Result<()> {
        if seq.dim != self.feature_dim {
            return Err(Error::Shape(format!("sequence dim {} != dataset dim {}", seq.dim, self.feature_dim)));
        }
        if let Some(&l) = seq.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::Label { label: l, num_classes: self.num_classes });
        }
        self.sequences.push(seq);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(FeatureSequence::len).sum()
    }

    /// Distinct speaker ids, ascending.
    pub fn speakers(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.sequences.iter().map(|q| q.speaker_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn filter_speaker(&self, speaker: u32) -> Dataset {
        Dataset {
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            sequences: self.sequences.iter().filter(|s| s.speaker_id == speaker).cloned().collect(),
            provenance: format!("{}[speaker={speaker}]", self.provenance),
        }
    }

    /// Training operations require at least one sequence.
    pub fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyDataset)
        } else {
            Ok(())
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let u32_of = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::Format(format!("{what} exceeds u32")));
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&u32_of(self.feature_dim, "feature_dim")?.to_le_bytes())?;
        w.write_all(&u32_of(self.num_classes, "num_classes")?.to_le_bytes())?;
        w.write_all(&u32_of(self.sequences.len(), "sequence count")?.to_le_bytes())?;
        for s in &self.sequences {
            w.write_all(&s.speaker_id.to_le_bytes())?;
            w.write_all(&u32_of(s.len(), "sequence length")?.to_le_bytes())?;
            for &v in &s.frames {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            for &l in &s.labels {
                w.write_all(&l.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, provenance: impl Into<String>) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact_or(&mut r, &mut magic, "dataset header")?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a SENO0001 dataset".into()));
        }
        let read_u32 = |r: &mut R, what: &str| -> Result<u32> {
            let mut b = [0u8; 4];
            read_exact_or(r, &mut b, what)?;
            Ok(u32::from_le_bytes(b))
        };
        let dim = read_u32(&mut r, "feature_dim")? as usize;
        let classes = read_u32(&mut r, "num_classes")? as usize;
        let n = read_u32(&mut r, "sequence count")? as usize;
        if dim == 0 || classes == 0 {
            return Err(Error::Format("feature_dim and num_classes must be >= 1".into()));
        }
        let mut ds = Dataset::new(dim, classes, provenance);
        for i in 0..n {
            let speaker = read_u32(&mut r, "speaker id")?;
            let t = read_u32(&mut r, "sequence length")? as usize;
            if t == 0 {
                return Err(Error::Format(format!("sequence {i} has no frames")));
            }
            let mut raw = vec![0u8; t * dim * 4];
            read_exact_or(&mut r, &mut raw, "frames")?;
            let frames: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let mut raw = vec![0u8; t * 4];
            read_exact_or(&mut r, &mut raw, "labels")?;
            let labels: Vec<u32> = raw.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let seq = FeatureSequence::new(speaker, dim, frames, labels).map_err(|e| Error::Format(e.to_string()))?;
            ds.push(seq).map_err(|e| Error::Format(e.to_string()))?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after last sequence".into()));
        }
        Ok(ds)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset; provenance is the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::read_from(BufReader::new(File::open(path)?), name)
    }

    /// Sequence-level split into `(train, test)`, stratified by speaker.
    ///
    /// The test set gets `ceil(fraction * n)` sequences (kept within
    /// `1..n`), apportioned to speakers by largest remainder; sequences
    /// keep their original relative order on both sides.
    pub fn split(&self, test_fraction: f64, rng: &mut RandomSource) -> Result<(Dataset, Dataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::InvalidFraction(test_fraction));
        }
        let n = self.len();
        if n < 2 {
            return Err(Error::InvalidValue(format!("cannot split {n} sequences")));
        }
        let n_test = ((test_fraction * n as f64).ceil() as usize).clamp(1, n - 1);

        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.sequences.iter().enumerate() {
            groups.entry(s.speaker_id).or_default().push(i);
        }
        // Largest-remainder apportionment of n_test across speakers.
        let mut quota: Vec<(u32, usize, f64)> = groups
            .iter()
            .map(|(&spk, idx)| {
                let exact = n_test as f64 * idx.len() as f64 / n as f64;
                (spk, exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let assigned: usize = quota.iter().map(|q| q.1).sum();
        let mut order: Vec<usize> = (0..quota.len()).collect();
        order.sort_by(|&a, &b| quota[b].2.total_cmp(&quota[a].2).then(quota[a].0.cmp(&quota[b].0)));
        for &k in order.iter().take(n_test - assigned) {
            quota[k].1 += 1;
        }

        let mut is_test = vec![false; n];
        for (spk, take, _) in quota {
            let mut idx = groups[&spk].clone();
            rng.shuffle(&mut idx);
            for &i in idx.iter().take(take) {
                is_test[i] = true;
            }
        }
        let part = |want: bool, tag: &str| Dataset {
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            sequences: self
                .sequences
                .iter()
                .zip(&is_test)
                .filter(|(_, &t)| t == want)
                .map(|(s, _)| s.clone())
                .collect(),
            provenance: format!("{}/{tag}", self.provenance),
        };
        Ok((part(false, "train"), part(true, "test")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierSpec {
    /// Index of the outlier among this dataset's speakers.
    pub index: usize,
    /// Multiplier `m >= 1` applied to that speaker's offset.
    pub multiplier: f64,
}

/// Parameters of the synthetic generator.
///
/// Class centers come from `centers_seed` so that datasets generated with
/// different seeds still share one label space; speaker offsets and frame
/// noise come from the generation seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub n_speakers: usize,
    pub sequences_per_speaker: usize,
    pub frames_per_sequence: usize,
    pub speaker_offset_scale: f64,
    pub noise_scale: f64,
    pub outlier: Option<OutlierSpec>,
    pub centers_seed: u64,
    /// Id of the first speaker; the others follow consecutively.
    pub speaker_id_base: u32,
    pub provenance: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            feature_dim: 13,
            num_classes: 32,
            n_speakers: 6,
            sequences_per_speaker: 10,
            frames_per_sequence: 50,
            speaker_offset_scale: 0.3,
            noise_scale: 0.5,
            outlier: Some(OutlierSpec { index: 5, multiplier: 10.0 }),
            centers_seed: 0,
            speaker_id_base: 0,
            provenance: "synthetic".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0
            || self.num_classes == 0
            || self.n_speakers == 0
            || self.sequences_per_speaker == 0
            || self.frames_per_sequence == 0
        {
            return bad("synth counts must all be >= 1".into());
        }
        if !(self.speaker_offset_scale.is_finite() && self.speaker_offset_scale >= 0.0) {
            return bad(format!("speaker_offset_scale {} must be >= 0", self.speaker_offset_scale));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return bad(format!("noise_scale {} must be >= 0", self.noise_scale));
        }
        if let Some(o) = self.outlier {
            if o.index >= self.n_speakers {
                return bad(format!("outlier index {} >= n_speakers {}", o.index, self.n_speakers));
            }
            if !(o.multiplier.is_finite() && o.multiplier >= 1.0) {
                return bad(format!("outlier multiplier {} must be >= 1", o.multiplier));
            }
        }
        if u32::try_from(self.n_speakers).ok().and_then(|n| self.speaker_id_base.checked_add(n)).is_none() {
            return bad("speaker ids overflow u32".into());
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` comments allowed). Unknown keys are
    /// rejected; missing keys keep their defaults. `outlier.index = none`
    /// disables the outlier.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SynthSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let err = || Error::Config(format!("line {}: bad value {value:?} for {key}", lineno + 1));
            match key {
                "feature_dim" => spec.feature_dim = value.parse().map_err(|_| err())?,
                "num_classes" => spec.num_classes = value.parse().map_err(|_| err())?,
                "n_speakers" => spec.n_speakers = value.parse().map_err(|_| err())?,
                "sequences_per_speaker" => spec.sequences_per_speaker = value.parse().map_err(|_| err())?,
                "frames_per_sequence" => spec.frames_per_sequence = value.parse().map_err(|_| err())?,
                "speaker_offset_scale" => spec.speaker_offset_scale = value.parse().map_err(|_| err())?,
                "noise_scale" => spec.noise_scale = value.parse().map_err(|_| err())?,
                "centers_seed" => spec.centers_seed = value.parse().map_err(|_| err())?,
                "speaker_id_base" => spec.speaker_id_base = value.parse().map_err(|_| err())?,
                "provenance" => spec.provenance = value.to_string(),
                "outlier.index" => {
                    if value == "none" {
                        spec.outlier = None;
                    } else {
                        let index = value.parse().map_err(|_| err())?;
                        let multiplier = spec.outlier.map_or(1.0, |o| o.multiplier);
                        spec.outlier = Some(OutlierSpec { index, multiplier });
                    }
                }
                "outlier.multiplier" => {
                    let multiplier = value.parse().map_err(|_| err())?;
                    let index = spec.outlier.map_or(0, |o| o.index);
                    spec.outlier = Some(OutlierSpec { index, multiplier });
                }
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "feature_dim = {}\nnum_classes = {}\nn_speakers = {}\nsequences_per_speaker = {}\n\
             frames_per_sequence = {}\nspeaker_offset_scale = {}\nnoise_scale = {}\n\
             centers_seed = {}\nspeaker_id_base = {}\nprovenance = {}\n",
            self.feature_dim,
            self.num_classes,
            self.n_speakers,
            self.sequences_per_speaker,
            self.frames_per_sequence,
            self.speaker_offset_scale,
            self.noise_scale,
            self.centers_seed,
            self.speaker_id_base,
            self.provenance
        );
        match self.outlier {
            Some(o) => s.push_str(&format!("outlier.index = {}\noutlier.multiplier = {}\n", o.index, o.multiplier)),
            None => s.push_str("outlier.index = none\n"),
        }
        s
    }

    /// Class centers, `num_classes x feature_dim`, each `N(0, I)`.
    pub fn class_centers(&self) -> Vec<f64> {
        let mut rng = RandomSource::new(self.centers_seed);
        (0..self.num_classes * self.feature_dim).map(|_| rng.standard_normal()).collect()
    }
}

/// Generates a dataset from `spec`.
///
/// Frame `t` of sequence `q` has label `(q + t) mod num_classes` and
/// features `center[label] + offset[speaker] + N(0, noise_scale^2 I)` where
/// `offset[speaker] ~ N(0, speaker_offset_scale^2 I)`, scaled by the outlier
/// multiplier for the outlier speaker. Values are rounded to `f32` so the
/// in-memory dataset equals its on-disk form.
pub fn synth_generate(spec: &SynthSpec, rng: &mut RandomSource) -> Result<Dataset> {
    spec.validate()?;
    let dim = spec.feature_dim;
    let centers = spec.class_centers();
    let offsets: Vec<Vec<f64>> = (0..spec.n_speakers)
        .map(|s| {
            let m = match spec.outlier {
                Some(o) if o.index == s => o.multiplier,
                _ => 1.0,
            };
            // Draw the unit offset first, then scale: the direction is shared
            // across multipliers for a given seed.
            (0..dim).map(|_| rng.standard_normal() * spec.speaker_offset_scale * m).collect()
        })
        .collect();

    let mut ds = Dataset::new(dim, spec.num_classes, spec.provenance.clone());
    let mut q = 0usize;
    for (s, offset) in offsets.iter().enumerate() {
        let speaker_id = spec.speaker_id_base + s as u32;
        for _ in 0..spec.sequences_per_speaker {
            let t_len = spec.frames_per_sequence;
            let mut frames = Vec::with_capacity(t_len * dim);
            let mut labels = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let label = (q + t) % spec.num_classes;
                labels.push(label as u32);
                for k in 0..dim {
                    let v = centers[label * dim + k] + offset[k] + spec.noise_scale * rng.standard_normal();
                    frames.push(f64::from(v as f32));
                }
            }
            ds.push(FeatureSequence::new(speaker_id, dim, frames, labels)?)?;
            q += 1;
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec { n_speakers: 3, sequences_per_speaker: 4, frames_per_sequence: 5, outlier: None, ..Default::default() }
    }

    #[test]
    fn noiseless_frames_equal_class_centers() {
        let spec = SynthSpec { noise_scale: 0.0, speaker_offset_scale: 0.0, ..tiny_spec() };
        let ds = synth_generate(&spec, &mut RandomSource::new(1)).unwrap();
        let centers = spec.class_centers();
        for s in &ds.sequences {
            for t in 0..s.len() {
                let c = s.labels()[t] as usize;
                let expected: Vec<f64> = centers[c * 13..(c + 1) * 13].iter().map(|&v| f64::from(v as f32)).collect();
                assert_eq!(s.frame(t), &expected[..]);
            }
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = SynthSpec::default();
        let a = synth_generate(&spec, &mut RandomSource::new(7)).unwrap();
        let b = synth_generate(&spec, &mut RandomSource::new(7)).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&spec, &mut RandomSource::new(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn outlier_offset_scales_with_multiplier() {
        // Noise-free frames minus centers recover the offset exactly (up to f32).
        let base = SynthSpec { noise_scale: 0.0, speaker_offset_scale: 1.0, ..tiny_spec() };
        let offset_norm = |m: f64| {
            let spec = SynthSpec { outlier: Some(OutlierSpec { index: 1, multiplier: m }), ..base.clone() };
            let ds = synth_generate(&spec, &mut RandomSource::new(3)).unwrap();
            let centers = spec.class_centers();
            let s = ds.sequences.iter().find(|s| s.speaker_id == 1).unwrap();
            let c = s.labels()[0] as usize;
            s.frame(0).iter().zip(&centers[c * 13..]).map(|(f, c)| (f - c).powi(2)).sum::<f64>().sqrt()
        };
        let (one, ten) = (offset_norm(1.0), offset_norm(10.0));
        assert!((ten / one - 10.0).abs() < 1e-4, "{one} {ten}");
    }

    #[test]
    fn centroid_probe_separates_default_outlier() {
        let spec = SynthSpec::default();
        let ds = synth_generate(&spec, &mut RandomSource::new(21)).unwrap();
        let outlier = 5u32;
        let dim = spec.feature_dim;
        let mut cent = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        // Fit centroids on the first half of each speaker's sequences.
        let fit: Vec<&FeatureSequence> = ds.sequences.iter().enumerate().filter(|(i, _)| i % 10 < 5).map(|(_, s)| s).collect();
        for s in &fit {
            let k = usize::from(s.speaker_id == outlier);
            for t in 0..s.len() {
                cent[k].iter_mut().zip(s.frame(t)).for_each(|(c, v)| *c += v);
                counts[k] += 1;
            }
        }
        for k in 0..2 {
            cent[k].iter_mut().for_each(|c| *c /= counts[k] as f64);
        }
        let (mut correct, mut total) = (0, 0);
        for (_, s) in ds.sequences.iter().enumerate().filter(|(i, _)| i % 10 >= 5) {
            for t in 0..s.len() {
                let d = |c: &Vec<f64>| c.iter().zip(s.frame(t)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let guess = d(&cent[1]) < d(&cent[0]);
                correct += usize::from(guess == (s.speaker_id == outlier));
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.95, "centroid probe accuracy {acc}");
    }

    #[test]
    fn spec_text_round_trip_and_rejection() {
        let spec = SynthSpec { centers_seed: 9, speaker_id_base: 100, ..Default::default() };
        assert_eq!(SynthSpec::parse(&spec.to_text()).unwrap(), spec);
        assert!(SynthSpec::parse("bogus = 1").is_err());
        assert!(SynthSpec::parse("outlier.multiplier = 0.5").is_err());
        assert!(SynthSpec::parse("n_speakers = 2\noutlier.index = 4").is_err());
        assert_eq!(SynthSpec::parse("outlier.index = none").unwrap().outlier, None);
    }

    #[test]
    fn write_read_round_trip() {
        let ds = synth_generate(&tiny_spec(), &mut RandomSource::new(4)).unwrap();
        let bytes = ds.to_bytes().unwrap();
        let back = Dataset::read_from(&bytes[..], ds.provenance.clone()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn empty_dataset_file() {
        let ds = Dataset::new(13, 32, "empty");
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(bytes.len(), 20);
        let back = Dataset::read_from(&bytes[..], "empty").unwrap();
        assert!(back.is_empty());
        assert!(matches!(back.require_nonempty(), Err(Error::EmptyDataset)));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ds = synth_generate(&tiny_spec(), &mut RandomSource::new(4)).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert!(matches!(Dataset::read_from(&bytes[..20], "x"), Err(Error::Format(_))));
        assert!(matches!(Dataset::read_from(&bytes[..12], "x"), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(Dataset::read_from(&bad[..], "x"), Err(Error::Format(_))));
        // First label of the first sequence -> out of range.
        let label_off = 20 + 8 + 5 * 13 * 4;
        let mut bad = bytes.clone();
        bad[label_off..label_off + 4].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(Dataset::read_from(&bad[..], "x"), Err(Error::Format(_))));
    }

    #[test]
    fn split_examples() {
        let spec = SynthSpec { n_speakers: 2, sequences_per_speaker: 5, ..tiny_spec() };
        let ds = synth_generate(&spec, &mut RandomSource::new(2)).unwrap();
        let (train, test) = ds.split(0.5, &mut RandomSource::new(1)).unwrap();
        assert_eq!((train.len(), test.len()), (5, 5));
        let (train2, test2) = ds.split(0.5, &mut RandomSource::new(1)).unwrap();
        assert_eq!((train, test), (train2, test2));

        let one = SynthSpec { n_speakers: 1, sequences_per_speaker: 7, ..tiny_spec() };
        let ds1 = synth_generate(&one, &mut RandomSource::new(2)).unwrap();
        let (tr, te) = ds1.split(0.3, &mut RandomSource::new(5)).unwrap();
        assert_eq!((tr.len(), te.len()), (4, 3));

        assert!(matches!(ds.split(0.0, &mut RandomSource::new(1)), Err(Error::InvalidFraction(_))));
        assert!(matches!(ds.split(1.0, &mut RandomSource::new(1)), Err(Error::InvalidFraction(_))));
    }

    #[test]
    fn split_partitions_and_stratifies() {
        let spec = SynthSpec { n_speakers: 4, sequences_per_speaker: 6, ..tiny_spec() };
        let ds = synth_generate(&spec, &mut RandomSource::new(2)).unwrap();
        for seed in 0..10 {
            let (train, test) = ds.split(0.25, &mut RandomSource::new(seed)).unwrap();
            assert_eq!(train.len() + test.len(), ds.len());
            for s in &ds.sequences {
                let in_train = train.sequences.contains(s);
                let in_test = test.sequences.contains(s);
                assert!(in_train ^ in_test);
            }
            for spk in ds.speakers() {
                let k = test.filter_speaker(spk).len();
                assert!(k == 1 || k == 2, "speaker {spk} got {k} test sequences");
            }
            assert_eq!(test.len(), 6);
        }
    }
}
