#![allow(dead_code)]

use fedsenone::data::{OutlierSpec, SynthSpec};
use fedsenone::dpsgd::DpSgdConfig;
use fedsenone::federation::WorkerSetup;
use fedsenone::nn::finite_difference_gradient;
use fedsenone::{synth_generate, Dataset, FeatureSequence, Network, NetworkDims, PrivacyParams, RandomSource};

pub fn random_sequence(rng: &mut RandomSource, speaker: u32, dim: usize, classes: usize, t: usize) -> FeatureSequence {
    let frames = (0..t * dim).map(|_| rng.normal(0.0, 1.0)).collect();
    let labels = (0..t).map(|_| rng.below(classes) as u32).collect();
    FeatureSequence::new(speaker, dim, frames, labels).unwrap()
}

pub fn random_dataset(rng: &mut RandomSource, dim: usize, classes: usize, n: usize, max_t: usize) -> Dataset {
    let mut ds = Dataset::new(dim, classes, "random");
    for i in 0..n {
        let t = 1 + rng.below(max_t);
        ds.push(random_sequence(rng, (i % 3) as u32, dim, classes, t)).unwrap();
    }
    ds
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-4)` over all
/// parameters, with central differences of step `h`.
pub fn gradient_check_error(net: &Network, seq: &FeatureSequence, h: f64) -> f64 {
    let analytic = net.loss_and_gradient(seq.frames(), seq.labels()).unwrap().1;
    let numeric = finite_difference_gradient(net, seq.frames(), seq.labels(), h).unwrap();
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

pub fn unlimited() -> PrivacyParams {
    PrivacyParams::new(1e12, 0.5).unwrap()
}

pub fn setup(worker_id: u32, dp: DpSgdConfig, data: Dataset, seed: u64) -> WorkerSetup {
    WorkerSetup { worker_id, dp, data, budget: unlimited(), seed }
}

/// Federated learning rate of the membership experiment.
pub const MEMBERSHIP_LR: f64 = 0.005;
pub const MEMBERSHIP_BATCH: usize = 8;
pub const MEMBERSHIP_STEPS: u32 = 200;

/// Datasets of the desk-scale membership experiment: a public warm-start set,
/// two in-distribution private sets, one outlier speaker (offset x10), and
/// held-out test sets.
pub struct Membership {
    pub public: Dataset,
    pub private: [Dataset; 2],
    pub outlier: Dataset,
    pub in_dist_test: Dataset,
    pub outlier_test: Dataset,
    pub init: Network,
}

pub fn membership_data(seed: u64) -> Membership {
    let base = SynthSpec {
        speaker_offset_scale: 0.2,
        noise_scale: 0.5,
        frames_per_sequence: 3,
        sequences_per_speaker: 66,
        centers_seed: 1000 + seed,
        outlier: None,
        ..SynthSpec::default()
    };
    let mut rng = RandomSource::new(seed);
    let gen = |spec: SynthSpec, rng: &mut RandomSource| synth_generate(&spec, rng).unwrap();
    let public = gen(SynthSpec { n_speakers: 6, provenance: "public".into(), ..base.clone() }, &mut rng);
    let p1 = gen(SynthSpec { n_speakers: 11, speaker_id_base: 100, provenance: "private-1".into(), ..base.clone() }, &mut rng);
    let p2 = gen(SynthSpec { n_speakers: 8, speaker_id_base: 200, provenance: "private-2".into(), ..base.clone() }, &mut rng);
    let jb = gen(
        SynthSpec {
            n_speakers: 1,
            speaker_id_base: 300,
            sequences_per_speaker: 330,
            outlier: Some(OutlierSpec { index: 0, multiplier: 10.0 }),
            provenance: "outlier".into(),
            ..base
        },
        &mut rng,
    );
    let (p1_train, p1_test) = p1.split(0.25, &mut rng).unwrap();
    let (p2_train, p2_test) = p2.split(0.25, &mut rng).unwrap();
    let (jb_train, jb_test) = jb.split(0.25, &mut rng).unwrap();
    let mut in_dist_test = p1_test;
    in_dist_test.sequences.extend(p2_test.sequences);
    let dims = NetworkDims::new(13, 16, 32).unwrap();
    let init = Network::init(dims, &mut RandomSource::new(seed + 50));
    Membership {
        public,
        private: [p1_train, p2_train],
        outlier: jb_train,
        in_dist_test,
        outlier_test: jb_test,
        init,
    }
}

pub mod strategies {
    use fedsenone::federation::{AbortCode, InitPayload, Message, ModelInit};
    use fedsenone::{Dataset, FeatureSequence, FlatGradient, GradientRelease, Network, NetworkDims, PrivacyParams};
    use proptest::collection::vec;
    use proptest::prelude::*;

    /// Any bit pattern, NaN payloads included.
    pub fn any_bits() -> impl Strategy<Value = f64> {
        any::<u64>().prop_map(f64::from_bits)
    }

    pub fn finite() -> impl Strategy<Value = f64> {
        any::<f64>().prop_filter("finite", |v| v.is_finite())
    }

    pub fn f32_valued() -> impl Strategy<Value = f64> {
        any::<f32>().prop_filter("finite", |v| v.is_finite()).prop_map(f64::from)
    }

    pub fn dims() -> impl Strategy<Value = NetworkDims> {
        (1usize..=8, 1usize..=8, 1usize..=8).prop_map(|(d, h, o)| NetworkDims::new(d, h, o).unwrap())
    }

    fn abort_code() -> impl Strategy<Value = AbortCode> {
        (1u32..=6).prop_map(|c| AbortCode::from_u32(c).unwrap())
    }

    pub fn message() -> impl Strategy<Value = Message> {
        let init = (
            dims(),
            prop_oneof![any::<u64>().prop_map(ModelInit::Seed), vec(any_bits(), 0..64).prop_map(ModelInit::Parameters)],
            any::<u32>(),
            any_bits(),
        )
            .prop_map(|(dims, model, total_steps, lr)| Message::Init(InitPayload { dims, model, total_steps, lr }));
        let grad = (any::<u32>(), vec(any_bits(), 0..200), any_bits(), any_bits(), any::<bool>(), any_bits(), any::<u32>())
            .prop_map(|(step_id, v, epsilon, delta, noisy, clip_bound, batch_size)| {
                Message::Grad(GradientRelease {
                    step_id,
                    vector: FlatGradient::new(v),
                    spent: PrivacyParams { epsilon, delta },
                    noisy,
                    clip_bound,
                    batch_size,
                })
            });
        prop_oneof![
            (any::<u32>(), any::<u32>()).prop_map(|(worker_id, protocol_version)| Message::Hello { worker_id, protocol_version }),
            init,
            grad,
            (any::<u32>(), vec(any_bits(), 0..200))
                .prop_map(|(step_id, v)| Message::Avg { step_id, gradient: FlatGradient::new(v) }),
            any::<u32>().prop_map(|step_id| Message::Done { step_id }),
            (abort_code(), ".{0,40}").prop_map(|(code, text)| Message::Abort { code, text }),
        ]
    }

    pub fn sequence(dim: usize, classes: usize) -> impl Strategy<Value = FeatureSequence> {
        (any::<u32>(), 1usize..12).prop_flat_map(move |(speaker, t)| {
            (vec(f32_valued(), t * dim), vec(0..classes as u32, t))
                .prop_map(move |(frames, labels)| FeatureSequence::new(speaker, dim, frames, labels).unwrap())
        })
    }

    pub fn dataset() -> impl Strategy<Value = Dataset> {
        (1usize..=8, 1usize..=10).prop_flat_map(|(dim, classes)| {
            vec(sequence(dim, classes), 0..6).prop_map(move |seqs| {
                let mut ds = Dataset::new(dim, classes, "prop");
                for s in seqs {
                    ds.push(s).unwrap();
                }
                ds
            })
        })
    }

    pub fn network() -> impl Strategy<Value = Network> {
        dims().prop_flat_map(|d| vec(finite(), d.parameter_count()).prop_map(move |p| Network::from_flat(d, p).unwrap()))
    }
}
