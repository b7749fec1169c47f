use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use fedsenone::config::{epochs_to_steps, RunConfig};
use fedsenone::data::DATASET_MAGIC;
use fedsenone::dpsgd::{dataset_loss, warm_start as run_warm_start};
use fedsenone::eval::experiment_report;
use fedsenone::federation::inproc::inproc_session;
use fedsenone::federation::tcp::{worker_run, BoundCoordinator};
use fedsenone::federation::{AbortCode, CoordinatorSummary, InitPayload, ModelInit, SessionConfig, SessionStatus, WorkerSetup};
use fedsenone::nn::NETWORK_MAGIC;
use fedsenone::{
    accuracy, membership_gap, synth_generate, AccountLedger, Dataset, Network, NetworkDims, PrivacyParams, RandomSource,
    SynthSpec,
};

use crate::failure::{Failure, TRANSPORT};
use crate::{put, CoordinatorArgs, EvalArgs, InspectArgs, SimulateArgs, StepsArgs, SynthArgs, WarmStartArgs, WorkerArgs};

type Outcome = Result<(), Failure>;

fn base_config(path: &Option<PathBuf>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn required<T>(value: Option<T>, what: &str) -> Result<T, Failure> {
    value.ok_or_else(|| Failure::usage(format!("{what} is required")))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn load_network(path: &Path) -> Result<Network, Failure> {
    Network::load(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn describe_dataset(ds: &Dataset) -> String {
    let mut out = format!(
        "dataset {}: {} sequences, {} frames, dim {}, {} classes, {} speakers\n",
        ds.provenance,
        ds.len(),
        ds.total_frames(),
        ds.feature_dim,
        ds.num_classes,
        ds.speakers().len()
    );
    out.push_str("speaker\tsequences\tframes\n");
    for s in ds.speakers() {
        let part = ds.filter_speaker(s);
        let _ = writeln!(out, "{s}\t{}\t{}", part.len(), part.total_frames());
    }
    out
}

/// Model dims from `model.*` keys, falling back to the data's shape.
fn model_dims(cfg: &RunConfig, data: &[&Dataset]) -> Result<NetworkDims, Failure> {
    let mut cfg = cfg.clone();
    if let Some(first) = data.first() {
        if cfg.get("model.input_dim").is_none() {
            cfg.set("model.input_dim", first.feature_dim.to_string())?;
        }
        if cfg.get("model.classes").is_none() {
            let classes = data.iter().map(|d| d.num_classes).max().unwrap_or(1);
            cfg.set("model.classes", classes.to_string())?;
        }
    }
    let dims = cfg.dims()?;
    for d in data {
        check_compatible(dims, d)?;
    }
    Ok(dims)
}

fn check_compatible(dims: NetworkDims, data: &Dataset) -> Outcome {
    if data.feature_dim != dims.input_dim || data.num_classes > dims.output_dim {
        return Err(Failure::usage(format!(
            "dataset {} ({} features, {} classes) does not fit a {dims} model",
            data.provenance, data.feature_dim, data.num_classes
        )));
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Outcome {
    let spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            SynthSpec::parse(&text)?
        }
        None => SynthSpec::default(),
    };
    let ds = synth_generate(&spec, &mut RandomSource::new(a.seed))?;
    ds.save(&a.out)?;
    print!("{}", describe_dataset(&ds));
    match spec.outlier {
        Some(o) => println!("outlier: speaker {} offset multiplier {}", spec.speaker_id_base as usize + o.index, o.multiplier),
        None => println!("outlier: none"),
    }
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Outcome {
    let bytes = fs::read(&a.path).map_err(|e| Failure::usage(format!("{}: {e}", a.path.display())))?;
    if bytes.starts_with(DATASET_MAGIC) {
        print!("{}", describe_dataset(&load_dataset(&a.path)?));
    } else if bytes.starts_with(NETWORK_MAGIC) {
        let net = load_network(&a.path)?;
        println!("model {}: {} parameters, sha256 {}", net.dims(), net.parameter_count(), net.param_hash());
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Failure::usage("unrecognized file"))?;
        let ledger = AccountLedger::parse_report(&text).map_err(|_| Failure::usage("unrecognized file"))?;
        println!(
            "ledger: {} entries, spent {}, budget {}, remaining epsilon {}",
            ledger.entries().len(),
            ledger.spent(),
            ledger.budget(),
            ledger.budget().epsilon - ledger.spent().epsilon
        );
    }
    Ok(())
}

pub fn warm_start(a: WarmStartArgs) -> Outcome {
    let mut cfg = base_config(&a.config)?;
    put(&mut cfg, "seed", &a.seed)?;
    put(&mut cfg, "train.epochs", &a.epochs)?;
    put(&mut cfg, "train.lr", &a.lr)?;
    put(&mut cfg, "train.batch", &a.batch)?;
    a.model.apply(&mut cfg)?;
    cfg.validate()?;
    let seed = required(cfg.seed()?, "--seed")?;
    let data = load_dataset(&a.data)?;
    data.require_nonempty()?;
    let init = match &a.init_model {
        Some(p) => {
            let net = load_network(p)?;
            check_compatible(net.dims(), &data)?;
            net
        }
        None => Network::init(model_dims(&cfg, &[&data])?, &mut RandomSource::new(seed).fork(1)),
    };
    let epochs = cfg.epochs()?;
    let net = run_warm_start(&init, &data, epochs, cfg.lr()?, cfg.batch()?, &mut RandomSource::new(seed).fork(2))?;
    net.save(&a.out)?;
    println!(
        "warm start {}: {epochs} epochs, loss {:.6} -> {:.6}, sha256 {}",
        net.dims(),
        dataset_loss(&init, &data)?,
        dataset_loss(&net, &data)?,
        net.param_hash()
    );
    Ok(())
}

fn summary_text(s: &CoordinatorSummary) -> String {
    let status = match &s.status {
        SessionStatus::Running => "running".to_string(),
        SessionStatus::Completed => "completed".to_string(),
        SessionStatus::Aborted { code, .. } => format!("aborted:{code}"),
    };
    let mut out = format!(
        "# status={status} steps_completed={} grads_received={}\nworker\tepsilon\tdelta\n",
        s.steps_completed, s.grads_received
    );
    for (w, p) in &s.per_worker_spent {
        let _ = writeln!(out, "{w}\t{}\t{}", p.epsilon, p.delta);
    }
    if let SessionStatus::Aborted { text, .. } = &s.status {
        let _ = writeln!(out, "# {text}");
    }
    out
}

pub fn coordinator(a: CoordinatorArgs) -> Outcome {
    let mut cfg = base_config(&a.config)?;
    put(&mut cfg, "fed.addr", &a.listen)?;
    put(&mut cfg, "fed.workers", &a.workers)?;
    put(&mut cfg, "fed.steps", &a.steps)?;
    put(&mut cfg, "train.lr", &a.lr)?;
    put(&mut cfg, "seed", &a.seed)?;
    a.model.apply(&mut cfg)?;
    cfg.validate()?;
    let address = required(cfg.addr().map(str::to_string), "--listen")?;
    let workers = required(cfg.workers()?, "--workers")?;
    let steps = required(cfg.steps()?, "--steps")?;
    let lr = cfg.lr()?;
    let init = match &a.init_model {
        Some(p) => InitPayload::from_network(&load_network(p)?, steps, lr),
        None => InitPayload {
            dims: cfg.dims()?,
            model: ModelInit::Seed(required(cfg.seed()?, "--seed or --init-model")?),
            total_steps: steps,
            lr,
        },
    };
    let mut session = SessionConfig::new(workers, address.clone(), init)?;
    session.timeout = Duration::from_secs(a.timeout_secs);
    let bound = BoundCoordinator::bind(session).map_err(|e| Failure::new(TRANSPORT, format!("cannot listen on {address}: {e}")))?;
    let local = bound.local_addr()?;
    println!("listening on {local}");
    let _ = std::io::stdout().flush();
    let (summary, transcript) = bound.run()?;
    write_file(&a.transcript, transcript.to_text())?;
    let text = summary_text(&summary);
    write_file(&a.summary, &text)?;
    print!("{text}");
    Failure::from_status(&summary.status).map_or(Ok(()), Err)
}

/// Budget from config; a worker that never adds noise may omit it.
fn worker_budget(cfg: &RunConfig) -> Result<PrivacyParams, Failure> {
    match cfg.budget()? {
        Some(b) => Ok(b),
        None if !cfg.noisy()? => Ok(PrivacyParams::zero()),
        None => Err(Failure::usage("a noisy worker needs --budget-eps and --budget-delta")),
    }
}

pub fn worker(a: WorkerArgs) -> Outcome {
    let mut cfg = base_config(&a.config)?;
    put(&mut cfg, "fed.addr", &a.connect)?;
    put(&mut cfg, "seed", &a.seed)?;
    put(&mut cfg, "train.batch", &a.batch)?;
    a.dp.apply(&mut cfg)?;
    cfg.validate()?;
    let address = required(cfg.addr().map(str::to_string), "--connect")?;
    let seed = required(cfg.seed()?, "--seed")?;
    let data = load_dataset(&a.data)?;
    data.require_nonempty()?;
    let setup = WorkerSetup { worker_id: a.id, dp: cfg.dp_config()?, data, budget: worker_budget(&cfg)?, seed };
    let outcome = worker_run(&address, Duration::from_secs(a.timeout_secs), setup)?;
    write_file(&a.ledger, outcome.ledger.report())?;
    if let Some(net) = &outcome.network {
        net.save(&a.out)?;
    }
    println!(
        "worker {}: {} steps, spent {}, status {:?}",
        outcome.worker_id,
        outcome.steps_completed,
        outcome.ledger.spent(),
        outcome.status
    );
    if outcome.network.is_none() && outcome.status.abort_code() == Some(AbortCode::TransportError) {
        let text = match &outcome.status {
            SessionStatus::Aborted { text, .. } => text.clone(),
            _ => String::new(),
        };
        return Err(Failure::new(TRANSPORT, text));
    }
    Failure::from_status(&outcome.status).map_or(Ok(()), Err)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn simulate(a: SimulateArgs) -> Outcome {
    if a.workers_config.len() != a.data.len() {
        return Err(Failure::usage(format!(
            "{} worker configs but {} datasets",
            a.workers_config.len(),
            a.data.len()
        )));
    }
    let mut cfg = base_config(&a.config)?;
    put(&mut cfg, "fed.steps", &a.steps)?;
    put(&mut cfg, "seed", &a.seed)?;
    put(&mut cfg, "train.lr", &a.lr)?;
    a.model.apply(&mut cfg)?;
    cfg.validate()?;
    let seed = required(cfg.seed()?, "--seed")?;
    let steps = required(cfg.steps()?, "--steps")?;
    let datasets = a.data.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>, _>>()?;

    let mut setups = Vec::new();
    for (i, (path, data)) in a.workers_config.iter().zip(&datasets).enumerate() {
        let own = RunConfig::load(path)?;
        let merged = cfg.clone().merged(&own);
        let id = i as u32 + 1;
        let worker_seed = own.seed()?.unwrap_or(seed.wrapping_add(u64::from(id)));
        data.require_nonempty()?;
        setups.push(WorkerSetup {
            worker_id: id,
            dp: merged.dp_config().map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?,
            data: data.clone(),
            budget: worker_budget(&merged)?,
            seed: worker_seed,
        });
    }

    let lr = cfg.lr()?;
    let init = match &a.init_model {
        Some(p) => {
            let net = load_network(p)?;
            for d in &datasets {
                check_compatible(net.dims(), d)?;
            }
            InitPayload::from_network(&net, steps, lr)
        }
        None => {
            let refs: Vec<&Dataset> = datasets.iter().collect();
            InitPayload { dims: model_dims(&cfg, &refs)?, model: ModelInit::Seed(seed), total_steps: steps, lr }
        }
    };
    let start = init.build_network()?;
    let out = inproc_session(init, setups)?;

    fs::create_dir_all(&a.out_dir).map_err(|e| Failure::usage(format!("{}: {e}", a.out_dir.display())))?;
    write_file(&a.out_dir.join("transcript.tsv"), out.transcript.to_text())?;
    write_file(&a.out_dir.join("summary.tsv"), summary_text(&out.coordinator))?;
    for w in &out.workers {
        write_file(&a.out_dir.join(format!("worker-{}.ledger", w.worker_id)), w.ledger.report())?;
        if let Some(net) = &w.network {
            net.save(a.out_dir.join(format!("worker-{}.fdpnet", w.worker_id)))?;
        }
    }
    let final_net = out.workers[0].network.clone().unwrap_or_else(|| start.clone());
    final_net.save(a.out_dir.join("final.fdpnet"))?;

    let testsets: Vec<(String, Dataset)> = if a.testset.is_empty() {
        a.data.iter().zip(datasets).map(|(p, d)| (stem(p), d)).collect()
    } else {
        a.testset.iter().map(|p| Ok((stem(p), load_dataset(p)?))).collect::<Result<_, Failure>>()?
    };
    let test_refs: Vec<(String, &Dataset)> = testsets.iter().map(|(l, d)| (l.clone(), d)).collect();
    let report = experiment_report(&[("init".into(), &start), ("federated".into(), &final_net)], &test_refs)?;
    write_file(&a.report, report.render_tsv())?;
    let text = report.render_text();
    write_file(&a.out_dir.join("report.txt"), &text)?;
    print!("{}", summary_text(&out.coordinator));
    print!("{text}");
    Failure::from_status(&out.coordinator.status).map_or(Ok(()), Err)
}

pub fn eval(a: EvalArgs) -> Outcome {
    let model = load_network(&a.model)?;
    let data = load_dataset(&a.data)?;
    let report = accuracy(&model, &data)?;
    print!("{}", report.render());
    if let (Some(baseline), Some(speaker)) = (&a.baseline, a.probe_speaker) {
        let baseline = load_network(baseline)?;
        let probe = data.filter_speaker(speaker);
        if probe.is_empty() {
            return Err(Failure::usage(format!("speaker {speaker} does not occur in {}", a.data.display())));
        }
        let gap = membership_gap(&model, &baseline, &probe)?;
        println!(
            "probe speaker {speaker}: baseline {:.2}% candidate {:.2}% gap {:+.2} points: {}",
            100.0 * gap.baseline_acc,
            100.0 * gap.candidate_acc,
            gap.gap_points(),
            gap.verdict()
        );
    }
    Ok(())
}

pub fn steps(a: StepsArgs) -> Outcome {
    let n = match (a.sequences, &a.data) {
        (Some(n), _) => n,
        (None, Some(p)) => load_dataset(p)?.len(),
        (None, None) => return Err(Failure::usage("--data or --sequences is required")),
    };
    if a.batch == 0 {
        return Err(Failure::usage("--batch must be at least 1"));
    }
    println!("{}", epochs_to_steps(a.epochs, n, a.batch));
    Ok(())
}
