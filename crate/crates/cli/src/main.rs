mod resolve;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use creat_core::config::ExperimentConfig;
use creat_core::data::Dataset;
use creat_core::diff::Checkpoint;
use creat_core::eval::{self, Method, MetricsReport, RunSettings};
use creat_core::ot::{bcd_dlot, sequence_space};
use creat_core::policy::MaskerPolicy;
use creat_core::recommender::{train, RecModel};
use creat_core::trainer::train_creat;
use creat_core::{Error, Result};
use log::info;

const SNAPSHOT: &str = "config_resolved.json";
const DATASET: &str = "dataset.json";
const REC_MODEL: &str = "rec_model.json";
const POLICY: &str = "policy.json";
const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Parser)]
#[command(name = "creat-lab", version, about = "Profile-pollution attack lab for sequential recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file, or a `config_resolved.json` snapshot.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one value, e.g. `--set attack.K=3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Inputs {
    /// Split dataset JSON; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Recommender checkpoint; trained from the config when absent.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset and its leave-two-out split.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the clean recommender.
    TrainRec {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the masker policy against the clean recommender.
    AttackTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Pollute, retrain and measure one method (or `all`).
    AttackRun {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "all")]
        method: String,
        /// Trained masker checkpoint for `creat`; trained inline when absent.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Write transport plans and objective trace for the first attacked sequence.
        #[arg(long)]
        dump_ot: bool,
    },
    /// Collect `report_*.json` files into one JSON array and a CSV table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directories holding reports; defaults to the output directory.
        #[arg(long)]
        runs: Vec<PathBuf>,
    },
}

fn init_threads() -> Result<()> {
    let n = match std::env::var("CREAT_LAB_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| Error::Config {
            key: "CREAT_LAB_THREADS".into(),
            message: format!("expected a worker count, got `{v}`"),
        })?,
        Err(_) => 0,
    };
    // A second initialization only fails when a pool already exists.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Resolves the config, prepares `--out` and writes the snapshot.
fn setup(common: &Common) -> Result<(ExperimentConfig, String)> {
    let cfg = resolve::resolve(common.config.as_deref(), &common.set)?;
    fs::create_dir_all(&common.out)?;
    let snapshot = cfg.to_json()?;
    fs::write(common.out.join(SNAPSHOT), &snapshot)?;
    Ok((cfg, eval::config_hash(&snapshot)))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (split, excluded) = cfg.load_raw()?.split();
    if excluded > 0 {
        info!("{excluded} sequences too short to split were dropped");
    }
    if split.is_empty() {
        return Err(Error::EmptyDataset("no sequence survives the split".into()));
    }
    Ok(split)
}

fn load_dataset(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => Dataset::load_json(p),
        None => build_dataset(cfg),
    }
}

fn train_clean(cfg: &ExperimentConfig, data: &Dataset) -> Result<(RecModel, Vec<f64>)> {
    let rec = cfg.train_config();
    let mut model = RecModel::new(data.vocab_size, cfg.rec.dim, rec.seed)?;
    let losses = train(&mut model, data, &rec)?;
    Ok((model, losses))
}

fn load_model(cfg: &ExperimentConfig, data: &Dataset, path: Option<&Path>) -> Result<RecModel> {
    match path {
        Some(p) => RecModel::from_checkpoint(&Checkpoint::load(p)?),
        None => Ok(train_clean(cfg, data)?.0),
    }
}

/// Streams log lines and keeps the last policy that produced a finite round.
struct RoundSink {
    log: fs::File,
    policy_path: PathBuf,
}

impl RoundSink {
    fn new(dir: &Path) -> Result<Self> {
        Ok(Self {
            log: fs::File::create(dir.join(TRAIN_LOG))?,
            policy_path: dir.join(POLICY),
        })
    }

    fn record(&mut self, rec: &creat_core::trainer::LogRecord, policy: &MaskerPolicy) -> Result<()> {
        writeln!(self.log, "{}", serde_json::to_string(rec)?)?;
        if policy.flat_params().iter().all(|x| x.is_finite()) {
            policy.to_checkpoint().save(&self.policy_path)?;
        }
        Ok(())
    }
}

fn cmd_gen(common: &Common) -> Result<()> {
    let (cfg, _) = setup(common)?;
    let data = build_dataset(&cfg)?;
    data.save_json(common.out.join(DATASET))?;
    info!("{} sequences over {} items", data.len(), data.num_items());
    Ok(())
}

fn cmd_train_rec(common: &Common, data: Option<&Path>) -> Result<()> {
    let (cfg, _) = setup(common)?;
    let data = load_dataset(&cfg, data)?;
    let (model, losses) = train_clean(&cfg, &data)?;
    model.to_checkpoint().save(common.out.join(REC_MODEL))?;
    write_json(&common.out.join("rec_loss.json"), &losses)?;
    let target = eval::resolve_target(&data, &cfg.attack_config())?;
    let (exposure, overall) = eval::evaluate(&model, &data, target)?;
    let clean = serde_json::json!({"target": target, "exposure": exposure, "overall": overall});
    write_json(&common.out.join("rec_metrics.json"), &clean)?;
    info!("final loss {:.4}, test HR@10 {:.4}", losses.last().copied().unwrap_or(f64::NAN), overall.hr10());
    Ok(())
}

fn cmd_attack_train(common: &Common, inputs: &Inputs) -> Result<()> {
    let (cfg, _) = setup(common)?;
    let data = load_dataset(&cfg, inputs.data.as_deref())?;
    let model = load_model(&cfg, &data, inputs.model.as_deref())?;
    let attack = cfg.attack_config();
    let (target, _, seqs) = eval::attack_sequences(&data, &attack)?;
    let mut sink = RoundSink::new(&common.out)?;
    let outcome = train_creat(&model, &seqs, target, &attack, &cfg.dist_config(), &mut |r, p| sink.record(r, p))?;
    outcome.policy.to_checkpoint().save(common.out.join(POLICY))?;
    info!("masker trained for target {target} over {} rounds", outcome.log.len());
    Ok(())
}

fn parse_methods(raw: &str) -> Result<Vec<Method>> {
    if raw == "all" {
        return Ok(Method::ALL.to_vec());
    }
    raw.split(',').map(|m| m.trim().parse()).collect()
}

fn cmd_attack_run(common: &Common, inputs: &Inputs, method: &str, policy: Option<&Path>, dump_ot: bool) -> Result<()> {
    let methods = parse_methods(method)?;
    let (cfg, hash) = setup(common)?;
    let data = load_dataset(&cfg, inputs.data.as_deref())?;
    let model = load_model(&cfg, &data, inputs.model.as_deref())?;
    let settings = RunSettings {
        dim: cfg.rec.dim,
        rec: cfg.train_config(),
        attack: cfg.attack_config(),
        dist: cfg.dist_config(),
        config_hash: hash,
    };
    let mut masker = policy.map(|p| MaskerPolicy::from_checkpoint(&Checkpoint::load(p)?)).transpose()?;
    for m in methods {
        let name = m.name();
        let outcome = if m == Method::Creat && masker.is_none() {
            let mut sink = RoundSink::new(&common.out)?;
            eval::run_attack(&data, &model, &settings, m, None, &mut |r, p| sink.record(r, p))?
        } else {
            eval::run_attack(&data, &model, &settings, m, masker.clone(), &mut |_, _| Ok(()))?
        };
        if m == Method::Creat {
            masker = outcome.policy.clone();
        }
        write_json(&common.out.join(format!("report_{name}.json")), &outcome.report)?;
        outcome.polluted.save_json(common.out.join(format!("polluted_{name}.json")))?;
        let mut rows = Vec::with_capacity(2 * outcome.subset.len());
        for &i in &outcome.subset {
            let user = &data.sequences[i].user;
            rows.push((user.clone(), "clean", data.splits[i].train.clone()));
            rows.push((user.clone(), "polluted", outcome.polluted.splits[i].train.clone()));
        }
        eval::dump_embeddings(&outcome.model, &rows, common.out.join(format!("embeddings_{name}.csv")))?;
        if dump_ot {
            if let Some(&i) = outcome.subset.first() {
                let dist = &settings.dist;
                let orig = sequence_space(&model, &data.splits[i].train, dist)?;
                let pert = sequence_space(&model, &outcome.polluted.splits[i].train, dist)?;
                let result = bcd_dlot(&orig, &pert, &dist.dlot)?;
                write_json(&common.out.join(format!("ot_{name}.json")), &result)?;
            }
        }
        info!("{name}: target HR@10 {:.4}, test HR@10 {:.4}", outcome.report.exposure.hr10(), outcome.report.overall.hr10());
    }
    Ok(())
}

fn cmd_report(common: &Common, runs: &[PathBuf]) -> Result<()> {
    setup(common)?;
    let dirs = if runs.is_empty() { vec![common.out.clone()] } else { runs.to_vec() };
    let mut reports: Vec<MetricsReport> = Vec::new();
    for dir in dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("report_") && n.ends_with(".json"))
        });
        files.sort();
        for f in files {
            reports.push(serde_json::from_str(&fs::read_to_string(&f)?)?);
        }
    }
    if reports.is_empty() {
        return Err(Error::EmptyDataset("no report_*.json files found".into()));
    }
    reports.sort_by_key(|r| Method::ALL.iter().position(|m| *m == r.method));
    write_json(&common.out.join("report.json"), &reports)?;
    fs::write(common.out.join("table.csv"), eval::table_csv(&reports))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Gen { common } => cmd_gen(common),
        Command::TrainRec { common, data } => cmd_train_rec(common, data.as_deref()),
        Command::AttackTrain { common, inputs } => cmd_attack_train(common, inputs),
        Command::AttackRun {
            common,
            inputs,
            method,
            policy,
            dump_ot,
        } => cmd_attack_run(common, inputs, method, policy.as_deref(), *dump_ot),
        Command::Report { common, runs } => cmd_report(common, runs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
