mod config;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvcnet::container::{self, ContainerError, TensorArchive};
use mvcnet::dataset::{partition_test, DatasetError, SplitDataset, StreamProtocol};
use mvcnet::evaluation::{self, AccuracyMatrix, EvalError, RunSummary};
use mvcnet::trainer::{self, CachedModel, RunConfig, RunManifest, TrainError, Trainer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{protocol_flags, resolve, Layers};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            TrainError::Dataset(d) => d.into(),
            TrainError::Container(c) => c.into(),
            TrainError::Eval(v) => v.into(),
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "mvcnet", version, about = "Multi-view class-incremental learning experiments")]
struct Cli {
    /// Directory holding the raw `mnist/` and `fashion/` IDX files.
    #[arg(long, global = true, env = "MVCNET_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Root of the prepared dataset cache.
    #[arg(long, global = true, env = "MVCNET_CACHE", default_value = "cache")]
    cache_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file, or a run manifest (JSON) to rerun.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Protocol shorthand such as `pmnist-10x3`.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_views: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Config overrides as dotted `key=value` pairs.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build and cache a protocol's dataset.
    Prepare(ConfigArgs),
    /// Train over a cached stream and write a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// `full`, `net1` or `net2`.
        #[arg(long)]
        mode: Option<String>,
        /// Run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate the checkpoint of a run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Also dump fusion-layer embeddings of the test set.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Aggregate run directories into a mean and std table.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn build_config(args: &ConfigArgs, extra: Vec<(String, String)>) -> Result<RunConfig, CliError> {
    let mut flags = Vec::new();
    if let Some(p) = &args.protocol {
        flags.extend(protocol_flags(p)?);
    }
    if let Some(s) = args.seed {
        flags.push(("seed".into(), s.to_string()));
    }
    if let Some(v) = args.num_views {
        flags.push(("protocol.num_views".into(), v.to_string()));
    }
    if let Some(f) = args.train_fraction {
        flags.push(("protocol.train_fraction".into(), f.to_string()));
    }
    flags.extend(extra);
    resolve(&Layers { file: args.config.as_deref(), flags, overrides: &args.overrides })
}

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    key: String,
    file: String,
    sha256: String,
    bytes: usize,
    seed: u64,
    protocol: mvcnet::trainer::ProtocolConfig,
}

fn cache_key(config: &RunConfig) -> String {
    let body = serde_json::to_string(&(&config.protocol, config.seed)).expect("protocol serializes");
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    format!(
        "{}-v{}-s{}-{}",
        config.protocol.family.label().to_ascii_lowercase(),
        config.protocol.num_views,
        config.seed,
        &digest[..12]
    )
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn prepare(cli: &Cli, config: &RunConfig) -> Result<PathBuf, CliError> {
    let data = trainer::build_dataset(config, &cli.data_dir)?;
    fs::create_dir_all(&cli.cache_dir).map_err(io_err(&cli.cache_dir))?;
    let key = cache_key(config);
    let path = cli.cache_dir.join(format!("{key}.mvcd"));
    let mut bytes = Vec::new();
    container::write_dataset(&mut bytes, &data)?;
    container::write_atomic(&path, &bytes).map_err(io_err(&path))?;
    let manifest = CacheManifest {
        key: key.clone(),
        file: format!("{key}.mvcd"),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len(),
        seed: config.seed,
        protocol: config.protocol.clone(),
    };
    let mpath = cli.cache_dir.join(format!("{key}.json"));
    let body = serde_json::to_string_pretty(&manifest).expect("cache manifest serializes");
    container::write_atomic(&mpath, body.as_bytes()).map_err(io_err(&mpath))?;
    println!("cache={} sha256={}", path.display(), manifest.sha256);
    Ok(path)
}

fn load_cached(cli: &Cli, config: &RunConfig) -> Result<SplitDataset, CliError> {
    let path = cli.cache_dir.join(format!("{}.mvcd", cache_key(config)));
    if !path.exists() {
        return Err(CliError::Io(format!(
            "{}: dataset cache not found, run `mvcnet prepare` with the same protocol settings",
            path.display()
        )));
    }
    Ok(container::load_dataset(&path)?)
}

fn metric_line(avg: f64, bwt: Option<f64>) -> String {
    match bwt {
        Some(b) => format!("avg_acc={avg:.6} bwt={b:.6}"),
        None => format!("avg_acc={avg:.6} bwt=null"),
    }
}

fn train(cli: &Cli, mut config: RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let data = load_cached(cli, &config)?;
    let dir = out.or_else(|| config.output.dir.clone()).unwrap_or_else(|| {
        PathBuf::from("runs").join(format!(
            "{}-{}-s{}",
            cache_key(&config).rsplit_once('-').map_or("run", |(a, _)| a),
            config.mode.as_str(),
            config.seed
        ))
    });
    config.output.dir = Some(dir.clone());
    config.output.checkpoint = true;
    let outcome = trainer::run(&config, &data)?;
    let toml_path = dir.join("config.toml");
    let body = toml::to_string(&config).map_err(|e| CliError::Config(e.to_string()))?;
    container::write_atomic(&toml_path, body.as_bytes()).map_err(io_err(&toml_path))?;
    println!("{}", metric_line(outcome.manifest.avg_acc, outcome.manifest.bwt));
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn eval(cli: &Cli, run: &Path, embeddings: Option<&Path>) -> Result<(), CliError> {
    let manifest: RunManifest = read_json(&run.join("manifest.json"))?;
    let trainer = Trainer::from_archive(&TensorArchive::load(&run.join("checkpoint.mvck"))?)?;
    let data = load_cached(cli, &manifest.config)?;
    let protocol: StreamProtocol = manifest.protocol.clone();
    let (shared, heldout) = partition_test(&protocol, &data);
    let mut cache = HashMap::new();
    let mut model = CachedModel::new(&trainer, &mut cache);
    let classes = trainer.classes().to_vec();
    let row = evaluation::evaluate_classes(&mut model, &shared, &classes, classes.len().saturating_sub(1))?;
    let report = fs::read_to_string(run.join("report.csv")).map_err(io_err(&run.join("report.csv")))?;
    let mut matrix = AccuracyMatrix::from_csv(&report, data.num_classes)?;
    matrix.record_row(&row)?;
    let avg = evaluation::avg_acc(&matrix)?;
    let bwt = evaluation::bwt(&matrix)?;
    if !heldout.is_empty() {
        let fam = evaluation::familiar_view_eval(&mut model, &heldout, &classes, avg)?;
        println!("heldout_acc={:.6} gap={:.6}", fam.heldout_accuracy, fam.gap);
    }
    if let Some(path) = embeddings {
        let test: Vec<_> = data.test.iter().collect();
        let rows = evaluation::emit_embeddings(&mut model, &test, path)?;
        println!("embeddings={} rows={rows}", path.display());
    }
    println!("{}", metric_line(avg, bwt));
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn report(runs: &[PathBuf], csv: Option<&Path>) -> Result<(), CliError> {
    if runs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    let mut groups: BTreeMap<String, Vec<RunSummary>> = BTreeMap::new();
    let mut protocol: Option<String> = None;
    for dir in runs {
        let s: RunSummary = read_json(&dir.join("summary.json"))?;
        match &protocol {
            Some(p) if *p != s.protocol => {
                return Err(CliError::Config(format!(
                    "{} uses protocol {}, other runs use {p}; refusing to mix protocols",
                    dir.display(),
                    s.protocol
                )));
            }
            None => protocol = Some(s.protocol.clone()),
            _ => {}
        }
        groups.entry(s.mode.clone()).or_default().push(s);
    }
    let protocol = protocol.expect("at least one run");
    let mut table = format!("{:<10} {:>5} {:>18} {:>18}\n", "mode", "runs", "avg_acc", "bwt");
    let mut out = String::from("protocol,mode,runs,avg_acc_mean,avg_acc_std,bwt_mean,bwt_std\n");
    for (mode, list) in &groups {
        let (am, asd) = mean_std(&list.iter().map(|s| s.avg_acc).collect::<Vec<_>>());
        let bwts: Vec<f64> = list.iter().filter_map(|s| s.bwt).collect();
        let (bcell, bcsv) = if bwts.is_empty() {
            ("null".to_string(), "null,null".to_string())
        } else {
            let (bm, bsd) = mean_std(&bwts);
            (format!("{bm:.4} ± {bsd:.4}"), format!("{bm},{bsd}"))
        };
        table.push_str(&format!("{:<10} {:>5} {:>18} {:>18}\n", mode, list.len(), format!("{am:.4} ± {asd:.4}"), bcell));
        out.push_str(&format!("{protocol},{mode},{},{am},{asd},{bcsv}\n", list.len()));
    }
    println!("protocol {protocol}");
    print!("{table}");
    if let Some(path) = csv {
        container::write_atomic(path, out.as_bytes()).map_err(io_err(path))?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Prepare(args) => {
            let config = build_config(args, Vec::new())?;
            prepare(cli, &config).map(|_| ())
        }
        Command::Train { config, mode, out } => {
            let extra = mode.iter().map(|m| ("mode".to_string(), format!("\"{m}\""))).collect();
            let config = build_config(config, extra)?;
            train(cli, config, out.clone())
        }
        Command::Eval { run, embeddings } => eval(cli, run, embeddings.as_deref()),
        Command::Report { runs, csv } => report(runs, csv.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mvcnet: {e}");
            ExitCode::from(e.code())
        }
    }
}
