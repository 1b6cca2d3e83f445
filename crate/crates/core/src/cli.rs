//! The `gsc` command line: `gen`, `train`, `sweep`, `fdcheck`, `report`.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or input error,
//! 3 numerical abort. Output paths default to `$GSC_OUT_DIR` (or `out/`).

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::discrimination::write_label_dump;
use crate::error::{invalid, GscError, Result};
use crate::evalmetrics::{Report, SummaryWriter};
use crate::losses::{FdProblem, FdReport};
use crate::synthdata::{GenSpec, PairDataset};
use crate::trainer::{run_with, EpochMetrics, Mode, RunObserver, RunState, Splits, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const OUT_DIR_ENV: &str = "GSC_OUT_DIR";
pub const DEFAULT_RHOS: [f64; 4] = [0.0, 0.2, 0.4, 0.6];

#[derive(Debug, Parser)]
#[command(name = "gsc", version, about = "Noisy-correspondence cross-modal retrieval on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (train/dev/test files plus a manifest).
    Gen(GenArgs),
    /// Train one configuration and write metrics, report and checkpoints.
    Train(TrainArgs),
    /// Run a grid of noise rates and modes; one CSV row per cell.
    Sweep(SweepArgs),
    /// Finite-difference check of the analytic gradients.
    Fdcheck(FdArgs),
    /// Collect report files into a summary CSV.
    Report(ReportArgs),
}

/// Generator knobs shared by `gen`, `train` and `sweep`.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Train-split size.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 500)]
    pub n_dev: usize,
    #[arg(long, default_value_t = 500)]
    pub n_test: usize,
    #[arg(long, default_value_t = 10)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0.6)]
    pub cluster_spread: f64,
    #[arg(long, default_value_t = 0.2)]
    pub view_noise: f64,
}

impl DataArgs {
    pub fn gen_spec(&self, seed: u64) -> GenSpec {
        GenSpec {
            n: self.n + self.n_dev + self.n_test,
            n_clusters: self.clusters,
            cluster_spread: self.cluster_spread,
            view_noise: self.view_noise,
            seed,
            ..GenSpec::default()
        }
    }

    pub fn splits(&self, seed: u64, rho: f64) -> Result<Splits> {
        check_rho(rho)?;
        Splits::generate(&self.gen_spec(seed), self.n_dev, self.n_test, rho)
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Training overrides applied on top of the config file.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON file with flat training keys (tau1, gamma, epochs, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
}

impl ConfigArgs {
    /// File values, then flag overrides, then the mode's fixed settings.
    pub fn build(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => TrainConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(w) = self.warmup_epochs {
            cfg.warmup_epochs = w;
        }
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Strict parse: unknown keys are rejected so typos do not pass silently.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let defaults = serde_json::to_value(TrainConfig::default())?;
    if let (Some(obj), Some(known)) = (value.as_object(), defaults.as_object()) {
        if let Some(k) = obj.keys().find(|k| !known.contains_key(*k)) {
            return Err(invalid(format!("unknown config key {k:?} in {}", path.display())));
        }
    } else {
        return Err(invalid(format!("{} must hold a JSON object", path.display())));
    }
    Ok(serde_json::from_value(value)?)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Directory written by `gen`. Without it a dataset is generated.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub gen: DataArgs,
    /// Noise rate for a generated dataset.
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    /// Generator seed; defaults to the training seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-epoch labels to labels.jsonl.
    #[arg(long)]
    pub dump_labels: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub gen: DataArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RHOS)]
    pub rhos: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [Mode::Gsc, Mode::Baseline])]
    pub modes: Vec<Mode>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FdArgs {
    /// Number of random instances (seeds 0..instances).
    #[arg(long, default_value_t = 3)]
    pub instances: u64,
    #[arg(long, default_value_t = 6)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0.07)]
    pub tau1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau2: f64,
    #[arg(long, default_value_t = 0.01)]
    pub gamma: f64,
    /// Multiply the analytic gradient by this factor before comparing.
    #[arg(long, default_value_t = 1.0)]
    pub perturb: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files, or directories searched recursively for report.json.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn exit_code_for(e: &GscError) -> i32 {
    match e {
        GscError::NonFinite { .. } | GscError::TrainingAborted { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a).map(|_| EXIT_OK),
        Command::Train(a) => cmd_train(&a).map(|_| EXIT_OK),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| EXIT_OK),
        Command::Fdcheck(a) => {
            let reports = cmd_fdcheck(&a)?;
            Ok(if reports.iter().all(|r| r.pass) {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            })
        }
        Command::Report(a) => cmd_report(&a).map(|_| EXIT_OK),
    }
}

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn out_dir(explicit: &Option<PathBuf>, sub: &str) -> Result<PathBuf> {
    let dir = explicit.clone().unwrap_or_else(|| default_out_root().join(sub));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(invalid(format!("noise rate must lie in [0, 1], got {rho}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: GenSpec,
    pub rho: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub files: [String; 3],
}

pub const SPLIT_FILES: [&str; 3] = ["train.json", "dev.json", "test.json"];
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn cmd_gen(a: &GenArgs) -> Result<PathBuf> {
    let splits = a.data.splits(a.seed, a.rho)?;
    let dir = out_dir(&a.out, "data")?;
    write_splits(&dir, &splits)?;
    let manifest = Manifest {
        spec: a.data.gen_spec(a.seed),
        rho: a.rho,
        n_train: splits.train.len(),
        n_dev: splits.dev.len(),
        n_test: splits.test.len(),
        files: SPLIT_FILES.map(String::from),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "wrote {} train ({} noisy), {} dev, {} test pairs to {}",
        splits.train.len(),
        splits.train.noisy_count(),
        splits.dev.len(),
        splits.test.len(),
        dir.display()
    );
    Ok(dir)
}

pub fn write_splits(dir: &Path, splits: &Splits) -> Result<()> {
    for (name, ds) in SPLIT_FILES.iter().zip([&splits.train, &splits.dev, &splits.test]) {
        ds.save(dir.join(name))?;
    }
    Ok(())
}

pub fn load_splits(dir: &Path) -> Result<Splits> {
    let load = |name: &str| {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(invalid(format!("dataset file {} not found", path.display())));
        }
        PairDataset::load(path)
    };
    Ok(Splits {
        train: load(SPLIT_FILES[0])?,
        dev: load(SPLIT_FILES[1])?,
        test: load(SPLIT_FILES[2])?,
    })
}

/// Streams metrics (and optionally labels) to disk as epochs complete.
struct FileObserver {
    metrics: BufWriter<File>,
    labels: Option<BufWriter<File>>,
    noise_mask: Vec<bool>,
}

impl RunObserver for FileObserver {
    fn on_epoch(&mut self, m: &EpochMetrics, state: &RunState) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, m)?;
        self.metrics.write_all(b"\n")?;
        self.metrics.flush()?;
        if let Some(out) = self.labels.as_mut() {
            write_label_dump(out, m.epoch, &state.stores[0].labels, &self.noise_mask)?;
            out.flush()?;
        }
        Ok(())
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const LABELS_FILE: &str = "labels.jsonl";

pub fn cmd_train(a: &TrainArgs) -> Result<Report> {
    let cfg = a.cfg.build()?;
    let splits = match &a.data {
        Some(dir) => load_splits(dir)?,
        None => a.gen.splits(a.data_seed.unwrap_or(cfg.seed), a.rho)?,
    };
    let dir = out_dir(&a.out, &format!("train-{}-rho{}-seed{}", cfg.mode, splits.train.meta.rho, cfg.seed))?;
    let mut obs = FileObserver {
        metrics: BufWriter::new(File::create(dir.join(METRICS_FILE))?),
        labels: a
            .dump_labels
            .then(|| File::create(dir.join(LABELS_FILE)).map(BufWriter::new))
            .transpose()?,
        noise_mask: splits.train.noise_mask.clone(),
    };
    let result = run_with(&cfg, &splits, &mut obs)?;
    fs::write(dir.join(REPORT_FILE), result.test_report.to_json()?)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    for (k, net) in result.best_nets.iter().enumerate() {
        let ck = net.checkpoint();
        fs::write(dir.join(format!("net{k}_img.json")), serde_json::to_string(&ck.img)?)?;
        fs::write(dir.join(format!("net{k}_txt.json")), serde_json::to_string(&ck.txt)?)?;
    }
    let r = &result.test_report.retrieval;
    println!(
        "{} rho={} seed={}: best epoch {}, test R@1 {:.1}/{:.1}, rsum {:.1} -> {}",
        cfg.mode,
        splits.train.meta.rho,
        cfg.seed,
        result.best_epoch,
        r.i2t[0],
        r.t2i[0],
        r.recall_sum,
        dir.display()
    );
    Ok(result.test_report)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Generator seed for noise rate `rho`; shared by every mode at that rate.
pub fn cell_data_seed(master: u64, rho: f64) -> u64 {
    master.wrapping_add(fnv1a(&rho.to_bits().to_le_bytes()))
}

/// Training seed for one sweep cell.
pub fn cell_seed(master: u64, rho: f64, mode: Mode) -> u64 {
    let mut key = rho.to_bits().to_le_bytes().to_vec();
    key.extend_from_slice(mode.as_str().as_bytes());
    master.wrapping_add(fnv1a(&key))
}

pub const SUMMARY_FILE: &str = "summary.csv";

pub fn cmd_sweep(a: &SweepArgs) -> Result<PathBuf> {
    for &rho in &a.rhos {
        check_rho(rho)?;
    }
    let base = a.cfg.build()?;
    let dir = out_dir(&a.out, "sweep")?;
    let csv_path = dir.join(SUMMARY_FILE);
    let mut csv = SummaryWriter::new(BufWriter::new(File::create(&csv_path)?))?;
    for &rho in &a.rhos {
        let splits = a.gen.splits(cell_data_seed(base.seed, rho), rho)?;
        for &mode in &a.modes {
            let cfg = TrainConfig {
                mode,
                seed: cell_seed(base.seed, rho, mode),
                ..base.clone()
            }
            .resolved();
            let result = run_with(&cfg, &splits, &mut ())?;
            let cell = dir.join(format!("{mode}-rho{rho}"));
            fs::create_dir_all(&cell)?;
            fs::write(cell.join(REPORT_FILE), result.test_report.to_json()?)?;
            let row = result.test_report.summary_row();
            println!("rho={rho} {mode}: rsum {:.1}", row.rsum);
            csv.write(&row)?;
        }
    }
    Ok(csv_path)
}

pub const FD_IMG_DIMS: [usize; 3] = [8, 10, 4];
pub const FD_TXT_DIMS: [usize; 3] = [6, 10, 4];

pub fn cmd_fdcheck(a: &FdArgs) -> Result<Vec<FdReport>> {
    if a.batch < 2 || a.instances == 0 || a.h.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(invalid("fdcheck needs batch >= 2, at least one instance and h > 0"));
    }
    let cfg = crate::losses::LossConfig {
        tau1: a.tau1,
        tau2: a.tau2,
        gamma: a.gamma,
    };
    let mut reports = Vec::new();
    for seed in 0..a.instances {
        let p = FdProblem::random(seed, a.batch, &FD_IMG_DIMS, &FD_TXT_DIMS)?;
        let r = if a.perturb == 1.0 {
            p.check(&cfg, a.h, a.tol)?
        } else {
            p.check_scaled(&cfg, a.perturb, a.h, a.tol)?
        };
        let worst = r.worst.map(|w| w.to_string()).unwrap_or_default();
        println!(
            "instance {seed}: {} params, max rel err {:.3e} at {worst} (analytic {:.6e}, numeric {:.6e}) {}",
            r.checked,
            r.max_rel_err,
            r.worst_analytic,
            r.worst_numeric,
            if r.pass { "PASS" } else { "FAIL" }
        );
        reports.push(r);
    }
    Ok(reports)
}

fn collect_reports(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            if e.is_dir() {
                collect_reports(&e, out)?;
            } else if e.file_name().is_some_and(|n| n == REPORT_FILE) {
                out.push(e);
            }
        }
        Ok(())
    } else if path.is_file() {
        out.push(path.to_path_buf());
        Ok(())
    } else {
        Err(invalid(format!("{} does not exist", path.display())))
    }
}

pub fn cmd_report(a: &ReportArgs) -> Result<usize> {
    let mut paths = Vec::new();
    for p in &a.inputs {
        collect_reports(p, &mut paths)?;
    }
    if paths.is_empty() {
        return Err(invalid("no report files found"));
    }
    let reports = paths
        .iter()
        .map(|p| Report::from_json(&fs::read_to_string(p)?))
        .collect::<Result<Vec<_>>>()?;
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut csv = SummaryWriter::new(sink)?;
    for r in &reports {
        csv.write(&r.summary_row())?;
    }
    Ok(reports.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn cell_seeds_differ_by_mode_and_rate() {
        assert_ne!(cell_seed(0, 0.2, Mode::Gsc), cell_seed(0, 0.2, Mode::Baseline));
        assert_ne!(cell_seed(0, 0.2, Mode::Gsc), cell_seed(0, 0.4, Mode::Gsc));
        assert_eq!(cell_seed(5, 0.2, Mode::Gsc), cell_seed(5, 0.2, Mode::Gsc));
    }

    #[test]
    fn flags_override_and_mode_mapping() {
        let args = ConfigArgs {
            config: None,
            mode: Some(Mode::NoEnsemble),
            epochs: Some(3),
            seed: None,
            lr: None,
            batch_size: None,
            warmup_epochs: Some(1),
        };
        let cfg = args.build().unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!((cfg.beta1, cfg.beta2, cfg.warmup_epochs), (1.0, 1.0, 5));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_cli(["gsc", "bogus"]), EXIT_USAGE);
        assert_eq!(run_cli(["gsc", "train", "--mode", "nope"]), EXIT_USAGE);
        assert_eq!(run_cli(["gsc", "gen", "--rho", "1.5", "--out", "/nonexistent/x"]), EXIT_USAGE);
    }
}
