//! Command-line front end. Every command prints its resolved configuration
//! and seed, and writes plain CSV/JSON reports that depend only on its
//! arguments.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{load_posture_csv, synthetic_split, write_posture_csv, Instance, SyntheticTask, PER_CLASS};
use crate::error::{Error, Result};
use crate::layers::PoolMode;
use crate::model::{EmbeddingKind, Family, ModelConfig};
use crate::numkit::{derive_seed, Rng};
use crate::train::{evaluate_louo, louo_run, train_once, LouoOptions, RunReport, TrainConfig};
use crate::verify::{self, CheckResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "setpool", version, about = "Permutation-invariant set classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and report its test accuracy.
    Train(TrainArgs),
    /// Leave each user out in turn, repeatedly, and aggregate accuracy.
    EvaluateLouo(LouoArgs),
    /// Finite-difference gradient checks of every layer and whole models.
    Gradcheck(GradcheckArgs),
    /// Logit drift under element permutations for every family and pooling.
    InvarianceAudit(AuditArgs),
    /// Linear embedding folded into the head, compared on random batches.
    CollapseDemo(CollapseArgs),
    /// Point sets that linear embeddings with pooling cannot separate.
    AmbiguityDemo(AmbiguityArgs),
    /// Write a synthetic corpus in the posture CSV format.
    GenSynthetic(GenArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    pooling: Option<PoolMode>,
    #[arg(long)]
    embedding: Option<EmbeddingKind>,
    #[arg(long)]
    embedding_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Posture CSV; without it a synthetic task is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Required with --data.
    #[arg(long)]
    leave_out_user: Option<u32>,
    /// Instances per class per user in each split (posture data).
    #[arg(long, default_value_t = PER_CLASS)]
    per_class: usize,
    /// Synthetic training sets per class; validation and test get a fifth each.
    #[arg(long, default_value_t = 1000)]
    sets_per_class: usize,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct LouoArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Posture CSV; without it a multi-user synthetic corpus is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Users to leave out (repeatable); default is every user.
    #[arg(long)]
    leave_out_user: Vec<u32>,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = PER_CLASS)]
    per_class: usize,
    /// Users in the generated corpus when --data is absent.
    #[arg(long, default_value_t = 3)]
    users: u32,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check every layer and model.
    #[arg(long)]
    all: bool,
    /// Only checks whose name starts with this prefix.
    #[arg(long)]
    only: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    inputs: usize,
    #[arg(long, default_value_t = 10)]
    permutations: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CollapseArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    batches: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AmbiguityArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    /// Random linear maps tried per pair.
    #[arg(long, default_value_t = 50)]
    maps: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    users: u32,
    /// Sets per class per user.
    #[arg(long, default_value_t = 150)]
    sets_per_class: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let m = &mut rc.model;
        if let Some(v) = self.family {
            m.family = v;
        }
        if let Some(v) = self.pooling {
            m.pooling = v;
        }
        if let Some(v) = self.embedding {
            m.embedding = v;
        }
        if let Some(v) = self.embedding_size {
            m.embedding_size = v;
        }
        let t = &mut rc.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.max_epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        rc.train.validate()?;
        Ok(rc)
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Io { .. } | Error::Parse { .. } | Error::Insufficient(_) => EXIT_USAGE,
        _ => EXIT_FAILED,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::EvaluateLouo(a) => cmd_louo(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::InvarianceAudit(a) => {
            println!("seed: {}", a.seed);
            println!("inputs: {}, permutations: {}", a.inputs, a.permutations);
            let results = verify::invariance_audit(a.seed, a.inputs, a.permutations)?;
            finish_checks(&results, a.out_dir.as_deref(), "invariance.csv")
        }
        Command::CollapseDemo(a) => {
            println!("seed: {}", a.seed);
            println!("batches: {}", a.batches);
            let results = verify::collapse_check(a.seed, a.batches)?;
            finish_checks(&results, a.out_dir.as_deref(), "collapse.csv")
        }
        Command::AmbiguityDemo(a) => cmd_ambiguity(a),
        Command::GenSynthetic(a) => {
            println!("seed: {}", a.seed);
            let task = SyntheticTask {
                users: a.users,
                sets_per_class: a.sets_per_class,
                ..Default::default()
            };
            let corpus = task.generate(&mut Rng::new(a.seed))?;
            ensure_parent(&a.out)?;
            write_posture_csv(&a.out, &corpus)?;
            println!("wrote {} instances to {}", corpus.len(), a.out.display());
            Ok(EXIT_OK)
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_file(dir: &Path, name: &str, body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    let mut buf = Vec::new();
    body(&mut buf).map_err(|e| Error::io(&path, e))?;
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))
}

fn print_config(rc: &RunConfig) -> Result<()> {
    let json = serde_json::to_string(rc).map_err(|e| Error::Config(e.to_string()))?;
    println!("config: {json}");
    println!("seed: {}", rc.train.seed);
    Ok(())
}

fn write_config(dir: &Path, rc: &RunConfig) -> Result<()> {
    let json = serde_json::to_string_pretty(rc).map_err(|e| Error::Config(e.to_string()))?;
    write_file(dir, "config.json", |w| {
        w.extend_from_slice(json.as_bytes());
        w.push(b'\n');
        Ok(())
    })
}

fn load_data(path: &Path) -> Result<Vec<Instance>> {
    if !path.exists() {
        return Err(Error::Config(format!("data file {} does not exist", path.display())));
    }
    load_posture_csv(path)
}

fn write_run(dir: &Path, label: &str, seed: u64, report: &RunReport) -> Result<()> {
    write_file(dir, "epochs.csv", |w| report.write_epochs_csv(w))?;
    write_file(dir, "run.csv", |w| {
        use std::io::Write;
        writeln!(w, "config,seed,epochs,best_epoch,best_val_loss,test_accuracy")?;
        writeln!(
            w,
            "{label},{seed},{},{},{},{}",
            report.epochs_run(),
            report.best_epoch,
            report.best_val_loss,
            report.test_accuracy
        )
    })
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let rc = a.cfg.resolve()?;
    print_config(&rc)?;
    let seed = rc.train.seed;
    let started = Instant::now();
    let report = match &a.data {
        Some(path) => {
            let user = a
                .leave_out_user
                .ok_or_else(|| Error::Config("--data requires --leave-out-user".into()))?;
            let corpus = load_data(path)?;
            println!("data: {} ({} instances), leaving out user {user}", path.display(), corpus.len());
            louo_run(&rc.model, &corpus, &rc.train, user, 0, seed, a.per_class)?.1
        }
        None => {
            println!("data: synthetic, {} training sets per class", a.sets_per_class);
            let data = synthetic_split(derive_seed(seed, &[0xda7a]), a.sets_per_class, (a.sets_per_class / 5).max(1))?;
            let tc = TrainConfig {
                seed: derive_seed(seed, &[1]),
                ..rc.train.clone()
            };
            train_once(&rc.model, &data, &tc, derive_seed(seed, &[2]))?.1
        }
    };
    write_config(&a.out_dir, &rc)?;
    write_run(&a.out_dir, &rc.model.label(), seed, &report)?;
    println!(
        "epochs: {} (best {}), best validation loss: {:.6}, test accuracy: {:.2}%",
        report.epochs_run(),
        report.best_epoch,
        report.best_val_loss,
        100.0 * report.test_accuracy
    );
    println!("wall time: {:.1}s", started.elapsed().as_secs_f64());
    println!("reports in {}", a.out_dir.display());
    Ok(EXIT_OK)
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("SETPOOL_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("SETPOOL_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn cmd_louo(a: LouoArgs) -> Result<i32> {
    let rc = a.cfg.resolve()?;
    print_config(&rc)?;
    let seed = rc.train.seed;
    let corpus = match &a.data {
        Some(path) => load_data(path)?,
        None => SyntheticTask {
            users: a.users,
            sets_per_class: 2 * a.per_class,
            ..Default::default()
        }
        .generate(&mut Rng::new(derive_seed(seed, &[0xda7a])))?,
    };
    let opts = LouoOptions {
        users: (!a.leave_out_user.is_empty()).then(|| a.leave_out_user.clone()),
        repetitions: a.repetitions,
        per_class: a.per_class,
        threads: threads_from_env()?,
        seed,
    };
    println!(
        "corpus: {} instances; repetitions: {}; threads: {}",
        corpus.len(),
        a.repetitions,
        opts.threads.map_or("auto".to_string(), |n| n.to_string())
    );
    let started = Instant::now();
    let summary = evaluate_louo(&rc.model, &corpus, &rc.train, &opts)?;
    write_config(&a.out_dir, &rc)?;
    write_file(&a.out_dir, "runs.csv", |w| summary.write_runs_csv(w))?;
    write_file(&a.out_dir, "summary.csv", |w| summary.write_summary_csv(w))?;
    let json = serde_json::json!({
        "config": summary.config,
        "mean": summary.mean,
        "std": summary.std,
        "runs": summary.runs.len(),
        "per_user": summary.per_user.iter().map(|u| serde_json::json!({
            "user": u.user, "mean": u.mean, "std": u.std
        })).collect::<Vec<_>>(),
    });
    write_file(&a.out_dir, "summary.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &json)?;
        w.push(b'\n');
        Ok(())
    })?;
    for u in &summary.per_user {
        println!("user {:>3}: {:6.2} ± {:.2}", u.user, 100.0 * u.mean, 100.0 * u.std);
    }
    println!(
        "{}: {:.2} ± {:.2} over {} runs",
        summary.config,
        100.0 * summary.mean,
        100.0 * summary.std,
        summary.runs.len()
    );
    println!("wall time: {:.1}s", started.elapsed().as_secs_f64());
    Ok(EXIT_OK)
}

fn finish_checks(results: &[CheckResult], out_dir: Option<&Path>, file: &str) -> Result<i32> {
    for r in results {
        println!("{r}");
    }
    if let Some(dir) = out_dir {
        write_file(dir, file, |w| verify::write_results_csv(w, results))?;
    }
    if verify::all_pass(results) {
        println!("all {} checks passed", results.len());
        Ok(EXIT_OK)
    } else {
        let failed = results.iter().filter(|r| !r.pass).count();
        println!("{failed} of {} checks failed", results.len());
        Ok(EXIT_FAILED)
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    if !a.all && a.only.is_none() {
        return Err(Error::Config("pass --all or --only <prefix>".into()));
    }
    println!("seed: {}", a.seed);
    println!("step: {:e}, tolerance: {:e}", verify::GRAD_STEP, verify::GRAD_TOLERANCE);
    let mut results = verify::gradcheck_all(a.seed)?;
    if let Some(prefix) = &a.only {
        results.retain(|r| r.name.starts_with(prefix.as_str()));
        if results.is_empty() {
            return Err(Error::Config(format!("no check is named {prefix}*")));
        }
    }
    finish_checks(&results, a.out_dir.as_deref(), "gradcheck.csv")
}

fn cmd_ambiguity(a: AmbiguityArgs) -> Result<i32> {
    println!("seed: {}", a.seed);
    println!("pairs: {}, linear maps per pair: {}", a.pairs, a.maps);
    let rep = verify::ambiguity_check(a.seed, a.pairs, a.maps)?;
    let (ea, eb) = &rep.example;
    let fmt_set = |m: &crate::numkit::Matrix| {
        m.iter_rows()
            .map(|r| format!("({}, {})", r[0], r[1]))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("example A: {}", fmt_set(ea));
    println!("example B: {}", fmt_set(eb));
    println!("sigmoid embedding + sum, canonical pair: {:.17}", rep.canonical_sum_margin);
    println!("sigmoid embedding + average, canonical pair: {:.17}", rep.canonical_average_margin);
    let code = finish_checks(&rep.checks, None, "")?;
    if let Some(dir) = &a.out_dir {
        write_file(dir, "ambiguity.csv", |w| verify::write_results_csv(w, &rep.checks))?;
        write_file(dir, "example_pair.csv", |w| {
            use std::io::Write;
            writeln!(w, "set,x,y")?;
            for (name, m) in [("A", ea), ("B", eb)] {
                for r in m.iter_rows() {
                    writeln!(w, "{name},{},{}", r[0], r[1])?;
                }
            }
            Ok(())
        })?;
    }
    Ok(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_and_flag_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"model": {"pooling": "max", "embedding_size": 100}, "train": {"seed": 4}}"#).unwrap();
        let args = ConfigArgs {
            config: Some(path.clone()),
            pooling: Some(PoolMode::Average),
            ..Default::default()
        };
        let rc = args.resolve().unwrap();
        assert_eq!(rc.model.pooling, PoolMode::Average);
        assert_eq!(rc.model.embedding_size, 100);
        assert_eq!(rc.train.seed, 4);
        fs::write(&path, r#"{"model": {"poolin": "max"}}"#).unwrap();
        assert!(matches!(args.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["setpool", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["setpool", "gradcheck", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["setpool", "gradcheck"]), EXIT_USAGE);
        assert_eq!(
            run(["setpool", "train", "--data", "/nonexistent/p.csv", "--leave-out-user", "1"]),
            EXIT_USAGE
        );
    }
}
