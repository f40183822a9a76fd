//! The `sparsebayes` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use crate::config::{RunConfig, Task};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, export, MetricsReport};
use crate::pipeline::{self, Checkpoint, EpochLog, PredictiveResult};
use crate::saliency::MaskSet;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "sparsebayes", version, about = "Sparse Bayesian neural network training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the deterministic network.
    TrainDet(Args),
    /// Select Bayesian weights from squared gradients.
    Saliency(Args),
    /// Train the partially Bayesian network.
    TrainBayes(Args),
    /// Evaluate one checkpoint, or an ensemble of several.
    Eval(Args),
    /// Run every method and write a comparison table.
    Compare(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long = "r-bayes")]
    r_bayes: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Io(_) | Error::Format { .. } => EXIT_IO,
        Error::Config { .. } | Error::Contract(_) | Error::Dimension(_) => EXIT_USAGE,
    }
}

/// Parses `args` (program name first), runs the command and returns its exit code.
pub fn run<I, T>(args: I) -> i32
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
    let (name, result) = match &cli.command {
        Command::TrainDet(a) => ("train-det", with_run(a, "train-det", cmd_train_det)),
        Command::Saliency(a) => ("saliency", with_run(a, "saliency", cmd_saliency)),
        Command::TrainBayes(a) => ("train-bayes", with_run(a, "train-bayes", cmd_train_bayes)),
        Command::Eval(a) => ("eval", with_run(a, "eval", cmd_eval)),
        Command::Compare(a) => ("compare", with_run(a, "compare", cmd_compare)),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("sparsebayes {name}: {e}");
            exit_code(&e)
        }
    }
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Loads the config, prepares the output directory, writes the resolved
/// config and brackets the command with timestamps in `run_meta.txt`.
fn with_run(args: &Args, name: &str, f: fn(&Run, &Args) -> Result<()>) -> Result<()> {
    if !args.config.is_file() {
        return Err(Error::config("--config", format!("{} does not exist", args.config.display())));
    }
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.samples {
        cfg.train.samples = s;
    }
    if let Some(r) = args.r_bayes {
        cfg.train.r_bayes = r;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("resolved_config.txt"), cfg.resolved_text())?;
    let started = unix_now();
    let run = Run { cfg, out };
    let result = f(&run, args);
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("error: {e}"),
    };
    fs::write(
        run.out.join("run_meta.txt"),
        format!("command = {name}\nstarted_unix = {started}\nfinished_unix = {}\nstatus = {status}\n", unix_now()),
    )?;
    result
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Classify => "accuracy",
        Task::Segment => "dice",
    }
}

fn one_checkpoint(args: &Args) -> Result<&Path> {
    match args.checkpoint.as_slice() {
        [p] => {
            if !p.is_file() {
                return Err(Error::config("--checkpoint", format!("{} does not exist", p.display())));
            }
            Ok(p)
        }
        [] => Err(Error::config("--checkpoint", "a checkpoint is required")),
        _ => Err(Error::config("--checkpoint", "exactly one checkpoint expected")),
    }
}

fn write_train_log(path: &Path, task: Task, log: &[EpochLog]) -> Result<()> {
    let mut s = format!("epoch,split,loss,{}\n", metric_name(task));
    for e in log {
        writeln!(s, "{},train,{},{}", e.epoch, e.loss, e.metric).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_bayes_log(path: &Path, task: Task, log: &[EpochLog]) -> Result<()> {
    let mut s = format!("epoch,split,elbo,nll,kl,beta,{}\n", metric_name(task));
    for e in log {
        writeln!(s, "{},train,{},{},{},{},{}", e.epoch, e.loss, e.nll, e.kl, e.beta, e.metric).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

fn cmd_train_det(run: &Run, _args: &Args) -> Result<()> {
    let (train, _) = run.cfg.datasets()?;
    let spec = run.cfg.model_spec(&train)?;
    let trained = pipeline::train_deterministic(spec, &train, &run.cfg.train)?;
    trained.checkpoint.save(&run.out.join("det.sbn1"))?;
    write_train_log(&run.out.join("train_log.csv"), run.cfg.task, &trained.log)
}

fn cmd_saliency(run: &Run, args: &Args) -> Result<()> {
    let ck = Checkpoint::load(one_checkpoint(args)?)?;
    let (train, _) = run.cfg.datasets()?;
    let r = run.cfg.train.r_bayes;
    if r == 0.0 {
        eprintln!("warning: r_bayes = 0 selects no Bayesian weights; the mask file is empty");
    }
    let sens = pipeline::run_sensitivity(&ck, &train, r, run.cfg.train.saliency_scope)?;
    let mut bytes = Vec::new();
    sens.masks.write_to(&mut bytes)?;
    fs::write(run.out.join("masks.sbm1"), bytes)?;
    let mut s = String::from("layer,total,k,saliency_min,saliency_max\n");
    for ((block, sal), k) in ck.model.maskable_blocks().zip(&sens.saliency.blocks).zip(&sens.masks.k_per_block) {
        let min = sal.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = sal.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        writeln!(s, "{},{},{k},{min},{max}", block.name, sal.len()).expect("string write");
    }
    fs::write(run.out.join("saliency_summary.csv"), s)?;
    Ok(())
}

fn cmd_train_bayes(run: &Run, args: &Args) -> Result<()> {
    let ck = Checkpoint::load(one_checkpoint(args)?)?;
    let masks_path = args
        .masks
        .as_ref()
        .ok_or_else(|| Error::config("--masks", "a mask file is required"))?;
    if !masks_path.is_file() {
        return Err(Error::config("--masks", format!("{} does not exist", masks_path.display())));
    }
    let masks = MaskSet::read_from(&mut fs::File::open(masks_path)?)?;
    let (train, _) = run.cfg.datasets()?;
    let trained = pipeline::train_sparse_bayes(&ck, &masks, &train, &run.cfg.train)?;
    trained.checkpoint.save(&run.out.join("bayes.sbn1"))?;
    write_bayes_log(&run.out.join("bayes_log.csv"), run.cfg.task, &trained.log)
}

/// Predicts the test split with one model or an ensemble and scores it.
fn evaluate(cfg: &RunConfig, models: &[&crate::layers::Model], test: &Dataset) -> Result<(MetricsReport, PredictiveResult)> {
    let samples = cfg.train.samples;
    let spec = &models[0].spec;
    let (pred, count) = if models.len() == 1 {
        (
            pipeline::predict(models[0], &test.inputs, samples, cfg.train.seed)?,
            metrics::flops(spec, models[0].n_bayes(), samples)?,
        )
    } else {
        let bayes: Vec<usize> = models.iter().map(|m| m.n_bayes()).collect();
        (
            pipeline::predict_ensemble(models, &test.inputs, samples, cfg.train.seed)?,
            metrics::ensemble_flops(spec, &bayes, samples)?,
        )
    };
    let report = metrics::evaluate(&pred.mean_probs, test, spec.head, count, cfg.ece_bins)?;
    Ok((report, pred))
}

fn write_maps(dir: &Path, test: &Dataset, pred: &PredictiveResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let shape = test.example_shape();
    let (h, w) = (shape[1], shape[2]);
    for i in 0..test.len() {
        let probs = pred.mean_probs.row(i);
        let ent = pred.entropy.row(i);
        let truth = test.majority_mask(i).ok_or_else(|| Error::contract("segmentation needs rater masks"))?;
        let p: Vec<bool> = probs.iter().map(|&v| v >= 0.5).collect();
        // first input channel as the grayscale background
        let input = &test.inputs.row(i)[..h * w];
        fs::write(dir.join(format!("entropy_{i:04}.pgm")), export::entropy_pgm(ent, w, h)?)?;
        fs::write(dir.join(format!("overlay_{i:04}.ppm")), export::overlay_ppm(input, &p, &truth, w, h)?)?;
    }
    Ok(())
}

fn cmd_eval(run: &Run, args: &Args) -> Result<()> {
    if args.checkpoint.is_empty() {
        return Err(Error::config("--checkpoint", "at least one checkpoint is required"));
    }
    let mut cks = Vec::new();
    for p in &args.checkpoint {
        if !p.is_file() {
            return Err(Error::config("--checkpoint", format!("{} does not exist", p.display())));
        }
        cks.push(Checkpoint::load(p)?);
    }
    let (_, test) = run.cfg.datasets()?;
    let models: Vec<_> = cks.iter().map(|c| &c.model).collect();
    let (report, pred) = evaluate(&run.cfg, &models, &test)?;
    fs::write(run.out.join("metrics.txt"), report.to_key_value())?;
    fs::write(
        run.out.join("metrics.csv"),
        format!("{}\n{}\n", report.csv_header(), report.csv_row()),
    )?;
    if run.cfg.task == Task::Segment {
        write_maps(&run.out.join("maps"), &test, &pred)?;
    }
    Ok(())
}

fn compare_header(task: Task) -> String {
    let task_cols = match task {
        Task::Classify => "accuracy,auc",
        Task::Segment => "dice,iou",
    };
    format!("method,status,{task_cols},brier,eoe,ece,flops,flops_ratio")
}

fn compare_row(method: &str, task: Task, result: &Result<MetricsReport>) -> String {
    let o = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
    match result {
        Ok(r) => {
            let task_cols = match task {
                Task::Classify => format!("{},{}", o(r.accuracy), o(r.auc)),
                Task::Segment => format!("{},{}", o(r.dice), o(r.iou)),
            };
            format!(
                "{method},ok,{task_cols},{},{},{},{},{}",
                r.brier, r.eoe, r.ece, r.flops, r.flops_ratio
            )
        }
        Err(_) => format!("{method},failed,,,,,,,"),
    }
}

fn cmd_compare(run: &Run, _args: &Args) -> Result<()> {
    let cfg = &run.cfg;
    let (train, test) = cfg.datasets()?;
    let spec = cfg.model_spec(&train)?;
    let mut rows: Vec<(String, Result<MetricsReport>)> = Vec::new();

    let det = pipeline::train_deterministic(spec.clone(), &train, &cfg.train);
    let det_ck = det.as_ref().map(|t| t.checkpoint.clone()).map_err(|e| Error::contract(e.to_string()));
    rows.push((
        "deterministic".into(),
        det.and_then(|t| evaluate(cfg, &[&t.checkpoint.model], &test).map(|r| r.0)),
    ));

    let ens = pipeline::train_ensemble(spec.clone(), &train, &cfg.train, cfg.ensemble_members).and_then(|members| {
        let models: Vec<_> = members.iter().map(|m| &m.checkpoint.model).collect();
        evaluate(cfg, &models, &test).map(|r| r.0)
    });
    rows.push(("ensemble".into(), ens));

    for &r in &cfg.r_bayes_sweep {
        let result = det_ck.as_ref().map_err(|e| Error::contract(e.to_string())).and_then(|ck| {
            let sens = pipeline::run_sensitivity(ck, &train, r, cfg.train.saliency_scope)?;
            let t = pipeline::train_sparse_bayes(ck, &sens.masks, &train, &cfg.train)?;
            evaluate(cfg, &[&t.checkpoint.model], &test).map(|r| r.0)
        });
        rows.push((format!("partial_{r}"), result));
    }

    let mut full_cfg = cfg.train.clone();
    full_cfg.epochs = cfg.full_bayes_epochs;
    let full = pipeline::train_full_bayes(spec, &train, &full_cfg)
        .and_then(|t| evaluate(cfg, &[&t.checkpoint.model], &test).map(|r| r.0));
    rows.push(("bayesian_full".into(), full));

    let mut csv = compare_header(cfg.task) + "\n";
    for (m, r) in &rows {
        csv.push_str(&compare_row(m, cfg.task, r));
        csv.push('\n');
    }
    fs::write(run.out.join("compare.csv"), csv)?;
    let failures: Vec<_> = rows.into_iter().filter_map(|(m, r)| r.err().map(|e| (m, e))).collect();
    if let Some((method, err)) = failures.into_iter().next() {
        eprintln!("sparsebayes compare: method {method} failed");
        return Err(err);
    }
    Ok(())
}
