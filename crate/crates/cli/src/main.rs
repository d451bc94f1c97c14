//! `cf2net` command-line tool: prepare data, train, evaluate, run the
//! ablation matrix, predict, and self-test.

mod config;
mod logger;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cf2net::checkpoint::load_checkpoint;
use cf2net::dataset::{
    generate_synthetic, load_dataset, load_prepared, make_folds, prepare_dataset, read_gray,
    write_binary, write_gray, PrepareParams, PreparedDataset,
};
use cf2net::metrics::aggregate_report;
use cf2net::nn::OptimizerConfig;
use cf2net::plane::Plane;
use cf2net::selftest::{gradient_suite, metric_suite};
use cf2net::trainer::{
    cross_validate, evaluate, overfit_smoke_test, run_ablation, train_fold, write_report,
    AblationVariant, OverfitConfig, Predictor,
};

use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(
    name = "cf2net",
    version,
    about = "Breast-ultrasound lesion segmentation toolkit"
)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (for `predict`, the overlay image path).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resize, normalize and materialize a dataset with edge bands and
    /// superpixel channels.
    Prepare(PrepareArgs),
    /// Cross-validate (or train a single fold).
    Train(TrainArgs),
    /// Score a checkpoint on its held-out fold.
    Eval(EvalArgs),
    /// Cross-validate each ablation variant and tabulate.
    Ablate(AblateArgs),
    /// Segment one image with a checkpoint.
    Predict(PredictArgs),
    /// Gradient checks, metric oracle and the overfit smoke test.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Raw dataset root with `images/` and `masks/`.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Generate this many synthetic samples instead.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    /// SLIC region count.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    compactness: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Skip the superpixel channel.
    #[arg(long)]
    no_superpixels: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerName {
    Adagrad,
    Adam,
    SgdMomentum,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerName>,
    #[arg(long)]
    folds: Option<usize>,
    /// Train only this fold instead of the full cross validation.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    fsp_width: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    validate_every: Option<usize>,
    /// Train without the superpixel input channel.
    #[arg(long)]
    no_superpixels: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated variant names (default: all six).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Run without the superpixel channel (fails if the checkpoint needs it).
    #[arg(long)]
    no_superpixels: bool,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Only the gradient and metric checks.
    #[arg(long)]
    skip_overfit: bool,
}

/// A failure with its exit status: 1 for user or configuration errors, 2
/// for internal and numerical failures.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn user(message: impl Into<String>) -> Failure {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Failure {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<cf2net::Error> for Failure {
    fn from(e: cf2net::Error) -> Failure {
        use cf2net::Error::*;
        let code = match e {
            Numerical(_) | Shape(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p).map_err(Failure::user)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(o) = &cli.out {
        c.out = Some(o.clone());
    }
    Ok(c)
}

fn apply_train_args(c: &mut ExperimentConfig, a: &TrainArgs) {
    let t = &mut c.train;
    if let Some(d) = &a.data {
        c.data.prepared = Some(d.clone());
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.folds {
        t.folds = v;
    }
    if let Some(name) = a.optimizer {
        let lr = t.optimizer.learning_rate();
        t.optimizer = match name {
            OptimizerName::Adagrad => OptimizerConfig::default(),
            OptimizerName::Adam => OptimizerConfig::Adam {
                learning_rate: lr,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            OptimizerName::SgdMomentum => OptimizerConfig::SgdMomentum {
                learning_rate: lr,
                momentum: 0.9,
            },
        }
        .with_learning_rate(lr);
    }
    if let Some(v) = a.lr {
        t.optimizer = t.optimizer.clone().with_learning_rate(v);
    }
    if let Some(v) = a.base_width {
        t.model.base_width = v;
    }
    if let Some(v) = a.fsp_width {
        t.model.fsp_width = v;
    }
    if let Some(v) = a.clip_norm {
        t.clip_norm = Some(v);
    }
    if let Some(v) = a.validate_every {
        t.validate_every = v;
    }
    if a.no_superpixels {
        t.model.use_superpixel = false;
    }
}

fn out_dir(c: &ExperimentConfig) -> CliResult<PathBuf> {
    c.out
        .clone()
        .ok_or_else(|| Failure::user("no output directory; pass --out or set `out` in the config"))
}

/// Create the run directory, start its log and persist the resolved config.
fn start_run(dir: &Path, c: &ExperimentConfig) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::user(format!("{}: {e}", dir.display())))?;
    logger::attach_file(&dir.join("run.log")).map_err(Failure::user)?;
    write_config(&dir.join("config.toml"), c)
}

fn write_config(path: &Path, c: &ExperimentConfig) -> CliResult {
    let text = c.to_toml().map_err(Failure::internal)?;
    std::fs::write(path, text).map_err(|e| Failure::user(format!("{}: {e}", path.display())))
}

/// Load the prepared dataset and align the training config with it.
fn prepared(c: &mut ExperimentConfig) -> CliResult<PreparedDataset> {
    let dir = c.data.prepared.clone().ok_or_else(|| {
        Failure::user("no prepared dataset given; pass --data <dir> (created by `cf2net prepare`)")
    })?;
    let data = load_prepared(&dir)?;
    let params = &data.manifest.params;
    c.data.size = params.size;
    c.train.model.size = params.size;
    match &params.superpixel {
        Some(sp) => {
            c.superpixel = sp.clone();
            c.train.superpixel = sp.clone();
        }
        None if c.train.model.use_superpixel => {
            return Err(Failure::user(format!(
                "{} was prepared without superpixels but the model uses them; \
                 re-run `cf2net prepare` without --no-superpixels or pass --no-superpixels here",
                dir.display()
            )))
        }
        None => {}
    }
    Ok(data)
}

fn cmd_prepare(mut c: ExperimentConfig, a: &PrepareArgs) -> CliResult {
    if let Some(r) = &a.data_root {
        c.data.root = Some(r.clone());
    }
    if let Some(n) = a.synthetic {
        c.data.synthetic = Some(n);
    }
    if let Some(s) = a.size {
        c.data.size = s;
    }
    if let Some(k) = a.k {
        c.superpixel.k = k;
    }
    if let Some(m) = a.compactness {
        c.superpixel.compactness = m;
    }
    if let Some(i) = a.iterations {
        c.superpixel.iterations = i;
    }
    if a.no_superpixels {
        c.data.superpixels = false;
    }
    let c = c.resolve();
    let out = out_dir(&c)?;
    let index = match (c.data.synthetic, &c.data.root) {
        (Some(n), _) => generate_synthetic(n, c.data.size, c.seed)?,
        (None, Some(root)) => load_dataset(root)?,
        (None, None) => {
            return Err(Failure::user(
                "no data source; pass --data-root <dir> or --synthetic <count>",
            ))
        }
    };
    let params = PrepareParams {
        size: c.data.size,
        superpixel: c.data.superpixels.then(|| c.superpixel.clone()),
    };
    std::fs::create_dir_all(&out).map_err(|e| Failure::user(format!("{}: {e}", out.display())))?;
    let outcome = prepare_dataset(&index, &params, &out)?;
    if outcome.skipped {
        println!(
            "{}: {} samples already prepared (hash {})",
            out.display(),
            outcome.count,
            &outcome.hash[..12]
        );
    } else {
        println!(
            "{}: prepared {} samples (hash {})",
            out.display(),
            outcome.count,
            &outcome.hash[..12]
        );
    }
    for (id, why) in &index.rejected {
        println!("rejected {id}: {why}");
    }
    Ok(())
}

fn cmd_train(mut c: ExperimentConfig, a: &TrainArgs) -> CliResult {
    apply_train_args(&mut c, a);
    let mut c = c.resolve();
    let data = prepared(&mut c)?;
    c.train.validate()?;
    let out = out_dir(&c)?;
    start_run(&out, &c)?;
    match a.fold {
        Some(fold) => {
            let split = make_folds(data.samples.len(), c.train.folds, c.seed)?;
            let dir = out.join(format!("fold{fold}"));
            let outcome = train_fold(&c.train, fold, &split, &data.samples, Some(&dir))?;
            println!(
                "fold {fold}: best validation DSC {:.4} at epoch {}",
                outcome.best.val_dsc.unwrap_or(f64::NAN),
                outcome.best.epoch
            );
        }
        None => {
            let cv = cross_validate(&c.train, &data.samples, Some(&out))?;
            print!("{}", cv.report.to_table());
        }
    }
    Ok(())
}

fn cmd_eval(mut c: ExperimentConfig, a: &EvalArgs) -> CliResult {
    if let Some(p) = &a.checkpoint {
        c.eval.checkpoint = Some(p.clone());
    }
    if let Some(d) = &a.data {
        c.data.prepared = Some(d.clone());
    }
    if let Some(f) = a.fold {
        c.eval.fold = Some(f);
    }
    let path = c
        .eval
        .checkpoint
        .clone()
        .ok_or_else(|| Failure::user("pass --checkpoint <file>"))?;
    let ck = load_checkpoint(&path)?;
    let mut c = c.resolve();
    c.train.model = ck.info.model.clone();
    let data = prepared(&mut c)?;
    let progress = &ck.info.progress;
    let fold = c
        .eval
        .fold
        .or(progress.fold)
        .ok_or_else(|| Failure::user("checkpoint records no fold; pass --fold"))?;
    let folds = progress.folds.unwrap_or(c.train.folds);
    let split = make_folds(data.samples.len(), folds, progress.seed)?;
    if fold >= split.k {
        return Err(Failure::user(format!(
            "fold {fold} out of range for {folds} folds"
        )));
    }
    let held: Vec<_> = split
        .held_out(fold)
        .iter()
        .map(|&i| &data.samples[i])
        .collect();
    let scores = evaluate(&ck.net, &ck.store, &held, c.train.batch_size)?;
    let mut report = aggregate_report(&[scores])?;
    report
        .metadata
        .insert("checkpoint".into(), path.display().to_string());
    report
        .metadata
        .insert("held_out_fold".into(), fold.to_string());
    report
        .metadata
        .insert("checkpoint_epoch".into(), progress.epoch.to_string());
    let out = out_dir(&c)?;
    start_run(&out, &c)?;
    write_report(&out, "eval_report", &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_ablate(mut c: ExperimentConfig, a: &AblateArgs) -> CliResult {
    apply_train_args(&mut c, &a.train);
    if let Some(v) = &a.variants {
        c.ablate.variants = v.clone();
    }
    let mut c = c.resolve();
    let variants: Vec<AblationVariant> = if c.ablate.variants.is_empty() {
        AblationVariant::ALL.to_vec()
    } else {
        c.ablate
            .variants
            .iter()
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()?
    };
    // Every variant must be loadable, including the superpixel one.
    let needs_sp = variants.contains(&AblationVariant::Cf2netFull);
    c.train.model.use_superpixel = needs_sp;
    let data = prepared(&mut c)?;
    c.train.validate()?;
    let out = out_dir(&c)?;
    start_run(&out, &c)?;
    let report = run_ablation(&c.train, &variants, &data.samples, Some(&out))?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_predict(mut c: ExperimentConfig, a: &PredictArgs) -> CliResult {
    if let Some(p) = &a.checkpoint {
        c.predict.checkpoint = Some(p.clone());
    }
    if let Some(i) = &a.image {
        c.predict.image = Some(i.clone());
    }
    if a.no_superpixels {
        c.predict.superpixels = Some(false);
    }
    let ck_path = c
        .predict
        .checkpoint
        .clone()
        .ok_or_else(|| Failure::user("pass --checkpoint <file>"))?;
    let image_path = c
        .predict
        .image
        .clone()
        .ok_or_else(|| Failure::user("pass --image <file>"))?;
    let overlay = c
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("overlay.png"));
    let predictor = Predictor::load(&ck_path)?;
    let use_sp = c
        .predict
        .superpixels
        .unwrap_or(predictor.net().config().use_superpixel);
    c.predict.superpixels = Some(use_sp);
    let image = read_gray(&image_path)?;
    let pred = predictor.predict(&image, use_sp)?;
    if let Some(dir) = overlay.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::user(format!("{}: {e}", dir.display())))?;
    }
    pred.save_overlay(&overlay)?;
    let sibling = |suffix: &str| {
        let stem = overlay
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("overlay");
        overlay.with_file_name(format!("{stem}_{suffix}"))
    };
    write_binary(&sibling("mask.png"), &pred.mask)?;
    if let Some(edge) = &pred.edge {
        let (w, h) = edge.dims();
        write_gray(&sibling("edge.png"), &Plane::from_vec(w, h, edge.to_u8())?)?;
    }
    write_config(&sibling("config.toml"), &c)?;
    println!(
        "{}: {} lesion pixels of {}",
        overlay.display(),
        pred.mask.count(),
        pred.mask.len()
    );
    Ok(())
}

fn cmd_selftest(c: ExperimentConfig, a: &SelftestArgs) -> CliResult {
    let mut failed = 0usize;
    let mut line = |name: &str, passed: bool, detail: &str| {
        println!(
            "[{}] {name}: {detail}",
            if passed { "PASS" } else { "FAIL" }
        );
        failed += usize::from(!passed);
    };
    for r in gradient_suite(c.seed)? {
        line(&format!("gradient {}", r.name), r.passed, &r.detail);
    }
    let m = metric_suite(c.seed, 500)?;
    line(&m.name, m.passed, &m.detail);
    if !a.skip_overfit {
        let config = OverfitConfig {
            seed: c.seed,
            ..OverfitConfig::default()
        };
        let r = overfit_smoke_test(&config)?.report;
        let detail = format!(
            "loss {:.4} → {:.4} in {} steps{}",
            r.initial_loss,
            r.final_loss,
            r.steps,
            r.failure
                .as_deref()
                .map(|f| format!(" ({f})"))
                .unwrap_or_default()
        );
        line("overfit smoke test", r.passed, &detail);
    }
    if failed > 0 {
        return Err(Failure::internal(format!(
            "{failed} self-test check(s) failed"
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    logger::init();
    let cli = Cli::parse();
    let result = load_config(&cli).and_then(|c| match &cli.command {
        Command::Prepare(a) => cmd_prepare(c, a),
        Command::Train(a) => cmd_train(c, a),
        Command::Eval(a) => cmd_eval(c, a),
        Command::Ablate(a) => cmd_ablate(c, a),
        Command::Predict(a) => cmd_predict(c, a),
        Command::Selftest(a) => cmd_selftest(c, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
