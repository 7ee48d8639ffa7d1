//! `gigassl`: generate synthetic banks, pretrain, embed, probe and verify.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gigassl::datagen::{self, GenConfig};
use gigassl::inference::{embed_dataset, load_embeddings, save_embeddings, write_csv, EmbedOptions};
use gigassl::probe::{bootstrap_eval, read_labels, report_csv, report_table, Budget, EvalOptions, LabeledSet, Normalization};
use gigassl::ssl::{pretrain, Model, PretrainPaths, TrainConfig};
use gigassl::{gradcheck, selftest};

#[derive(Parser, Debug)]
#[command(name = "gigassl", version, about = "Slide-level contrastive pretraining on tile-embedding banks")]
struct Cli {
    /// Worker threads (default: all cores). Never changes any output.
    #[arg(long, global = true, env = "GIGASSL_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus of embedding banks with labels.
    Gen(GenArgs),
    /// Contrastive pretraining of the sparse pooling network.
    Pretrain(PretrainArgs),
    /// Slide embeddings from a checkpoint, or tile averages with --avgmil.
    Embed(EmbedArgs),
    /// Linear-probe evaluation over repeated stratified splits.
    Probe(ProbeArgs),
    /// Finite-difference check of every differentiable layer.
    Gradcheck(GradcheckArgs),
    /// Oracle and property checks; prints one line per check.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    slides: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Tiles stored per augmentation slice.
    #[arg(long, default_value_t = gigassl::DEFAULT_BANK_TILES)]
    tiles: usize,
    /// Augmentation slices K per bank, slice 0 included.
    #[arg(long, default_value_t = gigassl::DEFAULT_AUGS)]
    augs: usize,
    #[arg(long, default_value_t = GenConfig::default().feat_dim)]
    feat_dim: usize,
    /// Side of the square tile grid in pixels.
    #[arg(long, default_value_t = GenConfig::default().grid_extent)]
    grid_extent: u32,
    #[arg(long, default_value_t = GenConfig::default().prototypes)]
    prototypes: usize,
    /// Norm of the per-slide nuisance vector.
    #[arg(long, default_value_t = GenConfig::default().nuisance_strength)]
    nuisance: f64,
    /// Coordinates holding the nuisance vector; augmentations act on them.
    #[arg(long, default_value_t = GenConfig::default().nuisance_dims)]
    nuisance_dims: usize,
    #[arg(long, default_value_t = GenConfig::default().aug_noise)]
    aug_noise: f64,
    #[arg(long, default_value_t = GenConfig::default().tile_noise)]
    tile_noise: f64,
    /// Largest rotation angle of the augmentation transforms, in radians.
    #[arg(long, default_value_t = GenConfig::default().aug_strength)]
    aug_strength: f64,
    /// Reassign this fraction of class-1 tiles to prototype 0 (breaks
    /// marginal equality).
    #[arg(long, default_value_t = 0.0)]
    frequency_shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Directory of .gsb banks.
    #[arg(long)]
    banks: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss log (CSV `epoch,loss`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Run summary (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Continue from this checkpoint up to --epochs in total.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// key=value file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training epochs [default: 1000]
    #[arg(long)]
    epochs: Option<usize>,
    /// Tiles per view T [default: 5]
    #[arg(long)]
    tiles: Option<usize>,
    /// Slides per batch [default: 16]
    #[arg(long)]
    batch: Option<usize>,
    /// NT-Xent temperature τ [default: 0.5]
    #[arg(long)]
    tau: Option<f64>,
    /// Downsampling factor d from pixels to sparse-map sites [default: 224]
    #[arg(long)]
    downsample: Option<u32>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Draw each tile's augmentation independently.
    #[arg(long)]
    no_shared_aug: bool,
    /// Disable slide-level flips, rotations and scaling.
    #[arg(long)]
    no_slide_aug: bool,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    banks: PathBuf,
    /// Trained checkpoint (not needed with --avgmil).
    #[arg(long, required_unless_present = "avgmil")]
    checkpoint: Option<PathBuf>,
    /// Output embeddings (.gse).
    #[arg(long)]
    out: PathBuf,
    /// Also write the embeddings as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Views R averaged per slide.
    #[arg(long, default_value_t = gigassl::DEFAULT_VIEWS)]
    views: usize,
    /// Tiles per view T [default: the checkpoint's training T, 5 unless
    /// trained otherwise; 5 with --avgmil]
    #[arg(long)]
    tiles: Option<usize>,
    /// Downsampling factor d.
    #[arg(long, default_value_t = gigassl::DEFAULT_DOWNSAMPLE)]
    downsample: u32,
    /// Mean of slice-0 tile embeddings instead of network embeddings.
    #[arg(long)]
    avgmil: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    /// Unit Euclidean norm per row (network embeddings).
    L2,
    /// Per-feature standardization (tile averages).
    Standard,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    /// Embeddings (.gse).
    #[arg(long)]
    embeddings: PathBuf,
    /// CSV with `slide_id,label` rows.
    #[arg(long)]
    labels: PathBuf,
    /// Training budgets: `all`, a count or a fraction; repeatable.
    #[arg(long, num_args = 1.., default_values_t = [String::from("all")])]
    budget: Vec<String>,
    #[arg(long, default_value_t = 10)]
    splits: usize,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// L2 penalty on probe weights.
    #[arg(long, default_value_t = 1e-3)]
    l2: f64,
    #[arg(long, value_enum, default_value_t = NormArg::L2)]
    normalization: NormArg,
    /// Report CSV.
    #[arg(long)]
    out: PathBuf,
    /// Task name written to the report.
    #[arg(long, default_value = "task")]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random instances per layer.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn gen(a: GenArgs) -> anyhow::Result<()> {
    let cfg = GenConfig {
        n_slides: a.slides,
        n_classes: a.classes,
        n_tiles: a.tiles,
        n_augs: a.augs,
        feat_dim: a.feat_dim,
        grid_extent: a.grid_extent,
        prototypes: a.prototypes,
        nuisance_strength: a.nuisance,
        nuisance_dims: a.nuisance_dims,
        aug_noise: a.aug_noise,
        tile_noise: a.tile_noise,
        aug_strength: a.aug_strength,
        class_frequency_shift: a.frequency_shift,
        seed: a.seed,
        ..GenConfig::default()
    };
    let corpus = datagen::generate_corpus(&cfg, &a.out)?;
    let stat = datagen::verify_marginal_equality(&corpus.banks(), &corpus.labels())?;
    println!(
        "wrote {} slides to {} (marginal statistic {stat:.3})",
        corpus.slides.len(),
        a.out.display()
    );
    Ok(())
}

fn train_config(a: &PretrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        cfg.apply_file(path)?;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.tiles {
        cfg.tiles = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.tau {
        cfg.temperature = v;
    }
    if let Some(v) = a.downsample {
        cfg.downsample = v;
    }
    if let Some(v) = a.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.no_shared_aug {
        cfg.shared_aug = false;
    }
    if a.no_slide_aug {
        cfg.slide_aug = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let cfg = train_config(&a)?;
    let paths = PretrainPaths {
        bank_dir: a.banks,
        checkpoint: a.out,
        log: a.log,
        report: a.report,
        resume: a.resume,
    };
    let report = pretrain(&cfg, &paths)?;
    println!(
        "trained {} epochs on {} slides, final loss {}; checkpoint {}",
        report.epochs_completed,
        report.n_slides,
        report.final_loss.map_or("n/a".to_string(), |l| format!("{l:.6}")),
        paths.checkpoint.display()
    );
    Ok(())
}

fn run_embed(a: EmbedArgs) -> anyhow::Result<()> {
    let mut tiles = a.tiles.unwrap_or(gigassl::DEFAULT_TILES_PER_VIEW);
    let model = if a.avgmil {
        None
    } else {
        let path = a.checkpoint.as_deref().context("--checkpoint is required")?;
        let (model, header) = Model::load(path).with_context(|| format!("loading {}", path.display()))?;
        match a.tiles {
            None => tiles = header.train_tiles(),
            Some(t) if t != header.train_tiles() => log::warn!(
                "embedding with T={t} tiles per view but the checkpoint was trained with T={}; \
                 inference should use the training T",
                header.train_tiles()
            ),
            Some(_) => {}
        }
        Some(model)
    };
    let opts = EmbedOptions {
        tiles,
        views: a.views,
        downsample: a.downsample,
        seed: a.seed,
        average_mil: a.avgmil,
    };
    let out = embed_dataset(&a.banks, model.as_ref(), &opts)?;
    for f in &out.failures {
        eprintln!("failed: {}: {}", f.slide_id, f.error);
    }
    if out.matrix.is_empty() {
        bail!(gigassl::Error::EmptyBag);
    }
    save_embeddings(&out.matrix, &a.out)?;
    if let Some(csv) = &a.csv {
        write_csv(&out.matrix, csv)?;
    }
    println!(
        "embedded {} slides ({} failed) into {}",
        out.matrix.len(),
        out.failures.len(),
        a.out.display()
    );
    if !out.failures.is_empty() {
        bail!("{} slide(s) could not be embedded", out.failures.len());
    }
    Ok(())
}

fn run_probe(a: ProbeArgs) -> anyhow::Result<()> {
    let budgets = a
        .budget
        .iter()
        .map(|b| b.parse::<Budget>())
        .collect::<Result<Vec<_>, _>>()?;
    let matrix = load_embeddings(&a.embeddings)?;
    let labels: BTreeMap<String, String> = read_labels(&a.labels)?;
    let set = LabeledSet::from_embeddings(&matrix, &labels)?;
    let norm = match a.normalization {
        NormArg::L2 => Normalization::L2Unit,
        NormArg::Standard => Normalization::StandardScale,
    };
    let mut reports = Vec::with_capacity(budgets.len());
    for budget in budgets {
        let mut opts = EvalOptions {
            splits: a.splits,
            test_fraction: a.test_fraction,
            budget,
            seed: a.seed,
            ..EvalOptions::default()
        }
        .with_normalization(norm);
        opts.fit.l2 = a.l2;
        reports.push(bootstrap_eval(&set, &opts)?);
    }
    write_text(&a.out, &report_csv(&a.task, &reports))?;
    print!("{}", report_table(&a.task, &reports));
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| anyhow::Error::from(gigassl::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn run_gradcheck(a: GradcheckArgs) -> anyhow::Result<bool> {
    let checks = gradcheck::run(a.instances, a.seed)?;
    for c in &checks {
        println!(
            "{:<16} instances {:>3}  max rel error {:.3e}  {}",
            c.layer,
            c.instances,
            c.max_rel_error,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    Ok(checks.iter().all(|c| c.passed()))
}

fn run_selftest(a: SelftestArgs) -> bool {
    let checks = selftest::run_all(a.seed);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    checks.iter().all(|c| c.passed)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<gigassl::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not configure the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Gen(a) => gen(a).map(|_| true),
        Command::Pretrain(a) => run_pretrain(a).map(|_| true),
        Command::Embed(a) => run_embed(a).map(|_| true),
        Command::Probe(a) => run_probe(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Selftest(a) => Ok(run_selftest(a)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
