//! `moemil` command line: dataset generation, training, evaluation,
//! ablation sweeps, scan inspection and attention-heatmap export.
//!
//! Exit codes are stable for scripting: 0 success, 2 config/contract
//! error, 3 IO/format error, 4 numeric error.

mod config;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use moemil::data::{
    generate_synthetic, read_bag, split_manifest, write_bag, Manifest, Split,
};
use moemil::heatmap::{attention_csv, build_heatmap, bundle_to_svg, grid_to_pgm};
use moemil::model::{build_variant, ModelConfig, Variant};
use moemil::scan::{format_scan_text, region_nested_scan, resolution_ordered_scan};
use moemil::tensor::Tape;
use moemil::train::{
    evaluate, load_bags, load_checkpoint, train, EvalOutcome, OptimizerState, TrainOptions,
};
use moemil::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "moemil", version, about = "Structure-aware selective state-space MIL classifier")]
struct Cli {
    /// JSON run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed applied to model init, training, generation and splits.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-resolution dataset (MBAG files + manifest).
    Generate(GenerateArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train several variants/sweep settings and tabulate test metrics.
    Ablate(AblateArgs),
    /// Export per-level attention heatmaps for one bag.
    Heatmap(HeatmapArgs),
    /// Print both scan serializations of a bag.
    Scan(ScanArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Bags per class.
    #[arg(long)]
    slides_per_class: Option<usize>,
    /// Level-1 regions per bag.
    #[arg(long)]
    roots: Option<usize>,
    /// Input feature width.
    #[arg(long)]
    d_in: Option<usize>,
    /// Signal strength.
    #[arg(long)]
    signal: Option<f64>,
    /// Noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest CSV of the dataset.
    #[arg(long)]
    data: PathBuf,
    /// Model variant: full | wo-r | wo-moe | moeffn.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Balance-loss coefficient.
    #[arg(long)]
    lambda: Option<f64>,
    /// Resume from a last.mckp checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate: train | val | test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated variants, e.g. full,wo-r,wo-moe,moeffn.
    #[arg(long)]
    variants: Option<String>,
    /// Sweep one axis, e.g. topk=1,2,3,4 or layers=2,4,6 or lambda=0,0.001.
    #[arg(long)]
    sweep: Option<String>,
    /// Seeds per setting (seed i uses master_seed + i).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bag: PathBuf,
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long)]
    bag: PathBuf,
}

fn main() {
    // die quietly when piped into head & co.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    moemil::configure_threads_from_env();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Contract(_)
        | Error::Config(_)
        | Error::Dimension { .. }
        | Error::Index { .. }
        | Error::Structure(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numeric(_) => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    match cli.cmd {
        Cmd::Generate(args) => cmd_generate(cfg, args, cli.out, cli.force),
        Cmd::Train(args) => cmd_train(cfg, args, cli.out),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(cfg, args, cli.out),
        Cmd::Heatmap(args) => cmd_heatmap(args, cli.out),
        Cmd::Scan(args) => cmd_scan(args),
    }
}

fn require_out(out: Option<PathBuf>) -> Result<PathBuf> {
    out.ok_or_else(|| Error::Config("--out <dir> is required for this command".into()))
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Error::contract(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn cmd_generate(mut cfg: RunConfig, args: GenerateArgs, out: Option<PathBuf>, force: bool) -> Result<()> {
    let out = require_out(out)?;
    if let Some(v) = args.classes {
        cfg.synthetic.classes = v;
    }
    if let Some(v) = args.slides_per_class {
        cfg.synthetic.slides_per_class = v;
    }
    if let Some(v) = args.roots {
        cfg.synthetic.roots = v;
    }
    if let Some(v) = args.d_in {
        cfg.synthetic.d_in = v;
    }
    if let Some(v) = args.signal {
        cfg.synthetic.signal = v;
    }
    if let Some(v) = args.sigma {
        cfg.synthetic.sigma = v;
    }
    prepare_dir(&out, force)?;
    println!("resolved config:\n{}", cfg.to_pretty_json());

    let bags = generate_synthetic(&cfg.synthetic)?;
    let mut slides = Vec::with_capacity(bags.len());
    for bag in &bags {
        let file = format!("{}.mbag", bag.slide_id);
        write_bag(bag, &out.join(&file))?;
        slides.push((bag.slide_id.clone(), PathBuf::from(file), bag.label));
    }
    let [rt, rv, rs] = cfg.split.ratios;
    let manifest = split_manifest(&slides, (rt, rv, rs), cfg.split.seed)?;
    manifest.write_csv(&out.join("manifest.csv"))?;

    println!("wrote {} bags to {}", bags.len(), out.display());
    for c in 0..cfg.synthetic.classes {
        let n = bags.iter().filter(|b| b.label == c).count();
        println!("  class {c}: {n} bags");
    }
    for s in [Split::Train, Split::Val, Split::Test] {
        println!("  split {}: {} bags", s.as_str(), manifest.of_split(s).len());
    }
    Ok(())
}

/// Reconciles model width/classes with what the dataset actually carries.
fn reconcile_model(cfg: &mut ModelConfig, manifest: &Manifest, bags: &moemil::train::SplitBags) {
    let d_in = bags
        .train
        .first()
        .or(bags.val.first())
        .or(bags.test.first())
        .map(|b| b.d_in);
    if let Some(d_in) = d_in {
        if cfg.d_in != d_in {
            println!("note: d_in {} from config replaced by dataset width {d_in}", cfg.d_in);
            cfg.d_in = d_in;
        }
    }
    let classes = manifest.class_count();
    if classes > 0 && cfg.classes != classes {
        println!("note: classes {} from config replaced by dataset label count {classes}", cfg.classes);
        cfg.classes = classes;
    }
}

fn cmd_train(mut cfg: RunConfig, args: TrainArgs, out: Option<PathBuf>) -> Result<()> {
    let out = require_out(out)?;
    if let Some(v) = &args.variant {
        cfg.model.variant = Variant::parse(v)?;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.lambda {
        cfg.model.lambda_balance = v;
    }

    let manifest = Manifest::read_csv(&args.data)?;
    let base = args.data.parent().unwrap_or(Path::new("."));
    let bags = load_bags(&manifest, base)?;
    reconcile_model(&mut cfg.model, &manifest, &bags);
    println!("resolved config:\n{}", cfg.to_pretty_json());

    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let opts = TrainOptions::in_dir(&out);
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let mut model = build_variant::<f32>(&cfg.model)?;
    let summary = train(&mut model, &bags.train, &bags.val, &cfg.train, &opts, resume.as_ref())?;

    println!(
        "trained {} epochs; train loss {:.4} -> {:.4}",
        summary.epochs_run, summary.first_epoch_train_loss, summary.final_epoch_train_loss
    );
    if summary.best_epoch > 0 {
        println!("best val macro-F1 {:.4} at epoch {}", summary.best_f1, summary.best_epoch);
    }
    println!("metrics: {}", opts.metrics_path.display());
    println!("checkpoints: {} / {}", opts.best_path.display(), opts.last_path.display());
    Ok(())
}

fn print_outcome(outcome: &EvalOutcome) {
    let m = &outcome.metrics;
    println!("samples: {}", outcome.labels.len());
    println!("loss_task: {:.6}  loss_balance: {:.6}", outcome.loss_task, outcome.loss_balance);
    for (name, v) in [
        ("F1  ", m.f1),
        ("AUC ", m.auc),
        ("ACC ", m.acc),
        ("MCC ", m.mcc),
        ("SENS", m.sens),
        ("SPEC", m.spec),
        ("PPV ", m.ppv),
        ("NPV ", m.npv),
    ] {
        println!("{name} {v:.4}");
    }
    if !m.auc_skipped.is_empty() {
        println!("AUC skipped classes (single-class split): {:?}", m.auc_skipped);
    }
    println!("confusion (rows = true, cols = predicted):");
    for row in &m.confusion {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:5}")).collect();
        println!("  {}", cells.join(" "));
    }
}

fn restore_model(path: &Path) -> Result<moemil::model::MoEMambaMILModel<f32>> {
    let ckpt = load_checkpoint(path)?;
    let mut model = build_variant::<f32>(&ckpt.meta.model)?;
    let mut opt = OptimizerState::new(&model.store);
    ckpt.restore(&mut model.store, &mut opt)?;
    Ok(model)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = restore_model(&args.checkpoint)?;
    let manifest = Manifest::read_csv(&args.data)?;
    let base = args.data.parent().unwrap_or(Path::new("."));
    let bags = load_bags(&manifest, base)?;
    let split = Split::parse(&args.split)?;
    let set = match split {
        Split::Train => &bags.train,
        Split::Val => &bags.val,
        Split::Test => &bags.test,
    };
    let outcome = evaluate(&model, set)?;
    println!("split: {}", split.as_str());
    print_outcome(&outcome);
    Ok(())
}

struct AblateSetting {
    name: String,
    model: ModelConfig,
}

fn ablate_settings(base: &ModelConfig, args: &AblateArgs) -> Result<Vec<AblateSetting>> {
    let mut settings = Vec::new();
    if let Some(list) = &args.variants {
        for name in list.split(',') {
            let variant = Variant::parse(name.trim())?;
            settings.push(AblateSetting {
                name: variant.as_str().to_string(),
                model: ModelConfig { variant, ..base.clone() },
            });
        }
    }
    if let Some(sweep) = &args.sweep {
        let (axis, values) = sweep.split_once('=').ok_or_else(|| {
            Error::Config(format!("sweep {sweep:?} must look like axis=v1,v2,..."))
        })?;
        for v in values.split(',') {
            let v = v.trim();
            let mut model = base.clone();
            match axis {
                "topk" => model.top_k = v.parse().map_err(|_| Error::Config(format!("bad topk {v:?}")))?,
                "layers" => {
                    model.dyn_depth = v.parse().map_err(|_| Error::Config(format!("bad layers {v:?}")))?
                }
                "lambda" => {
                    model.lambda_balance =
                        v.parse().map_err(|_| Error::Config(format!("bad lambda {v:?}")))?
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown sweep axis {other:?}, expected topk|layers|lambda"
                    )))
                }
            }
            settings.push(AblateSetting { name: format!("{axis}={v}"), model });
        }
    }
    if settings.is_empty() {
        return Err(Error::Config("ablate needs --variants and/or --sweep".into()));
    }
    let mut names: Vec<&str> = settings.iter().map(|s| s.name.as_str()).collect();
    names.sort();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::contract("duplicate setting in ablation list"));
    }
    Ok(settings)
}

fn cmd_ablate(mut cfg: RunConfig, args: AblateArgs, out: Option<PathBuf>) -> Result<()> {
    let out = require_out(out)?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    let manifest = Manifest::read_csv(&args.data)?;
    let base = args.data.parent().unwrap_or(Path::new("."));
    let bags = load_bags(&manifest, base)?;
    reconcile_model(&mut cfg.model, &manifest, &bags);
    println!("resolved config:\n{}", cfg.to_pretty_json());
    let settings = ablate_settings(&cfg.model, &args)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;

    let mut csv = String::from("setting,seed,f1,auc,acc,mcc\n");
    let mut table = Vec::new();
    for setting in &settings {
        let mut sums = [0.0f64; 4];
        for s in 0..args.seeds {
            let mut model_cfg = setting.model.clone();
            model_cfg.seed = cfg.model.seed + s;
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = cfg.train.seed + s;

            let dir = out.join(format!("{}_s{s}", setting.name.replace('=', "_")));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let opts = TrainOptions::in_dir(&dir);
            let mut model = build_variant::<f32>(&model_cfg)?;
            train(&mut model, &bags.train, &bags.val, &train_cfg, &opts, None)?;
            let best = restore_model(&opts.best_path)?;
            let outcome = evaluate(&best, &bags.test)?;
            let m = &outcome.metrics;
            csv.push_str(&format!(
                "{},{s},{},{},{},{}\n",
                setting.name, m.f1, m.auc, m.acc, m.mcc
            ));
            println!(
                "{} seed {s}: F1 {:.4} AUC {:.4} ACC {:.4} MCC {:.4}",
                setting.name, m.f1, m.auc, m.acc, m.mcc
            );
            for (acc, v) in sums.iter_mut().zip([m.f1, m.auc, m.acc, m.mcc]) {
                *acc += v;
            }
        }
        let n = args.seeds as f64;
        let mean = [sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n];
        csv.push_str(&format!(
            "{},mean,{},{},{},{}\n",
            setting.name, mean[0], mean[1], mean[2], mean[3]
        ));
        table.push((setting.name.clone(), mean));
    }
    let csv_path = out.join("ablation.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    println!("\n{:<12} {:>8} {:>8} {:>8} {:>8}", "setting", "F1", "AUC", "ACC", "MCC");
    for (name, m) in &table {
        println!("{name:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", m[0], m[1], m[2], m[3]);
    }
    println!("\nwrote {}", csv_path.display());
    Ok(())
}

fn cmd_heatmap(args: HeatmapArgs, out: Option<PathBuf>) -> Result<()> {
    let out = require_out(out)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let model = restore_model(&args.checkpoint)?;
    let bag = read_bag(&args.bag)?;
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &bag)?;

    let attention_f64: Vec<f64> = fwd.attention.iter().map(|&a| a as f64).collect();
    let bundle = build_heatmap(&bag, &attention_f64)?;
    for grid in &bundle.levels {
        let path = out.join(format!("level_{}.pgm", grid.level));
        std::fs::write(&path, grid_to_pgm(grid)).map_err(|e| Error::io(path.display().to_string(), e))?;
        println!("wrote {} ({}x{})", path.display(), grid.cols, grid.rows);
    }
    let svg_path = out.join("heatmap.svg");
    std::fs::write(&svg_path, bundle_to_svg(&bundle))
        .map_err(|e| Error::io(svg_path.display().to_string(), e))?;
    println!("wrote {}", svg_path.display());
    let csv_path = out.join("attention.csv");
    std::fs::write(&csv_path, attention_csv(&bag, &fwd.attention))
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_scan(args: ScanArgs) -> Result<()> {
    let bag = read_bag(&args.bag)?;
    let hierarchy = bag.hierarchy()?;
    println!("# scheme: region-nested");
    print!("{}", format_scan_text(&hierarchy, &region_nested_scan(&hierarchy)));
    println!("# scheme: resolution-ordered");
    print!("{}", format_scan_text(&hierarchy, &resolution_ordered_scan(&hierarchy)));
    Ok(())
}
