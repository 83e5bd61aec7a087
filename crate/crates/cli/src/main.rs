use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use editor_core::config::RunConfig;
use editor_core::data::synth::{generate_dataset, Sample, SynthConfig};
use editor_core::data::{Manifest, Split};
use editor_core::train::{evaluate, EvalOptions, IterMetrics, TrainSet, Trainer};
use editor_core::visualize::write_panels;
use editor_core::Error;

/// Multi-modal re-identification with token selection and masked aggregation.
#[derive(Parser)]
#[command(name = "editor", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic tri-modal corpus.
    GenData(GenArgs),
    /// Train a model and write checkpoint, metrics and effective config.
    Train(TrainArgs),
    /// Evaluate a trained run on the query/gallery splits.
    Eval(EvalArgs),
    /// Write selection overlays and saliency maps for chosen samples.
    Visualize(VisArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    ids: usize,
    #[arg(long, default_value_t = 16)]
    per_id: usize,
    #[arg(long, default_value_t = 2)]
    cameras: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Options shared by every command that reads a run configuration.
#[derive(Args, Default)]
struct ConfigArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, as `key=value`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ablation preset A..F.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    f: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    w_bcc: Option<f64>,
    #[arg(long)]
    w_ocfr: Option<f64>,
    /// class_only | averaged_patches
    #[arg(long)]
    hma_mode: Option<String>,
    /// additive | zeroing
    #[arg(long)]
    masking: Option<String>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// euclidean | cosine
    #[arg(long)]
    metric: Option<String>,
    /// Keep same-identity same-camera gallery entries.
    #[arg(long)]
    no_camera_filter: bool,
}

#[derive(Args)]
struct VisArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    run: PathBuf,
    /// Manifest sample paths, e.g. `id008_s000`; may repeat.
    #[arg(long = "sample", required = true)]
    samples: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

const CONFIG_FILE: &str = "config.txt";
const CHECKPOINT_FILE: &str = "checkpoint.edtr";
const METRICS_FILE: &str = "metrics.jsonl";
const NAN_DUMP_FILE: &str = "nan_dump.txt";

/// Error plus the process exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) | Error::Numeric(_) => 3,
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Default, then `base` file, then config file, then environment, then flags.
fn build_config(base: Option<&Path>, common: &ConfigArgs, flags: &[(&str, Option<String>)]) -> CliResult<RunConfig> {
    let mut cfg = match base {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_env()?;
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    if let Some(m) = &common.manifest {
        cfg.manifest = m.clone();
    }
    Ok(cfg)
}

fn load_split(manifest: &Manifest, split: Split) -> CliResult<Vec<Sample>> {
    let records = manifest.split(split);
    if records.is_empty() {
        return Err(usage(format!("manifest has no {split:?} records")));
    }
    records
        .into_iter()
        .map(|r| manifest.load_record(r).map_err(Failure::from))
        .collect()
}

fn gen_data(args: GenArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        seed: args.seed,
        n_ids: args.ids,
        samples_per_id: args.per_id,
        n_cameras: args.cameras,
        height: args.height,
        width: args.width,
    };
    let manifest = generate_dataset(&cfg, &args.out)?;
    let count = |s| manifest.split(s).len();
    println!(
        "wrote {} records to {} (train {}, query {}, gallery {})",
        manifest.records.len(),
        args.out.join("manifest.jsonl").display(),
        count(Split::Train),
        count(Split::Query),
        count(Split::Gallery)
    );
    Ok(())
}

fn train(args: TrainArgs) -> CliResult<()> {
    let flags = [
        ("preset", args.preset.clone()),
        ("total_iters", args.iters.map(|v| v.to_string())),
        ("warmup_iters", args.warmup.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("lr_base", args.lr.map(|v| v.to_string())),
        ("s", args.s.map(|v| v.to_string())),
        ("f", args.f.map(|v| v.to_string())),
        ("alpha", args.alpha.map(|v| v.to_string())),
        ("w_bcc", args.w_bcc.map(|v| v.to_string())),
        ("w_ocfr", args.w_ocfr.map(|v| v.to_string())),
        ("hma_mode", args.hma_mode.clone()),
        ("masking", args.masking.clone()),
        ("out_dir", args.out.as_ref().map(|p| p.display().to_string())),
    ];
    let cfg = build_config(None, &args.common, &flags)?;
    cfg.train.validate()?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| usage(format!("{}: {e}", out.display())))?;
    cfg.save(&out.join(CONFIG_FILE))?;

    let manifest = Manifest::load(&cfg.manifest)?;
    let set = TrainSet::new(load_split(&manifest, Split::Train)?)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut trainer = if args.resume {
        Trainer::load(&ckpt, cfg.train.clone())?
    } else {
        Trainer::new(cfg.train.clone(), set.num_classes())?
    };
    let metrics_path = out.join(METRICS_FILE);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(args.resume)
        .write(true)
        .truncate(!args.resume)
        .open(&metrics_path)
        .map_err(|e| usage(format!("{}: {e}", metrics_path.display())))?;
    let eval_sets = if cfg.train.eval_every > 0 {
        Some((load_split(&manifest, Split::Query)?, load_split(&manifest, Split::Gallery)?))
    } else {
        None
    };
    let opts = eval_options(&cfg);
    let result = trainer.train(&set, |t, m: &IterMetrics| {
        let line = serde_json::to_string(m).expect("metrics serialise");
        writeln!(log, "{line}").map_err(|e| Error::Contract(format!("metrics log: {e}")))?;
        if let Some((q, g)) = &eval_sets {
            if t.iter % cfg.train.eval_every == 0 {
                let qr: Vec<&Sample> = q.iter().collect();
                let gr: Vec<&Sample> = g.iter().collect();
                let r = evaluate(&t.model, &qr, &gr, &opts)?;
                eprintln!("iter {}: mAP {:.4} rank-1 {:.4}", t.iter, r.map, r.rank1);
            }
        }
        Ok(())
    });
    if let Err(e) = result {
        if matches!(e, Error::NonFinite(_) | Error::Numeric(_)) {
            let dump = out.join(NAN_DUMP_FILE);
            let _ = std::fs::write(&dump, format!("{e}\n"));
            return Err(Failure {
                code: 3,
                msg: format!("{e}; diagnostic dump at {}", dump.display()),
            });
        }
        return Err(e.into());
    }
    trainer.save(&ckpt)?;
    println!("trained {} iterations; checkpoint {}", trainer.iter, ckpt.display());
    Ok(())
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        metric: cfg.metric,
        camera_filter: cfg.camera_filter,
        batch: cfg.eval_batch,
    }
}

fn load_run(run: &Path, common: &ConfigArgs, flags: &[(&str, Option<String>)]) -> CliResult<(RunConfig, Trainer)> {
    let cfg = build_config(Some(&run.join(CONFIG_FILE)), common, flags)?;
    let trainer = Trainer::load(&run.join(CHECKPOINT_FILE), cfg.train.clone())?;
    Ok((cfg, trainer))
}

fn eval(args: EvalArgs) -> CliResult<()> {
    let flags = [
        ("metric", args.metric.clone()),
        ("camera_filter", args.no_camera_filter.then(|| "false".to_string())),
    ];
    let (cfg, trainer) = load_run(&args.run, &args.common, &flags)?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let query = load_split(&manifest, Split::Query)?;
    let gallery = load_split(&manifest, Split::Gallery)?;
    let qr: Vec<&Sample> = query.iter().collect();
    let gr: Vec<&Sample> = gallery.iter().collect();
    let mut report = evaluate(&trainer.model, &qr, &gr, &eval_options(&cfg))?;
    report.epoch_mask_iou = trainer.epoch_mask_iou.clone();
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    let path = args.run.join("eval.json");
    std::fs::write(&path, format!("{json}\n")).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    println!("{json}");
    Ok(())
}

fn visualize(args: VisArgs) -> CliResult<()> {
    let (cfg, trainer) = load_run(&args.run, &args.common, &[])?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let mut chosen = Vec::with_capacity(args.samples.len());
    for name in &args.samples {
        let rec = manifest
            .records
            .iter()
            .find(|r| &r.path == name)
            .ok_or_else(|| usage(format!("unknown sample id {name:?}")))?;
        chosen.push((name.clone(), manifest.load_record(rec)?));
    }
    let refs: Vec<&Sample> = chosen.iter().map(|(_, s)| s).collect();
    let selections = trainer
        .model
        .select(&editor_core::train::inputs_of(&refs), cfg.eval_batch)?;
    let mut dump = String::new();
    for ((name, sample), sel) in chosen.iter().zip(&selections) {
        let files = write_panels(&args.out, name, sample, sel, cfg.train.patch, cfg.train.dhwt_levels)?;
        println!("{name}: {} files", files.len());
        dump.push_str(&sel.dump_line(name));
        dump.push('\n');
    }
    let path = args.out.join("selections.txt");
    std::fs::write(&path, dump).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Visualize(a) => visualize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
