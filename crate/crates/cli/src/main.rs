use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use changeminds::checkpoint::Checkpoint;
use changeminds::data::{
    build_vocabulary, generate_synthetic, load_split, read_image, read_mask, write_levir_mci, SynthSpec,
};
use changeminds::render::{attention_heatmap, class_overlay, error_overlay, mask_image};
use changeminds::training::{evaluate, Evaluation, LossRecord, TrainObserver, Trainer};
use changeminds::{ChangeMindsF32, Error, LossMode, RunConfig};

const RUN_ROOT_ENV: &str = "CHANGEMINDS_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "changeminds", version, about = "Joint change detection and change captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict a change map and caption for one image pair.
    Predict(PredictArgs),
    /// Generate a synthetic dataset in the LEVIR-MCI layout.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Base preset: `tiny` or `default`.
    #[arg(long, default_value = "default")]
    preset: String,
    /// Flat `key = value` config file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root (overrides `data.root`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    loss_mode: Option<LossMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `$CHANGEMINDS_RUN_ROOT/<config hash>-seed<seed>` (root `runs`).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Split used for periodic evaluation; falls back to `train` when absent.
    #[arg(long, default_value = "val")]
    val_split: String,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report directory; defaults to `<checkpoint dir>/eval_<split>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pre-change image.
    #[arg(long)]
    t1: PathBuf,
    /// Post-change image.
    #[arg(long)]
    t2: PathBuf,
    /// Optional ground-truth label image for the error overlay.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write one attention heat map per generated word.
    #[arg(long)]
    heatmaps: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training samples.
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    n_val: usize,
    #[arg(long, default_value_t = 0)]
    n_test: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Maximum change events per sample.
    #[arg(long, default_value_t = 2)]
    max_changes: usize,
    /// Reference sentences per sample.
    #[arg(long, default_value_t = 1)]
    captions: usize,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 1,
        Some(Error::NonFinite { .. } | Error::NonFiniteLoss { .. }) => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn resolve_config(a: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::preset(&a.preset)?;
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load { sample: path.display().to_string(), reason: e.to_string() })?;
        cfg = RunConfig::from_toml_str(&text, &cfg)?;
    }
    let mut sets: Vec<String> = Vec::new();
    if let Some(d) = &a.data {
        sets.push(format!("data.root={:?}", d.display().to_string()));
    }
    if let Some(m) = a.loss_mode {
        sets.push(format!("train.loss_mode={m}"));
    }
    if let Some(e) = a.epochs {
        sets.push(format!("train.epochs={e}"));
    }
    if let Some(s) = a.max_steps {
        sets.push(format!("train.max_steps={s}"));
    }
    if let Some(s) = a.seed {
        sets.push(format!("train.seed={s}"));
    }
    sets.extend(a.overrides.iter().cloned());
    Ok(cfg.with_assignments(sets.iter().map(String::as_str))?)
}

struct Progress {
    every: usize,
}

impl TrainObserver for Progress {
    fn on_step(&mut self, r: &LossRecord) {
        if r.step.is_multiple_of(self.every) {
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
            log::info!(
                "step {:>5}  L_cd {}  L_cc {}  L {:.4}  lr {:.2e}",
                r.step,
                fmt(r.l_cd),
                fmt(r.l_cc),
                r.total,
                r.lr
            );
        }
    }

    fn on_eval(&mut self, epoch: usize, eval: &Evaluation) {
        let fmt = |k: &str| eval.report.get(k).map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"));
        log::info!("epoch {epoch}: mIoU {}  BLEU-4 {}  CIDEr-D {}", fmt("mIoU"), fmt("BLEU-4"), fmt("CIDEr-D"));
    }
}

fn write_report(dir: &Path, eval: &Evaluation) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("metrics.csv"), eval.report.to_csv())?;
    std::fs::write(dir.join("metrics.txt"), eval.report.to_table())?;
    let captions: String = eval.decoded.iter().map(|(id, words)| format!("{id}\t{}\n", words.join(" "))).collect();
    std::fs::write(dir.join("captions.tsv"), captions)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&a)?;
    if cfg.data.root.is_empty() {
        return Err(Error::Config("no dataset given (use --data or data.root)".into()).into());
    }
    let root = PathBuf::from(&cfg.data.root);
    let vocab = build_vocabulary(&root, "train")?;
    let train = load_split(&cfg.data, "train", &vocab)?;
    if let Some(s) = train.iter().find(|s| s.height() != cfg.data.image_size || s.width() != cfg.data.image_size) {
        return Err(Error::Validation(format!(
            "sample `{}` is {}x{}, data.image_size is {}",
            s.sample_id,
            s.height(),
            s.width(),
            cfg.data.image_size
        ))
        .into());
    }
    let val = if root.join(&a.val_split).is_dir() { load_split(&cfg.data, &a.val_split, &vocab)? } else { Vec::new() };

    let run_dir = a.run_dir.clone().unwrap_or_else(|| {
        let base = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        base.join(format!("{}-seed{}", cfg.hash(), cfg.train.seed))
    });
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    for stale in ["loss_log.csv", "eval_log.csv"] {
        let _ = std::fs::remove_file(run_dir.join(stale));
    }
    std::fs::write(run_dir.join("config.toml"), cfg.to_flat_toml())?;
    std::fs::write(run_dir.join("config_hash"), format!("{}\n", cfg.hash()))?;
    vocab.save(&run_dir.join("vocab.json"))?;

    let model = ChangeMindsF32::new(&cfg, vocab.len())?;
    let total = Trainer::<f32>::planned_steps(&cfg.train, train.len());
    log::info!(
        "training {} samples ({} val), {} parameters, {} steps, mode {}",
        train.len(),
        val.len(),
        model.params.num_elements(),
        total,
        cfg.train.loss_mode
    );
    let mut trainer = Trainer::new(model, total);
    let summary = trainer.fit(&train, &val, &vocab, Some(&run_dir), &mut Progress { every: 10 })?;
    if let Some(eval) = &summary.final_eval {
        write_report(&run_dir, eval)?;
        println!("{}", eval.report.to_table());
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    let mut data = ckpt.config.data.clone();
    if let Some(d) = &a.data {
        data.root = d.display().to_string();
    }
    if data.root.is_empty() {
        return Err(Error::Config("no dataset given (use --data)".into()).into());
    }
    let samples = load_split(&data, &a.split, &ckpt.vocab)?;
    let eval = evaluate(&model, &samples, &ckpt.vocab, ckpt.config.train.loss_mode)?;
    let out =
        a.out.unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join(format!("eval_{}", a.split)));
    write_report(&out, &eval)?;
    println!("{}", eval.report.to_table());
    println!("report: {}", out.join("metrics.csv").display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    let (t1, _) = read_image(&a.t1)?;
    let (t2, raw_t2) = read_image(&a.t2)?;
    if t1.shape() != t2.shape() {
        return Err(Error::Shape(format!(
            "image sizes differ: {}x{} vs {}x{}",
            t1.dim(2),
            t1.dim(1),
            t2.dim(2),
            t2.dim(1)
        ))
        .into());
    }
    let (h, w) = (t1.dim(1), t1.dim(2));
    let pred = model.predict(&t1, &t2)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    mask_image(&pred.mask, w, h)?.save(a.out.join("mask.png"))?;
    let overlay = match &a.gt {
        Some(path) => {
            let truth = read_mask(path, &model.config.data)?;
            if truth.len() != h * w {
                bail!(Error::Shape(format!("ground truth size differs from the {w}x{h} image pair")));
            }
            error_overlay(&pred.mask, &truth, w, h)?
        }
        None => class_overlay(&pred.mask, &raw_t2)?,
    };
    overlay.save(a.out.join("overlay.png"))?;

    let words = ckpt.vocab.decode(&pred.caption.ids);
    std::fs::write(a.out.join("caption.txt"), format!("{}\n", words.join(" ")))?;
    if a.heatmaps {
        let dir = a.out.join("attention");
        std::fs::create_dir_all(&dir)?;
        let (gh, gw) = pred.attention_grid;
        for (i, (&id, attn)) in pred.caption.ids[1..].iter().zip(&pred.caption.attention).enumerate() {
            let word = ckpt.vocab.token(id).unwrap_or("unk").trim_matches(|c| c == '<' || c == '>');
            attention_heatmap(attn, gw, gh, w, h)?.save(dir.join(format!("{i:02}_{word}.png")))?;
        }
    }
    println!("{}", words.join(" "));
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    if a.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()).into());
    }
    let spec = |split: &str, n: usize, offset: u64| SynthSpec {
        image_size: a.size,
        num_samples: n,
        changes: (0, a.max_changes),
        captions_per_sample: a.captions,
        seed: a.seed.wrapping_add(offset),
        split: split.to_string(),
        ..SynthSpec::default()
    };
    let mut splits = vec![("train", generate_synthetic(&spec("train", a.n, 0))?)];
    if a.n_val > 0 {
        splits.push(("val", generate_synthetic(&spec("val", a.n_val, 1_000_003))?));
    }
    if a.n_test > 0 {
        splits.push(("test", generate_synthetic(&spec("test", a.n_test, 2_000_006))?));
    }
    let refs: Vec<(&str, &[_])> = splits.iter().map(|(s, v)| (*s, v.as_slice())).collect();
    write_levir_mci(&a.out, &refs, a.force)?;
    let counts: Vec<String> = splits.iter().map(|(s, v)| format!("{s} {}", v.len())).collect();
    println!("wrote {} ({})", a.out.display(), counts.join(", "));
    Ok(())
}
