use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vlseg::alignment::export_embeddings;
use vlseg::harness::ablation::{grid_cells, run_ablation_suite, Grid};
use vlseg::harness::checkpoint::{check_manifest, load_checkpoint, save_checkpoint};
use vlseg::harness::pipeline::{stage_embeddings, Batch, Model};
use vlseg::harness::train::{evaluate_scenes, load_configs, predict_scenes, TrainState, EPOCH_LOG_HEADER};
use vlseg::harness::TrainConfig;
use vlseg::metrics::{evaluate_probabilities, pr_auc, pr_curve, pr_curve_csv};
use vlseg::raster::write_mask_png;
use vlseg::synthdata::{generate_dataset, inject_typo, load_dataset, save_dataset, split_dataset, Scene, Vocab};
use vlseg::{Error, ModelConfig};

#[derive(Parser, Debug)]
#[command(name = "vlseg", version, about = "Referring image segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write report files.
    Eval(EvalArgs),
    /// Run an ablation grid over several seeds.
    Ablate(AblateArgs),
    /// Dump per-stage alignment embeddings as TSV.
    ExportEmbeddings(ExportArgs),
    /// Write predicted masks as 1-bit PNGs.
    RenderMasks(RenderArgs),
    /// Write the pixel-level PR curve as CSV.
    PrCurve(PrCurveArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Model flags; each overrides the matching config key.
#[derive(Args, Debug, Default)]
struct ModelFlags {
    #[arg(long)]
    image_size: Option<String>,
    #[arg(long)]
    patch_size: Option<String>,
    #[arg(long)]
    num_stages: Option<String>,
    #[arg(long)]
    vision_depths: Option<String>,
    #[arg(long)]
    vision_channels: Option<String>,
    #[arg(long)]
    vision_heads: Option<String>,
    #[arg(long)]
    lang_depths: Option<String>,
    #[arg(long)]
    lang_dim: Option<String>,
    #[arg(long)]
    lang_heads: Option<String>,
    #[arg(long)]
    vocab_size: Option<String>,
    #[arg(long)]
    max_tokens: Option<String>,
    #[arg(long)]
    align_dim: Option<String>,
    #[arg(long)]
    lambda_align: Option<String>,
    #[arg(long)]
    fusion_stages: Option<String>,
    #[arg(long)]
    align_stages: Option<String>,
    #[arg(long)]
    fusion_direction: Option<String>,
    #[arg(long)]
    align_mode: Option<String>,
    #[arg(long)]
    align_norm: Option<String>,
    #[arg(long)]
    decoder_channels: Option<String>,
    #[arg(long)]
    ffn_ratio: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

impl ModelFlags {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("image_size", &self.image_size),
            ("patch_size", &self.patch_size),
            ("num_stages", &self.num_stages),
            ("vision_depths", &self.vision_depths),
            ("vision_channels", &self.vision_channels),
            ("vision_heads", &self.vision_heads),
            ("lang_depths", &self.lang_depths),
            ("lang_dim", &self.lang_dim),
            ("lang_heads", &self.lang_heads),
            ("vocab_size", &self.vocab_size),
            ("max_tokens", &self.max_tokens),
            ("align_dim", &self.align_dim),
            ("lambda_align", &self.lambda_align),
            ("fusion_stages", &self.fusion_stages),
            ("align_stages", &self.align_stages),
            ("fusion_direction", &self.fusion_direction),
            ("align_mode", &self.align_mode),
            ("align_norm", &self.align_norm),
            ("decoder_channels", &self.decoder_channels),
            ("ffn_ratio", &self.ffn_ratio),
            ("seed", &self.seed),
        ]
    }
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    base_lr: Option<String>,
    #[arg(long)]
    lr_power: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    shuffle_seed: Option<String>,
}

impl TrainFlags {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("base_lr", &self.base_lr),
            ("lr_power", &self.lr_power),
            ("weight_decay", &self.weight_decay),
            ("shuffle_seed", &self.shuffle_seed),
        ]
    }
}

/// Dataset location and the deterministic train/val split.
#[derive(Args, Debug)]
struct DataFlags {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` file with model and training keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Output directory for the checkpoint, epoch log and reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SplitChoice {
    Train,
    Val,
    All,
}

#[derive(Args, Debug)]
struct EvalTarget {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    /// Which part of the dataset to score.
    #[arg(long, value_enum, default_value_t = SplitChoice::Val)]
    split: SplitChoice,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    target: EvalTarget,
    /// Replace one word per expression with a same-kind word (robustness probe).
    #[arg(long)]
    typo_seed: Option<u64>,
    /// Directory for report.txt, report.kv and pr_curve.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// main | stages | direction | loss | all
    #[arg(long, default_value = "direction")]
    grid: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    target: EvalTarget,
    /// Export at most this many samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    target: EvalTarget,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PrCurveArgs {
    #[command(flatten)]
    target: EvalTarget,
    #[arg(long, default_value_t = 101)]
    thresholds: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Runtime failures map to exit code 2; usage problems to 1.
struct Failure {
    usage: bool,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let usage = matches!(
            err.downcast_ref::<Error>(),
            Some(Error::Usage(_) | Error::Config(_) | Error::Parse(_))
        );
        Failure { usage, err }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::ExportEmbeddings(a) => export_cmd(a),
        Command::RenderMasks(a) => render_cmd(a),
        Command::PrCurve(a) => pr_curve_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(if f.usage { 1 } else { 2 })
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn gen_data(a: GenDataArgs) -> CmdResult {
    let scenes = generate_dataset(a.count, a.seed, a.image_size)?;
    save_dataset(&a.out, &scenes, &Vocab::standard())?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn resolve_configs(config: Option<&Path>, model: &ModelFlags, train: &TrainFlags) -> Result<(ModelConfig, TrainConfig), Failure> {
    let (mut m, mut t) = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            load_configs(&text)?
        }
        None => (ModelConfig::default(), TrainConfig::default()),
    };
    for (k, v) in model.pairs() {
        if let Some(v) = v {
            m.set(k, v)?;
        }
    }
    for (k, v) in train.pairs() {
        if let Some(v) = v {
            t.set(k, v)?;
        }
    }
    m.validate()?;
    t.validate()?;
    Ok((m, t))
}

fn load_split(d: &DataFlags) -> Result<(Vec<Scene>, Vec<Scene>, Vocab), Failure> {
    let (scenes, vocab) = load_dataset(&d.data).with_context(|| format!("loading dataset {}", d.data.display()))?;
    let split = split_dataset(scenes, d.val_fraction, d.split_seed)?;
    Ok((split.train, split.val, vocab))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let (model_cfg, train_cfg) = resolve_configs(a.config.as_deref(), &a.model, &a.train)?;
    let (train_set, val_set, vocab) = load_split(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_file(&a.out.join("config.kv"), &format!("{}{}", model_cfg.to_kv(), train_cfg.to_kv()))?;

    let model = Model::new(&model_cfg)?;
    let mut state = TrainState::new(&model_cfg, &train_cfg)?;
    let log_path = a.out.join("epoch_log.csv");
    let mut log = BufWriter::new(fs::File::create(&log_path).context("creating epoch log")?);
    writeln!(log, "{EPOCH_LOG_HEADER}").context("writing epoch log")?;
    println!("{EPOCH_LOG_HEADER}");
    for _ in 0..train_cfg.epochs {
        let row = state.run_epoch(&model, &train_set, &vocab)?;
        writeln!(log, "{}", row.csv_row()).context("writing epoch log")?;
        log.flush().context("writing epoch log")?;
        println!("{}", row.csv_row());
    }
    save_checkpoint(&a.out.join("model.ckpt"), &state)?;
    let report = evaluate_scenes(&state.params, &model, &val_set, &vocab, train_cfg.batch_size)?;
    write_file(&a.out.join("val_report.txt"), &report.to_text())?;
    write_file(&a.out.join("val_report.kv"), &report.to_kv())?;
    println!("validation:\n{}", report.to_text());
    Ok(())
}

/// Loads a checkpoint, verifies its manifest and selects the requested scenes.
fn open_target(t: &EvalTarget) -> Result<(TrainState, Model, Vec<Scene>, Vocab), Failure> {
    let state = load_checkpoint(&t.checkpoint).with_context(|| format!("loading {}", t.checkpoint.display()))?;
    check_manifest(&state.model_cfg, &state.params)?;
    let model = Model::new(&state.model_cfg)?;
    let (train, val, vocab) = load_split(&t.data)?;
    let scenes = match t.split {
        SplitChoice::Train => train,
        SplitChoice::Val => val,
        SplitChoice::All => {
            let mut all = train;
            all.extend(val);
            all.sort_by_key(|s| s.id);
            all
        }
    };
    if scenes.iter().any(|s| s.size != state.model_cfg.image_size) {
        return Err(Error::Usage(format!("dataset image size does not match the model's {}", state.model_cfg.image_size)).into());
    }
    Ok((state, model, scenes, vocab))
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let (state, model, mut scenes, vocab) = open_target(&a.target)?;
    if let Some(seed) = a.typo_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut scenes {
            s.expression = inject_typo(&s.expression, &mut rng);
        }
    }
    let probs = predict_scenes(&state.params, &model, &scenes, &vocab, a.target.batch_size)?;
    let gts: Vec<Vec<bool>> = scenes.iter().map(|s| s.gt_mask.clone()).collect();
    let report = evaluate_probabilities(&probs, &gts, 101)?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_file(&out.join("report.txt"), &report.to_text())?;
        write_file(&out.join("report.kv"), &report.to_kv())?;
        write_file(&out.join("pr_curve.csv"), &pr_curve_csv(&report.pr_curve))?;
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> CmdResult {
    let (base, train_cfg) = resolve_configs(a.config.as_deref(), &a.model, &a.train)?;
    let grid: Grid = a.grid.parse()?;
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<u64>().map_err(|_| Error::Parse(format!("bad seed `{s}`"))))
        .collect::<Result<_, _>>()?;
    let (train_set, val_set, vocab) = load_split(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let cells = grid_cells(grid, &base);
    let table = run_ablation_suite(&cells, &train_cfg, &seeds, &train_set, &val_set, &vocab, |c, seed, r| match r {
        Ok(s) => eprintln!("{} / {} seed {seed}: mIoU {:.4} oIoU {:.4}", c.group, c.label, s.miou, s.oiou),
        Err(e) => eprintln!("{} / {} seed {seed}: FAILED {e}", c.group, c.label),
    })?;
    write_file(&a.out.join("ablation.csv"), &table.to_csv())?;
    write_file(&a.out.join("ablation.txt"), &table.to_text())?;
    print!("{}", table.to_text());
    Ok(())
}

fn export_cmd(a: ExportArgs) -> CmdResult {
    let (state, model, scenes, vocab) = open_target(&a.target)?;
    let take = a.limit.unwrap_or(scenes.len()).min(scenes.len());
    let mut w = BufWriter::new(fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let mut samples = Vec::new();
    for chunk in scenes[..take].chunks(a.target.batch_size.max(1)) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let batch = Batch::from_scenes(&refs, &vocab, model.cfg.max_tokens)?;
        let ids: Vec<usize> = chunk.iter().map(|s| s.id).collect();
        samples.extend(stage_embeddings(&state.params, &model, &batch, &ids)?);
    }
    export_embeddings(&mut w, model.cfg.align_dim, &samples).context("writing embeddings")?;
    w.flush().context("writing embeddings")?;
    println!("wrote embeddings of {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn render_cmd(a: RenderArgs) -> CmdResult {
    if !(0.0..1.0).contains(&a.threshold) {
        bail_usage(format!("threshold must lie in [0, 1), got {}", a.threshold))?;
    }
    let (state, model, scenes, vocab) = open_target(&a.target)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let probs = predict_scenes(&state.params, &model, &scenes, &vocab, a.target.batch_size)?;
    for (s, p) in scenes.iter().zip(&probs) {
        let mask: Vec<bool> = p.iter().map(|&v| v > a.threshold).collect();
        write_mask_png(&a.out.join(format!("{:04}.png", s.id)), s.size, &mask)?;
    }
    println!("wrote {} masks to {}", scenes.len(), a.out.display());
    Ok(())
}

fn pr_curve_cmd(a: PrCurveArgs) -> CmdResult {
    let (state, model, scenes, vocab) = open_target(&a.target)?;
    let probs = predict_scenes(&state.params, &model, &scenes, &vocab, a.target.batch_size)?;
    let gts: Vec<Vec<bool>> = scenes.iter().map(|s| s.gt_mask.clone()).collect();
    let curve = pr_curve(&probs, &gts, a.thresholds)?;
    write_file(&a.out, &pr_curve_csv(&curve))?;
    println!(
        "pixel-level PR curve, micro-averaged over {} samples: PR-AUC {:.4} ({} thresholds) -> {}",
        scenes.len(),
        pr_auc(&curve),
        curve.len(),
        a.out.display()
    );
    Ok(())
}

fn bail_usage(msg: String) -> CmdResult {
    Err(Error::Usage(msg).into())
}
