//! Command-line entry point for the wearable-signal pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use normwear::bench::{self, TrackingAlloc};
use normwear::config::Config;
use normwear::error::{Error, Result};
use normwear::eval::{self, FeatureSource, ProbeConfig};
use normwear::model::{encode_segment, EncoderConfig, FusionMode, Model};
use normwear::msitf::{
    align_train, column_indices, load_stack, save_stack, zero_shot, AlignConfig, AlignSample,
    MsitfConfig, MsitfModel,
};
use normwear::pretrain::{
    load_backbone, prepare_inputs, save_checkpoint, AdamW, LossScope, MaskStrategy, TrainConfig,
};
use normwear::rng::Rng;
use normwear::scalogram::{save_stacks, tokenize};
use normwear::signal::{
    canonicalize_dataset, load_csv, load_segment_csv, mixup_augment, save_csv, synth_generate,
    Label, SynthClass, SynthSpec,
};
use normwear::text::{load_templates, ReferenceEmbedder, TextEmbedder};

// Allocation tracking backs the `bench --memory` high-water readings.
#[global_allocator]
static GLOBAL: TrackingAlloc = TrackingAlloc;

#[derive(Parser)]
#[command(
    name = "normwear",
    about = "Wearable-signal foundation-model pipeline: preprocessing, CWT tokenization, masked-autoencoder pretraining, semantic alignment, probing, and complexity benchmarks",
    version
)]
struct Cli {
    /// Base seed for every randomized stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value configuration file (CLI flags take precedence).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resample, detrend, smooth, and pad segments to canonical form.
    Preprocess(PreprocessArgs),
    /// Chunk-swap mixup augmentation of a dataset.
    Augment(AugmentArgs),
    /// Write CWT scalogram stacks for every segment.
    Tokenize(TokenizeArgs),
    /// Generate a synthetic labeled dataset of banded sinusoids.
    Synth(SynthArgs),
    /// Masked-autoencoder pretraining.
    Pretrain(PretrainArgs),
    /// Extract frozen features for every segment.
    Embed(EmbedArgs),
    /// Train the temporal-fusion alignment head on frozen features.
    Align(AlignArgs),
    /// Zero-shot label retrieval for one segment.
    Zeroshot(ZeroshotArgs),
    /// Linear probing with the unified protocol.
    Probe(ProbeArgs),
    /// Fusion and temporal-fusion complexity benchmarks.
    Bench(BenchArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of augmented segments to draw.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct TokenizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    subjects: Option<usize>,
    /// Signal-to-noise ratio in dB; omit for noise-free.
    #[arg(long)]
    snr_db: Option<f64>,
    /// Class bands, e.g. "low:1.5-2.5;mid:4.5-5.5;high:7.5-8.5".
    #[arg(long)]
    classes: Option<String>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model preset: desk (default), tiny, or paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// structured | time_only | scale_only | unstructured
    #[arg(long)]
    mask: Option<String>,
    /// all | masked
    #[arg(long)]
    loss_scope: Option<String>,
    #[arg(long)]
    save_every: Option<usize>,
    /// Resume from an existing checkpoint (with optimizer state).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Loss curve CSV (step,loss,lr).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the aligned temporal-fusion vector from this stack checkpoint
    /// instead of concatenated [CLS] features.
    #[arg(long)]
    stack: Option<PathBuf>,
    /// Query sentence for the temporal-fusion features.
    #[arg(long)]
    query: Option<String>,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    templates: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Task block to use from the template file (default: first).
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    refine_epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Skip the refine phase (contrastive only).
    #[arg(long)]
    no_refine: bool,
}

#[derive(Args)]
struct ZeroshotArgs {
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    query: String,
    /// Candidate label sentences, one per line.
    #[arg(long)]
    labels: PathBuf,
    /// Segment CSV file.
    #[arg(long)]
    input: PathBuf,
    /// Retrieve with a freshly initialized (untrained) fusion head.
    #[arg(long)]
    before_bind: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Partial-shot fraction of the training split.
    #[arg(long)]
    partial: Option<f64>,
    /// Subject-stratified k-fold instead of a single split.
    #[arg(long)]
    kfold: Option<usize>,
    #[arg(long)]
    l2: Option<f64>,
    /// Probe the aligned temporal-fusion vector from this stack.
    #[arg(long)]
    stack: Option<PathBuf>,
    #[arg(long)]
    query: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    out: PathBuf,
    /// Run the fusion-scheme sweeps.
    #[arg(long)]
    fusion: bool,
    /// Run the temporal-fusion sweeps.
    #[arg(long)]
    msitf: bool,
    /// Include allocation high-water sweeps.
    #[arg(long)]
    memory: bool,
    #[arg(long)]
    reps: Option<usize>,
    /// Embedding width used by the kernels.
    #[arg(long)]
    dim: Option<usize>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print and succeed; anything else is usage.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let seed = cfg.resolve(cli.seed, "seed", 0u64)?;
    match cli.command {
        Command::Preprocess(a) => preprocess(&a),
        Command::Augment(a) => augment(&a, &cfg, seed),
        Command::Tokenize(a) => tokenize_cmd(&a),
        Command::Synth(a) => synth(&a, &cfg, seed),
        Command::Pretrain(a) => pretrain_cmd(&a, &cfg, seed),
        Command::Embed(a) => embed(&a),
        Command::Align(a) => align(&a, &cfg, seed),
        Command::Zeroshot(a) => zeroshot(&a, seed),
        Command::Probe(a) => probe_cmd(&a, &cfg, seed),
        Command::Bench(a) => bench_cmd(&a, &cfg),
    }
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let ds = load_csv(&a.input)?;
    let canon = canonicalize_dataset(&ds)?;
    let manifest = save_csv(&canon, &a.out)?;
    println!(
        "preprocessed {} segments -> {}",
        canon.segments.len(),
        manifest.display()
    );
    Ok(())
}

fn augment(a: &AugmentArgs, cfg: &Config, seed: u64) -> Result<()> {
    let ds = load_csv(&a.input)?;
    let n = cfg.resolve(a.n, "n", ds.segments.len())?;
    let mut rng = Rng::derive(seed, &[0x6d6978]);
    let out = mixup_augment(&ds, n, &mut rng)?;
    let manifest = save_csv(&out, &a.out)?;
    println!("augmented {n} segments -> {}", manifest.display());
    Ok(())
}

fn tokenize_cmd(a: &TokenizeArgs) -> Result<()> {
    let ds = load_csv(&a.input)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    for (i, seg) in ds.segments.iter().enumerate() {
        let stacks = tokenize(seg)?;
        save_stacks(&stacks, &a.out.join(format!("seg_{i:05}.nwsc")))?;
    }
    println!(
        "tokenized {} segments -> {}",
        ds.segments.len(),
        a.out.display()
    );
    Ok(())
}

fn parse_classes(spec: &str) -> Result<Vec<SynthClass>> {
    spec.split(';')
        .map(|part| {
            let (name, band) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad class spec '{part}'")))?;
            let (lo, hi) = band
                .split_once('-')
                .ok_or_else(|| Error::Config(format!("bad band '{band}'")))?;
            Ok(SynthClass {
                name: name.trim().to_string(),
                band_hz: (
                    lo.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad band low '{lo}'")))?,
                    hi.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad band high '{hi}'")))?,
                ),
            })
        })
        .collect()
}

fn synth(a: &SynthArgs, cfg: &Config, seed: u64) -> Result<()> {
    let mut spec = SynthSpec {
        channels: cfg.resolve(a.channels, "channels", 1)?,
        subjects: cfg.resolve(a.subjects, "subjects", 10)?,
        ..SynthSpec::default()
    };
    spec.snr_db = match a.snr_db {
        Some(v) => Some(v),
        None => cfg.get("snr_db")?.or(spec.snr_db),
    };
    let class_spec = a
        .classes
        .clone()
        .or_else(|| cfg.raw("classes").map(str::to_string));
    if let Some(s) = class_spec {
        spec.classes = parse_classes(&s)?;
    }
    let n = cfg.resolve(a.n, "n", 100)?;
    let mut rng = Rng::derive(seed, &[0x73796e7468]);
    let ds = synth_generate(&spec, n, &mut rng)?;
    let manifest = save_csv(&ds, &a.out)?;
    println!("generated {n} segments -> {}", manifest.display());
    Ok(())
}

fn encoder_config(
    preset: Option<&str>,
    fusion: Option<&str>,
    cfg: &Config,
) -> Result<EncoderConfig> {
    let preset = match preset {
        Some(p) => p.to_string(),
        None => cfg.raw("preset").unwrap_or("desk").to_string(),
    };
    let mut enc = EncoderConfig::preset(&preset)?;
    let fusion = match fusion {
        Some(f) => Some(f.to_string()),
        None => cfg.raw("fusion").map(str::to_string),
    };
    if let Some(f) = fusion {
        enc.fusion = FusionMode::parse(&f)?;
    }
    Ok(enc)
}

fn pretrain_cmd(a: &PretrainArgs, cfg: &Config, seed: u64) -> Result<()> {
    let ds = load_csv(&a.data)?;
    let canon = canonicalize_dataset(&ds)?;
    let (mut model, opt_state, start_step) = match &a.resume {
        Some(path) => load_backbone(path)?,
        None => {
            let enc = encoder_config(a.preset.as_deref(), a.fusion.as_deref(), cfg)?;
            (Model::init(enc, seed)?, None, 0)
        }
    };
    let inputs = prepare_inputs(&canon, &model.cfg)?;
    let mask = match a.mask.as_deref().or(cfg.raw("mask")) {
        Some(m) => MaskStrategy::parse(m)?,
        None => MaskStrategy::default(),
    };
    let loss_scope = match a.loss_scope.as_deref().or(cfg.raw("loss_scope")) {
        None | Some("all") => LossScope::All,
        Some("masked") => LossScope::Masked,
        Some(other) => return Err(Error::Config(format!("unknown loss scope '{other}'"))),
    };
    let train_cfg = TrainConfig {
        steps: cfg.resolve(a.steps, "steps", 500)?,
        batch: cfg.resolve(a.batch, "batch", 16)?,
        lr: cfg.resolve(a.lr, "lr", 1e-3)?,
        mask,
        loss_scope,
        seed,
        save_every: cfg.resolve(a.save_every, "save_every", 0)?,
        ..TrainConfig::default()
    };
    let mut opt = opt_state.unwrap_or_else(|| AdamW::new(&model.params));
    let outcome = normwear::pretrain::train(
        &mut model,
        &mut opt,
        &inputs,
        &train_cfg,
        start_step,
        Some(&a.out),
    )?;
    save_checkpoint(&model, Some(&opt), outcome.steps_run, &a.out)?;
    if let Some(log) = &a.log {
        let mut text = String::from("step,loss,lr\n");
        for r in &outcome.curve {
            text.push_str(&format!("{},{:.8e},{:.8e}\n", r.step, r.loss, r.lr));
        }
        std::fs::write(log, text).map_err(|e| Error::io(log.display().to_string(), e))?;
    }
    let last = outcome.curve.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "pretrained {} steps (final loss {last:.6}) -> {}",
        outcome.steps_run,
        a.out.display()
    );
    Ok(())
}

fn embed(a: &EmbedArgs) -> Result<()> {
    let ds = load_csv(&a.data)?;
    let canon = canonicalize_dataset(&ds)?;
    let embedder = ReferenceEmbedder::default();
    let (model, source) = match &a.stack {
        Some(stack_path) => {
            let (model, msitf) = load_stack(stack_path)?;
            let query_text = a
                .query
                .clone()
                .ok_or_else(|| Error::Config("--stack features need --query".into()))?;
            let query = embedder.embed(&query_text)?.vector;
            (model, Some((msitf, query)))
        }
        None => {
            let backbone = a
                .backbone
                .as_ref()
                .ok_or_else(|| Error::Config("embed needs --backbone or --stack".into()))?;
            (load_backbone(backbone)?.0, None)
        }
    };
    let features = match &source {
        Some((msitf, query)) => eval::extract_features(
            &model,
            &canon,
            &FeatureSource::Msitf {
                msitf,
                query: query.clone(),
            },
        )?,
        None => eval::extract_features(&model, &canon, &FeatureSource::ClsConcat)?,
    };
    let mut text = format!("# dim={}\n", features.x.cols);
    for i in 0..features.x.rows {
        text.push_str(&features.subjects[i]);
        text.push(',');
        text.push_str(&features.labels[i]);
        for v in features.x.row(i) {
            text.push_str(&format!(",{:.9e}", *v as f32));
        }
        text.push('\n');
    }
    std::fs::write(&a.out, text).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    println!(
        "embedded {} segments ({} features) -> {}",
        features.x.rows,
        features.x.cols,
        a.out.display()
    );
    Ok(())
}

fn align(a: &AlignArgs, cfg: &Config, seed: u64) -> Result<()> {
    let (model, _, _) = load_backbone(&a.backbone)?;
    let ds = load_csv(&a.data)?;
    let canon = canonicalize_dataset(&ds)?;
    let tasks = load_templates(&a.templates)?;
    let task = match &a.task {
        Some(name) => tasks
            .iter()
            .find(|t| &t.name == name)
            .ok_or_else(|| Error::Config(format!("no task '{name}' in template file")))?,
        None => &tasks[0],
    };
    let embedder = ReferenceEmbedder::default();
    // Frozen-backbone features, computed once.
    let mut samples = Vec::with_capacity(canon.segments.len());
    for seg in &canon.segments {
        let label = match &seg.label {
            Some(Label::Class(c)) => c.clone(),
            _ => {
                return Err(Error::Config(
                    "alignment needs class-labeled segments".into(),
                ))
            }
        };
        let stacks = tokenize(seg)?;
        let state = encode_segment(&model, &stacks)?;
        samples.push(AlignSample::from_state(
            &state,
            model.cfg.grid_rows(),
            model.cfg.grid_cols(),
            label,
        ));
    }
    let mut msitf = MsitfModel::init(
        MsitfConfig::new(model.cfg.hidden, embedder.dim(), model.cfg.grid_cols()),
        seed,
    );
    let align_cfg = AlignConfig {
        epochs: cfg.resolve(a.epochs, "epochs", 40)?,
        refine_epochs: cfg.resolve(a.refine_epochs, "refine_epochs", 40)?,
        batch: cfg.resolve(a.batch, "align_batch", 32)?,
        lr: cfg.resolve(a.lr, "align_lr", 1e-3)?,
        seed,
        no_refine: a.no_refine,
        ..AlignConfig::default()
    };
    let curve = align_train(&mut msitf, &samples, task, &embedder, &align_cfg)?;
    save_stack(&model, &msitf, &a.out)?;
    for (phase, epoch, loss) in &curve {
        println!("{phase},{epoch},{loss:.6}");
    }
    println!(
        "aligned on {} samples -> {}",
        samples.len(),
        a.out.display()
    );
    Ok(())
}

fn zeroshot(a: &ZeroshotArgs, seed: u64) -> Result<()> {
    let (model, msitf) = load_stack(&a.stack)?;
    let msitf = if a.before_bind {
        MsitfModel::init(msitf.cfg.clone(), seed)
    } else {
        msitf
    };
    let embedder = ReferenceEmbedder::default();
    let query = embedder.embed(&a.query)?.vector;
    let labels_text = std::fs::read_to_string(&a.labels)
        .map_err(|e| Error::io(a.labels.display().to_string(), e))?;
    let candidates: Vec<String> = labels_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let cand_vecs = candidates
        .iter()
        .map(|c| Ok(embedder.embed(c)?.vector))
        .collect::<Result<Vec<_>>>()?;
    let seg = load_segment_csv(&a.input)?;
    let canon = normwear::signal::canonicalize(&seg)?;
    let stacks = tokenize(&canon)?;
    let state = encode_segment(&model, &stacks)?;
    let h = Arc::new(state.patch_matrix());
    let cols = column_indices(
        state.channels(),
        model.cfg.grid_rows(),
        model.cfg.grid_cols(),
    );
    let (best, scores) = zero_shot(&msitf, &h, &cols, &query, &cand_vecs)?;
    for (c, s) in candidates.iter().zip(&scores) {
        println!("score,{s:.6},{c}");
    }
    println!("label,{}", candidates[best]);
    Ok(())
}

fn probe_cmd(a: &ProbeArgs, cfg: &Config, seed: u64) -> Result<()> {
    let ds = load_csv(&a.data)?;
    let canon = canonicalize_dataset(&ds)?;
    let embedder = ReferenceEmbedder::default();
    let (model, msitf_src) = match &a.stack {
        Some(path) => {
            let (model, msitf) = load_stack(path)?;
            let q = a
                .query
                .clone()
                .ok_or_else(|| Error::Config("--stack probing needs --query".into()))?;
            let query = embedder.embed(&q)?.vector;
            (model, Some((msitf, query)))
        }
        None => {
            let backbone = a
                .backbone
                .as_ref()
                .ok_or_else(|| Error::Config("probe needs --backbone or --stack".into()))?;
            (load_backbone(backbone)?.0, None)
        }
    };
    let features = match &msitf_src {
        Some((msitf, query)) => eval::extract_features(
            &model,
            &canon,
            &FeatureSource::Msitf {
                msitf,
                query: query.clone(),
            },
        )?,
        None => eval::extract_features(&model, &canon, &FeatureSource::ClsConcat)?,
    };
    let probe_cfg = ProbeConfig {
        partial: match a.partial {
            Some(f) => Some(f),
            None => cfg.get("partial")?,
        },
        l2: cfg.resolve(a.l2, "l2", 1.0)?,
        seed,
        ..ProbeConfig::default()
    };
    let report = match cfg.resolve(a.kfold, "kfold", 0)? {
        0 => eval::probe(&features, &probe_cfg)?,
        k => eval::probe_kfold(&features, k, &probe_cfg)?,
    };
    let json = serde_json::to_string_pretty(&report.to_flat_json()).expect("report serializes");
    std::fs::write(&a.report, &json).map_err(|e| Error::io(a.report.display().to_string(), e))?;
    println!("{json}");
    Ok(())
}

fn bench_cmd(a: &BenchArgs, cfg: &Config) -> Result<()> {
    let reps = cfg.resolve(a.reps, "reps", 7)?;
    let dim = cfg.resolve(a.dim, "dim", 64)?;
    let run_all = !a.fusion && !a.msitf;
    let mut results = Vec::new();
    if a.fusion || run_all {
        results.extend(bench::bench_fusion(dim, reps)?);
    }
    if a.msitf || run_all {
        results.extend(bench::bench_msitf(dim, reps)?);
    }
    if a.memory {
        results.extend(bench::bench_msitf_memory(dim)?);
    }
    let mut text = String::from("scheme,axis,value,median_ns\n");
    for r in &results {
        for p in &r.points {
            text.push_str(&format!(
                "{},{},{},{}\n",
                r.scheme, r.axis, p.x, p.median_ns
            ));
        }
    }
    text.push_str("summary,scheme,axis,exponent,r2,flagged\n");
    for r in &results {
        text.push_str(&format!(
            "summary,{},{},{:.4},{:.4},{}\n",
            r.scheme, r.axis, r.exponent, r.r2, r.flagged
        ));
    }
    std::fs::write(&a.out, &text).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    print!("{text}");
    Ok(())
}
