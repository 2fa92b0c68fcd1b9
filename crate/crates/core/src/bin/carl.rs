use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use carl_core::datagen::generate_corpus;
use carl_core::eval::{
    fit_linear_probe, knn_predict, labelled_patches, miou, overall_accuracy, write_metric_report, ConfusionMatrix, FeatureLayer,
};
use carl_core::io::{Checkpoint, Corpus, SpectralImage, Split};
use carl_core::model::{flop_estimate, CarlModel};
use carl_core::run::{load_model, sha256_file, ProbeMode, RunConfig, RunDir};
use carl_core::ssl::{spectral_rep_std, SslState};
use carl_core::train::{predict_pixels, TrainState};
use carl_core::{CarlError, Result};

#[derive(Parser)]
#[command(name = "carl", version, about = "Camera-agnostic spectral encoder: data, training, pre-training and probes")]
struct Cli {
    /// Worker threads for data rendering and probes (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the seed of the config document.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy corpus with camera variants and manifests.
    GenData(GenDataArgs),
    /// Supervised segmentation training.
    Train(TrainArgs),
    /// Self-supervised pre-training.
    Pretrain(TrainArgs),
    /// Frozen-feature kNN or linear probe.
    Probe(ProbeArgs),
    /// Analytic multiply-accumulate counts per channel count.
    Flops(FlopsArgs),
    /// Segmentation metrics of a trained checkpoint.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    variants: Option<usize>,
    /// Scene height and width in pixels.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest of the corpus; the train split is used.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for logs, snapshot and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by the same command.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many total steps instead of the configured count.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ProbeMode>,
    #[arg(long)]
    layer: Option<FeatureLayer>,
    #[arg(long)]
    k: Option<usize>,
    /// Split the probe is fitted on.
    #[arg(long, default_value = "train")]
    fit_split: Split,
    /// Split the probe is scored on.
    #[arg(long, default_value = "test")]
    eval_split: Split,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated channel counts.
    #[arg(long, value_delimiter = ',', default_value = "3,12,32,116")]
    channels: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Also report polynomial fits of the spectral attention terms.
    #[arg(long)]
    fit: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => gen_data(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Pretrain(a) => pretrain(a, seed),
        Command::Probe(a) => probe(a, seed),
        Command::Flops(a) => flops(a),
        Command::Eval(a) => eval(a),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn manifest_inputs(corpus: &Corpus, manifest: &Path) -> Vec<PathBuf> {
    std::iter::once(manifest.to_path_buf())
        .chain(corpus.entries.iter().map(|e| corpus.path_of(e)))
        .collect()
}

fn csv_writer(path: &Path, append: bool) -> Result<csv::Writer<std::fs::File>> {
    let exists = append && path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| CarlError::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(!exists).from_writer(file))
}

fn gen_data(a: GenDataArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), seed)?;
    if let Some(s) = a.subjects {
        cfg.data.subjects = s;
    }
    if let Some(v) = a.variants {
        cfg.data.variants = v;
    }
    if let Some(s) = a.size {
        cfg.data.scene.size = s;
    }
    let dir = RunDir::create(&a.out)?;
    dir.snapshot(&cfg, &[])?;
    let g = generate_corpus(&a.out, &cfg.data, cfg.seed)?;
    for m in &g.manifests {
        println!("{}", m.display());
    }
    Ok(())
}

fn read_split(corpus: &Corpus, split: Split) -> Result<Vec<SpectralImage>> {
    let images = corpus.read_split(split)?;
    if images.is_empty() {
        return Err(CarlError::validation(format!("manifest has no {split} images")));
    }
    Ok(images)
}

fn resume_inputs(resume: Option<&Path>, corpus: &Corpus, manifest: &Path) -> Vec<PathBuf> {
    let mut inputs = manifest_inputs(corpus, manifest);
    inputs.extend(resume.map(Path::to_path_buf));
    inputs
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), seed)?;
    let corpus = Corpus::load(&a.data)?;
    let mut state = match &a.resume {
        Some(p) => {
            let s = TrainState::from_checkpoint(&Checkpoint::load(p)?)?;
            if a.config.is_some() && (cfg.model_config()? != *s.model.config() || cfg.train != s.config) {
                return Err(CarlError::config("--config does not match the configuration stored in the checkpoint"));
            }
            cfg.train = s.config.clone();
            cfg.seed = s.streams.seed();
            cfg.model = toml::Table::try_from(s.model.config()).map_err(|e| CarlError::config(e.to_string()))?;
            s
        }
        None => TrainState::new(cfg.model_config()?, cfg.train.clone(), cfg.seed)?,
    };
    let dir = RunDir::create(&a.out)?;
    dir.snapshot(&cfg, &resume_inputs(a.resume.as_deref(), &corpus, &a.data))?;
    let images = read_split(&corpus, Split::Train)?;
    let stop = a.stop_after.unwrap_or(state.config.total_steps).min(state.config.total_steps);
    let mut log = csv_writer(&dir.file("loss.csv"), a.resume.is_some())?;
    while state.step < stop {
        let batch = state.sample_batch(&images)?;
        let r = state.train_step(&batch)?;
        log.serialize(r)?;
        if cfg.log_every > 0 && r.step % cfg.log_every == 0 {
            println!("step {} loss {:.5} lr {:.3e}", r.step, r.loss, r.lr);
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            state.checkpoint()?.save(dir.file(&format!("step{:06}.ckpt", state.step)))?;
        }
    }
    log.flush().map_err(|e| CarlError::io(&dir.path, e))?;
    state.checkpoint()?.save(dir.file("checkpoint.ckpt"))?;
    if let Ok(test) = corpus.read_split(Split::Test) {
        if !test.is_empty() {
            let conf = pixel_confusion(&state.model, &state.params, &test, state.config.classes)?;
            write_metric_report(dir.file("metrics.csv"), &conf)?;
            println!("test OA {:.4} mIoU {:.4}", overall_accuracy(&conf)?, miou(&conf)?.mean);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SslRow {
    step: u64,
    loss: f64,
    spectral_inv: f64,
    spectral_var: f64,
    spectral_cov: f64,
    spatial_inv: f64,
    spatial_var: f64,
    spatial_cov: f64,
    lr: f64,
    momentum: f64,
}

fn pretrain(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), seed)?;
    let corpus = Corpus::load(&a.data)?;
    let mut state = match &a.resume {
        Some(p) => {
            let s = SslState::from_checkpoint(&Checkpoint::load(p)?)?;
            if a.config.is_some() && (cfg.model_config()? != *s.model.config() || cfg.ssl != s.config) {
                return Err(CarlError::config("--config does not match the configuration stored in the checkpoint"));
            }
            cfg.ssl = s.config.clone();
            cfg.seed = s.streams.seed();
            cfg.model = toml::Table::try_from(s.model.config()).map_err(|e| CarlError::config(e.to_string()))?;
            s
        }
        None => SslState::new(cfg.model_config()?, cfg.ssl.clone(), cfg.seed)?,
    };
    let dir = RunDir::create(&a.out)?;
    dir.snapshot(&cfg, &resume_inputs(a.resume.as_deref(), &corpus, &a.data))?;
    let images = read_split(&corpus, Split::Train)?;
    let stop = a.stop_after.unwrap_or(state.config.total_steps).min(state.config.total_steps);
    let mut log = csv_writer(&dir.file("loss.csv"), a.resume.is_some())?;
    while state.step < stop {
        let batch = state.sample_batch(&images)?;
        let r = state.train_step(&batch)?;
        log.serialize(SslRow {
            step: r.step,
            loss: r.loss,
            spectral_inv: r.spectral.inv,
            spectral_var: r.spectral.var,
            spectral_cov: r.spectral.cov,
            spatial_inv: r.spatial.inv,
            spatial_var: r.spatial.var,
            spatial_cov: r.spatial.cov,
            lr: r.lr,
            momentum: r.momentum,
        })?;
        if cfg.log_every > 0 && r.step % cfg.log_every == 0 {
            println!("step {} loss {:.5} momentum {:.6}", r.step, r.loss, r.momentum);
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            state.checkpoint()?.save(dir.file(&format!("step{:06}.ckpt", state.step)))?;
        }
    }
    log.flush().map_err(|e| CarlError::io(&dir.path, e))?;
    state.checkpoint()?.save(dir.file("checkpoint.ckpt"))?;
    let prepared: Vec<SpectralImage> = images.iter().map(|i| state.prepare(i)).collect::<Result<_>>()?;
    let refs: Vec<&SpectralImage> = prepared.iter().collect();
    let std = spectral_rep_std(&state.model, &state.student, &refs)?;
    std::fs::write(dir.file("diagnostics.toml"), format!("spectral_rep_std = {std}\n")).map_err(|e| CarlError::io(&dir.path, e))?;
    println!("spectral rep std {std:.4}");
    Ok(())
}

fn pixel_confusion(model: &CarlModel, params: &carl_core::tensor::ParamStore, images: &[SpectralImage], classes: usize) -> Result<ConfusionMatrix> {
    let mut conf = ConfusionMatrix::new(classes);
    for img in images {
        let pred = predict_pixels(model, params, img)?;
        let labels = img.labels().ok_or_else(|| CarlError::validation("evaluation images must be labelled"))?;
        for (&l, &p) in labels.iter().zip(&pred) {
            if l != carl_core::io::UNLABELED {
                conf.add(l as usize, p)?;
            }
        }
    }
    Ok(conf)
}

#[derive(Serialize)]
struct ProbeRow {
    mode: &'static str,
    layer: &'static str,
    k: usize,
    epochs: usize,
    seed: u64,
    checkpoint: String,
    fit_patches: usize,
    eval_patches: usize,
    overall_accuracy: f64,
}

fn probe(a: ProbeArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), seed)?;
    if let Some(m) = a.mode {
        cfg.probe.mode = m;
    }
    if let Some(l) = a.layer {
        cfg.probe.layer = l;
    }
    if let Some(k) = a.k {
        cfg.probe.k = k;
    }
    cfg.probe.linear.seed = cfg.seed;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (model, params) = load_model(&ck)?;
    let corpus = Corpus::load(&a.data)?;
    let dir = RunDir::create(&a.out)?;
    let mut inputs = manifest_inputs(&corpus, &a.data);
    inputs.push(a.checkpoint.clone());
    dir.snapshot(&cfg, &inputs)?;

    let cap = |imgs: Vec<SpectralImage>| -> Result<Vec<SpectralImage>> { imgs.iter().map(|i| cap_channels(i, cfg.ssl.max_channels)).collect() };
    let fit = cap(read_split(&corpus, a.fit_split)?)?;
    let ev = cap(read_split(&corpus, a.eval_split)?)?;
    let fit_refs: Vec<&SpectralImage> = fit.iter().collect();
    let ev_refs: Vec<&SpectralImage> = ev.iter().collect();
    let tr = labelled_patches(&model, &params, &fit_refs, cfg.probe.layer)?;
    let te = labelled_patches(&model, &params, &ev_refs, cfg.probe.layer)?;
    let classes = cfg.probe.classes;
    let pred = match cfg.probe.mode {
        ProbeMode::Knn => knn_predict(&tr.features, &tr.labels, &te.features, cfg.probe.k, classes)?,
        ProbeMode::Linear => fit_linear_probe(&tr.features, &tr.labels, classes, &cfg.probe.linear)?.predict(&te.features)?,
    };
    let truth: Vec<Option<usize>> = te.labels.iter().map(|&l| Some(l)).collect();
    let conf = ConfusionMatrix::from_pairs(classes, &truth, &pred)?;
    let oa = overall_accuracy(&conf)?;
    write_metric_report(dir.file("probe_metrics.csv"), &conf)?;
    let mut w = csv_writer(&dir.file("probe.csv"), false)?;
    w.serialize(ProbeRow {
        mode: match cfg.probe.mode {
            ProbeMode::Knn => "knn",
            ProbeMode::Linear => "linear",
        },
        layer: match cfg.probe.layer {
            FeatureLayer::Spectral => "spectral",
            FeatureLayer::Spatial => "spatial",
        },
        k: cfg.probe.k,
        epochs: cfg.probe.linear.epochs,
        seed: cfg.seed,
        checkpoint: sha256_file(&a.checkpoint)?[..16].to_string(),
        fit_patches: tr.labels.len(),
        eval_patches: te.labels.len(),
        overall_accuracy: oa,
    })?;
    w.flush().map_err(|e| CarlError::io(&dir.path, e))?;
    println!("probe OA {oa:.4}");
    Ok(())
}

/// Uniform-stride channel reduction, as applied during pre-training.
fn cap_channels(image: &SpectralImage, max: usize) -> Result<SpectralImage> {
    if image.channels() <= max {
        return Ok(image.clone());
    }
    image.select_channels(&carl_core::model::uniform_stride_channels(image.channels(), max))
}

fn flops(a: FlopsArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), None)?;
    let model = cfg.model_config()?;
    let (h, w) = model.grid(a.size, a.size)?;
    println!("channels,patches,projection,spectral_self_attn,spectral_cross_attn,transition,spatial,total");
    let mut rows = Vec::new();
    for &c in &a.channels {
        let f = flop_estimate(&model, c, h * w);
        println!(
            "{},{},{},{},{},{},{},{}",
            f.channels, f.patches, f.projection, f.spectral_self_attn, f.spectral_cross_attn, f.transition, f.spatial, f.total
        );
        rows.push(f);
    }
    if a.fit {
        let x: Vec<f64> = rows.iter().map(|f| f.channels as f64).collect();
        let selfa: Vec<f64> = rows.iter().map(|f| f.spectral_self_attn as f64).collect();
        let cross: Vec<f64> = rows.iter().map(|f| f.spectral_cross_attn as f64).collect();
        println!("# spectral_self_attn quadratic R2 {:.6}", carl_core::eval::polyfit_r2(&x, &selfa, 2)?);
        println!("# spectral_cross_attn linear R2 {:.6}", carl_core::eval::polyfit_r2(&x, &cross, 1)?);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let state = TrainState::from_checkpoint(&ck)?;
    let corpus = Corpus::load(&a.data)?;
    let dir = RunDir::create(&a.out)?;
    let mut cfg = RunConfig {
        seed: state.streams.seed(),
        train: state.config.clone(),
        ..RunConfig::default()
    };
    cfg.model = toml::Table::try_from(state.model.config()).map_err(|e| CarlError::config(e.to_string()))?;
    let mut inputs = manifest_inputs(&corpus, &a.data);
    inputs.push(a.checkpoint.clone());
    dir.snapshot(&cfg, &inputs)?;
    let images = read_split(&corpus, a.split)?;
    let conf = pixel_confusion(&state.model, &state.params, &images, state.config.classes)?;
    write_metric_report(dir.file("metrics.csv"), &conf)?;
    println!("OA {:.4} mIoU {:.4}", overall_accuracy(&conf)?, miou(&conf)?.mean);
    Ok(())
}
