use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gestureforge_core::embedder::{EmbeddingConfig, EmbeddingModel};
use gestureforge_core::fingerspell::{export_embedder, pretrain, PretrainConfig};
use gestureforge_core::gesture::{LabeledFrame, Regime, TrainSpec};
use gestureforge_core::landmark::{read_sequences, write_sequences, LandmarkSequence};
use gestureforge_core::metrics::{run_ablation, write_ablation_outputs, AblationConfig, DEFAULT_KS};
use gestureforge_core::modelfile::{self, Artifact};
use gestureforge_core::synth::{
    gen_fingerspelling_corpus, gen_gesture_dataset, random_words, GenSpec, BUILTIN_GESTURES,
};
use serde_json::json;

use crate::bench::bench_latency;
use crate::store::Store;
use crate::training::{train_kshot, HeadOptions};
use crate::{AppState, DEFAULT_PORT};

#[derive(Debug, Parser)]
#[command(
    name = "gestureforge",
    version,
    about = "Few-shot hand gesture recognition from landmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic fingerspelling words or labeled gesture samples.
    Synth(SynthArgs),
    /// Pretrain the embedder on fingerspelling sequences with CTC.
    Pretrain(PretrainArgs),
    /// Train a gesture classifier from K samples per class.
    Train(TrainArgs),
    /// Sweep K, regime and seed; write reports.jsonl and summary.csv.
    Ablate(AblateArgs),
    /// Run the HTTP and WebSocket service.
    Serve(ServeArgs),
    /// Measure per-frame inference latency of a model.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of fingerspelled words; selects word mode.
    #[arg(long, conflicts_with_all = ["classes", "per_class"])]
    pub words: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub word_len_min: usize,
    #[arg(long, default_value_t = 6)]
    pub word_len_max: usize,
    /// Gesture classes (comma separated); defaults to every builtin gesture.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Background samples in gesture mode; defaults to `--per-class`.
    #[arg(long)]
    pub background: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 12)]
    pub fps: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Output directory for fingerspell.gfm, embedder.gfm and history.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub embedder: PathBuf,
    #[arg(long, value_parser = parse_regime)]
    pub regime: Regime,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_head: Option<f64>,
    #[arg(long)]
    pub lr_embedder: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub embedder: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS.to_vec())]
    pub ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_regime, default_values_t = Regime::ALL.to_vec())]
    pub regimes: Vec<Regime>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3, 4, 5])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "GESTUREFORGE_DATA_DIR", default_value = "gestureforge-data")]
    pub data_dir: PathBuf,
    #[arg(long, env = "GESTUREFORGE_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// Maximum number of concurrent training jobs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Pretrained embedder; defaults to `<data-dir>/embedder.gfm` when present.
    #[arg(long)]
    pub embedder: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Landmark file to replay; synthetic frames are generated otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse().map_err(|e: gestureforge_core::Error| e.to_string())
}

/// Flattens labeled sequences into per-frame samples.
pub fn labeled_frames(seqs: Vec<LandmarkSequence>, origin: &Path) -> anyhow::Result<Vec<LabeledFrame>> {
    let mut out = Vec::new();
    for (i, seq) in seqs.into_iter().enumerate() {
        let Some(label) = seq.label else {
            bail!("{}: record {} has no label", origin.display(), i + 1);
        };
        out.extend(seq.frames.into_iter().map(|f| (f, label.clone())));
    }
    Ok(out)
}

/// One single-frame sequence per sample, the layout `synth` writes.
pub fn to_sequences(samples: &[LabeledFrame]) -> Vec<LandmarkSequence> {
    samples
        .iter()
        .map(|(f, l)| LandmarkSequence::new(vec![f.clone()], Some(l.clone())))
        .collect()
}

pub fn load_samples(path: &Path) -> anyhow::Result<Vec<LabeledFrame>> {
    let seqs = read_sequences(path).with_context(|| format!("reading {}", path.display()))?;
    labeled_frames(seqs, path)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Serve(a) => serve(a),
        Command::Bench(a) => bench(a),
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let gen = GenSpec {
        seed: a.seed,
        noise_sigma: a.noise,
        fps: a.fps,
        ..GenSpec::default()
    };
    let seqs = if let Some(n) = a.words {
        let words = random_words(n, a.word_len_min, a.word_len_max, a.seed)?;
        gen_fingerspelling_corpus(&words, &gen)?
    } else {
        let classes: Vec<String> = a
            .classes
            .unwrap_or_else(|| BUILTIN_GESTURES.iter().map(|s| s.to_string()).collect());
        let names: Vec<&str> = classes.iter().map(String::as_str).collect();
        let per_class = a.per_class.unwrap_or(100);
        let data = gen_gesture_dataset(&names, per_class, a.background.unwrap_or(per_class), &gen)?;
        to_sequences(&data)
    };
    write_sequences(&a.out, &seqs).with_context(|| format!("writing {}", a.out.display()))?;
    print_json(&json!({ "out": a.out, "records": seqs.len() }));
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs) -> anyhow::Result<()> {
    let corpus = read_sequences(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let cfg = PretrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        hidden: a.hidden,
        seed: a.seed,
        ..PretrainConfig::default()
    };
    let outcome = pretrain(&corpus, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let embedder = export_embedder(&outcome.model);
    modelfile::save(&Artifact::Fingerspell(outcome.model), &a.out.join("fingerspell.gfm"))?;
    modelfile::save(&Artifact::Embedder(embedder), &a.out.join("embedder.gfm"))?;
    std::fs::write(a.out.join("history.json"), serde_json::to_vec_pretty(&outcome.history)?)?;
    print_json(&json!({
        "out": a.out,
        "sequences": corpus.len(),
        "skipped_infeasible": outcome.skipped_infeasible,
        "final": outcome.history.last(),
    }));
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let data = load_samples(&a.data)?;
    let embedder =
        modelfile::load_embedder(&a.embedder).with_context(|| format!("loading {}", a.embedder.display()))?;
    let mut spec = TrainSpec::new(a.regime, a.k, a.seed);
    if let Some(v) = a.epochs {
        spec.epochs = v;
    }
    if let Some(v) = a.batch_size {
        spec.batch_size = v;
    }
    if let Some(v) = a.lr_head {
        spec.lr_head = v;
    }
    if let Some(v) = a.lr_embedder {
        spec.lr_embedder = v;
    }
    let mut head = HeadOptions::default();
    if let Some(v) = a.hidden_dims {
        head.hidden_dims = v;
    }
    if let Some(v) = a.dropout {
        head.dropout_rate = v;
    }
    let model = train_kshot(&embedder, &data, None, &spec, &head, &mut |p| {
        tracing::info!(epoch = p.epoch, epochs = p.epochs, loss = p.mean_loss, "epoch finished")
    })?;
    let bytes = modelfile::to_bytes(&Artifact::Gesture(model.clone()))?;
    modelfile::save(&Artifact::Gesture(model.clone()), &a.out)?;
    print_json(&json!({
        "out": a.out,
        "digest": modelfile::file_digest(&bytes),
        "label_map": model.label_map,
        "training": model.meta,
    }));
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let data = load_samples(&a.data)?;
    let embedder =
        modelfile::load_embedder(&a.embedder).with_context(|| format!("loading {}", a.embedder.display()))?;
    let cfg = AblationConfig {
        ks: a.ks,
        regimes: a.regimes,
        seeds: a.seeds,
        epochs: a.epochs,
        ..AblationConfig::default()
    };
    let result = run_ablation(&data, &embedder, &cfg)?;
    write_ablation_outputs(&result, &a.out)?;
    for f in &result.failures {
        tracing::warn!(k = f.k, regime = %f.regime, seed = f.seed, error = %f.error, "ablation cell failed");
    }
    print_json(&json!({ "out": a.out, "summary": result.summary, "failures": result.failures.len() }));
    Ok(())
}

/// The embedder a server trains from: explicit path, then the data
/// directory's `embedder.gfm`, then a freshly initialized one.
pub fn resolve_embedder(explicit: Option<&Path>, data_dir: &Path) -> anyhow::Result<EmbeddingModel> {
    if let Some(p) = explicit {
        return modelfile::load_embedder(p).with_context(|| format!("loading {}", p.display()));
    }
    let default = data_dir.join("embedder.gfm");
    if default.exists() {
        return modelfile::load_embedder(&default).with_context(|| format!("loading {}", default.display()));
    }
    tracing::warn!("no pretrained embedder found; jobs will start from a randomly initialized one");
    Ok(EmbeddingModel::new(EmbeddingConfig::default(), 0)?)
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let store = Store::open(&a.data_dir).map_err(anyhow::Error::from)?;
    let embedder = resolve_embedder(a.embedder.as_deref(), &a.data_dir)?;
    let state = AppState::new(store, embedder, a.jobs, a.token);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .context("invalid --host/--port")?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        tracing::info!(%addr, data_dir = %a.data_dir.display(), "serving");
        axum::serve(listener, crate::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    let model = modelfile::load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let mut frames: Vec<_> = match &a.data {
        Some(p) => load_samples(p)?.into_iter().map(|(f, _)| f).collect(),
        None => {
            let per_class = a.frames.div_ceil(BUILTIN_GESTURES.len()).max(1);
            let gen = GenSpec {
                seed: a.seed,
                ..GenSpec::default()
            };
            gen_gesture_dataset(&BUILTIN_GESTURES, per_class, 0, &gen)?
                .into_iter()
                .map(|(f, _)| f)
                .collect()
        }
    };
    frames.truncate(a.frames);
    let stats = bench_latency(&model, &frames, a.repetitions)?;
    print_json(&serde_json::to_value(stats)?);
    Ok(())
}
