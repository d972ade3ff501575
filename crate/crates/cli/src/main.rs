//! `rlt`: data generation, base pretraining, adapter training, sampling,
//! analysis and evaluation.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rlt::analysis::{analysis_timestep, attention_map, feature_map, map_csv, qkv_similarity_report};
use rlt::checkpoint::Checkpoint;
use rlt::container::Container;
use rlt::datagen::{self, read_dataset, relation_oracle, temporal_consistency, write_dataset, Relation, Shape, VideoShape};
use rlt::latent::{patchify, LatentVideo};
use rlt::lora::Matrix;
use rlt::pretrain::{corpus, pretrain};
use rlt::trainer::{sample, train_on, StepMetrics, DEFAULT_CFG_SCALE, DEFAULT_SAMPLING_STEPS};
use rlt::{vocab, Error, Result, Rng, Tensor};

use crate::config::{resolve_seed, split_overrides, RunConfig};

/// Name of the tensor holding a clip inside a video file.
const VIDEO_ENTRY: &str = "video";

#[derive(Parser, Debug)]
#[command(name = "rlt", version, about = "Relation LoRA triplet customization on a miniature video diffusion transformer")]
#[command(after_help = "Any --model.KEY, --train.KEY, --pretrain.KEY or --data.KEY VALUE pair overrides the config file.\nRLT_SEED supplies seeds that are not given explicitly.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render clips of one relation with their subject masks.
    Datagen(DatagenArgs),
    /// Train a base model on relation-agnostic clips of every relation.
    Pretrain(PretrainArgs),
    /// Train a relation adapter triplet on a dataset.
    Train(TrainArgs),
    /// Sample a video from a checkpoint with the Subject adapters excluded.
    Infer(InferArgs),
    /// Weight and activation analyses, written as CSV.
    Analyze {
        #[command(subcommand)]
        which: Analysis,
    },
    /// Score a directory of sampled videos.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct DatagenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    relation: String,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    /// Frame height and width in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Comma-separated subject shapes to draw pairs from.
    #[arg(long, value_delimiter = ',')]
    shapes: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint holding the pretrained base and fresh adapters.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    /// Checkpoint whose base weights to start from, e.g. from `pretrain`.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Metrics CSV; defaults to the checkpoint path with `.metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = DEFAULT_SAMPLING_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_CFG_SCALE)]
    cfg_scale: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Analysis {
    /// Q/K/V subspace similarity per layer and branch.
    Subspace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention between one prompt word and every vision token.
    Attnmap {
        #[command(flatten)]
        probe: Probe,
        /// Prompt word whose attention is mapped.
        #[arg(long)]
        token: String,
    },
    /// Mean absolute Q, K or V activation per spatial cell.
    Featmap {
        #[command(flatten)]
        probe: Probe,
        #[arg(long, value_enum, default_value_t = Feature::Q)]
        which: Feature,
    },
}

#[derive(Args, Debug)]
struct Probe {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Clip to noise; a Gaussian latent is used without one.
    #[arg(long)]
    video: Option<PathBuf>,
    /// Diffusion timestep; defaults to the analysis timestep of the schedule.
    #[arg(long)]
    timestep: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Feature {
    Q,
    K,
    V,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Metric {
    RelationAccuracy,
    TemporalConsistency,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    videos: PathBuf,
    #[arg(long, value_enum)]
    metric: Metric,
    /// Relation every video should show, for relation accuracy.
    #[arg(long)]
    expected: Option<String>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Vocab(_) | Error::Lookup(_) | Error::Range(_) | Error::Spec(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if exit_code(&e) == 2 {
                eprintln!("run `rlt help` for usage");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command, overrides: &[(String, String)]) -> Result<()> {
    let needs_config = matches!(command, Command::Pretrain(_) | Command::Train(_));
    if !overrides.is_empty() && !needs_config {
        return Err(Error::Config("config overrides apply to `pretrain` and `train` only".into()));
    }
    match command {
        Command::Datagen(a) => cmd_datagen(a),
        Command::Pretrain(a) => cmd_pretrain(a, overrides),
        Command::Train(a) => cmd_train(a, overrides),
        Command::Infer(a) => cmd_infer(a),
        Command::Analyze { which } => cmd_analyze(which),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn cmd_datagen(a: DatagenArgs) -> Result<()> {
    let relation = Relation::parse(&a.relation)?;
    let seed = resolve_seed(a.seed)?;
    let mut shape = VideoShape::default();
    if let Some(f) = a.frames {
        shape.frames = f;
    }
    if let Some(s) = a.size {
        (shape.height, shape.width) = (s, s);
    }
    let shapes = match &a.shapes {
        Some(names) => names.iter().map(|n| Shape::parse(n.trim())).collect::<Result<Vec<_>>>()?,
        None => Shape::ALL.to_vec(),
    };
    let entries = datagen::generate::<f64>(relation, a.count, seed, &shapes, &shape)?;
    write_dataset(&entries, &a.out)?;
    info!("wrote {} {relation} clips to {}", entries.len(), a.out.display());
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs, overrides: &[(String, String)]) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref(), overrides)?;
    if let Some(n) = a.iters {
        cfg.pretrain.iterations = n;
    }
    let clips = corpus::<f64>(&VideoShape::from(&cfg.model), cfg.pretrain.clips_per_relation, cfg.pretrain.seed)?;
    info!("pretraining on {} clips for {} iterations", clips.len(), cfg.pretrain.iterations);
    let every = (cfg.pretrain.iterations / 20).max(1);
    let (base, _) = pretrain(&cfg.model, &clips, &cfg.pretrain, |i, loss, _| {
        if i % every == 0 {
            info!("pretrain iteration {i}: loss {loss:.5}");
        }
    })?;
    let mut ckpt = Checkpoint::init(cfg.model, cfg.train)?;
    ckpt.base = base;
    ckpt.save(&a.out)?;
    info!("base written to {}", a.out.display());
    Ok(())
}

fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut out = String::from("iter,choice,l_rec,l_rcl,l_total\n");
    for m in rows {
        let _ = writeln!(out, "{},{},{},{},{}", m.iteration, m.choice.name(), m.l_rec, m.l_rcl, m.l_total);
    }
    out
}

fn cmd_train(a: TrainArgs, overrides: &[(String, String)]) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref(), overrides)?;
    if let Some(n) = a.iters {
        cfg.train.iterations = n;
    }
    let dataset = read_dataset::<f64>(&a.data)?;
    let base = match &a.base {
        Some(p) => Some(Checkpoint::<f64>::load_for(p, &cfg.model)?.base),
        None => None,
    };
    let every = (cfg.train.iterations / 20).max(1);
    let outcome = train_on(&dataset, base, cfg.model, cfg.train, Some(&a.out), |m| {
        if m.iteration % every as u64 == 0 {
            info!("iteration {} ({}): l_rec {:.5} l_rcl {:.5}", m.iteration, m.choice.name(), m.l_rec, m.l_rcl);
        }
    })?;
    let metrics = a.metrics.unwrap_or_else(|| a.out.with_extension("metrics.csv"));
    fs::write(&metrics, metrics_csv(&outcome.metrics)).map_err(|e| Error::Format(format!("cannot write {}: {e}", metrics.display())))?;
    info!("checkpoint {} and metrics {} written", a.out.display(), metrics.display());
    Ok(())
}

fn write_video(path: &Path, video: Tensor) -> Result<()> {
    let mut c = Container::new();
    c.push_tensor(VIDEO_ENTRY, video);
    c.write(path)
}

fn read_video(path: &Path) -> Result<Tensor> {
    let c = Container::<f64>::read(path)?;
    c.tensor(VIDEO_ENTRY).cloned().ok_or_else(|| Error::Format(format!("{} has no `{VIDEO_ENTRY}` tensor", path.display())))
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let prompt = vocab::encode(&a.prompt)?;
    let ckpt = Checkpoint::<f64>::load(&a.ckpt)?;
    let mut rng = Rng::seed_from_u64(resolve_seed(a.seed)?);
    let video = sample(&ckpt, &prompt, a.steps, a.cfg_scale, &mut rng)?;
    write_video(&a.out, video)?;
    info!("sample written to {}", a.out.display());
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Format(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Runs one recorded forward pass of the inference-time model.
fn probe_record(p: &Probe) -> Result<rlt::denoiser::AttentionRecord<f64>> {
    let ckpt = Checkpoint::<f64>::load(&p.ckpt)?;
    let den = ckpt.denoiser()?;
    let prompt = vocab::encode(&p.prompt)?;
    let t = p.timestep.unwrap_or_else(|| analysis_timestep(ckpt.model.timesteps));
    let mut rng = Rng::seed_from_u64(resolve_seed(p.seed)?);
    let dims = ckpt.model.latent_dims();
    let noise = LatentVideo { data: Tensor::gaussian(&dims, 0.0, 1.0, &mut rng) };
    let z_t = match &p.video {
        Some(path) => den.schedule.add_noise(&patchify(&read_video(path)?, &ckpt.model)?, t, &noise)?,
        None => noise,
    };
    let view = ckpt.triplet.inference_view();
    let (_, rec) = den.predict(&z_t, &prompt, t, Some(&view), true)?;
    rec.ok_or_else(|| Error::Contract("forward pass returned no record".into()))
}

fn cmd_analyze(which: Analysis) -> Result<()> {
    match which {
        Analysis::Subspace { ckpt, rank, out } => {
            let ckpt = Checkpoint::<f64>::load(&ckpt)?;
            emit(out.as_deref(), &qkv_similarity_report(&ckpt, rank)?.to_csv())
        }
        Analysis::Attnmap { probe, token } => {
            let id = vocab::token(&token)?;
            let map = attention_map(&probe_record(&probe)?, id)?;
            emit(probe.out.as_deref(), &map_csv(&map)?)
        }
        Analysis::Featmap { probe, which } => {
            let m = match which {
                Feature::Q => Matrix::Q,
                Feature::K => Matrix::K,
                Feature::V => Matrix::V,
            };
            let map = feature_map(&probe_record(&probe)?, m)?;
            let [h, w] = [map.shape()[0], map.shape()[1]];
            emit(probe.out.as_deref(), &map_csv(&map.reshape(&[1, h, w])?)?)
        }
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let expected = match (a.metric, &a.expected) {
        (Metric::RelationAccuracy, Some(name)) => Some(Relation::parse(name)?),
        (Metric::RelationAccuracy, None) => return Err(Error::Config("relation accuracy needs --expected".into())),
        _ => None,
    };
    let listing = fs::read_dir(&a.videos).map_err(|e| Error::Config(format!("cannot list {}: {e}", a.videos.display())))?;
    let mut paths: Vec<PathBuf> = listing.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "ntv")).collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .ntv videos in {}", a.videos.display())));
    }
    let mut total = 0.0;
    for p in &paths {
        let video = read_video(p)?;
        total += match expected {
            Some(rel) => {
                let got = relation_oracle(&video);
                info!("{}: {}", p.display(), got.map_or("none", |r| r.name()));
                f64::from(u8::from(got == Some(rel)))
            }
            None => temporal_consistency(&video)?,
        };
    }
    println!("{}", total / paths.len() as f64);
    Ok(())
}
