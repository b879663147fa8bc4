//! Command-line front end for the segmentation-quality pipeline.
//!
//! Stages are composable through files: datagen → train-seg → sample → ue →
//! scores → train-qp → eval-qp → rank → gradcam. Every flag can also come
//! from a `--config key value` file; explicit flags win.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::str::FromStr;
use uqseg::io::kv;
use uqseg::pipeline;
use uqseg::quality::{QNetArch, QpTrainConfig};
use uqseg::sampler::{AnglePolicy, UmConfig, UmKind};
use uqseg::segmenter::SegTrainConfig;
use uqseg::synth::{CorpusSpec, Split};
use uqseg::uncertainty::{AggregateWeights, EntropySource, FlagOrder, Reduction, UeKind};

#[derive(Parser)]
#[command(name = "uqseg", version, about = "Segmentation quality prediction without ground truth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic lesion corpus
    Datagen(DatagenArgs),
    /// Train the segmentation backbone(s)
    TrainSeg(TrainSegArgs),
    /// Run an uncertainty model, persisting per-image sample stacks
    Sample(SampleArgs),
    /// Compute uncertainty maps and raw per-image scores from stacks
    Ue(UeArgs),
    /// Normalize scores, aggregate, rank and flag
    Scores(ScoresArgs),
    /// Train a quality-prediction net
    TrainQp(TrainQpArgs),
    /// Evaluate a quality net on the test split
    EvalQp(EvalQpArgs),
    /// Re-rank a score table and emit the flagged list
    Rank(RankArgs),
    /// Grad-CAM heatmaps for one image
    Gradcam(GradcamArgs),
}

/// Config-file fallback: a flag left unset takes its value from the file.
struct Cfg(Vec<(String, String)>);

impl Cfg {
    fn load(path: &Option<PathBuf>) -> Result<Cfg> {
        Ok(Cfg(match path {
            Some(p) => kv::read(p).with_context(|| format!("reading config {}", p.display()))?,
            None => Vec::new(),
        }))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match kv::get(&self.0, key) {
            Some(v) => match v.parse::<T>() {
                Ok(t) => Ok(Some(t)),
                Err(_) => bail!("config key '{key}': cannot parse '{v}'"),
            },
            None => Ok(None),
        }
    }
}

fn resolve<T: FromStr>(flag: Option<T>, cfg: &Cfg, key: &str, default: T) -> Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(cfg.get::<T>(key)?.unwrap_or(default)),
    }
}

fn parse_weights(s: &str) -> Result<AggregateWeights> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        bail!("--weights expects wC,wE,wM,wK");
    }
    let vals: Vec<f64> = parts
        .iter()
        .map(|p| p.parse::<f64>().context("bad weight"))
        .collect::<Result<_>>()?;
    let w = AggregateWeights {
        w_conf: vals[0],
        w_ent: vals[1],
        w_mi: vals[2],
        w_epkl: vals[3],
    };
    w.validate()?;
    Ok(w)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => bail!("unknown split '{other}' (expected train|test)"),
    }
}

#[derive(Args)]
struct DatagenArgs {
    /// Output corpus directory
    #[arg(long)]
    out: PathBuf,
    /// Number of images
    #[arg(long)]
    n: Option<usize>,
    /// Image side in pixels (even)
    #[arg(long)]
    side: Option<usize>,
    /// Foreground/background contrast in (0,1]
    #[arg(long)]
    contrast: Option<f64>,
    /// Additive Gaussian noise sigma
    #[arg(long)]
    noise: Option<f64>,
    /// Fraction of samples with ambiguous labels (test split only)
    #[arg(long)]
    ambiguous_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// key=value config file; flags win
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainSegArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Dropout rate of the backbone
    #[arg(long)]
    dropout: Option<f64>,
    /// Train M nets on member-derived seeds
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct UmFlags {
    /// Uncertainty model: mcd|ensemble|tta
    #[arg(long)]
    um: Option<String>,
    /// MC-dropout passes
    #[arg(long)]
    t_mcd: Option<usize>,
    /// Ensemble members
    #[arg(long)]
    ensemble_size: Option<usize>,
    /// Test-time rotations
    #[arg(long)]
    tta_count: Option<usize>,
    /// "random" or a comma list of degrees
    #[arg(long)]
    tta_angles: Option<String>,
}

impl UmFlags {
    fn build(&self, cfg: &Cfg, seed: u64) -> Result<UmConfig> {
        let kind = UmKind::parse(&resolve(
            self.um.clone(),
            cfg,
            "um",
            "mcd".to_string(),
        )?)?;
        let angles = resolve(self.tta_angles.clone(), cfg, "tta_angles", "random".into())?;
        let angle_policy = if angles == "random" {
            AnglePolicy::UniformRandom
        } else {
            AnglePolicy::Fixed(
                angles
                    .split(',')
                    .map(|a| a.parse::<f64>().context("bad angle"))
                    .collect::<Result<_>>()?,
            )
        };
        Ok(UmConfig {
            kind,
            t_mcd: resolve(self.t_mcd, cfg, "t_mcd", 10)?,
            ensemble_size: resolve(self.ensemble_size, cfg, "ensemble_size", 3)?,
            tta_count: resolve(self.tta_count, cfg, "tta_count", 10)?,
            angle_policy,
            seed,
        })
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Segmenter net file(s); pass several for an ensemble
    #[arg(long, required = true, num_args = 1..)]
    net: Vec<PathBuf>,
    /// Which corpus split to sample: train|test
    #[arg(long)]
    split: Option<String>,
    #[command(flatten)]
    um: UmFlags,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct UeArgs {
    /// Directory with stacks and stacks_meta.csv
    #[arg(long)]
    stacks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// confidence|entropy|mi|epkl|all (map files to write)
    #[arg(long)]
    ue: Option<String>,
    /// Evaluate the entropy on: mean|samples
    #[arg(long)]
    entropy_on: Option<String>,
    /// Pixel-to-image reduction: mean_all|mean_foreground_band
    #[arg(long)]
    reduce: Option<String>,
    /// Also export maps as 8-bit PGM heatmaps
    #[arg(long)]
    pgm: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ScoresArgs {
    /// Raw score CSV from the ue stage
    #[arg(long)]
    raw: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Aggregate weights wC,wE,wM,wK
    #[arg(long)]
    weights: Option<String>,
    /// Flag order asc|desc
    #[arg(long)]
    order: Option<String>,
    /// How many images to flag
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainQpArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    net: Vec<PathBuf>,
    #[command(flatten)]
    um: UmFlags,
    /// Uncertainty estimate feeding the net: confidence|entropy|mi|epkl
    #[arg(long)]
    ue: Option<String>,
    #[arg(long)]
    entropy_on: Option<String>,
    /// two_way_seg|two_way_img|three_way
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output quality-net file
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalQpArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    net: Vec<PathBuf>,
    #[arg(long)]
    qnet: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Existing score table to fill pred_dice/true_dice into
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    order: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    net: Vec<PathBuf>,
    #[arg(long)]
    qnet: PathBuf,
    /// Image id from the corpus manifest
    #[arg(long)]
    id: String,
    /// Branch index; all branches when omitted
    #[arg(long)]
    branch: Option<usize>,
    /// Skip the ReLU on the raw weighted map
    #[arg(long)]
    no_relu: bool,
    #[arg(long)]
    out: PathBuf,
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Datagen(a) => {
            let cfg = Cfg::load(&a.config)?;
            let spec = CorpusSpec {
                n_images: resolve(a.n, &cfg, "n", 700)?,
                side: resolve(a.side, &cfg, "side", 64)?,
                contrast: resolve(a.contrast, &cfg, "contrast", 0.6)?,
                noise_sigma: resolve(a.noise, &cfg, "noise", 0.15)?,
                ambiguous_fraction: resolve(a.ambiguous_frac, &cfg, "ambiguous_frac", 0.05)?,
                seed: resolve(a.seed, &cfg, "seed", 42)?,
            };
            pipeline::cmd_datagen(&a.out, &spec)?;
            println!(
                "wrote corpus of {} images ({}x{}) to {}",
                spec.n_images,
                spec.side,
                spec.side,
                a.out.display()
            );
        }
        Command::TrainSeg(a) => {
            let cfg = Cfg::load(&a.config)?;
            let train_cfg = SegTrainConfig {
                epochs: resolve(a.epochs, &cfg, "epochs", 5)?,
                batch_size: resolve(a.batch, &cfg, "batch", 16)?,
                lr: resolve(a.lr, &cfg, "lr", 1e-3)?,
                seed: resolve(a.seed, &cfg, "seed", 42)?,
                dropout_p: resolve(a.dropout, &cfg, "dropout", 0.2)?,
            };
            let ensemble = resolve(a.ensemble, &cfg, "ensemble", 1)?;
            let paths = pipeline::cmd_train_seg(&a.corpus, &a.out, &train_cfg, ensemble)?;
            for p in paths {
                println!("trained {}", p.display());
            }
        }
        Command::Sample(a) => {
            let cfg = Cfg::load(&a.config)?;
            let seed = resolve(a.seed, &cfg, "seed", 42)?;
            let um = a.um.build(&cfg, seed)?;
            let split = parse_split(&resolve(a.split.clone(), &cfg, "split", "test".into())?)?;
            pipeline::cmd_sample(&a.corpus, &a.net, split, &um, &a.out)?;
            println!("wrote {} stacks to {}", um.kind.as_str(), a.out.display());
        }
        Command::Ue(a) => {
            let cfg = Cfg::load(&a.config)?;
            let selected = match resolve(a.ue.clone(), &cfg, "ue", "all".into())?.as_str() {
                "all" => None,
                other => Some(UeKind::parse(other)?),
            };
            let opts = pipeline::UeOptions {
                selected,
                entropy_source: EntropySource::parse(&resolve(
                    a.entropy_on.clone(),
                    &cfg,
                    "entropy_on",
                    "mean".into(),
                )?)?,
                reduction: Reduction::parse(&resolve(
                    a.reduce.clone(),
                    &cfg,
                    "reduce",
                    "mean_all".into(),
                )?)?,
                export_pgm: a.pgm,
            };
            pipeline::cmd_ue(&a.stacks, &a.out, &opts)?;
            println!("wrote uncertainty maps and raw scores to {}", a.out.display());
        }
        Command::Scores(a) => {
            let cfg = Cfg::load(&a.config)?;
            let weights = parse_weights(&resolve(
                a.weights.clone(),
                &cfg,
                "weights",
                "0.4,0.2,0.2,0.2".into(),
            )?)?;
            let order = FlagOrder::parse(&resolve(a.order.clone(), &cfg, "order", "asc".into())?)?;
            let k = resolve(a.k, &cfg, "k", 0)?;
            pipeline::cmd_scores(&a.raw, &a.out, &weights, order, k)?;
            println!("wrote normalized scores and ranking to {}", a.out.display());
        }
        Command::TrainQp(a) => {
            let cfg = Cfg::load(&a.config)?;
            let seed = resolve(a.seed, &cfg, "seed", 42)?;
            let opts = pipeline::QpOptions {
                um: a.um.build(&cfg, seed)?,
                ue: UeKind::parse(&resolve(a.ue.clone(), &cfg, "ue", "entropy".into())?)?,
                entropy_source: EntropySource::parse(&resolve(
                    a.entropy_on.clone(),
                    &cfg,
                    "entropy_on",
                    "mean".into(),
                )?)?,
                arch: QNetArch::parse(&resolve(a.arch.clone(), &cfg, "arch", "three_way".into())?)?,
                config: QpTrainConfig {
                    epochs: resolve(a.epochs, &cfg, "epochs", 20)?,
                    batch_size: resolve(a.batch, &cfg, "batch", 16)?,
                    lr: resolve(a.lr, &cfg, "lr", 1e-3)?,
                    seed,
                },
            };
            pipeline::cmd_train_qp(&a.corpus, &a.net, &opts, &a.out)?;
            println!("trained quality net {}", a.out.display());
        }
        Command::EvalQp(a) => {
            let report =
                pipeline::cmd_eval_qp(&a.corpus, &a.net, &a.qnet, &a.out, a.scores.as_deref())?;
            println!(
                "n={} r2={:.4} pcc={:.4} rmse={:.4} (cohorts poor/good/best = {}/{}/{})",
                report.n, report.r2, report.pcc, report.rmse, report.poor, report.good, report.best
            );
        }
        Command::Rank(a) => {
            let cfg = Cfg::load(&a.config)?;
            let order = FlagOrder::parse(&resolve(a.order.clone(), &cfg, "order", "asc".into())?)?;
            let k = resolve(a.k, &cfg, "k", 20)?;
            let flagged = pipeline::cmd_rank(&a.scores, k, order, &a.out)?;
            println!("flagged {} images: {}", flagged.len(), flagged.join(","));
        }
        Command::Gradcam(a) => {
            pipeline::cmd_gradcam(
                &a.corpus,
                &a.net,
                &a.qnet,
                &a.id,
                a.branch,
                !a.no_relu,
                &a.out,
            )?;
            println!("wrote grad-cam heatmaps to {}", a.out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
