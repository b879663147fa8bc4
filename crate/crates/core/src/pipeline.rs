//! File-based pipeline stages behind the CLI subcommands.
//!
//! Every stage reads the files of the previous one, writes its own outputs
//! plus a `run_<stage>.txt` manifest, and is byte-reproducible from the same
//! inputs and seed (manifests carry timestamps and are the one exception).
//! Stage boundaries are plain files so externally produced sample stacks can
//! enter at the uncertainty-estimate stage.

use crate::error::{Error, Result};
use crate::exec;
use crate::io::table::{self, ManifestRow, StackMetaRow};
use crate::io::uqt::{self, Dtype};
use crate::io::{kv, netfile, pgm};
use crate::metrics::{self, MetricReport};
use crate::quality::{self, QNetArch, QpTrainConfig};
use crate::rng;
use crate::sampler::{self, AnglePolicy, SampleStack, UmConfig, UmKind};
use crate::segmenter::{self, SegNet, SegTrainConfig};
use crate::synth::{self, CorpusSpec, Split, SyntheticSample};
use crate::tensor::Tensor;
use crate::uncertainty::{
    self, AggregateWeights, EntropySource, FlagOrder, Reduction, ScoreRow, UeKind, UeScores,
};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

const TAG_ENSEMBLE_MEMBER: u64 = 0x30;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write the per-stage run manifest: command, version, timestamp, a hash of
/// the configuration entries, then the entries themselves.
fn write_run_manifest(dir: &Path, command: &str, entries: &[(String, String)]) -> Result<()> {
    let joined: String = entries
        .iter()
        .map(|(k, v)| format!("{k}={v};"))
        .collect();
    let mut pairs = vec![
        ("command".to_string(), command.to_string()),
        (
            "version".to_string(),
            env!("CARGO_PKG_VERSION").to_string(),
        ),
        (
            "timestamp_unix".to_string(),
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
                .to_string(),
        ),
        (
            "config_hash".to_string(),
            format!("{:016x}", rng::fnv1a(joined.as_bytes())),
        ),
    ];
    pairs.extend_from_slice(entries);
    kv::write(&dir.join(format!("run_{command}.txt")), &pairs)
}

fn img_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_img.uqt"))
}

fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_mask.uqt"))
}

fn stack_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_stack.uqt"))
}

fn map_path(dir: &Path, id: &str, ue: UeKind) -> PathBuf {
    dir.join(format!("{id}_{}.uqt", ue.as_str()))
}

/// Generate the corpus and persist it: per-sample image and mask tensors plus
/// the manifest CSV (id, ambiguity, split).
pub fn cmd_datagen(out_dir: &Path, spec: &CorpusSpec) -> Result<()> {
    ensure_dir(out_dir)?;
    let samples = synth::generate_corpus(spec)?;
    let split = synth::split_corpus(&samples)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (sample, sp) in samples.iter().zip(&split) {
        uqt::write(&img_path(out_dir, &sample.id), &sample.image, Dtype::F32)?;
        uqt::write(&mask_path(out_dir, &sample.id), &sample.gt_mask, Dtype::F32)?;
        rows.push(ManifestRow {
            id: sample.id.clone(),
            is_ambiguous: sample.is_ambiguous,
            split: *sp,
        });
    }
    table::write_manifest(&out_dir.join("manifest.csv"), &rows)?;
    write_run_manifest(
        out_dir,
        "datagen",
        &[
            ("seed".into(), spec.seed.to_string()),
            ("n_images".into(), spec.n_images.to_string()),
            ("side".into(), spec.side.to_string()),
            ("contrast".into(), spec.contrast.to_string()),
            ("noise_sigma".into(), spec.noise_sigma.to_string()),
            (
                "ambiguous_fraction".into(),
                spec.ambiguous_fraction.to_string(),
            ),
        ],
    )
}

/// A corpus loaded back from disk, in manifest order.
#[derive(Debug)]
pub struct LoadedCorpus {
    pub samples: Vec<SyntheticSample>,
    pub split: Vec<Split>,
}

impl LoadedCorpus {
    pub fn of_split(&self, which: Split) -> Vec<&SyntheticSample> {
        self.samples
            .iter()
            .zip(&self.split)
            .filter(|(_, s)| **s == which)
            .map(|(s, _)| s)
            .collect()
    }

    pub fn find(&self, id: &str) -> Option<&SyntheticSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

pub fn load_corpus(dir: &Path) -> Result<LoadedCorpus> {
    let rows = table::read_manifest(&dir.join("manifest.csv"))?;
    let loaded = exec::map_indexed(rows.len(), |i| -> Result<(SyntheticSample, Split)> {
        let row = &rows[i];
        let (image, _) = uqt::read(&img_path(dir, &row.id))?;
        let (mask, _) = uqt::read(&mask_path(dir, &row.id))?;
        if image.rank() != 3 || image.shape()[0] != 1 {
            return Err(Error::format(
                img_path(dir, &row.id),
                format!("image must be 1×H×W, found {:?}", image.shape()),
            ));
        }
        if mask.shape() != &image.shape()[1..] {
            return Err(Error::format(
                mask_path(dir, &row.id),
                format!(
                    "mask shape {:?} does not match image {:?}",
                    mask.shape(),
                    image.shape()
                ),
            ));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::format(
                mask_path(dir, &row.id),
                "mask is not binary".to_string(),
            ));
        }
        Ok((
            SyntheticSample {
                image,
                gt_mask: mask,
                is_ambiguous: row.is_ambiguous,
                id: row.id.clone(),
            },
            row.split,
        ))
    });
    let mut samples = Vec::with_capacity(rows.len());
    let mut split = Vec::with_capacity(rows.len());
    for res in loaded {
        let (s, sp) = res?;
        samples.push(s);
        split.push(sp);
    }
    Ok(LoadedCorpus { samples, split })
}

/// Train one segmenter, or `ensemble` of them on member-derived seeds.
/// Returns the written net paths (`segnet_<m>.uqn`).
pub fn cmd_train_seg(
    corpus_dir: &Path,
    out_dir: &Path,
    config: &SegTrainConfig,
    ensemble: usize,
) -> Result<Vec<PathBuf>> {
    if ensemble == 0 {
        return Err(Error::InvalidArgument("ensemble size must be >= 1".into()));
    }
    ensure_dir(out_dir)?;
    let corpus = load_corpus(corpus_dir)?;
    let train = corpus.of_split(Split::Train);
    let mut paths = Vec::new();
    let mut checksums = Vec::new();
    for m in 0..ensemble {
        let member_cfg = SegTrainConfig {
            seed: rng::derive_seed(config.seed, &[TAG_ENSEMBLE_MEMBER, m as u64]),
            ..config.clone()
        };
        let net = segmenter::train_segmenter(&train, &member_cfg)?;
        let path = out_dir.join(format!("segnet_{m}.uqn"));
        netfile::save_segnet(&path, &net)?;
        checksums.push(format!("{:016x}", net.checksum()));
        paths.push(path);
    }
    write_run_manifest(
        out_dir,
        "train_seg",
        &[
            ("seed".into(), config.seed.to_string()),
            ("epochs".into(), config.epochs.to_string()),
            ("batch_size".into(), config.batch_size.to_string()),
            ("lr".into(), config.lr.to_string()),
            ("dropout".into(), config.dropout_p.to_string()),
            ("ensemble".into(), ensemble.to_string()),
            ("checksums".into(), checksums.join(",")),
        ],
    )?;
    Ok(paths)
}

fn load_nets(paths: &[PathBuf]) -> Result<Vec<SegNet>> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no segmenter net supplied".into()));
    }
    paths.iter().map(|p| netfile::load_segnet(p)).collect()
}

fn um_manifest_entries(um: &UmConfig) -> Vec<(String, String)> {
    vec![
        ("um".into(), um.kind.as_str().to_string()),
        ("um_seed".into(), um.seed.to_string()),
        ("t_mcd".into(), um.t_mcd.to_string()),
        ("ensemble_size".into(), um.ensemble_size.to_string()),
        ("tta_count".into(), um.tta_count.to_string()),
        (
            "tta_angles".into(),
            match &um.angle_policy {
                AnglePolicy::UniformRandom => "random".to_string(),
                AnglePolicy::Fixed(v) => v
                    .iter()
                    .map(|a| a.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            },
        ),
    ]
}

fn um_from_entries(pairs: &[(String, String)], path: &Path) -> Result<UmConfig> {
    let get = |key: &str| kv::require(pairs, key, path);
    let angle_policy = match get("tta_angles")? {
        "random" => AnglePolicy::UniformRandom,
        list => AnglePolicy::Fixed(
            list.split(',')
                .map(|a| {
                    a.parse::<f64>()
                        .map_err(|_| Error::format(path, format!("bad angle '{a}'")))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok(UmConfig {
        kind: UmKind::parse(get("um")?)?,
        t_mcd: get("t_mcd")?
            .parse()
            .map_err(|_| Error::format(path, "bad t_mcd"))?,
        ensemble_size: get("ensemble_size")?
            .parse()
            .map_err(|_| Error::format(path, "bad ensemble_size"))?,
        tta_count: get("tta_count")?
            .parse()
            .map_err(|_| Error::format(path, "bad tta_count"))?,
        angle_policy,
        seed: get("um_seed")?
            .parse()
            .map_err(|_| Error::format(path, "bad um_seed"))?,
    })
}

/// Run the uncertainty model over one corpus split; persists a T×C×H×W stack
/// per image plus the shared member-metadata CSV. These files are also the
/// ingestion point for externally produced stacks.
pub fn cmd_sample(
    corpus_dir: &Path,
    net_paths: &[PathBuf],
    split: Split,
    um: &UmConfig,
    out_dir: &Path,
) -> Result<()> {
    um.validate()?;
    ensure_dir(out_dir)?;
    let corpus = load_corpus(corpus_dir)?;
    let images = corpus.of_split(split);
    let nets = load_nets(net_paths)?;
    let stacks = exec::map_indexed(images.len(), |i| -> Result<SampleStack> {
        sampler::sample_stack(&nets, &images[i].image, um, rng::fnv1a(images[i].id.as_bytes()))
    });
    let mut meta_rows = Vec::new();
    for (sample, stack) in images.iter().zip(stacks) {
        let stack = stack?;
        uqt::write(&stack_path(out_dir, &sample.id), stack.tensor(), Dtype::F32)?;
        for m in &stack.member_meta {
            meta_rows.push(StackMetaRow {
                id: sample.id.clone(),
                member: m.member,
                kind: stack.um_kind.as_str().to_string(),
                seed: m.seed,
                angle_deg: m.angle_deg,
            });
        }
    }
    table::write_stack_meta(&out_dir.join("stacks_meta.csv"), &meta_rows)?;
    let mut entries = um_manifest_entries(um);
    entries.push(("split".into(), split.as_str().to_string()));
    write_run_manifest(out_dir, "sample", &entries)
}

/// Load one persisted stack and its metadata rows back into a SampleStack.
pub fn load_stack(stacks_dir: &Path, id: &str, meta: &[StackMetaRow]) -> Result<SampleStack> {
    let rows: Vec<&StackMetaRow> = meta.iter().filter(|r| r.id == id).collect();
    if rows.is_empty() {
        return Err(Error::format(
            stacks_dir.join("stacks_meta.csv"),
            format!("no metadata rows for id '{id}'"),
        ));
    }
    let kind = UmKind::parse(&rows[0].kind)?;
    let (tensor, _) = uqt::read(&stack_path(stacks_dir, id))?;
    let member_meta = rows
        .iter()
        .map(|r| sampler::MemberMeta {
            member: r.member,
            seed: r.seed,
            angle_deg: r.angle_deg,
        })
        .collect();
    SampleStack::from_tensor(tensor, kind, member_meta)
}

fn ordered_ids(meta: &[StackMetaRow]) -> Vec<String> {
    let mut ids = Vec::new();
    for row in meta {
        if ids.last().map(|l: &String| l != &row.id).unwrap_or(true)
            && !ids.contains(&row.id)
        {
            ids.push(row.id.clone());
        }
    }
    ids
}

pub struct UeOptions {
    /// Which map files to write; scalar scores always cover all four.
    pub selected: Option<UeKind>,
    pub entropy_source: EntropySource,
    pub reduction: Reduction,
    pub export_pgm: bool,
}

impl Default for UeOptions {
    fn default() -> Self {
        UeOptions {
            selected: None,
            entropy_source: EntropySource::MeanPrediction,
            reduction: Reduction::MeanAll,
            export_pgm: false,
        }
    }
}

/// Compute uncertainty maps and per-image raw scores for every stack in a
/// directory. Map tensors are written per selected estimate; the raw score
/// CSV always carries all four estimates.
pub fn cmd_ue(stacks_dir: &Path, out_dir: &Path, opts: &UeOptions) -> Result<()> {
    ensure_dir(out_dir)?;
    let meta = table::read_stack_meta(&stacks_dir.join("stacks_meta.csv"))?;
    let ids = ordered_ids(&meta);
    let results = exec::map_indexed(ids.len(), |i| -> Result<(ScoreRow, Vec<(UeKind, Tensor)>)> {
        let id = &ids[i];
        let stack = load_stack(stacks_dir, id, &meta)?;
        let maps = uncertainty::compute_maps(&stack, opts.entropy_source)?;
        maps.validate(stack.channels())?;
        let mean = sampler::mean_prediction(&stack);
        let fg_mask = segmenter::hard_mask(&mean, 0.5);
        let mut raw = UeScores::default();
        for kind in UeKind::ALL {
            raw.set(
                kind,
                uncertainty::image_score(maps.get(kind), opts.reduction, Some(&fg_mask))?,
            );
        }
        let keep: Vec<(UeKind, Tensor)> = UeKind::ALL
            .into_iter()
            .filter(|k| opts.selected.map(|s| s == *k).unwrap_or(true))
            .map(|k| (k, maps.get(k).clone()))
            .collect();
        Ok((ScoreRow::new(id.clone(), raw), keep))
    });
    let mut rows = Vec::with_capacity(ids.len());
    for (id, res) in ids.iter().zip(results) {
        let (row, keep) = res?;
        for (kind, map) in keep {
            uqt::write(&map_path(out_dir, id, kind), &map, Dtype::F32)?;
            if opts.export_pgm {
                pgm::write(&out_dir.join(format!("{id}_{}.pgm", kind.as_str())), &map)?;
            }
        }
        rows.push(row);
    }
    table::write_score_table(&out_dir.join("ue_raw.csv"), &rows)?;
    write_run_manifest(
        out_dir,
        "ue",
        &[
            (
                "selected".into(),
                opts.selected.map(|k| k.as_str().to_string()).unwrap_or("all".into()),
            ),
            ("entropy_on".into(), opts.entropy_source.as_str().to_string()),
            ("reduction".into(), opts.reduction.as_str().to_string()),
            ("log_base".into(), "e".into()),
        ],
    )
}

/// Read back the statistics persisted by [`cmd_scores`], so a single new
/// image can be normalized against a frozen dataset.
pub fn load_norm_stats(path: &Path) -> Result<uncertainty::NormStats> {
    let pairs = kv::read(path)?;
    let mut min = UeScores::default();
    let mut max = UeScores::default();
    for kind in UeKind::ALL {
        let parse = |key: String| -> Result<f64> {
            kv::require(&pairs, &key, path)?
                .parse::<f64>()
                .map_err(|_| Error::format(path, format!("bad float for '{key}'")))
        };
        min.set(kind, parse(format!("min_{}", kind.as_str()))?);
        max.set(kind, parse(format!("max_{}", kind.as_str()))?);
    }
    Ok(uncertainty::NormStats { min, max })
}

/// Normalize raw scores over the dataset, aggregate, rank, and flag.
/// Persists the min/max statistics so later single images can be scored
/// against them.
pub fn cmd_scores(
    raw_csv: &Path,
    out_dir: &Path,
    weights: &AggregateWeights,
    order: FlagOrder,
    k: usize,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let mut rows = table::read_score_table(raw_csv)?;
    let stats = uncertainty::normalize_scores(&mut rows)?;
    uncertainty::rank_and_flag(&mut rows, k, order, weights)?;
    table::write_score_table(&out_dir.join("scores.csv"), &rows)?;
    let stat_pairs: Vec<(String, String)> = UeKind::ALL
        .into_iter()
        .flat_map(|kind| {
            [
                (
                    format!("min_{}", kind.as_str()),
                    stats.min.get(kind).to_string(),
                ),
                (
                    format!("max_{}", kind.as_str()),
                    stats.max.get(kind).to_string(),
                ),
            ]
        })
        .collect();
    kv::write(&out_dir.join("norm_stats.txt"), &stat_pairs)?;
    let mut entries = vec![
        ("w_conf".to_string(), weights.w_conf.to_string()),
        ("w_ent".to_string(), weights.w_ent.to_string()),
        ("w_mi".to_string(), weights.w_mi.to_string()),
        ("w_epkl".to_string(), weights.w_epkl.to_string()),
        ("order".to_string(), order.as_str().to_string()),
        ("k".to_string(), k.to_string()),
    ];
    entries.extend(stat_pairs);
    write_run_manifest(out_dir, "scores", &entries)
}

pub struct QpOptions {
    pub um: UmConfig,
    pub ue: UeKind,
    pub entropy_source: EntropySource,
    pub arch: QNetArch,
    pub config: QpTrainConfig,
}

/// Train a quality net on the corpus train split and save it together with
/// the uncertainty-model provenance needed to rebuild its inputs later.
pub fn cmd_train_qp(
    corpus_dir: &Path,
    net_paths: &[PathBuf],
    opts: &QpOptions,
    out_path: &Path,
) -> Result<()> {
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let corpus = load_corpus(corpus_dir)?;
    let train = corpus.of_split(Split::Train);
    let nets = load_nets(net_paths)?;
    let pairs =
        quality::make_training_pairs(&train, &nets, &opts.um, opts.ue, opts.entropy_source)?;
    let (qnet, final_mse) = quality::train_quality_net(&pairs, &opts.config, opts.arch)?;
    let mut extra = um_manifest_entries(&opts.um);
    extra.push(("ue".into(), opts.ue.as_str().to_string()));
    extra.push((
        "entropy_on".into(),
        opts.entropy_source.as_str().to_string(),
    ));
    netfile::save_quality_net(out_path, &qnet, &extra)?;
    let dir = out_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut entries = extra.clone();
    entries.push(("arch".into(), opts.arch.as_str().to_string()));
    entries.push(("epochs".into(), opts.config.epochs.to_string()));
    entries.push(("batch_size".into(), opts.config.batch_size.to_string()));
    entries.push(("lr".into(), opts.config.lr.to_string()));
    entries.push(("seed".into(), opts.config.seed.to_string()));
    entries.push(("final_train_mse".into(), final_mse.to_string()));
    write_run_manifest(&dir, "train_qp", &entries)
}

/// Reconstruct the provenance stored inside a quality-net file.
pub fn qnet_provenance(
    extra: &[(String, String)],
    path: &Path,
) -> Result<(UmConfig, UeKind, EntropySource)> {
    let um = um_from_entries(extra, path)?;
    let ue = UeKind::parse(kv::require(extra, "ue", path)?)?;
    let entropy = EntropySource::parse(kv::require(extra, "entropy_on", path)?)?;
    Ok((um, ue, entropy))
}

/// Evaluate a trained quality net on the corpus test split: regression
/// metrics plus the true-vs-predicted scatter data. Optionally fills the
/// `pred_dice`/`true_dice` columns of an existing score table.
pub fn cmd_eval_qp(
    corpus_dir: &Path,
    net_paths: &[PathBuf],
    qnet_path: &Path,
    out_dir: &Path,
    scores_csv: Option<&Path>,
) -> Result<MetricReport> {
    ensure_dir(out_dir)?;
    let corpus = load_corpus(corpus_dir)?;
    let test = corpus.of_split(Split::Test);
    let nets = load_nets(net_paths)?;
    let (qnet, extra) = netfile::load_quality_net(qnet_path)?;
    let (um, ue, entropy_source) = qnet_provenance(&extra, qnet_path)?;
    let pairs = quality::make_training_pairs(&test, &nets, &um, ue, entropy_source)?;
    let preds = exec::map_indexed(pairs.len(), |i| -> Result<quality::QPrediction> {
        quality::forward(&qnet, &pairs[i].inputs_for(qnet.arch))
    });
    let mut scatter = Vec::with_capacity(pairs.len());
    let mut y_true = Vec::with_capacity(pairs.len());
    let mut y_pred = Vec::with_capacity(pairs.len());
    let mut clamped = Vec::with_capacity(pairs.len());
    for (pair, pred) in pairs.iter().zip(preds) {
        let pred = pred?;
        scatter.push((pair.id.clone(), pair.true_dice, pred.raw));
        y_true.push(pair.true_dice);
        y_pred.push(pred.raw);
        clamped.push(pred.clamped);
    }
    let report = metrics::metric_report(&y_true, &y_pred)?;
    table::write_scatter(&out_dir.join("scatter.csv"), &scatter)?;
    let metrics_text = format!(
        "r2,pcc,rmse,n,poor,good,best\n{},{},{},{},{},{},{}\n",
        report.r2, report.pcc, report.rmse, report.n, report.poor, report.good, report.best
    );
    let metrics_path = out_dir.join("eval_metrics.csv");
    std::fs::write(&metrics_path, metrics_text).map_err(|e| Error::io(&metrics_path, e))?;

    if let Some(scores_path) = scores_csv {
        let mut rows = table::read_score_table(scores_path)?;
        for ((pair, &cl), &t) in pairs.iter().zip(&clamped).zip(&y_true) {
            if let Some(row) = rows.iter_mut().find(|r| r.id == pair.id) {
                row.pred_dice = Some(cl);
                row.true_dice = Some(t);
            }
        }
        table::write_score_table(scores_path, &rows)?;
    }

    write_run_manifest(
        out_dir,
        "eval_qp",
        &[
            ("qnet".into(), qnet_path.display().to_string()),
            ("arch".into(), qnet.arch.as_str().to_string()),
            ("ue".into(), ue.as_str().to_string()),
            ("um".into(), um.kind.as_str().to_string()),
            ("r2".into(), report.r2.to_string()),
            ("pcc".into(), report.pcc.to_string()),
            ("rmse".into(), report.rmse.to_string()),
        ],
    )?;
    Ok(report)
}

/// Re-rank a score table by its stored aggregate scores and emit the ranked
/// table plus the flagged top-k list.
pub fn cmd_rank(scores_csv: &Path, k: usize, order: FlagOrder, out_dir: &Path) -> Result<Vec<String>> {
    ensure_dir(out_dir)?;
    let mut rows = table::read_score_table(scores_csv)?;
    if rows.iter().any(|r| r.u_tot.is_none()) {
        return Err(Error::format(
            scores_csv,
            "score table has rows without u_tot; run the scores stage first",
        ));
    }
    rows.sort_by(|a, b| {
        let cmp = a
            .u_tot
            .unwrap()
            .partial_cmp(&b.u_tot.unwrap())
            .expect("finite scores");
        let cmp = match order {
            FlagOrder::Ascending => cmp,
            FlagOrder::Descending => cmp.reverse(),
        };
        cmp.then_with(|| a.id.cmp(&b.id))
    });
    for (i, row) in rows.iter_mut().enumerate() {
        row.rank = Some(i + 1);
        row.flagged = i < k;
    }
    table::write_score_table(&out_dir.join("ranked.csv"), &rows)?;
    let mut flag_text = String::from("rank,id,u_tot,pred_dice\n");
    let mut flagged_ids = Vec::new();
    for row in rows.iter().filter(|r| r.flagged) {
        flag_text.push_str(&format!(
            "{},{},{},{}\n",
            row.rank.unwrap(),
            row.id,
            row.u_tot.unwrap(),
            row.pred_dice.map(|v| v.to_string()).unwrap_or_default()
        ));
        flagged_ids.push(row.id.clone());
    }
    let flags_path = out_dir.join("flags.csv");
    std::fs::write(&flags_path, flag_text).map_err(|e| Error::io(&flags_path, e))?;
    write_run_manifest(
        out_dir,
        "rank",
        &[
            ("k".into(), k.to_string()),
            ("order".into(), order.as_str().to_string()),
            ("flagged".into(), flagged_ids.join(",")),
        ],
    )?;
    Ok(flagged_ids)
}

/// Grad-CAM heatmaps for one image: one PGM per requested branch, at the
/// branch output resolution (input side / 32).
pub fn cmd_gradcam(
    corpus_dir: &Path,
    net_paths: &[PathBuf],
    qnet_path: &Path,
    image_id: &str,
    branch: Option<usize>,
    apply_relu: bool,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let corpus = load_corpus(corpus_dir)?;
    let sample = corpus.find(image_id).ok_or_else(|| {
        Error::InvalidArgument(format!("image id '{image_id}' not present in the corpus"))
    })?;
    let nets = load_nets(net_paths)?;
    let (qnet, extra) = netfile::load_quality_net(qnet_path)?;
    let (um, ue, entropy_source) = qnet_provenance(&extra, qnet_path)?;
    let pairs = quality::make_training_pairs(&[sample], &nets, &um, ue, entropy_source)?;
    let inputs = pairs[0].inputs_for(qnet.arch);
    let branches: Vec<usize> = match branch {
        Some(b) => vec![b],
        None => (0..qnet.branches.len()).collect(),
    };
    for b in branches {
        let cam = quality::grad_cam(&qnet, &inputs, b, apply_relu)?;
        pgm::write(
            &out_dir.join(format!("gradcam_{image_id}_branch{b}.pgm")),
            &cam,
        )?;
    }
    write_run_manifest(
        out_dir,
        "gradcam",
        &[
            ("id".into(), image_id.to_string()),
            ("relu".into(), apply_relu.to_string()),
        ],
    )
}

/// One cell of the UM×UE comparison grid.
#[derive(Clone, Debug)]
pub struct GridCell {
    pub um: UmKind,
    pub ue: UeKind,
    pub r2: f64,
    pub pcc: f64,
    pub rmse: f64,
}

/// In-memory comparison harness: trains the backbones once, then for every
/// uncertainty model × estimate combination trains and evaluates a quality
/// net. Stacks are sampled once per model and shared across the four
/// estimates.
pub fn run_grid(
    samples: &[SyntheticSample],
    split: &[Split],
    seg_cfg: &SegTrainConfig,
    qp_cfg: &QpTrainConfig,
    um_base: &UmConfig,
    arch: QNetArch,
    entropy_source: EntropySource,
) -> Result<Vec<GridCell>> {
    let train: Vec<&SyntheticSample> = samples
        .iter()
        .zip(split)
        .filter(|(_, s)| **s == Split::Train)
        .map(|(s, _)| s)
        .collect();
    let test: Vec<&SyntheticSample> = samples
        .iter()
        .zip(split)
        .filter(|(_, s)| **s == Split::Test)
        .map(|(s, _)| s)
        .collect();

    let single = segmenter::train_segmenter(&train, seg_cfg)?;
    let ensemble: Vec<SegNet> = (0..um_base.ensemble_size)
        .map(|m| {
            let cfg = SegTrainConfig {
                seed: rng::derive_seed(seg_cfg.seed, &[TAG_ENSEMBLE_MEMBER, m as u64]),
                ..seg_cfg.clone()
            };
            segmenter::train_segmenter(&train, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for um_kind in [UmKind::Mcd, UmKind::Ensemble, UmKind::Tta] {
        let um = UmConfig {
            kind: um_kind,
            ..um_base.clone()
        };
        let nets: &[SegNet] = match um_kind {
            UmKind::Ensemble => &ensemble,
            _ => std::slice::from_ref(&single),
        };
        let train_bundles = quality::make_pair_bundles(&train, nets, &um, entropy_source)?;
        let test_bundles = quality::make_pair_bundles(&test, nets, &um, entropy_source)?;
        for ue in UeKind::ALL {
            let train_pairs: Vec<quality::QualityPair> =
                train_bundles.iter().map(|b| b.select(ue)).collect();
            let test_pairs: Vec<quality::QualityPair> =
                test_bundles.iter().map(|b| b.select(ue)).collect();
            let (qnet, _) = quality::train_quality_net(&train_pairs, qp_cfg, arch)?;
            let mut y_true = Vec::with_capacity(test_pairs.len());
            let mut y_pred = Vec::with_capacity(test_pairs.len());
            for pair in &test_pairs {
                let pred = quality::forward(&qnet, &pair.inputs_for(arch))?;
                y_true.push(pair.true_dice);
                y_pred.push(pred.raw);
            }
            cells.push(GridCell {
                um: um_kind,
                ue,
                r2: metrics::r2(&y_true, &y_pred)?,
                pcc: metrics::pcc(&y_true, &y_pred)?,
                rmse: metrics::rmse(&y_true, &y_pred)?,
            });
        }
    }
    Ok(cells)
}
