use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::checkpoint::{save_checkpoint, CheckpointInfo, Progress};
use crate::dataset::{FoldSplit, Sample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, HeadMaps, LossWeights};
use crate::metrics::{aggregate_report, binarize, confusion_counts, MetricsReport, Scores};
use crate::model::{Cf2Net, ModelConfig};
use crate::nn::{
    apply_bn_observations, clip_global_norm, Ctx, Graph, Mode, Optimizer, ParamStore, Tensor,
};

/// Network input and targets for a batch, flattened `B×S×S`.
pub struct Batch {
    pub ids: Vec<String>,
    pub input: Tensor,
    pub mask: Vec<f64>,
    pub edge: Vec<f64>,
}

impl Batch {
    pub fn new(samples: &[&Sample], model: &ModelConfig) -> Result<Batch> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let s = first.size();
        if s != model.size {
            return Err(Error::Config(format!(
                "{}: prepared at {s}×{s} but the model expects {}×{}",
                first.id, model.size, model.size
            )));
        }
        let c = model.input_channels();
        let mut input = Vec::with_capacity(samples.len() * c * s * s);
        let mut mask = Vec::with_capacity(samples.len() * s * s);
        let mut edge = Vec::with_capacity(samples.len() * s * s);
        for sample in samples {
            if sample.size() != s {
                return Err(Error::Shape(format!(
                    "{}: size {} in a batch of size {s}",
                    sample.id,
                    sample.size()
                )));
            }
            input.extend_from_slice(sample.image.data());
            if model.use_superpixel {
                let sp = sample.superpixel.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "{}: the model takes a superpixel channel but the sample has none; \
                         prepare the data with superpixels enabled",
                        sample.id
                    ))
                })?;
                input.extend_from_slice(sp.data());
            }
            let unit = |b: &bool| if *b { 1.0 } else { 0.0 };
            mask.extend(sample.mask.data().iter().map(unit));
            edge.extend(sample.edge.data().iter().map(unit));
        }
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            input: Tensor::from_vec([samples.len(), c, s, s], input),
            mask,
            edge,
        })
    }
}

/// Loss of one step: the weighted total and each present component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub fusion: Option<f64>,
    pub aux: Option<f64>,
    pub edge: Option<f64>,
}

/// One optimizer step. The edge target enters only when the network has an
/// edge head. Fails with [`Error::Numerical`] on a non-finite loss or
/// gradient, naming the batch and the component.
pub fn train_step(
    net: &Cf2Net,
    store: &mut ParamStore,
    optimizer: &mut Optimizer,
    batch: &Batch,
    weights: &LossWeights,
    clip_norm: Option<f64>,
    label: &str,
) -> Result<StepLoss> {
    let mut graph = Graph::new();
    let x = graph.constant(batch.input.clone());
    let mut ctx = Ctx {
        graph: &mut graph,
        store,
        mode: Mode::Train,
    };
    let preds = net.forward(&mut ctx, &x)?.predictions;
    let as_f64 = |t: &Tensor| t.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
    let fusion = preds.fusion.as_ref().map(|v| as_f64(v.value()));
    let aux = as_f64(preds.aux.value());
    let edge = preds.edge.as_ref().map(|v| as_f64(v.value()));
    let image_len = batch.input.h() * batch.input.w();
    let loss = total_loss(
        HeadMaps {
            fusion: fusion.as_deref(),
            aux: Some(&aux),
            edge: edge.as_deref(),
        },
        &batch.mask,
        edge.as_ref().map(|_| &batch.edge[..]),
        image_len,
        weights,
    )?;
    let step = StepLoss {
        total: loss.value,
        fusion: loss.fusion.as_ref().map(|l| l.value),
        aux: loss.aux.as_ref().map(|l| l.value),
        edge: loss.edge.as_ref().map(|l| l.value),
    };
    for (name, v) in [
        ("fusion (L^F)", step.fusion),
        ("auxiliary (L^U)", step.aux),
        ("edge (L^E)", step.edge),
        ("total", Some(step.total)),
    ] {
        if let Some(v) = v.filter(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "{label}: {name} loss is {v} for images {:?}",
                batch.ids
            )));
        }
    }
    let grads = loss.head_grads(weights);
    let to_tensor =
        |g: Vec<f64>, shape| Tensor::from_vec(shape, g.into_iter().map(|v| v as f32).collect());
    let mut seeds = Vec::new();
    if let (Some(v), Some(g)) = (&preds.fusion, grads.fusion) {
        seeds.push((v, to_tensor(g, v.shape())));
    }
    if let Some(g) = grads.aux {
        seeds.push((&preds.aux, to_tensor(g, preds.aux.shape())));
    }
    if let (Some(v), Some(g)) = (&preds.edge, grads.edge) {
        seeds.push((v, to_tensor(g, v.shape())));
    }
    let mut param_grads = graph.backward(&seeds)?.into_params();
    let observations = graph.take_observations();
    drop(seeds);
    drop(preds);
    drop(graph);
    if let Some((id, _)) = param_grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::Numerical(format!(
            "{label}: non-finite gradient for {} on images {:?}",
            store.name(*id),
            batch.ids
        )));
    }
    if let Some(max) = clip_norm {
        clip_global_norm(&mut param_grads, max);
    }
    optimizer.step(store, &param_grads);
    apply_bn_observations(store, &observations);
    Ok(step)
}

/// Per-image scores of the thresholded segmentation map.
pub fn evaluate(
    net: &Cf2Net,
    store: &ParamStore,
    samples: &[&Sample],
    batch_size: usize,
) -> Result<Vec<(String, Scores)>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk, net.config())?;
        let maps = net.predict(store, batch.input)?;
        let seg = maps.segmentation();
        for (i, sample) in chunk.iter().enumerate() {
            let pred = binarize(seg.sample(i));
            let counts = confusion_counts(&pred, sample.mask.data())?;
            out.push((sample.id.clone(), Scores::from_counts(&counts)));
        }
    }
    Ok(out)
}

pub fn mean_dsc(scores: &[(String, Scores)]) -> f64 {
    scores.iter().map(|(_, s)| s.dsc).sum::<f64>() / scores.len().max(1) as f64
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    /// 1-based.
    pub epoch: usize,
    /// Batch means of the weighted total and its components.
    pub loss: f64,
    pub loss_fusion: Option<f64>,
    pub loss_aux: Option<f64>,
    pub loss_edge: Option<f64>,
    pub val_dsc: Option<f64>,
    pub seconds: f64,
    /// Unix time at the end of the epoch.
    pub timestamp: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

/// Append-only JSONL history, flushed after each record.
struct HistoryLog {
    file: Option<std::fs::File>,
    path: PathBuf,
}

impl HistoryLog {
    fn open(path: Option<PathBuf>) -> Result<HistoryLog> {
        let Some(path) = path else {
            return Ok(HistoryLog {
                file: None,
                path: PathBuf::new(),
            });
        };
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(HistoryLog {
            file: Some(file),
            path,
        })
    }

    fn append(&mut self, record: &EpochRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(record)?;
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Weights captured at an epoch.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub store: ParamStore,
    pub epoch: usize,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub net: Cf2Net,
    /// Highest validation DSC; earliest epoch on ties.
    pub best: Snapshot,
    pub last: Snapshot,
    pub history: TrainHistory,
    /// Every id that entered a training batch.
    pub trained_ids: BTreeSet<String>,
    pub held_out_ids: Vec<String>,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Seed for a quantity derived from the run seed; keeps folds and epochs
/// on independent random streams.
fn derive_seed(seed: u64, fold: usize, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((fold as u64) << 32)
        .wrapping_add(salt)
}

fn checkpoint_info(
    config: &TrainConfig,
    optimizer: &Optimizer,
    fold: usize,
    snap: &Snapshot,
    tag: &str,
) -> CheckpointInfo {
    CheckpointInfo {
        model: config.model.clone(),
        superpixel: config.superpixel_params().cloned(),
        optimizer: Some(optimizer.config().clone()),
        optimizer_steps: optimizer.steps(),
        progress: Progress {
            epoch: snap.epoch,
            fold: Some(fold),
            folds: Some(config.folds),
            seed: config.seed,
            val_dsc: snap.val_dsc,
            tag: tag.into(),
        },
    }
}

/// Train on every fold except `fold` and validate on `fold`. With `out`,
/// writes `history.jsonl`, `best.safetensors` and `final.safetensors`
/// there.
pub fn train_fold(
    config: &TrainConfig,
    fold: usize,
    folds: &FoldSplit,
    samples: &[Sample],
    out: Option<&Path>,
) -> Result<FoldOutcome> {
    config.validate()?;
    if fold >= folds.k {
        return Err(Error::Config(format!(
            "fold {fold} out of range for {} folds",
            folds.k
        )));
    }
    if folds.assignments.len() != samples.len() {
        return Err(Error::Config(format!(
            "fold split covers {} samples, dataset has {}",
            folds.assignments.len(),
            samples.len()
        )));
    }
    let train_idx = folds.training(fold);
    let val: Vec<&Sample> = folds.held_out(fold).iter().map(|&i| &samples[i]).collect();
    if train_idx.is_empty() || val.is_empty() {
        return Err(Error::Config(format!("fold {fold} leaves an empty split")));
    }
    let held_out_ids: BTreeSet<String> = val.iter().map(|s| s.id.clone()).collect();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = HistoryLog::open(out.map(|d| d.join("history.jsonl")))?;

    let (net, mut store) = Cf2Net::build(&config.model, derive_seed(config.seed, fold, 1))?;
    let mut optimizer = Optimizer::new(config.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, fold, 2));
    let mut history = TrainHistory::default();
    let mut trained_ids = BTreeSet::new();
    let mut best: Option<Snapshot> = None;
    let mut order = train_idx.clone();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut present = [false; 3];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let flipped: Vec<Sample>;
            let members: Vec<&Sample> = if config.augment_flip {
                flipped = chunk
                    .iter()
                    .map(|&i| {
                        if rng.gen_bool(0.5) {
                            samples[i].flipped()
                        } else {
                            samples[i].clone()
                        }
                    })
                    .collect();
                flipped.iter().collect()
            } else {
                chunk.iter().map(|&i| &samples[i]).collect()
            };
            for s in &members {
                if held_out_ids.contains(&s.id) {
                    return Err(Error::Dataset(format!(
                        "fold {fold}: held-out image {} reached a training batch",
                        s.id
                    )));
                }
                trained_ids.insert(s.id.clone());
            }
            let batch = Batch::new(&members, &config.model)?;
            let label = format!("fold {fold}, epoch {epoch}, batch {b}");
            let step = train_step(
                &net,
                &mut store,
                &mut optimizer,
                &batch,
                &config.loss,
                config.clip_norm,
                &label,
            )?;
            sums[0] += step.total;
            for (k, v) in [step.fusion, step.aux, step.edge].into_iter().enumerate() {
                if let Some(v) = v {
                    sums[k + 1] += v;
                    present[k] = true;
                }
            }
            batches += 1;
        }
        let n = batches as f64;
        let component = |k: usize| present[k].then(|| sums[k + 1] / n);
        let val_dsc = if epoch % config.validate_every == 0 || epoch == config.epochs {
            Some(mean_dsc(&evaluate(&net, &store, &val, config.batch_size)?))
        } else {
            None
        };
        let record = EpochRecord {
            fold,
            epoch,
            loss: sums[0] / n,
            loss_fusion: component(0),
            loss_aux: component(1),
            loss_edge: component(2),
            val_dsc,
            seconds: started.elapsed().as_secs_f64(),
            timestamp: unix_now(),
        };
        log::info!(
            "fold {fold} epoch {epoch}/{}: loss {:.4}{} ({:.1}s)",
            config.epochs,
            record.loss,
            val_dsc
                .map(|d| format!(", val DSC {d:.4}"))
                .unwrap_or_default(),
            record.seconds
        );
        log.append(&record)?;
        history.records.push(record);
        if let Some(d) = val_dsc {
            if best
                .as_ref()
                .and_then(|b| b.val_dsc)
                .map_or(true, |b| d > b)
            {
                best = Some(Snapshot {
                    store: store.clone(),
                    epoch,
                    val_dsc: Some(d),
                });
                if let Some(dir) = out {
                    let snap = best.as_ref().expect("just set");
                    let info = checkpoint_info(config, &optimizer, fold, snap, "best");
                    save_checkpoint(&dir.join("best.safetensors"), &info, &snap.store, None)?;
                }
            }
        }
    }
    let last = Snapshot {
        store: store.clone(),
        epoch: config.epochs,
        val_dsc: history.records.last().and_then(|r| r.val_dsc),
    };
    if let Some(dir) = out {
        let info = checkpoint_info(config, &optimizer, fold, &last, "final");
        save_checkpoint(
            &dir.join("final.safetensors"),
            &info,
            &store,
            Some(&optimizer),
        )?;
    }
    Ok(FoldOutcome {
        fold,
        net,
        best: best.expect("the last epoch is always validated"),
        last,
        history,
        trained_ids,
        held_out_ids: held_out_ids.into_iter().collect(),
    })
}

pub struct CrossValidation {
    pub report: MetricsReport,
    pub folds: Vec<FoldOutcome>,
}

/// `k`-fold cross validation: each fold's best checkpoint is scored on its
/// held-out images and the scores are aggregated.
///
/// Fold `f` writes under `out/fold<f>/`; the report goes to
/// `out/report.jsonl` and `out/report.txt`.
pub fn cross_validate(
    config: &TrainConfig,
    samples: &[Sample],
    out: Option<&Path>,
) -> Result<CrossValidation> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("cross validation needs samples".into()));
    }
    let split = crate::dataset::make_folds(samples.len(), config.folds, config.seed)?;
    let mut outcomes = Vec::with_capacity(split.k);
    let mut per_fold = Vec::with_capacity(split.k);
    for fold in 0..split.k {
        let dir = out.map(|d| d.join(format!("fold{fold}")));
        let outcome = train_fold(config, fold, &split, samples, dir.as_deref())?;
        let held: Vec<&Sample> = split.held_out(fold).iter().map(|&i| &samples[i]).collect();
        per_fold.push(evaluate(
            &outcome.net,
            &outcome.best.store,
            &held,
            config.batch_size,
        )?);
        outcomes.push(outcome);
    }
    let mut report = aggregate_report(&per_fold)?;
    report.metadata.insert(
        "checkpoint".into(),
        "best validation DSC per fold (validation = held-out fold)".into(),
    );
    report.metadata.insert(
        "best_epochs".into(),
        outcomes
            .iter()
            .map(|o| o.best.epoch.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    report
        .metadata
        .insert("epochs".into(), config.epochs.to_string());
    report
        .metadata
        .insert("folds".into(), config.folds.to_string());
    report
        .metadata
        .insert("seed".into(), config.seed.to_string());
    if let Some(dir) = out {
        write_report(dir, "report", &report)?;
    }
    Ok(CrossValidation {
        report,
        folds: outcomes,
    })
}

/// `<stem>.jsonl` and a human-readable `<stem>.txt`.
pub fn write_report(dir: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let jsonl = dir.join(format!("{stem}.jsonl"));
    std::fs::write(&jsonl, report.to_jsonl()?).map_err(|e| Error::io(&jsonl, e))?;
    let txt = dir.join(format!("{stem}.txt"));
    std::fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))
}
