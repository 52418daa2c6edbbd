//! End-to-end plumbing shared by the command line and the examples:
//! preprocessing a corpus, training, baselines, evaluation and ablation.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{format_timestamp, parse_timestamp, Corpus};
use crate::error::{invalid, Error, Result};
use crate::features::{
    construction_feature_map, denormalize, sliding_windows, window_count, FeatureMap, FusionVariant,
    NormalizationParams, WindowedDataset, STEP_SECONDS,
};
use crate::metrics::{report, MetricReport, Metrics};
use crate::model::{CheckpointMeta, GcnRwz, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{predict, split_ranges, train, EpochRecord, SplitRanges, TrainConfig, TrainOutcome};

pub const SECONDS_PER_DAY: i64 = 24 * 60 * 60;
pub const SLOTS_PER_DAY: usize = (SECONDS_PER_DAY / STEP_SECONDS) as usize;

/// A corpus cut into normalized, windowed train/val/test samples.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub history: usize,
    pub horizon: usize,
    /// Raw speeds in MPH.
    pub speeds: FeatureMap,
    /// Construction map at the configured radius, in [0, 1].
    pub construction: FeatureMap,
    pub norm: NormalizationParams,
    pub splits: SplitRanges,
    /// Source columns the normalization and historical average are fit on.
    pub train_cols: Range<usize>,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

impl Prepared {
    pub fn segment_ids(&self) -> &[String] {
        &self.speeds.segment_ids
    }

    /// S×N×P indicator of event-influenced target cells for `ds`.
    pub fn event_mask(&self, ds: &WindowedDataset) -> Tensor {
        let (n, t) = (self.speeds.n(), self.speeds.t());
        let p = self.horizon;
        let c = self.construction.values.data();
        let mut out = Vec::with_capacity(ds.len() * n * p);
        for &st in &ds.start_cols {
            for i in 0..n {
                for k in 0..p {
                    out.push(c[i * t + st + self.history + k]);
                }
            }
        }
        Tensor::new(&[ds.len(), n, p], out).expect("mask shape")
    }

    /// Timestamp of target step `k` (0-based) of a sample starting at `st`.
    pub fn target_timestamp(&self, st: usize, k: usize) -> i64 {
        self.speeds.timestamp(st + self.history + k)
    }
}

/// Normalize, window and split. Normalization statistics come from the
/// columns covered by training samples only, unless `norm` is supplied.
pub fn prepare(
    corpus: &Corpus,
    history: usize,
    horizon: usize,
    lambda: f64,
    include_construction: bool,
    norm: Option<&NormalizationParams>,
) -> Result<Prepared> {
    let speeds = corpus.speeds.clone();
    let t = speeds.t();
    let s = window_count(t, history, horizon, 1);
    let splits = split_ranges(s)
        .map_err(|e| Error::Data(format!("series of {t} steps gives {s} windows for H = {history}, P = {horizon}: {e}")))?;
    let train_cols = 0..splits.train.end - 1 + history + horizon;
    let norm = match norm {
        Some(n) if n.n() != speeds.n() => {
            return Err(Error::Data(format!(
                "normalization covers {} segments, data has {}",
                n.n(),
                speeds.n()
            )))
        }
        Some(n) => n.clone(),
        None => NormalizationParams::fit(&speeds, train_cols.clone())?,
    };
    let construction = construction_feature_map(&corpus.graph, &corpus.events, lambda, t, speeds.start)?;
    let xs = norm.apply(&speeds.values)?;
    let channels: Vec<&Tensor> = if include_construction {
        vec![&xs, &construction.values]
    } else {
        vec![&xs]
    };
    let all = sliding_windows(&channels, history, horizon, 1)?;
    Ok(Prepared {
        history,
        horizon,
        train: all.subset(splits.train.clone()),
        val: all.subset(splits.val.clone()),
        test: all.subset(splits.test.clone()),
        speeds,
        construction,
        norm,
        splits,
        train_cols,
    })
}

pub fn prepare_for(corpus: &Corpus, cfg: &ModelConfig, norm: Option<&NormalizationParams>) -> Result<Prepared> {
    prepare(corpus, cfg.history, cfg.horizon, cfg.lambda, cfg.include_construction, norm)
}

pub fn checkpoint_meta(corpus: &Corpus, prepared: &Prepared, adjacency: crate::graph::AdjacencyMode) -> CheckpointMeta {
    CheckpointMeta {
        segment_ids: corpus.graph.segment_ids().to_vec(),
        adjacency,
        normalization: Some(prepared.norm.clone()),
    }
}

/// Build, train and return the trained model together with the prepared data.
pub fn train_on_corpus(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainOutcome, Prepared)> {
    let mut cfg = model_cfg.clone();
    cfg.segments = corpus.graph.n();
    let prepared = prepare_for(corpus, &cfg, None)?;
    let model = GcnRwz::new(cfg, &corpus.graph)?;
    let outcome = train(model, &prepared.train, &prepared.val, &prepared.norm, train_cfg, on_epoch)?;
    Ok((outcome, prepared))
}

// ---------------------------------------------------------------------------
// Baselines

fn slot_of(ts: i64) -> usize {
    (ts.rem_euclid(SECONDS_PER_DAY) / STEP_SECONDS) as usize
}

/// Per-segment, per-time-of-day mean speed over `train_cols`, falling back to
/// the segment's training mean for slots never observed. Returns S×N×P MPH.
pub fn historical_average(speeds: &FeatureMap, train_cols: Range<usize>, ds: &WindowedDataset) -> Result<Tensor> {
    let (n, t) = (speeds.n(), speeds.t());
    if train_cols.is_empty() || train_cols.end > t {
        return Err(invalid(format!("training columns {train_cols:?} invalid for {t} steps")));
    }
    let d = speeds.values.data();
    let mut sum = vec![0.0; n * SLOTS_PER_DAY];
    let mut cnt = vec![0usize; SLOTS_PER_DAY];
    for col in train_cols.clone() {
        let slot = slot_of(speeds.timestamp(col));
        cnt[slot] += 1;
        for i in 0..n {
            sum[i * SLOTS_PER_DAY + slot] += d[i * t + col];
        }
    }
    let seg_mean: Vec<f64> = (0..n)
        .map(|i| d[i * t + train_cols.start..i * t + train_cols.end].iter().sum::<f64>() / train_cols.len() as f64)
        .collect();
    let p = ds.horizon;
    let mut out = Vec::with_capacity(ds.len() * n * p);
    for &st in &ds.start_cols {
        for i in 0..n {
            for k in 0..p {
                let slot = slot_of(speeds.timestamp(st + ds.history + k));
                out.push(if cnt[slot] > 0 {
                    sum[i * SLOTS_PER_DAY + slot] / cnt[slot] as f64
                } else {
                    seg_mean[i]
                });
            }
        }
    }
    Tensor::new(&[ds.len(), n, p], out)
}

/// Last observed speed repeated over the horizon. Returns S×N×P MPH.
pub fn persistence(speeds: &FeatureMap, ds: &WindowedDataset) -> Result<Tensor> {
    let (n, t) = (speeds.n(), speeds.t());
    let d = speeds.values.data();
    let p = ds.horizon;
    let mut out = Vec::with_capacity(ds.len() * n * p);
    for &st in &ds.start_cols {
        for i in 0..n {
            let last = d[i * t + st + ds.history - 1];
            out.extend(std::iter::repeat(last).take(p));
        }
    }
    Tensor::new(&[ds.len(), n, p], out)
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub horizon: usize,
    pub history: usize,
    pub test_samples: usize,
    pub models: Vec<ModelRow>,
}

impl EvaluationReport {
    pub fn row(&self, name: &str) -> Option<&MetricReport> {
        self.models.iter().find(|r| r.model == name).map(|r| &r.report)
    }
}

pub const HISTORICAL_AVERAGE: &str = "historical-average";
pub const PERSISTENCE: &str = "persistence";

pub fn model_label(cfg: &ModelConfig) -> &'static str {
    if cfg.include_construction {
        "GCN-RWZ"
    } else {
        "GCN-RWZ-minus"
    }
}

/// Test-split predictions of `model` in MPH.
pub fn test_predictions(model: &GcnRwz, prepared: &Prepared) -> Result<Tensor> {
    denormalize(&predict(model, &prepared.test, 64)?, &prepared.norm)
}

/// Model plus the two baselines on the test split. `model_pred` is S×N×P MPH.
pub fn evaluate_predictions(label: &str, model_pred: &Tensor, prepared: &Prepared) -> Result<EvaluationReport> {
    let test = &prepared.test;
    let truth = denormalize(&test.targets, &prepared.norm)?;
    let mask = prepared.event_mask(test);
    let ids = prepared.segment_ids();
    let ha = historical_average(&prepared.speeds, prepared.train_cols.clone(), test)?;
    let pers = persistence(&prepared.speeds, test)?;
    let mut models = Vec::new();
    for (name, pred) in [(label, model_pred), (HISTORICAL_AVERAGE, &ha), (PERSISTENCE, &pers)] {
        models.push(ModelRow {
            model: name.to_string(),
            report: report(pred, &truth, ids, None, Some(&mask))?,
        });
    }
    Ok(EvaluationReport {
        horizon: prepared.horizon,
        history: prepared.history,
        test_samples: test.len(),
        models,
    })
}

pub fn evaluate_model(model: &GcnRwz, prepared: &Prepared) -> Result<EvaluationReport> {
    let pred = test_predictions(model, prepared)?;
    evaluate_predictions(model_label(model.config()), &pred, prepared)
}

// ---------------------------------------------------------------------------
// Prediction tables

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub timestamp: String,
    pub segment_id: String,
    pub horizon_step: usize,
    pub predicted_mph: f64,
    /// Absent when the target lies beyond the observed series.
    pub true_mph: Option<f64>,
}

/// One row per (sample, segment, step) of S×N×P MPH predictions.
pub fn prediction_rows(
    pred: &Tensor,
    truth: Option<&Tensor>,
    start_cols: &[usize],
    speeds: &FeatureMap,
    history: usize,
) -> Vec<PredictionRow> {
    let [s, n, p] = pred.shape()[..] else { return Vec::new() };
    let mut rows = Vec::with_capacity(s * n * p);
    for (si, &st) in start_cols.iter().enumerate().take(s) {
        for i in 0..n {
            for k in 0..p {
                let idx = (si * n + i) * p + k;
                rows.push(PredictionRow {
                    timestamp: format_timestamp(speeds.timestamp(st + history + k)),
                    segment_id: speeds.segment_ids[i].clone(),
                    horizon_step: k + 1,
                    predicted_mph: pred.data()[idx],
                    true_mph: truth.map(|t| t.data()[idx]),
                });
            }
        }
    }
    rows
}

pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["timestamp", "segment_id", "horizon_step", "predicted_mph", "true_mph"])?;
    for r in rows {
        w.write_record([
            r.timestamp.clone(),
            r.segment_id.clone(),
            r.horizon_step.to_string(),
            r.predicted_mph.to_string(),
            r.true_mph.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Arrange externally supplied prediction rows into the S×N×P layout of the
/// test split. Every test cell must be covered.
pub fn predictions_for_test(rows: &[PredictionRow], prepared: &Prepared) -> Result<Tensor> {
    let mut lookup: HashMap<(i64, &str, usize), f64> = HashMap::with_capacity(rows.len());
    for r in rows {
        lookup.insert((parse_timestamp(&r.timestamp)?, r.segment_id.as_str(), r.horizon_step), r.predicted_mph);
    }
    let ids = prepared.segment_ids();
    let (n, p) = (ids.len(), prepared.horizon);
    let mut out = Vec::with_capacity(prepared.test.len() * n * p);
    for &st in &prepared.test.start_cols {
        for id in ids {
            for k in 0..p {
                let ts = prepared.target_timestamp(st, k);
                let v = lookup.get(&(ts, id.as_str(), k + 1)).ok_or_else(|| {
                    Error::Data(format!(
                        "predictions file has no row for {} / {id} / step {}",
                        format_timestamp(ts),
                        k + 1
                    ))
                })?;
                out.push(*v);
            }
        }
    }
    Tensor::new(&[prepared.test.len(), n, p], out)
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub rmse: f64,
    pub mae: f64,
    pub mape: Option<f64>,
    pub event_window: Option<Metrics>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub horizon: usize,
    pub epochs: usize,
    pub seed: u64,
    /// One row per speed-wave fusion function.
    pub fusion: Vec<AblationRow>,
    /// One row per construction-kernel radius.
    pub lambda: Vec<AblationRow>,
}

pub const ABLATION_LAMBDAS: [f64; 4] = [1.0, 3.0, 5.0, 7.0];

fn ablation_row(
    setting: String,
    corpus: &Corpus,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    progress: &mut dyn FnMut(&str, &EpochRecord),
) -> Result<AblationRow> {
    let (outcome, prepared) = train_on_corpus(corpus, cfg, train_cfg, |r| progress(&setting, r))?;
    let rep = evaluate_model(&outcome.best, &prepared)?;
    let row = &rep.models[0].report;
    Ok(AblationRow {
        setting,
        rmse: row.global.rmse,
        mae: row.global.mae,
        mape: row.global.mape,
        event_window: row.event_window.metrics,
        best_epoch: outcome.best_epoch,
    })
}

/// Train and test every fusion variant (at the configured λ) and every λ in
/// [`ABLATION_LAMBDAS`] (with the configured fusion), all from one seed.
pub fn ablate(
    corpus: &Corpus,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    mut progress: impl FnMut(&str, &EpochRecord),
) -> Result<AblationReport> {
    let base = ModelConfig {
        include_construction: true,
        ..base.clone()
    };
    let mut fusion = Vec::new();
    for v in FusionVariant::ALL {
        let cfg = ModelConfig { fusion: v, ..base.clone() };
        fusion.push(ablation_row(v.label().to_string(), corpus, &cfg, train_cfg, &mut progress)?);
    }
    let mut lambda = Vec::new();
    for l in ABLATION_LAMBDAS {
        let cfg = ModelConfig { lambda: l, ..base.clone() };
        lambda.push(ablation_row(format!("lambda={l}"), corpus, &cfg, train_cfg, &mut progress)?);
    }
    Ok(AblationReport {
        horizon: base.horizon,
        epochs: train_cfg.epochs,
        seed: train_cfg.seed,
        fusion,
        lambda,
    })
}
