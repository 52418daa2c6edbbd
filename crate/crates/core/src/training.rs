//! Chronological splitting, losses, Adam and the epoch loop.

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::features::{denormalize, NormalizationParams, WindowedDataset};
use crate::metrics::Metrics;
use crate::model::{GcnRwz, ParamRegistry};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// 70/10/20 by sample index: validation and test sizes are rounded, the
/// training split takes the remainder.
pub fn split_ranges(s: usize) -> Result<SplitRanges> {
    if s < 10 {
        return Err(invalid(format!("need at least 10 samples to split, got {s}")));
    }
    let val = (0.1 * s as f64).round() as usize;
    let test = (0.2 * s as f64).round() as usize;
    let train = s - val - test;
    Ok(SplitRanges {
        train: 0..train,
        val: train..train + val,
        test: train + val..s,
    })
}

pub fn split_dataset(ds: &WindowedDataset) -> Result<(WindowedDataset, WindowedDataset, WindowedDataset)> {
    let r = split_ranges(ds.len())?;
    Ok((ds.subset(r.train), ds.subset(r.val), ds.subset(r.test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
}

fn check_same(tape: &Tape, pred: Var, target: Var) -> Result<()> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(shape_err("loss", tape.shape(pred), tape.shape(target)));
    }
    Ok(())
}

pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_same(tape, pred, target)?;
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

pub fn mae_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_same(tape, pred, target)?;
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

impl LossKind {
    pub fn apply(self, tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
        match self {
            LossKind::Mse => mse_loss(tape, pred, target),
            LossKind::Mae => mae_loss(tape, pred, target),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: ParamRegistry,
    pub v: ParamRegistry,
}

impl AdamState {
    pub fn new(params: &ParamRegistry, config: AdamConfig) -> Self {
        let zeros: ParamRegistry = params
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape())))
            .collect();
        AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update. Every gradient is validated before
    /// any parameter moves.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a String, &'a mut Tensor)>,
        grads: &ParamRegistry,
    ) -> Result<()> {
        for (name, g) in grads {
            let m = self
                .m
                .get(name)
                .ok_or_else(|| invalid(format!("gradient for unknown parameter {name}")))?;
            if m.shape() != g.shape() {
                return Err(shape_err("adam", m.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params {
            let Some(g) = grads.get(name) else {
                return Err(invalid(format!("missing gradient for {name}")));
            };
            let m = self.m.get_mut(name).expect("validated above");
            let v = self.v.get_mut(name).expect("validated above");
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            loss: LossKind::Mse,
            seed: 0,
        }
    }
}

/// One epoch of training. Wall time is kept out of the serialized record so
/// that histories of identical runs compare equal byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
    pub val_mae: f64,
    pub val_mape: Option<f64>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .min_by(|a, b| a.val_rmse.total_cmp(&b.val_rmse))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Parameters from the epoch with the lowest validation RMSE.
    pub best: GcnRwz,
    pub best_epoch: usize,
    /// Parameters after the final epoch.
    pub last: GcnRwz,
}

/// Normalized predictions for every sample of `ds`, in batches.
pub fn predict(model: &GcnRwz, ds: &WindowedDataset, batch_size: usize) -> Result<Tensor> {
    let bs = batch_size.max(1);
    let mut data = Vec::with_capacity(ds.targets.numel());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(bs) {
        let (x, _) = ds.batch(chunk);
        data.extend_from_slice(model.forward(&x)?.data());
    }
    let mut shape = ds.targets.shape().to_vec();
    shape[0] = ds.len();
    shape[2] = model.config().horizon;
    Tensor::new(&shape, data)
}

/// Metrics in MPH for `ds` under `norm`.
pub fn evaluate_dataset(
    model: &GcnRwz,
    ds: &WindowedDataset,
    norm: &NormalizationParams,
    batch_size: usize,
) -> Result<Metrics> {
    let pred = denormalize(&predict(model, ds, batch_size)?, norm)?;
    let truth = denormalize(&ds.targets, norm)?;
    Metrics::compute(pred.data(), truth.data())
}

/// Mini-batch Adam training with per-epoch validation.
pub fn train(
    model: GcnRwz,
    train_ds: &WindowedDataset,
    val_ds: &WindowedDataset,
    norm: &NormalizationParams,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if cfg.epochs == 0 {
        return Err(invalid("epochs must be at least 1"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(invalid("training and validation splits must be non-empty"));
    }
    let mut model = model;
    let mut adam = AdamState::new(
        model.parameters(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, GcnRwz)> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_ds.batch(chunk);
            let (loss, grads) = model.loss_and_gradients(&x, &y, |t, p, y| cfg.loss.apply(t, p, y))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {bi}")));
            }
            adam.step(model.parameters_mut(), &grads)?;
            loss_sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let val = evaluate_dataset(&model, val_ds, norm, cfg.batch_size.max(64))?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            val_rmse: val.rmse,
            val_mae: val.mae,
            val_mape: val.mape,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        if best.as_ref().map_or(true, |(r, _, _)| val.rmse < *r) {
            best = Some((val.rmse, epoch, model.clone()));
        }
        history.epochs.push(record);
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best: best_model,
        best_epoch,
        last: model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check_many;

    #[test]
    fn split_sizes() {
        let r = split_ranges(100).unwrap();
        assert_eq!((r.train.len(), r.val.len(), r.test.len()), (70, 10, 20));
        let r = split_ranges(10).unwrap();
        assert_eq!((r.train.len(), r.val.len(), r.test.len()), (7, 1, 2));
        assert!(split_ranges(9).is_err());
        for s in 10..500 {
            let r = split_ranges(s).unwrap();
            assert_eq!(r.train.end, r.val.start);
            assert_eq!(r.val.end, r.test.start);
            assert_eq!(r.test.end, s);
        }
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let y = t.constant(Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let l = mse_loss(&mut t, p, y).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let y2 = t.constant(Tensor::new(&[1, 2, 2], vec![0., 1., 2., 3.]).unwrap());
        let l = mse_loss(&mut t, p, y2).unwrap();
        assert_eq!(t.value(l).item(), 1.0);
        let bad = t.constant(Tensor::zeros(&[4]));
        assert!(mse_loss(&mut t, p, bad).is_err());

        let pred = Tensor::new(&[2, 1, 3], vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4]).unwrap();
        let target = Tensor::new(&[2, 1, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let mut t = Tape::new();
        let pv = t.param(pred.clone());
        let tv = t.constant(target.clone());
        let l = mse_loss(&mut t, pv, tv).unwrap();
        let g = t.backward(l).unwrap().get(&t, pv);
        for ((gi, a), b) in g.data().iter().zip(pred.data()).zip(target.data()) {
            assert!((gi - 2.0 * (a - b) / 6.0).abs() < 1e-15);
        }
        let err = finite_difference_check_many(
            |t, v| {
                let y = t.constant(target.clone());
                mse_loss(t, v[0], y)
            },
            &[pred],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    fn one_param(v: f64) -> ParamRegistry {
        [("p".to_string(), Tensor::scalar(v))].into_iter().collect()
    }

    #[test]
    fn adam_first_step() {
        let mut params = one_param(0.0);
        let mut st = AdamState::new(&params, AdamConfig::default());
        st.step(params.iter_mut(), &one_param(1.0)).unwrap();
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((params["p"].item() - want).abs() < 1e-15);
    }

    #[test]
    fn adam_two_steps_hand_unrolled() {
        let cfg = AdamConfig::default();
        let g = 0.37;
        let mut params = one_param(1.0);
        let mut st = AdamState::new(&params, cfg);
        for _ in 0..2 {
            st.step(params.iter_mut(), &one_param(g)).unwrap();
        }
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((params["p"].item() - p).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_grad_and_zero_lr() {
        let mut params = one_param(2.5);
        let mut st = AdamState::new(&params, AdamConfig::default());
        st.step(params.iter_mut(), &one_param(1.0)).unwrap();
        let (m1, v1) = (st.m["p"].item(), st.v["p"].item());
        st.step(params.iter_mut(), &one_param(0.0)).unwrap();
        assert_eq!(st.m["p"].item(), 0.9 * m1);
        assert_eq!(st.v["p"].item(), 0.999 * v1);

        let mut frozen = one_param(2.5);
        let mut st0 = AdamState::new(&frozen, AdamConfig { lr: 0.0, ..AdamConfig::default() });
        st0.step(frozen.iter_mut(), &one_param(3.0)).unwrap();
        assert_eq!(frozen["p"].item(), 2.5);

        let mut fresh = one_param(2.5);
        let mut st1 = AdamState::new(&fresh, AdamConfig::default());
        st1.step(fresh.iter_mut(), &one_param(0.0)).unwrap();
        assert_eq!(fresh["p"].item(), 2.5);
    }

    #[test]
    fn adam_rejects_non_finite_by_name() {
        let mut params = one_param(1.0);
        let mut st = AdamState::new(&params, AdamConfig::default());
        let err = st.step(params.iter_mut(), &one_param(f64::NAN)).unwrap_err();
        assert!(err.to_string().contains('p'));
        assert_eq!(params["p"].item(), 1.0);
        assert_eq!(st.t, 0);
    }
}
