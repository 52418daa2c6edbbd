//! Forecast error metrics in MPH, with per-segment, per-horizon and
//! event-window breakdowns.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::features::{denormalize, NormalizationParams};
use crate::tensor::Tensor;

/// Cells whose true speed is below this are left out of MAPE.
pub const MAPE_EPSILON: f64 = 1.0;

fn check(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(shape_err("metric", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(invalid("metric over an empty selection"));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    /// Percent.
    pub value: f64,
    pub excluded: usize,
}

pub fn mape(pred: &[f64], truth: &[f64], epsilon: f64) -> Result<Mape> {
    check(pred, truth)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if *t >= epsilon {
            sum += (p - t).abs() / t;
            used += 1;
        }
    }
    if used == 0 {
        return Err(invalid(format!("every cell has true speed below {epsilon} MPH; MAPE undefined")));
    }
    Ok(Mape {
        value: 100.0 * sum / used as f64,
        excluded: pred.len() - used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// `None` when every cell fell below the MAPE threshold.
    pub mape: Option<f64>,
    pub cells: usize,
    pub mape_excluded: usize,
}

impl Metrics {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        let m = mape(pred, truth, MAPE_EPSILON).ok();
        Ok(Metrics {
            rmse: rmse(pred, truth)?,
            mae: mae(pred, truth)?,
            mape: m.map(|m| m.value),
            cells: pred.len(),
            mape_excluded: m.map_or(pred.len(), |m| m.excluded),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub segment_id: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based forecast step.
    pub step: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventWindowMetrics {
    pub cells: usize,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub global: Metrics,
    pub per_segment: Vec<SegmentMetrics>,
    pub per_horizon: Vec<HorizonMetrics>,
    pub event_window: EventWindowMetrics,
}

/// Full breakdown for S×N×P forecasts. With `norm`, both tensors are taken
/// as normalized and mapped back to MPH first. `event_mask` is S×N×P with
/// positive entries marking event-influenced cells.
pub fn report(
    pred: &Tensor,
    truth: &Tensor,
    segment_ids: &[String],
    norm: Option<&NormalizationParams>,
    event_mask: Option<&Tensor>,
) -> Result<MetricReport> {
    if pred.shape() != truth.shape() {
        return Err(shape_err("report", pred.shape(), truth.shape()));
    }
    let [s, n, p] = pred.shape()[..] else {
        return Err(invalid(format!("report expects S×N×P, got {:?}", pred.shape())));
    };
    if segment_ids.len() != n {
        return Err(invalid(format!("{} segment ids for {n} segments", segment_ids.len())));
    }
    let (pred, truth) = match norm {
        Some(np) => (denormalize(pred, np)?, denormalize(truth, np)?),
        None => (pred.clone(), truth.clone()),
    };
    let (pd, td) = (pred.data(), truth.data());
    let gather = |keep: &dyn Fn(usize, usize, usize) -> bool| -> (Vec<f64>, Vec<f64>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for si in 0..s {
            for i in 0..n {
                for k in 0..p {
                    if keep(si, i, k) {
                        let idx = (si * n + i) * p + k;
                        a.push(pd[idx]);
                        b.push(td[idx]);
                    }
                }
            }
        }
        (a, b)
    };

    let global = Metrics::compute(pd, td)?;
    let per_segment = segment_ids
        .iter()
        .enumerate()
        .map(|(seg, id)| {
            let (a, b) = gather(&|_, i, _| i == seg);
            Ok(SegmentMetrics {
                segment_id: id.clone(),
                metrics: Metrics::compute(&a, &b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let per_horizon = (0..p)
        .map(|step| {
            let (a, b) = gather(&|_, _, k| k == step);
            Ok(HorizonMetrics {
                step: step + 1,
                metrics: Metrics::compute(&a, &b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let event_window = match event_mask {
        Some(mask) => {
            if mask.shape() != pred.shape() {
                return Err(shape_err("event mask", pred.shape(), mask.shape()));
            }
            let md = mask.data();
            let (a, b) = gather(&|si, i, k| md[(si * n + i) * p + k] > 0.0);
            EventWindowMetrics {
                cells: a.len(),
                metrics: if a.is_empty() { None } else { Some(Metrics::compute(&a, &b)?) },
            }
        }
        None => EventWindowMetrics { cells: 0, metrics: None },
    };

    Ok(MetricReport {
        global,
        per_segment,
        per_horizon,
        event_window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_cases() {
        assert_eq!(rmse(&[3.0, -4.0], &[0.0, 0.0]).unwrap(), 12.5f64.sqrt());
        assert_eq!(mae(&[3.0, -4.0], &[0.0, 0.0]).unwrap(), 3.5);
        assert_eq!(mape(&[45.0], &[50.0], 1.0).unwrap().value, 10.0);
        assert_eq!(rmse(&[5.0, 7.0], &[3.0, 5.0]).unwrap(), 2.0);
        assert_eq!(rmse(&[1.5, 2.5], &[1.5, 2.5]).unwrap(), 0.0);
    }

    #[test]
    fn mape_exclusion() {
        let m = mape(&[1.0, 45.0], &[0.5, 50.0], 1.0).unwrap();
        assert_eq!(m.excluded, 1);
        assert_eq!(m.value, 10.0);
        assert!(mape(&[1.0], &[0.5], 1.0).is_err());
        assert!(rmse(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rmse_dominates_mae() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.gen_range(1..20);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            assert!(rmse(&a, &b).unwrap() >= mae(&a, &b).unwrap() - 1e-12);
        }
    }

    #[test]
    fn report_structure() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let truth = Tensor::new(&[2, 2, 3], (0..12).map(|v| 40.0 + v as f64).collect()).unwrap();
        let pred = truth.map(|v| v + 2.0);
        let r = report(&pred, &truth, &ids, None, None).unwrap();
        assert!((r.global.rmse - 2.0).abs() < 1e-12);
        assert_eq!(r.per_horizon.len(), 3);
        assert_eq!(r.per_segment.len(), 2);
        assert_eq!(r.event_window.cells, 0);
        assert!(r.event_window.metrics.is_none());

        let mut mask = Tensor::zeros(&[2, 2, 3]);
        mask.set(&[1, 0, 2], 0.3);
        let r = report(&pred, &truth, &ids, None, Some(&mask)).unwrap();
        assert_eq!(r.event_window.cells, 1);
        assert!((r.event_window.metrics.unwrap().mae - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_segment_matches_global() {
        let ids = vec!["only".to_string()];
        let truth = Tensor::new(&[3, 1, 2], vec![50., 40., 30., 20., 60., 55.]).unwrap();
        let pred = Tensor::new(&[3, 1, 2], vec![48., 41., 33., 20., 58., 50.]).unwrap();
        let r = report(&pred, &truth, &ids, None, None).unwrap();
        assert_eq!(r.per_segment[0].metrics, r.global);
    }
}
