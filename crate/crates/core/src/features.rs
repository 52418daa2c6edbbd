//! Feature maps, construction-influence kernel, fusion into the speed wave,
//! min-max normalization and sliding-window sample extraction.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::RoadGraph;
use crate::tensor::Tensor;

/// Time step of every feature map, in minutes.
pub const STEP_MINUTES: i64 = 5;
pub const STEP_SECONDS: i64 = STEP_MINUTES * 60;

/// Default construction-kernel radius in miles.
pub const DEFAULT_LAMBDA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Speed,
    Construction,
}

/// An N×T channel of per-segment values at 5-minute spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub kind: FeatureKind,
    pub segment_ids: Vec<String>,
    pub values: Tensor,
    /// Epoch seconds of column 0.
    pub start: i64,
}

impl FeatureMap {
    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn t(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn timestamp(&self, col: usize) -> i64 {
        self.start + col as i64 * STEP_SECONDS
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let t = self.t();
        &self.values.data()[i * t..(i + 1) * t]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructionEvent {
    pub segment_id: String,
    /// Epoch seconds, inclusive.
    pub start: i64,
    /// Epoch seconds, exclusive.
    pub end: i64,
}

impl ConstructionEvent {
    pub fn is_active(&self, ts: i64) -> bool {
        self.start <= ts && ts < self.end
    }
}

/// `max(0, 1 − (dis/λ)²)`.
pub fn construction_kernel(dis: f64, lambda: f64) -> f64 {
    (1.0 - (dis / lambda).powi(2)).max(0.0)
}

/// Build the construction map: per cell, the strongest kernel value over all
/// events active at that time, using shortest-path miles as distance.
pub fn construction_feature_map(
    g: &RoadGraph,
    events: &[ConstructionEvent],
    lambda: f64,
    t: usize,
    start: i64,
) -> Result<FeatureMap> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("lambda must be positive, got {lambda}")));
    }
    let n = g.n();
    let mut values = Tensor::zeros(&[n, t]);
    for ev in events {
        let src = g.index_of(&ev.segment_id)?;
        if ev.start >= ev.end {
            return Err(invalid(format!(
                "event on `{}` has start {} not before end {}",
                ev.segment_id, ev.start, ev.end
            )));
        }
        let first = ((ev.start - start).max(0) + STEP_SECONDS - 1) / STEP_SECONDS;
        let last = ((ev.end - start + STEP_SECONDS - 1) / STEP_SECONDS).clamp(0, t as i64);
        let first = first.min(last) as usize;
        let last = last as usize;
        if first >= last {
            continue;
        }
        let dist = g.shortest_paths_from(src);
        let data = values.data_mut();
        for (v, &d) in dist.iter().enumerate() {
            let k = construction_kernel(d, lambda);
            if k <= 0.0 {
                continue;
            }
            for col in first..last {
                debug_assert!(ev.is_active(start + col as i64 * STEP_SECONDS));
                let cell = &mut data[v * t + col];
                *cell = cell.max(k);
            }
        }
    }
    Ok(FeatureMap {
        kind: FeatureKind::Construction,
        segment_ids: g.segment_ids().to_vec(),
        values,
        start,
    })
}

/// Speed-wave fusion functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    /// `W_s ⊙ X^s + W_c ⊙ X^c`
    #[default]
    LearnedBoth,
    /// `X^s + W_c ⊙ X^c`
    LearnedCOnly,
    /// `X^s ⊙ X^s + W_c`
    Degenerate,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 3] = [
        FusionVariant::LearnedBoth,
        FusionVariant::LearnedCOnly,
        FusionVariant::Degenerate,
    ];

    pub fn uses_speed_weight(self) -> bool {
        matches!(self, FusionVariant::LearnedBoth)
    }

    pub fn label(self) -> &'static str {
        match self {
            FusionVariant::LearnedBoth => "Ws*Xs + Wc*Xc",
            FusionVariant::LearnedCOnly => "Xs + Wc*Xc",
            FusionVariant::Degenerate => "Xs*Xs + Wc",
        }
    }
}

/// Fusion on the tape. Weights broadcast against `xs` (`[.., N, T]`), so they
/// may be full `[N, T]` maps or `[N, 1]` per-segment columns. `xc`/`wc` are
/// `None` for the construction-free model.
pub fn fuse_vars(
    tape: &mut Tape,
    xs: Var,
    xc: Option<Var>,
    ws: Option<Var>,
    wc: Option<Var>,
    variant: FusionVariant,
) -> Result<Var> {
    let speed = match variant {
        FusionVariant::LearnedBoth => match ws {
            Some(w) => tape.mul(w, xs)?,
            None => return Err(invalid("learned-both fusion needs W_s")),
        },
        FusionVariant::LearnedCOnly => xs,
        FusionVariant::Degenerate => tape.mul(xs, xs)?,
    };
    let Some(wc) = wc else { return Ok(speed) };
    let term = match variant {
        FusionVariant::Degenerate => wc,
        _ => {
            let xc = xc.ok_or_else(|| invalid("construction weight given without construction map"))?;
            tape.mul(wc, xc)?
        }
    };
    let out = tape.add(speed, term)?;
    let (a, b) = (tape.shape(xs).to_vec(), tape.shape(out).to_vec());
    if a != b {
        return Err(shape_err("fuse", &a, &b));
    }
    Ok(out)
}

/// Plain-value fusion of N×T maps with N×T weights.
pub fn fuse(xs: &Tensor, xc: &Tensor, ws: &Tensor, wc: &Tensor, variant: FusionVariant) -> Result<Tensor> {
    for t in [xc, ws, wc] {
        if t.shape() != xs.shape() {
            return Err(shape_err("fuse", xs.shape(), t.shape()));
        }
    }
    let mut tape = Tape::new();
    let v = [xs, xc, ws, wc].map(|t| tape.constant(t.clone()));
    let out = fuse_vars(&mut tape, v[0], Some(v[1]), Some(v[2]), Some(v[3]), variant)?;
    Ok(tape.value(out).clone())
}

/// Per-segment min/max used for normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationParams {
    /// Fit over the finite values of `cols` in every row.
    pub fn fit(fmap: &FeatureMap, cols: Range<usize>) -> Result<Self> {
        let (n, t) = (fmap.n(), fmap.t());
        if cols.end > t || cols.is_empty() {
            return Err(invalid(format!("normalization range {cols:?} invalid for T = {t}")));
        }
        let mut min = Vec::with_capacity(n);
        let mut max = Vec::with_capacity(n);
        for i in 0..n {
            let finite = fmap.row(i)[cols.clone()].iter().copied().filter(|v| v.is_finite());
            let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if lo > hi {
                let id = fmap.segment_ids.get(i).cloned().unwrap_or_else(|| i.to_string());
                return Err(Error::Data(format!("segment `{id}` has no finite values to normalize")));
            }
            min.push(lo);
            max.push(hi);
        }
        Ok(Self { min, max })
    }

    pub fn n(&self) -> usize {
        self.min.len()
    }

    pub fn normalize_value(&self, seg: usize, v: f64) -> f64 {
        let range = self.max[seg] - self.min[seg];
        if range > 0.0 {
            (v - self.min[seg]) / range
        } else {
            0.5
        }
    }

    pub fn denormalize_value(&self, seg: usize, v: f64) -> f64 {
        let range = self.max[seg] - self.min[seg];
        if range > 0.0 {
            v * range + self.min[seg]
        } else {
            self.min[seg]
        }
    }

    /// Normalize an N×T map (rows are segments).
    pub fn apply(&self, values: &Tensor) -> Result<Tensor> {
        self.map_segments(values, |s, v| self.normalize_value(s, v))
    }

    fn map_segments(&self, values: &Tensor, f: impl Fn(usize, f64) -> f64) -> Result<Tensor> {
        let axis = match values.rank() {
            2 => 0,
            3 => 1,
            _ => return Err(invalid(format!("expected N×T or S×N×P values, got {:?}", values.shape()))),
        };
        let shape = values.shape();
        if shape[axis] != self.n() {
            return Err(shape_err("normalization", shape, &[self.n()]));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let n = self.n();
        let data = values
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f((i / inner) % n, v))
            .collect();
        Tensor::new(shape, data)
    }
}

/// Per-segment min-max normalization over the whole map.
pub fn min_max_normalize(fmap: &FeatureMap) -> Result<(Tensor, NormalizationParams)> {
    let params = NormalizationParams::fit(fmap, 0..fmap.t())?;
    Ok((params.apply(&fmap.values)?, params))
}

/// Inverse of normalization. Accepts N×T maps or S×N×P prediction tensors
/// (segment axis 0 or 1 respectively).
pub fn denormalize(values: &Tensor, params: &NormalizationParams) -> Result<Tensor> {
    params.map_segments(values, |s, v| params.denormalize_value(s, v))
}

/// Supervised samples cut from aligned channels.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    /// S×C×N×H
    pub inputs: Tensor,
    /// S×N×P
    pub targets: Tensor,
    pub history: usize,
    pub horizon: usize,
    /// Column of each sample's first input step in the source series.
    pub start_cols: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.start_cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start_cols.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn n(&self) -> usize {
        self.inputs.shape()[2]
    }

    fn sample_sizes(&self) -> (usize, usize) {
        let s = self.inputs.shape();
        (s[1] * s[2] * s[3], self.targets.shape()[1] * self.targets.shape()[2])
    }

    /// Samples in `range`, order preserved.
    pub fn subset(&self, range: Range<usize>) -> WindowedDataset {
        let (ins, tgs) = self.sample_sizes();
        let mut ishape = self.inputs.shape().to_vec();
        let mut tshape = self.targets.shape().to_vec();
        ishape[0] = range.len();
        tshape[0] = range.len();
        WindowedDataset {
            inputs: Tensor::new(&ishape, self.inputs.data()[range.start * ins..range.end * ins].to_vec())
                .expect("subset shape"),
            targets: Tensor::new(&tshape, self.targets.data()[range.start * tgs..range.end * tgs].to_vec())
                .expect("subset shape"),
            history: self.history,
            horizon: self.horizon,
            start_cols: self.start_cols[range].to_vec(),
        }
    }

    /// Gather `(inputs, targets)` for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let (ins, tgs) = self.sample_sizes();
        let mut xi = Vec::with_capacity(indices.len() * ins);
        let mut yi = Vec::with_capacity(indices.len() * tgs);
        for &s in indices {
            xi.extend_from_slice(&self.inputs.data()[s * ins..(s + 1) * ins]);
            yi.extend_from_slice(&self.targets.data()[s * tgs..(s + 1) * tgs]);
        }
        let mut ishape = self.inputs.shape().to_vec();
        let mut tshape = self.targets.shape().to_vec();
        ishape[0] = indices.len();
        tshape[0] = indices.len();
        (
            Tensor::new(&ishape, xi).expect("batch shape"),
            Tensor::new(&tshape, yi).expect("batch shape"),
        )
    }
}

/// Number of windows for series length `t`.
pub fn window_count(t: usize, history: usize, horizon: usize, stride: usize) -> usize {
    if t < history + horizon || stride == 0 {
        0
    } else {
        (t - history - horizon) / stride + 1
    }
}

/// Cut stride-spaced windows. `channels[0]` is the speed channel and supplies
/// the targets; every channel is an N×T tensor.
pub fn sliding_windows(
    channels: &[&Tensor],
    history: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowedDataset> {
    let first = channels.first().ok_or_else(|| invalid("no channels to window"))?;
    let [n, t] = first.shape()[..] else {
        return Err(invalid(format!("channel must be N×T, got {:?}", first.shape())));
    };
    for c in channels {
        if c.shape() != first.shape() {
            return Err(shape_err("sliding_windows", first.shape(), c.shape()));
        }
    }
    if history == 0 || horizon == 0 || stride == 0 {
        return Err(invalid("history, horizon and stride must be positive"));
    }
    if t < history + horizon {
        return Err(invalid(format!(
            "series of length {t} is too short: need at least H + P = {}",
            history + horizon
        )));
    }
    let s = window_count(t, history, horizon, stride);
    let c = channels.len();
    let mut inputs = Vec::with_capacity(s * c * n * history);
    let mut targets = Vec::with_capacity(s * n * horizon);
    let mut start_cols = Vec::with_capacity(s);
    for k in 0..s {
        let st = k * stride;
        start_cols.push(st);
        for ch in channels {
            for i in 0..n {
                inputs.extend_from_slice(&ch.data()[i * t + st..i * t + st + history]);
            }
        }
        for i in 0..n {
            let o = i * t + st + history;
            targets.extend_from_slice(&first.data()[o..o + horizon]);
        }
    }
    Ok(WindowedDataset {
        inputs: Tensor::new(&[s, c, n, history], inputs)?,
        targets: Tensor::new(&[s, n, horizon], targets)?,
        history,
        horizon,
        start_cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, AdjacencyMode, Edge};

    fn chain() -> RoadGraph {
        build_graph(
            &[],
            &[Edge::new("a", "b", 1.5), Edge::new("b", "c", 1.5), Edge::new("c", "d", 2.0)],
            AdjacencyMode::Gaussian,
        )
        .unwrap()
    }

    fn fmap(rows: &[Vec<f64>]) -> FeatureMap {
        FeatureMap {
            kind: FeatureKind::Speed,
            segment_ids: (0..rows.len()).map(|i| format!("s{i}")).collect(),
            values: Tensor::from_rows(rows),
            start: 0,
        }
    }

    #[test]
    fn kernel_values() {
        assert_eq!(construction_kernel(0.0, 3.0), 1.0);
        assert_eq!(construction_kernel(3.0, 3.0), 0.0);
        assert_eq!(construction_kernel(4.0, 3.0), 0.0);
        assert_eq!(construction_kernel(1.5, 3.0), 0.75);
    }

    #[test]
    fn construction_map_from_event() {
        let g = chain();
        let ev = ConstructionEvent {
            segment_id: "a".into(),
            start: 2 * STEP_SECONDS,
            end: 4 * STEP_SECONDS,
        };
        let m = construction_feature_map(&g, &[ev], 3.0, 6, 0).unwrap();
        assert_eq!(m.row(0), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.row(1), &[0.0, 0.0, 0.75, 0.75, 0.0, 0.0]);
        // c is 3 miles away: exactly on the support boundary
        assert_eq!(m.row(2), &[0.0; 6]);
        assert_eq!(m.row(3), &[0.0; 6]);
    }

    #[test]
    fn overlapping_events_take_maximum() {
        let g = chain();
        let evs = [
            ConstructionEvent { segment_id: "a".into(), start: 0, end: 3 * STEP_SECONDS },
            ConstructionEvent { segment_id: "b".into(), start: STEP_SECONDS, end: 2 * STEP_SECONDS },
        ];
        let m = construction_feature_map(&g, &evs, 3.0, 3, 0).unwrap();
        assert_eq!(m.row(1), &[0.75, 1.0, 0.75]);
        assert_eq!(m.row(0), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn construction_map_errors() {
        let g = chain();
        let bad = ConstructionEvent { segment_id: "nope".into(), start: 0, end: 10 };
        let err = construction_feature_map(&g, &[bad], 3.0, 4, 0).unwrap_err();
        assert!(err.to_string().contains("nope"));
        assert!(construction_feature_map(&g, &[], 0.0, 4, 0).is_err());
        assert!(construction_feature_map(&g, &[], -1.0, 4, 0).is_err());
    }

    #[test]
    fn fusion_identities() {
        let xs = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]);
        let xc = Tensor::from_rows(&[vec![1., 0.], vec![0., 1.]]);
        let ones = Tensor::ones(&[2, 2]);
        let zeros = Tensor::zeros(&[2, 2]);
        assert_eq!(fuse(&xs, &xc, &ones, &zeros, FusionVariant::LearnedBoth).unwrap(), xs);
        let half = Tensor::full(&[2, 2], 0.5);
        let any = Tensor::full(&[2, 2], 7.0);
        assert_eq!(
            fuse(&xs, &zeros, &half, &any, FusionVariant::LearnedBoth).unwrap(),
            xs.map(|v| v * 0.5)
        );
        let two = Tensor::full(&[2, 2], 2.0);
        let out = fuse(&xs, &xc, &half, &two, FusionVariant::LearnedBoth).unwrap();
        assert_eq!(out.data(), &[2.5, 1.0, 1.5, 4.0]);
        assert_eq!(
            fuse(&xs, &xc, &half, &two, FusionVariant::LearnedCOnly).unwrap().data(),
            &[3.0, 2.0, 3.0, 6.0]
        );
        assert_eq!(
            fuse(&xs, &xc, &half, &two, FusionVariant::Degenerate).unwrap().data(),
            &[3.0, 6.0, 11.0, 18.0]
        );
        assert!(fuse(&xs, &Tensor::zeros(&[2, 3]), &half, &two, FusionVariant::LearnedBoth).is_err());
    }

    #[test]
    fn normalization_rules() {
        let (out, p) = min_max_normalize(&fmap(&[vec![10., 20., 30.], vec![42., 42., 42.]])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0, 0.5, 0.5, 0.5]);
        let back = denormalize(&out, &p).unwrap();
        assert_eq!(back.data(), &[10., 20., 30., 42., 42., 42.]);
        assert_eq!(p.denormalize_value(0, 0.0), 10.0);
        assert_eq!(p.denormalize_value(0, 1.0), 30.0);
        assert!(denormalize(&Tensor::zeros(&[3, 2]), &p).is_err());
    }

    #[test]
    fn all_missing_row_is_named() {
        let err = min_max_normalize(&fmap(&[vec![1.0, 2.0], vec![f64::NAN, f64::NAN]])).unwrap_err();
        assert!(err.to_string().contains("s1"), "{err}");
    }

    #[test]
    fn window_counts_and_alignment() {
        let t = 100;
        let speed = Tensor::new(&[2, t], (0..2 * t).map(|v| v as f64).collect()).unwrap();
        let ds = sliding_windows(&[&speed], 12, 3, 1).unwrap();
        assert_eq!(ds.len(), 86);
        assert_eq!(ds.inputs.shape(), &[86, 1, 2, 12]);
        assert_eq!(ds.targets.at(&[0, 0, 0]), 12.0);
        assert_eq!(ds.targets.at(&[0, 1, 2]), (t + 14) as f64);
        assert_eq!(ds.inputs.at(&[5, 0, 1, 11]), (t + 16) as f64);

        let exact = sliding_windows(&[&Tensor::zeros(&[1, 15])], 12, 3, 1).unwrap();
        assert_eq!(exact.len(), 1);
        let err = sliding_windows(&[&Tensor::zeros(&[1, 14])], 12, 3, 1).unwrap_err();
        assert!(err.to_string().contains("15"), "{err}");
        assert_eq!(sliding_windows(&[&speed], 12, 3, 4).unwrap().len(), (100 - 15) / 4 + 1);
    }

    #[test]
    fn subset_and_batch() {
        let speed = Tensor::new(&[2, 20], (0..40).map(f64::from).collect()).unwrap();
        let cons = speed.map(|v| -v);
        let ds = sliding_windows(&[&speed, &cons], 4, 2, 1).unwrap();
        let sub = ds.subset(3..6);
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.start_cols, vec![3, 4, 5]);
        let (x, y) = ds.batch(&[4]);
        assert_eq!(x.data(), sub.batch(&[1]).0.data());
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(x.at(&[0, 1, 0, 0]), -4.0);
    }
}
