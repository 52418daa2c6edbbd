//! Dense row-major `f64` arrays and the raw kernels the tape is built on.
//!
//! Every reduction here runs in a fixed sequential order so that results are
//! bit-reproducible for a given input.

use crate::error::{invalid, shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Advance a multi-index in row-major order. Returns false on wrap-around.
fn advance(idx: &mut [usize], shape: &[usize]) -> bool {
    for d in (0..shape.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return true;
        }
        idx[d] = 0;
    }
    false
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self {
            shape: vec![r, c],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        let st = strides(&self.shape);
        idx.iter()
            .zip(&self.shape)
            .zip(&st)
            .map(|((&i, &n), &s)| {
                assert!(i < n, "index {idx:?} out of bounds for {:?}", self.shape);
                i * s
            })
            .sum()
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub(crate) fn reshaped(mut self, shape: &[usize]) -> Self {
        debug_assert_eq!(numel(shape), self.numel());
        self.shape = shape.to_vec();
        self
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid(format!("bad permutation {axes:?} for rank {r}")));
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.numel());
        if out_shape.iter().all(|&n| n > 0) {
            let last = r - 1;
            let inner = out_shape[last];
            let inner_stride = src_strides[last];
            let outer_shape = &out_shape[..last];
            let mut idx = vec![0; last];
            loop {
                let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
                for j in 0..inner {
                    out.push(self.data[base + j * inner_stride]);
                }
                if !advance(&mut idx, outer_shape) {
                    break;
                }
            }
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(invalid(format!("transpose2 on rank {}", self.rank())));
        }
        self.permute(&[1, 0])
    }
}

// ---------------------------------------------------------------------------
// Broadcasting

/// Numpy-style trailing-dimension broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i < r - a.len() { 1 } else { a[i - (r - a.len())] };
        let db = if i < r - b.len() { 1 } else { b[i - (r - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let st = strides(shape);
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                st[i - pad]
            }
        })
        .collect()
}

pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        return Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        });
    }
    let shape = broadcast_shape(&a.shape, &b.shape, op)?;
    let n = numel(&shape);
    let mut data = Vec::with_capacity(n);
    if n > 0 {
        let sa = broadcast_strides(&a.shape, &shape);
        let sb = broadcast_strides(&b.shape, &shape);
        if shape.is_empty() {
            data.push(f(a.data[0], b.data[0]));
        } else {
            let last = shape.len() - 1;
            let inner = shape[last];
            let (ia, ib) = (sa[last], sb[last]);
            let mut idx = vec![0; last];
            loop {
                let oa: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
                let ob: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
                for j in 0..inner {
                    data.push(f(a.data[oa + j * ia], b.data[ob + j * ib]));
                }
                if !advance(&mut idx, &shape[..last]) {
                    break;
                }
            }
        }
    }
    Ok(Tensor { shape, data })
}

/// Sum a broadcast gradient back down to `target` shape.
pub(crate) fn sum_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape == target {
        return g.clone();
    }
    let mut out = Tensor::zeros(target);
    let st = broadcast_strides(target, &g.shape);
    if g.shape.is_empty() {
        out.data[0] += g.data[0];
        return out;
    }
    let last = g.shape.len() - 1;
    let inner = g.shape[last];
    let is = st[last];
    let mut idx = vec![0; last];
    let mut pos = 0;
    loop {
        let o: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.data[o + j * is] += g.data[pos];
            pos += 1;
        }
        if !advance(&mut idx, &g.shape[..last]) {
            break;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Matrix products

/// out(m×n) += a(m×k) · b(k×n)
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out(m×k) += g(m×n) · b(k×n)ᵀ
fn mm_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// out(k×n) += a(m×k)ᵀ · g(m×n)
fn mm_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
    a_bstrides: Vec<usize>,
    b_bstrides: Vec<usize>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(shape_err("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(shape_err("matmul", a, b));
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch = broadcast_shape(ab, bb, "matmul")?;
        Ok(Self {
            m,
            k,
            n,
            a_bstrides: broadcast_strides(ab, &batch),
            b_bstrides: broadcast_strides(bb, &batch),
            batch,
        })
    }

    /// (a offset, b offset, out offset) for every batch element, in order.
    fn offsets(&self) -> Vec<(usize, usize, usize)> {
        let count = numel(&self.batch);
        let mut res = Vec::with_capacity(count);
        let mut idx = vec![0; self.batch.len()];
        for c in 0..count {
            let ia: usize = idx.iter().zip(&self.a_bstrides).map(|(i, s)| i * s).sum();
            let ib: usize = idx.iter().zip(&self.b_bstrides).map(|(i, s)| i * s).sum();
            res.push((ia * self.m * self.k, ib * self.k * self.n, c * self.m * self.n));
            advance(&mut idx, &self.batch);
        }
        res
    }

    fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.push(self.m);
        s.push(self.n);
        s
    }
}

/// Batched matrix product `[..., m, k] · [..., k, n]` with broadcast batch axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = MatmulPlan::new(&a.shape, &b.shape)?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let shape = plan.out_shape();
    let mut out = vec![0.0; numel(&shape)];
    if b.rank() == 2 {
        // fold every batch row of `a` into one tall product
        let rows = a.numel() / k.max(1);
        if k > 0 && rows * n == out.len() {
            mm_acc(&a.data, &b.data, &mut out, rows, k, n);
            return Ok(Tensor { shape, data: out });
        }
    }
    for (oa, ob, oo) in plan.offsets() {
        mm_acc(
            &a.data[oa..oa + m * k],
            &b.data[ob..ob + k * n],
            &mut out[oo..oo + m * n],
            m,
            k,
            n,
        );
    }
    Ok(Tensor { shape, data: out })
}

/// Adjoints of [`matmul`]: returns (∂a, ∂b) for upstream gradient `g`.
pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let plan = MatmulPlan::new(&a.shape, &b.shape)?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut ga = need_a.then(|| Tensor::zeros(&a.shape));
    let mut gb = need_b.then(|| Tensor::zeros(&b.shape));
    if b.rank() == 2 && a.numel() / k.max(1) * n == g.numel() && k > 0 {
        let rows = a.numel() / k;
        if let Some(ga) = ga.as_mut() {
            mm_bt_acc(&g.data, &b.data, &mut ga.data, rows, n, k);
        }
        if let Some(gb) = gb.as_mut() {
            mm_at_acc(&a.data, &g.data, &mut gb.data, rows, k, n);
        }
        return Ok((ga, gb));
    }
    for (oa, ob, oo) in plan.offsets() {
        let gs = &g.data[oo..oo + m * n];
        if let Some(ga) = ga.as_mut() {
            mm_bt_acc(gs, &b.data[ob..ob + k * n], &mut ga.data[oa..oa + m * k], m, n, k);
        }
        if let Some(gb) = gb.as_mut() {
            mm_at_acc(&a.data[oa..oa + m * k], gs, &mut gb.data[ob..ob + k * n], m, k, n);
        }
    }
    Ok((ga, gb))
}

// ---------------------------------------------------------------------------
// Axis helpers

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

/// (outer, len, inner) decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(&x.shape, axis, "softmax")?;
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(x.data[base + j * inner]);
            }
            let mut s = 0.0;
            for j in 0..len {
                let e = (x.data[base + j * inner] - mx).exp();
                out.data[base + j * inner] = e;
                s += e;
            }
            for j in 0..len {
                out.data[base + j * inner] /= s;
            }
        }
    }
    Ok(out)
}

/// Jacobian-vector adjoint of softmax given its output `y`.
pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(&y.shape, axis);
    let mut out = Tensor::zeros(&y.shape);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                let p = base + j * inner;
                dot += g.data[p] * y.data[p];
            }
            for j in 0..len {
                let p = base + j * inner;
                out.data[p] = y.data[p] * (g.data[p] - dot);
            }
        }
    }
    out
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
    check_axis(&first.shape, axis, "concat")?;
    for p in parts {
        let same_rank = p.rank() == first.rank();
        let same_other = same_rank
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !same_other {
            return Err(shape_err("concat", &first.shape, &p.shape));
        }
    }
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut shape = first.shape.clone();
    shape[axis] = total;
    let (outer, _, inner) = split_axis(&first.shape, axis);
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor { shape, data })
}

pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis(&x.shape, axis, "slice")?;
    if start + len > x.shape[axis] {
        return Err(invalid(format!(
            "slice [{start}, {}) exceeds axis {axis} of {:?}",
            start + len,
            x.shape
        )));
    }
    let (outer, full, inner) = split_axis(&x.shape, axis);
    let mut shape = x.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    Ok(Tensor { shape, data })
}

/// Adjoint of [`slice`]: scatter `g` into a zero tensor of `full_shape`.
pub(crate) fn slice_backward(g: &Tensor, full_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let mut out = Tensor::zeros(full_shape);
    let (outer, full, inner) = split_axis(full_shape, axis);
    let len = g.shape[axis];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        let src = o * len * inner;
        out.data[dst..dst + len * inner].copy_from_slice(&g.data[src..src + len * inner]);
    }
    out
}

pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(&x.shape, axis, "sum_axis")?;
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut shape = x.shape.clone();
    shape.remove(axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = (o * len + j) * inner;
            for i in 0..inner {
                data[o * inner + i] += x.data[src + i];
            }
        }
    }
    Ok(Tensor { shape, data })
}

// ---------------------------------------------------------------------------
// Temporal convolution

/// Leading batch count, C_in, N, T for a rank-3 or rank-4 sequence tensor.
fn conv_dims(x: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *x {
        [c, n, t] => Ok((1, c, n, t)),
        [b, c, n, t] => Ok((b, c, n, t)),
        _ => Err(invalid(format!("conv1d_time expects [B?, C, N, T], got {x:?}"))),
    }
}

/// Valid cross-correlation along the last (time) axis, shared across nodes.
///
/// `x`: `[B?, C_in, N, T]`, `kernel`: `[C_out, C_in, k]` → `[B?, C_out, N, T-k+1]`.
pub fn conv1d_time(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (b, cin, n, t) = conv_dims(&x.shape)?;
    let [cout, kcin, k] = kernel.shape[..] else {
        return Err(invalid(format!("conv kernel must be [C_out, C_in, k], got {:?}", kernel.shape)));
    };
    if kcin != cin {
        return Err(shape_err("conv1d_time", &x.shape, &kernel.shape));
    }
    if k == 0 || k > t {
        return Err(invalid(format!("kernel length {k} invalid for sequence length {t}")));
    }
    let tp = t - k + 1;
    let mut shape = x.shape.clone();
    let r = shape.len();
    shape[r - 3] = cout;
    shape[r - 1] = tp;
    let mut out = vec![0.0; b * cout * n * tp];
    for bi in 0..b {
        for o in 0..cout {
            let obase = (bi * cout + o) * n * tp;
            for c in 0..cin {
                let xbase = (bi * cin + c) * n * t;
                for j in 0..k {
                    let w = kernel.data[(o * cin + c) * k + j];
                    if w == 0.0 {
                        continue;
                    }
                    for node in 0..n {
                        let xs = &x.data[xbase + node * t + j..xbase + node * t + j + tp];
                        let os = &mut out[obase + node * tp..obase + (node + 1) * tp];
                        for (ov, &xv) in os.iter_mut().zip(xs) {
                            *ov += w * xv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor { shape, data: out })
}

pub(crate) fn conv1d_time_backward(
    x: &Tensor,
    kernel: &Tensor,
    g: &Tensor,
    need_x: bool,
    need_k: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (b, cin, n, t) = conv_dims(&x.shape)?;
    let (cout, k) = (kernel.shape[0], kernel.shape[2]);
    let tp = t - k + 1;
    let mut gx = need_x.then(|| Tensor::zeros(&x.shape));
    let mut gk = need_k.then(|| Tensor::zeros(&kernel.shape));
    for bi in 0..b {
        for o in 0..cout {
            let gbase = (bi * cout + o) * n * tp;
            for c in 0..cin {
                let xbase = (bi * cin + c) * n * t;
                for j in 0..k {
                    let widx = (o * cin + c) * k + j;
                    let w = kernel.data[widx];
                    let mut acc = 0.0;
                    for node in 0..n {
                        let gs = &g.data[gbase + node * tp..gbase + (node + 1) * tp];
                        let xo = xbase + node * t + j;
                        if let Some(gx) = gx.as_mut() {
                            for (xv, &gv) in gx.data[xo..xo + tp].iter_mut().zip(gs) {
                                *xv += w * gv;
                            }
                        }
                        if need_k {
                            for (&xv, &gv) in x.data[xo..xo + tp].iter().zip(gs) {
                                acc += xv * gv;
                            }
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        gk.data[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((gx, gk))
}
