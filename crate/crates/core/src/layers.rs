//! Network building blocks, expressed as tape operations.
//!
//! All sequence tensors carry a leading batch axis: `[S, C, N, T]` for
//! spatio-temporal features and `[B, T, d]` for recurrent sequences.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SpatialMode {
    /// One-hop renormalized propagation `Â H θ`.
    #[default]
    Linear,
    /// `Σ_k T_k(L̂) H θ_k`, `k = 0..=order`.
    Chebyshev { order: usize },
}

// ---------------------------------------------------------------------------
// Attention

/// Per-head projections are stored stacked: head `h` owns columns
/// `h·d_head..(h+1)·d_head` of `w_q`, `w_k`, `w_v` (each `d_in × d_model`).
/// `w_o` maps the concatenated heads back to `d_in`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Scaled dot-product attention over the token axis of `[S, L, d_in]`.
/// Returns the re-projected output `[S, L, d_in]` and the attention weights
/// `[S, heads, L, L]` (rows sum to one).
pub fn multi_head_attention(
    tape: &mut Tape,
    tokens: Var,
    p: &AttentionParams,
    heads: usize,
) -> Result<(Var, Var)> {
    let [s, l, d_in] = tape.shape(tokens)[..] else {
        return Err(invalid(format!("attention tokens must be [S, L, d], got {:?}", tape.shape(tokens))));
    };
    let wq = tape.shape(p.w_q).to_vec();
    if wq.len() != 2 || wq[0] != d_in {
        return Err(shape_err("attention projection", &[s, l, d_in], &wq));
    }
    let d_model = wq[1];
    if heads == 0 || d_model % heads != 0 {
        return Err(invalid(format!("d_model {d_model} not divisible by {heads} heads")));
    }
    let d_head = d_model / heads;

    let split = |tape: &mut Tape, w: Var, perm: &[usize]| -> Result<Var> {
        let y = tape.matmul(tokens, w)?;
        let y = tape.reshape(y, &[s, l, heads, d_head])?;
        tape.permute(y, perm)
    };
    let q = split(tape, p.w_q, &[0, 2, 1, 3])?;
    let kt = split(tape, p.w_k, &[0, 2, 3, 1])?;
    let v = split(tape, p.w_v, &[0, 2, 1, 3])?;

    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
    let attn = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[s, l, d_model])?;
    let out = tape.matmul(ctx, p.w_o)?;
    Ok((out, attn))
}

fn dims4(tape: &Tape, x: Var) -> Result<[usize; 4]> {
    match tape.shape(x)[..] {
        [s, c, n, t] => Ok([s, c, n, t]),
        _ => Err(invalid(format!("expected [S, C, N, T], got {:?}", tape.shape(x)))),
    }
}

/// Attention across nodes (tokens = nodes, features = channels × time), added
/// residually. Also returns the `[S, heads, N, N]` weights.
pub fn spatial_attention_weights(
    tape: &mut Tape,
    x: Var,
    p: &AttentionParams,
    heads: usize,
) -> Result<(Var, Var)> {
    let [s, c, n, t] = dims4(tape, x)?;
    let tok = tape.permute(x, &[0, 2, 1, 3])?;
    let tok = tape.reshape(tok, &[s, n, c * t])?;
    let (o, attn) = multi_head_attention(tape, tok, p, heads)?;
    let o = tape.reshape(o, &[s, n, c, t])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    Ok((tape.add(x, o)?, attn))
}

pub fn spatial_attention(tape: &mut Tape, x: Var, p: &AttentionParams, heads: usize) -> Result<Var> {
    Ok(spatial_attention_weights(tape, x, p, heads)?.0)
}

/// Attention across time steps (tokens = steps, features = channels × nodes),
/// added residually. Also returns the `[S, heads, T, T]` weights.
pub fn temporal_attention_weights(
    tape: &mut Tape,
    x: Var,
    p: &AttentionParams,
    heads: usize,
) -> Result<(Var, Var)> {
    let [s, c, n, t] = dims4(tape, x)?;
    let tok = tape.permute(x, &[0, 3, 1, 2])?;
    let tok = tape.reshape(tok, &[s, t, c * n])?;
    let (o, attn) = multi_head_attention(tape, tok, p, heads)?;
    let o = tape.reshape(o, &[s, t, c, n])?;
    let o = tape.permute(o, &[0, 2, 3, 1])?;
    Ok((tape.add(x, o)?, attn))
}

pub fn temporal_attention(tape: &mut Tape, x: Var, p: &AttentionParams, heads: usize) -> Result<Var> {
    Ok(temporal_attention_weights(tape, x, p, heads)?.0)
}

// ---------------------------------------------------------------------------
// Spatial graph convolution

/// `theta` is `[C_in, C_out]` in linear mode, `[K+1, C_in, C_out]` in
/// Chebyshev mode.
#[derive(Debug, Clone, Copy)]
pub struct SpatialConvParams {
    pub theta: Var,
    pub mode: SpatialMode,
}

/// Graph convolution before activation. `operator` is `Â` (linear mode) or
/// `L̂` (Chebyshev mode), N×N, typically a tape constant.
pub fn spatial_graph_conv_pre(tape: &mut Tape, x: Var, operator: Var, p: &SpatialConvParams) -> Result<Var> {
    let [_, c, n, _] = dims4(tape, x)?;
    if tape.shape(operator) != [n, n] {
        return Err(shape_err("spatial_graph_conv", tape.shape(x), tape.shape(operator)));
    }
    // rows are [C, N] slices, so right-multiplying by opᵀ applies op on the node axis
    let op_t = tape.transpose(operator)?;
    let rows = tape.permute(x, &[0, 3, 1, 2])?;
    let mix = |tape: &mut Tape, z: Var, theta: Var| -> Result<Var> {
        let z = tape.permute(z, &[0, 1, 3, 2])?;
        tape.matmul(z, theta)
    };
    let out = match p.mode {
        SpatialMode::Linear => {
            let th = tape.shape(p.theta);
            if th.len() != 2 || th[0] != c {
                return Err(shape_err("spatial_graph_conv theta", &[c], th));
            }
            let z = tape.matmul(rows, op_t)?;
            mix(tape, z, p.theta)?
        }
        SpatialMode::Chebyshev { order } => {
            let th = tape.shape(p.theta).to_vec();
            if th.len() != 3 || th[0] != order + 1 || th[1] != c {
                return Err(shape_err("spatial_graph_conv theta", &[order + 1, c], &th));
            }
            let c_out = th[2];
            let theta_k = |tape: &mut Tape, k: usize| -> Result<Var> {
                let s = tape.slice(p.theta, 0, k, 1)?;
                tape.reshape(s, &[c, c_out])
            };
            let mut terms = vec![rows];
            if order >= 1 {
                terms.push(tape.matmul(rows, op_t)?);
            }
            for k in 2..=order {
                let lz = tape.matmul(terms[k - 1], op_t)?;
                let lz2 = tape.scale(lz, 2.0);
                terms.push(tape.sub(lz2, terms[k - 2])?);
            }
            let mut acc: Option<Var> = None;
            for (k, &z) in terms.iter().enumerate() {
                let th = theta_k(tape, k)?;
                let y = mix(tape, z, th)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, y)?,
                    None => y,
                });
            }
            acc.expect("at least T_0")
        }
    };
    // [S, T, N, C_out] -> [S, C_out, N, T]
    tape.permute(out, &[0, 3, 2, 1])
}

pub fn spatial_graph_conv(
    tape: &mut Tape,
    x: Var,
    operator: Var,
    p: &SpatialConvParams,
    activation: Activation,
) -> Result<Var> {
    let pre = spatial_graph_conv_pre(tape, x, operator, p)?;
    Ok(activation.apply(tape, pre))
}

// ---------------------------------------------------------------------------
// Temporal convolution

/// `kernel`: `[C_out, C_in, k_t]`, `bias`: `[C_out]`.
#[derive(Debug, Clone, Copy)]
pub struct TemporalConvParams {
    pub kernel: Var,
    pub bias: Var,
}

fn channel_bias(tape: &mut Tape, bias: Var) -> Result<Var> {
    let c = tape.shape(bias).iter().product::<usize>();
    tape.reshape(bias, &[c, 1, 1])
}

/// Convolution plus bias, without activation.
pub fn temporal_conv_pre(tape: &mut Tape, x: Var, p: &TemporalConvParams) -> Result<Var> {
    let y = tape.conv1d_time(x, p.kernel)?;
    let b = channel_bias(tape, p.bias)?;
    tape.add(y, b)
}

pub fn temporal_conv(tape: &mut Tape, x: Var, p: &TemporalConvParams) -> Result<Var> {
    let pre = temporal_conv_pre(tape, x, p)?;
    Ok(tape.relu(pre))
}

// ---------------------------------------------------------------------------
// Spatio-temporal block

#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub spatial_attention: AttentionParams,
    pub temporal_attention: AttentionParams,
    pub graph_conv: SpatialConvParams,
    pub temporal_conv: TemporalConvParams,
    /// 1×1 shortcut projection `[C_out, C_in, 1]`; identity when absent.
    pub residual: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockContext {
    pub operator: Var,
    pub heads: usize,
    pub spatial_activation: Activation,
}

/// attention (nodes) → attention (time) → graph conv → temporal conv, with a
/// center-cropped shortcut added before the final ReLU.
pub fn st_block(tape: &mut Tape, x: Var, ctx: &BlockContext, p: &BlockParams) -> Result<Var> {
    let [_, c_in, _, t] = dims4(tape, x)?;
    let h = spatial_attention(tape, x, &p.spatial_attention, ctx.heads)?;
    let h = temporal_attention(tape, h, &p.temporal_attention, ctx.heads)?;
    let h = spatial_graph_conv(tape, h, ctx.operator, &p.graph_conv, ctx.spatial_activation)?;
    let pre = temporal_conv_pre(tape, h, &p.temporal_conv)?;
    let [_, c_out, _, t_out] = dims4(tape, pre)?;

    let shortcut = match p.residual {
        Some(w) => tape.conv1d_time(x, w)?,
        None if c_in == c_out => x,
        None => return Err(invalid(format!("block maps {c_in} -> {c_out} channels without a residual projection"))),
    };
    let offset = (t - t_out) / 2;
    let shortcut = tape.slice(shortcut, 3, offset, t_out)?;
    let sum = tape.add(pre, shortcut)?;
    Ok(tape.relu(sum))
}

// ---------------------------------------------------------------------------
// Gated recurrent readout

/// Gated recurrent cell: input weights `d_in × d_h`, recurrent `d_h × d_h`,
/// biases `d_h`, for the update (z), reset (r) and candidate (h) paths.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BiRecurrentParams {
    pub forward: GruParams,
    pub backward: GruParams,
}

#[derive(Debug, Clone, Copy)]
pub struct BiRecurrentOutput {
    /// `[B, T, 2·d_h]`: forward state then backward state per step.
    pub sequence: Var,
    /// Forward state after the last step, `[B, d_h]`.
    pub forward_final: Var,
    /// Backward state after consuming step 0, `[B, d_h]`.
    pub backward_final: Var,
}

fn run_gru(tape: &mut Tape, x: Var, p: &GruParams, reverse: bool) -> Result<(Vec<Var>, Var)> {
    let [b, t, _] = tape.shape(x)[..] else {
        return Err(invalid(format!("recurrent input must be [B, T, d], got {:?}", tape.shape(x))));
    };
    let d_h = tape.shape(p.u_z)[0];
    let project = |tape: &mut Tape, w: Var, bias: Var| -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add(y, bias)
    };
    let xz = project(tape, p.w_z, p.b_z)?;
    let xr = project(tape, p.w_r, p.b_r)?;
    let xh = project(tape, p.w_h, p.b_h)?;
    let step = |tape: &mut Tape, seq: Var, i: usize| -> Result<Var> {
        let s = tape.slice(seq, 1, i, 1)?;
        tape.reshape(s, &[b, d_h])
    };

    let mut h = tape.constant(Tensor::zeros(&[b, d_h]));
    let mut states = vec![h; t];
    let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for &i in &order {
        let hz = tape.matmul(h, p.u_z)?;
        let az = step(tape, xz, i)?;
        let z = tape.add(az, hz)?;
        let z = tape.sigmoid(z);

        let hr = tape.matmul(h, p.u_r)?;
        let ar = step(tape, xr, i)?;
        let r = tape.add(ar, hr)?;
        let r = tape.sigmoid(r);

        let rh = tape.mul(r, h)?;
        let hh = tape.matmul(rh, p.u_h)?;
        let ah = step(tape, xh, i)?;
        let cand = tape.add(ah, hh)?;
        let cand = tape.tanh(cand);

        let delta = tape.sub(cand, h)?;
        let upd = tape.mul(z, delta)?;
        h = tape.add(h, upd)?;
        states[i] = h;
    }
    Ok((states, h))
}

/// Two independent gated recurrent passes (forward in time and backward in
/// time) from zero initial state.
pub fn bi_recurrent(tape: &mut Tape, x: Var, p: &BiRecurrentParams) -> Result<BiRecurrentOutput> {
    let (fw, fw_last) = run_gru(tape, x, &p.forward, false)?;
    let (bw, bw_last) = run_gru(tape, x, &p.backward, true)?;
    let b = tape.shape(x)[0];
    let d_h = tape.shape(fw_last)[1];
    let mut steps = Vec::with_capacity(fw.len());
    for (f, r) in fw.into_iter().zip(bw) {
        let both = tape.concat(&[f, r], 1)?;
        steps.push(tape.reshape(both, &[b, 1, 2 * d_h])?);
    }
    let sequence = tape.concat(&steps, 1)?;
    Ok(BiRecurrentOutput {
        sequence,
        forward_final: fw_last,
        backward_final: bw_last,
    })
}

// ---------------------------------------------------------------------------
// Output head

#[derive(Debug, Clone, Copy)]
pub struct OutputHeadParams {
    /// `[1, C, 1]` channel reduction.
    pub reduce_kernel: Var,
    /// `[1]`
    pub reduce_bias: Var,
    pub recurrent: BiRecurrentParams,
    /// `[2·d_h, P]`
    pub out_weight: Var,
    /// `[P]`
    pub out_bias: Var,
}

/// `[S, C, N, T′]` → `[S, N, P]`.
pub fn output_head(tape: &mut Tape, x: Var, p: &OutputHeadParams) -> Result<Var> {
    let [s, _, n, t] = dims4(tape, x)?;
    let reduced = tape.conv1d_time(x, p.reduce_kernel)?;
    let reduced = tape.add(reduced, p.reduce_bias)?;
    let seq = tape.reshape(reduced, &[s * n, t, 1])?;
    let rnn = bi_recurrent(tape, seq, &p.recurrent)?;
    let last = tape.concat(&[rnn.forward_final, rnn.backward_final], 1)?;
    let y = tape.matmul(last, p.out_weight)?;
    let y = tape.add(y, p.out_bias)?;
    let horizon = tape.shape(p.out_bias)[0];
    tape.reshape(y, &[s, n, horizon])
}

// ---------------------------------------------------------------------------
// Initialization

pub mod init {
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::tensor::Tensor;

    /// Uniform(−a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-a..a)).collect()).expect("shape")
    }

    /// Q factor of a Gaussian matrix (sign-corrected so the draw is uniform).
    pub fn orthogonal(rng: &mut impl Rng, n: usize) -> Tensor {
        let g: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let m = nalgebra::DMatrix::from_row_slice(n, n, &g);
        let qr = m.qr();
        let (q, r) = (qr.q(), qr.r());
        let mut out = Tensor::zeros(&[n, n]);
        for j in 0..n {
            let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..n {
                out.set(&[i, j], q[(i, j)] * sign);
            }
        }
        out
    }
}
