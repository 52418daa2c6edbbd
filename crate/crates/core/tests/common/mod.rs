#![allow(dead_code)]

use gcnrwz::autodiff::Tape;
use gcnrwz::graph::{
    build_graph, chebyshev_scalar, laplacian, normalized_adjacency, spectral_conv_oracle, AdjacencyMode, Edge,
    LambdaMax, RoadGraph, SpectralDecomposition, SpectralOperators,
};
use gcnrwz::layers::{spatial_graph_conv_pre, SpatialConvParams, SpatialMode};
use gcnrwz::Tensor;
use rand::Rng;

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random graph over `n` segments; each pair is linked with probability `p`.
pub fn random_graph(rng: &mut impl Rng, n: usize, p: f64, mode: AdjacencyMode) -> RoadGraph {
    let ids: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                edges.push(Edge::new(&ids[i], &ids[j], rng.gen_range(0.2..3.0)));
            }
        }
    }
    build_graph(&ids, &edges, mode).unwrap()
}

/// Largest deviation between the Chebyshev-mode graph convolution
/// (pre-activation, two channels in and out) and the eigendecomposition
/// oracle applied per channel pair.
pub fn chebyshev_oracle_gap(rng: &mut impl Rng, g: &RoadGraph, order: usize) -> f64 {
    let n = g.n();
    let (c_in, c_out, steps) = (2, 2, 3);
    let ops = SpectralOperators::new(g, LambdaMax::Auto).unwrap();
    let x = random_tensor(rng, &[1, c_in, n, steps], -1.0, 1.0);
    let theta = random_tensor(rng, &[order + 1, c_in, c_out], -1.0, 1.0);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let op = tape.constant(ops.scaled_laplacian.clone());
    let th = tape.constant(theta.clone());
    let p = SpatialConvParams {
        theta: th,
        mode: SpatialMode::Chebyshev { order },
    };
    let out = spatial_graph_conv_pre(&mut tape, xv, op, &p).unwrap();
    let got = tape.value(out).clone();

    let l = laplacian(g);
    let lambdas = SpectralDecomposition::of(&l).unwrap().eigenvalues;
    let mut worst: f64 = 0.0;
    for o in 0..c_out {
        for t in 0..steps {
            let mut want = vec![0.0; n];
            for c in 0..c_in {
                let g_theta: Vec<f64> = lambdas
                    .iter()
                    .map(|&lam| {
                        let scaled = 2.0 * lam / ops.lambda_max - 1.0;
                        (0..=order)
                            .map(|k| theta.at(&[k, c, o]) * chebyshev_scalar(k, scaled))
                            .sum()
                    })
                    .collect();
                let xc: Vec<f64> = (0..n).map(|i| x.at(&[0, c, i, t])).collect();
                let y = spectral_conv_oracle(&l, &g_theta, &xc).unwrap();
                want.iter_mut().zip(y).for_each(|(w, v)| *w += v);
            }
            for (i, w) in want.iter().enumerate() {
                worst = worst.max((got.at(&[0, o, i, t]) - w).abs());
            }
        }
    }
    worst
}

/// Asymmetry and extreme eigenvalues of the renormalized adjacency.
pub fn renormalized_spectrum(g: &RoadGraph) -> (f64, f64, f64) {
    let a = normalized_adjacency(g);
    let asym = a.max_abs_diff(&a.transpose2().unwrap());
    let ev = SpectralDecomposition::of(&a).unwrap().eigenvalues;
    (asym, ev[0], *ev.last().unwrap())
}

use gcnrwz::autodiff::{finite_difference_check_many, Var};
use gcnrwz::features::{fuse_vars, FusionVariant};
use gcnrwz::layers::{
    bi_recurrent, output_head, spatial_attention, spatial_graph_conv, temporal_attention, temporal_conv_pre,
    Activation, AttentionParams, BiRecurrentParams, GruParams, OutputHeadParams, TemporalConvParams,
};
use gcnrwz::model::{GcnRwz, ModelConfig};

const LAYER_EPS: f64 = 1e-3;

/// Contract `y` against a fixed random probe so every output coordinate
/// contributes to the checked scalar.
fn probe_sum(t: &mut Tape, y: Var, seed: u64) -> gcnrwz::Result<Var> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(random_tensor(&mut rng, &t.shape(y).to_vec(), -1.0, 1.0));
    let q = t.mul(y, w)?;
    Ok(t.sum(q))
}

fn gru(v: &[Var]) -> GruParams {
    GruParams {
        w_z: v[0],
        u_z: v[1],
        b_z: v[2],
        w_r: v[3],
        u_r: v[4],
        b_r: v[5],
        w_h: v[6],
        u_h: v[7],
        b_h: v[8],
    }
}

fn gru_tensors(rng: &mut impl Rng, d_in: usize, d_h: usize) -> Vec<Tensor> {
    let mut v = Vec::new();
    for _ in 0..3 {
        v.push(random_tensor(rng, &[d_in, d_h], -0.8, 0.8));
        v.push(random_tensor(rng, &[d_h, d_h], -0.8, 0.8));
        v.push(random_tensor(rng, &[d_h], -0.3, 0.3));
    }
    v
}

/// Worst finite-difference relative error for each layer, on smooth random
/// points (sigmoid stands in for relu where a kink could be straddled).
pub fn layer_gradient_errors(rng: &mut impl Rng) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let x = random_tensor(rng, &[2, 1, 3, 5], 0.0, 1.0);
    let c = random_tensor(rng, &[2, 1, 3, 5], 0.0, 1.0);
    let ws = random_tensor(rng, &[3, 5], -1.0, 1.0);
    let wc = random_tensor(rng, &[3, 1], -1.0, 1.0);
    for variant in FusionVariant::ALL {
        let err = finite_difference_check_many(
            |t, v| {
                let ws = variant.uses_speed_weight().then_some(v[2]);
                let y = fuse_vars(t, v[0], Some(v[1]), ws, Some(v[3]), variant)?;
                probe_sum(t, y, 1)
            },
            &[x.clone(), c.clone(), ws.clone(), wc.clone()],
            LAYER_EPS,
        )
        .unwrap();
        out.push((variant.label(), err));
    }

    let x = random_tensor(rng, &[2, 2, 3, 6], -1.0, 1.0);
    let k = random_tensor(rng, &[3, 2, 3], -0.5, 0.5);
    let b = random_tensor(rng, &[3], -0.1, 0.1);
    let err = finite_difference_check_many(
        |t, v| {
            let y = temporal_conv_pre(t, v[0], &TemporalConvParams { kernel: v[1], bias: v[2] })?;
            let y = t.sigmoid(y);
            probe_sum(t, y, 2)
        },
        &[x, k, b],
        LAYER_EPS,
    )
    .unwrap();
    out.push(("temporal convolution", err));

    let x = random_tensor(rng, &[1, 2, 3, 2], -1.0, 1.0);
    let mut inputs = vec![x];
    inputs.extend((0..4).map(|_| random_tensor(rng, &[4, 4], -0.6, 0.6)));
    for (name, spatial) in [("spatial attention", true), ("temporal attention", false)] {
        let mut inputs = inputs.clone();
        if !spatial {
            inputs = vec![random_tensor(rng, &[1, 2, 2, 3], -1.0, 1.0)];
            inputs.extend((0..4).map(|_| random_tensor(rng, &[4, 4], -0.6, 0.6)));
        }
        let err = finite_difference_check_many(
            |t, v| {
                let p = AttentionParams { w_q: v[1], w_k: v[2], w_v: v[3], w_o: v[4] };
                let y = if spatial {
                    spatial_attention(t, v[0], &p, 2)?
                } else {
                    temporal_attention(t, v[0], &p, 2)?
                };
                probe_sum(t, y, 3)
            },
            &inputs,
            LAYER_EPS,
        )
        .unwrap();
        out.push((name, err));
    }

    let g = random_graph(rng, 4, 0.7, AdjacencyMode::Gaussian);
    let ops = SpectralOperators::new(&g, LambdaMax::Auto).unwrap();
    let x = random_tensor(rng, &[2, 2, 4, 3], -1.0, 1.0);
    for (name, mode, op, theta) in [
        ("graph convolution (linear)", SpatialMode::Linear, &ops.normalized_adjacency, random_tensor(rng, &[2, 3], -0.8, 0.8)),
        (
            "graph convolution (chebyshev)",
            SpatialMode::Chebyshev { order: 3 },
            &ops.scaled_laplacian,
            random_tensor(rng, &[4, 2, 3], -0.8, 0.8),
        ),
    ] {
        let err = finite_difference_check_many(
            |t, v| {
                let opv = t.constant(op.clone());
                let p = SpatialConvParams { theta: v[1], mode };
                let y = spatial_graph_conv(t, v[0], opv, &p, Activation::Sigmoid)?;
                probe_sum(t, y, 4)
            },
            &[x.clone(), theta],
            LAYER_EPS,
        )
        .unwrap();
        out.push((name, err));
    }

    let seq = random_tensor(rng, &[3, 4, 2], -1.0, 1.0);
    let mut inputs = vec![seq];
    inputs.extend(gru_tensors(rng, 2, 3));
    inputs.extend(gru_tensors(rng, 2, 3));
    let err = finite_difference_check_many(
        |t, v| {
            let p = BiRecurrentParams { forward: gru(&v[1..10]), backward: gru(&v[10..19]) };
            let o = bi_recurrent(t, v[0], &p)?;
            probe_sum(t, o.sequence, 5)
        },
        &inputs,
        LAYER_EPS,
    )
    .unwrap();
    out.push(("bidirectional recurrent", err));

    let x = random_tensor(rng, &[2, 3, 2, 4], -1.0, 1.0);
    let mut inputs = vec![
        x,
        random_tensor(rng, &[1, 3, 1], -0.8, 0.8),
        random_tensor(rng, &[1], -0.2, 0.2),
        random_tensor(rng, &[6, 2], -0.8, 0.8),
        random_tensor(rng, &[2], -0.2, 0.2),
    ];
    inputs.extend(gru_tensors(rng, 1, 3));
    inputs.extend(gru_tensors(rng, 1, 3));
    let err = finite_difference_check_many(
        |t, v| {
            let p = OutputHeadParams {
                reduce_kernel: v[1],
                reduce_bias: v[2],
                recurrent: BiRecurrentParams { forward: gru(&v[5..14]), backward: gru(&v[14..23]) },
                out_weight: v[3],
                out_bias: v[4],
            };
            let y = output_head(t, v[0], &p)?;
            probe_sum(t, y, 6)
        },
        &inputs,
        LAYER_EPS,
    )
    .unwrap();
    out.push(("output head", err));
    out
}

/// The toy whole-model configuration: 3 segments, H = 8, P = 2.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        segments: 3,
        history: 8,
        horizon: 2,
        heads: 2,
        d_model: 4,
        channels: 3,
        kernel_t: 3,
        blocks: 2,
        rnn_hidden: 3,
        seed: 5,
        ..ModelConfig::default()
    }
}

pub fn chain_graph(n: usize) -> RoadGraph {
    let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let edges: Vec<Edge> = (1..n).map(|i| Edge::new(&ids[i - 1], &ids[i], 1.0)).collect();
    build_graph(&ids, &edges, AdjacencyMode::Binary).unwrap()
}

/// Whole-model check over every registry parameter. Zero-initialized
/// parameters are moved off zero first: exact zeros put relu inputs on the
/// kink, where the function has no derivative.
/// Step used for the whole-model check; below it roundoff dominates.
pub const WHOLE_MODEL_EPS: f64 = 1e-4;
/// Central differences are only meaningful where no ReLU input lies within
/// the perturbation's reach, so test points closer than this are redrawn.
pub const KINK_GUARD: f64 = 10.0 * WHOLE_MODEL_EPS;

pub fn whole_model_gradient_error(rng: &mut impl Rng, cfg: &ModelConfig) -> f64 {
    let g = chain_graph(cfg.segments);
    let base = GcnRwz::new(cfg.clone(), &g).unwrap();
    for _ in 0..200 {
        let mut m = base.clone();
        for (_, p) in m.parameters_mut() {
            if p.data().iter().all(|&v| v == 0.0) {
                p.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
            }
        }
        let x = random_tensor(rng, &[2, cfg.input_channels(), cfg.segments, cfg.history], 0.0, 1.0);
        let y = random_tensor(rng, &[2, cfg.segments, cfg.horizon], 0.0, 1.0);
        if m.kink_margin(&x).unwrap() >= KINK_GUARD {
            return m.gradient_check(&x, &y, WHOLE_MODEL_EPS).unwrap();
        }
    }
    panic!("no kink-free test point found");
}
