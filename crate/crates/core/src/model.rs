//! The GCN-RWZ network: speed-wave fusion, stacked spatio-temporal blocks and
//! a bidirectional recurrent readout, plus its checkpoint format.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_check_many, Gradients, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::features::{fuse_vars, FusionVariant, NormalizationParams, DEFAULT_LAMBDA};
use crate::graph::{AdjacencyMode, LambdaMax, RoadGraph, SpectralOperators};
use crate::layers::{
    init, output_head, st_block, Activation, AttentionParams, BiRecurrentParams, BlockContext, BlockParams,
    GruParams, OutputHeadParams, SpatialConvParams, SpatialMode, TemporalConvParams,
};
use crate::tensor::Tensor;

/// Shape of the learned fusion weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionShape {
    /// One weight per segment, `[N, 1]`.
    #[default]
    PerSegment,
    /// One weight per segment and history step, `[N, H]`.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub segments: usize,
    pub history: usize,
    pub horizon: usize,
    pub heads: usize,
    pub d_model: usize,
    pub channels: usize,
    pub kernel_t: usize,
    pub blocks: usize,
    pub spatial_mode: SpatialMode,
    pub spatial_activation: Activation,
    pub lambda_max: LambdaMax,
    /// Construction-kernel radius in miles.
    pub lambda: f64,
    pub fusion: FusionVariant,
    pub fusion_shape: FusionShape,
    pub include_construction: bool,
    pub rnn_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            segments: 20,
            history: 12,
            horizon: 3,
            heads: 4,
            d_model: 16,
            channels: 16,
            kernel_t: 3,
            blocks: 2,
            spatial_mode: SpatialMode::Linear,
            spatial_activation: Activation::Relu,
            lambda_max: LambdaMax::Auto,
            lambda: DEFAULT_LAMBDA,
            fusion: FusionVariant::LearnedBoth,
            fusion_shape: FusionShape::PerSegment,
            include_construction: true,
            rnn_hidden: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest history the convolution stack accepts.
    pub fn min_history(&self) -> usize {
        self.blocks * self.kernel_t.saturating_sub(1) + 1
    }

    /// Input channels expected by [`GcnRwz::forward`].
    pub fn input_channels(&self) -> usize {
        if self.include_construction {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("segments", self.segments),
            ("history", self.history),
            ("horizon", self.horizon),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("channels", self.channels),
            ("kernel_t", self.kernel_t),
            ("blocks", self.blocks),
            ("rnn_hidden", self.rnn_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(invalid(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.history < self.min_history() {
            return Err(invalid(format!(
                "history {} is too short for {} blocks with kernel {}: minimum H is {}",
                self.history,
                self.blocks,
                self.kernel_t,
                self.min_history()
            )));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if let LambdaMax::Fixed(v) = self.lambda_max {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("lambda_max must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn fusion_width(&self) -> usize {
        match self.fusion_shape {
            FusionShape::PerSegment => 1,
            FusionShape::Full => self.history,
        }
    }

    /// Every parameter name with its shape, in registry order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let n = self.segments;
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        if self.fusion.uses_speed_weight() {
            push("fusion.w_s".into(), vec![n, self.fusion_width()]);
        }
        if self.include_construction {
            push("fusion.w_c".into(), vec![n, self.fusion_width()]);
        }
        // the speed wave plus the raw speed channel
        let mut c_in = 2;
        let mut t = self.history;
        for b in 0..self.blocks {
            let c = self.channels;
            for (attn, d_in) in [("spatial_attn", c_in * t), ("temporal_attn", c_in * n)] {
                for w in ["w_q", "w_k", "w_v"] {
                    push(format!("block{b}.{attn}.{w}"), vec![d_in, self.d_model]);
                }
                push(format!("block{b}.{attn}.w_o"), vec![self.d_model, d_in]);
            }
            let theta = match self.spatial_mode {
                SpatialMode::Linear => vec![c_in, c],
                SpatialMode::Chebyshev { order } => vec![order + 1, c_in, c],
            };
            push(format!("block{b}.graph_conv.theta"), theta);
            push(format!("block{b}.temporal_conv.kernel"), vec![c, c, self.kernel_t]);
            push(format!("block{b}.temporal_conv.bias"), vec![c]);
            if c_in != c {
                push(format!("block{b}.residual.proj"), vec![c, c_in, 1]);
            }
            c_in = c;
            t -= self.kernel_t - 1;
        }
        push("head.reduce.kernel".into(), vec![1, c_in, 1]);
        push("head.reduce.bias".into(), vec![1]);
        let h = self.rnn_hidden;
        for dir in ["gru_fwd", "gru_bwd"] {
            for g in ["z", "r", "h"] {
                push(format!("head.{dir}.w_{g}"), vec![1, h]);
                push(format!("head.{dir}.u_{g}"), vec![h, h]);
                push(format!("head.{dir}.b_{g}"), vec![h]);
            }
        }
        push("head.out.weight".into(), vec![2 * h, self.horizon]);
        push("head.out.bias".into(), vec![self.horizon]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

pub type ParamRegistry = IndexMap<String, Tensor>;
pub type BoundParams = IndexMap<String, Var>;

#[derive(Debug, Clone)]
pub struct GcnRwz {
    config: ModelConfig,
    params: ParamRegistry,
    operators: SpectralOperators,
}

fn initial_value(rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> Tensor {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "w_s" => Tensor::ones(shape),
        "w_c" => Tensor::zeros(shape),
        l if l.starts_with("b_") || l == "bias" => Tensor::zeros(shape),
        l if l.starts_with("u_") => init::orthogonal(rng, shape[0]),
        _ => {
            let (fan_in, fan_out) = match shape {
                [a, b] => (*a, *b),
                // conv kernels [C_out, C_in, k] and Chebyshev stacks [K+1, C_in, C_out]
                [a, b, c] if leaf == "theta" => (a * b, *c),
                [a, b, c] => (b * c, a * c),
                _ => (1, 1),
            };
            init::xavier_uniform(rng, shape, fan_in, fan_out)
        }
    }
}

impl GcnRwz {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig, graph: &RoadGraph) -> Result<Self> {
        config.validate()?;
        check_graph(&config, graph)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                let v = initial_value(&mut rng, &name, &shape);
                (name, v)
            })
            .collect();
        let operators = SpectralOperators::new(graph, config.lambda_max)?;
        Ok(GcnRwz { config, params, operators })
    }

    /// Model from an explicit registry, checked against the config layout.
    pub fn from_parameters(config: ModelConfig, graph: &RoadGraph, params: ParamRegistry) -> Result<Self> {
        config.validate()?;
        check_graph(&config, graph)?;
        check_registry(&config, &params)?;
        let operators = SpectralOperators::new(graph, config.lambda_max)?;
        Ok(GcnRwz { config, params, operators })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &ParamRegistry {
        &self.params
    }

    pub fn operators(&self) -> &SpectralOperators {
        &self.operators
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Overwrite one parameter; the shape must not change.
    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(invalid(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Register every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let [_, ch, n, h] = shape[..] else {
            return Err(invalid(format!("model input must be S×C×N×H, got {shape:?}")));
        };
        let axes = [
            ("channel", ch, c.input_channels()),
            ("segment", n, c.segments),
            ("history", h, c.history),
        ];
        for (axis, got, want) in axes {
            if got != want {
                return Err(invalid(format!("model input {axis} axis has size {got}, expected {want}")));
            }
        }
        Ok(())
    }

    /// Forward pass with parameters already bound on `tape`.
    pub fn forward_bound(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let c = &self.config;
        let get = |name: &str| -> Result<Var> {
            p.get(name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let xs = tape.slice(x, 1, 0, 1)?;
        let xc = if c.include_construction {
            Some(tape.slice(x, 1, 1, 1)?)
        } else {
            None
        };
        let ws = p.get("fusion.w_s").copied();
        let wc = p.get("fusion.w_c").copied();
        let wave = fuse_vars(tape, xs, xc, ws, wc, c.fusion)?;
        let mut h = tape.concat(&[wave, xs], 1)?;

        let op = match c.spatial_mode {
            SpatialMode::Linear => &self.operators.normalized_adjacency,
            SpatialMode::Chebyshev { .. } => &self.operators.scaled_laplacian,
        };
        let ctx = BlockContext {
            operator: tape.constant(op.clone()),
            heads: c.heads,
            spatial_activation: c.spatial_activation,
        };
        for b in 0..c.blocks {
            let attn = |kind: &str| -> Result<AttentionParams> {
                Ok(AttentionParams {
                    w_q: get(&format!("block{b}.{kind}.w_q"))?,
                    w_k: get(&format!("block{b}.{kind}.w_k"))?,
                    w_v: get(&format!("block{b}.{kind}.w_v"))?,
                    w_o: get(&format!("block{b}.{kind}.w_o"))?,
                })
            };
            let bp = BlockParams {
                spatial_attention: attn("spatial_attn")?,
                temporal_attention: attn("temporal_attn")?,
                graph_conv: SpatialConvParams {
                    theta: get(&format!("block{b}.graph_conv.theta"))?,
                    mode: c.spatial_mode,
                },
                temporal_conv: TemporalConvParams {
                    kernel: get(&format!("block{b}.temporal_conv.kernel"))?,
                    bias: get(&format!("block{b}.temporal_conv.bias"))?,
                },
                residual: p.get(&format!("block{b}.residual.proj")).copied(),
            };
            h = st_block(tape, h, &ctx, &bp)?;
        }

        let gru = |dir: &str| -> Result<GruParams> {
            let g = |n: &str| get(&format!("head.{dir}.{n}"));
            Ok(GruParams {
                w_z: g("w_z")?,
                u_z: g("u_z")?,
                b_z: g("b_z")?,
                w_r: g("w_r")?,
                u_r: g("u_r")?,
                b_r: g("b_r")?,
                w_h: g("w_h")?,
                u_h: g("u_h")?,
                b_h: g("b_h")?,
            })
        };
        let head = OutputHeadParams {
            reduce_kernel: get("head.reduce.kernel")?,
            reduce_bias: get("head.reduce.bias")?,
            recurrent: BiRecurrentParams {
                forward: gru("gru_fwd")?,
                backward: gru("gru_bwd")?,
            },
            out_weight: get("head.out.weight")?,
            out_bias: get("head.out.bias")?,
        };
        output_head(tape, h, &head)
    }

    /// S×C×N×H normalized inputs → S×N×P normalized predictions.
    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p: BoundParams = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        let x = tape.constant(inputs.clone());
        let y = self.forward_bound(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }

    /// Closest approach of any ReLU input to zero during a forward pass.
    pub fn kink_margin(&self, inputs: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(inputs.clone());
        self.forward_bound(&mut tape, &bound, x)?;
        Ok(tape.kink_margin())
    }

    /// Loss value and per-parameter gradients for one batch. `loss` maps
    /// `(prediction, target)` vars to a scalar var.
    pub fn loss_and_gradients(
        &self,
        inputs: &Tensor,
        targets: &Tensor,
        loss: impl Fn(&mut Tape, Var, Var) -> Result<Var>,
    ) -> Result<(f64, ParamRegistry)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(inputs.clone());
        let y = tape.constant(targets.clone());
        let pred = self.forward_bound(&mut tape, &bound, x)?;
        let l = loss(&mut tape, pred, y)?;
        let value = tape.value(l).item();
        let mut grads: Gradients = tape.backward(l)?;
        let out = bound
            .iter()
            .map(|(k, &v)| {
                let g = grads.take(&tape, v);
                (k.clone(), g)
            })
            .collect();
        Ok((value, out))
    }

    /// Worst relative error between backprop and central differences of the
    /// MSE loss, over every coordinate of every parameter.
    pub fn gradient_check(&self, inputs: &Tensor, targets: &Tensor, eps: f64) -> Result<f64> {
        let names: Vec<&String> = self.params.keys().collect();
        let values: Vec<Tensor> = self.params.values().cloned().collect();
        finite_difference_check_many(
            |tape, vars| {
                let bound: BoundParams = names.iter().zip(vars).map(|(n, &v)| ((*n).clone(), v)).collect();
                let x = tape.constant(inputs.clone());
                let y = tape.constant(targets.clone());
                let pred = self.forward_bound(tape, &bound, x)?;
                let d = tape.sub(pred, y)?;
                let sq = tape.mul(d, d)?;
                Ok(tape.mean(sq))
            },
            &values,
            eps,
        )
    }
}

fn check_graph(config: &ModelConfig, graph: &RoadGraph) -> Result<()> {
    if graph.n() != config.segments {
        return Err(invalid(format!(
            "graph has {} segments but the model declares {}",
            graph.n(),
            config.segments
        )));
    }
    Ok(())
}

fn check_registry(config: &ModelConfig, params: &ParamRegistry) -> Result<()> {
    let layout = config.parameter_layout();
    for (name, shape) in &layout {
        match params.get(name) {
            None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            Some(t) if !t.is_finite() => {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = params.keys().find(|k| !layout.iter().any(|(n, _)| n == *k)) {
        return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GCNRWZ01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Data-side context stored alongside the weights so a checkpoint can be
/// evaluated without re-deriving preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub segment_ids: Vec<String>,
    pub adjacency: AdjacencyMode,
    pub normalization: Option<NormalizationParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
    meta: CheckpointMeta,
}

/// A decoded checkpoint that has not yet been attached to a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: ParamRegistry,
}

pub fn save_checkpoint(model: &GcnRwz, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(model.params.len());
    let mut offset = 0u64;
    for (name, t) in &model.params {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.numel() as u64;
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        manifest,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize + 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

impl Checkpoint {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 8 + 8 + 4 {
            return Err(bad(format!("truncated: only {} bytes", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic bytes".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if 16usize.saturating_add(hlen) > body.len() {
            return Err(bad(format!("truncated: header claims {hlen} bytes")));
        }
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(bad(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let header: Header = serde_json::from_slice(&body[16..16 + hlen])
            .map_err(|e| bad(format!("malformed header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported format version {} (expected {CHECKPOINT_VERSION})",
                header.format_version
            )));
        }
        let data = &body[16 + hlen..];
        let mut params = ParamRegistry::new();
        let mut expected_offset = 0u64;
        for e in header.manifest {
            let len = e.shape.iter().product::<usize>();
            if e.offset != expected_offset {
                return Err(bad(format!("parameter {} at offset {}, expected {expected_offset}", e.name, e.offset)));
            }
            let start = e.offset as usize;
            let end = start + 8 * len;
            if end > data.len() {
                return Err(bad(format!("truncated data for parameter {}", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            expected_offset = end as u64;
            if params.insert(e.name.clone(), Tensor::new(&e.shape, values)?).is_some() {
                return Err(bad(format!("duplicate parameter {}", e.name)));
            }
        }
        if expected_offset as usize != data.len() {
            return Err(bad(format!(
                "{} trailing bytes after parameter data",
                data.len() - expected_offset as usize
            )));
        }
        Ok(Checkpoint {
            config: header.config,
            meta: header.meta,
            params,
        })
    }

    /// Attach to `graph` using the stored configuration.
    pub fn into_model(self, graph: &RoadGraph) -> Result<GcnRwz> {
        GcnRwz::from_parameters(self.config, graph, self.params)
    }

    /// Attach to `graph` under an expected configuration; the stored
    /// parameters must match its layout exactly.
    pub fn into_model_as(self, config: ModelConfig, graph: &RoadGraph) -> Result<GcnRwz> {
        GcnRwz::from_parameters(config, graph, self.params)
    }
}

pub fn load_checkpoint(bytes: &[u8], graph: &RoadGraph) -> Result<GcnRwz> {
    Checkpoint::parse(bytes)?.into_model(graph)
}
