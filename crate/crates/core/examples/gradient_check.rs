//! Compare reverse-mode gradients of the full network with central
//! differences, parameter by parameter.
//!
//! cargo run --example gradient_check

use gcnrwz::graph::{build_graph, AdjacencyMode, Edge};
use gcnrwz::model::{GcnRwz, ModelConfig};
use gcnrwz::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gcnrwz::Result<()> {
    let ids: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
    let edges = vec![Edge::new("s0", "s1", 1.0), Edge::new("s1", "s2", 1.0)];
    let g = build_graph(&ids, &edges, AdjacencyMode::Binary)?;
    let cfg = ModelConfig {
        segments: 3,
        history: 8,
        horizon: 2,
        heads: 2,
        d_model: 4,
        channels: 3,
        rnn_hidden: 3,
        ..ModelConfig::default()
    };
    let mut model = GcnRwz::new(cfg.clone(), &g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // move zero-initialized parameters off the relu kink
    for (_, p) in model.parameters_mut() {
        if p.data().iter().all(|&v| v == 0.0) {
            p.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
    let mut sample = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
    };
    let x = sample(&[2, cfg.input_channels(), 3, 8])?;
    let y = sample(&[2, 3, 2])?;

    println!("{} parameters in {} tensors", model.parameter_count(), model.parameters().len());
    // a step that reaches past the nearest relu input measures the kink, not the gradient
    println!("closest relu input to zero: {:.2e}", model.kink_margin(&x)?);
    for eps in [1e-3, 1e-4, 1e-5, 1e-6] {
        let err = model.gradient_check(&x, &y, eps)?;
        println!("eps {eps:.0e}: max relative error {err:.3e}");
    }
    Ok(())
}
