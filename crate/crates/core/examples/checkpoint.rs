//! Save a model to the checkpoint format, read it back, and show that a
//! single flipped byte is caught.
//!
//! cargo run --example checkpoint

use gcnrwz::dataio::{generate_synthetic, SyntheticConfig};
use gcnrwz::model::{save_checkpoint, Checkpoint, CheckpointMeta, GcnRwz, ModelConfig};
use gcnrwz::Tensor;

fn main() -> gcnrwz::Result<()> {
    let synth = generate_synthetic(&SyntheticConfig { n_segments: 5, days: 1, ..SyntheticConfig::default() })?;
    let cfg = ModelConfig { segments: 5, channels: 4, d_model: 8, heads: 2, rnn_hidden: 4, ..ModelConfig::default() };
    let model = GcnRwz::new(cfg.clone(), &synth.graph)?;
    let meta = CheckpointMeta {
        segment_ids: synth.graph.segment_ids().to_vec(),
        ..CheckpointMeta::default()
    };
    let bytes = save_checkpoint(&model, &meta)?;
    println!("checkpoint: {} bytes, {} parameters", bytes.len(), model.parameter_count());

    let ck = Checkpoint::parse(&bytes)?;
    for (name, t) in ck.params.iter().take(4) {
        println!("  {name} {:?}", t.shape());
    }
    let restored = ck.into_model(&synth.graph)?;
    let x = Tensor::full(&[1, cfg.input_channels(), 5, cfg.history], 0.5);
    let same = model.forward(&x)? == restored.forward(&x)?;
    println!("forward after round-trip is bitwise identical: {same}");

    let mut damaged = bytes.clone();
    let i = damaged.len() / 2;
    damaged[i] ^= 0x01;
    match Checkpoint::parse(&damaged) {
        Ok(_) => println!("damaged checkpoint accepted (unexpected)"),
        Err(e) => println!("damaged checkpoint rejected: {e}"),
    }
    Ok(())
}
