//! Fusion-variant and kernel-radius ablations on a small corridor.
//!
//! cargo run --release --example ablation -- 3

use gcnrwz::dataio::{generate_synthetic, Corpus, MissingMask, SyntheticConfig};
use gcnrwz::experiment::ablate;
use gcnrwz::model::ModelConfig;
use gcnrwz::training::TrainConfig;

fn main() -> gcnrwz::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let synth = generate_synthetic(&SyntheticConfig {
        n_segments: 8,
        days: 4,
        ..SyntheticConfig::default()
    })?;
    let corpus = Corpus {
        graph: synth.graph,
        speeds: synth.speeds,
        events: synth.events,
        missing: MissingMask::default(),
        imputed: 0,
    };
    let base = ModelConfig {
        horizon: 6,
        channels: 6,
        d_model: 8,
        heads: 2,
        rnn_hidden: 6,
        ..ModelConfig::default()
    };
    let report = ablate(&corpus, &base, &TrainConfig { epochs, ..TrainConfig::default() }, |setting, r| {
        eprintln!("[{setting}] epoch {} val RMSE {:.3}", r.epoch, r.val_rmse)
    })?;
    println!("{:<18} {:>8} {:>8} {:>8}", "setting", "RMSE", "MAE", "MAPE %");
    for row in report.fusion.iter().chain(&report.lambda) {
        let mape = row.mape.map_or("-".into(), |m| format!("{m:.2}"));
        println!("{:<18} {:>8.3} {:>8.3} {:>8}", row.setting, row.rmse, row.mae, mape);
    }
    Ok(())
}
