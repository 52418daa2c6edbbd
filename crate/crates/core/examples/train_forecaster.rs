//! Train GCN-RWZ on a synthetic corridor and score it against the baselines.
//!
//! cargo run --release --example train_forecaster -- 10

use gcnrwz::dataio::{generate_synthetic, Corpus, MissingMask, SyntheticConfig};
use gcnrwz::experiment::{evaluate_model, train_on_corpus};
use gcnrwz::model::ModelConfig;
use gcnrwz::training::TrainConfig;

fn main() -> gcnrwz::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let synth = generate_synthetic(&SyntheticConfig {
        n_segments: 10,
        days: 7,
        ..SyntheticConfig::default()
    })?;
    let corpus = Corpus {
        graph: synth.graph,
        speeds: synth.speeds,
        events: synth.events,
        missing: MissingMask::default(),
        imputed: 0,
    };
    let model_cfg = ModelConfig {
        horizon: 6,
        channels: 8,
        heads: 2,
        rnn_hidden: 8,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let (outcome, prepared) = train_on_corpus(&corpus, &model_cfg, &train_cfg, |r| {
        println!(
            "epoch {:>3}  train loss {:.5}  val RMSE {:.3} MPH  ({:.1}s)",
            r.epoch, r.train_loss, r.val_rmse, r.wall_seconds
        )
    })?;
    println!("best epoch {}", outcome.best_epoch);

    let report = evaluate_model(&outcome.best, &prepared)?;
    println!("\ntest split, {} samples, P = {}", report.test_samples, report.horizon);
    for row in &report.models {
        let g = &row.report.global;
        let ev = row.report.event_window.metrics.map_or("-".to_string(), |m| format!("{:.3}", m.rmse));
        println!("{:<20} RMSE {:.3}  MAE {:.3}  event-window RMSE {ev}", row.model, g.rmse, g.mae);
    }
    Ok(())
}
