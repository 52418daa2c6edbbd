//! Generate a synthetic corridor and write it in the on-disk corpus format.
//!
//! cargo run --example synthetic_corpus -- /tmp/corridor

use std::path::PathBuf;

use gcnrwz::dataio::{generate_synthetic, load_corpus, SyntheticConfig, Topology};
use gcnrwz::graph::AdjacencyMode;

fn main() -> gcnrwz::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("gcnrwz-corridor"));
    let cfg = SyntheticConfig {
        n_segments: 12,
        topology: Topology::Grid,
        days: 7,
        ..SyntheticConfig::default()
    };
    let corpus = generate_synthetic(&cfg)?;
    corpus.write(&out)?;
    println!("wrote {}", out.display());

    let t = corpus.speeds.t();
    for ev in corpus.events.iter().take(5) {
        let i = corpus.graph.index_of(&ev.segment_id)?;
        let first = ((ev.start - corpus.speeds.start) / 300) as usize;
        let last = (((ev.end - corpus.speeds.start) / 300) as usize).min(t) - 1;
        println!(
            "event on {}: speed {:.1} -> {:.1} MPH (free flow {:.1} -> {:.1})",
            ev.segment_id,
            corpus.speeds.values.at(&[i, first]),
            corpus.speeds.values.at(&[i, last]),
            corpus.free_flow.values.at(&[i, first]),
            corpus.free_flow.values.at(&[i, last]),
        );
    }

    let back = load_corpus(&out, AdjacencyMode::Gaussian)?;
    println!(
        "reloaded: {} segments x {} steps, {} events, {} imputed cells",
        back.graph.n(),
        back.speeds.t(),
        back.events.len(),
        back.imputed
    );
    Ok(())
}
