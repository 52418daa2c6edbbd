//! Turn a construction schedule into the per-segment influence map.
//!
//! cargo run --example construction_map -- 3.0

use gcnrwz::dataio::{format_timestamp, parse_timestamp};
use gcnrwz::features::{construction_feature_map, construction_kernel, ConstructionEvent, STEP_SECONDS};
use gcnrwz::graph::{build_graph, AdjacencyMode, Edge};

fn main() -> gcnrwz::Result<()> {
    let lambda: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3.0);
    let ids: Vec<String> = (0..6).map(|i| format!("seg{i:02}")).collect();
    let edges: Vec<Edge> = (1..6).map(|i| Edge::new(&ids[i - 1], &ids[i], 1.0)).collect();
    let g = build_graph(&ids, &edges, AdjacencyMode::Gaussian)?;

    let start = parse_timestamp("2019-03-04T09:00:00Z")?;
    let events = vec![
        ConstructionEvent {
            segment_id: "seg02".into(),
            start: start + 2 * STEP_SECONDS,
            end: start + 8 * STEP_SECONDS,
        },
        ConstructionEvent {
            segment_id: "seg05".into(),
            start: start + 6 * STEP_SECONDS,
            end: start + 10 * STEP_SECONDS,
        },
    ];

    println!("kernel at lambda = {lambda}:");
    for d in [0.0, 0.5, 1.0, 1.5, 2.0, 3.0] {
        println!("  dis {d:3.1} mi -> {:.4}", construction_kernel(d, lambda));
    }

    let map = construction_feature_map(&g, &events, lambda, 12, start)?;
    print!("\n{:>8}", "");
    for col in 0..map.t() {
        print!(" {}", &format_timestamp(map.timestamp(col))[11..16]);
    }
    println!();
    for (i, id) in map.segment_ids.iter().enumerate() {
        let cells: Vec<String> = map.row(i).iter().map(|v| format!("{v:5.2}")).collect();
        println!("{id:>8} {}", cells.join(" "));
    }
    Ok(())
}
