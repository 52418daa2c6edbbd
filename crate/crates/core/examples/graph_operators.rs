//! Build a small corridor graph and inspect its spectral operators.
//!
//! cargo run --example graph_operators

use gcnrwz::graph::{
    build_graph, chebyshev_apply, spectral_conv_oracle, AdjacencyMode, Edge, LambdaMax, SpectralOperators,
};
use gcnrwz::Tensor;

fn print_matrix(name: &str, m: &Tensor) {
    println!("{name}:");
    let n = m.shape()[1];
    for row in m.data().chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:7.3}")).collect();
        println!("  [{}]", cells.join(" "));
    }
}

fn main() -> gcnrwz::Result<()> {
    let names = ["i66-a", "i66-b", "i66-c", "i66-d", "i66-e", "ramp"];
    let ids: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let edges = vec![
        Edge::new("i66-a", "i66-b", 0.8),
        Edge::new("i66-b", "i66-c", 1.1),
        Edge::new("i66-c", "i66-d", 0.9),
        Edge::new("i66-d", "i66-e", 1.4),
        Edge::new("i66-c", "ramp", 0.4),
    ];
    let g = build_graph(&ids, &edges, AdjacencyMode::Gaussian)?;
    println!("segments: {:?}", g.segment_ids());
    print_matrix("gaussian adjacency", g.adjacency());
    print_matrix("shortest paths (miles)", &g.shortest_paths());

    let ops = SpectralOperators::new(&g, LambdaMax::Auto)?;
    println!("lambda_max = {:.4}", ops.lambda_max);
    print_matrix("renormalized adjacency", &ops.normalized_adjacency);
    print_matrix("scaled laplacian", &ops.scaled_laplacian);

    // a K = 2 Chebyshev filter against the eigendecomposition it approximates
    let theta = [0.5, -0.3, 0.2];
    let x = Tensor::new(&[6, 1], vec![60.0, 35.0, 58.0, 40.0, 55.0, 25.0])?;
    let terms = chebyshev_apply(&ops.scaled_laplacian, 2, &x)?;
    let fast: Vec<f64> = (0..6)
        .map(|i| (0..3).map(|k| theta[k] * terms[k].data()[i]).sum())
        .collect();
    let l = gcnrwz::graph::laplacian(&g);
    let eig = gcnrwz::graph::SpectralDecomposition::of(&l)?;
    let g_theta: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&lam| {
            let s = 2.0 * lam / ops.lambda_max - 1.0;
            (0..3).map(|k| theta[k] * gcnrwz::graph::chebyshev_scalar(k, s)).sum()
        })
        .collect();
    let exact = spectral_conv_oracle(&l, &g_theta, x.data())?;
    for (i, id) in g.segment_ids().iter().enumerate() {
        println!("{id:>6}: chebyshev {:9.5}  eigendecomposition {:9.5}", fast[i], exact[i]);
    }
    Ok(())
}
