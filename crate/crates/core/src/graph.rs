//! Shortest-path helpers over weighted undirected graphs.

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};

/// Multi-source shortest-path distances. Unreachable nodes get `f64::INFINITY`.
pub fn multi_source_distances(n: usize, edges: &[(usize, usize, f64)], sources: &[usize]) -> Vec<f64> {
    // A virtual hub joined to every source with zero-length edges.
    let mut g = UnGraph::<(), f64>::with_capacity(n + 1, edges.len() + sources.len());
    for _ in 0..=n {
        g.add_node(());
    }
    for &(i, j, len) in edges {
        g.add_edge(NodeIndex::new(i), NodeIndex::new(j), len);
    }
    let hub = NodeIndex::new(n);
    for &s in sources {
        g.add_edge(hub, NodeIndex::new(s), 0.0);
    }
    let map = dijkstra(&g, hub, None, |e| *e.weight());
    (0..n)
        .map(|i| map.get(&NodeIndex::new(i)).copied().unwrap_or(f64::INFINITY))
        .collect()
}

/// All-pairs shortest paths, row-major `n * n`.
pub fn all_pairs_distances(n: usize, edges: &[(usize, usize, f64)]) -> Vec<f64> {
    let mut g = UnGraph::<(), f64>::with_capacity(n, edges.len());
    for _ in 0..n {
        g.add_node(());
    }
    for &(i, j, len) in edges {
        g.add_edge(NodeIndex::new(i), NodeIndex::new(j), len);
    }
    let mut out = vec![f64::INFINITY; n * n];
    for s in 0..n {
        let map = dijkstra(&g, NodeIndex::new(s), None, |e| *e.weight());
        for (node, d) in map {
            out[s * n + node.index()] = d;
        }
    }
    out
}

/// Connected-component labels from an edge list.
pub fn components(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(i, j) in edges {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}
