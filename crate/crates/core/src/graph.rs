//! Directed-graph utilities on adjacency matrices (`a[(j, i)] != 0` means `j -> i`).

use serde::{Deserialize, Serialize};

use crate::diffkit::Tensor2;

/// Adjacency lists of edges whose weight magnitude exceeds `threshold`.
pub fn edge_lists(a: &Tensor2, threshold: f64) -> Vec<Vec<usize>> {
    let n = a.rows();
    (0..n).map(|j| (0..n).filter(|&i| a[(j, i)].abs() > threshold).collect()).collect()
}

/// Some directed cycle as a node sequence `v0 -> v1 -> ... -> v0`, if any.
/// Self-loops count as cycles of length one.
pub fn find_cycle(adj: &[Vec<usize>]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let n = adj.len();
    let mut mark = vec![Mark::New; n];
    let mut parent = vec![usize::MAX; n];
    for root in 0..n {
        if mark[root] != Mark::New {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        mark[root] = Mark::Open;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if *next < adj[v].len() {
                let w = adj[v][*next];
                *next += 1;
                match mark[w] {
                    Mark::New => {
                        mark[w] = Mark::Open;
                        parent[w] = v;
                        stack.push((w, 0));
                    }
                    Mark::Open => {
                        let mut cycle = vec![v];
                        let mut u = v;
                        while u != w {
                            u = parent[u];
                            cycle.push(u);
                        }
                        cycle.reverse();
                        return Some(cycle);
                    }
                    Mark::Done => {}
                }
            } else {
                mark[v] = Mark::Done;
                stack.pop();
            }
        }
    }
    None
}

pub fn is_acyclic(a: &Tensor2, threshold: f64) -> bool {
    find_cycle(&edge_lists(a, threshold)).is_none()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeRemoval {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Zeroes the diagonal and every entry with `|a| < threshold`, then removes
/// the weakest edge of each remaining cycle until the graph is acyclic.
pub fn project_acyclic(a: &Tensor2, threshold: f64) -> (Tensor2, Vec<EdgeRemoval>) {
    let mut out = a.map(|v| if v.abs() < threshold { 0.0 } else { v });
    out.set_diagonal(0.0);
    let mut removals = Vec::new();
    while let Some(cycle) = find_cycle(&edge_lists(&out, 0.0)) {
        let (from, to) = (0..cycle.len())
            .map(|k| (cycle[k], cycle[(k + 1) % cycle.len()]))
            .min_by(|x, y| out[*x].abs().total_cmp(&out[*y].abs()).then(x.cmp(y)))
            .expect("cycles are non-empty");
        removals.push(EdgeRemoval { from, to, weight: out[(from, to)] });
        out[(from, to)] = 0.0;
    }
    (out, removals)
}

/// Orders nodes so every edge points forward; `None` for cyclic graphs.
pub fn topological_order(adj: &[Vec<usize>]) -> Option<Vec<usize>> {
    let n = adj.len();
    let mut indeg = vec![0usize; n];
    for targets in adj {
        for &i in targets {
            indeg[i] += 1;
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).rev().collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = ready.pop() {
        order.push(v);
        for &w in adj[v].iter().rev() {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push(w);
            }
        }
    }
    (order.len() == n).then_some(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_cycles() {
        let chain = Tensor2::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]]);
        assert!(is_acyclic(&chain, 0.0));
        let mut cyc = chain.clone();
        cyc[(2, 0)] = 0.5;
        let cycle = find_cycle(&edge_lists(&cyc, 0.0)).unwrap();
        assert_eq!(cycle.len(), 3);
        assert!(!is_acyclic(&Tensor2::identity(2), 0.0));
        assert_eq!(topological_order(&edge_lists(&chain, 0.0)), Some(vec![0, 1, 2]));
    }

    #[test]
    fn projection_removes_weakest_edge() {
        let a = Tensor2::from_rows(&[vec![0.9, 0.8, 0.1], vec![0.5, 0.0, 0.0], vec![0.0, 0.0, 0.0]]);
        let (p, removed) = project_acyclic(&a, 0.3);
        assert_eq!(removed, vec![EdgeRemoval { from: 1, to: 0, weight: 0.5 }]);
        assert_eq!(p[(0, 1)], 0.8);
        assert_eq!(p[(0, 2)], 0.0);
        assert_eq!(p[(0, 0)], 0.0);
        assert!(is_acyclic(&p, 0.0));
    }
}
