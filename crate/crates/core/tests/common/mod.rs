#![allow(dead_code)]

use std::collections::BTreeSet;

use hetero_decode::attention::AttnInstance;
use hetero_decode::graph::{CompGraph, Edge, Node, NodeKind};
use rand::Rng;

/// Neumaier-compensated sum.
pub fn neumaier(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Textbook softmax-weighted sum without any max shift.
pub fn naive_attention(inst: &AttnInstance<f64>) -> Vec<f64> {
    let d = inst.d_head();
    let w: Vec<f64> = (0..inst.len())
        .map(|j| {
            let dot = neumaier((0..d).map(|i| inst.query()[i] * inst.key(j)[i]));
            (dot * inst.scale()).exp()
        })
        .collect();
    let z = neumaier(w.iter().copied());
    (0..d)
        .map(|i| neumaier((0..inst.len()).map(|j| w[j] * inst.value(j)[i])) / z)
        .collect()
}

fn node(id: String, kind: NodeKind) -> Node {
    Node {
        id,
        kind,
        label: String::new(),
    }
}

fn edge(g: &[Node], u: usize, v: usize, bytes: u64) -> Edge {
    Edge {
        src: g[u].id.clone(),
        dst: g[v].id.clone(),
        bytes,
        per_token: true,
    }
}

/// Random single-input, single-output DAG with `n` nodes (nodes are in
/// topological order) and one attention operator somewhere in the middle.
pub fn random_dag<R: Rng>(rng: &mut R, n: usize) -> CompGraph {
    assert!(n >= 3);
    let attn = rng.random_range(1..n - 1);
    let nodes: Vec<Node> = (0..n)
        .map(|i| {
            let kind = match i {
                0 => NodeKind::Input,
                _ if i == n - 1 => NodeKind::Output,
                _ if i == attn => NodeKind::Attention,
                _ => NodeKind::Matmul,
            };
            node(format!("n{i}"), kind)
        })
        .collect();
    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    for v in 1..n {
        pairs.insert((rng.random_range(0..v), v));
        for u in 0..v {
            if rng.random_bool(0.25) {
                pairs.insert((u, v));
            }
        }
    }
    for u in 0..n - 1 {
        if !pairs.iter().any(|&(a, _)| a == u) {
            pairs.insert((u, rng.random_range(u + 1..n)));
        }
    }
    let edges = pairs
        .into_iter()
        .map(|(u, v)| edge(&nodes, u, v, rng.random_range(1..=64)))
        .collect();
    CompGraph::new(nodes, edges).expect("generator builds valid graphs")
}

/// Small diamond: two branches rejoin after the attention operator.
pub fn diamond() -> CompGraph {
    let spec = [
        ("input", NodeKind::Input),
        ("left", NodeKind::Matmul),
        ("right", NodeKind::Matmul),
        ("attention", NodeKind::Attention),
        ("join", NodeKind::Elementwise),
        ("output", NodeKind::Output),
    ];
    let nodes: Vec<Node> = spec.iter().map(|&(id, k)| node(id.into(), k)).collect();
    let e = [(0, 1, 5), (0, 2, 3), (1, 3, 4), (2, 3, 4), (2, 4, 8), (3, 4, 2), (4, 5, 1)];
    let edges = e.iter().map(|&(u, v, w)| edge(&nodes, u, v, w)).collect();
    CompGraph::new(nodes, edges).unwrap()
}

/// Minimum weighted cut around `attention` by exhaustive search over every
/// prefix-closed bipartition of the other nodes.
pub fn brute_force_cut(g: &CompGraph, attention: usize) -> u64 {
    let n = g.node_count();
    let others: Vec<usize> = (0..n).filter(|&i| i != attention).collect();
    let preds: Vec<usize> = g.predecessors(attention).collect();
    let succs: Vec<usize> = g.successors(attention).collect();
    let mut best = u64::MAX;
    for mask in 0u32..(1u32 << others.len()) {
        let mut in_s = vec![false; n];
        for (bit, &v) in others.iter().enumerate() {
            in_s[v] = mask >> bit & 1 == 1;
        }
        if preds.iter().any(|&p| !in_s[p]) || succs.iter().any(|&s| in_s[s]) {
            continue;
        }
        let mut weight = 0;
        let mut closed = true;
        for k in 0..g.edges().len() {
            let (u, v) = g.endpoints(k);
            if u == attention || v == attention {
                continue;
            }
            match (in_s[u], in_s[v]) {
                (true, false) => weight += g.weight(k),
                (false, true) => closed = false,
                _ => {}
            }
        }
        if closed {
            best = best.min(weight);
        }
    }
    best
}
