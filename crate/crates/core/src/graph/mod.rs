//! Operator-graph slicing.
//!
//! Attention operators are cut out of a weighted computation graph. For each
//! one, a minimum weighted cut separates what must run before it from what
//! runs after; the cut edges are the context a slice hands to the next. `n`
//! attention operators yield `n + 1` slices, each scheduled so the query
//! projection (and everything it depends on) runs as early as possible.

mod flow;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use flow::FlowNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Input,
    Output,
    Matmul,
    Attention,
    Elementwise,
    Activation,
    QProj,
    KProj,
    VProj,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    /// Tensor size; per token unless `per_token` is false.
    pub bytes: u64,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub per_token: bool,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Deserialize)]
struct GraphDoc {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

/// A validated operator DAG.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    #[serde(skip)]
    ends: Vec<(usize, usize)>,
    #[serde(skip)]
    succ: Vec<Vec<usize>>,
    #[serde(skip)]
    pred: Vec<Vec<usize>>,
    #[serde(skip)]
    topo: Vec<usize>,
}

pub const LLAMA_BLOCK_JSON: &str = include_str!("../../data/llama-block.json");
pub const TWO_LAYER_JSON: &str = include_str!("../../data/two-layer.json");

/// Parse and validate a graph document.
pub fn load_graph(json: &str) -> Result<CompGraph> {
    let doc: GraphDoc = serde_json::from_str(json)?;
    CompGraph::new(doc.nodes, doc.edges)
}

impl CompGraph {
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate node id `{}`", n.id)));
            }
        }
        let mut ends = Vec::with_capacity(edges.len());
        let mut succ = vec![Vec::new(); nodes.len()];
        let mut pred = vec![Vec::new(); nodes.len()];
        for (k, e) in edges.iter().enumerate() {
            let lookup = |id: &str| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Graph(format!("edge {}->{}: dangling endpoint `{id}`", e.src, e.dst)))
            };
            let (u, v) = (lookup(&e.src)?, lookup(&e.dst)?);
            if e.bytes == 0 {
                return Err(Error::Graph(format!("edge {}->{}: weight must be > 0", e.src, e.dst)));
            }
            if u == v {
                return Err(Error::Graph(format!("self loop on `{}`", e.src)));
            }
            ends.push((u, v));
            succ[u].push(k);
            pred[v].push(k);
        }
        // Kahn's algorithm, lowest index first
        let mut indeg: Vec<usize> = pred.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..nodes.len()).filter(|&i| indeg[i] == 0).collect();
        let mut topo = Vec::with_capacity(nodes.len());
        while let Some(u) = ready.pop_first() {
            topo.push(u);
            for &k in &succ[u] {
                let v = ends[k].1;
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    ready.insert(v);
                }
            }
        }
        if topo.len() != nodes.len() {
            let stuck = (0..nodes.len()).find(|&i| indeg[i] > 0).unwrap();
            return Err(Error::Graph(format!("cycle through `{}`", nodes[stuck].id)));
        }
        let g = CompGraph {
            nodes,
            edges,
            ends,
            succ,
            pred,
            topo,
        };
        g.check_frontiers()?;
        Ok(g)
    }

    fn check_frontiers(&self) -> Result<()> {
        for (kind, name) in [(NodeKind::Input, "input"), (NodeKind::Output, "output")] {
            let found: Vec<usize> = (0..self.nodes.len()).filter(|&i| self.nodes[i].kind == kind).collect();
            if found.len() != 1 {
                return Err(Error::Graph(format!(
                    "expected exactly one {name} node, found {}",
                    found.len()
                )));
            }
        }
        for i in 0..self.nodes.len() {
            let kind = self.nodes[i].kind;
            if self.pred[i].is_empty() && kind != NodeKind::Input {
                return Err(Error::Graph(format!("`{}` has no inputs but is not the input node", self.nodes[i].id)));
            }
            if self.succ[i].is_empty() && kind != NodeKind::Output {
                return Err(Error::Graph(format!("`{}` has no consumers but is not the output node", self.nodes[i].id)));
            }
            if kind == NodeKind::Input && !self.pred[i].is_empty() {
                return Err(Error::Graph("input node has incoming edges".into()));
            }
            if kind == NodeKind::Output && !self.succ[i].is_empty() {
                return Err(Error::Graph("output node has outgoing edges".into()));
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// `(src, dst)` node indices of edge `k`.
    pub fn endpoints(&self, k: usize) -> (usize, usize) {
        self.ends[k]
    }

    pub fn weight(&self, k: usize) -> u64 {
        self.edges[k].bytes
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn predecessors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.pred[v].iter().map(move |&k| self.ends[k].0)
    }

    pub fn successors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.succ[v].iter().map(move |&k| self.ends[k].1)
    }

    /// Attention nodes in topological order.
    pub fn attention_nodes(&self) -> Vec<usize> {
        self.topo
            .iter()
            .copied()
            .filter(|&i| self.nodes[i].kind == NodeKind::Attention)
            .collect()
    }

    /// Copy with per-token edge weights multiplied by `batch`.
    pub fn scaled(&self, batch: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Precondition("batch must be >= 1".into()));
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                bytes: if e.per_token { e.bytes * batch } else { e.bytes },
                per_token: false,
                ..e.clone()
            })
            .collect();
        CompGraph::new(self.nodes.clone(), edges)
    }

    pub fn reaches(&self, from: usize, to: usize) -> bool {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![from];
        while let Some(u) = stack.pop() {
            if u == to {
                return true;
            }
            if !std::mem::replace(&mut seen[u], true) {
                stack.extend(self.successors(u));
            }
        }
        false
    }
}

/// A minimum weighted cut around one attention operator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CutResult {
    pub attention: usize,
    /// Edge indices crossing from `s_side` to `t_side`.
    pub cut_edges: Vec<usize>,
    pub cut_weight: u64,
    pub s_side: BTreeSet<usize>,
    pub t_side: BTreeSet<usize>,
}

impl CutResult {
    /// No edge runs from the t side back to the s side.
    pub fn is_prefix_closed(&self, g: &CompGraph) -> bool {
        (0..g.edges.len()).all(|k| {
            let (u, v) = g.endpoints(k);
            !(self.t_side.contains(&u) && self.s_side.contains(&v))
        })
    }
}

/// Minimum weighted cut separating the attention node's inputs from its consumers.
pub fn min_cut_at(g: &CompGraph, attention: usize) -> Result<CutResult> {
    min_cut_forced(g, attention, &BTreeSet::new())
}

fn min_cut_forced(g: &CompGraph, attention: usize, forced_s: &BTreeSet<usize>) -> Result<CutResult> {
    if g.nodes.get(attention).map(|n| n.kind) != Some(NodeKind::Attention) {
        return Err(Error::Precondition(format!("node {attention} is not an attention operator")));
    }
    let n = g.nodes.len();
    let (source, sink) = (n, n + 1);
    let total: u128 = g.edges.iter().map(|e| e.bytes as u128).sum();
    let inf = total + 1;

    let mut net = FlowNetwork::new(n + 2);
    for k in 0..g.edges.len() {
        let (u, v) = g.endpoints(k);
        if u == attention || v == attention {
            continue;
        }
        net.add_arc(u, v, g.weight(k) as u128);
        net.add_arc(v, u, inf);
    }
    let preds: BTreeSet<usize> = g.predecessors(attention).collect();
    let succs: BTreeSet<usize> = g.successors(attention).collect();
    for &p in preds.iter().chain(forced_s.iter().filter(|&&x| x != attention)) {
        net.add_arc(source, p, inf);
    }
    for &s in &succs {
        net.add_arc(s, sink, inf);
    }
    let flow = net.max_flow(source, sink, inf);
    if flow >= inf {
        return Err(Error::Graph(format!(
            "inputs and consumers of `{}` cannot be separated",
            g.nodes[attention].id
        )));
    }
    let reach = net.residual_reachable(source);
    let s_side: BTreeSet<usize> = (0..n).filter(|&i| i != attention && reach[i]).collect();
    let t_side: BTreeSet<usize> = (0..n).filter(|&i| i != attention && !reach[i]).collect();
    let cut_edges: Vec<usize> = (0..g.edges.len())
        .filter(|&k| {
            let (u, v) = g.endpoints(k);
            s_side.contains(&u) && t_side.contains(&v)
        })
        .collect();
    let cut_weight: u64 = cut_edges.iter().map(|&k| g.weight(k)).sum();
    debug_assert_eq!(cut_weight as u128, flow);
    Ok(CutResult {
        attention,
        cut_edges,
        cut_weight,
        s_side,
        t_side,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SendKind {
    #[serde(rename = "send Q")]
    SendQ,
    #[serde(rename = "send KV")]
    SendKv,
}

impl SendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SendKind::SendQ => "send Q",
            SendKind::SendKv => "send KV",
        }
    }
}

/// One step of a slice's serial program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleItem {
    Op(usize),
    Send(SendKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SendPoint {
    /// Number of ops executed before the send.
    pub after_ops: usize,
    pub kind: SendKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSlice {
    pub index: usize,
    /// Node indices in execution order.
    pub ops: Vec<usize>,
    pub context_in: Vec<usize>,
    pub context_out: Vec<usize>,
    pub send_points: Vec<SendPoint>,
    /// The attention operator this slice feeds, absent for the final slice.
    pub attention_after: Option<usize>,
}

impl ModelSlice {
    pub fn context_out_weight(&self, g: &CompGraph) -> u64 {
        self.context_out.iter().map(|&k| g.weight(k)).sum()
    }

    /// Ops interleaved with the send markers.
    pub fn program(&self) -> Vec<ScheduleItem> {
        let mut out = Vec::with_capacity(self.ops.len() + self.send_points.len());
        let mut sends = self.send_points.iter().peekable();
        for (pos, &op) in self.ops.iter().enumerate() {
            while let Some(sp) = sends.next_if(|sp| sp.after_ops == pos) {
                out.push(ScheduleItem::Send(sp.kind));
            }
            out.push(ScheduleItem::Op(op));
        }
        out.extend(sends.map(|sp| ScheduleItem::Send(sp.kind)));
        out
    }
}

/// Cut the graph at every attention operator into `n + 1` ordered slices.
pub fn slice_model(g: &CompGraph) -> Result<(Vec<ModelSlice>, Vec<CutResult>)> {
    let attns = g.attention_nodes();
    for w in attns.windows(2) {
        if !g.reaches(w[0], w[1]) {
            return Err(Error::Graph(format!(
                "attention ops `{}` and `{}` are not ordered; concurrent attention is unsupported",
                g.nodes[w[0]].id, g.nodes[w[1]].id
            )));
        }
    }
    let is_attn = |i: usize| g.nodes[i].kind == NodeKind::Attention;

    let mut cuts = Vec::with_capacity(attns.len());
    let mut before: BTreeSet<usize> = BTreeSet::new();
    let mut members: Vec<BTreeSet<usize>> = Vec::with_capacity(attns.len() + 1);
    for &a in &attns {
        let cut = min_cut_forced(g, a, &before)?;
        let slice: BTreeSet<usize> = cut
            .s_side
            .difference(&before)
            .copied()
            .filter(|&i| !is_attn(i))
            .collect();
        before.extend(cut.s_side.iter().copied());
        before.insert(a);
        members.push(slice);
        cuts.push(cut);
    }
    members.push(
        (0..g.node_count())
            .filter(|i| !before.contains(i) && !is_attn(*i))
            .collect(),
    );

    let mut slices = Vec::with_capacity(members.len());
    for (idx, set) in members.into_iter().enumerate() {
        let mut slice = ModelSlice {
            index: idx,
            ops: set.into_iter().collect(),
            context_in: if idx == 0 { Vec::new() } else { cuts[idx - 1].cut_edges.clone() },
            context_out: cuts.get(idx).map(|c| c.cut_edges.clone()).unwrap_or_default(),
            send_points: Vec::new(),
            attention_after: attns.get(idx).copied(),
        };
        let program = schedule_slice(g, &slice);
        slice.ops.clear();
        for item in program {
            match item {
                ScheduleItem::Op(i) => slice.ops.push(i),
                ScheduleItem::Send(kind) => slice.send_points.push(SendPoint {
                    after_ops: slice.ops.len(),
                    kind,
                }),
            }
        }
        slices.push(slice);
    }
    Ok((slices, cuts))
}

/// Topological program for one slice: every Q projection and its ancestors
/// first, a "send Q" right after each Q projection, and a "send KV" at the end
/// of any slice that feeds an attention operator. Remaining ties go to the
/// smaller node id.
pub fn schedule_slice(g: &CompGraph, slice: &ModelSlice) -> Vec<ScheduleItem> {
    let members: BTreeSet<usize> = slice.ops.iter().copied().collect();
    let inner_preds = |v: usize| g.predecessors(v).filter(|p| members.contains(p));

    let mut eager: BTreeSet<usize> = BTreeSet::new();
    let mut stack: Vec<usize> = members
        .iter()
        .copied()
        .filter(|&i| g.nodes[i].kind == NodeKind::QProj)
        .collect();
    while let Some(v) = stack.pop() {
        if eager.insert(v) {
            stack.extend(inner_preds(v));
        }
    }

    let mut indeg: HashMap<usize, usize> = members.iter().map(|&v| (v, inner_preds(v).count())).collect();
    let key = |v: usize| (!eager.contains(&v), g.nodes[v].id.clone(), v);
    let mut ready: BTreeSet<(bool, String, usize)> = members
        .iter()
        .copied()
        .filter(|v| indeg[v] == 0)
        .map(key)
        .collect();
    let mut out = Vec::with_capacity(members.len() + 2);
    while let Some((_, _, v)) = ready.pop_first() {
        out.push(ScheduleItem::Op(v));
        if g.nodes[v].kind == NodeKind::QProj {
            out.push(ScheduleItem::Send(SendKind::SendQ));
        }
        for w in g.successors(v) {
            if let Some(d) = indeg.get_mut(&w) {
                *d -= 1;
                if *d == 0 {
                    ready.insert(key(w));
                }
            }
        }
    }
    if slice.attention_after.is_some() {
        out.push(ScheduleItem::Send(SendKind::SendKv));
    }
    out
}
