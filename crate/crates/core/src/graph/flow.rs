//! Max-flow by capacity-scaling augmenting paths.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
struct Arc {
    to: usize,
    cap: u128,
    rev: usize,
}

#[derive(Debug, Clone)]
pub struct FlowNetwork {
    adj: Vec<Vec<Arc>>,
}

impl FlowNetwork {
    pub fn new(n: usize) -> Self {
        FlowNetwork {
            adj: vec![Vec::new(); n],
        }
    }

    pub fn add_arc(&mut self, from: usize, to: usize, cap: u128) {
        let rev_from = self.adj[to].len();
        let rev_to = self.adj[from].len();
        self.adj[from].push(Arc { to, cap, rev: rev_from });
        self.adj[to].push(Arc {
            to: from,
            cap: 0,
            rev: rev_to,
        });
    }

    /// Shortest residual path using only arcs with at least `delta` spare capacity.
    fn augmenting_path(&self, s: usize, t: usize, delta: u128) -> Option<Vec<(usize, usize)>> {
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; self.adj.len()];
        let mut seen = vec![false; self.adj.len()];
        seen[s] = true;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for (i, a) in self.adj[u].iter().enumerate() {
                if a.cap >= delta && !seen[a.to] {
                    seen[a.to] = true;
                    prev[a.to] = Some((u, i));
                    if a.to == t {
                        let mut path = Vec::new();
                        let mut v = t;
                        while let Some((u, i)) = prev[v] {
                            path.push((u, i));
                            v = u;
                        }
                        path.reverse();
                        return Some(path);
                    }
                    queue.push_back(a.to);
                }
            }
        }
        None
    }

    /// Push as much flow as possible from `s` to `t`, stopping early once the
    /// flow reaches `limit`.
    pub fn max_flow(&mut self, s: usize, t: usize, limit: u128) -> u128 {
        let max_cap = self
            .adj
            .iter()
            .flat_map(|a| a.iter().map(|x| x.cap))
            .max()
            .unwrap_or(0);
        if max_cap == 0 || s == t {
            return 0;
        }
        let mut delta: u128 = 1 << (127 - max_cap.leading_zeros());
        let mut flow = 0u128;
        while delta >= 1 {
            while let Some(path) = self.augmenting_path(s, t, delta) {
                let push = path
                    .iter()
                    .map(|&(u, i)| self.adj[u][i].cap)
                    .min()
                    .expect("non-empty path");
                for &(u, i) in &path {
                    let Arc { to, rev, .. } = self.adj[u][i];
                    self.adj[u][i].cap -= push;
                    self.adj[to][rev].cap += push;
                }
                flow += push;
                if flow >= limit {
                    return flow;
                }
            }
            delta >>= 1;
        }
        flow
    }

    /// Vertices reachable from `s` in the residual network.
    pub fn residual_reachable(&self, s: usize) -> Vec<bool> {
        let mut seen = vec![false; self.adj.len()];
        seen[s] = true;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for a in &self.adj[u] {
                if a.cap > 0 && !seen[a.to] {
                    seen[a.to] = true;
                    queue.push_back(a.to);
                }
            }
        }
        seen
    }
}
