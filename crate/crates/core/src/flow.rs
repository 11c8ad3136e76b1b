//! Uncapacitated min-cost flow by the primal network simplex method.
//!
//! The basis is a spanning tree rooted at an artificial node, initialised with one
//! big-M artificial arc per node. Entering arcs are chosen by block search, the leaving
//! arc by the usual strongly-feasible tie-break, so degenerate pivots cannot cycle.

use crate::error::{Error, Result};
use crate::numerics::pairwise_sum;

const NONE: usize = usize::MAX;

pub(crate) struct MinCostFlow {
    nodes: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    cost: Vec<f64>,
    supply: Vec<f64>,
    artificial_cost: Option<f64>,
    star: Option<usize>,
}

#[derive(Debug)]
pub(crate) struct FlowSolution {
    pub cost: f64,
    #[allow(dead_code)]
    pub flows: Vec<f64>,
    /// Node potentials with `cost + pi[src] - pi[dst] >= 0` on every arc.
    #[allow(dead_code)]
    pub potentials: Vec<f64>,
}

struct Tree {
    parent: Vec<usize>,
    pred: Vec<usize>,
    /// Pred arc points from the node to its parent.
    up: Vec<bool>,
    depth: Vec<u32>,
    pi: Vec<f64>,
    children: Vec<Vec<usize>>,
    child_pos: Vec<usize>,
}

impl Tree {
    fn remove_child(&mut self, p: usize, c: usize) {
        let pos = self.child_pos[c];
        let list = &mut self.children[p];
        list.swap_remove(pos);
        if pos < list.len() {
            let moved = list[pos];
            self.child_pos[moved] = pos;
        }
    }

    fn add_child(&mut self, p: usize, c: usize) {
        self.child_pos[c] = self.children[p].len();
        self.children[p].push(c);
    }
}

impl MinCostFlow {
    pub fn new(nodes: usize) -> Self {
        Self {
            nodes,
            src: Vec::new(),
            dst: Vec::new(),
            cost: Vec::new(),
            supply: vec![0.0; nodes],
            artificial_cost: None,
            star: None,
        }
    }

    /// Start from the spanning tree that routes every supply through `center`. Requires
    /// arcs in both directions between `center` and every other node.
    pub fn set_initial_star(&mut self, center: usize) {
        self.star = Some(center);
    }

    pub fn add_arc(&mut self, from: usize, to: usize, cost: f64) {
        debug_assert!(from < self.nodes && to < self.nodes && cost >= 0.0);
        self.src.push(from);
        self.dst.push(to);
        self.cost.push(cost);
    }

    /// Positive supply is mass leaving the node.
    pub fn set_supply(&mut self, node: usize, s: f64) {
        self.supply[node] = s;
    }

    /// Override the big-M cost of artificial arcs. It must exceed the cost of a shortest
    /// path between any two nodes for the result to be exact.
    pub fn set_artificial_cost(&mut self, m: f64) {
        self.artificial_cost = Some(m);
    }

    pub fn solve(&self) -> Result<FlowSolution> {
        let n = self.nodes;
        let m = self.src.len();
        let root = n;
        let total: f64 = self.supply.iter().sum();
        let scale = self.supply.iter().fold(0.0f64, |a, s| a.max(s.abs())).max(1e-300);
        if total.abs() > 1e-9 * scale * (n as f64).max(1.0) {
            return Err(Error::Infeasible(format!("supplies sum to {total:e}")));
        }
        let max_cost = self.cost.iter().fold(0.0f64, |a, &c| a.max(c));
        let art = self
            .artificial_cost
            .unwrap_or((max_cost + 1.0) * (n as f64 + 1.0));
        let eps = 1e-12 * (1.0 + art);

        let mut src = self.src.clone();
        let mut dst = self.dst.clone();
        let mut cost = self.cost.clone();
        let mut flow = vec![0.0; m + n];
        let mut tree = Tree {
            parent: vec![NONE; n + 1],
            pred: vec![NONE; n + 1],
            up: vec![false; n + 1],
            depth: vec![0; n + 1],
            pi: vec![0.0; n + 1],
            children: vec![Vec::new(); n + 1],
            child_pos: vec![0; n + 1],
        };
        for u in 0..n {
            let e = m + u;
            tree.parent[u] = root;
            tree.pred[u] = e;
            tree.depth[u] = 1;
            tree.add_child(root, u);
            if self.supply[u] >= 0.0 {
                src.push(u);
                dst.push(root);
                cost.push(0.0);
                flow[e] = self.supply[u];
                tree.up[u] = true;
                tree.pi[u] = 0.0;
            } else {
                src.push(root);
                dst.push(u);
                cost.push(art);
                flow[e] = -self.supply[u];
                tree.up[u] = false;
                tree.pi[u] = art;
            }
        }

        if let Some(c) = self.star {
            let mut to_c = vec![NONE; n];
            let mut from_c = vec![NONE; n];
            for a in 0..m {
                if dst[a] == c && to_c[src[a]] == NONE {
                    to_c[src[a]] = a;
                }
                if src[a] == c && from_c[dst[a]] == NONE {
                    from_c[dst[a]] = a;
                }
            }
            if (0..n).any(|i| i != c && (to_c[i] == NONE || from_c[i] == NONE)) {
                return Err(Error::invalid("star start needs arcs to and from the centre"));
            }
            tree.children[c].clear();
            tree.children[root].clear();
            tree.add_child(root, c);
            let mut net = self.supply[c];
            for i in 0..n {
                if i == c {
                    continue;
                }
                let s = self.supply[i];
                flow[m + i] = 0.0;
                tree.parent[i] = c;
                tree.depth[i] = 2;
                tree.add_child(c, i);
                if s >= 0.0 {
                    tree.pred[i] = to_c[i];
                    tree.up[i] = true;
                    flow[to_c[i]] = s;
                } else {
                    tree.pred[i] = from_c[i];
                    tree.up[i] = false;
                    flow[from_c[i]] = -s;
                }
                net += s;
            }
            // the centre's artificial arc carries the (zero) imbalance
            let e = m + c;
            src[e] = c;
            dst[e] = root;
            cost[e] = 0.0;
            tree.up[c] = true;
            flow[e] = net.max(0.0);
            recompute_potentials(&mut tree, &cost, root, &mut Vec::new());
        }

        let block = ((m as f64).sqrt() as usize).max(10).min(m.max(1));
        let mut next_arc = 0usize;
        let mut stack: Vec<usize> = Vec::new();
        loop {
            // Block search for an entering arc.
            let mut entering = NONE;
            if m > 0 {
                let mut best = -eps;
                let mut scanned = 0;
                let mut in_block = 0;
                let mut a = next_arc;
                while scanned < m {
                    let rc = cost[a] + tree.pi[src[a]] - tree.pi[dst[a]];
                    if rc < best && !is_tree_arc(&tree, &src, &dst, a) {
                        best = rc;
                        entering = a;
                    }
                    a += 1;
                    if a == m {
                        a = 0;
                    }
                    scanned += 1;
                    in_block += 1;
                    if in_block == block {
                        if entering != NONE {
                            break;
                        }
                        in_block = 0;
                    }
                }
                next_arc = a;
            }
            if entering == NONE {
                // Recompute potentials exactly from the tree and confirm optimality.
                recompute_potentials(&mut tree, &cost, root, &mut stack);
                let violated = (0..m).any(|a| {
                    cost[a] + tree.pi[src[a]] - tree.pi[dst[a]] < -eps
                        && !is_tree_arc(&tree, &src, &dst, a)
                });
                if violated {
                    continue;
                }
                break;
            }
            let (u, v) = (src[entering], dst[entering]);
            let mut a = u;
            let mut b = v;
            while a != b {
                if tree.depth[a] > tree.depth[b] {
                    a = tree.parent[a];
                } else if tree.depth[b] > tree.depth[a] {
                    b = tree.parent[b];
                } else {
                    a = tree.parent[a];
                    b = tree.parent[b];
                }
            }
            let join = a;

            let mut delta = f64::INFINITY;
            let mut u_out = NONE;
            let mut on_first = false;
            let mut w = u;
            while w != join {
                if tree.up[w] {
                    let d = flow[tree.pred[w]];
                    if d < delta {
                        delta = d;
                        u_out = w;
                        on_first = true;
                    }
                }
                w = tree.parent[w];
            }
            w = v;
            while w != join {
                if !tree.up[w] {
                    let d = flow[tree.pred[w]];
                    if d <= delta {
                        delta = d;
                        u_out = w;
                        on_first = false;
                    }
                }
                w = tree.parent[w];
            }
            if u_out == NONE {
                return Err(Error::Infeasible("negative cost cycle".into()));
            }

            if delta > 0.0 {
                flow[entering] += delta;
                w = u;
                while w != join {
                    let e = tree.pred[w];
                    if tree.up[w] {
                        flow[e] -= delta;
                    } else {
                        flow[e] += delta;
                    }
                    w = tree.parent[w];
                }
                w = v;
                while w != join {
                    let e = tree.pred[w];
                    if tree.up[w] {
                        flow[e] += delta;
                    } else {
                        flow[e] -= delta;
                    }
                    w = tree.parent[w];
                }
                flow[tree.pred[u_out]] = 0.0;
            }

            // Re-hang the subtree of u_out from the entering arc.
            let (u_in, v_in) = if on_first { (u, v) } else { (v, u) };
            let mut w = u_in;
            let mut new_parent = v_in;
            let mut new_pred = entering;
            let mut new_up = src[entering] == u_in;
            loop {
                let old_parent = tree.parent[w];
                let old_pred = tree.pred[w];
                let old_up = tree.up[w];
                tree.remove_child(old_parent, w);
                tree.add_child(new_parent, w);
                tree.parent[w] = new_parent;
                tree.pred[w] = new_pred;
                tree.up[w] = new_up;
                if w == u_out {
                    break;
                }
                new_parent = w;
                new_pred = old_pred;
                new_up = !old_up;
                w = old_parent;
            }

            let target_pi = if tree.up[u_in] {
                tree.pi[v_in] - cost[entering]
            } else {
                tree.pi[v_in] + cost[entering]
            };
            let sigma = target_pi - tree.pi[u_in];
            stack.clear();
            stack.push(u_in);
            while let Some(x) = stack.pop() {
                tree.pi[x] += sigma;
                tree.depth[x] = tree.depth[tree.parent[x]] + 1;
                stack.extend_from_slice(&tree.children[x]);
            }
        }

        let art_flow: f64 = flow[m..].iter().sum();
        if art_flow > 1e-9 * scale * (n as f64).max(1.0) {
            return Err(Error::Infeasible(format!(
                "{art_flow:e} units of flow cannot be routed"
            )));
        }
        let terms: Vec<f64> = (0..m).map(|a| cost[a] * flow[a]).collect();
        let shift = tree.pi[0..n].iter().copied().fold(f64::INFINITY, f64::min);
        Ok(FlowSolution {
            cost: pairwise_sum(&terms),
            flows: flow[..m].to_vec(),
            potentials: tree.pi[..n].iter().map(|p| p - shift).collect(),
        })
    }
}

#[inline]
fn is_tree_arc(tree: &Tree, src: &[usize], dst: &[usize], a: usize) -> bool {
    let (s, d) = (src[a], dst[a]);
    tree.pred[s] == a && tree.parent[s] == d || tree.pred[d] == a && tree.parent[d] == s
}

fn recompute_potentials(tree: &mut Tree, cost: &[f64], root: usize, stack: &mut Vec<usize>) {
    tree.pi[root] = 0.0;
    stack.clear();
    stack.extend_from_slice(&tree.children[root]);
    while let Some(x) = stack.pop() {
        let p = tree.parent[x];
        let c = cost[tree.pred[x]];
        tree.pi[x] = if tree.up[x] { tree.pi[p] - c } else { tree.pi[p] + c };
        stack.extend_from_slice(&tree.children[x]);
    }
}
