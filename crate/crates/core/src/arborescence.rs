//! Minimum spanning arborescences of dense cost matrices.
//!
//! [`chu_liu_edmonds`] runs the contraction algorithm: every non-root vertex
//! picks its cheapest incoming edge (lowest source index on ties); if the
//! choices contain a cycle, the cycle is contracted into its lowest-index
//! vertex, incoming edges are re-weighted by the cost of the cycle edge they
//! would replace, and the process repeats. Expansion walks the contraction
//! log backwards. Only O(n) bookkeeping is kept per contraction, so memory
//! stays O(n^2) however many contractions occur.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrices::Matrix;

/// Upper bound on `n` for [`enumerate_arborescences`].
pub const ORACLE_MAX_N: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arborescence {
    pub root: usize,
    /// `parent[i]` is `None` only for the root.
    pub parent: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl Arborescence {
    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// `(parent, child)` pairs in child order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (p, c)))
            .collect()
    }
}

/// Sum of `m[parent[i]][i]` over non-root `i`, accumulated in index order.
pub fn tree_cost(m: &Matrix, parent: &[Option<usize>]) -> f64 {
    parent
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| m[p][i]))
        .fold(0.0, |acc, c| acc + c)
}

/// Checks that `parent` describes a spanning arborescence.
pub fn is_arborescence(parent: &[Option<usize>]) -> bool {
    let n = parent.len();
    if parent.iter().filter(|p| p.is_none()).count() != 1 {
        return false;
    }
    if parent.iter().flatten().any(|&p| p >= n) {
        return false;
    }
    (0..n).all(|start| {
        let mut cur = start;
        for _ in 0..=n {
            match parent[cur] {
                None => return true,
                Some(p) => cur = p,
            }
        }
        false
    })
}

fn check_matrix(m: &Matrix) -> Result<usize> {
    let n = m.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty cost matrix".into()));
    }
    if m.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidInput("cost matrix is not square".into()));
    }
    if m.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN in cost matrix".into()));
    }
    Ok(n)
}

/// Vertices without a finite path from `root`, lowest first.
fn first_unreachable(m: &Matrix, root: usize) -> Option<usize> {
    let n = m.len();
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut stack = vec![root];
    while let Some(u) = stack.pop() {
        for v in 0..n {
            if !seen[v] && v != u && m[u][v].is_finite() {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.iter().position(|&s| !s)
}

/// Cheapest incoming edge per vertex; lowest source index on ties.
fn cheapest_incoming(cost: &Matrix, root: usize) -> Vec<usize> {
    let n = cost.len();
    (0..n)
        .map(|v| {
            if v == root {
                return root;
            }
            let mut best = if v == 0 { 1 } else { 0 };
            for u in best + 1..n {
                if u != v && cost[u][v] < cost[best][v] {
                    best = u;
                }
            }
            best
        })
        .collect()
}

/// Some cycle of the parent function, as ascending vertex list.
fn find_cycle(pi: &[usize], root: usize) -> Option<Vec<usize>> {
    let n = pi.len();
    // 0 = unvisited, 1 = on current walk, 2 = done
    let mut state = vec![0u8; n];
    state[root] = 2;
    for start in 0..n {
        let mut walk = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            walk.push(v);
            v = pi[v];
        }
        if state[v] == 1 {
            let pos = walk.iter().position(|&w| w == v).expect("on walk");
            let mut cycle = walk[pos..].to_vec();
            cycle.sort_unstable();
            return Some(cycle);
        }
        for w in walk {
            state[w] = 2;
        }
    }
    None
}

/// Bookkeeping for one contraction, enough to expand the solution.
struct Contraction {
    /// Old vertex -> new vertex (cycle members map to the cycle vertex).
    to_new: Vec<usize>,
    /// New vertex -> old vertex (the cycle vertex maps to its lowest member).
    to_old: Vec<usize>,
    cycle_vertex: usize,
    in_cycle: Vec<bool>,
    /// Cycle parent of every old vertex on the cycle.
    cycle_parent: Vec<usize>,
    /// For an outside new vertex `x`, the old cycle member entered from `x`.
    entry: Vec<usize>,
    /// For an outside new vertex `y`, the old cycle member leaving to `y`.
    exit: Vec<usize>,
}

/// Minimum-cost spanning arborescence rooted at `root`.
pub fn chu_liu_edmonds(m: &Matrix, root: usize) -> Result<Arborescence> {
    let n = check_matrix(m)?;
    if root >= n {
        return Err(Error::InvalidInput(format!("root {root} out of range (n = {n})")));
    }
    if let Some(v) = first_unreachable(m, root) {
        return Err(Error::Unreachable(v));
    }

    let mut cost = m.clone();
    let mut cur_root = root;
    let mut log: Vec<Contraction> = Vec::new();
    let mut pi = loop {
        let pi = cheapest_incoming(&cost, cur_root);
        let Some(cycle) = find_cycle(&pi, cur_root) else {
            break pi;
        };
        let k = cost.len();
        let mut in_cycle = vec![false; k];
        for &v in &cycle {
            in_cycle[v] = true;
        }
        let rep = cycle[0];
        let mut to_new = vec![0; k];
        let mut to_old = Vec::with_capacity(k - cycle.len() + 1);
        for v in 0..k {
            if in_cycle[v] && v != rep {
                continue;
            }
            to_new[v] = to_old.len();
            to_old.push(v);
        }
        let cycle_vertex = to_new[rep];
        for &v in &cycle {
            to_new[v] = cycle_vertex;
        }
        let kn = to_old.len();
        let mut next = vec![vec![f64::INFINITY; kn]; kn];
        let mut entry = vec![usize::MAX; kn];
        let mut exit = vec![usize::MAX; kn];
        for (x, &u) in to_old.iter().enumerate() {
            if x == cycle_vertex {
                continue;
            }
            for (y, &v) in to_old.iter().enumerate() {
                if y != cycle_vertex && y != x {
                    next[x][y] = cost[u][v];
                }
            }
            // Into the cycle: pay the edge minus the cycle edge it replaces.
            let mut best = f64::INFINITY;
            for &v in &cycle {
                let c = cost[u][v] - cost[pi[v]][v];
                if c < best || entry[x] == usize::MAX && c <= best {
                    best = c;
                    entry[x] = v;
                }
            }
            next[x][cycle_vertex] = best;
            // Out of the cycle: cheapest member edge.
            let mut best = f64::INFINITY;
            for &w in &cycle {
                if cost[w][u] < best || exit[x] == usize::MAX && cost[w][u] <= best {
                    best = cost[w][u];
                    exit[x] = w;
                }
            }
            next[cycle_vertex][x] = best;
        }
        log.push(Contraction {
            to_new,
            to_old,
            cycle_vertex,
            in_cycle,
            cycle_parent: pi,
            entry,
            exit,
        });
        cur_root = log.last().expect("pushed").to_new[cur_root];
        cost = next;
    };

    while let Some(c) = log.pop() {
        let k = c.to_new.len();
        let p_cycle = pi[c.cycle_vertex];
        let entered = c.entry[p_cycle];
        let mut old_pi = vec![usize::MAX; k];
        #[allow(clippy::needless_range_loop)]
        for v in 0..k {
            let x = c.to_new[v];
            old_pi[v] = if c.in_cycle[v] {
                if v == entered {
                    c.to_old[p_cycle]
                } else {
                    c.cycle_parent[v]
                }
            } else if pi[x] == c.cycle_vertex {
                c.exit[x]
            } else {
                c.to_old[pi[x]]
            };
        }
        pi = old_pi;
    }

    let parent: Vec<Option<usize>> = pi
        .iter()
        .enumerate()
        .map(|(v, &p)| (v != root).then_some(p))
        .collect();
    debug_assert!(is_arborescence(&parent));
    let total_cost = tree_cost(m, &parent);
    Ok(Arborescence {
        root,
        parent,
        total_cost,
    })
}

/// Best arborescence over candidate roots.
///
/// With `root_hint`, only that root is tried. Otherwise every root is solved
/// and the cheapest tree wins; ties go to the root with the largest
/// `root_preference` (when given), then to the lowest index.
pub fn best_arborescence(
    m: &Matrix,
    root_hint: Option<usize>,
    root_preference: Option<&[f64]>,
) -> Result<Arborescence> {
    let n = check_matrix(m)?;
    if let Some(r) = root_hint {
        return chu_liu_edmonds(m, r);
    }
    if let Some(p) = root_preference {
        if p.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} root preferences for {n} nodes",
                p.len()
            )));
        }
    }
    let candidates: Vec<Result<Arborescence>> =
        (0..n).into_par_iter().map(|r| chu_liu_edmonds(m, r)).collect();
    let mut best: Option<Arborescence> = None;
    for cand in candidates {
        let cand = match cand {
            Ok(a) => a,
            Err(Error::Unreachable(_)) => continue,
            Err(e) => return Err(e),
        };
        let better = match &best {
            None => true,
            Some(b) => {
                cand.total_cost < b.total_cost
                    || (cand.total_cost == b.total_cost
                        && root_preference.is_some_and(|p| p[cand.root] > p[b.root]))
            }
        };
        if better {
            best = Some(cand);
        }
    }
    best.ok_or_else(|| Error::InvalidInput("no feasible root".into()))
}

/// Every spanning arborescence rooted at `root` with its cost, in
/// lexicographic order of parent arrays. Exhaustive; `n ≤ ORACLE_MAX_N`.
pub fn enumerate_arborescences(m: &Matrix, root: usize) -> Result<Vec<(Vec<Option<usize>>, f64)>> {
    let n = check_matrix(m)?;
    if n > ORACLE_MAX_N {
        return Err(Error::OracleSizeGuard(n));
    }
    if root >= n {
        return Err(Error::InvalidInput(format!("root {root} out of range (n = {n})")));
    }
    let others: Vec<usize> = (0..n).filter(|&v| v != root).collect();
    let mut choice = vec![0usize; others.len()];
    let mut out = Vec::new();
    loop {
        let mut parent = vec![None; n];
        for (&v, &c) in others.iter().zip(&choice) {
            // The c-th vertex other than v itself.
            parent[v] = Some(if c < v { c } else { c + 1 });
        }
        if is_arborescence(&parent) {
            let cost = tree_cost(m, &parent);
            out.push((parent, cost));
        }
        // Odometer increment over n-1 choices per vertex.
        let mut i = choice.len();
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            choice[i] += 1;
            if choice[i] < n - 1 {
                break;
            }
            choice[i] = 0;
        }
    }
}
