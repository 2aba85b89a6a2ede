//! Co-occurrence graphs and the connectivity test for consistent estimation.
//!
//! For each query token `k`, the graph `G^(k)` has an edge `i - j` whenever
//! some prompt in the support ending in `k` has both `i` and `j` among its
//! key tokens. Maximum-likelihood estimation recovers column `k` of the
//! ground-truth chain exactly when `G^(k)` is connected (or, if the ground
//! truth has zeros, connected through its nonzero entries).

use std::collections::VecDeque;

use serde::Serialize;

use crate::data::{AttnVariant, PromptDistribution, TokenId, ZERO_PROB};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CooccurrenceGraph {
    query: TokenId,
    vocab: usize,
    adj: Vec<bool>,
    /// Tokens seen as a key in at least one prompt of `Omega_k`.
    appears: Vec<bool>,
}

impl CooccurrenceGraph {
    pub fn empty(query: TokenId, vocab: usize) -> Self {
        CooccurrenceGraph {
            query,
            vocab,
            adj: vec![false; vocab * vocab],
            appears: vec![false; vocab],
        }
    }

    pub fn query(&self) -> TokenId {
        self.query
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn add_edge(&mut self, i: usize, j: usize) {
        if i != j {
            self.adj[i * self.vocab + j] = true;
            self.adj[j * self.vocab + i] = true;
        }
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.vocab + j]
    }

    /// Record a key set: every pair becomes an edge.
    pub fn add_clique(&mut self, keys: &[usize]) {
        for &i in keys {
            self.appears[i] = true;
        }
        for (a, &i) in keys.iter().enumerate() {
            for &j in &keys[a + 1..] {
                self.add_edge(i, j);
            }
        }
    }

    pub fn appears(&self, token: usize) -> bool {
        self.appears[token]
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().filter(|&&b| b).count() / 2
    }

    fn neighbours(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.vocab).filter(move |&u| self.adj[v * self.vocab + u])
    }

    /// Components by BFS, each sorted, ordered by smallest vertex.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        self.components_within(&vec![true; self.vocab])
    }

    /// Components of the subgraph induced by `allowed` vertices.
    fn components_within(&self, allowed: &[bool]) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.vocab];
        let mut out = Vec::new();
        for start in 0..self.vocab {
            if seen[start] || !allowed[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for u in self.neighbours(v) {
                    if allowed[u] && !seen[u] {
                        seen[u] = true;
                        comp.push(u);
                        queue.push_back(u);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.connected_components().len() <= 1
    }

    /// Connectivity among, and through, the vertices where `gt_column` is nonzero.
    pub fn is_connected_wrt(&self, gt_column: &[f64]) -> bool {
        let allowed: Vec<bool> = gt_column.iter().map(|&p| p > ZERO_PROB).collect();
        self.components_within(&allowed).len() <= 1
    }
}

/// One graph per query token, built from the positive-weight support.
pub fn build_cooccurrence_graphs(dist: &PromptDistribution) -> Vec<CooccurrenceGraph> {
    let k = dist.vocab_size();
    let mut graphs: Vec<_> = (0..k)
        .map(|q| CooccurrenceGraph::empty(TokenId(q), k))
        .collect();
    for (prompt, _) in dist.active() {
        let mut keys: Vec<usize> = prompt.keys().iter().map(|t| t.0).collect();
        keys.sort_unstable();
        keys.dedup();
        graphs[prompt.last().0].add_clique(&keys);
    }
    graphs
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryVerdict {
    pub query: usize,
    pub connected: bool,
    /// Present only when a ground truth was supplied.
    pub connected_wrt_gt: Option<bool>,
    pub components: Vec<Vec<usize>>,
    /// Self-attention shortcut: every token appears in some prompt ending in `query`.
    pub all_tokens_appear: bool,
}

impl QueryVerdict {
    pub fn consistent(&self) -> bool {
        self.connected_wrt_gt.unwrap_or(self.connected)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyVerdict {
    pub variant: AttnVariant,
    pub per_query: Vec<QueryVerdict>,
    pub consistent: bool,
}

/// Per-query connectivity verdict; `gt` switches to the ground-truth-aware test.
pub fn predict_consistency(
    dist: &PromptDistribution,
    gt: Option<&crate::data::TransitionMatrix>,
) -> ConsistencyVerdict {
    let graphs = build_cooccurrence_graphs(dist);
    let per_query: Vec<QueryVerdict> = graphs
        .iter()
        .enumerate()
        .map(|(q, g)| QueryVerdict {
            query: q,
            connected: g.is_connected(),
            connected_wrt_gt: gt.map(|p| g.is_connected_wrt(p.column(q))),
            components: g.connected_components(),
            all_tokens_appear: (0..g.vocab_size()).all(|t| g.appears(t)),
        })
        .collect();
    let consistent = per_query.iter().all(QueryVerdict::consistent);
    ConsistencyVerdict {
        variant: dist.variant(),
        per_query,
        consistent,
    }
}
