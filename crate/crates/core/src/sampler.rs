//! Context-graph extraction and positive/negative sampling for the
//! context-graph prediction task.
//!
//! The context set of an anchor `u` at order `K` is every node reachable
//! from `u` within `K` hops, `u` included. Training positives are drawn by
//! sampled frontier expansion (at most `k` uniform neighbors per frontier
//! node and relation per hop); negatives are drawn from the complement of
//! the *exact* context set, so a sampled-but-unvisited context member can
//! never be labeled negative.
//!
//! Everything here is a pure function of `(graph, seed)`; per-anchor
//! sampling is embarrassingly parallel with generators derived as
//! `hash(global_seed, anchor)` (see [`crate::rng::derive_rng`]).

use rand::Rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{NodeId, TahGraph};

/// Noise distribution for negative draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    /// Uniform over the complement of the context set.
    #[default]
    Uniform,
    /// Degree-weighted, proportional to `(deg + 1)^0.75`.
    Unigram75,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Context order K.
    pub k_order: u32,
    /// Neighbors sampled per (frontier node, relation) per hop.
    pub k_per_relation: usize,
    /// Negatives per positive.
    pub negative_ratio: usize,
    #[serde(default)]
    pub noise_distribution: NoiseDistribution,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            k_order: 2,
            k_per_relation: 3,
            negative_ratio: 5,
            noise_distribution: NoiseDistribution::Uniform,
        }
    }
}

/// Nodes reachable from an anchor within `order` hops, bucketed by the hop
/// at which each node is first reached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextSet {
    pub anchor: NodeId,
    pub order: u32,
    /// Sorted union of all hops, anchor included.
    pub members: Vec<NodeId>,
    /// `per_hop[0] == [anchor]`; pairwise disjoint; sorted within each hop.
    pub per_hop: Vec<Vec<NodeId>>,
}

impl ContextSet {
    pub fn contains(&self, v: NodeId) -> bool {
        self.members.binary_search(&v).is_ok()
    }
}

/// One pretraining unit on the data side: sampled positives plus negatives
/// drawn from outside the exact context set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CgpSample {
    pub anchor: NodeId,
    pub positives: Vec<NodeId>,
    pub negatives: Vec<NodeId>,
    pub seed: u64,
}

impl CgpSample {
    /// Anchors with an empty context are skipped during pretraining.
    pub fn is_skippable(&self) -> bool {
        self.positives.is_empty()
    }
}

/// Exact K-order context via breadth-first search.
pub fn extract_context_exact(g: &TahGraph, u: NodeId, k_order: u32) -> Result<ContextSet> {
    g.check_node(u)?;
    let mut seen = vec![false; g.len()];
    seen[u as usize] = true;
    let mut per_hop = vec![vec![u]];
    let mut frontier = vec![u];

    for _ in 0..k_order {
        let mut next = Vec::new();
        for &v in &frontier {
            for &w in g.neighbors(v, None)?.iter() {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        next.sort_unstable();
        per_hop.push(next.clone());
        frontier = next;
    }

    let mut members: Vec<NodeId> = per_hop.iter().flatten().copied().collect();
    members.sort_unstable();
    Ok(ContextSet {
        anchor: u,
        order: k_order,
        members,
        per_hop,
    })
}

/// Sampled frontier expansion: at most `k` uniform neighbors per
/// (frontier node, relation) per hop, without replacement within a draw.
/// The result is always a subset of the exact context set.
pub fn sample_context(
    g: &TahGraph,
    u: NodeId,
    k_order: u32,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ContextSet> {
    g.check_node(u)?;
    let mut seen = vec![false; g.len()];
    seen[u as usize] = true;
    let mut per_hop = vec![vec![u]];
    let mut frontier = vec![u];

    for _ in 0..k_order {
        let mut next = Vec::new();
        for &v in &frontier {
            for rel in 0..g.n_relations() {
                let nbrs = g.neighbors_rel(v, rel as u16)?;
                for &w in draw_without_replacement(nbrs, k, rng).iter() {
                    if !seen[w as usize] {
                        seen[w as usize] = true;
                        next.push(w);
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        next.sort_unstable();
        per_hop.push(next.clone());
        frontier = next;
    }

    let mut members: Vec<NodeId> = per_hop.iter().flatten().copied().collect();
    members.sort_unstable();
    Ok(ContextSet {
        anchor: u,
        order: k_order,
        members,
        per_hop,
    })
}

fn draw_without_replacement(items: &[NodeId], k: usize, rng: &mut ChaCha8Rng) -> Vec<NodeId> {
    if items.len() <= k {
        return items.to_vec();
    }
    // Partial Fisher-Yates over indices.
    let mut idx: Vec<usize> = (0..items.len()).collect();
    for i in 0..k {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..k].iter().map(|&i| items[i]).collect()
}

/// Draw `ratio * |positives|` negatives from `V \ V_u^K`, where the context
/// set is recomputed *exactly* at `ctx.order` regardless of how `ctx` was
/// sampled. Returns everything that remains when the complement is smaller.
pub fn sample_negatives(
    g: &TahGraph,
    ctx: &ContextSet,
    ratio: usize,
    noise: NoiseDistribution,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<NodeId>> {
    let exact = extract_context_exact(g, ctx.anchor, ctx.order)?;
    let n_pos = ctx.members.len().saturating_sub(1);
    let want = ratio * n_pos;

    let complement: Vec<NodeId> = g
        .node_ids()
        .filter(|&v| !exact.contains(v))
        .collect();

    if complement.len() <= want {
        return Ok(complement);
    }

    match noise {
        NoiseDistribution::Uniform => {
            let mut pool = complement;
            for i in 0..want {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(want);
            Ok(pool)
        }
        NoiseDistribution::Unigram75 => {
            // Weighted draw without replacement (Efraimidis-Spirakis keys).
            let mut keyed: Vec<(f64, NodeId)> = complement
                .into_iter()
                .map(|v| {
                    let w = ((g.degree(v) + 1) as f64).powf(0.75);
                    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                    (u.powf(1.0 / w), v)
                })
                .collect();
            keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            Ok(keyed.into_iter().take(want).map(|(_, v)| v).collect())
        }
    }
}

/// Assemble one CGP sample: sampled-context positives, exact-complement
/// negatives. Deterministic given the seed.
pub fn make_cgp_sample(
    g: &TahGraph,
    u: NodeId,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<CgpSample> {
    let mut rng = crate::rng::derive_rng(seed, "cgp", u as u64);
    let ctx = sample_context(g, u, cfg.k_order, cfg.k_per_relation, &mut rng)?;
    let positives: Vec<NodeId> = ctx.members.iter().copied().filter(|&v| v != u).collect();
    let negatives = if positives.is_empty() {
        Vec::new()
    } else {
        sample_negatives(g, &ctx, cfg.negative_ratio, cfg.noise_distribution, &mut rng)?
    };
    Ok(CgpSample {
        anchor: u,
        positives,
        negatives,
        seed,
    })
}

/// Pick a uniformly random order of all anchors; used for epoch shuffling.
pub fn shuffled_anchors(g: &TahGraph, rng: &mut ChaCha8Rng) -> Vec<NodeId> {
    let mut anchors: Vec<NodeId> = g.node_ids().collect();
    anchors.shuffle(rng);
    anchors
}
