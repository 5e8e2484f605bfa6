//! Model parameters and forward passes: the small transformer text
//! encoder, per-type projection headers, the relation-aware graph network,
//! and the bilinear pair scorer.
//!
//! Parameters are named flat matrices. Names beginning with `lm.` belong
//! to the text-encoder learning-rate group; `gnn.` and `score.` share the
//! graph-side group. Forward passes build nodes on a [`Tape`]
//! (see [`crate::tensor`]) through a [`TapeCtx`] that binds each parameter
//! to a single tape leaf per pass.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{TahGraph, TypeId};
use crate::rng::derive_rng;
use crate::tensor::{ATTENTION_MASK_VALUE, Csr, Gradients, Id, Precision, Tape, sigmoid};
use crate::text::{self, MaskedSequence, TokenSequence};

/// Architecture and bookkeeping record; serialized into checkpoints and
/// validated against blob shapes on load.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HyperParams {
    pub d_tok: usize,
    pub d: usize,
    pub n_layers_lm: usize,
    pub n_heads: usize,
    pub n_layers_gnn: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub type_names: Vec<String>,
    pub rel_names: Vec<String>,
    #[serde(default)]
    pub tie_mlm_head: bool,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub precision: Precision,
}

impl HyperParams {
    /// Desk-scale defaults; trains in seconds on a laptop CPU.
    pub fn desk_default(vocab_size: usize, type_names: Vec<String>, rel_names: Vec<String>) -> Self {
        HyperParams {
            d_tok: 64,
            d: 32,
            n_layers_lm: 2,
            n_heads: 2,
            n_layers_gnn: 2,
            ffn_mult: 4,
            max_len: 512,
            vocab_size,
            type_names,
            rel_names,
            tie_mlm_head: false,
            dropout: 0.0,
            precision: Precision::F64,
        }
    }

    /// Full-scale preset (BERT-base-sized encoder, 768-dim hidden state).
    /// Kept as a configuration preset, not a default.
    pub fn full_preset(vocab_size: usize, type_names: Vec<String>, rel_names: Vec<String>) -> Self {
        HyperParams {
            d_tok: 768,
            d: 768,
            n_layers_lm: 12,
            n_heads: 12,
            n_layers_gnn: 2,
            ffn_mult: 4,
            max_len: 512,
            vocab_size,
            type_names,
            rel_names,
            tie_mlm_head: false,
            dropout: 0.1,
            precision: Precision::F32,
        }
    }

    pub fn d_ff(&self) -> usize {
        self.ffn_mult * self.d_tok
    }

    pub fn n_types(&self) -> usize {
        self.type_names.len()
    }

    pub fn n_rels(&self) -> usize {
        self.rel_names.len()
    }
}

/// One named parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Plain dense matrix for non-trainable data (GNN input features, frozen
/// embedding tables, encoder snapshots).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Fixed (non-trainable) input features for the graph network, one row per
/// node; frozen after one-shot initialization.
pub type NodeFeatures = DenseMatrix;

/// All trainable parameters plus the hyperparameter record.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub hyper: HyperParams,
    pub params: BTreeMap<String, Param>,
}

impl ModelState {
    /// Random initialization: truncated normal (std 0.02, clipped at two
    /// standard deviations) for matrices and embeddings, zeros for biases,
    /// ones for layer-norm gains.
    pub fn new(hyper: HyperParams, seed: u64) -> ModelState {
        let mut rng = derive_rng(seed, "init", 0);
        let mut params = BTreeMap::new();
        let h = &hyper;

        let normal = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| Param {
            rows,
            cols,
            values: (0..rows * cols).map(|_| trunc_normal(0.02, rng)).collect(),
        };
        let zeros = |rows: usize, cols: usize| Param {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        };
        let ones = |rows: usize, cols: usize| Param {
            rows,
            cols,
            values: vec![1.0; rows * cols],
        };

        params.insert("lm.token_emb".into(), normal(h.vocab_size, h.d_tok, &mut rng));
        params.insert("lm.pos_emb".into(), normal(h.max_len, h.d_tok, &mut rng));
        params.insert("lm.emb_ln.gain".into(), ones(1, h.d_tok));
        params.insert("lm.emb_ln.bias".into(), zeros(1, h.d_tok));
        for l in 0..h.n_layers_lm {
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(
                    format!("lm.block{l}.attn.{w}"),
                    normal(h.d_tok, h.d_tok, &mut rng),
                );
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.insert(format!("lm.block{l}.attn.{b}"), zeros(1, h.d_tok));
            }
            params.insert(format!("lm.block{l}.ln1.gain"), ones(1, h.d_tok));
            params.insert(format!("lm.block{l}.ln1.bias"), zeros(1, h.d_tok));
            params.insert(format!("lm.block{l}.ln2.gain"), ones(1, h.d_tok));
            params.insert(format!("lm.block{l}.ln2.bias"), zeros(1, h.d_tok));
            params.insert(
                format!("lm.block{l}.ffn.w1"),
                normal(h.d_tok, h.d_ff(), &mut rng),
            );
            params.insert(format!("lm.block{l}.ffn.b1"), zeros(1, h.d_ff()));
            params.insert(
                format!("lm.block{l}.ffn.w2"),
                normal(h.d_ff(), h.d_tok, &mut rng),
            );
            params.insert(format!("lm.block{l}.ffn.b2"), zeros(1, h.d_tok));
        }
        for t in 0..h.n_types() {
            params.insert(format!("lm.proj.t{t}"), normal(h.d_tok, h.d, &mut rng));
        }
        if !h.tie_mlm_head {
            params.insert(
                "lm.mlm_head.w".into(),
                normal(h.d_tok, h.vocab_size, &mut rng),
            );
        }
        params.insert("lm.mlm_head.b".into(), zeros(1, h.vocab_size));
        for l in 0..h.n_layers_gnn {
            params.insert(format!("gnn.layer{l}.self"), normal(h.d, h.d, &mut rng));
            for r in 0..h.n_rels() {
                params.insert(format!("gnn.layer{l}.rel{r}"), normal(h.d, h.d, &mut rng));
            }
        }
        for t in 0..h.n_types() {
            params.insert(format!("score.t{t}"), normal(h.d, h.d, &mut rng));
        }

        ModelState { hyper, params }
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn n_parameters(&self) -> usize {
        self.params.values().map(|p| p.values.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .all(|p| p.values.iter().all(|v| v.is_finite()))
    }

    /// Stable digest of all parameter bits, in name order.
    pub fn checksum(&self) -> u64 {
        let mut c = crate::rng::Checksum::new();
        for (name, p) in &self.params {
            c.update(name.as_bytes());
            c.update_f64s(&p.values);
        }
        c.finish()
    }
}

fn trunc_normal(std: f64, rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, resampled beyond two standard deviations.
    loop {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Binds named parameters to tape leaves (one leaf per parameter per
/// pass) and maps gradients back to parameter names. Works over any
/// parameter map: the model itself or a downstream header.
pub struct ParamBinder<'p> {
    params: &'p BTreeMap<String, Param>,
    leaf_of: HashMap<String, Id>,
}

impl<'p> ParamBinder<'p> {
    pub fn new(params: &'p BTreeMap<String, Param>) -> ParamBinder<'p> {
        ParamBinder {
            params,
            leaf_of: HashMap::new(),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str) -> Id {
        if let Some(&id) = self.leaf_of.get(name) {
            return id;
        }
        let p = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let id = tape.leaf(p.rows, p.cols, p.values.clone());
        self.leaf_of.insert(name.to_string(), id);
        id
    }

    /// Collect gradients for every bound parameter, keyed by name.
    /// Parameters the loss does not touch are omitted.
    pub fn grads_by_name(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.leaf_of {
            if let Some(g) = grads.get(id) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

/// Tape plus binder over a model's parameters; the working context for
/// every model forward pass.
pub struct TapeCtx<'s> {
    pub tape: Tape,
    state: &'s ModelState,
    binder: ParamBinder<'s>,
}

impl<'s> TapeCtx<'s> {
    pub fn new(state: &'s ModelState) -> TapeCtx<'s> {
        TapeCtx {
            tape: Tape::new(state.hyper.precision),
            state,
            binder: ParamBinder::new(&state.params),
        }
    }

    pub fn param(&mut self, name: &str) -> Id {
        self.binder.bind(&mut self.tape, name)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Id {
        self.tape.leaf(rows, cols, values)
    }

    pub fn grads_by_name(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.binder.grads_by_name(grads)
    }
}

/// Optional stochastic regularization for training passes.
pub struct DropoutCtx<'r> {
    pub p: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl DropoutCtx<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Id) -> Id {
        if self.p <= 0.0 {
            return x;
        }
        let (r, c) = tape.shape(x);
        let keep = 1.0 - self.p;
        let mask: Vec<f64> = (0..r * c)
            .map(|_| {
                if self.rng.random_range(0.0..1.0) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        tape.dropout(x, mask)
    }
}

fn maybe_dropout(tape: &mut Tape, x: Id, dropout: &mut Option<DropoutCtx<'_>>) -> Id {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => x,
    }
}

/// Transformer forward pass over one token sequence. Returns the `(len,
/// d_tok)` representation node. `[PAD]` positions are excluded from
/// attention through an additive mask; callers exclude them from pooling.
pub fn lm_encode(
    ctx: &mut TapeCtx<'_>,
    ids: &[usize],
    mut dropout: Option<DropoutCtx<'_>>,
) -> Result<Id> {
    let h = &ctx.state.hyper;
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    if ids.len() > h.max_len {
        return Err(Error::SequenceTooLong(ids.len(), h.max_len));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= h.vocab_size) {
        return Err(Error::TokenOutOfRange(bad, h.vocab_size));
    }
    let len = ids.len();
    let d_tok = h.d_tok;
    let n_heads = h.n_heads;
    assert_eq!(d_tok % n_heads, 0, "d_tok must divide by n_heads");
    let d_head = d_tok / n_heads;

    let col_mask: Option<Vec<f64>> = if ids.contains(&text::PAD) {
        Some(
            ids.iter()
                .map(|&i| if i == text::PAD { ATTENTION_MASK_VALUE } else { 0.0 })
                .collect(),
        )
    } else {
        None
    };

    let token_emb = ctx.param("lm.token_emb");
    let pos_emb = ctx.param("lm.pos_emb");
    let tok = ctx.tape.gather_rows(token_emb, ids.to_vec());
    let pos = ctx.tape.gather_rows(pos_emb, (0..len).collect());
    let summed = ctx.tape.add(tok, pos);
    let g = ctx.param("lm.emb_ln.gain");
    let b = ctx.param("lm.emb_ln.bias");
    let mut x = ctx.tape.layer_norm(summed, g, b);
    x = maybe_dropout(&mut ctx.tape, x, &mut dropout);

    for l in 0..h.n_layers_lm {
        let wq = ctx.param(&format!("lm.block{l}.attn.wq"));
        let wk = ctx.param(&format!("lm.block{l}.attn.wk"));
        let wv = ctx.param(&format!("lm.block{l}.attn.wv"));
        let wo = ctx.param(&format!("lm.block{l}.attn.wo"));
        let bq = ctx.param(&format!("lm.block{l}.attn.bq"));
        let bk = ctx.param(&format!("lm.block{l}.attn.bk"));
        let bv = ctx.param(&format!("lm.block{l}.attn.bv"));
        let bo = ctx.param(&format!("lm.block{l}.attn.bo"));

        let q0 = ctx.tape.matmul(x, wq);
        let q = ctx.tape.add_row(q0, bq);
        let k0 = ctx.tape.matmul(x, wk);
        let k = ctx.tape.add_row(k0, bk);
        let v0 = ctx.tape.matmul(x, wv);
        let v = ctx.tape.add_row(v0, bv);

        let mut head_outs = Vec::with_capacity(n_heads);
        for hd in 0..n_heads {
            let qh = ctx.tape.slice_cols(q, hd * d_head, d_head);
            let kh = ctx.tape.slice_cols(k, hd * d_head, d_head);
            let vh = ctx.tape.slice_cols(v, hd * d_head, d_head);
            let scores0 = ctx.tape.matmul_t(qh, kh, false, true);
            let scores = ctx.tape.scale(scores0, 1.0 / (d_head as f64).sqrt());
            let probs = ctx.tape.softmax_rows(scores, col_mask.clone());
            head_outs.push(ctx.tape.matmul(probs, vh));
        }
        let merged = ctx.tape.concat_cols(&head_outs);
        let proj0 = ctx.tape.matmul(merged, wo);
        let mut attn_out = ctx.tape.add_row(proj0, bo);
        attn_out = maybe_dropout(&mut ctx.tape, attn_out, &mut dropout);

        let res1 = ctx.tape.add(x, attn_out);
        let g1 = ctx.param(&format!("lm.block{l}.ln1.gain"));
        let b1 = ctx.param(&format!("lm.block{l}.ln1.bias"));
        let normed1 = ctx.tape.layer_norm(res1, g1, b1);

        let w1 = ctx.param(&format!("lm.block{l}.ffn.w1"));
        let fb1 = ctx.param(&format!("lm.block{l}.ffn.b1"));
        let w2 = ctx.param(&format!("lm.block{l}.ffn.w2"));
        let fb2 = ctx.param(&format!("lm.block{l}.ffn.b2"));
        let f0 = ctx.tape.matmul(normed1, w1);
        let f1 = ctx.tape.add_row(f0, fb1);
        let f2 = ctx.tape.gelu(f1);
        let f3 = ctx.tape.matmul(f2, w2);
        let mut ffn_out = ctx.tape.add_row(f3, fb2);
        ffn_out = maybe_dropout(&mut ctx.tape, ffn_out, &mut dropout);

        let res2 = ctx.tape.add(normed1, ffn_out);
        let g2 = ctx.param(&format!("lm.block{l}.ln2.gain"));
        let b2 = ctx.param(&format!("lm.block{l}.ln2.bias"));
        x = ctx.tape.layer_norm(res2, g2, b2);
    }
    Ok(x)
}

/// Mean over non-pad token representations, then the per-type projection:
/// the node's semantic vector `(1, d)`.
pub fn node_semantic_from_reps(
    ctx: &mut TapeCtx<'_>,
    reps: Id,
    ids: &[usize],
    node_type: TypeId,
) -> Result<Id> {
    let non_pad: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|&(_, &id)| id != text::PAD)
        .map(|(i, _)| i)
        .collect();
    if non_pad.is_empty() {
        return Err(Error::EmptySequence);
    }
    let pooled = ctx.tape.mean_rows(reps, non_pad);
    let proj = ctx.param(&format!("lm.proj.t{}", node_type));
    Ok(ctx.tape.matmul(pooled, proj))
}

/// Forward-only semantic vector for one sequence.
pub fn node_semantic(state: &ModelState, seq: &TokenSequence, node_type: TypeId) -> Result<Vec<f64>> {
    let mut ctx = TapeCtx::new(state);
    let reps = lm_encode(&mut ctx, &seq.ids, None)?;
    let out = node_semantic_from_reps(&mut ctx, reps, &seq.ids, node_type)?;
    Ok(ctx.tape.values(out).to_vec())
}

/// Mean MLM-head logits over the masked positions of a sequence, plus the
/// restoration targets: `(logits_id, targets)`.
pub fn mlm_logits(
    ctx: &mut TapeCtx<'_>,
    reps: Id,
    masked: &MaskedSequence,
) -> Result<(Id, Vec<usize>)> {
    if masked.mlm_targets.is_empty() {
        return Err(Error::EmptySequence);
    }
    let positions: Vec<usize> = masked.mlm_targets.iter().map(|&(p, _)| p).collect();
    let targets: Vec<usize> = masked.mlm_targets.iter().map(|&(_, t)| t).collect();
    let picked = ctx.tape.gather_rows(reps, positions);
    let logits0 = if ctx.state.hyper.tie_mlm_head {
        let emb = ctx.param("lm.token_emb");
        ctx.tape.matmul_t(picked, emb, false, true)
    } else {
        let w = ctx.param("lm.mlm_head.w");
        ctx.tape.matmul(picked, w)
    };
    let b = ctx.param("lm.mlm_head.b");
    let logits = ctx.tape.add_row(logits0, b);
    Ok((logits, targets))
}

/// Per-relation mean-aggregation operators: row `v` of relation `r` holds
/// `1/|N_v^r|` at each neighbor column. Built once per graph.
pub fn relation_operators(g: &TahGraph) -> Vec<Arc<Csr>> {
    let n = g.len();
    (0..g.n_relations())
        .map(|r| {
            let rows: Vec<Vec<(u32, f64)>> = (0..n)
                .map(|v| {
                    let nbrs = g.neighbors_rel(v as u32, r as u16).unwrap();
                    if nbrs.is_empty() {
                        Vec::new()
                    } else {
                        let w = 1.0 / nbrs.len() as f64;
                        nbrs.iter().map(|&u| (u, w)).collect()
                    }
                })
                .collect();
            Arc::new(Csr::from_rows(n, n, &rows))
        })
        .collect()
}

/// Relation-aware graph network over the full graph: per layer,
/// `new_v = act(W_self h_v + sum_r mean_{w in N_v^r} W_r h_w)`, ReLU on
/// every layer except the last (linear). Returns the `(|V|, d)` node.
pub fn hgnn_encode(
    ctx: &mut TapeCtx<'_>,
    rel_ops: &[Arc<Csr>],
    feats: &NodeFeatures,
) -> Result<Id> {
    let h = &ctx.state.hyper;
    if feats.cols != h.d {
        return Err(Error::ShapeMismatch {
            expected: format!("(*, {})", h.d),
            got: format!("({}, {})", feats.rows, feats.cols),
        });
    }
    if !rel_ops.is_empty() && rel_ops[0].n_rows != feats.rows {
        return Err(Error::ShapeMismatch {
            expected: format!("({} rows)", rel_ops[0].n_rows),
            got: format!("({} rows)", feats.rows),
        });
    }
    let mut x = ctx
        .tape
        .leaf(feats.rows, feats.cols, feats.values.clone());
    for l in 0..h.n_layers_gnn {
        let w_self = ctx.param(&format!("gnn.layer{l}.self"));
        let mut acc = ctx.tape.matmul(x, w_self);
        for (r, op) in rel_ops.iter().enumerate() {
            let w_r = ctx.param(&format!("gnn.layer{l}.rel{r}"));
            let transformed = ctx.tape.matmul(x, w_r);
            let msg = ctx.tape.spmm(Arc::clone(op), transformed);
            acc = ctx.tape.add(acc, msg);
        }
        x = if l + 1 < h.n_layers_gnn {
            ctx.tape.relu(acc)
        } else {
            acc
        };
    }
    Ok(x)
}

/// `sigmoid(h_u^T W_{type(v)} Hg[v])`, clamped to the open unit interval.
pub fn score_pair(
    state: &ModelState,
    g: &TahGraph,
    h_u: &[f64],
    v: crate::graph::NodeId,
    hg: &DenseMatrix,
) -> Result<f64> {
    g.check_node(v)?;
    let d = state.hyper.d;
    if h_u.len() != d || hg.cols != d {
        return Err(Error::ShapeMismatch {
            expected: format!("vectors of dim {d}"),
            got: format!("h_u: {}, hg cols: {}", h_u.len(), hg.cols),
        });
    }
    let w = state.param(&format!("score.t{}", g.type_of(v)));
    let gv = hg.row(v as usize);
    // z = h_u^T W g_v
    let mut z = 0.0;
    for i in 0..d {
        let mut wi = 0.0;
        for j in 0..d {
            wi += w.values[i * d + j] * gv[j];
        }
        z += h_u[i] * wi;
    }
    Ok(sigmoid(z).clamp(1e-12, 1.0 - 1e-12))
}

/// Compare reverse-mode gradients with central finite differences over a
/// random subset of parameter coordinates and return the largest relative
/// error. The denominator carries an absolute floor of `1e-4`: central
/// differences at `eps = 1e-5` have ~1e-10 cancellation noise, which would
/// otherwise dominate near-zero gradients.
pub fn grad_check<F>(
    state: &mut ModelState,
    build: F,
    eps: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&ModelState, &mut TapeCtx<'_>) -> Result<Id>,
{
    let analytic: BTreeMap<String, Vec<f64>> = {
        let mut ctx = TapeCtx::new(state);
        let loss = build(state, &mut ctx)?;
        if !ctx.tape.scalar(loss).is_finite() {
            return Err(Error::Invalid("non-finite loss in grad_check".into()));
        }
        let grads = ctx.tape.backward(loss);
        ctx.grads_by_name(&grads)
    };

    let coords: Vec<(String, usize)> = analytic
        .iter()
        .flat_map(|(name, g)| (0..g.len()).map(move |i| (name.clone(), i)))
        .collect();
    if coords.is_empty() {
        return Ok(0.0);
    }
    let mut rng = derive_rng(seed, "gradcheck", 0);
    let mut picked: Vec<usize> = (0..coords.len()).collect();
    for i in 0..n_samples.min(coords.len()) {
        let j = rng.random_range(i..picked.len());
        picked.swap(i, j);
    }
    picked.truncate(n_samples.min(coords.len()));

    let eval = |state: &ModelState| -> Result<f64> {
        let mut ctx = TapeCtx::new(state);
        let loss = build(state, &mut ctx)?;
        Ok(ctx.tape.scalar(loss))
    };

    let mut max_rel: f64 = 0.0;
    for pi in picked {
        let (name, idx) = &coords[pi];
        let original = state.params.get(name).unwrap().values[*idx];
        state.params.get_mut(name).unwrap().values[*idx] = original + eps;
        let lp = eval(state)?;
        state.params.get_mut(name).unwrap().values[*idx] = original - eps;
        let lm = eval(state)?;
        state.params.get_mut(name).unwrap().values[*idx] = original;
        let fd = (lp - lm) / (2.0 * eps);
        let ad = analytic[name][*idx];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
