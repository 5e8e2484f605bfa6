//! Downstream evaluation on frozen embeddings: link prediction and node
//! classification with small trainable headers.
//!
//! The pretrained text encoder is frozen; [`export_embeddings`] runs the
//! same augmented-input assembly as pretraining and stores one semantic
//! vector per node. Headers (a 2-layer MLP or a 2-layer relation-aware
//! GCN) train on top of the table; the table's checksum is verified
//! unchanged after every run.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, RelId, TahGraph};
use crate::metrics::{RankedPrediction, macro_pr_at_k, mae, micro_pr_at_k, ndcg_at_k, rmse};
use crate::model::{
    DenseMatrix, ModelState, Param, ParamBinder, node_semantic, relation_operators,
};
use crate::optim::AdamW;
use crate::rng::{Checksum, derive_rng};
use crate::tensor::{Csr, Id, Precision, Tape};
use crate::text::{Vocab, assemble_input};

/// Frozen per-node representations from the pretrained encoder.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub table: DenseMatrix,
    /// Checksum of the checkpoint the table came from.
    pub checkpoint_id: String,
}

impl EmbeddingTable {
    pub fn checksum(&self) -> u64 {
        let mut c = Checksum::new();
        c.update_f64s(&self.table.values);
        c.finish()
    }
}

/// Encode every node with the frozen model: same augmentation rules as
/// pretraining, deterministic via the export seed.
pub fn export_embeddings(
    state: &ModelState,
    g: &TahGraph,
    vocab: &Vocab,
    k_neighbors: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let mut table = DenseMatrix::zeros(g.len(), state.hyper.d);
    for u in g.node_ids() {
        let mut rng = derive_rng(seed, "embed", u as u64);
        let seq = assemble_input(g, vocab, u, k_neighbors, state.hyper.max_len, &mut rng)?;
        let sem = node_semantic(state, &seq, g.type_of(u))?;
        table.row_mut(u as usize).copy_from_slice(&sem);
    }
    Ok(EmbeddingTable {
        table,
        checkpoint_id: format!("{:016x}", state.checksum()),
    })
}

// ---------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------

/// Edges of one relation partitioned into train/valid/test, with
/// type-matched corrupted negatives per split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LinkSplit {
    pub rel_name: String,
    pub train_pos: Vec<(NodeId, NodeId)>,
    pub valid_pos: Vec<(NodeId, NodeId)>,
    pub test_pos: Vec<(NodeId, NodeId)>,
    pub train_neg: Vec<(NodeId, NodeId)>,
    pub valid_neg: Vec<(NodeId, NodeId)>,
    pub test_neg: Vec<(NodeId, NodeId)>,
}

impl LinkSplit {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self)
                .map_err(|e| Error::Checkpoint(format!("split serialization: {e}")))?,
        )
        .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_json(path: &Path) -> Result<LinkSplit> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&s).map_err(|e| Error::Config(format!("bad split file: {e}")))
    }
}

/// Uniformly sample a relation's edges into train/valid/test positives
/// (default ratios 0.3/0.1/0.1) and draw `neg_counts` negatives per
/// positive (default 5/1/1) by corrupting one endpoint uniformly among
/// nodes of the same type, rejecting pairs present anywhere in the edge
/// set.
pub fn make_link_split(
    g: &TahGraph,
    rel: RelId,
    ratios: (f64, f64, f64),
    neg_counts: (usize, usize, usize),
    seed: u64,
) -> Result<LinkSplit> {
    g.check_relation(rel)?;
    let edges: Vec<(NodeId, NodeId)> = g
        .edges()
        .iter()
        .filter(|&&(_, _, r)| r == rel)
        .map(|&(a, b, _)| (a, b))
        .collect();
    const MIN_EDGES: usize = 10;
    if edges.len() < MIN_EDGES {
        return Err(Error::TooFewEdges {
            rel: g.rel_name(rel).to_string(),
            edges: edges.len(),
            min: MIN_EDGES,
        });
    }
    if ratios.0 + ratios.1 + ratios.2 > 1.0 + 1e-9 {
        return Err(Error::Config("split ratios exceed 1".into()));
    }

    let mut rng = derive_rng(seed, "linksplit", rel as u64);
    let mut order: Vec<usize> = (0..edges.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n = edges.len() as f64;
    let n_train = (n * ratios.0).floor() as usize;
    let n_valid = (n * ratios.1).floor() as usize;
    let n_test = (n * ratios.2).floor() as usize;

    let take = |range: std::ops::Range<usize>| -> Vec<(NodeId, NodeId)> {
        order[range].iter().map(|&i| edges[i]).collect()
    };
    let train_pos = take(0..n_train);
    let valid_pos = take(n_train..n_train + n_valid);
    let test_pos = take(n_train + n_valid..n_train + n_valid + n_test);

    // Nodes per type, for type-matched corruption.
    let mut per_type: HashMap<u16, Vec<NodeId>> = HashMap::new();
    for u in g.node_ids() {
        per_type.entry(g.type_of(u)).or_default().push(u);
    }

    let draw_negs = |pos: &[(NodeId, NodeId)],
                         count: usize,
                         rng: &mut ChaCha8Rng|
     -> Result<Vec<(NodeId, NodeId)>> {
        let mut out = Vec::with_capacity(pos.len() * count);
        for &(u, v) in pos {
            for _ in 0..count {
                let mut found = false;
                for _attempt in 0..10_000 {
                    let corrupt_src = rng.random_range(0..2u32) == 0;
                    let (fixed, corrupted_type) =
                        if corrupt_src { (v, g.type_of(u)) } else { (u, g.type_of(v)) };
                    let pool = &per_type[&corrupted_type];
                    let cand = pool[rng.random_range(0..pool.len())];
                    let pair = if corrupt_src { (cand, fixed) } else { (fixed, cand) };
                    if pair.0 != pair.1 && !g.has_edge(pair.0, pair.1) {
                        out.push(pair);
                        found = true;
                        break;
                    }
                }
                if !found {
                    return Err(Error::Invalid(
                        "could not sample a non-edge negative; graph too dense".into(),
                    ));
                }
            }
        }
        Ok(out)
    };

    let train_neg = draw_negs(&train_pos, neg_counts.0, &mut rng)?;
    let valid_neg = draw_negs(&valid_pos, neg_counts.1, &mut rng)?;
    let test_neg = draw_negs(&test_pos, neg_counts.2, &mut rng)?;

    Ok(LinkSplit {
        rel_name: g.rel_name(rel).to_string(),
        train_pos,
        valid_pos,
        test_pos,
        train_neg,
        valid_neg,
        test_neg,
    })
}

/// Labeled nodes of one rich-text type partitioned into train/valid/test.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabelSplit {
    pub label_names: Vec<String>,
    pub nodes: Vec<NodeId>,
    /// Aligned with `nodes`; singleton sets for multi-class data.
    pub labels: Vec<BTreeSet<usize>>,
    pub train_idx: Vec<usize>,
    pub valid_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl LabelSplit {
    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn is_multilabel(&self) -> bool {
        self.labels.iter().any(|l| l.len() > 1)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self)
                .map_err(|e| Error::Checkpoint(format!("split serialization: {e}")))?,
        )
        .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_json(path: &Path) -> Result<LabelSplit> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&s).map_err(|e| Error::Config(format!("bad split file: {e}")))
    }
}

/// Read a JSONL label file: `{"id": ..., "labels": [...]}` per line.
pub fn load_labels(path: &Path, g: &TahGraph) -> Result<Vec<(NodeId, Vec<String>)>> {
    #[derive(Deserialize)]
    struct LabelRecord {
        id: String,
        labels: Vec<String>,
    }
    use std::io::BufRead as _;
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let node = g
            .node_by_ext_id(&rec.id)
            .ok_or_else(|| Error::UnknownNode(rec.id.clone()))?;
        out.push((node, rec.labels));
    }
    Ok(out)
}

/// Partition labeled nodes into train/valid/test (ratios train, valid;
/// remainder test). Label ids are dense, in first-appearance order of the
/// sorted name set.
pub fn make_label_split(
    labeled: &[(NodeId, Vec<String>)],
    ratios: (f64, f64),
    seed: u64,
) -> Result<LabelSplit> {
    if labeled.is_empty() {
        return Err(Error::Invalid("no labeled nodes".into()));
    }
    let mut names: Vec<String> = labeled
        .iter()
        .flat_map(|(_, ls)| ls.iter().cloned())
        .collect();
    names.sort();
    names.dedup();
    let id_of: HashMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let nodes: Vec<NodeId> = labeled.iter().map(|&(u, _)| u).collect();
    let labels: Vec<BTreeSet<usize>> = labeled
        .iter()
        .map(|(_, ls)| ls.iter().map(|l| id_of[l.as_str()]).collect())
        .collect();
    if labels.iter().any(|l| l.is_empty()) {
        return Err(Error::Invalid("node with empty label set".into()));
    }

    let mut order: Vec<usize> = (0..nodes.len()).collect();
    let mut rng = derive_rng(seed, "labelsplit", 0);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n = nodes.len() as f64;
    let n_train = (n * ratios.0).round() as usize;
    let n_valid = (n * ratios.1).round() as usize;
    let train_idx = order[..n_train].to_vec();
    let valid_idx = order[n_train..(n_train + n_valid).min(order.len())].to_vec();
    let test_idx = order[(n_train + n_valid).min(order.len())..].to_vec();

    Ok(LabelSplit {
        label_names: names,
        nodes,
        labels,
        train_idx,
        valid_idx,
        test_idx,
    })
}

// ---------------------------------------------------------------------
// Headers
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeaderKind {
    Mlp,
    Rgcn,
}

impl std::str::FromStr for HeaderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<HeaderKind> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(HeaderKind::Mlp),
            "rgcn" => Ok(HeaderKind::Rgcn),
            other => Err(Error::Config(format!("unknown header kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HeaderConfig {
    pub kind: HeaderKind,
    pub hidden: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for HeaderConfig {
    fn default() -> Self {
        HeaderConfig {
            kind: HeaderKind::Mlp,
            hidden: 64,
            lr: 1e-2,
            max_steps: 400,
            eval_every: 10,
            patience: 20,
            seed: 0,
        }
    }
}

/// Small trainable network on top of frozen embeddings. The MLP variant
/// sees features only; the RGCN variant first runs two relation-aware
/// GCN layers over the graph, then the same task head.
pub struct Header {
    pub kind: HeaderKind,
    pub params: BTreeMap<String, Param>,
    in_dim: usize,
    out_dim: usize,
    rel_ops: Vec<Arc<Csr>>,
}

impl Header {
    pub fn new(
        cfg: &HeaderConfig,
        g: &TahGraph,
        in_dim: usize,
        out_dim: usize,
        pair_task: bool,
        seed: u64,
    ) -> Header {
        let mut rng = derive_rng(seed, "header", 0);
        let mut normal = |rows: usize, cols: usize| Param {
            rows,
            cols,
            values: (0..rows * cols)
                .map(|_| {
                    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.random_range(0.0..1.0);
                    let scale = (2.0 / (rows + cols) as f64).sqrt();
                    scale
                        * (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect(),
        };
        let zeros = |rows: usize, cols: usize| Param {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        };

        let mut params = BTreeMap::new();
        let (head_in, rel_ops) = match cfg.kind {
            HeaderKind::Mlp => {
                // Feature transform on raw embeddings (pairs concatenate).
                let feat_dim = if pair_task { 2 * in_dim } else { in_dim };
                params.insert("mlp.w1".into(), normal(feat_dim, cfg.hidden));
                params.insert("mlp.b1".into(), zeros(1, cfg.hidden));
                (cfg.hidden, Vec::new())
            }
            HeaderKind::Rgcn => {
                params.insert("rgcn.layer0.self".into(), normal(in_dim, cfg.hidden));
                params.insert("rgcn.layer1.self".into(), normal(cfg.hidden, cfg.hidden));
                for r in 0..g.n_relations() {
                    params.insert(format!("rgcn.layer0.rel{r}"), normal(in_dim, cfg.hidden));
                    params.insert(
                        format!("rgcn.layer1.rel{r}"),
                        normal(cfg.hidden, cfg.hidden),
                    );
                }
                let head_in = if pair_task { 2 * cfg.hidden } else { cfg.hidden };
                (head_in, relation_operators(g))
            }
        };
        params.insert("head.w".into(), normal(head_in, out_dim));
        params.insert("head.b".into(), zeros(1, out_dim));

        Header {
            kind: cfg.kind,
            params,
            in_dim,
            out_dim,
            rel_ops,
        }
    }

    /// RGCN node representations (tape node), or `None` for the MLP kind.
    fn rgcn_reps(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder<'_>,
        emb: &DenseMatrix,
    ) -> Id {
        let x0 = tape.leaf(emb.rows, emb.cols, emb.values.clone());
        let mut x = x0;
        for (l, act) in [(0usize, true), (1usize, false)] {
            let w_self = binder.bind(tape, &format!("rgcn.layer{l}.self"));
            let mut acc = tape.matmul(x, w_self);
            for (r, op) in self.rel_ops.iter().enumerate() {
                let w_r = binder.bind(tape, &format!("rgcn.layer{l}.rel{r}"));
                let transformed = tape.matmul(x, w_r);
                let msg = tape.spmm(Arc::clone(op), transformed);
                acc = tape.add(acc, msg);
            }
            x = if act { tape.relu(acc) } else { acc };
        }
        x
    }

    /// Logits for node classification: `(n_nodes, out_dim)`.
    fn class_logits(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder<'_>,
        emb: &DenseMatrix,
        nodes: &[NodeId],
    ) -> Id {
        let rows: Vec<usize> = nodes.iter().map(|&u| u as usize).collect();
        let hidden = match self.kind {
            HeaderKind::Mlp => {
                let mut feats = Vec::with_capacity(rows.len() * self.in_dim);
                for &r in &rows {
                    feats.extend_from_slice(emb.row(r));
                }
                let x = tape.leaf(rows.len(), self.in_dim, feats);
                let w1 = binder.bind(tape, "mlp.w1");
                let b1 = binder.bind(tape, "mlp.b1");
                let h0 = tape.matmul(x, w1);
                let h1 = tape.add_row(h0, b1);
                tape.relu(h1)
            }
            HeaderKind::Rgcn => {
                let reps = self.rgcn_reps(tape, binder, emb);
                tape.gather_rows(reps, rows)
            }
        };
        let w = binder.bind(tape, "head.w");
        let b = binder.bind(tape, "head.b");
        let logits0 = tape.matmul(hidden, w);
        tape.add_row(logits0, b)
    }

    /// Pair logits for link prediction: `(n_pairs, 1)`.
    fn pair_logits(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder<'_>,
        emb: &DenseMatrix,
        pairs: &[(NodeId, NodeId)],
    ) -> Id {
        let hidden = match self.kind {
            HeaderKind::Mlp => {
                let mut feats = Vec::with_capacity(pairs.len() * 2 * self.in_dim);
                for &(u, v) in pairs {
                    feats.extend_from_slice(emb.row(u as usize));
                    feats.extend_from_slice(emb.row(v as usize));
                }
                let x = tape.leaf(pairs.len(), 2 * self.in_dim, feats);
                let w1 = binder.bind(tape, "mlp.w1");
                let b1 = binder.bind(tape, "mlp.b1");
                let h0 = tape.matmul(x, w1);
                let h1 = tape.add_row(h0, b1);
                tape.relu(h1)
            }
            HeaderKind::Rgcn => {
                let reps = self.rgcn_reps(tape, binder, emb);
                let us: Vec<usize> = pairs.iter().map(|&(u, _)| u as usize).collect();
                let vs: Vec<usize> = pairs.iter().map(|&(_, v)| v as usize).collect();
                let ru = tape.gather_rows(reps, us);
                let rv = tape.gather_rows(reps, vs);
                tape.concat_cols(&[ru, rv])
            }
        };
        let w = binder.bind(tape, "head.w");
        let b = binder.bind(tape, "head.b");
        let logits0 = tape.matmul(hidden, w);
        tape.add_row(logits0, b)
    }

    /// Forward pair probabilities without building gradients.
    pub fn predict_pairs(&self, emb: &DenseMatrix, pairs: &[(NodeId, NodeId)]) -> Vec<f64> {
        let mut tape = Tape::new(Precision::F64);
        let mut binder = ParamBinder::new(&self.params);
        let logits = self.pair_logits(&mut tape, &mut binder, emb, pairs);
        let probs = tape.sigmoid(logits);
        tape.values(probs).to_vec()
    }

    /// Forward per-class scores for nodes (softmax for multi-class,
    /// per-class sigmoid for multi-label).
    pub fn predict_classes(
        &self,
        emb: &DenseMatrix,
        nodes: &[NodeId],
        multilabel: bool,
    ) -> DenseMatrix {
        let mut tape = Tape::new(Precision::F64);
        let mut binder = ParamBinder::new(&self.params);
        let logits = self.class_logits(&mut tape, &mut binder, emb, nodes);
        let scores = if multilabel {
            tape.sigmoid(logits)
        } else {
            tape.softmax_rows(logits, None)
        };
        DenseMatrix {
            rows: nodes.len(),
            cols: self.out_dim,
            values: tape.values(scores).to_vec(),
        }
    }
}

// ---------------------------------------------------------------------
// Reports and evaluation
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub header: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub failed: bool,
}

impl MetricReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self)
                .map_err(|e| Error::Checkpoint(format!("report serialization: {e}")))?,
        )
        .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Element-wise mean over reports that share task/header; seed is taken
/// from the count of inputs.
pub fn mean_report(reports: &[MetricReport]) -> MetricReport {
    assert!(!reports.is_empty());
    let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.metrics {
            *metrics.entry(k.clone()).or_insert(0.0) += v;
        }
    }
    for v in metrics.values_mut() {
        *v /= reports.len() as f64;
    }
    MetricReport {
        task: reports[0].task.clone(),
        header: reports[0].header.clone(),
        seed: reports.len() as u64,
        metrics,
        warnings: Vec::new(),
        failed: reports.iter().any(|r| r.failed),
    }
}

/// RMSE/MAE of predicted probabilities against binary labels.
pub fn evaluate_link(scores: &[f64], labels: &[f64]) -> Result<(f64, f64)> {
    Ok((rmse(scores, labels)?, mae(scores, labels)?))
}

fn header_name(kind: HeaderKind) -> &'static str {
    match kind {
        HeaderKind::Mlp => "mlp",
        HeaderKind::Rgcn => "rgcn",
    }
}

/// Train a header on the split with binary cross-entropy, early-stopping
/// on validation RMSE, and report test RMSE/MAE. The embedding table is
/// frozen: its checksum must match before and after.
pub fn run_link_prediction(
    emb: &EmbeddingTable,
    g: &TahGraph,
    split: &LinkSplit,
    cfg: &HeaderConfig,
) -> Result<MetricReport> {
    let before = emb.checksum();
    let mut header = Header::new(cfg, g, emb.table.cols, 1, true, cfg.seed);

    let mut train_pairs: Vec<(NodeId, NodeId)> = split.train_pos.clone();
    train_pairs.extend_from_slice(&split.train_neg);
    let mut train_labels = vec![1.0; split.train_pos.len()];
    train_labels.extend(vec![0.0; split.train_neg.len()]);

    let valid_pairs: Vec<(NodeId, NodeId)> = split
        .valid_pos
        .iter()
        .chain(&split.valid_neg)
        .copied()
        .collect();
    let valid_labels: Vec<f64> = (0..split.valid_pos.len())
        .map(|_| 1.0)
        .chain((0..split.valid_neg.len()).map(|_| 0.0))
        .collect();

    let mut opt = AdamW::new(0.0);
    let mut best_rmse = f64::INFINITY;
    let mut best_params = header.params.clone();
    let mut since_best = 0usize;
    let mut diverged = false;

    for step in 0..cfg.max_steps {
        let mut tape = Tape::new(Precision::F64);
        let mut binder = ParamBinder::new(&header.params);
        let logits = header.pair_logits(&mut tape, &mut binder, &emb.table, &train_pairs);
        let loss = tape.bce_with_logits(logits, train_labels.clone(), true);
        if !tape.scalar(loss).is_finite() {
            diverged = true;
            break;
        }
        let grads = tape.backward(loss);
        let by_name = binder.grads_by_name(&grads);
        opt.step(&mut header.params, &by_name, |_| cfg.lr, Precision::F64);

        if (step + 1) % cfg.eval_every == 0 {
            let scores = header.predict_pairs(&emb.table, &valid_pairs);
            let (v_rmse, _) = evaluate_link(&scores, &valid_labels)?;
            if v_rmse < best_rmse {
                best_rmse = v_rmse;
                best_params = header.params.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    header.params = best_params;

    let test_pairs: Vec<(NodeId, NodeId)> = split
        .test_pos
        .iter()
        .chain(&split.test_neg)
        .copied()
        .collect();
    let test_labels: Vec<f64> = (0..split.test_pos.len())
        .map(|_| 1.0)
        .chain((0..split.test_neg.len()).map(|_| 0.0))
        .collect();
    let scores = header.predict_pairs(&emb.table, &test_pairs);
    let (t_rmse, t_mae) = evaluate_link(&scores, &test_labels)?;

    if emb.checksum() != before {
        return Err(Error::Invalid(
            "frozen embedding table mutated during downstream training".into(),
        ));
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("rmse".to_string(), t_rmse);
    metrics.insert("mae".to_string(), t_mae);
    Ok(MetricReport {
        task: "link_prediction".into(),
        header: header_name(cfg.kind).into(),
        seed: cfg.seed,
        metrics,
        warnings: Vec::new(),
        failed: diverged,
    })
}

/// Rank classes by score (descending, ties by class id) per example.
pub fn rank_classes(scores: &DenseMatrix) -> Vec<Vec<usize>> {
    (0..scores.rows)
        .map(|i| {
            let row = scores.row(i);
            let mut order: Vec<usize> = (0..scores.cols).collect();
            order.sort_by(|&a, &b| {
                row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
            });
            order
        })
        .collect()
}

/// All seven metrics for a scored classification set: the five ranking
/// metrics at each K plus RMSE/MAE of the per-class score matrix against
/// the 0/1 label indicators.
pub fn classification_metrics(
    scores: &DenseMatrix,
    truth: &[BTreeSet<usize>],
    ks: &[usize],
) -> Result<BTreeMap<String, f64>> {
    let ranked = rank_classes(scores);
    let rp = RankedPrediction::new(scores.cols, ranked, truth.to_vec())?;
    let mut out = BTreeMap::new();
    for &k in ks {
        let (mp, mr) = micro_pr_at_k(&rp, k);
        let (cp, cr) = macro_pr_at_k(&rp, k);
        out.insert(format!("micro_p@{k}"), mp);
        out.insert(format!("micro_r@{k}"), mr);
        out.insert(format!("macro_p@{k}"), cp);
        out.insert(format!("macro_r@{k}"), cr);
        out.insert(format!("ndcg@{k}"), ndcg_at_k(&rp, k));
    }
    let mut indicator = vec![0.0; scores.rows * scores.cols];
    for (i, t) in truth.iter().enumerate() {
        for &c in t {
            indicator[i * scores.cols + c] = 1.0;
        }
    }
    out.insert("rmse".to_string(), rmse(&scores.values, &indicator)?);
    out.insert("mae".to_string(), mae(&scores.values, &indicator)?);
    Ok(out)
}

/// Train a classification header (softmax cross-entropy for multi-class,
/// per-class sigmoid BCE for multi-label), early-stopping on validation
/// micro-precision at 1, and report the full metric set at K in {1,3,5}.
pub fn run_node_classification(
    emb: &EmbeddingTable,
    g: &TahGraph,
    split: &LabelSplit,
    cfg: &HeaderConfig,
) -> Result<MetricReport> {
    let before = emb.checksum();
    let n_classes = split.n_classes();
    let multilabel = split.is_multilabel();
    let mut header = Header::new(cfg, g, emb.table.cols, n_classes, false, cfg.seed);

    let mut warnings = Vec::new();
    {
        let mut seen = vec![false; n_classes];
        for &i in &split.train_idx {
            for &c in &split.labels[i] {
                seen[c] = true;
            }
        }
        for (c, s) in seen.iter().enumerate() {
            if !s {
                warnings.push(format!(
                    "class {:?} absent from the training set",
                    split.label_names[c]
                ));
            }
        }
    }

    let nodes_of = |idx: &[usize]| -> Vec<NodeId> { idx.iter().map(|&i| split.nodes[i]).collect() };
    let truths_of = |idx: &[usize]| -> Vec<BTreeSet<usize>> {
        idx.iter().map(|&i| split.labels[i].clone()).collect()
    };
    let train_nodes = nodes_of(&split.train_idx);
    let valid_nodes = nodes_of(&split.valid_idx);
    let test_nodes = nodes_of(&split.test_idx);
    let valid_truth = truths_of(&split.valid_idx);
    let test_truth = truths_of(&split.test_idx);

    // Targets for the training loss.
    let ce_targets: Vec<usize> = split
        .train_idx
        .iter()
        .map(|&i| *split.labels[i].iter().next().expect("nonempty"))
        .collect();
    let bce_labels: Vec<f64> = split
        .train_idx
        .iter()
        .flat_map(|&i| {
            (0..n_classes)
                .map(|c| if split.labels[i].contains(&c) { 1.0 } else { 0.0 })
                .collect::<Vec<_>>()
        })
        .collect();

    let mut opt = AdamW::new(0.0);
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_params = header.params.clone();
    let mut since_best = 0usize;
    let mut diverged = false;

    for step in 0..cfg.max_steps {
        let mut tape = Tape::new(Precision::F64);
        let mut binder = ParamBinder::new(&header.params);
        let logits = header.class_logits(&mut tape, &mut binder, &emb.table, &train_nodes);
        let loss = if multilabel {
            tape.bce_with_logits(logits, bce_labels.clone(), true)
        } else {
            tape.cross_entropy_mean(logits, ce_targets.clone())
        };
        if !tape.scalar(loss).is_finite() {
            diverged = true;
            break;
        }
        let grads = tape.backward(loss);
        let by_name = binder.grads_by_name(&grads);
        opt.step(&mut header.params, &by_name, |_| cfg.lr, Precision::F64);

        if (step + 1) % cfg.eval_every == 0 && !valid_nodes.is_empty() {
            let scores = header.predict_classes(&emb.table, &valid_nodes, multilabel);
            let ranked = rank_classes(&scores);
            let rp = RankedPrediction::new(n_classes, ranked, valid_truth.clone())?;
            let (p1, _) = micro_pr_at_k(&rp, 1);
            if p1 > best_metric {
                best_metric = p1;
                best_params = header.params.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    if best_metric > f64::NEG_INFINITY {
        header.params = best_params;
    }

    let scores = header.predict_classes(&emb.table, &test_nodes, multilabel);
    let metrics = classification_metrics(&scores, &test_truth, &[1, 3, 5])?;

    if emb.checksum() != before {
        return Err(Error::Invalid(
            "frozen embedding table mutated during downstream training".into(),
        ));
    }
    Ok(MetricReport {
        task: "node_classification".into(),
        header: header_name(cfg.kind).into(),
        seed: cfg.seed,
        metrics,
        warnings,
        failed: diverged,
    })
}

/// Repeat a classification run over several header seeds and append the
/// mean report (the repetition protocol used by sweep experiments).
pub fn run_node_classification_seeds(
    emb: &EmbeddingTable,
    g: &TahGraph,
    split: &LabelSplit,
    cfg: &HeaderConfig,
    seeds: &[u64],
) -> Result<(Vec<MetricReport>, MetricReport)> {
    let mut reports = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let mut c = cfg.clone();
        c.seed = s;
        reports.push(run_node_classification(emb, g, split, &c)?);
    }
    let mean = mean_report(&reports);
    Ok((reports, mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::PretrainConfig;
    use crate::synth::{SynthConfig, generate, rich_labels};

    fn small_setup() -> (TahGraph, EmbeddingTable, Vec<(NodeId, Vec<String>)>) {
        let out = generate(&SynthConfig {
            n_rich: 40,
            n_textless_a: 16,
            n_textless_b: 8,
            rich_len_range: (4, 8),
            ..Default::default()
        })
        .unwrap();
        let g = out.graph.clone();
        let cfg = PretrainConfig {
            d_tok: 16,
            d: 8,
            n_layers_lm: 1,
            n_heads: 2,
            n_layers_gnn: 1,
            ffn_mult: 2,
            max_len: 64,
            ..Default::default()
        };
        let (vocab, _) = Vocab::build(&g, 1).unwrap();
        let state = ModelState::new(cfg.hyper(vocab.len(), &g), 0);
        let emb = export_embeddings(&state, &g, &vocab, 3, 0).unwrap();
        let labeled: Vec<(NodeId, Vec<String>)> = rich_labels(&out)
            .into_iter()
            .map(|(u, c)| (u, vec![format!("community{c}")]))
            .collect();
        (g, emb, labeled)
    }

    #[test]
    fn export_is_deterministic_and_well_shaped() {
        let (g, emb, _) = small_setup();
        assert_eq!(emb.table.rows, g.len());
        assert!(emb.table.is_finite());

        let cfg = PretrainConfig {
            d_tok: 16,
            d: 8,
            n_layers_lm: 1,
            n_heads: 2,
            n_layers_gnn: 1,
            ffn_mult: 2,
            max_len: 64,
            ..Default::default()
        };
        let (vocab, _) = Vocab::build(&g, 1).unwrap();
        let state = ModelState::new(cfg.hyper(vocab.len(), &g), 0);
        let a = export_embeddings(&state, &g, &vocab, 3, 0).unwrap();
        let b = export_embeddings(&state, &g, &vocab, 3, 0).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.checkpoint_id, b.checkpoint_id);
    }

    #[test]
    fn link_split_counts_and_disjointness() {
        let (g, _, _) = small_setup();
        let rel = g.rel_by_name("writes").unwrap();
        let m = g
            .edges()
            .iter()
            .filter(|&&(_, _, r)| r == rel)
            .count();
        let split = make_link_split(&g, rel, (0.3, 0.1, 0.1), (5, 1, 1), 0).unwrap();
        assert_eq!(split.train_pos.len(), (m as f64 * 0.3).floor() as usize);
        assert_eq!(split.valid_pos.len(), (m as f64 * 0.1).floor() as usize);
        assert_eq!(split.test_pos.len(), (m as f64 * 0.1).floor() as usize);
        assert_eq!(split.train_neg.len(), 5 * split.train_pos.len());
        assert_eq!(split.valid_neg.len(), split.valid_pos.len());
        assert_eq!(split.test_neg.len(), split.test_pos.len());

        // Positive sets pairwise disjoint.
        let as_set = |v: &[(NodeId, NodeId)]| -> std::collections::HashSet<(NodeId, NodeId)> {
            v.iter().copied().collect()
        };
        let tr = as_set(&split.train_pos);
        let va = as_set(&split.valid_pos);
        let te = as_set(&split.test_pos);
        assert!(tr.is_disjoint(&va));
        assert!(tr.is_disjoint(&te));
        assert!(va.is_disjoint(&te));

        // No sampled negative exists in E (either orientation).
        for &(u, v) in split
            .train_neg
            .iter()
            .chain(&split.valid_neg)
            .chain(&split.test_neg)
        {
            assert!(!g.has_edge(u, v), "negative ({u}, {v}) is a real edge");
        }
    }

    #[test]
    fn link_split_requires_enough_edges() {
        let out = generate(&SynthConfig {
            n_rich: 8,
            n_textless_a: 2,
            n_textless_b: 2,
            p_in: 0.02,
            p_sibling: 0.02,
            p_out: 0.0,
            communities: 2,
            ..Default::default()
        })
        .unwrap();
        // "about" has at most a handful of star edges here.
        let rel = out.graph.rel_by_name("about").unwrap();
        let n_about = out
            .graph
            .edges()
            .iter()
            .filter(|&&(_, _, r)| r == rel)
            .count();
        if n_about < 10 {
            assert!(matches!(
                make_link_split(&out.graph, rel, (0.3, 0.1, 0.1), (5, 1, 1), 0),
                Err(Error::TooFewEdges { .. })
            ));
        }
    }

    #[test]
    fn split_json_roundtrip() {
        let (g, _, labeled) = small_setup();
        let rel = g.rel_by_name("writes").unwrap();
        let split = make_link_split(&g, rel, (0.3, 0.1, 0.1), (5, 1, 1), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.json");
        split.save_json(&p).unwrap();
        assert_eq!(LinkSplit::load_json(&p).unwrap(), split);

        let ls = make_label_split(&labeled, (0.6, 0.2), 0).unwrap();
        let p2 = dir.path().join("labels.json");
        ls.save_json(&p2).unwrap();
        assert_eq!(LabelSplit::load_json(&p2).unwrap(), ls);
    }

    #[test]
    fn label_split_partitions_every_node_once() {
        let (_, _, labeled) = small_setup();
        let split = make_label_split(&labeled, (0.6, 0.2), 3).unwrap();
        let mut seen = vec![0usize; split.nodes.len()];
        for &i in split
            .train_idx
            .iter()
            .chain(&split.valid_idx)
            .chain(&split.test_idx)
        {
            seen[i] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(split.n_classes(), 4);
        assert!(!split.is_multilabel());
    }

    #[test]
    fn zero_weight_mlp_pair_scores_are_half() {
        let (g, emb, _) = small_setup();
        let cfg = HeaderConfig::default();
        let mut header = Header::new(&cfg, &g, emb.table.cols, 1, true, 0);
        for p in header.params.values_mut() {
            p.values.fill(0.0);
        }
        let pairs = vec![(0u32, 1u32), (2, 3)];
        let scores = header.predict_pairs(&emb.table, &pairs);
        assert_eq!(scores, vec![0.5, 0.5]);
    }

    #[test]
    fn rgcn_header_on_edgeless_graph_matches_self_path() {
        // With no edges the message terms vanish; the RGCN header must
        // equal the pure self-transform chain.
        let nodes: Vec<crate::graph::NodeRecord> = (0..4)
            .map(|i| crate::graph::NodeRecord {
                id: format!("n{i}"),
                node_type: "t".into(),
                text: String::new(),
            })
            .collect();
        let g = TahGraph::from_records(nodes, vec![], &[]).unwrap();
        let mut emb_mat = DenseMatrix::zeros(4, 3);
        for (i, v) in emb_mat.values.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let emb = EmbeddingTable {
            table: emb_mat,
            checkpoint_id: "test".into(),
        };
        let cfg = HeaderConfig {
            kind: HeaderKind::Rgcn,
            hidden: 5,
            ..Default::default()
        };
        let header = Header::new(&cfg, &g, 3, 2, false, 7);
        let nodes: Vec<NodeId> = (0..4).collect();
        let got = header.predict_classes(&emb.table, &nodes, false);

        // Manual: relu(X W0) W1 -> head.
        let w0 = &header.params["rgcn.layer0.self"];
        let w1 = &header.params["rgcn.layer1.self"];
        let hw = &header.params["head.w"];
        let hb = &header.params["head.b"];
        let mm = |a: &[f64], (m, k): (usize, usize), b: &[f64], n: usize| -> Vec<f64> {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for kk in 0..k {
                    for j in 0..n {
                        out[i * n + j] += a[i * k + kk] * b[kk * n + j];
                    }
                }
            }
            out
        };
        let mut h0 = mm(&emb.table.values, (4, 3), &w0.values, 5);
        h0.iter_mut().for_each(|v| *v = v.max(0.0));
        let h1 = mm(&h0, (4, 5), &w1.values, 5);
        let mut logits = mm(&h1, (4, 5), &hw.values, 2);
        for i in 0..4 {
            for j in 0..2 {
                logits[i * 2 + j] += hb.values[j];
            }
        }
        // Softmax rows.
        for i in 0..4 {
            let row = &mut logits[i * 2..(i + 1) * 2];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        for (a, b) in got.values.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn classification_logits_shape_contract() {
        let (g, emb, labeled) = small_setup();
        let split = make_label_split(&labeled, (0.6, 0.2), 0).unwrap();
        let cfg = HeaderConfig::default();
        let header = Header::new(&cfg, &g, emb.table.cols, split.n_classes(), false, 0);
        let scores = header.predict_classes(&emb.table, &split.nodes, false);
        assert_eq!(scores.rows, split.nodes.len());
        assert_eq!(scores.cols, split.n_classes());
    }

    #[test]
    fn perfect_scores_evaluate_to_zero_error_and_unit_precision() {
        let scores = vec![1.0, 1.0, 0.0, 0.0];
        let labels = vec![1.0, 1.0, 0.0, 0.0];
        let (r, m) = evaluate_link(&scores, &labels).unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(m, 0.0);

        let constant = vec![0.5; 4];
        let (r, m) = evaluate_link(&constant, &labels).unwrap();
        assert_eq!(r, 0.5);
        assert_eq!(m, 0.5);

        // Perfect classifier: micro-P@1 = micro-R@1 = 1.
        let mut s = DenseMatrix::zeros(3, 3);
        for i in 0..3 {
            s.row_mut(i)[i] = 1.0;
        }
        let truth: Vec<BTreeSet<usize>> =
            (0..3).map(|i| [i].into_iter().collect()).collect();
        let m = classification_metrics(&s, &truth, &[1]).unwrap();
        assert_eq!(m["micro_p@1"], 1.0);
        assert_eq!(m["micro_r@1"], 1.0);
        assert_eq!(m["ndcg@1"], 1.0);
    }

    #[test]
    fn multiclass_micro_identity_on_real_run() {
        let (g, emb, labeled) = small_setup();
        let split = make_label_split(&labeled, (0.6, 0.2), 0).unwrap();
        let cfg = HeaderConfig {
            max_steps: 30,
            ..Default::default()
        };
        let report = run_node_classification(&emb, &g, &split, &cfg).unwrap();
        assert!(!report.failed);
        assert_eq!(report.metrics["micro_p@1"], report.metrics["micro_r@1"]);
        assert_eq!(report.metrics["ndcg@1"], report.metrics["micro_p@1"]);
        for (k, v) in &report.metrics {
            assert!(v.is_finite(), "{k} not finite");
        }
    }

    #[test]
    fn link_prediction_run_keeps_table_frozen() {
        let (g, emb, _) = small_setup();
        let rel = g.rel_by_name("writes").unwrap();
        let split = make_link_split(&g, rel, (0.3, 0.1, 0.1), (5, 1, 1), 0).unwrap();
        let before = emb.checksum();
        let cfg = HeaderConfig {
            max_steps: 40,
            ..Default::default()
        };
        let report = run_link_prediction(&emb, &g, &split, &cfg).unwrap();
        assert_eq!(emb.checksum(), before);
        assert!(report.metrics["rmse"].is_finite());
        assert!(report.metrics["rmse"] >= report.metrics["mae"] - 1e-12);
    }

    #[test]
    fn header_training_is_deterministic() {
        let (g, emb, labeled) = small_setup();
        let split = make_label_split(&labeled, (0.6, 0.2), 0).unwrap();
        let cfg = HeaderConfig {
            max_steps: 25,
            ..Default::default()
        };
        let a = run_node_classification(&emb, &g, &split, &cfg).unwrap();
        let b = run_node_classification(&emb, &g, &split, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn seed_protocol_reports_per_seed_plus_mean() {
        let (g, emb, labeled) = small_setup();
        let split = make_label_split(&labeled, (0.6, 0.2), 0).unwrap();
        let cfg = HeaderConfig {
            max_steps: 15,
            ..Default::default()
        };
        let (reports, mean) =
            run_node_classification_seeds(&emb, &g, &split, &cfg, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(reports.len(), 5);
        let by_hand: f64 = reports
            .iter()
            .map(|r| r.metrics["micro_p@1"])
            .sum::<f64>()
            / 5.0;
        assert!((mean.metrics["micro_p@1"] - by_hand).abs() < 1e-12);
    }

    #[test]
    fn rgcn_header_trains_on_real_split() {
        let (g, emb, labeled) = small_setup();
        let split = make_label_split(&labeled, (0.6, 0.2), 0).unwrap();
        let cfg = HeaderConfig {
            kind: HeaderKind::Rgcn,
            hidden: 16,
            max_steps: 20,
            ..Default::default()
        };
        let report = run_node_classification(&emb, &g, &split, &cfg).unwrap();
        assert!(!report.failed);
        assert!(report.metrics["micro_p@1"] >= 0.0);
    }

    #[test]
    fn multilabel_path_reports_all_metrics() {
        let (g, emb, mut labeled) = small_setup();
        // Make it multi-label by doubling one label.
        labeled[0].1.push("extra".into());
        let split = make_label_split(&labeled, (0.6, 0.2), 0).unwrap();
        assert!(split.is_multilabel());
        let cfg = HeaderConfig {
            max_steps: 15,
            ..Default::default()
        };
        let report = run_node_classification(&emb, &g, &split, &cfg).unwrap();
        for k in ["micro_p@1", "micro_p@3", "micro_p@5", "ndcg@3", "rmse", "mae"] {
            assert!(report.metrics.contains_key(k));
        }
        // "extra" appears once; depending on the shuffle it may miss the
        // training split and must then be warned about, never dropped.
        assert_eq!(split.n_classes(), 5);
    }
}
