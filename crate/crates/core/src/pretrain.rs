//! Joint pretraining: context-graph prediction plus masked language
//! modeling, with one-shot GNN feature initialization.
//!
//! Each step encodes the whole graph once with the relation-aware network,
//! encodes every anchor's masked sequence with the text encoder, scores
//! sampled positive/negative pairs bilinearly, and takes one AdamW step.
//! Text-encoder parameters follow a warmup/linear-decay schedule; graph
//! and scorer parameters use a constant learning rate. Examples are
//! regenerated every epoch from epoch-derived seeds, so runs are
//! reproducible end to end.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, TahGraph};
use crate::model::{
    DenseMatrix, HyperParams, ModelState, NodeFeatures, TapeCtx, DropoutCtx, hgnn_encode,
    lm_encode, mlm_logits, node_semantic, node_semantic_from_reps,
};
use crate::optim::{AdamW, WarmupLinearDecay, clip_grad_norm};
use crate::rng::derive_rng;
use crate::sampler::{CgpSample, NoiseDistribution, SamplerConfig, make_cgp_sample};
use crate::tensor::{Csr, Id, Precision};
use crate::text::{MaskedSequence, MlmPolicy, Vocab, assemble_input_opts, mask_sequence};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    // Context sampling.
    pub k_order: u32,
    pub k_per_relation: usize,
    pub negative_ratio: usize,
    pub noise_distribution: NoiseDistribution,
    // Text pipeline.
    pub mask_rate: f64,
    pub max_len: usize,
    pub k_neighbors: usize,
    pub mlm_policy: MlmPolicy,
    pub min_freq: usize,
    // Optimization.
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr_lm: f64,
    pub lr_gnn: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub loss_weight_mlm: f64,
    pub loss_weight_cgp: f64,
    pub use_cgp: bool,
    pub use_mlm: bool,
    /// Replace the one-shot semantic features with random draws.
    pub random_feats: bool,
    /// Ablation switch: textless anchors keep only neighbor texts.
    pub neighbors_only: bool,
    // Model dimensions.
    pub d_tok: usize,
    pub d: usize,
    pub n_layers_lm: usize,
    pub n_heads: usize,
    pub n_layers_gnn: usize,
    pub ffn_mult: usize,
    pub tie_mlm_head: bool,
    pub precision: Precision,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            k_order: 2,
            k_per_relation: 1,
            negative_ratio: 5,
            noise_distribution: NoiseDistribution::Uniform,
            mask_rate: 0.4,
            max_len: 512,
            k_neighbors: 3,
            mlm_policy: MlmPolicy::MaskOnly,
            min_freq: 1,
            batch_size: 8,
            total_steps: 300,
            warmup_steps: 20,
            peak_lr_lm: 3e-3,
            lr_gnn: 3e-2,
            weight_decay: 0.01,
            dropout: 0.0,
            clip_norm: Some(1.0),
            seed: 0,
            loss_weight_mlm: 1.0,
            loss_weight_cgp: 1.0,
            use_cgp: true,
            use_mlm: true,
            random_feats: false,
            neighbors_only: false,
            d_tok: 64,
            d: 32,
            n_layers_lm: 2,
            n_heads: 2,
            n_layers_gnn: 2,
            ffn_mult: 4,
            tie_mlm_head: false,
            precision: Precision::F64,
        }
    }
}

impl PretrainConfig {
    /// Full-scale reference configuration: BERT-base-sized encoder,
    /// 8,000 warmup steps up to 6e-5 with linear decay over 80,000 steps,
    /// constant 1e-4 for the graph network, batch 32, dropout 0.1. Far
    /// beyond desk scale; kept as a preset, not a default.
    pub fn full_preset() -> Self {
        PretrainConfig {
            batch_size: 32,
            total_steps: 80_000,
            warmup_steps: 8_000,
            peak_lr_lm: 6e-5,
            lr_gnn: 1e-4,
            dropout: 0.1,
            d_tok: 768,
            d: 768,
            n_layers_lm: 12,
            n_heads: 12,
            n_layers_gnn: 2,
            ffn_mult: 4,
            precision: Precision::F32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps < self.warmup_steps {
            return Err(Error::Config(format!(
                "total_steps {} < warmup_steps {}",
                self.total_steps, self.warmup_steps
            )));
        }
        if !(0.0 < self.mask_rate && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask_rate {} not in (0, 1)", self.mask_rate)));
        }
        if !(1..=4).contains(&self.k_order) {
            return Err(Error::Config(format!("k_order {} not in 1..=4", self.k_order)));
        }
        if self.k_per_relation == 0 || self.negative_ratio == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "k_per_relation, negative_ratio, and batch_size must be positive".into(),
            ));
        }
        if self.d_tok % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_tok {} must be divisible by n_heads {}",
                self.d_tok, self.n_heads
            )));
        }
        if !self.use_cgp && !self.use_mlm {
            return Err(Error::Config("at least one pretraining task must be on".into()));
        }
        if self.max_len < 8 {
            return Err(Error::Config("max_len must be at least 8".into()));
        }
        Ok(())
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            k_order: self.k_order,
            k_per_relation: self.k_per_relation,
            negative_ratio: self.negative_ratio,
            noise_distribution: self.noise_distribution,
        }
    }

    pub fn hyper(&self, vocab_size: usize, g: &TahGraph) -> HyperParams {
        HyperParams {
            d_tok: self.d_tok,
            d: self.d,
            n_layers_lm: self.n_layers_lm,
            n_heads: self.n_heads,
            n_layers_gnn: self.n_layers_gnn,
            ffn_mult: self.ffn_mult,
            max_len: self.max_len,
            vocab_size,
            type_names: g.type_names().to_vec(),
            rel_names: g.rel_names().to_vec(),
            tie_mlm_head: self.tie_mlm_head,
            dropout: self.dropout,
            precision: self.precision,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub mlm_loss: Option<f64>,
    pub cgp_loss: Option<f64>,
    pub lr_lm: f64,
    pub lr_gnn: f64,
    pub grad_norm: f64,
    pub skipped_anchors: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<StepRecord>,
    pub wall_secs: f64,
    pub skipped_anchors_total: u64,
    /// Checksum of the final parameters, hex-printed in reports.
    pub final_checksum: String,
}

impl TrainTrace {
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write as _;
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        for r in &self.records {
            let line = serde_json::to_string(r)
                .map_err(|e| Error::Checkpoint(format!("trace serialization: {e}")))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        let summary = serde_json::json!({
            "wall_secs": self.wall_secs,
            "skipped_anchors_total": self.skipped_anchors_total,
            "final_checksum": self.final_checksum,
        });
        writeln!(f, "{summary}").map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// One-shot GNN input features: every node's semantic vector under the
/// *initial* model, frozen thereafter. With `random_feats` the rows are
/// drawn from N(0, 0.02^2) instead.
pub fn init_node_features(
    g: &TahGraph,
    state: &ModelState,
    vocab: &Vocab,
    cfg: &PretrainConfig,
) -> Result<NodeFeatures> {
    let mut feats = NodeFeatures::zeros(g.len(), state.hyper.d);
    if cfg.random_feats {
        for u in 0..g.len() {
            let mut rng = derive_rng(cfg.seed, "randfeat", u as u64);
            for v in feats.row_mut(u) {
                // Box-Muller normal draw, std 0.02.
                let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                *v = 0.02
                    * (-2.0 * u1.ln()).sqrt()
                    * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
        return Ok(feats);
    }
    for u in g.node_ids() {
        let mut rng = derive_rng(cfg.seed, "feat", u as u64);
        let seq = assemble_input_opts(
            g,
            vocab,
            u,
            cfg.k_neighbors,
            cfg.max_len,
            cfg.neighbors_only,
            &mut rng,
        )?;
        let sem = node_semantic(state, &seq, g.type_of(u))?;
        feats.row_mut(u as usize).copy_from_slice(&sem);
    }
    Ok(feats)
}

/// Context-graph prediction loss for one anchor, computed from plain
/// vectors (no tape): `sum_pos softplus(-z) + sum_neg softplus(z)` with
/// `z = h_u^T W_type(v) Hg[v]`. Sum reduction, matching the objective.
pub fn cgp_loss(
    state: &ModelState,
    g: &TahGraph,
    sample: &CgpSample,
    h_u: &[f64],
    hg: &DenseMatrix,
) -> Result<f64> {
    if sample.positives.is_empty() {
        return Err(Error::Invalid(
            "cgp_loss on an empty positive set; caller must skip".into(),
        ));
    }
    let mut total = 0.0;
    for &v in &sample.positives {
        total += softplus(-pair_logit(state, g, h_u, v, hg)?);
    }
    for &v in &sample.negatives {
        total += softplus(pair_logit(state, g, h_u, v, hg)?);
    }
    Ok(total)
}

/// `z = h_u^T W_type(v) Hg[v]`.
pub fn pair_logit(
    state: &ModelState,
    g: &TahGraph,
    h_u: &[f64],
    v: NodeId,
    hg: &DenseMatrix,
) -> Result<f64> {
    g.check_node(v)?;
    let d = state.hyper.d;
    if h_u.len() != d || hg.cols != d {
        return Err(Error::ShapeMismatch {
            expected: format!("dim {d}"),
            got: format!("h_u {}, hg cols {}", h_u.len(), hg.cols),
        });
    }
    let w = state.param(&format!("score.t{}", g.type_of(v)));
    let gv = hg.row(v as usize);
    let mut z = 0.0;
    for i in 0..d {
        let mut wi = 0.0;
        for j in 0..d {
            wi += w.values[i * d + j] * gv[j];
        }
        z += h_u[i] * wi;
    }
    Ok(z)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean cross-entropy over the masked positions of one sequence,
/// forward-only.
pub fn mlm_loss(state: &ModelState, masked: &MaskedSequence) -> Result<f64> {
    if masked.mlm_targets.is_empty() {
        return Err(Error::Invalid("mlm_loss with zero targets".into()));
    }
    let mut ctx = TapeCtx::new(state);
    let reps = lm_encode(&mut ctx, &masked.ids, None)?;
    let (logits, targets) = mlm_logits(&mut ctx, reps, masked)?;
    let loss = ctx.tape.cross_entropy_mean(logits, targets);
    Ok(ctx.tape.scalar(loss))
}

/// One pretraining example: the CGP sample and the corrupted sequence it
/// trains against.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub anchor: NodeId,
    pub sample: CgpSample,
    pub masked: MaskedSequence,
}

/// Build the example for `(epoch, anchor)`; pure function of the seed.
pub fn make_example(
    g: &TahGraph,
    vocab: &Vocab,
    cfg: &PretrainConfig,
    epoch: u64,
    anchor: NodeId,
) -> Result<TrainExample> {
    let idx = (epoch << 32) | anchor as u64;
    let mut aug_rng = derive_rng(cfg.seed, "aug", idx);
    let seq = assemble_input_opts(
        g,
        vocab,
        anchor,
        cfg.k_neighbors,
        cfg.max_len,
        cfg.neighbors_only,
        &mut aug_rng,
    )?;
    let mut mask_rng = derive_rng(cfg.seed, "mask", idx);
    let masked = mask_sequence(&seq, cfg.mask_rate, cfg.mlm_policy, vocab.len(), &mut mask_rng);
    let sample = make_cgp_sample(g, anchor, &cfg.sampler_config(), cfg.seed.wrapping_add(epoch))?;
    Ok(TrainExample {
        anchor,
        sample,
        masked,
    })
}

/// The tape nodes a batch's joint objective decomposes into.
pub struct BatchLossParts {
    /// Mean over contributing anchors of their weighted task losses;
    /// `None` when every anchor was skipped.
    pub total: Option<Id>,
    pub mlm_terms: Vec<Id>,
    pub cgp_terms: Vec<Id>,
    pub skipped: usize,
}

/// Build the joint batch objective on the tape: per contributing anchor,
/// `w_mlm * mlm + w_cgp * cgp`, averaged over anchors. Used by the
/// training step and by gradient checks.
pub fn build_batch_loss(
    ctx: &mut TapeCtx<'_>,
    g: &TahGraph,
    rel_ops: &[Arc<Csr>],
    feats: &NodeFeatures,
    batch: &[TrainExample],
    cfg: &PretrainConfig,
    step: u64,
) -> Result<BatchLossParts> {
    let hg = if cfg.use_cgp {
        Some(hgnn_encode(ctx, rel_ops, feats)?)
    } else {
        None
    };

    let mut anchor_losses: Vec<Id> = Vec::new();
    let mut mlm_terms: Vec<Id> = Vec::new();
    let mut cgp_terms: Vec<Id> = Vec::new();
    let mut skipped = 0usize;

    for ex in batch {
        let cgp_active = cfg.use_cgp && !ex.sample.is_skippable();
        let mlm_active = cfg.use_mlm && !ex.masked.mlm_targets.is_empty();
        // The sampler contract skips empty-context anchors outright
        // whenever CGP trains.
        if (cfg.use_cgp && ex.sample.is_skippable()) || (!cgp_active && !mlm_active) {
            skipped += 1;
            continue;
        }

        let mut drop_rng = derive_rng(cfg.seed, "dropout", (step << 32) | ex.anchor as u64);
        let dropout = if cfg.dropout > 0.0 {
            Some(DropoutCtx {
                p: cfg.dropout,
                rng: &mut drop_rng,
            })
        } else {
            None
        };
        let reps = lm_encode(ctx, &ex.masked.ids, dropout)?;

        let mut parts: Vec<Id> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();

        if mlm_active {
            let (logits, targets) = mlm_logits(ctx, reps, &ex.masked)?;
            let loss = ctx.tape.cross_entropy_mean(logits, targets);
            mlm_terms.push(loss);
            parts.push(loss);
            weights.push(cfg.loss_weight_mlm);
        }

        if cgp_active {
            let hg = hg.expect("hg built when use_cgp");
            let h_u = node_semantic_from_reps(ctx, reps, &ex.masked.ids, g.type_of(ex.anchor))?;
            let loss = cgp_loss_on_tape(ctx, g, hg, h_u, &ex.sample);
            cgp_terms.push(loss);
            parts.push(loss);
            weights.push(cfg.loss_weight_cgp);
        }

        anchor_losses.push(ctx.tape.weighted_sum(&parts, &weights));
    }

    let total = if anchor_losses.is_empty() {
        None
    } else {
        let inv = 1.0 / anchor_losses.len() as f64;
        Some(
            ctx.tape
                .weighted_sum(&anchor_losses, &vec![inv; anchor_losses.len()]),
        )
    };
    Ok(BatchLossParts {
        total,
        mlm_terms,
        cgp_terms,
        skipped,
    })
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub mlm_loss: Option<f64>,
    pub cgp_loss: Option<f64>,
    pub grad_norm: f64,
    pub lr_lm: f64,
    pub lr_gnn: f64,
    pub skipped_anchors: usize,
    pub used_anchors: usize,
}

/// Owns the model and optimizer state across steps.
pub struct Trainer {
    pub state: ModelState,
    cfg: PretrainConfig,
    opt: AdamW,
    lm_schedule: WarmupLinearDecay,
    step: u64,
}

impl Trainer {
    pub fn new(state: ModelState, cfg: PretrainConfig) -> Trainer {
        let lm_schedule = WarmupLinearDecay {
            peak: cfg.peak_lr_lm,
            warmup: cfg.warmup_steps,
            total: cfg.total_steps,
        };
        Trainer {
            state,
            opt: AdamW::new(cfg.weight_decay),
            cfg,
            lm_schedule,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Forward both objectives over the batch, backpropagate their
    /// weighted mean, clip, and update. Anchors that contribute no loss
    /// term (no positives while CGP is on, or no maskable tokens while
    /// MLM-only) are skipped and counted.
    pub fn train_step(
        &mut self,
        g: &TahGraph,
        rel_ops: &[Arc<Csr>],
        feats: &NodeFeatures,
        batch: &[TrainExample],
    ) -> Result<StepOutcome> {
        let cfg = &self.cfg;
        let mut ctx = TapeCtx::new(&self.state);
        let parts = build_batch_loss(&mut ctx, g, rel_ops, feats, batch, cfg, self.step)?;

        let lr_lm = self.lm_schedule.lr(self.step);
        let lr_gnn = cfg.lr_gnn;
        let Some(batch_loss) = parts.total else {
            self.step += 1;
            return Ok(StepOutcome {
                mlm_loss: None,
                cgp_loss: None,
                grad_norm: 0.0,
                lr_lm,
                lr_gnn,
                skipped_anchors: parts.skipped,
                used_anchors: 0,
            });
        };

        let mean_of = |ctx: &TapeCtx<'_>, xs: &[Id]| -> Option<f64> {
            if xs.is_empty() {
                None
            } else {
                Some(xs.iter().map(|&x| ctx.tape.scalar(x)).sum::<f64>() / xs.len() as f64)
            }
        };
        let mlm_mean = mean_of(&ctx, &parts.mlm_terms);
        let cgp_mean = mean_of(&ctx, &parts.cgp_terms);
        let total = ctx.tape.scalar(batch_loss);
        if !total.is_finite() {
            return Err(self.nonfinite_dump(mlm_mean, cgp_mean));
        }

        let skipped = parts.skipped;
        let grads = ctx.tape.backward(batch_loss);
        let mut by_name = ctx.grads_by_name(&grads);
        drop(ctx);
        let grad_norm = match cfg.clip_norm {
            Some(max) => clip_grad_norm(&mut by_name, max),
            None => clip_grad_norm(&mut by_name, f64::INFINITY),
        };
        if !grad_norm.is_finite() {
            return Err(self.nonfinite_dump(mlm_mean, cgp_mean));
        }

        let precision = self.state.hyper.precision;
        self.opt.step(
            &mut self.state.params,
            &by_name,
            |name| if name.starts_with("lm.") { lr_lm } else { lr_gnn },
            precision,
        );
        self.step += 1;

        Ok(StepOutcome {
            mlm_loss: mlm_mean,
            cgp_loss: cgp_mean,
            grad_norm,
            lr_lm,
            lr_gnn,
            skipped_anchors: skipped,
            used_anchors: batch.len() - skipped,
        })
    }

    fn nonfinite_dump(&self, mlm: Option<f64>, cgp: Option<f64>) -> Error {
        let mut worst: Vec<(String, f64)> = self
            .state
            .params
            .iter()
            .map(|(n, p)| {
                let mx = p.values.iter().fold(0f64, |a, v| a.max(v.abs()));
                (n.clone(), mx)
            })
            .collect();
        worst.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        worst.truncate(5);
        Error::NonFiniteLoss {
            step: self.step,
            mlm,
            cgp,
            dump: format!("largest parameter magnitudes: {worst:?}"),
        }
    }
}

/// CGP loss for one anchor on the tape, batched per node type:
/// `sum_pos softplus(-z) + sum_neg softplus(z)` (sum reduction).
fn cgp_loss_on_tape(
    ctx: &mut TapeCtx<'_>,
    g: &TahGraph,
    hg: Id,
    h_u: Id,
    sample: &CgpSample,
) -> Id {
    let mut by_type: std::collections::BTreeMap<u16, (Vec<usize>, Vec<f64>)> =
        std::collections::BTreeMap::new();
    for &v in &sample.positives {
        let e = by_type.entry(g.type_of(v)).or_default();
        e.0.push(v as usize);
        e.1.push(1.0);
    }
    for &v in &sample.negatives {
        let e = by_type.entry(g.type_of(v)).or_default();
        e.0.push(v as usize);
        e.1.push(0.0);
    }
    let mut parts = Vec::new();
    for (t, (rows, labels)) in by_type {
        let w = ctx.param(&format!("score.t{t}"));
        let q = ctx.tape.matmul(h_u, w); // (1, d)
        let gathered = ctx.tape.gather_rows(hg, rows); // (n_t, d)
        let z = ctx.tape.matmul_t(gathered, q, false, true); // (n_t, 1)
        parts.push(ctx.tape.bce_with_logits(z, labels, false));
    }
    let ws = vec![1.0; parts.len()];
    ctx.tape.weighted_sum(&parts, &ws)
}

/// Everything a pretraining run produces.
pub struct PretrainOutput {
    pub model: ModelState,
    pub vocab: Vocab,
    pub trace: TrainTrace,
}

/// End-to-end pretraining on one graph: vocabulary, model init, one-shot
/// feature initialization, then `total_steps` over shuffled anchor
/// batches.
pub fn pretrain(cfg: &PretrainConfig, g: &TahGraph) -> Result<PretrainOutput> {
    cfg.validate()?;
    let started = std::time::Instant::now();

    let (vocab, _warnings) = Vocab::build(g, cfg.min_freq)?;
    let hyper = cfg.hyper(vocab.len(), g);
    let state = ModelState::new(hyper, cfg.seed);
    let rel_ops = crate::model::relation_operators(g);
    let feats = init_node_features(g, &state, &vocab, cfg)?;
    let mut trainer = Trainer::new(state, cfg.clone());

    let mut records = Vec::with_capacity(cfg.total_steps as usize);
    let mut skipped_total = 0u64;
    let mut epoch = 0u64;
    let mut queue: Vec<NodeId> = Vec::new();

    for step in 0..cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if queue.is_empty() {
                let mut rng = derive_rng(cfg.seed, "epoch", epoch);
                queue = crate::sampler::shuffled_anchors(g, &mut rng);
                epoch += 1;
            }
            let anchor = queue.pop().expect("nonempty queue");
            batch.push(make_example(g, &vocab, cfg, epoch - 1, anchor)?);
        }
        let outcome = trainer.train_step(g, &rel_ops, &feats, &batch)?;
        skipped_total += outcome.skipped_anchors as u64;
        records.push(StepRecord {
            step,
            mlm_loss: outcome.mlm_loss,
            cgp_loss: outcome.cgp_loss,
            lr_lm: outcome.lr_lm,
            lr_gnn: outcome.lr_gnn,
            grad_norm: outcome.grad_norm,
            skipped_anchors: outcome.skipped_anchors,
        });
    }

    let trace = TrainTrace {
        records,
        wall_secs: started.elapsed().as_secs_f64(),
        skipped_anchors_total: skipped_total,
        final_checksum: format!("{:016x}", trainer.state.checksum()),
    };
    Ok(PretrainOutput {
        model: trainer.state,
        vocab,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeRecord, NodeRecord};
    use crate::synth::{SynthConfig, generate};

    fn tiny_cfg() -> PretrainConfig {
        PretrainConfig {
            total_steps: 3,
            warmup_steps: 1,
            batch_size: 4,
            d_tok: 16,
            d: 8,
            n_layers_lm: 1,
            n_heads: 2,
            n_layers_gnn: 1,
            ffn_mult: 2,
            max_len: 64,
            ..Default::default()
        }
    }

    fn small_graph() -> TahGraph {
        generate(&SynthConfig {
            n_rich: 24,
            n_textless_a: 10,
            n_textless_b: 6,
            rich_len_range: (4, 8),
            ..Default::default()
        })
        .unwrap()
        .graph
    }

    fn built_state(g: &TahGraph, cfg: &PretrainConfig) -> (ModelState, Vocab) {
        let (vocab, _) = Vocab::build(g, cfg.min_freq).unwrap();
        let state = ModelState::new(cfg.hyper(vocab.len(), g), cfg.seed);
        (state, vocab)
    }

    #[test]
    fn zero_representation_cgp_loss_is_closed_form() {
        let g = small_graph();
        let cfg = tiny_cfg();
        let (state, _) = built_state(&g, &cfg);
        let sample =
            make_cgp_sample(&g, 0, &cfg.sampler_config(), 7).unwrap();
        assert!(!sample.is_skippable());
        let h_u = vec![0.0; cfg.d];
        let hg = DenseMatrix::zeros(g.len(), cfg.d);
        let loss = cgp_loss(&state, &g, &sample, &h_u, &hg).unwrap();
        let n = (sample.positives.len() + sample.negatives.len()) as f64;
        assert!(
            (loss - n * std::f64::consts::LN_2).abs() < 1e-12,
            "loss {loss} vs {}",
            n * std::f64::consts::LN_2
        );
    }

    #[test]
    fn cgp_loss_formula_evaluation() {
        // One positive at score 0.9 and one negative at score 0.1:
        // loss = -ln 0.9 - ln 0.9.
        let nodes = vec![
            NodeRecord { id: "u".into(), node_type: "t".into(), text: String::new() },
            NodeRecord { id: "p".into(), node_type: "t".into(), text: String::new() },
            NodeRecord { id: "n".into(), node_type: "t".into(), text: String::new() },
        ];
        let edges = vec![EdgeRecord { src: "u".into(), dst: "p".into(), rel: "r".into() }];
        let g = TahGraph::from_records(nodes, edges, &[]).unwrap();
        let mut cfg = tiny_cfg();
        cfg.d = 1;
        cfg.d_tok = 4;
        let (mut state, _) = built_state(&g, &cfg);
        state.params.get_mut("score.t0").unwrap().values[0] = 1.0;

        let z = (0.9f64 / 0.1).ln(); // logit of 0.9
        let mut hg = DenseMatrix::zeros(3, 1);
        hg.row_mut(1)[0] = 1.0; // positive scores sigmoid(z) = 0.9
        hg.row_mut(2)[0] = -1.0; // negative scores sigmoid(-z) = 0.1
        let sample = CgpSample {
            anchor: 0,
            positives: vec![1],
            negatives: vec![2],
            seed: 0,
        };
        let loss = cgp_loss(&state, &g, &sample, &[z], &hg).unwrap();
        let want = -(0.9f64.ln()) * 2.0;
        assert!((loss - want).abs() < 1e-9, "loss {loss} want {want}");
        assert!(loss >= 0.0);
    }

    #[test]
    fn cgp_loss_requires_positives() {
        let g = small_graph();
        let cfg = tiny_cfg();
        let (state, _) = built_state(&g, &cfg);
        let sample = CgpSample {
            anchor: 0,
            positives: vec![],
            negatives: vec![],
            seed: 0,
        };
        let hg = DenseMatrix::zeros(g.len(), cfg.d);
        assert!(cgp_loss(&state, &g, &sample, &vec![0.0; cfg.d], &hg).is_err());
    }

    #[test]
    fn uniform_head_mlm_loss_is_ln_vocab() {
        let g = small_graph();
        let cfg = tiny_cfg();
        let (mut state, vocab) = built_state(&g, &cfg);
        // Zero head weight and bias: logits uniform over the vocabulary.
        state.params.get_mut("lm.mlm_head.w").unwrap().values.fill(0.0);
        state.params.get_mut("lm.mlm_head.b").unwrap().values.fill(0.0);
        let masked = MaskedSequence {
            ids: vec![crate::text::CLS, crate::text::MASK, 6, crate::text::SEP],
            mlm_targets: vec![(1, 7)],
        };
        let loss = mlm_loss(&state, &masked).unwrap();
        assert!(
            (loss - (vocab.len() as f64).ln()).abs() < 1e-9,
            "loss {loss}, ln V {}",
            (vocab.len() as f64).ln()
        );
    }

    #[test]
    fn near_certain_prediction_gives_near_zero_loss() {
        let g = small_graph();
        let mut cfg = tiny_cfg();
        cfg.d_tok = 8;
        let (mut state, vocab) = built_state(&g, &cfg);
        let target = 7usize;
        // Boost the target column's bias far above everything else.
        state.params.get_mut("lm.mlm_head.w").unwrap().values.fill(0.0);
        {
            let b = state.params.get_mut("lm.mlm_head.b").unwrap();
            b.values.fill(0.0);
            b.values[target] = 50.0;
        }
        let masked = MaskedSequence {
            ids: vec![crate::text::CLS, crate::text::MASK, crate::text::SEP],
            mlm_targets: vec![(1, target)],
        };
        let loss = mlm_loss(&state, &masked).unwrap();
        assert!(loss >= 0.0 && loss < 1e-9, "loss {loss}");
        assert!(vocab.len() > target);
    }

    #[test]
    fn mlm_loss_invariant_under_vocab_permutation() {
        let g = small_graph();
        let cfg = tiny_cfg();
        let (state, vocab) = built_state(&g, &cfg);
        let v = vocab.len();
        let masked = MaskedSequence {
            ids: vec![crate::text::CLS, crate::text::MASK, 6, 8, crate::text::SEP],
            mlm_targets: vec![(1, 9), (2, 6)],
        };
        let base = mlm_loss(&state, &masked).unwrap();

        // Swap two non-special labels everywhere: head columns, bias, and
        // the recorded targets. The loss must not change. Token embeddings
        // of input ids stay put because inputs are unchanged.
        let (a, b) = (9usize, 10usize);
        let mut permuted = state.clone();
        {
            let head = permuted.params.get_mut("lm.mlm_head.w").unwrap();
            for r in 0..cfg.d_tok {
                head.values.swap(r * v + a, r * v + b);
            }
            let bias = permuted.params.get_mut("lm.mlm_head.b").unwrap();
            bias.values.swap(a, b);
        }
        let relabeled = MaskedSequence {
            ids: masked.ids.clone(),
            mlm_targets: vec![(1, 10), (2, 6)],
        };
        let permuted_loss = mlm_loss(&permuted, &relabeled).unwrap();
        assert!((base - permuted_loss).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_train_step_is_noop() {
        let g = small_graph();
        let mut cfg = tiny_cfg();
        cfg.peak_lr_lm = 0.0;
        cfg.lr_gnn = 0.0;
        cfg.warmup_steps = 0;
        let (state, vocab) = built_state(&g, &cfg);
        let before = state.checksum();
        let rel_ops = crate::model::relation_operators(&g);
        let feats = init_node_features(&g, &state, &vocab, &cfg).unwrap();
        let mut trainer = Trainer::new(state, cfg.clone());
        let batch: Vec<TrainExample> = (0..4)
            .map(|u| make_example(&g, &vocab, &cfg, 0, u).unwrap())
            .collect();
        trainer.train_step(&g, &rel_ops, &feats, &batch).unwrap();
        assert_eq!(trainer.state.checksum(), before);
    }

    #[test]
    fn joint_step_updates_both_parameter_groups() {
        let g = small_graph();
        let cfg = tiny_cfg();
        let (state, vocab) = built_state(&g, &cfg);
        let lm_before = state.param("lm.token_emb").values.clone();
        let gnn_before = state.param("gnn.layer0.self").values.clone();
        let score_before = state.param("score.t0").values.clone();

        let rel_ops = crate::model::relation_operators(&g);
        let feats = init_node_features(&g, &state, &vocab, &cfg).unwrap();
        let mut trainer = Trainer::new(state, cfg.clone());
        let batch: Vec<TrainExample> = (0..4)
            .map(|u| make_example(&g, &vocab, &cfg, 0, u).unwrap())
            .collect();
        let outcome = trainer.train_step(&g, &rel_ops, &feats, &batch).unwrap();
        assert!(outcome.mlm_loss.unwrap().is_finite());
        assert!(outcome.cgp_loss.unwrap().is_finite());

        let delta = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        assert!(delta(&lm_before, &trainer.state.param("lm.token_emb").values) > 0.0);
        assert!(delta(&gnn_before, &trainer.state.param("gnn.layer0.self").values) > 0.0);
        assert!(delta(&score_before, &trainer.state.param("score.t0").values) > 0.0);
    }

    #[test]
    fn feature_init_is_deterministic_and_finite() {
        let g = small_graph();
        let cfg = tiny_cfg();
        let (state, vocab) = built_state(&g, &cfg);
        let a = init_node_features(&g, &state, &vocab, &cfg).unwrap();
        let b = init_node_features(&g, &state, &vocab, &cfg).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.rows, g.len());
        assert!(a.is_finite());

        let mut rcfg = cfg.clone();
        rcfg.random_feats = true;
        let r = init_node_features(&g, &state, &vocab, &rcfg).unwrap();
        assert!(r.is_finite());
        assert_ne!(r.values, a.values);
        assert!(r.values.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn task_flags_control_which_losses_appear() {
        let g = small_graph();
        let mut cfg = tiny_cfg();
        cfg.total_steps = 2;
        cfg.use_cgp = false;
        let out = pretrain(&cfg, &g).unwrap();
        assert!(out.trace.records.iter().all(|r| r.cgp_loss.is_none()));
        assert!(out.trace.records.iter().all(|r| r.mlm_loss.is_some()));

        cfg.use_cgp = true;
        cfg.use_mlm = false;
        let out = pretrain(&cfg, &g).unwrap();
        assert!(out.trace.records.iter().all(|r| r.mlm_loss.is_none()));
        assert!(out.trace.records.iter().all(|r| r.cgp_loss.is_some()));
    }

    #[test]
    fn pretrain_replays_identically_for_one_seed() {
        let g = small_graph();
        let cfg = tiny_cfg();
        let a = pretrain(&cfg, &g).unwrap();
        let b = pretrain(&cfg, &g).unwrap();
        assert_eq!(a.trace.final_checksum, b.trace.final_checksum);
        assert_eq!(a.model.checksum(), b.model.checksum());

        let mut cfg2 = cfg.clone();
        cfg2.seed = 99;
        let c = pretrain(&cfg2, &g).unwrap();
        assert_ne!(a.trace.final_checksum, c.trace.final_checksum);
    }

    #[test]
    fn losses_stay_finite_through_a_short_run() {
        let g = small_graph();
        let mut cfg = tiny_cfg();
        cfg.total_steps = 6;
        let out = pretrain(&cfg, &g).unwrap();
        for r in &out.trace.records {
            if let Some(l) = r.mlm_loss {
                assert!(l.is_finite());
            }
            if let Some(l) = r.cgp_loss {
                assert!(l.is_finite());
            }
            assert!(r.grad_norm.is_finite());
        }
        assert!(out.model.all_finite());
    }

    #[test]
    fn isolated_anchors_are_skipped_and_counted() {
        // A graph with isolated nodes: CGP-on training skips them.
        let mut nodes: Vec<NodeRecord> = (0..6)
            .map(|i| NodeRecord {
                id: format!("n{i}"),
                node_type: "paper".into(),
                text: format!("token{i} token{}", i + 1),
            })
            .collect();
        nodes.push(NodeRecord {
            id: "iso".into(),
            node_type: "paper".into(),
            text: "lonely words".into(),
        });
        let edges = (0..5)
            .map(|i| EdgeRecord {
                src: format!("n{i}"),
                dst: format!("n{}", i + 1),
                rel: "r".into(),
            })
            .collect();
        let g = TahGraph::from_records(nodes, edges, &["paper".to_string()]).unwrap();
        let mut cfg = tiny_cfg();
        cfg.batch_size = 7;
        cfg.total_steps = 2;
        let out = pretrain(&cfg, &g).unwrap();
        assert!(out.trace.skipped_anchors_total > 0);
    }

    #[test]
    fn full_preset_matches_reference_settings() {
        let cfg = PretrainConfig::full_preset();
        assert_eq!(cfg.peak_lr_lm, 6e-5);
        assert_eq!(cfg.lr_gnn, 1e-4);
        assert_eq!(cfg.warmup_steps, 8_000);
        assert_eq!(cfg.total_steps, 80_000);
        assert_eq!(cfg.d_tok, 768);
        assert_eq!(cfg.negative_ratio, 5);
        assert!((cfg.mask_rate - 0.4).abs() < 1e-12);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_cfg();
        cfg.warmup_steps = 100;
        cfg.total_steps = 10;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_cfg();
        cfg.k_order = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_cfg();
        cfg.use_cgp = false;
        cfg.use_mlm = false;
        assert!(cfg.validate().is_err());
    }
}
