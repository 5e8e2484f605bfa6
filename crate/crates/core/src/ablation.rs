//! Sweep driver for the pretraining ablations: context order K,
//! augmentation neighbor count, task removal, negative-sampling ratio,
//! and the augmentation variants.
//!
//! Every sweep value reuses the same graph and label split (only the
//! pretraining configuration changes), so deltas between runs are not
//! confounded by data resampling. Each run pretrains, exports frozen
//! embeddings, and evaluates node classification with the MLP header.

use serde::{Deserialize, Serialize};

use crate::downstream::{
    EmbeddingTable, HeaderConfig, LabelSplit, MetricReport, export_embeddings,
    run_node_classification,
};
use crate::error::{Error, Result};
use crate::graph::TahGraph;
use crate::pretrain::{PretrainConfig, pretrain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sweep {
    /// Context order K.
    KOrder(Vec<u32>),
    /// Augmentation neighbor count k (0 = no neighbor text).
    KNeighbors(Vec<usize>),
    /// Negatives per positive.
    NegRatio(Vec<usize>),
    /// Task removal: "both", "no-cgp" (MLM only), "no-mlm" (CGP only).
    Tasks(Vec<String>),
    /// Text augmentation variants: "neighbors-only", "textless-only",
    /// "tas-1", "tas-2", "tas-3".
    Augmentation(Vec<String>),
}

impl Sweep {
    pub fn parse(kind: &str, values: &str) -> Result<Sweep> {
        let items: Vec<&str> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .collect();
        if items.is_empty() {
            return Err(Error::Config("empty sweep value list".into()));
        }
        let ints = |items: &[&str]| -> Result<Vec<usize>> {
            items
                .iter()
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad sweep value {v:?}")))
                })
                .collect()
        };
        match kind {
            "K" => Ok(Sweep::KOrder(
                ints(&items)?.into_iter().map(|v| v as u32).collect(),
            )),
            "k" => Ok(Sweep::KNeighbors(ints(&items)?)),
            "neg-ratio" => Ok(Sweep::NegRatio(ints(&items)?)),
            "tasks" => Ok(Sweep::Tasks(items.iter().map(|s| s.to_string()).collect())),
            "tas" => Ok(Sweep::Augmentation(
                items.iter().map(|s| s.to_string()).collect(),
            )),
            other => Err(Error::Config(format!(
                "unknown sweep {other:?}; expected K, k, neg-ratio, tasks, or tas"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Sweep::KOrder(_) => "K",
            Sweep::KNeighbors(_) => "k",
            Sweep::NegRatio(_) => "neg-ratio",
            Sweep::Tasks(_) => "tasks",
            Sweep::Augmentation(_) => "tas",
        }
    }

    /// The `(value name, configured run)` list this sweep expands into.
    pub fn configure(&self, base: &PretrainConfig) -> Result<Vec<(String, PretrainConfig)>> {
        let mut out = Vec::new();
        match self {
            Sweep::KOrder(values) => {
                for &v in values {
                    let mut cfg = base.clone();
                    cfg.k_order = v;
                    out.push((format!("K={v}"), cfg));
                }
            }
            Sweep::KNeighbors(values) => {
                for &v in values {
                    let mut cfg = base.clone();
                    cfg.k_neighbors = v;
                    out.push((format!("k={v}"), cfg));
                }
            }
            Sweep::NegRatio(values) => {
                for &v in values {
                    let mut cfg = base.clone();
                    cfg.negative_ratio = v;
                    out.push((format!("neg-ratio={v}"), cfg));
                }
            }
            Sweep::Tasks(variants) => {
                for v in variants {
                    let mut cfg = base.clone();
                    match v.as_str() {
                        "both" => {}
                        "no-cgp" => cfg.use_cgp = false,
                        "no-mlm" => cfg.use_mlm = false,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown task variant {other:?}"
                            )));
                        }
                    }
                    out.push((format!("tasks={v}"), cfg));
                }
            }
            Sweep::Augmentation(variants) => {
                for v in variants {
                    let mut cfg = base.clone();
                    match v.as_str() {
                        "neighbors-only" => cfg.neighbors_only = true,
                        "textless-only" => cfg.k_neighbors = 0,
                        "tas-1" => cfg.k_neighbors = 1,
                        "tas-2" => cfg.k_neighbors = 2,
                        "tas-3" => cfg.k_neighbors = 3,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown augmentation variant {other:?}"
                            )));
                        }
                    }
                    out.push((format!("tas={v}"), cfg));
                }
            }
        }
        Ok(out)
    }
}

/// One sweep entry: the value label, its pretraining trace checksum, and
/// the downstream classification report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRun {
    pub value: String,
    pub checkpoint_id: String,
    pub report: MetricReport,
}

/// Pretrain / embed / evaluate once per sweep value.
pub fn run_sweep(
    sweep: &Sweep,
    base: &PretrainConfig,
    g: &TahGraph,
    split: &LabelSplit,
    header_cfg: &HeaderConfig,
) -> Result<Vec<SweepRun>> {
    let mut runs = Vec::new();
    for (value, cfg) in sweep.configure(base)? {
        let (_, report, emb) = pretrain_and_eval(&cfg, g, split, header_cfg)?;
        runs.push(SweepRun {
            value,
            checkpoint_id: emb.checkpoint_id.clone(),
            report,
        });
    }
    Ok(runs)
}

/// The shared pretrain -> embed -> classify pipeline step.
pub fn pretrain_and_eval(
    cfg: &PretrainConfig,
    g: &TahGraph,
    split: &LabelSplit,
    header_cfg: &HeaderConfig,
) -> Result<(crate::pretrain::PretrainOutput, MetricReport, EmbeddingTable)> {
    let out = pretrain(cfg, g)?;
    let emb = export_embeddings(&out.model, g, &out.vocab, cfg.k_neighbors, cfg.seed)?;
    let report = run_node_classification(&emb, g, split, header_cfg)?;
    Ok((out, report, emb))
}
