//! Word-level vocabulary, tokenization, neighbor-augmented input assembly,
//! and MLM corruption.
//!
//! Inputs follow the `[CLS] X_u [SEP]` convention. Rich-text nodes use only
//! their own text. Textless nodes are augmented with the texts of up to `k`
//! neighbors, rich-text neighbors first: `[CLS] X_u [SEP] X_n1 [SEP] ...
//! [SEP] X_nk [SEP]`. Every assembled sequence fits `max_len` and ends
//! with `[SEP]`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, TahGraph};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const MASK: usize = 2;
pub const PAD: usize = 3;
pub const UNK: usize = 4;
pub const N_SPECIALS: usize = 5;

const SPECIAL_NAMES: [&str; N_SPECIALS] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];

/// MLM replacement policy for selected positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MlmPolicy {
    /// Every selected position becomes `[MASK]`.
    #[default]
    MaskOnly,
    /// 80% `[MASK]`, 10% random token, 10% unchanged.
    Bert801010,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextConfig {
    pub max_len: usize,
    pub mask_rate: f64,
    /// Neighbor texts appended to textless anchors.
    pub k_neighbors: usize,
    #[serde(default)]
    pub mlm_policy: MlmPolicy,
    pub min_freq: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            max_len: 512,
            mask_rate: 0.4,
            k_neighbors: 3,
            mlm_policy: MlmPolicy::MaskOnly,
            min_freq: 1,
        }
    }
}

/// Bijective token <-> id map with the five specials at ids 0..5.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_of_id: Vec<String>,
    id_of_token: HashMap<String, usize>,
}

impl Vocab {
    /// Build from every node text in the graph: lowercased alphanumeric
    /// words split on whitespace and punctuation, kept when their corpus
    /// frequency reaches `min_freq`. A graph with zero nodes is an error;
    /// a graph whose texts are all empty yields a specials-only vocabulary
    /// plus a warning.
    pub fn build(g: &TahGraph, min_freq: usize) -> Result<(Vocab, Vec<String>)> {
        if g.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for u in g.node_ids() {
            for w in split_words(g.text_of(u)) {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|&(_, c)| c >= min_freq)
            .collect();
        // Frequency-descending, ties lexicographic: deterministic ids.
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut token_of_id: Vec<String> =
            SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        token_of_id.extend(kept.into_iter().map(|(w, _)| w));

        let id_of_token = token_of_id
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();

        let mut warnings = Vec::new();
        if token_of_id.len() == N_SPECIALS {
            warnings.push("corpus produced no vocabulary tokens; specials only".to_string());
        }
        Ok((
            Vocab {
                token_of_id,
                id_of_token,
            },
            warnings,
        ))
    }

    pub fn len(&self) -> usize {
        self.token_of_id.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.token_of_id.get(id).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of_token.get(token).copied()
    }

    pub fn is_special(id: usize) -> bool {
        id < N_SPECIALS
    }

    /// Deterministic word-level tokenization; unknown words map to `[UNK]`.
    /// No specials are inserted.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .into_iter()
            .map(|w| self.id_of_token.get(&w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`Vocab::tokenize`] up to case and whitespace
    /// normalization.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, line number = id, specials first.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        for t in &self.token_of_id {
            writeln!(f, "{t}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let token_of_id: Vec<String> = BufReader::new(f)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if token_of_id.len() < N_SPECIALS
            || SPECIAL_NAMES
                .iter()
                .zip(&token_of_id)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Checkpoint(format!(
                "vocabulary file {} does not start with the special tokens",
                path.display()
            )));
        }
        let id_of_token = token_of_id
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_of_id,
            id_of_token,
        })
    }
}

/// Lowercased maximal alphanumeric runs; punctuation and whitespace both
/// act as separators.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Assembled model input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Positions of the `[SEP]` ids, one per segment.
    pub segment_boundaries: Vec<usize>,
    /// Node that produced each segment; `source_nodes[0]` is the anchor.
    pub source_nodes: Vec<NodeId>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn maskable_positions(&self) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|&(_, &id)| !Vocab::is_special(id))
            .map(|(i, _)| i)
            .collect()
    }
}

/// MLM-corrupted sequence with recorded restoration targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub ids: Vec<usize>,
    /// `(position, original id)` for every selected position.
    pub mlm_targets: Vec<(usize, usize)>,
}

/// Assemble the model input for node `u`.
///
/// Rich-text nodes: `[CLS] X_u [SEP]`. Textless nodes: the anchor segment
/// plus up to `k` neighbor segments, preferring rich-text neighbors and
/// drawing uniformly at random within each priority class (all neighbors
/// are used when `|N_u| <= k`). When neighbor segments exist the anchor's
/// own tokens are capped at half the budget; the remaining budget is
/// filled greedily in priority order, truncating the last segment. Every
/// kept segment keeps its trailing `[SEP]`.
pub fn assemble_input(
    g: &TahGraph,
    vocab: &Vocab,
    u: NodeId,
    k: usize,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSequence> {
    assemble_input_opts(g, vocab, u, k, max_len, false, rng)
}

/// [`assemble_input`] with the neighbors-only ablation switch: when
/// `drop_anchor_text` is set, textless anchors contribute an empty own
/// segment and rely entirely on neighbor texts.
pub fn assemble_input_opts(
    g: &TahGraph,
    vocab: &Vocab,
    u: NodeId,
    k: usize,
    max_len: usize,
    drop_anchor_text: bool,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSequence> {
    g.check_node(u)?;
    if max_len < 8 {
        return Err(Error::Config(format!(
            "max_len must be at least 8, got {max_len}"
        )));
    }

    let own_tokens = if drop_anchor_text && !g.is_rich_node(u) {
        Vec::new()
    } else {
        vocab.tokenize(g.text_of(u))
    };
    let neighbor_ids: Vec<NodeId> = if g.is_rich_node(u) || k == 0 {
        Vec::new()
    } else {
        select_augmentation_neighbors(g, u, k, rng)?
    };

    // Budget after [CLS]; each segment costs its tokens plus one [SEP].
    let budget = max_len - 1;
    let anchor_cap = if neighbor_ids.is_empty() {
        budget - 1
    } else {
        // Half the budget including the anchor's own [SEP].
        (budget / 2).saturating_sub(1).max(0)
    };

    let mut ids = vec![CLS];
    let mut segment_boundaries = Vec::new();
    let mut source_nodes = Vec::new();

    let take = own_tokens.len().min(anchor_cap);
    ids.extend_from_slice(&own_tokens[..take]);
    ids.push(SEP);
    segment_boundaries.push(ids.len() - 1);
    source_nodes.push(u);

    for &v in &neighbor_ids {
        let remaining = max_len - ids.len();
        if remaining < 2 {
            break;
        }
        let toks = vocab.tokenize(g.text_of(v));
        let take = toks.len().min(remaining - 1);
        if take == 0 && toks.is_empty() {
            // Empty neighbor text still marks its segment.
            ids.push(SEP);
            segment_boundaries.push(ids.len() - 1);
            source_nodes.push(v);
            continue;
        }
        if take == 0 {
            break;
        }
        ids.extend_from_slice(&toks[..take]);
        ids.push(SEP);
        segment_boundaries.push(ids.len() - 1);
        source_nodes.push(v);
    }

    debug_assert!(ids.len() <= max_len);
    debug_assert_eq!(*ids.last().unwrap(), SEP);
    Ok(TokenSequence {
        ids,
        segment_boundaries,
        source_nodes,
    })
}

/// Rich-text neighbors first, uniform within each priority class; all
/// neighbors when there are at most `k`.
fn select_augmentation_neighbors(
    g: &TahGraph,
    u: NodeId,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<NodeId>> {
    let nbrs = g.neighbors(u, None)?;
    if nbrs.len() <= k {
        return Ok(nbrs);
    }
    let mut rich: Vec<NodeId> = nbrs.iter().copied().filter(|&v| g.is_rich_node(v)).collect();
    let mut plain: Vec<NodeId> = nbrs.iter().copied().filter(|&v| !g.is_rich_node(v)).collect();
    shuffle(&mut rich, rng);
    shuffle(&mut plain, rng);
    let mut out = Vec::with_capacity(k);
    out.extend(rich.into_iter().take(k));
    if out.len() < k {
        let need = k - out.len();
        out.extend(plain.into_iter().take(need));
    }
    Ok(out)
}

fn shuffle(items: &mut [NodeId], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Corrupt a sequence for MLM: each non-special position is selected
/// independently with probability `rate` and handled per `policy`. When
/// the sequence has maskable tokens but the draw selects none, the draw is
/// repeated once; if still empty, one maskable position is forced.
pub fn mask_sequence(
    seq: &TokenSequence,
    rate: f64,
    policy: MlmPolicy,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> MaskedSequence {
    assert!(rate > 0.0 && rate < 1.0, "mask rate must be in (0, 1)");
    let maskable = seq.maskable_positions();
    if maskable.is_empty() {
        return MaskedSequence {
            ids: seq.ids.clone(),
            mlm_targets: Vec::new(),
        };
    }

    let mut selected: Vec<usize> = maskable
        .iter()
        .copied()
        .filter(|_| rng.random_range(0.0..1.0) < rate)
        .collect();
    if selected.is_empty() {
        selected = maskable
            .iter()
            .copied()
            .filter(|_| rng.random_range(0.0..1.0) < rate)
            .collect();
    }
    if selected.is_empty() {
        selected.push(maskable[rng.random_range(0..maskable.len())]);
    }

    let mut ids = seq.ids.clone();
    let mut mlm_targets = Vec::with_capacity(selected.len());
    for pos in selected {
        let original = ids[pos];
        mlm_targets.push((pos, original));
        match policy {
            MlmPolicy::MaskOnly => ids[pos] = MASK,
            MlmPolicy::Bert801010 => {
                let roll: f64 = rng.random_range(0.0..1.0);
                if roll < 0.8 {
                    ids[pos] = MASK;
                } else if roll < 0.9 && vocab_size > N_SPECIALS {
                    ids[pos] = rng.random_range(N_SPECIALS..vocab_size);
                }
                // else: leave unchanged
            }
        }
    }
    MaskedSequence { ids, mlm_targets }
}
