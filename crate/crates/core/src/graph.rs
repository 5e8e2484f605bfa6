//! Immutable in-memory store for a text-attributed heterogeneous graph.
//!
//! Nodes carry one type and a (possibly empty) text; edges carry a relation.
//! External string ids are remapped to dense integers at load time and the
//! mapping is retained for reporting. Edges are stored undirected and the
//! per-relation adjacency lists are sorted and deduplicated, so neighbor
//! queries are symmetric: `v ∈ neighbors(u, r)` iff `u ∈ neighbors(v, r)`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = u32;
pub type TypeId = u16;
pub type RelId = u16;

/// One line of the nodes file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    #[serde(rename = "type")]
    pub node_type: String,
    pub text: String,
}

/// One line of the edges file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub src: String,
    pub dst: String,
    pub rel: String,
}

#[derive(Debug, Clone)]
pub struct TahGraph {
    node_type: Vec<TypeId>,
    texts: Vec<String>,
    ext_ids: Vec<String>,
    /// Deduplicated undirected edges, canonicalized as (min, max, rel).
    edges: Vec<(NodeId, NodeId, RelId)>,
    /// adjacency[node][rel] = sorted, deduplicated neighbor list.
    adjacency: Vec<Vec<Vec<NodeId>>>,
    type_names: Vec<String>,
    rel_names: Vec<String>,
    rich_text_types: BTreeSet<TypeId>,
}

/// Report produced by [`TahGraph::validate`]. Report-only: violations do
/// not prevent use of the graph.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub node_count: usize,
    pub edge_count: usize,
    pub nodes_per_type: Vec<(String, usize)>,
    pub edges_per_relation: Vec<(String, usize)>,
    pub empty_text_nodes: usize,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl TahGraph {
    /// Assemble a graph from in-memory records. The loaders and the
    /// synthetic generator both funnel through here.
    pub fn from_records(
        nodes: Vec<NodeRecord>,
        edges: Vec<EdgeRecord>,
        rich_text_types: &[String],
    ) -> Result<Self> {
        let mut type_names: Vec<String> = Vec::new();
        let mut type_of_name: HashMap<String, TypeId> = HashMap::new();
        let mut id_of_ext: HashMap<String, NodeId> = HashMap::new();

        let mut node_type = Vec::with_capacity(nodes.len());
        let mut texts = Vec::with_capacity(nodes.len());
        let mut ext_ids = Vec::with_capacity(nodes.len());

        for rec in nodes {
            if id_of_ext.contains_key(&rec.id) {
                return Err(Error::DuplicateNode(rec.id));
            }
            let tid = *type_of_name.entry(rec.node_type.clone()).or_insert_with(|| {
                type_names.push(rec.node_type.clone());
                (type_names.len() - 1) as TypeId
            });
            id_of_ext.insert(rec.id.clone(), ext_ids.len() as NodeId);
            node_type.push(tid);
            texts.push(rec.text);
            ext_ids.push(rec.id);
        }

        let mut rel_names: Vec<String> = Vec::new();
        let mut rel_of_name: HashMap<String, RelId> = HashMap::new();
        let mut edge_set: BTreeSet<(NodeId, NodeId, RelId)> = BTreeSet::new();

        for rec in edges {
            let &src = id_of_ext
                .get(&rec.src)
                .ok_or_else(|| Error::UnknownNode(rec.src.clone()))?;
            let &dst = id_of_ext
                .get(&rec.dst)
                .ok_or_else(|| Error::UnknownNode(rec.dst.clone()))?;
            let rid = *rel_of_name.entry(rec.rel.clone()).or_insert_with(|| {
                rel_names.push(rec.rel.clone());
                (rel_names.len() - 1) as RelId
            });
            let (a, b) = if src <= dst { (src, dst) } else { (dst, src) };
            edge_set.insert((a, b, rid));
        }

        let mut rich = BTreeSet::new();
        for name in rich_text_types {
            let &tid = type_of_name
                .get(name)
                .ok_or_else(|| Error::UnknownType(name.clone()))?;
            rich.insert(tid);
        }

        let n = ext_ids.len();
        let n_rels = rel_names.len();
        let mut adjacency = vec![vec![Vec::new(); n_rels]; n];
        for &(a, b, r) in &edge_set {
            adjacency[a as usize][r as usize].push(b);
            if a != b {
                adjacency[b as usize][r as usize].push(a);
            }
        }
        for per_node in &mut adjacency {
            for list in per_node {
                list.sort_unstable();
                list.dedup();
            }
        }

        Ok(TahGraph {
            node_type,
            texts,
            ext_ids,
            edges: edge_set.into_iter().collect(),
            adjacency,
            type_names,
            rel_names,
            rich_text_types: rich,
        })
    }

    /// Load from JSONL node and edge files.
    ///
    /// Nodes: `{"id": ..., "type": ..., "text": ...}` per line.
    /// Edges: `{"src": ..., "dst": ..., "rel": ...}` per line.
    pub fn load(
        nodes_path: impl AsRef<Path>,
        edges_path: impl AsRef<Path>,
        rich_text_types: &[String],
    ) -> Result<Self> {
        let nodes = read_jsonl::<NodeRecord>(nodes_path.as_ref())?;
        let edges = read_jsonl::<EdgeRecord>(edges_path.as_ref())?;
        Self::from_records(nodes, edges, rich_text_types)
    }

    /// Write the graph back out as JSONL, in dense-id order. Saving and
    /// re-loading reproduces the files byte for byte.
    pub fn save(&self, nodes_path: impl AsRef<Path>, edges_path: impl AsRef<Path>) -> Result<()> {
        let np = nodes_path.as_ref();
        let mut w = BufWriter::new(
            std::fs::File::create(np).map_err(|e| Error::io(np.display().to_string(), e))?,
        );
        for u in 0..self.len() {
            let rec = NodeRecord {
                id: self.ext_ids[u].clone(),
                node_type: self.type_names[self.node_type[u] as usize].clone(),
                text: self.texts[u].clone(),
            };
            serde_json::to_writer(&mut w, &rec)
                .map_err(|e| Error::io(np.display().to_string(), e.into()))?;
            w.write_all(b"\n")
                .map_err(|e| Error::io(np.display().to_string(), e))?;
        }
        w.flush().map_err(|e| Error::io(np.display().to_string(), e))?;

        let ep = edges_path.as_ref();
        let mut w = BufWriter::new(
            std::fs::File::create(ep).map_err(|e| Error::io(ep.display().to_string(), e))?,
        );
        for &(a, b, r) in &self.edges {
            let rec = EdgeRecord {
                src: self.ext_ids[a as usize].clone(),
                dst: self.ext_ids[b as usize].clone(),
                rel: self.rel_names[r as usize].clone(),
            };
            serde_json::to_writer(&mut w, &rec)
                .map_err(|e| Error::io(ep.display().to_string(), e.into()))?;
            w.write_all(b"\n")
                .map_err(|e| Error::io(ep.display().to_string(), e))?;
        }
        w.flush().map_err(|e| Error::io(ep.display().to_string(), e))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.node_type.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_type.is_empty()
    }

    pub fn n_types(&self) -> usize {
        self.type_names.len()
    }

    pub fn n_relations(&self) -> usize {
        self.rel_names.len()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.len() as NodeId).into_iter()
    }

    pub fn check_node(&self, u: NodeId) -> Result<()> {
        if (u as usize) < self.len() {
            Ok(())
        } else {
            Err(Error::NodeOutOfRange(u, self.len()))
        }
    }

    pub fn check_relation(&self, r: RelId) -> Result<()> {
        if (r as usize) < self.n_relations() {
            Ok(())
        } else {
            Err(Error::RelationOutOfRange(r as u32, self.n_relations()))
        }
    }

    pub fn type_of(&self, u: NodeId) -> TypeId {
        self.node_type[u as usize]
    }

    pub fn text_of(&self, u: NodeId) -> &str {
        &self.texts[u as usize]
    }

    pub fn ext_id_of(&self, u: NodeId) -> &str {
        &self.ext_ids[u as usize]
    }

    pub fn node_by_ext_id(&self, ext: &str) -> Option<NodeId> {
        self.ext_ids
            .iter()
            .position(|e| e == ext)
            .map(|i| i as NodeId)
    }

    pub fn type_name(&self, t: TypeId) -> &str {
        &self.type_names[t as usize]
    }

    pub fn type_names(&self) -> &[String] {
        &self.type_names
    }

    pub fn rel_name(&self, r: RelId) -> &str {
        &self.rel_names[r as usize]
    }

    pub fn rel_names(&self) -> &[String] {
        &self.rel_names
    }

    pub fn rel_by_name(&self, name: &str) -> Option<RelId> {
        self.rel_names
            .iter()
            .position(|r| r == name)
            .map(|i| i as RelId)
    }

    pub fn type_by_name(&self, name: &str) -> Option<TypeId> {
        self.type_names
            .iter()
            .position(|t| t == name)
            .map(|i| i as TypeId)
    }

    pub fn is_rich_type(&self, t: TypeId) -> bool {
        self.rich_text_types.contains(&t)
    }

    pub fn is_rich_node(&self, u: NodeId) -> bool {
        self.is_rich_type(self.type_of(u))
    }

    pub fn rich_text_type_names(&self) -> Vec<String> {
        self.rich_text_types
            .iter()
            .map(|&t| self.type_names[t as usize].clone())
            .collect()
    }

    /// Deduplicated undirected edge list, canonicalized as (min, max, rel).
    pub fn edges(&self) -> &[(NodeId, NodeId, RelId)] {
        &self.edges
    }

    /// Neighbors of `u` under one relation (sorted slice, zero-copy).
    pub fn neighbors_rel(&self, u: NodeId, rel: RelId) -> Result<&[NodeId]> {
        self.check_node(u)?;
        self.check_relation(rel)?;
        Ok(&self.adjacency[u as usize][rel as usize])
    }

    /// Neighbors of `u`: sorted and deduplicated; `rel = None` is the union
    /// over all relations.
    pub fn neighbors(&self, u: NodeId, rel: Option<RelId>) -> Result<Vec<NodeId>> {
        self.check_node(u)?;
        match rel {
            Some(r) => Ok(self.neighbors_rel(u, r)?.to_vec()),
            None => {
                let mut all: Vec<NodeId> = self.adjacency[u as usize]
                    .iter()
                    .flat_map(|l| l.iter().copied())
                    .collect();
                all.sort_unstable();
                all.dedup();
                Ok(all)
            }
        }
    }

    pub fn degree(&self, u: NodeId) -> usize {
        self.neighbors(u, None).map(|n| n.len()).unwrap_or(0)
    }

    /// Membership test against the undirected edge set, any relation.
    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.adjacency[u as usize]
            .iter()
            .any(|l| l.binary_search(&v).is_ok())
    }

    pub fn has_edge_rel(&self, u: NodeId, v: NodeId, rel: RelId) -> bool {
        self.adjacency[u as usize][rel as usize]
            .binary_search(&v)
            .is_ok()
    }

    /// Count-and-check pass over the whole graph. TAHG well-formedness
    /// (`|types| + |relations| > 2`) is a warn-level violation, not fatal.
    pub fn validate(&self) -> ValidationReport {
        let mut nodes_per_type = vec![0usize; self.n_types()];
        for &t in &self.node_type {
            nodes_per_type[t as usize] += 1;
        }
        let mut edges_per_relation = vec![0usize; self.n_relations()];
        for &(_, _, r) in &self.edges {
            edges_per_relation[r as usize] += 1;
        }
        let empty_text_nodes = self.texts.iter().filter(|t| t.is_empty()).count();

        let mut violations = Vec::new();
        if self.n_types() + self.n_relations() <= 2 {
            violations.push(format!(
                "|U| + |R| = {} + {} <= 2: not a well-formed TAHG",
                self.n_types(),
                self.n_relations()
            ));
        }
        if self.rich_text_types.is_empty() {
            violations.push("no node type is flagged rich-text".to_string());
        }

        ValidationReport {
            node_count: self.len(),
            edge_count: self.edges.len(),
            nodes_per_type: self
                .type_names
                .iter()
                .cloned()
                .zip(nodes_per_type)
                .collect(),
            edges_per_relation: self
                .rel_names
                .iter()
                .cloned()
                .zip(edges_per_relation)
                .collect(),
            empty_text_nodes,
            violations,
        }
    }

    /// Stable content digest over structure and texts; used by determinism
    /// tests and load-equality assertions.
    pub fn digest(&self) -> u64 {
        let mut s = String::new();
        for u in 0..self.len() {
            let _ = write!(
                s,
                "{}|{}|{};",
                self.ext_ids[u], self.node_type[u], self.texts[u]
            );
        }
        for &(a, b, r) in &self.edges {
            let _ = write!(s, "{a}-{b}-{r};");
        }
        for t in &self.rich_text_types {
            let _ = write!(s, "r{t};");
        }
        crate::rng::fnv1a(s.as_bytes())
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Load `nodes.jsonl` / `edges.jsonl` (and optional `meta.json` naming the
/// rich-text types) from a directory laid out by the synth generator.
pub fn load_dir(dir: impl AsRef<Path>, rich_override: Option<&[String]>) -> Result<TahGraph> {
    let dir = dir.as_ref();
    let rich: Vec<String> = match rich_override {
        Some(r) => r.to_vec(),
        None => {
            let meta_path = dir.join("meta.json");
            let meta = std::fs::read_to_string(&meta_path)
                .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
            let meta: GraphMeta = serde_json::from_str(&meta)
                .map_err(|e| Error::Config(format!("bad meta.json: {e}")))?;
            meta.rich_text_types
        }
    };
    TahGraph::load(dir.join("nodes.jsonl"), dir.join("edges.jsonl"), &rich)
}

/// Sidecar written next to the graph files.
#[derive(Debug, Serialize, Deserialize)]
pub struct GraphMeta {
    pub rich_text_types: Vec<String>,
}
