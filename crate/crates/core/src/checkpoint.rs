//! Versioned binary container for checkpoints and embedding tables.
//!
//! Layout: magic `TAHG`, u32 version, u64 header length, header JSON,
//! u64 blob count, then per blob: name (u64 length + bytes), u64 rows,
//! u64 cols, and `rows*cols` 64-bit little-endian reals. Loading a model
//! validates every blob shape against the hyperparameter record.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DenseMatrix, HyperParams, ModelState, Param};

const MAGIC: &[u8; 4] = b"TAHG";
const VERSION: u32 = 1;

pub struct Container {
    pub header: serde_json::Value,
    pub blobs: Vec<(String, usize, usize, Vec<f64>)>,
}

pub fn write_container(
    path: &Path,
    header: &serde_json::Value,
    blobs: &[(String, usize, usize, &[f64])],
) -> Result<()> {
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let header_bytes = serde_json::to_vec(header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;
    w.write_all(&(blobs.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    for (name, rows, cols, values) in blobs {
        if values.len() != rows * cols {
            return Err(Error::Checkpoint(format!(
                "blob {name}: {} values for shape ({rows}, {cols})",
                values.len()
            )));
        }
        w.write_all(&(name.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&(*rows as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(*cols as u64).to_le_bytes()).map_err(io_err)?;
        for v in *values {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_container(path: &Path) -> Result<Container> {
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut r = BufReader::new(std::fs::File::open(path).map_err(io_err)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let header_len = read_u64(&mut r, path)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io_err)?;
    let header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;

    let count = read_u64(&mut r, path)? as usize;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("bad blob name: {e}")))?;
        let rows = read_u64(&mut r, path)? as usize;
        let cols = read_u64(&mut r, path)? as usize;
        let mut values = vec![0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in &mut values {
            r.read_exact(&mut buf).map_err(io_err)?;
            *v = f64::from_le_bytes(buf);
        }
        blobs.push((name, rows, cols, values));
    }
    Ok(Container { header, blobs })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn save_model(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let header = serde_json::json!({
        "kind": "model",
        "hyper": state.hyper,
    });
    let blobs: Vec<(String, usize, usize, &[f64])> = state
        .params
        .iter()
        .map(|(n, p)| (n.clone(), p.rows, p.cols, p.values.as_slice()))
        .collect();
    write_container(path.as_ref(), &header, &blobs)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let container = read_container(path)?;
    let kind = container.header.get("kind").and_then(|k| k.as_str());
    if kind != Some("model") {
        return Err(Error::Checkpoint(format!(
            "{}: expected a model container, found kind {kind:?}",
            path.display()
        )));
    }
    let hyper: HyperParams = serde_json::from_value(
        container
            .header
            .get("hyper")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing hyper record".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("bad hyper record: {e}")))?;

    // Validate blob shapes against a freshly constructed skeleton.
    let skeleton = ModelState::new(hyper.clone(), 0);
    let mut params = std::collections::BTreeMap::new();
    for (name, rows, cols, values) in container.blobs {
        let expect = skeleton.params.get(&name).ok_or_else(|| {
            Error::Checkpoint(format!("unexpected parameter {name} for these hyperparameters"))
        })?;
        if (expect.rows, expect.cols) != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape ({rows}, {cols}) does not match hyperparameters \
                 (expected ({}, {}))",
                expect.rows, expect.cols
            )));
        }
        params.insert(name, Param { rows, cols, values });
    }
    for name in skeleton.params.keys() {
        if !params.contains_key(name) {
            return Err(Error::Checkpoint(format!("missing parameter {name}")));
        }
    }
    Ok(ModelState { hyper, params })
}

/// Embedding-table header carried alongside the matrix blob.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct EmbeddingHeader {
    pub kind: String,
    pub n_nodes: usize,
    pub dim: usize,
    /// Checksum of the checkpoint the table was exported from.
    pub checkpoint_id: String,
}

pub fn save_embeddings(
    table: &DenseMatrix,
    checkpoint_id: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let header = serde_json::json!(EmbeddingHeader {
        kind: "embeddings".into(),
        n_nodes: table.rows,
        dim: table.cols,
        checkpoint_id: checkpoint_id.into(),
    });
    write_container(
        path.as_ref(),
        &header,
        &[(
            "embeddings".to_string(),
            table.rows,
            table.cols,
            table.values.as_slice(),
        )],
    )
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<(DenseMatrix, EmbeddingHeader)> {
    let path = path.as_ref();
    let container = read_container(path)?;
    let header: EmbeddingHeader = serde_json::from_value(container.header.clone())
        .map_err(|e| Error::Checkpoint(format!("bad embedding header: {e}")))?;
    if header.kind != "embeddings" {
        return Err(Error::Checkpoint(format!(
            "{}: expected an embeddings container",
            path.display()
        )));
    }
    let (name, rows, cols, values) = container
        .blobs
        .into_iter()
        .next()
        .ok_or_else(|| Error::Checkpoint("embedding container has no blob".into()))?;
    if name != "embeddings" || rows != header.n_nodes || cols != header.dim {
        return Err(Error::Checkpoint("embedding blob/header mismatch".into()));
    }
    Ok((DenseMatrix { rows, cols, values }, header))
}
