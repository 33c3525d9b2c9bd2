//! Region embedding matrices and per-voxel conditioning.
//!
//! Row 0 of a prepared matrix is the background vector: the unit vector least
//! aligned with the span of the region rows, taken from the right singular
//! vector belonging to the smallest singular value. Every row has unit L2 norm.
//! Adding a region later is a matter of appending a row; nothing else in a
//! trained model depends on the number of rows.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, SegMask};
use crate::tensorio::{read_tensor, write_tensor, Tensor};

pub const BACKGROUND_LABEL: &str = "background";

/// Sidecar JSON stored next to an embedding tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub labels: Vec<String>,
    pub prompt_template: String,
    pub encoder: String,
    pub has_background_row: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    dim: usize,
    data: Vec<f64>,
    labels: Vec<String>,
    encoder: String,
    prompt_template: String,
}

impl EmbeddingMatrix {
    pub fn n_regions(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn encoder(&self) -> &str {
        &self.encoder
    }

    pub fn prompt_template(&self) -> &str {
        &self.prompt_template
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.n, self.dim], self.data.clone()).expect("n x dim buffer")
    }

    pub fn sidecar(&self) -> EmbeddingSidecar {
        EmbeddingSidecar {
            labels: self.labels.clone(),
            prompt_template: self.prompt_template.clone(),
            encoder: self.encoder.clone(),
            has_background_row: true,
        }
    }

    /// Register a new region without touching existing rows.
    pub fn append_region(&mut self, name: impl Into<String>, raw_row: &[f64]) -> Result<()> {
        if raw_row.len() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: vec![self.dim],
                actual: vec![raw_row.len()],
            });
        }
        let row = normalized(raw_row).ok_or(Error::ZeroNormRow(self.n))?;
        self.data.extend(row);
        self.labels.push(name.into());
        self.n += 1;
        Ok(())
    }
}

fn normalized(row: &[f64]) -> Option<Vec<f64>> {
    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    // Rows that are already unit length up to rounding are kept verbatim, so
    // preparing a prepared matrix (or reloading a checkpoint) is bit-exact.
    if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Some(row.to_vec());
    }
    Some(row.iter().map(|x| x / norm).collect())
}

fn matrix_of(t: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    if t.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0],
            actual: t.shape().to_vec(),
        });
    }
    let data = t.to_f64_vec().ok_or(Error::DType {
        expected: "f32 or f64",
        actual: t.dtype().name(),
    })?;
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("embedding matrix"));
    }
    Ok((t.shape()[0], t.shape()[1], data))
}

fn fix_sign(v: &mut [f64]) {
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Unit right singular vector of the smallest singular value of a row-major
/// `rows x cols` matrix, sign-fixed so its first nonzero entry is positive.
pub fn background_vector_of(rows: usize, cols: usize, data: &[f64]) -> Result<Vec<f64>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("embedding matrix"));
    }
    if cols < rows {
        log::warn!("embedding width {cols} is smaller than the {rows} region rows; background vector is not orthogonal to all regions");
    }
    // Zero rows leave V unchanged but make the decomposition return the full
    // right basis, including the null space of a wide matrix.
    let padded = rows.max(cols);
    let mut m = DMatrix::<f64>::zeros(padded, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = data[r * cols + c];
        }
    }
    let svd = m
        .try_svd(false, true, f64::EPSILON, 10_000)
        .ok_or(Error::SvdNonConvergence)?;
    let v_t = svd.v_t.ok_or(Error::SvdNonConvergence)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let last = *order.last().expect("at least one singular value");
    let mut b0: Vec<f64> = v_t.row(last).iter().copied().collect();
    let norm = b0.iter().map(|x| x * x).sum::<f64>().sqrt();
    b0.iter_mut().for_each(|x| *x /= norm);
    fix_sign(&mut b0);
    Ok(b0)
}

/// Background vector of the region rows `b_tilde` (shape `[N−1, C1]`).
pub fn background_vector(b_tilde: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols, data) = matrix_of(b_tilde)?;
    background_vector_of(rows, cols, &data)
}

/// Normalise rows and, when the file carries no background row, prepend one.
pub fn prepare(raw: &Tensor, sidecar: &EmbeddingSidecar) -> Result<EmbeddingMatrix> {
    let (rows, dim, data) = matrix_of(raw)?;
    if sidecar.labels.len() != rows {
        return Err(Error::LabelCountMismatch {
            embeddings: rows,
            data: sidecar.labels.len(),
        });
    }
    let region_start = usize::from(sidecar.has_background_row);
    let mut region_rows = Vec::with_capacity((rows - region_start) * dim);
    for r in region_start..rows {
        let row = normalized(&data[r * dim..(r + 1) * dim]).ok_or(Error::ZeroNormRow(r))?;
        region_rows.extend(row);
    }
    let n_regions = rows - region_start;
    if n_regions == 0 {
        return Err(Error::Empty("region rows"));
    }
    let (background, labels) = if sidecar.has_background_row {
        (
            normalized(&data[..dim]).ok_or(Error::ZeroNormRow(0))?,
            sidecar.labels.clone(),
        )
    } else {
        let mut labels = vec![BACKGROUND_LABEL.to_string()];
        labels.extend(sidecar.labels.iter().cloned());
        (background_vector_of(n_regions, dim, &region_rows)?, labels)
    };
    let mut out = background;
    out.extend(region_rows);
    Ok(EmbeddingMatrix {
        n: n_regions + 1,
        dim,
        data: out,
        labels,
        encoder: sidecar.encoder.clone(),
        prompt_template: sidecar.prompt_template.clone(),
    })
}

/// Identity embedding for `n` labels (background included).
pub fn one_hot_embeddings(n: usize) -> Result<EmbeddingMatrix> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "one-hot embeddings need at least 2 labels, got {n}"
        )));
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    let mut labels = vec![BACKGROUND_LABEL.to_string()];
    labels.extend((1..n).map(|i| format!("region_{i}")));
    Ok(EmbeddingMatrix {
        n,
        dim: n,
        data,
        labels,
        encoder: "one-hot".into(),
        prompt_template: String::new(),
    })
}

/// Strip a trailing `.scft`/`.json` so either form of the path names the pair.
pub fn embedding_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("scft") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn load_embedding_files(path: &Path) -> Result<(Tensor, EmbeddingSidecar)> {
    let stem = embedding_stem(path);
    let tensor = read_tensor(with_suffix(&stem, ".scft"))?;
    let json_path = with_suffix(&stem, ".json");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar = serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
    Ok((tensor, sidecar))
}

pub fn write_embedding_files(path: &Path, tensor: &Tensor, sidecar: &EmbeddingSidecar) -> Result<()> {
    let stem = embedding_stem(path);
    write_tensor(with_suffix(&stem, ".scft"), tensor)?;
    let json_path = with_suffix(&stem, ".json");
    let text = serde_json::to_string_pretty(sidecar).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

/// Read and prepare an embedding file pair.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let (t, s) = load_embedding_files(path)?;
    prepare(&t, &s)
}

pub fn save_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    write_embedding_files(path, &m.to_tensor(), &m.sidecar())
}

/// Region index and confidence of every voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelConditioning {
    grid: Grid,
    region_index: Vec<i32>,
    confidence: Vec<f64>,
}

impl VoxelConditioning {
    pub fn new(grid: Grid, region_index: Vec<i32>, confidence: Vec<f64>) -> Result<Self> {
        if region_index.len() != grid.len() || confidence.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.shape().to_vec(),
                actual: vec![region_index.len(), confidence.len()],
            });
        }
        Ok(Self {
            grid,
            region_index,
            confidence,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn region_index(&self) -> &[i32] {
        &self.region_index
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    /// Same regions with every confidence replaced by `p`.
    pub fn with_uniform_confidence(&self, p: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            region_index: self.region_index.clone(),
            confidence: vec![p; self.confidence.len()],
        }
    }
}

/// Hard masks are fully trusted (`p ≡ 1`); soft masks pass their confidence through.
pub fn conditioning_from_mask(mask: &SegMask, n: usize) -> Result<VoxelConditioning> {
    if let Some(&bad) = mask.labels().iter().find(|&&l| l as usize >= n) {
        return Err(Error::LabelOutOfRange { label: bad, n });
    }
    let confidence = match mask.probs() {
        Some(p) => p.to_vec(),
        None => vec![1.0; mask.labels().len()],
    };
    VoxelConditioning::new(mask.grid().clone(), mask.labels().to_vec(), confidence)
}
