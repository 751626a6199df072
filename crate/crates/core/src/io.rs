//! Matrix, label, model-bundle and manifest files.
//!
//! Matrix files (`.bvm`) are a 17-byte header followed by row-major
//! little-endian `f32` values:
//!
//! | bytes  | content                      |
//! |--------|------------------------------|
//! | 0..4   | ASCII `BVLM`                 |
//! | 4      | version, `0x01`              |
//! | 5..9   | rows, `u32` little-endian    |
//! | 9..13  | cols, `u32` little-endian    |
//! | 13..17 | dtype tag, `0x01` (f32)      |

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::LossKind;

pub const MAGIC: &[u8; 4] = b"BVLM";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u32 = 0x01;
pub const HEADER_LEN: usize = 17;

/// Dense row-major matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Corrupt(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!(
                "non-finite value {} at row {}, col {}",
                data[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Rounds an `f64` matrix to `f32`.
    pub fn from_dmatrix(m: &DMatrix<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)] as f32);
            }
        }
        Self::new(m.nrows(), m.ncols(), data)
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| {
            self.data[i * self.cols + j] as f64
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_vector(&self, i: usize) -> DVector<f64> {
        DVector::from_iterator(self.cols, self.row(i).iter().map(|&v| v as f64))
    }

    /// Matrix made of the listed rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(Error::Format("bad magic".into()));
            }
            return Err(Error::Corrupt(format!(
                "file has {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let rows = word(5) as usize;
        let cols = word(9) as usize;
        let dtype = word(13);
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
        }
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt(format!("{rows}x{cols} overflows")))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::Corrupt(format!(
                "header declares {rows}x{cols} ({expected} bytes) but payload has {} bytes",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, cols, data)
    }
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        Error::Value(m) => Error::Value(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_matrix(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, matrix.to_bytes()).map_err(|e| Error::io(path, e))
}

/// One decimal integer per line; blank lines are ignored.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse::<usize>().map_err(|_| {
                Error::Format(format!("{}:{}: bad label {:?}", path.display(), n + 1, l))
            })
        })
        .collect()
}

pub fn save_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// MAP projections and scoring hyperparameters of a trained dual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    /// Image projection, `d × d_in_img`.
    pub proj_image: EmbeddingMatrix,
    /// Text projection, `d × d_in_txt`.
    pub proj_text: EmbeddingMatrix,
    pub temperature: f64,
    /// SigLIP bias; zero for InfoNCE.
    pub bias: f64,
    pub loss: LossKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleFile {
    proj_image: PathBuf,
    proj_text: PathBuf,
    temperature: f64,
    bias: f64,
    loss: LossKind,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        if self.proj_image.rows() != self.proj_text.rows() {
            return Err(Error::Arg(format!(
                "image projection has {} output rows but text projection has {}",
                self.proj_image.rows(),
                self.proj_text.rows()
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Value(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !self.bias.is_finite() {
            return Err(Error::Value("bias must be finite".into()));
        }
        Ok(())
    }

    /// Joint embedding dimension.
    pub fn dim(&self) -> usize {
        self.proj_image.rows()
    }

    /// Reads the JSON bundle; matrix paths are relative to the JSON file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file: BundleFile = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let bundle = Self {
            proj_image: load_matrix(resolve(base, &file.proj_image))?,
            proj_text: load_matrix(resolve(base, &file.proj_text))?,
            temperature: file.temperature,
            bias: file.bias,
            loss: file.loss,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Writes `path` plus `proj_image.bvm` and `proj_text.bvm` next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        save_matrix(&self.proj_image, base.join("proj_image.bvm"))?;
        save_matrix(&self.proj_text, base.join("proj_text.bvm"))?;
        let file = BundleFile {
            proj_image: "proj_image.bvm".into(),
            proj_text: "proj_text.bvm".into(),
            temperature: self.temperature,
            bias: self.bias,
            loss: self.loss,
        };
        write_json(&file, path)
    }
}

/// Pointer to a feature file and optional labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(alias = "features")]
    pub features_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none", alias = "labels")]
    pub labels_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Features and labels loaded from a manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: EmbeddingMatrix,
    pub labels: Option<Vec<usize>>,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Arg("dataset has no labels".into()))
    }

    /// Checks every label is below `n_classes`.
    pub fn check_classes(&self, n_classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
                return Err(Error::Value(format!(
                    "label {bad} out of range for {n_classes} classes"
                )));
            }
        }
        Ok(())
    }
}

impl DatasetManifest {
    /// Loads and cross-checks the referenced files; paths are relative to the
    /// manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let manifest: DatasetManifest = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let features = load_matrix(resolve(base, &manifest.features_path))?;
        let labels = match &manifest.labels_path {
            Some(p) => Some(load_labels(resolve(base, p))?),
            None => None,
        };
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::Arg(format!(
                    "{}: {} labels for {} feature rows",
                    path.display(),
                    l.len(),
                    features.rows()
                )));
            }
        }
        let dataset = Dataset {
            features,
            labels,
            class_names: manifest.class_names,
        };
        if let Some(names) = &dataset.class_names {
            dataset.check_classes(names.len())?;
        }
        Ok(dataset)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }
}
