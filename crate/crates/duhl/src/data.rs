//! Dense column-major datasets, LIBSVM ingestion and synthetic generation.

use std::io::{BufReader, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Whether the label vector holds regression targets or ±1 class labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Regression,
    Classification,
}

/// A dense d×n matrix stored column-major, together with its labels.
///
/// Columns are features for the regression families and samples for the
/// dual SVM; `transpose` switches between the two orientations.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetDense {
    d: usize,
    n: usize,
    /// Column-major values, length d·n.
    values: Vec<f64>,
    labels: Vec<f64>,
    kind: LabelKind,
}

impl DatasetDense {
    pub fn new(
        d: usize,
        n: usize,
        values: Vec<f64>,
        labels: Vec<f64>,
        kind: LabelKind,
    ) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(Error::Dimension(format!("d={d}, n={n} must both be >= 1")));
        }
        if values.len() != d * n {
            return Err(Error::Dimension(format!(
                "value buffer has length {}, expected {}",
                values.len(),
                d * n
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Dimension("non-finite matrix entry".into()));
        }
        if !labels.iter().all(|v| v.is_finite()) {
            return Err(Error::Dimension("non-finite label".into()));
        }
        if labels.len() != d && labels.len() != n {
            return Err(Error::Dimension(format!(
                "labels have length {}, expected {d} or {n}",
                labels.len()
            )));
        }
        if kind == LabelKind::Classification {
            if labels.len() != n {
                return Err(Error::Dimension(
                    "classification labels must be per-column".into(),
                ));
            }
            if !labels.iter().all(|&y| y == 1.0 || y == -1.0) {
                return Err(Error::Dimension(
                    "classification labels must be exactly +1 or -1".into(),
                ));
            }
        }
        Ok(Self {
            d,
            n,
            values,
            labels,
            kind,
        })
    }

    pub fn n_features(&self) -> usize {
        self.d
    }

    pub fn n_cols(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn col(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    /// Swap the roles of rows and columns. The result is always treated as a
    /// regression-oriented dataset (features as columns, labels as targets).
    pub fn transpose(&self) -> Result<Self> {
        let mut values = vec![0.0; self.d * self.n];
        for i in 0..self.n {
            for r in 0..self.d {
                values[r * self.n + i] = self.values[i * self.d + r];
            }
        }
        DatasetDense::new(
            self.n,
            self.d,
            values,
            self.labels.clone(),
            LabelKind::Regression,
        )
    }

    /// v += column_i * scale
    pub fn axpy_col(&self, i: usize, scale: f64, v: &mut [f64]) {
        debug_assert_eq!(v.len(), self.d);
        for (vr, ar) in v.iter_mut().zip(self.col(i)) {
            *vr += scale * ar;
        }
    }

    pub fn col_dot(&self, i: usize, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.d);
        self.col(i).iter().zip(v).map(|(a, b)| a * b).sum()
    }
}

/// Recipe for a reproducible random dataset.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub d: usize,
    pub n: usize,
    /// Fraction of coordinates of the planted solution that are nonzero, in (0, 1].
    pub density: f64,
    pub noise_std: f64,
    /// Controls inhomogeneity of column norms: column j is scaled by
    /// (1 + column_scale_spread · u_j) with u_j uniform in [0, 1].
    pub column_scale_spread: f64,
    pub seed: u64,
    pub labels: LabelKind,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 {
            return Err(Error::Config("d and n must be >= 1".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config("density must lie in (0, 1]".into()));
        }
        if self.noise_std < 0.0 || self.column_scale_spread < 0.0 {
            return Err(Error::Config(
                "noise_std and column_scale_spread must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministically generate a dataset from a seeded spec.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<DatasetDense> {
    spec.validate()?;
    let (d, n) = (spec.d, spec.n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let scales: Vec<f64> = (0..n)
        .map(|_| 1.0 + spec.column_scale_spread * rng.gen::<f64>())
        .collect();
    let mut values = vec![0.0; d * n];
    for (j, chunk) in values.chunks_mut(d).enumerate() {
        for v in chunk.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *v = scales[j] * g;
        }
    }

    let n_support = ((spec.density * n as f64).ceil() as usize).clamp(1, n);
    let support = rand::seq::index::sample(&mut rng, n, n_support).into_vec();
    let mut alpha_true = vec![0.0; n];
    for &j in &support {
        alpha_true[j] = rng.sample::<f64, _>(StandardNormal);
    }

    let col = |j: usize| &values[j * d..(j + 1) * d];
    let labels = match spec.labels {
        LabelKind::Regression => {
            let mut b = vec![0.0; d];
            for (j, &aj) in alpha_true.iter().enumerate() {
                if aj != 0.0 {
                    for (br, ar) in b.iter_mut().zip(col(j)) {
                        *br += aj * ar;
                    }
                }
            }
            for br in b.iter_mut() {
                *br += spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
            b
        }
        LabelKind::Classification => {
            let w_true: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            (0..n)
                .map(|j| {
                    let score: f64 = col(j).iter().zip(&w_true).map(|(a, w)| a * w).sum();
                    if score < 0.0 {
                        -1.0
                    } else {
                        1.0
                    }
                })
                .collect()
        }
    };

    DatasetDense::new(d, n, values, labels, spec.labels)
}

/// Squared Euclidean norm of every column.
pub fn column_norms_sq(data: &DatasetDense) -> Vec<f64> {
    (0..data.n_cols())
        .map(|i| data.col(i).iter().map(|a| a * a).sum())
        .collect()
}

/// Squared spectral norm of the submatrix formed by `block`, via power
/// iteration on the block Gram matrix (relative tolerance 1e-8, at most
/// 10 000 iterations, deterministic all-ones start).
pub fn block_op_norm_sq(data: &DatasetDense, block: &[usize]) -> Result<f64> {
    if block.is_empty() {
        return Err(Error::Config("block must be nonempty".into()));
    }
    let n = data.n_cols();
    if let Some(&bad) = block.iter().find(|&&i| i >= n) {
        return Err(Error::Dimension(format!("block index {bad} out of range")));
    }
    let m = block.len();
    let mut gram = vec![0.0; m * m];
    for (k, &i) in block.iter().enumerate() {
        for (l, &j) in block.iter().enumerate().skip(k) {
            let g = data.col_dot(i, data.col(j));
            gram[k * m + l] = g;
            gram[l * m + k] = g;
        }
    }

    let mut x = vec![1.0; m];
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let mut y = vec![0.0; m];
        for k in 0..m {
            let mut acc = 0.0;
            for l in 0..m {
                acc += gram[k * m + l] * x[l];
            }
            y[k] = acc;
        }
        let norm: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        for v in y.iter_mut() {
            *v /= norm;
        }
        let mut rayleigh = 0.0;
        for k in 0..m {
            let mut acc = 0.0;
            for l in 0..m {
                acc += gram[k * m + l] * y[l];
            }
            rayleigh += y[k] * acc;
        }
        let done = (rayleigh - lambda).abs() <= 1e-8 * rayleigh.abs().max(1e-300);
        lambda = rayleigh;
        x = y;
        if done {
            break;
        }
    }
    Ok(lambda)
}

/// Parse LIBSVM text: one `label idx:val idx:val ...` sample per line,
/// 1-based indices. Samples become columns. If every label is ±1 the result
/// is classification-oriented, otherwise regression labels are kept as-is
/// (use `transpose` for the features-as-columns orientation).
pub fn parse_libsvm_str(text: &str, expected_d: Option<usize>) -> Result<DatasetDense> {
    struct Sample {
        label: f64,
        entries: Vec<(usize, f64)>,
    }
    let mut samples: Vec<Sample> = Vec::new();
    let mut max_idx = 0usize;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().unwrap();
        let label: f64 = label_tok.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad label '{label_tok}'"),
        })?;
        if !label.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                msg: "non-finite label".into(),
            });
        }
        let mut entries = Vec::new();
        for tok in tokens {
            let (idx_s, val_s) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected idx:val, got '{tok}'"),
            })?;
            let idx: usize = idx_s.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad index '{idx_s}'"),
            })?;
            if idx == 0 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "indices are 1-based".into(),
                });
            }
            let val: f64 = val_s.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad value '{val_s}'"),
            })?;
            if !val.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "non-finite value".into(),
                });
            }
            if let Some(ed) = expected_d {
                if idx > ed {
                    return Err(Error::Dimension(format!(
                        "line {lineno}: index {idx} exceeds expected dimension {ed}"
                    )));
                }
            }
            max_idx = max_idx.max(idx);
            entries.push((idx - 1, val));
        }
        samples.push(Sample { label, entries });
    }

    if samples.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "no samples in input".into(),
        });
    }
    let d = expected_d.unwrap_or(max_idx).max(1);
    let n = samples.len();
    let mut values = vec![0.0; d * n];
    let mut labels = Vec::with_capacity(n);
    for (j, s) in samples.iter().enumerate() {
        labels.push(s.label);
        for &(idx, val) in &s.entries {
            values[j * d + idx] = val;
        }
    }
    let kind = if labels.iter().all(|&y| y == 1.0 || y == -1.0) {
        LabelKind::Classification
    } else {
        LabelKind::Regression
    };
    DatasetDense::new(d, n, values, labels, kind)
}

pub fn load_libsvm(path: &Path, expected_d: Option<usize>) -> Result<DatasetDense> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut text = String::new();
    BufReader::new(file)
        .read_to_string(&mut text)
        .map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
    parse_libsvm_str(&text, expected_d)
}

/// Emit LIBSVM text, one sample per line. Datasets with per-column labels
/// write columns as samples; regression datasets with one target per row
/// (features-as-columns orientation) write rows as samples, so that
/// load + transpose recovers the original. Zero entries are kept so that
/// dense data round-trips bit-exactly.
pub fn write_libsvm(data: &DatasetDense, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut out = std::io::BufWriter::new(file);
    let io_err = |source| Error::Io {
        path: path.to_owned(),
        source,
    };
    let labels = data.labels();
    let row_targets =
        data.kind() == LabelKind::Regression && labels.len() == data.n_features();
    if row_targets {
        for (r, &lab) in labels.iter().enumerate() {
            let mut line = fmt_float(lab);
            for j in 0..data.n_cols() {
                line.push_str(&format!(" {}:{}", j + 1, fmt_float(data.col(j)[r])));
            }
            line.push('\n');
            out.write_all(line.as_bytes()).map_err(io_err)?;
        }
    } else {
        for (j, &lab) in labels.iter().enumerate() {
            let mut line = fmt_float(lab);
            for (r, &v) in data.col(j).iter().enumerate() {
                line.push_str(&format!(" {}:{}", r + 1, fmt_float(v)));
            }
            line.push('\n');
            out.write_all(line.as_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

use std::io::Read;

/// Shortest decimal that round-trips to the same f64.
fn fmt_float(v: f64) -> String {
    format!("{v}")
}
