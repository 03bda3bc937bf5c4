//! Generative fidelity measurement.
//!
//! Samples are mapped through a frozen feature embedding, summarized as a
//! Gaussian (mean + covariance), and compared with the closed-form Fréchet
//! distance. Per-task distances collect into a lower-triangular matrix
//! d[k][i] (fidelity on task i after training task k) from which the two
//! aggregates derive: `mf` averages the final row, `imf` averages each row's
//! running mean.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

pub const EMBED_DIM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// Frozen random features tanh(Wx + b); one draw per run seed.
    RandomTanh,
    /// Raw-coordinate moments.
    Identity,
}

#[derive(Clone)]
pub struct FeatureEmbed {
    mode: EmbedMode,
    in_dim: usize,
    out_dim: usize,
    w: Vec<f64>, // out_dim x in_dim, row-major
    b: Vec<f64>,
}

impl FeatureEmbed {
    pub fn new(mode: EmbedMode, in_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 {
            return Err(Error::invalid("embedding needs in_dim >= 1"));
        }
        match mode {
            EmbedMode::Identity => Ok(FeatureEmbed {
                mode,
                in_dim,
                out_dim: in_dim,
                w: Vec::new(),
                b: Vec::new(),
            }),
            EmbedMode::RandomTanh => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(3);
                let w_std = (1.0 / in_dim as f64).sqrt();
                let w = (0..EMBED_DIM * in_dim)
                    .map(|_| w_std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let b = (0..EMBED_DIM)
                    .map(|_| 0.2 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Ok(FeatureEmbed { mode, in_dim, out_dim: EMBED_DIM, w, b })
            }
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.as_2d();
        if d != self.in_dim {
            return Err(Error::shape(
                "feature_embed",
                format!("input dim {d} vs frozen {}", self.in_dim),
            ));
        }
        if self.mode == EmbedMode::Identity {
            return Ok(x.clone());
        }
        let mut out = Vec::with_capacity(n * self.out_dim);
        for r in 0..n {
            let row = x.row(r);
            for o in 0..self.out_dim {
                let mut z = self.b[o];
                for (wi, xi) in self.w[o * d..(o + 1) * d].iter().zip(row) {
                    z += wi * xi;
                }
                out.push(z.tanh());
            }
        }
        Tensor::matrix(n, self.out_dim, out)
    }
}

#[derive(Clone, Debug)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// dim x dim covariance, row-major, exactly symmetric.
    pub cov: Vec<f64>,
    pub dim: usize,
    pub n: usize,
}

/// Sample mean plus biased (1/n) covariance, mirrored to exact symmetry.
pub fn fit_gaussian(features: &Tensor) -> Result<GaussianStats> {
    let (n, d) = features.as_2d();
    if n < 2 {
        return Err(Error::invalid("gaussian fit needs >= 2 samples"));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(r)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = features.row(r);
        for i in 0..d {
            let ci = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / n as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(GaussianStats { mean, cov, dim: d, n })
}

/// U diag(sqrt(max(lambda, 0))) U^T of a symmetric matrix.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}), clamped at 0.
///
/// The cross trace uses tr sqrt(sqrt(Sa) Sb sqrt(Sa)), the symmetric-product
/// form of the matrix square root; negative eigenvalues from sampling noise
/// are floored before the root.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::shape("frechet", format!("dims {} vs {}", a.dim, b.dim)));
    }
    let d = a.dim;
    let mean_sq: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let root_a = sqrt_psd(&sa);
    let mut inner = &root_a * &sb * &root_a;
    // exact symmetry before the final eigendecomposition
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let fd = mean_sq + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Lower-triangular d[k][i] (0-based), row k holding k+1 entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FidelityMatrix {
    task_count: usize,
    rows: Vec<Vec<f64>>,
}

impl FidelityMatrix {
    pub fn new(task_count: usize) -> Result<Self> {
        if task_count == 0 {
            return Err(Error::invalid("fidelity matrix needs >= 1 task"));
        }
        Ok(FidelityMatrix { task_count, rows: Vec::new() })
    }

    pub fn task_count(&self) -> usize {
        self.task_count
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.task_count
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if self.rows.len() == self.task_count {
            return Err(Error::invalid("fidelity matrix already complete"));
        }
        let want = self.rows.len() + 1;
        if row.len() != want {
            return Err(Error::shape(
                "fidelity_row",
                format!("row {} needs {want} entries, got {}", self.rows.len(), row.len()),
            ));
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("fidelity entries must be finite >= 0: {bad}")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, k: usize, i: usize) -> Option<f64> {
        self.rows.get(k).and_then(|r| r.get(i)).copied()
    }

    /// Mean of the final row: terminal fidelity across all tasks.
    pub fn mf(&self) -> Result<f64> {
        if !self.is_complete() {
            return Err(Error::invalid("mf needs the completed final row"));
        }
        let last = &self.rows[self.task_count - 1];
        Ok(last.iter().sum::<f64>() / last.len() as f64)
    }

    /// Mean over k of the mean of row k: fidelity integrated over the stream.
    pub fn imf(&self) -> Result<f64> {
        if !self.is_complete() {
            return Err(Error::invalid("imf needs the full lower triangle"));
        }
        let total: f64 = self
            .rows
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .sum();
        Ok(total / self.task_count as f64)
    }

    /// `k,i,fd` rows, 1-based indices, canonical order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,i,fd\n");
        for (k, row) in self.rows.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{},{v}", k + 1, i + 1);
            }
        }
        out
    }

    /// Parse a canonical `k,i,fd` file. The parsed matrix spans exactly the
    /// rows present (a partial on-disk triangle reads back as complete).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next().map(str::trim) {
            Some("k,i,fd") => {}
            other => return Err(Error::Csv(format!("expected header k,i,fd, got {other:?}"))),
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Csv(format!("line {}: expected 3 fields", ln + 2)));
            }
            let k: usize = parts[0]
                .parse()
                .map_err(|_| Error::Csv(format!("line {}: bad k {:?}", ln + 2, parts[0])))?;
            let i: usize = parts[1]
                .parse()
                .map_err(|_| Error::Csv(format!("line {}: bad i {:?}", ln + 2, parts[1])))?;
            let fd: f64 = parts[2]
                .parse()
                .map_err(|_| Error::Csv(format!("line {}: bad fd {:?}", ln + 2, parts[2])))?;
            if !fd.is_finite() || fd < 0.0 {
                return Err(Error::Csv(format!("line {}: fd must be finite >= 0", ln + 2)));
            }
            let expect_new_row = i == 1;
            if expect_new_row {
                if k != rows.len() + 1 {
                    return Err(Error::Csv(format!("line {}: row {k} out of order", ln + 2)));
                }
                rows.push(vec![fd]);
            } else {
                if k != rows.len() {
                    return Err(Error::Csv(format!("line {}: entry for row {k} out of order", ln + 2)));
                }
                let row = rows
                    .last_mut()
                    .ok_or_else(|| Error::Csv(format!("line {}: entry before row start", ln + 2)))?;
                if i != row.len() + 1 || i > k {
                    return Err(Error::Csv(format!("line {}: index ({k},{i}) out of order", ln + 2)));
                }
                row.push(fd);
            }
        }
        if rows.is_empty() {
            return Err(Error::Csv("no data rows".into()));
        }
        let last = rows.len();
        if rows.last().map(|r| r.len()) != Some(last) {
            return Err(Error::Csv(format!("row {last} is incomplete")));
        }
        Ok(FidelityMatrix { task_count: rows.len(), rows })
    }
}
