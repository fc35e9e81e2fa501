//! Training objectives in double precision with closed-form gradients.
//!
//! The contrastive terms take unit-norm embeddings, so similarity is the plain
//! inner product; gradients are with respect to those normalized rows and to
//! `log τ`.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let rows = t.dim(0);
        let cols = if rows == 0 { 0 } else { t.len() / rows };
        Self::new(rows, cols, t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.rows, self.cols], self.data.iter().map(|&v| v as f32).collect())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub const MIN_TAU: f64 = 1e-3;
pub const MAX_TAU: f64 = 100.0;

/// Learnable temperature stored as `log τ` so that `τ > 0` always.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub log_tau: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Self::from_tau(0.07)
    }
}

impl Temperature {
    pub fn from_tau(tau: f64) -> Self {
        Self { log_tau: tau.ln() }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    /// Clamp `τ` into `[MIN_TAU, MAX_TAU]`.
    pub fn clamp_log_tau(log_tau: f64) -> f64 {
        log_tau.clamp(MIN_TAU.ln(), MAX_TAU.ln())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cm: f64,
    pub lambda_um: f64,
    pub lambda_fm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cm: 0.167,
            lambda_um: 0.5,
            lambda_fm: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cm", self.lambda_cm),
            ("lambda_um", self.lambda_um),
            ("lambda_fm", self.lambda_fm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Every objective of one step plus their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub itc: f64,
    pub itc_pert_image: f64,
    pub itc_pert_text: f64,
    pub i2i: f64,
    pub mlm: f64,
    pub total: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 6] = ["itc", "itc_pert_image", "itc_pert_text", "i2i", "mlm", "total"];

    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("itc", self.itc),
            ("itc_pert_image", self.itc_pert_image),
            ("itc_pert_text", self.itc_pert_text),
            ("i2i", self.i2i),
            ("mlm", self.mlm),
        ]
    }
}

/// Value and gradients of a two-view contrastive objective.
#[derive(Clone, Debug)]
pub struct ContrastiveGrad {
    pub value: f64,
    pub d_first: Mat,
    pub d_second: Mat,
    pub d_log_tau: f64,
}

fn check_pair(a: &Mat, b: &Mat) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::Input(format!(
            "embedding extents differ: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if a.rows == 0 {
        return Err(Error::Input("empty embedding batch".into()));
    }
    for (which, m) in [("first", a), ("second", b)] {
        for i in 0..m.rows {
            let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !n.is_finite() || (n - 1.0).abs() > 1e-3 {
                return Err(Error::Input(format!("{which} embedding row {i} has norm {n}, expected 1")));
            }
        }
    }
    Ok(())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric NT-Xent between paired rows of `a` and `b`: the mean of the
/// a→b and b→a cross-entropies, negatives drawn only from the opposite side.
fn symmetric_ntxent(a: &Mat, b: &Mat, log_tau: f64) -> Result<ContrastiveGrad> {
    check_pair(a, b)?;
    if !log_tau.is_finite() {
        return Err(Error::Input(format!("log_tau = {log_tau}")));
    }
    let (n, d) = (a.rows, a.cols);
    let inv_tau = (-log_tau).exp();
    let mut z = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let s: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            z[i * n + j] = s * inv_tau;
        }
    }
    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp((0..n).map(|j| z[i * n + j]))).collect();
    let col_lse: Vec<f64> = (0..n).map(|j| log_sum_exp((0..n).map(|i| z[i * n + j]))).collect();
    let scale = 1.0 / (2.0 * n as f64);
    let mut value = 0.0;
    for i in 0..n {
        value += (row_lse[i] - z[i * n + i]) + (col_lse[i] - z[i * n + i]);
    }
    value *= scale;
    // dL/dz_ij = (softmax_row - δ + softmax_col - δ) / 2n
    let mut gz = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let p = (z[i * n + j] - row_lse[i]).exp();
            let q = (z[i * n + j] - col_lse[j]).exp();
            let delta = if i == j { 2.0 } else { 0.0 };
            gz[i * n + j] = scale * (p + q - delta);
        }
    }
    let d_log_tau = -gz.iter().zip(&z).map(|(g, zz)| g * zz).sum::<f64>();
    let mut da = Mat::zeros(n, d);
    let mut db = Mat::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            let g = gz[i * n + j] * inv_tau;
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                da.data[i * d + k] += g * b.data[j * d + k];
                db.data[j * d + k] += g * a.data[i * d + k];
            }
        }
    }
    Ok(ContrastiveGrad {
        value,
        d_first: da,
        d_second: db,
        d_log_tau,
    })
}

/// Image–text contrastive loss. Pass perturbed image (or text) embeddings to
/// obtain the feature-perturbed variants.
pub fn itc_loss(image: &Mat, text: &Mat, log_tau: f64) -> Result<ContrastiveGrad> {
    symmetric_ntxent(image, text, log_tau)
}

/// Image–image contrastive loss between two augmented views. The denominator
/// of each term runs over the `B` rows of the opposite view only.
pub fn ntxent_i2i(view_a: &Mat, view_b: &Mat, log_tau: f64) -> Result<ContrastiveGrad> {
    symmetric_ntxent(view_a, view_b, log_tau)
}

/// Value and logit gradient of a masked cross-entropy.
#[derive(Clone, Debug)]
pub struct CrossEntropyGrad {
    pub value: f64,
    pub d_logits: Vec<f64>,
}

/// Mean softmax cross-entropy over the rows selected by `include`.
///
/// `logits` is `rows × classes`; rows with `include[r] == false` contribute
/// neither value nor gradient.
pub fn masked_cross_entropy(
    logits: &[f64],
    classes: usize,
    targets: &[usize],
    include: &[bool],
) -> Result<CrossEntropyGrad> {
    let rows = targets.len();
    if classes == 0 || logits.len() != rows * classes || include.len() != rows {
        return Err(Error::Input(format!(
            "cross-entropy extents: {} logits, {rows} targets, {} flags, {classes} classes",
            logits.len(),
            include.len()
        )));
    }
    let count = include.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Degenerate("no positions selected for the cross-entropy".into()));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    let w = 1.0 / count as f64;
    for r in 0..rows {
        if !include[r] {
            continue;
        }
        let t = targets[r];
        if t >= classes {
            return Err(Error::Input(format!("target {t} outside {classes} classes")));
        }
        let row = &logits[r * classes..(r + 1) * classes];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite logit in row {r}")));
        }
        let lse = log_sum_exp(row.iter().copied());
        value += lse - row[t];
        for c in 0..classes {
            let p = (row[c] - lse).exp();
            grad[r * classes + c] = w * (p - if c == t { 1.0 } else { 0.0 });
        }
    }
    Ok(CrossEntropyGrad {
        value: value * w,
        d_logits: grad,
    })
}

/// Masked-token prediction loss: `logits` is `B×L×V` flattened, `targets`
/// and `mask` are `B×L` flattened; only masked positions count.
pub fn mlm_loss(logits: &[f64], vocab: usize, targets: &[usize], mask: &[bool]) -> Result<CrossEntropyGrad> {
    if mask.len() != targets.len() {
        return Err(Error::Input("mask and targets differ in length".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Degenerate("batch has no masked positions".into()));
    }
    masked_cross_entropy(logits, vocab, targets, mask)
}

/// Weighted total; fails on the first non-finite component.
pub fn total_loss(report: &LossReport, weights: &LossWeights) -> Result<f64> {
    for (name, v) in report.components() {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name });
        }
    }
    Ok(weights.lambda_cm * (report.itc + report.itc_pert_image + report.itc_pert_text)
        + weights.lambda_um * report.i2i
        + weights.lambda_fm * report.mlm)
}
