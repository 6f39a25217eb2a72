//! Loss terms and their weighted combination.
//!
//! Every loss exposes a `*_with_grad` form returning the analytic gradient
//! with respect to its inputs; the autodiff tape uses these directly as fused
//! nodes.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{FrameImage, MaskSpec, Modality, Spectrogram};
use crate::error::{Error, Result};
use crate::patchwork::patchify_grid;

/// Unit-norm tolerance for embeddings entering a contrastive loss.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub grad_x: Array2<f64>,
    pub grad_y: Array2<f64>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `lse(values) - values[pos]`, accurate when the positive dominates.
fn nce_term(values: ndarray::ArrayView1<f64>, pos: usize) -> f64 {
    let p = values[pos];
    let m = values.iter().fold(0.0f64, |a, &v| a.max(v - p));
    if m == 0.0 {
        let rest: f64 = values
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != pos)
            .map(|(_, &v)| (v - p).exp())
            .sum();
        rest.ln_1p()
    } else {
        m + values.iter().map(|&v| (v - p - m).exp()).sum::<f64>().ln()
    }
}

fn check_batches(x: &Array2<f64>, y: &Array2<f64>, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature {tau} must be > 0")));
    }
    if x.dim() != y.dim() {
        return Err(Error::Dimension(format!(
            "contrastive batches have shapes {:?} and {:?}",
            x.dim(),
            y.dim()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::Parameter(format!(
            "contrastive loss needs at least 2 pairs for negatives, got {}",
            x.nrows()
        )));
    }
    Ok(())
}

pub fn check_unit_rows(batch: &Array2<f64>, what: &str) -> Result<()> {
    for (i, row) in batch.outer_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Validation(format!(
                "{what} row {i} has norm {n}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// Symmetric in-batch InfoNCE over rows of `x` and `y` (row i of each is a
/// positive pair), averaged over both retrieval directions. No unit-norm
/// check is applied here.
pub fn info_nce_with_grad(x: &Array2<f64>, y: &Array2<f64>, tau: f64) -> Result<ContrastiveGrad> {
    check_batches(x, y, tau)?;
    let b = x.nrows();
    let logits = x.dot(&y.t()) / tau;

    // dL/dlogits = 0.5/B * [(row_softmax - I) + (col_softmax - I)]
    let mut g = Array2::<f64>::zeros((b, b));
    let mut loss = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        loss += nce_term(row, i);
        for j in 0..b {
            g[[i, j]] += (logits[[i, j]] - lse).exp();
        }
    }
    for j in 0..b {
        let col = logits.column(j);
        let lse = log_sum_exp(col.iter().copied());
        loss += nce_term(col, j);
        for i in 0..b {
            g[[i, j]] += (logits[[i, j]] - lse).exp();
        }
    }
    for i in 0..b {
        g[[i, i]] -= 2.0;
    }
    let scale = 0.5 / b as f64;
    g *= scale;
    loss *= scale;

    let grad_x = g.dot(y) / tau;
    let grad_y = g.t().dot(x) / tau;
    Ok(ContrastiveGrad { loss, grad_x, grad_y })
}

/// InfoNCE between two aligned batches of unit-norm embeddings. Used for
/// both the audio-text and the visual-text terms.
pub fn info_nce(x: &Array2<f64>, y: &Array2<f64>, tau: f64) -> Result<f64> {
    check_batches(x, y, tau)?;
    check_unit_rows(x, "first batch")?;
    check_unit_rows(y, "second batch")?;
    Ok(info_nce_with_grad(x, y, tau)?.loss)
}

/// Audio-visual contrastive loss over aligned batches of unit-norm pooled
/// embeddings; negatives are the other pairs of the same batch.
pub fn contrastive_av(audio: &Array2<f64>, visual: &Array2<f64>, tau: f64) -> Result<f64> {
    check_batches(audio, visual, tau)?;
    check_unit_rows(audio, "audio batch")?;
    check_unit_rows(visual, "visual batch")?;
    Ok(info_nce_with_grad(audio, visual, tau)?.loss)
}

/// Mean over masked patches of the per-patch mean squared error. Returns the
/// value and the gradient with respect to `pred`. An empty Ω contributes 0.
pub fn masked_patch_mse(target: &Array2<f64>, pred: &Array2<f64>, mask: &MaskSpec) -> Result<(f64, Array2<f64>)> {
    if target.dim() != pred.dim() {
        return Err(Error::Dimension(format!(
            "reconstruction shape {:?} does not match target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if mask.n_total() != target.nrows() {
        return Err(Error::Dimension(format!(
            "mask covers {} patches, target has {}",
            mask.n_total(),
            target.nrows()
        )));
    }
    let mut grad = Array2::<f64>::zeros(pred.dim());
    let omega = mask.masked_indices();
    if omega.is_empty() {
        log::debug!("empty masked set: reconstruction term contributes 0");
        return Ok((0.0, grad));
    }
    let p = target.ncols() as f64;
    let denom = omega.len() as f64 * p;
    let mut total = 0.0;
    for &i in omega {
        for (k, (t, x)) in target.row(i).iter().zip(pred.row(i).iter()).enumerate() {
            let diff = x - t;
            total += diff * diff;
            grad[[i, k]] = 2.0 * diff / denom;
        }
    }
    Ok((total / denom, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchShapes {
    pub audio: (usize, usize),
    pub visual: (usize, usize),
}

impl Default for PatchShapes {
    fn default() -> Self {
        Self {
            audio: (16, 16),
            visual: (16, 16),
        }
    }
}

/// Masked reconstruction loss: visual plus audio masked-patch MSE, computed
/// in input space.
pub fn recon_loss(
    x_a: &Spectrogram,
    xhat_a: &Array2<f64>,
    omega_a: &MaskSpec,
    x_v: &FrameImage,
    xhat_v: &Array3<f64>,
    omega_v: &MaskSpec,
    patch_shapes: PatchShapes,
) -> Result<f64> {
    if x_a.values().dim() != xhat_a.dim() {
        return Err(Error::Dimension(format!(
            "audio reconstruction {:?} vs input {:?}",
            xhat_a.dim(),
            x_a.values().dim()
        )));
    }
    if x_v.values().dim() != xhat_v.dim() {
        return Err(Error::Dimension(format!(
            "visual reconstruction {:?} vs input {:?}",
            xhat_v.dim(),
            x_v.values().dim()
        )));
    }
    let ta = patchify_grid(x_a.values().view().insert_axis(Axis(2)), patch_shapes.audio, Modality::Audio)?;
    let pa = patchify_grid(xhat_a.view().insert_axis(Axis(2)), patch_shapes.audio, Modality::Audio)?;
    let tv = patchify_grid(x_v.values().view(), patch_shapes.visual, Modality::Visual)?;
    let pv = patchify_grid(xhat_v.view(), patch_shapes.visual, Modality::Visual)?;
    let (lv, _) = masked_patch_mse(tv.patches(), pv.patches(), omega_v)?;
    let (la, _) = masked_patch_mse(ta.patches(), pa.patches(), omega_a)?;
    Ok(lv + la)
}

/// The four unweighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub rec: f64,
    pub c: f64,
    pub a2t: f64,
    pub v2t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub c: f64,
    pub a2t: f64,
    pub v2t: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> LossParts {
        LossParts {
            rec: self.rec,
            c: self.c,
            a2t: self.a2t,
            v2t: self.v2t,
        }
    }

    /// Recompute the total from the stored parts and weights.
    pub fn recomputed_total(&self) -> f64 {
        self.rec + self.lambda1 * self.c + self.lambda2 * (self.a2t + self.v2t)
    }
}

/// `rec + lambda1 * c + lambda2 * (a2t + v2t)`. With `lambda2 = 0` this is
/// the plain audio-visual objective.
pub fn total_loss(parts: LossParts, lambda1: f64, lambda2: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("rec", parts.rec),
        ("c", parts.c),
        ("a2t", parts.a2t),
        ("v2t", parts.v2t),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: name.to_string(),
                detail: format!("{v}"),
            });
        }
    }
    for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Parameter(format!("{name} = {v} must be finite and >= 0")));
        }
    }
    if parts.rec < 0.0 {
        return Err(Error::Validation(format!("reconstruction loss {} < 0", parts.rec)));
    }
    let b = LossBreakdown {
        rec: parts.rec,
        c: parts.c,
        a2t: parts.a2t,
        v2t: parts.v2t,
        total: 0.0,
        lambda1,
        lambda2,
    };
    Ok(LossBreakdown {
        total: b.recomputed_total(),
        ..b
    })
}

/// Mean softmax cross-entropy over rows of `logits` with integer targets.
pub fn softmax_cross_entropy_with_grad(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    if targets.len() != b {
        return Err(Error::Validation(format!(
            "{} targets for {b} logit rows",
            targets.len()
        )));
    }
    if b == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    let mut grad = Array2::<f64>::zeros((b, c));
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::Validation(format!("class {t} outside 0..{c}")));
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[t];
        for j in 0..c {
            grad[[i, j]] = (row[j] - lse).exp();
        }
        grad[[i, t]] -= 1.0;
    }
    grad /= b as f64;
    Ok((loss / b as f64, grad))
}

/// Mean per-class binary cross-entropy with logits; `targets` is 0/1.
pub fn binary_cross_entropy_with_grad(logits: &Array2<f64>, targets: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != targets.dim() {
        return Err(Error::Validation(format!(
            "label matrix {:?} does not match logits {:?}",
            targets.dim(),
            logits.dim()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(logits.dim());
    for ((g, &x), &y) in grad.iter_mut().zip(logits.iter()).zip(targets.iter()) {
        loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        let sig = 1.0 / (1.0 + (-x).exp());
        *g = (sig - y) / n;
    }
    Ok((loss / n, grad))
}
