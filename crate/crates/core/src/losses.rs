//! Training objectives: L1 reconstruction, cross-entropy classification, and
//! the semantic compression loss on the spatially aggregated latent.

use ndarray::{Array2, Array4, ArrayBase, Axis, Data, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, FullSvd};

/// Minimum gap between consecutive tail singular values for the compression
/// gradient to be used; below it the batch's compression term is skipped.
pub const SCL_GAP_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Fraction of the spectrum kept unpenalised; the tail starts at
    /// `floor(k * ratio) + 1`.
    pub scl_keep_ratio: f64,
    /// Explicit 1-based tail start; overrides the ratio when set.
    pub scl_tail_start: Option<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            lambda1: 0.5,
            lambda2: 0.01,
            scl_keep_ratio: 0.25,
            scl_tail_start: None,
        }
    }
}

impl LossWeights {
    /// 1-based index of the first penalised singular value for a spectrum of length `k`.
    pub fn tail_start(&self, k: usize) -> Result<usize> {
        let t = match self.scl_tail_start {
            Some(t) => t,
            None => (k as f64 * self.scl_keep_ratio).floor() as usize + 1,
        };
        if t < 1 || t > k {
            return Err(Error::config(
                "loss.scl_tail_start",
                format!("tail start {t} outside [1, {k}]"),
            ));
        }
        Ok(t)
    }
}

pub fn l1_reconstruction<S, D>(x_hat: &ArrayBase<S, D>, x_target: &ArrayBase<S, D>) -> Result<f64>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    if x_hat.shape() != x_target.shape() {
        return Err(Error::Contract(format!(
            "reconstruction shape {:?} != target shape {:?}",
            x_hat.shape(),
            x_target.shape()
        )));
    }
    let total = Zip::from(x_hat)
        .and(x_target)
        .fold(0.0, |acc, &a, &b| acc + (a - b).abs());
    Ok(total / x_hat.len().max(1) as f64)
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Contract(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    Ok(lse - logits[label])
}

/// Mean over the spatial axes: `B x C x H x W -> B x C`.
pub fn spatial_aggregate(latent: &Array4<f64>) -> Result<Array2<f64>> {
    let (_, _, h, w) = latent.dim();
    if h * w == 0 {
        return Err(Error::Contract("latent has an empty spatial grid".into()));
    }
    Ok(latent
        .mean_axis(Axis(3))
        .and_then(|m| m.mean_axis(Axis(2)))
        .expect("non-empty spatial axes"))
}

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `B x B`
    pub u: Array2<f64>,
    /// Descending, length `min(B, C)`.
    pub s: Vec<f64>,
    /// `C x C`
    pub vt: Array2<f64>,
}

impl From<FullSvd> for SvdResult {
    fn from(f: FullSvd) -> Self {
        Self {
            u: f.u,
            s: f.s,
            vt: f.vt,
        }
    }
}

pub fn svd_decompose(m_hat: &Array2<f64>) -> Result<SvdResult> {
    Ok(linalg::svd_full(m_hat)?.into())
}

/// Sum of singular values from 1-based index `t` to `k`.
pub fn semantic_compression_loss(s: &[f64], t: usize) -> Result<f64> {
    let k = s.len();
    if t < 1 || t > k {
        return Err(Error::config(
            "loss.scl_tail_start",
            format!("tail start {t} outside [1, {k}]"),
        ));
    }
    Ok(s[t - 1..].iter().sum())
}

/// Whether the tail `σ_{t-1}, σ_t, …, σ_k` is separated well enough for the
/// compression gradient to be unambiguous.
pub fn tail_is_separated(s: &[f64], t: usize) -> bool {
    let lo = t.saturating_sub(2);
    s[lo..]
        .windows(2)
        .all(|w| (w[0] - w[1]).abs() >= SCL_GAP_EPS)
}

/// Gradient of the tail sum with respect to the aggregate, `Σ_{i≥t} u_i v_iᵀ`.
/// Returns `None` when the tail spectrum is too close to degenerate.
pub fn scl_gradient(svd: &SvdResult, t: usize) -> Option<Array2<f64>> {
    if !tail_is_separated(&svd.s, t) {
        return None;
    }
    let (b, c) = (svd.u.nrows(), svd.vt.ncols());
    let mut g = Array2::<f64>::zeros((b, c));
    for i in (t - 1)..svd.s.len() {
        if svd.s[i] == 0.0 {
            continue;
        }
        let u = svd.u.column(i);
        let v = svd.vt.row(i);
        for r in 0..b {
            g.row_mut(r).scaled_add(u[r], &v);
        }
    }
    Some(g)
}

/// Compression term for one batch of aggregates: value and gradient.
#[derive(Clone, Debug)]
pub struct SclTerm {
    pub value: f64,
    /// `None` when the term was skipped for a near-degenerate tail.
    pub grad: Option<Array2<f64>>,
    pub tail_start: usize,
}

pub fn scl_term(aggregate: &Array2<f64>, w: &LossWeights) -> Result<SclTerm> {
    let svd = svd_decompose(aggregate)?;
    let t = w.tail_start(svd.s.len())?;
    let value = semantic_compression_loss(&svd.s, t)?;
    Ok(SclTerm {
        value,
        grad: scl_gradient(&svd, t),
        tail_start: t,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub ce: f64,
    pub scl: f64,
    pub scl_skipped: bool,
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    pub grad_x_hat: Array4<f64>,
    pub grad_logits: Array2<f64>,
    pub grad_latent: Array4<f64>,
}

/// Weighted objective over a batch.
///
/// `x_hat`/`x_target` are `B x F x H x W`, `logits` is `B x N`, `latent` is
/// `B x C x H' x W'`. L1 is the mean over all elements, cross-entropy the mean
/// over the batch.
pub fn total_loss(
    x_hat: &Array4<f64>,
    x_target: &Array4<f64>,
    logits: &Array2<f64>,
    labels: &[usize],
    latent: &Array4<f64>,
    w: &LossWeights,
) -> Result<TotalLoss> {
    let l1 = l1_reconstruction(x_hat, x_target)?;
    if logits.nrows() != labels.len() {
        return Err(Error::Contract("one label per logits row required".into()));
    }
    let b = labels.len().max(1) as f64;
    let mut ce = 0.0;
    let mut grad_logits = Array2::<f64>::zeros(logits.dim());
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r).to_vec();
        ce += cross_entropy(&row, label)?;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        for (j, &x) in row.iter().enumerate() {
            let p = (x - max).exp() / z;
            grad_logits[[r, j]] = w.lambda1 * (p - if j == label { 1.0 } else { 0.0 }) / b;
        }
    }
    ce /= b;

    let n = x_hat.len().max(1) as f64;
    let grad_x_hat = Zip::from(x_hat)
        .and(x_target)
        .map_collect(|&a, &t| w.lambda0 * (a - t).signum() * f64::from(u8::from(a != t)) / n);

    let mut grad_latent = Array4::<f64>::zeros(latent.dim());
    let (mut scl, mut skipped) = (0.0, false);
    if w.lambda2 != 0.0 {
        let agg = spatial_aggregate(latent)?;
        let term = scl_term(&agg, w)?;
        scl = term.value;
        match term.grad {
            Some(g) => {
                let (_, _, h, wd) = latent.dim();
                let area = (h * wd) as f64;
                for ((bi, ci, _, _), v) in grad_latent.indexed_iter_mut() {
                    *v = w.lambda2 * g[[bi, ci]] / area;
                }
            }
            None => skipped = true,
        }
    }

    let total = w.lambda0 * l1 + w.lambda1 * ce + w.lambda2 * scl;
    Ok(TotalLoss {
        breakdown: LossBreakdown {
            total,
            l1,
            ce,
            scl,
            scl_skipped: skipped,
        },
        grad_x_hat,
        grad_logits,
        grad_latent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};

    #[test]
    fn l1_cases() {
        let a = array![[0.1, 0.2], [0.3, 0.4]];
        assert_eq!(l1_reconstruction(&a, &a).unwrap(), 0.0);
        let b = a.mapv(|x| x + 0.5);
        assert!((l1_reconstruction(&b, &a).unwrap() - 0.5).abs() < 1e-12);
        assert!(l1_reconstruction(&a, &array![[1.0]]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let ce = cross_entropy(&[0.0; 4], 1).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        let ce = cross_entropy(&[20.0, 0.0, 0.0, 0.0], 0).unwrap();
        assert!((0.0..1e-6).contains(&ce));
        // log-sum-exp oracle
        let oracle = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 1.0;
        assert!((cross_entropy(&[1.0, 2.0, 3.0], 0).unwrap() - oracle).abs() < 1e-12);
        assert!(cross_entropy(&[1.0], 1).is_err());
    }

    #[test]
    fn aggregate_cases() {
        let c = Array4::from_elem((2, 3, 4, 5), 0.7);
        assert!(spatial_aggregate(&c)
            .unwrap()
            .iter()
            .all(|&x| (x - 0.7).abs() < 1e-12));
        let one = Array4::from_shape_vec((1, 2, 1, 1), vec![3.0, -1.0]).unwrap();
        assert_eq!(spatial_aggregate(&one).unwrap(), array![[3.0, -1.0]]);
        let hand = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        assert_eq!(spatial_aggregate(&hand).unwrap(), array![[2.75]]);
    }

    #[test]
    fn svd_cases() {
        assert!(svd_decompose(&Array2::zeros((3, 4)))
            .unwrap()
            .s
            .iter()
            .all(|&x| x == 0.0));
        let id = svd_decompose(&Array2::eye(3)).unwrap();
        for s in &id.s {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let r = svd_decompose(&array![[3.0, 0.0], [4.0, 0.0]]).unwrap();
        assert!((r.s[0] - 5.0).abs() < 1e-12 && r.s[1].abs() < 1e-12);
        assert!(matches!(
            svd_decompose(&array![[f64::INFINITY]]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn scl_cases() {
        assert_eq!(semantic_compression_loss(&[1.0, 1.0, 1.0], 2).unwrap(), 2.0);
        assert_eq!(semantic_compression_loss(&[3.0, 2.0, 0.5], 1).unwrap(), 5.5);
        assert_eq!(semantic_compression_loss(&[5.0, 0.0], 2).unwrap(), 0.0);
        assert!(semantic_compression_loss(&[1.0], 0).is_err());
        assert!(semantic_compression_loss(&[1.0], 2).is_err());
    }

    #[test]
    fn default_tail_keeps_top_quarter() {
        let w = LossWeights::default();
        assert_eq!(w.tail_start(8).unwrap(), 3);
        assert_eq!(w.tail_start(1).unwrap(), 1);
    }

    #[test]
    fn degenerate_tail_is_skipped() {
        let w = LossWeights {
            scl_tail_start: Some(2),
            ..Default::default()
        };
        let term = scl_term(&Array2::eye(3), &w).unwrap();
        assert_eq!(term.value, 2.0);
        assert!(term.grad.is_none());
    }

    #[test]
    fn weight_zeroing_reduces_to_l1() {
        let x = Array4::from_shape_fn((2, 3, 2, 2), |(a, b, c, d)| {
            (a + 2 * b + c * d) as f64 * 0.1
        });
        let y = x.mapv(|v| v * 0.5 + 0.05);
        let logits = array![[1.0, 0.0], [0.0, 1.0]];
        let lat = Array4::from_shape_fn((2, 4, 2, 2), |(a, b, c, d)| {
            ((a * 7 + b * 3 + c + d) % 5) as f64
        });
        let w = LossWeights {
            lambda0: 2.0,
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        };
        let t = total_loss(&x, &y, &logits, &[0, 1], &lat, &w).unwrap();
        assert!((t.breakdown.total - 2.0 * l1_reconstruction(&x, &y).unwrap()).abs() < 1e-12);
        let zero = total_loss(
            &x,
            &x,
            &array![[50.0, -50.0]],
            &[0],
            &Array4::zeros((1, 4, 2, 2)),
            &LossWeights::default(),
        )
        .unwrap();
        assert!(zero.breakdown.total < 1e-12);
    }
}
