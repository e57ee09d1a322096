//! Memory-reinforcing weight updates.
//!
//! After the first step the update for a parameter is
//!
//! ```text
//! Δθ*   = Vtᵀ · (m ⊙ (Vt · (−α ∇θ)))          (channel-projected params only)
//! θ'    = θ + Δθ* + retention
//! ```
//!
//! where `Vt` is the channel eigenspace captured from earlier objects and
//! `m_r = clamp(κ ln r, 0, 1)` suppresses updates along the dominant old
//! channel directions. Retention either pulls the weights back toward the
//! previous-step snapshot (`pull`) or adds `β θ_old` literally (`literal`).

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetainMode {
    /// `β (θ_old − θ)`
    Pull,
    /// `β θ_old`, exactly as the additive copy rule reads.
    Literal,
}

impl FromStr for RetainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pull" => Ok(RetainMode::Pull),
            "literal" => Ok(RetainMode::Literal),
            other => Err(Error::config(
                "optim.retain_mode",
                format!("expected `pull` or `literal`, got `{other}`"),
            )),
        }
    }
}

impl fmt::Display for RetainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetainMode::Pull => "pull",
            RetainMode::Literal => "literal",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub lr: f64,
    pub beta: f64,
    pub kappa: f64,
    pub retain_mode: RetainMode,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            beta: 0.2,
            kappa: 0.2,
            retain_mode: RetainMode::Pull,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optim.lr", "learning rate must be positive"));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::config(
                "optim.kappa",
                "suppression gain must be positive",
            ));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(
                "optim.beta",
                "retention must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Channel eigenspace and weight snapshot carried from earlier steps.
#[derive(Clone, Debug)]
pub struct SemanticBasis {
    /// `C x C`, rows ordered by descending singular value.
    pub vt_old: Array2<f64>,
    /// Length `C`, zero-padded when fewer rows than channels were seen.
    pub s_old: Vec<f64>,
    pub theta_old: Vec<Array2<f32>>,
}

impl SemanticBasis {
    pub fn channels(&self) -> usize {
        self.vt_old.nrows()
    }
}

/// `θ − α ∇θ`
pub fn vanilla_step(theta: &Array2<f64>, grad: &Array2<f64>, lr: f64) -> Array2<f64> {
    Zip::from(theta).and(grad).map_collect(|&t, &g| t - lr * g)
}

/// `m_r = clamp(κ ln r, 0, 1)` for ranks `r = 1..=channels`.
pub fn suppression_multipliers(kappa: f64, channels: usize) -> Vec<f64> {
    (1..=channels)
        .map(|r| (kappa * (r as f64).ln()).clamp(0.0, 1.0))
        .collect()
}

/// `Vt · Δθ`
pub fn project_update(delta: &Array2<f64>, vt: &Array2<f64>) -> Result<Array2<f64>> {
    if delta.nrows() != vt.ncols() {
        return Err(Error::Contract(format!(
            "update has {} rows but the basis spans {} channels",
            delta.nrows(),
            vt.ncols()
        )));
    }
    Ok(vt.dot(delta))
}

/// Basis plus per-rank multipliers, ready to filter updates.
#[derive(Clone, Debug)]
pub struct ChannelProjector {
    pub vt: Array2<f64>,
    pub multipliers: Vec<f64>,
}

impl ChannelProjector {
    pub fn new(vt: Array2<f64>, multipliers: Vec<f64>) -> Result<Self> {
        if vt.nrows() != vt.ncols() || multipliers.len() != vt.nrows() {
            return Err(Error::Contract(
                "projector needs a square basis and one multiplier per channel".into(),
            ));
        }
        Ok(Self { vt, multipliers })
    }

    pub fn from_basis(basis: &SemanticBasis, kappa: f64) -> Self {
        let c = basis.channels();
        Self {
            vt: basis.vt_old.clone(),
            multipliers: suppression_multipliers(kappa, c),
        }
    }

    /// `Vtᵀ · (m ⊙ (Vt · Δθ))`
    pub fn filter(&self, delta: &Array2<f64>) -> Result<Array2<f64>> {
        let mut coords = project_update(delta, &self.vt)?;
        for (mut row, &m) in coords.rows_mut().into_iter().zip(&self.multipliers) {
            row.mapv_inplace(|x| x * m);
        }
        Ok(self.vt.t().dot(&coords))
    }
}

/// One reinforced update for a single parameter tensor.
///
/// `projector` is `None` for parameters excluded from channel projection; they
/// still receive the retention term.
pub fn reinforced_step(
    theta: &Array2<f64>,
    grad: &Array2<f64>,
    theta_old: &Array2<f64>,
    projector: Option<&ChannelProjector>,
    cfg: &UpdateConfig,
) -> Result<Array2<f64>> {
    if theta.dim() != grad.dim() || theta.dim() != theta_old.dim() {
        return Err(Error::Contract(
            "parameter, gradient and snapshot shapes differ".into(),
        ));
    }
    let raw = grad.mapv(|g| -cfg.lr * g);
    let delta = match projector {
        Some(p) => p.filter(&raw)?,
        None => raw,
    };
    let beta = cfg.beta;
    let out = match cfg.retain_mode {
        RetainMode::Pull => Zip::from(theta)
            .and(&delta)
            .and(theta_old)
            .map_collect(|&t, &d, &o| t + d + beta * (o - t)),
        RetainMode::Literal => Zip::from(theta)
            .and(&delta)
            .and(theta_old)
            .map_collect(|&t, &d, &o| t + d + beta * o),
    };
    Ok(out)
}

/// Build or merge the channel basis from aggregated latent rows (`rows x C`).
///
/// Without a previous basis this is the SVD of the stacked rows. With one, the
/// SVD of `[diag(S_old) Vt_old ; rows]`, so earlier objects keep their weight
/// in the basis without their data.
pub fn capture_basis(
    rows: &[Array2<f64>],
    channels: usize,
    prev: Option<&SemanticBasis>,
    theta: Vec<Array2<f32>>,
) -> Result<SemanticBasis> {
    let new_rows: usize = rows.iter().map(|r| r.nrows()).sum();
    let carried = prev.map_or(0, |p| p.channels());
    let mut stacked = Array2::<f64>::zeros((carried + new_rows, channels));
    if let Some(p) = prev {
        if p.channels() != channels {
            return Err(Error::Contract(
                "previous basis has a different channel count".into(),
            ));
        }
        for (r, (&sv, vrow)) in p.s_old.iter().zip(p.vt_old.rows()).enumerate() {
            stacked.row_mut(r).assign(&vrow.mapv(|x| x * sv));
        }
    }
    let mut at = carried;
    for block in rows {
        if block.ncols() != channels {
            return Err(Error::Contract(format!(
                "latent rows have {} channels, expected {channels}",
                block.ncols()
            )));
        }
        stacked
            .slice_mut(s![at..at + block.nrows(), ..])
            .assign(block);
        at += block.nrows();
    }
    let svd = linalg::svd_full(&stacked)?;
    let mut s_old = svd.s;
    s_old.resize(channels, 0.0);
    Ok(SemanticBasis {
        vt_old: svd.vt,
        s_old,
        theta_old: theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn vanilla_cases() {
        let t = array![[1.0, 2.0]];
        assert_eq!(vanilla_step(&t, &Array2::zeros((1, 2)), 0.1), t);
        assert!((vanilla_step(&array![[1.0]], &array![[2.0]], 0.1)[[0, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn multiplier_cases() {
        for kappa in [0.01, 0.5, 3.0] {
            let m = suppression_multipliers(kappa, 8);
            assert_eq!(m[0], 0.0);
            assert!(m.windows(2).all(|w| w[0] <= w[1]));
        }
        assert_eq!(suppression_multipliers(1.0, 3)[2], 1.0);
        assert!((suppression_multipliers(0.5, 4)[3] - 0.5 * 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn projection_cases() {
        let d = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(project_update(&d, &Array2::eye(2)).unwrap(), d);
        // 90 degree rotation: rows swap up to sign.
        let rot = array![[0.0, -1.0], [1.0, 0.0]];
        assert_eq!(
            project_update(&d, &rot).unwrap(),
            array![[-3.0, -4.0], [1.0, 2.0]]
        );
        assert!(project_update(&d, &Array2::eye(3)).is_err());
        let p = ChannelProjector::new(rot, vec![1.0, 1.0]).unwrap();
        let back = p.filter(&d).unwrap();
        assert!((&back - &d).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn hand_computed_blocked_channel() {
        // Rank 1 is channel 2, so the basis rows are swapped.
        let vt = array![[0.0, 1.0], [1.0, 0.0]];
        let p = ChannelProjector::new(vt, vec![0.0, 1.0]).unwrap();
        let cfg = UpdateConfig {
            lr: 1.0,
            beta: 0.0,
            ..Default::default()
        };
        let theta = Array2::zeros((2, 2));
        let grad = array![[1.0, 1.0], [1.0, 1.0]];
        let out = reinforced_step(&theta, &grad, &theta, Some(&p), &cfg).unwrap();
        assert_eq!(out, array![[-1.0, -1.0], [0.0, 0.0]]);
    }

    #[test]
    fn blocked_rank_one_channel_with_identity() {
        let p = ChannelProjector::new(Array2::eye(3), suppression_multipliers(10.0, 3)).unwrap();
        let cfg = UpdateConfig {
            lr: 0.5,
            beta: 0.0,
            ..Default::default()
        };
        let theta = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let grad = array![[5.0, -5.0], [0.0, 0.0], [0.0, 0.0]];
        let out = reinforced_step(&theta, &grad, &theta, Some(&p), &cfg).unwrap();
        assert_eq!(out, theta);
    }

    #[test]
    fn pull_fixed_point_and_literal_mode() {
        let theta = array![[0.3, -0.2]];
        let cfg = UpdateConfig::default();
        let out = reinforced_step(&theta, &Array2::zeros((1, 2)), &theta, None, &cfg).unwrap();
        assert_eq!(out, theta);
        let lit = UpdateConfig {
            retain_mode: RetainMode::Literal,
            beta: 0.5,
            ..cfg
        };
        let out = reinforced_step(&theta, &Array2::zeros((1, 2)), &theta, None, &lit).unwrap();
        assert!((&out - &array![[0.45, -0.3]])
            .iter()
            .all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn capture_rank_one_stream() {
        let rows = vec![
            array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            array![[1.0, 0.0, 0.0]],
        ];
        let b = capture_basis(&rows, 3, None, vec![]).unwrap();
        assert!((b.vt_old[[0, 0]].abs() - 1.0).abs() < 1e-12);
        assert_eq!(b.s_old.iter().filter(|&&s| s > 0.0).count(), 1);
        assert_eq!(b.s_old.len(), 3);
    }

    #[test]
    fn capture_merge_with_empty_memory_matches_fresh() {
        let rows = vec![array![[1.0, 2.0, 0.5], [0.0, 1.0, -1.0], [3.0, 0.0, 1.0]]];
        let fresh = capture_basis(&rows, 3, None, vec![]).unwrap();
        let empty = SemanticBasis {
            vt_old: Array2::eye(3),
            s_old: vec![0.0; 3],
            theta_old: vec![],
        };
        let merged = capture_basis(&rows, 3, Some(&empty), vec![]).unwrap();
        for (a, b) in fresh.s_old.iter().zip(&merged.s_old) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn capture_merges_orthogonal_streams() {
        let first = vec![array![[2.0, 0.0, 0.0], [2.0, 0.0, 0.0]]];
        let second = vec![array![[0.0, 1.0, 0.0]]];
        let b1 = capture_basis(&first, 3, None, vec![]).unwrap();
        let b2 = capture_basis(&second, 3, Some(&b1), vec![]).unwrap();
        // Oracle: SVD of the full concatenation.
        let all = array![[2.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let oracle = linalg::svd_full(&all).unwrap();
        for (a, b) in b2.s_old.iter().zip(&oracle.s) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(b2.s_old.iter().filter(|&&s| s > 1e-12).count(), 2);
        // The top two right singular vectors span e1 and e2.
        for r in 0..2 {
            assert!(b2.vt_old[[r, 2]].abs() < 1e-12);
        }
    }
}
