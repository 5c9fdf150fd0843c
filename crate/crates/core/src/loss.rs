//! Captioning objective `L_tot = L_NLL + λ·L_aDSA`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

pub const DEFAULT_LAMBDA: f64 = 0.70602;

/// Constant dividing the summed attention penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdsaNormalizer {
    /// Number of attention locations (frames).
    NumFrames,
    /// Width of each frame feature vector.
    FeatureDim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub adsa_normalizer: AdsaNormalizer,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            adsa_normalizer: AdsaNormalizer::NumFrames,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("loss.lambda", "must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// `−Σ_t ln p_t[y_t]` for one caption. `ln` clamps its argument at 1e-12;
/// clamped steps are counted by [`Graph::clamp_events`].
pub fn nll_loss<T: Scalar>(g: &mut Graph<T>, probs: &[Var], targets: &[usize]) -> Result<Var> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::contract(format!(
            "nll_loss over {} steps but {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let before = g.clamp_events();
    let mut total: Option<Var> = None;
    for (&p, &y) in probs.iter().zip(targets) {
        let vocab = g.value(p).numel();
        if y >= vocab {
            return Err(Error::Vocab { id: y, size: vocab });
        }
        let picked = g.pick(p, &[y])?;
        let lp = g.ln(picked);
        total = Some(match total {
            Some(t) => g.add(t, lp)?,
            None => lp,
        });
    }
    if g.clamp_events() > before {
        log::warn!("nll_loss: {} probabilities clamped at 1e-12", g.clamp_events() - before);
    }
    let total = total.expect("at least one step");
    Ok(g.scale(total, -1.0))
}

/// `(1/K) Σ_k (1 − Σ_t α_k^t)²` over the `C×n` attention matrix given as
/// one `[1×n]` row per decoding step. `K` is `n` under
/// [`AdsaNormalizer::NumFrames`] or `feature_dim` otherwise.
pub fn adsa_loss<T: Scalar>(
    g: &mut Graph<T>,
    alphas: &[Var],
    normalizer: AdsaNormalizer,
    feature_dim: usize,
) -> Result<Var> {
    let (&first, rest) = alphas
        .split_first()
        .ok_or_else(|| Error::contract("adsa_loss needs at least one attention row"))?;
    let mut colsum = first;
    for &a in rest {
        colsum = g.add(colsum, a)?;
    }
    let locations = g.value(colsum).numel();
    let deficit = g.scale(colsum, -1.0);
    let deficit = g.offset(deficit, 1.0);
    let sq = g.mul(deficit, deficit)?;
    let total = g.sum(sq);
    let k = match normalizer {
        AdsaNormalizer::NumFrames => locations,
        AdsaNormalizer::FeatureDim => feature_dim,
    };
    Ok(g.scale(total, 1.0 / k.max(1) as f64))
}

/// `nll + λ·adsa`. Non-finite components are rejected by name.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, nll: Var, adsa: Var, cfg: &LossConfig) -> Result<Var> {
    for (name, v) in [("nll", nll), ("adsa", adsa)] {
        if !g.value(v).all_finite() {
            return Err(Error::Numeric(format!("{name} loss is not finite")));
        }
    }
    let weighted = g.scale(adsa, cfg.lambda);
    g.add(nll, weighted)
}

/// Value-only aDSA over explicit attention rows.
pub fn adsa_value(alphas: &[Vec<f64>], normalizer: AdsaNormalizer, feature_dim: usize) -> f64 {
    let n = alphas.first().map_or(0, Vec::len);
    let mut colsum = vec![0.0; n];
    for row in alphas {
        for (c, a) in colsum.iter_mut().zip(row) {
            *c += a;
        }
    }
    let total: f64 = colsum.iter().map(|c| (1.0 - c).powi(2)).sum();
    let k = match normalizer {
        AdsaNormalizer::NumFrames => n,
        AdsaNormalizer::FeatureDim => feature_dim,
    };
    total / k.max(1) as f64
}
