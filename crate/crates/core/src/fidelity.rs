//! Feature-statistics fidelity term.
//!
//! For every channel `j` of every compared stage `i` the global luminance-like
//! term `L` compares channel means and the structure term `S` compares the
//! variances with the cross-covariance. The score is
//!
//! ```text
//! F(x, y) = 1 - sum_ij ( alpha_ij * L_ij + beta_ij * S_ij )
//! ```
//!
//! with `alpha`, `beta` positive and summing to one jointly. The constraint is
//! kept exact by deriving both from a single softmax over `2 * sum_i N_i`
//! logits. Stage 0 (raw RGB) always takes part.

use ndarray::{Array1, ArrayD, IxDyn};

use crate::backbone::{stage_statistics, BackboneConfig, FeaturePyramid, PyramidVars};
use crate::error::{Error, Result};
use crate::tape::{Tape, Tensor, Var};

pub const DEFAULT_C1: f64 = 1e-6;
pub const DEFAULT_C2: f64 = 1e-6;

/// Learnable channel weights of the fidelity term.
#[derive(Clone, Debug, PartialEq)]
pub struct FidelityWeights {
    /// One logit per (stage, channel), stage 0 first.
    pub alpha_logits: Tensor,
    pub beta_logits: Tensor,
    pub c1: f64,
    pub c2: f64,
    /// Channel count of each compared stage, in order.
    pub stage_channels: Vec<usize>,
}

impl FidelityWeights {
    /// Zero logits, i.e. every weight equal to `1 / (2 * total_channels)`.
    pub fn uniform(stage_channels: Vec<usize>) -> Self {
        let n: usize = stage_channels.iter().sum();
        FidelityWeights {
            alpha_logits: ArrayD::zeros(IxDyn(&[n])),
            beta_logits: ArrayD::zeros(IxDyn(&[n])),
            c1: DEFAULT_C1,
            c2: DEFAULT_C2,
            stage_channels,
        }
    }

    /// Uniform weights laid out for stage 0 plus the configured fidelity stages.
    pub fn for_backbone(config: &BackboneConfig) -> Result<Self> {
        let channels = std::iter::once(0)
            .chain(config.fidelity_stage_ids.iter().copied())
            .map(|id| config.stage_channels(id))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::uniform(channels))
    }

    pub fn total_channels(&self) -> usize {
        self.stage_channels.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.total_channels();
        if self.alpha_logits.shape() != [n] || self.beta_logits.shape() != [n] {
            return Err(Error::Parameter(format!(
                "fidelity logits must both have length {n}, got {:?} and {:?}",
                self.alpha_logits.shape(),
                self.beta_logits.shape()
            )));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Parameter("c1 and c2 must be positive".into()));
        }
        if self.alpha_logits.iter().chain(self.beta_logits.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite fidelity logit".into()));
        }
        Ok(())
    }

    /// Softmax over all logits, split back into `(alpha, beta)`.
    pub fn effective_weights(&self) -> (Array1<f64>, Array1<f64>) {
        let n = self.total_channels();
        let all: Vec<f64> = self.alpha_logits.iter().chain(self.beta_logits.iter()).copied().collect();
        let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = all.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let alpha = Array1::from_iter(exps[..n].iter().map(|e| e / z));
        let beta = Array1::from_iter(exps[n..].iter().map(|e| e / z));
        (alpha, beta)
    }
}

/// `(2 mx my + c1) / (mx^2 + my^2 + c1)`
pub fn luminance_similarity(mean_x: f64, mean_y: f64, c1: f64) -> f64 {
    (2.0 * (mean_x * mean_y) + c1) / (mean_x * mean_x + mean_y * mean_y + c1)
}

/// `(2 sxy + c2) / (sx^2 + sy^2 + c2)`
pub fn structure_similarity(var_x: f64, var_y: f64, cov_xy: f64, c2: f64) -> f64 {
    (2.0 * cov_xy + c2) / (var_x + var_y + c2)
}

/// Fidelity between two pyramids; 0 for identical inputs, lower is better.
pub fn fidelity_score(px: &FeaturePyramid, py: &FeaturePyramid, weights: &FidelityWeights) -> Result<f64> {
    let sx = px.fidelity_stages()?;
    let sy = py.fidelity_stages()?;
    check_layout(&sx.iter().map(|s| s.channels()).collect::<Vec<_>>(), weights)?;
    if sx.len() != sy.len() {
        return Err(Error::dim("pyramids have different stage counts"));
    }
    let (alpha, beta) = weights.effective_weights();
    let mut offset = 0;
    let mut similarity = 0.0;
    for (a, b) in sx.iter().zip(&sy) {
        let st = stage_statistics(a, b)?;
        for j in 0..a.channels() {
            let l = luminance_similarity(st.mean_x[j], st.mean_y[j], weights.c1);
            let s = structure_similarity(st.var_x[j], st.var_y[j], st.cov_xy[j], weights.c2);
            similarity += alpha[offset + j] * l + beta[offset + j] * s;
        }
        offset += a.channels();
    }
    Ok(1.0 - similarity)
}

fn check_layout(channels: &[usize], weights: &FidelityWeights) -> Result<()> {
    if channels != weights.stage_channels.as_slice() {
        return Err(Error::dim(format!(
            "pyramid stage channels {channels:?} do not match fidelity weights {:?}",
            weights.stage_channels
        )));
    }
    weights.validate()
}

/// Records the fidelity term on a tape. `stage_ids` lists the compared stages
/// (stage 0 first). Logits are registered as `fidelity.alpha_logits` and
/// `fidelity.beta_logits`.
pub fn record_fidelity<'a>(
    tape: &mut Tape<'a>,
    px: &PyramidVars,
    py: &PyramidVars,
    stage_ids: &[usize],
    weights: &'a FidelityWeights,
    trainable: bool,
) -> Result<Var> {
    let mut lum = Vec::with_capacity(stage_ids.len());
    let mut structure = Vec::with_capacity(stage_ids.len());
    let mut channels = Vec::with_capacity(stage_ids.len());
    for &id in stage_ids {
        let (a, b) = match (px.stage(id), py.stage(id)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::config(format!("pyramid lacks fidelity stage {id}"))),
        };
        if tape.shape(a.var) != tape.shape(b.var) {
            return Err(Error::dim(format!("stage {id} shapes differ")));
        }
        channels.push(a.channels);
        let (l, s) = record_stage_similarity(tape, a.var, b.var, weights.c1, weights.c2);
        lum.push(l);
        structure.push(s);
    }
    check_layout(&channels, weights)?;
    let n = weights.total_channels();
    let l = tape.concat(&lum, 0);
    let s = tape.concat(&structure, 0);
    let sims = tape.concat(&[l, s], 0);
    let sims = tape.reshape(sims, &[2 * n]);

    let a = tape.param("fidelity.alpha_logits", &weights.alpha_logits, trainable);
    let b = tape.param("fidelity.beta_logits", &weights.beta_logits, trainable);
    let logits = tape.concat(&[a, b], 0);
    let w = tape.softmax(logits);
    let weighted = tape.mul(w, sims);
    let total = tape.sum(weighted);
    let neg = tape.neg(total);
    Ok(tape.offset(neg, 1.0))
}

/// Per-channel `(L, S)` columns, each `[channels, 1]`.
fn record_stage_similarity(tape: &mut Tape<'_>, x: Var, y: Var, c1: f64, c2: f64) -> (Var, Var) {
    let mx = tape.mean_axis(x, 1);
    let my = tape.mean_axis(y, 1);
    let dx = tape.sub(x, mx);
    let dy = tape.sub(y, my);
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    let dxy = tape.mul(dx, dy);
    let vx = tape.mean_axis(dx2, 1);
    let vy = tape.mean_axis(dy2, 1);
    let cxy = tape.mean_axis(dxy, 1);

    let mxy = tape.mul(mx, my);
    let num = tape.scale(mxy, 2.0);
    let num = tape.offset(num, c1);
    let mx2 = tape.square(mx);
    let my2 = tape.square(my);
    let den = tape.add(mx2, my2);
    let den = tape.offset(den, c1);
    let l = tape.div(num, den);

    let num = tape.scale(cxy, 2.0);
    let num = tape.offset(num, c2);
    let den = tape.add(vx, vy);
    let den = tape.offset(den, c2);
    let s = tape.div(num, den);
    (l, s)
}
