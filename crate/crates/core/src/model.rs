//! The full metric: calibrated fidelity plus an adaptively weighted,
//! calibrated naturalness term.
//!
//! `D(x, y) = F(x, y) + exp(k * (N(x) - N(y))) * N(y)` where every term is
//! passed through a logistic squashing onto `(-2, 2)`, `x` is the reference,
//! `y` the test image, and lower `D` means better quality.

use serde::{Deserialize, Serialize};

use crate::backbone::{extract_pyramid, record_pyramid, BackboneConfig, BackboneParams, FeaturePyramid, PyramidVars};
use crate::error::{Error, Result};
use crate::fidelity::{fidelity_score, record_fidelity, FidelityWeights};
use crate::naturalness::{naturalness_from_stats, record_naturalness, NaturalnessHead};
use crate::raster::Image;
use crate::tape::{softplus, Tape, Var};

pub const FORMAT_VERSION: u32 = 1;
pub const CALIBRATION_UPPER: f64 = 2.0;
pub const CALIBRATION_LOWER: f64 = -2.0;

/// Logistic calibration parameters for the fidelity (`eta`) and naturalness
/// (`gamma`) terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub eta3: f64,
    pub eta4: f64,
    pub gamma3: f64,
    pub gamma4: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        CalibrationParams {
            eta3: 0.0,
            eta4: 1.0,
            gamma3: 0.0,
            gamma4: 1.0,
        }
    }
}

impl CalibrationParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta3", self.eta3),
            ("eta4", self.eta4),
            ("gamma3", self.gamma3),
            ("gamma4", self.gamma4),
        ] {
            if !v.is_finite() {
                return Err(Error::Parameter(format!("calibration {name} is not finite")));
            }
        }
        if self.eta4 == 0.0 || self.gamma4 == 0.0 {
            return Err(Error::Parameter("calibration scale eta4/gamma4 must be non-zero".into()));
        }
        Ok(())
    }
}

/// Sharpness of the adaptive weight, stored unconstrained; `k = softplus(k_raw)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveScale {
    pub k_raw: f64,
}

impl Default for AdaptiveScale {
    /// `k = 1`.
    fn default() -> Self {
        AdaptiveScale {
            k_raw: (std::f64::consts::E - 1.0).ln(),
        }
    }
}

impl AdaptiveScale {
    pub fn k(&self) -> f64 {
        softplus(self.k_raw)
    }
}

/// Squashes `value` onto `(-2, 2)`, centred at `center` with slope set by `|scale|`.
pub fn calibrate(value: f64, center: f64, scale: f64) -> Result<f64> {
    if scale == 0.0 {
        return Err(Error::Parameter("calibration scale must be non-zero".into()));
    }
    let half_range = (CALIBRATION_UPPER - CALIBRATION_LOWER) / 2.0;
    let mid = (CALIBRATION_UPPER + CALIBRATION_LOWER) / 2.0;
    // 4 / (1 + exp(-z)) - 2 == 2 * tanh(z / 2), without cancellation near the ends.
    Ok(mid + half_range * ((value - center) / scale.abs() / 2.0).tanh())
}

/// `exp(k * (n_ref - n_test))` on calibrated naturalness values.
pub fn adaptive_lambda(n_ref: f64, n_test: f64, k: f64) -> f64 {
    (k * (n_ref - n_test)).exp()
}

/// Combines calibrated terms into the final score.
pub fn compose_score(fidelity: f64, n_ref: f64, n_test: f64, k: f64) -> f64 {
    fidelity + adaptive_lambda(n_ref, n_test, k) * n_test
}

/// Parameter groups, each trained in its own phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Backbone,
    Naturalness,
    Fidelity,
    Scale,
    Calibration,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Backbone,
        ParamGroup::Naturalness,
        ParamGroup::Fidelity,
        ParamGroup::Scale,
        ParamGroup::Calibration,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Naturalness => "naturalness",
            ParamGroup::Fidelity => "fidelity",
            ParamGroup::Scale => "scale",
            ParamGroup::Calibration => "calibration",
        }
    }

    /// Group of a fully qualified parameter name such as `naturalness.hidden_bias`.
    pub fn of(name: &str) -> Option<ParamGroup> {
        let head = name.split('.').next()?;
        ParamGroup::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

/// Set of parameter groups that receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamMask {
    bits: u8,
}

impl ParamMask {
    pub fn none() -> Self {
        ParamMask { bits: 0 }
    }

    pub fn all() -> Self {
        ParamMask::of(&ParamGroup::ALL)
    }

    pub fn of(groups: &[ParamGroup]) -> Self {
        let mut m = ParamMask::none();
        for &g in groups {
            m.bits |= 1 << g as u8;
        }
        m
    }

    pub fn contains(self, group: ParamGroup) -> bool {
        self.bits & (1 << group as u8) != 0
    }
}

/// Every learnable quantity of the metric.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub format_version: u32,
    pub backbone: BackboneParams,
    pub naturalness: NaturalnessHead,
    pub fidelity: FidelityWeights,
    pub scale: AdaptiveScale,
    pub calibration: CalibrationParams,
}

impl ModelParameters {
    /// Freshly initialised parameters: seeded backbone and head, uniform
    /// fidelity weights, `k = 1`, identity-centred calibration.
    pub fn init(config: BackboneConfig) -> Result<Self> {
        let head_seed = config.seed ^ 0x9e37_79b9_7f4a_7c15;
        let naturalness = NaturalnessHead::init(&config, head_seed);
        let fidelity = FidelityWeights::for_backbone(&config)?;
        let backbone = BackboneParams::init(config)?;
        Ok(ModelParameters {
            format_version: FORMAT_VERSION,
            backbone,
            naturalness,
            fidelity,
            scale: AdaptiveScale::default(),
            calibration: CalibrationParams::default(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Parameter(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.backbone.validate()?;
        self.naturalness.validate()?;
        let expected = FidelityWeights::for_backbone(self.config())?;
        if expected.stage_channels != self.fidelity.stage_channels {
            return Err(Error::Parameter(format!(
                "fidelity weights cover stages with {:?} channels, backbone provides {:?}",
                self.fidelity.stage_channels, expected.stage_channels
            )));
        }
        self.fidelity.validate()?;
        let cfg = self.config();
        if self.naturalness.embed_dim != cfg.embed_dim || self.naturalness.num_stages != cfg.naturalness_stage_ids.len() {
            return Err(Error::Parameter("naturalness head does not match the backbone".into()));
        }
        if !self.scale.k_raw.is_finite() {
            return Err(Error::Parameter("k_raw is not finite".into()));
        }
        self.calibration.validate()
    }

    /// Visits every parameter as `(qualified name, values)`, in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &[f64])) {
        for (name, t) in &self.backbone.tensors {
            f(&format!("backbone.{name}"), t.as_slice().expect("standard layout"));
        }
        for (name, t) in self.naturalness.tensors() {
            f(&format!("naturalness.{name}"), t.as_slice().expect("standard layout"));
        }
        f("fidelity.alpha_logits", self.fidelity.alpha_logits.as_slice().expect("standard layout"));
        f("fidelity.beta_logits", self.fidelity.beta_logits.as_slice().expect("standard layout"));
        f("scale.k_raw", std::slice::from_ref(&self.scale.k_raw));
        let c = &self.calibration;
        f("calibration.eta3", std::slice::from_ref(&c.eta3));
        f("calibration.eta4", std::slice::from_ref(&c.eta4));
        f("calibration.gamma3", std::slice::from_ref(&c.gamma3));
        f("calibration.gamma4", std::slice::from_ref(&c.gamma4));
    }

    /// Mutable counterpart of [`ModelParameters::visit`], same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        for (name, t) in self.backbone.tensors.iter_mut() {
            f(&format!("backbone.{name}"), t.as_slice_mut().expect("standard layout"));
        }
        for (name, t) in self.naturalness.tensors_mut() {
            f(&format!("naturalness.{name}"), t.as_slice_mut().expect("standard layout"));
        }
        f("fidelity.alpha_logits", self.fidelity.alpha_logits.as_slice_mut().expect("standard layout"));
        f("fidelity.beta_logits", self.fidelity.beta_logits.as_slice_mut().expect("standard layout"));
        f("scale.k_raw", std::slice::from_mut(&mut self.scale.k_raw));
        let c = &mut self.calibration;
        f("calibration.eta3", std::slice::from_mut(&mut c.eta3));
        f("calibration.eta4", std::slice::from_mut(&mut c.eta4));
        f("calibration.gamma3", std::slice::from_mut(&mut c.gamma3));
        f("calibration.gamma4", std::slice::from_mut(&mut c.gamma4));
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(|_, v| n += v.len());
        n
    }
}

/// Per-image quantities that do not depend on the other image of a pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub pyramid: FeaturePyramid,
    pub color_stats: [f64; 6],
    /// Raw naturalness before calibration.
    pub naturalness: f64,
    pub height: usize,
    pub width: usize,
}

pub fn image_features(image: &Image, params: &ModelParameters) -> Result<ImageFeatures> {
    let pyramid = extract_pyramid(image, &params.backbone)?;
    let color_stats = image.color_statistics();
    let naturalness = naturalness_from_stats(&color_stats, &pyramid, &params.naturalness)?;
    Ok(ImageFeatures {
        pyramid,
        color_stats,
        naturalness,
        height: image.height(),
        width: image.width(),
    })
}

/// Every intermediate of one score evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub fidelity_raw: f64,
    pub fidelity: f64,
    pub naturalness_ref_raw: f64,
    pub naturalness_test_raw: f64,
    pub naturalness_ref: f64,
    pub naturalness_test: f64,
    pub k: f64,
    pub lambda: f64,
    pub score: f64,
}

/// Scores a test image against a reference from precomputed features.
pub fn score_features(reference: &ImageFeatures, test: &ImageFeatures, params: &ModelParameters) -> Result<ScoreBreakdown> {
    if (reference.height, reference.width) != (test.height, test.width) {
        return Err(Error::dim(format!(
            "reference is {}x{}, test is {}x{}",
            reference.height, reference.width, test.height, test.width
        )));
    }
    let c = &params.calibration;
    c.validate()?;
    let fidelity_raw = fidelity_score(&reference.pyramid, &test.pyramid, &params.fidelity)?;
    let fidelity = calibrate(fidelity_raw, c.eta3, c.eta4)?;
    let naturalness_ref = calibrate(reference.naturalness, c.gamma3, c.gamma4)?;
    let naturalness_test = calibrate(test.naturalness, c.gamma3, c.gamma4)?;
    let k = params.scale.k();
    let lambda = adaptive_lambda(naturalness_ref, naturalness_test, k);
    let score = fidelity + lambda * naturalness_test;
    if !score.is_finite() {
        return Err(Error::Numeric(format!("non-finite score {score}")));
    }
    Ok(ScoreBreakdown {
        fidelity_raw,
        fidelity,
        naturalness_ref_raw: reference.naturalness,
        naturalness_test_raw: test.naturalness,
        naturalness_ref,
        naturalness_test,
        k,
        lambda,
        score,
    })
}

pub fn afine_breakdown(reference: &Image, test: &Image, params: &ModelParameters) -> Result<ScoreBreakdown> {
    if (reference.height(), reference.width()) != (test.height(), test.width()) {
        return Err(Error::dim(format!(
            "reference is {}x{}, test is {}x{}",
            reference.height(),
            reference.width(),
            test.height(),
            test.width()
        )));
    }
    let fx = image_features(reference, params)?;
    let fy = image_features(test, params)?;
    score_features(&fx, &fy, params)
}

/// Quality of `test` relative to `reference`; lower is better.
pub fn afine_score(reference: &Image, test: &Image, params: &ModelParameters) -> Result<f64> {
    afine_breakdown(reference, test, params).map(|b| b.score)
}

/// One image as recorded on a tape.
#[derive(Clone, Debug)]
pub struct RecordedImage {
    pub pyramid: PyramidVars,
    /// Raw naturalness, scalar.
    pub naturalness: Var,
    pub height: usize,
    pub width: usize,
}

/// Records the per-image part of the graph. When `cached` holds the pyramid of
/// a frozen backbone it is reused instead of re-running the backbone.
pub fn record_image<'a>(
    tape: &mut Tape<'a>,
    image: &Image,
    params: &'a ModelParameters,
    mask: ParamMask,
    cached: Option<&FeaturePyramid>,
) -> Result<RecordedImage> {
    let train_backbone = mask.contains(ParamGroup::Backbone);
    let pyramid = match cached {
        Some(p) if !train_backbone => PyramidVars::from_pyramid(tape, p),
        _ => record_pyramid(tape, image, &params.backbone, train_backbone)?,
    };
    let naturalness = record_naturalness(
        tape,
        image.color_statistics(),
        &pyramid,
        &params.config().naturalness_stage_ids,
        &params.naturalness,
        mask.contains(ParamGroup::Naturalness),
    )?;
    Ok(RecordedImage {
        pyramid,
        naturalness,
        height: image.height(),
        width: image.width(),
    })
}

fn record_calibrate(tape: &mut Tape<'_>, value: Var, center: Var, scale: Var) -> Var {
    let d = tape.sub(value, center);
    let s = tape.abs(scale);
    let z = tape.div(d, s);
    let z = tape.scale(z, 0.5);
    let t = tape.tanh(z);
    let half_range = (CALIBRATION_UPPER - CALIBRATION_LOWER) / 2.0;
    let mid = (CALIBRATION_UPPER + CALIBRATION_LOWER) / 2.0;
    let t = tape.scale(t, half_range);
    tape.offset(t, mid)
}

fn calibration_vars(tape: &mut Tape<'_>, params: &ModelParameters, mask: ParamMask) -> [Var; 4] {
    let tr = mask.contains(ParamGroup::Calibration);
    let c = &params.calibration;
    [
        tape.scalar_param("calibration.eta3", c.eta3, tr),
        tape.scalar_param("calibration.eta4", c.eta4, tr),
        tape.scalar_param("calibration.gamma3", c.gamma3, tr),
        tape.scalar_param("calibration.gamma4", c.gamma4, tr),
    ]
}

/// Calibrated naturalness of a recorded image.
pub fn record_calibrated_naturalness(tape: &mut Tape<'_>, image: &RecordedImage, params: &ModelParameters, mask: ParamMask) -> Result<Var> {
    params.calibration.validate()?;
    let [_, _, g3, g4] = calibration_vars(tape, params, mask);
    Ok(record_calibrate(tape, image.naturalness, g3, g4))
}

/// Records `D(reference, test)`.
pub fn record_score<'a>(
    tape: &mut Tape<'a>,
    reference: &RecordedImage,
    test: &RecordedImage,
    params: &'a ModelParameters,
    mask: ParamMask,
) -> Result<Var> {
    if (reference.height, reference.width) != (test.height, test.width) {
        return Err(Error::dim("reference and test sizes differ"));
    }
    params.calibration.validate()?;
    let stage_ids: Vec<usize> = std::iter::once(0)
        .chain(params.config().fidelity_stage_ids.iter().copied())
        .collect();
    let f = record_fidelity(
        tape,
        &reference.pyramid,
        &test.pyramid,
        &stage_ids,
        &params.fidelity,
        mask.contains(ParamGroup::Fidelity),
    )?;
    let [e3, e4, g3, g4] = calibration_vars(tape, params, mask);
    let f = record_calibrate(tape, f, e3, e4);
    let nx = record_calibrate(tape, reference.naturalness, g3, g4);
    let ny = record_calibrate(tape, test.naturalness, g3, g4);
    let k_raw = tape.scalar_param("scale.k_raw", params.scale.k_raw, mask.contains(ParamGroup::Scale));
    let k = tape.softplus(k_raw);
    let diff = tape.sub(nx, ny);
    let arg = tape.mul(k, diff);
    let lambda = tape.exp(arg);
    let weighted = tape.mul(lambda, ny);
    Ok(tape.add(f, weighted))
}
