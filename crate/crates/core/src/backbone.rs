//! Multi-stage feature extraction.
//!
//! Two architectures are provided:
//!
//! * a CLIP-style vision transformer (patch embedding, class token, learned
//!   positional grid, pre-norm residual attention blocks), whose stage `i` is
//!   the token sequence after block `i` with the class token removed;
//! * a small strided convolutional network for fast, fully trainable
//!   experiments: three `3x3`, stride-2 convolutions with GELU.
//!
//! Stage 0 is always the (centre-cropped) raw RGB input. Inputs are cropped to
//! a multiple of the patch size before extraction.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::tape::{PatchGeometry, Tape, Tensor, Var};

const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];
const LN_EPS: f64 = 1e-5;

/// Architecture-specific settings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Vision transformer. `native_grid` is the side of the positional grid the
    /// weights were trained with (7 for a 224-pixel input at patch 32).
    TransformerBackbone {
        depth: usize,
        heads: usize,
        mlp_dim: usize,
        native_grid: usize,
    },
    /// Strided convolution stack; one stage per entry of `channels`.
    ToyConvBackbone { channels: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    #[serde(flatten)]
    pub kind: BackboneKind,
    pub fidelity_stage_ids: Vec<usize>,
    pub naturalness_stage_ids: Vec<usize>,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Seed for freshly initialised weights.
    pub seed: u64,
}

impl BackboneConfig {
    /// CLIP ViT-B/32 at 224 pixels; fidelity reads blocks 3/6/9/12 and
    /// naturalness reads all twelve blocks.
    pub fn vit_b32() -> Self {
        BackboneConfig {
            kind: BackboneKind::TransformerBackbone {
                depth: 12,
                heads: 12,
                mlp_dim: 3072,
                native_grid: 7,
            },
            fidelity_stage_ids: vec![3, 6, 9, 12],
            naturalness_stage_ids: (1..=12).collect(),
            patch_size: 32,
            embed_dim: 768,
            seed: 0,
        }
    }

    /// The 8/16/32-channel convolutional backbone.
    pub fn toy(seed: u64) -> Self {
        BackboneConfig {
            kind: BackboneKind::ToyConvBackbone {
                channels: vec![8, 16, 32],
            },
            fidelity_stage_ids: vec![1, 2, 3],
            naturalness_stage_ids: vec![1, 2, 3],
            patch_size: 8,
            embed_dim: 32,
            seed,
        }
    }

    pub fn num_stages(&self) -> usize {
        match &self.kind {
            BackboneKind::TransformerBackbone { depth, .. } => *depth,
            BackboneKind::ToyConvBackbone { channels } => channels.len(),
        }
    }

    /// Channel count of a stage; stage 0 is the RGB input.
    pub fn stage_channels(&self, stage: usize) -> Result<usize> {
        if stage == 0 {
            return Ok(3);
        }
        if stage > self.num_stages() {
            return Err(Error::config(format!(
                "stage {stage} does not exist (backbone has {} stages)",
                self.num_stages()
            )));
        }
        Ok(match &self.kind {
            BackboneKind::TransformerBackbone { .. } => self.embed_dim,
            BackboneKind::ToyConvBackbone { channels } => channels[stage - 1],
        })
    }

    /// Stage ids extracted for a pyramid: 0 plus every configured stage.
    pub fn extracted_stage_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = std::iter::once(0)
            .chain(self.fidelity_stage_ids.iter().copied())
            .chain(self.naturalness_stage_ids.iter().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn validate(&self) -> Result<()> {
        for (what, ids) in [
            ("fidelity_stage_ids", &self.fidelity_stage_ids),
            ("naturalness_stage_ids", &self.naturalness_stage_ids),
        ] {
            if ids.is_empty() {
                return Err(Error::config(format!("{what} is empty")));
            }
            if ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config(format!("{what} must be strictly increasing: {ids:?}")));
            }
            for &id in ids {
                if id == 0 || id > self.num_stages() {
                    return Err(Error::config(format!(
                        "{what} references unknown stage {id} (valid: 1..={})",
                        self.num_stages()
                    )));
                }
            }
        }
        if self.patch_size == 0 {
            return Err(Error::config("patch_size must be positive"));
        }
        match &self.kind {
            BackboneKind::TransformerBackbone {
                depth,
                heads,
                mlp_dim,
                native_grid,
            } => {
                if *depth == 0 || *heads == 0 || *mlp_dim == 0 || *native_grid < 2 {
                    return Err(Error::config("transformer dimensions must be positive (native grid >= 2)"));
                }
                if self.embed_dim % heads != 0 {
                    return Err(Error::config(format!(
                        "embed_dim {} not divisible by {heads} heads",
                        self.embed_dim
                    )));
                }
            }
            BackboneKind::ToyConvBackbone { channels } => {
                if channels.is_empty() || channels.contains(&0) {
                    return Err(Error::config("toy backbone needs positive channel counts"));
                }
                let widest = channels.iter().copied().max().unwrap_or(0);
                if self.embed_dim != widest {
                    return Err(Error::config(format!(
                        "toy backbone embed_dim {} must equal its widest stage {widest}",
                        self.embed_dim
                    )));
                }
            }
        }
        Ok(())
    }

    /// Names and shapes of every backbone tensor.
    pub fn tensor_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut shapes = BTreeMap::new();
        let d = self.embed_dim;
        match &self.kind {
            BackboneKind::TransformerBackbone {
                depth,
                mlp_dim,
                native_grid,
                ..
            } => {
                let p = self.patch_size;
                shapes.insert("patch_embed.weight".into(), vec![d, 3 * p * p]);
                shapes.insert("class_embedding".into(), vec![d]);
                shapes.insert("pos_embed".into(), vec![1 + native_grid * native_grid, d]);
                shapes.insert("ln_pre.weight".into(), vec![d]);
                shapes.insert("ln_pre.bias".into(), vec![d]);
                for b in 0..*depth {
                    let pre = block_prefix(b);
                    for ln in ["ln_1", "ln_2"] {
                        shapes.insert(format!("{pre}.{ln}.weight"), vec![d]);
                        shapes.insert(format!("{pre}.{ln}.bias"), vec![d]);
                    }
                    for proj in ["q", "k", "v", "out"] {
                        shapes.insert(format!("{pre}.attn.{proj}.weight"), vec![d, d]);
                        shapes.insert(format!("{pre}.attn.{proj}.bias"), vec![d]);
                    }
                    shapes.insert(format!("{pre}.mlp.fc.weight"), vec![*mlp_dim, d]);
                    shapes.insert(format!("{pre}.mlp.fc.bias"), vec![*mlp_dim]);
                    shapes.insert(format!("{pre}.mlp.proj.weight"), vec![d, *mlp_dim]);
                    shapes.insert(format!("{pre}.mlp.proj.bias"), vec![d]);
                }
            }
            BackboneKind::ToyConvBackbone { channels } => {
                let mut cin = 3;
                for (i, &cout) in channels.iter().enumerate() {
                    shapes.insert(format!("conv{}.weight", i + 1), vec![cout, cin * 9]);
                    shapes.insert(format!("conv{}.bias", i + 1), vec![cout]);
                    cin = cout;
                }
            }
        }
        shapes
    }
}

fn block_prefix(b: usize) -> String {
    format!("blocks.{b:02}")
}

/// Backbone weights together with the configuration they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl BackboneParams {
    /// Fresh weights drawn from a generator seeded with `config.seed`.
    pub fn init(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = BTreeMap::new();
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        for (name, shape) in config.tensor_shapes() {
            let len: usize = shape.iter().product();
            let values: Vec<f64> = if name.ends_with(".bias") {
                vec![0.0; len]
            } else if name.starts_with("ln") || name.contains(".ln_") {
                vec![1.0; len]
            } else if name.starts_with("conv") {
                let fan_in = shape[1] as f64;
                let bound = (6.0 / fan_in).sqrt();
                (0..len).map(|_| rng.random_range(-bound..bound)).collect()
            } else {
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            };
            tensors.insert(
                name,
                ArrayD::from_shape_vec(IxDyn(&shape), values).expect("shape/len agree"),
            );
        }
        Ok(BackboneParams { config, tensors })
    }

    /// Checks that every expected tensor is present with the right shape.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.config.tensor_shapes();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::Parameter(format!("missing backbone tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Parameter(format!(
                        "backbone tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Parameter(format!("unexpected backbone tensor {extra}")));
        }
        Ok(())
    }

    fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("validated backbone is missing {name}"))
    }
}

/// Activations of one stage, laid out `[channels, height * width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures {
    pub stage_index: usize,
    pub height: usize,
    pub width: usize,
    pub data: Array2<f64>,
}

impl StageFeatures {
    pub fn new(stage_index: usize, height: usize, width: usize, data: Array2<f64>) -> Result<Self> {
        if data.ncols() != height * width {
            return Err(Error::dim(format!(
                "stage {stage_index}: {} positions do not fill a {height}x{width} grid",
                data.ncols()
            )));
        }
        Ok(StageFeatures {
            stage_index,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }
}

/// Stage 0 plus every configured stage, sorted by stage index.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub stages: Vec<StageFeatures>,
    pub fidelity_stage_ids: Vec<usize>,
    pub naturalness_stage_ids: Vec<usize>,
}

impl FeaturePyramid {
    pub fn stage(&self, id: usize) -> Option<&StageFeatures> {
        self.stages.iter().find(|s| s.stage_index == id)
    }

    /// Stage 0 followed by the fidelity stages.
    pub fn fidelity_stages(&self) -> Result<Vec<&StageFeatures>> {
        std::iter::once(0)
            .chain(self.fidelity_stage_ids.iter().copied())
            .map(|id| {
                self.stage(id)
                    .ok_or_else(|| Error::config(format!("pyramid lacks fidelity stage {id}")))
            })
            .collect()
    }

    pub fn naturalness_stages(&self) -> Result<Vec<&StageFeatures>> {
        self.naturalness_stage_ids
            .iter()
            .map(|&id| {
                self.stage(id)
                    .ok_or_else(|| Error::config(format!("pyramid lacks naturalness stage {id}")))
            })
            .collect()
    }
}

/// A stage as recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StageVar {
    pub stage_index: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[channels, height * width]`
    pub var: Var,
}

#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub stages: Vec<StageVar>,
}

impl PyramidVars {
    pub fn stage(&self, id: usize) -> Option<&StageVar> {
        self.stages.iter().find(|s| s.stage_index == id)
    }

    /// Places precomputed features on a tape as constants.
    pub fn from_pyramid(tape: &mut Tape<'_>, pyramid: &FeaturePyramid) -> Self {
        let stages = pyramid
            .stages
            .iter()
            .map(|s| StageVar {
                stage_index: s.stage_index,
                channels: s.channels(),
                height: s.height,
                width: s.width,
                var: tape.constant(s.data.clone().into_dyn()),
            })
            .collect();
        PyramidVars { stages }
    }

    /// Reads stage values back off the tape.
    pub fn to_pyramid(&self, tape: &Tape<'_>, config: &BackboneConfig) -> FeaturePyramid {
        let stages = self
            .stages
            .iter()
            .map(|s| StageFeatures {
                stage_index: s.stage_index,
                height: s.height,
                width: s.width,
                data: tape
                    .value(s.var)
                    .clone()
                    .into_dimensionality()
                    .expect("stage values are 2-D"),
            })
            .collect();
        FeaturePyramid {
            stages,
            fidelity_stage_ids: config.fidelity_stage_ids.clone(),
            naturalness_stage_ids: config.naturalness_stage_ids.clone(),
        }
    }
}

/// Runs the backbone on `image` and returns the feature pyramid.
pub fn extract_pyramid(image: &Image, params: &BackboneParams) -> Result<FeaturePyramid> {
    let mut tape = Tape::new();
    let vars = record_pyramid(&mut tape, image, params, false)?;
    Ok(vars.to_pyramid(&tape, &params.config))
}

/// Records the backbone forward pass on `tape`. Parameters are registered as
/// `backbone.<name>` leaves, trainable when `trainable` is set.
pub fn record_pyramid<'a>(
    tape: &mut Tape<'a>,
    image: &Image,
    params: &'a BackboneParams,
    trainable: bool,
) -> Result<PyramidVars> {
    let config = &params.config;
    config.validate()?;
    if image.height() < config.patch_size || image.width() < config.patch_size {
        return Err(Error::dim(format!(
            "image {}x{} is smaller than one {p}x{p} patch",
            image.height(),
            image.width(),
            p = config.patch_size
        )));
    }
    let image = image.center_crop_to_multiple(config.patch_size)?;
    let (h, w) = (image.height(), image.width());
    let wanted = config.extracted_stage_ids();

    let raw = image
        .data()
        .clone()
        .into_shape_with_order((3, h * w))
        .expect("contiguous image")
        .into_dyn();
    let mut stages = vec![StageVar {
        stage_index: 0,
        channels: 3,
        height: h,
        width: w,
        var: tape.constant(raw),
    }];

    let p = |tape: &mut Tape<'a>, name: &str| {
        tape.param(&format!("backbone.{name}"), params.get(name), trainable)
    };

    match &config.kind {
        BackboneKind::ToyConvBackbone { channels } => {
            let mut x = tape.constant(image.to_tensor());
            let (mut ch, mut cw) = (h, w);
            let geom = PatchGeometry {
                kernel: 3,
                stride: 2,
                padding: 1,
            };
            for (i, &cout) in channels.iter().enumerate() {
                let stage = i + 1;
                let (oh, ow) = geom
                    .output_size(ch, cw)
                    .ok_or_else(|| Error::dim("feature map collapsed below kernel size"))?;
                let cols = tape.im2col(x, geom);
                let weight = p(tape, &format!("conv{stage}.weight"));
                let bias = p(tape, &format!("conv{stage}.bias"));
                let bias = tape.reshape(bias, &[cout, 1]);
                let y = tape.matmul(weight, cols);
                let y = tape.add(y, bias);
                let y = tape.gelu(y);
                if wanted.contains(&stage) {
                    stages.push(StageVar {
                        stage_index: stage,
                        channels: cout,
                        height: oh,
                        width: ow,
                        var: y,
                    });
                }
                x = tape.reshape(y, &[cout, oh, ow]);
                (ch, cw) = (oh, ow);
            }
        }
        BackboneKind::TransformerBackbone {
            heads, native_grid, ..
        } => {
            let d = config.embed_dim;
            let ps = config.patch_size;
            let (gh, gw) = (h / ps, w / ps);
            let tokens = gh * gw;
            let last_needed = *wanted.last().unwrap_or(&0);

            let normalized = normalize_clip(&image);
            let x = tape.constant(normalized);
            let cols = tape.im2col(
                x,
                PatchGeometry {
                    kernel: ps,
                    stride: ps,
                    padding: 0,
                },
            );
            let patch_w = p(tape, "patch_embed.weight");
            let emb = tape.matmul(patch_w, cols); // [D, T]
            let emb = tape.transpose(emb); // [T, D]
            let cls = p(tape, "class_embedding");
            let cls = tape.reshape(cls, &[1, d]);
            let mut seq = tape.concat(&[cls, emb], 0);

            let pos = p(tape, "pos_embed");
            let pos = if (gh, gw) == (*native_grid, *native_grid) {
                pos
            } else {
                let cls_pos = tape.slice(pos, 0, 0, 1);
                let grid_pos = tape.slice(pos, 0, 1, 1 + native_grid * native_grid);
                let m = tape.constant(
                    bilinear_matrix(*native_grid, *native_grid, gh, gw)?.into_dyn(),
                );
                let resized = tape.matmul(m, grid_pos);
                tape.concat(&[cls_pos, resized], 0)
            };
            seq = tape.add(seq, pos);
            let g = p(tape, "ln_pre.weight");
            let b = p(tape, "ln_pre.bias");
            seq = tape.layer_norm(seq, g, b, LN_EPS);

            let head_dim = d / heads;
            let scale = 1.0 / (head_dim as f64).sqrt();
            for block in 1..=last_needed {
                let pre = block_prefix(block - 1);
                let w = |tape: &mut Tape<'a>, n: &str| p(tape, &format!("{pre}.{n}"));

                let g1 = w(tape, "ln_1.weight");
                let b1 = w(tape, "ln_1.bias");
                let hn = tape.layer_norm(seq, g1, b1, LN_EPS);
                let proj = |tape: &mut Tape<'a>, n: &str| {
                    let wt = w(tape, &format!("attn.{n}.weight"));
                    let bs = w(tape, &format!("attn.{n}.bias"));
                    tape.linear_rows(hn, wt, Some(bs))
                };
                let q = proj(tape, "q");
                let k = proj(tape, "k");
                let v = proj(tape, "v");
                let mut outs = Vec::with_capacity(*heads);
                for hidx in 0..*heads {
                    let (lo, hi) = (hidx * head_dim, (hidx + 1) * head_dim);
                    let qh = tape.slice(q, 1, lo, hi);
                    let kh = tape.slice(k, 1, lo, hi);
                    let vh = tape.slice(v, 1, lo, hi);
                    let kt = tape.transpose(kh);
                    let scores = tape.matmul(qh, kt);
                    let scores = tape.scale(scores, scale);
                    let attn = tape.softmax_rows(scores);
                    outs.push(tape.matmul(attn, vh));
                }
                let merged = tape.concat(&outs, 1);
                let wo = w(tape, "attn.out.weight");
                let bo = w(tape, "attn.out.bias");
                let attn_out = tape.linear_rows(merged, wo, Some(bo));
                seq = tape.add(seq, attn_out);

                let g2 = w(tape, "ln_2.weight");
                let b2 = w(tape, "ln_2.bias");
                let hn = tape.layer_norm(seq, g2, b2, LN_EPS);
                let wf = w(tape, "mlp.fc.weight");
                let bf = w(tape, "mlp.fc.bias");
                let hid = tape.linear_rows(hn, wf, Some(bf));
                let hid = quick_gelu(tape, hid);
                let wp = w(tape, "mlp.proj.weight");
                let bp = w(tape, "mlp.proj.bias");
                let mlp_out = tape.linear_rows(hid, wp, Some(bp));
                seq = tape.add(seq, mlp_out);

                if wanted.contains(&block) {
                    let body = tape.slice(seq, 0, 1, 1 + tokens);
                    let var = tape.transpose(body);
                    stages.push(StageVar {
                        stage_index: block,
                        channels: d,
                        height: gh,
                        width: gw,
                        var,
                    });
                }
            }
        }
    }
    Ok(PyramidVars { stages })
}

fn quick_gelu(tape: &mut Tape<'_>, x: Var) -> Var {
    let scaled = tape.scale(x, 1.702);
    let gate = tape.sigmoid(scaled);
    tape.mul(x, gate)
}

fn normalize_clip(image: &Image) -> Tensor {
    let mut data = image.data().clone();
    for (c, mut ch) in data.axis_iter_mut(Axis(0)).enumerate() {
        ch.mapv_inplace(|v| (v - CLIP_MEAN[c]) / CLIP_STD[c]);
    }
    data.into_dyn()
}

/// Corner-aligned bilinear resampling weights from a `src_h x src_w` grid to a
/// `dst_h x dst_w` grid, both flattened row-major. Row `i` of the result holds
/// the weights that produce output cell `i`.
pub fn bilinear_matrix(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Result<Array2<f64>> {
    if dst_h == 0 || dst_w == 0 {
        return Err(Error::dim(format!("interpolation target {dst_h}x{dst_w} is empty")));
    }
    if src_h == 0 || src_w == 0 {
        return Err(Error::dim("interpolation source grid is empty"));
    }
    let taps = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        (0..dst)
            .map(|i| {
                let pos = if dst == 1 || src == 1 {
                    0.0
                } else {
                    i as f64 * (src - 1) as f64 / (dst - 1) as f64
                };
                let lo = (pos.floor() as usize).min(src - 1);
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = taps(src_h, dst_h);
    let cols = taps(src_w, dst_w);
    let mut m = Array2::zeros((dst_h * dst_w, src_h * src_w));
    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let row = oy * dst_w + ox;
            m[[row, y0 * src_w + x0]] += (1.0 - fy) * (1.0 - fx);
            m[[row, y0 * src_w + x1]] += (1.0 - fy) * fx;
            m[[row, y1 * src_w + x0]] += fy * (1.0 - fx);
            m[[row, y1 * src_w + x1]] += fy * fx;
        }
    }
    Ok(m)
}

/// A positional-embedding table: an optional class-token vector plus a
/// `[h, w, dim]` spatial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalGrid {
    pub class_token: Option<Array1<f64>>,
    pub grid: Array3<f64>,
}

/// Resamples a positional grid with corner-aligned bilinear interpolation.
/// The class-token embedding is passed through unchanged.
pub fn interpolate_positional_grid(
    embeddings: &PositionalGrid,
    target_h: usize,
    target_w: usize,
) -> Result<PositionalGrid> {
    let (sh, sw, dim) = embeddings.grid.dim();
    if sh < 2 || sw < 2 {
        return Err(Error::dim(format!("positional grid {sh}x{sw} is smaller than 2x2")));
    }
    let m = bilinear_matrix(sh, sw, target_h, target_w)?;
    let flat = embeddings
        .grid
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((sh * sw, dim))
        .expect("contiguous grid");
    let out = m
        .dot(&flat)
        .into_shape_with_order((target_h, target_w, dim))
        .expect("interpolated grid shape");
    Ok(PositionalGrid {
        class_token: embeddings.class_token.clone(),
        grid: out,
    })
}

/// Per-channel global statistics of two matching stages.
#[derive(Clone, Debug, PartialEq)]
pub struct StageStatistics {
    pub mean_x: Array1<f64>,
    pub mean_y: Array1<f64>,
    pub var_x: Array1<f64>,
    pub var_y: Array1<f64>,
    pub cov_xy: Array1<f64>,
}

/// Per-channel spatial means, population variances and cross-covariance.
pub fn stage_statistics(x: &StageFeatures, y: &StageFeatures) -> Result<StageStatistics> {
    if x.data.dim() != y.data.dim() || (x.height, x.width) != (y.height, y.width) {
        return Err(Error::dim(format!(
            "stage {} shapes differ: {:?} vs {:?}",
            x.stage_index,
            x.data.dim(),
            y.data.dim()
        )));
    }
    let n = x.data.ncols();
    if n == 0 {
        return Err(Error::dim("stage has an empty spatial grid"));
    }
    let c = x.data.nrows();
    let mut stats = StageStatistics {
        mean_x: Array1::zeros(c),
        mean_y: Array1::zeros(c),
        var_x: Array1::zeros(c),
        var_y: Array1::zeros(c),
        cov_xy: Array1::zeros(c),
    };
    for (j, (rx, ry)) in x.data.outer_iter().zip(y.data.outer_iter()).enumerate() {
        let mx = rx.sum() / n as f64;
        let my = ry.sum() / n as f64;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for (a, b) in rx.iter().zip(ry.iter()) {
            let (da, db) = (a - mx, b - my);
            vx += da * da;
            vy += db * db;
            cxy += da * db;
        }
        stats.mean_x[j] = mx;
        stats.mean_y[j] = my;
        stats.var_x[j] = vx / n as f64;
        stats.var_y[j] = vy / n as f64;
        stats.cov_xy[j] = cxy / n as f64;
    }
    Ok(stats)
}
