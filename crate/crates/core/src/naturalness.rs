//! No-reference naturalness head.
//!
//! Each naturalness stage is reduced to per-channel global means and variances,
//! projected to 128 dimensions by one projection matrix shared by every stage,
//! concatenated after the six colour statistics of the input image, and fed to
//! a two-layer GELU MLP (`6 + 128*S -> 768 -> 1`). Stages narrower than the
//! backbone's embedding width are zero-padded (means and variances padded
//! separately) so the projection can be shared.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, FeaturePyramid, PyramidVars, StageFeatures};
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::tape::{normal_cdf, Tape, Tensor, Var};

pub const PROJECTION_DIM: usize = 128;
pub const HIDDEN_DIM: usize = 128 * 6;
pub const COLOR_STATS: usize = 3 * 2;

#[derive(Clone, Debug, PartialEq)]
pub struct NaturalnessHead {
    /// `[128, 2 * embed_dim]`, shared across stages.
    pub projection_weight: Tensor,
    pub projection_bias: Tensor,
    /// `[768, 6 + 128 * S]`
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    /// `[1, 768]`
    pub output_weight: Tensor,
    pub output_bias: Tensor,
    pub embed_dim: usize,
    pub num_stages: usize,
}

impl NaturalnessHead {
    /// Seeded uniform fan-in initialisation, zero biases.
    pub fn init(config: &BackboneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.embed_dim;
        let s = config.naturalness_stage_ids.len();
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let v: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            ArrayD::from_shape_vec(IxDyn(&[rows, cols]), v).expect("shape")
        };
        let projection_weight = uniform(PROJECTION_DIM, 2 * e);
        let hidden_weight = uniform(HIDDEN_DIM, COLOR_STATS + PROJECTION_DIM * s);
        let output_weight = uniform(1, HIDDEN_DIM);
        NaturalnessHead {
            projection_weight,
            projection_bias: ArrayD::zeros(IxDyn(&[PROJECTION_DIM])),
            hidden_weight,
            hidden_bias: ArrayD::zeros(IxDyn(&[HIDDEN_DIM])),
            output_weight,
            output_bias: ArrayD::zeros(IxDyn(&[1])),
            embed_dim: e,
            num_stages: s,
        }
    }

    pub fn input_len(&self) -> usize {
        COLOR_STATS + PROJECTION_DIM * self.num_stages
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("hidden_bias", &self.hidden_bias),
            ("hidden_weight", &self.hidden_weight),
            ("output_bias", &self.output_bias),
            ("output_weight", &self.output_weight),
            ("projection_bias", &self.projection_bias),
            ("projection_weight", &self.projection_weight),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            ("hidden_bias", &mut self.hidden_bias),
            ("hidden_weight", &mut self.hidden_weight),
            ("output_bias", &mut self.output_bias),
            ("output_weight", &mut self.output_weight),
            ("projection_bias", &mut self.projection_bias),
            ("projection_weight", &mut self.projection_weight),
        ]
    }

    pub fn expected_shapes(embed_dim: usize, num_stages: usize) -> [(&'static str, Vec<usize>); 6] {
        [
            ("hidden_bias", vec![HIDDEN_DIM]),
            ("hidden_weight", vec![HIDDEN_DIM, COLOR_STATS + PROJECTION_DIM * num_stages]),
            ("output_bias", vec![1]),
            ("output_weight", vec![1, HIDDEN_DIM]),
            ("projection_bias", vec![PROJECTION_DIM]),
            ("projection_weight", vec![PROJECTION_DIM, 2 * embed_dim]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for ((name, t), (_, shape)) in self
            .tensors()
            .iter()
            .zip(Self::expected_shapes(self.embed_dim, self.num_stages))
        {
            if t.shape() != shape.as_slice() {
                return Err(Error::Parameter(format!(
                    "naturalness tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Sum whose result depends only on the multiset of values.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Per-channel global means followed by per-channel population variances.
pub fn pool_stage(stage: &StageFeatures) -> Result<Array1<f64>> {
    let n = stage.data.ncols();
    if n == 0 {
        return Err(Error::dim(format!("stage {} has an empty grid", stage.stage_index)));
    }
    let c = stage.channels();
    let mut out = Array1::zeros(2 * c);
    let mut buf = Vec::with_capacity(n);
    for (j, row) in stage.data.outer_iter().enumerate() {
        buf.clear();
        buf.extend(row.iter().copied());
        let mean = sorted_sum(&mut buf) / n as f64;
        // buf is sorted, so this order is canonical too
        out[j] = mean;
        out[c + j] = buf.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    }
    Ok(out)
}

fn padded_pool(stage: &StageFeatures, embed_dim: usize) -> Result<Array1<f64>> {
    let pooled = pool_stage(stage)?;
    let c = stage.channels();
    if c > embed_dim {
        return Err(Error::dim(format!(
            "stage {} has {c} channels, more than the head's width {embed_dim}",
            stage.stage_index
        )));
    }
    let mut out = Array1::zeros(2 * embed_dim);
    for j in 0..c {
        out[j] = pooled[j];
        out[embed_dim + j] = pooled[c + j];
    }
    Ok(out)
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality().expect("2-D weight")
}

fn as1(t: &Tensor) -> ndarray::ArrayView1<'_, f64> {
    t.view().into_dimensionality().expect("1-D bias")
}

/// Raw (uncalibrated) naturalness score of the image behind `pyramid`; lower
/// means more natural.
pub fn naturalness_score(image: &Image, pyramid: &FeaturePyramid, head: &NaturalnessHead) -> Result<f64> {
    naturalness_from_stats(&image.color_statistics(), pyramid, head)
}

/// [`naturalness_score`] with the image's color statistics precomputed.
pub fn naturalness_from_stats(color_stats: &[f64; 6], pyramid: &FeaturePyramid, head: &NaturalnessHead) -> Result<f64> {
    head.validate()?;
    let stages = pyramid.naturalness_stages()?;
    if stages.len() != head.num_stages {
        return Err(Error::config(format!(
            "pyramid provides {} naturalness stages, head expects {}",
            stages.len(),
            head.num_stages
        )));
    }
    let mut input = Vec::with_capacity(head.input_len());
    input.extend_from_slice(color_stats);
    let pw = as2(&head.projection_weight);
    let pb = as1(&head.projection_bias);
    for stage in stages {
        let pooled = padded_pool(stage, head.embed_dim)?;
        let projected = pw.dot(&pooled) + pb;
        input.extend(projected.iter().copied());
    }
    let input = Array1::from(input);
    let hidden = as2(&head.hidden_weight).dot(&input) + as1(&head.hidden_bias);
    let hidden = hidden.mapv(|x| x * normal_cdf(x));
    let out = as2(&head.output_weight).dot(&hidden) + as1(&head.output_bias);
    Ok(out[0])
}

/// Records the naturalness head on a tape. Head tensors are registered as
/// `naturalness.<name>`.
pub fn record_naturalness<'a>(
    tape: &mut Tape<'a>,
    color_stats: [f64; COLOR_STATS],
    pyramid: &PyramidVars,
    stage_ids: &[usize],
    head: &'a NaturalnessHead,
    trainable: bool,
) -> Result<Var> {
    if stage_ids.len() != head.num_stages {
        return Err(Error::config(format!(
            "pyramid provides {} naturalness stages, head expects {}",
            stage_ids.len(),
            head.num_stages
        )));
    }
    let e = head.embed_dim;
    let mut columns = Vec::with_capacity(stage_ids.len());
    for &id in stage_ids {
        let stage = pyramid
            .stage(id)
            .ok_or_else(|| Error::config(format!("pyramid lacks naturalness stage {id}")))?;
        if stage.channels > e {
            return Err(Error::dim(format!(
                "stage {id} has {} channels, more than the head's width {e}",
                stage.channels
            )));
        }
        let mean = tape.mean_axis(stage.var, 1);
        let centered = tape.sub(stage.var, mean);
        let sq = tape.square(centered);
        let var = tape.mean_axis(sq, 1);
        let (mean, var) = if stage.channels < e {
            let pad = tape.constant(ArrayD::zeros(IxDyn(&[e - stage.channels, 1])));
            (tape.concat(&[mean, pad], 0), tape.concat(&[var, pad], 0))
        } else {
            (mean, var)
        };
        columns.push(tape.concat(&[mean, var], 0));
    }
    let pooled = tape.concat(&columns, 1); // [2E, S]

    let p = |tape: &mut Tape<'a>, name: &str, t: &'a Tensor| tape.param(&format!("naturalness.{name}"), t, trainable);
    let pw = p(tape, "projection_weight", &head.projection_weight);
    let pb = p(tape, "projection_bias", &head.projection_bias);
    let pb = tape.reshape(pb, &[PROJECTION_DIM, 1]);
    let projected = tape.matmul(pw, pooled);
    let projected = tape.add(projected, pb); // [128, S]
    let per_stage = tape.transpose(projected); // [S, 128]
    let flat = tape.reshape(per_stage, &[PROJECTION_DIM * stage_ids.len(), 1]);

    let color = tape.constant(Array2::from_shape_vec((COLOR_STATS, 1), color_stats.to_vec()).expect("6x1").into_dyn());
    let input = tape.concat(&[color, flat], 0);

    let hw = p(tape, "hidden_weight", &head.hidden_weight);
    let hb = p(tape, "hidden_bias", &head.hidden_bias);
    let hb = tape.reshape(hb, &[HIDDEN_DIM, 1]);
    let hidden = tape.matmul(hw, input);
    let hidden = tape.add(hidden, hb);
    let hidden = tape.gelu(hidden);

    let ow = p(tape, "output_weight", &head.output_weight);
    let ob = p(tape, "output_bias", &head.output_bias);
    let ob = tape.reshape(ob, &[1, 1]);
    let out = tape.matmul(ow, hidden);
    let out = tape.add(out, ob);
    Ok(tape.reshape(out, &[]))
}
