//! Pairwise learning-to-rank training.
//!
//! Each triplet `(x, y, z, p)` says how likely a human prefers `y` over `z`
//! given reference `x`. The model's preference follows a Thurstone Case V
//! model on the score gap and is compared with `p` through the fidelity
//! loss. Training runs in three phases that each unlock a different subset
//! of parameters.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{extract_pyramid, FeaturePyramid};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{
    image_features, record_calibrated_naturalness, record_image, record_score, score_features, ImageFeatures,
    ModelParameters, ParamGroup, ParamMask, RecordedImage,
};
use crate::raster::Image;
use crate::tape::{normal_cdf, Tape, Tensor, Var};

/// Ground-truth preference from two quality values on a common scale.
pub fn ranking_label(q_y: f64, q_z: f64) -> f64 {
    if q_y > q_z {
        1.0
    } else if q_y == q_z {
        0.5
    } else {
        0.0
    }
}

/// Probability that `y` is preferred over `z` given lower-is-better scores.
pub fn preference_probability(d_y: f64, d_z: f64) -> f64 {
    normal_cdf((d_z - d_y) / SQRT_2)
}

/// `1 - sqrt(p * p_hat) - sqrt((1 - p) * (1 - p_hat))`, clamped at zero.
pub fn fidelity_loss(p: f64, p_hat: f64) -> f64 {
    let v = 1.0 - (p * p_hat).sqrt() - ((1.0 - p) * (1.0 - p_hat)).sqrt();
    v.max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// Backbone and naturalness head on the naturalness-only objective.
    One = 1,
    /// Fidelity channel weights; everything else frozen.
    Two = 2,
    /// Adaptive scale and calibration offsets/slopes.
    Three = 3,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::One, Phase::Two, Phase::Three];

    pub fn from_number(n: u32) -> Option<Phase> {
        match n {
            1 => Some(Phase::One),
            2 => Some(Phase::Two),
            3 => Some(Phase::Three),
            _ => None,
        }
    }

    pub fn number(self) -> u32 {
        self as u32
    }

    pub fn mask(self) -> ParamMask {
        match self {
            Phase::One => ParamMask::of(&[ParamGroup::Backbone, ParamGroup::Naturalness]),
            Phase::Two => ParamMask::of(&[ParamGroup::Fidelity]),
            Phase::Three => ParamMask::of(&[ParamGroup::Scale, ParamGroup::Calibration]),
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            Phase::One => Objective::Naturalness,
            _ => Objective::Full,
        }
    }
}

/// Which score the ranking loss is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Calibrated naturalness of each test image; the reference is unused.
    Naturalness,
    /// The complete metric.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub cosine_period_iters: usize,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Validation and checkpoint interval; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn for_phase(phase: Phase) -> Self {
        let (learning_rate, max_iters) = match phase {
            Phase::One => (5e-6, 40_000),
            Phase::Two => (5e-4, 40_000),
            Phase::Three => (1e-3, 10_000),
        };
        TrainConfig {
            phase,
            learning_rate,
            weight_decay: 1e-3,
            cosine_period_iters: 10_000,
            batch_size: 128,
            max_iters,
            seed: 0,
            checkpoint_every: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if self.cosine_period_iters == 0 || self.batch_size == 0 {
            return Err(Error::config("cosine period and batch size must be positive"));
        }
        Ok(())
    }

    /// Cosine-annealed rate at iteration `iter` (0-based), restarting every period.
    pub fn learning_rate_at(&self, iter: usize) -> f64 {
        let period = self.cosine_period_iters as f64;
        let t = (iter % self.cosine_period_iters) as f64;
        0.5 * self.learning_rate * (1.0 + (PI * t / period).cos())
    }
}

/// A triplet whose images are indices into a [`TrainingSet`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndexedTriplet {
    pub reference: usize,
    pub y: usize,
    pub z: usize,
    pub p: f64,
}

/// Decoded images and the triplets over them.
#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub images: Vec<Image>,
    pub triplets: Vec<IndexedTriplet>,
}

impl TrainingSet {
    pub fn validate(&self) -> Result<()> {
        if self.triplets.is_empty() {
            return Err(Error::data("training set has no triplets"));
        }
        for (i, t) in self.triplets.iter().enumerate() {
            let n = self.images.len();
            if t.reference >= n || t.y >= n || t.z >= n {
                return Err(Error::data(format!("triplet {i} refers to a missing image")));
            }
            if ![0.0, 0.5, 1.0].contains(&t.p) {
                return Err(Error::data(format!("triplet {i} has label {} outside {{0, 0.5, 1}}", t.p)));
            }
        }
        Ok(())
    }
}

/// A validation pair. `preference` is 1 when `y` is better, 0 when `z` is,
/// 0.5 for a tie (excluded from accuracy).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndexedPair {
    pub reference: usize,
    pub y: usize,
    pub z: usize,
    pub preference: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ValidationSet {
    pub images: Vec<Image>,
    pub pairs: Vec<IndexedPair>,
}

/// Percentage of non-tied pairs ranked like the ground truth; `None` when
/// every pair is a tie. Exact score ties predict `y`.
pub fn validation_accuracy(params: &ModelParameters, set: &ValidationSet) -> Result<Option<f64>> {
    let mut features: HashMap<usize, ImageFeatures> = HashMap::new();
    let mut judged = 0usize;
    let mut correct = 0usize;
    for pair in &set.pairs {
        if pair.preference == 0.5 {
            continue;
        }
        for i in [pair.reference, pair.y, pair.z] {
            if !features.contains_key(&i) {
                let img = set
                    .images
                    .get(i)
                    .ok_or_else(|| Error::data(format!("validation pair refers to missing image {i}")))?;
                features.insert(i, image_features(img, params)?);
            }
        }
        let d_y = score_features(&features[&pair.reference], &features[&pair.y], params)?.score;
        let d_z = score_features(&features[&pair.reference], &features[&pair.z], params)?.score;
        let predict_y = d_y <= d_z;
        judged += 1;
        if predict_y == (pair.preference == 1.0) {
            correct += 1;
        }
    }
    Ok((judged > 0).then(|| 100.0 * correct as f64 / judged as f64))
}

/// Batch mean of the fidelity loss, recorded on `tape`.
///
/// `cache` holds feature pyramids for a frozen backbone, keyed by image index.
pub fn record_batch_loss<'a>(
    tape: &mut Tape<'a>,
    params: &'a ModelParameters,
    images: &[Image],
    batch: &[IndexedTriplet],
    mask: ParamMask,
    objective: Objective,
    cache: &HashMap<usize, FeaturePyramid>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let mut recorded: HashMap<usize, RecordedImage> = HashMap::new();
    let mut losses = Vec::with_capacity(batch.len());
    for t in batch {
        let needed: &[usize] = match objective {
            Objective::Naturalness => &[t.y, t.z],
            Objective::Full => &[t.reference, t.y, t.z],
        };
        for &i in needed {
            if !recorded.contains_key(&i) {
                let img = images
                    .get(i)
                    .ok_or_else(|| Error::data(format!("triplet refers to missing image {i}")))?;
                let r = record_image(tape, img, params, mask, cache.get(&i))?;
                recorded.insert(i, r);
            }
        }
        let (d_y, d_z) = match objective {
            Objective::Naturalness => (
                record_calibrated_naturalness(tape, &recorded[&t.y], params, mask)?,
                record_calibrated_naturalness(tape, &recorded[&t.z], params, mask)?,
            ),
            Objective::Full => (
                record_score(tape, &recorded[&t.reference], &recorded[&t.y], params, mask)?,
                record_score(tape, &recorded[&t.reference], &recorded[&t.z], params, mask)?,
            ),
        };
        losses.push(record_pair_loss(tape, d_y, d_z, t.p));
    }
    let all = tape.concat(&losses, 0);
    Ok(tape.mean(all))
}

/// Fidelity loss of one pair as a `[1]` tensor. `1 - p_hat` is evaluated as
/// `Phi(-t)` to keep precision in the tails.
fn record_pair_loss(tape: &mut Tape<'_>, d_y: Var, d_z: Var, p: f64) -> Var {
    let gap = tape.sub(d_z, d_y);
    let t = tape.scale(gap, 1.0 / SQRT_2);
    let mut loss = tape.scalar(1.0);
    if p > 0.0 {
        let p_hat = tape.normal_cdf(t);
        let p_hat = tape.offset(p_hat, f64::MIN_POSITIVE);
        let root = tape.sqrt(p_hat);
        let term = tape.scale(root, p.sqrt());
        loss = tape.sub(loss, term);
    }
    if p < 1.0 {
        let neg = tape.neg(t);
        let q_hat = tape.normal_cdf(neg);
        let q_hat = tape.offset(q_hat, f64::MIN_POSITIVE);
        let root = tape.sqrt(q_hat);
        let term = tape.scale(root, (1.0 - p).sqrt());
        loss = tape.sub(loss, term);
    }
    tape.reshape(loss, &[1])
}

/// Loss value and gradients of the trainable parameters, keyed by qualified name.
pub fn loss_and_gradients(
    params: &ModelParameters,
    images: &[Image],
    batch: &[IndexedTriplet],
    mask: ParamMask,
    objective: Objective,
    cache: &HashMap<usize, FeaturePyramid>,
) -> Result<(f64, HashMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let loss = record_batch_loss(&mut tape, params, images, batch, mask, objective, cache)?;
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss became {value}")));
    }
    let grads = tape.backward(loss);
    let mut out = HashMap::new();
    for (name, var) in tape.params() {
        if tape.requires_grad(var) {
            if let Some(g) = grads.get(var) {
                out.insert(name.to_owned(), g.clone());
            }
        }
    }
    Ok((value, out))
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Updates every parameter in `mask` that has a gradient.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &HashMap<String, Tensor>, mask: ParamMask, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let moments = &mut self.moments;
        params.visit_mut(|name, values| {
            let trainable = ParamGroup::of(name).is_some_and(|g| mask.contains(g));
            let Some(g) = grads.get(name).filter(|_| trainable) else {
                return;
            };
            let (m, v) = moments
                .entry(name.to_owned())
                .or_insert_with(|| (vec![0.0; values.len()], vec![0.0; values.len()]));
            for (((w, &gi), mi), vi) in values.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w -= lr * (update + wd * *w);
            }
        });
    }
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub phase: u32,
    pub lr: f64,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

/// `iter,phase,lr,loss,val_accuracy`; the accuracy column is empty between checkpoints.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("iter,phase,lr,loss,val_accuracy\n");
    for r in rows {
        let acc = r.val_accuracy.map(|a| a.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{}\n", r.iter, r.phase, r.lr, r.loss, acc));
    }
    s
}

pub fn write_trace(path: impl AsRef<std::path::Path>, rows: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    Error::write_file(path, trace_csv(rows))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'v> {
    pub validation: Option<&'v ValidationSet>,
    /// Directory for `phase<N>_latest.ckpt` / `phase<N>_best.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    /// Best parameters by validation accuracy, or the final ones without validation.
    pub params: ModelParameters,
    pub trace: Vec<TraceRow>,
    pub best_val_accuracy: Option<f64>,
}

/// Runs one training phase. Only parameters in the phase's mask change.
pub fn train_phase(
    params: ModelParameters,
    data: &TrainingSet,
    config: &TrainConfig,
    options: &TrainOptions<'_>,
) -> Result<PhaseOutcome> {
    config.validate()?;
    data.validate()?;
    params.validate()?;
    let mask = config.phase.mask();
    let objective = config.phase.objective();
    let mut params = params;
    let mut optimizer = AdamW::new(config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let cache = if mask.contains(ParamGroup::Backbone) {
        HashMap::new()
    } else {
        pyramid_cache(&params, data)?
    };

    let mut order: Vec<usize> = (0..data.triplets.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut trace = Vec::with_capacity(config.max_iters);
    let mut best: Option<(f64, ModelParameters)> = None;

    for iter in 0..config.max_iters {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(data.triplets.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data.triplets[order[cursor]]);
            cursor += 1;
        }
        let lr = config.learning_rate_at(iter);
        let (loss, grads) = loss_and_gradients(&params, &data.images, &batch, mask, objective, &cache)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("phase {} iteration {iter}: {m}", config.phase.number())),
                other => other,
            })?;
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!(
                "phase {} iteration {iter}: non-finite gradient for {name}",
                config.phase.number()
            )));
        }
        optimizer.step(&mut params, &grads, mask, lr);

        let last = iter + 1 == config.max_iters;
        let at_checkpoint = config.checkpoint_every > 0 && (iter + 1) % config.checkpoint_every == 0;
        let mut val_accuracy = None;
        if at_checkpoint || last {
            if let Some(val) = options.validation {
                val_accuracy = validation_accuracy(&params, val)?;
                if let Some(acc) = val_accuracy {
                    if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                        best = Some((acc, params.clone()));
                        if let Some(dir) = &options.checkpoint_dir {
                            checkpoint::save(&params, dir.join(format!("phase{}_best.ckpt", config.phase.number())))?;
                        }
                    }
                }
            }
            if let Some(dir) = &options.checkpoint_dir {
                checkpoint::save(&params, dir.join(format!("phase{}_latest.ckpt", config.phase.number())))?;
            }
            log::info!(
                "phase {} iter {} lr {lr:.3e} loss {loss:.6} val {:?}",
                config.phase.number(),
                iter + 1,
                val_accuracy
            );
        }
        trace.push(TraceRow {
            iter: iter + 1,
            phase: config.phase.number(),
            lr,
            loss,
            val_accuracy,
        });
    }

    let best_val_accuracy = best.as_ref().map(|(a, _)| *a);
    let params = best.map(|(_, p)| p).unwrap_or(params);
    Ok(PhaseOutcome {
        params,
        trace,
        best_val_accuracy,
    })
}

fn pyramid_cache(params: &ModelParameters, data: &TrainingSet) -> Result<HashMap<usize, FeaturePyramid>> {
    let mut used: Vec<usize> = data.triplets.iter().flat_map(|t| [t.reference, t.y, t.z]).collect();
    used.sort_unstable();
    used.dedup();
    used.into_iter()
        .map(|i| Ok((i, extract_pyramid(&data.images[i], &params.backbone)?)))
        .collect()
}

/// Mean loss over every triplet of `data`, evaluated in chunks.
pub fn mean_loss(params: &ModelParameters, data: &TrainingSet, objective: Objective) -> Result<f64> {
    data.validate()?;
    let cache = pyramid_cache(params, data)?;
    let mut total = 0.0;
    for chunk in data.triplets.chunks(64) {
        let mut tape = Tape::new();
        let loss = record_batch_loss(&mut tape, params, &data.images, chunk, ParamMask::none(), objective, &cache)?;
        total += tape.scalar_value(loss) * chunk.len() as f64;
    }
    Ok(total / data.triplets.len() as f64)
}

/// Comparison of one analytic gradient entry with its finite-difference estimate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradientReport {
    pub entries: Vec<GradientEntry>,
}

impl GradientReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradientEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Gradient magnitudes below this are compared in absolute terms.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradientCheckOptions {
    pub step: f64,
    /// Random entries per tensor, in addition to the largest-gradient entry.
    pub samples_per_tensor: usize,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for GradientCheckOptions {
    fn default() -> Self {
        GradientCheckOptions {
            step: 1e-3,
            samples_per_tensor: 8,
            seed: 0,
            objective: Objective::Full,
        }
    }
}

/// Central finite-difference check of the batch loss gradient for every
/// parameter whose group is in `mask` and whose name passes `select`.
pub fn gradient_check(
    params: &ModelParameters,
    images: &[Image],
    batch: &[IndexedTriplet],
    mask: ParamMask,
    select: impl Fn(&str) -> bool,
    options: &GradientCheckOptions,
) -> Result<GradientReport> {
    let cache = HashMap::new();
    let (_, grads) = loss_and_gradients(params, images, batch, mask, options.objective, &cache)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    let mut probes: Vec<(String, usize, f64)> = Vec::new();
    params.visit(|name, values| {
        let in_mask = ParamGroup::of(name).is_some_and(|g| mask.contains(g));
        if !in_mask || !select(name) {
            return;
        }
        let g = grads.get(name);
        let at = |i: usize| g.and_then(|g| g.iter().nth(i).copied()).unwrap_or(0.0);
        let mut idx: Vec<usize> = Vec::new();
        if let Some(g) = g {
            let largest = g
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            idx.push(largest);
        }
        if values.len() <= options.samples_per_tensor + 1 {
            idx.extend(0..values.len());
        } else {
            idx.extend((0..options.samples_per_tensor).map(|_| rng.random_range(0..values.len())));
        }
        idx.sort_unstable();
        idx.dedup();
        probes.extend(idx.into_iter().map(|i| (name.to_owned(), i, at(i))));
    });

    let eval = |p: &ModelParameters| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = record_batch_loss(&mut tape, p, images, batch, ParamMask::none(), options.objective, &cache)?;
        Ok(tape.scalar_value(loss))
    };
    let mut work = params.clone();
    let mut entries = Vec::with_capacity(probes.len());
    for (name, index, analytic) in probes {
        let original = read_entry(&work, &name, index);
        set_entry(&mut work, &name, index, original + options.step);
        let plus = eval(&work)?;
        set_entry(&mut work, &name, index, original - options.step);
        let minus = eval(&work)?;
        set_entry(&mut work, &name, index, original);
        let numeric = (plus - minus) / (2.0 * options.step);
        entries.push(GradientEntry {
            relative_error: relative_error(analytic, numeric),
            name,
            index,
            analytic,
            numeric,
        });
    }
    Ok(GradientReport { entries })
}

fn read_entry(params: &ModelParameters, name: &str, index: usize) -> f64 {
    let mut out = f64::NAN;
    params.visit(|n, v| {
        if n == name {
            out = v[index];
        }
    });
    out
}

fn set_entry(params: &mut ModelParameters, name: &str, index: usize, value: f64) {
    params.visit_mut(|n, v| {
        if n == name {
            v[index] = value;
        }
    });
}

/// Order-sensitive digest of the parameters in `group`, for detecting changes.
pub fn group_fingerprint(params: &ModelParameters, group: ParamGroup) -> u64 {
    let mut bytes = Vec::new();
    params.visit(|name, values| {
        if ParamGroup::of(name) == Some(group) {
            bytes.extend_from_slice(name.as_bytes());
            for v in values {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    });
    checkpoint::fnv1a(&bytes)
}

/// Qualified `(name, index)` of every scalar entry that differs between two
/// parameter sets of the same layout.
pub fn changed_entries(a: &ModelParameters, b: &ModelParameters) -> Vec<(String, usize)> {
    let mut before: Vec<(String, Vec<u64>)> = Vec::new();
    a.visit(|n, v| before.push((n.to_owned(), v.iter().map(|x| x.to_bits()).collect())));
    let mut out = Vec::new();
    let mut k = 0;
    b.visit(|n, v| {
        let (name, old) = &before[k];
        debug_assert_eq!(name, n);
        for (i, x) in v.iter().enumerate() {
            if old.get(i) != Some(&x.to_bits()) {
                out.push((n.to_owned(), i));
            }
        }
        k += 1;
    });
    out
}
