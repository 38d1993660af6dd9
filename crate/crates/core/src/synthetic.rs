//! Seeded synthetic corpora with known quality ordering.
//!
//! Each content is a smooth random texture with a few hard edges; its
//! variants apply Gaussian blur and additive Gaussian noise whose strength
//! grows with the distortion level, so a lower level is always better and
//! the undistorted reference is best.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{MosRecord, Triplet};
use crate::error::Result;
use crate::eval::{EvalPair, Preference};
use crate::raster::Image;
use crate::train::ranking_label;

/// Blur standard deviation in pixels per distortion level.
pub const BLUR_PER_LEVEL: f64 = 0.45;
/// Noise standard deviation per distortion level.
pub const NOISE_PER_LEVEL: f64 = 0.02;

pub fn texture(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 5]> = (0..6)
        .map(|_| {
            [
                rng.random_range(0.5..4.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.2),
                rng.random_range(0.0..1.0),
            ]
        })
        .collect();
    let base: [f64; 3] = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
    let edge_angle = rng.random_range(0.0..std::f64::consts::TAU);
    let edge_offset = rng.random_range(-0.3..0.3);
    let edge_gain: [f64; 3] = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
    let n = size as f64;
    Image::from_fn(size, size, |(c, i, j)| {
        let (u, v) = (i as f64 / n, j as f64 / n);
        let mut val = base[c];
        for (k, w) in waves.iter().enumerate() {
            let freq = w[0] * std::f64::consts::TAU;
            let phase = w[2] + c as f64 * w[4];
            let dir = w[1];
            let t = freq * (u * dir.cos() + v * dir.sin()) + phase;
            val += w[3] * t.sin() * if k % 2 == 0 { 1.0 } else { 0.7 };
        }
        if (u - 0.5) * edge_angle.cos() + (v - 0.5) * edge_angle.sin() > edge_offset {
            val += edge_gain[c];
        }
        val.clamp(0.0, 1.0)
    })
    .expect("3-channel image in [0, 1]")
}

fn blur(data: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return data.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (c, h, w) = data.dim();
    let clamp = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                tmp[[ch, i, j]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * data[[ch, i, clamp(j as isize + k as isize - radius, w)]])
                    .sum();
            }
        }
    }
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[[ch, i, j]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[[ch, clamp(i as isize + k as isize - radius, h), j]])
                    .sum();
            }
        }
    }
    out
}

/// Blur then noise, both proportional to `level`; level 0 returns the input.
pub fn degrade(image: &Image, level: f64, seed: u64) -> Image {
    let mut data = blur(image.data(), BLUR_PER_LEVEL * level);
    if level > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, NOISE_PER_LEVEL * level).expect("positive std");
        data.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    }
    Image::new(data).expect("values clamped to [0, 1]")
}

#[derive(Clone, Debug)]
pub struct SyntheticVariant {
    pub id: String,
    pub level: f64,
    pub image: Image,
}

#[derive(Clone, Debug)]
pub struct SyntheticContent {
    /// Also the reference image id.
    pub id: String,
    pub reference: Image,
    pub variants: Vec<SyntheticVariant>,
}

/// `count` contents of `size`×`size` pixels, each with one variant per level.
pub fn generate(count: usize, levels: &[f64], size: usize, seed: u64) -> Vec<SyntheticContent> {
    (0..count)
        .map(|c| {
            let content_seed = seed.wrapping_mul(1_000_003).wrapping_add(c as u64);
            let reference = texture(size, content_seed);
            let id = format!("c{c:04}/ref.png");
            let variants = levels
                .iter()
                .enumerate()
                .map(|(k, &level)| SyntheticVariant {
                    id: format!("c{c:04}/d{}.png", k + 1),
                    level,
                    image: degrade(&reference, level, content_seed ^ ((k as u64 + 1) << 32)),
                })
                .collect();
            SyntheticContent { id, reference, variants }
        })
        .collect()
}

/// Every variant against its reference (the reference is always better),
/// and every two variants of a content ordered by level.
pub fn triplets(contents: &[SyntheticContent]) -> Vec<Triplet> {
    let mut out = Vec::new();
    for c in contents {
        for v in &c.variants {
            out.push(Triplet {
                reference_id: c.id.clone(),
                y_id: v.id.clone(),
                z_id: c.id.clone(),
                p: 0.0,
            });
        }
        for (i, a) in c.variants.iter().enumerate() {
            for b in &c.variants[i + 1..] {
                out.push(Triplet {
                    reference_id: c.id.clone(),
                    y_id: a.id.clone(),
                    z_id: b.id.clone(),
                    p: ranking_label(-a.level, -b.level),
                });
            }
        }
    }
    out
}

/// The same comparisons as [`triplets`] as evaluation pairs, tagged
/// `ref>test` and `test-vs-test`.
pub fn eval_pairs(contents: &[SyntheticContent]) -> Vec<EvalPair> {
    triplets(contents)
        .into_iter()
        .map(|t| {
            let ref_pair = t.z_id == t.reference_id;
            EvalPair {
                human_preference: if t.p == 1.0 {
                    Preference::Y
                } else if t.p == 0.0 {
                    Preference::Z
                } else {
                    Preference::Tie
                },
                subset_tag: if ref_pair { "ref>test" } else { "test-vs-test" }.into(),
                reference_id: t.reference_id,
                y_id: t.y_id,
                z_id: t.z_id,
            }
        })
        .collect()
}

/// MOS-style records: `mos = 5 - level`.
pub fn mos_records(contents: &[SyntheticContent]) -> Vec<MosRecord> {
    contents
        .iter()
        .flat_map(|c| {
            c.variants.iter().map(move |v| MosRecord {
                reference_id: c.id.clone(),
                image_id: v.id.clone(),
                mos: 5.0 - v.level,
            })
        })
        .collect()
}

/// Looks up an image by id.
pub fn find<'a>(contents: &'a [SyntheticContent], id: &str) -> Option<&'a Image> {
    contents.iter().find_map(|c| {
        if c.id == id {
            Some(&c.reference)
        } else {
            c.variants.iter().find(|v| v.id == id).map(|v| &v.image)
        }
    })
}

/// Writes every image as PNG under `root`, using the ids as relative paths.
pub fn write_images(contents: &[SyntheticContent], root: &Path) -> Result<()> {
    for c in contents {
        c.reference.save_png(root.join(&c.id))?;
        for v in &c.variants {
            v.image.save_png(root.join(&v.id))?;
        }
    }
    Ok(())
}
