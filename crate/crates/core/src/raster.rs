//! RGB raster in `[0, 1]`, stored channel-first.

use std::path::Path;

use ndarray::{s, Array3, ArrayD};

use crate::error::{Error, Result};

/// An `H x W x 3` image with values in `[0, 1]`, stored as `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Wraps a `[3, H, W]` array, rejecting values outside `[0, 1]` or NaN.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(Error::dim(format!(
                "image must have 3 channels, got {}",
                data.shape()[0]
            )));
        }
        if data.shape()[1] == 0 || data.shape()[2] == 0 {
            return Err(Error::dim("image has an empty spatial extent"));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::data(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Image { data })
    }

    /// Builds an image from a per-pixel function `(channel, row, col) -> value`.
    pub fn from_fn(height: usize, width: usize, f: impl FnMut((usize, usize, usize)) -> f64) -> Result<Self> {
        Self::new(Array3::from_shape_fn((3, height, width), f))
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((3, height, width), value))
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn to_tensor(&self) -> ArrayD<f64> {
        self.data.clone().into_dyn()
    }

    /// Crops symmetrically to the largest size whose sides are multiples of
    /// `multiple`. Odd leftovers drop the extra row/column at the bottom/right.
    pub fn center_crop_to_multiple(&self, multiple: usize) -> Result<Image> {
        let (h, w) = (self.height(), self.width());
        if multiple == 0 {
            return Err(Error::config("crop multiple must be positive"));
        }
        if h < multiple || w < multiple {
            return Err(Error::dim(format!(
                "image {h}x{w} is smaller than one {multiple}x{multiple} patch"
            )));
        }
        let (th, tw) = (h - h % multiple, w - w % multiple);
        if (th, tw) == (h, w) {
            return Ok(self.clone());
        }
        let (top, left) = ((h - th) / 2, (w - tw) / 2);
        Ok(Image {
            data: self
                .data
                .slice(s![.., top..top + th, left..left + tw])
                .to_owned(),
        })
    }

    /// Loads any raster format supported by the `image` crate (PNG is enabled),
    /// converting to 8-bit or 16-bit RGB and scaling to `[0, 1]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let dynimg = ::image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = dynimg.to_rgb16();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut data = Array3::zeros((3, h, w));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = f64::from(px.0[c]) / 65535.0;
            }
        }
        Image::new(data)
    }

    /// Writes an 8-bit PNG (values are rounded to the nearest level).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = (self.height(), self.width());
        let buf = ::image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.data[[c, y as usize, x as usize]] * 255.0).round() as u8;
            ::image::Rgb([px(0), px(1), px(2)])
        });
        crate::error::create_parent(path)?;
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Per-channel means followed by per-channel population variances.
    pub fn color_statistics(&self) -> [f64; 6] {
        let mut out = [0.0; 6];
        for c in 0..3 {
            // sorted sums make the result independent of pixel order
            let mut buf: Vec<f64> = self.data.slice(s![c, .., ..]).iter().copied().collect();
            let n = buf.len() as f64;
            buf.sort_unstable_by(f64::total_cmp);
            let mean = buf.iter().sum::<f64>() / n;
            let var = buf.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            out[c] = mean;
            out[3 + c] = var;
        }
        out
    }
}
