//! Pixel rasters and the two image edits the search relies on: zeroing a
//! region out, and cropping a region and resampling it to a model input size.

mod synthetic;

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::scalar::Scalar;

pub use synthetic::{default_palette, generate_synthetic, Rgb, SyntheticSample, SyntheticSpec};

/// Dense row-major raster with interleaved channels and intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: u32,
    height: u32,
    channels: u32,
    pixels: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn from_pixels(width: u32, height: u32, channels: u32, pixels: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty raster {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("unsupported channel count {channels}")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(Error::InvalidImage(format!(
                "expected {expected} values, got {}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::InvalidImage(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, channels, pixels })
    }

    /// Raster where every pixel has the colour `color` (one value per channel).
    pub fn filled(width: u32, height: u32, color: &[T]) -> Result<Self> {
        let n = width as usize * height as usize;
        let pixels = color.iter().copied().cycle().take(n * color.len()).collect();
        Self::from_pixels(width, height, color.len() as u32, pixels)
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> u32 {
        self.channels
    }

    #[inline]
    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn frame(&self) -> Region {
        Region { x: 0, y: 0, w: self.width, h: self.height }
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    /// Channel values of one pixel.
    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> &[T] {
        let o = self.offset(x, y);
        &self.pixels[o..o + self.channels as usize]
    }

    pub fn pixel_iter(&self) -> impl Iterator<Item = &[T]> + '_ {
        self.pixels.chunks_exact(self.channels as usize)
    }

    /// Fills a region (clamped to the frame) with a colour.
    pub fn fill_region(&mut self, region: &Region, color: &[T]) {
        assert_eq!(color.len(), self.channels as usize, "colour/channel mismatch");
        let Some(r) = region.clamp_to(self.width, self.height) else {
            return;
        };
        for y in r.y..r.bottom() {
            let start = self.offset(r.x, y);
            let end = self.offset(r.right() - 1, y) + self.channels as usize;
            for px in self.pixels[start..end].chunks_exact_mut(self.channels as usize) {
                px.copy_from_slice(color);
            }
        }
    }

    /// Converts the intensity type.
    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            pixels: self.pixels.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Reads an 8-bit PNG. Grayscale files stay single-channel, anything
    /// else becomes RGB; alpha is dropped. Intensities are `value / 255`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let read_err = |message: String| Error::ImageRead { path: path.to_path_buf(), message };
        let decoded = image::open(path).map_err(|e| read_err(e.to_string()))?;
        let gray = matches!(
            decoded.color(),
            image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16
        );
        let (width, height, channels, bytes) = if gray {
            let buf = decoded.to_luma8();
            (buf.width(), buf.height(), 1, buf.into_raw())
        } else {
            let buf = decoded.to_rgb8();
            (buf.width(), buf.height(), 3, buf.into_raw())
        };
        let pixels = bytes.into_iter().map(|b| T::lit(f64::from(b) / 255.0)).collect();
        Self::from_pixels(width, height, channels, pixels).map_err(|e| read_err(e.to_string()))
    }

    /// Writes an 8-bit PNG, rounding intensities to the nearest level.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &bytes, self.width, self.height, color).map_err(|e| {
            Error::Export { path: path.to_path_buf(), message: e.to_string() }
        })
    }
}

/// Copy of `img` with every pixel inside `region` set to zero in all channels.
pub fn blacken<T: Scalar>(img: &Image<T>, region: &Region) -> Image<T> {
    let mut out = img.clone();
    let zeros = vec![T::zero(); img.channels as usize];
    out.fill_region(region, &zeros);
    out
}

/// Crops `region` out of `img` and resamples it to `target` with bilinear
/// interpolation on a corner-aligned grid (output corners hit source corners).
pub fn crop_rescale<T: Scalar>(img: &Image<T>, region: &Region, target: (u32, u32)) -> Result<Image<T>> {
    let (tw, th) = target;
    if tw == 0 || th == 0 {
        return Err(Error::InvalidImage(format!("target size {tw}x{th}")));
    }
    let src = region.clamp_to(img.width, img.height).ok_or(Error::EmptyCrop)?;
    let ch = img.channels as usize;

    let xs = sample_axis(src.x, src.w, tw);
    let ys = sample_axis(src.y, src.h, th);

    let mut pixels = Vec::with_capacity(tw as usize * th as usize * ch);
    for &(y0, y1, fy) in &ys {
        let fy = T::lit(fy);
        for &(x0, x1, fx) in &xs {
            let fx = T::lit(fx);
            let (p00, p10) = (img.pixel(x0, y0), img.pixel(x1, y0));
            let (p01, p11) = (img.pixel(x0, y1), img.pixel(x1, y1));
            for c in 0..ch {
                let top = lerp(p00[c], p10[c], fx);
                let bottom = lerp(p01[c], p11[c], fx);
                let lo = p00[c].min(p10[c]).min(p01[c].min(p11[c]));
                let hi = p00[c].max(p10[c]).max(p01[c].max(p11[c]));
                pixels.push(lerp(top, bottom, fy).max(lo).min(hi));
            }
        }
    }
    Ok(Image { width: tw, height: th, channels: img.channels, pixels })
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    a + (b - a) * t
}

/// Per output index: the two source coordinates and the weight of the second.
fn sample_axis(start: u32, len: u32, out: u32) -> Vec<(u32, u32, f64)> {
    (0..out)
        .map(|i| {
            let pos = if out == 1 {
                f64::from(len - 1) / 2.0
            } else {
                f64::from(i) * f64::from(len - 1) / f64::from(out - 1)
            };
            let lo = (pos.floor() as u32).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (start + lo, start + hi, pos - f64::from(lo))
        })
        .collect()
}
