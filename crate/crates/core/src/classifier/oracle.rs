//! Deterministic stand-in classifier for synthetic scenes.
//!
//! Each class owns a palette colour. The visible fraction `x` of pixels
//! matching that colour drives a unimodal raw score
//! `f(x) = (x / peak) * exp(1 - x / peak)`, which is 1 at `x = peak` and
//! falls off on both sides. A background pseudo-class with constant mass
//! `background_mass` is appended so an all-black input is well defined.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Classifier, ResponseVector};
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::imaging::{default_palette, Image, Rgb};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleParams {
    pub peak_fraction: f64,
    pub background_mass: f64,
    pub palette: Vec<Rgb>,
    /// Per-channel distance within which a pixel counts as a palette colour.
    pub color_tolerance: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            peak_fraction: 0.3,
            background_mass: 0.25,
            palette: default_palette(2),
            color_tolerance: 0.05,
        }
    }
}

impl OracleParams {
    pub fn with_palette(palette: Vec<Rgb>) -> Self {
        Self { palette, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidConfig(m));
        if !(self.peak_fraction > 0.0 && self.peak_fraction < 1.0) {
            return invalid(format!("peak_fraction {} outside (0, 1)", self.peak_fraction));
        }
        if !(self.background_mass > 0.0 && self.background_mass.is_finite()) {
            return invalid(format!("background_mass {} must be positive", self.background_mass));
        }
        if !(0.0..0.5).contains(&self.color_tolerance) {
            return invalid(format!("color_tolerance {} outside [0, 0.5)", self.color_tolerance));
        }
        if self.palette.is_empty() {
            return invalid("oracle palette is empty".into());
        }
        Ok(())
    }

    /// Number of object classes (the background class is extra).
    pub fn object_classes(&self) -> usize {
        self.palette.len()
    }
}

fn peaked<T: Scalar>(x: T, peak: T) -> T {
    if x <= T::zero() {
        return T::zero();
    }
    let r = x / peak;
    r * (T::one() - r).exp()
}

/// Response of the oracle to `img`; the last entry is the background class.
pub fn oracle_response<T: Scalar>(img: &Image<T>, params: &OracleParams) -> Result<ResponseVector<T>> {
    respond(img, params, None)
}

fn check_channels<T: Scalar>(img: &Image<T>) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Classifier(format!(
            "oracle expects 3 channels, image has {}",
            img.channels()
        )));
    }
    Ok(())
}

/// Palette matcher in the image's scalar type.
struct Matcher<T> {
    palette: Vec<[T; 3]>,
    tol: T,
}

impl<T: Scalar> Matcher<T> {
    fn new(params: &OracleParams) -> Self {
        let palette = params
            .palette
            .iter()
            .map(|c| [T::lit(c[0]), T::lit(c[1]), T::lit(c[2])])
            .collect();
        Self { palette, tol: T::lit(params.color_tolerance) }
    }

    /// First palette entry within tolerance of `px`.
    fn class_of(&self, px: &[T]) -> Option<usize> {
        self.palette
            .iter()
            .position(|col| col.iter().zip(px).all(|(a, b)| (*a - *b).abs() <= self.tol))
    }
}

fn respond<T: Scalar>(
    img: &Image<T>,
    params: &OracleParams,
    labels: Option<Arc<[String]>>,
) -> Result<ResponseVector<T>> {
    check_channels(img)?;
    let matcher = Matcher::new(params);
    let mut counts = vec![0u64; params.palette.len()];
    for px in img.pixel_iter() {
        if let Some(c) = matcher.class_of(px) {
            counts[c] += 1;
        }
    }
    from_counts(&counts, u64::from(img.width()) * u64::from(img.height()), params, labels)
}

fn from_counts<T: Scalar>(
    counts: &[u64],
    total: u64,
    params: &OracleParams,
    labels: Option<Arc<[String]>>,
) -> Result<ResponseVector<T>> {
    let total = T::lit(total as f64);
    let peak = T::lit(params.peak_fraction);
    let raw: Vec<T> = counts
        .iter()
        .map(|&n| peaked(T::lit(n as f64) / total, peak))
        .collect();
    let beta = T::lit(params.background_mass);
    let denom = beta + raw.iter().copied().sum::<T>();
    let mut probs: Vec<T> = raw.into_iter().map(|f| f / denom).collect();
    probs.push(beta / denom);
    ResponseVector::new(probs, labels)
}

/// Per-class summed-area tables over an image, `(w + 1) * (h + 1)` each.
struct ClassTables {
    stride: usize,
    tables: Vec<Vec<u32>>,
}

impl ClassTables {
    fn build<T: Scalar>(img: &Image<T>, matcher: &Matcher<T>) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let stride = w + 1;
        let mut tables = vec![vec![0u32; stride * (h + 1)]; matcher.palette.len()];
        let mut row = vec![0u32; matcher.palette.len()];
        for (i, px) in img.pixel_iter().enumerate() {
            let (x, y) = (i % w, i / w);
            if x == 0 {
                row.iter_mut().for_each(|r| *r = 0);
            }
            if let Some(c) = matcher.class_of(px) {
                row[c] += 1;
            }
            for (t, r) in tables.iter_mut().zip(&row) {
                t[(y + 1) * stride + x + 1] = t[y * stride + x + 1] + r;
            }
        }
        Self { stride, tables }
    }

    fn count(&self, class: usize, r: &Region) -> u64 {
        let t = &self.tables[class];
        let (x0, y0) = (r.x as usize, r.y as usize);
        let (x1, y1) = (r.right() as usize, r.bottom() as usize);
        let s = self.stride;
        u64::from(t[y1 * s + x1] + t[y0 * s + x0] - t[y0 * s + x1] - t[y1 * s + x0])
    }
}

/// [`Classifier`] wrapper around [`oracle_response`] with a nominal input size.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    params: OracleParams,
    input: (u32, u32),
    labels: Arc<[String]>,
}

impl OracleClassifier {
    pub const DEFAULT_INPUT: (u32, u32) = (32, 32);

    pub fn new(params: OracleParams) -> Result<Self> {
        Self::with_input(params, Self::DEFAULT_INPUT)
    }

    pub fn with_input(params: OracleParams, input: (u32, u32)) -> Result<Self> {
        params.validate()?;
        if input.0 == 0 || input.1 == 0 {
            return Err(Error::InvalidConfig("oracle input size must be positive".into()));
        }
        let labels = (0..params.object_classes())
            .map(|c| format!("class{c}"))
            .chain(std::iter::once("background".to_string()))
            .collect::<Vec<_>>()
            .into();
        Ok(Self { params, input, labels })
    }

    pub fn params(&self) -> &OracleParams {
        &self.params
    }
}

impl<T: Scalar> Classifier<T> for OracleClassifier {
    fn input_dims(&self) -> (u32, u32) {
        self.input
    }

    fn class_count(&self) -> usize {
        self.params.object_classes() + 1
    }

    fn labels(&self) -> Option<&[String]> {
        Some(&self.labels)
    }

    fn classify(&self, img: &Image<T>) -> Result<ResponseVector<T>> {
        respond(img, &self.params, Some(self.labels.clone()))
    }

    /// Counts palette pixels once per image and adjusts per region, so each
    /// proposal costs O(classes) instead of a full copy and scan.
    fn classify_blackened_batch(&self, img: &Image<T>, regions: &[Region]) -> Result<Vec<ResponseVector<T>>> {
        check_channels(img)?;
        let matcher = Matcher::new(&self.params);
        let black_class = matcher.class_of(&[T::zero(); 3]);
        let tables = ClassTables::build(img, &matcher);
        let frame = img.frame();
        let total = frame.area();
        let whole: Vec<u64> = (0..matcher.palette.len()).map(|c| tables.count(c, &frame)).collect();
        let mut counts = vec![0u64; whole.len()];
        regions
            .iter()
            .enumerate()
            .map(|(index, r)| {
                let clipped = r.intersection(&frame);
                for (c, n) in counts.iter_mut().enumerate() {
                    *n = whole[c];
                    if let Some(cut) = &clipped {
                        *n -= tables.count(c, cut);
                        if black_class == Some(c) {
                            *n += cut.area();
                        }
                    }
                }
                from_counts(&counts, total, &self.params, Some(self.labels.clone()))
                    .map_err(|e| Error::Batch { index, source: Box::new(e) })
            })
            .collect()
    }
}
