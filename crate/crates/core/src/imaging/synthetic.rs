//! Seeded single-object scenes: one solid rectangle on a flat background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::scalar::Scalar;

pub type Rgb = [f64; 3];

/// Pixels kept clear between the object and the frame border.
const MARGIN: u32 = 2;
const MIN_COLOR_DISTANCE: f64 = 0.2;

const PALETTE: [Rgb; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.1],
    [0.1, 0.2, 0.9],
    [0.9, 0.9, 0.1],
    [0.9, 0.1, 0.9],
    [0.1, 0.9, 0.9],
    [1.0, 0.6, 0.0],
    [0.6, 0.3, 1.0],
];

/// First `n` colours of the built-in palette (at most 8).
pub fn default_palette(n: usize) -> Vec<Rgb> {
    PALETTE.iter().take(n).copied().collect()
}

fn color_distance(a: &Rgb, b: &Rgb) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: u32,
    pub height: u32,
    pub class_count: usize,
    pub palette: Vec<Rgb>,
    /// Inclusive bounds on object area as a fraction of the frame.
    pub area_range: (f64, f64),
    pub background: Rgb,
}

impl SyntheticSpec {
    /// Spec using the built-in palette and a mid-gray background.
    pub fn new(width: u32, height: u32, class_count: usize, area_range: (f64, f64)) -> Self {
        Self {
            width,
            height,
            class_count,
            palette: default_palette(class_count),
            area_range,
            background: [0.5, 0.5, 0.5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.class_count == 0 {
            return bad("class_count must be at least 1".into());
        }
        if self.palette.len() != self.class_count {
            return bad(format!(
                "palette has {} colours for {} classes",
                self.palette.len(),
                self.class_count
            ));
        }
        let (lo, hi) = self.area_range;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return bad(format!("area range ({lo}, {hi}) must satisfy 0 < lo < hi < 1"));
        }
        let in_unit = |c: &Rgb| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.background) || !self.palette.iter().all(in_unit) {
            return bad("colours must lie in [0, 1]".into());
        }
        for (i, c) in self.palette.iter().enumerate() {
            // Black is what blackening writes; it must never read as an object.
            if color_distance(c, &self.background) < MIN_COLOR_DISTANCE
                || color_distance(c, &[0.0; 3]) < MIN_COLOR_DISTANCE
            {
                return bad(format!("palette colour {i} too close to background or black"));
            }
            for (j, d) in self.palette.iter().enumerate().skip(i + 1) {
                if color_distance(c, d) < MIN_COLOR_DISTANCE {
                    return bad(format!("palette colours {i} and {j} closer than {MIN_COLOR_DISTANCE}"));
                }
            }
        }
        if self.width <= 2 * MARGIN || self.height <= 2 * MARGIN {
            return bad(format!("frame {}x{} leaves no room inside the margin", self.width, self.height));
        }
        Ok(())
    }

    /// All `(w, h)` candidates: per width, the inclusive height interval.
    fn size_options(&self) -> Vec<(u32, u32, u32)> {
        let area = f64::from(self.width) * f64::from(self.height);
        let (lo, hi) = self.area_range;
        let max_w = self.width - 2 * MARGIN;
        let max_h = self.height - 2 * MARGIN;
        let fits = |w: u32, h: u32| {
            let f = f64::from(w) * f64::from(h) / area;
            f >= lo && f <= hi
        };
        let mut out = Vec::new();
        for w in 1..=max_w {
            let mut h_lo = ((lo * area / f64::from(w)).ceil().max(1.0) as u32).min(max_h + 1);
            let mut h_hi = ((hi * area / f64::from(w)).floor() as u32).min(max_h);
            // Nudge past floating-point rounding at the interval ends.
            while h_lo <= max_h && !fits(w, h_lo) && h_lo <= h_hi {
                h_lo += 1;
            }
            while h_hi >= h_lo && h_hi > 0 && !fits(w, h_hi) {
                h_hi -= 1;
            }
            if h_lo <= h_hi && h_hi >= 1 && fits(w, h_lo) {
                out.push((w, h_lo, h_hi));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample<T> {
    pub image: Image<T>,
    pub truth: Region,
    pub class_id: usize,
}

/// Draws one scene. Deterministic in `(spec, seed)`.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticSample<T>> {
    spec.validate()?;
    let options = spec.size_options();
    if options.is_empty() {
        return Err(Error::InfeasibleSpec(format!(
            "no rectangle with area fraction in {:?} fits a {}x{} frame with a {MARGIN}px margin",
            spec.area_range, spec.width, spec.height
        )));
    }
    // Prefer moderate aspect ratios when the range allows it.
    let moderate: Vec<(u32, u32, u32)> = options
        .iter()
        .filter_map(|&(w, lo, hi)| {
            let lo = lo.max(w.div_ceil(2));
            let hi = hi.min(2 * w);
            (lo <= hi).then_some((w, lo, hi))
        })
        .collect();
    let options = if moderate.is_empty() { options } else { moderate };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_id = rng.random_range(0..spec.class_count);
    let (w, h_lo, h_hi) = options[rng.random_range(0..options.len())];
    let h = rng.random_range(h_lo..=h_hi);
    let x = rng.random_range(MARGIN..=spec.width - MARGIN - w);
    let y = rng.random_range(MARGIN..=spec.height - MARGIN - h);
    let truth = Region::new(x, y, w, h)?;

    let to_t = |c: &Rgb| c.iter().map(|v| T::lit(*v)).collect::<Vec<T>>();
    let mut image = Image::filled(spec.width, spec.height, &to_t(&spec.background))?;
    image.fill_region(&truth, &to_t(&spec.palette[class_id]));
    Ok(SyntheticSample { image, truth, class_id })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_palette_is_valid() {
        SyntheticSpec::new(64, 64, 8, (0.1, 0.3)).validate().unwrap();
    }

    #[test]
    fn narrow_area_range_is_honoured() {
        let spec = SyntheticSpec::new(128, 128, 3, (0.2499, 0.25));
        for seed in 0..20 {
            let s = generate_synthetic::<f64>(&spec, seed).unwrap();
            let area = s.truth.area() as f64;
            assert!((0.2499 * 16384.0..=0.25 * 16384.0).contains(&area), "area {area}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::new(64, 48, 4, (0.1, 0.4));
        let a = generate_synthetic::<f32>(&spec, 99).unwrap();
        let b = generate_synthetic::<f32>(&spec, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_yields_class_zero() {
        let spec = SyntheticSpec::new(32, 32, 1, (0.1, 0.3));
        for seed in 0..10 {
            assert_eq!(generate_synthetic::<f64>(&spec, seed).unwrap().class_id, 0);
        }
    }

    #[test]
    fn pixels_are_object_or_background() {
        let spec = SyntheticSpec::new(40, 30, 2, (0.15, 0.35));
        for seed in 0..10 {
            let s = generate_synthetic::<f64>(&spec, seed).unwrap();
            let object = spec.palette[s.class_id];
            assert!(s.truth.x >= 2 && s.truth.y >= 2);
            assert!(s.truth.right() <= 38 && s.truth.bottom() <= 28);
            for y in 0..30 {
                for x in 0..40 {
                    let want = if s.truth.contains_pixel(x, y) { object } else { spec.background };
                    assert_eq!(s.image.pixel(x, y), &want[..]);
                }
            }
        }
    }

    #[test]
    fn infeasible_specs_rejected() {
        let too_big = SyntheticSpec::new(10, 10, 1, (0.9, 0.95));
        assert!(matches!(generate_synthetic::<f64>(&too_big, 0), Err(Error::InfeasibleSpec(_))));
        let tiny = SyntheticSpec::new(4, 4, 1, (0.1, 0.2));
        assert!(matches!(generate_synthetic::<f64>(&tiny, 0), Err(Error::InfeasibleSpec(_))));
        let mut clash = SyntheticSpec::new(32, 32, 2, (0.1, 0.2));
        clash.palette[1] = [0.85, 0.15, 0.1];
        assert!(clash.validate().is_err());
        let mut dark = SyntheticSpec::new(32, 32, 1, (0.1, 0.2));
        dark.palette[0] = [0.05, 0.05, 0.1];
        assert!(dark.validate().is_err());
    }
}
