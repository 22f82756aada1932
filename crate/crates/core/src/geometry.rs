//! Axis-aligned pixel regions, overlap measures and proposal grids.
//!
//! Regions are half-open: `Region { x, y, w, h }` covers columns `[x, x + w)`
//! and rows `[y, y + h)`. Width and height are always at least one pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Region {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidRegion(format!("{w}x{h} has an empty side")));
        }
        Ok(Self { x, y, w, h })
    }

    /// Region covering a whole `width` x `height` frame.
    pub fn frame(width: u32, height: u32) -> Result<Self> {
        Self::new(0, 0, width, height)
    }

    #[inline]
    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    #[inline]
    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    #[inline]
    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    pub fn contains(&self, other: &Region) -> bool {
        self.x <= other.x
            && self.y <= other.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn contains_pixel(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    pub fn intersection(&self, other: &Region) -> Option<Region> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| Region { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
    }

    pub fn intersection_area(&self, other: &Region) -> u64 {
        self.intersection(other).map_or(0, |r| r.area())
    }

    /// Clamps to a `width` x `height` frame; `None` when nothing is left.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<Region> {
        if width == 0 || height == 0 {
            return None;
        }
        self.intersection(&Region { x: 0, y: 0, w: width, h: height })
    }

    /// Intersection over union, exact up to one rounding of the final ratio.
    pub fn iou<T: Scalar>(&self, other: &Region) -> T {
        iou(self, other)
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.x, self.y, self.w, self.h)
    }
}

pub fn iou<T: Scalar>(a: &Region, b: &Region) -> T {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    // Both counts are well below 2^53, so the f64 conversion is exact.
    T::lit(inter as f64 / union as f64)
}

/// Smallest region containing every input region.
pub fn bounding_union(regions: &[Region]) -> Result<Region> {
    let (first, rest) = regions.split_first().ok_or(Error::NoRegions)?;
    let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.right(), first.bottom());
    for r in rest {
        x0 = x0.min(r.x);
        y0 = y0.min(r.y);
        x1 = x1.max(r.right());
        y1 = y1.max(r.bottom());
    }
    Ok(Region { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
}

/// Child side length for a shrink factor: `round_half_up(alpha * side)`.
pub fn shrink_side(side: u32, alpha: f64) -> u32 {
    let scaled = (alpha * f64::from(side) + 0.5).floor();
    (scaled.max(0.0) as u32).min(side)
}

/// Child dimensions for `parent` under `alpha`, or `DegenerateRegion`.
pub fn child_dims(parent: &Region, alpha: f64) -> Result<(u32, u32)> {
    let (w, h) = (shrink_side(parent.w, alpha), shrink_side(parent.h, alpha));
    if w == 0 || h == 0 {
        return Err(Error::DegenerateRegion { width: w, height: h });
    }
    Ok((w, h))
}

/// Placement lattice of a child grid inside a parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub parent: Region,
    pub child_w: u32,
    pub child_h: u32,
    pub stride: u32,
    pub cols: u32,
    pub rows: u32,
}

impl Grid {
    pub fn new(parent: Region, alpha: f64, stride: u32) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {alpha} outside (0, 1)")));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("stride must be at least 1".into()));
        }
        let (child_w, child_h) = child_dims(&parent, alpha)?;
        let cols = (parent.w - child_w) / stride + 1;
        let rows = (parent.h - child_h) / stride + 1;
        Ok(Self { parent, child_w, child_h, stride, cols, rows })
    }

    pub fn len(&self) -> usize {
        self.cols as usize * self.rows as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Region at a row-major lattice index.
    pub fn get(&self, index: usize) -> Region {
        let col = (index % self.cols as usize) as u32;
        let row = (index / self.cols as usize) as u32;
        Region {
            x: self.parent.x + col * self.stride,
            y: self.parent.y + row * self.stride,
            w: self.child_w,
            h: self.child_h,
        }
    }

    pub fn regions(&self) -> Vec<Region> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// Every child region on the stride lattice inside `parent`, row-major.
pub fn propose_grid(parent: &Region, alpha: f64, stride: u32) -> Result<Vec<Region>> {
    Ok(Grid::new(*parent, alpha, stride)?.regions())
}
