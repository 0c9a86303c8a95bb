//! Binary masks, boxes and the rigid template transforms (flips, quarter turns).

use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel coordinates, `x`/`y` being the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x as f64
            && py >= self.y as f64
            && px <= (self.x + self.w as i64 - 1) as f64
            && py <= (self.y + self.h as i64 - 1) as f64
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x >= 0
            && self.y >= 0
            && self.x as usize + self.w <= width
            && self.y as usize + self.h <= height
    }
}

/// Dense binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    /// Panics if `bits.len() != width * height`.
    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height, "mask bit count");
        Mask {
            width,
            height,
            bits,
        }
    }

    /// Builds the tight mask of a set of `(x, y)` points, returning it with
    /// the top-left offset of its box.
    pub fn from_points(points: &[(i64, i64)]) -> Option<(Mask, (i64, i64))> {
        let min_x = points.iter().map(|p| p.0).min()?;
        let min_y = points.iter().map(|p| p.1).min()?;
        let max_x = points.iter().map(|p| p.0).max()?;
        let max_y = points.iter().map(|p| p.1).max()?;
        let w = (max_x - min_x + 1) as usize;
        let h = (max_y - min_y + 1) as usize;
        let mut m = Mask::new(w, h);
        for &(x, y) in points {
            m.set((x - min_x) as usize, (y - min_y) as usize, true);
        }
        Some((m, (min_x, min_y)))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Set cells as `(x, y)` in local coordinates.
    pub fn points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    /// Mean of set-cell coordinates, local frame. `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sx, mut sy) = (0.0, 0.0);
        for (x, y) in self.points() {
            n += 1;
            sx += x as f64;
            sy += y as f64;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn transformed(&self, t: &Transform) -> Mask {
        let (w, h) = t.output_extent(self.width, self.height);
        let mut out = Mask::new(w, h);
        for (x, y) in self.points() {
            let (nx, ny) = t.map(x, y, self.width, self.height);
            out.set(nx, ny, true);
        }
        out
    }
}

/// Rigid template transform: optional flips followed by `rot90` counter-clockwise
/// quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rot90: u8,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip_h: false,
        flip_v: false,
        rot90: 0,
    };

    pub fn output_extent(&self, w: usize, h: usize) -> (usize, usize) {
        if self.rot90 % 2 == 1 {
            (h, w)
        } else {
            (w, h)
        }
    }

    /// Maps a cell of a `w`×`h` grid to its position in the transformed grid.
    pub fn map(&self, x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
        let mut x = if self.flip_h { w - 1 - x } else { x };
        let mut y = if self.flip_v { h - 1 - y } else { y };
        let (mut cw, mut ch) = (w, h);
        for _ in 0..self.rot90 % 4 {
            // counter-clockwise: (x, y) in cw×ch -> (y, cw-1-x) in ch×cw
            let nx = y;
            let ny = cw - 1 - x;
            x = nx;
            y = ny;
            std::mem::swap(&mut cw, &mut ch);
        }
        (x, y)
    }
}
