use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Real};

/// Half-open rectangle `[r0, r1) × [c0, c1)`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Rect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl From<[usize; 4]> for Rect {
    fn from([r0, c0, r1, c1]: [usize; 4]) -> Self {
        Self { r0, c0, r1, c1 }
    }
}

impl From<Rect> for [usize; 4] {
    fn from(r: Rect) -> Self {
        [r.r0, r.c0, r.r1, r.c1]
    }
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.r0 && r < self.r1 && c >= self.c0 && c < self.c1
    }

    pub fn area(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }
}

/// Per-pixel box indicator: 1 inside the union of the rectangles, 0 outside.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoxMask {
    height: usize,
    width: usize,
    rects: Vec<Rect>,
    inside: Vec<bool>,
}

impl BoxMask {
    pub fn new(height: usize, width: usize, rects: Vec<Rect>) -> Result<Self> {
        for r in &rects {
            if r.r0 > r.r1 || r.c0 > r.c1 || r.r1 > height || r.c1 > width {
                return Err(Error::shape(
                    "box_mask",
                    format!("rectangle {r:?} outside a {height}×{width} image"),
                ));
            }
        }
        let mut inside = vec![false; height * width];
        for r in &rects {
            for row in r.r0..r.r1 {
                inside[row * width + r.c0..row * width + r.c1].fill(true);
            }
        }
        Ok(Self {
            height,
            width,
            rects,
            inside,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    /// Row-major indicator.
    pub fn inside(&self) -> &[bool] {
        &self.inside
    }

    pub fn is_inside(&self, r: usize, c: usize) -> bool {
        self.inside[r * self.width + c]
    }

    pub fn count_inside(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    /// The indicator as a `(H, W)` grid of 0/1 values.
    pub fn to_grid<T: Real>(&self) -> Grid<T> {
        let data = self
            .inside
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        Grid::new(&[self.height, self.width], data).expect("sized")
    }

    /// True when every foreground pixel of `mask` lies inside the box.
    pub fn covers<T: Real>(&self, mask: &Grid<T>) -> bool {
        mask.data()
            .iter()
            .zip(&self.inside)
            .all(|(&m, &inside)| m <= T::zero() || inside)
    }
}
