use crate::error::{Error, Result};

/// Row-major `H×W` binary label image; `true` is foreground.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Argument(format!(
                "mask {height}×{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Filled disc `(r+0.5-cy)² + (c+0.5-cx)² < radius²` in pixel-centre
    /// coordinates.
    pub fn disc(height: usize, width: usize, centre: (f64, f64), radius: f64) -> Self {
        Self::from_fn(height, width, |r, c| {
            let dy = r as f64 + 0.5 - centre.0;
            let dx = c as f64 + 0.5 - centre.1;
            dy * dy + dx * dx < radius * radius
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    /// Foreground as `0.0`/`1.0` values.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    /// Centroid `(row, col)` of the foreground in pixel-centre coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sr, mut sc) = (0.0, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    n += 1;
                    sr += r as f64 + 0.5;
                    sc += c as f64 + 0.5;
                }
            }
        }
        (n > 0).then(|| (sr / n as f64, sc / n as f64))
    }

    /// 4-connected binary dilation by one pixel.
    pub fn dilate(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| {
            self.get(r, c)
                || (r > 0 && self.get(r - 1, c))
                || (r + 1 < self.height && self.get(r + 1, c))
                || (c > 0 && self.get(r, c - 1))
                || (c + 1 < self.width && self.get(r, c + 1))
        })
    }

    /// Shift by `(dr, dc)`; pixels moved outside are dropped.
    pub fn translate(&self, dr: isize, dc: isize) -> Self {
        let mut out = Self::empty(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.get(r, c) {
                    continue;
                }
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr >= 0 && nc >= 0 && (nr as usize) < self.height && (nc as usize) < self.width {
                    out.set(nr as usize, nc as usize, true);
                }
            }
        }
        out
    }
}
