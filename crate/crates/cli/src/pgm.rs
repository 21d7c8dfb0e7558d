use std::path::Path;

use contourflow::geometry::Point2;
use contourflow::{Error, Result};

/// 8-bit grayscale image, row-major.
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    /// Linear stretch of `values` to `[0, 255]`; a constant input maps to 0.
    pub fn stretched(width: usize, height: usize, values: &[f32]) -> Self {
        let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        let pixels = values
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn set(&mut self, x: isize, y: isize, v: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = v;
        }
    }

    /// Draws straight segments through `points`, sampled at quarter-pixel steps.
    pub fn polyline(&mut self, points: &[Point2], v: u8) {
        for w in points.windows(2) {
            let steps = (w[0].dist(w[1]) / 0.25).ceil().max(1.0) as usize;
            for k in 0..=steps {
                let p = w[0].lerp(w[1], k as f64 / steps as f64);
                self.set(p.x.round() as isize, p.y.round() as isize, v);
            }
        }
    }

    /// Plus-shaped marker inside the 3×3 block centered on `p`.
    pub fn cross(&mut self, p: Point2, v: u8) {
        let (x, y) = (p.x.round() as isize, p.y.round() as isize);
        for (dx, dy) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            self.set(x + dx, y + dy, v);
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
