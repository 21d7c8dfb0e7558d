//! Contour extraction: geodesic paths through the predicted points on the predicted
//! distance map, smoothed by a spline and resampled to 21 points.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalized_to_pixel, DistanceMap, GridSpec, Point2, Polyline, SplineCurve};

/// Added to every distance-map value to form the path cost.
pub const COST_EPSILON: f64 = 1e-3;
pub const CONTOUR_POINTS: usize = 21;
/// Index of the apex within a [`Contour21`].
pub const CONTOUR_APEX: usize = 10;
/// Knots taken from the geodesic path before spline fitting.
pub const SPLINE_KNOTS: usize = 15;

/// `(row, col)`.
pub type Pixel = (usize, usize);

const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Clone, Debug, PartialEq)]
pub struct CostMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl CostMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape(format!(
                "cost map has {} values for a {height}x{width} grid",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::invalid(format!(
                "cost values must be finite and positive, got {v}"
            )));
        }
        Ok(CostMap {
            height,
            width,
            values,
        })
    }

    pub fn from_distance_map(map: &DistanceMap) -> Result<Self> {
        CostMap::new(
            map.grid.height,
            map.grid.width,
            map.values.iter().map(|v| v + COST_EPSILON).collect(),
        )
    }

    /// Cost map from raw network output, with negative values clamped to zero.
    pub fn from_prediction(grid: &GridSpec, values: &[f32]) -> Result<Self> {
        CostMap::new(
            grid.height,
            grid.width,
            values
                .iter()
                .map(|&v| (v as f64).max(0.0) + COST_EPSILON)
                .collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, (r, c): Pixel) -> f64 {
        self.values[r * self.width + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn contains(&self, (r, c): Pixel) -> bool {
        r < self.height && c < self.width
    }

    /// Weight of the 8-neighborhood step `u → v`.
    pub fn edge_weight(&self, u: Pixel, v: Pixel) -> f64 {
        let dr = u.0.abs_diff(v.0);
        let dc = u.1.abs_diff(v.1);
        let step = if dr + dc == 2 {
            std::f64::consts::SQRT_2
        } else {
            1.0
        };
        step * (self.get(u) + self.get(v)) / 2.0
    }

    fn neighbors(&self, (r, c): Pixel) -> impl Iterator<Item = Pixel> + '_ {
        NEIGHBORS.iter().filter_map(move |&(dr, dc)| {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            (nr >= 0 && nc >= 0 && (nr as usize) < self.height && (nc as usize) < self.width)
                .then_some((nr as usize, nc as usize))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelPath {
    pub pixels: Vec<Pixel>,
    pub cost: f64,
}

impl PixelPath {
    pub fn points(&self) -> Vec<Point2> {
        self.pixels
            .iter()
            .map(|&(r, c)| Point2::new(c as f64, r as f64))
            .collect()
    }
}

/// Sum of edge weights along `pixels`; fails on a non-adjacent step.
pub fn path_cost(cost: &CostMap, pixels: &[Pixel]) -> Result<f64> {
    let mut total = 0.0;
    for w in pixels.windows(2) {
        let (u, v) = (w[0], w[1]);
        if u == v || u.0.abs_diff(v.0) > 1 || u.1.abs_diff(v.1) > 1 {
            return Err(Error::invalid(format!(
                "{u:?} -> {v:?} is not an 8-neighbor step"
            )));
        }
        total += cost.edge_weight(u, v);
    }
    Ok(total)
}

#[derive(PartialEq)]
struct Entry {
    dist: f64,
    pixel: Pixel,
}

impl Eq for Entry {}

impl Ord for Entry {
    // Reversed so the max-heap pops the smallest distance, then the smallest (row, col).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.pixel.cmp(&self.pixel))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimal-cost 8-connected path from `src` to `dst`.
pub fn dijkstra_path(cost: &CostMap, src: Pixel, dst: Pixel) -> Result<PixelPath> {
    for p in [src, dst] {
        if !cost.contains(p) {
            return Err(Error::invalid(format!(
                "pixel {p:?} outside the {}x{} grid",
                cost.height, cost.width
            )));
        }
    }
    let idx = |(r, c): Pixel| r * cost.width + c;
    let mut dist = vec![f64::INFINITY; cost.values.len()];
    let mut prev: Vec<Option<Pixel>> = vec![None; cost.values.len()];
    let mut done = vec![false; cost.values.len()];
    let mut heap = BinaryHeap::new();
    dist[idx(src)] = 0.0;
    heap.push(Entry {
        dist: 0.0,
        pixel: src,
    });
    while let Some(Entry { dist: d, pixel: u }) = heap.pop() {
        if done[idx(u)] {
            continue;
        }
        done[idx(u)] = true;
        if u == dst {
            break;
        }
        for v in cost.neighbors(u) {
            let nd = d + cost.edge_weight(u, v);
            if nd < dist[idx(v)] {
                dist[idx(v)] = nd;
                prev[idx(v)] = Some(u);
                heap.push(Entry { dist: nd, pixel: v });
            }
        }
    }
    if !done[idx(dst)] {
        return Err(Error::Internal(format!("{dst:?} unreachable from {src:?}")));
    }
    let mut pixels = vec![dst];
    let mut cur = dst;
    while let Some(p) = prev[idx(cur)] {
        pixels.push(p);
        cur = p;
    }
    pixels.reverse();
    Ok(PixelPath {
        pixels,
        cost: dist[idx(dst)],
    })
}

/// 21 contour points: BP1 at 0, apex at 10, BP2 at 20, ten equal arc steps per side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct Contour21 {
    points: Vec<Point2>,
}

impl TryFrom<Vec<Point2>> for Contour21 {
    type Error = Error;

    fn try_from(points: Vec<Point2>) -> Result<Self> {
        Contour21::new(points)
    }
}

impl From<Contour21> for Vec<Point2> {
    fn from(c: Contour21) -> Self {
        c.points
    }
}

impl Contour21 {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.len() != CONTOUR_POINTS {
            return Err(Error::shape(format!(
                "contour needs {CONTOUR_POINTS} points, got {}",
                points.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::invalid(format!("non-finite contour point {p:?}")));
        }
        Ok(Contour21 { points })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn bp1(&self) -> Point2 {
        self.points[0]
    }

    pub fn apex(&self) -> Point2 {
        self.points[CONTOUR_APEX]
    }

    pub fn bp2(&self) -> Point2 {
        self.points[CONTOUR_POINTS - 1]
    }

    /// The 18 points that are not landmarks.
    pub fn without_landmarks(&self) -> Vec<Point2> {
        self.points
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != 0 && i != CONTOUR_APEX && i != CONTOUR_POINTS - 1)
            .map(|(_, p)| *p)
            .collect()
    }
}

/// Samples `n` points at equal arc steps along straight segments through `pts`.
fn sample_polyline(pts: &[Point2], n: usize) -> Result<Vec<Point2>> {
    match Polyline::new(pts.to_vec()) {
        Ok(poly) => poly.resample_points(n),
        // Only a single distinct point is left.
        Err(_) => Ok(vec![pts[0]; n]),
    }
}

/// Knots closer than this (pixels) are merged; the turnaround of a folded path can
/// leave two samples a rounding error apart.
const KNOT_MERGE_DIST: f64 = 1e-6;

/// Fits a spline through `knots` and samples each side of `knots[apex]` at 11 points.
/// Coincident consecutive knots are merged first; when fewer than three distinct
/// knots remain the curve falls back to straight segments.
pub fn contour_from_knots(knots: &[Point2], apex: usize) -> Result<Contour21> {
    if apex >= knots.len() {
        return Err(Error::invalid(format!(
            "apex knot {apex} out of range for {} knots",
            knots.len()
        )));
    }
    let mut merged: Vec<Point2> = Vec::with_capacity(knots.len());
    let mut apex_m = 0;
    for (i, &k) in knots.iter().enumerate() {
        match merged.last_mut() {
            Some(m) if m.dist(k) <= KNOT_MERGE_DIST => {
                // Landmarks keep their exact position.
                if i == apex || i == knots.len() - 1 {
                    *m = k;
                }
            }
            _ => merged.push(k),
        }
        if i == apex {
            apex_m = merged.len() - 1;
        }
    }
    let side = CONTOUR_APEX + 1;
    let (first, second) = if merged.len() >= 3 {
        let curve = SplineCurve::fit(&merged)?;
        let t_apex = curve.knot_params()[apex_m];
        let first = if apex_m == 0 {
            vec![merged[0]; side]
        } else {
            curve.sample_range(0.0, t_apex, side)?
        };
        let second = if apex_m == merged.len() - 1 {
            vec![merged[apex_m]; side]
        } else {
            curve.sample_range(t_apex, curve.param_end(), side)?
        };
        (first, second)
    } else {
        (
            sample_polyline(&merged[..=apex_m], side)?,
            sample_polyline(&merged[apex_m..], side)?,
        )
    };
    let mut points = first;
    points.extend_from_slice(&second[1..]);
    Contour21::new(points)
}

/// Contour of a point-only prediction: spline through the 7 points themselves.
pub fn spline_contour(points: &[Point2]) -> Result<Contour21> {
    if points.len() < 3 || points.len().is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "need an odd number (at least 3) of points, got {}",
            points.len()
        )));
    }
    contour_from_knots(points, points.len() / 2)
}

/// Largest distance from a chord between consecutive `pixels` to any shortest
/// 8-connected path joining them under uniform cost. All such paths stay inside the
/// parallelogram spanned by the diagonal-first and straight-first staircases, whose
/// far corner lies `b (a - b) / hypot(a, b)` from the chord for offsets `a >= b`.
pub fn staircase_bound(pixels: &[Pixel]) -> f64 {
    pixels
        .windows(2)
        .map(|w| {
            let dr = w[0].0.abs_diff(w[1].0) as f64;
            let dc = w[0].1.abs_diff(w[1].1) as f64;
            let (a, b) = (dr.max(dc), dr.min(dc));
            if a == 0.0 {
                0.0
            } else {
                b * (a - b) / a.hypot(b)
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct Extraction {
    pub contour: Contour21,
    /// Concatenated geodesic through all snapped points.
    pub path: PixelPath,
    pub snapped: Vec<Pixel>,
    pub knots: Vec<Point2>,
}

/// Nearest pixel to a pixel-space point, clamped into the grid.
pub fn snap(p: Point2, height: usize, width: usize) -> Pixel {
    let r = p.y.round().clamp(0.0, (height - 1) as f64) as usize;
    let c = p.x.round().clamp(0.0, (width - 1) as f64) as usize;
    (r, c)
}

/// Extracts the contour for one frame from its cost map and normalized points.
pub fn extract_contour(cost: &CostMap, grid: &GridSpec, points: &[[f64; 2]]) -> Result<Extraction> {
    if grid.height != cost.height || grid.width != cost.width {
        return Err(Error::shape(format!(
            "cost map {}x{} does not match grid {}x{}",
            cost.height, cost.width, grid.height, grid.width
        )));
    }
    if points.len() < 3 || points.len().is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "need an odd number (at least 3) of points, got {}",
            points.len()
        )));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !(p[0].is_finite() && p[1].is_finite() && p[0].abs() <= 1.0 && p[1].abs() <= 1.0))
    {
        return Err(Error::invalid(format!(
            "normalized point {p:?} outside [-1, 1]"
        )));
    }
    let snapped: Vec<Pixel> = points
        .iter()
        .map(|p| {
            snap(
                normalized_to_pixel(p[0], p[1], grid),
                grid.height,
                grid.width,
            )
        })
        .collect();
    let apex_point = points.len() / 2;

    let mut pixels = vec![snapped[0]];
    let mut total = 0.0;
    let mut apex_pos = 0;
    for (i, w) in snapped.windows(2).enumerate() {
        let seg = dijkstra_path(cost, w[0], w[1])?;
        total += seg.cost;
        pixels.extend_from_slice(&seg.pixels[1..]);
        if i + 1 == apex_point {
            apex_pos = pixels.len() - 1;
        }
    }
    let path = PixelPath {
        pixels,
        cost: total,
    };

    let pts = path.points();
    let per_side = SPLINE_KNOTS / 2 + 1;
    let mut knots = sample_polyline(&pts[..=apex_pos], per_side)?;
    knots.extend_from_slice(&sample_polyline(&pts[apex_pos..], per_side)?[1..]);
    let contour = contour_from_knots(&knots, per_side - 1)?;
    Ok(Extraction {
        contour,
        path,
        snapped,
        knots,
    })
}
