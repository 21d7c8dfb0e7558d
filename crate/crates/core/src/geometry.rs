//! Planar curve geometry on the pixel grid.
//!
//! Coordinates follow image convention: `x` runs along columns, `y` along rows and
//! the center of pixel `(r, c)` sits at `(x = c, y = r)`. Curves are always open.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sub-steps per spline segment used to tabulate arc length.
const ARC_TABLE_STEPS: usize = 128;

/// Arc-length step used when a curve is turned into a dense polyline for rasterization.
pub const RASTER_STEP: f64 = 0.25;
/// Largest chord-to-curve gap tolerated when rasterizing tightly bent splines, pixels.
pub const RASTER_SAGITTA: f64 = 0.005;
const REFINE_DEPTH: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        Point2::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(p: [f64; 2]) -> Self {
        Point2::new(p[0], p[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

/// Image grid with isotropic physical spacing in millimeters per pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub spacing: f64,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, spacing: f64) -> Result<Self> {
        let grid = GridSpec {
            height,
            width,
            spacing,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(format!(
                "grid {}x{} is smaller than 8x8",
                self.height, self.width
            )));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::invalid(format!(
                "pixel spacing must be positive, got {}",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * ((self.height * self.height + self.width * self.width) as f64).sqrt()
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains_pixel(&self, row: isize, col: isize) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }
}

/// Maps a pixel-space point onto the DSNT coordinate range `(-1, 1)`.
pub fn pixel_to_normalized(p: Point2, grid: &GridSpec) -> (f64, f64) {
    let w = grid.width as f64;
    let h = grid.height as f64;
    ((2.0 * p.x + 1.0 - w) / w, (2.0 * p.y + 1.0 - h) / h)
}

pub fn normalized_to_pixel(xn: f64, yn: f64, grid: &GridSpec) -> Point2 {
    let w = grid.width as f64;
    let h = grid.height as f64;
    Point2::new((xn * w + w - 1.0) / 2.0, (yn * h + h - 1.0) / 2.0)
}

/// Normalized coordinate of column (or row) `index` along an axis of `len` pixels.
pub fn normalized_axis(index: usize, len: usize) -> f64 {
    let n = len as f64;
    (2.0 * index as f64 + 1.0 - n) / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct Polyline {
    points: Vec<Point2>,
}

impl TryFrom<Vec<Point2>> for Polyline {
    type Error = Error;

    fn try_from(points: Vec<Point2>) -> Result<Self> {
        Polyline::new(points)
    }
}

impl From<Polyline> for Vec<Point2> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

impl Polyline {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("polyline needs at least 2 points"));
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::invalid(format!("non-finite polyline point {p:?}")));
        }
        if let Some(i) = points.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!(
                "polyline points {i} and {} are identical",
                i + 1
            )));
        }
        Ok(Polyline { points })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point2> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }

    /// Points at equal arc-length increments along the polyline itself.
    pub fn resample_uniform(&self, n: usize) -> Result<Polyline> {
        Polyline::new(self.resample_points(n)?)
    }

    /// Like [`Polyline::resample_uniform`], but samples may coincide when the
    /// polyline doubles back on itself.
    pub fn resample_points(&self, n: usize) -> Result<Vec<Point2>> {
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
        }
        let mut cum = Vec::with_capacity(self.points.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for (a, b) in self.segments() {
            acc += a.dist(b);
            cum.push(acc);
        }
        let total = acc;
        let mut out = Vec::with_capacity(n);
        let mut seg = 0;
        for k in 0..n {
            let s = total * k as f64 / (n - 1) as f64;
            while seg + 2 < cum.len() && cum[seg + 1] < s {
                seg += 1;
            }
            let span = cum[seg + 1] - cum[seg];
            let t = ((s - cum[seg]) / span).clamp(0.0, 1.0);
            out.push(self.points[seg].lerp(self.points[seg + 1], t));
        }
        out[0] = self.points[0];
        out[n - 1] = *self.points.last().unwrap();
        Ok(out)
    }
}

/// Natural cubic spline for one coordinate over strictly increasing parameters.
#[derive(Clone, Debug)]
struct NaturalCubic {
    t: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl NaturalCubic {
    fn fit(t: &[f64], y: &[f64]) -> Self {
        let n = t.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior second-derivative system.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                let h0 = t[i + 1] - t[i];
                let h1 = t[i + 2] - t[i + 1];
                diag[i] = 2.0 * (h0 + h1);
                upper[i] = h1;
                rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h1 - (y[i + 1] - y[i]) / h0);
            }
            for i in 1..k {
                let lower = t[i + 1] - t[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            let mut sol = vec![0.0; k];
            sol[k - 1] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                sol[i] = (rhs[i] - upper[i] * sol[i + 1]) / diag[i];
            }
            m[1..n - 1].copy_from_slice(&sol);
        }
        NaturalCubic {
            t: t.to_vec(),
            y: y.to_vec(),
            m,
        }
    }

    fn eval_in(&self, i: usize, t: f64) -> f64 {
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - t) / h;
        let b = (t - self.t[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

/// Interpolating natural cubic spline with cumulative chord-length parameterization.
#[derive(Clone, Debug)]
pub struct SplineCurve {
    knots: Vec<Point2>,
    params: Vec<f64>,
    sx: NaturalCubic,
    sy: NaturalCubic,
    /// (parameter, cumulative arc length) pairs, increasing in both.
    arc: Vec<(f64, f64)>,
}

pub fn fit_spline(knots: &[Point2]) -> Result<SplineCurve> {
    SplineCurve::fit(knots)
}

impl SplineCurve {
    pub fn fit(knots: &[Point2]) -> Result<Self> {
        if knots.len() < 3 {
            return Err(Error::invalid(format!(
                "spline needs at least 3 knots, got {}",
                knots.len()
            )));
        }
        if let Some(p) = knots.iter().find(|p| !p.is_finite()) {
            return Err(Error::invalid(format!("non-finite knot {p:?}")));
        }
        let mut params = Vec::with_capacity(knots.len());
        params.push(0.0);
        for (i, w) in knots.windows(2).enumerate() {
            let d = w[0].dist(w[1]);
            if d == 0.0 {
                return Err(Error::invalid(format!(
                    "consecutive knots {i} and {} coincide",
                    i + 1
                )));
            }
            params.push(params[i] + d);
        }
        let xs: Vec<f64> = knots.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = knots.iter().map(|p| p.y).collect();
        let mut curve = SplineCurve {
            knots: knots.to_vec(),
            params,
            sx: NaturalCubic::fit(&[], &[]),
            sy: NaturalCubic::fit(&[], &[]),
            arc: Vec::new(),
        };
        curve.sx = NaturalCubic::fit(&curve.params, &xs);
        curve.sy = NaturalCubic::fit(&curve.params, &ys);
        curve.arc = curve.tabulate_arc();
        if !curve.arc_length().is_finite() {
            return Err(Error::invalid("knots too close together for a stable spline"));
        }
        Ok(curve)
    }

    fn tabulate_arc(&self) -> Vec<(f64, f64)> {
        let mut table = Vec::with_capacity((self.knots.len() - 1) * ARC_TABLE_STEPS + 1);
        let mut prev = self.knots[0];
        let mut s = 0.0;
        table.push((0.0, 0.0));
        for seg in 0..self.knots.len() - 1 {
            let (t0, t1) = (self.params[seg], self.params[seg + 1]);
            for k in 1..=ARC_TABLE_STEPS {
                let t = if k == ARC_TABLE_STEPS {
                    t1
                } else {
                    t0 + (t1 - t0) * k as f64 / ARC_TABLE_STEPS as f64
                };
                let p = self.eval_segment(seg, t);
                s += prev.dist(p);
                prev = p;
                table.push((t, s));
            }
        }
        table
    }

    pub fn knots(&self) -> &[Point2] {
        &self.knots
    }

    /// Parameter value at each knot.
    pub fn knot_params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_end(&self) -> f64 {
        *self.params.last().unwrap()
    }

    fn segment_of(&self, t: f64) -> usize {
        let last = self.params.len() - 2;
        match self
            .params
            .binary_search_by(|p| p.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(last),
            Err(i) => i.saturating_sub(1).min(last),
        }
    }

    fn eval_segment(&self, seg: usize, t: f64) -> Point2 {
        Point2::new(self.sx.eval_in(seg, t), self.sy.eval_in(seg, t))
    }

    /// Evaluates the curve at chord-length parameter `t` (clamped to the curve domain).
    pub fn eval(&self, t: f64) -> Point2 {
        let t = t.clamp(0.0, self.param_end());
        self.eval_segment(self.segment_of(t), t)
    }

    pub fn arc_length(&self) -> f64 {
        self.arc.last().unwrap().1
    }

    pub fn arc_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.param_end());
        let i = self.arc.partition_point(|&(tp, _)| tp < t);
        if i == 0 {
            return 0.0;
        }
        let (ta, sa) = self.arc[i - 1];
        let (tb, sb) = self.arc[i.min(self.arc.len() - 1)];
        if tb == ta {
            return sb;
        }
        sa + (sb - sa) * (t - ta) / (tb - ta)
    }

    pub fn param_at_arc(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.arc_length());
        let i = self.arc.partition_point(|&(_, sp)| sp < s);
        if i == 0 {
            return 0.0;
        }
        let (ta, sa) = self.arc[i - 1];
        let (tb, sb) = self.arc[i.min(self.arc.len() - 1)];
        if sb == sa {
            return tb;
        }
        ta + (tb - ta) * (s - sa) / (sb - sa)
    }

    /// `n` points at equal arc-length spacing between parameters `t0 < t1`.
    pub fn sample_range(&self, t0: f64, t1: f64, n: usize) -> Result<Vec<Point2>> {
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
        }
        let (s0, s1) = (self.arc_at(t0), self.arc_at(t1));
        let mut out: Vec<Point2> = (0..n)
            .map(|k| {
                let s = s0 + (s1 - s0) * k as f64 / (n - 1) as f64;
                self.eval(self.param_at_arc(s))
            })
            .collect();
        out[0] = self.eval(t0);
        out[n - 1] = self.eval(t1);
        Ok(out)
    }

    /// Dense polyline with arc-length steps no longer than `step`.
    pub fn dense_polyline(&self, step: f64) -> Result<Polyline> {
        let n = ((self.arc_length() / step).ceil() as usize + 1).max(2);
        sample_uniform(self, n)
    }

    /// As [`SplineCurve::dense_polyline`], with steps halved wherever the curve
    /// midpoint strays more than `tol` from the chord.
    pub fn refined_polyline(&self, step: f64, tol: f64) -> Result<Polyline> {
        let n = ((self.arc_length() / step).ceil() as usize + 1).max(2);
        let len = self.arc_length();
        let params: Vec<f64> = (0..n)
            .map(|k| self.param_at_arc(len * k as f64 / (n - 1) as f64))
            .collect();
        let mut out = vec![self.eval(params[0])];
        for w in params.windows(2) {
            self.refine(w[0], w[1], tol, REFINE_DEPTH, &mut out);
        }
        out.dedup();
        Polyline::new(out)
    }

    fn refine(&self, ta: f64, tb: f64, tol: f64, depth: u32, out: &mut Vec<Point2>) {
        let (a, b) = (self.eval(ta), self.eval(tb));
        let tm = 0.5 * (ta + tb);
        if depth > 0 && point_to_segment_distance(self.eval(tm), a, b) > tol {
            self.refine(ta, tm, tol, depth - 1, out);
            self.refine(tm, tb, tol, depth - 1, out);
        } else {
            out.push(b);
        }
    }
}

pub fn sample_uniform(curve: &SplineCurve, n: usize) -> Result<Polyline> {
    let pts = curve.sample_range(0.0, curve.param_end(), n)?;
    Polyline::new(pts)
}

/// Exact distance from `p` to the closed segment `[a, b]`.
pub fn point_to_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.dist(Point2::new(a.x + t * dx, a.y + t * dy))
}

pub fn point_to_polyline_distance(p: Point2, poly: &Polyline) -> f64 {
    poly.segments()
        .map(|(a, b)| point_to_segment_distance(p, a, b))
        .fold(f64::INFINITY, f64::min)
}

/// Repeated exact distance queries against one polyline.
///
/// Segments are grouped into runs with a bounding circle; a run is skipped when its
/// circle is already farther than the best distance found. The minimum is over the
/// same segment distances as [`point_to_polyline_distance`], so results are identical.
pub struct PolylineDistance<'a> {
    poly: &'a Polyline,
    runs: Vec<(usize, usize, Point2, f64)>,
}

impl<'a> PolylineDistance<'a> {
    const RUN: usize = 16;

    pub fn new(poly: &'a Polyline) -> Self {
        let pts = poly.points();
        let n_seg = pts.len() - 1;
        let mut runs = Vec::with_capacity(n_seg.div_ceil(Self::RUN));
        let mut i = 0;
        while i < n_seg {
            let j = (i + Self::RUN).min(n_seg);
            let span = &pts[i..=j];
            let cx = span.iter().map(|p| p.x).sum::<f64>() / span.len() as f64;
            let cy = span.iter().map(|p| p.y).sum::<f64>() / span.len() as f64;
            let c = Point2::new(cx, cy);
            let r = span.iter().map(|p| p.dist(c)).fold(0.0, f64::max);
            runs.push((i, j, c, r));
            i = j;
        }
        PolylineDistance { poly, runs }
    }

    pub fn distance(&self, p: Point2) -> f64 {
        let pts = self.poly.points();
        let mut order: Vec<(f64, usize)> = self
            .runs
            .iter()
            .enumerate()
            .map(|(k, &(_, _, c, r))| (p.dist(c) - r, k))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut best = f64::INFINITY;
        for (lower, k) in order {
            if lower >= best {
                break;
            }
            let (i, j, _, _) = self.runs[k];
            for s in i..j {
                best = best.min(point_to_segment_distance(p, pts[s], pts[s + 1]));
            }
        }
        best
    }
}

/// Per-pixel distance to a contour, normalized by the grid half-diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl DistanceMap {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::shape(format!(
                "distance map has {} values for a {}x{} grid",
                values.len(),
                grid.height,
                grid.width
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!(
                "distance map values must be finite and non-negative, got {v}"
            )));
        }
        Ok(DistanceMap { grid, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.width + col]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Rasterizes exact point-to-segment distances to a polyline.
pub fn rasterize_polyline_distance(poly: &Polyline, grid: &GridSpec) -> Result<DistanceMap> {
    grid.validate()?;
    let half_diag = grid.half_diagonal();
    let index = PolylineDistance::new(poly);
    let mut values = Vec::with_capacity(grid.len());
    for r in 0..grid.height {
        for c in 0..grid.width {
            let p = Point2::new(c as f64, r as f64);
            values.push(index.distance(p) / half_diag);
        }
    }
    let map = DistanceMap::new(*grid, values)?;
    if map.max() > 2.0 {
        return Err(Error::invalid(
            "contour lies too far outside the grid (normalized distance above 2)",
        ));
    }
    Ok(map)
}

/// Rasterizes the distance to a spline via dense sampling at `RASTER_STEP` pixels.
pub fn rasterize_distance_map(curve: &SplineCurve, grid: &GridSpec) -> Result<DistanceMap> {
    if curve.arc_length().is_nan() || curve.arc_length() <= 0.0 {
        return Err(Error::invalid("zero-length curve"));
    }
    // Slightly under the nominal step so tabulation error never pushes a gap above it.
    let poly = curve.refined_polyline(RASTER_STEP * 0.98, RASTER_SAGITTA)?;
    rasterize_polyline_distance(&poly, grid)
}

/// Area enclosed by the polygon formed by the points plus the closing chord.
pub fn closed_area(points: &[Point2]) -> f64 {
    let n = points.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc.abs()
}
