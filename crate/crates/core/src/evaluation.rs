//! Landmark and contour metrics in millimeters, a temporal-jitter proxy, per-variant
//! aggregation and the clip-level inference used to feed them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::extraction::{extract_contour, spline_contour, Contour21, CostMap, PixelPath};
use crate::geometry::{normalized_to_pixel, GridSpec, Point2, Polyline, PolylineDistance};
use crate::network::{forward_clip, NetworkConfig, NetworkParams};
use crate::synthdata::ClipRecord;

/// Minimum vertex count of a ground-truth polyline for [`contour_distance`].
pub const MIN_GT_POINTS: usize = 200;
const LANDMARKS: [usize; 3] = [0, 3, 6];

/// Which contour points enter the distance-to-contour metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContourPoints {
    /// All 21 points.
    #[default]
    All,
    /// The 18 points left after dropping BP1, apex and BP2.
    Inner,
}

impl ContourPoints {
    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            21 => Ok(ContourPoints::All),
            18 => Ok(ContourPoints::Inner),
            _ => Err(Error::invalid(format!(
                "contour points must be 21 or 18, got {n}"
            ))),
        }
    }

    pub fn count(self) -> usize {
        match self {
            ContourPoints::All => 21,
            ContourPoints::Inner => 18,
        }
    }
}

/// Errors at BP1, apex and BP2 in millimeters. Both sets are in pixel coordinates.
pub fn landmark_errors(pred: &[Point2], gt: &[Point2], grid: &GridSpec) -> Result<[f64; 3]> {
    if pred.len() != 7 || gt.len() != 7 {
        return Err(Error::shape(format!(
            "landmark errors need 7 points each, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(LANDMARKS.map(|i| pred[i].dist(gt[i]) * grid.spacing))
}

/// Mean distance from the contour points to the ground-truth polyline, in millimeters.
pub fn contour_distance(
    pred: &Contour21,
    gt: &Polyline,
    grid: &GridSpec,
    which: ContourPoints,
) -> Result<f64> {
    if gt.len() < MIN_GT_POINTS {
        return Err(Error::invalid(format!(
            "ground-truth contour has {} points, need at least {MIN_GT_POINTS}",
            gt.len()
        )));
    }
    let pts = match which {
        ContourPoints::All => pred.points().to_vec(),
        ContourPoints::Inner => pred.without_landmarks(),
    };
    let index = PolylineDistance::new(gt);
    let sum: f64 = pts.iter().map(|p| index.distance(*p)).sum();
    Ok(sum / pts.len() as f64 * grid.spacing)
}

/// Mean per-point displacement between consecutive contours, in mm per frame.
pub fn temporal_jitter(contours: &[Contour21], grid: &GridSpec) -> Result<f64> {
    if contours.len() < 2 {
        return Err(Error::invalid(format!(
            "jitter needs at least 2 frames, got {}",
            contours.len()
        )));
    }
    let total: f64 = contours
        .windows(2)
        .map(|w| {
            let d: f64 = w[0]
                .points()
                .iter()
                .zip(w[1].points())
                .map(|(a, b)| a.dist(*b))
                .sum();
            d / w[0].points().len() as f64
        })
        .sum();
    Ok(total / (contours.len() - 1) as f64 * grid.spacing)
}

/// Relative improvement of `variant` over `baseline` in percent (lower is better).
pub fn improvement_pct(baseline: f64, variant: f64) -> f64 {
    (baseline - variant) / baseline * 100.0
}

/// Rounds to one decimal, the precision of published deltas.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("mean of an empty set"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(MeanStd {
            mean,
            std: var.sqrt(),
        })
    }
}

/// Prediction for one frame, in pixel coordinates.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub points_normalized: Vec<[f64; 2]>,
    pub points: Vec<Point2>,
    pub dist_map: Option<Vec<f32>>,
    pub heatmaps: Vec<f32>,
    pub contour: Contour21,
    /// Geodesic through the snapped points, when a distance map was available.
    pub path: Option<PixelPath>,
}

/// Anything that can predict every frame of a clip.
pub trait ClipPredictor {
    fn predict(&self, clip: &ClipRecord) -> Result<Vec<FrameOutput>>;
}

/// Window starts covering `len` frames: stride `window`, last window right-aligned.
pub fn window_starts(len: usize, window: usize) -> Result<Vec<usize>> {
    if len < window {
        return Err(Error::shape(format!(
            "clip of {len} frames is shorter than the {window}-frame window"
        )));
    }
    let mut starts: Vec<usize> = (0..=len - window).step_by(window).collect();
    if starts.last() != Some(&(len - window)) {
        starts.push(len - window);
    }
    Ok(starts)
}

/// Contour for one frame: geodesic extraction when a map is present, else the
/// spline through the points.
pub fn frame_contour(
    grid: &GridSpec,
    points_normalized: &[[f64; 2]],
    dist_map: Option<&[f32]>,
) -> Result<(Contour21, Option<PixelPath>)> {
    match dist_map {
        Some(map) => {
            let cost = CostMap::from_prediction(grid, map)?;
            let ex = extract_contour(&cost, grid, points_normalized)?;
            Ok((ex.contour, Some(ex.path)))
        }
        None => {
            let pts: Vec<Point2> = points_normalized
                .iter()
                .map(|p| normalized_to_pixel(p[0], p[1], grid))
                .collect();
            Ok((spline_contour(&pts)?, None))
        }
    }
}

/// Runs a trained network over a whole clip. On overlapping windows the later window wins.
pub struct ModelPredictor<'a> {
    pub config: &'a NetworkConfig,
    pub params: &'a NetworkParams<f32>,
}

impl ClipPredictor for ModelPredictor<'_> {
    fn predict(&self, clip: &ClipRecord) -> Result<Vec<FrameOutput>> {
        let (t, s) = (clip.len(), self.config.input_size);
        if clip.grid.height != s || clip.grid.width != s {
            return Err(Error::shape(format!(
                "clip grid {}x{} does not match network input {s}x{s}",
                clip.grid.height, clip.grid.width
            )));
        }
        let win = self.config.seq_len;
        let hw = clip.grid.len();
        let mut slots: Vec<Option<FrameOutput>> = vec![None; t];
        for start in window_starts(t, win)? {
            let frames = Tensor::new(
                vec![win, s, s],
                clip.frames.data()[start * hw..(start + win) * hw].to_vec(),
            )?;
            let fwd = forward_clip(self.config, self.params, &frames)?;
            for (k, pred) in fwd.predictions.into_iter().enumerate() {
                let (contour, path) =
                    frame_contour(&clip.grid, &pred.points, pred.dist_map.as_deref())?;
                slots[start + k] = Some(FrameOutput {
                    points: pred
                        .points
                        .iter()
                        .map(|p| normalized_to_pixel(p[0], p[1], &clip.grid))
                        .collect(),
                    points_normalized: pred.points,
                    dist_map: pred.dist_map,
                    heatmaps: pred.heatmaps,
                    contour,
                    path,
                });
            }
        }
        Ok(slots
            .into_iter()
            .map(|s| s.expect("windows cover the clip"))
            .collect())
    }
}

/// Test fixture that returns the ground truth. Unannotated frames copy the nearest
/// annotated frame (the earlier one on a tie).
pub struct GroundTruthPredictor;

impl ClipPredictor for GroundTruthPredictor {
    fn predict(&self, clip: &ClipRecord) -> Result<Vec<FrameOutput>> {
        if clip.annotations.is_empty() {
            return Err(Error::invalid(format!(
                "clip {} has no annotations",
                clip.clip_id
            )));
        }
        let hw = clip.grid.len();
        (0..clip.len())
            .map(|f| {
                let a = clip
                    .annotations
                    .iter()
                    .min_by_key(|a| (a.frame_index.abs_diff(f), a.frame_index))
                    .unwrap();
                let gt = &clip.gt_contours[&a.frame_index];
                let contour = contour_on_polyline(gt, &a.points)?;
                Ok(FrameOutput {
                    points_normalized: a
                        .points
                        .iter()
                        .map(|p| {
                            let (x, y) = crate::geometry::pixel_to_normalized(*p, &clip.grid);
                            [x, y]
                        })
                        .collect(),
                    points: a.points.clone(),
                    dist_map: None,
                    heatmaps: vec![0.0; 7 * hw],
                    contour,
                    path: None,
                })
            })
            .collect()
    }
}

/// 21 points along `poly` with the landmarks at the polyline points nearest to
/// `points[0]`, `points[3]` and `points[6]`.
fn contour_on_polyline(poly: &Polyline, points: &[Point2]) -> Result<Contour21> {
    let pts = poly.points();
    let nearest = |q: Point2| {
        (0..pts.len())
            .min_by(|&a, &b| pts[a].dist(q).total_cmp(&pts[b].dist(q)))
            .unwrap()
    };
    let (i0, i3, i6) = (nearest(points[0]), nearest(points[3]), nearest(points[6]));
    let side = |a: usize, b: usize| -> Result<Vec<Point2>> {
        let (lo, hi) = (a.min(b), a.max(b));
        let mut seg = if hi > lo {
            Polyline::new(pts[lo..=hi].to_vec())?
                .resample_uniform(11)?
                .into_points()
        } else {
            vec![pts[lo]; 11]
        };
        if a > b {
            seg.reverse();
        }
        Ok(seg)
    };
    let mut out = side(i0, i3)?;
    out.extend_from_slice(&side(i3, i6)?[1..]);
    Contour21::new(out)
}

/// Metrics of one annotated frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub clip_id: String,
    pub frame: usize,
    /// BP1, apex, BP2 in millimeters.
    pub landmarks: [f64; 3],
    pub d2c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEval {
    pub clip_id: String,
    pub frames: Vec<FrameEval>,
    pub jitter: f64,
}

/// Scores a clip's predictions: landmark and contour metrics on annotated frames,
/// jitter over all frames.
pub fn evaluate_clip(
    clip: &ClipRecord,
    outputs: &[FrameOutput],
    which: ContourPoints,
) -> Result<ClipEval> {
    if outputs.len() != clip.len() {
        return Err(Error::shape(format!(
            "{} predictions for a {}-frame clip",
            outputs.len(),
            clip.len()
        )));
    }
    let mut frames = Vec::with_capacity(clip.annotations.len());
    for a in &clip.annotations {
        let out = &outputs[a.frame_index];
        frames.push(FrameEval {
            clip_id: clip.clip_id.clone(),
            frame: a.frame_index,
            landmarks: landmark_errors(&out.points, &a.points, &clip.grid)?,
            d2c: contour_distance(
                &out.contour,
                &clip.gt_contours[&a.frame_index],
                &clip.grid,
                which,
            )?,
        });
    }
    let contours: Vec<Contour21> = outputs.iter().map(|o| o.contour.clone()).collect();
    Ok(ClipEval {
        clip_id: clip.clip_id.clone(),
        frames,
        jitter: temporal_jitter(&contours, &clip.grid)?,
    })
}

/// One column of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub bp1: MeanStd,
    pub apex: MeanStd,
    pub bp2: MeanStd,
    /// Over the pooled BP1, apex and BP2 errors.
    pub average: MeanStd,
    pub d2c: MeanStd,
    /// Across clips.
    pub jitter: MeanStd,
    pub n_frames: usize,
    pub n_clips: usize,
    pub contour_points: usize,
    /// Percent improvement of each mean over the baseline variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improvement: Option<BTreeMap<String, f64>>,
    pub per_frame: Vec<FrameEval>,
}

impl VariantSummary {
    pub fn from_clips(clips: &[ClipEval], which: ContourPoints) -> Result<Self> {
        let frames: Vec<FrameEval> = clips.iter().flat_map(|c| c.frames.clone()).collect();
        if frames.is_empty() {
            return Err(Error::invalid("no evaluated frames"));
        }
        let col = |i: usize| frames.iter().map(|f| f.landmarks[i]).collect::<Vec<_>>();
        let pooled: Vec<f64> = frames.iter().flat_map(|f| f.landmarks).collect();
        let d2c: Vec<f64> = frames.iter().map(|f| f.d2c).collect();
        let jitter: Vec<f64> = clips.iter().map(|c| c.jitter).collect();
        Ok(VariantSummary {
            bp1: MeanStd::of(&col(0))?,
            apex: MeanStd::of(&col(1))?,
            bp2: MeanStd::of(&col(2))?,
            average: MeanStd::of(&pooled)?,
            d2c: MeanStd::of(&d2c)?,
            jitter: MeanStd::of(&jitter)?,
            n_frames: frames.len(),
            n_clips: clips.len(),
            contour_points: which.count(),
            improvement: None,
            per_frame: frames,
        })
    }

    fn metrics(&self) -> [(&'static str, MeanStd); 6] {
        [
            ("bp1", self.bp1),
            ("apex", self.apex),
            ("bp2", self.bp2),
            ("average", self.average),
            ("d2c", self.d2c),
            ("jitter", self.jitter),
        ]
    }
}

/// Per-variant summaries keyed by variant name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvalReport {
    pub variants: BTreeMap<String, VariantSummary>,
}

impl EvalReport {
    /// Builds the report and, when `baseline` names one of the variants, fills in
    /// the improvement of every other variant over it.
    pub fn new(variants: Vec<(String, VariantSummary)>, baseline: Option<&str>) -> Result<Self> {
        if variants.is_empty() {
            return Err(Error::invalid("report needs at least one variant"));
        }
        let mut map: BTreeMap<String, VariantSummary> = variants.into_iter().collect();
        if let Some(b) = baseline {
            let base = map
                .get(b)
                .ok_or_else(|| Error::invalid(format!("baseline variant {b} not in report")))?
                .clone();
            for (name, v) in map.iter_mut() {
                if name == b {
                    continue;
                }
                let imp = v
                    .metrics()
                    .iter()
                    .zip(base.metrics())
                    .map(|((k, m), (_, bm))| (k.to_string(), improvement_pct(bm.mean, m.mean)))
                    // a zero baseline has no relative improvement
                    .filter(|(_, p)| p.is_finite())
                    .collect();
                v.improvement = Some(imp);
            }
        }
        Ok(EvalReport { variants: map })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }

    /// Aligned plain-text table, one column per variant.
    pub fn to_table(&self) -> String {
        let names: Vec<&String> = self.variants.keys().collect();
        let mut s = String::new();
        let _ = write!(s, "{:<12}", "metric (mm)");
        for n in &names {
            let _ = write!(s, " | {:>22}", n);
        }
        s.push('\n');
        let rows = ["bp1", "apex", "bp2", "average", "d2c", "jitter"];
        for (r, row) in rows.iter().enumerate() {
            let _ = write!(s, "{:<12}", row);
            for n in &names {
                let v = &self.variants[*n];
                let m = v.metrics()[r].1;
                let cell = match v.improvement.as_ref().and_then(|i| i.get(*row)) {
                    Some(p) => format!("{:.2}±{:.2} {:+.1}%", m.mean, m.std, p),
                    None => format!("{:.2}±{:.2}", m.mean, m.std),
                };
                let _ = write!(s, " | {:>22}", cell);
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<12}", "frames");
        for n in &names {
            let _ = write!(s, " | {:>22}", self.variants[*n].n_frames);
        }
        s.push('\n');
        s
    }
}

/// Predicts and scores every clip.
pub fn evaluate_variant(
    predictor: &dyn ClipPredictor,
    clips: &[&ClipRecord],
    which: ContourPoints,
) -> Result<VariantSummary> {
    if clips.is_empty() {
        return Err(Error::invalid("no clips to evaluate"));
    }
    let evals = clips
        .iter()
        .map(|c| evaluate_clip(c, &predictor.predict(c)?, which))
        .collect::<Result<Vec<_>>>()?;
    VariantSummary::from_clips(&evals, which)
}
