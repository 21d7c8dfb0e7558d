//! Synthetic echo-like clips with 7-point annotations, dataset IO and window sampling.
//!
//! Each clip shows an open half-ellipse "ventricle" whose long axis and width shrink
//! over a cosine cycle. ED is the cycle start and ES the cycle midpoint. One cycle is
//! annotated: the two basal points, the apex and two intermediate points per side,
//! all placed on the true contour with arc-length jitter.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{
    rasterize_polyline_distance, DistanceMap, GridSpec, Point2, Polyline, PolylineDistance,
    RASTER_STEP,
};
use crate::tns;

pub const WINDOW_LEN: usize = 15;
pub const N_POINTS: usize = 7;
pub const APEX_INDEX: usize = 3;
/// Margin between the worst-case contour extent and the grid border, in pixels.
pub const GRID_MARGIN: f64 = 4.0;
pub const BAND_HALF_WIDTH: f64 = 3.0;
pub const BAND_INTENSITY: f64 = 0.6;
pub const POOL_INTENSITY: f64 = 0.15;
pub const BACKGROUND_INTENSITY: f64 = 0.25;
pub const DATASET_FORMAT: &str = "contourflow-dataset-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub grid: GridSpec,
    pub frames_min: usize,
    pub frames_max: usize,
    pub cycle_length: usize,
    /// End-diastolic long-axis length, pixels.
    pub long_axis: f64,
    /// End-diastolic width, pixels.
    pub width: f64,
    pub contraction_long: f64,
    pub contraction_width: f64,
    pub orientation_jitter_deg: f64,
    /// Per-axis translation jitter, pixels.
    pub translation_jitter: f64,
    /// Relative per-clip size jitter.
    pub scale_jitter: f64,
    /// Intermediate-point jitter as a fraction of the side arc length.
    pub annotation_jitter: f64,
    /// Landmark jitter along the arc, pixels.
    pub landmark_jitter: f64,
    pub speckle: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid: GridSpec {
                height: 64,
                width: 64,
                spacing: 2.0,
            },
            frames_min: 20,
            frames_max: 40,
            cycle_length: 18,
            long_axis: 36.0,
            width: 28.0,
            contraction_long: 0.15,
            contraction_width: 0.25,
            orientation_jitter_deg: 10.0,
            translation_jitter: 2.0,
            scale_jitter: 0.05,
            annotation_jitter: 0.05,
            landmark_jitter: 1.0,
            speckle: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Largest distance from the grid center any contour point can reach.
    pub fn max_extent(&self) -> f64 {
        let r = (0.5 * self.long_axis).hypot(0.5 * self.width) * (1.0 + self.scale_jitter);
        r + std::f64::consts::SQRT_2 * self.translation_jitter
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.grid
            .validate()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if self.cycle_length < 4 {
            return bad(format!(
                "cycle_length must be >= 4, got {}",
                self.cycle_length
            ));
        }
        if self.frames_min < WINDOW_LEN.max(self.cycle_length / 2 + 1) {
            return bad(format!(
                "frames_min {} must be >= {} and cover half a cycle",
                self.frames_min, WINDOW_LEN
            ));
        }
        if self.frames_max < self.frames_min || self.frames_max < self.cycle_length {
            return bad(format!(
                "frames_max {} must be >= frames_min and cycle_length",
                self.frames_max
            ));
        }
        let fields = [
            ("long_axis", self.long_axis),
            ("width", self.width),
            ("contraction_long", self.contraction_long),
            ("contraction_width", self.contraction_width),
            ("orientation_jitter_deg", self.orientation_jitter_deg),
            ("translation_jitter", self.translation_jitter),
            ("scale_jitter", self.scale_jitter),
            ("annotation_jitter", self.annotation_jitter),
            ("landmark_jitter", self.landmark_jitter),
            ("speckle", self.speckle),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.long_axis <= 0.0 || self.width <= 0.0 {
            return bad("long_axis and width must be positive".into());
        }
        if self.long_axis <= 0.5 * self.width {
            return bad("long_axis must exceed half the width so the apex is well defined".into());
        }
        for (name, v) in [
            ("contraction_long", self.contraction_long),
            ("contraction_width", self.contraction_width),
        ] {
            if v > 0.4 {
                return bad(format!("{name} must lie in [0, 0.4], got {v}"));
            }
        }
        if self.annotation_jitter > 0.1 {
            return bad(format!(
                "annotation_jitter must lie in [0, 0.1], got {}",
                self.annotation_jitter
            ));
        }
        if self.scale_jitter >= 0.5 || self.orientation_jitter_deg > 45.0 {
            return bad("scale or orientation jitter out of range".into());
        }
        let half = 0.5 * (self.grid.height.min(self.grid.width) as f64 - 1.0);
        if self.max_extent() + GRID_MARGIN > half {
            return bad(format!(
                "shape priors reach {:.2} px from the center but the grid allows {:.2} with a {} px margin",
                self.max_extent(),
                half - GRID_MARGIN,
                GRID_MARGIN
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    ED,
    ES,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub frame_index: usize,
    pub phase: Phase,
    /// BP1, two intermediates, apex, two intermediates, BP2; pixel coordinates.
    pub points: Vec<Point2>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub subject_id: String,
    pub grid: GridSpec,
    /// `T×H×W` intensities in `[0, 1]`.
    pub frames: Tensor<f32>,
    pub annotations: Vec<Annotation>,
    pub gt_contours: BTreeMap<usize, Polyline>,
}

impl ClipRecord {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let hw = self.grid.len();
        &self.frames.data()[t * hw..(t + 1) * hw]
    }

    pub fn annotation_at(&self, frame: usize) -> Option<&Annotation> {
        self.annotations.iter().find(|a| a.frame_index == frame)
    }

    fn check(&self, origin: &Path) -> Result<()> {
        let fail = |m: String| Err(Error::format(origin, m));
        let s = self.frames.shape();
        if s.len() != 3 || s[1] != self.grid.height || s[2] != self.grid.width {
            return fail(format!(
                "frames shape {s:?} disagrees with grid {}×{}",
                self.grid.height, self.grid.width
            ));
        }
        if let Some(v) = self
            .frames
            .data()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return fail(format!("intensity {v} outside [0, 1]"));
        }
        let has = |p: Phase| self.annotations.iter().filter(|a| a.phase == p).count() == 1;
        if !has(Phase::ED) || !has(Phase::ES) {
            return fail("need exactly one ED and one ES annotation".into());
        }
        for a in &self.annotations {
            if a.frame_index >= s[0] {
                return fail(format!(
                    "annotation frame {} beyond clip length {}",
                    a.frame_index, s[0]
                ));
            }
            if a.points.len() != N_POINTS {
                return fail(format!(
                    "annotation has {} points, expected {N_POINTS}",
                    a.points.len()
                ));
            }
            if !self.gt_contours.contains_key(&a.frame_index) {
                return fail(format!(
                    "no gt contour for annotated frame {}",
                    a.frame_index
                ));
            }
        }
        if self.gt_contours.len() != self.annotations.len() {
            return fail("gt contours present for unannotated frames".into());
        }
        Ok(())
    }
}

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of clip `index` under a master seed.
pub fn clip_seed(master: u64, index: u64) -> u64 {
    mix64(mix64(master) ^ index)
}

/// Contraction level in `[0, 1]`: 0 at ED, 1 at ES.
pub fn contraction(frame: usize, ed_frame: usize, cycle: usize) -> f64 {
    let phase = (frame as f64 - ed_frame as f64) / cycle as f64;
    0.5 * (1.0 - (2.0 * PI * phase).cos())
}

struct ClipGeometry {
    base: Point2,
    axis: Point2,
    across: Point2,
    long_axis: f64,
    width: f64,
}

impl ClipGeometry {
    /// Dense half-ellipse from one basal point (θ = 0) over the apex to the other (θ = π).
    fn curve(&self, c: f64, a_l: f64, a_w: f64, samples: usize) -> Vec<Point2> {
        let l = self.long_axis * (1.0 - a_l * c);
        let hw = 0.5 * self.width * (1.0 - a_w * c);
        (0..samples)
            .map(|i| {
                let th = PI * i as f64 / (samples - 1) as f64;
                let (s, co) = th.sin_cos();
                Point2::new(
                    self.base.x + l * s * self.axis.x + hw * co * self.across.x,
                    self.base.y + l * s * self.axis.y + hw * co * self.across.y,
                )
            })
            .collect()
    }
}

const CURVE_SAMPLES: usize = 2049;

fn cumulative_arc(points: &[Point2]) -> Vec<f64> {
    let mut acc = Vec::with_capacity(points.len());
    let mut s = 0.0;
    acc.push(0.0);
    for w in points.windows(2) {
        s += w[0].dist(w[1]);
        acc.push(s);
    }
    acc
}

fn point_at_arc(points: &[Point2], arc: &[f64], s: f64) -> Point2 {
    let s = s.clamp(0.0, *arc.last().unwrap());
    let i = arc.partition_point(|&a| a <= s).clamp(1, arc.len() - 1);
    let (a0, a1) = (arc[i - 1], arc[i]);
    let t = if a1 > a0 { (s - a0) / (a1 - a0) } else { 0.0 };
    points[i - 1].lerp(points[i], t)
}

fn inside_polygon(p: Point2, poly: &[Point2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Noise-free intensity of every pixel for one contour.
fn render_base(contour: &[Point2], grid: &GridSpec) -> Result<Vec<f64>> {
    // Rendering only needs sub-pixel accuracy; a coarser copy keeps this cheap.
    let coarse: Vec<Point2> = contour
        .iter()
        .step_by(16)
        .copied()
        .chain(contour.last().copied())
        .collect();
    let coarse = Polyline::new(dedup(coarse))?;
    let index = PolylineDistance::new(&coarse);
    let mut out = Vec::with_capacity(grid.len());
    for r in 0..grid.height {
        for c in 0..grid.width {
            let p = Point2::new(c as f64, r as f64);
            let v = if index.distance(p) <= BAND_HALF_WIDTH {
                BAND_INTENSITY
            } else if inside_polygon(p, coarse.points()) {
                POOL_INTENSITY
            } else {
                BACKGROUND_INTENSITY
            };
            out.push(v);
        }
    }
    Ok(out)
}

fn dedup(mut pts: Vec<Point2>) -> Vec<Point2> {
    pts.dedup();
    pts
}

/// Dense polyline with arc-length spacing at most `RASTER_STEP` between arc positions `s0..s1`.
fn dense_between(points: &[Point2], arc: &[f64], s0: f64, s1: f64) -> Result<Polyline> {
    let n = ((s1 - s0) / (RASTER_STEP * 0.8)).ceil() as usize + 1;
    let pts = (0..n)
        .map(|i| point_at_arc(points, arc, s0 + (s1 - s0) * i as f64 / (n - 1) as f64))
        .collect();
    Polyline::new(dedup(pts))
}

pub fn generate_clip(config: &SynthConfig, clip_seed: u64) -> Result<ClipRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
    let grid = config.grid;
    let t_len = rng.random_range(config.frames_min..=config.frames_max);
    let cycle = config.cycle_length;
    let half = cycle / 2;
    let ed_frame = rng.random_range(0..cycle.min(t_len - half));
    let es_frame = ed_frame + half;

    let phi = rng.random_range(-1.0..=1.0) * config.orientation_jitter_deg.to_radians();
    let tx = rng.random_range(-1.0..=1.0) * config.translation_jitter;
    let ty = rng.random_range(-1.0..=1.0) * config.translation_jitter;
    let scale = 1.0 + rng.random_range(-1.0..=1.0) * config.scale_jitter;
    let long_axis = config.long_axis * scale;
    let width = config.width * scale;
    // Apex points up the image (towards row 0), rotated by phi.
    let axis = Point2::new(phi.sin(), -phi.cos());
    let across = Point2::new(phi.cos(), phi.sin());
    let center = Point2::new(
        0.5 * (grid.width as f64 - 1.0) + tx,
        0.5 * (grid.height as f64 - 1.0) + ty,
    );
    let base = Point2::new(
        center.x - 0.5 * long_axis * axis.x,
        center.y - 0.5 * long_axis * axis.y,
    );
    let geom = ClipGeometry {
        base,
        axis,
        across,
        long_axis,
        width,
    };

    let hw = grid.len();
    let mut frames = Vec::with_capacity(t_len * hw);
    for f in 0..t_len {
        let c = contraction(f, ed_frame, cycle);
        let contour = geom.curve(
            c,
            config.contraction_long,
            config.contraction_width,
            CURVE_SAMPLES,
        );
        let base_img = render_base(&contour, &grid)?;
        for v in base_img {
            let n: f64 = rng.sample(StandardNormal);
            frames.push((v * (1.0 + config.speckle * n)).clamp(0.0, 1.0) as f32);
        }
    }

    let mut annotations = Vec::new();
    let mut gt_contours = BTreeMap::new();
    for (frame, phase) in [(ed_frame, Phase::ED), (es_frame, Phase::ES)] {
        let c = contraction(frame, ed_frame, cycle);
        let curve = geom.curve(
            c,
            config.contraction_long,
            config.contraction_width,
            CURVE_SAMPLES,
        );
        let arc = cumulative_arc(&curve);
        let total = *arc.last().unwrap();
        let mid = curve[0].lerp(curve[CURVE_SAMPLES - 1], 0.5);
        let apex_i = (0..CURVE_SAMPLES)
            .max_by(|&a, &b| curve[a].dist(mid).total_cmp(&curve[b].dist(mid)))
            .unwrap();
        let lj = config.landmark_jitter;
        let s_bp1 = rng.random_range(0.0..=1.0) * lj;
        let s_bp2 = total - rng.random_range(0.0..=1.0) * lj;
        let s_apex = arc[apex_i] + rng.random_range(-1.0..=1.0) * lj;
        let j = config.annotation_jitter;
        let mut between =
            |a: f64, b: f64, frac: f64| a + (b - a) * (frac + rng.random_range(-1.0..=1.0) * j);
        let s = [
            s_bp1,
            between(s_bp1, s_apex, 1.0 / 3.0),
            between(s_bp1, s_apex, 2.0 / 3.0),
            s_apex,
            between(s_apex, s_bp2, 1.0 / 3.0),
            between(s_apex, s_bp2, 2.0 / 3.0),
            s_bp2,
        ];
        let points = s.iter().map(|&v| point_at_arc(&curve, &arc, v)).collect();
        annotations.push(Annotation {
            frame_index: frame,
            phase,
            points,
        });
        gt_contours.insert(frame, dense_between(&curve, &arc, 0.0, total)?);
    }
    let record = ClipRecord {
        clip_id: format!("clip_{clip_seed:016x}"),
        subject_id: format!("subject_{clip_seed:016x}"),
        grid,
        frames: Tensor::new(vec![t_len, grid.height, grid.width], frames)?,
        annotations,
        gt_contours,
    };
    record.check(Path::new("<generated>"))?;
    Ok(record)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub clips: Vec<(Split, ClipRecord)>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&ClipRecord> {
        self.clips
            .iter()
            .filter(|(s, _)| *s == split)
            .map(|(_, c)| c)
            .collect()
    }
}

/// `n_train` training clips then `n_val` validation clips, seeded by clip index.
pub fn generate_dataset(config: &SynthConfig, n_train: usize, n_val: usize) -> Result<Dataset> {
    config.validate()?;
    let mut clips = Vec::with_capacity(n_train + n_val);
    for i in 0..n_train + n_val {
        let mut clip = generate_clip(config, clip_seed(config.seed, i as u64))?;
        clip.clip_id = format!("clip_{i:04}");
        clip.subject_id = format!("subject_{i:04}");
        let split = if i < n_train {
            Split::Train
        } else {
            Split::Val
        };
        clips.push((split, clip));
    }
    Ok(Dataset {
        config: config.clone(),
        clips,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    clip_id: String,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: SynthConfig,
    clips: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationJson {
    frame: usize,
    phase: Phase,
    points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct ClipJson {
    clip_id: String,
    subject_id: String,
    spacing_mm: f64,
    height: usize,
    width: usize,
    annotations: Vec<AnnotationJson>,
    gt_contours: BTreeMap<usize, Vec<[f64; 2]>>,
}

fn to_pairs(points: &[Point2]) -> Vec<[f64; 2]> {
    points.iter().map(|&p| p.into()).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::format(path, "missing file"))
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn valid_clip_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.clips.len());
    for (split, clip) in &dataset.clips {
        if !valid_clip_id(&clip.clip_id) {
            return Err(Error::invalid(format!(
                "unusable clip id {:?}",
                clip.clip_id
            )));
        }
        tns::write(
            &dir.join(format!("{}.tns", clip.clip_id)),
            clip.frames.shape(),
            clip.frames.data(),
        )?;
        let json = ClipJson {
            clip_id: clip.clip_id.clone(),
            subject_id: clip.subject_id.clone(),
            spacing_mm: clip.grid.spacing,
            height: clip.grid.height,
            width: clip.grid.width,
            annotations: clip
                .annotations
                .iter()
                .map(|a| AnnotationJson {
                    frame: a.frame_index,
                    phase: a.phase,
                    points: to_pairs(&a.points),
                })
                .collect(),
            gt_contours: clip
                .gt_contours
                .iter()
                .map(|(f, p)| (*f, to_pairs(p.points())))
                .collect(),
        };
        write_json(&dir.join(format!("{}.json", clip.clip_id)), &json)?;
        entries.push(ManifestEntry {
            clip_id: clip.clip_id.clone(),
            split: *split,
        });
    }
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            format: DATASET_FORMAT.into(),
            config: dataset.config.clone(),
            clips: entries,
        },
    )
}

pub fn read_clip(dir: &Path, clip_id: &str) -> Result<ClipRecord> {
    let json_path = dir.join(format!("{clip_id}.json"));
    let tns_path = dir.join(format!("{clip_id}.tns"));
    let json: ClipJson = read_json(&json_path)?;
    require_file(&tns_path)?;
    let (shape, data) = tns::read(&tns_path)?;
    if shape.len() != 3 || shape[1] != json.height || shape[2] != json.width {
        return Err(Error::format(
            &tns_path,
            format!(
                "tensor shape {shape:?} disagrees with {}×{} in {}",
                json.height,
                json.width,
                json_path.display()
            ),
        ));
    }
    let grid = GridSpec::new(json.height, json.width, json.spacing_mm)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    let mut gt_contours = BTreeMap::new();
    for (f, pts) in json.gt_contours {
        let poly = Polyline::new(pts.into_iter().map(Point2::from).collect())
            .map_err(|e| Error::format(&json_path, e.to_string()))?;
        gt_contours.insert(f, poly);
    }
    let record = ClipRecord {
        clip_id: json.clip_id,
        subject_id: json.subject_id,
        grid,
        frames: Tensor::new(shape, data).map_err(|e| Error::format(&tns_path, e.to_string()))?,
        annotations: json
            .annotations
            .into_iter()
            .map(|a| Annotation {
                frame_index: a.frame,
                phase: a.phase,
                points: a.points.into_iter().map(Point2::from).collect(),
            })
            .collect(),
        gt_contours,
    };
    if record.clip_id != clip_id {
        return Err(Error::format(
            &json_path,
            format!("clip_id {:?} does not match file name", record.clip_id),
        ));
    }
    record.check(&json_path)?;
    Ok(record)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::format(
            &manifest_path,
            format!("unknown dataset format {:?}", manifest.format),
        ));
    }
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for entry in manifest.clips {
        if !valid_clip_id(&entry.clip_id) {
            return Err(Error::format(
                &manifest_path,
                format!("unusable clip id {:?}", entry.clip_id),
            ));
        }
        clips.push((entry.split, read_clip(dir, &entry.clip_id)?));
    }
    Ok(Dataset {
        config: manifest.config,
        clips,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameLabel {
    pub points: Vec<Point2>,
    pub distance: DistanceMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub start: usize,
    /// `15×H×W`.
    pub frames: Tensor<f32>,
    pub mask: Vec<bool>,
    pub labels: Vec<Option<FrameLabel>>,
}

impl WindowSample {
    pub fn annotated(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Window starts whose 15 frames contain at least one annotated frame.
pub fn valid_starts(clip: &ClipRecord) -> Result<Vec<usize>> {
    let t = clip.len();
    if t < WINDOW_LEN {
        return Err(Error::invalid(format!(
            "clip {} has {t} frames, a window needs {WINDOW_LEN}",
            clip.clip_id
        )));
    }
    Ok((0..=t - WINDOW_LEN)
        .filter(|&s| {
            clip.annotations
                .iter()
                .any(|a| (s..s + WINDOW_LEN).contains(&a.frame_index))
        })
        .collect())
}

/// Distance-map labels of every annotated frame, rasterized from the gt contours.
pub fn label_maps(clip: &ClipRecord) -> Result<BTreeMap<usize, DistanceMap>> {
    clip.gt_contours
        .iter()
        .map(|(&f, c)| Ok((f, rasterize_polyline_distance(c, &clip.grid)?)))
        .collect()
}

/// Builds the window starting at `start`, with labels on annotated frames.
pub fn window_at(clip: &ClipRecord, start: usize) -> Result<WindowSample> {
    window_with_maps(clip, start, &label_maps(clip)?)
}

/// As [`window_at`], reusing maps from [`label_maps`].
pub fn window_with_maps(
    clip: &ClipRecord,
    start: usize,
    maps: &BTreeMap<usize, DistanceMap>,
) -> Result<WindowSample> {
    if start + WINDOW_LEN > clip.len() {
        return Err(Error::invalid(format!(
            "window start {start} overruns clip of {} frames",
            clip.len()
        )));
    }
    let hw = clip.grid.len();
    let frames = Tensor::new(
        vec![WINDOW_LEN, clip.grid.height, clip.grid.width],
        clip.frames.data()[start * hw..(start + WINDOW_LEN) * hw].to_vec(),
    )?;
    let mut mask = Vec::with_capacity(WINDOW_LEN);
    let mut labels = Vec::with_capacity(WINDOW_LEN);
    for f in start..start + WINDOW_LEN {
        match clip.annotation_at(f) {
            Some(a) => {
                let distance = maps.get(&f).ok_or_else(|| {
                    Error::invalid(format!("no distance label for annotated frame {f}"))
                })?;
                mask.push(true);
                labels.push(Some(FrameLabel {
                    points: a.points.clone(),
                    distance: distance.clone(),
                }));
            }
            None => {
                mask.push(false);
                labels.push(None);
            }
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid(format!(
            "window at {start} holds no annotated frame"
        )));
    }
    Ok(WindowSample {
        start,
        frames,
        mask,
        labels,
    })
}

/// Uniform draw over [`valid_starts`].
pub fn sample_start<R: Rng + ?Sized>(clip: &ClipRecord, rng: &mut R) -> Result<usize> {
    let starts = valid_starts(clip)?;
    if starts.is_empty() {
        return Err(Error::invalid(format!(
            "clip {} has no window containing an annotated frame",
            clip.clip_id
        )));
    }
    Ok(starts[rng.random_range(0..starts.len())])
}

pub fn sample_window<R: Rng + ?Sized>(clip: &ClipRecord, rng: &mut R) -> Result<WindowSample> {
    let start = sample_start(clip, rng)?;
    window_at(clip, start)
}
