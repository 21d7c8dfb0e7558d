//! Adam training loop with per-epoch window sampling, fixed validation windows and
//! best-checkpoint selection.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::DistanceMap;
use crate::losses::{total_loss, LossBreakdown, Targets, DEFAULT_LAMBDA};
use crate::network::{
    bind_params, forward, init_params, Checkpoint, NetworkConfig, NetworkParams, WindowOutput,
};
use crate::synthdata::{label_maps, sample_start, window_with_maps, ClipRecord, WindowSample};

/// Seed of the validation window draw; independent of the training seed.
pub const VALIDATION_SEED: u64 = 0x7a11_da7e;

/// Network variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Point head only, no recurrence, no temporal regularizer.
    #[serde(rename = "pointreg")]
    PointReg,
    #[serde(rename = "dual")]
    Dual,
    #[serde(rename = "dual-gru")]
    DualGru,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::PointReg, Variant::Dual, Variant::DualGru];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PointReg => "pointreg",
            Variant::Dual => "dual",
            Variant::DualGru => "dual-gru",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }

    /// `base` with the head and recurrence flags of this variant.
    pub fn network_config(self, base: &NetworkConfig) -> NetworkConfig {
        NetworkConfig {
            enable_gru: self == Variant::DualGru,
            enable_distance_head: self != Variant::PointReg,
            enable_point_head: true,
            ..base.clone()
        }
    }

    /// The variant whose flags `config` carries, if any.
    pub fn of(config: &NetworkConfig) -> Option<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.network_config(config) == *config)
    }

    /// The point-only baseline always trains without the regularizer.
    pub fn lambda(self, requested: f64) -> f64 {
        match self {
            Variant::PointReg => 0.0,
            _ => requested,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Where `best.ckpt.*`, per-improvement `epoch_XXXX.ckpt.*` and the logs go.
    /// Nothing is written when absent. Not serialized, so checkpoints do not depend
    /// on where they were written.
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 40,
            lambda: DEFAULT_LAMBDA,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// First and second moments, kept in f64 whatever the parameter type.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i].as_f64();
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let p = params[i].as_f64() - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        params[i] = T::from_f64_lossy(p);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
    /// Validation loss strictly improved and a checkpoint was stored.
    pub improved: bool,
}

/// Running frame-weighted average of window losses.
#[derive(Default)]
struct LossMeter {
    frames: f64,
    windows: f64,
    l_m: f64,
    l_p: f64,
    l_r: f64,
}

impl LossMeter {
    fn add(&mut self, b: &LossBreakdown, annotated: usize) {
        let k = annotated as f64;
        self.frames += k;
        self.windows += 1.0;
        self.l_m += b.l_m * k;
        self.l_p += b.l_p * k;
        self.l_r += b.l_r;
    }

    fn finish(&self, lambda: f64) -> LossBreakdown {
        let l_m = self.l_m / self.frames;
        let l_p = self.l_p / self.frames;
        let l_r = self.l_r / self.windows;
        LossBreakdown {
            l_m,
            l_p,
            l_r,
            total: l_m + l_p + lambda * l_r,
            lambda,
        }
    }
}

/// Validation windows: one per clip, drawn once with [`VALIDATION_SEED`].
pub fn validation_windows(clips: &[&ClipRecord]) -> Result<Vec<(String, WindowSample)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(VALIDATION_SEED);
    clips
        .iter()
        .map(|c| {
            let start = sample_start(c, &mut rng)?;
            Ok((
                c.clip_id.clone(),
                window_with_maps(c, start, &label_maps(c)?)?,
            ))
        })
        .collect()
}

/// Per-frame normalized points of one validation window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPrediction {
    pub clip_id: String,
    pub start: usize,
    pub points: Vec<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    pub loss: LossBreakdown,
    pub predictions: Vec<WindowPrediction>,
}

/// Forward pass in f32, losses in f64 on the detached outputs.
fn window_loss_f64(
    config: &NetworkConfig,
    params: &NetworkParams<f32>,
    window: &WindowSample,
    lambda: f64,
) -> Result<(LossBreakdown, Vec<Vec<[f64; 2]>>)> {
    let mut tape = Tape::<f32>::new();
    let bound = bind_params(&mut tape, params, false);
    let out = run_window(&mut tape, config, &bound, window)?;
    let cast = |t: &Tensor<f32>| t.cast::<f64>();
    let mut t64 = Tape::<f64>::new();
    let dist = out.dist.map(|d| t64.constant(cast(tape.value(d))));
    let heatmaps = t64.constant(cast(tape.value(out.heatmaps)));
    let pts = tape.value(out.points).cast::<f64>();
    let points = t64.constant(pts.clone());
    let out64 = WindowOutput {
        dist,
        heatmaps,
        points,
    };
    let targets = Targets::<f64>::from_window(window)?;
    let b = total_loss(&mut t64, &out64, &targets, lambda)?.breakdown(&t64);
    let k = config.n_points;
    let per_frame = pts
        .data()
        .chunks(2 * k)
        .map(|f| f.chunks(2).map(|p| [p[0], p[1]]).collect())
        .collect();
    Ok((b, per_frame))
}

fn run_window<T: Real>(
    tape: &mut Tape<T>,
    config: &NetworkConfig,
    bound: &crate::network::BoundParams,
    window: &WindowSample,
) -> Result<WindowOutput> {
    let s = window.frames.shape();
    let frames: Tensor<T> = window
        .frames
        .cast::<T>()
        .reshape(vec![s[0], 1, s[1], s[2]])?;
    let input = tape.constant(frames);
    forward(tape, config, bound, input)
}

/// Mean validation loss over fixed windows. Does not touch `params`.
pub fn validate(
    config: &NetworkConfig,
    params: &NetworkParams<f32>,
    windows: &[(String, WindowSample)],
    lambda: f64,
) -> Result<Validation> {
    if windows.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let mut meter = LossMeter::default();
    let mut predictions = Vec::with_capacity(windows.len());
    for (clip_id, w) in windows {
        let (b, points) = window_loss_f64(config, params, w, lambda)?;
        meter.add(&b, w.annotated());
        predictions.push(WindowPrediction {
            clip_id: clip_id.clone(),
            start: w.start,
            points,
        });
    }
    Ok(Validation {
        loss: meter.finish(lambda),
        predictions,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    /// JSON path of the stored best checkpoint, when writing to disk.
    pub best_path: Option<PathBuf>,
    pub final_params: NetworkParams<f32>,
    pub initial_validation: LossBreakdown,
    pub log: Vec<TrainLogEntry>,
}

/// What a checkpoint records about the run that produced it.
#[derive(Serialize)]
struct TrainingRecord<'a> {
    train_config: &'a TrainConfig,
    epoch: usize,
    validation: LossBreakdown,
}

#[derive(Serialize)]
struct TimingEntry {
    epoch: usize,
    wall_seconds: f64,
}

struct Sinks {
    dir: PathBuf,
    log: BufWriter<File>,
    timing: BufWriter<File>,
}

impl Sinks {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            Ok(BufWriter::new(
                File::create(&p).map_err(|e| Error::io(&p, e))?,
            ))
        };
        Ok(Sinks {
            dir: dir.to_path_buf(),
            log: open("log.jsonl")?,
            timing: open("timing.jsonl")?,
        })
    }

    fn line<S: Serialize>(w: &mut BufWriter<File>, path: &Path, v: &S) -> Result<()> {
        let text = serde_json::to_string(v).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(w, "{text}")
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

fn numeric_abort(e: Error, epoch: usize, last_good: &Option<PathBuf>) -> Error {
    let where_ = match last_good {
        Some(p) => format!("last good checkpoint {}", p.display()),
        None => "no checkpoint stored yet".into(),
    };
    match e {
        Error::Numeric { layer, detail } => Error::Numeric {
            layer,
            detail: format!("{detail} (epoch {epoch}; {where_})"),
        },
        other => other,
    }
}

/// Trains `config` on `train` and selects the epoch with the lowest validation loss.
pub fn train(
    train_clips: &[&ClipRecord],
    val_clips: &[&ClipRecord],
    config: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(train_clips, val_clips, config, cfg, &mut |_, _| {})
}

/// As [`train`], calling `on_epoch` with each log entry and its wall time in seconds.
pub fn train_with(
    train_clips: &[&ClipRecord],
    val_clips: &[&ClipRecord],
    config: &NetworkConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&TrainLogEntry, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    cfg.validate()?;
    if train_clips.is_empty() || val_clips.is_empty() {
        return Err(Error::invalid(format!(
            "need training and validation clips, got {} and {}",
            train_clips.len(),
            val_clips.len()
        )));
    }
    let maps: Vec<BTreeMap<usize, DistanceMap>> = train_clips
        .iter()
        .map(|c| label_maps(c))
        .collect::<Result<_>>()?;
    let val_windows = validation_windows(val_clips)?;
    let mut sinks = match &cfg.checkpoint_dir {
        Some(d) => Some(Sinks::open(d)?),
        None => None,
    };

    let mut params = init_params(config, cfg.seed)?;
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len());
    let adam_cfg = AdamConfig::from(cfg);
    let initial_validation = validate(config, &params, &val_windows, cfg.lambda)?.loss;

    let mut best: Option<(f64, usize, NetworkParams<f32>, LossBreakdown)> = None;
    let mut best_path = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_clips.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let windows: Vec<WindowSample> = order
            .iter()
            .map(|&i| {
                let start = sample_start(train_clips[i], &mut rng)?;
                window_with_maps(train_clips[i], start, &maps[i])
            })
            .collect::<Result<_>>()?;

        let mut meter = LossMeter::default();
        for batch in windows.chunks(cfg.batch_size) {
            let grads = batch_gradients(config, &params, batch, cfg.lambda, &mut meter)
                .map_err(|e| numeric_abort(e, epoch, &best_path))?;
            adam_step(&mut flat, &grads, &mut adam, &adam_cfg)?;
            if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
                return Err(numeric_abort(
                    Error::Numeric {
                        layer: "adam".into(),
                        detail: format!("parameter {i} became non-finite"),
                    },
                    epoch,
                    &best_path,
                ));
            }
            params = NetworkParams::from_flat(config, &flat)?;
        }
        let train_loss = meter.finish(cfg.lambda);
        let val = validate(config, &params, &val_windows, cfg.lambda)
            .map_err(|e| numeric_abort(e, epoch, &best_path))?
            .loss;
        if !val.total.is_finite() {
            return Err(numeric_abort(
                Error::Numeric {
                    layer: "validation".into(),
                    detail: "non-finite validation loss".into(),
                },
                epoch,
                &best_path,
            ));
        }
        let improved = best.as_ref().is_none_or(|b| val.total < b.0);
        if improved {
            best = Some((val.total, epoch, params.clone(), val));
            if let Some(s) = &sinks {
                let ckpt = checkpoint(config, &params, cfg, epoch, val)?;
                ckpt.save(&s.dir, &format!("epoch_{epoch:04}"))?;
                best_path = Some(ckpt.save(&s.dir, "best")?);
            }
        }
        let entry = TrainLogEntry {
            epoch,
            train: train_loss,
            validation: val,
            improved,
        };
        let secs = started.elapsed().as_secs_f64();
        if let Some(s) = &mut sinks {
            let (lp, tp) = (s.dir.join("log.jsonl"), s.dir.join("timing.jsonl"));
            Sinks::line(&mut s.log, &lp, &entry)?;
            Sinks::line(
                &mut s.timing,
                &tp,
                &TimingEntry {
                    epoch,
                    wall_seconds: secs,
                },
            )?;
        }
        on_epoch(&entry, secs);
        log.push(entry);
    }

    let (best_params, best_epoch, best_val) = match best {
        Some((_, e, p, v)) => (p, e, Some(v)),
        None => (params.clone(), 0, None),
    };
    let best = match best_val {
        Some(v) => checkpoint(config, &best_params, cfg, best_epoch, v)?,
        None => checkpoint(config, &best_params, cfg, 0, initial_validation)?,
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_path,
        final_params: params,
        initial_validation,
        log,
    })
}

fn checkpoint(
    config: &NetworkConfig,
    params: &NetworkParams<f32>,
    cfg: &TrainConfig,
    epoch: usize,
    val: LossBreakdown,
) -> Result<Checkpoint> {
    let training = serde_json::to_value(TrainingRecord {
        train_config: cfg,
        epoch,
        validation: val,
    })
    .map_err(|e| Error::Internal(e.to_string()))?;
    Ok(Checkpoint {
        config: config.clone(),
        params: params.clone(),
        training,
        validation_loss: Some(val.total),
    })
}

/// Gradient of the batch objective
/// `Σ_w (k_w / K)·(l_m + l_p)_w + (λ / B)·Σ_w l_r,w`,
/// where `k_w` counts annotated frames of window `w`, `K = Σ k_w` and `B` is the
/// batch size. Windows are processed one at a time and summed in batch order.
fn batch_gradients(
    config: &NetworkConfig,
    params: &NetworkParams<f32>,
    batch: &[WindowSample],
    lambda: f64,
    meter: &mut LossMeter,
) -> Result<Vec<f32>> {
    let k_total: usize = batch.iter().map(|w| w.annotated()).sum();
    let b = batch.len() as f64;
    let mut acc = vec![0.0f32; params.count()];
    for w in batch {
        let mut tape = Tape::<f32>::new();
        let bound = bind_params(&mut tape, params, true);
        let out = run_window(&mut tape, config, &bound, w)?;
        let targets = Targets::<f32>::from_window(w)?;
        let lv = total_loss(&mut tape, &out, &targets, lambda)?;
        meter.add(&lv.breakdown(&tape), w.annotated());
        let data = match lv.l_m {
            Some(m) => tape.add(m, lv.l_p)?,
            None => lv.l_p,
        };
        let mut obj = tape.scale(data, w.annotated() as f64 / k_total as f64)?;
        if lambda > 0.0 {
            let reg = tape.scale(lv.l_r, lambda / b)?;
            obj = tape.add(obj, reg)?;
        }
        let mut grads = tape.backward(obj)?;
        let mut offset = 0;
        for &v in bound.vars() {
            let g = grads.take(v);
            for (a, x) in acc[offset..offset + g.len()].iter_mut().zip(&g) {
                *a += *x;
            }
            offset += g.len();
        }
    }
    Ok(acc)
}
