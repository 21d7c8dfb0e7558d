//! Training objective: map MAE plus point MSE on annotated frames, and a temporal
//! first-difference penalty on every frame of the window.

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::pixel_to_normalized;
use crate::network::WindowOutput;
use crate::synthdata::WindowSample;

pub const DEFAULT_LAMBDA: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_m: f64,
    pub l_p: f64,
    pub l_r: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Ground truth of one window restricted to its annotated frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets<T> {
    pub mask: Vec<bool>,
    /// `K×1×H×W` for the `K` annotated frames, in window order.
    pub maps: Tensor<T>,
    /// `K×7×2` normalized coordinates.
    pub points: Tensor<T>,
}

impl<T: Real> Targets<T> {
    pub fn from_window(sample: &WindowSample) -> Result<Self> {
        let [_, h, w] = <[usize; 3]>::try_from(sample.frames.shape())
            .map_err(|_| Error::shape("window frames must be T×H×W"))?;
        let mut maps = Vec::new();
        let mut points = Vec::new();
        let mut k = 0;
        let mut n_points = 0;
        for label in sample.labels.iter().flatten() {
            let grid = &label.distance.grid;
            if grid.height != h || grid.width != w {
                return Err(Error::shape("label grid disagrees with window frames"));
            }
            maps.extend(label.distance.values.iter().map(|&v| T::from_f64_lossy(v)));
            for &p in &label.points {
                let (xn, yn) = pixel_to_normalized(p, grid);
                points.push(T::from_f64_lossy(xn));
                points.push(T::from_f64_lossy(yn));
            }
            n_points = label.points.len();
            k += 1;
        }
        Ok(Targets {
            mask: sample.mask.clone(),
            maps: Tensor::new(vec![k, 1, h, w], maps)?,
            points: Tensor::new(vec![k, n_points, 2], points)?,
        })
    }

    pub fn annotated(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn masked_indices(mask: &[bool], frames: usize) -> Result<Vec<usize>> {
    if mask.len() != frames {
        return Err(Error::shape(format!(
            "mask has {} entries for {frames} frames",
            mask.len()
        )));
    }
    let idx: Vec<usize> = (0..frames).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::invalid("loss needs at least one annotated frame"));
    }
    Ok(idx)
}

/// Mean over masked frames of the per-frame mean absolute error. `pred` is `T×1×H×W`,
/// `gt` is `K×1×H×W` for the `K` masked frames.
pub fn loss_map<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: &Tensor<T>,
    mask: &[bool],
) -> Result<Var> {
    let t = tape.value(pred).shape()[0];
    let idx = masked_indices(mask, t)?;
    let sel = tape.select_batch(pred, &idx)?;
    if tape.value(sel).shape() != gt.shape() {
        return Err(Error::shape(format!(
            "predicted maps {:?} vs targets {:?}",
            tape.value(sel).shape(),
            gt.shape()
        )));
    }
    let g = tape.constant(gt.clone());
    let d = tape.sub(sel, g)?;
    tape.mean_abs(d)
}

/// Mean over masked frames of the per-point mean squared distance. `pred` is `T×K×2`.
pub fn loss_points<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: &Tensor<T>,
    mask: &[bool],
) -> Result<Var> {
    let t = tape.value(pred).shape()[0];
    let idx = masked_indices(mask, t)?;
    let sel = tape.select_batch(pred, &idx)?;
    if tape.value(sel).shape() != gt.shape() {
        return Err(Error::shape(format!(
            "predicted points {:?} vs targets {:?}",
            tape.value(sel).shape(),
            gt.shape()
        )));
    }
    let s = gt.shape();
    let g = tape.constant(gt.clone());
    let d = tape.sub(sel, g)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / (s[0] * s[1]) as f64)
}

fn mean_abs_step<T: Real>(tape: &mut Tape<T>, seq: Var) -> Result<Var> {
    let t = tape.value(seq).shape()[0];
    let prev = tape.select_batch(seq, &(0..t - 1).collect::<Vec<_>>())?;
    let next = tape.select_batch(seq, &(1..t).collect::<Vec<_>>())?;
    let d = tape.sub(next, prev)?;
    tape.mean_abs(d)
}

/// Mean over consecutive frame pairs of the mean absolute change of the distance map
/// plus the mean over heatmaps of their mean absolute change.
pub fn loss_reg<T: Real>(tape: &mut Tape<T>, maps: Option<Var>, heatmaps: Var) -> Result<Var> {
    let t = tape.value(heatmaps).shape()[0];
    if t < 2 {
        return Err(Error::invalid(format!(
            "temporal regularizer needs at least 2 frames, got {t}"
        )));
    }
    if let Some(m) = maps {
        if tape.value(m).shape()[0] != t {
            return Err(Error::shape(
                "maps and heatmaps have different frame counts",
            ));
        }
    }
    // Averaging over the K×H×W elements of each difference equals (1/K)·Σ_j of the
    // per-heatmap pixel means, since every heatmap has the same size.
    let heat = mean_abs_step(tape, heatmaps)?;
    match maps {
        Some(m) => {
            let dm = mean_abs_step(tape, m)?;
            tape.add(dm, heat)
        }
        None => Ok(heat),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_m: Option<Var>,
    pub l_p: Var,
    pub l_r: Var,
    pub total: Var,
    pub lambda: f64,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossBreakdown {
            l_m: self.l_m.map_or(0.0, v),
            l_p: v(self.l_p),
            l_r: v(self.l_r),
            total: v(self.total),
            lambda: self.lambda,
        }
    }
}

/// `l_m + l_p + λ·l_r`; `l_m` is dropped when the network has no distance head.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &WindowOutput,
    targets: &Targets<T>,
    lambda: f64,
) -> Result<LossVars> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let l_m = match out.dist {
        Some(d) => Some(loss_map(tape, d, &targets.maps, &targets.mask)?),
        None => None,
    };
    let l_p = loss_points(tape, out.points, &targets.points, &targets.mask)?;
    let l_r = loss_reg(tape, out.dist, out.heatmaps)?;
    let data = match l_m {
        Some(m) => tape.add(m, l_p)?,
        None => l_p,
    };
    let total = if lambda == 0.0 {
        data
    } else {
        let reg = tape.scale(l_r, lambda)?;
        tape.add(data, reg)?
    };
    Ok(LossVars {
        l_m,
        l_p,
        l_r,
        total,
        lambda,
    })
}
