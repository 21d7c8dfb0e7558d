//! Dual-decoder U-Net with an optional convolutional GRU bottleneck.
//!
//! Frames are folded into the batch axis for the encoder and decoders. The bottleneck
//! is a conv block, followed (when enabled) by a convolutional GRU that scans the
//! window forward in time from a zero state. Two decoders share the encoder skips but
//! no weights: one ends in a softplus distance map, the other in `n_points` heatmaps
//! that are normalized by a spatial softmax and reduced to coordinates by DSNT.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tns;

/// Bias added to the GRU update gate at initialization.
pub const GRU_UPDATE_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub n_points: usize,
    pub input_size: usize,
    pub seq_len: usize,
    pub enable_gru: bool,
    pub enable_distance_head: bool,
    pub enable_point_head: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            levels: 3,
            base_channels: 8,
            n_points: 7,
            input_size: 64,
            seq_len: 15,
            enable_gru: true,
            enable_distance_head: true,
            enable_point_head: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.levels == 0 || self.base_channels == 0 || self.seq_len == 0 {
            return bad("levels, base_channels and seq_len must be positive".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << self.levels) {
            return bad(format!(
                "input_size {} is not divisible by 2^{}",
                self.input_size, self.levels
            ));
        }
        if self.n_points < 3 || self.n_points.is_multiple_of(2) {
            return bad(format!(
                "n_points must be odd and >= 3, got {}",
                self.n_points
            ));
        }
        if !self.enable_point_head {
            return bad("the point head cannot be disabled".into());
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.levels)
    }

    pub fn output_channels(&self) -> usize {
        usize::from(self.enable_distance_head) + self.n_points
    }

    /// Names and shapes of every parameter tensor, in construction order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, c_in: usize, c_out: usize| {
            out.push((format!("{name}.weight"), vec![c_out, c_in, 3, 3]));
            out.push((format!("{name}.bias"), vec![c_out]));
        };
        for l in 0..self.levels {
            let c_in = if l == 0 { 1 } else { self.channels(l - 1) };
            conv(format!("enc{l}.conv1"), c_in, self.channels(l));
            conv(format!("enc{l}.conv2"), self.channels(l), self.channels(l));
        }
        let cb = self.bottleneck_channels();
        conv(
            "bottleneck.conv1".into(),
            self.channels(self.levels - 1),
            cb,
        );
        conv("bottleneck.conv2".into(), cb, cb);
        if self.enable_gru {
            for gate in ["update", "reset", "candidate"] {
                conv(format!("gru.{gate}"), 2 * cb, cb);
            }
        }
        let mut heads = Vec::new();
        if self.enable_distance_head {
            heads.push(("dist", 1));
        }
        heads.push(("point", self.n_points));
        for (head, c_final) in heads {
            for l in (0..self.levels).rev() {
                let c = self.channels(l);
                conv(format!("{head}.dec{l}.conv1"), self.channels(l + 1) + c, c);
                conv(format!("{head}.dec{l}.conv2"), c, c);
            }
            conv(format!("{head}.head"), self.channels(0), c_final);
        }
        out
    }
}

/// Ordered named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> NetworkParams<T> {
    pub fn from_entries(config: &NetworkConfig, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let expected = config.param_shapes();
        if expected.len() != entries.len() {
            return Err(Error::shape(format!(
                "config needs {} parameter tensors, got {}",
                expected.len(),
                entries.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&entries) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::shape(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(NetworkParams { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.count());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn from_flat(config: &NetworkConfig, flat: &[T]) -> Result<Self> {
        let mut offset = 0;
        let mut entries = Vec::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let chunk = flat
                .get(offset..offset + n)
                .ok_or_else(|| Error::shape(format!("flat parameter blob too short at {name}")))?;
            entries.push((name, Tensor::new(shape, chunk.to_vec())?));
            offset += n;
        }
        if offset != flat.len() {
            return Err(Error::shape(format!(
                "flat parameter blob has {} values, config needs {offset}",
                flat.len()
            )));
        }
        Ok(NetworkParams { entries })
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }
}

/// Fan-in scaled uniform kernels, zero biases and a +1 GRU update-gate bias.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<NetworkParams<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if shape.len() == 4 {
            let fan_in = (shape[1] * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            (0..n)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect()
        } else if name == "gru.update.bias" {
            vec![GRU_UPDATE_BIAS_INIT as f32; n]
        } else {
            vec![0.0; n]
        };
        entries.push((name, Tensor::new(shape, data)?));
    }
    NetworkParams::from_entries(config, entries)
}

/// Parameters placed on a tape, in construction order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Points parameter `name` at another tape value of the same shape.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        self.vars[i] = var;
        Ok(())
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
    }

    fn conv(&self, name: &str) -> Result<(Var, Var)> {
        Ok((
            self.get(&format!("{name}.weight"))?,
            self.get(&format!("{name}.bias"))?,
        ))
    }
}

pub fn bind_params<T: Real>(
    tape: &mut Tape<T>,
    params: &NetworkParams<T>,
    requires_grad: bool,
) -> BoundParams {
    let mut names = Vec::with_capacity(params.len());
    let mut vars = Vec::with_capacity(params.len());
    for (name, t) in params.entries() {
        names.push(name.clone());
        vars.push(tape.leaf(t.clone(), requires_grad));
    }
    BoundParams { names, vars }
}

/// Tape handles for one window's predictions.
#[derive(Clone, Copy, Debug)]
pub struct WindowOutput {
    /// `T×1×H×W` softplus distance maps.
    pub dist: Option<Var>,
    /// `T×K×H×W` post-softmax heatmaps.
    pub heatmaps: Var,
    /// `T×K×2` DSNT coordinates.
    pub points: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GruGates {
    pub update: (Var, Var),
    pub reset: (Var, Var),
    pub candidate: (Var, Var),
}

/// One convolutional GRU step on `N×C×h×w` state and input.
pub fn conv_gru_step<T: Real>(
    tape: &mut Tape<T>,
    state: Var,
    input: Var,
    gates: &GruGates,
) -> Result<Var> {
    if tape.value(state).shape() != tape.value(input).shape() {
        return Err(Error::shape(format!(
            "GRU state {:?} and input {:?} differ",
            tape.value(state).shape(),
            tape.value(input).shape()
        )));
    }
    let xh = tape.concat_channels(input, state)?;
    let z = tape.conv2d(xh, gates.update.0, gates.update.1)?;
    let z = tape.activation(Activation::Sigmoid, z)?;
    let r = tape.conv2d(xh, gates.reset.0, gates.reset.1)?;
    let r = tape.activation(Activation::Sigmoid, r)?;
    let rh = tape.mul(r, state)?;
    let xrh = tape.concat_channels(input, rh)?;
    let n = tape.conv2d(xrh, gates.candidate.0, gates.candidate.1)?;
    let n = tape.activation(Activation::Tanh, n)?;
    // (1 - z)·h + z·n written as h + z·(n - h)
    let delta = tape.sub(n, state)?;
    let step = tape.mul(z, delta)?;
    tape.add(state, step)
}

fn conv_act<T: Real>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    name: &str,
    x: Var,
    act: Activation,
) -> Result<Var> {
    let (w, b) = p.conv(name)?;
    let y = tape.conv2d(x, w, b).map_err(|e| e.at_layer(name))?;
    tape.activation(act, y).map_err(|e| e.at_layer(name))
}

fn block<T: Real>(tape: &mut Tape<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let y = conv_act(tape, p, &format!("{name}.conv1"), x, Activation::LeakyRelu)?;
    conv_act(tape, p, &format!("{name}.conv2"), y, Activation::LeakyRelu)
}

fn decoder<T: Real>(
    tape: &mut Tape<T>,
    config: &NetworkConfig,
    p: &BoundParams,
    head: &str,
    bottleneck: Var,
    skips: &[Var],
) -> Result<Var> {
    let mut x = bottleneck;
    for l in (0..config.levels).rev() {
        let name = format!("{head}.dec{l}");
        let up = tape.upsample2(x).map_err(|e| e.at_layer(&name))?;
        let cat = tape
            .concat_channels(up, skips[l])
            .map_err(|e| e.at_layer(&name))?;
        x = block(tape, p, &name, cat)?;
    }
    let name = format!("{head}.head");
    let (w, b) = p.conv(&name)?;
    tape.conv2d(x, w, b).map_err(|e| e.at_layer(&name))
}

/// Forward pass over one window `frames` of shape `T×1×H×W`.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    config: &NetworkConfig,
    p: &BoundParams,
    frames: Var,
) -> Result<WindowOutput> {
    let [t, c, h, w] = tape.value(frames).dims4()?;
    if c != 1 || h != config.input_size || w != config.input_size {
        return Err(Error::shape(format!(
            "network expects T×1×{s}×{s} input, got {:?}",
            tape.value(frames).shape(),
            s = config.input_size
        )));
    }
    let mut skips = Vec::with_capacity(config.levels);
    let mut x = frames;
    for l in 0..config.levels {
        let name = format!("enc{l}");
        let y = block(tape, p, &name, x)?;
        skips.push(y);
        x = tape.maxpool2(y).map_err(|e| e.at_layer(&name))?;
    }
    let mut bottleneck = block(tape, p, "bottleneck", x)?;
    if config.enable_gru {
        let gates = GruGates {
            update: p.conv("gru.update")?,
            reset: p.conv("gru.reset")?,
            candidate: p.conv("gru.candidate")?,
        };
        let shape = tape.value(bottleneck).shape().to_vec();
        let mut state = tape.constant(Tensor::zeros(vec![1, shape[1], shape[2], shape[3]]));
        let mut states = Vec::with_capacity(t);
        for step in 0..t {
            let x_t = tape.select_batch(bottleneck, &[step])?;
            state = conv_gru_step(tape, state, x_t, &gates).map_err(|e| e.at_layer("gru"))?;
            states.push(state);
        }
        bottleneck = tape.concat_batch(&states)?;
    }
    let dist = if config.enable_distance_head {
        let logits = decoder(tape, config, p, "dist", bottleneck, &skips)?;
        Some(
            tape.activation(Activation::Softplus, logits)
                .map_err(|e| e.at_layer("dist.head"))?,
        )
    } else {
        None
    };
    let logits = decoder(tape, config, p, "point", bottleneck, &skips)?;
    let heatmaps = tape
        .spatial_softmax(logits)
        .map_err(|e| e.at_layer("point.softmax"))?;
    let points = tape.dsnt(heatmaps).map_err(|e| e.at_layer("point.dsnt"))?;
    Ok(WindowOutput {
        dist,
        heatmaps,
        points,
    })
}

/// Per-frame prediction detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    /// `H×W` normalized distance map, absent for the point-only variant.
    pub dist_map: Option<Vec<f32>>,
    /// `K×H×W` probability maps.
    pub heatmaps: Vec<f32>,
    /// DSNT coordinates in normalized units.
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug)]
pub struct ClipForward {
    pub predictions: Vec<FramePrediction>,
    /// `T×H×W×C` output with the distance channel first, then the heatmaps.
    pub raw: Tensor<f32>,
}

/// Gradient-free forward pass over a `T×H×W` window.
pub fn forward_clip(
    config: &NetworkConfig,
    params: &NetworkParams<f32>,
    frames: &Tensor<f32>,
) -> Result<ClipForward> {
    config.validate()?;
    let s = config.input_size;
    let shape = frames.shape();
    if shape.len() != 3 || shape[1] != s || shape[2] != s || shape[0] != config.seq_len {
        return Err(Error::shape(format!(
            "expected a {}×{s}×{s} clip, got {shape:?}",
            config.seq_len
        )));
    }
    let t = shape[0];
    let mut tape = Tape::new();
    let p = bind_params(&mut tape, params, false);
    let input = tape.constant(frames.clone().reshape(vec![t, 1, s, s])?);
    let out = forward(&mut tape, config, &p, input)?;
    let k = config.n_points;
    let hw = s * s;
    let channels = config.output_channels();
    let heat = tape.value(out.heatmaps).data();
    let pts = tape.value(out.points).data();
    let dist = out.dist.map(|d| tape.value(d).data());
    let mut raw = vec![0.0f32; t * hw * channels];
    let mut predictions = Vec::with_capacity(t);
    for f in 0..t {
        let heatmaps = heat[f * k * hw..(f + 1) * k * hw].to_vec();
        let dist_map = dist.map(|d| d[f * hw..(f + 1) * hw].to_vec());
        for px in 0..hw {
            let cell = &mut raw[(f * hw + px) * channels..][..channels];
            let mut ch = 0;
            if let Some(d) = &dist_map {
                cell[0] = d[px];
                ch = 1;
            }
            for j in 0..k {
                cell[ch + j] = heatmaps[j * hw + px];
            }
        }
        let points = (0..k)
            .map(|j| {
                let i = (f * k + j) * 2;
                [pts[i] as f64, pts[i + 1] as f64]
            })
            .collect();
        predictions.push(FramePrediction {
            dist_map,
            heatmaps,
            points,
        });
    }
    Ok(ClipForward {
        predictions,
        raw: Tensor::new(vec![t, s, s, channels], raw)?,
    })
}

pub const CHECKPOINT_FORMAT: &str = "contourflow-ckpt-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: NetworkConfig,
    pub params: Vec<ParamManifestEntry>,
    pub training: serde_json::Value,
    pub validation_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: NetworkParams<f32>,
    pub training: serde_json::Value,
    pub validation_loss: Option<f64>,
}

impl Checkpoint {
    fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            params: self
                .params
                .entries()
                .iter()
                .map(|(n, t)| ParamManifestEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            training: self.training.clone(),
            validation_loss: self.validation_loss,
        }
    }

    /// Writes `<name>.ckpt.json` and `<name>.ckpt.tns`; returns the JSON path.
    pub fn save(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json_path = dir.join(format!("{name}.ckpt.json"));
        let tns_path = dir.join(format!("{name}.ckpt.tns"));
        let flat = self.params.flatten();
        tns::write(&tns_path, &[flat.len()], &flat)?;
        let text = serde_json::to_string_pretty(&self.header())
            .map_err(|e| Error::Internal(e.to_string()))?;
        fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
        Ok(json_path)
    }

    /// Loads from the `.ckpt.json` path; the tensor file sits beside it.
    pub fn load(json_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text)
            .map_err(|e| Error::format(json_path, format!("bad checkpoint json: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::format(
                json_path,
                format!("unknown checkpoint format {:?}", header.format),
            ));
        }
        header
            .config
            .validate()
            .map_err(|e| Error::format(json_path, e.to_string()))?;
        let expected: Vec<ParamManifestEntry> = header
            .config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| ParamManifestEntry { name, shape })
            .collect();
        if expected != header.params {
            return Err(Error::format(
                json_path,
                "parameter manifest does not match the network config",
            ));
        }
        let name = json_path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".ckpt.json"))
            .ok_or_else(|| Error::format(json_path, "checkpoint path must end in .ckpt.json"))?;
        let tns_path = json_path.with_file_name(format!("{name}.ckpt.tns"));
        let (shape, flat) = tns::read(&tns_path)?;
        let total: usize = expected
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        if shape != [total] {
            return Err(Error::format(
                &tns_path,
                format!("expected a flat [{total}] tensor, got {shape:?}"),
            ));
        }
        let params = NetworkParams::from_flat(&header.config, &flat)
            .map_err(|e| Error::format(&tns_path, e.to_string()))?;
        Ok(Checkpoint {
            config: header.config,
            params,
            training: header.training,
            validation_loss: header.validation_loss,
        })
    }
}
