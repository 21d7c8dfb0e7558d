use contourflow::autodiff::{
    grad_check, relative_error, Activation, ReduceKind, Tape, Tensor, Var,
};
use contourflow::losses::{total_loss, Targets};
use contourflow::network::{
    bind_params, conv_gru_step, forward, init_params, GruGates, NetworkConfig,
};
use contourflow::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{check, Outcome};

const SEEDS: u64 = 5;
const TOL: f64 = 1e-4;
const STEP: f64 = 1e-4;
/// Finite-difference steps tried in turn for each model coordinate. Large steps can
/// cross a pooling or activation kink inside the network; small ones drown gradients
/// near 1e-9 in rounding noise. A wrong adjoint disagrees at every step.
const MODEL_STEPS: [f64; 3] = [1e-3, 1e-4, 1e-5];
/// Agreement at which the remaining steps are skipped.
const SETTLED: f64 = TOL / 10.0;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Values at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        *v += gap.copysign(*v);
    }
    t
}

/// Pairwise distinct values on a `gap` lattice, so no pooling window has a near-tie.
fn tie_free(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// `sum(w ⊙ y)` with a fixed random `w`, so every output coordinate reaches the loss.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, t.value(y).shape());
    let w = t.constant(w);
    let m = t.mul(y, w)?;
    t.sum(m)
}

struct Worst {
    err: f64,
    what: String,
}

impl Worst {
    fn record(&mut self, what: &str, seed: u64, err: Result<f64>) {
        let err = err.unwrap_or(f64::INFINITY);
        if err.is_nan() || err > self.err {
            self.err = err;
            self.what = format!("{what} (seed {seed})");
        }
    }
}

/// Checks `f` with respect to each input in turn, the others held constant.
fn check_inputs<F>(w: &mut Worst, name: &str, seed: u64, inputs: &[Tensor<f64>], step: f64, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for i in 0..inputs.len() {
        let err = grad_check(
            |t, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| if j == i { x } else { t.constant(v.clone()) })
                    .collect();
                let y = f(t, &vars)?;
                project(t, y, seed)
            },
            &inputs[i],
            step,
        );
        w.record(&format!("{name}[{i}]"), seed, err);
    }
}

fn op_checks(w: &mut Worst, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let ins = [
        rand_tensor(r, &[2, 3, 5, 6]),
        rand_tensor(r, &[4, 3, 3, 3]),
        rand_tensor(r, &[4]),
    ];
    check_inputs(w, "conv2d", seed, &ins, STEP, |t, v| {
        t.conv2d(v[0], v[1], v[2])
    });

    let ins = [tie_free(r, &[2, 2, 4, 6], 20.0 * STEP)];
    check_inputs(w, "maxpool2", seed, &ins, STEP, |t, v| t.maxpool2(v[0]));

    let ins = [rand_tensor(r, &[2, 2, 3, 3])];
    check_inputs(w, "upsample2", seed, &ins, STEP, |t, v| t.upsample2(v[0]));

    let ins = [rand_tensor(r, &[2, 2, 3, 4]), rand_tensor(r, &[2, 3, 3, 4])];
    check_inputs(w, "concat_channels", seed, &ins, STEP, |t, v| {
        t.concat_channels(v[0], v[1])
    });

    let ins = [rand_tensor(r, &[1, 2, 3, 3]), rand_tensor(r, &[2, 2, 3, 3])];
    check_inputs(w, "concat_batch", seed, &ins, STEP, |t, v| {
        t.concat_batch(v)
    });

    let ins = [rand_tensor(r, &[4, 2, 3])];
    check_inputs(w, "select_batch", seed, &ins, STEP, |t, v| {
        t.select_batch(v[0], &[2, 0, 2, 3])
    });

    for kind in [
        Activation::LeakyRelu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Softplus,
    ] {
        let ins = [away_from_zero(r, &[3, 10], 10.0 * STEP)];
        check_inputs(w, &format!("{kind:?}"), seed, &ins, STEP, |t, v| {
            t.activation(kind, v[0])
        });
    }

    let ins = [rand_tensor(r, &[2, 3, 4, 5])];
    check_inputs(w, "spatial_softmax", seed, &ins, STEP, |t, v| {
        t.spatial_softmax(v[0])
    });

    // Probe steps must keep each map's mass inside the accepted tolerance.
    let mut probs = rand_tensor(r, &[2, 3, 4, 5]);
    for plane in probs.data_mut().chunks_mut(20) {
        plane.iter_mut().for_each(|p| *p = p.abs() + 0.05);
        let s: f64 = plane.iter().sum();
        plane.iter_mut().for_each(|p| *p /= s);
    }
    check_inputs(w, "dsnt", seed, &[probs], 1e-5, |t, v| t.dsnt(v[0]));
    let ins = [rand_tensor(r, &[2, 3, 4, 5])];
    check_inputs(w, "softmax+dsnt", seed, &ins, STEP, |t, v| {
        let p = t.spatial_softmax(v[0])?;
        t.dsnt(p)
    });

    let ins = [rand_tensor(r, &[3, 4]), rand_tensor(r, &[3, 4])];
    check_inputs(w, "add", seed, &ins, STEP, |t, v| t.add(v[0], v[1]));
    check_inputs(w, "sub", seed, &ins, STEP, |t, v| t.sub(v[0], v[1]));
    check_inputs(w, "mul", seed, &ins, STEP, |t, v| t.mul(v[0], v[1]));
    check_inputs(w, "scale", seed, &ins[..1], STEP, |t, v| {
        t.scale(v[0], -1.7)
    });

    for kind in [ReduceKind::Mean, ReduceKind::MeanAbs, ReduceKind::Sum] {
        let x = away_from_zero(r, &[3, 7], 10.0 * STEP);
        let err = grad_check(|t, v| t.reduce(kind, v), &x, STEP);
        w.record(&format!("reduce {kind:?}"), seed, err);
    }

    let c = 3;
    let mut ins = vec![rand_tensor(r, &[1, c, 4, 4]), rand_tensor(r, &[1, c, 4, 4])];
    for _ in 0..3 {
        ins.push(rand_tensor(r, &[c, 2 * c, 3, 3]));
        ins.push(rand_tensor(r, &[c]));
    }
    check_inputs(w, "conv_gru_step", seed, &ins, STEP, |t, v| {
        let gates = GruGates {
            update: (v[2], v[3]),
            reset: (v[4], v[5]),
            candidate: (v[6], v[7]),
        };
        conv_gru_step(t, v[0], v[1], &gates)
    });
}

pub fn reduced_config(gru: bool, dist: bool) -> NetworkConfig {
    NetworkConfig {
        levels: 2,
        base_channels: 2,
        input_size: 8,
        seq_len: 2,
        enable_gru: gru,
        enable_distance_head: dist,
        ..NetworkConfig::default()
    }
}

/// Full forward pass plus training loss, differentiated with respect to every
/// coordinate of every parameter tensor. Returns how many coordinates settled only
/// at a step other than the first.
fn model_checks(w: &mut Worst, seed: u64, config: &NetworkConfig, label: &str) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let s = config.input_size;
    let frames = rand_tensor(&mut rng, &[2, 1, s, s]);
    let mut maps = rand_tensor(&mut rng, &[2, 1, s, s]);
    maps.data_mut().iter_mut().for_each(|v| *v = v.abs());
    let mut points = rand_tensor(&mut rng, &[2, 7, 2]);
    points.data_mut().iter_mut().for_each(|v| *v *= 0.8);
    let targets = Targets {
        mask: vec![true, true],
        maps,
        points,
    };
    let params = init_params(config, seed).unwrap().cast::<f64>();
    let mut fallbacks = 0;
    for (name, value) in params.entries() {
        let loss = |x: &Tensor<f64>, requires_grad: bool| -> Result<(f64, Option<Tensor<f64>>)> {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), requires_grad);
            let mut bound = bind_params(&mut t, &params, false);
            bound.replace(name, v)?;
            let input = t.constant(frames.clone());
            let out = forward(&mut t, config, &bound, input)?;
            let total = total_loss(&mut t, &out, &targets, 0.5)?.total;
            let grad = if requires_grad {
                Some(t.backward(total)?.get(v))
            } else {
                None
            };
            Ok((t.value(total).item(), grad))
        };
        let err = (|| -> Result<f64> {
            let analytic = loss(value, true)?.1.unwrap();
            let mut worst: f64 = 0.0;
            let mut probe = value.clone();
            for i in 0..value.len() {
                let orig = probe.data()[i];
                let mut best = f64::INFINITY;
                for (k, h) in MODEL_STEPS.into_iter().enumerate() {
                    probe.data_mut()[i] = orig + h;
                    let up = loss(&probe, false)?.0;
                    probe.data_mut()[i] = orig - h;
                    let down = loss(&probe, false)?.0;
                    best = best.min(relative_error(analytic.data()[i], (up - down) / (2.0 * h)));
                    if best < SETTLED {
                        fallbacks += usize::from(k > 0);
                        break;
                    }
                }
                probe.data_mut()[i] = orig;
                worst = worst.max(best);
            }
            Ok(worst)
        })();
        w.record(&format!("{label} {name}"), seed, err);
    }
    fallbacks
}

pub fn suite() -> Outcome {
    let mut ops = Worst {
        err: 0.0,
        what: String::new(),
    };
    let mut model = Worst {
        err: 0.0,
        what: String::new(),
    };
    let mut fallbacks = 0;
    let mut coords = 0;
    for seed in 0..SEEDS {
        op_checks(&mut ops, seed);
        for (label, gru, dist) in [
            ("dual-gru", true, true),
            ("dual", false, true),
            ("pointreg", false, false),
        ] {
            let config = reduced_config(gru, dist);
            fallbacks += model_checks(&mut model, seed, &config, label);
            coords += config
                .param_shapes()
                .iter()
                .map(|(_, s)| s.iter().product::<usize>())
                .sum::<usize>();
        }
    }
    check(
        ops.err < TOL && model.err < TOL,
        format!(
            "{SEEDS} seeds; worst op error {:.2e} at {}; worst model error {:.2e} at {} over {coords} coordinates, {fallbacks} needing a smaller step (limit {TOL:.0e})",
            ops.err, ops.what, model.err, model.what
        ),
    )
}
