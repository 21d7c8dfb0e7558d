use std::collections::BTreeMap;
use std::time::Instant;

use contourflow::evaluation::{evaluate_variant, ClipPredictor, ContourPoints, ModelPredictor};
use contourflow::network::{NetworkConfig, NetworkParams};
use contourflow::synthdata::{generate_dataset, ClipRecord, Split, SynthConfig};
use contourflow::trainer::{train_with, TrainConfig, Variant};

use crate::{check, Outcome};

const TRAIN_CLIPS: usize = 64;
const VAL_CLIPS: usize = 16;
const SEEDS: [u64; 3] = [0, 1, 2];
const LAMBDA: f64 = 0.001;
const OVERFIT_EPOCHS: usize = 300;
/// Mean landmark error (px) the single-clip overfit must reach.
const OVERFIT_LIMIT_PX: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
struct RunResult {
    /// Mean landmark error over validation frames, mm.
    average: f64,
    /// Mean temporal jitter over validation clips, mm.
    jitter: f64,
    best_epoch: usize,
    secs: f64,
}

/// Desk dataset and training runs, reused across criteria.
#[derive(Default)]
pub struct Shared {
    data: Option<(Vec<ClipRecord>, Vec<ClipRecord>)>,
    runs: BTreeMap<(Variant, u64, u64), RunResult>,
    pub dual_gru_seed0: Option<NetworkParams<f32>>,
}

impl Shared {
    pub fn dataset(&mut self) -> &(Vec<ClipRecord>, Vec<ClipRecord>) {
        self.data.get_or_insert_with(|| {
            let ds = generate_dataset(&SynthConfig::default(), TRAIN_CLIPS, VAL_CLIPS).unwrap();
            let owned = |s| ds.split(s).into_iter().cloned().collect::<Vec<_>>();
            (owned(Split::Train), owned(Split::Val))
        })
    }

    fn run(&mut self, variant: Variant, lambda: f64, seed: u64) -> RunResult {
        let key = (variant, lambda.to_bits(), seed);
        if let Some(r) = self.runs.get(&key) {
            return *r;
        }
        let (train, val) = self.dataset().clone();
        let train: Vec<&ClipRecord> = train.iter().collect();
        let val: Vec<&ClipRecord> = val.iter().collect();
        let net = variant.network_config(&NetworkConfig::default());
        let cfg = TrainConfig {
            seed,
            lambda: variant.lambda(lambda),
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let label = format!("{} lambda {lambda} seed {seed}", variant.name());
        let out = train_with(&train, &val, &net, &cfg, &mut |e, _| {
            if e.epoch % 10 == 0 {
                eprintln!(
                    "    {label}: epoch {} val {:.5}",
                    e.epoch, e.validation.total
                );
            }
        })
        .unwrap();
        let predictor = ModelPredictor {
            config: &net,
            params: &out.best.params,
        };
        let summary = evaluate_variant(&predictor, &val, ContourPoints::All).unwrap();
        let result = RunResult {
            average: summary.average.mean,
            jitter: summary.jitter.mean,
            best_epoch: out.best_epoch,
            secs: t0.elapsed().as_secs_f64(),
        };
        eprintln!(
            "    {label}: landmark {:.3} mm, jitter {:.4} mm, best epoch {}, {:.0} s",
            result.average, result.jitter, result.best_epoch, result.secs
        );
        if variant == Variant::DualGru && lambda == LAMBDA && seed == SEEDS[0] {
            self.dual_gru_seed0 = Some(out.best.params);
        }
        self.runs.insert(key, result);
        result
    }

    fn total_minutes(&self) -> f64 {
        self.runs.values().map(|r| r.secs).sum::<f64>() / 60.0
    }
}

pub fn overfit() -> Outcome {
    let ds = generate_dataset(&SynthConfig::default(), 1, 0).map_err(|e| e.to_string())?;
    let clip = &ds.clips[0].1;
    let net = Variant::DualGru.network_config(&NetworkConfig::default());
    let cfg = TrainConfig {
        epochs: OVERFIT_EPOCHS,
        ..TrainConfig::default()
    };
    let out =
        train_with(&[clip], &[clip], &net, &cfg, &mut |_, _| {}).map_err(|e| e.to_string())?;
    let preds = ModelPredictor {
        config: &net,
        params: &out.best.params,
    }
    .predict(clip)
    .map_err(|e| e.to_string())?;
    let mut errors = Vec::new();
    for a in &clip.annotations {
        let p = &preds[a.frame_index].points;
        errors.extend([0, 3, 6].map(|i| p[i].dist(a.points[i])));
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let max = errors.iter().copied().fold(0.0, f64::max);
    check(
        mean < OVERFIT_LIMIT_PX,
        format!(
            "{} annotated frames, mean landmark error {mean:.3} px (max {max:.3}, limit {OVERFIT_LIMIT_PX}), best epoch {}",
            clip.annotations.len(),
            out.best_epoch
        ),
    )
}

pub fn ordering(shared: &mut Shared) -> Outcome {
    let mut held = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let [p, d, g] = [Variant::PointReg, Variant::Dual, Variant::DualGru]
            .map(|v| shared.run(v, LAMBDA, seed).average);
        let ok = g <= d && d <= p;
        held += usize::from(ok);
        rows.push(format!(
            "seed {seed}: pointreg {p:.3} dual {d:.3} dual-gru {g:.3}{}",
            if ok { "" } else { " (out of order)" }
        ));
    }
    check(
        held >= 2,
        format!(
            "mean landmark error (mm), ordering held in {held}/{} seeds [{}]; {:.0} min of training so far (target < 120)",
            SEEDS.len(),
            rows.join("; "),
            shared.total_minutes()
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn ablation(shared: &mut Shared) -> Outcome {
    let with: Vec<f64> = SEEDS
        .iter()
        .map(|&s| shared.run(Variant::DualGru, LAMBDA, s).jitter)
        .collect();
    let without: Vec<f64> = SEEDS
        .iter()
        .map(|&s| shared.run(Variant::DualGru, 0.0, s).jitter)
        .collect();
    let (mw, m0) = (median(with.clone()), median(without.clone()));
    check(
        mw <= m0,
        format!(
            "dual-gru median jitter {mw:.4} mm with lambda {LAMBDA} vs {m0:.4} mm without (per seed {with:.4?} vs {without:.4?}); {:.0} min of training in total",
            shared.total_minutes()
        ),
    )
}
