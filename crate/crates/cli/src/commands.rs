use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use contourflow::autodiff::Tensor;
use contourflow::evaluation::{
    evaluate_variant, window_starts, ClipPredictor, ContourPoints, EvalReport,
    GroundTruthPredictor, ModelPredictor, VariantSummary,
};
use contourflow::extraction::{Contour21, CONTOUR_APEX, CONTOUR_POINTS};
use contourflow::geometry::Point2;
use contourflow::network::{Checkpoint, NetworkConfig};
use contourflow::synthdata::{
    generate_dataset, read_clip, read_dataset, write_dataset, ClipRecord, Split, SynthConfig,
};
use contourflow::trainer::{train_with, TrainConfig, Variant};
use contourflow::{tns, Error, Result};

use crate::pgm::Image;

pub const SEED_ENV: &str = "CONTOURFLOW_SEED";

/// Contents of a `--config` file. Every section and field is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub synth: SynthConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: p.to_path_buf(),
                detail: e.to_string(),
            })
        }
    }
}

/// Flag, then `$CONTOURFLOW_SEED`, then the config file value.
fn resolve_seed(flag: Option<u64>, from_file: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("{SEED_ENV}={v:?} is not a u64 seed"))),
        Err(_) => Ok(from_file),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

pub fn synth(
    out: &Path,
    n_train: usize,
    n_val: usize,
    seed: Option<u64>,
    config: Option<&Path>,
) -> Result<()> {
    let file = load_config(config)?;
    let synth = SynthConfig {
        seed: resolve_seed(seed, file.synth.seed)?,
        ..file.synth
    };
    if n_train == 0 {
        eprintln!("warning: writing a dataset with no training clips");
    }
    let resolved = json!({
        "command": "synth",
        "out": out,
        "train": n_train,
        "val": n_val,
        "synth": synth,
    });
    eprintln!("{resolved}");
    let dataset = generate_dataset(&synth, n_train, n_val)?;
    write_dataset(&dataset, out)?;
    write_json(&out.join("run.json"), &resolved)
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub variant: String,
    pub epochs: Option<usize>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let file = load_config(args.config.as_deref())?;
    let variant = Variant::parse(&args.variant)?;
    let network = variant.network_config(&file.network);
    let base = file.train;
    let cfg = TrainConfig {
        epochs: args.epochs.unwrap_or(base.epochs),
        lambda: variant.lambda(args.lambda.unwrap_or(base.lambda)),
        learning_rate: args.lr.unwrap_or(base.learning_rate),
        seed: resolve_seed(args.seed, base.seed)?,
        checkpoint_dir: Some(args.out.clone()),
        ..base
    };
    let dataset = read_dataset(&args.data)?;
    let train_clips = dataset.split(Split::Train);
    let val_clips = dataset.split(Split::Val);
    let resolved = json!({
        "command": "train",
        "data": args.data,
        "out": args.out,
        "variant": variant,
        "network": network,
        "train": cfg,
    });
    eprintln!("{resolved}");
    create_dir(&args.out)?;
    write_json(&args.out.join("run.json"), &resolved)?;
    let outcome = train_with(&train_clips, &val_clips, &network, &cfg, &mut |e, secs| {
        eprintln!(
            "epoch {:>4}  train {:.6}  val {:.6}{}  ({secs:.1}s)",
            e.epoch,
            e.train.total,
            e.validation.total,
            if e.improved { "  *" } else { "" }
        );
    })?;
    eprintln!(
        "best epoch {} with validation loss {:.6}",
        outcome.best_epoch,
        outcome.best.validation_loss.unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Splits a clip path into its dataset directory and clip id.
fn clip_location(clip: &Path) -> Result<(PathBuf, String)> {
    let bad = || {
        Error::InvalidInput(format!(
            "{} is not a clip .json or .tns file",
            clip.display()
        ))
    };
    let ext = clip.extension().and_then(|e| e.to_str()).ok_or_else(bad)?;
    if ext != "json" && ext != "tns" {
        return Err(bad());
    }
    let id = clip.file_stem().and_then(|s| s.to_str()).ok_or_else(bad)?;
    let dir = clip
        .parent()
        .map(|p| {
            if p.as_os_str().is_empty() {
                Path::new(".")
            } else {
                p
            }
        })
        .ok_or_else(bad)?;
    Ok((dir.to_path_buf(), id.to_string()))
}

fn load_clip(clip: &Path) -> Result<ClipRecord> {
    let (dir, id) = clip_location(clip)?;
    read_clip(&dir, &id)
}

fn pairs(points: &[Point2]) -> Vec<[f64; 2]> {
    points.iter().map(|&p| p.into()).collect()
}

#[derive(Serialize, Deserialize)]
struct PointsFile {
    frame: usize,
    points_normalized: Vec<[f64; 2]>,
    points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct ContourFile {
    frame: usize,
    points: Vec<[f64; 2]>,
    /// Geodesic pixel path through the snapped points as `[x, y]`, when extracted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    geodesic: Option<Vec<[f64; 2]>>,
}

pub fn infer(ckpt: &Path, clip: &Path, out: &Path) -> Result<()> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let record = load_clip(clip)?;
    let windows = window_starts(record.len(), checkpoint.config.seq_len)?;
    let resolved = json!({
        "command": "infer",
        "ckpt": ckpt,
        "clip": clip,
        "clip_id": record.clip_id,
        "frames": record.len(),
        "window_starts": windows,
        "network": checkpoint.config,
    });
    eprintln!("{resolved}");
    let predictor = ModelPredictor {
        config: &checkpoint.config,
        params: &checkpoint.params,
    };
    let outputs = predictor.predict(&record)?;
    create_dir(out)?;
    write_json(&out.join("infer.json"), &resolved)?;
    let (h, w) = (record.grid.height, record.grid.width);
    for (f, o) in outputs.iter().enumerate() {
        write_json(
            &out.join(format!("frame_{f:04}.points.json")),
            &PointsFile {
                frame: f,
                points_normalized: o.points_normalized.clone(),
                points: pairs(&o.points),
            },
        )?;
        write_json(
            &out.join(format!("frame_{f:04}.contour.json")),
            &ContourFile {
                frame: f,
                points: pairs(o.contour.points()),
                geodesic: o.path.as_ref().map(|p| pairs(&p.points())),
            },
        )?;
        if let Some(d) = &o.dist_map {
            tns::write(&out.join(format!("frame_{f:04}.dist.tns")), &[h, w], d)?;
        }
        let k = o.heatmaps.len() / (h * w);
        tns::write(
            &out.join(format!("frame_{f:04}.heatmaps.tns")),
            &[k, h, w],
            &o.heatmaps,
        )?;
    }
    eprintln!("wrote {} frames to {}", outputs.len(), out.display());
    Ok(())
}

pub fn eval(
    ckpts: &[String],
    data: &Path,
    report: &Path,
    contour_points: usize,
    baseline: &str,
    oracle: bool,
) -> Result<()> {
    let which = ContourPoints::from_count(contour_points)?;
    let dataset = read_dataset(data)?;
    let val = dataset.split(Split::Val);
    if val.is_empty() {
        return Err(Error::InvalidInput(format!(
            "dataset {} has no validation clips",
            data.display()
        )));
    }
    let mut names = BTreeSet::new();
    let mut loaded = Vec::new();
    for entry in ckpts {
        let (name, path) = match entry.split_once('=') {
            Some((n, p)) => (Some(n.to_string()), PathBuf::from(p)),
            None => (None, PathBuf::from(entry)),
        };
        let ckpt = Checkpoint::load(&path)?;
        let name = match name {
            Some(n) => n,
            None => Variant::of(&ckpt.config)
                .map(|v| v.name().to_string())
                .unwrap_or_else(|| "custom".into()),
        };
        if !names.insert(name.clone()) {
            return Err(Error::InvalidInput(format!(
                "two checkpoints named {name:?}; use NAME=PATH"
            )));
        }
        loaded.push((name, path, ckpt));
    }
    if oracle && !names.insert("oracle".into()) {
        return Err(Error::InvalidInput(
            "a checkpoint is already named \"oracle\"".into(),
        ));
    }
    let resolved = json!({
        "command": "eval",
        "data": data,
        "checkpoints": loaded.iter().map(|(n, p, _)| json!({"name": n, "path": p})).collect::<Vec<_>>(),
        "oracle": oracle,
        "contour_points": contour_points,
        "baseline": baseline,
        "validation_clips": val.len(),
    });
    eprintln!("{resolved}");
    let mut summaries: Vec<(String, VariantSummary)> = Vec::new();
    for (name, _, ckpt) in &loaded {
        let p = ModelPredictor {
            config: &ckpt.config,
            params: &ckpt.params,
        };
        summaries.push((name.clone(), evaluate_variant(&p, &val, which)?));
    }
    if oracle {
        summaries.push((
            "oracle".into(),
            evaluate_variant(&GroundTruthPredictor, &val, which)?,
        ));
    }
    let base = names.contains(baseline).then_some(baseline);
    let rep = EvalReport::new(summaries, base)?;
    if let Some(dir) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(report, rep.to_json()? + "\n").map_err(|e| Error::Io {
        path: report.to_path_buf(),
        source: e,
    })?;
    let table = rep.to_table();
    let table_path = report.with_extension("txt");
    fs::write(&table_path, &table).map_err(|e| Error::Io {
        path: table_path.clone(),
        source: e,
    })?;
    write_json(&report.with_extension("run.json"), &resolved)?;
    print!("{table}");
    Ok(())
}

pub fn render(pred: &Path, clip: &Path, out: &Path, heatmaps: bool) -> Result<()> {
    let record = load_clip(clip)?;
    let (h, w) = (record.grid.height, record.grid.width);
    let missing = |p: &Path| Error::InvalidInput(format!("missing prediction {}", p.display()));
    let resolved = json!({
        "command": "render",
        "pred": pred,
        "clip": clip,
        "heatmaps": heatmaps,
    });
    let mut frames = Vec::with_capacity(record.len());
    for f in 0..record.len() {
        let path = pred.join(format!("frame_{f:04}.contour.json"));
        if !path.is_file() {
            return Err(missing(&path));
        }
        let c: ContourFile = read_json(&path)?;
        frames.push(Contour21::new(
            c.points.into_iter().map(Point2::from).collect(),
        )?);
    }
    create_dir(out)?;
    write_json(&out.join("run.json"), &resolved)?;
    for (f, contour) in frames.iter().enumerate() {
        let mut img = Image::stretched(w, h, record.frame(f));
        img.polyline(contour.points(), 255);
        for i in [0, CONTOUR_APEX, CONTOUR_POINTS - 1] {
            img.cross(contour.points()[i], 128);
        }
        img.write(&out.join(format!("frame_{f:04}.pgm")))?;
        if heatmaps {
            let path = pred.join(format!("frame_{f:04}.heatmaps.tns"));
            if !path.is_file() {
                return Err(missing(&path));
            }
            let (shape, data) = tns::read(&path)?;
            if shape.len() != 3 || shape[1] != h || shape[2] != w {
                return Err(Error::InvalidInput(format!(
                    "{} has shape {shape:?}, expected K×{h}×{w}",
                    path.display()
                )));
            }
            let hm = Tensor::new(shape.clone(), data)?;
            for k in 0..shape[0] {
                Image::stretched(w, h, &hm.data()[k * h * w..(k + 1) * h * w])
                    .write(&out.join(format!("frame_{f:04}.heatmap_{k}.pgm")))?;
            }
        }
    }
    eprintln!("rendered {} frames to {}", frames.len(), out.display());
    Ok(())
}
