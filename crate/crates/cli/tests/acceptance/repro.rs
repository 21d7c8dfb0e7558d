use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use crate::{check, Outcome};

/// Wall-clock timings are the one artifact that legitimately differs between runs.
const NONDETERMINISTIC: &[&str] = &["timing.jsonl"];

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_contourflow"))
        .args(args)
        .env_remove("CONTOURFLOW_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn snapshot(root: &Path, dir: &Path, into: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            snapshot(root, &path, into);
        } else if !NONDETERMINISTIC.contains(&path.file_name().unwrap().to_str().unwrap()) {
            into.insert(
                path.strip_prefix(root).unwrap().to_path_buf(),
                fs::read(&path).unwrap(),
            );
        }
    }
}

/// synth, train (two variants), infer, eval and render, all under `root`.
fn pipeline(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    if root.exists() {
        fs::remove_dir_all(root).map_err(|e| e.to_string())?;
    }
    fs::create_dir_all(root).map_err(|e| e.to_string())?;
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    let (data, gru, pr) = (p("data"), p("dual-gru"), p("pointreg"));
    cli(&[
        "synth", "--out", &data, "--train", "3", "--val", "2", "--seed", "5",
    ])?;
    for (variant, out) in [("dual-gru", &gru), ("pointreg", &pr)] {
        cli(&[
            "train",
            "--data",
            &data,
            "--out",
            out,
            "--variant",
            variant,
            "--epochs",
            "2",
            "--seed",
            "1",
        ])?;
    }
    let clip = fs::read_dir(&data)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "tns"))
        .min()
        .ok_or("no clips written")?;
    let clip = clip.to_str().unwrap().to_string();
    let (gru_ckpt, pr_ckpt) = (
        format!("{gru}/best.ckpt.json"),
        format!("{pr}/best.ckpt.json"),
    );
    cli(&[
        "infer",
        "--ckpt",
        &gru_ckpt,
        "--clip",
        &clip,
        "--out",
        &p("pred"),
    ])?;
    cli(&[
        "eval",
        "--ckpt",
        &pr_ckpt,
        "--ckpt",
        &gru_ckpt,
        "--data",
        &data,
        "--report",
        &p("report/report.json"),
    ])?;
    cli(&[
        "render",
        "--pred",
        &p("pred"),
        "--clip",
        &clip,
        "--out",
        &p("render"),
        "--heatmaps",
    ])?;
    let mut files = BTreeMap::new();
    snapshot(root, root, &mut files);
    Ok(files)
}

pub fn cli_rerun() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().join("run");
    let first = pipeline(&root)?;
    let second = pipeline(&root)?;
    let differing: Vec<String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let bytes: usize = first.values().map(Vec::len).sum();
    check(
        differing.is_empty() && !first.is_empty(),
        format!(
            "synth/train/infer/eval/render repeated with identical flags: {} files ({:.1} MB) compared, differing: {differing:?}",
            first.len(),
            bytes as f64 / 1e6
        ),
    )
}
