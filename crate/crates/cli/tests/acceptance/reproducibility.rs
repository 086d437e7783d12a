//! The same CLI workflow run twice in separate directories with `--seed 5
//! --threads 1`. Every output file and every stdout line must be byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use crate::common::{self, write_workspace};
use crate::ensure;

/// Exercises frame sampling, motion re-initialization and the random decoder.
const CONFIG: &str = r#"{
  "fit": {
    "iterations": 60,
    "samples_per_iter": 2,
    "reinit_motion": true,
    "train_geometry": true,
    "stages": {"sem_iterations": 30, "cls_iterations": 30}
  }
}"#;

const WORKFLOW: &[&[&str]] = &[
    &["fit-motion", "--scene", "scene.json", "--manifest", "manifest.json", "--out", "fit.json", "--report", "trace.json",
      "--flow-out", "flow.g4dt"],
    &["eval-flow", "--pred", "flow.g4dt", "--gt", "flow_gt.g4dt"],
    &["fit-semantics", "--scene", "fit.json", "--manifest", "manifest.json", "--out", "sem.json", "--decoder-out",
      "dec.json", "--bank", "bank.json", "--report", "sem_trace.json"],
    &["query", "--scene", "sem.json", "--decoder", "dec.json", "--bank", "bank.json", "--prompt", "left", "--out",
      "mask.png", "--classes-out", "classes.png"],
    &["eval-seg", "--pred", "classes.png", "--gt", "labels_0.png", "--classes", "2"],
    &["render", "--scene", "sem.json", "--time", "1.5", "--out", "r.png", "--depth-out", "r.g4dt"],
    &["eval-photo", "--pred", "r.png", "--gt", "image_1.png"],
    &["stream", "--manifest", "stream.json", "--out-dir", "stream", "--render"],
];

fn snapshot(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            snapshot(&path, root, out)?;
        } else {
            let name = path.strip_prefix(root).unwrap().display().to_string();
            out.insert(name, std::fs::read(&path)?);
        }
    }
    Ok(())
}

fn run_workflow(dir: &Path) -> Result<(Vec<Vec<u8>>, BTreeMap<String, Vec<u8>>), String> {
    write_workspace(dir);
    std::fs::write(dir.join("cfg.json"), CONFIG).map_err(|e| e.to_string())?;
    let mut stdout = Vec::new();
    for step in WORKFLOW {
        let mut args = vec!["--seed", "5", "--threads", "1", "--config", "cfg.json"];
        args.extend_from_slice(step);
        let out = common::run(&args, dir);
        ensure(out.status.success(), || {
            format!("`{}` failed: {}", step.join(" "), String::from_utf8_lossy(&out.stderr).trim())
        })?;
        stdout.push(out.stdout);
    }
    let mut files = BTreeMap::new();
    snapshot(dir, dir, &mut files).map_err(|e| e.to_string())?;
    Ok((stdout, files))
}

pub fn run() -> Result<String, String> {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (out_a, files_a) = run_workflow(a.path())?;
    let (out_b, files_b) = run_workflow(b.path())?;
    for (step, (x, y)) in WORKFLOW.iter().zip(out_a.iter().zip(&out_b)) {
        ensure(x == y, || format!("`{}` printed different reports", step[0]))?;
    }
    ensure(files_a.keys().eq(files_b.keys()), || "runs wrote different sets of files".into())?;
    for (name, bytes) in &files_a {
        ensure(files_b[name] == *bytes, || format!("{name} differs between runs"))?;
    }
    let bytes: usize = files_a.values().map(Vec::len).sum();
    Ok(format!("{} commands, {} files ({bytes} bytes) and all reports identical across two runs", WORKFLOW.len(), files_a.len()))
}
