use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use nalgebra::Vector3;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use splat4d::io::{self, Manifest, Scene, Tensor};
use splat4d::metrics::{depth_rmse, eval_flow, eval_seg, psnr, ssim};
use splat4d::motion::{flow_field, warp_gaussians};
use splat4d::optimizer::{self, FitConfig, FitOutput, FrameObservation};
use splat4d::scene::FEATURE_DIM;
use splat4d::semantics::{classify, cosine_similarity, FeatureDecoder, DECODER_HIDDEN};
use splat4d::streaming::{StreamConfig, StreamFrame, StreamState};
use splat4d::{render, CameraModel, Error, RenderOptions};

use crate::report::{Report, Status, StreamRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Data,
    Numerical,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: FailureKind,
    pub message: String,
    /// Printed before exiting when the command got far enough to describe its state.
    pub report: Option<Report>,
}

impl Failure {
    pub fn data(message: impl Into<String>) -> Self {
        Self { kind: FailureKind::Data, message: message.into(), report: None }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            FailureKind::Data => 2,
            FailureKind::Numerical => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = if e.is_numerical() { FailureKind::Numerical } else { FailureKind::Data };
        Self { kind, message: e.to_string(), report: None }
    }
}

type Outcome = std::result::Result<Report, Failure>;

/// Settings shared by all subcommands.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fit: FitConfig,
    pub stream: StreamConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
        serde_json::from_str(&text).map_err(|e| {
            Failure::data(format!("malformed config at {} line {} column {}: {e}", path.display(), e.line(), e.column()))
        })
    }
}

pub struct Context {
    pub config: RunConfig,
    pub timing: bool,
}

fn background(v: &Option<Vec<f64>>) -> Result<[f64; 3], Failure> {
    match v.as_deref() {
        None => Ok([0.0; 3]),
        Some(&[r, g, b]) => Ok([r, g, b]),
        Some(other) => Err(Failure::data(format!("--background needs 3 values, got {}", other.len()))),
    }
}

fn load_frames(manifest: &Manifest) -> Result<Vec<FrameObservation>, Failure> {
    Ok((0..manifest.len()).map(|i| manifest.observation(i)).collect::<splat4d::Result<_>>()?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn scene_at(scene: &Scene, time: f64) -> Vec<splat4d::GaussianPrimitive> {
    warp_gaussians(&scene.gaussians, time - scene.timestamp)
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Index into the scene's cameras.
    #[arg(long, default_value_t = 0)]
    pub camera: usize,
    /// Render time; defaults to the scene's own timestamp.
    #[arg(long, allow_hyphen_values = true)]
    pub time: Option<f64>,
    /// Color image, PNG or PPM by extension.
    #[arg(long)]
    pub out: PathBuf,
    /// Depth map as a G4DT [H, W] tensor.
    #[arg(long)]
    pub depth_out: Option<PathBuf>,
    /// Accumulated opacity as an 8-bit image.
    #[arg(long)]
    pub alpha_out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub background: Option<Vec<f64>>,
}

pub fn render_cmd(args: &RenderArgs) -> Outcome {
    let scene = io::load_scene(&args.scene)?;
    let camera = scene.camera(args.camera)?;
    let time = args.time.unwrap_or(scene.timestamp);
    let gs = scene_at(&scene, time);
    let out = render(&gs, camera, &RenderOptions::default().with_background(background(&args.background)?))?;
    io::write_rgb(&args.out, out.width, out.height, &out.rgb)?;
    if let Some(p) = &args.depth_out {
        io::write_tensor(p, &Tensor::from_f64(vec![out.height as usize, out.width as usize], &out.depth)?)?;
    }
    if let Some(p) = &args.alpha_out {
        io::write_gray(p, out.width, out.height, &out.alpha)?;
    }
    Ok(Report::Render { width: out.width, height: out.height, gaussians: gs.len(), time })
}

#[derive(Debug, Args)]
pub struct FitMotionArgs {
    /// Initial Gaussians; their timestamp anchors the motion.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fitted scene.
    #[arg(long)]
    pub out: PathBuf,
    /// Full loss trace as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Taylor orders to fit.
    #[arg(long)]
    pub orders: Option<usize>,
    /// Per-Gaussian displacement over `--flow-dt` as a G4DT [N, 3] tensor.
    #[arg(long)]
    pub flow_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub flow_dt: f64,
}

/// Splits a fit result into the state to write and, on divergence, the iteration it happened at.
fn settle(result: splat4d::Result<FitOutput>) -> Result<(FitOutput, Option<(usize, String)>), Failure> {
    match result {
        Ok(out) => Ok((out, None)),
        Err(Error::Diverged { iteration, reason, last_finite }) => Ok((*last_finite, Some((iteration, reason)))),
        Err(e) => Err(e.into()),
    }
}

fn finish(report: Report, diverged: Option<(usize, String)>) -> Outcome {
    match diverged {
        None => Ok(report),
        Some((it, reason)) => Err(Failure {
            kind: FailureKind::Numerical,
            message: format!("optimization diverged at iteration {it}: {reason}; wrote the last finite state"),
            report: Some(report),
        }),
    }
}

pub fn fit_motion_cmd(args: &FitMotionArgs, ctx: &Context) -> Outcome {
    let scene = io::load_scene(&args.scene)?;
    let manifest = Manifest::load(&args.manifest)?;
    let frames = load_frames(&manifest)?;
    let mut cfg = ctx.config.fit.clone();
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    if let Some(l) = args.orders {
        cfg.motion_orders = l;
    }
    let (out, diverged) = settle(optimizer::fit_motion(&scene.gaussians, scene.timestamp, &frames, &cfg))?;

    let fitted = Scene::new(scene.timestamp, scene.cameras.clone(), out.gaussians);
    io::save_scene(&args.out, &fitted)?;
    if let Some(p) = &args.report {
        write_json(p, &out.report)?;
    }
    if let Some(p) = &args.flow_out {
        let flat: Vec<f64> = flow_field(&fitted.gaussians, args.flow_dt).iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        io::write_tensor(p, &Tensor::from_f64(vec![fitted.gaussians.len(), 3], &flat)?)?;
    }
    let report = Report::FitMotion {
        status: if diverged.is_some() { Status::Diverged } else { Status::Ok },
        frames: frames.len(),
        gaussians: fitted.gaussians.len(),
        iterations: out.report.iterations,
        best_iteration: out.report.best_iteration,
        best_loss: out.report.best_loss,
        diverged_at: diverged.as_ref().map(|d| d.0),
    };
    finish(report, diverged)
}

#[derive(Debug, Args)]
pub struct FitSemanticsArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Starting decoder; a seeded random one when absent.
    #[arg(long)]
    pub decoder: Option<PathBuf>,
    #[arg(long)]
    pub decoder_out: PathBuf,
    /// Text embedding bank, required for the classification stage.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn fit_semantics_cmd(args: &FitSemanticsArgs, ctx: &Context) -> Outcome {
    let scene = io::load_scene(&args.scene)?;
    let manifest = Manifest::load(&args.manifest)?;
    let frames = load_frames(&manifest)?;
    let bank = args.bank.as_ref().map(io::load_text_bank).transpose()?;
    let cfg = &ctx.config.fit;
    let decoder = match &args.decoder {
        Some(p) => io::load_decoder(p)?,
        None => {
            let out_dim = match (&bank, frames.iter().find(|f| f.teacher_features.is_some())) {
                (Some(b), _) => b.dim(),
                (None, Some(f)) => f.teacher_features.as_ref().unwrap().len() / f.camera.num_pixels(),
                (None, None) => {
                    return Err(Failure::data("no --decoder, --bank or teacher features to size the decoder"));
                }
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            FeatureDecoder::random(FEATURE_DIM, DECODER_HIDDEN, out_dim, &mut rng)?
        }
    };
    let (out, diverged) =
        settle(optimizer::fit_semantics(&scene.gaussians, scene.timestamp, &decoder, &frames, bank.as_ref(), cfg))?;

    let fitted = Scene::new(scene.timestamp, scene.cameras.clone(), out.gaussians);
    io::save_scene(&args.out, &fitted)?;
    io::save_decoder(&args.decoder_out, out.decoder.as_ref().unwrap_or(&decoder))?;
    if let Some(p) = &args.report {
        write_json(p, &out.report)?;
    }
    let report = Report::FitSemantics {
        status: if diverged.is_some() { Status::Diverged } else { Status::Ok },
        frames: frames.len(),
        gaussians: fitted.gaussians.len(),
        iterations: out.report.iterations,
        best_iteration: out.report.best_iteration,
        best_loss: out.report.best_loss,
        diverged_at: diverged.as_ref().map(|d| d.0),
    };
    finish(report, diverged)
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    /// Frames with `scene` (and optionally `tokens`) entries, read one at a time.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also render each composed scene at its end time with the frame's camera.
    #[arg(long)]
    pub render: bool,
    #[arg(long, value_delimiter = ',')]
    pub background: Option<Vec<f64>>,
}

pub fn stream_cmd(args: &StreamArgs, ctx: &Context) -> Outcome {
    let manifest = Manifest::load(&args.manifest)?;
    if manifest.is_empty() {
        return Err(Failure::data(format!("{} lists no frames", args.manifest.display())));
    }
    let options = RenderOptions::default().with_background(background(&args.background)?);
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let records_path = args.out_dir.join("records.jsonl");
    let file = File::create(&records_path).map_err(|e| Error::io(&records_path, e))?;
    let mut records = BufWriter::new(file);
    let mut state = StreamState::new(ctx.config.stream)?;
    let mut last_interval = [0, 0];

    for i in 0..manifest.len() {
        let rec = &manifest.frames()[i];
        if rec.timestamp.fract() != 0.0 || rec.timestamp.abs() > 9.0e15 {
            return Err(Failure::data(format!("frames[{i}].timestamp {} is not a whole frame index", rec.timestamp)));
        }
        let timestamp = rec.timestamp as i64;
        let gaussians = manifest.frame_scene(i)?.gaussians;
        let tokens = manifest.frame_tokens(i)?;

        let started = Instant::now();
        let out = state.ingest_frame(StreamFrame { timestamp, gaussians, tokens })?;
        let latency = started.elapsed().as_secs_f64();

        let (start, end) = out.scene.interval();
        last_interval = [start, end];
        if args.render {
            let camera: &CameraModel = &manifest.cameras()[rec.camera];
            let img = render(&out.scene.at(end as f64)?, camera, &options)?;
            io::write_rgb(args.out_dir.join(format!("frame_{timestamp:06}.png")), img.width, img.height, &img.rgb)?;
        }
        if let Some(att) = &out.attended {
            let t = Tensor::from_f64(vec![att.rows(), att.dim()], att.data())?;
            io::write_tensor(args.out_dir.join(format!("tokens_{timestamp:06}.g4dt")), &t)?;
        }
        let line = StreamRecord {
            timestamp,
            interval: [start, end],
            num_static: out.num_static,
            num_dynamic: out.num_dynamic,
            composed: out.scene.len(),
            memory: state.memory(),
            attended_tokens: out.attended.as_ref().map(|a| a.rows()),
            latency_s: ctx.timing.then_some(latency),
        };
        writeln!(records, "{}", serde_json::to_string(&line).expect("records serialize"))
            .map_err(|e| Error::io(&records_path, e))?;
    }
    records.flush().map_err(|e| Error::io(&records_path, e))?;
    let mem = state.memory();
    Ok(Report::Stream {
        frames: manifest.len(),
        peak_gaussians: mem.peak_gaussians,
        peak_tokens: mem.peak_tokens,
        last_interval,
    })
}

#[derive(Debug, Args)]
pub struct EvalFlowArgs {
    /// Predicted flow, G4DT [N, 3].
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
}

fn read_flow(path: &Path) -> Result<Vec<Vector3<f64>>, Failure> {
    let t = io::read_tensor(path)?;
    if t.dims().len() != 2 || t.dims()[1] != 3 {
        return Err(Failure::data(format!("{}: shape {:?} is not [N, 3]", path.display(), t.dims())));
    }
    Ok(t.to_f64().chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
}

pub fn eval_flow_cmd(args: &EvalFlowArgs) -> Outcome {
    Ok(Report::EvalFlow(eval_flow(&read_flow(&args.pred)?, &read_flow(&args.gt)?)?))
}

#[derive(Debug, Args)]
pub struct EvalSegArgs {
    /// Predicted class map, 8-bit image or G4DT [H, W].
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub classes: usize,
}

pub fn eval_seg_cmd(args: &EvalSegArgs) -> Outcome {
    let (pw, ph, pred) = io::read_label_map(&args.pred)?;
    let (gw, gh, gt) = io::read_label_map(&args.gt)?;
    if (pw, ph) != (gw, gh) {
        return Err(Failure::data(format!("prediction is {pw}x{ph} but ground truth is {gw}x{gh}")));
    }
    Ok(Report::EvalSeg(eval_seg(&pred, &gt, args.classes)?))
}

#[derive(Debug, Args)]
pub struct EvalPhotoArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Predicted depth, G4DT [H, W].
    #[arg(long, requires = "gt_depth")]
    pub pred_depth: Option<PathBuf>,
    /// Ground-truth depth; non-finite or non-positive pixels are skipped.
    #[arg(long, requires = "pred_depth")]
    pub gt_depth: Option<PathBuf>,
}

pub fn eval_photo_cmd(args: &EvalPhotoArgs) -> Outcome {
    let (pw, ph, pred) = io::read_rgb(&args.pred)?;
    let (gw, gh, gt) = io::read_rgb(&args.gt)?;
    if (pw, ph) != (gw, gh) {
        return Err(Failure::data(format!("prediction is {pw}x{ph} but ground truth is {gw}x{gh}")));
    }
    let depth = match (&args.pred_depth, &args.gt_depth) {
        (Some(p), Some(g)) => {
            let (p, g) = (io::read_tensor(p)?, io::read_tensor(g)?);
            let gt = g.to_f64();
            let mask: Vec<bool> = gt.iter().map(|v| v.is_finite() && *v > 0.0).collect();
            Some(depth_rmse(&p.to_f64(), &gt, &mask)?)
        }
        _ => None,
    };
    Ok(Report::EvalPhoto {
        psnr: psnr(&pred, &gt)?,
        ssim: ssim(&pred, &gt, pw as usize, ph as usize, 3)?,
        depth_rmse: depth,
    })
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub camera: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub time: Option<f64>,
    #[arg(long)]
    pub decoder: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// A label from the bank.
    #[arg(long)]
    pub prompt: String,
    /// Minimum cosine similarity for a pixel to be selected.
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub threshold: f64,
    /// Selection mask as an 8-bit image (255 = selected).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-pixel argmax class index as an 8-bit image.
    #[arg(long)]
    pub classes_out: Option<PathBuf>,
}

pub fn query_cmd(args: &QueryArgs) -> Outcome {
    let scene = io::load_scene(&args.scene)?;
    let camera = scene.camera(args.camera)?;
    let decoder = io::load_decoder(&args.decoder)?;
    let bank = io::load_text_bank(&args.bank)?;
    let k = bank
        .index_of(&args.prompt)
        .ok_or_else(|| Failure::data(format!("prompt {:?} is not a label in {}", args.prompt, args.bank.display())))?;
    if !args.threshold.is_finite() {
        return Err(Failure::data("--threshold must be finite"));
    }
    let time = args.time.unwrap_or(scene.timestamp);
    let out = render(&scene_at(&scene, time), camera, &RenderOptions::default().with_features())?;
    let decoded = decoder.decode(out.feature.as_ref().expect("features were requested"))?;
    let sims = cosine_similarity(&decoded, bank.embedding(k))?;
    let mask: Vec<f64> = sims.iter().map(|&s| if s >= args.threshold { 1.0 } else { 0.0 }).collect();
    io::write_gray(&args.out, out.width, out.height, &mask)?;
    let class_counts = match &args.classes_out {
        None => None,
        Some(p) => {
            if bank.len() > 256 {
                return Err(Failure::data(format!("{} labels do not fit an 8-bit class map", bank.len())));
            }
            let labels = classify(&decoded, &bank)?.labels;
            let values: Vec<f64> = labels.iter().map(|&l| l as f64 / 255.0).collect();
            io::write_gray(p, out.width, out.height, &values)?;
            let mut counts = vec![0u64; bank.len()];
            labels.iter().for_each(|&l| counts[l] += 1);
            Some(counts)
        }
    };
    Ok(Report::Query {
        prompt: args.prompt.clone(),
        threshold: args.threshold,
        pixels: mask.len(),
        selected: mask.iter().filter(|&&m| m > 0.0).count(),
        class_counts,
    })
}
