//! On-disk formats.
//!
//! * Scenes are JSON documents listing cameras and Gaussians in activated
//!   space. Features are written inline so a save/load round trip is exact;
//!   on load a Gaussian may instead name a row of a `G4DT` sidecar tensor.
//! * Frame manifests are JSON documents listing timestamped views and the
//!   files that supervise them.
//! * Dense arrays (depth, teacher features, flow, text embeddings) are `G4DT`
//!   tensors, see [`Tensor`].
//! * Images are 8-bit PNG or PPM.

mod images;
mod tensor;

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub use images::{quantize, read_gray, read_rgb, write_gray, write_rgb};
pub use tensor::{read_tensor, write_tensor, Tensor, MAGIC};

use crate::error::{Error, Result};
use crate::motion::MotionCoefficients;
use crate::optimizer::FrameObservation;
use crate::scene::{CameraModel, GaussianPrimitive, DEFAULT_FAR, DEFAULT_NEAR, FEATURE_DIM, MOTION_ORDERS};
use crate::semantics::{FeatureDecoder, TextEmbeddingBank};
use crate::streaming::TokenBlock;

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str, source: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        Error::format(what, format!("{source} line {} column {}", e.line(), e.column()), e.to_string())
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("records serialize");
    s.push('\n');
    s
}

fn resolve(base: Option<&Path>, rel: &str) -> PathBuf {
    match base {
        Some(b) => b.join(rel),
        None => PathBuf::from(rel),
    }
}

fn identity3() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn default_near() -> f64 {
    DEFAULT_NEAR
}

fn default_far() -> f64 {
    DEFAULT_FAR
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

/// Matrices are lists of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub width: u32,
    pub height: u32,
    pub intrinsics: [[f64; 3]; 3],
    #[serde(default = "identity3")]
    pub rotation: [[f64; 3]; 3],
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

fn from_rows(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

impl From<&CameraModel> for CameraRecord {
    fn from(c: &CameraModel) -> Self {
        Self {
            width: c.width,
            height: c.height,
            intrinsics: rows(&c.intrinsics),
            rotation: rows(&c.rotation),
            translation: c.translation.into(),
            near: c.near,
            far: c.far,
        }
    }
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<CameraModel> {
        let mut cam = CameraModel::new(
            from_rows(&self.intrinsics),
            from_rows(&self.rotation),
            Vector3::from(self.translation),
            self.width,
            self.height,
        )?;
        cam.near = self.near;
        cam.far = self.far;
        cam.validate()?;
        Ok(cam)
    }
}

/// Motion is stored as raw `[speed, vx, vy, vz]` per order; an empty list
/// means a static Gaussian with the default number of orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianRecord {
    pub mu: [f64; 3],
    #[serde(default = "identity_quat")]
    pub q: [f64; 4],
    pub s: [f64; 3],
    pub alpha: f64,
    pub c: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
    /// Row of the scene's `feature_tensor`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_row: Option<usize>,
    #[serde(default)]
    pub motion: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    #[serde(default)]
    timestamp: f64,
    #[serde(default)]
    cameras: Vec<CameraRecord>,
    /// `G4DT` of shape `[rows, 64]`, relative to the scene file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_tensor: Option<String>,
    gaussians: Vec<GaussianRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Frame index the Gaussians are expressed at.
    pub timestamp: f64,
    pub cameras: Vec<CameraModel>,
    pub gaussians: Vec<GaussianPrimitive>,
}

impl Scene {
    pub fn new(timestamp: f64, cameras: Vec<CameraModel>, gaussians: Vec<GaussianPrimitive>) -> Self {
        Self { timestamp, cameras, gaussians }
    }

    pub fn camera(&self, index: usize) -> Result<&CameraModel> {
        self.cameras
            .get(index)
            .ok_or_else(|| Error::invalid("camera", format!("index {index} but the scene has {} cameras", self.cameras.len())))
    }
}

fn gaussian_from_record(r: &GaussianRecord, features: Option<&Tensor>, at: &str) -> Result<GaussianPrimitive> {
    let feature = match (&r.feature, r.feature_row) {
        (Some(_), Some(_)) => {
            return Err(Error::format("scene", at, "give either feature or feature_row, not both"));
        }
        (Some(f), None) => f.clone(),
        (None, Some(row)) => {
            let t = features.ok_or_else(|| Error::format("scene", at, "feature_row needs a feature_tensor"))?;
            if t.dims().len() != 2 || t.dims()[1] != FEATURE_DIM {
                return Err(Error::format("scene", "feature_tensor", format!("shape {:?} is not [rows, {FEATURE_DIM}]", t.dims())));
            }
            if row >= t.dims()[0] {
                return Err(Error::format("scene", at, format!("feature_row {row} but the tensor has {} rows", t.dims()[0])));
            }
            t.data()[row * FEATURE_DIM..(row + 1) * FEATURE_DIM].iter().map(|&v| f64::from(v)).collect()
        }
        (None, None) => vec![0.0; FEATURE_DIM],
    };
    let motion = if r.motion.is_empty() {
        MotionCoefficients::zeros(MOTION_ORDERS)
    } else {
        let raw: Vec<f64> = r.motion.iter().flatten().copied().collect();
        MotionCoefficients::from_raw(&raw).map_err(|e| Error::format("scene", format!("{at}.motion"), e.to_string()))?
    };
    let g = GaussianPrimitive {
        mu: Vector3::from(r.mu),
        q: r.q,
        s: Vector3::from(r.s),
        alpha: r.alpha,
        c: Vector3::from(r.c),
        feature,
        motion,
    };
    g.validate().map_err(|e| Error::format("scene", at, e.to_string()))?;
    Ok(g)
}

fn record_from_gaussian(g: &GaussianPrimitive) -> GaussianRecord {
    GaussianRecord {
        mu: g.mu.into(),
        q: g.q,
        s: g.s.into(),
        alpha: g.alpha,
        c: g.c.into(),
        feature: Some(g.feature.clone()),
        feature_row: None,
        motion: g
            .motion
            .terms()
            .iter()
            .map(|t| [t.speed(), t.direction()[0], t.direction()[1], t.direction()[2]])
            .collect(),
    }
}

/// Parse scene JSON. `base` resolves a relative `feature_tensor`.
pub fn parse_scene(text: &str, base: Option<&Path>, source: &str) -> Result<Scene> {
    let doc: SceneDoc = parse_json(text, "scene", source)?;
    if !doc.timestamp.is_finite() {
        return Err(Error::format("scene", format!("{source} timestamp"), "must be finite"));
    }
    let features = doc.feature_tensor.as_deref().map(|p| read_tensor(resolve(base, p))).transpose()?;
    let cameras = doc
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| c.to_camera().map_err(|e| Error::format("scene", format!("{source} cameras[{i}]"), e.to_string())))
        .collect::<Result<_>>()?;
    let gaussians = doc
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, r)| gaussian_from_record(r, features.as_ref(), &format!("{source} gaussians[{i}]")))
        .collect::<Result<_>>()?;
    Ok(Scene { timestamp: doc.timestamp, cameras, gaussians })
}

pub fn scene_to_json(scene: &Scene) -> String {
    to_json(&SceneDoc {
        timestamp: scene.timestamp,
        cameras: scene.cameras.iter().map(CameraRecord::from).collect(),
        feature_tensor: None,
        gaussians: scene.gaussians.iter().map(record_from_gaussian).collect(),
    })
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    parse_scene(&read_text(path)?, path.parent(), &path.display().to_string())
}

pub fn save_scene(path: impl AsRef<Path>, scene: &Scene) -> Result<()> {
    write_text(path.as_ref(), &scene_to_json(scene))
}

/// One view in a manifest. Paths are relative to the manifest.
///
/// `depth` is a `G4DT [H, W]` (non-finite or non-positive entries are
/// invalid), `sky_mask` an 8-bit image (values above 127 are sky),
/// `features` a `G4DT [H, W, D]`, `labels` an 8-bit image or `G4DT [H, W]`
/// of class indices, `scene` the per-frame Gaussians used for streaming and
/// `tokens` a `G4DT [N, D]` of that frame's attention tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub timestamp: f64,
    #[serde(default)]
    pub camera: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sky_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDoc {
    pub cameras: Vec<CameraRecord>,
    pub frames: Vec<FrameRecord>,
}

/// A validated manifest. Files are read only when a frame is requested.
#[derive(Debug, Clone)]
pub struct Manifest {
    base: PathBuf,
    source: String,
    cameras: Vec<CameraModel>,
    frames: Vec<FrameRecord>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&read_text(path)?, &base, &path.display().to_string())
    }

    /// Checks that camera indices and file references resolve and that
    /// timestamps strictly increase.
    pub fn parse(text: &str, base: &Path, source: &str) -> Result<Self> {
        let doc: ManifestDoc = parse_json(text, "manifest", source)?;
        let cameras: Vec<CameraModel> = doc
            .cameras
            .iter()
            .enumerate()
            .map(|(i, c)| c.to_camera().map_err(|e| Error::format("manifest", format!("{source} cameras[{i}]"), e.to_string())))
            .collect::<Result<_>>()?;
        let mut prev = f64::NEG_INFINITY;
        for (i, f) in doc.frames.iter().enumerate() {
            let at = format!("{source} frames[{i}]");
            if !f.timestamp.is_finite() || f.timestamp <= prev {
                return Err(Error::format("manifest", at, format!("timestamp {} does not increase past {prev}", f.timestamp)));
            }
            prev = f.timestamp;
            if f.camera >= cameras.len() {
                return Err(Error::format("manifest", at, format!("camera {} but {} cameras are listed", f.camera, cameras.len())));
            }
            for (field, p) in [
                ("image", &f.image),
                ("depth", &f.depth),
                ("sky_mask", &f.sky_mask),
                ("features", &f.features),
                ("labels", &f.labels),
                ("scene", &f.scene),
                ("tokens", &f.tokens),
            ] {
                if let Some(p) = p {
                    if !base.join(p).is_file() {
                        return Err(Error::format("manifest", format!("{at}.{field}"), format!("{p} does not exist")));
                    }
                }
            }
        }
        Ok(Self { base: base.to_path_buf(), source: source.to_string(), cameras, frames: doc.frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn frames(&self) -> &[FrameRecord] {
        &self.frames
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }

    fn at(&self, i: usize, field: &str) -> String {
        format!("{} frames[{i}].{field}", self.source)
    }

    /// Load frame `i` as supervision. The image is required.
    pub fn observation(&self, i: usize) -> Result<FrameObservation> {
        let f = &self.frames[i];
        let camera = self.cameras[f.camera].clone();
        let (w, h) = (camera.width, camera.height);
        let npix = camera.num_pixels();
        let image = f.image.as_ref().ok_or_else(|| Error::format("manifest", self.at(i, "image"), "missing"))?;
        let (iw, ih, rgb) = read_rgb(self.path(image))?;
        if (iw, ih) != (w, h) {
            return Err(Error::shape(self.at(i, "image"), format!("{w}x{h}"), format!("{iw}x{ih}")));
        }
        let mut obs = FrameObservation::new(f.timestamp, camera, rgb)?;
        if let Some(p) = &f.depth {
            let t = read_tensor(self.path(p))?;
            expect_dims(&t, &[h as usize, w as usize], &self.at(i, "depth"))?;
            obs.depth = Some(t.to_f64());
        }
        if let Some(p) = &f.sky_mask {
            let (mw, mh, m) = read_gray(self.path(p))?;
            if (mw, mh) != (w, h) {
                return Err(Error::shape(self.at(i, "sky_mask"), format!("{w}x{h}"), format!("{mw}x{mh}")));
            }
            obs.sky_mask = Some(m.iter().map(|&v| v > 127).collect());
        }
        if let Some(p) = &f.features {
            let t = read_tensor(self.path(p))?;
            if t.dims().len() != 3 || t.dims()[..2] != [h as usize, w as usize] || t.dims()[2] == 0 {
                return Err(Error::shape(self.at(i, "features"), format!("[{h}, {w}, D]"), format!("{:?}", t.dims())));
            }
            obs.teacher_features = Some(t.to_f64());
        }
        if let Some(p) = &f.labels {
            obs.labels = Some(read_labels(&self.path(p), w, h, &self.at(i, "labels"))?);
        }
        debug_assert_eq!(obs.rgb.len(), npix * 3);
        obs.validate()?;
        Ok(obs)
    }

    /// Load the Gaussians attached to frame `i`.
    pub fn frame_scene(&self, i: usize) -> Result<Scene> {
        let p = self.frames[i].scene.as_ref().ok_or_else(|| Error::format("manifest", self.at(i, "scene"), "missing"))?;
        load_scene(self.path(p))
    }

    /// Attention tokens of frame `i`, if the manifest lists any.
    pub fn frame_tokens(&self, i: usize) -> Result<Option<TokenBlock>> {
        let Some(p) = &self.frames[i].tokens else {
            return Ok(None);
        };
        let t = read_tensor(self.path(p))?;
        if t.dims().len() != 2 {
            return Err(Error::shape(self.at(i, "tokens"), "[N, D]", format!("{:?}", t.dims())));
        }
        TokenBlock::new(t.dims()[0], t.dims()[1], t.to_f64()).map(Some)
    }
}

fn expect_dims(t: &Tensor, dims: &[usize], at: &str) -> Result<()> {
    if t.dims() != dims {
        return Err(Error::shape(at, format!("{dims:?}"), format!("{:?}", t.dims())));
    }
    Ok(())
}

/// Class indices from an 8-bit image or a `G4DT [H, W]` of whole numbers,
/// with the map's width and height.
pub fn read_label_map(path: &Path) -> Result<(u32, u32, Vec<usize>)> {
    let at = path.display().to_string();
    let is_tensor = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("g4dt"));
    if !is_tensor {
        let (w, h, m) = read_gray(path)?;
        return Ok((w, h, m.into_iter().map(usize::from).collect()));
    }
    let t = read_tensor(path)?;
    let &[h, w] = t.dims() else {
        return Err(Error::shape(at, "[H, W]", format!("{:?}", t.dims())));
    };
    let labels = t
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                Ok(v as usize)
            } else {
                Err(Error::format("labels", format!("{at} pixel {k}"), format!("{v} is not a class index")))
            }
        })
        .collect::<Result<_>>()?;
    Ok((w as u32, h as u32, labels))
}

/// [`read_label_map`] checked against the expected size.
pub fn read_labels(path: &Path, width: u32, height: u32, at: &str) -> Result<Vec<usize>> {
    let (w, h, labels) = read_label_map(path)?;
    if (w, h) != (width, height) {
        return Err(Error::shape(at, format!("{width}x{height}"), format!("{w}x{h}")));
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Embeddings {
    Inline(Vec<Vec<f64>>),
    Tensor(String),
}

/// `{"labels": [...], "embeddings": "bank.g4dt" | [[...], ...], "temperature": 0.07}`.
/// A tensor must have shape `[labels, D]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankDoc {
    labels: Vec<String>,
    embeddings: Embeddings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
}

pub fn load_text_bank(path: impl AsRef<Path>) -> Result<TextEmbeddingBank> {
    let path = path.as_ref();
    let source = path.display().to_string();
    let doc: BankDoc = parse_json(&read_text(path)?, "text bank", &source)?;
    let (flat, dim) = match &doc.embeddings {
        Embeddings::Inline(rows) => {
            let dim = rows.first().map_or(0, Vec::len);
            if let Some(k) = rows.iter().position(|r| r.len() != dim) {
                return Err(Error::format("text bank", format!("{source} embeddings[{k}]"), format!("length differs from {dim}")));
            }
            (rows.iter().flatten().copied().collect::<Vec<_>>(), dim)
        }
        Embeddings::Tensor(p) => {
            let t = read_tensor(resolve(path.parent(), p))?;
            if t.dims().len() != 2 || t.dims()[0] != doc.labels.len() {
                return Err(Error::format(
                    "text bank",
                    format!("{source} embeddings"),
                    format!("shape {:?} is not [{}, D]", t.dims(), doc.labels.len()),
                ));
            }
            (t.to_f64(), t.dims()[1])
        }
    };
    let bank = TextEmbeddingBank::new(doc.labels, flat, dim)?;
    match doc.temperature {
        Some(t) => bank.with_temperature(t),
        None => Ok(bank),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecoderDoc {
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    params: Vec<f64>,
}

pub fn load_decoder(path: impl AsRef<Path>) -> Result<FeatureDecoder> {
    let path = path.as_ref();
    let doc: DecoderDoc = parse_json(&read_text(path)?, "decoder", &path.display().to_string())?;
    FeatureDecoder::from_params(doc.in_dim, doc.hidden, doc.out_dim, doc.params)
}

pub fn save_decoder(path: impl AsRef<Path>, decoder: &FeatureDecoder) -> Result<()> {
    let doc = DecoderDoc {
        in_dim: decoder.in_dim(),
        hidden: decoder.hidden(),
        out_dim: decoder.out_dim(),
        params: decoder.params().to_vec(),
    };
    write_text(path.as_ref(), &to_json(&doc))
}
