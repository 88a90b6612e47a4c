//! Synthetic registered two-modality detection scenes and their on-disk
//! format.
//!
//! Objects are rendered as anti-aliased blobs whose visibility differs per
//! modality: warm classes stand out in the thermal plane but fade in the
//! visible plane at night, while cool classes need daylight in the visible
//! plane. A dataset directory holds `meta.json` plus, per sample,
//! `<id>.rgb.t4`, `<id>.tir.t4` and `<id>.ann`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::Tensor4;
use crate::geometry::Bbox;

pub const T4_MAGIC: &[u8; 3] = b"T4\0";
pub const MANIFEST: &str = "meta.json";
const FORMAT_TAG: &str = "rgbt-synth-v1";
/// Contrast (grey levels) above which an object counts as visible.
const VISIBILITY_THRESHOLD: f64 = 15.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("sample `{id}`: missing {modality} file {path}")]
    MissingModality {
        id: String,
        modality: &'static str,
        path: PathBuf,
    },
    #[error("sample `{id}`: {detail}")]
    Sample { id: String, detail: String },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("invalid scene config: {0}")]
    Config(String),
}

impl DataError {
    fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneTag {
    Day,
    Night,
}

impl SceneTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SceneTag::Day => "day",
            SceneTag::Night => "night",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Visibility {
    pub rgb: bool,
    pub tir: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub bbox: Bbox,
    pub class_id: usize,
    pub visibility: Visibility,
}

/// A registered image pair; both planes are `1 x 1 x H x W` in [0, 255].
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityPair {
    pub id: String,
    pub rgb: Tensor4,
    pub tir: Tensor4,
    pub annotations: Vec<Annotation>,
    pub tag: SceneTag,
}

impl ModalityPair {
    pub fn height(&self) -> usize {
        self.rgb.h()
    }

    pub fn width(&self) -> usize {
        self.rgb.w()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassProfilePreset {
    /// Warm pedestrian-like ellipses and cool vehicle-like boxes.
    Default,
    /// Only the warm class.
    WarmOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Ellipse,
    Rect,
}

/// Appearance of one class: contrast amplitudes (grey levels) per modality
/// and scene tag, and the size envelope.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProfile {
    pub name: &'static str,
    shape: Shape,
    /// Range of the longer box side in pixels.
    pub size: (f64, f64),
    /// Range of the shorter/longer side ratio.
    pub aspect: (f64, f64),
    /// Whether the longer side is vertical.
    pub tall: bool,
    pub rgb_day: f64,
    pub rgb_night: f64,
    pub tir_day: f64,
    pub tir_night: f64,
    /// Thermal contrast is always positive for warm classes.
    pub warm: bool,
}

impl ClassProfilePreset {
    pub fn classes(self) -> Vec<ClassProfile> {
        let pedestrian = ClassProfile {
            name: "pedestrian",
            shape: Shape::Ellipse,
            size: (12.0, 36.0),
            aspect: (0.38, 0.5),
            tall: true,
            rgb_day: 45.0,
            rgb_night: 5.0,
            tir_day: 45.0,
            tir_night: 80.0,
            warm: true,
        };
        let vehicle = ClassProfile {
            name: "vehicle",
            shape: Shape::Rect,
            size: (14.0, 36.0),
            aspect: (0.45, 0.7),
            tall: false,
            rgb_day: 60.0,
            rgb_night: 8.0,
            tir_day: 10.0,
            tir_night: 38.0,
            warm: false,
        };
        match self {
            ClassProfilePreset::Default => vec![pedestrian, vehicle],
            ClassProfilePreset::WarmOnly => vec![pedestrian],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub profile: ClassProfilePreset,
    pub night_ratio: f64,
    /// Per-pixel Gaussian texture noise (grey levels).
    pub texture_sigma: f64,
    /// Maximum number of unannotated clutter blobs per modality.
    pub clutter_max: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 80,
            min_objects: 1,
            max_objects: 4,
            profile: ClassProfilePreset::Default,
            night_ratio: 0.5,
            texture_sigma: 6.0,
            clutter_max: 2,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        // stem plus three stride-2 stages
        if !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) || self.height == 0 || self.width == 0 {
            return Err(DataError::Config(format!(
                "image size {}x{} must be a positive multiple of 16",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.night_ratio) {
            return Err(DataError::Config(format!("night_ratio {} outside [0,1]", self.night_ratio)));
        }
        if self.min_objects > self.max_objects {
            return Err(DataError::Config("min_objects exceeds max_objects".into()));
        }
        if self.texture_sigma < 0.0 {
            return Err(DataError::Config("texture_sigma must be non-negative".into()));
        }
        let largest = self.profile.classes().iter().map(|c| c.size.1).fold(0.0, f64::max);
        if largest >= self.height.min(self.width) as f64 {
            return Err(DataError::Config(format!(
                "objects up to {largest}px do not fit a {}x{} image",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.profile.classes().iter().map(|c| c.name.to_string()).collect()
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize, rng: &mut ChaCha8Rng, level: f64, slope: f64) -> Self {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        let mut px = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 / w as f64 - 0.5) * dx + (y as f64 / h as f64 - 0.5) * dy;
                px.push(level + slope * u);
            }
        }
        Canvas { h, w, px }
    }

    /// Adds `delta` weighted by the 4x4-supersampled coverage of the shape.
    fn stamp(&mut self, shape: Shape, b: &Bbox, delta: f64) {
        const SS: usize = 4;
        let (cx, cy) = b.center();
        let (rx, ry) = (0.5 * b.width(), 0.5 * b.height());
        let x0 = b.x1.floor().max(0.0) as usize;
        let y0 = b.y1.floor().max(0.0) as usize;
        let x1 = (b.x2.ceil() as usize).min(self.w);
        let y1 = (b.y2.ceil() as usize).min(self.h);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                        let inside = match shape {
                            Shape::Rect => b.contains_point(px, py),
                            Shape::Ellipse => {
                                let u = (px - cx) / rx;
                                let v = (py - cy) / ry;
                                u * u + v * v < 1.0
                            }
                        };
                        if inside {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    self.px[y * self.w + x] += delta * hits as f64 / (SS * SS) as f64;
                }
            }
        }
    }

    fn finish(mut self, rng: &mut ChaCha8Rng, sigma: f64) -> Tensor4 {
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).expect("finite sigma");
            for p in &mut self.px {
                *p += noise.sample(rng);
            }
        }
        for p in &mut self.px {
            *p = p.clamp(0.0, 255.0);
        }
        Tensor4::from_vec([1, 1, self.h, self.w], self.px).expect("canvas shape")
    }
}

fn sample_box(rng: &mut ChaCha8Rng, profile: &ClassProfile, h: usize, w: usize) -> Bbox {
    let long = rng.random_range(profile.size.0..=profile.size.1);
    let short = long * rng.random_range(profile.aspect.0..=profile.aspect.1);
    let (bw, bh) = if profile.tall { (short, long) } else { (long, short) };
    let x1 = rng.random_range(0.0..=(w as f64 - bw));
    let y1 = rng.random_range(0.0..=(h as f64 - bh));
    Bbox::new(x1, y1, x1 + bw, y1 + bh)
}

fn signed(rng: &mut ChaCha8Rng, amplitude: f64) -> f64 {
    if rng.random_bool(0.5) {
        amplitude
    } else {
        -amplitude
    }
}

/// Renders sample `index` of the stream defined by `config.seed`.
pub fn render_sample(config: &SceneConfig, index: usize) -> ModalityPair {
    let mut rng = sample_rng(config.seed, index as u64);
    let (h, w) = (config.height, config.width);
    let classes = config.profile.classes();
    let tag = if rng.random_bool(config.night_ratio) {
        SceneTag::Night
    } else {
        SceneTag::Day
    };
    let night = tag == SceneTag::Night;

    let (rgb_level, tir_level) = if night {
        (rng.random_range(15.0..45.0), rng.random_range(50.0..80.0))
    } else {
        (rng.random_range(90.0..170.0), rng.random_range(90.0..130.0))
    };
    let rgb_slope = if night { 8.0 } else { rng.random_range(10.0..40.0) };
    let tir_slope = rng.random_range(5.0..15.0);
    let mut rgb = Canvas::new(h, w, &mut rng, rgb_level, rgb_slope);
    let mut tir = Canvas::new(h, w, &mut rng, tir_level, tir_slope);

    // clutter: unannotated low-contrast blobs, independent per modality
    for canvas in [&mut rgb, &mut tir] {
        let n = rng.random_range(0..=config.clutter_max);
        for _ in 0..n {
            let side = rng.random_range(6.0..16.0);
            let cw = side * rng.random_range(0.6..1.0);
            let x1 = rng.random_range(0.0..=(w as f64 - side));
            let y1 = rng.random_range(0.0..=(h as f64 - side));
            let b = Bbox::new(x1, y1, x1 + cw, y1 + side);
            let shape = if rng.random_bool(0.5) { Shape::Ellipse } else { Shape::Rect };
            let amp = rng.random_range(8.0..22.0);
            let delta = signed(&mut rng, amp);
            canvas.stamp(shape, &b, delta);
        }
    }

    let count = rng.random_range(config.min_objects..=config.max_objects);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.random_range(0..classes.len());
        let profile = &classes[class_id];
        let mut bbox = sample_box(&mut rng, profile, h, w);
        for _ in 0..20 {
            if annotations.iter().all(|a| a.bbox.iou(&bbox) < 0.2) {
                break;
            }
            bbox = sample_box(&mut rng, profile, h, w);
        }
        let jitter_rgb = rng.random_range(0.8..1.2);
        let jitter_tir = rng.random_range(0.8..1.2);
        let rgb_amp = jitter_rgb * if night { profile.rgb_night } else { profile.rgb_day };
        let tir_amp = jitter_tir * if night { profile.tir_night } else { profile.tir_day };
        let rgb_delta = signed(&mut rng, rgb_amp);
        let tir_delta = if profile.warm || night {
            tir_amp
        } else {
            signed(&mut rng, tir_amp)
        };
        rgb.stamp(profile.shape, &bbox, rgb_delta);
        tir.stamp(profile.shape, &bbox, tir_delta);
        let mut visibility = Visibility {
            rgb: rgb_amp >= VISIBILITY_THRESHOLD,
            tir: tir_amp >= VISIBILITY_THRESHOLD,
        };
        if !visibility.rgb && !visibility.tir {
            if rgb_amp >= tir_amp {
                visibility.rgb = true;
            } else {
                visibility.tir = true;
            }
        }
        annotations.push(Annotation {
            bbox,
            class_id,
            visibility,
        });
    }

    let sigma = config.texture_sigma;
    let rgb = rgb.finish(&mut rng, sigma);
    let tir = tir.finish(&mut rng, sigma);
    ModalityPair {
        id: sample_id(index),
        rgb,
        tir,
        annotations,
        tag,
    }
}

/// Renders samples `range` in parallel; output order follows the range.
pub fn render_range(config: &SceneConfig, range: std::ops::Range<usize>) -> Vec<ModalityPair> {
    range.into_par_iter().map(|i| render_sample(config, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub tag: SceneTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub split: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<String>,
    pub seed: u64,
    pub samples: Vec<SampleMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub pairs: Vec<ModalityPair>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }
}

pub fn encode_t4(t: &Tensor4) -> Vec<u8> {
    let mut out = Vec::with_capacity(3 + 16 + 8 * t.len());
    out.extend_from_slice(T4_MAGIC);
    for e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one T4 record from the front of `bytes`, returning the tensor and
/// the number of bytes consumed.
pub fn decode_t4(bytes: &[u8]) -> Result<(Tensor4, usize), String> {
    if bytes.len() < 19 || &bytes[..3] != T4_MAGIC {
        return Err("missing T4 header".into());
    }
    let mut shape = [0usize; 4];
    for (i, s) in shape.iter_mut().enumerate() {
        let o = 3 + 4 * i;
        *s = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    }
    let n: usize = shape.iter().product();
    let end = 19 + 8 * n;
    if bytes.len() < end {
        return Err(format!("truncated payload: shape {shape:?} needs {end} bytes, have {}", bytes.len()));
    }
    let data = bytes[19..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((Tensor4::from_vec(shape, data).map_err(|e| e.to_string())?, end))
}

pub fn write_t4(path: &Path, t: &Tensor4) -> Result<(), DataError> {
    fs::write(path, encode_t4(t)).map_err(|e| DataError::io(path, e))
}

pub fn read_t4(path: &Path) -> Result<Tensor4, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DataError::io(path, e))?;
    let (t, used) = decode_t4(&bytes).map_err(|detail| DataError::Format {
        path: path.to_path_buf(),
        detail,
    })?;
    if used != bytes.len() {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(t)
}

pub fn format_annotations(anns: &[Annotation]) -> String {
    let mut s = String::new();
    for a in anns {
        let b = a.bbox;
        s.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            a.class_id,
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            u8::from(a.visibility.rgb),
            u8::from(a.visibility.tir)
        ));
    }
    s
}

pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>, String> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(format!("line {}: expected 7 fields, got {}", ln + 1, f.len()));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("line {}: field {}: {e}", ln + 1, i + 1));
        let flag = |i: usize| match f[i] {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(format!("line {}: visibility flag `{other}`", ln + 1)),
        };
        let class_id = f[0].parse::<usize>().map_err(|e| format!("line {}: class: {e}", ln + 1))?;
        out.push(Annotation {
            bbox: Bbox::new(num(1)?, num(2)?, num(3)?, num(4)?),
            class_id,
            visibility: Visibility {
                rgb: flag(5)?,
                tir: flag(6)?,
            },
        });
    }
    Ok(out)
}

/// Writes one split directory.
pub fn write_split(dir: &Path, split: &str, config: &SceneConfig, pairs: &[ModalityPair]) -> Result<Manifest, DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    for p in pairs {
        write_t4(&dir.join(format!("{}.rgb.t4", p.id)), &p.rgb)?;
        write_t4(&dir.join(format!("{}.tir.t4", p.id)), &p.tir)?;
        let ann = dir.join(format!("{}.ann", p.id));
        fs::write(&ann, format_annotations(&p.annotations)).map_err(|e| DataError::io(&ann, e))?;
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        split: split.into(),
        count: pairs.len(),
        height: config.height,
        width: config.width,
        classes: config.class_names(),
        seed: config.seed,
        samples: pairs
            .iter()
            .map(|p| SampleMeta {
                id: p.id.clone(),
                tag: p.tag,
            })
            .collect(),
    };
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| DataError::io(&path, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| DataError::io(&path, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub train: Manifest,
    pub test: Manifest,
    pub root: PathBuf,
}

/// Generates `n_train + n_test` samples and writes them under
/// `out/train` and `out/test`.
pub fn generate_dataset(config: &SceneConfig, n_train: usize, n_test: usize, out: &Path) -> Result<GeneratedDataset, DataError> {
    config.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(DataError::Config("n_train and n_test must be positive".into()));
    }
    let train = render_range(config, 0..n_train);
    let test = render_range(config, n_train..n_train + n_test);
    let train = write_split(&out.join("train"), "train", config, &train)?;
    let test = write_split(&out.join("test"), "test", config, &test)?;
    Ok(GeneratedDataset {
        train,
        test,
        root: out.to_path_buf(),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| DataError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Format {
        path: mpath.clone(),
        detail: e.to_string(),
    })?;
    if manifest.format != FORMAT_TAG {
        return Err(DataError::Format {
            path: mpath,
            detail: format!("unknown format `{}`", manifest.format),
        });
    }
    if manifest.count != manifest.samples.len() {
        return Err(DataError::Format {
            path: mpath,
            detail: format!("count {} but {} samples listed", manifest.count, manifest.samples.len()),
        });
    }
    let pairs = manifest
        .samples
        .par_iter()
        .map(|meta| load_sample(dir, meta, &manifest))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { manifest, pairs })
}

fn load_sample(dir: &Path, meta: &SampleMeta, manifest: &Manifest) -> Result<ModalityPair, DataError> {
    let plane = |modality: &'static str| -> Result<Tensor4, DataError> {
        let path = dir.join(format!("{}.{modality}.t4", meta.id));
        if !path.exists() {
            return Err(DataError::MissingModality {
                id: meta.id.clone(),
                modality,
                path,
            });
        }
        let t = read_t4(&path)?;
        if t.shape() != [1, 1, manifest.height, manifest.width] {
            return Err(DataError::Sample {
                id: meta.id.clone(),
                detail: format!(
                    "{modality} plane {:?}, manifest says {}x{}",
                    t.shape(),
                    manifest.height,
                    manifest.width
                ),
            });
        }
        if t.data().iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(DataError::Sample {
                id: meta.id.clone(),
                detail: format!("{modality} pixels outside [0,255]"),
            });
        }
        Ok(t)
    };
    let rgb = plane("rgb")?;
    let tir = plane("tir")?;
    let apath = dir.join(format!("{}.ann", meta.id));
    if !apath.exists() {
        return Err(DataError::MissingModality {
            id: meta.id.clone(),
            modality: "annotation",
            path: apath,
        });
    }
    let text = fs::read_to_string(&apath).map_err(|e| DataError::io(&apath, e))?;
    let annotations = parse_annotations(&text).map_err(|detail| DataError::Sample {
        id: meta.id.clone(),
        detail,
    })?;
    for a in &annotations {
        if a.class_id >= manifest.classes.len() {
            return Err(DataError::Sample {
                id: meta.id.clone(),
                detail: format!("class {} out of range", a.class_id),
            });
        }
    }
    Ok(ModalityPair {
        id: meta.id.clone(),
        rgb,
        tir,
        annotations,
        tag: meta.tag,
    })
}

/// Index batches over `len` samples; the last short batch is kept.
pub fn batch_indices(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn load_batches(pairs: &[ModalityPair], batch_size: usize, shuffle_seed: Option<u64>) -> impl Iterator<Item = Vec<&ModalityPair>> {
    batch_indices(pairs.len(), batch_size, shuffle_seed)
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &pairs[i]).collect())
}

/// Maps pixel values to [0, 1] and stacks a batch into network inputs.
pub fn normalize_for_net(pairs: &[&ModalityPair]) -> (Tensor4, Tensor4) {
    let scale = |t: &Tensor4| t.map(|v| v / 255.0);
    let rgb: Vec<Tensor4> = pairs.iter().map(|p| scale(&p.rgb)).collect();
    let tir: Vec<Tensor4> = pairs.iter().map(|p| scale(&p.tir)).collect();
    let rgb = Tensor4::stack(&rgb.iter().collect::<Vec<_>>()).expect("pairs share a shape");
    let tir = Tensor4::stack(&tir.iter().collect::<Vec<_>>()).expect("pairs share a shape");
    (rgb, tir)
}

/// Mean absolute Weber contrast of annotated objects per modality:
/// `|mean(inner box) - mean(ring)| / mean(ring)`, where the ring is a 3 px
/// band around the box.
pub fn object_weber_contrast(pair: &ModalityPair) -> Vec<(f64, f64)> {
    let stats = |t: &Tensor4, b: &Bbox| {
        let (h, w) = (t.h() as isize, t.w() as isize);
        let (cx, cy) = b.center();
        // inner region: central half of the box
        let ix0 = (cx - 0.25 * b.width()).floor() as isize;
        let ix1 = (cx + 0.25 * b.width()).ceil() as isize;
        let iy0 = (cy - 0.25 * b.height()).floor() as isize;
        let iy1 = (cy + 0.25 * b.height()).ceil() as isize;
        let ox0 = b.x1.floor() as isize - 3;
        let ox1 = b.x2.ceil() as isize + 3;
        let oy0 = b.y1.floor() as isize - 3;
        let oy1 = b.y2.ceil() as isize + 3;
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for y in oy0.max(0)..oy1.min(h) {
            for x in ox0.max(0)..ox1.min(w) {
                let v = t.at(0, 0, y as usize, x as usize);
                let inside_box = (x as f64 + 0.5) > b.x1 && (x as f64 + 0.5) < b.x2 && (y as f64 + 0.5) > b.y1 && (y as f64 + 0.5) < b.y2;
                if x >= ix0 && x < ix1 && y >= iy0 && y < iy1 {
                    si += v;
                    ni += 1;
                } else if !inside_box {
                    so += v;
                    no += 1;
                }
            }
        }
        let inner = si / ni.max(1) as f64;
        let ring = (so / no.max(1) as f64).max(1.0);
        (inner - ring).abs() / ring
    };
    pair.annotations
        .iter()
        .map(|a| (stats(&pair.rgb, &a.bbox), stats(&pair.tir, &a.bbox)))
        .collect()
}
