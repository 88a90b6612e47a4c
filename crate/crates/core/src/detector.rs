//! Two-stream detector with quality-aware cross-modal interaction.
//!
//! Each modality runs its own stem (stride 2) and three stages (stride 2
//! each). At every stage both streams emit a single-channel sigmoid gate
//! `M_m` from their pre-interaction features, and the features are
//! cross-added:
//!
//! ```text
//! X̂_rgb = X_rgb + M_tir · X_tir
//! X̂_tir = X_tir + M_rgb · X_rgb
//! ```
//!
//! The interacted features feed the next stage and a per-stage 1x1 fusion
//! convolution over `concat(X̂_rgb, X̂_tir)`. A top-down neck merges the fused
//! stages, and a small decoupled head per level predicts objectness, class
//! logits and box regression.

use std::fs;
use std::path::Path;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::loss::sigmoid;
use crate::diffengine::{Graph, ParamSet, ParamTensor, ShapeError, Tensor4, Var};
use crate::geometry::{decode_cell, Bbox};
use crate::synthdata::{decode_t4, encode_t4};

pub const MODALITIES: [&str; 2] = ["rgb", "tir"];
pub const STAGES: [usize; 3] = [3, 4, 5];
const PARAM_MAGIC: &str = "RGBT-PARAMS 1";

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("invalid input: {0}")]
    Input(String),
}

#[derive(Debug, Error)]
pub enum ParamFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed parameter file: {detail}")]
    Format { path: String, detail: String },
    #[error("parameter ids do not match the architecture; missing: [{}], extra: [{}]", missing.join(", "), extra.join(", "))]
    IdMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("parameter `{id}` has shape {found:?}, architecture expects {expected:?}")]
    ShapeMismatch {
        id: String,
        expected: [usize; 4],
        found: [usize; 4],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arch {
    /// Channel widths of the stem and the three stages.
    pub widths: [usize; 4],
    pub neck_width: usize,
    pub num_classes: usize,
    pub interaction: bool,
    pub leaky_slope: f64,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            widths: [8, 16, 32, 64],
            neck_width: 16,
            num_classes: 2,
            interaction: true,
            leaky_slope: 0.1,
        }
    }
}

/// Initialisation rule of one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub id: String,
    pub shape: [usize; 4],
    pub init: Init,
}

impl Arch {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.widths.contains(&0) || self.neck_width == 0 || self.num_classes == 0 {
            return Err(DetectorError::Input("widths and class count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(DetectorError::Input(format!("leaky slope {} outside [0,1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Output strides of the three detection levels.
    pub fn strides(&self) -> [usize; 3] {
        [4, 8, 16]
    }

    /// Every parameter of the architecture, in id order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut conv = |id: String, cout: usize, cin: usize, k: usize| {
            out.push(ParamSpec {
                id: format!("{id}.w"),
                shape: [cout, cin, k, k],
                init: Init::He,
            });
            out.push(ParamSpec {
                id: format!("{id}.b"),
                shape: [cout, 1, 1, 1],
                init: Init::Zero,
            });
        };
        let [w0, ..] = self.widths;
        for m in MODALITIES {
            conv(format!("{m}.stem"), w0, 1, 3);
            for (i, s) in STAGES.iter().enumerate() {
                let (cin, c) = (self.widths[i], self.widths[i + 1]);
                conv(format!("{m}.s{s}.down"), c, cin, 3);
                conv(format!("{m}.s{s}.conv"), c, c, 3);
                if self.interaction {
                    conv(format!("gate.{m}.s{s}"), 1, c, 3);
                }
            }
        }
        for (i, s) in STAGES.iter().enumerate() {
            let c = self.widths[i + 1];
            conv(format!("fuse.s{s}"), c, 2 * c, 1);
            conv(format!("neck.lat{s}"), self.neck_width, c, 1);
            let nw = self.neck_width;
            conv(format!("head.p{s}.stem"), nw, nw, 3);
            conv(format!("head.p{s}.obj"), 1, nw, 1);
            conv(format!("head.p{s}.cls"), self.num_classes, nw, 1);
            conv(format!("head.p{s}.reg"), 4, nw, 1);
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }
}

/// A full parameter set for one detector instance.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    pub arch: Arch,
    pub set: ParamSet,
}

impl DetectorParams {
    /// He fan-in normal weights, zero biases. Draws follow id order.
    pub fn init(arch: &Arch, rng: &mut impl RngCore) -> Result<Self, DetectorError> {
        arch.validate()?;
        let params = arch
            .param_specs()
            .into_iter()
            .map(|spec| {
                let value = match spec.init {
                    Init::Zero => Tensor4::zeros(spec.shape),
                    Init::He => {
                        let fan_in = (spec.shape[1] * spec.shape[2] * spec.shape[3]) as f64;
                        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                        Tensor4::from_fn(spec.shape, |_| normal.sample(rng))
                    }
                };
                ParamTensor::new(spec.id, value)
            })
            .collect();
        Ok(DetectorParams {
            arch: arch.clone(),
            set: ParamSet::from_params(params).expect("unique ids"),
        })
    }

    pub fn value(&self, id: &str) -> Option<&Tensor4> {
        self.set.by_id(id).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, id: &str) -> Option<&mut Tensor4> {
        self.set.by_id_mut(id).map(|p| &mut p.value)
    }

    pub fn max_abs_diff(&self, other: &DetectorParams) -> f64 {
        self.set
            .iter()
            .zip(other.set.iter())
            .map(|(a, b)| a.value.max_abs_diff(&b.value))
            .fold(0.0, f64::max)
    }

    /// The same detector with the roles of the two streams exchanged: stream
    /// and gate parameters swap, and the fusion weights see their input
    /// halves swapped. `forward(swapped, tir, rgb)` equals `forward(self, rgb, tir)`.
    pub fn swap_streams(&self) -> DetectorParams {
        let mut out = self.clone();
        let swap_name = |id: &str| {
            if let Some(rest) = id.strip_prefix("rgb.") {
                Some(format!("tir.{rest}"))
            } else if let Some(rest) = id.strip_prefix("tir.") {
                Some(format!("rgb.{rest}"))
            } else if let Some(rest) = id.strip_prefix("gate.rgb.") {
                Some(format!("gate.tir.{rest}"))
            } else {
                id.strip_prefix("gate.tir.").map(|rest| format!("gate.rgb.{rest}"))
            }
        };
        for p in out.set.iter_mut() {
            if let Some(other) = swap_name(&p.id) {
                p.value = self.value(&other).expect("symmetric ids").clone();
            } else if p.id.starts_with("fuse.") && p.id.ends_with(".w") {
                let [co, ci, k, _] = p.value.shape();
                let half = ci / 2;
                let src = self.value(&p.id).expect("own id");
                p.value = Tensor4::from_fn([co, ci, k, k], |[o, c, y, x]| src.at(o, (c + half) % ci, y, x));
            }
        }
        out
    }
}

/// Graph handles for one detection level.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub obj: Var,
    pub cls: Var,
    pub reg: Var,
    /// Neck feature feeding the head.
    pub feature: Var,
    pub stride: usize,
}

/// Graph handles for the interaction at one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub x_rgb: Var,
    pub x_tir: Var,
    pub m_rgb: Option<Var>,
    pub m_tir: Option<Var>,
    pub hat_rgb: Var,
    pub hat_tir: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub levels: Vec<LevelVars>,
    pub stages: Vec<StageVars>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelHead {
    pub obj: Tensor4,
    pub cls: Tensor4,
    pub reg: Tensor4,
    pub stride: usize,
}

/// Raw head outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub levels: Vec<LevelHead>,
    pub image_h: usize,
    pub image_w: usize,
}

impl HeadOutput {
    pub fn batch(&self) -> usize {
        self.levels[0].obj.n()
    }
}

/// Per-stage gates `(M_rgb, M_tir)`, each `N x 1 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityMask {
    pub stages: Vec<(Tensor4, Tensor4)>,
}

struct Binder<'a> {
    set: &'a ParamSet,
    slope: f64,
}

impl Binder<'_> {
    fn conv(&self, g: &mut Graph, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var, DetectorError> {
        let bind = |g: &mut Graph, suffix: &str| {
            let id = format!("{name}.{suffix}");
            self.set
                .idx(&id)
                .map(|i| g.param(self.set, i))
                .ok_or(DetectorError::MissingParam(id))
        };
        let w = bind(g, "w")?;
        let b = bind(g, "b")?;
        Ok(g.conv2d(x, w, b, stride, pad)?)
    }

    fn conv_act(&self, g: &mut Graph, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var, DetectorError> {
        let y = self.conv(g, name, x, stride, pad)?;
        Ok(g.leaky(y, self.slope)?)
    }
}

/// Records the forward pass on `g`. Inputs are `N x 1 x H x W` in [0, 1].
pub fn forward_graph(params: &DetectorParams, g: &mut Graph, rgb: Var, tir: Var) -> Result<ForwardVars, DetectorError> {
    let (rs, ts) = (g.value(rgb).shape(), g.value(tir).shape());
    if rs != ts {
        return Err(DetectorError::Input(format!("rgb {rs:?} and tir {ts:?} differ")));
    }
    if rs[1] != 1 {
        return Err(DetectorError::Input(format!("expected single-channel planes, got {rs:?}")));
    }
    if rs[2] % 16 != 0 || rs[3] % 16 != 0 || rs[2] == 0 || rs[3] == 0 {
        return Err(DetectorError::Input(format!("spatial size {}x{} must be a positive multiple of 16", rs[2], rs[3])));
    }
    let arch = &params.arch;
    let bind = Binder {
        set: &params.set,
        slope: arch.leaky_slope,
    };
    let mut xr = bind.conv_act(g, "rgb.stem", rgb, 2, 1)?;
    let mut xt = bind.conv_act(g, "tir.stem", tir, 2, 1)?;
    let mut stages = Vec::with_capacity(3);
    let mut fused = Vec::with_capacity(3);
    for s in STAGES {
        let r = bind.conv_act(g, &format!("rgb.s{s}.down"), xr, 2, 1)?;
        let r = bind.conv_act(g, &format!("rgb.s{s}.conv"), r, 1, 1)?;
        let t = bind.conv_act(g, &format!("tir.s{s}.down"), xt, 2, 1)?;
        let t = bind.conv_act(g, &format!("tir.s{s}.conv"), t, 1, 1)?;
        let sv = if arch.interaction {
            let mr = bind.conv(g, &format!("gate.rgb.s{s}"), r, 1, 1)?;
            let mr = g.sigmoid(mr);
            let mt = bind.conv(g, &format!("gate.tir.s{s}"), t, 1, 1)?;
            let mt = g.sigmoid(mt);
            let cross_r = g.mul(t, mt)?;
            let cross_t = g.mul(r, mr)?;
            StageVars {
                x_rgb: r,
                x_tir: t,
                m_rgb: Some(mr),
                m_tir: Some(mt),
                hat_rgb: g.add(r, cross_r)?,
                hat_tir: g.add(t, cross_t)?,
            }
        } else {
            StageVars {
                x_rgb: r,
                x_tir: t,
                m_rgb: None,
                m_tir: None,
                hat_rgb: r,
                hat_tir: t,
            }
        };
        let cat = g.concat_channels(&[sv.hat_rgb, sv.hat_tir])?;
        fused.push(bind.conv_act(g, &format!("fuse.s{s}"), cat, 1, 0)?);
        xr = sv.hat_rgb;
        xt = sv.hat_tir;
        stages.push(sv);
    }

    let lat: Vec<Var> = STAGES
        .iter()
        .zip(&fused)
        .map(|(s, &f)| bind.conv(g, &format!("neck.lat{s}"), f, 1, 0))
        .collect::<Result<_, _>>()?;
    let p5 = lat[2];
    let up5 = g.upsample_nearest(p5);
    let p4 = g.add(lat[1], up5)?;
    let up4 = g.upsample_nearest(p4);
    let p3 = g.add(lat[0], up4)?;

    let mut levels = Vec::with_capacity(3);
    for ((s, feature), stride) in STAGES.iter().zip([p3, p4, p5]).zip(arch.strides()) {
        let h = bind.conv_act(g, &format!("head.p{s}.stem"), feature, 1, 1)?;
        levels.push(LevelVars {
            obj: bind.conv(g, &format!("head.p{s}.obj"), h, 1, 0)?,
            cls: bind.conv(g, &format!("head.p{s}.cls"), h, 1, 0)?,
            reg: bind.conv(g, &format!("head.p{s}.reg"), h, 1, 0)?,
            feature,
            stride,
        });
    }
    Ok(ForwardVars { levels, stages })
}

pub fn head_output(g: &Graph, fv: &ForwardVars) -> HeadOutput {
    let levels: Vec<LevelHead> = fv
        .levels
        .iter()
        .map(|l| LevelHead {
            obj: g.value(l.obj).clone(),
            cls: g.value(l.cls).clone(),
            reg: g.value(l.reg).clone(),
            stride: l.stride,
        })
        .collect();
    let l0 = &levels[0];
    HeadOutput {
        image_h: l0.obj.h() * l0.stride,
        image_w: l0.obj.w() * l0.stride,
        levels,
    }
}

pub fn quality_mask(g: &Graph, fv: &ForwardVars) -> Option<QualityMask> {
    fv.stages
        .iter()
        .map(|s| Some((g.value(s.m_rgb?).clone(), g.value(s.m_tir?).clone())))
        .collect::<Option<Vec<_>>>()
        .map(|stages| QualityMask { stages })
}

/// Inference forward without gradient bookkeeping.
pub fn forward(params: &DetectorParams, rgb: &Tensor4, tir: &Tensor4) -> Result<(HeadOutput, Option<QualityMask>), DetectorError> {
    let mut g = Graph::no_grad();
    let r = g.input(rgb.clone());
    let t = g.input(tir.clone());
    let fv = forward_graph(params, &mut g, r, t)?;
    Ok((head_output(&g, &fv), quality_mask(&g, &fv)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Bbox,
    pub score: f64,
    pub class_id: usize,
}

/// Descending score; equal scores order by lower x1, then y1, x2, y2, class.
pub fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
        .then(a.class_id.cmp(&b.class_id))
}

/// Class-wise greedy NMS over score-sorted input.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(detection_order);
    let mut keep: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if keep.iter().all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) <= iou) {
            keep.push(d);
        }
    }
    keep
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Detections kept per image after NMS.
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_threshold: 1e-3,
            nms_iou: 0.65,
            max_detections: 100,
        }
    }
}

/// Score and box for every location of image `n`, before thresholding.
pub fn raw_detections(head: &HeadOutput, n: usize) -> Vec<Detection> {
    let mut out = Vec::new();
    for l in &head.levels {
        let (h, w, k) = (l.obj.h(), l.obj.w(), l.cls.c());
        for row in 0..h {
            for col in 0..w {
                let (mut best_c, mut best) = (0, f64::NEG_INFINITY);
                for c in 0..k {
                    let v = l.cls.at(n, c, row, col);
                    if v > best {
                        best = v;
                        best_c = c;
                    }
                }
                let score = sigmoid(l.obj.at(n, 0, row, col)) * sigmoid(best);
                let raw = std::array::from_fn(|i| l.reg.at(n, i, row, col));
                out.push(Detection {
                    bbox: decode_cell(raw, col, row, l.stride as f64),
                    score,
                    class_id: best_c,
                });
            }
        }
    }
    out
}

/// Decodes every image: threshold, clip to the image, class-wise NMS,
/// descending scores.
pub fn decode(head: &HeadOutput, cfg: &DecodeConfig) -> Vec<Vec<Detection>> {
    let (iw, ih) = (head.image_w as f64, head.image_h as f64);
    (0..head.batch())
        .map(|n| {
            let cands = raw_detections(head, n)
                .into_iter()
                .filter(|d| d.score >= cfg.score_threshold)
                .filter_map(|d| {
                    let bbox = d.bbox.clip(iw, ih);
                    (bbox.is_proper() && bbox.to_array().iter().all(|v| v.is_finite())).then_some(Detection { bbox, ..d })
                })
                .collect();
            let mut kept = nms(cands, cfg.nms_iou);
            kept.truncate(cfg.max_detections);
            kept
        })
        .collect()
}

/// Serialises `params`: a text manifest of `id d0 d1 d2 d3` lines, then the
/// T4 payloads in id order.
pub fn encode_params(params: &DetectorParams) -> Vec<u8> {
    let mut head = format!("{PARAM_MAGIC}\n{}\n", params.set.len());
    for p in params.set.iter() {
        let [a, b, c, d] = p.value.shape();
        head.push_str(&format!("{} {a} {b} {c} {d}\n", p.id));
    }
    let mut out = head.into_bytes();
    for p in params.set.iter() {
        out.extend_from_slice(&encode_t4(&p.value));
    }
    out
}

pub fn save_params(params: &DetectorParams, path: &Path) -> Result<(), ParamFileError> {
    fs::write(path, encode_params(params)).map_err(|source| ParamFileError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads the raw `(id, tensor)` records of a parameter file.
pub fn read_param_records(path: &Path) -> Result<Vec<ParamTensor>, ParamFileError> {
    let p = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| ParamFileError::Io { path: p.clone(), source })?;
    let fail = |detail: String| ParamFileError::Format { path: p.clone(), detail };
    let mut cursor = 0;
    let mut line = || -> Result<String, ParamFileError> {
        let end = bytes[cursor..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail("truncated manifest".into()))?;
        let s = std::str::from_utf8(&bytes[cursor..cursor + end])
            .map_err(|_| fail("manifest is not UTF-8".into()))?
            .to_string();
        cursor += end + 1;
        Ok(s)
    };
    if line()? != PARAM_MAGIC {
        return Err(fail("bad magic line".into()));
    }
    let count: usize = line()?.trim().parse().map_err(|_| fail("bad count".into()))?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let l = line()?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 5 {
            return Err(fail(format!("bad manifest line `{l}`")));
        }
        let mut shape = [0usize; 4];
        for (i, s) in shape.iter_mut().enumerate() {
            *s = f[i + 1].parse().map_err(|_| fail(format!("bad extent in `{l}`")))?;
        }
        manifest.push((f[0].to_string(), shape));
    }
    let mut out = Vec::with_capacity(count);
    for (id, shape) in manifest {
        let (t, used) = decode_t4(&bytes[cursor..]).map_err(|e| fail(format!("`{id}`: {e}")))?;
        if t.shape() != shape {
            return Err(fail(format!("`{id}`: payload {:?} vs manifest {shape:?}", t.shape())));
        }
        cursor += used;
        out.push(ParamTensor::new(id, t));
    }
    if cursor != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - cursor)));
    }
    Ok(out)
}

/// Loads a parameter file into `arch`, rejecting missing, extra or
/// mis-shaped tensors.
pub fn load_params(path: &Path, arch: &Arch) -> Result<DetectorParams, ParamFileError> {
    let records = read_param_records(path)?;
    let specs = arch.param_specs();
    let have: std::collections::BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let want: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.id.as_str()).collect();
    let missing: Vec<String> = want.difference(&have).map(|s| s.to_string()).collect();
    let extra: Vec<String> = have.difference(&want).map(|s| s.to_string()).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(ParamFileError::IdMismatch { missing, extra });
    }
    for spec in &specs {
        let r = records.iter().find(|r| r.id == spec.id).expect("checked above");
        if r.value.shape() != spec.shape {
            return Err(ParamFileError::ShapeMismatch {
                id: spec.id.clone(),
                expected: spec.shape,
                found: r.value.shape(),
            });
        }
    }
    let set = ParamSet::from_params(records).map_err(|detail| ParamFileError::Format {
        path: path.display().to_string(),
        detail,
    })?;
    Ok(DetectorParams { arch: arch.clone(), set })
}
