//! Label assignment for the anchor-free head and the composite training
//! loss: objectness and class BCE, DIoU regression and the base/auxiliary
//! consistency term.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detector::{HeadOutput, LevelVars};
use crate::diffengine::{CellTarget, Graph, Live, Reduction, ShapeError, Tensor4, Var};
use crate::geometry::Bbox;
use crate::synthdata::Annotation;

/// Grid of one detection level and the range of box sizes (longer side,
/// `[lo, hi)`) it is responsible for.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelGeom {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Level geometry for an `image_h x image_w` input. Consecutive levels split
/// at four times the finer stride, so the ranges partition `[0, inf)`.
pub fn level_geometry(image_h: usize, image_w: usize, strides: &[usize]) -> Vec<LevelGeom> {
    strides
        .iter()
        .enumerate()
        .map(|(i, &s)| LevelGeom {
            h: image_h / s,
            w: image_w / s,
            stride: s,
            lo: if i == 0 { 0.0 } else { 4.0 * strides[i - 1] as f64 },
            hi: if i + 1 == strides.len() { f64::INFINITY } else { 4.0 * s as f64 },
        })
        .collect()
}

pub fn head_geometry(head: &HeadOutput) -> Vec<LevelGeom> {
    let strides: Vec<usize> = head.levels.iter().map(|l| l.stride).collect();
    level_geometry(head.image_h, head.image_w, &strides)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive {
    pub n: usize,
    pub row: usize,
    pub col: usize,
    /// Index into the image's annotation list.
    pub ann: usize,
    pub bbox: Bbox,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub geom: LevelGeom,
    /// `N x 1 x H x W`, 1 at positives.
    pub obj: Tensor4,
    /// `N x K x H x W`, one-hot at positives.
    pub cls: Tensor4,
    /// `N x K x H x W`, 1 on every channel of a positive cell.
    pub cls_mask: Tensor4,
    pub positives: Vec<Positive>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub levels: Vec<LevelTargets>,
}

impl Targets {
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(|l| l.positives.len()).sum()
    }
}

/// Smaller area first, then coordinates and class, so the winner does not
/// depend on annotation order.
fn preference(a: &Annotation, b: &Annotation) -> Ordering {
    a.bbox
        .area()
        .total_cmp(&b.bbox.area())
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
        .then(a.class_id.cmp(&b.class_id))
}

/// Positive cells of one image as `(level, row, col, annotation index)`.
///
/// A cell is positive for a box when its center lies strictly inside the box
/// and the box's longer side falls in the level's range. A box that covers
/// no cell center of its level claims the cell containing its own center.
pub fn assign_image(anns: &[Annotation], levels: &[LevelGeom]) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for (li, g) in levels.iter().enumerate() {
        let mut owner: Vec<Option<usize>> = vec![None; g.h * g.w];
        let mut claim = |cell: usize, ai: usize| {
            let better = match owner[cell] {
                None => true,
                Some(cur) => preference(&anns[ai], &anns[cur]) == Ordering::Less,
            };
            if better {
                owner[cell] = Some(ai);
            }
        };
        let s = g.stride as f64;
        for (ai, a) in anns.iter().enumerate() {
            let side = a.bbox.longer_side();
            if side < g.lo || side >= g.hi {
                continue;
            }
            let mut any = false;
            for row in 0..g.h {
                let cy = (row as f64 + 0.5) * s;
                if cy <= a.bbox.y1 || cy >= a.bbox.y2 {
                    continue;
                }
                for col in 0..g.w {
                    if a.bbox.contains_point((col as f64 + 0.5) * s, cy) {
                        claim(row * g.w + col, ai);
                        any = true;
                    }
                }
            }
            if !any {
                let (cx, cy) = a.bbox.center();
                let col = ((cx / s).floor() as usize).min(g.w - 1);
                let row = ((cy / s).floor() as usize).min(g.h - 1);
                claim(row * g.w + col, ai);
            }
        }
        for (cell, o) in owner.iter().enumerate() {
            if let Some(ai) = o {
                out.push((li, cell / g.w, cell % g.w, *ai));
            }
        }
    }
    out
}

/// Targets for a batch; `batch[n]` holds the annotations of image `n`.
pub fn assign(batch: &[&[Annotation]], levels: &[LevelGeom], num_classes: usize) -> Targets {
    let n = batch.len();
    let mut out: Vec<LevelTargets> = levels
        .iter()
        .map(|g| LevelTargets {
            geom: *g,
            obj: Tensor4::zeros([n, 1, g.h, g.w]),
            cls: Tensor4::zeros([n, num_classes, g.h, g.w]),
            cls_mask: Tensor4::zeros([n, num_classes, g.h, g.w]),
            positives: Vec::new(),
        })
        .collect();
    for (b, anns) in batch.iter().enumerate() {
        for (li, row, col, ai) in assign_image(anns, levels) {
            let a = anns[ai];
            let lt = &mut out[li];
            lt.obj.set(b, 0, row, col, 1.0);
            lt.cls.set(b, a.class_id, row, col, 1.0);
            for k in 0..num_classes {
                lt.cls_mask.set(b, k, row, col, 1.0);
            }
            lt.positives.push(Positive {
                n: b,
                row,
                col,
                ann: ai,
                bbox: a.bbox,
                class_id: a.class_id,
            });
        }
    }
    Targets { levels: out }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub obj: f64,
    pub cls: f64,
    pub reg: f64,
    pub consist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            obj: 1.0,
            cls: 1.0,
            reg: 1.0,
            consist: 1.0,
        }
    }
}

/// Head branches compared by the consistency term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistBranches {
    pub obj: bool,
    pub cls: bool,
    pub reg: bool,
}

impl Default for ConsistBranches {
    fn default() -> Self {
        ConsistBranches {
            obj: true,
            cls: true,
            reg: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistReduction {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_obj: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_consist: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// The first non-finite term, by name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_obj", self.l_obj),
            ("l_cls", self.l_cls),
            ("l_reg", self.l_reg),
            ("l_consist", self.l_consist),
            ("l_total", self.l_total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub obj: Var,
    pub cls: Var,
    pub reg: Var,
    pub consist: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            l_obj: v(self.obj),
            l_cls: v(self.cls),
            l_reg: v(self.reg),
            l_consist: self.consist.map_or(0.0, v),
            l_total: v(self.total),
        }
    }
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var, ShapeError> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

fn zero(g: &mut Graph) -> Var {
    g.input(Tensor4::scalar(0.0))
}

/// Detection terms: objectness BCE averaged over every location of every
/// level, class BCE averaged over the class entries of positive cells, DIoU
/// averaged over positive cells.
pub fn detection_terms(g: &mut Graph, head: &[LevelVars], targets: &Targets) -> Result<(Var, Var, Var), ShapeError> {
    if head.len() != targets.levels.len() {
        return Err(ShapeError::mismatch(
            "detection_loss",
            format!("{} head levels vs {} target levels", head.len(), targets.levels.len()),
        ));
    }
    let mut obj_terms = Vec::new();
    let mut cls_terms = Vec::new();
    let mut reg_cells = Vec::new();
    let mut reg_terms = Vec::new();
    let (mut n_loc, mut n_cls) = (0usize, 0usize);
    for (lv, lt) in head.iter().zip(&targets.levels) {
        obj_terms.push(g.bce_logits(lv.obj, lt.obj.clone(), None, Reduction::Sum)?);
        n_loc += lt.obj.len();
        if !lt.positives.is_empty() {
            cls_terms.push(g.bce_logits(lv.cls, lt.cls.clone(), Some(lt.cls_mask.clone()), Reduction::Sum)?);
            n_cls += lt.positives.len() * lt.cls.c();
            let cells: Vec<CellTarget> = lt
                .positives
                .iter()
                .map(|p| CellTarget {
                    n: p.n,
                    row: p.row,
                    col: p.col,
                    stride: lt.geom.stride as f64,
                    target: p.bbox,
                })
                .collect();
            reg_cells.push(cells.len());
            reg_terms.push(g.diou_cells(lv.reg, cells, Reduction::Sum)?);
        }
    }
    let obj_sum = sum_vars(g, &obj_terms)?;
    let obj = g.div_scalar(obj_sum, n_loc as f64);
    let n_pos: usize = reg_cells.iter().sum();
    let (cls, reg) = if n_pos == 0 {
        (zero(g), zero(g))
    } else {
        let c = sum_vars(g, &cls_terms)?;
        let r = sum_vars(g, &reg_terms)?;
        (g.div_scalar(c, n_cls as f64), g.div_scalar(r, n_pos as f64))
    };
    Ok((obj, cls, reg))
}

/// Squared difference between `base` (a constant) and the auxiliary head
/// over the selected branches of every level. Only the auxiliary side
/// receives gradient.
pub fn consistency_term(
    g: &mut Graph,
    base: &HeadOutput,
    aux: &[LevelVars],
    branches: ConsistBranches,
    reduction: ConsistReduction,
) -> Result<Var, ShapeError> {
    if base.levels.len() != aux.len() {
        return Err(ShapeError::mismatch(
            "consistency_loss",
            format!("{} base levels vs {} aux levels", base.levels.len(), aux.len()),
        ));
    }
    let mut terms = Vec::new();
    let mut count = 0usize;
    for (bl, al) in base.levels.iter().zip(aux) {
        let pairs = [
            (branches.obj, &bl.obj, al.obj),
            (branches.cls, &bl.cls, al.cls),
            (branches.reg, &bl.reg, al.reg),
        ];
        for (on, bt, av) in pairs {
            if !on {
                continue;
            }
            let bv = g.input(bt.clone());
            terms.push(g.l2(bv, av, Live::RightOnly, Reduction::Sum)?);
            count += bt.len();
        }
    }
    if terms.is_empty() {
        return Ok(zero(g));
    }
    let s = sum_vars(g, &terms)?;
    Ok(match reduction {
        ConsistReduction::Mean => g.div_scalar(s, count as f64),
        ConsistReduction::Sum => s,
    })
}

/// Full weighted objective. `base` is `None` when the consistency term is
/// off.
pub fn total_loss(
    g: &mut Graph,
    head: &[LevelVars],
    targets: &Targets,
    base: Option<(&HeadOutput, ConsistBranches, ConsistReduction)>,
    weights: &LossWeights,
) -> Result<LossVars, ShapeError> {
    let (obj, cls, reg) = detection_terms(g, head, targets)?;
    let consist = base
        .map(|(b, br, red)| consistency_term(g, b, head, br, red))
        .transpose()?;
    let mut parts = vec![g.scale(obj, weights.obj), g.scale(cls, weights.cls), g.scale(reg, weights.reg)];
    if let Some(c) = consist {
        parts.push(g.scale(c, weights.consist));
    }
    let total = sum_vars(g, &parts)?;
    Ok(LossVars {
        obj,
        cls,
        reg,
        consist,
        total,
    })
}

fn head_inputs(g: &mut Graph, head: &HeadOutput) -> Vec<LevelVars> {
    head.levels
        .iter()
        .map(|l| {
            let obj = g.input(l.obj.clone());
            LevelVars {
                obj,
                cls: g.input(l.cls.clone()),
                reg: g.input(l.reg.clone()),
                feature: obj,
                stride: l.stride,
            }
        })
        .collect()
}

/// Detection loss of fixed head outputs (no consistency term).
pub fn detection_loss(head: &HeadOutput, targets: &Targets) -> Result<LossBreakdown, ShapeError> {
    let mut g = Graph::no_grad();
    let vars = head_inputs(&mut g, head);
    let lv = total_loss(&mut g, &vars, targets, None, &LossWeights::default())?;
    Ok(lv.breakdown(&g))
}

/// Mean squared difference between two heads over every branch and level.
pub fn consistency_loss(base: &HeadOutput, aux: &HeadOutput) -> Result<f64, ShapeError> {
    let mut g = Graph::no_grad();
    let vars = head_inputs(&mut g, aux);
    for (b, a) in base.levels.iter().zip(&aux.levels) {
        if b.obj.shape() != a.obj.shape() || b.cls.shape() != a.cls.shape() || b.stride != a.stride {
            return Err(ShapeError::mismatch("consistency_loss", "head geometry differs"));
        }
    }
    let v = consistency_term(&mut g, base, &vars, ConsistBranches::default(), ConsistReduction::Mean)?;
    Ok(g.value(v).data()[0])
}
