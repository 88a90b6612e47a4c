//! Training-time pseudo degradation and test-time corruption conditions.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::Tensor4;
use crate::geometry::Bbox;
use crate::synthdata::ModalityPair;

pub const MID_GRAY: f64 = 127.5;

pub const CONDITION_GRAMMAR: &str =
    "balanced | contrast:<rgb|tir>:<f> | drop:<rgb|tir> | noise:<rgb|tir>:<sigma> | region:<rgb|tir>:<f>:<seed>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Tir,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Tir => "tir",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn plane_mut(pair: &mut ModalityPair, m: Modality) -> &mut Tensor4 {
    match m {
        Modality::Rgb => &mut pair.rgb,
        Modality::Tir => &mut pair.tir,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeParams {
    /// Probability that a sample is degraded at all.
    pub p: f64,
    /// Upper bound of the contrast multiplier, `c ~ U(0, u)`.
    pub u: f64,
    /// Mean of the bias, `b ~ N(mu, sigma2)`.
    pub mu: f64,
    pub sigma2: f64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        DegradeParams {
            p: 0.3,
            u: 0.7,
            mu: 127.45,
            sigma2: 2440.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid degradation parameters: {0}")]
pub struct InvalidDegradeParams(String);

impl DegradeParams {
    pub fn validate(&self) -> Result<(), InvalidDegradeParams> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(InvalidDegradeParams(format!("p = {} outside [0,1]", self.p)));
        }
        if !(self.u > 0.0 && self.u < 1.0) {
            return Err(InvalidDegradeParams(format!("u = {} outside (0,1)", self.u)));
        }
        if !self.mu.is_finite() || !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(InvalidDegradeParams("mu must be finite and sigma2 positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Global,
    Region(Bbox),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub applied: bool,
    pub modality: Modality,
    pub c: f64,
    pub b: f64,
    pub scope: Scope,
    pub noise_sigma: f64,
}

impl DegradationSpec {
    pub fn none() -> Self {
        DegradationSpec {
            applied: false,
            modality: Modality::Rgb,
            c: 1.0,
            b: 0.0,
            scope: Scope::Global,
            noise_sigma: 0.0,
        }
    }
}

/// Draws the degradation decision and parameters without touching pixels.
pub fn draw_spec(params: &DegradeParams, rng: &mut impl RngCore) -> DegradationSpec {
    let gate: f64 = rng.random();
    if gate >= params.p {
        return DegradationSpec::none();
    }
    let modality = if rng.random_bool(0.5) { Modality::Rgb } else { Modality::Tir };
    let c = rng.random_range(0.0..params.u);
    let b = Normal::new(params.mu, params.sigma2.sqrt())
        .expect("validated sigma2")
        .sample(rng);
    DegradationSpec {
        applied: true,
        modality,
        c,
        b,
        scope: Scope::Global,
        noise_sigma: 0.0,
    }
}

/// `x <- clamp(b + c * x, 0, 255)` over the whole plane of `modality`.
pub fn apply_affine(pair: &mut ModalityPair, modality: Modality, c: f64, b: f64) {
    for x in plane_mut(pair, modality).data_mut() {
        *x = (b + c * *x).clamp(0.0, 255.0);
    }
}

pub fn pseudo_degrade(pair: &ModalityPair, params: &DegradeParams, rng: &mut impl RngCore) -> (ModalityPair, DegradationSpec) {
    let spec = draw_spec(params, rng);
    let mut out = pair.clone();
    if spec.applied {
        apply_affine(&mut out, spec.modality, spec.c, spec.b);
    }
    (out, spec)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConditionMode {
    Balanced,
    Contrast(Modality, f64),
    Drop(Modality),
    Noise(Modality, f64),
    Region(Modality, f64, u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestCondition {
    pub name: String,
    pub mode: ConditionMode,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid test condition `{input}`: {reason} (expected {CONDITION_GRAMMAR})")]
pub struct ConditionError {
    pub input: String,
    pub reason: String,
}

impl FromStr for TestCondition {
    type Err = ConditionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let fail = |reason: &str| ConditionError {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        let parts: Vec<&str> = s.split(':').collect();
        let modality = |i: usize| match parts.get(i).copied() {
            Some("rgb") => Ok(Modality::Rgb),
            Some("tir") => Ok(Modality::Tir),
            Some(other) => Err(fail(&format!("unknown modality `{other}`"))),
            None => Err(fail("missing modality")),
        };
        let real = |i: usize, what: &str| -> Result<f64, ConditionError> {
            let v = parts
                .get(i)
                .ok_or_else(|| fail(&format!("missing {what}")))?
                .parse::<f64>()
                .map_err(|_| fail(&format!("{what} is not a number")))?;
            if !v.is_finite() {
                return Err(fail(&format!("{what} must be finite")));
            }
            Ok(v)
        };
        let factor = |i: usize| {
            let f = real(i, "factor")?;
            if (0.0..=1.0).contains(&f) {
                Ok(f)
            } else {
                Err(fail("factor outside [0,1]"))
            }
        };
        let arity = |n: usize| {
            if parts.len() == n {
                Ok(())
            } else {
                Err(fail(&format!("expected {n} fields")))
            }
        };
        let mode = match parts[0] {
            "balanced" => {
                arity(1)?;
                ConditionMode::Balanced
            }
            "contrast" => {
                arity(3)?;
                ConditionMode::Contrast(modality(1)?, factor(2)?)
            }
            "drop" => {
                arity(2)?;
                ConditionMode::Drop(modality(1)?)
            }
            "noise" => {
                arity(3)?;
                let sigma = real(2, "sigma")?;
                if sigma < 0.0 {
                    return Err(fail("sigma must be non-negative"));
                }
                ConditionMode::Noise(modality(1)?, sigma)
            }
            "region" => {
                arity(4)?;
                let seed = parts[3].parse::<u64>().map_err(|_| fail("seed is not an unsigned integer"))?;
                ConditionMode::Region(modality(1)?, factor(2)?, seed)
            }
            other => return Err(fail(&format!("unknown mode `{other}`"))),
        };
        Ok(TestCondition {
            name: s.to_string(),
            mode,
        })
    }
}

impl fmt::Display for TestCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

pub fn parse_conditions<S: AsRef<str>>(items: &[S]) -> Result<Vec<TestCondition>, ConditionError> {
    items.iter().map(|s| s.as_ref().parse()).collect()
}

fn contrast_value(x: f64, f: f64) -> f64 {
    MID_GRAY * (1.0 - f) + f * x
}

/// Rectangle covering U(0.25, 0.6) of the image area with aspect ratio
/// (width / height) drawn from U(0.5, 2).
pub fn sample_region(h: usize, w: usize, rng: &mut impl RngCore) -> Bbox {
    let (hf, wf) = (h as f64, w as f64);
    let area = rng.random_range(0.25..0.6) * hf * wf;
    let aspect = rng.random_range(0.5..2.0);
    let mut rw = (area * aspect).sqrt();
    let mut rh = (area / aspect).sqrt();
    if rw > wf {
        rw = wf;
        rh = area / wf;
    }
    if rh > hf {
        rh = hf;
        rw = area / hf;
    }
    let x1 = rng.random_range(0.0..=(wf - rw));
    let y1 = rng.random_range(0.0..=(hf - rh));
    Bbox::new(x1, y1, x1 + rw, y1 + rh)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Region for `pair` under `seed`; depends only on the seed and the sample id.
pub fn region_for(pair: &ModalityPair, seed: u64) -> Bbox {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(&pair.id));
    sample_region(pair.height(), pair.width(), &mut rng)
}

/// Applies a test condition. `rng` drives additive noise only.
pub fn apply_condition(pair: &ModalityPair, cond: &TestCondition, rng: &mut impl RngCore) -> ModalityPair {
    let mut out = pair.clone();
    match cond.mode {
        ConditionMode::Balanced => {}
        ConditionMode::Contrast(m, f) => {
            for x in plane_mut(&mut out, m).data_mut() {
                *x = contrast_value(*x, f);
            }
        }
        ConditionMode::Drop(m) => {
            for x in plane_mut(&mut out, m).data_mut() {
                *x = contrast_value(*x, 0.0);
            }
        }
        ConditionMode::Noise(m, sigma) => {
            if sigma > 0.0 {
                let n = Normal::new(0.0, sigma).expect("validated sigma");
                for x in plane_mut(&mut out, m).data_mut() {
                    *x = (*x + n.sample(rng)).clamp(0.0, 255.0);
                }
            }
        }
        ConditionMode::Region(m, f, seed) => {
            let r = region_for(pair, seed);
            let plane = plane_mut(&mut out, m);
            let (h, w) = (plane.h(), plane.w());
            for y in 0..h {
                for x in 0..w {
                    if r.contains_point(x as f64 + 0.5, y as f64 + 0.5) {
                        let v = plane.at(0, 0, y, x);
                        plane.set(0, 0, y, x, contrast_value(v, f));
                    }
                }
            }
        }
    }
    out
}
