//! Base-and-auxiliary training.
//!
//! The auxiliary detector is trained by SGD on possibly degraded batches.
//! The base detector never receives gradients: it sees the original batch,
//! provides the consistency target, and follows the auxiliary detector by
//! an exponential moving average after every optimizer step.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment_losses::{assign, head_geometry, total_loss, ConsistBranches, ConsistReduction, LossBreakdown, LossWeights};
use crate::degrade::{pseudo_degrade, DegradeParams};
use crate::detector::{forward, forward_graph, head_output, save_params, Arch, DetectorError, DetectorParams, ParamFileError};
use crate::diffengine::{clip_grad_norm, Graph, NonFiniteGrad, ShapeError, Sgd};
use crate::synthdata::{batch_indices, normalize_for_net, ModalityPair};

pub const METRICS_HEADER: &str = "step,l_obj,l_cls,l_reg,l_consist,l_total,degraded_frac,seconds";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {term} at step {step}")]
    NonFiniteLoss { step: usize, term: &'static str },
    #[error("step {step}: {source}")]
    NonFiniteGrad {
        step: usize,
        #[source]
        source: NonFiniteGrad,
    },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    ParamFile(#[from] ParamFileError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    /// Whether the run stopped on a numeric problem rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGrad { .. } => true,
            TrainError::Shape(e) => e.is_numeric(),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// EMA replacement rate.
    pub alpha: f64,
    /// Train with a base detector (EMA of the auxiliary one).
    pub aux: bool,
    /// Consistency term between base and auxiliary heads (aux mode only).
    pub consistency: bool,
    pub pseudo_degrade: bool,
    pub weights: LossWeights,
    pub consist_branches: ConsistBranches,
    pub consist_reduction: ConsistReduction,
    /// Global L2 gradient-norm ceiling; 0 disables clipping.
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 2,
            alpha: 1e-3,
            aux: true,
            consistency: true,
            pseudo_degrade: true,
            weights: LossWeights::default(),
            consist_branches: ConsistBranches::default(),
            consist_reduction: ConsistReduction::Mean,
            max_grad_norm: 10.0,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0,1)", self.momentum));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0,1]", self.alpha));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return bad("max_grad_norm must be finite and non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let w = &self.weights;
        if [w.obj, w.cls, w.reg, w.consist].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }

    fn uses_consistency(&self) -> bool {
        self.aux && self.consistency
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub losses: LossBreakdown,
    /// Fraction of this step's samples that were degraded.
    pub degraded_frac: f64,
    /// Degraded fraction over all samples seen so far.
    pub applied_rate: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub base: DetectorParams,
    pub aux: DetectorParams,
    pub optimizer: Sgd,
    pub config: TrainConfig,
    pub degrade: DegradeParams,
    pub step: usize,
    degrade_rng: ChaCha8Rng,
    seen: usize,
    degraded: usize,
}

/// `base <- alpha * aux + (1 - alpha) * base` for every parameter.
pub fn ema_update(base: &mut DetectorParams, aux: &DetectorParams, alpha: f64) {
    for (b, a) in base.set.iter_mut().zip(aux.set.iter()) {
        debug_assert_eq!(b.id, a.id);
        for (bv, &av) in b.value.data_mut().iter_mut().zip(a.value.data()) {
            *bv = alpha * av + (1.0 - alpha) * *bv;
        }
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 finaliser over (seed, epoch)
    let mut z = seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl TrainState {
    /// Auxiliary detector from He initialisation; base is an exact copy.
    pub fn init(arch: &Arch, config: &TrainConfig, degrade: &DegradeParams) -> Result<Self, TrainError> {
        config.validate()?;
        degrade.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let aux = DetectorParams::init(arch, &mut init_rng)?;
        let mut degrade_rng = ChaCha8Rng::seed_from_u64(config.seed);
        degrade_rng.set_stream(1);
        Ok(TrainState {
            base: aux.clone(),
            aux,
            optimizer: Sgd::new(config.lr, config.momentum, config.weight_decay),
            config: config.clone(),
            degrade: degrade.clone(),
            step: 0,
            degrade_rng,
            seen: 0,
            degraded: 0,
        })
    }

    /// The model delivered by this run: base in aux mode, otherwise the
    /// sole supervised detector.
    pub fn deliverable(&self) -> &DetectorParams {
        if self.config.aux {
            &self.base
        } else {
            &self.aux
        }
    }

    pub fn train_step(&mut self, batch: &[&ModalityPair]) -> Result<StepMetrics, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let start = Instant::now();
        let cfg = &self.config;
        let step = self.step;

        let mut n_degraded = 0;
        let degraded: Vec<ModalityPair> = if cfg.pseudo_degrade {
            batch
                .iter()
                .map(|p| {
                    let (d, spec) = pseudo_degrade(p, &self.degrade, &mut self.degrade_rng);
                    n_degraded += usize::from(spec.applied);
                    d
                })
                .collect()
        } else {
            batch.iter().map(|p| (*p).clone()).collect()
        };
        let degraded_refs: Vec<&ModalityPair> = degraded.iter().collect();

        let base_head = if cfg.uses_consistency() {
            let (r, t) = normalize_for_net(batch);
            Some(forward(&self.base, &r, &t)?.0)
        } else {
            None
        };

        let (r, t) = normalize_for_net(&degraded_refs);
        let mut g = Graph::new();
        let rv = g.input(r);
        let tv = g.input(t);
        let fv = forward_graph(&self.aux, &mut g, rv, tv)?;
        let geometry = head_geometry(&head_output(&g, &fv));
        let anns: Vec<&[_]> = batch.iter().map(|p| p.annotations.as_slice()).collect();
        let targets = assign(&anns, &geometry, self.aux.arch.num_classes);
        let lv = total_loss(
            &mut g,
            &fv.levels,
            &targets,
            base_head.as_ref().map(|h| (h, cfg.consist_branches, cfg.consist_reduction)),
            &cfg.weights,
        )?;
        let losses = lv.breakdown(&g);
        if let Some(term) = losses.non_finite_term() {
            return Err(TrainError::NonFiniteLoss { step, term });
        }
        g.backward(lv.total)?;
        self.aux.set.zero_grads();
        g.accumulate_param_grads(&mut self.aux.set);
        drop(g);
        if cfg.max_grad_norm > 0.0 {
            clip_grad_norm(&mut self.aux.set, cfg.max_grad_norm);
        }
        self.optimizer
            .step(&mut self.aux.set)
            .map_err(|source| TrainError::NonFiniteGrad { step, source })?;
        if cfg.aux {
            ema_update(&mut self.base, &self.aux, cfg.alpha);
        }

        self.step += 1;
        self.seen += batch.len();
        self.degraded += n_degraded;
        Ok(StepMetrics {
            step,
            losses,
            degraded_frac: n_degraded as f64 / batch.len() as f64,
            applied_rate: self.degraded as f64 / self.seen as f64,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<StepMetrics>,
}

/// Runs `epochs x ceil(len / batch_size)` steps. `on_step` sees every
/// step's metrics as they are produced.
pub fn train(
    arch: &Arch,
    config: &TrainConfig,
    degrade: &DegradeParams,
    data: &[ModalityPair],
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut state = TrainState::init(arch, config, degrade)?;
    let mut log = Vec::new();
    for epoch in 0..config.epochs {
        for idx in batch_indices(data.len(), config.batch_size, Some(epoch_seed(config.seed, epoch))) {
            let batch: Vec<&ModalityPair> = idx.iter().map(|&i| &data[i]).collect();
            let m = state.train_step(&batch)?;
            on_step(&m);
            log.push(m);
        }
    }
    Ok(TrainOutcome { state, log })
}

pub fn metrics_csv(log: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in log {
        let l = &m.losses;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.6}",
            m.step, l.l_obj, l.l_cls, l.l_reg, l.l_consist, l.l_total, m.degraded_frac, m.seconds
        );
    }
    s
}

pub const BASE_CHECKPOINT: &str = "model.base";
pub const AUX_CHECKPOINT: &str = "model.aux";
pub const METRICS_FILE: &str = "metrics.csv";

impl TrainOutcome {
    /// Writes `model.aux`, `model.base` (aux mode only) and `metrics.csv`.
    pub fn persist(&self, dir: &Path) -> Result<(), TrainError> {
        let io = |e: std::io::Error| TrainError::Io {
            path: dir.display().to_string(),
            source: e,
        };
        fs::create_dir_all(dir).map_err(io)?;
        save_params(&self.state.aux, &dir.join(AUX_CHECKPOINT))?;
        if self.state.config.aux {
            save_params(&self.state.base, &dir.join(BASE_CHECKPOINT))?;
        }
        fs::write(dir.join(METRICS_FILE), metrics_csv(&self.log)).map_err(io)?;
        Ok(())
    }

    /// Path of the deliverable checkpoint inside a persisted run directory.
    pub fn deliverable_name(config: &TrainConfig) -> &'static str {
        if config.aux {
            BASE_CHECKPOINT
        } else {
            AUX_CHECKPOINT
        }
    }
}
