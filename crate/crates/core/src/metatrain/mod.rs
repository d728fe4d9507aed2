//! Meta-training of editing hypernetworks.
//!
//! Five trainer modes share one edit pipeline (capture traces, transform,
//! form a delta, apply it) and differ in how they score and when they
//! update the hypernetwork:
//!
//! | mode                | hypernetworks | scoring                              | update          |
//! |---------------------|---------------|--------------------------------------|-----------------|
//! | `smedit_sequential` | one per step  | `L_e + η·L_cons`                     | per trajectory  |
//! | `smedit_batch`      | shared        | `L_e + η·L_cons`                     | per step        |
//! | `baseline_kl`       | shared        | `L_e + λ_loc·L_loc`                  | per step        |
//! | `baseline_kl_mbps`  | shared        | as `baseline_kl`, two or more steps  | per step        |
//! | `baseline_rledit`   | shared        | discounted `L_meta + L_back + η‖Δ‖²` | per trajectory  |
//!
//! Meta-gradients are first order: traces are constants, and the meta-loss
//! gradient with respect to the weights is pulled back through each step's
//! delta construction to the hypernetwork parameters.

mod losses;
mod trainer;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::editengine::AggregationMode;
use crate::error::{Error, Result};

pub use losses::{
    add_scaled, backtracking_loss, cons_loss, drift, edit_loss, edit_loss_grad, kl_locality_grad, kl_locality_loss,
    mean_kl, rl_objective, weighted_edit_loss_grad, Coefficients, ConsVariant, LayerGrads, LossReport,
};
pub use trainer::{smedit_meta_gradient, EditorSet, IterationStats, Trainer, TrainerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerMode {
    SmeditSequential,
    SmeditBatch,
    BaselineKl,
    BaselineRledit,
    BaselineKlMbps,
}

impl TrainerMode {
    pub const ALL: [TrainerMode; 5] = [
        TrainerMode::SmeditSequential,
        TrainerMode::SmeditBatch,
        TrainerMode::BaselineKl,
        TrainerMode::BaselineRledit,
        TrainerMode::BaselineKlMbps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainerMode::SmeditSequential => "smedit_sequential",
            TrainerMode::SmeditBatch => "smedit_batch",
            TrainerMode::BaselineKl => "baseline_kl",
            TrainerMode::BaselineRledit => "baseline_rledit",
            TrainerMode::BaselineKlMbps => "baseline_kl_mbps",
        }
    }

    pub fn is_sequential(self) -> bool {
        matches!(self, TrainerMode::SmeditSequential | TrainerMode::BaselineRledit)
    }

    pub fn uses_kl(self) -> bool {
        matches!(
            self,
            TrainerMode::BaselineKl | TrainerMode::BaselineKlMbps | TrainerMode::BaselineRledit
        )
    }

    pub fn uses_cons(self) -> bool {
        matches!(self, TrainerMode::SmeditSequential | TrainerMode::SmeditBatch)
    }

    pub fn step_specific(self) -> bool {
        self == TrainerMode::SmeditSequential
    }
}

impl std::fmt::Display for TrainerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TrainerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainerMode::ALL
            .into_iter()
            .find(|m| m.name() == s || m.name().replace('_', "-") == s)
            .ok_or_else(|| Error::config(format!("unknown trainer mode '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub mode: TrainerMode,
    /// Backpropagation steps per edit.
    pub steps: usize,
    pub eta: f64,
    pub lambda_loc: f64,
    pub gamma: f64,
    pub mu: f64,
    pub q: usize,
    pub meta_lr: f64,
    pub inner_lr: f64,
    pub max_grad_norm: f64,
    pub rank: usize,
    pub n_blocks: usize,
    pub rank_decay: bool,
    pub init_lambda: f64,
    pub aggregation: AggregationMode,
    pub cons_variant: ConsVariant,
    /// Samples edited together.
    pub batch_size: usize,
    /// Edits per trajectory in the sequential modes.
    pub n_edits: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            mode: TrainerMode::SmeditBatch,
            steps: 2,
            eta: 0.5,
            lambda_loc: 0.6,
            gamma: 1.0,
            mu: 0.95,
            q: 10,
            meta_lr: 1e-3,
            inner_lr: 1e-2,
            max_grad_norm: 1.0,
            rank: 64,
            n_blocks: 4,
            rank_decay: true,
            init_lambda: 0.1,
            aggregation: AggregationMode::LeastSquares,
            cons_variant: ConsVariant::TotalDrift,
            batch_size: 10,
            n_edits: 5,
            iterations: 100,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.batch_size == 0 || self.n_edits == 0 {
            return Err(Error::config("batch size and edits per trajectory must be positive"));
        }
        if self.rank == 0 || self.n_blocks == 0 {
            return Err(Error::config("hypernetwork rank and block count must be positive"));
        }
        if self.mode.step_specific() && self.rank_decay && self.rank < self.steps {
            return Err(Error::config(format!(
                "rank {} cannot decay over {} steps",
                self.rank, self.steps
            )));
        }
        let positive = [
            ("meta_lr", self.meta_lr),
            ("inner_lr", self.inner_lr),
            ("max_grad_norm", self.max_grad_norm),
            ("init_lambda", self.init_lambda),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("{name} must be positive and finite, got {v}")));
        }
        let nonneg = [
            ("eta", self.eta),
            ("lambda_loc", self.lambda_loc),
            ("gamma", self.gamma),
            ("mu", self.mu),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config(format!("{name} must be non-negative and finite, got {v}")));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> Coefficients {
        Coefficients {
            lambda_loc: self.lambda_loc,
            eta: self.eta,
            gamma: self.gamma,
            mu: self.mu,
            q: self.q,
        }
    }

    /// Samples consumed by one training iteration.
    pub fn samples_per_iteration(&self) -> usize {
        if self.mode.is_sequential() {
            self.batch_size * self.n_edits
        } else {
            self.batch_size
        }
    }
}

/// The five timed stages of a training iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    CacheGrad,
    ComputeDelta,
    EditLossBp,
    LocLossBp,
    UpdateF,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::CacheGrad,
        Phase::ComputeDelta,
        Phase::EditLossBp,
        Phase::LocLossBp,
        Phase::UpdateF,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::CacheGrad => "cache_grad",
            Phase::ComputeDelta => "compute_delta",
            Phase::EditLossBp => "edit_loss_bp",
            Phase::LocLossBp => "loc_loss_bp",
            Phase::UpdateF => "update_f",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Seconds spent per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes(pub [f64; 5]);

impl PhaseTimes {
    pub fn get(&self, p: Phase) -> f64 {
        self.0[p.index()]
    }

    pub fn add(&mut self, p: Phase, secs: f64) {
        self.0[p.index()] += secs;
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub edit_index: usize,
    pub step: usize,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    #[serde(rename = "L_loc", default, skip_serializing_if = "Option::is_none")]
    pub l_loc: Option<f64>,
    #[serde(rename = "L_cons", default, skip_serializing_if = "Option::is_none")]
    pub l_cons: Option<f64>,
    #[serde(rename = "L_back", default, skip_serializing_if = "Option::is_none")]
    pub l_back: Option<f64>,
    pub total: f64,
    pub wall_ms: f64,
}

impl LogRecord {
    pub fn without_wall(&self) -> LogRecord {
        LogRecord {
            wall_ms: 0.0,
            ..self.clone()
        }
    }
}

pub fn write_log<W: Write>(mut out: W, records: &[LogRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_log(text: &str) -> Result<Vec<LogRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format("training log", format!("line {}: {e}", i + 1))))
        .collect()
}
