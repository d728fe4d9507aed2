//! Weight updates from transformed traces, and the multi-step editing loop.
//!
//! Two ways to turn pseudo traces `(δ̃, ũ)` of a layer into a weight change:
//!
//! * `rank1`: `Δ = −lr · Σ_k δ̃_k ũ_kᵀ`
//! * `least_squares`: with `d_k = −lr · δ̃_k (ũ_k · u_k)`, `D = [d_1 … d_b]` and
//!   `U = [u_1 … u_b]`, `Δ = D Uᵀ (U Uᵀ + λ I)⁻¹`, the minimizer of
//!   `‖Δ U − D‖² + λ‖Δ‖²`.
//!
//! Deltas descend the edit loss. A multi-step edit repeats
//! capture → transform → delta → apply `S` times, with the hypernetwork of
//! step `s` either step-specific or shared.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypernet::{BoundHyper, Hypernetwork, HypernetworkStepSet};
use crate::numcore::{LayerId, LayerTrace, Matrix, SpdFactor, Tape, Var};
use crate::toylm::{Pair, QueryBatch, ToyModel, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    Rank1,
    LeastSquares,
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank1" => Ok(AggregationMode::Rank1),
            "least_squares" | "least-squares" => Ok(AggregationMode::LeastSquares),
            other => Err(Error::config(format!("unknown aggregation mode '{other}'"))),
        }
    }
}

/// Per-layer weight change of one editing step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightDelta {
    pub step: usize,
    pub layers: BTreeMap<LayerId, Matrix>,
    pub frobenius_norms: BTreeMap<LayerId, f64>,
}

impl WeightDelta {
    pub fn new(step: usize, layers: BTreeMap<LayerId, Matrix>) -> Self {
        let frobenius_norms = layers.iter().map(|(k, m)| (k.clone(), m.frobenius_norm())).collect();
        WeightDelta {
            step,
            layers,
            frobenius_norms,
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers.values().map(Matrix::squared_norm).sum()
    }

    pub fn negated(&self) -> WeightDelta {
        WeightDelta::new(self.step, self.layers.iter().map(|(k, m)| (k.clone(), m.scale(-1.0))).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.values().all(Matrix::is_finite)
    }
}

/// Per-layer input to the least-squares aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationInput {
    /// `d′ × b`, one target column per sample.
    pub d: Matrix,
    /// `d × b`, one key column per sample.
    pub u: Matrix,
    pub lambda: f64,
}

/// `Δ = −lr · Σ_k δ̃_k ũ_kᵀ` from trace rows.
pub fn rank1_delta(delta_rows: &Matrix, u_rows: &Matrix, lr: f64) -> Result<Matrix> {
    if delta_rows.rows() != u_rows.rows() {
        return Err(Error::shape("pseudo δ and u must have one row per sample each"));
    }
    Ok(Matrix::matmul_t(delta_rows, true, u_rows, false)?.scale(-lr))
}

/// `Δ = D Uᵀ (U Uᵀ + λ I)⁻¹` via a Cholesky factorization.
pub fn ls_aggregate(agg: &AggregationInput) -> Result<Matrix> {
    if agg.d.cols() != agg.u.cols() {
        return Err(Error::shape(format!(
            "D has {} columns but U has {}",
            agg.d.cols(),
            agg.u.cols()
        )));
    }
    if !agg.d.is_finite() || !agg.u.is_finite() {
        return Err(Error::numeric("non-finite aggregation input"));
    }
    let gram = Matrix::matmul_t(&agg.u, false, &agg.u, true)?;
    let rhs = Matrix::matmul_t(&agg.d, false, &agg.u, true)?;
    SpdFactor::ridge(&gram, agg.lambda)?.solve_right(&rhs)
}

/// Adds each layer of `delta` to the model. Nothing is applied unless every
/// layer is editable.
pub fn apply_delta(model: &mut ToyModel, delta: &WeightDelta) -> Result<()> {
    if let Some(bad) = delta.layers.keys().find(|k| !model.editable().contains(k)) {
        return Err(Error::contract(format!("layer {bad} is not editable")));
    }
    for (id, d) in &delta.layers {
        let w = model
            .weight(id)
            .ok_or_else(|| Error::contract(format!("unknown layer {id}")))?;
        if w.shape() != d.shape() {
            return Err(Error::shape(format!("delta for {id} has the wrong shape")));
        }
    }
    for (id, d) in &delta.layers {
        model.add_to_layer(id, d)?;
    }
    Ok(())
}

/// Traces of the editable layers for the loss `Σ_pairs mean answer NLL`.
#[derive(Clone, Debug)]
pub struct CapturedTraces {
    pub loss: f64,
    pub layers: Vec<LayerTrace>,
}

pub fn capture_traces(model: &ToyModel, pairs: &[&Pair]) -> Result<CapturedTraces> {
    if pairs.is_empty() {
        return Err(Error::contract("cannot capture traces of an empty batch"));
    }
    let batch = QueryBatch::teacher_forced(pairs.iter().copied())?;
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, Trainable::Editable);
    let logits = model.forward_on_tape(&mut tape, &w, &batch)?;
    let loss = tape.cross_entropy(logits, batch.targets(), &batch.pair_weights(1.0))?;
    let grads = tape.backward(loss)?;
    let traces = tape.layer_traces(&grads);
    let layers = model
        .editable()
        .iter()
        .map(|id| {
            traces
                .iter()
                .find(|t| &t.layer_id == id)
                .cloned()
                .ok_or_else(|| Error::contract(format!("editable layer {id} is not on the forward path")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CapturedTraces {
        loss: tape.scalar(loss),
        layers,
    })
}

/// Records the delta of one layer on `tape`, differentiable in the hypernetwork.
pub fn delta_on_tape(
    tape: &mut Tape,
    hyper: &Hypernetwork,
    bound: &BoundHyper,
    trace: &LayerTrace,
    mode: AggregationMode,
) -> Result<Var> {
    let pseudo = hyper.transform_on_tape(tape, bound, trace)?;
    let lr = tape.exp(bound.log_lr(&trace.layer_id));
    let raw = match mode {
        AggregationMode::Rank1 => tape.matmul(pseudo.delta, pseudo.u, true, false)?,
        AggregationMode::LeastSquares => {
            let u = tape.constant(trace.u.clone());
            let prod = tape.mul(pseudo.u, u)?;
            let coef = tape.row_sum(prod);
            let d_rows = tape.mul_col(pseudo.delta, coef)?;
            let rhs = tape.matmul(d_rows, u, true, false)?;
            let gram = Matrix::matmul_t(&trace.u, true, &trace.u, false)?;
            tape.ridge_solve(rhs, bound.log_lambda(&trace.layer_id), &gram)?
        }
    };
    let scaled = tape.scale_by(raw, lr)?;
    Ok(tape.scale(scaled, -1.0))
}

/// One editing step, kept on its tape so meta-gradients can be pulled back
/// from the delta to the hypernetwork.
pub struct StepRecord {
    pub tape: Tape,
    pub bound: BoundHyper,
    pub delta_vars: Vec<(LayerId, Var)>,
    pub delta: WeightDelta,
    /// Trace-capture loss on the weights before this step.
    pub loss_before: f64,
}

impl StepRecord {
    /// Hypernetwork gradients given the meta-loss gradient for each layer's delta.
    pub fn pull_back(&self, delta_grads: &BTreeMap<LayerId, Matrix>) -> Result<Vec<Matrix>> {
        let seeds = self
            .delta_vars
            .iter()
            .filter_map(|(id, v)| delta_grads.get(id).map(|g| (*v, g.clone())))
            .collect::<Vec<_>>();
        let grads = self.tape.backward_seeded(&seeds)?;
        Ok(self.bound.collect(&grads))
    }
}

/// Captures traces on the current weights and forms the delta (without applying it).
pub fn edit_step(
    model: &ToyModel,
    pairs: &[&Pair],
    hyper: &Hypernetwork,
    mode: AggregationMode,
    step: usize,
) -> Result<StepRecord> {
    let captured = capture_traces(model, pairs)?;
    build_step(captured, hyper, mode, step)
}

pub fn build_step(captured: CapturedTraces, hyper: &Hypernetwork, mode: AggregationMode, step: usize) -> Result<StepRecord> {
    let mut tape = Tape::new();
    let bound = hyper.bind(&mut tape);
    let mut delta_vars = Vec::with_capacity(captured.layers.len());
    let mut layers = BTreeMap::new();
    for trace in &captured.layers {
        let v = delta_on_tape(&mut tape, hyper, &bound, trace, mode)?;
        layers.insert(trace.layer_id.clone(), tape.value(v).clone());
        delta_vars.push((trace.layer_id.clone(), v));
    }
    let delta = WeightDelta::new(step, layers);
    if !delta.is_finite() {
        let bad: Vec<_> = delta
            .frobenius_norms
            .iter()
            .filter(|(_, n)| !n.is_finite())
            .map(|(k, _)| k.to_string())
            .collect();
        return Err(Error::numeric(format!(
            "step {step} produced a non-finite delta for {}",
            bad.join(", ")
        )));
    }
    Ok(StepRecord {
        tape,
        bound,
        delta_vars,
        delta,
        loss_before: captured.loss,
    })
}

/// Which hypernetwork runs at each step.
#[derive(Clone, Copy, Debug)]
pub enum Editors<'a> {
    Shared(&'a Hypernetwork),
    PerStep(&'a HypernetworkStepSet),
}

impl<'a> Editors<'a> {
    /// Hypernetwork for step `s` (0-based).
    pub fn at(&self, s: usize) -> Result<&'a Hypernetwork> {
        match self {
            Editors::Shared(f) => Ok(f),
            Editors::PerStep(set) => set.steps.get(s).ok_or_else(|| {
                Error::contract(format!("step set has {} hypernetworks, step {} requested", set.len(), s + 1))
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MbpsOutcome {
    pub deltas: Vec<WeightDelta>,
    /// Edit-batch loss on `W^0 … W^S`.
    pub losses: Vec<f64>,
}

/// Applies `steps` successive edits in place. On failure the model is restored.
pub fn mbps_edit(
    model: &mut ToyModel,
    pairs: &[&Pair],
    editors: Editors<'_>,
    steps: usize,
    mode: AggregationMode,
) -> Result<MbpsOutcome> {
    if steps == 0 {
        return Err(Error::contract("an edit needs at least one step"));
    }
    for s in 0..steps {
        editors.at(s)?;
    }
    let start = model.snapshot("mbps-start");
    let run = |model: &mut ToyModel| -> Result<MbpsOutcome> {
        let mut deltas = Vec::with_capacity(steps);
        let mut losses = Vec::with_capacity(steps + 1);
        for s in 0..steps {
            let rec = edit_step(model, pairs, editors.at(s)?, mode, s + 1)?;
            losses.push(rec.loss_before);
            apply_delta(model, &rec.delta)?;
            deltas.push(rec.delta);
        }
        losses.push(batch_loss(model, pairs)?);
        if let Some(bad) = losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::numeric(format!("edit loss became non-finite at step {bad}")));
        }
        Ok(MbpsOutcome { deltas, losses })
    };
    match run(model) {
        Ok(out) => Ok(out),
        Err(e) => {
            model.restore(&start)?;
            Err(e)
        }
    }
}

/// `Σ_pairs mean answer NLL`, the loss traces are captured on.
pub fn batch_loss(model: &ToyModel, pairs: &[&Pair]) -> Result<f64> {
    let batch = QueryBatch::teacher_forced(pairs.iter().copied())?;
    let logits = model.logits(&batch)?;
    let logp = crate::numcore::log_softmax_rows(&logits);
    let w = batch.pair_weights(1.0);
    Ok(batch
        .targets()
        .iter()
        .enumerate()
        .map(|(i, &t)| -w[i] * logp.get(i, t))
        .sum())
}

/// CSV rows `layer_id,step,frobenius_norm`.
pub fn write_delta_csv<W: Write>(mut out: W, deltas: &[WeightDelta]) -> std::io::Result<()> {
    writeln!(out, "layer_id,step,frobenius_norm")?;
    for d in deltas {
        for (id, n) in &d.frobenius_norms {
            writeln!(out, "{id},{},{n:e}", d.step)?;
        }
    }
    Ok(())
}
