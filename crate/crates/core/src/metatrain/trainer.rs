use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::losses::{
    add_scaled, backtracking_loss, cons_loss, drift, edit_loss, edit_loss_grad, kl_locality_grad,
    ConsVariant, LayerGrads, LossReport,
};
use super::{LogRecord, Phase, PhaseTimes, TrainerConfig, TrainerMode};
use crate::editengine::{apply_delta, build_step, capture_traces, Editors, StepRecord, WeightDelta};
use crate::error::{Error, Result};
use crate::factsynth::EditSample;
use crate::hypernet::{
    build_single, build_stepset, HyperConfig, HyperOptimizer, HyperParams, Hypernetwork, HypernetworkStepSet,
    LayerSpec,
};
use crate::numcore::{Matrix, RngState, SeededRng};
use crate::toylm::{Pair, ToyModel};

/// The hypernetworks a trainer optimizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditorSet {
    Shared(Hypernetwork),
    PerStep(HypernetworkStepSet),
}

impl EditorSet {
    pub fn build(config: &TrainerConfig, layers: &[LayerSpec]) -> Result<Self> {
        let hc = HyperConfig {
            rank: config.rank,
            n_blocks: config.n_blocks,
            init_lr: config.inner_lr,
            init_lambda: config.init_lambda,
            seed: config.seed,
        };
        if config.mode.step_specific() {
            Ok(EditorSet::PerStep(build_stepset(config.steps, &hc, layers, config.rank_decay)?))
        } else {
            Ok(EditorSet::Shared(build_single(&hc, layers)?))
        }
    }

    pub fn editors(&self) -> Editors<'_> {
        match self {
            EditorSet::Shared(f) => Editors::Shared(f),
            EditorSet::PerStep(set) => Editors::PerStep(set),
        }
    }

    /// Hypernetwork used at step `s` (0-based).
    pub fn net(&self, s: usize) -> Result<&Hypernetwork> {
        self.editors().at(s)
    }

    /// Position of step `s`'s parameters in the flat parameter list.
    fn slot(&self, s: usize) -> (usize, usize) {
        match self {
            EditorSet::Shared(f) => (0, f.params().len()),
            EditorSet::PerStep(set) => {
                let offset = set.steps[..s].iter().map(|f| f.params().len()).sum();
                (offset, set.steps[s].params().len())
            }
        }
    }
}

impl HyperParams for EditorSet {
    fn params(&self) -> Vec<&Matrix> {
        match self {
            EditorSet::Shared(f) => f.params(),
            EditorSet::PerStep(set) => HyperParams::params(set),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            EditorSet::Shared(f) => f.params_mut(),
            EditorSet::PerStep(set) => HyperParams::params_mut(set),
        }
    }
}

/// Timings of one training iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub phases: PhaseTimes,
    pub wall_secs: f64,
    pub updates_applied: usize,
    pub updates_skipped: usize,
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub config: TrainerConfig,
    pub editors: EditorSet,
    pub optimizer: HyperOptimizer,
    pub rng: RngState,
    pub iteration: usize,
    pub log: Vec<LogRecord>,
}

struct Clock {
    start: Instant,
    times: PhaseTimes,
}

impl Clock {
    fn new() -> Self {
        Clock {
            start: Instant::now(),
            times: PhaseTimes::default(),
        }
    }

    fn time<T>(&mut self, phase: Phase, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f();
        self.times.add(phase, t.elapsed().as_secs_f64());
        out
    }

    fn wall_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }
}

fn record(iteration: usize, edit_index: usize, step: usize, r: &LossReport, wall_ms: f64) -> LogRecord {
    LogRecord {
        iteration,
        edit_index,
        step,
        l_e: r.edit_loss,
        l_loc: r.locality_loss,
        l_cons: r.cons_loss,
        l_back: r.backtracking_loss,
        total: r.total,
        wall_ms,
    }
}

fn zero_grads(shapes: &[(usize, usize)]) -> Vec<Matrix> {
    shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect()
}

fn sum_deltas(deltas: &[WeightDelta]) -> Result<LayerGrads> {
    let mut out = LayerGrads::new();
    for d in deltas {
        add_scaled(&mut out, 1.0, &d.layers)?;
    }
    Ok(out)
}

struct BatchPairs<'a> {
    edit: Vec<&'a Pair>,
    equivalents: Vec<&'a Pair>,
    unrelated: Vec<&'a Pair>,
}

impl<'a> BatchPairs<'a> {
    fn of(samples: &'a [EditSample]) -> Self {
        BatchPairs {
            edit: samples.iter().map(|s| &s.edit).collect(),
            equivalents: samples.iter().flat_map(|s| s.equivalents.iter()).collect(),
            unrelated: samples.iter().flat_map(|s| s.unrelated.iter()).collect(),
        }
    }
}

/// One edit of a sequential trajectory: `S` steps from the model's current
/// weights, then the meta-loss and its pulled-back hypernetwork gradient
/// (laid out like `editors.params()`).
struct SequentialEdit {
    report: LossReport,
    grads: Vec<Matrix>,
    logs: Vec<(usize, LossReport)>,
}

fn sequential_edit(
    config: &TrainerConfig,
    base: &ToyModel,
    editors: &EditorSet,
    model: &mut ToyModel,
    batch: &[EditSample],
    history: &[Vec<EditSample>],
    edit_index: usize,
    clock: &mut Clock,
) -> Result<SequentialEdit> {
    let pairs = BatchPairs::of(batch);
    let coeffs = config.coefficients();
    let rledit = config.mode == TrainerMode::BaselineRledit;
    let discount = if rledit { config.gamma.powi(edit_index as i32 + 1) } else { 1.0 };
    let mut records: Vec<StepRecord> = Vec::with_capacity(config.steps);
    let mut deltas: Vec<WeightDelta> = Vec::with_capacity(config.steps);
    let mut logs = Vec::with_capacity(config.steps);
    for s in 0..config.steps {
        let cap = clock.time(Phase::CacheGrad, || capture_traces(model, &pairs.edit))?;
        let rec = clock.time(Phase::ComputeDelta, || {
            let rec = build_step(cap, editors.net(s)?, config.aggregation, s + 1)?;
            apply_delta(model, &rec.delta)?;
            Ok(rec)
        })?;
        deltas.push(rec.delta.clone());
        records.push(rec);
        if s + 1 < config.steps {
            let report = clock.time(Phase::EditLossBp, || {
                let l_e = edit_loss(model, &pairs.equivalents)?;
                let cons = if config.mode.uses_cons() {
                    Some(match config.cons_variant {
                        ConsVariant::TotalDrift => drift(model, base)?.0,
                        ConsVariant::PerStepSum => cons_loss(ConsVariant::PerStepSum, &deltas, &LayerGrads::new()),
                    })
                } else {
                    None
                };
                Ok(LossReport::combine(coeffs, l_e, None, cons, None, discount))
            })?;
            logs.push((s + 1, report));
        }
    }

    let (l_e, g_e) = clock.time(Phase::EditLossBp, || edit_loss_grad(model, &pairs.equivalents))?;
    let mut shared = g_e;
    let mut per_step: Vec<Option<LayerGrads>> = vec![None; config.steps];
    let report = if config.mode.uses_cons() {
        let cons = clock.time(Phase::EditLossBp, || match config.cons_variant {
            ConsVariant::TotalDrift => {
                let (c, d) = drift(model, base)?;
                add_scaled(&mut shared, 2.0 * config.eta, &d)?;
                Ok(c)
            }
            ConsVariant::PerStepSum => {
                for (slot, d) in per_step.iter_mut().zip(&deltas) {
                    let mut g = LayerGrads::new();
                    add_scaled(&mut g, 2.0 * config.eta, &d.layers)?;
                    *slot = Some(g);
                }
                Ok(cons_loss(ConsVariant::PerStepSum, &deltas, &LayerGrads::new()))
            }
        })?;
        LossReport::combine(coeffs, l_e, None, Some(cons), None, discount)
    } else {
        let (l_loc, g_loc) = clock.time(Phase::LocLossBp, || kl_locality_grad(base, model, &pairs.unrelated, true))?;
        add_scaled(&mut shared, config.lambda_loc, &g_loc)?;
        let mut back = None;
        let mut cons = None;
        if rledit {
            let window = &history[history.len().saturating_sub(config.q)..];
            let mut values = Vec::with_capacity(window.len());
            for (k, past) in window.iter().enumerate() {
                let weight = config.mu.powi((window.len() - k) as i32);
                let past_pairs = BatchPairs::of(past);
                let (le, ge) = clock.time(Phase::EditLossBp, || edit_loss_grad(model, &past_pairs.equivalents))?;
                let (ll, gl) =
                    clock.time(Phase::LocLossBp, || kl_locality_grad(base, model, &past_pairs.unrelated, true))?;
                add_scaled(&mut shared, weight, &ge)?;
                add_scaled(&mut shared, weight * config.lambda_loc, &gl)?;
                values.push((le, ll));
            }
            back = Some(backtracking_loss(&values, config.mu, config.lambda_loc, config.q));
            let total = sum_deltas(&deltas)?;
            cons = Some(total.values().map(Matrix::squared_norm).sum());
            add_scaled(&mut shared, 2.0 * config.eta, &total)?;
        }
        LossReport::combine(coeffs, l_e, Some(l_loc), cons, back, discount)
    };

    let shapes = editors.shapes();
    let grads = clock.time(Phase::UpdateF, || {
        let mut grads = zero_grads(&shapes);
        for (s, rec) in records.iter().enumerate() {
            let mut g = shared.clone();
            if let Some(extra) = &per_step[s] {
                add_scaled(&mut g, 1.0, extra)?;
            }
            if discount != 1.0 {
                g.values_mut().for_each(|m| *m = m.scale(discount));
            }
            let hyper = rec.pull_back(&g)?;
            let (offset, _) = editors.slot(s);
            for (k, h) in hyper.iter().enumerate() {
                grads[offset + k].add_assign(h)?;
            }
        }
        Ok(grads)
    })?;
    logs.push((config.steps, report.clone()));
    Ok(SequentialEdit { report, grads, logs })
}

/// Meta-loss `L_e + η·L_cons` of editing `batch` from `base`, and its
/// gradient with respect to the editor parameters (first order in the traces).
pub fn smedit_meta_gradient(
    config: &TrainerConfig,
    base: &ToyModel,
    editors: &EditorSet,
    batch: &[EditSample],
) -> Result<(LossReport, Vec<Matrix>)> {
    if !config.mode.uses_cons() {
        return Err(Error::config("meta-gradient helper expects an smedit mode"));
    }
    let mut model = base.clone();
    let out = sequential_edit(config, base, editors, &mut model, batch, &[], 0, &mut Clock::new())?;
    Ok((out.report, out.grads))
}

pub struct Trainer {
    config: TrainerConfig,
    base: ToyModel,
    train: Vec<EditSample>,
    editors: EditorSet,
    optimizer: HyperOptimizer,
    rng: SeededRng,
    iteration: usize,
    log: Vec<LogRecord>,
}

const SAMPLING_STREAM: u64 = 0x7a11;

impl Trainer {
    pub fn new(config: TrainerConfig, base: &ToyModel, train: &[EditSample]) -> Result<Self> {
        config.validate()?;
        let editors = EditorSet::build(&config, &LayerSpec::for_model(base))?;
        let optimizer = HyperOptimizer::new(&editors, config.meta_lr, config.max_grad_norm);
        let rng = SeededRng::derive(config.seed, SAMPLING_STREAM);
        Trainer::assemble(config, base, train, editors, optimizer, rng, 0, Vec::new())
    }

    pub fn from_state(state: TrainerState, base: &ToyModel, train: &[EditSample]) -> Result<Self> {
        state.config.validate()?;
        let expected = EditorSet::build(&state.config, &LayerSpec::for_model(base))?;
        if expected.shapes() != state.editors.shapes() {
            return Err(Error::contract("saved hypernetworks do not fit this model and config"));
        }
        let rng = SeededRng::from_state(&state.rng)?;
        Trainer::assemble(
            state.config,
            base,
            train,
            state.editors,
            state.optimizer,
            rng,
            state.iteration,
            state.log,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainerConfig,
        base: &ToyModel,
        train: &[EditSample],
        editors: EditorSet,
        optimizer: HyperOptimizer,
        rng: SeededRng,
        iteration: usize,
        log: Vec<LogRecord>,
    ) -> Result<Self> {
        if train.len() < config.samples_per_iteration() {
            return Err(Error::Capacity(format!(
                "an iteration needs {} training samples, only {} available",
                config.samples_per_iteration(),
                train.len()
            )));
        }
        Ok(Trainer {
            config,
            base: base.clone(),
            train: train.to_vec(),
            editors,
            optimizer,
            rng,
            iteration,
            log,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn editors(&self) -> &EditorSet {
        &self.editors
    }

    pub fn into_editors(self) -> EditorSet {
        self.editors
    }

    pub fn base(&self) -> &ToyModel {
        &self.base
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn updates(&self) -> u64 {
        self.optimizer.updates()
    }

    pub fn skipped_updates(&self) -> u64 {
        self.optimizer.skipped
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            config: self.config.clone(),
            editors: self.editors.clone(),
            optimizer: self.optimizer.clone(),
            rng: self.rng.state(),
            iteration: self.iteration,
            log: self.log.clone(),
        }
    }

    /// Runs iterations until `config.iterations` have been completed.
    pub fn train(&mut self) -> Result<()> {
        while self.iteration < self.config.iterations {
            self.iterate()?;
        }
        Ok(())
    }

    /// Runs `n` more iterations regardless of the configured budget.
    pub fn run(&mut self, n: usize) -> Result<Vec<IterationStats>> {
        (0..n).map(|_| self.iterate()).collect()
    }

    pub fn iterate(&mut self) -> Result<IterationStats> {
        let mut clock = Clock::new();
        let (applied, skipped) = if self.config.mode.is_sequential() {
            self.iterate_sequential(&mut clock)?
        } else {
            self.iterate_batch(&mut clock)?
        };
        let stats = IterationStats {
            iteration: self.iteration,
            phases: clock.times,
            wall_secs: clock.start.elapsed().as_secs_f64(),
            updates_applied: applied,
            updates_skipped: skipped,
        };
        self.iteration += 1;
        Ok(stats)
    }

    fn draw(&mut self, count: usize) -> Vec<EditSample> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        for i in 0..count {
            let j = i + self.rng.below(idx.len() - i);
            idx.swap(i, j);
        }
        idx[..count].iter().map(|&i| self.train[i].clone()).collect()
    }

    /// Optimizer step on the full parameter list. Non-finite gradients are skipped.
    fn update(&mut self, grads: Vec<Matrix>) -> Result<bool> {
        match self.optimizer.apply(&mut self.editors, grads) {
            Ok(_) => Ok(true),
            Err(Error::Numeric(msg)) => {
                log::warn!("iteration {}: {msg}", self.iteration);
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }

    fn iterate_batch(&mut self, clock: &mut Clock) -> Result<(usize, usize)> {
        let config = self.config.clone();
        let coeffs = config.coefficients();
        let samples = self.draw(config.batch_size);
        let pairs = BatchPairs::of(&samples);
        let mut model = self.base.clone();
        let mut deltas: Vec<WeightDelta> = Vec::with_capacity(config.steps);
        let (mut applied, mut skipped) = (0, 0);
        for s in 0..config.steps {
            let cap = clock.time(Phase::CacheGrad, || capture_traces(&model, &pairs.edit))?;
            let editors = &self.editors;
            let rec = clock.time(Phase::ComputeDelta, || {
                let rec = build_step(cap, editors.net(s)?, config.aggregation, s + 1)?;
                apply_delta(&mut model, &rec.delta)?;
                Ok(rec)
            })?;
            deltas.push(rec.delta.clone());
            let (l_e, mut g) = clock.time(Phase::EditLossBp, || edit_loss_grad(&model, &pairs.equivalents))?;
            let mut l_cons = None;
            if config.mode.uses_cons() {
                let base = &self.base;
                l_cons = Some(clock.time(Phase::EditLossBp, || match config.cons_variant {
                    ConsVariant::TotalDrift => {
                        let (c, d) = drift(&model, base)?;
                        add_scaled(&mut g, 2.0 * config.eta, &d)?;
                        Ok(c)
                    }
                    ConsVariant::PerStepSum => {
                        add_scaled(&mut g, 2.0 * config.eta, &rec.delta.layers)?;
                        Ok(cons_loss(ConsVariant::PerStepSum, &deltas, &LayerGrads::new()))
                    }
                })?);
            }
            let mut l_loc = None;
            if config.mode.uses_kl() {
                let base = &self.base;
                let (l, gl) = clock.time(Phase::LocLossBp, || kl_locality_grad(base, &model, &pairs.unrelated, true))?;
                add_scaled(&mut g, config.lambda_loc, &gl)?;
                l_loc = Some(l);
            }
            let report = LossReport::combine(coeffs, l_e, l_loc, l_cons, None, 1.0);
            let t = Instant::now();
            let hyper = rec.pull_back(&g)?;
            let (offset, _) = self.editors.slot(s);
            let mut grads = zero_grads(&self.editors.shapes());
            for (k, h) in hyper.into_iter().enumerate() {
                grads[offset + k] = h;
            }
            if self.update(grads)? {
                applied += 1;
            } else {
                skipped += 1;
            }
            clock.times.add(Phase::UpdateF, t.elapsed().as_secs_f64());
            self.log.push(record(self.iteration, 0, s + 1, &report, clock.wall_ms()));
        }
        Ok((applied, skipped))
    }

    fn iterate_sequential(&mut self, clock: &mut Clock) -> Result<(usize, usize)> {
        let config = self.config.clone();
        let samples = self.draw(config.batch_size * config.n_edits);
        let batches: Vec<Vec<EditSample>> = samples.chunks(config.batch_size).map(<[_]>::to_vec).collect();
        let mut model = self.base.clone();
        let shapes = self.editors.shapes();
        let mut acc = zero_grads(&shapes);
        let mut history: Vec<Vec<EditSample>> = Vec::new();
        for (i, batch) in batches.iter().enumerate() {
            let out = sequential_edit(&config, &self.base, &self.editors, &mut model, batch, &history, i, clock)?;
            let t = Instant::now();
            for (a, g) in acc.iter_mut().zip(&out.grads) {
                a.add_assign(g)?;
            }
            clock.times.add(Phase::UpdateF, t.elapsed().as_secs_f64());
            for (step, report) in &out.logs {
                self.log.push(record(self.iteration, i, *step, report, clock.wall_ms()));
            }
            history.push(batch.clone());
        }
        let t = Instant::now();
        let ok = self.update(acc)?;
        clock.times.add(Phase::UpdateF, t.elapsed().as_secs_f64());
        Ok(if ok { (1, 0) } else { (0, 1) })
    }
}
