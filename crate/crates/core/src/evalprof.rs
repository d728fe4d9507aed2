//! Editing-quality metrics, the training-time profiler, and report files.
//!
//! Two metric styles are provided. `argmax_exact` counts a prompt as correct
//! when greedy decoding reproduces the target exactly. `prob_compare` counts
//! it as correct when the target is strictly more probable than a competing
//! answer, where the probability of an answer is the product of its
//! teacher-forced per-token softmax probabilities. Exact ties fail.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::editengine::{mbps_edit, AggregationMode, Editors};
use crate::error::{Error, Result};
use crate::factsynth::{batch_split, EditSample};
use crate::metatrain::{LogRecord, Phase, PhaseTimes, Trainer, TrainerMode};
use crate::numcore::log_softmax_rows;
use crate::toylm::{argmax_lowest, Pair, QueryBatch, ToyModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricStyle {
    ArgmaxExact,
    ProbCompare,
}

impl MetricStyle {
    pub const ALL: [MetricStyle; 2] = [MetricStyle::ArgmaxExact, MetricStyle::ProbCompare];

    pub fn name(self) -> &'static str {
        match self {
            MetricStyle::ArgmaxExact => "argmax_exact",
            MetricStyle::ProbCompare => "prob_compare",
        }
    }
}

impl std::str::FromStr for MetricStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricStyle::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown metric style '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub style: MetricStyle,
    pub n_evaluated: usize,
}

/// Raw hit counts behind an [`EditMetrics`]; tallies over disjoint sample
/// sets merge by addition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub efficacy: (usize, usize),
    pub generalization: (usize, usize),
    pub specificity: (usize, usize),
    pub samples: usize,
}

impl Tally {
    pub fn merge(&mut self, other: &Tally) {
        let add = |a: &mut (usize, usize), b: (usize, usize)| {
            a.0 += b.0;
            a.1 += b.1;
        };
        add(&mut self.efficacy, other.efficacy);
        add(&mut self.generalization, other.generalization);
        add(&mut self.specificity, other.specificity);
        self.samples += other.samples;
    }

    pub fn finish(&self, style: MetricStyle) -> Result<EditMetrics> {
        if self.samples == 0 {
            return Err(Error::contract("no samples were evaluated"));
        }
        let frac = |(hits, n): (usize, usize)| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
        Ok(EditMetrics {
            efficacy: frac(self.efficacy),
            generalization: frac(self.generalization),
            specificity: frac(self.specificity),
            style,
            n_evaluated: self.samples,
        })
    }
}

fn count(flags: &[bool]) -> (usize, usize) {
    (flags.iter().filter(|&&b| b).count(), flags.len())
}

/// Whether greedy decoding of each prompt reproduces its answer exactly.
pub fn exact_matches(model: &ToyModel, pairs: &[&Pair]) -> Result<Vec<bool>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let batch = QueryBatch::teacher_forced(pairs.iter().copied())?;
    let logits = model.logits(&batch)?;
    let mut ok = vec![true; pairs.len()];
    for (i, (&t, &o)) in batch.targets().iter().zip(batch.owners()).enumerate() {
        if argmax_lowest(logits.row(i)) != t {
            ok[o] = false;
        }
    }
    Ok(ok)
}

/// `log P(answer | prompt)` for each pair under teacher forcing.
pub fn sequence_log_probs(model: &ToyModel, pairs: &[&Pair]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let batch = QueryBatch::teacher_forced(pairs.iter().copied())?;
    let logp = log_softmax_rows(&model.logits(&batch)?);
    let mut out = vec![0.0; pairs.len()];
    for (i, (&t, &o)) in batch.targets().iter().zip(batch.owners()).enumerate() {
        out[o] += logp.get(i, t);
    }
    Ok(out)
}

/// `P(answer | prompt)`, the product of per-position answer probabilities.
pub fn sequence_probability(model: &ToyModel, pair: &Pair) -> Result<f64> {
    Ok(sequence_log_probs(model, &[pair])?[0].exp())
}

pub fn tally_argmax(model: &ToyModel, samples: &[EditSample]) -> Result<Tally> {
    let edits: Vec<&Pair> = samples.iter().map(|s| &s.edit).collect();
    let equivalents: Vec<&Pair> = samples.iter().flat_map(|s| &s.equivalents).collect();
    let unrelated: Vec<&Pair> = samples.iter().flat_map(|s| &s.unrelated).collect();
    Ok(Tally {
        efficacy: count(&exact_matches(model, &edits)?),
        generalization: count(&exact_matches(model, &equivalents)?),
        specificity: count(&exact_matches(model, &unrelated)?),
        samples: samples.len(),
    })
}

/// Strict `log P(target) > log P(rival)` per pair.
fn prefers(model: &ToyModel, targets: &[Pair], rivals: &[Pair]) -> Result<Vec<bool>> {
    let t: Vec<&Pair> = targets.iter().collect();
    let r: Vec<&Pair> = rivals.iter().collect();
    let lt = sequence_log_probs(model, &t)?;
    let lr = sequence_log_probs(model, &r)?;
    Ok(lt.iter().zip(&lr).map(|(a, b)| a > b).collect())
}

pub fn tally_prob_compare(model: &ToyModel, samples: &[EditSample]) -> Result<Tally> {
    let mut targets = [Vec::new(), Vec::new(), Vec::new()];
    let mut rivals = [Vec::new(), Vec::new(), Vec::new()];
    for s in samples {
        targets[0].push(s.edit.clone());
        rivals[0].push(s.old_pair());
        for e in &s.equivalents {
            targets[1].push(e.clone());
            rivals[1].push(Pair::new(e.prompt.clone(), s.old_answer.clone()));
        }
        for u in &s.unrelated {
            targets[2].push(u.clone());
            rivals[2].push(Pair::new(u.prompt.clone(), s.edit.answer.clone()));
        }
    }
    Ok(Tally {
        efficacy: count(&prefers(model, &targets[0], &rivals[0])?),
        generalization: count(&prefers(model, &targets[1], &rivals[1])?),
        specificity: count(&prefers(model, &targets[2], &rivals[2])?),
        samples: samples.len(),
    })
}

pub fn tally(model: &ToyModel, samples: &[EditSample], style: MetricStyle) -> Result<Tally> {
    match style {
        MetricStyle::ArgmaxExact => tally_argmax(model, samples),
        MetricStyle::ProbCompare => tally_prob_compare(model, samples),
    }
}

pub fn eval_argmax(model: &ToyModel, samples: &[EditSample]) -> Result<EditMetrics> {
    tally_argmax(model, samples)?.finish(MetricStyle::ArgmaxExact)
}

pub fn eval_prob_compare(model: &ToyModel, samples: &[EditSample]) -> Result<EditMetrics> {
    tally_prob_compare(model, samples)?.finish(MetricStyle::ProbCompare)
}

pub fn evaluate(model: &ToyModel, samples: &[EditSample], style: MetricStyle) -> Result<EditMetrics> {
    tally(model, samples, style)?.finish(style)
}

/// Fails when the unedited model does not already know the unrelated facts.
pub fn check_base_specificity(model: &ToyModel, samples: &[EditSample], floor: f64) -> Result<EditMetrics> {
    let m = eval_argmax(model, samples)?;
    if m.specificity < floor {
        return Err(Error::Precondition(format!(
            "unedited specificity {:.4} is below {floor}",
            m.specificity
        )));
    }
    Ok(m)
}

/// How held-out batches are applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditProtocol {
    /// Each batch edits a fresh copy of the base model and is scored there.
    Batch,
    /// Batches edit one model in turn; every sample is scored at the end.
    Sequential,
}

impl std::str::FromStr for EditProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(EditProtocol::Batch),
            "sequential" => Ok(EditProtocol::Sequential),
            other => Err(Error::config(format!("unknown edit protocol '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditEvaluation {
    pub argmax: EditMetrics,
    pub prob: EditMetrics,
    /// Edit-batch loss before and after every step, one row per batch.
    pub step_losses: Vec<Vec<f64>>,
    /// `‖W_final − W_0‖_F` of the last edited model.
    pub drift: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct EditPlan {
    pub batch_size: usize,
    pub steps: usize,
    pub aggregation: AggregationMode,
    pub protocol: EditProtocol,
}

/// Edits `samples` with trained hypernetworks and scores the result in both styles.
pub fn edit_and_evaluate(base: &ToyModel, editors: Editors<'_>, samples: &[EditSample], plan: &EditPlan) -> Result<EditEvaluation> {
    if samples.is_empty() {
        return Err(Error::contract("no samples to edit"));
    }
    let batches = batch_split(samples, plan.batch_size, samples.len().div_ceil(plan.batch_size))?;
    let mut argmax = Tally::default();
    let mut prob = Tally::default();
    let mut step_losses = Vec::with_capacity(batches.len());
    let mut model = base.clone();
    let origin = base.snapshot("origin");
    for batch in &batches {
        if plan.protocol == EditProtocol::Batch {
            model.restore(&origin)?;
        }
        let pairs: Vec<&Pair> = batch.iter().map(|s| &s.edit).collect();
        let out = mbps_edit(&mut model, &pairs, editors, plan.steps, plan.aggregation)?;
        step_losses.push(out.losses);
        if plan.protocol == EditProtocol::Batch {
            argmax.merge(&tally_argmax(&model, batch)?);
            prob.merge(&tally_prob_compare(&model, batch)?);
        }
    }
    if plan.protocol == EditProtocol::Sequential {
        argmax = tally_argmax(&model, samples)?;
        prob = tally_prob_compare(&model, samples)?;
    }
    let drift = model.snapshot("edited").squared_distance(&origin)?.sqrt();
    Ok(EditEvaluation {
        argmax: argmax.finish(MetricStyle::ArgmaxExact)?,
        prob: prob.finish(MetricStyle::ProbCompare)?,
        step_losses,
        drift,
    })
}

/// Mean seconds per training iteration, split by phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingProfile {
    pub mode: TrainerMode,
    pub means: PhaseTimes,
    pub mean_wall: f64,
    pub iterations: usize,
    /// Mean unattributed seconds per iteration.
    pub residual: f64,
}

impl TimingProfile {
    pub fn mean(&self, p: Phase) -> f64 {
        self.means.get(p)
    }

    /// Share of wall time attributed to a phase.
    pub fn coverage(&self) -> f64 {
        if self.mean_wall > 0.0 {
            self.means.total() / self.mean_wall
        } else {
            0.0
        }
    }
}

pub const WARMUP_ITERATIONS: usize = 3;
pub const MIN_PROFILED_ITERATIONS: usize = 10;
pub const MAX_RESIDUAL_SHARE: f64 = 0.05;

/// Runs `warmup` unmeasured iterations, then `iterations` measured ones.
pub fn profile_iteration(trainer: &mut Trainer, iterations: usize, warmup: usize) -> Result<TimingProfile> {
    if iterations < MIN_PROFILED_ITERATIONS {
        return Err(Error::config(format!(
            "profiling needs at least {MIN_PROFILED_ITERATIONS} measured iterations, got {iterations}"
        )));
    }
    trainer.run(warmup)?;
    let stats = trainer.run(iterations)?;
    let mut sums = PhaseTimes::default();
    let mut wall = 0.0;
    for s in &stats {
        let attributed = s.phases.total();
        if s.phases.0.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || attributed > s.wall_secs {
            return Err(Error::Measurement(format!(
                "iteration {}: phase times {:?} do not fit in wall time {}",
                s.iteration, s.phases.0, s.wall_secs
            )));
        }
        for p in Phase::ALL {
            sums.add(p, s.phases.get(p));
        }
        wall += s.wall_secs;
    }
    let n = stats.len() as f64;
    let means = PhaseTimes(sums.0.map(|t| t / n));
    let mean_wall = wall / n;
    let profile = TimingProfile {
        mode: trainer.config().mode,
        residual: (mean_wall - means.total()).max(0.0),
        means,
        mean_wall,
        iterations: stats.len(),
    };
    if profile.residual > MAX_RESIDUAL_SHARE * mean_wall {
        return Err(Error::Measurement(format!(
            "{:.1}% of iteration time is unattributed",
            100.0 * profile.residual / mean_wall
        )));
    }
    Ok(profile)
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub mode: TrainerMode,
    pub steps: usize,
    pub seed: u64,
    pub config_hash: String,
    pub metrics: EditMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub run_id: String,
    pub profile: TimingProfile,
}

pub const REPORT_SCHEMA: &str = "editlab.report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub version: u32,
    pub metrics: Vec<MetricsRow>,
    pub profiles: Vec<ProfileRow>,
    pub logs: Vec<LogRecord>,
}

impl Report {
    pub fn new(metrics: Vec<MetricsRow>, profiles: Vec<ProfileRow>, logs: Vec<LogRecord>) -> Self {
        Report {
            schema: REPORT_SCHEMA.into(),
            version: REPORT_VERSION,
            metrics,
            profiles,
            logs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(text).map_err(|e| Error::format("report", e))?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::format("report", format!("unexpected schema '{}'", r.schema)));
        }
        if r.version != REPORT_VERSION {
            return Err(Error::Version {
                what: "report".into(),
                found: r.version,
                expected: REPORT_VERSION,
            });
        }
        Ok(r)
    }
}

pub const METRICS_HEADER: &str = "run_id,mode,S,eff,gen,spe,n,style,seed,config_hash";
pub const PROFILE_HEADER: &str = "run_id,category,mean_s,iters";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.mode,
            r.steps,
            m.efficacy,
            m.generalization,
            m.specificity,
            m.n_evaluated,
            m.style.name(),
            r.seed,
            r.config_hash
        );
    }
    out
}

/// Five phase rows plus a `residual` row per profile.
pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut out = format!("{PROFILE_HEADER}\n");
    for r in rows {
        let p = &r.profile;
        for phase in Phase::ALL {
            let _ = writeln!(out, "{},{},{},{}", r.run_id, phase.name(), p.mean(phase), p.iterations);
        }
        let _ = writeln!(out, "{},residual,{},{}", r.run_id, p.residual, p.iterations);
    }
    out
}

/// Writes `metrics.csv`, `profile.csv`, `report.json` and, when logs are
/// present, `train_log.jsonl` into `dir`. Returns the paths written.
pub fn emit_report(dir: &Path, report: &Report) -> Result<Vec<PathBuf>> {
    if report.metrics.is_empty() && report.profiles.is_empty() && report.logs.is_empty() {
        return Err(Error::contract("a report needs metrics, profiles or logs"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![
        ("metrics.csv", metrics_csv(&report.metrics)),
        ("profile.csv", profile_csv(&report.profiles)),
        ("report.json", report.to_json()),
    ];
    if !report.logs.is_empty() {
        let mut buf = Vec::new();
        crate::metatrain::write_log(&mut buf, &report.logs).map_err(|e| Error::io(dir, e))?;
        files.push(("train_log.jsonl", String::from_utf8(buf).expect("log is utf-8")));
    }
    let mut written = Vec::with_capacity(files.len());
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
