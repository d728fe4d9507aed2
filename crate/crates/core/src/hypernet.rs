//! Editing hypernetworks.
//!
//! A hypernetwork maps a layer's trace rows `(δ, u)` to pseudo rows `(δ̃, ũ)`
//! of the same shape. Each row is the concatenation `v = [δ/ρ_δ ; u/ρ_u]`,
//! where `ρ` is the power of two nearest the RMS of that half of the trace
//! (so normalizing and undoing it is exact). A stack of blocks then applies
//!
//! ```text
//! z = v ⊙ scale_l + shift_l
//! v ← v + gelu(z · Downᵀ) · Upᵀ
//! ```
//!
//! with `scale_l`, `shift_l` specific to the edited layer `l`. `Up` starts at
//! zero, so a fresh hypernetwork is the identity map. Layers with the same
//! weight shape share `Down`/`Up`. Each layer also owns a learnable log
//! edit learning rate and a log ridge coefficient used by the delta builders.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{
    clip_global_norm, Adam, AdamConfig, Gradients, LayerId, LayerTrace, Matrix, SeededRng, Tape, Var,
};
use crate::toylm::ToyModel;

/// Weight shape of an editable layer: `rows = d′` (output), `cols = d` (input).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: LayerId,
    pub rows: usize,
    pub cols: usize,
}

impl LayerSpec {
    /// Specs of a model's editable layers, in editable order.
    pub fn for_model(model: &ToyModel) -> Vec<LayerSpec> {
        model
            .editable()
            .iter()
            .map(|id| {
                let (rows, cols) = model.weight(id).expect("editable layers exist").shape();
                LayerSpec {
                    id: id.clone(),
                    rows,
                    cols,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub rank: usize,
    pub n_blocks: usize,
    pub init_lr: f64,
    pub init_lambda: f64,
    pub seed: u64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            rank: 64,
            n_blocks: 4,
            init_lr: 1e-2,
            init_lambda: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperBlock {
    pub rank: usize,
    pub down_proj: Matrix,
    pub up_proj: Matrix,
    pub gate_scale: BTreeMap<LayerId, Matrix>,
    pub gate_shift: BTreeMap<LayerId, Matrix>,
}

impl HyperBlock {
    fn new(width: usize, rank: usize, layers: &[LayerId], rng: &mut SeededRng) -> Self {
        HyperBlock {
            rank,
            down_proj: rng.normal_matrix(rank, width, 1.0 / (width as f64).sqrt()),
            up_proj: Matrix::zeros(width, rank),
            gate_scale: layers.iter().map(|l| (l.clone(), Matrix::filled(1, width, 1.0))).collect(),
            gate_shift: layers.iter().map(|l| (l.clone(), Matrix::zeros(1, width))).collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.down_proj.len()
            + self.up_proj.len()
            + self.gate_scale.values().map(Matrix::len).sum::<usize>()
            + self.gate_shift.values().map(Matrix::len).sum::<usize>()
    }
}

/// Blocks shared by all layers of one weight shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeGroup {
    pub rows: usize,
    pub cols: usize,
    pub layers: Vec<LayerId>,
    pub blocks: Vec<HyperBlock>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypernetwork {
    pub rank: usize,
    pub layers: Vec<LayerSpec>,
    pub groups: Vec<ShapeGroup>,
    pub log_lr: BTreeMap<LayerId, Matrix>,
    pub log_lambda: BTreeMap<LayerId, Matrix>,
}

/// Tape handles for every hypernetwork parameter.
#[derive(Clone, Debug)]
pub struct BoundHyper {
    blocks: Vec<Vec<BlockVars>>,
    group_of: BTreeMap<LayerId, usize>,
    log_lr: BTreeMap<LayerId, Var>,
    log_lambda: BTreeMap<LayerId, Var>,
    flat: Vec<Var>,
}

#[derive(Clone, Debug)]
struct BlockVars {
    down: Var,
    up: Var,
    scale: BTreeMap<LayerId, Var>,
    shift: BTreeMap<LayerId, Var>,
}

impl BoundHyper {
    pub fn log_lr(&self, layer: &LayerId) -> Var {
        self.log_lr[layer]
    }

    pub fn log_lambda(&self, layer: &LayerId) -> Var {
        self.log_lambda[layer]
    }

    /// Vars in canonical parameter order.
    pub fn flat(&self) -> &[Var] {
        &self.flat
    }

    /// Gradients in canonical parameter order.
    pub fn collect(&self, grads: &Gradients) -> Vec<Matrix> {
        self.flat.iter().map(|&v| grads.wrt(v)).collect()
    }
}

/// Pseudo trace rows on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PseudoTrace {
    pub delta: Var,
    pub u: Var,
}

/// Power of two nearest the RMS of `m`, or 1 for an all-zero matrix.
fn pow2_scale(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let rms = (m.squared_norm() / m.len() as f64).sqrt();
    if rms == 0.0 || !rms.is_finite() {
        return 1.0;
    }
    2f64.powi(rms.log2().round() as i32)
}

impl Hypernetwork {
    pub fn new(config: &HyperConfig, layers: &[LayerSpec], rng: &mut SeededRng) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::config("hypernetwork rank must be at least 1"));
        }
        if layers.is_empty() {
            return Err(Error::config("hypernetwork needs at least one editable layer"));
        }
        if !(config.init_lr > 0.0 && config.init_lambda > 0.0) {
            return Err(Error::config("initial edit lr and ridge coefficient must be positive"));
        }
        let mut groups: Vec<ShapeGroup> = Vec::new();
        for spec in layers {
            match groups
                .iter_mut()
                .find(|g| (g.rows, g.cols) == (spec.rows, spec.cols))
            {
                Some(g) => g.layers.push(spec.id.clone()),
                None => groups.push(ShapeGroup {
                    rows: spec.rows,
                    cols: spec.cols,
                    layers: vec![spec.id.clone()],
                    blocks: Vec::new(),
                }),
            }
        }
        for g in &mut groups {
            let width = g.rows + g.cols;
            g.blocks = (0..config.n_blocks)
                .map(|_| HyperBlock::new(width, config.rank, &g.layers, rng))
                .collect();
        }
        let per_layer = |v: f64| -> BTreeMap<LayerId, Matrix> {
            layers.iter().map(|l| (l.id.clone(), Matrix::scalar(v))).collect()
        };
        Ok(Hypernetwork {
            rank: config.rank,
            layers: layers.to_vec(),
            groups,
            log_lr: per_layer(config.init_lr.ln()),
            log_lambda: per_layer(config.init_lambda.ln()),
        })
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for g in &self.groups {
            for b in &g.blocks {
                out.push(&b.down_proj);
                out.push(&b.up_proj);
                for l in &g.layers {
                    out.push(&b.gate_scale[l]);
                    out.push(&b.gate_shift[l]);
                }
            }
        }
        for l in &self.layers {
            out.push(&self.log_lr[&l.id]);
            out.push(&self.log_lambda[&l.id]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for g in &mut self.groups {
            let layers = &g.layers;
            for b in &mut g.blocks {
                out.push(&mut b.down_proj);
                out.push(&mut b.up_proj);
                let mut scales: BTreeMap<&LayerId, &mut Matrix> = b.gate_scale.iter_mut().collect();
                let mut shifts: BTreeMap<&LayerId, &mut Matrix> = b.gate_shift.iter_mut().collect();
                for l in layers {
                    out.push(scales.remove(l).expect("scale per layer"));
                    out.push(shifts.remove(l).expect("shift per layer"));
                }
            }
        }
        let mut lrs: BTreeMap<&LayerId, &mut Matrix> = self.log_lr.iter_mut().collect();
        let mut lambdas: BTreeMap<&LayerId, &mut Matrix> = self.log_lambda.iter_mut().collect();
        for l in &self.layers {
            out.push(lrs.remove(&l.id).expect("lr per layer"));
            out.push(lambdas.remove(&l.id).expect("lambda per layer"));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    pub fn edit_lr(&self, layer: &LayerId) -> Option<f64> {
        self.log_lr.get(layer).map(|m| m.get(0, 0).exp())
    }

    pub fn lambda(&self, layer: &LayerId) -> Option<f64> {
        self.log_lambda.get(layer).map(|m| m.get(0, 0).exp())
    }

    pub fn spec(&self, layer: &LayerId) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| &l.id == layer)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundHyper {
        let mut flat = Vec::new();
        let mut blocks = Vec::new();
        let mut group_of = BTreeMap::new();
        for (gi, g) in self.groups.iter().enumerate() {
            for l in &g.layers {
                group_of.insert(l.clone(), gi);
            }
            let mut gv = Vec::new();
            for b in &g.blocks {
                let down = tape.param(b.down_proj.clone());
                let up = tape.param(b.up_proj.clone());
                flat.push(down);
                flat.push(up);
                let mut scale = BTreeMap::new();
                let mut shift = BTreeMap::new();
                for l in &g.layers {
                    let s = tape.param(b.gate_scale[l].clone());
                    let t = tape.param(b.gate_shift[l].clone());
                    flat.push(s);
                    flat.push(t);
                    scale.insert(l.clone(), s);
                    shift.insert(l.clone(), t);
                }
                gv.push(BlockVars {
                    down,
                    up,
                    scale,
                    shift,
                });
            }
            blocks.push(gv);
        }
        let mut log_lr = BTreeMap::new();
        let mut log_lambda = BTreeMap::new();
        for l in &self.layers {
            let a = tape.param(self.log_lr[&l.id].clone());
            let b = tape.param(self.log_lambda[&l.id].clone());
            flat.push(a);
            flat.push(b);
            log_lr.insert(l.id.clone(), a);
            log_lambda.insert(l.id.clone(), b);
        }
        BoundHyper {
            blocks,
            group_of,
            log_lr,
            log_lambda,
            flat,
        }
    }

    /// Records the transform of one layer's trace on `tape`.
    pub fn transform_on_tape(&self, tape: &mut Tape, bound: &BoundHyper, trace: &LayerTrace) -> Result<PseudoTrace> {
        let spec = self
            .spec(&trace.layer_id)
            .ok_or_else(|| Error::contract(format!("hypernetwork has no layer {}", trace.layer_id)))?;
        if trace.delta.cols() != spec.rows || trace.u.cols() != spec.cols || trace.delta.rows() != trace.u.rows() {
            return Err(Error::contract(format!(
                "trace for {} is δ {}x{}, u {}x{}; hypernetwork expects δ ·x{}, u ·x{}",
                trace.layer_id,
                trace.delta.rows(),
                trace.delta.cols(),
                trace.u.rows(),
                trace.u.cols(),
                spec.rows,
                spec.cols
            )));
        }
        let rho_d = pow2_scale(&trace.delta);
        let rho_u = pow2_scale(&trace.u);
        let vd = tape.constant(trace.delta.scale(1.0 / rho_d));
        let vu = tape.constant(trace.u.scale(1.0 / rho_u));
        let mut v = tape.concat_cols(vd, vu)?;
        let g = bound.group_of[&trace.layer_id];
        for b in &bound.blocks[g] {
            let z = tape.mul_row(v, b.scale[&trace.layer_id])?;
            let z = tape.add_row(z, b.shift[&trace.layer_id])?;
            let h = tape.matmul(z, b.down, false, true)?;
            let h = tape.gelu(h);
            let o = tape.matmul(h, b.up, false, true)?;
            v = tape.add(v, o)?;
        }
        let d = tape.slice_cols(v, 0, spec.rows)?;
        let u = tape.slice_cols(v, spec.rows, spec.rows + spec.cols)?;
        Ok(PseudoTrace {
            delta: tape.scale(d, rho_d),
            u: tape.scale(u, rho_u),
        })
    }

    /// `(δ̃, ũ)` for a trace, evaluated off-tape.
    pub fn transform(&self, trace: &LayerTrace) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let p = self.transform_on_tape(&mut tape, &bound, trace)?;
        Ok((tape.value(p.delta).clone(), tape.value(p.u).clone()))
    }
}

/// Step-specific hypernetworks `f_1..f_S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypernetworkStepSet {
    pub ranks: Vec<usize>,
    pub steps: Vec<Hypernetwork>,
    pub rank_decay: bool,
}

/// Rank of step `s` (1-based): `⌊r/s⌋` with decay, `r` otherwise.
pub fn step_rank(base: usize, s: usize, rank_decay: bool) -> usize {
    if rank_decay {
        base / s
    } else {
        base
    }
}

/// Random stream used to initialize the hypernetwork of step `s` (1-based).
pub fn step_rng(seed: u64, s: usize) -> SeededRng {
    SeededRng::derive(seed, 0x4e70 + s as u64)
}

/// The single shared hypernetwork; identical to step 1 of a step set built with the same config.
pub fn build_single(config: &HyperConfig, layers: &[LayerSpec]) -> Result<Hypernetwork> {
    Hypernetwork::new(config, layers, &mut step_rng(config.seed, 1))
}

pub fn build_stepset(steps: usize, config: &HyperConfig, layers: &[LayerSpec], rank_decay: bool) -> Result<HypernetworkStepSet> {
    if steps == 0 {
        return Err(Error::config("need at least one backpropagation step"));
    }
    if rank_decay && config.rank < steps {
        return Err(Error::config(format!(
            "rank {} is smaller than the step count {steps}; the last step would have rank 0",
            config.rank
        )));
    }
    let mut ranks = Vec::with_capacity(steps);
    let mut nets = Vec::with_capacity(steps);
    for s in 1..=steps {
        let rank = step_rank(config.rank, s, rank_decay);
        let cfg = HyperConfig {
            rank,
            ..config.clone()
        };
        ranks.push(rank);
        nets.push(Hypernetwork::new(&cfg, layers, &mut step_rng(config.seed, s))?);
    }
    Ok(HypernetworkStepSet {
        ranks,
        steps: nets,
        rank_decay,
    })
}

impl HypernetworkStepSet {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, s: usize) -> &Hypernetwork {
        &self.steps[s]
    }
}

/// Anything that exposes hypernetwork parameters in a fixed order.
pub trait HyperParams {
    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|m| m.shape()).collect()
    }
}

impl HyperParams for Hypernetwork {
    fn params(&self) -> Vec<&Matrix> {
        Hypernetwork::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        Hypernetwork::params_mut(self)
    }
}

impl HyperParams for HypernetworkStepSet {
    fn params(&self) -> Vec<&Matrix> {
        self.steps.iter().flat_map(|f| f.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.steps.iter_mut().flat_map(|f| f.params_mut()).collect()
    }
}

/// Adam over a hypernetwork's parameters with global-norm clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperOptimizer {
    pub adam: Adam,
    pub max_grad_norm: f64,
    pub skipped: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateOutcome {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl HyperOptimizer {
    pub fn new<P: HyperParams + ?Sized>(net: &P, meta_lr: f64, max_grad_norm: f64) -> Self {
        HyperOptimizer {
            adam: Adam::new(AdamConfig::with_lr(meta_lr), &net.shapes()),
            max_grad_norm,
            skipped: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.adam.steps()
    }

    /// Clips, then takes one Adam step. Non-finite gradients leave the
    /// parameters and moments untouched and return a numeric error.
    pub fn apply<P: HyperParams + ?Sized>(&mut self, net: &mut P, mut grads: Vec<Matrix>) -> Result<UpdateOutcome> {
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Err(Error::numeric("non-finite meta-gradient; update skipped"));
        }
        let grad_norm = clip_global_norm(&mut grads, self.max_grad_norm);
        let mut params = net.params_mut();
        self.adam.step(&mut params, &grads)?;
        Ok(UpdateOutcome {
            grad_norm,
            clipped: grad_norm > self.max_grad_norm,
        })
    }
}
