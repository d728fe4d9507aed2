use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::editengine::WeightDelta;
use crate::error::{Error, Result};
use crate::numcore::{log_softmax_rows, LayerId, Matrix, Tape};
use crate::toylm::{Pair, QueryBatch, ToyModel, Trainable};

pub type LayerGrads = BTreeMap<LayerId, Matrix>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConsVariant {
    #[default]
    TotalDrift,
    PerStepSum,
}

impl std::str::FromStr for ConsVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total_drift" => Ok(ConsVariant::TotalDrift),
            "per_step_sum" => Ok(ConsVariant::PerStepSum),
            other => Err(Error::config(format!("unknown cons variant '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub lambda_loc: f64,
    pub eta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub q: usize,
}

/// Components of one meta-loss evaluation.
///
/// `total = discount · (L_e + λ_loc·L_loc + η·L_cons + L_back)`, absent terms
/// counting as zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub edit_loss: f64,
    pub locality_loss: Option<f64>,
    pub cons_loss: Option<f64>,
    pub backtracking_loss: Option<f64>,
    pub discount: f64,
    pub total: f64,
    pub coefficients: Coefficients,
}

impl LossReport {
    pub fn combine(
        coefficients: Coefficients,
        edit_loss: f64,
        locality_loss: Option<f64>,
        cons_loss: Option<f64>,
        backtracking_loss: Option<f64>,
        discount: f64,
    ) -> Self {
        let mut r = LossReport {
            edit_loss,
            locality_loss,
            cons_loss,
            backtracking_loss,
            discount,
            total: 0.0,
            coefficients,
        };
        r.total = r.recompute_total();
        r
    }

    pub fn recompute_total(&self) -> f64 {
        let c = &self.coefficients;
        self.discount
            * (self.edit_loss
                + c.lambda_loc * self.locality_loss.unwrap_or(0.0)
                + c.eta * self.cons_loss.unwrap_or(0.0)
                + self.backtracking_loss.unwrap_or(0.0))
    }
}

/// Mean over pairs of the per-pair mean answer NLL, with its gradient
/// with respect to the editable weights.
pub fn edit_loss_grad(model: &ToyModel, pairs: &[&Pair]) -> Result<(f64, LayerGrads)> {
    weighted_edit_loss_grad(model, pairs, &vec![1.0 / pairs.len().max(1) as f64; pairs.len()])
}

/// `Σ_i w_i · meanNLL(pair_i)` and its gradient with respect to the editable weights.
pub fn weighted_edit_loss_grad(model: &ToyModel, pairs: &[&Pair], pair_weights: &[f64]) -> Result<(f64, LayerGrads)> {
    if pairs.is_empty() {
        return Err(Error::contract("edit loss needs at least one equivalence pair"));
    }
    let batch = QueryBatch::teacher_forced(pairs.iter().copied())?;
    let per_row = batch.pair_weights(1.0);
    let weights: Vec<f64> = per_row
        .iter()
        .zip(batch.owners())
        .map(|(w, &o)| w * pair_weights[o])
        .collect();
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, Trainable::Editable);
    let logits = model.forward_on_tape(&mut tape, &w, &batch)?;
    let loss = tape.cross_entropy(logits, batch.targets(), &weights)?;
    let grads = tape.backward(loss)?;
    let out = model
        .editable()
        .iter()
        .map(|id| (id.clone(), grads.wrt(w.var(id))))
        .collect();
    Ok((tape.scalar(loss), out))
}

/// Mean over pairs of the per-pair mean answer NLL on the model's current weights.
pub fn edit_loss(model: &ToyModel, pairs: &[&Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("edit loss needs at least one equivalence pair"));
    }
    crate::toylm::mean_pair_nll(model, pairs)
}

/// Row weights giving the mean over every answer position of every prompt.
fn position_weights(batch: &QueryBatch) -> Vec<f64> {
    vec![1.0 / batch.len() as f64; batch.len()]
}

/// `KL(p ‖ q)` averaged over rows, for explicit probability rows.
pub fn mean_kl(p: &Matrix, q: &Matrix) -> Result<f64> {
    if p.shape() != q.shape() || p.rows() == 0 {
        return Err(Error::shape("KL operands must be non-empty and equally shaped"));
    }
    let mut total = 0.0;
    for i in 0..p.rows() {
        for (a, b) in p.row(i).iter().zip(q.row(i)) {
            if *a > 0.0 {
                total += a * (a.ln() - b.ln());
            }
        }
    }
    Ok(total / p.rows() as f64)
}

/// Mean over prompts and answer positions of `KL(θ_origin ‖ θ_edited)`.
pub fn kl_locality_loss(origin: &ToyModel, edited: &ToyModel, pairs: &[&Pair]) -> Result<f64> {
    Ok(kl_locality_grad(origin, edited, pairs, false)?.0)
}

/// Locality loss and (optionally) its gradient with respect to the edited model's editable weights.
pub fn kl_locality_grad(origin: &ToyModel, edited: &ToyModel, pairs: &[&Pair], with_grad: bool) -> Result<(f64, LayerGrads)> {
    if pairs.is_empty() {
        return Err(Error::contract("locality loss needs at least one unrelated prompt"));
    }
    let batch = QueryBatch::teacher_forced(pairs.iter().copied())?;
    let reference = log_softmax_rows(&origin.logits(&batch)?);
    let weights = position_weights(&batch);
    let mut tape = Tape::new();
    let trainable = if with_grad { Trainable::Editable } else { Trainable::None };
    let w = edited.bind(&mut tape, trainable);
    let logits = edited.forward_on_tape(&mut tape, &w, &batch)?;
    let loss = tape.kl_div(logits, &reference, &weights)?;
    let value = tape.scalar(loss);
    if !with_grad {
        return Ok((value, LayerGrads::new()));
    }
    let grads = tape.backward(loss)?;
    let out = edited
        .editable()
        .iter()
        .map(|id| (id.clone(), grads.wrt(w.var(id))))
        .collect();
    Ok((value, out))
}

/// `Σ_s ‖Δ_s‖²` or `‖offset + Σ_s Δ_s‖²`, where `offset` is the drift from
/// `W_0` accumulated before the first delta in `deltas`.
pub fn cons_loss(variant: ConsVariant, deltas: &[WeightDelta], offset: &LayerGrads) -> f64 {
    match variant {
        ConsVariant::PerStepSum => deltas.iter().map(WeightDelta::squared_norm).sum(),
        ConsVariant::TotalDrift => {
            let mut total = offset.clone();
            for d in deltas {
                for (id, m) in &d.layers {
                    match total.get_mut(id) {
                        Some(t) => t.add_assign(m).expect("delta shapes agree"),
                        None => {
                            total.insert(id.clone(), m.clone());
                        }
                    }
                }
            }
            total.values().map(Matrix::squared_norm).sum()
        }
    }
}

/// `‖W − W_0‖²` over the editable layers, and `W − W_0` itself.
pub fn drift(model: &ToyModel, origin: &ToyModel) -> Result<(f64, LayerGrads)> {
    let mut out = LayerGrads::new();
    let mut total = 0.0;
    for id in model.editable() {
        let a = model.weight(id).ok_or_else(|| Error::contract(format!("unknown layer {id}")))?;
        let b = origin.weight(id).ok_or_else(|| Error::contract(format!("origin lacks layer {id}")))?;
        let d = a.sub(b)?;
        total += d.squared_norm();
        out.insert(id.clone(), d);
    }
    Ok((total, out))
}

/// `Σ_{j} μ^{i−j} (L_{e,j} + λ_loc·L_{loc,j})` over the last `q` entries of
/// `history` (oldest first), each already evaluated on the current weights.
pub fn backtracking_loss(history: &[(f64, f64)], mu: f64, lambda_loc: f64, q: usize) -> f64 {
    let window = &history[history.len().saturating_sub(q)..];
    window
        .iter()
        .rev()
        .enumerate()
        .map(|(age, (le, lloc))| mu.powi(age as i32 + 1) * (le + lambda_loc * lloc))
        .sum()
}

/// `J = Σ_i γ^i (L_meta,i + L_back,i + η‖Δ_i‖²)` with `i` counted from 1, where
/// each report carries `‖Δ_i‖²` as its cons term.
pub fn rl_objective(reports: &[LossReport], gamma: f64, eta: f64) -> f64 {
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let meta = r.edit_loss + r.coefficients.lambda_loc * r.locality_loss.unwrap_or(0.0);
            gamma.powi(i as i32 + 1) * (meta + r.backtracking_loss.unwrap_or(0.0) + eta * r.cons_loss.unwrap_or(0.0))
        })
        .sum()
}

/// `acc += alpha · g`, layer by layer.
pub fn add_scaled(acc: &mut LayerGrads, alpha: f64, g: &LayerGrads) -> Result<()> {
    for (id, m) in g {
        match acc.get_mut(id) {
            Some(a) => a.axpy(alpha, m)?,
            None => {
                acc.insert(id.clone(), m.scale(alpha));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;
    use crate::toylm::{fc_in_id, ModelConfig};

    fn coeffs() -> Coefficients {
        Coefficients {
            lambda_loc: 0.6,
            eta: 0.5,
            gamma: 1.0,
            mu: 0.95,
            q: 10,
        }
    }

    fn small_model(seed: u64) -> ToyModel {
        ToyModel::new(ModelConfig {
            vocab_size: 10,
            dim: 6,
            n_blocks: 2,
            hidden_mult: 2,
            tied_output: true,
            embed_std: 0.7,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn uniform_model_edit_loss_is_log_vocab() {
        let mut m = ToyModel::new(ModelConfig::default()).unwrap();
        let zero = Matrix::zeros(64, 32);
        *m.weights_mut().get_mut(&crate::toylm::embed_id()).unwrap() = zero;
        let p = Pair::new(vec![1, 2], vec![5]);
        let l = edit_loss(&m, &[&p]).unwrap();
        assert!((l - 64f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn edit_loss_matches_direct_recomputation() {
        let m = small_model(0);
        let pairs = [Pair::new(vec![1, 2], vec![5]), Pair::new(vec![3], vec![4, 7])];
        let refs: Vec<&Pair> = pairs.iter().collect();
        let mut expected = 0.0;
        for p in &pairs {
            let mut seq = p.prompt.clone();
            seq.extend_from_slice(&p.answer[..p.answer.len() - 1]);
            let logits = m.forward(&seq).unwrap();
            let start = p.prompt.len() - 1;
            let rows: Vec<usize> = (start..start + p.answer.len()).collect();
            let sel = logits.select_rows(&rows);
            let targets: Vec<usize> = p.answer.iter().map(|&t| t as usize).collect();
            expected += crate::toylm::nll_loss(&sel, &targets, &vec![true; rows.len()]).unwrap();
        }
        expected /= pairs.len() as f64;
        assert!((edit_loss(&m, &refs).unwrap() - expected).abs() < 1e-12);
        let (with_grad, _) = edit_loss_grad(&m, &refs).unwrap();
        assert!((with_grad - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_weights_is_zero() {
        let m = small_model(1);
        let pairs = [Pair::new(vec![1, 2], vec![5]), Pair::new(vec![3, 8], vec![4])];
        let refs: Vec<&Pair> = pairs.iter().collect();
        assert_eq!(kl_locality_loss(&m, &m, &refs).unwrap(), 0.0);
    }

    #[test]
    fn kl_two_token_example() {
        let p = Matrix::from_rows(&[[0.9, 0.1]]);
        let q = Matrix::from_rows(&[[0.5, 0.5]]);
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((mean_kl(&p, &q).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.3681).abs() < 1e-4);

        let mut tape = Tape::new();
        let logits = tape.constant(Matrix::from_rows(&[[0.0, 0.0]]));
        let loss = tape.kl_div(logits, &p.map(f64::ln), &[1.0]).unwrap();
        assert!((tape.scalar(loss) - expected).abs() < 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let pairs = [Pair::new(vec![1, 2], vec![5]), Pair::new(vec![3, 8, 9], vec![4, 0])];
        let refs: Vec<&Pair> = pairs.iter().collect();
        for seed in 0..10 {
            let a = small_model(seed);
            let b = small_model(seed + 100);
            assert!(kl_locality_loss(&a, &b, &refs).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let origin = small_model(2);
        let mut edited = origin.clone();
        let mut rng = SeededRng::derive(2, 2);
        let id = fc_in_id(1);
        let noise = rng.normal_matrix(12, 6, 0.3);
        edited.add_to_layer(&id, &noise).unwrap();
        let pairs = [Pair::new(vec![1, 2], vec![5]), Pair::new(vec![3, 8], vec![4])];
        let refs: Vec<&Pair> = pairs.iter().collect();
        let (_, g) = kl_locality_grad(&origin, &edited, &refs, true).unwrap();
        let fd = crate::numcore::finite_diff_grad(
            |w| {
                let mut probe = edited.clone();
                *probe.weights_mut().get_mut(&id).unwrap() = w.clone();
                kl_locality_loss(&origin, &probe, &refs)
            },
            edited.weight(&id).unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(g[&id].relative_error(&fd) < 1e-6);
    }

    fn delta(v: f64) -> WeightDelta {
        WeightDelta::new(1, [(LayerId::new("a"), Matrix::from_rows(&[[v, 2.0 * v]]))].into())
    }

    #[test]
    fn cons_variants() {
        let none = LayerGrads::new();
        let z = delta(0.0);
        assert_eq!(cons_loss(ConsVariant::PerStepSum, &[z.clone(), z.clone()], &none), 0.0);
        assert_eq!(cons_loss(ConsVariant::TotalDrift, &[z.clone(), z], &none), 0.0);

        let d1 = delta(1.0);
        assert_eq!(cons_loss(ConsVariant::PerStepSum, &[d1.clone()], &none), 5.0);
        assert_eq!(cons_loss(ConsVariant::TotalDrift, &[d1.clone()], &none), 5.0);

        let d2 = d1.negated();
        assert_eq!(cons_loss(ConsVariant::PerStepSum, &[d1.clone(), d2.clone()], &none), 10.0);
        assert_eq!(cons_loss(ConsVariant::TotalDrift, &[d1, d2], &none), 0.0);
    }

    #[test]
    fn backtracking_examples() {
        assert_eq!(backtracking_loss(&[], 0.95, 0.6, 10), 0.0);
        let one = backtracking_loss(&[(2.0, 1.0)], 0.95, 0.6, 1);
        assert!((one - 0.95 * (2.0 + 0.6)).abs() < 1e-15);
        assert_eq!(backtracking_loss(&[(2.0, 1.0), (3.0, 4.0)], 0.0, 0.6, 10), 0.0);
        let window = backtracking_loss(&[(100.0, 0.0), (1.0, 0.0), (2.0, 0.0)], 0.5, 0.0, 2);
        assert!((window - (0.5 * 2.0 + 0.25 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn rl_objective_examples() {
        let c = coeffs();
        let r = LossReport::combine(c, 1.0, Some(0.5), Some(2.0), Some(0.25), 1.0);
        let j = rl_objective(&[r.clone()], 1.0, 0.5);
        assert!((j - (1.0 + 0.6 * 0.5 + 0.25 + 0.5 * 2.0)).abs() < 1e-15);
        let r2 = LossReport::combine(c, 3.0, Some(0.0), Some(0.0), Some(0.0), 1.0);
        assert!((rl_objective(&[r.clone(), r2.clone()], 1.0, 0.5) - (j + 3.0)).abs() < 1e-15);
        let z = LossReport::combine(c, 0.0, Some(0.0), Some(0.0), Some(0.0), 1.0);
        assert_eq!(rl_objective(&[z.clone(), z], 1.0, 0.5), 0.0);
        assert!((rl_objective(&[r, r2], 0.5, 0.5) - (0.5 * j + 0.25 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn report_total_is_documented_combination() {
        let c = coeffs();
        let kl = LossReport::combine(c, 1.25, Some(0.5), None, None, 1.0);
        assert!((kl.total - (1.25 + 0.6 * 0.5)).abs() < 1e-12);
        let cons = LossReport::combine(c, 1.25, None, Some(3.0), None, 1.0);
        assert!((cons.total - (1.25 + 0.5 * 3.0)).abs() < 1e-12);
        assert_eq!(cons.total, cons.recompute_total());
    }
}
