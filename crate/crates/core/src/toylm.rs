//! A tiny editable language model.
//!
//! Tokens are embedded, and the representation at position `t` is the mean
//! of the embeddings of tokens `0..=t` (a causal bag of words). That vector
//! runs through residual feed-forward blocks (`fc_in`, GELU, `fc_out`) and is
//! projected back onto the (tied) embedding table to give next-token logits.
//! Positions do not interact after pooling, so callers only pay for the
//! positions they ask for.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{log_softmax_rows, seeded_rng, Adam, AdamConfig, LayerId, Matrix, Tape, Var};

pub type Token = u32;

/// A prompt and the answer tokens that should follow it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    #[serde(rename = "x")]
    pub prompt: Vec<Token>,
    #[serde(rename = "y")]
    pub answer: Vec<Token>,
}

impl Pair {
    pub fn new(prompt: Vec<Token>, answer: Vec<Token>) -> Self {
        Pair { prompt, answer }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_blocks: usize,
    pub hidden_mult: usize,
    pub tied_output: bool,
    pub embed_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            dim: 32,
            n_blocks: 2,
            hidden_mult: 4,
            tied_output: true,
            embed_std: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.dim * self.hidden_mult
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.hidden_mult == 0 {
            return Err(Error::config("model sizes must be positive"));
        }
        Ok(())
    }
}

pub fn embed_id() -> LayerId {
    LayerId::new("embed")
}

pub fn unembed_id() -> LayerId {
    LayerId::new("unembed")
}

pub fn fc_in_id(block: usize) -> LayerId {
    LayerId::new(format!("blocks.{block}.fc_in"))
}

pub fn fc_out_id(block: usize) -> LayerId {
    LayerId::new(format!("blocks.{block}.fc_out"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    config: ModelConfig,
    weights: BTreeMap<LayerId, Matrix>,
    editable: Vec<LayerId>,
}

/// Immutable copy of a model's editable weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSnapshot {
    tag: String,
    weights: BTreeMap<LayerId, Matrix>,
}

impl WeightSnapshot {
    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn get(&self, id: &LayerId) -> Option<&Matrix> {
        self.weights.get(id)
    }

    pub fn layers(&self) -> impl Iterator<Item = (&LayerId, &Matrix)> {
        self.weights.iter()
    }

    /// `Σ_l ‖self_l − other_l‖²_F` over the shared key set.
    pub fn squared_distance(&self, other: &WeightSnapshot) -> Result<f64> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::contract("snapshots cover different layers"));
        }
        let mut total = 0.0;
        for (id, w) in &self.weights {
            let o = other
                .weights
                .get(id)
                .ok_or_else(|| Error::contract(format!("layer {id} missing from snapshot")))?;
            total += w.sub(o)?.squared_norm();
        }
        Ok(total)
    }
}

/// Which weights become differentiable leaves when the model is bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    None,
    Editable,
    All,
}

/// Weight handles for one forward pass on a tape.
#[derive(Clone, Debug)]
pub struct BoundWeights {
    vars: BTreeMap<LayerId, Var>,
}

impl BoundWeights {
    pub fn var(&self, id: &LayerId) -> Var {
        self.vars[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerId, &Var)> {
        self.vars.iter()
    }
}

/// Sequences plus the positions whose next-token logits are needed.
#[derive(Clone, Debug, Default)]
pub struct QueryBatch {
    sequences: Vec<Vec<Token>>,
    /// (sequence index, position)
    queries: Vec<(usize, usize)>,
    /// Token expected after each query position, when known.
    targets: Vec<usize>,
    /// Index of the pair each query belongs to.
    owners: Vec<usize>,
}

impl QueryBatch {
    /// Every position of a single sequence.
    pub fn all_positions(tokens: &[Token]) -> Self {
        QueryBatch {
            sequences: vec![tokens.to_vec()],
            queries: (0..tokens.len()).map(|p| (0, p)).collect(),
            targets: Vec::new(),
            owners: vec![0; tokens.len()],
        }
    }

    /// Teacher-forced answer positions of each pair: the prompt followed by all
    /// but the last answer token, queried where each answer token is predicted.
    pub fn teacher_forced<'a>(pairs: impl IntoIterator<Item = &'a Pair>) -> Result<Self> {
        let mut batch = QueryBatch::default();
        for (i, pair) in pairs.into_iter().enumerate() {
            if pair.prompt.is_empty() || pair.answer.is_empty() {
                return Err(Error::contract("pairs need a non-empty prompt and answer"));
            }
            let mut seq = pair.prompt.clone();
            seq.extend_from_slice(&pair.answer[..pair.answer.len() - 1]);
            let s = batch.sequences.len();
            for (k, &t) in pair.answer.iter().enumerate() {
                batch.queries.push((s, pair.prompt.len() - 1 + k));
                batch.targets.push(t as usize);
                batch.owners.push(i);
            }
            batch.sequences.push(seq);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn owners(&self) -> &[usize] {
        &self.owners
    }

    /// Row weights giving each pair's mean answer-token loss times `per_pair`.
    pub fn pair_weights(&self, per_pair: f64) -> Vec<f64> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &o in &self.owners {
            *counts.entry(o).or_default() += 1;
        }
        self.owners
            .iter()
            .map(|o| per_pair / counts[o] as f64)
            .collect()
    }

    pub fn pair_count(&self) -> usize {
        self.owners.iter().max().map_or(0, |m| m + 1)
    }
}

impl ToyModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let (v, d, h) = (config.vocab_size, config.dim, config.hidden());
        let mut weights = BTreeMap::new();
        weights.insert(embed_id(), rng.normal_matrix(v, d, config.embed_std));
        for b in 0..config.n_blocks {
            weights.insert(fc_in_id(b), rng.normal_matrix(h, d, 1.0 / (d as f64).sqrt()));
            weights.insert(fc_out_id(b), rng.normal_matrix(d, h, 0.5 / (h as f64).sqrt()));
        }
        if !config.tied_output {
            weights.insert(unembed_id(), rng.normal_matrix(v, d, config.embed_std));
        }
        let editable = (0..config.n_blocks).map(fc_in_id).collect();
        Ok(ToyModel {
            config,
            weights,
            editable,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn editable(&self) -> &[LayerId] {
        &self.editable
    }

    pub fn set_editable(&mut self, layers: Vec<LayerId>) -> Result<()> {
        if let Some(bad) = layers.iter().find(|l| !self.weights.contains_key(l)) {
            return Err(Error::contract(format!("unknown layer {bad}")));
        }
        self.editable = layers;
        Ok(())
    }

    pub fn weight(&self, id: &LayerId) -> Option<&Matrix> {
        self.weights.get(id)
    }

    pub fn weights(&self) -> &BTreeMap<LayerId, Matrix> {
        &self.weights
    }

    #[cfg(test)]
    pub(crate) fn weights_mut(&mut self) -> &mut BTreeMap<LayerId, Matrix> {
        &mut self.weights
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(Matrix::len).sum()
    }

    /// Adds `delta` to the named editable layer.
    pub fn add_to_layer(&mut self, id: &LayerId, delta: &Matrix) -> Result<()> {
        if !self.editable.contains(id) {
            return Err(Error::contract(format!("layer {id} is not editable")));
        }
        let w = self
            .weights
            .get_mut(id)
            .ok_or_else(|| Error::contract(format!("unknown layer {id}")))?;
        w.add_assign(delta)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> BoundWeights {
        let vars = self
            .weights
            .iter()
            .map(|(id, w)| {
                let train = match trainable {
                    Trainable::None => false,
                    Trainable::Editable => self.editable.contains(id),
                    Trainable::All => true,
                };
                let var = if train {
                    tape.param(w.clone())
                } else {
                    tape.constant(w.clone())
                };
                (id.clone(), var)
            })
            .collect();
        BoundWeights { vars }
    }

    /// Logits (queries × vocab) for the batch's query positions.
    pub fn forward_on_tape(&self, tape: &mut Tape, w: &BoundWeights, batch: &QueryBatch) -> Result<Var> {
        let vocab = self.config.vocab_size;
        let mut flat = Vec::new();
        let mut offsets = Vec::with_capacity(batch.sequences.len());
        for seq in &batch.sequences {
            offsets.push(flat.len());
            for &t in seq {
                if t as usize >= vocab {
                    return Err(Error::Input(format!(
                        "token {t} outside vocabulary of {vocab}"
                    )));
                }
                flat.push(t as usize);
            }
        }
        let groups = batch
            .queries
            .iter()
            .map(|&(s, p)| {
                if p >= batch.sequences[s].len() {
                    return Err(Error::contract("query position past end of sequence"));
                }
                Ok((offsets[s]..=offsets[s] + p).collect())
            })
            .collect::<Result<Vec<Vec<usize>>>>()?;
        let embedded = tape.gather_rows(w.var(&embed_id()), &flat)?;
        let mut h = tape.mean_pool(embedded, groups)?;
        for b in 0..self.config.n_blocks {
            let z = tape.linear(h, w.var(&fc_in_id(b)), &fc_in_id(b))?;
            let a = tape.gelu(z);
            let o = tape.linear(a, w.var(&fc_out_id(b)), &fc_out_id(b))?;
            h = tape.add(h, o)?;
        }
        let out = if self.config.tied_output {
            embed_id()
        } else {
            unembed_id()
        };
        tape.matmul(h, w.var(&out), false, true)
    }

    pub fn logits(&self, batch: &QueryBatch) -> Result<Matrix> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, Trainable::None);
        let out = self.forward_on_tape(&mut tape, &w, batch)?;
        Ok(tape.value(out).clone())
    }

    /// Next-token logits at every position of `tokens`.
    pub fn forward(&self, tokens: &[Token]) -> Result<Matrix> {
        if tokens.is_empty() {
            return Ok(Matrix::zeros(0, self.config.vocab_size));
        }
        self.logits(&QueryBatch::all_positions(tokens))
    }

    pub fn snapshot(&self, tag: impl Into<String>) -> WeightSnapshot {
        WeightSnapshot {
            tag: tag.into(),
            weights: self
                .editable
                .iter()
                .map(|id| (id.clone(), self.weights[id].clone()))
                .collect(),
        }
    }

    pub fn restore(&mut self, snapshot: &WeightSnapshot) -> Result<()> {
        let same_keys = snapshot.weights.len() == self.editable.len()
            && self.editable.iter().all(|id| snapshot.weights.contains_key(id));
        if !same_keys {
            return Err(Error::contract(format!(
                "snapshot '{}' does not cover exactly the editable layers",
                snapshot.tag
            )));
        }
        for (id, w) in &snapshot.weights {
            let slot = self.weights.get_mut(id).expect("checked above");
            if slot.shape() != w.shape() {
                return Err(Error::shape(format!("snapshot layer {id} has the wrong shape")));
            }
            slot.clone_from(w);
        }
        Ok(())
    }

    /// Greedy continuation; ties go to the lowest token id.
    pub fn argmax_decode(&self, prompt: &[Token], answer_len: usize) -> Result<Vec<Token>> {
        if answer_len == 0 {
            return Err(Error::contract("answer length must be at least 1"));
        }
        if prompt.is_empty() {
            return Err(Error::contract("prompt must not be empty"));
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(answer_len);
        for _ in 0..answer_len {
            let batch = QueryBatch {
                sequences: vec![seq.clone()],
                queries: vec![(0, seq.len() - 1)],
                targets: Vec::new(),
                owners: vec![0],
            };
            let logits = self.logits(&batch)?;
            let next = argmax_lowest(logits.row(0)) as Token;
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean over masked positions of `−log softmax(logits)[target]`.
pub fn nll_loss(logits: &Matrix, targets: &[usize], mask: &[bool]) -> Result<f64> {
    if targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::shape("targets and mask must have one entry per logit row"));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::contract("answer mask selects no positions"));
    }
    let logp = log_softmax_rows(logits);
    let mut total = 0.0;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            if t >= logits.cols() {
                return Err(Error::Input(format!("target {t} outside vocabulary")));
            }
            total -= logp.get(i, t);
        }
    }
    Ok(total / count as f64)
}

/// Mean over pairs of the per-pair mean answer-token NLL.
pub fn mean_pair_nll(model: &ToyModel, pairs: &[&Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("no pairs to score"));
    }
    let batch = QueryBatch::teacher_forced(pairs.iter().copied())?;
    let logits = model.logits(&batch)?;
    let logp = log_softmax_rows(&logits);
    let w = batch.pair_weights(1.0 / pairs.len() as f64);
    Ok(batch
        .targets()
        .iter()
        .enumerate()
        .map(|(i, &t)| -w[i] * logp.get(i, t))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub target_accuracy: f64,
    /// Training also continues until the mean answer NLL drops below this.
    pub target_loss: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 0.01,
            max_epochs: 3000,
            target_accuracy: 0.99,
            target_loss: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub accuracy: f64,
    pub loss: f64,
}

/// Fraction of pairs whose every teacher-forced answer token is the argmax.
/// For greedy decoding this equals the exact-match rate.
pub fn exact_match_rate(model: &ToyModel, pairs: &[Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("no pairs to score"));
    }
    let batch = QueryBatch::teacher_forced(pairs)?;
    let logits = model.logits(&batch)?;
    let mut ok = vec![true; pairs.len()];
    for (i, (&t, &o)) in batch.targets().iter().zip(batch.owners()).enumerate() {
        if argmax_lowest(logits.row(i)) != t {
            ok[o] = false;
        }
    }
    Ok(ok.iter().filter(|&&b| b).count() as f64 / pairs.len() as f64)
}

/// Full-batch Adam on all weights until the pairs are memorized.
pub fn pretrain(model: &mut ToyModel, pairs: &[Pair], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if pairs.is_empty() {
        return Err(Error::contract("no pretraining pairs"));
    }
    let batch = QueryBatch::teacher_forced(pairs)?;
    let weights = batch.pair_weights(1.0 / pairs.len() as f64);
    let ids: Vec<LayerId> = model.weights.keys().cloned().collect();
    let shapes: Vec<_> = ids.iter().map(|id| model.weights[id].shape()).collect();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &shapes);
    let mut report = PretrainReport {
        epochs: 0,
        accuracy: 0.0,
        loss: f64::INFINITY,
    };
    for epoch in 0..=cfg.max_epochs {
        let mut tape = Tape::new();
        let w = model.bind(&mut tape, Trainable::All);
        let logits = model.forward_on_tape(&mut tape, &w, &batch)?;
        let loss = tape.cross_entropy(logits, batch.targets(), &weights)?;
        let mut ok = vec![true; pairs.len()];
        let lv = tape.value(logits);
        for (i, (&t, &o)) in batch.targets().iter().zip(batch.owners()).enumerate() {
            if argmax_lowest(lv.row(i)) != t {
                ok[o] = false;
            }
        }
        report = PretrainReport {
            epochs: epoch,
            accuracy: ok.iter().filter(|&&b| b).count() as f64 / pairs.len() as f64,
            loss: tape.scalar(loss),
        };
        if !report.loss.is_finite() {
            return Err(Error::numeric(format!("pretraining loss diverged at epoch {epoch}")));
        }
        if report.accuracy >= cfg.target_accuracy && report.loss <= cfg.target_loss {
            break;
        }
        if epoch == cfg.max_epochs {
            break;
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Matrix> = ids.iter().map(|id| grads.wrt(w.var(id))).collect();
        let mut params: Vec<&mut Matrix> = model.weights.values_mut().collect();
        opt.step(&mut params, &g)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ToyModel {
        ToyModel::new(ModelConfig {
            vocab_size: 8,
            dim: 4,
            n_blocks: 2,
            hidden_mult: 2,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_embeddings_give_uniform_distribution() {
        let mut m = tiny(1);
        m.weights_mut().insert(embed_id(), Matrix::zeros(8, 4));
        let logits = m.forward(&[1, 2, 3]).unwrap();
        let loss = nll_loss(&logits, &[0, 5, 7], &[true; 3]).unwrap();
        assert!((loss - (8f64).ln()).abs() < 1e-12);
        assert_eq!(m.argmax_decode(&[3, 1], 3).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let a = tiny(7).forward(&[1, 4, 2, 2]).unwrap();
        let b = tiny(7).forward(&[1, 4, 2, 2]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn single_block_matches_hand_forward() {
        let cfg = ModelConfig {
            vocab_size: 2,
            dim: 2,
            n_blocks: 1,
            hidden_mult: 1,
            tied_output: true,
            embed_std: 1.0,
            seed: 0,
        };
        let mut m = ToyModel::new(cfg).unwrap();
        let e = Matrix::from_rows(&[[1.0, -0.5], [0.25, 2.0]]);
        let w1 = Matrix::from_rows(&[[0.5, 1.0], [-1.0, 0.3]]);
        let w2 = Matrix::from_rows(&[[0.2, -0.4], [0.7, 0.1]]);
        m.weights_mut().insert(embed_id(), e.clone());
        m.weights_mut().insert(fc_in_id(0), w1.clone());
        m.weights_mut().insert(fc_out_id(0), w2.clone());
        let logits = m.forward(&[0, 1]).unwrap();

        let g = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let mut hand = Vec::new();
        let pooled = [
            [e.get(0, 0), e.get(0, 1)],
            [(e.get(0, 0) + e.get(1, 0)) / 2.0, (e.get(0, 1) + e.get(1, 1)) / 2.0],
        ];
        for h in pooled {
            let z = [
                w1.get(0, 0) * h[0] + w1.get(0, 1) * h[1],
                w1.get(1, 0) * h[0] + w1.get(1, 1) * h[1],
            ];
            let a = [g(z[0]), g(z[1])];
            let o = [
                w2.get(0, 0) * a[0] + w2.get(0, 1) * a[1],
                w2.get(1, 0) * a[0] + w2.get(1, 1) * a[1],
            ];
            let h2 = [h[0] + o[0], h[1] + o[1]];
            for v in 0..2 {
                hand.push(h2[0] * e.get(v, 0) + h2[1] * e.get(v, 1));
            }
        }
        let hand = Matrix::from_vec(2, 2, hand).unwrap();
        assert!(logits.max_abs_diff(&hand) < 1e-12);
    }

    #[test]
    fn out_of_vocab_token_is_input_error() {
        assert!(matches!(tiny(0).forward(&[9]), Err(Error::Input(_))));
    }

    #[test]
    fn nll_examples() {
        let uniform = Matrix::zeros(1, 4);
        assert!((nll_loss(&uniform, &[2], &[true]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let certain = Matrix::from_rows(&[[20.0, 0.0, 0.0, 0.0]]);
        assert!(nll_loss(&certain, &[0], &[true]).unwrap() <= 1e-6 * 4.0);
        assert!(matches!(nll_loss(&uniform, &[0], &[false]), Err(Error::Contract(_))));
    }

    #[test]
    fn nll_matches_scalar_softmax() {
        let mut rng = seeded_rng(5);
        let logits = rng.normal_matrix(3, 5, 2.0);
        let targets = [4, 0, 2];
        let mask = [true, false, true];
        let mut expect = 0.0;
        for i in [0usize, 2] {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[targets[i]].exp() / z).ln();
        }
        expect /= 2.0;
        assert!((nll_loss(&logits, &targets, &mask).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut m = tiny(2);
        let before = m.forward(&[1, 2, 3]).unwrap();
        let snap = m.snapshot("W0");
        assert_eq!(snap, m.snapshot("W0"));
        let id = fc_in_id(0);
        m.add_to_layer(&id, &Matrix::filled(8, 4, 0.1)).unwrap();
        assert!(m.snapshot("W1").squared_distance(&snap).unwrap() > 0.0);
        m.restore(&snap).unwrap();
        assert_eq!(m.forward(&[1, 2, 3]).unwrap().data(), before.data());
    }

    #[test]
    fn restore_rejects_key_mismatch() {
        let mut m = tiny(2);
        let snap = m.snapshot("W0");
        m.set_editable(vec![fc_in_id(0)]).unwrap();
        assert!(matches!(m.restore(&snap), Err(Error::Contract(_))));
    }

    #[test]
    fn non_editable_layers_reject_edits() {
        let mut m = tiny(2);
        assert!(m.add_to_layer(&fc_out_id(0), &Matrix::zeros(4, 8)).is_err());
    }

    #[test]
    fn teacher_forcing_layout() {
        let p = Pair::new(vec![1, 2], vec![5, 6, 7]);
        let b = QueryBatch::teacher_forced([&p]).unwrap();
        assert_eq!(b.sequences[0], vec![1, 2, 5, 6]);
        assert_eq!(b.queries, vec![(0, 1), (0, 2), (0, 3)]);
        assert_eq!(b.targets(), &[5, 6, 7]);
    }
}
