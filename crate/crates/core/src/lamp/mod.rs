//! Label message passing network.
//!
//! Feature values are mapped to tokens through a dataset-wide vocabulary,
//! embedded together with their feature position, and read by label nodes
//! through attention. Label nodes then exchange messages along the prior
//! co-occurrence graph, and each label node ends in its own sigmoid readout.

pub mod network;

use std::io::{Read, Write};

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabelGraph, LabelSet, NUM_LABELS};
use crate::error::{Error, Result};
use crate::model::MultiLabelModel;
use crate::rng;
use network::{Dims, Dropout, Grads, Layout, Params};

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5AFF;
const DROPOUT_STREAM: u64 = 0xD809;
/// Samples per gradient partial sum. Fixed so the reduction order never
/// depends on the thread count.
const GRAD_CHUNK: usize = 8;

/// Globally distinct raw feature values, ascending. Token `i + 1` is
/// `values[i]`; 0 is padding and `values.len() + 1` is the unknown token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueVocab {
    values: Vec<f64>,
}

pub const PAD_TOKEN: usize = 0;

/// Folds -0.0 into 0.0 so both map to one token.
fn canonical(v: f64) -> f64 {
    v + 0.0
}

pub fn build_vocab(train: &Dataset) -> Result<ValueVocab> {
    if train.is_empty() {
        return Err(Error::Training("cannot build a vocabulary from an empty dataset".into()));
    }
    let mut values: Vec<f64> = train
        .samples()
        .iter()
        .flat_map(|s| s.features.iter().map(|&v| canonical(v)))
        .collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    Ok(ValueVocab { values })
}

impl ValueVocab {
    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("vocabulary values must be finite"));
        }
        values.iter_mut().for_each(|v| *v = canonical(*v));
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(ValueVocab { values })
    }

    /// Number of distinct values (reserved tokens excluded).
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn unknown_token(&self) -> usize {
        self.values.len() + 1
    }

    /// Size of the embedding table.
    pub fn n_tokens(&self) -> usize {
        self.values.len() + 2
    }

    pub fn token(&self, v: f64) -> usize {
        let v = canonical(v);
        match self.values.binary_search_by(|x| x.total_cmp(&v)) {
            Ok(i) => i + 1,
            Err(_) => self.unknown_token(),
        }
    }

    pub fn encode(&self, features: &[f64], n_features: usize) -> Result<Vec<usize>> {
        if features.len() != n_features {
            return Err(Error::SchemaMismatch {
                expected: format!("{n_features} features"),
                found: format!("{} features", features.len()),
            });
        }
        Ok(features.iter().map(|&v| self.token(v)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    /// Edges between labels that co-occur in training, plus self-edges.
    Prior,
    /// Every label attends to every label.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LampConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rounds: usize,
    pub heads: usize,
    pub label_mask: MaskKind,
    pub seed: u64,
}

impl Default for LampConfig {
    fn default() -> Self {
        LampConfig {
            d_model: 512,
            d_hidden: 1024,
            dropout: 0.1,
            learning_rate: 0.0002,
            batch_size: 64,
            epochs: 100,
            rounds: 2,
            heads: 4,
            label_mask: MaskKind::Prior,
            seed: 0,
        }
    }
}

impl LampConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("batch_size", self.batch_size),
            ("rounds", self.rounds),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LampModel {
    config: LampConfig,
    vocab: ValueVocab,
    mask: Vec<Vec<bool>>,
    dims: Dims,
    params: Params,
}

/// Mean loss and summed gradient of a batch (gradient not yet averaged).
struct BatchResult {
    loss: f64,
    grads: Grads,
}

impl LampModel {
    /// Freshly initialised model. `mask` must be square, symmetric and have a
    /// true diagonal.
    pub fn new(config: LampConfig, vocab: ValueVocab, mask: Vec<Vec<bool>>, n_features: usize) -> Result<Self> {
        config.validate()?;
        check_mask(&mask)?;
        if n_features == 0 {
            return Err(Error::Config("model needs at least one feature".into()));
        }
        let dims = Dims {
            n_tokens: vocab.n_tokens(),
            n_features,
            n_labels: mask.len(),
            d_model: config.d_model,
            d_hidden: config.d_hidden,
            heads: config.heads,
            rounds: config.rounds,
        };
        let params = network::init_params(&dims, &mut rng::stream(config.seed, &[INIT_STREAM]));
        Ok(LampModel {
            config,
            vocab,
            mask,
            dims,
            params,
        })
    }

    /// Rebuilds a model from stored parts, checking every tensor shape.
    pub fn from_parts(
        config: LampConfig,
        vocab: ValueVocab,
        mask: Vec<Vec<bool>>,
        n_features: usize,
        params: Params,
    ) -> Result<Self> {
        let mut model = LampModel::new(config, vocab, mask, n_features)?;
        let expected = Layout::new(model.dims.rounds).shapes(&model.dims);
        if params.len() != expected.len() {
            return Err(Error::ModelFormat(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (i, (p, shape)) in params.iter().zip(&expected).enumerate() {
            if p.dim() != *shape {
                return Err(Error::ModelFormat(format!(
                    "tensor {i} has shape {:?}, expected {shape:?}",
                    p.dim()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &LampConfig {
        &self.config
    }

    pub fn vocab(&self) -> &ValueVocab {
        &self.vocab
    }

    pub fn mask(&self) -> &[Vec<bool>] {
        &self.mask
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn parameter_names(&self) -> Vec<String> {
        Layout::new(self.dims.rounds).names()
    }

    pub fn encode(&self, features: &[f64]) -> Result<Vec<usize>> {
        self.vocab.encode(features, self.dims.n_features)
    }

    /// Evaluation-mode forward pass over a token sequence.
    pub fn forward_tokens(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.len() != self.dims.n_features {
            return Err(Error::SchemaMismatch {
                expected: format!("{} tokens", self.dims.n_features),
                found: format!("{} tokens", tokens.len()),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.dims.n_tokens) {
            return Err(Error::invalid(format!("token {bad} is outside the vocabulary")));
        }
        let trace = network::forward::<ChaCha8Rng>(&self.params, &self.dims, tokens, &self.mask, None);
        Ok(trace.probs.to_vec())
    }

    pub fn predict_with_threshold(&self, features: &[f64], threshold: f64) -> Result<LabelSet> {
        let p = self.predict_proba(features)?;
        Ok(LabelSet::from_bools(&p.iter().map(|&v| v >= threshold).collect::<Vec<_>>()))
    }

    /// Loss (mean over the batch of the label-summed BCE) and its gradient,
    /// without dropout. Exposed for gradient checking.
    pub fn loss_and_gradient(&self, tokens: &[Vec<usize>], targets: &[Vec<f64>]) -> (f64, Grads) {
        let r = self.batch(tokens, targets, None);
        let mut grads = r.grads;
        grads.scale(1.0 / tokens.len() as f64);
        (r.loss / tokens.len() as f64, grads)
    }

    /// Summed loss and gradient over a batch. With `dropout = Some((epoch,
    /// offsets))`, sample `i` draws its masks from stream `(epoch, offsets[i])`.
    fn batch(&self, tokens: &[Vec<usize>], targets: &[Vec<f64>], dropout: Option<(usize, &[usize])>) -> BatchResult {
        let chunks: Vec<BatchResult> = (0..tokens.len())
            .collect::<Vec<_>>()
            .par_chunks(GRAD_CHUNK)
            .map(|idx| {
                let mut grads = Grads::zeros(&self.params);
                let mut loss = 0.0;
                for &i in idx {
                    let trace = match dropout {
                        Some((epoch, offsets)) if self.config.dropout > 0.0 => {
                            let mut r = rng::stream(
                                self.config.seed,
                                &[DROPOUT_STREAM, epoch as u64, offsets[i] as u64],
                            );
                            let drop = Dropout {
                                rate: self.config.dropout,
                                rng: &mut r,
                            };
                            network::forward(&self.params, &self.dims, &tokens[i], &self.mask, Some(drop))
                        }
                        _ => network::forward::<ChaCha8Rng>(&self.params, &self.dims, &tokens[i], &self.mask, None),
                    };
                    loss += network::bce_loss(&trace.logits, &targets[i]);
                    network::backward(&self.params, &self.dims, &trace, &targets[i], &mut grads);
                }
                BatchResult { loss, grads }
            })
            .collect();
        let mut total = BatchResult {
            loss: 0.0,
            grads: Grads::zeros(&self.params),
        };
        for c in chunks {
            total.loss += c.loss;
            total.grads.add(&c.grads);
        }
        total
    }

    /// Mini-batch Adam over `train`; returns the mean training loss of every
    /// epoch. Parameters are rounded to 32-bit precision at the end so a
    /// saved and reloaded model predicts exactly like the trained one.
    pub fn train(&mut self, train: &Dataset) -> Result<Vec<f64>> {
        if train.is_empty() {
            return Err(Error::Training("training set is empty".into()));
        }
        if self.dims.n_labels != NUM_LABELS {
            return Err(Error::Training(format!(
                "model has {} label nodes, datasets carry {NUM_LABELS}",
                self.dims.n_labels
            )));
        }
        let tokens: Vec<Vec<usize>> = train
            .samples()
            .iter()
            .map(|s| self.encode(&s.features))
            .collect::<Result<_>>()?;
        let targets: Vec<Vec<f64>> = train
            .samples()
            .iter()
            .map(|s| s.labels.to_bools().iter().map(|&b| f64::from(u8::from(b))).collect())
            .collect();
        let history = self.train_tokens(&tokens, &targets)?;
        if self.config.epochs > 0 {
            round_to_f32(&mut self.params);
        }
        Ok(history)
    }

    /// Training loop over pre-encoded inputs with arbitrary label width.
    pub fn train_tokens(&mut self, tokens: &[Vec<usize>], targets: &[Vec<f64>]) -> Result<Vec<f64>> {
        if tokens.is_empty() || tokens.len() != targets.len() {
            return Err(Error::Training("need a non-empty, aligned training set".into()));
        }
        if targets.iter().any(|t| t.len() != self.dims.n_labels) {
            return Err(Error::Training("target width differs from label count".into()));
        }
        let n = tokens.len();
        let mut adam = Adam::new(&self.params);
        let mut history = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(
                order.as_mut_slice(),
                &mut rng::stream(self.config.seed, &[SHUFFLE_STREAM, epoch as u64]),
            );
            let mut epoch_loss = 0.0;
            for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
                let bt: Vec<Vec<usize>> = batch.iter().map(|&i| tokens[i].clone()).collect();
                let by: Vec<Vec<f64>> = batch.iter().map(|&i| targets[i].clone()).collect();
                let offsets: Vec<usize> = (0..batch.len()).map(|k| b * self.config.batch_size + k).collect();
                let mut r = self.batch(&bt, &by, Some((epoch, &offsets)));
                epoch_loss += r.loss;
                r.grads.scale(1.0 / batch.len() as f64);
                adam.step(&mut self.params, &r.grads, self.config.learning_rate);
            }
            history.push(epoch_loss / n as f64);
        }
        Ok(history)
    }

    /// Label states entering the label-to-label block of `round` for a token
    /// sequence (evaluation mode).
    pub fn label_states_before_label_block(&self, tokens: &[usize], round: usize) -> Array2<f64> {
        let z = network::embed(&self.params, tokens);
        let mut h = self.params[network::LABEL_EMB].clone();
        for r in 0..=round {
            h = network::feature_block(&self.params, &self.dims, r, &h, &z);
            if r == round {
                break;
            }
            h = network::label_block(&self.params, &self.dims, r, &h, &self.mask);
        }
        h
    }

    /// Applies the label-to-label block of `round` to arbitrary label states.
    pub fn label_block(&self, round: usize, states: &Array2<f64>) -> Array2<f64> {
        network::label_block(&self.params, &self.dims, round, states, &self.mask)
    }

    /// Attention weights (per head) of the label-to-label block of `round`.
    pub fn label_attention(&self, round: usize, states: &Array2<f64>) -> Vec<Array2<f64>> {
        network::label_attention(&self.params, &self.dims, round, states, &self.mask)
    }

    /// Serializes the parameter tensors: a `u32` tensor count, then for each
    /// tensor `u32` rows, `u32` cols and the values as little-endian `f32`.
    pub fn write_tensors<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write_tensors(&self.params, w)
    }
}

impl MultiLabelModel for LampModel {
    fn n_features(&self) -> usize {
        self.dims.n_features
    }

    fn n_labels(&self) -> usize {
        self.dims.n_labels
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let tokens = self.encode(x)?;
        self.forward_tokens(&tokens)
    }
}

/// Builds the vocabulary and prior mask from `train`, then trains.
pub fn fit_lamp(train: &Dataset, config: &LampConfig) -> Result<(LampModel, Vec<f64>)> {
    let vocab = build_vocab(train)?;
    let mask = match config.label_mask {
        MaskKind::Prior => train.cooccurrence_graph().message_mask(),
        MaskKind::Full => vec![vec![true; NUM_LABELS]; NUM_LABELS],
    };
    let mut model = LampModel::new(config.clone(), vocab, mask, train.n_features())?;
    let history = model.train(train)?;
    Ok((model, history))
}

/// Prior mask for a graph, exposed for callers that build models by hand.
pub fn prior_mask(graph: &LabelGraph) -> Vec<Vec<bool>> {
    graph.message_mask()
}

fn check_mask(mask: &[Vec<bool>]) -> Result<()> {
    let n = mask.len();
    if n == 0 {
        return Err(Error::Config("label mask is empty".into()));
    }
    for (i, row) in mask.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Config("label mask is not square".into()));
        }
        if !row[i] {
            return Err(Error::Config(format!("label mask lacks self-edge {i}")));
        }
        for (j, &v) in row.iter().enumerate() {
            if mask[j][i] != v {
                return Err(Error::Config("label mask is not symmetric".into()));
            }
        }
    }
    Ok(())
}

fn round_to_f32(params: &mut Params) {
    for p in params {
        p.mapv_inplace(|v| v as f32 as f64);
    }
}

pub fn write_tensors<W: Write>(params: &Params, w: &mut W) -> std::io::Result<()> {
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let (r, c) = p.dim();
        w.write_all(&(r as u32).to_le_bytes())?;
        w.write_all(&(c as u32).to_le_bytes())?;
        for &v in p.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Params> {
    fn u32_from<R: Read>(r: &mut R) -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|e| Error::ModelFormat(format!("truncated tensor block: {e}")))?;
        Ok(u32::from_le_bytes(b))
    }
    let count = u32_from(r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let rows = u32_from(r)? as usize;
        let cols = u32_from(r)? as usize;
        let mut data = Vec::with_capacity(rows.saturating_mul(cols).min(1 << 24));
        for _ in 0..rows * cols {
            data.push(f32::from_bits(u32_from(r)?) as f64);
        }
        out.push(
            Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::ModelFormat(format!("bad tensor shape: {e}")))?,
        );
    }
    Ok(out)
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
struct Adam {
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &Params) -> Self {
        let zeros: Params = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let token_grad;
            let g = if i == network::TOKEN_EMB {
                token_grad = grads.token_dense(p.nrows(), p.ncols());
                &token_grad
            } else {
                &grads.dense[i]
            };
            ndarray::Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                    *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FeatureSchema, Label, TraceSample};

    fn tiny_config() -> LampConfig {
        LampConfig {
            d_model: 8,
            d_hidden: 12,
            dropout: 0.0,
            learning_rate: 0.01,
            batch_size: 4,
            epochs: 1,
            rounds: 1,
            heads: 2,
            label_mask: MaskKind::Prior,
            seed: 5,
        }
    }

    fn tiny_model() -> LampModel {
        let vocab = ValueVocab::from_values(vec![0.0, 1.0, 2.5, 7.0]).unwrap();
        let mask = vec![
            vec![true, true, false],
            vec![true, true, false],
            vec![false, false, true],
        ];
        LampModel::new(tiny_config(), vocab, mask, 3).unwrap()
    }

    /// Central differences over every scalar parameter.
    fn numeric_gradient(model: &LampModel, tokens: &[Vec<usize>], targets: &[Vec<f64>]) -> Params {
        let h = 1e-6;
        let mut probe = model.clone();
        let mut out = Vec::new();
        for i in 0..model.params.len() {
            let mut g = Array2::zeros(model.params[i].raw_dim());
            for idx in ndarray::indices(model.params[i].raw_dim()) {
                let orig = probe.params[i][idx];
                probe.params[i][idx] = orig + h;
                let up = probe.loss_and_gradient(tokens, targets).0;
                probe.params[i][idx] = orig - h;
                let down = probe.loss_and_gradient(tokens, targets).0;
                probe.params[i][idx] = orig;
                g[idx] = (up - down) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = tiny_model();
        let tokens = vec![vec![1, 2, 3], vec![4, 1, 5], vec![2, 2, 0]];
        let targets = vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]];
        let (_, grads) = model.loss_and_gradient(&tokens, &targets);
        let numeric = numeric_gradient(&model, &tokens, &targets);
        let names = model.parameter_names();
        for (i, num) in numeric.iter().enumerate() {
            let analytic = if i == network::TOKEN_EMB {
                grads.token_dense(model.dims.n_tokens, model.dims.d_model)
            } else {
                grads.dense[i].clone()
            };
            let diff = (&analytic - num).mapv(|v| v * v).sum().sqrt();
            let scale = analytic.mapv(|v| v * v).sum().sqrt() + num.mapv(|v| v * v).sum().sqrt();
            let rel = if scale == 0.0 { 0.0 } else { diff / scale };
            assert!(rel <= 1e-4, "{}: relative error {rel}", names[i]);
        }
    }

    #[test]
    fn isolated_label_ignores_other_states() {
        let model = tiny_model();
        let states = model.label_states_before_label_block(&[1, 2, 3], 0);
        let before = model.label_block(0, &states);
        let mut perturbed = states.clone();
        for j in 0..2 {
            for k in 0..perturbed.ncols() {
                perturbed[[j, k]] += 0.37 * (1 + j + k) as f64;
            }
        }
        let after = model.label_block(0, &perturbed);
        assert_eq!(before.row(2), after.row(2));
        assert_ne!(before.row(0), after.row(0));
        for w in model.label_attention(0, &states) {
            assert_eq!(w[[2, 2]], 1.0);
        }
    }

    #[test]
    fn vocab_is_global_and_reserves_ids() {
        let schema = FeatureSchema::from_indices(&[0, 1]).unwrap();
        let samples = vec![
            TraceSample {
                features: vec![0.0, 1.0],
                labels: LabelSet::empty().with(Label::Miner),
                source_id: "a".into(),
            },
            TraceSample {
                features: vec![1.0, -0.0],
                labels: LabelSet::empty().with(Label::Miner),
                source_id: "b".into(),
            },
        ];
        let d = Dataset::new("v", schema, samples).unwrap();
        let vocab = build_vocab(&d).unwrap();
        assert_eq!(vocab.len(), 2);
        assert_eq!(vocab.n_tokens(), 4);
        assert_eq!(vocab.token(0.0), 1);
        assert_eq!(vocab.token(-0.0), 1);
        assert_eq!(vocab.token(1.0), 2);
        assert_eq!(vocab.token(0.5), vocab.unknown_token());
        assert_eq!(vocab.encode(&[1.0, 9.0], 2).unwrap(), vec![2, 3]);
        assert!(vocab.encode(&[1.0], 2).is_err());
    }

    #[test]
    fn outputs_are_probabilities_and_deterministic() {
        let model = tiny_model();
        let unknown = model.vocab.unknown_token();
        let a = model.forward_tokens(&[unknown; 3]).unwrap();
        let b = model.forward_tokens(&[unknown; 3]).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(model.forward_tokens(&[1, 2]).is_err());
    }

    #[test]
    fn thresholds_control_prediction() {
        let model = tiny_model();
        let x = [0.0, 1.0, 2.5];
        let all = model.predict_with_threshold(&x, 0.0).unwrap();
        assert_eq!(all.len(), 3);
        let none = model.predict_with_threshold(&x, 1.0 + 1e-9).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut model = tiny_model();
        let before = model.clone();
        model.config.epochs = 0;
        let history = model.train_tokens(&[vec![1, 2, 3]], &[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(history.is_empty());
        assert_eq!(model.params, before.params);
    }

    #[test]
    fn tensors_round_trip() {
        let mut model = tiny_model();
        round_to_f32(&mut model.params);
        let mut bytes = Vec::new();
        model.write_tensors(&mut bytes).unwrap();
        let params = read_tensors(&mut bytes.as_slice()).unwrap();
        assert_eq!(params, model.params);
        let rebuilt = LampModel::from_parts(
            model.config.clone(),
            model.vocab.clone(),
            model.mask.clone(),
            3,
            params,
        )
        .unwrap();
        assert_eq!(rebuilt, model);
        assert!(read_tensors(&mut &bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn bad_masks_and_configs_are_rejected() {
        let vocab = ValueVocab::from_values(vec![1.0]).unwrap();
        let asym = vec![vec![true, true], vec![false, true]];
        assert!(LampModel::new(tiny_config(), vocab.clone(), asym, 2).is_err());
        let cfg = LampConfig {
            heads: 3,
            ..tiny_config()
        };
        assert!(LampModel::new(cfg, vocab, vec![vec![true]], 2).is_err());
        assert!(LampConfig {
            dropout: 1.0,
            ..tiny_config()
        }
        .validate()
        .is_err());
    }
}
