//! Parameters plus hand-written forward and backward passes of the label
//! message passing network.
//!
//! Shapes: `F` input nodes (one per feature), `L` label nodes, model width `d`,
//! feed-forward width `h`. Each round runs two blocks. The first lets every
//! label node attend over the input nodes, the second lets label nodes attend
//! over each other under the label mask. A block computes the aggregated
//! message `m = MultiHeadAttention(h, kv)` and then applies the update
//! `u = h + drop(m)`, `h' = u + drop(W2 relu(W1 u + b1) + b2)`.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Parameter tensors, addressed through [`Layout`].
pub type Params = Vec<Array2<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n_tokens: usize,
    pub n_features: usize,
    pub n_labels: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub heads: usize,
    pub rounds: usize,
}

/// Index arithmetic over the flat parameter list.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    rounds: usize,
}

pub const TOKEN_EMB: usize = 0;
pub const POS_EMB: usize = 1;
pub const LABEL_EMB: usize = 2;
const BLOCK_LEN: usize = 8;
const ROUND_LEN: usize = 2 * BLOCK_LEN;
const BLOCK_PARTS: [&str; BLOCK_LEN] = ["wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"];

impl Layout {
    pub fn new(rounds: usize) -> Self {
        Layout { rounds }
    }

    pub fn feature_block(&self, round: usize) -> usize {
        3 + ROUND_LEN * round
    }

    pub fn label_block(&self, round: usize) -> usize {
        3 + ROUND_LEN * round + BLOCK_LEN
    }

    pub fn readout_w(&self) -> usize {
        3 + ROUND_LEN * self.rounds
    }

    pub fn readout_b(&self) -> usize {
        self.readout_w() + 1
    }

    pub fn len(&self) -> usize {
        self.readout_b() + 1
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["token_emb".into(), "pos_emb".into(), "label_emb".into()];
        for r in 0..self.rounds {
            for block in ["feature", "label"] {
                for part in BLOCK_PARTS {
                    out.push(format!("round{r}.{block}.{part}"));
                }
            }
        }
        out.push("readout.w".into());
        out.push("readout.b".into());
        out
    }

    pub fn shapes(&self, dims: &Dims) -> Vec<(usize, usize)> {
        let (d, h) = (dims.d_model, dims.d_hidden);
        let block = [(d, d), (d, d), (d, d), (d, d), (d, h), (1, h), (h, d), (1, d)];
        let mut out = vec![
            (dims.n_tokens, d),
            (dims.n_features, d),
            (dims.n_labels, d),
        ];
        for _ in 0..self.rounds {
            out.extend(block);
            out.extend(block);
        }
        out.push((dims.n_labels, d));
        out.push((1, dims.n_labels));
        out
    }
}

pub fn init_params<R: Rng>(dims: &Dims, rng: &mut R) -> Params {
    let layout = Layout::new(dims.rounds);
    let emb = Normal::new(0.0, 1.0 / (dims.d_model as f64).sqrt()).expect("valid std");
    layout
        .shapes(dims)
        .into_iter()
        .enumerate()
        .map(|(i, (r, c))| {
            if i <= LABEL_EMB {
                Array2::from_shape_fn((r, c), |_| emb.sample(rng))
            } else if r == 1 {
                Array2::zeros((r, c))
            } else {
                let bound = (6.0 / (r + c) as f64).sqrt();
                let u = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                Array2::from_shape_fn((r, c), |_| u.sample(rng))
            }
        })
        .collect()
}

/// Gradient accumulator. Token-embedding rows are stored sparsely.
#[derive(Clone, Debug)]
pub struct Grads {
    pub dense: Params,
    pub tokens: std::collections::BTreeMap<usize, Array1<f64>>,
}

impl Grads {
    pub fn zeros(params: &Params) -> Self {
        let mut dense: Params = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        dense[TOKEN_EMB] = Array2::zeros((0, 0));
        Grads {
            dense,
            tokens: Default::default(),
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (i, (a, b)) in self.dense.iter_mut().zip(&other.dense).enumerate() {
            if i != TOKEN_EMB {
                *a += b;
            }
        }
        for (t, g) in &other.tokens {
            match self.tokens.get_mut(t) {
                Some(row) => *row += g,
                None => {
                    self.tokens.insert(*t, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (i, a) in self.dense.iter_mut().enumerate() {
            if i != TOKEN_EMB {
                a.mapv_inplace(|v| v * k);
            }
        }
        for g in self.tokens.values_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }

    /// Dense copy of the token-embedding gradient.
    pub fn token_dense(&self, n_tokens: usize, d: usize) -> Array2<f64> {
        let mut out = Array2::zeros((n_tokens, d));
        for (t, g) in &self.tokens {
            out.row_mut(*t).assign(g);
        }
        out
    }
}

struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

struct BlockCache {
    attn: AttnCache,
    msg_drop: Option<Array2<f64>>,
    u: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Trace {
    tokens: Vec<usize>,
    z: Array2<f64>,
    states: Vec<Array2<f64>>,
    blocks: Vec<BlockCache>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
}

pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

fn dropout_mask<R: Rng>(shape: (usize, usize), drop: &mut Option<Dropout<'_, R>>) -> Option<Array2<f64>> {
    let d = drop.as_mut()?;
    if d.rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - d.rate;
    Some(Array2::from_shape_fn(shape, |_| {
        if d.rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    }))
}

/// Row softmax; masked entries get weight exactly zero.
pub fn masked_softmax(scores: &Array2<f64>, mask: Option<&[Vec<bool>]>) -> Array2<f64> {
    let mut out = Array2::zeros(scores.raw_dim());
    for (i, row) in scores.outer_iter().enumerate() {
        let allowed = |j: usize| mask.is_none_or(|m| m[i][j]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| allowed(*j))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                out[[i, j]] = e;
                total += e;
            }
        }
        out.row_mut(i).mapv_inplace(|e| e / total);
    }
    out
}

fn attention_forward(
    p: &Params,
    base: usize,
    queries: &Array2<f64>,
    kv: &Array2<f64>,
    mask: Option<&[Vec<bool>]>,
    heads: usize,
) -> AttnCache {
    let q = queries.dot(&p[base]);
    let k = kv.dot(&p[base + 1]);
    let v = kv.dot(&p[base + 2]);
    let d = q.ncols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut concat = Array2::zeros((q.nrows(), d));
    let mut weights = Vec::with_capacity(heads);
    for a in 0..heads {
        let cols = s![.., a * dk..(a + 1) * dk];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let w = masked_softmax(&scores, mask);
        concat.slice_mut(cols).assign(&w.dot(&v.slice(cols)));
        weights.push(w);
    }
    AttnCache {
        q,
        k,
        v,
        weights,
        concat,
    }
}

/// Returns (d queries, d kv) and accumulates projection gradients.
fn attention_backward(
    p: &Params,
    base: usize,
    cache: &AttnCache,
    queries: &Array2<f64>,
    kv: &Array2<f64>,
    d_msg: &Array2<f64>,
    heads: usize,
    grads: &mut Grads,
) -> (Array2<f64>, Array2<f64>) {
    let d = cache.q.ncols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    grads.dense[base + 3] += &cache.concat.t().dot(d_msg);
    let d_concat = d_msg.dot(&p[base + 3].t());
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk_ = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for a in 0..heads {
        let cols = s![.., a * dk..(a + 1) * dk];
        let w = &cache.weights[a];
        let d_out = d_concat.slice(cols);
        let dw = d_out.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&w.t().dot(&d_out));
        // softmax backward, row-wise
        let row_dot = (&dw * w).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = (w * &(&dw - &row_dot)) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk_.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    grads.dense[base] += &queries.t().dot(&dq);
    grads.dense[base + 1] += &kv.t().dot(&dk_);
    grads.dense[base + 2] += &kv.t().dot(&dv);
    let d_queries = dq.dot(&p[base].t());
    let d_kv = dk_.dot(&p[base + 1].t()) + dv.dot(&p[base + 2].t());
    (d_queries, d_kv)
}

#[allow(clippy::too_many_arguments)]
fn block_forward<R: Rng>(
    p: &Params,
    base: usize,
    h: &Array2<f64>,
    kv: Option<&Array2<f64>>,
    mask: Option<&[Vec<bool>]>,
    heads: usize,
    drop: &mut Option<Dropout<'_, R>>,
) -> (Array2<f64>, BlockCache) {
    let attn = attention_forward(p, base, h, kv.unwrap_or(h), mask, heads);
    let msg = attn.concat.dot(&p[base + 3]);
    let msg_drop = dropout_mask(msg.dim(), drop);
    let u = match &msg_drop {
        Some(m) => h + &(&msg * m),
        None => h + &msg,
    };
    let pre = u.dot(&p[base + 4]) + &p[base + 5];
    let act = pre.mapv(|v| v.max(0.0));
    let ffn = act.dot(&p[base + 6]) + &p[base + 7];
    let ffn_drop = dropout_mask(ffn.dim(), drop);
    let out = match &ffn_drop {
        Some(m) => &u + &(&ffn * m),
        None => &u + &ffn,
    };
    (
        out,
        BlockCache {
            attn,
            msg_drop,
            u,
            pre,
            act,
            ffn_drop,
        },
    )
}

/// Returns (d h_in, d kv) where `d kv` is `None` for self-attention blocks
/// (its contribution is already folded into `d h_in`).
#[allow(clippy::too_many_arguments)]
fn block_backward(
    p: &Params,
    base: usize,
    cache: &BlockCache,
    h: &Array2<f64>,
    kv: Option<&Array2<f64>>,
    d_out: &Array2<f64>,
    heads: usize,
    grads: &mut Grads,
) -> (Array2<f64>, Option<Array2<f64>>) {
    // out = u + drop(ffn)
    let d_ffn = match &cache.ffn_drop {
        Some(m) => d_out * m,
        None => d_out.clone(),
    };
    grads.dense[base + 7] += &d_ffn.sum_axis(Axis(0)).insert_axis(Axis(0));
    grads.dense[base + 6] += &cache.act.t().dot(&d_ffn);
    let d_act = d_ffn.dot(&p[base + 6].t());
    let mut d_pre = d_act;
    ndarray::Zip::from(&mut d_pre)
        .and(&cache.pre)
        .for_each(|g, &x| {
            if x <= 0.0 {
                *g = 0.0
            }
        });
    grads.dense[base + 5] += &d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
    grads.dense[base + 4] += &cache.u.t().dot(&d_pre);
    let d_u = d_out + &d_pre.dot(&p[base + 4].t());
    // u = h + drop(msg)
    let d_msg = match &cache.msg_drop {
        Some(m) => &d_u * m,
        None => d_u.clone(),
    };
    let (d_q, d_kv) = attention_backward(
        p,
        base,
        &cache.attn,
        h,
        kv.unwrap_or(h),
        &d_msg,
        heads,
        grads,
    );
    let mut d_h = d_u + d_q;
    match kv {
        Some(_) => (d_h, Some(d_kv)),
        None => {
            d_h += &d_kv;
            (d_h, None)
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Input node states: token embedding plus position embedding.
pub fn embed(p: &Params, tokens: &[usize]) -> Array2<f64> {
    let mut z = p[POS_EMB].clone();
    for (j, &t) in tokens.iter().enumerate() {
        let mut row = z.row_mut(j);
        row += &p[TOKEN_EMB].row(t);
    }
    z
}

/// One label-to-label block applied to given label states (no dropout).
pub fn label_block(p: &Params, dims: &Dims, round: usize, h: &Array2<f64>, mask: &[Vec<bool>]) -> Array2<f64> {
    let base = Layout::new(dims.rounds).label_block(round);
    let mut none: Option<Dropout<'_, rand_chacha::ChaCha8Rng>> = None;
    block_forward(p, base, h, None, Some(mask), dims.heads, &mut none).0
}

/// One feature-to-label block applied to label states `h` over input nodes `z`.
pub fn feature_block(p: &Params, dims: &Dims, round: usize, h: &Array2<f64>, z: &Array2<f64>) -> Array2<f64> {
    let base = Layout::new(dims.rounds).feature_block(round);
    let mut none: Option<Dropout<'_, rand_chacha::ChaCha8Rng>> = None;
    block_forward(p, base, h, Some(z), None, dims.heads, &mut none).0
}

/// Attention weights of every head in the label-to-label block of `round`.
pub fn label_attention(p: &Params, dims: &Dims, round: usize, h: &Array2<f64>, mask: &[Vec<bool>]) -> Vec<Array2<f64>> {
    let base = Layout::new(dims.rounds).label_block(round);
    attention_forward(p, base, h, h, Some(mask), dims.heads).weights
}

/// Attention weights of every head in the feature-to-label block of `round`
/// when label states are `h` and input node states are `z`.
pub fn feature_attention(p: &Params, dims: &Dims, round: usize, h: &Array2<f64>, z: &Array2<f64>) -> Vec<Array2<f64>> {
    let base = Layout::new(dims.rounds).feature_block(round);
    attention_forward(p, base, h, z, None, dims.heads).weights
}

pub fn forward<R: Rng>(
    p: &Params,
    dims: &Dims,
    tokens: &[usize],
    mask: &[Vec<bool>],
    mut drop: Option<Dropout<'_, R>>,
) -> Trace {
    let layout = Layout::new(dims.rounds);
    let z = embed(p, tokens);
    let mut h = p[LABEL_EMB].clone();
    let mut states = Vec::with_capacity(2 * dims.rounds + 1);
    let mut blocks = Vec::with_capacity(2 * dims.rounds);
    for r in 0..dims.rounds {
        states.push(h.clone());
        let (h1, c1) = block_forward(p, layout.feature_block(r), &h, Some(&z), None, dims.heads, &mut drop);
        blocks.push(c1);
        states.push(h1.clone());
        let (h2, c2) = block_forward(p, layout.label_block(r), &h1, None, Some(mask), dims.heads, &mut drop);
        blocks.push(c2);
        h = h2;
    }
    let w = &p[layout.readout_w()];
    let b = &p[layout.readout_b()];
    let logits = Array1::from_shape_fn(dims.n_labels, |i| h.row(i).dot(&w.row(i)) + b[[0, i]]);
    let probs = logits.mapv(sigmoid);
    states.push(h);
    Trace {
        tokens: tokens.to_vec(),
        z,
        states,
        blocks,
        logits,
        probs,
    }
}

/// Binary cross-entropy summed over labels, computed from logits.
pub fn bce_loss(logits: &Array1<f64>, targets: &[f64]) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
        .sum()
}

/// Accumulates d(loss)/d(params) for one traced sample into `grads`.
pub fn backward(p: &Params, dims: &Dims, trace: &Trace, targets: &[f64], grads: &mut Grads) {
    let layout = Layout::new(dims.rounds);
    let h_final = trace.states.last().expect("final state");
    let w = &p[layout.readout_w()];
    let d_logits: Array1<f64> = &trace.probs - &Array1::from(targets.to_vec());
    let mut d_h = Array2::zeros(h_final.raw_dim());
    for i in 0..dims.n_labels {
        let g = d_logits[i];
        d_h.row_mut(i).assign(&(&w.row(i) * g));
        let mut gw = grads.dense[layout.readout_w()].row_mut(i);
        gw.scaled_add(g, &h_final.row(i));
        grads.dense[layout.readout_b()][[0, i]] += g;
    }
    let mut d_z = Array2::zeros(trace.z.raw_dim());
    for r in (0..dims.rounds).rev() {
        let (d_h1, _) = block_backward(
            p,
            layout.label_block(r),
            &trace.blocks[2 * r + 1],
            &trace.states[2 * r + 1],
            None,
            &d_h,
            dims.heads,
            grads,
        );
        let (d_h0, d_kv) = block_backward(
            p,
            layout.feature_block(r),
            &trace.blocks[2 * r],
            &trace.states[2 * r],
            Some(&trace.z),
            &d_h1,
            dims.heads,
            grads,
        );
        d_z += &d_kv.expect("cross-attention block");
        d_h = d_h0;
    }
    grads.dense[LABEL_EMB] += &d_h;
    grads.dense[POS_EMB] += &d_z;
    for (j, &t) in trace.tokens.iter().enumerate() {
        let row = d_z.row(j);
        match grads.tokens.get_mut(&t) {
            Some(g) => *g += &row,
            None => {
                grads.tokens.insert(t, row.to_owned());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny() -> Dims {
        Dims {
            n_tokens: 6,
            n_features: 3,
            n_labels: 3,
            d_model: 8,
            d_hidden: 12,
            heads: 2,
            rounds: 1,
        }
    }

    #[test]
    fn layout_names_match_shapes() {
        let dims = tiny();
        let layout = Layout::new(2);
        let dims2 = Dims { rounds: 2, ..dims };
        assert_eq!(layout.names().len(), layout.shapes(&dims2).len());
        assert_eq!(layout.len(), layout.names().len());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let dims = Dims { n_labels: 4, ..tiny() };
        let p = init_params(&dims, &mut rng::stream(1, &[]));
        let mask = vec![
            vec![true, true, false, false],
            vec![true, true, false, false],
            vec![false, false, true, false],
            vec![false, false, false, true],
        ];
        let h = p[LABEL_EMB].clone();
        for w in label_attention(&p, &dims, 0, &h, &mask) {
            for (i, row) in w.outer_iter().enumerate() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                for j in 0..4 {
                    if !mask[i][j] {
                        assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
        let z = embed(&p, &[1, 2, 3]);
        for w in feature_attention(&p, &dims, 0, &h, &z) {
            for row in w.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bce_matches_probability_form() {
        let logits = Array1::from(vec![-3.0, 0.2, 5.0]);
        let y = [0.0, 1.0, 1.0];
        let direct: f64 = logits
            .iter()
            .zip(&y)
            .map(|(&x, &t)| {
                let p = sigmoid(x);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        assert!((bce_loss(&logits, &y) - direct).abs() < 1e-12);
    }
}
