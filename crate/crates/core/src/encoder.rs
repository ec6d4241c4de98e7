//! Transformer encoder with hand-written reverse-mode gradients.
//!
//! ```text
//! ids -> embedding (|V| x emb) -> projection (emb x d) + sinusoidal positions
//!     -> [ self-attention -> dropout -> add & norm
//!          -> feed-forward (ReLU) -> dropout -> add & norm ] x layers
//! ```
//!
//! Weights are stored `in x out` so every affine map is `x · W + b` over
//! row-major `T x in` activations. All arithmetic is `f64`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD_ID;
use crate::error::{Error, Result};
use crate::tensor::{
    matrix_mut, matrix_ref, next_stamp, vector_mut, vector_ref, ParamSet, TensorMut, TensorRef,
};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_sequence: usize,
    pub dropout: f64,
    pub token_embedding_dim: usize,
    pub vocabulary_size: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// The full-size configuration: d_model 512, 8 heads, 6 layers,
    /// d_ff 2048, 128 tokens, dropout 0.1, embeddings of width 600.
    pub fn full(vocabulary_size: usize) -> Self {
        EncoderConfig {
            d_model: 512,
            heads: 8,
            layers: 6,
            d_ff: 2048,
            max_sequence: 128,
            dropout: 0.1,
            token_embedding_dim: 600,
            vocabulary_size,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 2 != 0 {
            return fail(format!("d_model {} must be even", self.d_model));
        }
        if self.max_sequence == 0 {
            return fail("max_sequence must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.d_ff == 0 || self.token_embedding_dim == 0 || self.vocabulary_size == 0 {
            return fail("d_ff, token_embedding_dim and vocabulary_size must be positive".into());
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d);
        self.vocabulary_size * self.token_embedding_dim
            + self.token_embedding_dim * d
            + self.layers * per_layer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array1<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

/// Trainable encoder tensors. Also used as the gradient container.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub embedding: Array2<f64>,
    pub projection: Array2<f64>,
    pub layers: Vec<LayerParams>,
    stamp: u64,
}

impl PartialEq for EncoderParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embedding == other.embedding
            && self.projection == other.projection
            && self.layers == other.layers
    }
}

impl EncoderParams {
    /// Modification stamp; changes on every mutable tensor access.
    pub fn stamp(&self) -> u64 {
        self.stamp
    }
}

impl ParamSet for EncoderParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![
            matrix_ref("encoder.embedding", &self.embedding),
            matrix_ref("encoder.projection", &self.projection),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("encoder.layer{i}.{s}");
            out.extend([
                matrix_ref(n("wq"), &l.wq),
                vector_ref(n("bq"), &l.bq),
                matrix_ref(n("wk"), &l.wk),
                vector_ref(n("bk"), &l.bk),
                matrix_ref(n("wv"), &l.wv),
                vector_ref(n("bv"), &l.bv),
                matrix_ref(n("wo"), &l.wo),
                vector_ref(n("bo"), &l.bo),
                vector_ref(n("ln1_gain"), &l.ln1_gain),
                vector_ref(n("ln1_bias"), &l.ln1_bias),
                matrix_ref(n("ff_w1"), &l.ff_w1),
                vector_ref(n("ff_b1"), &l.ff_b1),
                matrix_ref(n("ff_w2"), &l.ff_w2),
                vector_ref(n("ff_b2"), &l.ff_b2),
                vector_ref(n("ln2_gain"), &l.ln2_gain),
                vector_ref(n("ln2_bias"), &l.ln2_bias),
            ]);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        self.stamp = next_stamp();
        let mut out = vec![
            matrix_mut("encoder.embedding", &mut self.embedding),
            matrix_mut("encoder.projection", &mut self.projection),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("encoder.layer{i}.{s}");
            out.extend([
                matrix_mut(n("wq"), &mut l.wq),
                vector_mut(n("bq"), &mut l.bq),
                matrix_mut(n("wk"), &mut l.wk),
                vector_mut(n("bk"), &mut l.bk),
                matrix_mut(n("wv"), &mut l.wv),
                vector_mut(n("bv"), &mut l.bv),
                matrix_mut(n("wo"), &mut l.wo),
                vector_mut(n("bo"), &mut l.bo),
                vector_mut(n("ln1_gain"), &mut l.ln1_gain),
                vector_mut(n("ln1_bias"), &mut l.ln1_bias),
                matrix_mut(n("ff_w1"), &mut l.ff_w1),
                vector_mut(n("ff_b1"), &mut l.ff_b1),
                matrix_mut(n("ff_w2"), &mut l.ff_w2),
                vector_mut(n("ff_b2"), &mut l.ff_b2),
                vector_mut(n("ln2_gain"), &mut l.ln2_gain),
                vector_mut(n("ln2_bias"), &mut l.ln2_bias),
            ]);
        }
        out
    }
}

/// Uniform in `±sqrt(6 / (rows + cols))`.
pub(crate) fn scaled_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}

pub fn init_parameters(config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let embedding = scaled_uniform(&mut rng, config.vocabulary_size, config.token_embedding_dim);
    let projection = scaled_uniform(&mut rng, config.token_embedding_dim, d);
    let layers = (0..config.layers)
        .map(|_| {
            let wq = scaled_uniform(&mut rng, d, d);
            let wk = scaled_uniform(&mut rng, d, d);
            let wv = scaled_uniform(&mut rng, d, d);
            let wo = scaled_uniform(&mut rng, d, d);
            let ff_w1 = scaled_uniform(&mut rng, d, config.d_ff);
            let ff_w2 = scaled_uniform(&mut rng, config.d_ff, d);
            LayerParams {
                wq,
                bq: Array1::zeros(d),
                wk,
                bk: Array1::zeros(d),
                wv,
                bv: Array1::zeros(d),
                wo,
                bo: Array1::zeros(d),
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                ff_w1,
                ff_b1: Array1::zeros(config.d_ff),
                ff_w2,
                ff_b2: Array1::zeros(d),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
            }
        })
        .collect();
    Ok(EncoderParams {
        config: config.clone(),
        embedding,
        projection,
        layers,
        stamp: next_stamp(),
    })
}

pub fn count_parameters<P: ParamSet>(params: &P) -> usize {
    params.parameter_count()
}

pub fn positional_encoding(length: usize, dim: usize) -> Result<Array2<f64>> {
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional encoding dimension {dim} must be even"
        )));
    }
    let mut pe = Array2::zeros((length, dim));
    for pos in 0..length {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(pe)
}

struct LayerNormOut {
    y: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> LayerNormOut {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut inv_std = Array1::zeros(t);
    for (r, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    let y = &xhat * gain + bias;
    LayerNormOut { y, xhat, inv_std }
}

/// Returns `dx`, accumulating gain/bias gradients.
fn layer_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for r in 0..dy.nrows() {
        let g = dxhat.row(r);
        let xh = xhat.row(r);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        for ((o, gv), xv) in dx.row_mut(r).iter_mut().zip(g).zip(xh) {
            *o = inv_std[r] * (gv - mean_g - xv * mean_gx);
        }
    }
    dx
}

/// Row softmax over unmasked keys. Rows with no live key become all zero.
fn masked_softmax(scores: &mut Array2<f64>, key_live: &[bool]) {
    for mut row in scores.rows_mut() {
        let max = row
            .iter()
            .zip(key_live)
            .filter(|(_, &l)| l)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for (v, &live) in row.iter_mut().zip(key_live) {
            *v = if live { (*v - max).exp() } else { 0.0 };
            sum += *v;
        }
        row /= sum;
    }
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < p { 0.0 } else { keep })
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attention: Vec<Array2<f64>>,
    context: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln1_xhat: Array2<f64>,
    ln1_inv_std: Array1<f64>,
    normed: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ff_mask: Option<Array2<f64>>,
    ln2_xhat: Array2<f64>,
    ln2_inv_std: Array1<f64>,
}

/// Encoder output for one sentence plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct SequenceRepresentation {
    pub output: Array2<f64>,
    tokens: Vec<usize>,
    embedded: Array2<f64>,
    layers: Vec<LayerCache>,
    stamp: u64,
}

impl SequenceRepresentation {
    pub fn len(&self) -> usize {
        self.output.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.output.nrows() == 0
    }

    /// Attention weights of `layer`, `head` (rows = queries, columns = keys).
    pub fn attention(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        self.layers[layer].attention[head].view()
    }
}

/// Runs the encoder over one token-id sequence. Positions holding the
/// padding id are masked out as attention keys.
pub fn forward(
    tokens: &[usize],
    params: &EncoderParams,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<SequenceRepresentation> {
    let cfg = &params.config;
    let t = tokens.len();
    if t == 0 {
        return Err(Error::InvalidArgument("encoder input is empty".into()));
    }
    if t > cfg.max_sequence {
        return Err(Error::SequenceTooLong {
            length: t,
            max: cfg.max_sequence,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id >= cfg.vocabulary_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocabulary_size
        )));
    }
    let key_live: Vec<bool> = tokens.iter().map(|&id| id != PAD_ID).collect();
    let d = cfg.d_model;
    let dk = d / cfg.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let p = if train_mode { cfg.dropout } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);

    let mut embedded = Array2::zeros((t, cfg.token_embedding_dim));
    for (mut row, &id) in embedded.rows_mut().into_iter().zip(tokens) {
        row.assign(&params.embedding.row(id));
    }
    let mut h = embedded.dot(&params.projection) + positional_encoding(t, d)?;

    let mut caches = Vec::with_capacity(cfg.layers);
    for lp in &params.layers {
        let q = h.dot(&lp.wq) + &lp.bq;
        let k = h.dot(&lp.wk) + &lp.bk;
        let v = h.dot(&lp.wv) + &lp.bv;
        let mut context = Array2::zeros((t, d));
        let mut attention = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let cols = s![.., head * dk..(head + 1) * dk];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            masked_softmax(&mut a, &key_live);
            context.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attention.push(a);
        }
        let mut attn_out = context.dot(&lp.wo) + &lp.bo;
        let attn_mask = (p > 0.0).then(|| dropout_mask(&mut rng, (t, d), p));
        if let Some(m) = &attn_mask {
            attn_out *= m;
        }
        let ln1 = layer_norm(&(&h + &attn_out), &lp.ln1_gain, &lp.ln1_bias);
        let ff_pre = ln1.y.dot(&lp.ff_w1) + &lp.ff_b1;
        let ff_act = ff_pre.mapv(|x| x.max(0.0));
        let mut ff_out = ff_act.dot(&lp.ff_w2) + &lp.ff_b2;
        let ff_mask = (p > 0.0).then(|| dropout_mask(&mut rng, (t, d), p));
        if let Some(m) = &ff_mask {
            ff_out *= m;
        }
        let ln2 = layer_norm(&(&ln1.y + &ff_out), &lp.ln2_gain, &lp.ln2_bias);
        caches.push(LayerCache {
            input: h,
            q,
            k,
            v,
            attention,
            context,
            attn_mask,
            ln1_xhat: ln1.xhat,
            ln1_inv_std: ln1.inv_std,
            normed: ln1.y,
            ff_pre,
            ff_act,
            ff_mask,
            ln2_xhat: ln2.xhat,
            ln2_inv_std: ln2.inv_std,
        });
        h = ln2.y;
    }
    Ok(SequenceRepresentation {
        output: h,
        tokens: tokens.to_vec(),
        embedded,
        layers: caches,
        stamp: params.stamp,
    })
}

#[derive(Debug, Clone)]
pub struct EncoderGradients {
    pub params: EncoderParams,
    /// Gradient with respect to the looked-up embedding rows (`T x emb`).
    pub input: Array2<f64>,
}

pub fn backward(
    rep: &SequenceRepresentation,
    grad_output: &Array2<f64>,
    params: &EncoderParams,
) -> Result<EncoderGradients> {
    if rep.stamp != params.stamp {
        return Err(Error::StaleCache);
    }
    if grad_output.dim() != rep.output.dim() {
        return Err(Error::InvalidArgument(format!(
            "grad_output shape {:?} does not match output {:?}",
            grad_output.dim(),
            rep.output.dim()
        )));
    }
    let cfg = &params.config;
    let d = cfg.d_model;
    let dk = d / cfg.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut grads = params.zeros_like();
    let mut dh = grad_output.clone();

    for ((lp, cache), gl) in params
        .layers
        .iter()
        .zip(&rep.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        let dr2 = layer_norm_backward(
            &dh,
            &cache.ln2_xhat,
            &cache.ln2_inv_std,
            &lp.ln2_gain,
            &mut gl.ln2_gain,
            &mut gl.ln2_bias,
        );
        let mut dff_out = dr2.clone();
        if let Some(m) = &cache.ff_mask {
            dff_out *= m;
        }
        gl.ff_w2 += &cache.ff_act.t().dot(&dff_out);
        gl.ff_b2 += &dff_out.sum_axis(Axis(0));
        let mut dpre = dff_out.dot(&lp.ff_w2.t());
        dpre.zip_mut_with(&cache.ff_pre, |g, &x| {
            if x <= 0.0 {
                *g = 0.0
            }
        });
        gl.ff_w1 += &cache.normed.t().dot(&dpre);
        gl.ff_b1 += &dpre.sum_axis(Axis(0));
        let dnormed = dr2 + dpre.dot(&lp.ff_w1.t());

        let dr1 = layer_norm_backward(
            &dnormed,
            &cache.ln1_xhat,
            &cache.ln1_inv_std,
            &lp.ln1_gain,
            &mut gl.ln1_gain,
            &mut gl.ln1_bias,
        );
        let mut dattn_out = dr1.clone();
        if let Some(m) = &cache.attn_mask {
            dattn_out *= m;
        }
        gl.wo += &cache.context.t().dot(&dattn_out);
        gl.bo += &dattn_out.sum_axis(Axis(0));
        let dcontext = dattn_out.dot(&lp.wo.t());

        let (t, _) = dcontext.dim();
        let mut dq = Array2::zeros((t, d));
        let mut dkm = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for (head, a) in cache.attention.iter().enumerate() {
            let cols = s![.., head * dk..(head + 1) * dk];
            let dc = dcontext.slice(cols);
            let da = dc.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dc));
            let mut ds = da;
            for (mut drow, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let inner = drow.dot(&arow);
                drow.zip_mut_with(&arow, |g, &p| *g = p * (*g - inner) * scale);
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dkm.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let x = &cache.input;
        gl.wq += &x.t().dot(&dq);
        gl.bq += &dq.sum_axis(Axis(0));
        gl.wk += &x.t().dot(&dkm);
        gl.bk += &dkm.sum_axis(Axis(0));
        gl.wv += &x.t().dot(&dv);
        gl.bv += &dv.sum_axis(Axis(0));
        dh = dr1 + dq.dot(&lp.wq.t()) + dkm.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
    }

    grads.projection += &rep.embedded.t().dot(&dh);
    let dinput = dh.dot(&params.projection.t());
    for (row, &id) in dinput.rows().into_iter().zip(&rep.tokens) {
        let mut target = grads.embedding.row_mut(id);
        target += &row;
    }
    Ok(EncoderGradients {
        params: grads,
        input: dinput,
    })
}
