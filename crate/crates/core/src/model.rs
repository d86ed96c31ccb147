//! The encoder: sense-aware input embedding, post-layer-norm transformer
//! blocks, and the two tied prediction heads.
//!
//! The input embedding of a token is the sum of its word column, the columns
//! of every supersense the word allows (via the static membership matrix),
//! and a learned absolute position column. The same word matrix scores word
//! predictions and the same sense matrix scores supersense predictions, so
//! both vocabularies live in the embedding space at input and output alike.
//!
//! Everything is written against an explicit forward trace so the hand-coded
//! backward pass can be checked coordinate by coordinate against finite
//! differences.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::lexicon::SenseMembershipMatrix;
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::textpipe::EncodedSequence;

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-12;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// Substream tag for parameter initialization.
const INIT_STREAM: u64 = 0x696e_6974;

/// Architecture hyperparameters. `d_w` and `d_s` are the word and sense
/// vocabulary sizes; they define the widths of the tied embedding matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub n_max: usize,
    pub d_w: usize,
    pub d_s: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("n_max", self.n_max),
            ("d_w", self.d_w),
            ("d_s", self.d_s),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{} must be at least 1", name)));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible into {} heads",
                self.d, self.heads
            )));
        }
        if self.d_w < 4 {
            return Err(Error::Config(format!(
                "word vocabulary of {} cannot hold the specials and a word",
                self.d_w
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// One transformer block. Projection weights are stored input-major, so a
/// projection is `x.dot(w) + b` with `x` of shape (n, d_in).
///
/// The key projection carries no bias: a key bias shifts every attention
/// score in a row by the same amount, which the softmax cancels, so the
/// parameter would sit at zero gradient forever.
#[derive(Clone, Debug)]
pub struct LayerParams<T> {
    pub attn_q_w: Array2<T>,
    pub attn_q_b: Array1<T>,
    pub attn_k_w: Array2<T>,
    pub attn_v_w: Array2<T>,
    pub attn_v_b: Array1<T>,
    pub attn_out_w: Array2<T>,
    pub attn_out_b: Array1<T>,
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    pub ffn_in_w: Array2<T>,
    pub ffn_in_b: Array1<T>,
    pub ffn_out_w: Array2<T>,
    pub ffn_out_b: Array1<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
}

/// All trainable tensors. Embedding matrices are column-per-id with shape
/// (d, vocabulary), so `word_embed` doubles as input lookup table and output
/// scoring matrix, and likewise `sense_embed`.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub word_embed: Array2<T>,
    pub sense_embed: Array2<T>,
    pub pos_embed: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
}

/// Borrowed view of one named tensor; `decay` marks it for weight decay
/// (all matrices decay, no vector does).
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
    pub decay: bool,
}

/// Mutable counterpart of [`TensorRef`].
pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
    pub decay: bool,
}

fn layer_tensor_names() -> [&'static str; 15] {
    [
        "attn_q_w", "attn_q_b", "attn_k_w", "attn_v_w", "attn_v_b", "attn_out_w",
        "attn_out_b", "ln1_g", "ln1_b", "ffn_in_w", "ffn_in_b", "ffn_out_w", "ffn_out_b",
        "ln2_g", "ln2_b",
    ]
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters; the container for gradients and moments.
    pub fn zeros(config: &ModelConfig) -> ModelParams<T> {
        let z2 = |r, c| Array2::<T>::zeros((r, c));
        let z1 = |n| Array1::<T>::zeros(n);
        ModelParams {
            config: *config,
            word_embed: z2(config.d, config.d_w),
            sense_embed: z2(config.d, config.d_s),
            pos_embed: z2(config.d, config.n_max),
            layers: (0..config.layers)
                .map(|_| LayerParams {
                    attn_q_w: z2(config.d, config.d),
                    attn_q_b: z1(config.d),
                    attn_k_w: z2(config.d, config.d),
                    attn_v_w: z2(config.d, config.d),
                    attn_v_b: z1(config.d),
                    attn_out_w: z2(config.d, config.d),
                    attn_out_b: z1(config.d),
                    ln1_g: z1(config.d),
                    ln1_b: z1(config.d),
                    ffn_in_w: z2(config.d, config.ff_dim),
                    ffn_in_b: z1(config.ff_dim),
                    ffn_out_w: z2(config.ff_dim, config.d),
                    ffn_out_b: z1(config.d),
                    ln2_g: z1(config.d),
                    ln2_b: z1(config.d),
                })
                .collect(),
        }
    }

    /// Fresh parameters: matrices from a truncated normal (std 0.02, clipped
    /// at two standard deviations), biases zero, layer-norm gains one.
    /// Elements are drawn in tensor order, row-major within each tensor, so
    /// the result is a pure function of `(config, seed)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let mut rng = CounterRng::derive(seed, &[INIT_STREAM]);
        for t in params.tensors_mut() {
            if t.decay {
                for v in t.data.iter_mut() {
                    *v = T::from_f64(rng.truncated_normal(INIT_STD, 2.0));
                }
            } else if t.name.contains("ln") && t.name.ends_with("_g") {
                for v in t.data.iter_mut() {
                    *v = T::one();
                }
            }
            // Biases stay zero.
        }
        Ok(params)
    }

    /// Named tensors in the fixed serialization order: the three embeddings,
    /// then each layer's tensors.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        for (name, a) in [
            ("word_embed", &self.word_embed),
            ("sense_embed", &self.sense_embed),
            ("pos_embed", &self.pos_embed),
        ] {
            let (r, c) = a.dim();
            out.push(TensorRef {
                name: name.to_string(),
                shape: vec![r, c],
                data: a.as_slice().expect("standard layout"),
                decay: true,
            });
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let names = layer_tensor_names();
            let twos: [&Array2<T>; 6] = [
                &layer.attn_q_w,
                &layer.attn_k_w,
                &layer.attn_v_w,
                &layer.attn_out_w,
                &layer.ffn_in_w,
                &layer.ffn_out_w,
            ];
            let ones: [&Array1<T>; 9] = [
                &layer.attn_q_b,
                &layer.attn_v_b,
                &layer.attn_out_b,
                &layer.ln1_g,
                &layer.ln1_b,
                &layer.ffn_in_b,
                &layer.ffn_out_b,
                &layer.ln2_g,
                &layer.ln2_b,
            ];
            let mut two_it = twos.into_iter();
            let mut one_it = ones.into_iter();
            for name in names {
                let full = format!("layer{}.{}", l, name);
                if name.ends_with("_w") {
                    let a = two_it.next().unwrap();
                    let (r, c) = a.dim();
                    out.push(TensorRef {
                        name: full,
                        shape: vec![r, c],
                        data: a.as_slice().expect("standard layout"),
                        decay: true,
                    });
                } else {
                    let a = one_it.next().unwrap();
                    out.push(TensorRef {
                        name: full,
                        shape: vec![a.len()],
                        data: a.as_slice().expect("standard layout"),
                        decay: false,
                    });
                }
            }
        }
        out
    }

    /// Mutable variant of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        for (name, a) in [
            ("word_embed", &mut self.word_embed),
            ("sense_embed", &mut self.sense_embed),
            ("pos_embed", &mut self.pos_embed),
        ] {
            let (r, c) = a.dim();
            out.push(TensorMut {
                name: name.to_string(),
                shape: vec![r, c],
                data: a.as_slice_mut().expect("standard layout"),
                decay: true,
            });
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let two_shape = |a: &Array2<T>| {
                let (r, c) = a.dim();
                vec![r, c]
            };
            let pairs: [(&str, Vec<usize>, &mut [T], bool); 15] = [
                ("attn_q_w", two_shape(&layer.attn_q_w), layer.attn_q_w.as_slice_mut().unwrap(), true),
                ("attn_q_b", vec![layer.attn_q_b.len()], layer.attn_q_b.as_slice_mut().unwrap(), false),
                ("attn_k_w", two_shape(&layer.attn_k_w), layer.attn_k_w.as_slice_mut().unwrap(), true),
                ("attn_v_w", two_shape(&layer.attn_v_w), layer.attn_v_w.as_slice_mut().unwrap(), true),
                ("attn_v_b", vec![layer.attn_v_b.len()], layer.attn_v_b.as_slice_mut().unwrap(), false),
                ("attn_out_w", two_shape(&layer.attn_out_w), layer.attn_out_w.as_slice_mut().unwrap(), true),
                ("attn_out_b", vec![layer.attn_out_b.len()], layer.attn_out_b.as_slice_mut().unwrap(), false),
                ("ln1_g", vec![layer.ln1_g.len()], layer.ln1_g.as_slice_mut().unwrap(), false),
                ("ln1_b", vec![layer.ln1_b.len()], layer.ln1_b.as_slice_mut().unwrap(), false),
                ("ffn_in_w", two_shape(&layer.ffn_in_w), layer.ffn_in_w.as_slice_mut().unwrap(), true),
                ("ffn_in_b", vec![layer.ffn_in_b.len()], layer.ffn_in_b.as_slice_mut().unwrap(), false),
                ("ffn_out_w", two_shape(&layer.ffn_out_w), layer.ffn_out_w.as_slice_mut().unwrap(), true),
                ("ffn_out_b", vec![layer.ffn_out_b.len()], layer.ffn_out_b.as_slice_mut().unwrap(), false),
                ("ln2_g", vec![layer.ln2_g.len()], layer.ln2_g.as_slice_mut().unwrap(), false),
                ("ln2_b", vec![layer.ln2_b.len()], layer.ln2_b.as_slice_mut().unwrap(), false),
            ];
            for (name, shape, data, decay) in pairs {
                out.push(TensorMut {
                    name: format!("layer{}.{}", l, name),
                    shape,
                    data,
                    decay,
                });
            }
        }
        out
    }

    /// Convert element type; used between training (f32) and gradient
    /// checking (f64).
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let c2 = |a: &Array2<T>| a.mapv(|v| U::from_f64(v.to_f64()));
        let c1 = |a: &Array1<T>| a.mapv(|v| U::from_f64(v.to_f64()));
        ModelParams {
            config: self.config,
            word_embed: c2(&self.word_embed),
            sense_embed: c2(&self.sense_embed),
            pos_embed: c2(&self.pos_embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_q_w: c2(&l.attn_q_w),
                    attn_q_b: c1(&l.attn_q_b),
                    attn_k_w: c2(&l.attn_k_w),
                    attn_v_w: c2(&l.attn_v_w),
                    attn_v_b: c1(&l.attn_v_b),
                    attn_out_w: c2(&l.attn_out_w),
                    attn_out_b: c1(&l.attn_out_b),
                    ln1_g: c1(&l.ln1_g),
                    ln1_b: c1(&l.ln1_b),
                    ffn_in_w: c2(&l.ffn_in_w),
                    ffn_in_b: c1(&l.ffn_in_b),
                    ffn_out_w: c2(&l.ffn_out_w),
                    ffn_out_b: c1(&l.ffn_out_b),
                    ln2_g: c1(&l.ln2_g),
                    ln2_b: c1(&l.ln2_b),
                })
                .collect(),
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

/// Per-row state of one layer-norm application, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LnTrace<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

/// Activations of one block.
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    pub x: Array2<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub probs: Vec<Array2<T>>,
    pub ctx: Array2<T>,
    pub ln1: LnTrace<T>,
    pub x1: Array2<T>,
    pub ffn_pre: Array2<T>,
    pub ffn_act: Array2<T>,
    pub ln2: LnTrace<T>,
}

/// Full forward record: input embeddings, per-layer activations, output
/// embeddings, and the attention validity mask.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub v_input: Array2<T>,
    pub layers: Vec<LayerTrace<T>>,
    pub v_output: Array2<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn len(&self) -> usize {
        self.v_output.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.v_output.nrows() == 0
    }

    pub fn output_at(&self, pos: usize) -> ArrayView1<'_, T> {
        self.v_output.row(pos)
    }
}

/// Sense-aware input embedding: for token id w at position j this is
/// `W[:,w] + sum of S[:,s] over allowed senses s of w + P[:,j]`.
pub fn input_embed<T: Scalar>(
    params: &ModelParams<T>,
    membership: &SenseMembershipMatrix,
    seq: &EncodedSequence,
) -> Result<Array2<T>> {
    let cfg = &params.config;
    if seq.is_empty() {
        return Err(Error::Contract("cannot embed an empty sequence".into()));
    }
    if seq.len() > cfg.n_max {
        return Err(Error::Length {
            len: seq.len(),
            max: cfg.n_max,
        });
    }
    if membership.n_senses() != cfg.d_s || membership.n_words() != cfg.d_w {
        return Err(Error::Contract(format!(
            "membership matrix is {}x{}, model expects {}x{}",
            membership.n_senses(),
            membership.n_words(),
            cfg.d_s,
            cfg.d_w
        )));
    }
    let mut out = Array2::<T>::zeros((seq.len(), cfg.d));
    for (j, &id) in seq.ids.iter().enumerate() {
        if id as usize >= cfg.d_w {
            return Err(Error::Contract(format!(
                "token id {} outside vocabulary of {}",
                id, cfg.d_w
            )));
        }
        let mut row = out.row_mut(j);
        row.assign(&params.word_embed.column(id as usize));
        for &s in membership.senses_of(id) {
            row += &params.sense_embed.column(s as usize);
        }
        row += &params.pos_embed.column(j);
    }
    Ok(out)
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_prime<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn layer_norm<T: Scalar>(x: &Array2<T>, g: &Array1<T>, b: &Array1<T>) -> (Array2<T>, LnTrace<T>) {
    let (n, d) = x.dim();
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(LN_EPS);
    let mut xhat = Array2::<T>::zeros((n, d));
    let mut rstd = Array1::<T>::zeros(n);
    let mut out = Array2::<T>::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() * inv_d;
        let mut var = T::zero();
        for &v in row.iter() {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (x[[i, j]] - mean) * r;
            xhat[[i, j]] = h;
            out[[i, j]] = g[j] * h + b[j];
        }
    }
    (out, LnTrace { xhat, rstd })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    tr: &LnTrace<T>,
    g: &Array1<T>,
) -> (Array2<T>, Array1<T>, Array1<T>) {
    let (n, d) = dy.dim();
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dx = Array2::<T>::zeros((n, d));
    let mut dg = Array1::<T>::zeros(d);
    let mut db = Array1::<T>::zeros(d);
    for i in 0..n {
        let mut mean_u = T::zero();
        let mut mean_ux = T::zero();
        for j in 0..d {
            let u = dy[[i, j]] * g[j];
            mean_u += u;
            mean_ux += u * tr.xhat[[i, j]];
            dg[j] += dy[[i, j]] * tr.xhat[[i, j]];
            db[j] += dy[[i, j]];
        }
        mean_u *= inv_d;
        mean_ux *= inv_d;
        for j in 0..d {
            let u = dy[[i, j]] * g[j];
            dx[[i, j]] = (u - mean_u - tr.xhat[[i, j]] * mean_ux) * tr.rstd[i];
        }
    }
    (dx, dg, db)
}

/// Row-wise softmax restricted to valid key positions; invalid keys get
/// probability exactly zero.
fn masked_softmax_rows<T: Scalar>(scores: &Array2<T>, valid: &[bool]) -> Array2<T> {
    let (n, m) = scores.dim();
    let mut probs = Array2::<T>::zeros((n, m));
    for i in 0..n {
        let mut max = T::neg_infinity();
        for j in 0..m {
            if valid[j] && scores[[i, j]] > max {
                max = scores[[i, j]];
            }
        }
        let mut sum = T::zero();
        for j in 0..m {
            if valid[j] {
                let e = (scores[[i, j]] - max).exp();
                probs[[i, j]] = e;
                sum += e;
            }
        }
        for j in 0..m {
            if valid[j] {
                probs[[i, j]] = probs[[i, j]] / sum;
            }
        }
    }
    probs
}

/// Run the encoder over already-embedded inputs with every position visible.
pub fn encode<T: Scalar>(params: &ModelParams<T>, inputs: Array2<T>) -> Result<ForwardTrace<T>> {
    let valid = vec![true; inputs.nrows()];
    encode_masked(params, inputs, &valid)
}

/// Run the encoder with an attention validity mask. Invalid positions (e.g.
/// padding slots) receive zero attention from every query; attention is
/// bidirectional and unmasked otherwise.
pub fn encode_masked<T: Scalar>(
    params: &ModelParams<T>,
    inputs: Array2<T>,
    valid: &[bool],
) -> Result<ForwardTrace<T>> {
    let cfg = &params.config;
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::Contract("cannot encode an empty input".into()));
    }
    if inputs.ncols() != cfg.d {
        return Err(Error::Contract(format!(
            "input width {} does not match model width {}",
            inputs.ncols(),
            cfg.d
        )));
    }
    if valid.len() != n {
        return Err(Error::Contract(format!(
            "validity mask of {} for {} positions",
            valid.len(),
            n
        )));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::Contract("no valid position to attend to".into()));
    }

    let dk = cfg.head_dim();
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    let mut layers = Vec::with_capacity(cfg.layers);
    let v_input = inputs;
    let mut x = v_input.clone();

    for (l, layer) in params.layers.iter().enumerate() {
        let q = x.dot(&layer.attn_q_w) + &layer.attn_q_b;
        let k = x.dot(&layer.attn_k_w);
        let v = x.dot(&layer.attn_v_w) + &layer.attn_v_b;

        let mut probs = Vec::with_capacity(cfg.heads);
        let mut ctx = Array2::<T>::zeros((n, cfg.d));
        for h in 0..cfg.heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let scores = qh.dot(&kh.t()).mapv(|s| s * scale);
            let p = masked_softmax_rows(&scores, valid);
            ctx.slice_mut(cols).assign(&p.dot(&vh));
            probs.push(p);
        }
        let attn_out = ctx.dot(&layer.attn_out_w) + &layer.attn_out_b;
        let s1 = &x + &attn_out;
        let (x1, ln1) = layer_norm(&s1, &layer.ln1_g, &layer.ln1_b);

        let ffn_pre = x1.dot(&layer.ffn_in_w) + &layer.ffn_in_b;
        let ffn_act = ffn_pre.mapv(gelu);
        let ffn_out = ffn_act.dot(&layer.ffn_out_w) + &layer.ffn_out_b;
        let s2 = &x1 + &ffn_out;
        let (x2, ln2) = layer_norm(&s2, &layer.ln2_g, &layer.ln2_b);

        if x2.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!(
                "non-finite activation in layer {}",
                l
            )));
        }

        layers.push(LayerTrace {
            x: std::mem::replace(&mut x, x2),
            q,
            k,
            v,
            probs,
            ctx,
            ln1,
            x1,
            ffn_pre,
            ffn_act,
            ln2,
        });
    }

    Ok(ForwardTrace {
        v_input,
        layers,
        v_output: x,
        valid: valid.to_vec(),
    })
}

/// Scores of every word for one output embedding: `W^T v`.
pub fn word_scores<T: Scalar>(params: &ModelParams<T>, v: ArrayView1<'_, T>) -> Array1<T> {
    params.word_embed.t().dot(&v)
}

/// Scores of every supersense for one output embedding: `S^T v`.
pub fn sense_scores<T: Scalar>(params: &ModelParams<T>, v: ArrayView1<'_, T>) -> Array1<T> {
    params.sense_embed.t().dot(&v)
}

/// Backpropagate `d_vout` (gradient on the output embeddings) through the
/// blocks, accumulating parameter gradients into `grads` and returning the
/// gradient on the input embeddings.
pub fn backward_encoder<T: Scalar>(
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    d_vout: &Array2<T>,
    grads: &mut ModelParams<T>,
) -> Array2<T> {
    let cfg = &params.config;
    let dk = cfg.head_dim();
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    let mut dx = d_vout.clone();

    for (l, layer) in params.layers.iter().enumerate().rev() {
        let tr = &trace.layers[l];
        let g = &mut grads.layers[l];

        // Second residual + norm: s2 = x1 + ffn_out.
        let (ds2, dg2, db2) = layer_norm_backward(&dx, &tr.ln2, &layer.ln2_g);
        g.ln2_g += &dg2;
        g.ln2_b += &db2;
        let mut dx1 = ds2.clone();

        // Feed-forward.
        g.ffn_out_w += &tr.ffn_act.t().dot(&ds2);
        g.ffn_out_b += &ds2.sum_axis(Axis(0));
        let dact = ds2.dot(&layer.ffn_out_w.t());
        let dpre = &dact * &tr.ffn_pre.mapv(gelu_prime);
        g.ffn_in_w += &tr.x1.t().dot(&dpre);
        g.ffn_in_b += &dpre.sum_axis(Axis(0));
        dx1 += &dpre.dot(&layer.ffn_in_w.t());

        // First residual + norm: s1 = x + attn_out.
        let (ds1, dg1, db1) = layer_norm_backward(&dx1, &tr.ln1, &layer.ln1_g);
        g.ln1_g += &dg1;
        g.ln1_b += &db1;
        let mut dx_new = ds1.clone();

        // Output projection of the attention block.
        g.attn_out_w += &tr.ctx.t().dot(&ds1);
        g.attn_out_b += &ds1.sum_axis(Axis(0));
        let dctx = ds1.dot(&layer.attn_out_w.t());

        // Heads.
        let n = dx.nrows();
        let mut dq = Array2::<T>::zeros((n, cfg.d));
        let mut dkm = Array2::<T>::zeros((n, cfg.d));
        let mut dvm = Array2::<T>::zeros((n, cfg.d));
        for h in 0..cfg.heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let p = &tr.probs[h];
            let dctx_h = dctx.slice(cols);
            let vh = tr.v.slice(cols);
            let dp = dctx_h.dot(&vh.t());
            dvm.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            // Softmax rows: ds = p * (dp - <dp, p>). Masked keys have p = 0
            // and contribute nothing.
            let mut dscores = Array2::<T>::zeros((n, n));
            for i in 0..n {
                let mut dot = T::zero();
                for j in 0..n {
                    dot += dp[[i, j]] * p[[i, j]];
                }
                for j in 0..n {
                    dscores[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot);
                }
            }
            let kh = tr.k.slice(cols);
            let qh = tr.q.slice(cols);
            dq.slice_mut(cols)
                .assign(&dscores.dot(&kh).mapv(|v| v * scale));
            dkm.slice_mut(cols)
                .assign(&dscores.t().dot(&qh).mapv(|v| v * scale));
        }

        g.attn_q_w += &tr.x.t().dot(&dq);
        g.attn_q_b += &dq.sum_axis(Axis(0));
        g.attn_k_w += &tr.x.t().dot(&dkm);
        g.attn_v_w += &tr.x.t().dot(&dvm);
        g.attn_v_b += &dvm.sum_axis(Axis(0));
        dx_new += &dq.dot(&layer.attn_q_w.t());
        dx_new += &dkm.dot(&layer.attn_k_w.t());
        dx_new += &dvm.dot(&layer.attn_v_w.t());

        dx = dx_new;
    }
    dx
}

/// Scatter the gradient on the input embeddings back onto the word, sense
/// and position columns that built them.
pub fn backward_input_embed<T: Scalar>(
    seq: &EncodedSequence,
    membership: &SenseMembershipMatrix,
    d_vinput: &Array2<T>,
    grads: &mut ModelParams<T>,
) {
    for (j, &id) in seq.ids.iter().enumerate() {
        let row = d_vinput.row(j);
        {
            let mut col = grads.word_embed.column_mut(id as usize);
            col += &row;
        }
        for &s in membership.senses_of(id) {
            let mut col = grads.sense_embed.column_mut(s as usize);
            col += &row;
        }
        let mut col = grads.pos_embed.column_mut(j);
        col += &row;
    }
}
