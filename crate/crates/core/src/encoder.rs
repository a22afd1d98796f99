//! Trainable sequence encoders with hand-written backward passes.
//!
//! Two variants share one interface:
//!
//! * [`Variant::Pooler`]: mean of token embeddings, then a linear projection.
//!   Order-invariant over the token multiset.
//! * [`Variant::Attentive`]: token + position embeddings, one pre-norm
//!   transformer block (multi-head self-attention, GELU feed-forward), mean
//!   pooling, linear projection.
//!
//! Batched calls pack every token of every sequence into one row matrix so the
//! dense layers run as single GEMMs; attention runs per sequence. Row results
//! do not depend on batch composition.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serialize::{TokenSequence, BASE_VOCAB};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const ZERO_INIT: &[&str] = &[
    "ln1_bias", "b_q", "b_k", "b_v", "b_o", "ln2_bias", "ffn_b1", "ffn_b2", "proj_b",
];

pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal fits the scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Pooler,
    Attentive,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Pooler, Variant::Attentive];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(variant: Variant, vocab_size: usize) -> Self {
        EncoderConfig {
            variant,
            vocab_size,
            max_len: crate::serialize::DEFAULT_MAX_LEN,
            hidden: 64,
            out_dim: 32,
            heads: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.out_dim == 0 || self.max_len == 0 {
            return fail(format!(
                "hidden ({}), out_dim ({}) and max_len ({}) must be positive",
                self.hidden, self.out_dim, self.max_len
            ));
        }
        if self.vocab_size < BASE_VOCAB {
            return fail(format!("vocab_size {} < {BASE_VOCAB}", self.vocab_size));
        }
        if self.variant == Variant::Attentive && (self.heads == 0 || !self.hidden.is_multiple_of(self.heads)) {
            return fail(format!("heads ({}) must divide hidden ({})", self.heads, self.hidden));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub pos_emb: Array2<T>,
    pub ln1_gain: Array1<T>,
    pub ln1_bias: Array1<T>,
    pub w_q: Array2<T>,
    pub b_q: Array1<T>,
    pub w_k: Array2<T>,
    pub b_k: Array1<T>,
    pub w_v: Array2<T>,
    pub b_v: Array1<T>,
    pub w_o: Array2<T>,
    pub b_o: Array1<T>,
    pub ln2_gain: Array1<T>,
    pub ln2_bias: Array1<T>,
    pub ffn_w1: Array2<T>,
    pub ffn_b1: Array1<T>,
    pub ffn_w2: Array2<T>,
    pub ffn_b2: Array1<T>,
}

/// Every learnable tensor of one tower. Also used as the gradient and
/// optimizer-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub token_emb: Array2<T>,
    pub block: Option<BlockParams<T>>,
    pub proj_w: Array2<T>,
    pub proj_b: Array1<T>,
}

fn slice<T>(a: &ndarray::ArrayBase<impl ndarray::Data<Elem = T>, impl ndarray::Dimension>) -> &[T] {
    a.as_slice().expect("parameter tensors are contiguous")
}

fn slice_mut<T>(
    a: &mut ndarray::ArrayBase<impl ndarray::DataMut<Elem = T>, impl ndarray::Dimension>,
) -> &mut [T] {
    a.as_slice_mut().expect("parameter tensors are contiguous")
}

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let (v, h, k, l) = (config.vocab_size, config.hidden, config.out_dim, config.max_len);
        let block = (config.variant == Variant::Attentive).then(|| BlockParams {
            pos_emb: Array2::zeros((l, h)),
            ln1_gain: Array1::zeros(h),
            ln1_bias: Array1::zeros(h),
            w_q: Array2::zeros((h, h)),
            b_q: Array1::zeros(h),
            w_k: Array2::zeros((h, h)),
            b_k: Array1::zeros(h),
            w_v: Array2::zeros((h, h)),
            b_v: Array1::zeros(h),
            w_o: Array2::zeros((h, h)),
            b_o: Array1::zeros(h),
            ln2_gain: Array1::zeros(h),
            ln2_bias: Array1::zeros(h),
            ffn_w1: Array2::zeros((h, 4 * h)),
            ffn_b1: Array1::zeros(4 * h),
            ffn_w2: Array2::zeros((4 * h, h)),
            ffn_b2: Array1::zeros(h),
        });
        EncoderParams {
            token_emb: Array2::zeros((v, h)),
            block,
            proj_w: Array2::zeros((h, k)),
            proj_b: Array1::zeros(k),
        }
    }

    /// Tensors in the fixed declaration order used by checkpoints.
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        let mut out = vec![("token_emb", slice(&self.token_emb))];
        if let Some(b) = &self.block {
            out.extend([
                ("pos_emb", slice(&b.pos_emb)),
                ("ln1_gain", slice(&b.ln1_gain)),
                ("ln1_bias", slice(&b.ln1_bias)),
                ("w_q", slice(&b.w_q)),
                ("b_q", slice(&b.b_q)),
                ("w_k", slice(&b.w_k)),
                ("b_k", slice(&b.b_k)),
                ("w_v", slice(&b.w_v)),
                ("b_v", slice(&b.b_v)),
                ("w_o", slice(&b.w_o)),
                ("b_o", slice(&b.b_o)),
                ("ln2_gain", slice(&b.ln2_gain)),
                ("ln2_bias", slice(&b.ln2_bias)),
                ("ffn_w1", slice(&b.ffn_w1)),
                ("ffn_b1", slice(&b.ffn_b1)),
                ("ffn_w2", slice(&b.ffn_w2)),
                ("ffn_b2", slice(&b.ffn_b2)),
            ]);
        }
        out.push(("proj_w", slice(&self.proj_w)));
        out.push(("proj_b", slice(&self.proj_b)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out = vec![("token_emb", slice_mut(&mut self.token_emb))];
        if let Some(b) = &mut self.block {
            out.extend([
                ("pos_emb", slice_mut(&mut b.pos_emb)),
                ("ln1_gain", slice_mut(&mut b.ln1_gain)),
                ("ln1_bias", slice_mut(&mut b.ln1_bias)),
                ("w_q", slice_mut(&mut b.w_q)),
                ("b_q", slice_mut(&mut b.b_q)),
                ("w_k", slice_mut(&mut b.w_k)),
                ("b_k", slice_mut(&mut b.b_k)),
                ("w_v", slice_mut(&mut b.w_v)),
                ("b_v", slice_mut(&mut b.b_v)),
                ("w_o", slice_mut(&mut b.w_o)),
                ("b_o", slice_mut(&mut b.b_o)),
                ("ln2_gain", slice_mut(&mut b.ln2_gain)),
                ("ln2_bias", slice_mut(&mut b.ln2_bias)),
                ("ffn_w1", slice_mut(&mut b.ffn_w1)),
                ("ffn_b1", slice_mut(&mut b.ffn_b1)),
                ("ffn_w2", slice_mut(&mut b.ffn_w2)),
                ("ffn_b2", slice_mut(&mut b.ffn_b2)),
            ]);
        }
        out.push(("proj_w", slice_mut(&mut self.proj_w)));
        out.push(("proj_b", slice_mut(&mut self.proj_b)));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    /// Element-wise conversion to another precision, same shapes.
    pub fn cast<U: Scalar>(&self, config: &EncoderConfig) -> EncoderParams<U> {
        let mut out = EncoderParams::<U>::zeros(config);
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::from_f64(s.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan);
            }
        }
        out
    }
}

/// Draws weights i.i.d. from N(0, 0.02²) in declaration order; layer-norm
/// gains start at one and every bias at zero.
pub fn init_params<T: Scalar>(config: &EncoderConfig) -> Result<EncoderParams<T>> {
    config.validate()?;
    let mut params = EncoderParams::<T>::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    for (name, t) in params.tensors_mut() {
        match name {
            "ln1_gain" | "ln2_gain" => t.fill(T::one()),
            _ if ZERO_INIT.contains(&name) => {}
            _ => {
                for v in t.iter_mut() {
                    *v = T::lit(normal.sample(&mut rng));
                }
            }
        }
    }
    Ok(params)
}

/// Config plus parameters of one tower.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub params: EncoderParams<T>,
}

struct LayerNormTrace<T> {
    normed: Array2<T>,
    inv_std: Array1<T>,
}

struct BlockTrace<T> {
    ln1: LayerNormTrace<T>,
    h1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Attention probabilities, indexed [seq * heads + head].
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    ln2: LayerNormTrace<T>,
    h2: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
}

/// Intermediate activations of a batched forward pass, consumed by
/// [`Encoder::backward`].
pub struct Trace<T> {
    offsets: Vec<usize>,
    ids: Vec<u32>,
    pooled: Array2<T>,
    block: Option<BlockTrace<T>>,
}

impl<T> Trace<T> {
    pub fn batch_size(&self) -> usize {
        self.offsets.len() - 1
    }
}

fn layer_norm<T: Scalar>(x: &Array2<T>, gain: &Array1<T>, bias: &Array1<T>) -> (Array2<T>, LayerNormTrace<T>) {
    let (n, h) = x.dim();
    let hn = T::from_usize(h).unwrap();
    let eps = T::lit(LN_EPS);
    let mut normed = Array2::zeros((n, h));
    let mut inv_std = Array1::zeros(n);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.iter().copied().sum::<T>() / hn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hn;
        let is = T::one() / (var + eps).sqrt();
        inv_std[i] = is;
        for (o, &v) in normed.row_mut(i).iter_mut().zip(row.iter()) {
            *o = (v - mean) * is;
        }
    }
    let mut y = normed.clone();
    Zip::from(y.rows_mut()).for_each(|mut row| {
        Zip::from(&mut row).and(gain).and(bias).for_each(|o, &g, &b| *o = *o * g + b);
    });
    (y, LayerNormTrace { normed, inv_std })
}

/// Returns dx and accumulates dgain/dbias.
fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    trace: &LayerNormTrace<T>,
    gain: &Array1<T>,
    dgain: &mut Array1<T>,
    dbias: &mut Array1<T>,
) -> Array2<T> {
    let (n, h) = dy.dim();
    let hn = T::from_usize(h).unwrap();
    let mut dx = Array2::zeros((n, h));
    for i in 0..n {
        let dyr = dy.row(i);
        let xr = trace.normed.row(i);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_x = T::zero();
        for j in 0..h {
            let dxhat = dyr[j] * gain[j];
            sum_dxhat += dxhat;
            sum_dxhat_x += dxhat * xr[j];
            dgain[j] += dyr[j] * xr[j];
            dbias[j] += dyr[j];
        }
        let scale = trace.inv_std[i] / hn;
        let mut out = dx.row_mut(i);
        for j in 0..h {
            let dxhat = dyr[j] * gain[j];
            out[j] = scale * (hn * dxhat - sum_dxhat - xr[j] * sum_dxhat_x);
        }
    }
    dx
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::lit((2.0 / std::f64::consts::PI).sqrt()), T::lit(0.044715))
}

// tanh through a single exp; libm's tanh is several times slower here.
fn tanh<T: Scalar>(z: T) -> T {
    let e = (T::lit(-2.0) * z.abs()).exp();
    ((T::one() - e) / (T::one() + e)).copysign(z)
}

fn gelu<T: Scalar>(u: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    half * u * (T::one() + tanh(c * (u + a * u * u * u)))
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    let t = tanh(c * (u + a * u * u * u));
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * u * u)
}

fn linear<T: Scalar>(x: &Array2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// dW += xᵀ·dy, db += Σ rows(dy), returns dy·Wᵀ.
fn linear_backward<T: Scalar>(
    x: &Array2<T>,
    w: &Array2<T>,
    dy: &Array2<T>,
    dw: &mut Array2<T>,
    db: &mut Array1<T>,
) -> Array2<T> {
    general_mat_mul(T::one(), &x.t(), dy, T::one(), dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

fn softmax_rows<T: Scalar>(mut s: ArrayViewMut2<T>) {
    for mut row in s.outer_iter_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row /= sum;
    }
}

impl<T: Scalar> Encoder<T> {
    pub fn init(config: EncoderConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(Encoder { config, params })
    }

    pub fn from_parts(config: EncoderConfig, params: EncoderParams<T>) -> Result<Self> {
        config.validate()?;
        let expected = EncoderParams::<T>::zeros(&config);
        let shapes_match = expected.tensors().len() == params.tensors().len()
            && expected
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|((_, a), (_, b))| a.len() == b.len());
        if !shapes_match {
            return Err(Error::Encoder("parameter shapes do not match config".into()));
        }
        Ok(Encoder { config, params })
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    fn check(&self, seqs: &[TokenSequence]) -> Result<()> {
        for seq in seqs {
            if seq.is_empty() {
                return Err(Error::Encoder("empty token sequence".into()));
            }
            if seq.len() > self.config.max_len {
                return Err(Error::Encoder(format!(
                    "sequence length {} exceeds max_len {}",
                    seq.len(),
                    self.config.max_len
                )));
            }
            if let Some(&bad) = seq.ids().iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(Error::Encoder(format!(
                    "token id {bad} out of range for vocab size {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<Vec<T>> {
        let out = self.encode_batch(std::slice::from_ref(seq))?;
        Ok(out.into_iter().next().expect("one output per input"))
    }

    pub fn encode_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<Vec<T>>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let (out, _) = self.forward(seqs)?;
        Ok(out.outer_iter().map(|r| r.to_vec()).collect())
    }

    /// Batched forward pass returning a B×K output matrix and the activations
    /// needed by [`Encoder::backward`].
    pub fn forward(&self, seqs: &[TokenSequence]) -> Result<(Array2<T>, Trace<T>)> {
        self.check(seqs)?;
        if seqs.is_empty() {
            return Err(Error::Encoder("empty batch".into()));
        }
        let h = self.config.hidden;
        let mut offsets = Vec::with_capacity(seqs.len() + 1);
        offsets.push(0);
        let mut ids = Vec::new();
        for seq in seqs {
            ids.extend_from_slice(seq.ids());
            offsets.push(ids.len());
        }
        let n = ids.len();
        let p = &self.params;

        let mut x = Array2::<T>::zeros((n, h));
        for (row, &id) in ids.iter().enumerate() {
            x.row_mut(row).assign(&p.token_emb.row(id as usize));
        }

        let (final_rows, block_trace) = match &p.block {
            None => (x, None),
            Some(b) => {
                for w in offsets.windows(2) {
                    let mut xs = x.slice_mut(s![w[0]..w[1], ..]);
                    xs += &b.pos_emb.slice(s![0..w[1] - w[0], ..]);
                }
                let (x3, trace) = self.block_forward(b, x, &offsets);
                (x3, Some(trace))
            }
        };

        let mut pooled = Array2::<T>::zeros((seqs.len(), h));
        for (i, w) in offsets.windows(2).enumerate() {
            let len = T::from_usize(w[1] - w[0]).unwrap();
            let mean = final_rows.slice(s![w[0]..w[1], ..]).sum_axis(Axis(0)) / len;
            pooled.row_mut(i).assign(&mean);
        }
        let out = linear(&pooled, &p.proj_w, &p.proj_b);
        Ok((
            out,
            Trace {
                offsets,
                ids,
                pooled,
                block: block_trace,
            },
        ))
    }

    fn block_forward(&self, b: &BlockParams<T>, x: Array2<T>, offsets: &[usize]) -> (Array2<T>, BlockTrace<T>) {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

        let (h1, ln1) = layer_norm(&x, &b.ln1_gain, &b.ln1_bias);
        let q = linear(&h1, &b.w_q, &b.b_q);
        let k = linear(&h1, &b.w_k, &b.b_k);
        let v = linear(&h1, &b.w_v, &b.b_v);

        let mut ctx = Array2::<T>::zeros(x.dim());
        let mut probs = Vec::with_capacity((offsets.len() - 1) * heads);
        for w in offsets.windows(2) {
            let rows = w[0]..w[1];
            for head in 0..heads {
                let cols = head * dh..(head + 1) * dh;
                let qs = q.slice(s![rows.clone(), cols.clone()]);
                let ks = k.slice(s![rows.clone(), cols.clone()]);
                let vs = v.slice(s![rows.clone(), cols.clone()]);
                let mut scores = qs.dot(&ks.t());
                scores *= scale;
                softmax_rows(scores.view_mut());
                general_mat_mul(T::one(), &scores, &vs, T::zero(), &mut ctx.slice_mut(s![rows.clone(), cols]));
                probs.push(scores);
            }
        }
        let mut x2 = linear(&ctx, &b.w_o, &b.b_o);
        x2 += &x;

        let (h2, ln2) = layer_norm(&x2, &b.ln2_gain, &b.ln2_bias);
        let pre_act = linear(&h2, &b.ffn_w1, &b.ffn_b1);
        let act = pre_act.mapv(gelu);
        let mut x3 = linear(&act, &b.ffn_w2, &b.ffn_b2);
        x3 += &x2;

        (
            x3,
            BlockTrace {
                ln1,
                h1,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                h2,
                pre_act,
                act,
            },
        )
    }

    /// Accumulates into `grads` the gradient of Σᵢ ⟨d_out[i], output[i]⟩ with
    /// respect to every parameter.
    pub fn backward(&self, trace: &Trace<T>, d_out: ArrayView2<T>, grads: &mut EncoderParams<T>) -> Result<()> {
        let bsz = trace.batch_size();
        if d_out.dim() != (bsz, self.config.out_dim) {
            return Err(Error::Encoder(format!(
                "gradient shape {:?} does not match output ({bsz}, {})",
                d_out.dim(),
                self.config.out_dim
            )));
        }
        let p = &self.params;
        let d_out = d_out.to_owned();
        let d_pooled = linear_backward(&trace.pooled, &p.proj_w, &d_out, &mut grads.proj_w, &mut grads.proj_b);

        let h = self.config.hidden;
        let n = trace.ids.len();
        let mut d_rows = Array2::<T>::zeros((n, h));
        for (i, w) in trace.offsets.windows(2).enumerate() {
            let share = d_pooled.row(i).to_owned() / T::from_usize(w[1] - w[0]).unwrap();
            for r in w[0]..w[1] {
                d_rows.row_mut(r).assign(&share);
            }
        }

        if let (Some(b), Some(bt)) = (&p.block, &trace.block) {
            let gb = grads
                .block
                .as_mut()
                .ok_or_else(|| Error::Encoder("gradient buffer lacks block tensors".into()))?;
            d_rows = self.block_backward(b, bt, &trace.offsets, d_rows, gb);
            for w in trace.offsets.windows(2) {
                let mut dp = gb.pos_emb.slice_mut(s![0..w[1] - w[0], ..]);
                dp += &d_rows.slice(s![w[0]..w[1], ..]);
            }
        }

        for (row, &id) in trace.ids.iter().enumerate() {
            let mut g = grads.token_emb.row_mut(id as usize);
            g += &d_rows.row(row);
        }
        Ok(())
    }

    fn block_backward(
        &self,
        b: &BlockParams<T>,
        t: &BlockTrace<T>,
        offsets: &[usize],
        d_x3: Array2<T>,
        g: &mut BlockParams<T>,
    ) -> Array2<T> {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

        // feed-forward sublayer
        let mut d_act = linear_backward(&t.act, &b.ffn_w2, &d_x3, &mut g.ffn_w2, &mut g.ffn_b2);
        Zip::from(&mut d_act).and(&t.pre_act).for_each(|d, &u| *d *= gelu_grad(u));
        let d_h2 = linear_backward(&t.h2, &b.ffn_w1, &d_act, &mut g.ffn_w1, &mut g.ffn_b1);
        let mut d_x2 = layer_norm_backward(&d_h2, &t.ln2, &b.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
        d_x2 += &d_x3;

        // attention sublayer
        let d_ctx = linear_backward(&t.ctx, &b.w_o, &d_x2, &mut g.w_o, &mut g.b_o);
        let mut d_q = Array2::<T>::zeros(t.q.dim());
        let mut d_k = Array2::<T>::zeros(t.k.dim());
        let mut d_v = Array2::<T>::zeros(t.v.dim());
        for (si, w) in offsets.windows(2).enumerate() {
            let rows = w[0]..w[1];
            for head in 0..heads {
                let cols = head * dh..(head + 1) * dh;
                let probs = &t.probs[si * heads + head];
                let dc = d_ctx.slice(s![rows.clone(), cols.clone()]);
                let qs = t.q.slice(s![rows.clone(), cols.clone()]);
                let ks = t.k.slice(s![rows.clone(), cols.clone()]);
                let vs = t.v.slice(s![rows.clone(), cols.clone()]);

                general_mat_mul(T::one(), &probs.t(), &dc, T::zero(), &mut d_v.slice_mut(s![rows.clone(), cols.clone()]));
                let mut d_s = dc.dot(&vs.t());
                for (mut ds_row, p_row) in d_s.outer_iter_mut().zip(probs.outer_iter()) {
                    let dot: T = ds_row.iter().zip(p_row.iter()).map(|(&a, &b)| a * b).sum();
                    Zip::from(&mut ds_row).and(&p_row).for_each(|d, &p| *d = p * (*d - dot) * scale);
                }
                general_mat_mul(T::one(), &d_s, &ks, T::zero(), &mut d_q.slice_mut(s![rows.clone(), cols.clone()]));
                general_mat_mul(T::one(), &d_s.t(), &qs, T::zero(), &mut d_k.slice_mut(s![rows.clone(), cols]));
            }
        }
        let mut d_h1 = linear_backward(&t.h1, &b.w_q, &d_q, &mut g.w_q, &mut g.b_q);
        d_h1 += &linear_backward(&t.h1, &b.w_k, &d_k, &mut g.w_k, &mut g.b_k);
        d_h1 += &linear_backward(&t.h1, &b.w_v, &d_v, &mut g.w_v, &mut g.b_v);
        let mut d_x = layer_norm_backward(&d_h1, &t.ln1, &b.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
        d_x += &d_x2;
        d_x
    }

    /// Gradient of ⟨grad_out, encode(seq)⟩ for a single sequence.
    pub fn backward_single(&self, seq: &TokenSequence, grad_out: &[T]) -> Result<EncoderParams<T>> {
        if grad_out.len() != self.config.out_dim {
            return Err(Error::DimMismatch {
                left: grad_out.len(),
                right: self.config.out_dim,
            });
        }
        if grad_out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Encoder("non-finite output gradient".into()));
        }
        let (_, trace) = self.forward(std::slice::from_ref(seq))?;
        let mut grads = EncoderParams::zeros(&self.config);
        let d = ArrayView2::from_shape((1, grad_out.len()), grad_out).expect("shape checked above");
        self.backward(&trace, d, &mut grads)?;
        Ok(grads)
    }
}
