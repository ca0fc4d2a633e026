use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attention, cross_attention_cached, max_row_norm_ratio, nag_guide, nasa_combine, AttentionCache,
    AttentionParams, GuidanceConfig, NagTrace, Strategy,
};
use crate::diffusion::{Denoiser, GuidedPrediction};
use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::scalar::Scalar;

/// Points live in the plane.
pub const DATA_DIM: usize = 2;
/// `[x, y, t, sin(pi t), cos(pi t)]`
pub const INPUT_DIM: usize = DATA_DIM + 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// Predicts the added noise; sampled with the ddpm sampler.
    Epsilon,
    /// Predicts `x_1 - x_0` along the linear flow path.
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Data classes; the vocabulary adds one shared padding token.
    pub classes: usize,
    pub d_txt: usize,
    pub hidden: usize,
    /// Length of the query sequence produced by the encoder.
    pub slots: usize,
    pub d_img: usize,
    pub d_k: usize,
    pub parameterization: Parameterization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            d_txt: 8,
            hidden: 32,
            slots: 4,
            d_img: 8,
            d_k: 8,
            parameterization: Parameterization::Epsilon,
        }
    }
}

impl ModelConfig {
    pub fn vocab(&self) -> usize {
        self.classes + 1
    }

    pub fn pad_token(&self) -> usize {
        self.classes
    }

    /// Two-token condition: the class word followed by the padding token.
    pub fn condition(&self, class_id: usize) -> Vec<usize> {
        vec![class_id, self.pad_token()]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("classes", self.classes),
            ("d_txt", self.d_txt),
            ("hidden", self.hidden),
            ("slots", self.slots),
            ("d_img", self.d_img),
            ("d_k", self.d_k),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::param(name, "must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Conditional denoiser with one cross-attention block.
///
/// An MLP encodes `(x, t)` into a hidden vector and a `slots x d_img` query
/// sequence. The queries attend to the condition embeddings; the decoder
/// reads the hidden vector together with the flattened attention output.
/// Matrices act on row vectors (`y = x W + b`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct DenoiserModel<T> {
    pub config: ModelConfig,
    pub seed: u64,
    /// `vocab x d_txt`
    pub embed_table: Tensor<T>,
    pub attn: AttentionParams<T>,
    /// `INPUT_DIM x hidden`
    pub enc_w: Tensor<T>,
    pub enc_b: Tensor<T>,
    /// `hidden x (slots * d_img)`
    pub slot_w: Tensor<T>,
    pub slot_b: Tensor<T>,
    /// `(hidden + slots * d_k) x hidden`
    pub dec_w: Tensor<T>,
    pub dec_b: Tensor<T>,
    /// `hidden x DATA_DIM`
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

/// Names of the parameter blocks in serialization order.
pub const BLOCK_NAMES: [&str; 12] = [
    "embed_table",
    "w_q",
    "w_k",
    "w_v",
    "enc_w",
    "enc_b",
    "slot_w",
    "slot_b",
    "dec_w",
    "dec_b",
    "out_w",
    "out_b",
];

pub(crate) fn block_shapes(c: &ModelConfig) -> [Vec<usize>; 12] {
    let dec_in = c.hidden + c.slots * c.d_k;
    [
        vec![c.vocab(), c.d_txt],
        vec![c.d_img, c.d_k],
        vec![c.d_txt, c.d_k],
        vec![c.d_txt, c.d_k],
        vec![INPUT_DIM, c.hidden],
        vec![c.hidden],
        vec![c.hidden, c.slots * c.d_img],
        vec![c.slots * c.d_img],
        vec![dec_in, c.hidden],
        vec![c.hidden],
        vec![c.hidden, DATA_DIM],
        vec![DATA_DIM],
    ]
}

impl<T: Scalar> DenoiserModel<T> {
    /// All parameters zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let [e, q, k, v, ew, eb, sw, sb, dw, db, ow, ob] = block_shapes(&config).map(Tensor::zeros);
        Ok(Self {
            attn: AttentionParams::new(q, k, v)?,
            config,
            seed: 0,
            embed_table: e,
            enc_w: ew,
            enc_b: eb,
            slot_w: sw,
            slot_b: sb,
            dec_w: dw,
            dec_b: db,
            out_w: ow,
            out_b: ob,
        })
    }

    /// Glorot-uniform matrices, unit-uniform embeddings and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        m.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, block) in m.blocks_mut() {
            let shape = block.shape().to_vec();
            if shape.len() == 1 {
                continue;
            }
            let limit = if name == "embed_table" {
                1.0
            } else {
                (6.0 / (shape[0] + shape[1]) as f64).sqrt()
            };
            for v in block.data_mut() {
                *v = T::of(rng.gen_range(-limit..limit));
            }
        }
        Ok(m)
    }

    pub fn blocks(&self) -> [(&'static str, &Tensor<T>); 12] {
        [
            (BLOCK_NAMES[0], &self.embed_table),
            (BLOCK_NAMES[1], &self.attn.w_q),
            (BLOCK_NAMES[2], &self.attn.w_k),
            (BLOCK_NAMES[3], &self.attn.w_v),
            (BLOCK_NAMES[4], &self.enc_w),
            (BLOCK_NAMES[5], &self.enc_b),
            (BLOCK_NAMES[6], &self.slot_w),
            (BLOCK_NAMES[7], &self.slot_b),
            (BLOCK_NAMES[8], &self.dec_w),
            (BLOCK_NAMES[9], &self.dec_b),
            (BLOCK_NAMES[10], &self.out_w),
            (BLOCK_NAMES[11], &self.out_b),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 12] {
        [
            (BLOCK_NAMES[0], &mut self.embed_table),
            (BLOCK_NAMES[1], &mut self.attn.w_q),
            (BLOCK_NAMES[2], &mut self.attn.w_k),
            (BLOCK_NAMES[3], &mut self.attn.w_v),
            (BLOCK_NAMES[4], &mut self.enc_w),
            (BLOCK_NAMES[5], &mut self.enc_b),
            (BLOCK_NAMES[6], &mut self.slot_w),
            (BLOCK_NAMES[7], &mut self.slot_b),
            (BLOCK_NAMES[8], &mut self.dec_w),
            (BLOCK_NAMES[9], &mut self.dec_b),
            (BLOCK_NAMES[10], &mut self.out_w),
            (BLOCK_NAMES[11], &mut self.out_b),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.is_finite())
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for ((_, dst), (_, src)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += scale * s;
            }
        }
    }

    /// Embedding rows for a token sequence.
    pub fn text(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        if tokens.is_empty() {
            return Err(Error::param("condition_tokens", "need at least one token"));
        }
        let vocab = self.config.vocab();
        let mut rows = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            if tok >= vocab {
                return Err(Error::InvalidToken { token: tok, vocab });
            }
            rows.push(self.embed_table.row(tok));
        }
        Tensor::from_rows(&rows)
    }

    fn encode(&self, x: &[T], t: T) -> Encoded<T> {
        let pi_t = T::of(std::f64::consts::PI) * t;
        let feat = vec![x[0], x[1], t, pi_t.sin(), pi_t.cos()];
        let h: Vec<T> = affine(&feat, &self.enc_w, &self.enc_b)
            .into_iter()
            .map(|v| v.tanh())
            .collect();
        let q = affine(&h, &self.slot_w, &self.slot_b);
        let q_in = Tensor::new(vec![self.config.slots, self.config.d_img], q).expect("slot shape");
        Encoded { feat, h, q_in }
    }

    fn decode(&self, h: &[T], z: &Tensor<T>) -> Decoded<T> {
        let mut dec_in = Vec::with_capacity(h.len() + z.len());
        dec_in.extend_from_slice(h);
        dec_in.extend_from_slice(z.data());
        let g: Vec<T> = affine(&dec_in, &self.dec_w, &self.dec_b)
            .into_iter()
            .map(|v| v.tanh())
            .collect();
        let out = affine(&g, &self.out_w, &self.out_b);
        Decoded { dec_in, g, out }
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != DATA_DIM {
            return Err(Error::dim(
                "DenoiserModel::forward",
                format!("expected n x {DATA_DIM} points, got {:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Prediction for a single point.
    pub fn forward(&self, x_t: &[T], t: T, condition_tokens: &[usize]) -> Result<[T; DATA_DIM]> {
        let out = self.predict(
            &Tensor::new(vec![1, DATA_DIM], x_t.to_vec())?,
            t,
            condition_tokens,
        )?;
        Ok([out.data()[0], out.data()[1]])
    }

    /// Mean-squared error over the batch and its gradient with respect to
    /// every parameter.
    pub fn loss_and_gradient(&self, batch: &TrainBatch<T>) -> Result<(T, DenoiserModel<T>)> {
        batch.validate()?;
        let mut grad = DenoiserModel::zeros(self.config.clone())?;
        let n = batch.len();
        let norm = T::of((n * DATA_DIM) as f64);
        let mut loss = T::zero();
        for i in 0..n {
            let text = self.text(&batch.conditions[i])?;
            let enc = self.encode(batch.x_t.row(i), batch.time[i]);
            let cache = cross_attention_cached(&enc.q_in, &text, &self.attn)?;
            let dec = self.decode(&enc.h, &cache.z);
            let target = batch.target.row(i);
            let mut dout = [T::zero(); DATA_DIM];
            for j in 0..DATA_DIM {
                let r = dec.out[j] - target[j];
                loss += r * r;
                dout[j] = T::of(2.0) * r / norm;
            }
            self.backward(&mut grad, &batch.conditions[i], &text, &enc, &cache, &dec, &dout);
        }
        Ok((loss / norm, grad))
    }

    /// Loss only.
    pub fn loss(&self, batch: &TrainBatch<T>) -> Result<T> {
        batch.validate()?;
        let n = batch.len();
        let mut loss = T::zero();
        for i in 0..n {
            let x = Tensor::new(vec![1, DATA_DIM], batch.x_t.row(i).to_vec())?;
            let out = self.predict(&x, batch.time[i], &batch.conditions[i])?;
            for j in 0..DATA_DIM {
                let r = out.data()[j] - batch.target.row(i)[j];
                loss += r * r;
            }
        }
        Ok(loss / T::of((n * DATA_DIM) as f64))
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        grad: &mut DenoiserModel<T>,
        tokens: &[usize],
        text: &Tensor<T>,
        enc: &Encoded<T>,
        cache: &AttentionCache<T>,
        dec: &Decoded<T>,
        dout: &[T; DATA_DIM],
    ) {
        let c = &self.config;
        let hidden = c.hidden;

        // output layer
        outer_add(&mut grad.out_w, &dec.g, dout);
        add_into(grad.out_b.data_mut(), dout);
        let dg = mat_vec(&self.out_w, dout);
        let dg_pre: Vec<T> = dg
            .iter()
            .zip(&dec.g)
            .map(|(&d, &g)| d * (T::one() - g * g))
            .collect();

        // decoder layer
        outer_add(&mut grad.dec_w, &dec.dec_in, &dg_pre);
        add_into(grad.dec_b.data_mut(), &dg_pre);
        let d_dec_in = mat_vec(&self.dec_w, &dg_pre);
        let mut dh = d_dec_in[..hidden].to_vec();
        let dz = &d_dec_in[hidden..];

        // attention
        let (l, s, d_k) = (c.slots, text.rows(), c.d_k);
        let heads = self.attn.heads;
        let hd = d_k / heads;
        let inv_sqrt = T::one() / T::of(hd as f64).sqrt();
        let mut dq = vec![T::zero(); l * d_k];
        let mut dk = vec![T::zero(); s * d_k];
        let mut dv = vec![T::zero(); s * d_k];
        for h in 0..heads {
            let off = h * hd;
            let a = &cache.weights[h];
            for i in 0..l {
                let mut da = vec![T::zero(); s];
                for (j, daj) in da.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for col in off..off + hd {
                        acc += dz[i * d_k + col] * cache.v.get(j, col);
                    }
                    *daj = acc;
                }
                let arow = a.row(i);
                let mut dot = T::zero();
                for j in 0..s {
                    dot += arow[j] * da[j];
                }
                for j in 0..s {
                    let ds = arow[j] * (da[j] - dot) * inv_sqrt;
                    for col in off..off + hd {
                        dq[i * d_k + col] += ds * cache.k.get(j, col);
                        dk[j * d_k + col] += ds * cache.q.get(i, col);
                        dv[j * d_k + col] += arow[j] * dz[i * d_k + col];
                    }
                }
            }
        }
        let dq = Tensor::new(vec![l, d_k], dq).expect("shape");
        let dk = Tensor::new(vec![s, d_k], dk).expect("shape");
        let dv = Tensor::new(vec![s, d_k], dv).expect("shape");
        for i in 0..l {
            outer_add(&mut grad.attn.w_q, enc.q_in.row(i), dq.row(i));
        }
        for j in 0..s {
            outer_add(&mut grad.attn.w_k, text.row(j), dk.row(j));
            outer_add(&mut grad.attn.w_v, text.row(j), dv.row(j));
            let mut de = mat_vec(&self.attn.w_k, dk.row(j));
            add_into(&mut de, &mat_vec(&self.attn.w_v, dv.row(j)));
            add_into(grad.embed_table.row_mut(tokens[j]), &de);
        }
        let mut dq_flat = Vec::with_capacity(l * c.d_img);
        for i in 0..l {
            dq_flat.extend(mat_vec(&self.attn.w_q, dq.row(i)));
        }

        // query slots
        outer_add(&mut grad.slot_w, &enc.h, &dq_flat);
        add_into(grad.slot_b.data_mut(), &dq_flat);
        add_into(&mut dh, &mat_vec(&self.slot_w, &dq_flat));

        // encoder
        let dh_pre: Vec<T> = dh
            .iter()
            .zip(&enc.h)
            .map(|(&d, &h)| d * (T::one() - h * h))
            .collect();
        outer_add(&mut grad.enc_w, &enc.feat, &dh_pre);
        add_into(grad.enc_b.data_mut(), &dh_pre);
    }

    fn guided_row(
        &self,
        x: &[T],
        t: T,
        text_pos: &Tensor<T>,
        text_neg: &Tensor<T>,
        guidance: &GuidanceConfig<T>,
    ) -> Result<(Vec<T>, Option<NagTrace<T>>, Option<T>)> {
        let enc = self.encode(x, t);
        let z_pos = cross_attention(&enc.q_in, text_pos, &self.attn)?;
        let z_neg = cross_attention(&enc.q_in, text_neg, &self.attn)?;
        let (z_out, trace) = match guidance.strategy {
            Strategy::Nag => {
                let (z, tr) = nag_guide(&z_pos, &z_neg, guidance, self.attn.heads)?;
                (z, Some(tr))
            }
            Strategy::Nasa => (nasa_combine(&z_pos, &z_neg, guidance.phi)?, None),
            other => {
                return Err(Error::param(
                    "strategy",
                    format!("{other} does not act on attention features"),
                ))
            }
        };
        let ratio = max_row_norm_ratio(&z_out, &z_pos);
        Ok((self.decode(&enc.h, &z_out).out, trace, ratio))
    }
}

struct Encoded<T> {
    feat: Vec<T>,
    h: Vec<T>,
    q_in: Tensor<T>,
}

struct Decoded<T> {
    dec_in: Vec<T>,
    g: Vec<T>,
    out: Vec<T>,
}

/// Supervised minibatch: model inputs, regression targets and the condition
/// tokens of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch<T> {
    pub x_t: Tensor<T>,
    pub time: Vec<T>,
    pub target: Tensor<T>,
    pub conditions: Vec<Vec<usize>>,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.time.len();
        if n == 0
            || self.x_t.shape() != [n, DATA_DIM]
            || self.target.shape() != [n, DATA_DIM]
            || self.conditions.len() != n
        {
            return Err(Error::dim(
                "TrainBatch",
                format!(
                    "x_t {:?}, target {:?}, {} times, {} conditions",
                    self.x_t.shape(),
                    self.target.shape(),
                    n,
                    self.conditions.len()
                ),
            ));
        }
        Ok(())
    }
}

impl<T: Scalar> Denoiser<T> for DenoiserModel<T> {
    fn data_dim(&self) -> usize {
        DATA_DIM
    }

    fn predict(&self, x: &Tensor<T>, t: T, cond: &[usize]) -> Result<Tensor<T>> {
        self.check_batch(x)?;
        let text = self.text(cond)?;
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            let enc = self.encode(x.row(i), t);
            let z = cross_attention(&enc.q_in, &text, &self.attn)?;
            out.extend(self.decode(&enc.h, &z).out);
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    fn predict_attention_guided(
        &self,
        x: &Tensor<T>,
        t: T,
        cond_pos: &[usize],
        cond_neg: &[usize],
        guidance: &GuidanceConfig<T>,
    ) -> Result<GuidedPrediction<T>> {
        self.check_batch(x)?;
        let text_pos = self.text(cond_pos)?;
        let text_neg = self.text(cond_neg)?;
        let mut out = Vec::with_capacity(x.len());
        let mut first_trace = None;
        let mut max_ratio: Option<T> = None;
        for i in 0..x.rows() {
            let (o, trace, ratio) = self.guided_row(x.row(i), t, &text_pos, &text_neg, guidance)?;
            out.extend(o);
            if i == 0 {
                first_trace = trace;
            }
            if let Some(r) = ratio {
                max_ratio = Some(max_ratio.map_or(r, |m| m.max(r)));
            }
        }
        Ok(GuidedPrediction {
            output: Tensor::new(x.shape().to_vec(), out)?,
            trace: first_trace,
            max_out_ratio: max_ratio,
        })
    }
}

/// `v W + b`
fn affine<T: Scalar>(v: &[T], w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let cols = w.cols();
    let mut out = b.data().to_vec();
    for (i, &vi) in v.iter().enumerate() {
        let row = &w.data()[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += vi * wij;
        }
    }
    out
}

/// `W v`, i.e. `v W^T` for a row vector `v` of width `W.cols()`.
fn mat_vec<T: Scalar>(w: &Tensor<T>, v: &[T]) -> Vec<T> {
    (0..w.rows())
        .map(|i| {
            let mut acc = T::zero();
            for (&wij, &vj) in w.row(i).iter().zip(v) {
                acc += wij * vj;
            }
            acc
        })
        .collect()
}

/// `W += a^T b`
fn outer_add<T: Scalar>(w: &mut Tensor<T>, a: &[T], b: &[T]) {
    let cols = w.cols();
    let data = w.data_mut();
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            data[i * cols + j] += ai * bj;
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_output_bias() {
        let mut m = DenoiserModel::<f64>::zeros(ModelConfig::default()).unwrap();
        m.out_b = Tensor::vector(vec![0.25, -1.5]);
        let out = m.forward(&[3.0, -2.0], 0.7, &[0, 2]).unwrap();
        assert_eq!(out, [0.25, -1.5]);
    }

    #[test]
    fn single_token_attention_scales_only_values() {
        let m = DenoiserModel::<f64>::init(ModelConfig::default(), 4).unwrap();
        let enc = m.encode(&[0.3, -0.2], 0.5);
        let text = m.text(&[0]).unwrap();
        let doubled = text.map(|v| 2.0 * v);
        let a = cross_attention_cached(&enc.q_in, &text, &m.attn).unwrap();
        let b = cross_attention_cached(&enc.q_in, &doubled, &m.attn).unwrap();
        assert!(a.weights[0].data().iter().all(|&w| w == 1.0));
        assert_eq!(a.weights, b.weights);
        for (x, y) in a.z.data().iter().zip(b.z.data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_tokens_are_rejected() {
        let m = DenoiserModel::<f64>::init(ModelConfig::default(), 0).unwrap();
        assert!(matches!(
            m.forward(&[0.0, 0.0], 0.5, &[3]),
            Err(Error::InvalidToken { token: 3, vocab: 3 })
        ));
        assert!(m.forward(&[0.0, 0.0], 0.5, &[]).is_err());
        let bad = Tensor::zeros(vec![2, 3]);
        assert!(m.predict(&bad, 0.5, &[0, 2]).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = DenoiserModel::<f64>::init(ModelConfig::default(), 1).unwrap();
        let b = DenoiserModel::<f64>::init(ModelConfig::default(), 1).unwrap();
        let c = DenoiserModel::<f64>::init(ModelConfig::default(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(
            a.parameter_count(),
            3 * 8 + 3 * 64 + 5 * 32 + 32 + 32 * 32 + 32 + 64 * 32 + 32 + 64 + 2
        );
    }

    #[test]
    fn guided_prediction_rejects_output_space_strategy() {
        let m = DenoiserModel::<f64>::init(ModelConfig::default(), 0).unwrap();
        let x = Tensor::zeros(vec![1, 2]);
        let cfg = GuidanceConfig::default().with_strategy(Strategy::Cfg);
        assert!(m
            .predict_attention_guided(&x, 0.5, &[0, 2], &[1, 2], &cfg)
            .is_err());
    }
}
