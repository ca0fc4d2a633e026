//! Scaled dot-product cross-attention and the attention-space guidance
//! processors: plain, NASA (`Z+ - phi Z-`) and normalized attention guidance.
//!
//! Normalized attention guidance runs three stages on the attention outputs
//! of a positive and a negative condition:
//!
//! 1. extrapolation `Z~ = Z+ + phi (Z+ - Z-)`,
//! 2. per-token L1 clipping: with `R[i] = |Z~[i]|_1 / |Z+[i]|_1`, rows whose
//!    ratio exceeds `tau` are rescaled by `tau / R[i]`,
//! 3. refinement `Z = alpha Z^ + (1 - alpha) Z+`.
//!
//! Clipping only rescales, so every output row stays collinear with its
//! extrapolated row and its L1 norm never exceeds `tau |Z+[i]|_1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, l1, matmul, softmax_in_place, Tensor};
use crate::scalar::Scalar;

/// Target L1 norm multiplier for rows whose positive features vanish.
pub const ZERO_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct AttentionParams<T> {
    /// `d_img x d_k`
    pub w_q: Tensor<T>,
    /// `d_txt x d_k`
    pub w_k: Tensor<T>,
    /// `d_txt x d_k`
    pub w_v: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(w_q: Tensor<T>, w_k: Tensor<T>, w_v: Tensor<T>) -> Result<Self> {
        Self::with_heads(w_q, w_k, w_v, 1)
    }

    pub fn with_heads(w_q: Tensor<T>, w_k: Tensor<T>, w_v: Tensor<T>, heads: usize) -> Result<Self> {
        let p = Self { w_q, w_k, w_v, heads };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if w.shape().len() != 2 {
                return Err(Error::dim("AttentionParams", format!("{name} must be a matrix")));
            }
        }
        let d_k = self.w_q.cols();
        if self.w_k.cols() != d_k || self.w_v.cols() != d_k || self.w_k.rows() != self.w_v.rows() {
            return Err(Error::dim(
                "AttentionParams",
                format!(
                    "w_q {:?}, w_k {:?}, w_v {:?} disagree on d_k or d_txt",
                    self.w_q.shape(),
                    self.w_k.shape(),
                    self.w_v.shape()
                ),
            ));
        }
        if d_k == 0 || self.heads == 0 || !d_k.is_multiple_of(self.heads) {
            return Err(Error::param(
                "heads",
                format!("{} heads cannot split d_k = {d_k}", self.heads),
            ));
        }
        Ok(())
    }

    pub fn d_img(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_txt(&self) -> usize {
        self.w_k.rows()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.d_k() / self.heads
    }
}

/// Intermediates of one cross-attention call, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Softmax weights per head, each `l x s`.
    pub weights: Vec<Tensor<T>>,
    pub z: Tensor<T>,
}

pub fn cross_attention_cached<T: Scalar>(
    q_in: &Tensor<T>,
    text: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<AttentionCache<T>> {
    if q_in.shape().len() != 2 || q_in.cols() != params.d_img() {
        return Err(Error::dim(
            "cross_attention",
            format!(
                "query input {:?} does not match d_img = {}",
                q_in.shape(),
                params.d_img()
            ),
        ));
    }
    if text.shape().len() != 2 || text.cols() != params.d_txt() || text.rows() == 0 {
        return Err(Error::dim(
            "cross_attention",
            format!(
                "text {:?} does not match d_txt = {}",
                text.shape(),
                params.d_txt()
            ),
        ));
    }
    let q = matmul(q_in, &params.w_q)?;
    let k = matmul(text, &params.w_k)?;
    let v = matmul(text, &params.w_v)?;

    let (l, s, d_k) = (q.rows(), k.rows(), params.d_k());
    let hd = params.head_dim();
    let inv_sqrt = T::one() / T::of(hd as f64).sqrt();
    let mut z = vec![T::zero(); l * d_k];
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let off = h * hd;
        let mut a = vec![T::zero(); l * s];
        for i in 0..l {
            let qi = &q.row(i)[off..off + hd];
            let row = &mut a[i * s..(i + 1) * s];
            for (j, slot) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[off..off + hd];
                let mut dot = T::zero();
                for c in 0..hd {
                    dot += qi[c] * kj[c];
                }
                *slot = dot * inv_sqrt;
            }
            softmax_in_place(row);
            for c in 0..hd {
                let mut acc = T::zero();
                for j in 0..s {
                    acc += row[j] * v.row(j)[off + c];
                }
                z[i * d_k + off + c] = acc;
            }
        }
        weights.push(Tensor::new(vec![l, s], a)?);
    }
    Ok(AttentionCache {
        q,
        k,
        v,
        weights,
        z: Tensor::new(vec![l, d_k], z)?,
    })
}

/// `softmax(Q K^T / sqrt(d)) V` with `Q = q_in w_q`, `K = text w_k`,
/// `V = text w_v`; `d` is the per-head width.
pub fn cross_attention<T: Scalar>(
    q_in: &Tensor<T>,
    text: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    Ok(cross_attention_cached(q_in, text, params)?.z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    None,
    Cfg,
    Nasa,
    Nag,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::Cfg, Strategy::Nasa, Strategy::Nag];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Cfg => "cfg",
            Strategy::Nasa => "nasa",
            Strategy::Nag => "nag",
        }
    }

    /// Whether the strategy rewrites cross-attention outputs.
    pub fn is_attention_space(self) -> bool {
        matches!(self, Strategy::Nasa | Strategy::Nag)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Strategy::None),
            "cfg" => Ok(Strategy::Cfg),
            "nasa" => Ok(Strategy::Nasa),
            "nag" => Ok(Strategy::Nag),
            other => Err(Error::param(
                "strategy",
                format!("unknown strategy `{other}` (expected none, cfg, nasa or nag)"),
            )),
        }
    }
}

/// Guidance strategy and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct GuidanceConfig<T> {
    pub strategy: Strategy,
    /// Guidance scale.
    pub phi: T,
    /// Upper bound on the per-token L1 ratio.
    pub tau: T,
    /// Weight of the normalized features in the refinement blend.
    pub alpha: T,
    /// Fraction of leading sampler steps that receive guidance.
    pub theta: T,
    /// Ablation: skip the L1 clipping stage.
    #[serde(default)]
    pub disable_normalization: bool,
    /// Ablation: skip the refinement blend (equivalent to `alpha = 1`).
    #[serde(default)]
    pub disable_refinement: bool,
    /// Output-space CFG scale stacked on top of attention-space guidance.
    /// The attention processor runs inside the positive branch, then CFG
    /// combines that branch with a plain negative branch.
    #[serde(default)]
    pub compose_cfg: Option<T>,
}

impl<T: Scalar> Default for GuidanceConfig<T> {
    fn default() -> Self {
        Self {
            strategy: Strategy::Nag,
            phi: T::of(4.0),
            tau: T::of(2.5),
            alpha: T::of(0.25),
            theta: T::one(),
            disable_normalization: false,
            disable_refinement: false,
            compose_cfg: None,
        }
    }
}

impl<T: Scalar> GuidanceConfig<T> {
    pub fn none() -> Self {
        Self {
            strategy: Strategy::None,
            ..Self::default()
        }
    }

    pub fn nag(phi: T, tau: T, alpha: T) -> Self {
        Self {
            strategy: Strategy::Nag,
            phi,
            tau,
            alpha,
            ..Self::default()
        }
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn with_theta(mut self, theta: T) -> Self {
        self.theta = theta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi >= T::zero()) || !self.phi.is_finite() {
            return Err(Error::param(
                "phi",
                format!("must be finite and >= 0, got {}", self.phi),
            ));
        }
        if !(self.tau > T::zero()) || !self.tau.is_finite() {
            return Err(Error::param(
                "tau",
                format!("must be finite and > 0, got {}", self.tau),
            ));
        }
        if !(self.alpha >= T::zero() && self.alpha <= T::one()) {
            return Err(Error::param(
                "alpha",
                format!("must lie in [0, 1], got {}", self.alpha),
            ));
        }
        if !(self.theta >= T::zero() && self.theta <= T::one()) {
            return Err(Error::param(
                "theta",
                format!("must lie in [0, 1], got {}", self.theta),
            ));
        }
        if (self.disable_normalization || self.disable_refinement) && self.strategy != Strategy::Nag {
            return Err(Error::param(
                "disable_normalization",
                format!("ablation flags require strategy nag, got {}", self.strategy),
            ));
        }
        if let Some(s) = self.compose_cfg {
            if !(s >= T::zero()) || !s.is_finite() {
                return Err(Error::param(
                    "compose_cfg",
                    format!("must be finite and >= 0, got {s}"),
                ));
            }
        }
        Ok(())
    }
}

/// Every intermediate of one normalized-attention-guidance call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct NagTrace<T> {
    pub z_pos: Tensor<T>,
    pub z_neg: Tensor<T>,
    pub z_tilde: Tensor<T>,
    /// Per-token ratio `|Z~[i]|_1 / |Z+[i]|_1`; shape `[l]`, or `[l, heads]`
    /// when normalizing per head. `+inf` marks a vanished positive row.
    pub ratio: Tensor<T>,
    pub z_hat: Tensor<T>,
    pub z_nag: Tensor<T>,
    /// Number of ratios strictly above `tau`.
    pub clipped_count: usize,
}

/// `Z~ = Z+ + phi (Z+ - Z-)`.
pub fn nag_extrapolate<T: Scalar>(z_pos: &Tensor<T>, z_neg: &Tensor<T>, phi: T) -> Result<Tensor<T>> {
    linalg::extrapolate("nag_extrapolate", z_pos, z_neg, phi)
}

/// Per-token L1 clipping of the extrapolated features against `tau`.
///
/// Returns the clipped features and the ratio tensor. Rows with ratio at or
/// below `tau` are copied without touching their values.
pub fn nag_normalize<T: Scalar>(
    z_tilde: &Tensor<T>,
    z_pos: &Tensor<T>,
    tau: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    nag_normalize_heads(z_tilde, z_pos, tau, 1)
}

/// As [`nag_normalize`], with the feature dimension split into `heads`
/// contiguous groups that are normalized independently.
pub fn nag_normalize_heads<T: Scalar>(
    z_tilde: &Tensor<T>,
    z_pos: &Tensor<T>,
    tau: T,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if z_tilde.shape() != z_pos.shape() {
        return Err(Error::dim(
            "nag_normalize",
            format!("shapes {:?} and {:?} differ", z_tilde.shape(), z_pos.shape()),
        ));
    }
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::param("tau", format!("must be finite and > 0, got {tau}")));
    }
    let (l, d) = (z_tilde.rows(), z_tilde.cols());
    if heads == 0 || d % heads != 0 {
        return Err(Error::param(
            "heads",
            format!("{heads} heads cannot split d = {d}"),
        ));
    }
    let hd = d / heads;
    let floor = T::of(ZERO_NORM_FLOOR);
    let mut out = z_tilde.clone();
    let mut ratio = Vec::with_capacity(l * heads);
    for i in 0..l {
        for h in 0..heads {
            let span = h * hd..(h + 1) * hd;
            let pos_norm = l1(&z_pos.row(i)[span.clone()]);
            let tilde_norm = l1(&z_tilde.row(i)[span.clone()]);
            let factor = if pos_norm > T::zero() {
                let r = tilde_norm / pos_norm;
                ratio.push(r);
                (r > tau).then(|| tau / r)
            } else if tilde_norm > T::zero() {
                ratio.push(T::infinity());
                Some(tau * floor / tilde_norm)
            } else {
                ratio.push(T::zero());
                None
            };
            if let Some(f) = factor {
                for v in &mut out.row_mut(i)[span] {
                    *v *= f;
                }
            }
        }
    }
    let ratio_shape = if heads == 1 { vec![l] } else { vec![l, heads] };
    Ok((out, Tensor::new(ratio_shape, ratio)?))
}

/// `alpha Z^ + (1 - alpha) Z+`.
pub fn nag_refine<T: Scalar>(z_hat: &Tensor<T>, z_pos: &Tensor<T>, alpha: T) -> Result<Tensor<T>> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::param("alpha", format!("must lie in [0, 1], got {alpha}")));
    }
    linalg::lerp(z_pos, z_hat, alpha)
}

/// Applies the full guidance pipeline to precomputed attention outputs,
/// honoring the ablation flags in `cfg`.
pub fn nag_guide<T: Scalar>(
    z_pos: &Tensor<T>,
    z_neg: &Tensor<T>,
    cfg: &GuidanceConfig<T>,
    heads: usize,
) -> Result<(Tensor<T>, NagTrace<T>)> {
    let z_tilde = nag_extrapolate(z_pos, z_neg, cfg.phi)?;
    let (normalized, ratio) = nag_normalize_heads(&z_tilde, z_pos, cfg.tau, heads)?;
    let z_hat = if cfg.disable_normalization {
        z_tilde.clone()
    } else {
        normalized
    };
    let z_nag = if cfg.disable_refinement {
        z_hat.clone()
    } else {
        nag_refine(&z_hat, z_pos, cfg.alpha)?
    };
    let clipped_count = ratio.data().iter().filter(|&&r| r > cfg.tau).count();
    let trace = NagTrace {
        z_pos: z_pos.clone(),
        z_neg: z_neg.clone(),
        z_tilde,
        ratio,
        z_hat,
        z_nag: z_nag.clone(),
        clipped_count,
    };
    Ok((z_nag, trace))
}

/// Cross-attention with normalized attention guidance.
///
/// Attends the same queries to the positive and the negative text, then
/// extrapolates, clips and refines. Returns the refined features with the
/// full trace.
pub fn nag_attention<T: Scalar>(
    q_in: &Tensor<T>,
    text_pos: &Tensor<T>,
    text_neg: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &GuidanceConfig<T>,
) -> Result<(Tensor<T>, NagTrace<T>)> {
    if cfg.strategy != Strategy::Nag {
        return Err(Error::param(
            "strategy",
            format!("nag_attention needs strategy nag, got {}", cfg.strategy),
        ));
    }
    cfg.validate()?;
    let z_pos = cross_attention(q_in, text_pos, params)?;
    let z_neg = cross_attention(q_in, text_neg, params)?;
    nag_guide(&z_pos, &z_neg, cfg, params.heads)
}

/// `Z+ - phi Z-`.
pub fn nasa_combine<T: Scalar>(z_pos: &Tensor<T>, z_neg: &Tensor<T>, phi: T) -> Result<Tensor<T>> {
    if !(phi >= T::zero()) {
        return Err(Error::param("phi", format!("must be >= 0, got {phi}")));
    }
    let scaled = linalg::scale(z_neg, phi);
    linalg::sub(z_pos, &scaled)
}

pub fn nasa_attention<T: Scalar>(
    q_in: &Tensor<T>,
    text_pos: &Tensor<T>,
    text_neg: &Tensor<T>,
    params: &AttentionParams<T>,
    phi: T,
) -> Result<Tensor<T>> {
    let z_pos = cross_attention(q_in, text_pos, params)?;
    let z_neg = cross_attention(q_in, text_neg, params)?;
    nasa_combine(&z_pos, &z_neg, phi)
}

/// Largest `|out[i]|_1 / |reference[i]|_1` over rows with a non-zero
/// reference norm.
pub fn max_row_norm_ratio<T: Scalar>(out: &Tensor<T>, reference: &Tensor<T>) -> Option<T> {
    (0..out.rows())
        .filter_map(|i| {
            let r = l1(reference.row(i));
            (r > T::zero()).then(|| l1(out.row(i)) / r)
        })
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
}
