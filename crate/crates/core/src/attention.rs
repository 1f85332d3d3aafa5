// SPDX-License-Identifier: Apache-2.0

//! Standard and credal scaled dot-product attention.
//!
//! Credal attention reads each score as log-evidence, `e_ij = exp(s_ij)`, and
//! each query row as a Dirichlet with concentrations `α_ij = e_ij + 1`. The
//! attention weights are the Dirichlet mean `α_ij / α_i0` and the row's
//! vacuity is `U_i = L / α_i0`.
//!
//! Everything is evaluated in the log domain: `log α = softplus(s)`,
//! `â = softmax_row(log α)`, `log α_i0 = logsumexp_row(log α)` and
//! `U = exp(log L - log α_i0)`. This is algebraically identical to the
//! linear form and never materializes `exp(s)`. Max subtraction does not
//! stabilize the linear form here because shifting scores changes the total
//! evidence, and with it `U`.
//!
//! Masked keys are removed from the Dirichlet support: they carry zero
//! evidence, contribute no `α`, and `L` becomes the number of attendable keys
//! in the row.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Standard,
    #[default]
    Credal,
}

impl Mechanism {
    pub const ALL: [Mechanism; 2] = [Mechanism::Standard, Mechanism::Credal];

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Standard => "standard",
            Mechanism::Credal => "credal",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Mechanism::Standard),
            "credal" => Ok(Mechanism::Credal),
            other => Err(Error::Config(format!(
                "unknown mechanism {other:?}, expected standard or credal"
            ))),
        }
    }
}

/// Map from raw score to evidence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceFn {
    /// `e = exp(s)`.
    #[default]
    Exp,
    /// `e = log(1 + exp(s))`.
    Softplus,
    /// `e = max(s, 0)`.
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionOptions {
    pub evidence: EvidenceFn,
    /// Constant added to every score before normalization.
    pub score_offset: f64,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self {
            evidence: EvidenceFn::Exp,
            score_offset: 0.0,
        }
    }
}

/// Queries `L×d_k`, keys `L×d_k`, values `L×d_v` and an optional mask.
#[derive(Clone, Debug)]
pub struct AttentionInputs<'t> {
    pub q: Var<'t>,
    pub k: Var<'t>,
    pub v: Var<'t>,
    pub mask: Option<Mask>,
}

impl<'t> AttentionInputs<'t> {
    pub fn new(q: Var<'t>, k: Var<'t>, v: Var<'t>, mask: Option<Mask>) -> Result<Self> {
        let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
            return Err(dim_err("attention inputs", &qs, &ks));
        }
        if qs[1] != ks[1] {
            return Err(dim_err("attention q/k", &qs, &ks));
        }
        if ks[0] != vs[0] {
            return Err(dim_err("attention k/v", &ks, &vs));
        }
        if let Some(m) = &mask {
            if m.rows() != qs[0] || m.cols() != ks[0] {
                return Err(dim_err("attention mask", &[qs[0], ks[0]], &[m.rows(), m.cols()]));
            }
        }
        Ok(Self { q, k, v, mask })
    }
}

/// Raw scores `s_ij` with the mask that applies to them.
#[derive(Clone, Debug)]
pub struct ScoreMatrix<'t> {
    pub s: Var<'t>,
    mask: Option<Mask>,
    effective_len: Vec<usize>,
}

impl<'t> ScoreMatrix<'t> {
    pub fn new(s: Var<'t>, mask: Option<Mask>) -> Result<Self> {
        let shape = s.shape();
        let [rows, cols] = shape[..] else {
            return Err(Error::Input(format!("scores must be a matrix, got {shape:?}")));
        };
        let effective_len = match &mask {
            Some(m) if m.rows() == rows && m.cols() == cols => m.row_counts(),
            Some(m) => return Err(dim_err("score mask", &shape, &[m.rows(), m.cols()])),
            None => vec![cols; rows],
        };
        Ok(Self { s, mask, effective_len })
    }

    pub fn from_tensor(tape: &'t Tape, s: Tensor, mask: Option<Mask>) -> Result<Self> {
        Self::new(tape.constant(s), mask)
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }

    /// Attendable keys per query row.
    pub fn effective_len(&self) -> &[usize] {
        &self.effective_len
    }

    /// The same scores plus a constant.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            s: self.s.add_scalar(c),
            mask: self.mask.clone(),
            effective_len: self.effective_len.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StandardAttentionOutput<'t> {
    pub a: Var<'t>,
    pub context: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct CredalAttentionOutput<'t> {
    /// Expected attention weights `α_ij / α_i0`.
    pub a_hat: Var<'t>,
    /// `log e_ij`; `-inf` at masked keys.
    pub log_evidence: Var<'t>,
    /// Concentrations; zero at masked keys.
    pub alpha: Var<'t>,
    pub alpha0: Var<'t>,
    /// Per-query vacuity `L_eff / α_i0`.
    pub vacuity: Var<'t>,
    pub context: Var<'t>,
}

/// Dirichlet parameters of each query row.
#[derive(Clone, Debug)]
pub struct Concentration<'t> {
    pub log_alpha: Var<'t>,
    pub alpha: Var<'t>,
    pub log_alpha0: Var<'t>,
    pub alpha0: Var<'t>,
    pub effective_len: Vec<usize>,
}

/// `s = Q·Kᵀ / √d_k`.
pub fn compute_scores<'t>(inputs: &AttentionInputs<'t>) -> Result<ScoreMatrix<'t>> {
    let d_k = inputs.q.shape()[1];
    let s = inputs
        .q
        .matmul(inputs.k.transpose()?)?
        .scale(1.0 / (d_k as f64).sqrt());
    ScoreMatrix::new(s, inputs.mask.clone())
}

pub fn standard_attention<'t>(scores: &ScoreMatrix<'t>, v: Var<'t>) -> Result<StandardAttentionOutput<'t>> {
    let a = scores.s.softmax_rows(scores.mask())?;
    let context = a.matmul(v)?;
    Ok(StandardAttentionOutput { a, context })
}

/// `log e_ij`, kept in the log domain. Masked keys get `-inf`.
pub fn evidence_from_scores<'t>(scores: &ScoreMatrix<'t>, evidence: EvidenceFn) -> Result<Var<'t>> {
    let log_e = match evidence {
        EvidenceFn::Exp => scores.s,
        EvidenceFn::Softplus => scores.s.softplus().ln(),
        EvidenceFn::Relu => scores.s.relu().ln(),
    };
    match scores.mask() {
        Some(m) => log_e.masked_fill(m, f64::NEG_INFINITY),
        None => Ok(log_e),
    }
}

/// `α = e + 1` and `α_0 = Σ_j α_j` over attendable keys, evaluated as
/// `log α = log1p(e)` without forming `e` for the exponential map.
pub fn concentration<'t>(scores: &ScoreMatrix<'t>, evidence: EvidenceFn) -> Result<Concentration<'t>> {
    let log_alpha = match evidence {
        EvidenceFn::Exp => scores.s.softplus(),
        EvidenceFn::Softplus => scores.s.softplus().ln_1p(),
        EvidenceFn::Relu => scores.s.relu().ln_1p(),
    };
    let log_alpha = match scores.mask() {
        Some(m) => log_alpha.masked_fill(m, f64::NEG_INFINITY)?,
        None => log_alpha,
    };
    let alpha = log_alpha.exp();
    let log_alpha0 = log_alpha.logsumexp_rows(scores.mask())?;
    let alpha0 = log_alpha0.exp();
    Ok(Concentration {
        log_alpha,
        alpha,
        log_alpha0,
        alpha0,
        effective_len: scores.effective_len().to_vec(),
    })
}

/// Dirichlet mean `α_ij / α_i0`, as a masked row softmax of `log α`.
pub fn expected_attention<'t>(conc: &Concentration<'t>, mask: Option<&Mask>) -> Result<Var<'t>> {
    conc.log_alpha.softmax_rows(mask)
}

/// `U_i = L_eff(i) / α_i0`, as `exp(log L_eff - log α_i0)`.
pub fn vacuity<'t>(conc: &Concentration<'t>) -> Result<Var<'t>> {
    let log_len = Tensor::vector(conc.effective_len.iter().map(|&n| (n as f64).ln()).collect());
    conc.log_alpha0.scale(-1.0).add_const(&log_len).map(Var::exp)
}

pub fn credal_from_scores<'t>(
    scores: &ScoreMatrix<'t>,
    v: Var<'t>,
    evidence: EvidenceFn,
) -> Result<CredalAttentionOutput<'t>> {
    let log_evidence = evidence_from_scores(scores, evidence)?;
    let conc = concentration(scores, evidence)?;
    let a_hat = expected_attention(&conc, scores.mask())?;
    let vacuity = vacuity(&conc)?;
    let context = a_hat.matmul(v)?;
    Ok(CredalAttentionOutput {
        a_hat,
        log_evidence,
        alpha: conc.alpha,
        alpha0: conc.alpha0,
        vacuity,
        context,
    })
}

pub fn credal_attention<'t>(inputs: &AttentionInputs<'t>, opts: AttentionOptions) -> Result<CredalAttentionOutput<'t>> {
    let mut scores = compute_scores(inputs)?;
    if opts.score_offset != 0.0 {
        scores = scores.shifted(opts.score_offset);
    }
    credal_from_scores(&scores, inputs.v, opts.evidence)
}

/// Per-head projections and the output projection of one attention block.
/// `wq[h]`, `wk[h]` and `wv[h]` are `d_model × d_head`; `wo` is
/// `d_model × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: T,
}

impl<T> AttentionWeights<T> {
    pub fn n_heads(&self) -> usize {
        self.wq.len()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            wq: self.wq.iter().map(&mut f).collect(),
            wk: self.wk.iter().map(&mut f).collect(),
            wv: self.wv.iter().map(&mut f).collect(),
            wo: f(&self.wo),
        }
    }
}

pub fn check_heads(d_model: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || d_model == 0 || d_model % n_heads != 0 {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible into {n_heads} heads"
        )));
    }
    Ok(d_model / n_heads)
}

impl AttentionWeights<Tensor> {
    /// Gaussian init with variance `1 / fan_in`.
    pub fn init<R: Rng>(d_model: usize, n_heads: usize, rng: &mut R) -> Result<Self> {
        let d_head = check_heads(d_model, n_heads)?;
        let mut draw = |rows: usize, cols: usize| gaussian(rows, cols, rows, rng);
        let wq = (0..n_heads).map(|_| draw(d_model, d_head)).collect();
        let wk = (0..n_heads).map(|_| draw(d_model, d_head)).collect();
        let wv = (0..n_heads).map(|_| draw(d_model, d_head)).collect();
        let wo = draw(d_model, d_model);
        Ok(Self { wq, wk, wv, wo })
    }

    /// Identity-like projections: head `h` reads columns
    /// `h*d_head..(h+1)*d_head` and the output projection is the identity.
    pub fn identity(d_model: usize, n_heads: usize) -> Result<Self> {
        let d_head = check_heads(d_model, n_heads)?;
        let slice = |h: usize| {
            let mut t = Tensor::zeros(&[d_model, d_head]);
            for j in 0..d_head {
                t.data_mut()[(h * d_head + j) * d_head + j] = 1.0;
            }
            t
        };
        let heads: Vec<Tensor> = (0..n_heads).map(slice).collect();
        Ok(Self {
            wq: heads.clone(),
            wk: heads.clone(),
            wv: heads,
            wo: Tensor::identity(d_model),
        })
    }
}

pub(crate) fn gaussian<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

#[derive(Clone, Debug)]
pub struct MultiHeadOutput<'t> {
    /// `L × d_model`.
    pub output: Var<'t>,
    /// `n_heads × L` vacuities in credal mode.
    pub head_vacuity: Option<Var<'t>>,
}

/// Projects `x` per head, applies the chosen mechanism, concatenates heads
/// and applies the output projection.
pub fn multi_head_attention<'t>(
    x: Var<'t>,
    weights: &AttentionWeights<Var<'t>>,
    mechanism: Mechanism,
    mask: Option<&Mask>,
    opts: AttentionOptions,
) -> Result<MultiHeadOutput<'t>> {
    let tape = x.tape();
    let d_model = *x
        .shape()
        .get(1)
        .ok_or_else(|| Error::Input("attention input must be a matrix".into()))?;
    check_heads(d_model, weights.n_heads())?;
    if weights.wk.len() != weights.n_heads() || weights.wv.len() != weights.n_heads() {
        return Err(Error::Config("inconsistent head counts in attention weights".into()));
    }

    let mut contexts = Vec::with_capacity(weights.n_heads());
    let mut vacuities = Vec::new();
    for h in 0..weights.n_heads() {
        let inputs = AttentionInputs::new(
            x.matmul(weights.wq[h])?,
            x.matmul(weights.wk[h])?,
            x.matmul(weights.wv[h])?,
            mask.cloned(),
        )?;
        let mut scores = compute_scores(&inputs)?;
        if opts.score_offset != 0.0 {
            scores = scores.shifted(opts.score_offset);
        }
        match mechanism {
            Mechanism::Standard => contexts.push(standard_attention(&scores, inputs.v)?.context),
            Mechanism::Credal => {
                let out = credal_from_scores(&scores, inputs.v, opts.evidence)?;
                contexts.push(out.context);
                vacuities.push(out.vacuity);
            }
        }
    }
    let concat = if contexts.len() == 1 {
        contexts[0]
    } else {
        tape.concat_cols(&contexts)?
    };
    let output = concat.matmul(weights.wo)?;
    let head_vacuity = match mechanism {
        Mechanism::Standard => None,
        Mechanism::Credal => Some(tape.stack_rows(&vacuities)?),
    };
    Ok(MultiHeadOutput { output, head_vacuity })
}
