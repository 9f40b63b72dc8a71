//! Output calibration: shared batch normalization of final hidden states
//! across both branches, attentive transfer of the source span
//! distribution onto target positions, the teacher-guided loss, and the
//! inference-time average with the target's own prediction.

use serde::{Deserialize, Serialize};

use crate::data::SpanLabel;
use crate::error::{Error, Result};
use crate::model::CalibParams;
use crate::tensor::{expand_row_mask, Tensor};

/// Running normalization statistics shared by both branches, updated with
/// an exponential moving average outside the graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    /// Number of EMA updates applied so far.
    pub count: u64,
}

impl NormStats {
    pub fn new(hidden: usize, momentum: f64, epsilon: f64) -> Self {
        NormStats {
            running_mean: vec![0.0; hidden],
            running_var: vec![1.0; hidden],
            momentum,
            epsilon,
            count: 0,
        }
    }

    /// EMA update from one batch's statistics. The first batch seeds the
    /// running values directly.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        if self.count == 0 {
            self.running_mean.copy_from_slice(batch_mean);
            self.running_var.copy_from_slice(batch_var);
        } else {
            let m = self.momentum;
            for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
        self.count += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with statistics of the current batch (differentiable
    /// through mean and variance) and report them for the EMA.
    Train,
    /// Normalize with the running statistics as constants.
    Infer,
}

/// Normalize every state tensor with one mean/variance computed over the
/// unmasked token rows of *all* of them. Returns the normalized tensors
/// in input order plus, in train mode, the batch statistics.
pub fn normalize_batch(
    states: &[(Tensor, Vec<bool>)],
    stats: &NormStats,
    mode: NormMode,
) -> Result<(Vec<Tensor>, Option<(Vec<f64>, Vec<f64>)>)> {
    if states.is_empty() {
        return Err(Error::invalid("normalize_batch: no states"));
    }
    let tape = states[0].0.tape().clone();
    let hidden = states[0].0.shape()[1];
    let eps = stats.epsilon;

    match mode {
        NormMode::Infer => {
            let mean = tape.constant(stats.running_mean.clone(), vec![hidden]);
            let inv: Vec<f64> = stats
                .running_var
                .iter()
                .map(|&v| 1.0 / (v + eps).sqrt())
                .collect();
            let inv = tape.constant(inv, vec![hidden]);
            let mut out = Vec::with_capacity(states.len());
            for (h, _) in states {
                out.push(h.add_bcast_row(&mean.neg()?)?.mul_bcast_row(&inv)?);
            }
            Ok((out, None))
        }
        NormMode::Train => {
            let total: usize = states
                .iter()
                .map(|(_, m)| m.iter().filter(|&&b| b).count())
                .sum();
            if total < 2 {
                return Err(Error::invalid(format!(
                    "normalize_batch: need at least 2 unmasked tokens, got {total}"
                )));
            }
            let inv_m = 1.0 / total as f64;
            // mean over unmasked rows of every state
            let mut sum = tape.zeros(vec![hidden]);
            for (h, m) in states {
                let excl: Vec<bool> = m.iter().map(|&b| !b).collect();
                let masked = h.masked_fill(&expand_row_mask(&excl, hidden), 0.0)?;
                sum = sum.add(&masked.sum_axis(0)?)?;
            }
            let mean = sum.scale(inv_m)?;
            // biased variance over the same rows
            let mut centered = Vec::with_capacity(states.len());
            let mut sq_sum = tape.zeros(vec![hidden]);
            for (h, m) in states {
                let c = h.add_bcast_row(&mean.neg()?)?;
                let excl: Vec<bool> = m.iter().map(|&b| !b).collect();
                let sq = c.mul(&c)?.masked_fill(&expand_row_mask(&excl, hidden), 0.0)?;
                sq_sum = sq_sum.add(&sq.sum_axis(0)?)?;
                centered.push(c);
            }
            let var = sq_sum.scale(inv_m)?;
            let inv_std = var.add_scalar(eps)?.sqrt()?.recip()?;
            let out = centered
                .into_iter()
                .map(|c| c.mul_bcast_row(&inv_std))
                .collect::<Result<Vec<_>>>()?;
            Ok((out, Some((mean.data(), var.data()))))
        }
    }
}

pub struct TransferOut {
    /// Transferred span distribution over target positions, `[n_t, 2]`.
    pub p: Tensor,
    /// Head-averaged transfer attention `[n_t, n_s]`.
    pub attn: Tensor,
}

/// Attention from normalized target states (queries) to normalized source
/// states (keys) applied to the detached source span distribution.
/// Query/key projections only; head outputs are averaged, with no value
/// or output projection.
pub fn attentive_transfer(
    cp: &CalibParams,
    h_t_norm: &Tensor,
    h_s_norm: &Tensor,
    p_s: &Tensor,
    src_key_mask: &[bool],
    heads: usize,
    renormalize: bool,
) -> Result<TransferOut> {
    let n = h_t_norm.shape()[1];
    if n % heads != 0 {
        return Err(Error::invalid(format!(
            "attentive_transfer: hidden {n} not divisible by {heads} heads"
        )));
    }
    let d = n / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let q = h_t_norm.matmul(&cp.wq)?;
    let k = h_s_norm.matmul(&cp.wk)?;
    let p_sg = p_s.detach();
    let mut p_acc: Option<Tensor> = None;
    let mut attn_acc: Option<Tensor> = None;
    for h in 0..heads {
        let qh = q.slice_cols(h * d, (h + 1) * d)?;
        let kh = k.slice_cols(h * d, (h + 1) * d)?;
        let attn = qh
            .matmul(&kh.transpose()?)?
            .scale(scale)?
            .softmax_rows(Some(src_key_mask))?;
        let ph = attn.matmul(&p_sg)?;
        p_acc = Some(match p_acc {
            Some(a) => a.add(&ph)?,
            None => ph,
        });
        attn_acc = Some(match attn_acc {
            Some(a) => a.add(&attn)?,
            None => attn,
        });
    }
    let inv_h = 1.0 / heads as f64;
    let mut p = p_acc.unwrap().scale(inv_h)?;
    let attn = attn_acc.unwrap().scale(inv_h)?;
    if renormalize {
        let col_sums = p.sum_axis(0)?;
        p = p.mul_bcast_row(&col_sums.recip()?)?;
    }
    Ok(TransferOut { p, attn })
}

const PROB_FLOOR: f64 = 1e-12;

/// Cross-entropy of a `[n, 2]` span distribution against one-hot gold
/// start/end positions: -log p[start, 0] - log p[end, 1].
pub fn teacher_guided_loss(p: &Tensor, label: &SpanLabel, valid: &[bool]) -> Result<Tensor> {
    let n = p.shape()[0];
    for (name, pos) in [("start", label.start), ("end", label.end)] {
        if pos >= n {
            return Err(Error::invalid(format!(
                "span {name} {pos} outside sequence of length {n}"
            )));
        }
        if !valid[pos] {
            return Err(Error::invalid(format!(
                "span {name} {pos} falls on a masked position"
            )));
        }
    }
    let ps = p
        .slice_rows(label.start, label.start + 1)?
        .slice_cols(0, 1)?;
    let pe = p.slice_rows(label.end, label.end + 1)?.slice_cols(1, 2)?;
    let ls = ps.clamp_min(PROB_FLOOR)?.log()?;
    let le = pe.clamp_min(PROB_FLOOR)?.log()?;
    ls.add(&le)?.neg()?.reshape(vec![1])
}

/// Push-down term for the transferred span distribution: mean of
/// -log(1 - p) over valid non-gold positions, start and end columns.
/// Without it the unnormalized transfer receives gradient only at the gold
/// position, saturates at every candidate position, and carries no
/// information for inference-time calibration.
pub fn transfer_contrast_loss(p: &Tensor, label: &SpanLabel, valid: &[bool]) -> Result<Tensor> {
    let n = p.shape()[0];
    let mut mask = vec![0.0; n * 2];
    let mut count = 0.0;
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        if i != label.start {
            mask[i * 2] = 1.0;
            count += 1.0;
        }
        if i != label.end {
            mask[i * 2 + 1] = 1.0;
            count += 1.0;
        }
    }
    if count == 0.0 {
        return p.tape().zeros(vec![1]).reshape(vec![1]);
    }
    let one_minus = p.neg()?.add_scalar(1.0)?.clamp_min(PROB_FLOOR)?;
    let m = p.tape().constant(mask, vec![n, 2]);
    one_minus
        .log()?
        .mul(&m)?
        .sum_all()?
        .scale(-1.0 / count)?
        .reshape(vec![1])
}

/// Inference-time calibration: elementwise average of the transferred and
/// native target span distributions.
pub fn calibrate(p_t_given_s: &[f64], p_t: &[f64]) -> Vec<f64> {
    p_t_given_s
        .iter()
        .zip(p_t.iter())
        .map(|(&a, &b)| 0.5 * (a + b))
        .collect()
}
