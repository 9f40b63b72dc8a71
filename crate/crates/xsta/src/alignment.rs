//! Multi-granularity alignment: an InfoNCE contrastive loss over
//! mean-pooled sentence representations and an entropy-based
//! cross-attention concentration loss over token-level alignments.

use crate::config::NegativesScope;
use crate::error::{Error, Result};
use crate::tensor::{expand_row_mask, masked_mean_rows, Tape, Tensor};

/// Mean of the unmasked token rows, shaped `[1, hidden]`.
pub fn sentence_repr(h: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let hidden = h.shape()[1];
    masked_mean_rows(h, mask)?.reshape(vec![1, hidden])
}

/// Cosine similarity of two `[1, n]` representations as a `[1]` tensor.
/// Zero-norm inputs are an error.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let na = a.mul(a)?.sum_all()?.sqrt()?;
    let nb = b.mul(b)?.sum_all()?.sqrt()?;
    if na.item() == 0.0 || nb.item() == 0.0 {
        return Err(Error::invalid("cosine_sim: zero-norm representation"));
    }
    let dot = a.mul(b)?.sum_all()?;
    dot.div(&na.mul(&nb)?)
}

/// One pair's pooled representations for the contrastive loss.
pub struct PairRepr {
    pub r_t: Tensor,
    pub r_s: Tensor,
    pub same_language: bool,
}

/// InfoNCE over sentence representations. Anchors are the target-side
/// representations of cross-language pairs; the positive is the paired
/// source representation and negatives are the other pairs' source
/// representations (optionally also their target representations).
/// Returns zero if no anchor has at least one negative.
pub fn contrastive_loss(
    reprs: &[PairRepr],
    tau: f64,
    scope: NegativesScope,
    tape: &Tape,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::invalid("contrastive_loss: tau must be > 0"));
    }
    let mut losses: Vec<Tensor> = Vec::new();
    for (i, p) in reprs.iter().enumerate() {
        if p.same_language {
            continue;
        }
        let mut sims = vec![cosine_sim(&p.r_t, &p.r_s)?];
        for (j, q) in reprs.iter().enumerate() {
            if j == i {
                continue;
            }
            sims.push(cosine_sim(&p.r_t, &q.r_s)?);
            if scope == NegativesScope::BothSides {
                sims.push(cosine_sim(&p.r_t, &q.r_t)?);
            }
        }
        if sims.len() < 2 {
            continue; // no negatives available
        }
        let cols: Vec<Tensor> = sims
            .iter()
            .map(|s| s.reshape(vec![1, 1]))
            .collect::<Result<_>>()?;
        let logits = tape.concat_cols(&cols)?.scale(1.0 / tau)?;
        let probs = logits.softmax_rows(None)?;
        let p_pos = probs.slice_cols(0, 1)?.clamp_min(1e-12)?;
        losses.push(p_pos.log()?.neg()?.reshape(vec![1])?);
    }
    if losses.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let mut total = losses[0].clone();
    for l in &losses[1..] {
        total = total.add(l)?;
    }
    total.scale(1.0 / losses.len() as f64)
}

/// Mean negative row entropy of an attention matrix: -(1/I) sum_i sum_j
/// a_ij log a_ij over the unmasked rows. 0 for one-hot rows, log J at
/// uniform.
pub fn row_entropy_loss(attn: &Tensor, row_mask: &[bool]) -> Result<Tensor> {
    let cols = attn.shape()[1];
    let rows = row_mask.iter().filter(|&&m| m).count();
    if rows == 0 {
        return Err(Error::FullyMasked {
            op: "row_entropy_loss",
        });
    }
    // a log a with an exact 0 at a = 0: the clamp floor only guards log.
    let log_a = attn.clamp_min(1e-300)?.log()?;
    let ent = attn.mul(&log_a)?;
    let excl: Vec<bool> = row_mask.iter().map(|&m| !m).collect();
    let masked = ent.masked_fill(&expand_row_mask(&excl, cols), 0.0)?;
    masked.sum_all()?.scale(-1.0 / rows as f64)
}

/// Scaled dot-product alignment of target states against source states,
/// softmaxed over the unmasked source positions.
pub fn eca_attention(h_t: &Tensor, h_s: &Tensor, s_mask: &[bool]) -> Result<Tensor> {
    let hidden = h_t.shape()[1] as f64;
    let scores = h_t.matmul(&h_s.transpose()?)?.scale(1.0 / hidden.sqrt())?;
    scores.softmax_rows(Some(s_mask))
}

/// Token-level alignment concentration: softmax the scaled similarity of
/// target states against source states, then penalize diffuse rows.
pub fn eca_loss(
    h_t: &Tensor,
    h_s: &Tensor,
    t_mask: &[bool],
    s_mask: &[bool],
) -> Result<Tensor> {
    let attn = eca_attention(h_t, h_s, s_mask)?;
    row_entropy_loss(&attn, t_mask)
}
