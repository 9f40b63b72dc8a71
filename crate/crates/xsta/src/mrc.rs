//! Extractive QA head: per-position start/end distributions, span
//! cross-entropy, composite loss assembly, span decoding and the EM/F1
//! metrics.

use crate::data::SpanLabel;
use crate::error::{Error, Result};
use crate::model::HeadParams;
use crate::tensor::{Tape, Tensor};

/// Project hidden states to `[n, 2]` and softmax each column over the
/// unmasked positions: column 0 is the start distribution, column 1 the
/// end distribution.
pub fn span_head(hp: &HeadParams, h: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let logits = h.matmul(&hp.w)?.add_bcast_row(&hp.b)?;
    logits.transpose()?.softmax_rows(Some(mask))?.transpose()
}

const PROB_FLOOR: f64 = 1e-12;

/// Span cross-entropy: -log p[start, 0] - log p[end, 1].
///
/// Deliberately a standalone implementation rather than a call into the
/// calibration module's identically-shaped loss, so the two can be
/// checked against each other.
pub fn mrc_loss(p: &Tensor, label: &SpanLabel, valid: &[bool]) -> Result<Tensor> {
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
    let p_start = p.slice_rows(label.start, label.start + 1)?.slice_cols(0, 1)?;
    let p_end = p.slice_rows(label.end, label.end + 1)?.slice_cols(1, 2)?;
    let nll_s = p_start.clamp_min(PROB_FLOOR)?.log()?.neg()?;
    let nll_e = p_end.clamp_min(PROB_FLOOR)?.log()?.neg()?;
    nll_s.add(&nll_e)?.reshape(vec![1])
}

/// Weighted sum of loss terms. Terms with a zero coefficient or absent
/// tensor contribute no graph edges at all.
pub fn composite_loss(terms: &[(f64, Option<&Tensor>)], tape: &Tape) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for &(coeff, t) in terms {
        let Some(t) = t else { continue };
        if coeff == 0.0 {
            continue;
        }
        let scaled = t.scale(coeff)?;
        total = Some(match total {
            Some(acc) => acc.add(&scaled)?,
            None => scaled,
        });
    }
    Ok(total.unwrap_or_else(|| tape.scalar(0.0)))
}

/// Highest-product (start, end) span within the context token range, with
/// end - start + 1 <= max_answer_len. Ties break to the earlier start,
/// then the earlier end.
pub fn decode_span(
    p_start: &[f64],
    p_end: &[f64],
    context_range: (usize, usize),
    max_answer_len: usize,
) -> Result<(usize, usize)> {
    let (c0, c1) = context_range;
    if c0 >= c1 || c1 > p_start.len() || max_answer_len == 0 {
        return Err(Error::invalid(format!(
            "decode_span: empty feasible set (context {c0}..{c1}, max len {max_answer_len})"
        )));
    }
    let mut best = (c0, c0);
    let mut best_score = f64::NEG_INFINITY;
    for i in c0..c1 {
        let j_max = (i + max_answer_len).min(c1);
        for j in i..j_max {
            let score = p_start[i] * p_end[j];
            if score > best_score {
                best_score = score;
                best = (i, j);
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerNorm {
    /// Lowercase, strip punctuation and English articles, collapse
    /// whitespace.
    Squad,
    /// Lowercase and collapse whitespace only.
    Simple,
}

pub fn normalize_answer(s: &str, norm: AnswerNorm) -> String {
    let lower = s.to_lowercase();
    let stripped: String = match norm {
        AnswerNorm::Squad => lower
            .chars()
            .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
            .collect(),
        AnswerNorm::Simple => lower,
    };
    stripped
        .split_whitespace()
        .filter(|t| norm == AnswerNorm::Simple || !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn f1_tokens(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred == gold { 1.0 } else { 0.0 };
    }
    let mut counts: std::collections::HashMap<&str, i64> = std::collections::HashMap::new();
    for t in gold {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0i64;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Exact-match and token-bag F1 against the gold answers, taking the best
/// score over golds.
pub fn em_f1(pred: &str, golds: &[String], norm: AnswerNorm) -> Result<(f64, f64)> {
    if golds.is_empty() {
        return Err(Error::invalid("em_f1: no gold answers"));
    }
    let pn = normalize_answer(pred, norm);
    let p_tokens: Vec<&str> = pn.split_whitespace().collect();
    let mut em: f64 = 0.0;
    let mut f1: f64 = 0.0;
    for g in golds {
        let gn = normalize_answer(g, norm);
        if pn == gn {
            em = 1.0;
        }
        let g_tokens: Vec<&str> = gn.split_whitespace().collect();
        f1 = f1.max(f1_tokens(&p_tokens, &g_tokens));
    }
    Ok((em, f1))
}
