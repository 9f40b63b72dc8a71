//! Gradient-disentangled fusion block: stop-gradient source transform
//! with a learned correction term, and a learned convex mixture of
//! cross-attention over the transformed source with the target layer's
//! own self-attention.

use crate::encoder::mha;
use crate::error::Result;
use crate::model::{AttnParams, GdksParams};
use crate::tensor::{masked_mean_rows, Tensor};

#[derive(Debug, Clone, Copy, Default)]
pub struct GdksOpts {
    /// Ablation: pass source states through untouched (no stop-gradient,
    /// no correction), turning the block into vanilla cross-attention.
    pub no_gdks: bool,
    /// Correction input is the source row alone instead of
    /// [source row || pooled target].
    pub f_source_only: bool,
    pub train: bool,
    pub dropout: f64,
}

/// Transformed source states fed to the cross-attention.
///
/// Same-language pairs (and the ablation) use the source states as-is;
/// cross-language pairs detach them and add a learned correction computed
/// from the detached source row and the mean-pooled detached target.
pub fn transform_source(
    gp: &GdksParams,
    h_s: &Tensor,
    h_t: &Tensor,
    tgt_mask: &[bool],
    same_language: bool,
    opts: &GdksOpts,
) -> Result<Tensor> {
    if same_language || opts.no_gdks {
        return Ok(h_s.clone());
    }
    let sg_s = h_s.detach();
    let n_s = sg_s.shape()[0];
    let hidden = sg_s.shape()[1];
    let input = if opts.f_source_only {
        sg_s.clone()
    } else {
        let pooled = masked_mean_rows(&h_t.detach(), tgt_mask)?.reshape(vec![1, hidden])?;
        let ones = h_s.tape().ones(vec![n_s, 1]);
        let pooled_rows = ones.matmul(&pooled)?;
        h_s.tape().concat_cols(&[sg_s.clone(), pooled_rows])?
    };
    let corr = input
        .matmul(&gp.corr_w)?
        .add_bcast_row(&gp.corr_b)?
        .dropout(opts.dropout, opts.train)?;
    sg_s.add(&corr)
}

/// Mixture weight lambda = clamp(w * lambda0 + b, 0, 1), shape `[1]`.
/// `force` substitutes a constant (test hook).
pub fn lambda_tensor(gp: &GdksParams, lambda0: f64, force: Option<f64>) -> Result<Tensor> {
    if let Some(v) = force {
        return Ok(gp.lambda_w.tape().scalar(v));
    }
    gp.lambda_w.scale(lambda0)?.add(&gp.lambda_b)?.clamp(0.0, 1.0)
}

pub struct GdksOut {
    pub out: Tensor,
    /// Head-averaged cross-attention weights `[n_t, n_s]`.
    pub attn: Tensor,
}

/// (1 - lambda) * CrossAttn(h_t, h_s~, h_s~) + lambda * SelfAttn(h_t).
/// The self-attention path reuses the target layer's own attention
/// parameters, so lambda = 1 reproduces the vanilla target layer.
pub fn gdks_fuse(
    gp: &GdksParams,
    tgt_attn: &AttnParams,
    h_t: &Tensor,
    h_s_tilde: &Tensor,
    src_mask: &[bool],
    tgt_mask: &[bool],
    heads: usize,
    lambda: &Tensor,
) -> Result<GdksOut> {
    let cross = mha(&gp.cross, h_t, h_s_tilde, h_s_tilde, src_mask, heads)?;
    let slf = mha(tgt_attn, h_t, h_t, h_t, tgt_mask, heads)?;
    let one_minus = lambda.neg()?.add_scalar(1.0)?;
    let out = cross
        .out
        .scale_t(&one_minus)?
        .add(&slf.out.scale_t(lambda)?)?;
    Ok(GdksOut {
        out,
        attn: cross.avg_attn,
    })
}
