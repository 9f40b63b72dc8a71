//! Transformer encoder: embeddings, multi-head attention, post-norm
//! layers, and the two-branch `encode_pair` forward pass with the fusion
//! block spliced into one designated layer of the target branch.

use crate::config::ModelConfig;
use crate::data::EncodedPair;
use crate::error::{Error, Result};
use crate::gdks;
use crate::model::{AttnParams, BoundModel, BranchParams, LayerParams};
use crate::tensor::Tensor;

pub struct MhaOut {
    pub out: Tensor,
    /// Per-head attention weights, each `[n_q, n_k]`.
    pub head_attns: Vec<Tensor>,
    /// Head-averaged attention weights `[n_q, n_k]`.
    pub avg_attn: Tensor,
}

/// Vaswani-style multi-head attention with per-head scale `1/sqrt(n/H)`.
/// `key_mask[j]` marks valid keys; attention rows sum to 1 over them.
pub fn mha(
    p: &AttnParams,
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    key_mask: &[bool],
    heads: usize,
) -> Result<MhaOut> {
    let n = q_in.shape()[1];
    if n % heads != 0 {
        return Err(Error::invalid(format!("mha: hidden {n} not divisible by {heads} heads")));
    }
    let d = n / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let q = q_in.matmul(&p.wq)?.add_bcast_row(&p.bq)?;
    let k = k_in.matmul(&p.wk)?.add_bcast_row(&p.bk)?;
    let v = v_in.matmul(&p.wv)?.add_bcast_row(&p.bv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * d, (h + 1) * d)?;
        let kh = k.slice_cols(h * d, (h + 1) * d)?;
        let vh = v.slice_cols(h * d, (h + 1) * d)?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale)?;
        let attn = scores.softmax_rows(Some(key_mask))?;
        outs.push(attn.matmul(&vh)?);
        attns.push(attn);
    }
    let concat = q_in.tape().concat_cols(&outs)?;
    let out = concat.matmul(&p.wo)?.add_bcast_row(&p.bo)?;
    let mut avg = attns[0].clone();
    for a in &attns[1..] {
        avg = avg.add(a)?;
    }
    let avg_attn = avg.scale(1.0 / heads as f64)?;
    Ok(MhaOut {
        out,
        head_attns: attns,
        avg_attn,
    })
}

const LN_EPS: f64 = 1e-5;

/// Per-row layer normalization with learned gain/bias.
pub fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mean = x.mean_axis(1)?;
    let centered = x.add_bcast_col(&mean.neg()?)?;
    let var = centered.mul(&centered)?.mean_axis(1)?;
    let inv = var.add_scalar(LN_EPS)?.sqrt()?.recip()?;
    centered.mul_bcast_col(&inv)?.mul_bcast_row(g)?.add_bcast_row(b)
}

/// Token + learned position embedding, with dropout in train mode.
pub fn embed(
    branch: &BranchParams,
    ids: &[usize],
    mcfg: &ModelConfig,
    train: bool,
) -> Result<Tensor> {
    if ids.len() > mcfg.max_seq_len {
        return Err(Error::data(format!(
            "sequence length {} exceeds max_seq_len {}",
            ids.len(),
            mcfg.max_seq_len
        )));
    }
    for &id in ids {
        if id >= mcfg.vocab_size {
            return Err(Error::data(format!(
                "token id {id} outside vocabulary of size {}",
                mcfg.vocab_size
            )));
        }
    }
    let tok = branch.tok_emb.gather_rows(ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = branch.pos_emb.gather_rows(&positions)?;
    // normalizing the summed embeddings keeps first-layer attention logits
    // at a healthy scale from the first step
    let summed = tok.add(&pos)?;
    layer_norm(&summed, &branch.emb_ln_g, &branch.emb_ln_b)?.dropout(mcfg.dropout_rate, train)
}

fn ffn(lp: &LayerParams, h: &Tensor) -> Result<Tensor> {
    h.matmul(&lp.ffn_w1)?
        .add_bcast_row(&lp.ffn_b1)?
        .gelu()?
        .matmul(&lp.ffn_w2)?
        .add_bcast_row(&lp.ffn_b2)
}

/// Post-norm block: attn sublayer output -> residual + LN -> FFN ->
/// residual + LN. Factored so the fused layer can substitute its own
/// attention output.
fn finish_layer(
    lp: &LayerParams,
    h: &Tensor,
    attn_out: &Tensor,
    train: bool,
    dropout: f64,
    skip_ffn: bool,
) -> Result<Tensor> {
    let h1 = layer_norm(&h.add(&attn_out.dropout(dropout, train)?)?, &lp.ln1_g, &lp.ln1_b)?;
    if skip_ffn {
        return Ok(h1);
    }
    let f = ffn(lp, &h1)?.dropout(dropout, train)?;
    layer_norm(&h1.add(&f)?, &lp.ln2_g, &lp.ln2_b)
}

pub fn encoder_layer(
    lp: &LayerParams,
    h: &Tensor,
    mask: &[bool],
    heads: usize,
    train: bool,
    dropout: f64,
) -> Result<Tensor> {
    let attn = mha(&lp.attn, h, h, h, mask, heads)?;
    finish_layer(lp, h, &attn.out, train, dropout, false)
}

#[derive(Debug, Clone, Default)]
pub struct EncodeOpts {
    pub train: bool,
    /// Vanilla cross-attention: no stop-gradient, no correction term.
    pub no_gdks: bool,
    /// Test hook replacing the learned mixture weight with a constant.
    pub force_lambda: Option<f64>,
}

pub struct PairStates {
    /// Hidden states h^0..h^L per branch.
    pub src_states: Vec<Tensor>,
    pub tgt_states: Vec<Tensor>,
    /// Head-averaged target-over-source cross-attention at the fused layer.
    pub gdks_attn: Tensor,
    /// Transformed source states fed to the cross-attention.
    pub h_s_tilde: Tensor,
    /// Target hidden states entering the fused layer.
    pub h_t_gdks_in: Tensor,
    pub lambda: Tensor,
}

impl PairStates {
    pub fn src_final(&self) -> &Tensor {
        self.src_states.last().unwrap()
    }
    pub fn tgt_final(&self) -> &Tensor {
        self.tgt_states.last().unwrap()
    }
}

/// Run both branches over a parallel pair. The source branch is L vanilla
/// layers; the target branch swaps its attention sublayer at the
/// designated layer for the fusion of cross-attention over transformed
/// source states with its own self-attention.
pub fn encode_pair(
    m: &BoundModel,
    mcfg: &ModelConfig,
    lambda0: f64,
    pair: &EncodedPair,
    opts: &EncodeOpts,
) -> Result<PairStates> {
    let heads = mcfg.num_heads;
    let drop = mcfg.dropout_rate;

    let mut src_states = Vec::with_capacity(mcfg.num_layers + 1);
    let mut h = embed(&m.src, &pair.src.ids, mcfg, opts.train)?;
    src_states.push(h.clone());
    for l in 0..mcfg.num_layers {
        h = encoder_layer(&m.src.layers[l], &h, &pair.src.mask, heads, opts.train, drop)?;
        src_states.push(h.clone());
    }

    let mut tgt_states = Vec::with_capacity(mcfg.num_layers + 1);
    let mut ht = embed(&m.tgt, &pair.tgt.ids, mcfg, opts.train)?;
    tgt_states.push(ht.clone());
    let mut gdks_out = None;
    for l in 0..mcfg.num_layers {
        if l == mcfg.gdks_layer {
            let h_t_in = ht.clone();
            let h_s_in = &src_states[l];
            let h_s_tilde = gdks::transform_source(
                &m.gdks,
                h_s_in,
                &h_t_in,
                &pair.tgt.mask,
                pair.same_language,
                &gdks::GdksOpts {
                    no_gdks: opts.no_gdks,
                    f_source_only: mcfg.f_source_only,
                    train: opts.train,
                    dropout: drop,
                },
            )?;
            let lambda = gdks::lambda_tensor(&m.gdks, lambda0, opts.force_lambda)?;
            let fused = gdks::gdks_fuse(
                &m.gdks,
                &m.tgt.layers[l].attn,
                &h_t_in,
                &h_s_tilde,
                &pair.src.mask,
                &pair.tgt.mask,
                heads,
                &lambda,
            )?;
            ht = finish_layer(
                &m.tgt.layers[l],
                &h_t_in,
                &fused.out,
                opts.train,
                drop,
                mcfg.gdks_skip_ffn,
            )?;
            gdks_out = Some((fused.attn, h_s_tilde, h_t_in, lambda));
        } else {
            ht = encoder_layer(&m.tgt.layers[l], &ht, &pair.tgt.mask, heads, opts.train, drop)?;
        }
        tgt_states.push(ht.clone());
    }
    let (gdks_attn, h_s_tilde, h_t_gdks_in, lambda) =
        gdks_out.expect("gdks_layer < num_layers is validated");

    Ok(PairStates {
        src_states,
        tgt_states,
        gdks_attn,
        h_s_tilde,
        h_t_gdks_in,
        lambda,
    })
}
