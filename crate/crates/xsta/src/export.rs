//! Analysis exports: attention matrices as CSV with token headers, and
//! sentence-representation tables for external projection tools.
//!
//! Floats are written with Rust's shortest-roundtrip formatting, so
//! reparsing a file reproduces the in-memory values exactly.

use std::io::Write as _;
use std::path::Path;

use crate::alignment;
use crate::checkpoint::Checkpoint;
use crate::data::{self, ParallelExample};
use crate::error::{Error, Result};
use crate::trainer::forward_batch;

fn write_matrix_csv(
    path: &Path,
    row_tokens: &[String],
    col_tokens: &[String],
    values: &[f64],
) -> Result<()> {
    let ioerr = |e| Error::io(path.display().to_string(), e);
    let cols = col_tokens.len();
    let mut f = std::fs::File::create(path).map_err(ioerr)?;
    writeln!(f, ",{}", col_tokens.join(",")).map_err(ioerr)?;
    for (i, tok) in row_tokens.iter().enumerate() {
        let row: Vec<String> = values[i * cols..(i + 1) * cols]
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        writeln!(f, "{tok},{}", row.join(",")).map_err(ioerr)?;
    }
    Ok(())
}

/// Write the fused layer's head-averaged cross-attention and the
/// token-alignment attention for one pair as
/// `<out_dir>/gdks_attention.csv` and `<out_dir>/eca_attention.csv`.
/// Both matrices are (target tokens) x (source tokens).
pub fn export_attention(ckpt: &Checkpoint, pair: &ParallelExample, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let encoded = data::encode_pair(pair, &ckpt.vocab, ckpt.config.model.max_seq_len)?;
    let batch = data::Batch {
        pairs: vec![encoded],
    };
    let (_binder, fo) = forward_batch(&ckpt.store, &ckpt.config, &ckpt.norm, &batch, false, 0)?;
    let po = &fo.pairs[0];
    let ep = &batch.pairs[0];

    write_matrix_csv(
        &out_dir.join("gdks_attention.csv"),
        &ep.tgt.tokens,
        &ep.src.tokens,
        &po.states.gdks_attn.data(),
    )?;
    let mc = &ckpt.config.model;
    let eca = alignment::eca_attention(
        &po.states.tgt_states[mc.gdks_layer + 1],
        &po.states.h_s_tilde,
        &ep.src.mask,
    )?;
    write_matrix_csv(
        &out_dir.join("eca_attention.csv"),
        &ep.tgt.tokens,
        &ep.src.tokens,
        &eca.data(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReprMode {
    Raw,
    /// Standardize each feature to mean 0 / variance 1 over the exported
    /// rows.
    Normalized,
}

/// One row per example side: id, language, then the pooled sentence
/// representation.
pub fn export_representations(
    ckpt: &Checkpoint,
    pairs: &[ParallelExample],
    mode: ReprMode,
    out_path: &Path,
) -> Result<()> {
    let cfg = &ckpt.config;
    let hidden = cfg.model.hidden_size;
    let mut rows: Vec<(String, String, Vec<f64>)> = Vec::new();
    for chunk in pairs.chunks(cfg.train.batch_size.max(1)) {
        let encoded: Vec<_> = chunk
            .iter()
            .map(|p| data::encode_pair(p, &ckpt.vocab, cfg.model.max_seq_len))
            .collect::<Result<_>>()?;
        let batch = data::Batch { pairs: encoded };
        let (_binder, fo) = forward_batch(&ckpt.store, cfg, &ckpt.norm, &batch, false, 0)?;
        for (po, ep) in fo.pairs.iter().zip(&batch.pairs) {
            let r_s = alignment::sentence_repr(po.states.src_final(), &ep.src.mask)?;
            let r_t = alignment::sentence_repr(po.states.tgt_final(), &ep.tgt.mask)?;
            rows.push((ep.id.clone(), ep.src.language.clone(), r_s.data()));
            rows.push((ep.id.clone(), ep.tgt.language.clone(), r_t.data()));
        }
    }

    if mode == ReprMode::Normalized {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; hidden];
        for (_, _, v) in &rows {
            for (m, &x) in mean.iter_mut().zip(v) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; hidden];
        for (_, _, v) in &rows {
            for (s, (&x, &m)) in var.iter_mut().zip(v.iter().zip(&mean)) {
                *s += (x - m) * (x - m) / n;
            }
        }
        for (_, _, v) in &mut rows {
            for (x, (&m, &s)) in v.iter_mut().zip(mean.iter().zip(&var)) {
                *x = (*x - m) / (s + cfg.train.epsilon).sqrt();
            }
        }
    }

    let ioerr = |e| Error::io(out_path.display().to_string(), e);
    let mut f = std::fs::File::create(out_path).map_err(ioerr)?;
    let header: Vec<String> = (0..hidden).map(|i| format!("v{i}")).collect();
    writeln!(f, "id,language,{}", header.join(",")).map_err(ioerr)?;
    for (id, lang, v) in &rows {
        let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
        writeln!(f, "{id},{lang},{}", vals.join(",")).map_err(ioerr)?;
    }
    Ok(())
}
