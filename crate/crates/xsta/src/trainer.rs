//! Training loop: Adam with linear warmup/decay, the per-batch composite
//! forward pass, best-checkpoint selection by mean validation F1, the
//! JSON-lines metrics log, and evaluation with optional output
//! calibration.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::alignment::{self, PairRepr};
use crate::calibration::{self, NormMode, NormStats};
use crate::checkpoint::{self, Checkpoint};
use crate::config::Config;
use crate::data::{self, Batch, EncodedPair, ParallelExample, Vocab};
use crate::encoder::{self, EncodeOpts};
use crate::error::{Error, Result};
use crate::model::{BoundModel, XstaModel};
use crate::mrc::{self, AnswerNorm};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Tape, Tensor};

// ---------------------------------------------------------------------------
// Optimizer

pub struct Adam {
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One Adam update over the parameters present in `grads`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &IndexMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGrad(name.clone()));
            }
            let entry = store.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                entry.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients by `max_norm / global_norm` when the global L2
/// norm across every tensor exceeds `max_norm`. A `max_norm` of 0
/// disables clipping. Returns the pre-clip global norm.
pub fn clip_global_norm(grads: &mut IndexMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Linear warmup then decay to zero, clamped at >= 0. Decay is linear by
/// default or half-cosine when `cosine` is set.
pub fn lr_at_with(
    base_lr: f64,
    step: u64,
    warmup_steps: u64,
    total_steps: u64,
    cosine: bool,
) -> f64 {
    let warm = if warmup_steps == 0 {
        1.0
    } else {
        step as f64 / warmup_steps as f64
    };
    let decay = if total_steps <= warmup_steps {
        1.0
    } else {
        let frac =
            (step.saturating_sub(warmup_steps)) as f64 / (total_steps - warmup_steps) as f64;
        if cosine {
            0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
        } else {
            1.0 - frac
        }
    };
    (base_lr * warm.min(decay)).max(0.0)
}

/// Linear warmup then linear decay to zero, clamped at >= 0.
pub fn lr_at(base_lr: f64, step: u64, warmup_steps: u64, total_steps: u64) -> f64 {
    lr_at_with(base_lr, step, warmup_steps, total_steps, false)
}

// ---------------------------------------------------------------------------
// Batch forward pass

/// Per-pair tensors the evaluation path needs after the forward pass.
pub struct PairOutput {
    pub p_s: Tensor,
    pub p_t: Tensor,
    /// Transferred distribution, present when the transfer ran.
    pub p_t_given_s: Option<Tensor>,
    pub states: encoder::PairStates,
}

pub struct ForwardOut {
    pub tape: Tape,
    pub loss: Tensor,
    /// Enabled loss-term values by name; disabled terms are absent.
    pub terms: IndexMap<String, f64>,
    pub lambda: f64,
    /// Batch normalization statistics (train mode with the transfer active).
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    pub pairs: Vec<PairOutput>,
}

fn transfer_key_mask(side: &data::EncodedSide, context_only: bool) -> Vec<bool> {
    if !context_only {
        return side.mask.clone();
    }
    let (c0, c1) = side.context_range;
    side.mask
        .iter()
        .enumerate()
        .map(|(i, &m)| m && i >= c0 && i < c1)
        .collect()
}

fn mean_terms(tape: &Tape, parts: &[Tensor]) -> Result<Tensor> {
    let mut total = parts[0].clone();
    for p in &parts[1..] {
        total = total.add(p)?;
    }
    let _ = tape;
    total.scale(1.0 / parts.len() as f64)
}

/// Run the full composite forward pass over one batch. Terms whose
/// coefficient is zero or whose ablation flag is set are not computed at
/// all (no graph edges).
pub fn forward_batch<'a>(
    store: &'a ParamStore,
    cfg: &Config,
    norm: &NormStats,
    batch: &Batch,
    train: bool,
    tape_seed: u64,
) -> Result<(Binder<'a>, ForwardOut)> {
    forward_batch_on(Tape::new(tape_seed), store, cfg, norm, batch, train)
}

/// As `forward_batch`, but records onto a caller-supplied tape (e.g. one
/// replaying detach values for gradient checking).
pub fn forward_batch_on<'a>(
    tape: Tape,
    store: &'a ParamStore,
    cfg: &Config,
    norm: &NormStats,
    batch: &Batch,
    train: bool,
) -> Result<(Binder<'a>, ForwardOut)> {
    let tc = &cfg.train;
    let mc = &cfg.model;
    let mut binder = Binder::new(&tape, store);
    let bound = BoundModel::bind(&mut binder, mc)?;
    let opts = EncodeOpts {
        train,
        no_gdks: tc.ablation.no_gdks,
        force_lambda: None,
    };

    let want_mrc_s = tc.alpha > 0.0;
    let want_mrc_t = tc.alpha < 1.0;
    let want_tg = tc.gamma > 0.0 && !tc.ablation.no_atgc;
    let want_align_s = tc.sigma_s > 0.0 && !tc.ablation.no_align_s;
    let want_align_t = tc.eta_t > 0.0 && !tc.ablation.no_align_t;

    let mut pair_outs: Vec<PairOutput> = Vec::with_capacity(batch.pairs.len());
    let mut mrc_s_parts = Vec::new();
    let mut mrc_t_parts = Vec::new();
    for pair in &batch.pairs {
        let states = encoder::encode_pair(&bound, mc, tc.lambda0, pair, &opts)?;
        let p_s = mrc::span_head(&bound.head, states.src_final(), &pair.src.mask)?;
        let p_t = mrc::span_head(&bound.head, states.tgt_final(), &pair.tgt.mask)?;
        if want_mrc_s {
            mrc_s_parts.push(mrc::mrc_loss(&p_s, &pair.src.label, &pair.src.mask)?);
        }
        if want_mrc_t {
            mrc_t_parts.push(mrc::mrc_loss(&p_t, &pair.tgt.label, &pair.tgt.mask)?);
        }
        pair_outs.push(PairOutput {
            p_s,
            p_t,
            p_t_given_s: None,
            states,
        });
    }

    let mut terms: IndexMap<String, f64> = IndexMap::new();
    let mut composite: Vec<(f64, Option<Tensor>)> = Vec::new();

    let mrc_s = if want_mrc_s {
        Some(mean_terms(&tape, &mrc_s_parts)?)
    } else {
        None
    };
    let mrc_t = if want_mrc_t {
        Some(mean_terms(&tape, &mrc_t_parts)?)
    } else {
        None
    };
    if let Some(t) = &mrc_s {
        terms.insert("mrc_s".into(), t.item());
        composite.push((tc.alpha, Some(t.clone())));
    }
    if let Some(t) = &mrc_t {
        terms.insert("mrc_t".into(), t.item());
        composite.push((1.0 - tc.alpha, Some(t.clone())));
    }

    // attentive transfer over jointly-normalized final states: feeds the
    // teacher-guided loss in training and output calibration at inference
    let want_transfer = if train { want_tg } else { !tc.ablation.no_atgc };
    let mut batch_stats = None;
    if want_transfer {
        let mut state_list: Vec<(Tensor, Vec<bool>)> = Vec::new();
        for (po, pair) in pair_outs.iter().zip(&batch.pairs) {
            state_list.push((po.states.src_final().clone(), pair.src.mask.clone()));
            state_list.push((po.states.tgt_final().clone(), pair.tgt.mask.clone()));
        }
        let (normed, stats) = if tc.ablation.no_norm {
            (state_list.iter().map(|(t, _)| t.clone()).collect(), None)
        } else {
            let mode = if train { NormMode::Train } else { NormMode::Infer };
            calibration::normalize_batch(&state_list, norm, mode)?
        };
        batch_stats = stats;
        let mut tg_parts = Vec::new();
        for (i, (po, pair)) in pair_outs.iter_mut().zip(&batch.pairs).enumerate() {
            let h_s = &normed[2 * i];
            let h_t = &normed[2 * i + 1];
            let key_mask = transfer_key_mask(&pair.src, tc.context_only_transfer_keys);
            let tr = calibration::attentive_transfer(
                &bound.calib,
                h_t,
                h_s,
                &po.p_s,
                &key_mask,
                mc.num_heads,
                tc.renormalize_transfer,
            )?;
            if train {
                let mut tg = calibration::teacher_guided_loss(
                    &tr.p,
                    &pair.tgt.label,
                    &pair.tgt.mask,
                )?;
                if tc.transfer_contrast > 0.0 {
                    let contrast = calibration::transfer_contrast_loss(
                        &tr.p,
                        &pair.tgt.label,
                        &pair.tgt.mask,
                    )?;
                    tg = tg.add(&contrast.scale(tc.transfer_contrast)?)?;
                }
                tg_parts.push(tg);
            }
            po.p_t_given_s = Some(tr.p);
        }
        if train {
            let tg = mean_terms(&tape, &tg_parts)?;
            terms.insert("tg".into(), tg.item());
            composite.push((tc.gamma, Some(tg)));
        }
    }

    if want_align_s {
        let mut reprs = Vec::with_capacity(batch.pairs.len());
        for (po, pair) in pair_outs.iter().zip(&batch.pairs) {
            reprs.push(PairRepr {
                r_t: alignment::sentence_repr(po.states.tgt_final(), &pair.tgt.mask)?,
                r_s: alignment::sentence_repr(po.states.src_final(), &pair.src.mask)?,
                same_language: pair.same_language,
            });
        }
        let c = alignment::contrastive_loss(&reprs, tc.tau, tc.negatives_scope, &tape)?;
        terms.insert("align_s".into(), c.item());
        composite.push((tc.sigma_s, Some(c)));
    }

    if want_align_t {
        let mut eca_parts = Vec::new();
        for (po, pair) in pair_outs.iter().zip(&batch.pairs) {
            let part = if tc.eca_on_attention {
                alignment::row_entropy_loss(&po.states.gdks_attn, &pair.tgt.mask)?
            } else {
                let h_t = &po.states.tgt_states[mc.gdks_layer + 1];
                alignment::eca_loss(h_t, &po.states.h_s_tilde, &pair.tgt.mask, &pair.src.mask)?
            };
            eca_parts.push(part);
        }
        let eca = mean_terms(&tape, &eca_parts)?;
        terms.insert("align_t".into(), eca.item());
        composite.push((tc.eta_t, Some(eca)));
    }

    let parts: Vec<(f64, Option<&Tensor>)> =
        composite.iter().map(|(c, t)| (*c, t.as_ref())).collect();
    let loss = mrc::composite_loss(&parts, &tape)?;
    terms.insert("loss".into(), loss.item());
    let lambda = pair_outs
        .first()
        .map(|po| po.states.lambda.item())
        .unwrap_or(tc.lambda0);

    Ok((
        binder,
        ForwardOut {
            tape,
            loss,
            terms,
            lambda,
            batch_stats,
            pairs: pair_outs,
        },
    ))
}

// ---------------------------------------------------------------------------
// Training

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub best_f1: f64,
}

fn encode_all(pairs: &[ParallelExample], vocab: &Vocab, max_seq_len: usize) -> Result<Vec<EncodedPair>> {
    pairs
        .iter()
        .map(|p| data::encode_pair(p, vocab, max_seq_len))
        .collect()
}

fn derive_seed(base: u64, step: u64) -> u64 {
    base ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Full training run: seeded epochs over shuffled batches, Adam updates,
/// running-statistics EMA, JSON-lines metrics, per-epoch validation and
/// best-checkpoint selection by mean F1 across languages.
pub fn train(
    cfg: &Config,
    train_pairs: &[ParallelExample],
    valid_pairs: &[ParallelExample],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let tc = cfg.train.clone();

    let vocab = Vocab::build(train_pairs);
    let mut cfg = cfg.clone();
    cfg.model.vocab_size = vocab.len();
    let mut model = XstaModel::new(cfg.model.clone(), tc.seed)?;
    let mut norm = NormStats::new(cfg.model.hidden_size, tc.norm_momentum, tc.epsilon);
    let mut adam = Adam::new();
    adam.beta2 = tc.adam_beta2;

    let encoded_train = encode_all(train_pairs, &vocab, cfg.model.max_seq_len)?;
    let num_batches = encoded_train.len().div_ceil(tc.batch_size).max(1);
    let total_steps = (tc.epochs * num_batches) as u64;
    let warmup_steps = (total_steps as f64 * tc.warmup_fraction).round() as u64;

    let metrics_path = out_dir.join("metrics.jsonl");
    let ckpt_path = out_dir.join("best.ckpt");
    let mut metrics = std::fs::File::create(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    let make_ckpt = |model: &XstaModel, norm: &NormStats, step: u64, best: f64| Checkpoint {
        config: cfg.clone(),
        vocab: vocab.clone(),
        store: model.store.clone(),
        norm: norm.clone(),
        step,
        // -1 marks "never validated"; JSON cannot carry -inf
        best_score: if best.is_finite() { best } else { -1.0 },
    };

    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_ckpt = make_ckpt(&model, &norm, 0, best_f1);
    checkpoint::save(&best_ckpt, &ckpt_path)?;

    let mut step: u64 = 0;
    for epoch in 0..tc.epochs {
        let shuffle_seed = derive_seed(tc.seed, 1_000_000 + epoch as u64);
        let batches = data::make_batches(&encoded_train, tc.batch_size, shuffle_seed, true);
        for batch in &batches {
            let lr = lr_at_with(tc.lr, step, warmup_steps, total_steps, tc.cosine_lr);
            let (mut grads, terms, lambda, stats) = {
                let (binder, fo) =
                    forward_batch(&model.store, &cfg, &norm, batch, true, derive_seed(tc.seed, step))?;
                fo.loss.backward()?;
                (binder.grads(), fo.terms, fo.lambda, fo.batch_stats)
            };
            clip_global_norm(&mut grads, tc.clip_norm);
            adam.step(&mut model.store, &grads, lr)?;
            if let Some((mean, var)) = &stats {
                norm.update(mean, var);
            }
            step += 1;
            if tc.log_every > 0 && (step % tc.log_every as u64 == 0 || step == total_steps) {
                let mut rec: IndexMap<String, serde_json::Value> = IndexMap::new();
                rec.insert("step".into(), step.into());
                rec.insert("epoch".into(), epoch.into());
                rec.insert("lr".into(), lr.into());
                rec.insert("lambda".into(), lambda.into());
                for (k, v) in &terms {
                    rec.insert(k.clone(), (*v).into());
                }
                let line =
                    serde_json::to_string(&rec).map_err(|e| Error::Parse(e.to_string()))?;
                use std::io::Write as _;
                writeln!(metrics, "{line}")
                    .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
            }
        }

        if !valid_pairs.is_empty() {
            let ckpt = make_ckpt(&model, &norm, step, best_f1);
            let calibrate = !tc.ablation.no_atgc && !tc.ablation.no_atgc_inference;
            let report = evaluate(&ckpt, valid_pairs, calibrate)?;
            let mut rec: IndexMap<String, serde_json::Value> = IndexMap::new();
            rec.insert("step".into(), step.into());
            rec.insert("epoch".into(), epoch.into());
            rec.insert("valid_mean_em".into(), report.mean_em.into());
            rec.insert("valid_mean_f1".into(), report.mean_f1.into());
            let line = serde_json::to_string(&rec).map_err(|e| Error::Parse(e.to_string()))?;
            use std::io::Write as _;
            writeln!(metrics, "{line}")
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
            if report.mean_f1 > best_f1 {
                best_f1 = report.mean_f1;
                best_ckpt = make_ckpt(&model, &norm, step, best_f1);
                checkpoint::save(&best_ckpt, &ckpt_path)?;
            }
        }
    }

    if valid_pairs.is_empty() || tc.epochs == 0 {
        // nothing selected against: keep the final state
        best_ckpt = make_ckpt(&model, &norm, step, best_f1);
        checkpoint::save(&best_ckpt, &ckpt_path)?;
    }

    Ok(TrainOutcome {
        checkpoint: best_ckpt,
        checkpoint_path: ckpt_path,
        metrics_path,
        best_f1,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone)]
pub struct ExampleResult {
    pub id: String,
    pub language: String,
    pub prediction: String,
    pub em: f64,
    pub f1: f64,
    /// Context-relative answer positions differ between the two sides.
    pub shifted: bool,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// language -> (mean EM, mean F1), insertion-ordered.
    pub per_language: IndexMap<String, (f64, f64)>,
    pub mean_em: f64,
    pub mean_f1: f64,
    /// "<id>.src" / "<id>.tgt" -> predicted answer text.
    pub predictions: IndexMap<String, String>,
    pub examples: Vec<ExampleResult>,
}

fn answer_norm_for(language: &str) -> AnswerNorm {
    if language == "en" {
        AnswerNorm::Squad
    } else {
        AnswerNorm::Simple
    }
}

fn decode_and_score(
    side: &data::EncodedSide,
    p: &[f64],
    max_answer_len: usize,
) -> Result<(String, f64, f64)> {
    let n = side.seq_len();
    let p_start: Vec<f64> = (0..n).map(|i| p[i * 2]).collect();
    let p_end: Vec<f64> = (0..n).map(|i| p[i * 2 + 1]).collect();
    let (i, j) = mrc::decode_span(&p_start, &p_end, side.context_range, max_answer_len)?;
    let text = side.render_span(i, j)?;
    let (em, f1) = mrc::em_f1(&text, &side.gold_answers, answer_norm_for(&side.language))?;
    Ok((text, em, f1))
}

/// Evaluate a checkpoint. `calibrate` averages the transferred source
/// distribution into the target prediction before decoding.
pub fn evaluate(ckpt: &Checkpoint, pairs: &[ParallelExample], calibrate: bool) -> Result<EvalReport> {
    let cfg = &ckpt.config;
    let tc = &cfg.train;
    let calibrate = calibrate && !tc.ablation.no_atgc_inference;
    let encoded = encode_all(pairs, &ckpt.vocab, cfg.model.max_seq_len)?;
    let batches = data::make_batches(&encoded, tc.batch_size, 0, false);

    let mut examples = Vec::new();
    let mut predictions = IndexMap::new();
    let mut by_lang: IndexMap<String, Vec<(f64, f64)>> = IndexMap::new();

    for batch in &batches {
        let (_binder, fo) = forward_batch(&ckpt.store, cfg, &ckpt.norm, batch, false, 0)?;
        for (po, pair) in fo.pairs.iter().zip(&batch.pairs) {
            let (src_text, src_em, src_f1) =
                decode_and_score(&pair.src, &po.p_s.data(), tc.max_answer_len)?;
            let p_t = match (&po.p_t_given_s, calibrate) {
                (Some(tr), true) => calibration::calibrate(&tr.data(), &po.p_t.data()),
                _ => po.p_t.data(),
            };
            let (tgt_text, tgt_em, tgt_f1) = decode_and_score(&pair.tgt, &p_t, tc.max_answer_len)?;

            let shifted = (pair.src.label.start - pair.src.context_range.0)
                != (pair.tgt.label.start - pair.tgt.context_range.0);
            predictions.insert(format!("{}.src", pair.id), src_text.clone());
            predictions.insert(format!("{}.tgt", pair.id), tgt_text.clone());
            by_lang
                .entry(pair.src.language.clone())
                .or_default()
                .push((src_em, src_f1));
            by_lang
                .entry(pair.tgt.language.clone())
                .or_default()
                .push((tgt_em, tgt_f1));
            examples.push(ExampleResult {
                id: pair.id.clone(),
                language: pair.src.language.clone(),
                prediction: src_text,
                em: src_em,
                f1: src_f1,
                shifted,
            });
            examples.push(ExampleResult {
                id: pair.id.clone(),
                language: pair.tgt.language.clone(),
                prediction: tgt_text,
                em: tgt_em,
                f1: tgt_f1,
                shifted,
            });
        }
    }

    let mut per_language = IndexMap::new();
    for (lang, scores) in &by_lang {
        let n = scores.len() as f64;
        let em = 100.0 * scores.iter().map(|s| s.0).sum::<f64>() / n;
        let f1 = 100.0 * scores.iter().map(|s| s.1).sum::<f64>() / n;
        per_language.insert(lang.clone(), (em, f1));
    }
    let k = per_language.len().max(1) as f64;
    let mean_em = per_language.values().map(|v| v.0).sum::<f64>() / k;
    let mean_f1 = per_language.values().map(|v| v.1).sum::<f64>() / k;

    Ok(EvalReport {
        per_language,
        mean_em,
        mean_f1,
        predictions,
        examples,
    })
}
