//! Acceptance gate: one test per criterion, each printing a PASS line.
//!
//! The end-to-end experiment (criteria 7 and 8) trains once and shares
//! the artifacts; its zero-shot baseline score is frozen in
//! `tests/fixtures/a7_baseline.json` and can be regenerated with the
//! ignored `regenerate_a7_baseline` test.

use std::sync::OnceLock;

use indexmap::IndexMap;
use xsta::calibration::{self, NormMode, NormStats};
use xsta::checkpoint::Checkpoint;
use xsta::config::{Config, NegativesScope};
use xsta::data::{self, Answer, MrcExample, ParallelExample, SynthConfig, Vocab};
use xsta::encoder::{self, EncodeOpts};
use xsta::gradcheck::grad_check;
use xsta::model::{BoundModel, XstaModel};
use xsta::mrc;
use xsta::params::Binder;
use xsta::tensor::Tape;
use xsta::trainer::{self, EvalReport};

// ---------------------------------------------------------------------------
// Shared helpers

fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.model.num_layers = 2;
    cfg.model.hidden_size = 8;
    cfg.model.num_heads = 2;
    cfg.model.ffn_size = 16;
    cfg.model.max_seq_len = 12;
    cfg.model.gdks_layer = 1;
    cfg.model.dropout_rate = 0.0;
    cfg.train.batch_size = 4;
    cfg.train.epochs = 1;
    cfg.train.log_every = 1;
    cfg.train.seed = 11;
    cfg
}

/// Short handcrafted parallel pairs (sequences stay within N <= 12).
fn tiny_pairs(n: usize) -> Vec<ParallelExample> {
    let words = ["ala", "bor", "cim", "dun", "eri", "fos", "gul", "hap"];
    let twords = ["ulo", "vek", "wim", "xon", "yer", "zif", "quk", "rop"];
    (0..n)
        .map(|i| {
            let (a, b, v, d) = (
                words[i % 8],
                words[(i + 3) % 8],
                words[(i + 5) % 8],
                words[(i + 1) % 8],
            );
            let source = MrcExample {
                id: format!("p{i}"),
                question: format!("qq {a}"),
                context: format!("{a} {b} {v} {d}"),
                answers: vec![Answer {
                    text: v.into(),
                    char_start: a.len() + b.len() + 2,
                }],
                language: "src".into(),
            };
            let same_language = i % 3 == 0;
            let target = if same_language {
                source.clone()
            } else {
                let (ta, tb, tv, td) = (
                    twords[i % 8],
                    twords[(i + 3) % 8],
                    twords[(i + 5) % 8],
                    twords[(i + 1) % 8],
                );
                MrcExample {
                    id: format!("p{i}"),
                    question: format!("kk {ta}"),
                    // answer clause moved: span shifted relative to source
                    context: format!("{td} {ta} {tb} {tv}"),
                    answers: vec![Answer {
                        text: tv.into(),
                        char_start: td.len() + ta.len() + tb.len() + 3,
                    }],
                    language: "tgt".into(),
                }
            };
            ParallelExample {
                source,
                target,
                same_language,
            }
        })
        .collect()
}

fn encode_batch(cfg: &Config, pairs: &[ParallelExample]) -> (Vocab, data::Batch) {
    let vocab = Vocab::build(pairs);
    let encoded: Vec<_> = pairs
        .iter()
        .map(|p| data::encode_pair(p, &vocab, cfg.model.max_seq_len).unwrap())
        .collect();
    let batch = data::make_batches(&encoded, encoded.len(), 0, false)
        .into_iter()
        .next()
        .unwrap();
    (vocab, batch)
}

// ---------------------------------------------------------------------------
// A1: composite-loss gradient check

#[test]
fn a1_composite_loss_gradient_check() {
    let start = std::time::Instant::now();
    let mut cfg = tiny_config();
    cfg.train.alpha = 0.2;
    cfg.train.gamma = 0.1;
    cfg.train.sigma_s = 0.05;
    cfg.train.eta_t = 0.05;
    let pairs = tiny_pairs(3);
    let (vocab, batch) = encode_batch(&cfg, &pairs);
    cfg.model.vocab_size = vocab.len();
    let mut model = XstaModel::new(cfg.model.clone(), 1).unwrap();
    // Move every parameter off its symmetric init (correction weights are
    // zero there, and near-identical activations make the batch variance
    // tiny, which inflates the curvature of the normalization terms and
    // with it the truncation error of the finite differences).
    let mut k = 0u64;
    for (_, entry) in model.store.entries.iter_mut() {
        for v in entry.data.iter_mut() {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v += 0.5 * (((k >> 33) % 1000) as f64 / 999.0 - 0.5);
        }
    }
    let norm = NormStats::new(cfg.model.hidden_size, 0.99, 1e-8);

    // The analytic gradient ignores stop-gradient paths by construction,
    // so the numeric side must hold those branches at their base values:
    // replay the recorded detach outputs during every perturbed run.
    let (analytic, detach_log) = {
        let (binder, fo) =
            trainer::forward_batch(&model.store, &cfg, &norm, &batch, true, 0).unwrap();
        fo.loss.backward().unwrap();
        let log = fo.tape.detach_log();
        (binder.grads(), log)
    };
    let report = grad_check(
        &mut model.store,
        &analytic,
        |store| {
            let tape = Tape::new_replaying_detaches(0, detach_log.clone());
            let (_binder, fo) = trainer::forward_batch_on(tape, store, &cfg, &norm, &batch, true)?;
            Ok(fo.loss.item())
        },
        1e-4,
    )
    .unwrap();
    assert!(
        report.passes(1e-4),
        "max rel err {} at {}[{}] (analytic {}, numeric {})",
        report.max_rel_err,
        report.worst_param,
        report.worst_index,
        report.worst_analytic,
        report.worst_numeric
    );
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s");
    println!(
        "A1 PASS composite-loss grad check: {} params, max rel err {:.2e}, {:.1}s",
        report.checked, report.max_rel_err, secs
    );
}

// ---------------------------------------------------------------------------
// A2: gradient disentanglement

fn source_grads_below_gdks(
    no_gdks: bool,
) -> (IndexMap<String, Vec<f64>>, Vec<String>, usize) {
    let mut cfg = tiny_config();
    cfg.train.alpha = 0.0; // loss = target MRC only
    cfg.train.gamma = 0.0;
    cfg.train.sigma_s = 0.0;
    cfg.train.eta_t = 0.0;
    cfg.train.ablation.no_gdks = no_gdks;
    let pairs: Vec<ParallelExample> = tiny_pairs(6)
        .into_iter()
        .filter(|p| !p.same_language)
        .collect();
    assert!(!pairs.is_empty());
    let (vocab, batch) = encode_batch(&cfg, &pairs);
    cfg.model.vocab_size = vocab.len();
    let model = XstaModel::new(cfg.model.clone(), 2).unwrap();
    let (binder, fo) =
        trainer::forward_batch(&model.store, &cfg, &norm_for(&cfg), &batch, true, 0).unwrap();
    fo.loss.backward().unwrap();
    let names = model.store.entries.keys().cloned().collect();
    (binder.grads(), names, cfg.model.gdks_layer)
}

fn norm_for(cfg: &Config) -> NormStats {
    NormStats::new(cfg.model.hidden_size, cfg.train.norm_momentum, cfg.train.epsilon)
}

#[test]
fn a2_gradient_disentanglement() {
    let (grads, names, gdks_layer) = source_grads_below_gdks(false);
    let below = |name: &str| {
        name == "src.tok_emb"
            || name == "src.pos_emb"
            || (0..gdks_layer).any(|l| name.starts_with(&format!("src.l{l}.")))
    };
    // absent from the gradient map means the backward pass never reached
    // the parameter, which is the strongest form of a zero gradient
    let mut checked = 0;
    for name in names.iter().filter(|n| below(n)) {
        if let Some(g) = grads.get(name) {
            assert!(
                g.iter().all(|&v| v == 0.0),
                "{name} received gradient through the stop-gradient"
            );
        }
        checked += 1;
    }
    assert!(checked > 0);
    // correction parameters do learn
    let corr = grads
        .get("gdks.corr.w")
        .expect("correction weights must be reached");
    assert!(corr.iter().any(|&v| v != 0.0));

    // ablation control: without the stop-gradient the same loss reaches
    // the lower source layers
    let (grads_ab, _, _) = source_grads_below_gdks(true);
    let leaked = grads_ab
        .iter()
        .filter(|(n, g)| below(n) && g.iter().any(|&v| v != 0.0))
        .count();
    assert!(leaked > 0, "no_gdks must restore gradient flow");
    println!(
        "A2 PASS gradient disentanglement: {checked} source tensors bitwise zero; \
         ablation leaks into {leaked} tensors"
    );
}

// ---------------------------------------------------------------------------
// A3: GDKS boundary identities

#[test]
fn a3_gdks_boundary_identities() {
    let mut cfg = tiny_config();
    let pairs: Vec<ParallelExample> = tiny_pairs(4)
        .into_iter()
        .filter(|p| !p.same_language)
        .collect();
    let (vocab, batch) = encode_batch(&cfg, &pairs);
    cfg.model.vocab_size = vocab.len();
    let model = XstaModel::new(cfg.model.clone(), 3).unwrap();
    let pair = &batch.pairs[0];

    let run = |force: Option<f64>| {
        let tape = Tape::new(0);
        let mut binder = Binder::new(&tape, &model.store);
        let bound = BoundModel::bind(&mut binder, &cfg.model).unwrap();
        let opts = EncodeOpts {
            train: false,
            no_gdks: false,
            force_lambda: force,
        };
        encoder::encode_pair(&bound, &cfg.model, cfg.train.lambda0, pair, &opts)
            .unwrap()
            .tgt_final()
            .data()
    };

    // lambda = 1: bitwise equal to a vanilla encoder over the target side
    let at_one = run(Some(1.0));
    let vanilla = {
        let tape = Tape::new(0);
        let mut binder = Binder::new(&tape, &model.store);
        let bound = BoundModel::bind(&mut binder, &cfg.model).unwrap();
        let mut h = encoder::embed(&bound.tgt, &pair.tgt.ids, &cfg.model, false).unwrap();
        for l in 0..cfg.model.num_layers {
            h = encoder::encoder_layer(
                &bound.tgt.layers[l],
                &h,
                &pair.tgt.mask,
                cfg.model.num_heads,
                false,
                0.0,
            )
            .unwrap();
        }
        h.data()
    };
    assert_eq!(at_one, vanilla, "lambda=1 must reproduce the vanilla layer bitwise");

    // lambda = 0: bitwise equal to pure cross-attention in the fused layer
    let at_zero = run(Some(0.0));
    let cross_only = {
        let tape = Tape::new(0);
        let mut binder = Binder::new(&tape, &model.store);
        let bound = BoundModel::bind(&mut binder, &cfg.model).unwrap();
        let opts = EncodeOpts { train: false, no_gdks: false, force_lambda: Some(0.0) };
        let states =
            encoder::encode_pair(&bound, &cfg.model, cfg.train.lambda0, pair, &opts).unwrap();
        // the fused-layer attention output at lambda=0 is the cross branch;
        // rebuild it directly and compare the final states
        let cross = xsta::gdks::gdks_fuse(
            &bound.gdks,
            &bound.tgt.layers[cfg.model.gdks_layer].attn,
            &states.h_t_gdks_in,
            &states.h_s_tilde,
            &pair.src.mask,
            &pair.tgt.mask,
            cfg.model.num_heads,
            &tape.scalar(0.0),
        )
        .unwrap();
        let direct = encoder::mha(
            &bound.gdks.cross,
            &states.h_t_gdks_in,
            &states.h_s_tilde,
            &states.h_s_tilde,
            &pair.src.mask,
            cfg.model.num_heads,
        )
        .unwrap();
        assert_eq!(cross.out.data(), direct.out.data());
        states.tgt_final().data()
    };
    assert_eq!(at_zero.len(), cross_only.len());
    assert_eq!(at_zero, cross_only);

    // affine in lambda at 0.5 within 1e-12 (on the fused-layer output)
    let states_for = |force: f64| {
        let tape = Tape::new(0);
        let mut binder = Binder::new(&tape, &model.store);
        let bound = BoundModel::bind(&mut binder, &cfg.model).unwrap();
        let opts = EncodeOpts { train: false, no_gdks: false, force_lambda: Some(force) };
        let s = encoder::encode_pair(&bound, &cfg.model, cfg.train.lambda0, pair, &opts).unwrap();
        let fused = xsta::gdks::gdks_fuse(
            &bound.gdks,
            &bound.tgt.layers[cfg.model.gdks_layer].attn,
            &s.h_t_gdks_in,
            &s.h_s_tilde,
            &pair.src.mask,
            &pair.tgt.mask,
            cfg.model.num_heads,
            &tape.scalar(force),
        )
        .unwrap();
        fused.out.data()
    };
    let (h0, h1, hmid) = (states_for(0.0), states_for(1.0), states_for(0.5));
    for i in 0..hmid.len() {
        let mix = 0.5 * h0[i] + 0.5 * h1[i];
        assert!(
            (hmid[i] - mix).abs() <= 1e-12,
            "affinity violated at {i}: {} vs {mix}",
            hmid[i]
        );
    }
    println!("A3 PASS GDKS boundary identities (bitwise at 0 and 1, affine at 0.5)");
}

// ---------------------------------------------------------------------------
// A4: calibration algebra

#[test]
fn a4_calibration_algebra() {
    use rand::Rng as _;
    use rand::SeedableRng as _;
    let n = 8;
    let heads = 2;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4242);
    for case in 0..1000u64 {
        let n_t = rng.gen_range(1..6usize);
        let n_s = rng.gen_range(1..6usize);
        let tape = Tape::new(0);
        let mut init = xsta::params::Initializer::new(case, 0.5);
        let cp = xsta::model::CalibParams {
            wq: tape.constant(init.normal(&[n, n]), vec![n, n]),
            wk: tape.constant(init.normal(&[n, n]), vec![n, n]),
        };
        let ht = tape.constant(
            (0..n_t * n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            vec![n_t, n],
        );
        let hs = tape.constant(
            (0..n_s * n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            vec![n_s, n],
        );
        let ps_data: Vec<f64> = (0..n_s * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ps = tape.constant(ps_data.clone(), vec![n_s, 2]);
        let out = calibration::attentive_transfer(&cp, &ht, &hs, &ps, &vec![true; n_s], heads, false)
            .unwrap();
        let d = out.p.data();
        for col in 0..2 {
            let lo = (0..n_s).map(|j| ps_data[j * 2 + col]).fold(f64::INFINITY, f64::min);
            let hi = (0..n_s)
                .map(|j| ps_data[j * 2 + col])
                .fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n_t {
                let v = d[i * 2 + col];
                assert!((0.0..=1.0).contains(&v), "case {case}: {v} outside [0,1]");
                assert!(
                    v >= lo - 1e-12 && v <= hi + 1e-12,
                    "case {case}: row outside the convex hull of source rows"
                );
            }
        }
    }

    // calibrate(p, p) == p exactly
    let p: Vec<f64> = (0..10).map(|i| (i as f64) / 10.0).collect();
    assert_eq!(calibration::calibrate(&p, &p), p);

    // engineered wrong-target / right-source flip, checked against the
    // explicit two-candidate inequality
    let p_t = vec![0.6, 0.6, 0.3, 0.3, 0.1, 0.1]; // argmax at position 0 (wrong)
    let p_tr = vec![0.05, 0.05, 0.9, 0.9, 0.05, 0.05]; // concentrated on position 1 (correct)
    let calibrated = calibration::calibrate(&p_tr, &p_t);
    let starts: Vec<f64> = (0..3).map(|i| calibrated[i * 2]).collect();
    let ends: Vec<f64> = (0..3).map(|i| calibrated[i * 2 + 1]).collect();
    let (i, j) = mrc::decode_span(&starts, &ends, (0, 3), 1).unwrap();
    assert_eq!((i, j), (1, 1), "averaging must flip the argmax to the correct span");
    // the flip condition: avg mass on correct > avg mass on wrong
    assert!(0.5 * (p_t[2] + p_tr[2]) > 0.5 * (p_t[0] + p_tr[0]));
    println!("A4 PASS calibration algebra (1000 hull cases, exact identity, argmax flip)");
}

// ---------------------------------------------------------------------------
// A5: normalization

#[test]
fn a5_normalization() {
    use rand::Rng as _;
    use rand::SeedableRng as _;
    let hidden = 6;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::new(0);
    let mut states = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..4 {
        let rows = rng.gen_range(2..7usize);
        let data: Vec<f64> = (0..rows * hidden).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mask: Vec<bool> = (0..rows).map(|r| r == 0 || rng.gen_bool(0.7)).collect();
        states.push((tape.constant(data, vec![rows, hidden]), mask.clone()));
        masks.push(mask);
    }
    let stats = NormStats::new(hidden, 0.99, 1e-8);
    let (normed, batch_stats) =
        calibration::normalize_batch(&states, &stats, NormMode::Train).unwrap();
    // per-feature mean and variance over unmasked rows of the output
    let mut count = 0.0;
    let mut sums = vec![0.0; hidden];
    let mut sqs = vec![0.0; hidden];
    for (t, mask) in normed.iter().zip(&masks) {
        let d = t.data();
        for (r, &keep) in mask.iter().enumerate() {
            if keep {
                count += 1.0;
                for c in 0..hidden {
                    sums[c] += d[r * hidden + c];
                    sqs[c] += d[r * hidden + c] * d[r * hidden + c];
                }
            }
        }
    }
    for c in 0..hidden {
        let mean = sums[c] / count;
        let var = sqs[c] / count - mean * mean;
        assert!(mean.abs() <= 1e-6, "feature {c} mean {mean}");
        assert!((var - 1.0).abs() <= 1e-5, "feature {c} var {var}");
    }
    assert!(batch_stats.is_some());

    // infer mode: bitwise independence from batch composition
    let mut frozen = NormStats::new(hidden, 0.99, 1e-8);
    frozen.update(&vec![0.3; hidden], &vec![1.7; hidden]);
    let x = tape.constant(
        (0..3 * hidden).map(|i| (i as f64 * 0.21).cos()).collect(),
        vec![3, hidden],
    );
    let (alone, _) = calibration::normalize_batch(
        &[(x.clone(), vec![true; 3])],
        &frozen,
        NormMode::Infer,
    )
    .unwrap();
    let noise = tape.constant(vec![99.0; hidden], vec![1, hidden]);
    let (permuted, _) = calibration::normalize_batch(
        &[(noise, vec![true]), (x, vec![true; 3])],
        &frozen,
        NormMode::Infer,
    )
    .unwrap();
    let a: Vec<u64> = alone[0].data().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = permuted[1].data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
    println!("A5 PASS normalization (train-mode moments, infer-mode batch independence)");
}

// ---------------------------------------------------------------------------
// A6: loss-term properties

#[test]
fn a6_loss_term_properties() {
    use xsta::alignment;
    let tape = Tape::new(0);

    // ECA endpoints exactly
    let one_hot = tape.constant(vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0], vec![2, 3]);
    assert_eq!(
        alignment::row_entropy_loss(&one_hot, &[true, true]).unwrap().item(),
        0.0
    );
    let j = 5;
    let uniform = tape.constant(vec![1.0 / j as f64; 2 * j], vec![2, j]);
    let l = alignment::row_entropy_loss(&uniform, &[true, true]).unwrap().item();
    assert!((l - (j as f64).ln()).abs() <= 1e-12);

    // contrastive loss vs closed form at the three specified similarities
    let tau = 0.05;
    for s in [0.0f64, 0.5, 0.9] {
        let tape = Tape::new(0);
        let mk = |v: &[f64]| tape.constant(v.to_vec(), vec![1, 2]);
        let reprs = vec![
            alignment::PairRepr {
                r_t: mk(&[1.0, 0.0]),
                r_s: mk(&[s, (1.0 - s * s).sqrt()]),
                same_language: false,
            },
            alignment::PairRepr {
                r_t: mk(&[0.0, 1.0]),
                r_s: mk(&[0.0, 1.0]),
                same_language: true,
            },
        ];
        let got = alignment::contrastive_loss(&reprs, tau, NegativesScope::SourceSide, &tape)
            .unwrap()
            .item();
        let want = (1.0 + ((0.0 - s) / tau).exp()).ln();
        assert!((got - want).abs() <= 1e-9, "sim {s}: {got} vs {want}");
    }

    // EM/F1 hand oracles
    let (em, f1) = mrc::em_f1("The Cat.", &["cat".into()], mrc::AnswerNorm::Squad).unwrap();
    assert_eq!((em, f1), (1.0, 1.0));
    let (em, f1) = mrc::em_f1("a b c", &["b c d".into()], mrc::AnswerNorm::Simple).unwrap();
    assert_eq!(em, 0.0);
    assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
    println!("A6 PASS loss-term properties (ECA endpoints, contrastive closed form, EM/F1)");
}

// ---------------------------------------------------------------------------
// A9: ablation machinery

fn ablation_corpus() -> Vec<ParallelExample> {
    let sc = SynthConfig {
        num_examples: 24,
        vocab_size: 60,
        context_clauses_min: 2,
        context_clauses_max: 3,
        ..SynthConfig::default()
    };
    data::synth_corpus(&sc).unwrap()
}

fn ablation_run(flag: &str) -> (Checkpoint, Vec<IndexMap<String, serde_json::Value>>) {
    let mut cfg = tiny_config();
    cfg.train.lr = 1e-3;
    cfg.train.epochs = 1;
    cfg.model.max_seq_len = 32;
    if !flag.is_empty() {
        cfg.set_field(flag, "true").unwrap();
    }
    let pairs = ablation_corpus();
    let (train_pairs, valid_pairs) = pairs.split_at(20);
    let dir = tempfile::tempdir().unwrap();
    let outcome = trainer::train(&cfg, train_pairs, valid_pairs, dir.path()).unwrap();
    let log = std::fs::read_to_string(&outcome.metrics_path).unwrap();
    let lines: Vec<IndexMap<String, serde_json::Value>> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    (outcome.checkpoint, lines)
}

#[test]
fn a9_ablation_machinery() {
    let step_lines = |lines: &[IndexMap<String, serde_json::Value>]| -> Vec<IndexMap<String, serde_json::Value>> {
        lines.iter().filter(|l| l.contains_key("loss")).cloned().collect()
    };
    let (base_ckpt, base_log) = ablation_run("");
    let base_steps = step_lines(&base_log);
    for key in ["mrc_s", "mrc_t", "tg", "align_s", "align_t"] {
        assert!(base_steps.iter().all(|l| l.contains_key(key)), "baseline lacks {key}");
    }
    assert!(base_ckpt.norm.count > 0);
    let base_corr = base_ckpt.store.get("gdks.corr.w").unwrap().data.clone();
    assert!(base_corr.iter().any(|&v| v != 0.0), "baseline must move the correction weights");

    let eval_pairs = ablation_corpus().split_off(20);
    let mut checked = 0;

    // no_atgc: teacher-guided term gone from the log, no running stats
    // collected, and calibration is a no-op at inference
    let (ckpt, log) = ablation_run("no_atgc");
    assert!(step_lines(&log).iter().all(|l| !l.contains_key("tg")));
    assert_eq!(ckpt.norm.count, 0);
    let with = trainer::evaluate(&ckpt, &eval_pairs, true).unwrap();
    let without = trainer::evaluate(&ckpt, &eval_pairs, false).unwrap();
    assert_eq!(with.predictions, without.predictions);
    checked += 1;

    // no_atgc_inference: term still trained and logged, but asking for
    // calibration at inference changes nothing
    let (ckpt, log) = ablation_run("no_atgc_inference");
    assert!(step_lines(&log).iter().all(|l| l.contains_key("tg")));
    let with = trainer::evaluate(&ckpt, &eval_pairs, true).unwrap();
    let without = trainer::evaluate(&ckpt, &eval_pairs, false).unwrap();
    assert_eq!(with.predictions, without.predictions);
    checked += 1;

    // no_norm: transfer runs on raw states, so the term is logged but no
    // batch statistics are ever folded into the running estimates
    let (ckpt, log) = ablation_run("no_norm");
    assert!(step_lines(&log).iter().all(|l| l.contains_key("tg")));
    assert_eq!(ckpt.norm.count, 0);
    checked += 1;

    // no_align_s / no_align_t: the corresponding term vanishes, the rest stay
    let (_, log) = ablation_run("no_align_s");
    let steps = step_lines(&log);
    assert!(steps.iter().all(|l| !l.contains_key("align_s")));
    assert!(steps.iter().all(|l| l.contains_key("align_t")));
    checked += 1;
    let (_, log) = ablation_run("no_align_t");
    let steps = step_lines(&log);
    assert!(steps.iter().all(|l| !l.contains_key("align_t")));
    assert!(steps.iter().all(|l| l.contains_key("align_s")));
    checked += 1;

    // no_gdks: all terms remain, but the correction weights are orphaned
    // and stay at their zero init
    let (ckpt, log) = ablation_run("no_gdks");
    let steps = step_lines(&log);
    for key in ["mrc_s", "mrc_t", "tg", "align_s", "align_t"] {
        assert!(steps.iter().all(|l| l.contains_key(key)));
    }
    let corr = ckpt.store.get("gdks.corr.w").unwrap();
    assert!(corr.data.iter().all(|&v| v == 0.0));
    checked += 1;

    assert_eq!(checked, 6);
    println!("A9 PASS ablation machinery: 6 flags, log omission + contract checks");
}

// ---------------------------------------------------------------------------
// A10: bitwise reproducibility of the command-line pipeline

fn run_cli(args: &[&str]) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_xsta"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "xsta {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_bytes(path: &std::path::Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn a10_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data_dir = root.join("data");
    run_cli(&[
        "gen-data",
        "--num-examples", "32",
        "--vocab-size", "60",
        "--clauses-min", "2",
        "--clauses-max", "3",
        "--seed", "9",
        "--out-dir", data_dir.to_str().unwrap(),
    ]);
    let pairs = data_dir.join("pairs.jsonl");
    let pairs_s = pairs.to_str().unwrap();

    let common = [
        "--epochs", "1",
        "--lr", "1e-3",
        "--batch-size", "4",
        "--num-layers", "2",
        "--hidden-size", "8",
        "--num-heads", "2",
        "--ffn-size", "16",
        "--gdks-layer", "1",
        "--seed", "9",
    ];
    for run in ["t1", "t2"] {
        let out = root.join(run);
        let mut args = vec!["train", "--train", pairs_s, "--out-dir", out.to_str().unwrap()];
        args.extend_from_slice(&common);
        run_cli(&args);
    }
    for file in ["metrics.jsonl", "best.ckpt"] {
        assert_eq!(
            read_bytes(&root.join("t1").join(file)),
            read_bytes(&root.join("t2").join(file)),
            "{file} differs between identical training runs"
        );
    }

    let ckpt = root.join("t1").join("best.ckpt");
    for run in ["e1", "e2"] {
        let out = root.join(run);
        run_cli(&[
            "eval",
            "--checkpoint", ckpt.to_str().unwrap(),
            "--pairs", pairs_s,
            "--out-dir", out.to_str().unwrap(),
        ]);
    }
    for file in ["metrics.json", "predictions.json"] {
        assert_eq!(
            read_bytes(&root.join("e1").join(file)),
            read_bytes(&root.join("e2").join(file)),
            "{file} differs between identical eval runs"
        );
    }

    for run in ["s1", "s2"] {
        let out = root.join(run);
        let mut args = vec![
            "sweep",
            "--train", pairs_s,
            "--grid", "lr=1e-3,3e-3",
            "--out-dir", out.to_str().unwrap(),
        ];
        args.extend_from_slice(&common);
        run_cli(&args);
    }
    assert_eq!(
        read_bytes(&root.join("s1").join("sweep.json")),
        read_bytes(&root.join("s2").join("sweep.json")),
        "sweep.json differs between identical sweeps"
    );
    println!("A10 PASS reproducibility: train/eval/sweep reruns byte-identical");
}

// ---------------------------------------------------------------------------
// A7/A8: end-to-end experiment, trained once and shared

/// Hyperparameters for the end-to-end run. Corpus shape (vocab 200,
/// 2000 train / 500 eval, shift 0.8), epoch count and seed are part of
/// the criterion; learning rate, batch size, dropout, loss mixing and
/// clause range are tuned for desk scale.
const E2E_SEED: u64 = 7;
const E2E_EPOCHS: usize = 10;
const E2E_LR: f64 = 1e-3;
const E2E_BATCH: usize = 2;
const E2E_DROPOUT: f64 = 0.0;
const E2E_ALPHA: f64 = 0.5;
const E2E_WARMUP: f64 = 0.05;
const E2E_MAX_ANSWER_LEN: usize = 2;
const E2E_CLAUSES: (usize, usize) = (2, 2);

fn e2e_synth() -> SynthConfig {
    SynthConfig {
        seed: E2E_SEED,
        vocab_size: 200,
        num_examples: 2500,
        shift_strength: 0.8,
        context_clauses_min: E2E_CLAUSES.0,
        context_clauses_max: E2E_CLAUSES.1,
        ..SynthConfig::default()
    }
}

fn e2e_config() -> Config {
    let mut cfg = Config::default();
    cfg.train.seed = E2E_SEED;
    cfg.train.epochs = E2E_EPOCHS;
    cfg.train.lr = E2E_LR;
    cfg.train.batch_size = E2E_BATCH;
    cfg.model.dropout_rate = E2E_DROPOUT;
    cfg.train.alpha = E2E_ALPHA;
    cfg.train.warmup_fraction = E2E_WARMUP;
    cfg.train.max_answer_len = E2E_MAX_ANSWER_LEN;
    cfg.train.log_every = 100;
    cfg
}

fn e2e_corpus() -> (Vec<ParallelExample>, Vec<ParallelExample>) {
    let pairs = data::synth_corpus(&e2e_synth()).unwrap();
    let eval = pairs[2000..].to_vec();
    let train = pairs[..2000].to_vec();
    (train, eval)
}

struct E2e {
    ckpt: Checkpoint,
    eval_pairs: Vec<ParallelExample>,
    calibrated: EvalReport,
    uncalibrated: EvalReport,
    train_secs: f64,
}

fn e2e() -> &'static E2e {
    static CELL: OnceLock<E2e> = OnceLock::new();
    CELL.get_or_init(|| {
        let (train, eval_pairs) = e2e_corpus();
        // same 90/10 train/valid split the CLI applies
        let valid = train[1800..].to_vec();
        let train = train[..1800].to_vec();
        let dir = tempfile::tempdir().unwrap();
        let t0 = std::time::Instant::now();
        let outcome = trainer::train(&e2e_config(), &train, &valid, dir.path()).unwrap();
        let train_secs = t0.elapsed().as_secs_f64();
        let calibrated = trainer::evaluate(&outcome.checkpoint, &eval_pairs, true).unwrap();
        let uncalibrated = trainer::evaluate(&outcome.checkpoint, &eval_pairs, false).unwrap();
        E2e { ckpt: outcome.checkpoint, eval_pairs, calibrated, uncalibrated, train_secs }
    })
}

#[derive(serde::Deserialize, serde::Serialize)]
struct BaselineFixture {
    target_f1: f64,
}

fn baseline_fixture_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/a7_baseline.json")
}

/// Zero-shot baseline: trained on source self-pairs only, scored on the
/// target side of the shared eval set. Returns the target-language F1.
fn run_zero_shot_baseline() -> f64 {
    let (train, eval_pairs) = e2e_corpus();
    let self_pairs: Vec<ParallelExample> = train
        .iter()
        .map(|p| ParallelExample {
            source: p.source.clone(),
            target: p.source.clone(),
            same_language: true,
        })
        .collect();
    let valid = self_pairs[1800..].to_vec();
    let self_pairs = self_pairs[..1800].to_vec();
    let dir = tempfile::tempdir().unwrap();
    let outcome = trainer::train(&e2e_config(), &self_pairs, &valid, dir.path()).unwrap();
    // target side only: wrap each eval target as a self-pair and read the
    // target-language score
    let tgt_eval: Vec<ParallelExample> = eval_pairs
        .iter()
        .map(|p| ParallelExample {
            source: p.target.clone(),
            target: p.target.clone(),
            same_language: true,
        })
        .collect();
    let report = trainer::evaluate(&outcome.checkpoint, &tgt_eval, false).unwrap();
    report.per_language.get("tgt").unwrap().1
}

/// Regenerates tests/fixtures/a7_baseline.json. Run manually:
/// `cargo test -p xsta --test acceptance regenerate_a7_baseline -- --ignored`
#[test]
#[ignore]
fn regenerate_a7_baseline() {
    let target_f1 = run_zero_shot_baseline();
    let fx = BaselineFixture { target_f1 };
    std::fs::write(
        baseline_fixture_path(),
        serde_json::to_string_pretty(&fx).unwrap(),
    )
    .unwrap();
    println!("baseline target F1 {target_f1:.2} written to fixture");
}

#[test]
fn a7_end_to_end_learning() {
    let e = e2e();
    assert!(
        e.train_secs <= 600.0,
        "training took {:.0}s, budget is 600s",
        e.train_secs
    );
    let (_, src_f1) = *e.calibrated.per_language.get("src").unwrap();
    assert!(src_f1 >= 95.0, "source F1 {src_f1:.2} < 95");
    let fx: BaselineFixture =
        serde_json::from_str(&std::fs::read_to_string(baseline_fixture_path()).unwrap()).unwrap();
    let (_, tgt_f1) = *e.calibrated.per_language.get("tgt").unwrap();
    assert!(
        tgt_f1 >= fx.target_f1 + 10.0,
        "target F1 {tgt_f1:.2} does not beat the zero-shot baseline {:.2} by 10",
        fx.target_f1
    );
    println!(
        "A7 PASS end-to-end: src F1 {src_f1:.2} (>=95), tgt F1 {tgt_f1:.2} vs baseline {:.2} (+{:.2}), {:.0}s",
        fx.target_f1,
        tgt_f1 - fx.target_f1,
        e.train_secs
    );
}

#[test]
fn a8_calibration_benefit() {
    let e = e2e();
    let tgt_em = |r: &EvalReport| -> Vec<(String, f64)> {
        r.examples
            .iter()
            .filter(|x| x.language == "tgt" && x.shifted)
            .map(|x| (x.id.clone(), x.em))
            .collect()
    };
    let with = tgt_em(&e.calibrated);
    let without = tgt_em(&e.uncalibrated);
    assert_eq!(with.len(), without.len());
    assert!(!with.is_empty(), "no shifted examples in the eval set");
    let mean = |v: &[(String, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
    let (m_with, m_without) = (mean(&with), mean(&without));
    assert!(
        m_with >= m_without,
        "calibrated EM {m_with:.4} < uncalibrated {m_without:.4} on shifted subset"
    );
    let improved = with
        .iter()
        .zip(&without)
        .filter(|(a, b)| {
            assert_eq!(a.0, b.0);
            a.1 > b.1
        })
        .count();
    assert!(improved >= 1, "no example strictly improved by calibration");
    println!(
        "A8 PASS calibration benefit: shifted-subset EM {:.2} vs {:.2}, {improved} strictly improved",
        100.0 * m_with,
        100.0 * m_without
    );
    let _ = &e.ckpt;
    let _ = &e.eval_pairs;
}
