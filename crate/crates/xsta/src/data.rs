//! Data pipeline: SQuAD-format loading, deterministic synthetic parallel
//! corpus generation, whitespace tokenization with char<->token span
//! mapping, vocabulary handling and batching.
//!
//! The synthetic "translation" maps every source token to a distinct
//! target-vocabulary token through a bijective lexicon, and optionally
//! permutes clause order so answer spans land at different positions —
//! target answers are lexically disjoint from source answers and may be
//! positionally shifted, which is exactly the transfer difficulty the
//! model components are built to handle.

use std::collections::{HashMap, HashSet};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub char_start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrcExample {
    pub id: String,
    pub question: String,
    pub context: String,
    pub answers: Vec<Answer>,
    pub language: String,
}

impl MrcExample {
    /// Every answer must occur verbatim at its char offset.
    pub fn validate(&self) -> Result<()> {
        let chars: Vec<char> = self.context.chars().collect();
        for a in &self.answers {
            let alen = a.text.chars().count();
            let end = a.char_start + alen;
            let found: String = chars
                .get(a.char_start..end)
                .map(|s| s.iter().collect())
                .unwrap_or_default();
            if found != a.text {
                return Err(Error::data(format!(
                    "example {}: answer {:?} not found at char {} (found {:?})",
                    self.id, a.text, a.char_start, found
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelExample {
    pub source: MrcExample,
    pub target: MrcExample,
    pub same_language: bool,
}

// ---------------------------------------------------------------------------
// JSON-lines pair format (also the ingestion path for user-supplied
// translate-train data).

#[derive(Debug, Serialize, Deserialize)]
struct PairRecord {
    id: String,
    src_question: String,
    src_context: String,
    src_answer: String,
    src_char_start: usize,
    tgt_question: String,
    tgt_context: String,
    tgt_answer: String,
    tgt_char_start: usize,
    same_language: bool,
    #[serde(default = "default_src_lang")]
    src_language: String,
    #[serde(default = "default_tgt_lang")]
    tgt_language: String,
}

fn default_src_lang() -> String {
    "src".into()
}
fn default_tgt_lang() -> String {
    "tgt".into()
}

pub fn write_pairs_jsonl(path: &Path, pairs: &[ParallelExample]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for p in pairs {
        let rec = PairRecord {
            id: p.source.id.clone(),
            src_question: p.source.question.clone(),
            src_context: p.source.context.clone(),
            src_answer: p.source.answers[0].text.clone(),
            src_char_start: p.source.answers[0].char_start,
            tgt_question: p.target.question.clone(),
            tgt_context: p.target.context.clone(),
            tgt_answer: p.target.answers[0].text.clone(),
            tgt_char_start: p.target.answers[0].char_start,
            same_language: p.same_language,
            src_language: p.source.language.clone(),
            tgt_language: p.target.language.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn read_pairs_jsonl(path: &Path) -> Result<Vec<ParallelExample>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in s.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let pair = ParallelExample {
            source: MrcExample {
                id: rec.id.clone(),
                question: rec.src_question,
                context: rec.src_context,
                answers: vec![Answer {
                    text: rec.src_answer,
                    char_start: rec.src_char_start,
                }],
                language: rec.src_language,
            },
            target: MrcExample {
                id: rec.id,
                question: rec.tgt_question,
                context: rec.tgt_context,
                answers: vec![Answer {
                    text: rec.tgt_answer,
                    char_start: rec.tgt_char_start,
                }],
                language: rec.tgt_language,
            },
            same_language: rec.same_language,
        };
        pair.source.validate()?;
        pair.target.validate()?;
        out.push(pair);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// SQuAD v1.1 JSON

#[derive(Debug, Serialize, Deserialize)]
struct SquadFile {
    data: Vec<SquadArticle>,
}
#[derive(Debug, Serialize, Deserialize)]
struct SquadArticle {
    #[serde(default)]
    title: String,
    paragraphs: Vec<SquadParagraph>,
}
#[derive(Debug, Serialize, Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}
#[derive(Debug, Serialize, Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    answers: Vec<SquadAnswer>,
}
#[derive(Debug, Serialize, Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: usize,
}

pub fn load_squad_json(path: &Path, language: &str) -> Result<Vec<MrcExample>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: SquadFile = serde_json::from_str(&s)
        .map_err(|e| Error::Parse(format!("{}: data->paragraphs->qas: {e}", path.display())))?;
    let mut out = Vec::new();
    for article in &file.data {
        for para in &article.paragraphs {
            for qa in &para.qas {
                let ex = MrcExample {
                    id: qa.id.clone(),
                    question: qa.question.clone(),
                    context: para.context.clone(),
                    answers: qa
                        .answers
                        .iter()
                        .map(|a| Answer {
                            text: a.text.clone(),
                            char_start: a.answer_start,
                        })
                        .collect(),
                    language: language.to_string(),
                };
                ex.validate()?;
                out.push(ex);
            }
        }
    }
    Ok(out)
}

/// Serialize examples back to SQuAD layout (one paragraph per example).
pub fn save_squad_json(path: &Path, examples: &[MrcExample]) -> Result<()> {
    let file = SquadFile {
        data: vec![SquadArticle {
            title: "export".into(),
            paragraphs: examples
                .iter()
                .map(|ex| SquadParagraph {
                    context: ex.context.clone(),
                    qas: vec![SquadQa {
                        id: ex.id.clone(),
                        question: ex.question.clone(),
                        answers: ex
                            .answers
                            .iter()
                            .map(|a| SquadAnswer {
                                text: a.text.clone(),
                                answer_start: a.char_start,
                            })
                            .collect(),
                    }],
                })
                .collect(),
        }],
    };
    let s = serde_json::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Synthetic parallel corpus

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub lexicon_seed: u64,
    /// Number of source word types.
    pub vocab_size: usize,
    pub num_examples: usize,
    /// Clauses per context, inclusive range.
    pub context_clauses_min: usize,
    pub context_clauses_max: usize,
    /// Fraction of cross-language pairs whose clause order is permuted so
    /// that the answer span moves.
    pub shift_strength: f64,
    /// Fraction of pairs emitted as same-language self-pairs.
    pub self_pair_fraction: f64,
    /// Probability of a two-token value in a distractor clause.
    pub multi_token_value_rate: f64,
    /// Probability of a two-token value in the questioned clause.
    pub multi_token_answer_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            lexicon_seed: 13,
            vocab_size: 200,
            num_examples: 2000,
            context_clauses_min: 3,
            context_clauses_max: 6,
            shift_strength: 0.8,
            self_pair_fraction: 0.3,
            multi_token_value_rate: 0.5,
            multi_token_answer_rate: 0.1,
        }
    }
}

struct Lexicon {
    question_words: Vec<String>,
    entities: Vec<String>,
    relations: Vec<String>,
    values: Vec<String>,
    /// clause-final delimiter token, one per language
    separator: String,
    /// source word -> target word, bijective
    map: HashMap<String, String>,
}

fn make_word(rng: &mut ChaCha8Rng, consonants: &[char], vowels: &[char], syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(consonants[rng.gen_range(0..consonants.len())]);
        w.push(vowels[rng.gen_range(0..vowels.len())]);
    }
    w
}

fn make_wordlist(
    rng: &mut ChaCha8Rng,
    n: usize,
    consonants: &[char],
    vowels: &[char],
    taken: &mut HashSet<String>,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = rng.gen_range(2..4);
        let w = make_word(rng, consonants, vowels, syl);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn build_lexicon(cfg: &SynthConfig) -> Result<Lexicon> {
    const MIN_VOCAB: usize = 16;
    if cfg.vocab_size < MIN_VOCAB {
        return Err(Error::data(format!(
            "vocab_size {} too small for a bijective lexicon (need >= {MIN_VOCAB})",
            cfg.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.lexicon_seed);
    let mut taken = HashSet::new();
    let src_c: Vec<char> = "bdglmnprstv".chars().collect();
    let src_v: Vec<char> = "aeiou".chars().collect();
    let tgt_c: Vec<char> = "fkhjwxzc".chars().collect();
    let tgt_v: Vec<char> = "aiouy".chars().collect();

    let n_q = 2;
    let n_rel = (cfg.vocab_size / 5).max(3);
    let n_ent = (cfg.vocab_size * 2 / 5).max(4);
    // one token is reserved as the clause separator
    let n_val = cfg.vocab_size - n_q - n_rel - n_ent - 1;

    let source: Vec<String> = make_wordlist(&mut rng, cfg.vocab_size, &src_c, &src_v, &mut taken);
    let target: Vec<String> = make_wordlist(&mut rng, cfg.vocab_size, &tgt_c, &tgt_v, &mut taken);
    let map: HashMap<String, String> = source
        .iter()
        .cloned()
        .zip(target.iter().cloned())
        .collect();

    let mut it = source.into_iter();
    let question_words: Vec<String> = it.by_ref().take(n_q).collect();
    let relations: Vec<String> = it.by_ref().take(n_rel).collect();
    let entities: Vec<String> = it.by_ref().take(n_ent).collect();
    let separator = it.by_ref().next().expect("vocab reserves a separator");
    let values: Vec<String> = it.take(n_val).collect();

    Ok(Lexicon {
        question_words,
        entities,
        relations,
        values,
        separator,
        map,
    })
}

fn translate(lex: &Lexicon, text: &str) -> String {
    text.split_whitespace()
        .map(|t| lex.map.get(t).cloned().unwrap_or_else(|| t.to_string()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// char offset of the start of clause `idx` when clauses are joined by " ".
fn clause_offset(clauses: &[String], idx: usize) -> usize {
    clauses[..idx]
        .iter()
        .map(|c| c.chars().count() + 1)
        .sum()
}

/// Deterministic synthetic parallel-language corpus exhibiting answer-span
/// shift between source and target sides.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<ParallelExample>> {
    if cfg.shift_strength > 0.0 && cfg.context_clauses_min < 2 {
        return Err(Error::data(
            "context_clauses_min must be >= 2 when shift_strength > 0",
        ));
    }
    let lex = build_lexicon(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.num_examples);
    for i in 0..cfg.num_examples {
        let k = rng.gen_range(cfg.context_clauses_min..=cfg.context_clauses_max);
        // Entities and relations are each used at most once per context, so
        // every question is answerable from either cue alone and no clause
        // is a partial match for another clause's question.
        let qi = rng.gen_range(0..k);
        let mut used_e: HashSet<usize> = HashSet::new();
        let mut used_r: HashSet<usize> = HashSet::new();
        let mut used_v: HashSet<usize> = HashSet::new();
        let mut keys_vec: Vec<(usize, usize)> = Vec::with_capacity(k);
        let mut clauses: Vec<String> = Vec::with_capacity(k);
        let mut clause_answers: Vec<String> = Vec::with_capacity(k);
        while clauses.len() < k {
            let e = rng.gen_range(0..lex.entities.len());
            let r = rng.gen_range(0..lex.relations.len());
            if used_e.contains(&e) || used_r.contains(&r) {
                continue;
            }
            used_e.insert(e);
            used_r.insert(r);
            keys_vec.push((e, r));
            // Value tokens are also unique within a context so no clause's
            // value is a partial match for another clause's value.
            let mut fresh_v = |rng: &mut ChaCha8Rng| loop {
                let v = rng.gen_range(0..lex.values.len());
                if used_v.insert(v) {
                    return v;
                }
            };
            let rate = if clauses.len() == qi {
                cfg.multi_token_answer_rate
            } else {
                cfg.multi_token_value_rate
            };
            let value = if rng.gen::<f64>() < rate {
                let a = fresh_v(&mut rng);
                let b = fresh_v(&mut rng);
                format!("{} {}", lex.values[a], lex.values[b])
            } else {
                lex.values[fresh_v(&mut rng)].clone()
            };
            clauses.push(format!(
                "{} {} {} {}",
                lex.entities[e], lex.relations[r], value, lex.separator
            ));
            clause_answers.push(value);
        }
        let (qe, qr) = keys_vec[qi];
        let qw = &lex.question_words[rng.gen_range(0..lex.question_words.len())];
        let question = format!("{} {} {}", qw, lex.relations[qr], lex.entities[qe]);
        let context = clauses.join(" ");
        let answer = clause_answers[qi].clone();
        let ent_rel_len =
            lex.entities[qe].chars().count() + 1 + lex.relations[qr].chars().count() + 1;
        let char_start = clause_offset(&clauses, qi) + ent_rel_len;

        let source = MrcExample {
            id: format!("synth-{i:05}"),
            question,
            context,
            answers: vec![Answer {
                text: answer.clone(),
                char_start,
            }],
            language: "src".into(),
        };
        source.validate()?;

        let self_pair = rng.gen::<f64>() < cfg.self_pair_fraction;
        if self_pair {
            out.push(ParallelExample {
                target: source.clone(),
                source,
                same_language: true,
            });
            continue;
        }

        let shift = rng.gen::<f64>() < cfg.shift_strength;
        let mut order: Vec<usize> = (0..k).collect();
        if shift {
            // permutation that moves the answer clause
            loop {
                order.shuffle(&mut rng);
                if order.iter().position(|&c| c == qi).unwrap() != qi {
                    break;
                }
            }
        }
        let tgt_clauses: Vec<String> = order.iter().map(|&c| translate(&lex, &clauses[c])).collect();
        let tgt_qi = order.iter().position(|&c| c == qi).unwrap();
        let tgt_ent_rel_len = translate(&lex, &lex.entities[qe]).chars().count()
            + 1
            + translate(&lex, &lex.relations[qr]).chars().count()
            + 1;
        let tgt_char_start = clause_offset(&tgt_clauses, tgt_qi) + tgt_ent_rel_len;
        let target = MrcExample {
            id: source.id.clone(),
            question: translate(&lex, &source.question),
            context: tgt_clauses.join(" "),
            answers: vec![Answer {
                text: translate(&lex, &answer),
                char_start: tgt_char_start,
            }],
            language: "tgt".into(),
        };
        target.validate()?;
        out.push(ParallelExample {
            source,
            target,
            same_language: false,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tokenization and vocabulary

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

/// Whitespace tokenization with char offsets.
pub fn tokenize_with_offsets(s: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut start = 0usize;
    for (ci, ch) in s.chars().enumerate() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(Token {
                    text: std::mem::take(&mut cur),
                    char_start: start,
                    char_end: ci,
                });
            }
        } else {
            if cur.is_empty() {
                start = ci;
            }
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        let end = s.chars().count();
        out.push(Token {
            text: cur,
            char_start: start,
            char_end: end,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pub tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    /// Build from the training corpus in first-occurrence order.
    pub fn build(pairs: &[ParallelExample]) -> Self {
        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            CLS_TOKEN.to_string(),
            SEP_TOKEN.to_string(),
        ];
        let mut seen: HashSet<String> = tokens.iter().cloned().collect();
        for pair in pairs {
            for ex in [&pair.source, &pair.target] {
                for text in [&ex.question, &ex.context] {
                    for t in text.split_whitespace() {
                        if seen.insert(t.to_string()) {
                            tokens.push(t.to_string());
                        }
                    }
                }
            }
        }
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n"))
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(Vocab::from_tokens(s.lines().map(|l| l.to_string()).collect()))
    }
}

// ---------------------------------------------------------------------------
// Packed encoding

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanLabel {
    /// Token positions in the packed sequence.
    pub start: usize,
    pub end: usize,
    pub answer_text: String,
}

#[derive(Debug, Clone)]
pub struct EncodedSide {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub mask: Vec<bool>,
    pub label: SpanLabel,
    /// Half-open packed-position range of context tokens.
    pub context_range: (usize, usize),
    /// Char spans of context tokens, for rendering decoded spans.
    pub context_token_spans: Vec<(usize, usize)>,
    pub context: String,
    pub gold_answers: Vec<String>,
    pub language: String,
}

impl EncodedSide {
    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }

    /// Render a packed-position span back to context text.
    pub fn render_span(&self, start: usize, end: usize) -> Result<String> {
        let (c0, c1) = self.context_range;
        if start < c0 || end >= c1 || start > end {
            return Err(Error::invalid(format!(
                "span ({start},{end}) outside context range {:?}",
                self.context_range
            )));
        }
        let cs = self.context_token_spans[start - c0].0;
        let ce = self.context_token_spans[end - c0].1;
        let chars: Vec<char> = self.context.chars().collect();
        Ok(chars[cs..ce].iter().collect())
    }
}

/// Minimal token span covering a char range.
fn cover_span(tokens: &[Token], char_start: usize, char_end: usize) -> Option<(usize, usize)> {
    let mut first = None;
    let mut last = None;
    for (i, t) in tokens.iter().enumerate() {
        if t.char_end > char_start && t.char_start < char_end {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    Some((first?, last?))
}

/// Tokenize one example and map its gold char span to a packed token span.
/// Packing: [CLS] question [SEP] context [SEP].
pub fn encode_example(ex: &MrcExample, vocab: &Vocab, max_seq_len: usize) -> Result<EncodedSide> {
    ex.validate()?;
    let q_tokens = tokenize_with_offsets(&ex.question);
    if q_tokens.is_empty() {
        return Err(Error::data(format!("example {}: empty question", ex.id)));
    }
    let c_tokens = tokenize_with_offsets(&ex.context);
    if c_tokens.is_empty() {
        return Err(Error::data(format!("example {}: empty context", ex.id)));
    }
    let seq_len = q_tokens.len() + c_tokens.len() + 3;
    if seq_len > max_seq_len {
        return Err(Error::data(format!(
            "example {}: packed length {seq_len} exceeds max_seq_len {max_seq_len}",
            ex.id
        )));
    }
    let gold = &ex.answers[0];
    let gold_len = gold.text.chars().count();
    let (t0, t1) = cover_span(&c_tokens, gold.char_start, gold.char_start + gold_len)
        .ok_or_else(|| {
            Error::data(format!(
                "example {}: answer not inside context after tokenization",
                ex.id
            ))
        })?;

    let mut tokens: Vec<String> = vec![CLS_TOKEN.to_string()];
    tokens.extend(q_tokens.iter().map(|t| t.text.clone()));
    tokens.push(SEP_TOKEN.to_string());
    let ctx_offset = tokens.len();
    tokens.extend(c_tokens.iter().map(|t| t.text.clone()));
    tokens.push(SEP_TOKEN.to_string());
    let ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    let mask = vec![true; ids.len()];

    let side = EncodedSide {
        ids,
        mask,
        label: SpanLabel {
            start: ctx_offset + t0,
            end: ctx_offset + t1,
            answer_text: gold.text.clone(),
        },
        context_range: (ctx_offset, ctx_offset + c_tokens.len()),
        context_token_spans: c_tokens.iter().map(|t| (t.char_start, t.char_end)).collect(),
        context: ex.context.clone(),
        gold_answers: ex.answers.iter().map(|a| a.text.clone()).collect(),
        language: ex.language.clone(),
        tokens,
    };
    // decoded gold span must round-trip to a text covering the answer
    let rendered = side.render_span(side.label.start, side.label.end)?;
    if !rendered.contains(&gold.text) {
        return Err(Error::data(format!(
            "example {}: token span renders to {rendered:?}, expected to cover {:?}",
            ex.id, gold.text
        )));
    }
    Ok(side)
}

#[derive(Debug, Clone)]
pub struct EncodedPair {
    pub id: String,
    pub src: EncodedSide,
    pub tgt: EncodedSide,
    pub same_language: bool,
}

pub fn encode_pair(pair: &ParallelExample, vocab: &Vocab, max_seq_len: usize) -> Result<EncodedPair> {
    Ok(EncodedPair {
        id: pair.source.id.clone(),
        src: encode_example(&pair.source, vocab, max_seq_len)?,
        tgt: encode_example(&pair.target, vocab, max_seq_len)?,
        same_language: pair.same_language,
    })
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub pairs: Vec<EncodedPair>,
}

fn pad_side(side: &mut EncodedSide, len: usize) {
    while side.ids.len() < len {
        side.ids.push(PAD_ID);
        side.tokens.push(PAD_TOKEN.to_string());
        side.mask.push(false);
    }
}

/// Seeded shuffle + chunking; each side padded to its per-batch max; the
/// final partial batch is kept.
pub fn make_batches(
    pairs: &[EncodedPair],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut batch: Vec<EncodedPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
        let src_max = batch.iter().map(|p| p.src.seq_len()).max().unwrap_or(0);
        let tgt_max = batch.iter().map(|p| p.tgt.seq_len()).max().unwrap_or(0);
        for p in &mut batch {
            pad_side(&mut p.src, src_max);
            pad_side(&mut p.tgt, tgt_max);
        }
        out.push(Batch { pairs: batch });
    }
    out
}
