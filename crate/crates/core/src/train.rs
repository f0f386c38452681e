//! Corpus loading and the teacher-forced training loop.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linker::{tokenize, Gazetteer, LinkedDocument};
use crate::model::{Example, Summarizer, TrainConfig, Vocab};
use crate::optim::{AdamConfig, BertAdam};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub article: String,
    pub summary: String,
}

/// JSON lines with string fields `article` and `summary`; blank lines skipped.
pub fn parse_corpus(text: &str, origin: &str) -> Result<Vec<Pair>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: Pair = serde_json::from_str(line).map_err(|e| Error::parse(origin, n + 1, e.to_string()))?;
        out.push(pair);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Pair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string())
}

pub fn corpus_jsonl(pairs: &[Pair]) -> String {
    pairs
        .iter()
        .map(|p| serde_json::to_string(p).expect("strings serialize") + "\n")
        .collect()
}

/// Vocabulary over the tokens of articles and summaries seen at least
/// `min_count` times.
pub fn build_vocab(pairs: &[Pair], min_count: usize) -> Vocab {
    let tokens: Vec<String> = pairs
        .iter()
        .flat_map(|p| tokenize(&p.article).into_iter().chain(tokenize(&p.summary)))
        .collect();
    Vocab::build_min_count(tokens.iter().map(String::as_str), min_count)
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Links and truncates every pair.
pub fn prepare_corpus<S: Scalar>(
    model: &Summarizer<S>,
    pairs: &[Pair],
    gazetteer: Option<&Gazetteer>,
    max_src: usize,
    max_tgt: usize,
    entity_min_tokens: usize,
) -> Result<Vec<Example>> {
    pairs
        .iter()
        .map(|p| {
            let doc = match gazetteer {
                Some(g) => LinkedDocument::link(tokenize(&p.article), g),
                None => LinkedDocument {
                    tokens: tokenize(&p.article),
                    spans: Vec::new(),
                },
            };
            model.prepare(&doc, &tokenize(&p.summary), gazetteer, max_src, max_tgt, entity_min_tokens)
        })
        .collect()
}

/// Runs `cfg.steps` optimizer steps of `cfg.batch_size` examples each,
/// drawing examples from a fresh seeded shuffle every epoch. Returns the mean
/// batch loss of every step, measured before its update.
pub fn train_summarizer<S: Scalar>(model: &mut Summarizer<S>, examples: &[Example], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut opt = BertAdam::new(cfg.adam(), &model.params)?;
    let base = Rng::new(cfg.seed);
    let mut order_rng = base.fork(1);
    let mut drop_rng = base.fork(2);
    let dropout = model.config.dropout > 0.0;
    let mut queue: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let scale = S::lit(1.0 / cfg.batch_size as f64);

    for _ in 0..cfg.steps {
        let mut sum: Option<Vec<Option<Vec<S>>>> = None;
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            if queue.is_empty() {
                queue = (0..examples.len()).collect();
                order_rng.shuffle(&mut queue);
                queue.reverse();
            }
            let ex = &examples[queue.pop().expect("refilled")];
            let (l, g) = model.loss_and_grads(ex, dropout.then_some(&mut drop_rng))?;
            loss += l;
            match sum.as_mut() {
                None => sum = Some(g),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(g) {
                        if let (Some(a), Some(g)) = (a.as_mut(), g) {
                            a.iter_mut().zip(g).for_each(|(x, y)| *x = *x + y);
                        }
                    }
                }
            }
        }
        let mut grads = sum.expect("batch_size ≥ 1");
        if cfg.batch_size > 1 {
            for g in grads.iter_mut().flatten() {
                g.iter_mut().for_each(|x| *x = *x * scale);
            }
        }
        opt.step(&mut model.params, &grads)?;
        losses.push(loss / cfg.batch_size as f64);
    }
    Ok(losses)
}

/// `step,loss` rows with 17 significant digits.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{:.16e}", i + 1, l);
    }
    s
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of target positions (EOS included) whose arg-max prediction
/// under teacher forcing is the gold token.
pub fn token_accuracy<S: Scalar>(model: &Summarizer<S>, examples: &[Example]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in examples {
        let logits = model.teacher_forced_logits(ex)?;
        for (row, &gold) in logits.iter().zip(&ex.tgt_out) {
            hit += (argmax(row) == gold) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Teacher-forced accuracy at one chosen target position per example.
pub fn position_accuracy<S: Scalar>(model: &Summarizer<S>, examples: &[(Example, usize)]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hit = 0usize;
    for (ex, pos) in examples {
        let logits = model.teacher_forced_logits(ex)?;
        let row = logits
            .get(*pos)
            .ok_or_else(|| Error::Invalid(format!("position {pos} beyond the target")))?;
        hit += (argmax(row) == ex.tgt_out[*pos]) as usize;
    }
    Ok(hit as f64 / examples.len() as f64)
}

/// Mean teacher-forced loss.
pub fn mean_loss<S: Scalar>(model: &Summarizer<S>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Invalid("no examples to evaluate".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        total += model.model_loss(ex, None)?;
    }
    Ok(total / examples.len() as f64)
}
