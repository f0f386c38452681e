//! Beam search and greedy decoding over any incremental next-token model.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::linker::{Gazetteer, LinkedDocument};
use crate::model::{DecodeConfig, DecodeState, Summarizer, BOS, EOS, PAD};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that yields next-token logits for a prefix and can be extended
/// one token at a time.
pub trait StepModel {
    type State: Clone;

    fn start(&self) -> Result<Self::State>;
    fn logits(&self, state: &Self::State) -> Vec<f64>;
    fn extend(&self, state: &Self::State, token: usize) -> Result<Self::State>;
    fn eos(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids; a finished hypothesis ends with EOS.
    pub token_ids: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the closing EOS.
    pub fn content(&self) -> &[usize] {
        match self.token_ids.split_last() {
            Some((_, rest)) if self.finished => rest,
            _ => &self.token_ids,
        }
    }

    fn rank_score(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 {
            self.logprob
        } else {
            self.logprob / (self.token_ids.len().max(1) as f64).powf(length_penalty)
        }
    }
}

/// Higher score first, then lexicographically smaller ids.
fn better(a_score: f64, a_ids: &[usize], b_score: f64, b_ids: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_ids.cmp(b_ids))
}

/// Log-probabilities for the next token after `len` generated tokens: EOS is
/// removed below `min_len`, and at `max_len` EOS is the only option at cost 0.
/// Non-finite entries are impossible tokens.
pub fn step_logprobs(logits: &[f64], eos: usize, len: usize, cfg: &DecodeConfig) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; logits.len()];
    if len >= cfg.max_len {
        out[eos] = 0.0;
        return out;
    }
    let allowed = |i: usize| !(i == eos && len < cfg.min_len) && logits[i].is_finite();
    let max = (0..logits.len())
        .filter(|&i| allowed(i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return out;
    }
    let z: f64 = (0..logits.len())
        .filter(|&i| allowed(i))
        .map(|i| (logits[i] - max).exp())
        .sum();
    let lz = max + z.ln();
    for (i, o) in out.iter_mut().enumerate() {
        if allowed(i) {
            *o = logits[i] - lz;
        }
    }
    out
}

fn check(cfg: &DecodeConfig) -> Result<()> {
    if cfg.beam_width < 1 {
        return Err(Error::config("beam_width must be at least 1"));
    }
    if cfg.min_len > cfg.max_len {
        return Err(Error::config("min_len exceeds max_len"));
    }
    Ok(())
}

/// Length-unnormalized beam search (unless `length_penalty` is set). Returns
/// the best finished hypothesis.
pub fn beam_search<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Hypothesis> {
    check(cfg)?;
    let k = cfg.beam_width;
    let eos = model.eos();
    let mut active: Vec<(Hypothesis, M::State)> = vec![(
        Hypothesis {
            token_ids: Vec::new(),
            logprob: 0.0,
            finished: false,
        },
        model.start()?,
    )];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !active.is_empty() {
        let mut cands: Vec<(f64, usize, usize, Vec<usize>)> = Vec::new();
        for (hi, (h, state)) in active.iter().enumerate() {
            let lp = step_logprobs(&model.logits(state), eos, h.token_ids.len(), cfg);
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    let mut ids = h.token_ids.clone();
                    ids.push(tok);
                    cands.push((h.logprob + l, hi, tok, ids));
                }
            }
        }
        cands.sort_by(|a, b| better(a.0, &a.3, b.0, &b.3));

        let mut next = Vec::with_capacity(k);
        for (rank, (score, hi, tok, ids)) in cands.into_iter().enumerate() {
            if tok == eos {
                if rank < k {
                    finished.push(Hypothesis {
                        token_ids: ids,
                        logprob: score,
                        finished: true,
                    });
                }
            } else {
                let state = model.extend(&active[hi].1, tok)?;
                next.push((
                    Hypothesis {
                        token_ids: ids,
                        logprob: score,
                        finished: false,
                    },
                    state,
                ));
                if next.len() == k {
                    break;
                }
            }
        }
        active = next;

        // Extensions only lower raw log-probabilities.
        if cfg.length_penalty == 0.0 {
            let best_done = finished.iter().map(|h| h.logprob).fold(f64::NEG_INFINITY, f64::max);
            if active.first().is_some_and(|(h, _)| h.logprob < best_done) {
                break;
            }
        }
    }

    finished
        .into_iter()
        .min_by(|a, b| {
            better(
                a.rank_score(cfg.length_penalty),
                &a.token_ids,
                b.rank_score(cfg.length_penalty),
                &b.token_ids,
            )
        })
        .ok_or_else(|| Error::Invalid("no hypothesis finished".into()))
}

/// Arg-max decoding under the same length rules; ties go to the lower id.
pub fn greedy_decode<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Hypothesis> {
    check(cfg)?;
    let eos = model.eos();
    let mut state = model.start()?;
    let mut h = Hypothesis {
        token_ids: Vec::new(),
        logprob: 0.0,
        finished: false,
    };
    loop {
        let lp = step_logprobs(&model.logits(&state), eos, h.token_ids.len(), cfg);
        let mut best: Option<usize> = None;
        for (i, &l) in lp.iter().enumerate() {
            if l.is_finite() && best.map_or(true, |b| l > lp[b]) {
                best = Some(i);
            }
        }
        let tok = best.ok_or_else(|| Error::Invalid("every token is masked".into()))?;
        h.token_ids.push(tok);
        h.logprob += lp[tok];
        if tok == eos {
            h.finished = true;
            return Ok(h);
        }
        state = model.extend(&state, tok)?;
    }
}

/// Decoding session of one article: encoder states plus the linking setup.
pub struct SummarySession<'a, S> {
    pub model: &'a Summarizer<S>,
    pub encoded: Tensor<S>,
    pub gazetteer: Option<&'a Gazetteer>,
    pub entity_min_tokens: usize,
}

impl<'a, S: Scalar> SummarySession<'a, S> {
    pub fn new(
        model: &'a Summarizer<S>,
        article: &LinkedDocument,
        gazetteer: Option<&'a Gazetteer>,
        max_src: usize,
        entity_min_tokens: usize,
    ) -> Result<Self> {
        let (src, ents) = model.prepare_source(article, max_src)?;
        Ok(SummarySession {
            model,
            encoded: model.encode_article(&src, &ents)?,
            gazetteer,
            entity_min_tokens,
        })
    }
}

impl<S: Scalar> StepModel for SummarySession<'_, S> {
    type State = DecodeState<S>;

    fn start(&self) -> Result<Self::State> {
        self.model.begin(&self.encoded, self.gazetteer, self.entity_min_tokens)
    }

    /// Padding and BOS are never generated.
    fn logits(&self, state: &Self::State) -> Vec<f64> {
        let mut l = state.logits.clone();
        l[PAD] = f64::NEG_INFINITY;
        l[BOS] = f64::NEG_INFINITY;
        l
    }

    fn extend(&self, state: &Self::State, token: usize) -> Result<Self::State> {
        self.model
            .advance(state, token, &self.encoded, self.gazetteer, self.entity_min_tokens)
    }

    fn eos(&self) -> usize {
        EOS
    }
}

/// Beam-search summary of one article as tokens.
pub fn summarize<S: Scalar>(
    model: &Summarizer<S>,
    article: &LinkedDocument,
    gazetteer: Option<&Gazetteer>,
    max_src: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<String>> {
    let session = SummarySession::new(model, article, gazetteer, max_src, cfg.entity_min_tokens)?;
    let best = beam_search(&session, cfg)?;
    Ok(model.vocab.decode(best.content()))
}
