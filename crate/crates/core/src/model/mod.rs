//! Dual-channel (token + entity) encoder-decoder with a selectable attention
//! backbone and entity source.
//!
//! Every parameter lives in a [`ParamStore`]; forward passes read them through
//! the `Var`s produced by [`ParamStore::bind`], so the same code serves
//! training (differentiable leaves), inference (constants) and gradient checks
//! (caller-supplied leaves).

pub mod checkpoint;
pub mod config;
pub mod params;
pub mod vocab;

use std::collections::BTreeSet;

pub use config::{Backbone, DecodeConfig, EntityMode, ModelConfig, Preset, RunConfig, TrainConfig};
pub use params::{Param, ParamStore};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};

use crate::attention::{
    concat_memory, multi_head_attention, update_memory, AbsolutePositionalEncoding, Head, OffsetPolicy,
    RelativeFrame, RelativePositionalEncoding, Scoring, SegmentMemory, VanillaHead, XlHead,
};
use crate::error::{Error, Result};
use crate::linker::{EntitySpan, Gazetteer, LinkedDocument};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{dropout_mask, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum HeadIdx {
    Vanilla { w_q: usize, w_k: usize, w_v: usize },
    Xl { w_q: usize, w_ke: usize, w_kr: usize, w_v: usize, u: usize, v: usize },
}

#[derive(Clone, Debug)]
struct Block {
    heads: Vec<HeadIdx>,
    w_o: usize,
    ln_g: usize,
    ln_b: usize,
}

#[derive(Clone, Debug)]
struct Ffn {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln_g: usize,
    ln_b: usize,
}

#[derive(Clone, Debug)]
struct EncLayer {
    self1: Block,
    ent: Option<Block>,
    self2: Block,
    cross_ent: Option<Block>,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct DecLayer {
    self1: Block,
    ent: Option<Block>,
    cross: Block,
    self2: Block,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    entity_table: Option<usize>,
    enc_conv: Vec<(usize, usize)>,
    dec_conv: Vec<(usize, usize)>,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
    Ones,
    Uniform(f64),
}

/// Walks the parameter list in a fixed order, creating or looking up each one.
fn build_layout(
    cfg: &ModelConfig,
    slot: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<usize>,
) -> Result<Layout> {
    let (d, dh) = (cfg.d_model, cfg.d_head());
    let ent = cfg.entity_mode.enabled();
    let embed = slot("embed".into(), vec![cfg.vocab_size, d], Init::Uniform((3.0 / d as f64).sqrt()))?;

    let block = |p: &str, slot: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<usize>| -> Result<Block> {
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let n = |w: &str| format!("{p}.h{h}.{w}");
            heads.push(match cfg.backbone {
                Backbone::Vanilla => HeadIdx::Vanilla {
                    w_q: slot(n("w_q"), vec![dh, d], Init::Xavier)?,
                    w_k: slot(n("w_k"), vec![dh, d], Init::Xavier)?,
                    w_v: slot(n("w_v"), vec![dh, d], Init::Xavier)?,
                },
                Backbone::Xl => HeadIdx::Xl {
                    w_q: slot(n("w_q"), vec![dh, d], Init::Xavier)?,
                    w_ke: slot(n("w_ke"), vec![dh, d], Init::Xavier)?,
                    w_kr: slot(n("w_kr"), vec![dh, d], Init::Xavier)?,
                    w_v: slot(n("w_v"), vec![dh, d], Init::Xavier)?,
                    u: slot(n("u"), vec![dh], Init::Uniform(1.0 / (dh as f64).sqrt()))?,
                    v: slot(n("v"), vec![dh], Init::Uniform(1.0 / (dh as f64).sqrt()))?,
                },
            });
        }
        Ok(Block {
            heads,
            w_o: slot(format!("{p}.w_o"), vec![d, d], Init::Xavier)?,
            ln_g: slot(format!("{p}.ln.g"), vec![d], Init::Ones)?,
            ln_b: slot(format!("{p}.ln.b"), vec![d], Init::Zeros)?,
        })
    };
    let ffn = |p: &str, slot: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<usize>| -> Result<Ffn> {
        Ok(Ffn {
            w1: slot(format!("{p}.w1"), vec![cfg.d_ff, d], Init::Xavier)?,
            b1: slot(format!("{p}.b1"), vec![cfg.d_ff], Init::Zeros)?,
            w2: slot(format!("{p}.w2"), vec![d, cfg.d_ff], Init::Xavier)?,
            b2: slot(format!("{p}.b2"), vec![d], Init::Zeros)?,
            ln_g: slot(format!("{p}.ln.g"), vec![d], Init::Ones)?,
            ln_b: slot(format!("{p}.ln.b"), vec![d], Init::Zeros)?,
        })
    };
    let conv = |p: &str, slot: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<usize>| -> Result<Vec<(usize, usize)>> {
        if !ent {
            return Ok(Vec::new());
        }
        (0..cfg.conversion_layers)
            .map(|k| {
                let fan_in = if k == 0 { cfg.d_ent } else { d };
                Ok((
                    slot(format!("{p}.{k}.w"), vec![d, fan_in], Init::Xavier)?,
                    slot(format!("{p}.{k}.b"), vec![d], Init::Zeros)?,
                ))
            })
            .collect()
    };

    let enc_conv = conv("enc_conv", slot)?;
    let dec_conv = conv("dec_conv", slot)?;
    let mut enc = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = format!("enc.{l}");
        enc.push(EncLayer {
            self1: block(&format!("{p}.self1"), slot)?,
            ent: if ent { Some(block(&format!("{p}.ent"), slot)?) } else { None },
            self2: block(&format!("{p}.self2"), slot)?,
            cross_ent: if ent { Some(block(&format!("{p}.cross_ent"), slot)?) } else { None },
            ffn: ffn(&format!("{p}.ffn"), slot)?,
        });
    }
    let mut dec = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = format!("dec.{l}");
        dec.push(DecLayer {
            self1: block(&format!("{p}.self1"), slot)?,
            ent: if ent { Some(block(&format!("{p}.ent"), slot)?) } else { None },
            cross: block(&format!("{p}.cross"), slot)?,
            self2: block(&format!("{p}.self2"), slot)?,
            ffn: ffn(&format!("{p}.ffn"), slot)?,
        });
    }
    Ok(Layout {
        embed,
        entity_table: None,
        enc_conv,
        dec_conv,
        enc,
        dec,
    })
}

fn init_tensor<S: Scalar>(shape: Vec<usize>, init: Init, rng: &mut Rng) -> Tensor<S> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::filled(shape, S::one()),
        Init::Uniform(a) => Tensor::uniform(shape, -a, a, rng),
        Init::Xavier => {
            let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            Tensor::uniform(shape, -a, a, rng)
        }
    }
}

/// Frozen random entity table: TransE-style uniform draw, rows normalized.
pub fn random_entity_table<S: Scalar>(count: usize, d_ent: usize, seed: u64) -> Tensor<S> {
    let mut rng = Rng::new(seed);
    let bound = 6.0 / (d_ent as f64).sqrt();
    let mut t: Tensor<S> = Tensor::uniform(vec![count, d_ent], -bound, bound, &mut rng);
    if d_ent > 0 {
        for row in t.data_mut().chunks_mut(d_ent) {
            let n = row.iter().map(|&x| x * x).sum::<S>().sqrt();
            if n > S::zero() {
                row.iter_mut().for_each(|x| *x = *x / n);
            }
        }
    }
    t
}

/// An entity mention fed to the encoder: table row and global token position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct EntityRef {
    pub entity_id: usize,
    pub pos: usize,
}

/// One article-summary pair as ids. `tgt_in = [BOS, y…]`, `tgt_out = [y…, EOS]`,
/// and `dec_entities[p]` lists the spans linked on `y[..p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub src: Vec<usize>,
    pub src_entities: Vec<EntityRef>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub dec_entities: Vec<Vec<EntitySpan>>,
}

/// Per-layer cached states of the two token self-attention sublayers.
#[derive(Clone, Debug)]
pub struct LayerMemory<S> {
    pub self1: SegmentMemory<S>,
    pub self2: SegmentMemory<S>,
}

#[derive(Clone, Debug)]
pub struct EncoderMemory<S> {
    pub layers: Vec<LayerMemory<S>>,
}

impl<S: Scalar> EncoderMemory<S> {
    pub fn empty(n_layers: usize, d_model: usize) -> Self {
        EncoderMemory {
            layers: (0..n_layers)
                .map(|_| LayerMemory {
                    self1: SegmentMemory::empty(d_model),
                    self2: SegmentMemory::empty(d_model),
                })
                .collect(),
        }
    }
}

/// Incremental decoder state: generated tokens (without BOS), per-layer key
/// caches and the logits for the next token.
#[derive(Clone, Debug)]
pub struct DecodeState<S> {
    pub tokens: Vec<usize>,
    cache: Vec<(Tensor<S>, Tensor<S>)>,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Summarizer<S> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore<S>,
    layout: Layout,
    abs_pe: AbsolutePositionalEncoding<S>,
    rel_pe: RelativePositionalEncoding<S>,
}

impl<S: Scalar> Summarizer<S> {
    /// Fresh model. `entity_table` is required unless entities are off.
    pub fn new(mut config: ModelConfig, vocab: Vocab, entity_table: Option<Tensor<S>>, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        let mut layout = build_layout(&config, &mut |name, shape, init| {
            params.add(name, init_tensor(shape, init, &mut rng), true)
        })?;
        Self::attach_entities(&config, &mut params, &mut layout, entity_table)?;
        Self::assemble(config, vocab, params, layout)
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_params(config: ModelConfig, vocab: Vocab, params: ParamStore<S>) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "vocab_size {} but {} vocabulary entries",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut layout = build_layout(&config, &mut |name, shape, _| {
            let i = params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if params.entry(i).value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    params.entry(i).value.shape()
                )));
            }
            Ok(i)
        })?;
        layout.entity_table = params.find("entity_table");
        let expected = params.len() - layout.entity_table.is_some() as usize;
        let mut names = BTreeSet::new();
        build_layout(&config, &mut |name, _, _| {
            names.insert(name);
            Ok(0)
        })?;
        if names.len() != expected {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        if config.entity_mode.enabled() {
            let i = layout
                .entity_table
                .ok_or_else(|| Error::Checkpoint("entity table missing".into()))?;
            if params.entry(i).trainable || params.entry(i).value.cols() != config.d_ent {
                return Err(Error::Checkpoint("entity table must be frozen with d_ent columns".into()));
            }
        }
        Self::assemble(config, vocab, params, layout)
    }

    fn attach_entities(
        config: &ModelConfig,
        params: &mut ParamStore<S>,
        layout: &mut Layout,
        table: Option<Tensor<S>>,
    ) -> Result<()> {
        match (config.entity_mode.enabled(), table) {
            (false, _) => Ok(()),
            (true, None) => Err(Error::config("entity mode needs an entity table")),
            (true, Some(t)) => {
                if t.shape().len() != 2 || t.cols() != config.d_ent {
                    return Err(Error::config(format!(
                        "entity table shape {:?} does not match d_ent = {}",
                        t.shape(),
                        config.d_ent
                    )));
                }
                layout.entity_table = Some(params.add("entity_table", t, false)?);
                Ok(())
            }
        }
    }

    fn assemble(config: ModelConfig, vocab: Vocab, params: ParamStore<S>, layout: Layout) -> Result<Self> {
        config.validate()?;
        Ok(Summarizer {
            abs_pe: AbsolutePositionalEncoding::new(config.l_max, config.d_model),
            rel_pe: RelativePositionalEncoding::new(config.l_max, config.d_model),
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.layout
            .entity_table
            .map_or(0, |i| self.params.entry(i).value.rows())
    }

    pub fn entity_table(&self) -> Option<&Tensor<S>> {
        self.layout.entity_table.map(|i| &self.params.entry(i).value)
    }

    /// Index of the token embedding table in the parameter store.
    pub fn embed_index(&self) -> usize {
        self.layout.embed
    }

    /// Number of attention sublayers per encoder and per decoder layer.
    pub fn sublayer_counts(&self) -> (usize, usize) {
        let enc = &self.layout.enc[0];
        let dec = &self.layout.dec[0];
        (
            2 + enc.ent.is_some() as usize + enc.cross_ent.is_some() as usize,
            3 + dec.ent.is_some() as usize,
        )
    }

    /// Truncates and links one pair into ids.
    pub fn prepare(
        &self,
        article: &LinkedDocument,
        summary: &[String],
        gazetteer: Option<&Gazetteer>,
        max_src: usize,
        max_tgt: usize,
        entity_min_tokens: usize,
    ) -> Result<Example> {
        if summary.is_empty() {
            return Err(Error::Invalid("empty summary".into()));
        }
        let (src, src_entities) = self.prepare_source(article, max_src)?;
        let y = &summary[..summary.len().min(max_tgt)];
        let ids = self.vocab.encode(y);
        let mut tgt_in = vec![BOS];
        tgt_in.extend_from_slice(&ids);
        let mut tgt_out = ids;
        tgt_out.push(EOS);
        let dec_entities = (0..tgt_in.len())
            .map(|p| self.decoder_spans(&y[..p], gazetteer, entity_min_tokens))
            .collect();
        Ok(Example {
            src,
            src_entities,
            tgt_in,
            tgt_out,
            dec_entities,
        })
    }

    pub fn prepare_source(&self, article: &LinkedDocument, max_src: usize) -> Result<(Vec<usize>, Vec<EntityRef>)> {
        let n = article.tokens.len().min(max_src);
        if n == 0 {
            return Err(Error::Invalid("empty article".into()));
        }
        let src = self.vocab.encode(&article.tokens[..n]);
        let mut refs = Vec::new();
        if self.config.entity_mode.enabled() {
            let count = self.entity_count();
            for s in article.spans.iter().filter(|s| s.end <= n) {
                if s.entity_id >= count {
                    return Err(Error::Invalid(format!(
                        "entity id {} outside the {count}-row entity table",
                        s.entity_id
                    )));
                }
                refs.push(EntityRef {
                    entity_id: s.entity_id,
                    pos: s.start,
                });
            }
        }
        Ok((src, refs))
    }

    fn decoder_spans<T: AsRef<str>>(&self, prefix: &[T], gazetteer: Option<&Gazetteer>, min_tokens: usize) -> Vec<EntitySpan> {
        match gazetteer {
            Some(g) if self.config.entity_mode.enabled() => {
                let count = self.entity_count();
                g.link_prefix(prefix, min_tokens)
                    .into_iter()
                    .filter(|s| s.entity_id < count)
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>, grad: bool) -> Vec<Var> {
        self.params.bind(tape, grad)
    }

    fn pass<'a>(&'a self, tape: &'a mut Tape<S>, vars: &'a [Var], drop: Option<&'a mut Rng>) -> Result<Pass<'a, S>> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(Pass {
            m: self,
            tape,
            vars,
            drop: if self.config.dropout > 0.0 { drop } else { None },
        })
    }

    /// Entity Conversion Learner: affine layers with ReLU between.
    pub fn entity_conversion(&self, tape: &mut Tape<S>, vars: &[Var], entities: Var, encoder: bool) -> Result<Var> {
        self.pass(tape, vars, None)?.convert(entities, encoder)
    }

    /// Token embeddings `E[x]·sqrt(d)`, plus `U[pos]` on the vanilla backbone.
    pub fn embed_tokens(&self, tape: &mut Tape<S>, vars: &[Var], ids: &[usize], first_pos: usize) -> Result<Var> {
        self.pass(tape, vars, None)?.embed(ids, first_pos)
    }

    /// One encoder segment starting at global position `start`. `entities`
    /// are the mentions whose span starts inside the segment.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_segment(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        tokens: &[usize],
        start: usize,
        entities: &[EntityRef],
        memory: &EncoderMemory<S>,
        drop: Option<&mut Rng>,
    ) -> Result<(Var, EncoderMemory<S>)> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty token segment".into()));
        }
        let mut p = self.pass(tape, vars, drop)?;
        let h0 = p.embed(tokens, start)?;
        let h0 = p.dropout(h0)?;
        let ents = p.encoder_entities(entities)?;
        p.encode_hidden(h0, start, ents, memory)
    }

    /// Same as [`Self::encode_segment`] from an already embedded input `h0`.
    pub fn encode_hidden(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        h0: Var,
        start: usize,
        entities: &[EntityRef],
        memory: &EncoderMemory<S>,
    ) -> Result<(Var, EncoderMemory<S>)> {
        let mut p = self.pass(tape, vars, None)?;
        let ents = p.encoder_entities(entities)?;
        p.encode_hidden(h0, start, ents, memory)
    }

    /// Whole article. XL: segment by segment with recurrence memory. Vanilla:
    /// one segment, no memory. Returns all final-layer token states.
    pub fn encode(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        src: &[usize],
        entities: &[EntityRef],
        mut drop: Option<&mut Rng>,
    ) -> Result<Var> {
        if src.is_empty() {
            return Err(Error::Invalid("empty article".into()));
        }
        let seg = match self.config.backbone {
            Backbone::Vanilla => src.len(),
            Backbone::Xl => self.config.segment_len,
        };
        let mut memory = EncoderMemory::empty(self.config.n_layers, self.config.d_model);
        let mut outputs = Vec::new();
        for start in (0..src.len()).step_by(seg) {
            let end = (start + seg).min(src.len());
            let ents: Vec<EntityRef> = entities
                .iter()
                .copied()
                .filter(|e| (start..end).contains(&e.pos))
                .collect();
            let (h, mem) =
                self.encode_segment(tape, vars, &src[start..end], start, &ents, &memory, drop.as_deref_mut())?;
            outputs.push(h);
            memory = mem;
        }
        if outputs.len() == 1 {
            Ok(outputs[0])
        } else {
            tape.concat_rows(&outputs)
        }
    }

    /// All XL segments in one pass without memory, each token seeing keys from
    /// `[seg_start − memory_len, seg_end)` and only its own segment's entities.
    /// Agrees with [`Self::encode`] whenever the recurrence keeps whole
    /// segments, which makes it the reference for the cached path.
    pub fn encode_joint(&self, tape: &mut Tape<S>, vars: &[Var], src: &[usize], entities: &[EntityRef]) -> Result<Var> {
        if src.is_empty() {
            return Err(Error::Invalid("empty article".into()));
        }
        let seg = self.config.segment_len;
        let mem = self.config.memory_len;
        let n = src.len();
        let seg_of = |p: usize| p / seg;
        let tok_mask: Vec<bool> = (0..n)
            .flat_map(|q| {
                let lo = (seg_of(q) * seg).saturating_sub(mem);
                let hi = ((seg_of(q) + 1) * seg).min(n);
                (0..n).map(move |k| k >= lo && k < hi)
            })
            .collect();
        let ent_mask: Vec<bool> = entities
            .iter()
            .flat_map(|a| entities.iter().map(move |b| seg_of(a.pos) == seg_of(b.pos)))
            .collect();
        let cross_mask: Vec<bool> = (0..n)
            .flat_map(|q| entities.iter().map(move |e| seg_of(e.pos) == seg_of(q)))
            .collect();
        let mut p = self.pass(tape, vars, None)?;
        let h0 = p.embed(src, 0)?;
        let ents = p.encoder_entities(entities)?;
        let masks = EncMasks {
            tok: Some(&tok_mask),
            ent: Some(&ent_mask),
            cross: Some(&cross_mask),
        };
        let empty = EncoderMemory::empty(self.config.n_layers, self.config.d_model);
        let (h, _) = p.encode_layers(h0, 0, ents, &empty, &masks)?;
        Ok(h)
    }

    /// Teacher-forced decoder over `tgt_in` (positions `0..t`); returns
    /// `[t × vocab]` logits.
    pub fn decode_forward(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        enc: Var,
        tgt_in: &[usize],
        dec_entities: &[Vec<EntitySpan>],
        drop: Option<&mut Rng>,
    ) -> Result<Var> {
        if tgt_in.is_empty() {
            return Err(Error::Invalid("decoder needs at least one position".into()));
        }
        if dec_entities.len() != tgt_in.len() {
            return Err(Error::shape(format!(
                "{} entity lists for {} decoder positions",
                dec_entities.len(),
                tgt_in.len()
            )));
        }
        let mut p = self.pass(tape, vars, drop)?;
        let x = p.embed(tgt_in, 0)?;
        let x = p.dropout(x)?;
        let positions: Vec<usize> = (0..tgt_in.len()).collect();
        let empty: Vec<(Tensor<S>, Tensor<S>)> = Vec::new();
        let (h, _) = p.decode_layers(x, &positions, &empty, dec_entities, enc)?;
        let e = p.v(self.layout.embed);
        p.tape.matmul_nt(h, e)
    }

    /// Mean teacher-forced cross-entropy of `ex` on an existing tape.
    pub fn loss_on_tape(&self, tape: &mut Tape<S>, vars: &[Var], ex: &Example, mut drop: Option<&mut Rng>) -> Result<Var> {
        let enc = self.encode(tape, vars, &ex.src, &ex.src_entities, drop.as_deref_mut())?;
        let logits = self.decode_forward(tape, vars, enc, &ex.tgt_in, &ex.dec_entities, drop)?;
        tape.cross_entropy(logits, &ex.tgt_out)
    }

    pub fn model_loss(&self, ex: &Example, drop: Option<&mut Rng>) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let l = self.loss_on_tape(&mut tape, &vars, ex, drop)?;
        Ok(tape.value(l).item().as_f64())
    }

    /// Loss and gradients of every parameter (`None` for frozen ones).
    pub fn loss_and_grads(&self, ex: &Example, drop: Option<&mut Rng>) -> Result<(f64, Vec<Option<Vec<S>>>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true);
        let l = self.loss_on_tape(&mut tape, &vars, ex, drop)?;
        tape.backward(l)?;
        let grads = vars
            .iter()
            .zip(self.params.entries())
            .map(|(&v, p)| if p.trainable { tape.grad(v).map(<[S]>::to_vec) } else { None })
            .collect();
        Ok((tape.value(l).item().as_f64(), grads))
    }

    /// Teacher-forced logits of `ex` as plain numbers, row per position.
    pub fn teacher_forced_logits(&self, ex: &Example) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &vars, &ex.src, &ex.src_entities, None)?;
        let logits = self.decode_forward(&mut tape, &vars, enc, &ex.tgt_in, &ex.dec_entities, None)?;
        let t = tape.value(logits);
        Ok((0..t.rows())
            .map(|r| t.row(r).iter().map(|x| x.as_f64()).collect())
            .collect())
    }

    /// Final encoder states of an article, detached.
    pub fn encode_article(&self, src: &[usize], entities: &[EntityRef]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let h = self.encode(&mut tape, &vars, src, entities, None)?;
        Ok(tape.value(h).clone())
    }

    /// Feeds BOS at position 0.
    pub fn begin(&self, enc: &Tensor<S>, gazetteer: Option<&Gazetteer>, min_tokens: usize) -> Result<DecodeState<S>> {
        let empty = DecodeState {
            tokens: Vec::new(),
            cache: (0..self.config.n_layers)
                .map(|_| {
                    let z = Tensor::zeros(vec![0, self.config.d_model]);
                    (z.clone(), z)
                })
                .collect(),
            logits: Vec::new(),
        };
        self.feed(&empty, BOS, enc, gazetteer, min_tokens)
    }

    /// Appends `token` to the generated prefix and computes the next logits,
    /// reusing cached keys of earlier positions.
    pub fn advance(
        &self,
        state: &DecodeState<S>,
        token: usize,
        enc: &Tensor<S>,
        gazetteer: Option<&Gazetteer>,
        min_tokens: usize,
    ) -> Result<DecodeState<S>> {
        if token >= self.vocab.len() {
            return Err(Error::Invalid(format!("token id {token} outside the vocabulary")));
        }
        let mut next = state.clone();
        next.tokens.push(token);
        self.feed(&next, token, enc, gazetteer, min_tokens)
    }

    fn feed(
        &self,
        state: &DecodeState<S>,
        token: usize,
        enc: &Tensor<S>,
        gazetteer: Option<&Gazetteer>,
        min_tokens: usize,
    ) -> Result<DecodeState<S>> {
        let pos = state.tokens.len();
        let words = self.vocab.decode(&state.tokens);
        let spans = self.decoder_spans(&words, gazetteer, min_tokens);
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mut p = self.pass(&mut tape, &vars, None)?;
        let enc_var = p.tape.constant(enc.clone());
        let x = p.embed(&[token], pos)?;
        let (h, rows) = p.decode_layers(x, &[pos], &state.cache, &[spans], enc_var)?;
        let e = p.v(self.layout.embed);
        let logits = p.tape.matmul_nt(h, e)?;
        let logits: Vec<f64> = tape.value(logits).data().iter().map(|x| x.as_f64()).collect();
        let cache = state
            .cache
            .iter()
            .zip(rows)
            .map(|((c1, c4), (r1, r4))| Ok((append_rows(c1, tape.value(r1))?, append_rows(c4, tape.value(r4))?)))
            .collect::<Result<_>>()?;
        Ok(DecodeState {
            tokens: state.tokens.clone(),
            cache,
            logits,
        })
    }
}

fn append_rows<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::matrix(a.rows() + b.rows(), b.cols(), data)
}

#[derive(Default)]
struct EncMasks<'a> {
    tok: Option<&'a [bool]>,
    ent: Option<&'a [bool]>,
    cross: Option<&'a [bool]>,
}

/// Encoder entity inputs: states plus global positions.
struct EntInput {
    states: Var,
    pos: Vec<i64>,
}

struct Pass<'a, S: Scalar> {
    m: &'a Summarizer<S>,
    tape: &'a mut Tape<S>,
    vars: &'a [Var],
    drop: Option<&'a mut Rng>,
}

impl<S: Scalar> Pass<'_, S> {
    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.drop.as_deref_mut() {
            Some(rng) => {
                let mask = dropout_mask(self.tape.shape(x).to_vec(), self.m.config.dropout, rng);
                let mask = self.tape.constant(mask);
                self.tape.mul(x, mask)
            }
            None => Ok(x),
        }
    }

    fn abs_rows(&mut self, positions: &[usize]) -> Result<Var> {
        let t = self.m.abs_pe.rows(positions)?;
        Ok(self.tape.constant(t))
    }

    fn embed(&mut self, ids: &[usize], first_pos: usize) -> Result<Var> {
        let e = self.v(self.m.layout.embed);
        let rows = self.tape.gather_rows(e, ids)?;
        let scale = S::from_usize_lossy(self.m.config.d_model).sqrt();
        let x = self.tape.scale(rows, scale);
        match self.m.config.backbone {
            Backbone::Xl => Ok(x),
            Backbone::Vanilla => {
                let pos: Vec<usize> = (first_pos..first_pos + ids.len()).collect();
                let u = self.abs_rows(&pos)?;
                self.tape.add(x, u)
            }
        }
    }

    fn convert(&mut self, mut x: Var, encoder: bool) -> Result<Var> {
        let layers = if encoder {
            &self.m.layout.enc_conv
        } else {
            &self.m.layout.dec_conv
        };
        if layers.is_empty() {
            return Err(Error::config("entity conversion with entities off"));
        }
        for (k, &(w, b)) in layers.iter().enumerate() {
            let y = self.tape.matmul_nt(x, self.vars[w])?;
            x = self.tape.add_row(y, self.vars[b])?;
            if k + 1 < layers.len() {
                x = self.tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Converted entity rows with their positional term, or `None` if there
    /// is nothing to attend to.
    fn entity_states(&mut self, ids: &[usize], pos: &[usize], encoder: bool) -> Result<Option<EntInput>> {
        let Some(table) = self.m.layout.entity_table else {
            return Ok(None);
        };
        if ids.is_empty() {
            return Ok(None);
        }
        let rows = self.tape.gather_rows(self.vars[table], ids)?;
        let mut x = self.convert(rows, encoder)?;
        if self.m.config.backbone == Backbone::Vanilla {
            let u = self.abs_rows(pos)?;
            x = self.tape.add(x, u)?;
        }
        let states = self.dropout(x)?;
        Ok(Some(EntInput {
            states,
            pos: pos.iter().map(|&p| p as i64).collect(),
        }))
    }

    fn encoder_entities(&mut self, entities: &[EntityRef]) -> Result<Option<EntInput>> {
        if !self.m.config.entity_mode.enabled() {
            return Ok(None);
        }
        let ids: Vec<usize> = entities.iter().map(|e| e.entity_id).collect();
        let pos: Vec<usize> = entities.iter().map(|e| e.pos).collect();
        self.entity_states(&ids, &pos, true)
    }

    fn heads(&self, b: &Block) -> Vec<Head> {
        b.heads
            .iter()
            .map(|h| match *h {
                HeadIdx::Vanilla { w_q, w_k, w_v } => Head::Vanilla(VanillaHead {
                    w_q: self.vars[w_q],
                    w_k: self.vars[w_k],
                    w_v: self.vars[w_v],
                }),
                HeadIdx::Xl { w_q, w_ke, w_kr, w_v, u, v } => Head::Xl(XlHead {
                    w_q: self.vars[w_q],
                    w_ke: self.vars[w_ke],
                    w_kr: self.vars[w_kr],
                    w_v: self.vars[w_v],
                    u: self.vars[u],
                    v: self.vars[v],
                }),
            })
            .collect()
    }

    fn residual_norm(&mut self, x: Var, out: Var, g: usize, b: usize) -> Result<Var> {
        let out = self.dropout(out)?;
        let s = self.tape.add(x, out)?;
        self.tape.layer_norm(s, self.vars[g], self.vars[b], S::lit(LN_EPS))
    }

    /// Attention sublayer with residual and norm. Query rows with no visible
    /// key (and every row when there are no keys) pass through unchanged.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &mut self,
        b: &Block,
        x: Var,
        kv: Var,
        allowed: Option<&[bool]>,
        q_pos: &[i64],
        k_pos: &[i64],
        policy: OffsetPolicy,
    ) -> Result<Var> {
        let n = self.tape.value(x).rows();
        let k = self.tape.value(kv).rows();
        if k == 0 || n == 0 {
            return Ok(x);
        }
        let live: Vec<usize> = match allowed {
            None => (0..n).collect(),
            Some(m) => (0..n).filter(|&i| m[i * k..(i + 1) * k].iter().any(|&a| a)).collect(),
        };
        if live.is_empty() {
            return Ok(x);
        }
        let heads = self.heads(b);
        if live.len() == n {
            let out = self.raw_attention(&heads, b.w_o, x, kv, allowed, q_pos, k_pos, policy)?;
            return self.residual_norm(x, out, b.ln_g, b.ln_b);
        }
        let sub_mask: Vec<bool> = live
            .iter()
            .flat_map(|&i| allowed.expect("partial rows imply a mask")[i * k..(i + 1) * k].iter().copied())
            .collect();
        let sub_pos: Vec<i64> = live.iter().map(|&i| q_pos[i]).collect();
        let xs = self.tape.gather_rows(x, &live)?;
        let out = self.raw_attention(&heads, b.w_o, xs, kv, Some(&sub_mask), &sub_pos, k_pos, policy)?;
        let ys = self.residual_norm(xs, out, b.ln_g, b.ln_b)?;
        let merged = self.tape.concat_rows(&[x, ys])?;
        let mut idx: Vec<usize> = (0..n).collect();
        for (r, &i) in live.iter().enumerate() {
            idx[i] = n + r;
        }
        self.tape.gather_rows(merged, &idx)
    }

    #[allow(clippy::too_many_arguments)]
    fn raw_attention(
        &mut self,
        heads: &[Head],
        w_o: usize,
        x: Var,
        kv: Var,
        allowed: Option<&[bool]>,
        q_pos: &[i64],
        k_pos: &[i64],
        policy: OffsetPolicy,
    ) -> Result<Var> {
        let scoring = match self.m.config.backbone {
            Backbone::Vanilla => Scoring::Content,
            Backbone::Xl => Scoring::Relative(RelativeFrame {
                rel: &self.m.rel_pe,
                q_pos,
                k_pos,
                policy,
            }),
        };
        multi_head_attention(self.tape, x, kv, allowed, heads, self.vars[w_o], &scoring)
    }

    fn ffn(&mut self, f: &Ffn, x: Var) -> Result<Var> {
        let a = self.tape.matmul_nt(x, self.vars[f.w1])?;
        let a = self.tape.add_row(a, self.vars[f.b1])?;
        let a = self.tape.relu(a);
        let o = self.tape.matmul_nt(a, self.vars[f.w2])?;
        let o = self.tape.add_row(o, self.vars[f.b2])?;
        self.residual_norm(x, o, f.ln_g, f.ln_b)
    }

    fn encode_hidden(
        &mut self,
        h0: Var,
        start: usize,
        ents: Option<EntInput>,
        memory: &EncoderMemory<S>,
    ) -> Result<(Var, EncoderMemory<S>)> {
        self.encode_layers(h0, start, ents, memory, &EncMasks::default())
    }

    fn encode_layers(
        &mut self,
        mut h: Var,
        start: usize,
        mut ents: Option<EntInput>,
        memory: &EncoderMemory<S>,
        masks: &EncMasks<'_>,
    ) -> Result<(Var, EncoderMemory<S>)> {
        let cfg = &self.m.config;
        if memory.layers.len() != cfg.n_layers {
            return Err(Error::shape("encoder memory has the wrong number of layers"));
        }
        let n = self.tape.value(h).rows();
        if n == 0 {
            return Err(Error::Invalid("empty token segment".into()));
        }
        let pos: Vec<i64> = (start..start + n).map(|p| p as i64).collect();
        let mut new_layers = Vec::with_capacity(cfg.n_layers);
        for (layer, mem) in self.m.layout.enc.iter().zip(&memory.layers) {
            let m1 = mem.self1.len() as i64;
            let kpos1: Vec<i64> = (pos[0] - m1..pos[0] + n as i64).collect();
            let kv = concat_memory(self.tape, &mem.self1, h)?;
            let h1 = self.attend(&layer.self1, h, kv, masks.tok, &pos, &kpos1, OffsetPolicy::Strict)?;

            if let (Some(block), Some(e)) = (&layer.ent, ents.as_mut()) {
                e.states = self.attend(block, e.states, e.states, masks.ent, &e.pos, &e.pos, OffsetPolicy::Clip)?;
            }

            let m2 = mem.self2.len() as i64;
            let kpos2: Vec<i64> = (pos[0] - m2..pos[0] + n as i64).collect();
            let kv2 = concat_memory(self.tape, &mem.self2, h1)?;
            let h2 = self.attend(&layer.self2, h1, kv2, masks.tok, &pos, &kpos2, OffsetPolicy::Strict)?;

            let h3 = match (&layer.cross_ent, ents.as_ref()) {
                (Some(block), Some(e)) => {
                    self.attend(block, h2, e.states, masks.cross, &pos, &e.pos, OffsetPolicy::Clip)?
                }
                _ => h2,
            };
            let h4 = self.ffn(&layer.ffn, h3)?;

            new_layers.push(LayerMemory {
                self1: update_memory(&mem.self1, self.tape.value(h), cfg.memory_len)?,
                self2: update_memory(&mem.self2, self.tape.value(h1), cfg.memory_len)?,
            });
            h = h4;
        }
        Ok((h, EncoderMemory { layers: new_layers }))
    }

    /// Decoder stack for query rows `x` at `positions`, with `cache[l]`
    /// holding the keys of earlier positions. Returns the final states and,
    /// per layer, the new rows to append to each cache.
    fn decode_layers(
        &mut self,
        mut x: Var,
        positions: &[usize],
        cache: &[(Tensor<S>, Tensor<S>)],
        entity_lists: &[Vec<EntitySpan>],
        enc: Var,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let n = positions.len();
        let q_pos: Vec<i64> = positions.iter().map(|&p| p as i64).collect();
        let enc_pos: Vec<i64> = (0..self.tape.value(enc).rows() as i64).collect();
        let cached = cache.first().map_or(0, |c| c.0.rows());
        let k_pos: Vec<i64> = (0..(cached + n) as i64).collect();
        let causal: Vec<bool> = q_pos
            .iter()
            .flat_map(|&q| k_pos.iter().map(move |&k| k <= q))
            .collect();
        let causal = if causal.iter().all(|&a| a) { None } else { Some(causal) };

        // Union of every row's spans as keys, with a per-row visibility mask.
        let union: Vec<EntitySpan> = entity_lists
            .iter()
            .flatten()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let ent_mask: Vec<bool> = entity_lists
            .iter()
            .flat_map(|list| union.iter().map(move |s| list.contains(s)))
            .collect();
        let ents = if self.m.config.entity_mode.enabled() && !union.is_empty() {
            let ids: Vec<usize> = union.iter().map(|s| s.entity_id).collect();
            let pos: Vec<usize> = union.iter().map(|s| s.start + 1).collect();
            self.entity_states(&ids, &pos, false)?
        } else {
            None
        };

        let mut new_rows = Vec::with_capacity(self.m.layout.dec.len());
        for (l, layer) in self.m.layout.dec.iter().enumerate() {
            let keys1 = self.with_cache(cache.get(l).map(|c| &c.0), x)?;
            let h1 = self.attend(&layer.self1, x, keys1, causal.as_deref(), &q_pos, &k_pos, OffsetPolicy::Clip)?;
            let h2 = match (&layer.ent, ents.as_ref()) {
                (Some(block), Some(e)) => {
                    self.attend(block, h1, e.states, Some(&ent_mask), &q_pos, &e.pos, OffsetPolicy::Clip)?
                }
                _ => h1,
            };
            let h3 = self.attend(&layer.cross, h2, enc, None, &q_pos, &enc_pos, OffsetPolicy::Clip)?;
            let keys4 = self.with_cache(cache.get(l).map(|c| &c.1), h3)?;
            let h4 = self.attend(&layer.self2, h3, keys4, causal.as_deref(), &q_pos, &k_pos, OffsetPolicy::Clip)?;
            let h5 = self.ffn(&layer.ffn, h4)?;
            new_rows.push((x, h3));
            x = h5;
        }
        Ok((x, new_rows))
    }

    fn with_cache(&mut self, cache: Option<&Tensor<S>>, x: Var) -> Result<Var> {
        match cache {
            Some(c) if c.rows() > 0 => {
                let c = self.tape.constant(c.clone());
                self.tape.concat_rows(&[c, x])
            }
            _ => Ok(x),
        }
    }
}
