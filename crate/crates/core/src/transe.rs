//! TransE knowledge-graph embeddings: margin ranking against corrupted triples
//! with entity vectors projected back onto the unit sphere after every step.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub h: usize,
    pub l: usize,
    pub t: usize,
}

impl Triple {
    pub fn new(h: usize, l: usize, t: usize) -> Self {
        Triple { h, l, t }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeGraph {
    pub entity_count: usize,
    pub relation_count: usize,
    pub triples: Vec<Triple>,
    pub entity_names: BTreeMap<usize, String>,
}

impl KnowledgeGraph {
    pub fn new(entity_count: usize, relation_count: usize, triples: Vec<Triple>) -> Result<Self> {
        let mut seen = HashSet::new();
        for tr in &triples {
            if tr.h >= entity_count || tr.t >= entity_count {
                return Err(Error::Invalid(format!(
                    "triple {tr:?} references an entity outside 0..{entity_count}"
                )));
            }
            if tr.l >= relation_count {
                return Err(Error::Invalid(format!(
                    "triple {tr:?} references a relation outside 0..{relation_count}"
                )));
            }
            if !seen.insert(*tr) {
                return Err(Error::Invalid(format!("duplicate triple {tr:?}")));
            }
        }
        Ok(KnowledgeGraph {
            entity_count,
            relation_count,
            triples,
            entity_names: BTreeMap::new(),
        })
    }

    pub fn with_names(mut self, names: BTreeMap<usize, String>) -> Result<Self> {
        if let Some(&id) = names.keys().find(|&&id| id >= self.entity_count) {
            return Err(Error::Invalid(format!(
                "name for entity {id} outside 0..{}",
                self.entity_count
            )));
        }
        self.entity_names = names;
        Ok(self)
    }

    /// Triples TSV `head<TAB>relation<TAB>tail`, `#` comments.
    pub fn parse_triples(text: &str, origin: &str) -> Result<Vec<Triple>> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let ids: Vec<&str> = line.split('\t').collect();
            if ids.len() != 3 {
                return Err(Error::parse(origin, n + 1, "expected head<TAB>relation<TAB>tail"));
            }
            let mut parsed = [0usize; 3];
            for (slot, s) in parsed.iter_mut().zip(&ids) {
                *slot = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(origin, n + 1, format!("bad id {s:?}")))?;
            }
            out.push(Triple::new(parsed[0], parsed[1], parsed[2]));
        }
        Ok(out)
    }

    /// Entity-name TSV `entity_id<TAB>canonical_name`.
    pub fn parse_names(text: &str, origin: &str) -> Result<BTreeMap<usize, String>> {
        let mut out = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, name) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(origin, n + 1, "expected entity_id<TAB>name"))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, n + 1, format!("bad id {id:?}")))?;
            if out.insert(id, name.to_string()).is_some() {
                return Err(Error::parse(origin, n + 1, format!("entity {id} named twice")));
            }
        }
        Ok(out)
    }

    /// Loads triples and optional names. Counts are one past the largest id seen
    /// in either file.
    pub fn load(triples_path: &Path, names_path: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(triples_path).map_err(|e| Error::io(triples_path, e))?;
        let triples = Self::parse_triples(&text, &triples_path.display().to_string())?;
        let names = match names_path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse_names(&text, &p.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        let entity_count = triples
            .iter()
            .map(|t| t.h.max(t.t) + 1)
            .chain(names.keys().map(|&k| k + 1))
            .max()
            .unwrap_or(0);
        let relation_count = triples.iter().map(|t| t.l + 1).max().unwrap_or(0);
        KnowledgeGraph::new(entity_count, relation_count, triples)?.with_names(names)
    }

    pub fn triples_tsv(&self) -> String {
        let mut s = String::new();
        for t in &self.triples {
            let _ = writeln!(s, "{}\t{}\t{}", t.h, t.l, t.t);
        }
        s
    }

    pub fn names_tsv(&self) -> String {
        let mut s = String::new();
        for (id, name) in &self.entity_names {
            let _ = writeln!(s, "{id}\t{name}");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransEConfig {
    pub d_ent: usize,
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TransEConfig {
    fn default() -> Self {
        TransEConfig {
            d_ent: 16,
            gamma: 1.0,
            lr: 0.05,
            epochs: 200,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TransEConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::config("gamma must be > 0"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be > 0"));
        }
        if self.d_ent == 0 || self.batch_size == 0 {
            return Err(Error::config("d_ent and batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransEEmbeddings<S> {
    pub entity_vectors: Tensor<S>,
    pub relation_vectors: Tensor<S>,
}

impl<S: Scalar> TransEEmbeddings<S> {
    pub fn d(&self) -> usize {
        self.entity_vectors.cols()
    }

    pub fn entity(&self, id: usize) -> &[S] {
        self.entity_vectors.row(id)
    }

    pub fn relation(&self, id: usize) -> &[S] {
        self.relation_vectors.row(id)
    }

    pub fn distance(&self, tr: Triple) -> S {
        dist(self.entity(tr.h), self.relation(tr.l), self.entity(tr.t))
    }

    /// Largest `|‖e‖ − 1|` over entity vectors.
    pub fn max_norm_error(&self) -> f64 {
        (0..self.entity_vectors.rows())
            .map(|i| (norm(self.entity(i)).as_f64() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn norm<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

fn dist<S: Scalar>(h: &[S], l: &[S], t: &[S]) -> S {
    h.iter()
        .zip(l)
        .zip(t)
        .map(|((&a, &b), &c)| {
            let d = a + b - c;
            d * d
        })
        .sum::<S>()
        .sqrt()
}

/// `‖h + l − t‖₂`.
pub fn dissimilarity<S: Scalar>(h: &[S], l: &[S], t: &[S]) -> Result<S> {
    if h.len() != l.len() || h.len() != t.len() {
        return Err(Error::shape(format!(
            "dissimilarity on vectors of length {}, {}, {}",
            h.len(),
            l.len(),
            t.len()
        )));
    }
    Ok(dist(h, l, t))
}

/// `max(0, γ + d_pos − d_neg)`.
pub fn triple_margin_loss<S: Scalar>(d_pos: S, d_neg: S, gamma: S) -> S {
    (gamma + d_pos - d_neg).max(S::zero())
}

/// Replaces head or tail (fair coin) with a different, uniformly drawn entity.
pub fn corrupt_triple(triple: Triple, kg: &KnowledgeGraph, rng: &mut Rng) -> Result<Triple> {
    let n = kg.entity_count;
    if n < 2 {
        return Err(Error::Invalid(format!(
            "cannot corrupt a triple with {n} entities"
        )));
    }
    let head = rng.bernoulli(0.5);
    let original = if head { triple.h } else { triple.t };
    let replacement = loop {
        let e = rng.below(n);
        if e != original {
            break e;
        }
    };
    Ok(if head {
        Triple { h: replacement, ..triple }
    } else {
        Triple { t: replacement, ..triple }
    })
}

/// Hinge loss of one positive/negative pair under `emb`.
pub fn pair_loss<S: Scalar>(emb: &TransEEmbeddings<S>, pos: Triple, neg: Triple, gamma: S) -> S {
    triple_margin_loss(emb.distance(pos), emb.distance(neg), gamma)
}

/// Dense gradient of [`pair_loss`] with respect to entity and relation tables.
#[derive(Clone, Debug, PartialEq)]
pub struct TransEGrad<S> {
    pub entity: Vec<S>,
    pub relation: Vec<S>,
}

impl<S: Scalar> TransEGrad<S> {
    pub fn zeros(entities: usize, relations: usize, d: usize) -> Self {
        TransEGrad {
            entity: vec![S::zero(); entities * d],
            relation: vec![S::zero(); relations * d],
        }
    }
}

fn unit_residual<S: Scalar>(emb: &TransEEmbeddings<S>, tr: Triple) -> Vec<S> {
    let (h, l, t) = (emb.entity(tr.h), emb.relation(tr.l), emb.entity(tr.t));
    let r: Vec<S> = (0..h.len()).map(|k| h[k] + l[k] - t[k]).collect();
    let n = norm(&r);
    if n == S::zero() {
        r
    } else {
        r.into_iter().map(|x| x / n).collect()
    }
}

fn push_grad<S: Scalar>(g: &mut TransEGrad<S>, d: usize, tr: Triple, dir: &[S], sign: S) {
    for k in 0..d {
        let v = sign * dir[k];
        g.entity[tr.h * d + k] = g.entity[tr.h * d + k] + v;
        g.relation[tr.l * d + k] = g.relation[tr.l * d + k] + v;
        g.entity[tr.t * d + k] = g.entity[tr.t * d + k] - v;
    }
}

/// Adds `∂ pair_loss / ∂ θ` into `g`. Returns the loss. The distance gradient
/// at exactly zero distance is taken as zero.
pub fn accumulate_pair_grad<S: Scalar>(
    emb: &TransEEmbeddings<S>,
    pos: Triple,
    neg: Triple,
    gamma: S,
    g: &mut TransEGrad<S>,
) -> S {
    let loss = pair_loss(emb, pos, neg, gamma);
    if loss > S::zero() {
        let d = emb.d();
        push_grad(g, d, pos, &unit_residual(emb, pos), S::one());
        push_grad(g, d, neg, &unit_residual(emb, neg), -S::one());
    }
    loss
}

fn normalize_rows<S: Scalar>(t: &mut Tensor<S>) {
    let d = t.cols();
    if d == 0 {
        return;
    }
    for row in t.data_mut().chunks_mut(d) {
        let n = norm(row);
        if n > S::zero() {
            row.iter_mut().for_each(|x| *x = *x / n);
        }
    }
}

/// Uniform `[−6/√d, 6/√d]` initialization with unit-norm entities.
pub fn transe_init<S: Scalar>(kg: &KnowledgeGraph, d: usize, rng: &mut Rng) -> TransEEmbeddings<S> {
    let bound = 6.0 / (d as f64).sqrt();
    let mut entity_vectors = Tensor::uniform(vec![kg.entity_count, d], -bound, bound, rng);
    let relation_vectors = Tensor::uniform(vec![kg.relation_count, d], -bound, bound, rng);
    normalize_rows(&mut entity_vectors);
    TransEEmbeddings {
        entity_vectors,
        relation_vectors,
    }
}

#[derive(Clone, Debug)]
pub struct TransERun<S> {
    pub embeddings: TransEEmbeddings<S>,
    /// Summed hinge loss of each epoch, measured before each batch's update.
    pub epoch_losses: Vec<f64>,
    /// Largest entity-norm deviation observed after any step.
    pub max_norm_error: f64,
    pub steps: usize,
}

/// Minibatch SGD on the margin ranking loss, one corrupted triple per positive.
pub fn transe_train<S: Scalar>(kg: &KnowledgeGraph, config: &TransEConfig) -> Result<TransERun<S>> {
    config.validate()?;
    if kg.triples.is_empty() {
        return Err(Error::Invalid("TransE needs at least one triple".into()));
    }
    let mut rng = Rng::new(config.seed);
    let mut emb = transe_init::<S>(kg, config.d_ent, &mut rng);
    let mut run = TransERun {
        epoch_losses: Vec::with_capacity(config.epochs),
        max_norm_error: emb.max_norm_error(),
        steps: 0,
        embeddings: emb.clone(),
    };
    let d = config.d_ent;
    let gamma = S::lit(config.gamma);
    let lr = S::lit(config.lr);
    let mut order: Vec<usize> = (0..kg.triples.len()).collect();
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut g = TransEGrad::zeros(kg.entity_count, kg.relation_count, d);
            for &i in batch {
                let pos = kg.triples[i];
                let neg = corrupt_triple(pos, kg, &mut rng)?;
                epoch_loss += accumulate_pair_grad(&emb, pos, neg, gamma, &mut g).as_f64();
            }
            for (p, gi) in emb.entity_vectors.data_mut().iter_mut().zip(&g.entity) {
                *p = *p - lr * *gi;
            }
            for (p, gi) in emb.relation_vectors.data_mut().iter_mut().zip(&g.relation) {
                *p = *p - lr * *gi;
            }
            normalize_rows(&mut emb.entity_vectors);
            run.max_norm_error = run.max_norm_error.max(emb.max_norm_error());
            run.steps += 1;
        }
        run.epoch_losses.push(epoch_loss);
    }
    run.embeddings = emb;
    Ok(run)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkPrediction {
    pub mean_rank: f64,
    pub hits_at_k: f64,
}

/// Rank of `tr.t` among all entities by `d(h + l, ·)`, ties to the lower id.
pub fn tail_rank<S: Scalar>(emb: &TransEEmbeddings<S>, tr: Triple) -> usize {
    let (h, l) = (emb.entity(tr.h), emb.relation(tr.l));
    let target = dist(h, l, emb.entity(tr.t));
    1 + (0..emb.entity_vectors.rows())
        .filter(|&e| {
            let de = dist(h, l, emb.entity(e));
            de < target || (de == target && e < tr.t)
        })
        .count()
}

/// Raw (unfiltered) tail prediction over the graph's triples.
pub fn link_prediction_eval<S: Scalar>(
    kg: &KnowledgeGraph,
    emb: &TransEEmbeddings<S>,
    k: usize,
) -> LinkPrediction {
    if kg.triples.is_empty() {
        return LinkPrediction {
            mean_rank: 0.0,
            hits_at_k: 0.0,
        };
    }
    let ranks: Vec<usize> = kg.triples.iter().map(|&tr| tail_rank(emb, tr)).collect();
    let n = ranks.len() as f64;
    LinkPrediction {
        mean_rank: ranks.iter().sum::<usize>() as f64 / n,
        hits_at_k: ranks.iter().filter(|&&r| r <= k).count() as f64 / n,
    }
}

/// `#transe d=<d> entities=<n>` header, then `id<TAB>v_0<TAB>…` rows.
pub fn export_entities<S: Scalar>(entity_vectors: &Tensor<S>) -> String {
    let (n, d) = (entity_vectors.rows(), entity_vectors.cols());
    let mut s = format!("#transe d={d} entities={n}\n");
    for i in 0..n {
        s.push_str(&i.to_string());
        for &v in entity_vectors.row(i) {
            let _ = write!(s, "\t{:.16e}", v.as_f64());
        }
        s.push('\n');
    }
    s
}

pub fn import_entities<S: Scalar>(text: &str, origin: &str) -> Result<Tensor<S>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(origin, 1, "empty embedding file"))?;
    let field = |key: &str| -> Result<usize> {
        header
            .split_whitespace()
            .find_map(|w| w.strip_prefix(key))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(origin, 1, format!("header lacks {key}<n>")))
    };
    if !header.starts_with("#transe") {
        return Err(Error::parse(origin, 1, "expected #transe header"));
    }
    let (d, n) = (field("d=")?, field("entities=")?);
    let mut data = vec![S::zero(); n * d];
    let mut filled = vec![false; n];
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let id: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(origin, ln + 1, "bad entity id"))?;
        if id >= n || filled[id] {
            return Err(Error::parse(origin, ln + 1, format!("unexpected entity id {id}")));
        }
        let vals: Vec<f64> = parts
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(origin, ln + 1, "bad float"))?;
        if vals.len() != d {
            return Err(Error::parse(
                origin,
                ln + 1,
                format!("{} values, expected {d}", vals.len()),
            ));
        }
        for (slot, v) in data[id * d..(id + 1) * d].iter_mut().zip(vals) {
            *slot = S::lit(v);
        }
        filled[id] = true;
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        return Err(Error::parse(origin, 0, format!("entity {missing} missing")));
    }
    Tensor::matrix(n, d, data)
}

pub fn load_entities<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    import_entities(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(entities: &[[f64; 2]], relations: &[[f64; 2]]) -> TransEEmbeddings<f64> {
        TransEEmbeddings {
            entity_vectors: Tensor::from_rows(&entities.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
                .unwrap(),
            relation_vectors: Tensor::from_rows(
                &relations.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            )
            .unwrap(),
        }
    }

    #[test]
    fn dissimilarity_examples() {
        assert_eq!(dissimilarity(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dissimilarity(&[0.0; 3], &[0.0; 3], &[0.0; 3]).unwrap(), 0.0);
        assert_eq!(
            dissimilarity(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 1.0]).unwrap(),
            2f64.sqrt()
        );
        assert!(dissimilarity(&[1.0], &[0.0, 0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn margin_loss_examples() {
        assert_eq!(triple_margin_loss(0.0, 2.0, 1.0), 0.0);
        assert_eq!(triple_margin_loss(0.5, 1.0, 1.0), 0.5);
        assert_eq!(triple_margin_loss(0.7, 0.7, 1.0), 1.0);
    }

    #[test]
    fn corruption_contract() {
        let kg = KnowledgeGraph::new(2, 1, vec![Triple::new(0, 0, 1)]).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let c = corrupt_triple(Triple::new(0, 0, 1), &kg, &mut rng).unwrap();
            assert!(c == Triple::new(1, 0, 1) || c == Triple::new(0, 0, 0));
        }

        let kg = KnowledgeGraph::new(40, 3, vec![Triple::new(4, 2, 9)]).unwrap();
        let mut heads = 0;
        for _ in 0..10_000 {
            let c = corrupt_triple(Triple::new(4, 2, 9), &kg, &mut rng).unwrap();
            assert_eq!(c.l, 2);
            assert!((c.h != 4) ^ (c.t != 9));
            heads += (c.h != 4) as usize;
        }
        let frac = heads as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&frac), "{frac}");

        let kg = KnowledgeGraph::new(1, 1, vec![Triple::new(0, 0, 0)]).unwrap();
        assert!(corrupt_triple(Triple::new(0, 0, 0), &kg, &mut rng).is_err());
    }

    #[test]
    fn graph_validation() {
        assert!(KnowledgeGraph::new(2, 1, vec![Triple::new(0, 0, 2)]).is_err());
        assert!(KnowledgeGraph::new(2, 1, vec![Triple::new(0, 1, 1)]).is_err());
        assert!(KnowledgeGraph::new(2, 1, vec![Triple::new(0, 0, 1); 2]).is_err());
        let ts = KnowledgeGraph::parse_triples("# c\n0\t0\t1\n1\t0\t0\n", "x").unwrap();
        assert_eq!(ts, vec![Triple::new(0, 0, 1), Triple::new(1, 0, 0)]);
        assert!(matches!(
            KnowledgeGraph::parse_triples("0\t0\n", "x"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn hinge_gradient_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let kg = KnowledgeGraph::new(5, 2, vec![Triple::new(0, 1, 3)]).unwrap();
        let mut e = transe_init::<f64>(&kg, 4, &mut rng);
        let (pos, neg) = (Triple::new(0, 1, 3), Triple::new(0, 1, 4));
        for (gamma, active) in [(5.0, true), (-5.0, false)] {
            let mut g = TransEGrad::zeros(5, 2, 4);
            let loss = accumulate_pair_grad(&e, pos, neg, gamma, &mut g);
            assert_eq!(loss > 0.0, active);
            let h = 1e-6;
            for (which, len) in [(0, 20), (1, 8)] {
                for i in 0..len {
                    fn table(e: &mut TransEEmbeddings<f64>, which: usize) -> &mut Tensor<f64> {
                        if which == 0 {
                            &mut e.entity_vectors
                        } else {
                            &mut e.relation_vectors
                        }
                    }
                    let orig = table(&mut e, which).data()[i];
                    table(&mut e, which).data_mut()[i] = orig + h;
                    let up = pair_loss(&e, pos, neg, gamma);
                    table(&mut e, which).data_mut()[i] = orig - h;
                    let down = pair_loss(&e, pos, neg, gamma);
                    table(&mut e, which).data_mut()[i] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let analytic = if which == 0 { g.entity[i] } else { g.relation[i] };
                    assert!((numeric - analytic).abs() < 1e-7, "{numeric} vs {analytic}");
                    if !active {
                        assert_eq!(analytic, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn satisfied_graph_has_zero_loss() {
        // Entities on the unit circle; the relation maps 0 -> 1 exactly, and
        // every corruption lands at least sqrt(2) - small away.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let kg = KnowledgeGraph::new(4, 1, vec![Triple::new(0, 0, 1)]).unwrap();
        let e = emb(&[[1.0, 0.0], [s, s], [-1.0, 0.0], [0.0, -1.0]], &[[s - 1.0, s]]);
        let mut rng = Rng::new(0);
        for _ in 0..100 {
            let neg = corrupt_triple(kg.triples[0], &kg, &mut rng).unwrap();
            assert!(e.distance(neg) > 0.7);
            let mut g = TransEGrad::zeros(4, 1, 2);
            assert_eq!(accumulate_pair_grad(&e, kg.triples[0], neg, 0.5, &mut g), 0.0);
            assert!(g.entity.iter().chain(&g.relation).all(|&x| x == 0.0));
        }
    }

    fn small_graph() -> KnowledgeGraph {
        let triples = (0..12).map(|p| Triple::new(p, 0, 12 + p % 3)).collect();
        KnowledgeGraph::new(15, 1, triples).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_keeps_unit_norms() {
        let cfg = TransEConfig {
            epochs: 20,
            seed: 5,
            ..TransEConfig::default()
        };
        let a = transe_train::<f64>(&small_graph(), &cfg).unwrap();
        let b = transe_train::<f64>(&small_graph(), &cfg).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert!(a.max_norm_error < 1e-12);
        assert_eq!(a.steps, 20 * 2);
        assert!(transe_train::<f64>(&KnowledgeGraph::new(3, 1, vec![]).unwrap(), &cfg).is_err());
    }

    #[test]
    fn link_prediction_examples() {
        // Three entities on a line; relation +1 makes every true tail nearest.
        let kg = KnowledgeGraph::new(3, 1, vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)]).unwrap();
        let e = emb(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], &[[1.0, 0.0]]);
        let r = link_prediction_eval(&kg, &e, 1);
        assert_eq!((r.mean_rank, r.hits_at_k), (1.0, 1.0));

        // Brute force by hand: h+l = (0.5,0) for triple (0,0,2).
        // distances: e0 0.5, e1 0.5, e2 1.5 -> rank of 2 is 3; of 1 is 2 (tie with 0, lower id first).
        let e = emb(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], &[[0.5, 0.0]]);
        assert_eq!(tail_rank(&e, Triple::new(0, 0, 2)), 3);
        assert_eq!(tail_rank(&e, Triple::new(0, 0, 1)), 2);
        assert_eq!(tail_rank(&e, Triple::new(0, 0, 0)), 1);
    }

    #[test]
    fn random_embeddings_rank_near_uniform() {
        let mut means = Vec::new();
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let triples: Vec<Triple> = (0..40).map(|h| Triple::new(h, 0, rng.below(40))).collect();
            let kg = KnowledgeGraph::new(40, 1, triples).unwrap();
            let e = transe_init::<f64>(&kg, 16, &mut rng);
            means.push(link_prediction_eval(&kg, &e, 1).mean_rank);
        }
        let avg = means.iter().sum::<f64>() / means.len() as f64;
        assert!((avg - 20.5).abs() < 5.0, "{means:?}");
    }

    #[test]
    fn export_round_trip() {
        let mut rng = Rng::new(2);
        let t: Tensor<f64> = Tensor::uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let text = export_entities(&t);
        assert!(text.starts_with("#transe d=3 entities=4\n"));
        let back: Tensor<f64> = import_entities(&text, "x").unwrap();
        assert_eq!(back, t);
        assert!(import_entities::<f64>("#transe d=3 entities=2\n0\t1\t2\t3\n", "x").is_err());
    }
}
