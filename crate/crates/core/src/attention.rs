//! Attention scoring with absolute (vanilla) and relative (Transformer-XL)
//! positions, multi-head attention, and segment-recurrence memory.
//!
//! Projection matrices are stored `[d_head × d_model]` and applied to row
//! vectors, so `q_i = W_q h_i` becomes `Q = H · W_qᵀ`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Standard sinusoid: even dims `sin(p / 10000^(2k/d))`, odd dims `cos(·)`.
pub fn sinusoid<S: Scalar>(pos: f64, d: usize) -> Vec<S> {
    (0..d)
        .map(|j| {
            let k = (j / 2) as f64;
            let angle = pos / 10000f64.powf(2.0 * k / d as f64);
            S::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
        })
        .collect()
}

/// Fixed table `U` of absolute positions `0..l_max`.
#[derive(Clone, Debug)]
pub struct AbsolutePositionalEncoding<S> {
    table: Tensor<S>,
}

impl<S: Scalar> AbsolutePositionalEncoding<S> {
    pub fn new(l_max: usize, d_model: usize) -> Self {
        let data = (0..l_max).flat_map(|p| sinusoid::<S>(p as f64, d_model)).collect();
        AbsolutePositionalEncoding {
            table: Tensor::matrix(l_max, d_model, data).expect("pe table"),
        }
    }

    /// All-zero table, for reductions in tests.
    pub fn zeros(l_max: usize, d_model: usize) -> Self {
        AbsolutePositionalEncoding {
            table: Tensor::zeros(vec![l_max, d_model]),
        }
    }

    pub fn l_max(&self) -> usize {
        self.table.rows()
    }

    pub fn table(&self) -> &Tensor<S> {
        &self.table
    }

    pub fn rows(&self, positions: &[usize]) -> Result<Tensor<S>> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.l_max()) {
            return Err(Error::Capacity(format!(
                "position {p} beyond absolute encoding length {}",
                self.l_max()
            )));
        }
        Ok(self.table.select_rows(positions))
    }
}

/// Fixed table `R` indexed by offset `δ ∈ [−(l_max−1), l_max−1]`, stored at
/// row `δ + l_max − 1`.
#[derive(Clone, Debug)]
pub struct RelativePositionalEncoding<S> {
    table: Tensor<S>,
    l_max: usize,
}

/// What to do with an offset outside the table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OffsetPolicy {
    Strict,
    Clip,
}

impl<S: Scalar> RelativePositionalEncoding<S> {
    pub fn new(l_max: usize, d_model: usize) -> Self {
        assert!(l_max >= 1);
        let lo = -(l_max as i64 - 1);
        let data = (0..2 * l_max - 1)
            .flat_map(|r| sinusoid::<S>((lo + r as i64) as f64, d_model))
            .collect();
        RelativePositionalEncoding {
            table: Tensor::matrix(2 * l_max - 1, d_model, data).expect("rel table"),
            l_max,
        }
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn max_offset(&self) -> i64 {
        self.l_max as i64 - 1
    }

    pub fn table(&self) -> &Tensor<S> {
        &self.table
    }

    pub fn resolve(&self, offset: i64, policy: OffsetPolicy) -> Result<i64> {
        let lim = self.max_offset();
        if offset.abs() <= lim {
            return Ok(offset);
        }
        match policy {
            OffsetPolicy::Clip => Ok(offset.clamp(-lim, lim)),
            OffsetPolicy::Strict => Err(Error::Capacity(format!(
                "relative offset {offset} outside ±{lim}"
            ))),
        }
    }

    pub fn row(&self, offset: i64) -> &[S] {
        self.table.row((offset + self.max_offset()) as usize)
    }

    fn rows(&self, offsets: &[i64]) -> Tensor<S> {
        let idx: Vec<usize> = offsets
            .iter()
            .map(|&o| (o + self.max_offset()) as usize)
            .collect();
        self.table.select_rows(&idx)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VanillaHead {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// One Transformer-XL head: content key map `w_ke`, position key map `w_kr`,
/// and the global content/position biases `u`, `v`.
#[derive(Clone, Copy, Debug)]
pub struct XlHead {
    pub w_q: Var,
    pub w_ke: Var,
    pub w_kr: Var,
    pub w_v: Var,
    pub u: Var,
    pub v: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum Head {
    Vanilla(VanillaHead),
    Xl(XlHead),
}

impl Head {
    fn w_v(&self) -> Var {
        match self {
            Head::Vanilla(h) => h.w_v,
            Head::Xl(h) => h.w_v,
        }
    }
}

/// Global positions of queries and keys for relative scoring.
#[derive(Clone, Copy, Debug)]
pub struct RelativeFrame<'a, S> {
    pub rel: &'a RelativePositionalEncoding<S>,
    pub q_pos: &'a [i64],
    pub k_pos: &'a [i64],
    pub policy: OffsetPolicy,
}

#[derive(Clone, Copy, Debug)]
pub enum Scoring<'a, S> {
    /// Content terms only (positions already folded into the inputs).
    Content,
    Relative(RelativeFrame<'a, S>),
}

/// `(W_q x_i) · (W_k y_j)` for every query row `i` and key row `j`.
pub fn vanilla_scores_between<S: Scalar>(
    tape: &mut Tape<S>,
    queries: Var,
    keys: Var,
    head: &VanillaHead,
) -> Result<Var> {
    let q = tape.matmul_nt(queries, head.w_q)?;
    let k = tape.matmul_nt(keys, head.w_k)?;
    tape.matmul_nt(q, k)
}

/// Absolute-position self-attention scores over `n` token embeddings:
/// `A[i,j] = (W_q(E_i + U_i)) · (W_k(E_j + U_j))`.
pub fn vanilla_scores<S: Scalar>(
    tape: &mut Tape<S>,
    e_x: Var,
    pe: &AbsolutePositionalEncoding<S>,
    head: &VanillaHead,
) -> Result<Var> {
    let n = tape.value(e_x).rows();
    if n > pe.l_max() {
        return Err(Error::Capacity(format!(
            "{n} positions exceed L_max = {}",
            pe.l_max()
        )));
    }
    let positions: Vec<usize> = (0..n).collect();
    let u = tape.constant(pe.rows(&positions)?);
    let x = tape.add(e_x, u)?;
    vanilla_scores_between(tape, x, x, head)
}

/// Relative scores with the recurrence convention: `h_kv = [memory ∥ current]`
/// with `m = rows(h_kv) − rows(h_q)` memory rows, so query `i` and key `j`
/// sit at offset `(i + m) − j`.
pub fn xl_scores<S: Scalar>(
    tape: &mut Tape<S>,
    h_q: Var,
    h_kv: Var,
    rel: &RelativePositionalEncoding<S>,
    head: &XlHead,
) -> Result<Var> {
    let n = tape.value(h_q).rows();
    let k = tape.value(h_kv).rows();
    if k < n {
        return Err(Error::shape(format!(
            "xl_scores: {k} key rows for {n} queries"
        )));
    }
    let m = (k - n) as i64;
    let q_pos: Vec<i64> = (0..n as i64).map(|i| i + m).collect();
    let k_pos: Vec<i64> = (0..k as i64).collect();
    let frame = RelativeFrame {
        rel,
        q_pos: &q_pos,
        k_pos: &k_pos,
        policy: OffsetPolicy::Strict,
    };
    xl_scores_at(tape, h_q, h_kv, head, &frame)
}

/// `A[i,j] = q_i·k_j + q_i·(W_kR R_δ) + u·k_j + v·(W_kR R_δ)` with
/// `δ = q_pos[i] − k_pos[j]`, `q_i = W_q h_q[i]`, `k_j = W_kE h_kv[j]`.
pub fn xl_scores_at<S: Scalar>(
    tape: &mut Tape<S>,
    h_q: Var,
    h_kv: Var,
    head: &XlHead,
    frame: &RelativeFrame<'_, S>,
) -> Result<Var> {
    let n = tape.value(h_q).rows();
    let k = tape.value(h_kv).rows();
    if frame.q_pos.len() != n || frame.k_pos.len() != k {
        return Err(Error::shape(format!(
            "xl_scores: {} query / {} key positions for {n}x{k} scores",
            frame.q_pos.len(),
            frame.k_pos.len()
        )));
    }
    let mut offsets = Vec::with_capacity(n * k);
    for &qp in frame.q_pos {
        for &kp in frame.k_pos {
            offsets.push(frame.rel.resolve(qp - kp, frame.policy)?);
        }
    }
    let mut distinct = offsets.clone();
    distinct.sort_unstable();
    distinct.dedup();

    let q = tape.matmul_nt(h_q, head.w_q)?;
    let keys = tape.matmul_nt(h_kv, head.w_ke)?;
    let qu = tape.add_row(q, head.u)?;
    let content = tape.matmul_nt(qu, keys)?;

    let r = tape.constant(frame.rel.rows(&distinct));
    let proj = tape.matmul_nt(r, head.w_kr)?;
    let qv = tape.add_row(q, head.v)?;
    let by_offset = tape.matmul_nt(qv, proj)?;
    let width = distinct.len();
    let idx = offsets
        .iter()
        .enumerate()
        .map(|(flat, off)| {
            let col = distinct.binary_search(off).expect("offset present");
            (flat / k) * width + col
        })
        .collect();
    let positional = tape.select(by_offset, idx, vec![n, k])?;
    tape.add(content, positional)
}

/// Unscaled scores of one head under the given scoring rule.
pub fn head_scores<S: Scalar>(
    tape: &mut Tape<S>,
    head: &Head,
    queries: Var,
    keys: Var,
    scoring: &Scoring<'_, S>,
) -> Result<Var> {
    match (head, scoring) {
        (Head::Vanilla(h), Scoring::Content) => vanilla_scores_between(tape, queries, keys, h),
        (Head::Vanilla(_), Scoring::Relative(_)) => Err(Error::config(
            "vanilla heads take absolute positions through their inputs",
        )),
        (Head::Xl(h), Scoring::Relative(frame)) => xl_scores_at(tape, queries, keys, h, frame),
        (Head::Xl(h), Scoring::Content) => {
            let q = tape.matmul_nt(queries, h.w_q)?;
            let k = tape.matmul_nt(keys, h.w_ke)?;
            let qu = tape.add_row(q, h.u)?;
            tape.matmul_nt(qu, k)
        }
    }
}

/// Multi-head attention: per head, scores scaled by `1/sqrt(d_head)`, masked
/// row softmax, weighted sum of value projections; heads concatenated and
/// mapped through `W_O`. Residual and normalization belong to the caller.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    queries: Var,
    keys_values: Var,
    allowed: Option<&[bool]>,
    heads: &[Head],
    w_o: Var,
    scoring: &Scoring<'_, S>,
) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::config("attention with zero heads"));
    }
    let mut outputs = Vec::with_capacity(heads.len());
    for head in heads {
        let d_head = tape.value(head.w_v()).rows();
        let scores = head_scores(tape, head, queries, keys_values, scoring)?;
        let scaled = tape.scale(scores, S::one() / S::from_usize_lossy(d_head).sqrt());
        let weights = tape.softmax_rows(scaled, allowed)?;
        let values = tape.matmul_nt(keys_values, head.w_v())?;
        outputs.push(tape.matmul(weights, values)?);
    }
    let joined = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    tape.matmul_nt(joined, w_o)
}

/// Cached hidden states of the previous segment. Held as plain values, so
/// nothing upstream of the cache can ever receive gradient through it.
#[derive(Clone, Debug)]
pub struct SegmentMemory<S> {
    states: Tensor<S>,
}

impl<S: Scalar> SegmentMemory<S> {
    pub fn empty(d_model: usize) -> Self {
        SegmentMemory {
            states: Tensor::zeros(vec![0, d_model]),
        }
    }

    pub fn from_states(states: Tensor<S>) -> Result<Self> {
        if states.shape().len() != 2 {
            return Err(Error::shape("segment memory must be a matrix"));
        }
        Ok(SegmentMemory {
            states: states.with_requires_grad(false),
        })
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.states.cols()
    }

    pub fn states(&self) -> &Tensor<S> {
        &self.states
    }
}

/// `[SG(mem) ∘ h_cur]`: memory rows enter as constants.
pub fn concat_memory<S: Scalar>(
    tape: &mut Tape<S>,
    mem: &SegmentMemory<S>,
    h_cur: Var,
) -> Result<Var> {
    let d = tape.value(h_cur).cols();
    if mem.d_model() != d {
        return Err(Error::shape(format!(
            "memory width {} vs hidden width {d}",
            mem.d_model()
        )));
    }
    if mem.is_empty() {
        return Ok(h_cur);
    }
    let m = tape.constant(mem.states.clone());
    tape.concat_rows(&[m, h_cur])
}

/// Last `capacity` rows of `[old; new_hidden]`, detached.
pub fn update_memory<S: Scalar>(
    old: &SegmentMemory<S>,
    new_hidden: &Tensor<S>,
    capacity: usize,
) -> Result<SegmentMemory<S>> {
    let d = new_hidden.cols();
    if old.d_model() != d {
        return Err(Error::shape(format!(
            "memory width {} vs hidden width {d}",
            old.d_model()
        )));
    }
    let total = old.len() + new_hidden.rows();
    let keep = capacity.min(total);
    let skip = total - keep;
    let mut data = Vec::with_capacity(keep * d);
    for r in skip..total {
        if r < old.len() {
            data.extend_from_slice(old.states.row(r));
        } else {
            data.extend_from_slice(new_hidden.row(r - old.len()));
        }
    }
    SegmentMemory::from_states(Tensor::matrix(keep, d, data)?)
}
