//! Pointer decoder with pairwise ordering context.
//!
//! An LSTM starts from the set vector (`h_0 = s'`, `c_0 = 0`) and a learned
//! start token, then at each step scores the remaining candidates:
//!
//! ```text
//! score_j = v . tanh(W1 h + W2 M[j] + We e'_j)
//! ```
//!
//! `M[j] = (F_j | G_j)` concatenates two pairwise summaries. The future head
//! relates candidate `j` to every other remaining candidate `k`:
//! `F_j = mean_k sigmoid(f(j, k)) * emb_f(j, k)`. The history head relates
//! each already-selected element `u` to `j`: `G_j = mean_u emb_h(u, j)`.
//! Both heads are two-layer MLPs over element pairs that emit a context
//! embedding and a precedence logit; the logits also feed an auxiliary
//! binary cross-entropy loss.

use serde::{Deserialize, Serialize};

use crate::encoder::{Dropout, EncodedNodes, EncodedSet};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Matrix, NodeId, ParamId, ParamRole, ParameterStore, SeededRng};
use crate::permutation::Permutation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Width of the pointer attention space.
    pub d_att: usize,
    /// Hidden width of the pairwise heads.
    pub pair_hidden: usize,
    /// Start with `v = 0`, so every candidate is equally likely before training.
    pub zero_init_pointer: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_att: 256,
            pair_hidden: 256,
            zero_init_pointer: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    /// Maximum pairwise logits per decode step entering the auxiliary loss;
    /// 0 keeps all of them.
    pub pair_cap: usize,
    /// Use the printed sign `nll - lambda * l_s` instead of `nll + lambda * l_s`.
    pub paper_sign: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            pair_cap: 32,
            paper_sign: false,
        }
    }
}

/// Two-layer MLP over an ordered element pair `(a, b)`:
/// `hidden = tanh(a A + b B + bias)`, `emb = hidden W + w_b`,
/// `logit = hidden u + c`.
#[derive(Clone, Debug)]
pub struct PairHead {
    pub first: ParamId,
    pub second: ParamId,
    pub bias: ParamId,
    pub emb_w: ParamId,
    pub emb_b: ParamId,
    pub score_u: ParamId,
    pub score_c: ParamId,
}

impl PairHead {
    fn init(store: &mut ParameterStore, prefix: &str, d: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        Self {
            first: store.init(&format!("{prefix}.first"), d, hidden, ParamRole::Weight, rng),
            second: store.init(&format!("{prefix}.second"), d, hidden, ParamRole::Weight, rng),
            bias: store.init(&format!("{prefix}.bias"), 1, hidden, ParamRole::Bias, rng),
            emb_w: store.init(&format!("{prefix}.emb_w"), hidden, d, ParamRole::Weight, rng),
            emb_b: store.init(&format!("{prefix}.emb_b"), 1, d, ParamRole::Bias, rng),
            score_u: store.init(&format!("{prefix}.score_u"), hidden, 1, ParamRole::Weight, rng),
            score_c: store.init(&format!("{prefix}.score_c"), 1, 1, ParamRole::Bias, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderWeights {
    /// Input-to-gates, `d x 4d`, gate order input/forget/candidate/output.
    pub lstm_wx: ParamId,
    pub lstm_wh: ParamId,
    pub lstm_b: ParamId,
    pub start: ParamId,
    pub future: PairHead,
    pub history: PairHead,
    pub w1: ParamId,
    pub w2: ParamId,
    pub we: ParamId,
    /// `d_att x 1`.
    pub v: ParamId,
    pub d_model: usize,
}

impl DecoderWeights {
    pub fn init(store: &mut ParameterStore, cfg: &DecoderConfig, d_model: usize, rng: &mut SeededRng) -> Self {
        let d = d_model;
        let w = Self {
            lstm_wx: store.init("decoder.lstm.wx", d, 4 * d, ParamRole::Weight, rng),
            lstm_wh: store.init("decoder.lstm.wh", d, 4 * d, ParamRole::Weight, rng),
            lstm_b: store.init("decoder.lstm.b", 1, 4 * d, ParamRole::Bias, rng),
            start: store.init("decoder.start", 1, d, ParamRole::Weight, rng),
            future: PairHead::init(store, "decoder.future", d, cfg.pair_hidden, rng),
            history: PairHead::init(store, "decoder.history", d, cfg.pair_hidden, rng),
            w1: store.init("decoder.pointer.w1", d, cfg.d_att, ParamRole::Weight, rng),
            w2: store.init("decoder.pointer.w2", 2 * d, cfg.d_att, ParamRole::Weight, rng),
            we: store.init("decoder.pointer.we", d, cfg.d_att, ParamRole::Weight, rng),
            v: store.init("decoder.pointer.v", cfg.d_att, 1, ParamRole::Weight, rng),
            d_model,
        };
        if cfg.zero_init_pointer {
            let p = store.get_mut(w.v);
            p.value.fill(0.0);
        }
        w
    }
}

/// Plain-value decoding state.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    pub h: Matrix,
    pub c: Matrix,
    pub selected: Vec<usize>,
    /// `true` while an element is still available.
    pub candidate_mask: Vec<bool>,
}

impl DecodeState {
    /// Fresh state: `h = s'`, `c = 0`, every unpadded element available.
    pub fn initial(enc: &EncodedSet) -> Self {
        Self {
            h: enc.set.clone(),
            c: Matrix::zeros(1, enc.set.cols()),
            selected: Vec::new(),
            candidate_mask: enc.pad_mask.clone(),
        }
    }
}

/// One pairwise logit entering the auxiliary loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    /// Candidate `first` vs remaining candidate `second`.
    Future,
    /// Selected `first` vs candidate `second`.
    History,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairLogit {
    pub kind: PairKind,
    pub first: usize,
    pub second: usize,
    pub logit: f64,
}

/// Graph handles of the pairwise tables of one encoded set.
#[derive(Clone, Copy, Debug)]
pub struct PairTables {
    pub n: usize,
    /// Row `j * n + k`: embedding of future pair `(j, k)`.
    pub future_emb: NodeId,
    pub future_logit: NodeId,
    pub future_gate: NodeId,
    /// Row `j * n + u`: embedding of history pair `(u, j)`.
    pub history_emb: NodeId,
    pub history_logit: NodeId,
    /// `E' We`, the candidate term of the pointer score.
    pub cand_proj: NodeId,
}

fn pair_head(g: &mut Graph<'_>, head: &PairHead, firsts: NodeId, seconds: NodeId, first_major: bool) -> Result<(NodeId, NodeId)> {
    let (a, b, bias) = (g.param(head.first), g.param(head.second), g.param(head.bias));
    let fa = g.matmul(firsts, a)?;
    let sb = g.matmul(seconds, b)?;
    // rows indexed [major * n + minor]
    let pre = if first_major { g.pair_sum(fa, sb)? } else { g.pair_sum(sb, fa)? };
    let pre = g.add_row(pre, bias)?;
    let hidden = g.tanh(pre);
    let (ew, eb, su, sc) = (g.param(head.emb_w), g.param(head.emb_b), g.param(head.score_u), g.param(head.score_c));
    let emb = g.matmul(hidden, ew)?;
    let emb = g.add_row(emb, eb)?;
    let logit = g.matmul(hidden, su)?;
    let logit = g.add_row(logit, sc)?;
    Ok((emb, logit))
}

/// Evaluates both pair heads over all ordered pairs once per set.
pub fn pair_tables(g: &mut Graph<'_>, w: &DecoderWeights, elements: NodeId) -> Result<PairTables> {
    let n = g.value(elements).rows();
    let (future_emb, future_logit) = pair_head(g, &w.future, elements, elements, true)?;
    let future_gate = g.sigmoid(future_logit);
    // history pair (u, j) stored at row j * n + u: candidate-major
    let (history_emb, history_logit) = pair_head(g, &w.history, elements, elements, false)?;
    let we = g.param(w.we);
    let cand_proj = g.matmul(elements, we)?;
    Ok(PairTables {
        n,
        future_emb,
        future_logit,
        future_gate,
        history_emb,
        history_logit,
        cand_proj,
    })
}

/// Standard LSTM cell; returns `(h', c')`.
pub fn lstm_step_graph(g: &mut Graph<'_>, w: &DecoderWeights, h: NodeId, c: NodeId, input: NodeId) -> Result<(NodeId, NodeId)> {
    let d = w.d_model;
    let (wx, wh, b) = (g.param(w.lstm_wx), g.param(w.lstm_wh), g.param(w.lstm_b));
    let zx = g.matmul(input, wx)?;
    let zh = g.matmul(h, wh)?;
    let z = g.add(zx, zh)?;
    let z = g.add(z, b)?;
    let zi = g.slice_cols(z, 0, d)?;
    let zf = g.slice_cols(z, d, d)?;
    let zg = g.slice_cols(z, 2 * d, d)?;
    let zo = g.slice_cols(z, 3 * d, d)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let fc = g.mul(f, c)?;
    let ig = g.mul(i, cand)?;
    let c_next = g.add(fc, ig)?;
    let tc = g.tanh(c_next);
    let h_next = g.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Plain-value wrapper around [`lstm_step_graph`]; the state's selection is untouched.
pub fn lstm_step(store: &ParameterStore, w: &DecoderWeights, state: &DecodeState, input: &Matrix) -> Result<DecodeState> {
    if input.shape() != (1, w.d_model) {
        return Err(Error::Shape(format!("LSTM input {:?}, expected (1, {})", input.shape(), w.d_model)));
    }
    let mut g = Graph::new(store);
    let (h, c, x) = (g.constant(state.h.clone()), g.constant(state.c.clone()), g.constant(input.clone()));
    let (h2, c2) = lstm_step_graph(&mut g, w, h, c, x)?;
    Ok(DecodeState {
        h: g.value(h2).clone(),
        c: g.value(c2).clone(),
        ..state.clone()
    })
}

/// Builds `M_i` (`n x 2d`) for the current candidates and selection, and lists
/// the pairwise logits of this step. Rows of non-candidates are zero.
pub fn pairwise_context_graph(
    g: &mut Graph<'_>,
    tables: &PairTables,
    candidates: &[bool],
    selected: &[usize],
) -> Result<(NodeId, Vec<PairLogit>)> {
    let n = tables.n;
    let d = g.value(tables.future_emb).cols();
    let cand: Vec<usize> = (0..n).filter(|&j| candidates[j]).collect();
    if cand.is_empty() {
        return Err(Error::EmptySet("no candidates left".into()));
    }
    let mut pairs = Vec::new();

    let future = if cand.len() > 1 {
        let mut weights = Matrix::zeros(n * n, 1);
        let k_inv = 1.0 / (cand.len() - 1) as f64;
        let fl = g.value(tables.future_logit);
        for &j in &cand {
            for &k in &cand {
                if j != k {
                    weights.data_mut()[j * n + k] = k_inv;
                    pairs.push(PairLogit {
                        kind: PairKind::Future,
                        first: j,
                        second: k,
                        logit: fl.data()[j * n + k],
                    });
                }
            }
        }
        let gates = g.mul_const(tables.future_gate, weights)?;
        g.pair_contract(gates, tables.future_emb, n)?
    } else {
        g.constant(Matrix::zeros(n, d))
    };

    let history = if selected.is_empty() {
        g.constant(Matrix::zeros(n, d))
    } else {
        let mut weights = Matrix::zeros(n * n, 1);
        let u_inv = 1.0 / selected.len() as f64;
        let hl = g.value(tables.history_logit);
        for &j in &cand {
            for &u in selected {
                weights.data_mut()[j * n + u] = u_inv;
                pairs.push(PairLogit {
                    kind: PairKind::History,
                    first: u,
                    second: j,
                    logit: hl.data()[j * n + u],
                });
            }
        }
        let wn = g.constant(weights);
        g.pair_contract(wn, tables.history_emb, n)?
    };

    let m = g.concat_cols(&[future, history])?;
    Ok((m, pairs))
}

/// Plain-value pairwise context for a decode state.
pub fn pairwise_context(
    store: &ParameterStore,
    w: &DecoderWeights,
    enc: &EncodedSet,
    state: &DecodeState,
) -> Result<(Matrix, Vec<PairLogit>)> {
    let mut g = Graph::new(store);
    let e = g.constant(enc.elements.clone());
    let tables = pair_tables(&mut g, w, e)?;
    let (m, pairs) = pairwise_context_graph(&mut g, &tables, &state.candidate_mask, &state.selected)?;
    Ok((g.value(m).clone(), pairs))
}

/// Raw pointer scores `v . tanh(W1 h + W2 M[j] + We e'_j)` as an `n x 1` node.
pub fn pointer_logits(g: &mut Graph<'_>, w: &DecoderWeights, h: NodeId, m: NodeId, tables: &PairTables) -> Result<NodeId> {
    let (w1, w2, v) = (g.param(w.w1), g.param(w.w2), g.param(w.v));
    let hq = g.matmul(h, w1)?;
    let mq = g.matmul(m, w2)?;
    let pre = g.add(mq, tables.cand_proj)?;
    let pre = g.add_row(pre, hq)?;
    let act = g.tanh(pre);
    g.matmul(act, v)
}

/// Log-probabilities over candidates; non-candidates get `None`.
pub fn pointer_scores(
    store: &ParameterStore,
    w: &DecoderWeights,
    enc: &EncodedSet,
    state: &DecodeState,
    m: &Matrix,
) -> Result<Vec<Option<f64>>> {
    let mut g = Graph::new(store);
    let e = g.constant(enc.elements.clone());
    let tables = pair_tables(&mut g, w, e)?;
    let (h, mn) = (g.constant(state.h.clone()), g.constant(m.clone()));
    let logits = pointer_logits(&mut g, w, h, mn, &tables)?;
    crate::numerics::masked_log_softmax(g.value(logits).data(), &state.candidate_mask)
}

/// Number of leading real rows, requiring padding to be trailing.
pub(crate) fn valid_prefix(mask: &[bool]) -> Result<usize> {
    let n = mask.iter().take_while(|&&m| m).count();
    if mask[n..].iter().any(|&m| m) {
        return Err(Error::InvalidArgument("padding rows must come last".into()));
    }
    Ok(n)
}

/// Per-instance loss terms on the graph.
#[derive(Clone, Copy, Debug)]
pub struct InstanceLoss {
    /// `-log p(y | X)`.
    pub nll: NodeId,
    /// Mean pairwise BCE (zero node when there are no pairs).
    pub l_s: NodeId,
    pub pair_count: usize,
}

/// Stride subsample keeping at most `cap` entries (`cap = 0`: keep all).
fn cap_pairs(pairs: Vec<PairLogit>, cap: usize) -> Vec<PairLogit> {
    if cap == 0 || pairs.len() <= cap {
        return pairs;
    }
    let len = pairs.len();
    (0..cap).map(|t| pairs[t * len / cap]).collect()
}

/// Teacher-forced decoding of `y`. Also returns each step's candidate
/// log-probabilities (flat, `None` for non-candidates).
pub fn teacher_forced_graph(
    g: &mut Graph<'_>,
    w: &DecoderWeights,
    enc: EncodedNodes,
    pad_mask: &[bool],
    y: &Permutation,
    cfg: &LossConfig,
    dropout: &mut Dropout<'_>,
) -> Result<(InstanceLoss, Vec<Vec<Option<f64>>>)> {
    let n_valid = valid_prefix(pad_mask)?;
    if y.len() != n_valid {
        return Err(Error::InvalidPermutation(format!(
            "target has {} entries for {n_valid} elements",
            y.len()
        )));
    }
    let tables = pair_tables(g, w, enc.elements)?;
    let n = tables.n;
    let positions = y.positions();

    let mut h = enc.set;
    let mut c = g.constant(Matrix::zeros(1, w.d_model));
    let mut input = g.param(w.start);
    let mut candidates = pad_mask.to_vec();
    let mut selected = Vec::with_capacity(n_valid);
    let mut log_probs = Vec::with_capacity(n_valid);
    let mut step_lp = Vec::with_capacity(n_valid);
    let mut future_picks = Vec::new();
    let mut history_picks = Vec::new();

    for &target in y.indices() {
        let x = dropout.apply(g, input)?;
        (h, c) = lstm_step_graph(g, w, h, c, x)?;
        let (m, pairs) = pairwise_context_graph(g, &tables, &candidates, &selected)?;
        let logits = pointer_logits(g, w, h, m, &tables)?;
        step_lp.push(crate::numerics::masked_log_softmax(g.value(logits).data(), &candidates)?);
        log_probs.push(g.log_softmax_pick(logits, &candidates, target)?);

        for p in cap_pairs(pairs, cfg.pair_cap) {
            match p.kind {
                PairKind::Future => future_picks.push((p.first * n + p.second, positions[p.first] < positions[p.second])),
                PairKind::History => history_picks.push((p.second * n + p.first, true)),
            }
        }

        candidates[target] = false;
        selected.push(target);
        input = g.gather_rows(enc.elements, &[target])?;
    }

    let lp = g.concat_rows(&log_probs)?;
    let lp_sum = g.sum(lp);
    let nll = g.scale(lp_sum, -1.0);

    let pair_count = future_picks.len() + history_picks.len();
    let l_s = if pair_count == 0 {
        g.constant(Matrix::zeros(1, 1))
    } else {
        let bf = g.bce_with_logits(tables.future_logit, future_picks)?;
        let bh = g.bce_with_logits(tables.history_logit, history_picks)?;
        let total = g.add(bf, bh)?;
        g.scale(total, 1.0 / pair_count as f64)
    };
    Ok((InstanceLoss { nll, l_s, pair_count }, step_lp))
}

/// `(nll, l_s)` of a target ordering under teacher forcing, without dropout.
pub fn teacher_forced_nll(
    store: &ParameterStore,
    w: &DecoderWeights,
    enc: &EncodedSet,
    y: &Permutation,
    cfg: &LossConfig,
) -> Result<(f64, f64)> {
    let mut g = Graph::new(store);
    let elements = g.constant(enc.elements.clone());
    let set = g.constant(enc.set.clone());
    let (loss, _) = teacher_forced_graph(&mut g, w, EncodedNodes { elements, set }, &enc.pad_mask, y, cfg, &mut Dropout::off())?;
    Ok((g.scalar(loss.nll), g.scalar(loss.l_s)))
}

/// `nll + lambda * l_s` (or the printed-sign variant) for one instance.
pub fn instance_loss(g: &mut Graph<'_>, loss: &InstanceLoss, cfg: &LossConfig) -> Result<NodeId> {
    let sign = if cfg.paper_sign { -1.0 } else { 1.0 };
    let aux = g.scale(loss.l_s, sign * cfg.lambda);
    g.add(loss.nll, aux)
}

/// `mean(nll) + lambda * mean(l_s)` over a batch of per-instance terms.
pub fn batch_loss(g: &mut Graph<'_>, items: &[InstanceLoss], cfg: &LossConfig) -> Result<NodeId> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per: Vec<NodeId> = items
        .iter()
        .map(|l| instance_loss(g, l, cfg))
        .collect::<Result<_>>()?;
    let stacked = g.concat_rows(&per)?;
    let total = g.sum(stacked);
    Ok(g.scale(total, 1.0 / items.len() as f64))
}

/// Greedy decoding: argmax at each step, ties to the lowest index.
pub fn decode_greedy_graph(g: &mut Graph<'_>, w: &DecoderWeights, enc: EncodedNodes, pad_mask: &[bool]) -> Result<Permutation> {
    let n_valid = valid_prefix(pad_mask)?;
    if n_valid == 0 {
        return Err(Error::EmptySet("decoding an empty set".into()));
    }
    let tables = pair_tables(g, w, enc.elements)?;
    let mut h = enc.set;
    let mut c = g.constant(Matrix::zeros(1, w.d_model));
    let mut input = g.param(w.start);
    let mut candidates = pad_mask.to_vec();
    let mut selected = Vec::with_capacity(n_valid);
    for _ in 0..n_valid {
        (h, c) = lstm_step_graph(g, w, h, c, input)?;
        let pick = if selected.len() + 1 == n_valid {
            candidates.iter().position(|&k| k).expect("one candidate left")
        } else {
            let (m, _) = pairwise_context_graph(g, &tables, &candidates, &selected)?;
            let logits = pointer_logits(g, w, h, m, &tables)?;
            argmax_masked(g.value(logits).data(), &candidates)
        };
        candidates[pick] = false;
        selected.push(pick);
        input = g.gather_rows(enc.elements, &[pick])?;
    }
    Permutation::new(selected)
}

pub(crate) fn argmax_masked(values: &[f64], keep: &[bool]) -> usize {
    let mut best = usize::MAX;
    for (i, (&v, &k)) in values.iter().zip(keep).enumerate() {
        if k && (best == usize::MAX || v > values[best]) {
            best = i;
        }
    }
    best
}

/// Greedy decoding of an already encoded set.
pub fn decode_greedy(store: &ParameterStore, w: &DecoderWeights, enc: &EncodedSet) -> Result<Permutation> {
    let mut g = Graph::new(store);
    let elements = g.constant(enc.elements.clone());
    let set = g.constant(enc.set.clone());
    decode_greedy_graph(&mut g, w, EncodedNodes { elements, set }, &enc.pad_mask)
}
