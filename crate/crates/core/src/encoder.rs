//! Two-stage set encoder.
//!
//! Stage one is plain multi-head self-attention over the projected input rows
//! (no positional encoding, no dropout) followed by attention pooling from a
//! learned seed per head, giving per-element embeddings `E` and a set vector
//! `s`. Stage two stacks set interdependence layers: `s` is appended to `E` as
//! an extra row and the augmented matrix attends to itself, so elements and
//! the whole set are updated jointly. Splitting the last row back off yields
//! `(E', s')`.
//!
//! Per-head projections are stored as column blocks of one `d x d` matrix;
//! head `i` uses columns `i * d/m .. (i + 1) * d/m`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Mask, Matrix, NodeId, ParamId, ParamRole, ParameterStore, SeededRng};

/// Activation applied to the scaled score matrix inside interdependence layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma {
    Softmax,
    Tanh,
    Relu,
}

impl std::str::FromStr for Sigma {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            other => Err(Error::Config(format!(
                "unknown sigma `{other}` (expected softmax, tanh or relu)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_sit_layers: usize,
    pub sigma: Sigma,
    pub use_residual: bool,
    pub use_layer_norm: bool,
    pub dropout: f64,
    /// Append the set vector as an extra row before each stacked layer. Off
    /// gives the plain stacked-attention ablation.
    pub augment_set: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_heads: 4,
            n_sit_layers: 3,
            sigma: Sigma::Softmax,
            use_residual: true,
            use_layer_norm: true,
            dropout: 0.1,
            augment_set: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Query/key/value/output projections of one multi-head attention block.
#[derive(Clone, Debug)]
pub struct MhaWeights {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub n_heads: usize,
}

impl MhaWeights {
    pub fn init(store: &mut ParameterStore, prefix: &str, d: usize, n_heads: usize, rng: &mut SeededRng) -> Self {
        Self {
            w_q: store.init(&format!("{prefix}.w_q"), d, d, ParamRole::Weight, rng),
            w_k: store.init(&format!("{prefix}.w_k"), d, d, ParamRole::Weight, rng),
            w_v: store.init(&format!("{prefix}.w_v"), d, d, ParamRole::Weight, rng),
            w_o: store.init(&format!("{prefix}.w_o"), d, d, ParamRole::Weight, rng),
            n_heads,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PmaWeights {
    /// One `1 x d` seed per head, stacked as an `m x d` matrix.
    pub seeds: ParamId,
    pub attn: MhaWeights,
}

#[derive(Clone, Debug)]
pub struct SitLayerWeights {
    pub attn: MhaWeights,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderWeights {
    pub input_w: ParamId,
    pub input_b: ParamId,
    pub elements: MhaWeights,
    pub pma: PmaWeights,
    pub sit: Vec<SitLayerWeights>,
}

impl EncoderWeights {
    pub fn init(store: &mut ParameterStore, cfg: &EncoderConfig, d_input: usize, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let m = cfg.n_heads;
        let input_w = store.init("encoder.input.w", d_input, d, ParamRole::Weight, rng);
        let input_b = store.init("encoder.input.b", 1, d, ParamRole::Bias, rng);
        let elements = MhaWeights::init(store, "encoder.mha", d, m, rng);
        let seeds = store.init("encoder.pma.seeds", m, d, ParamRole::Weight, rng);
        let pma = PmaWeights {
            seeds,
            attn: MhaWeights::init(store, "encoder.pma", d, m, rng),
        };
        let sit = (0..cfg.n_sit_layers)
            .map(|l| SitLayerWeights {
                attn: MhaWeights::init(store, &format!("encoder.sit{l}"), d, m, rng),
                ln_gain: store.init(&format!("encoder.sit{l}.ln_gain"), 1, d, ParamRole::Gain, rng),
                ln_bias: store.init(&format!("encoder.sit{l}.ln_bias"), 1, d, ParamRole::Bias, rng),
            })
            .collect();
        Ok(Self {
            input_w,
            input_b,
            elements,
            pma,
            sit,
        })
    }
}

/// Output of the encoder stack as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSet {
    /// `n x d_model`, one row per input row (padding rows included).
    pub elements: Matrix,
    /// `1 x d_model`.
    pub set: Matrix,
    /// `true` for real elements, `false` for padding.
    pub pad_mask: Vec<bool>,
}

/// Graph handles of an encoded set.
#[derive(Clone, Copy, Debug)]
pub struct EncodedNodes {
    pub elements: NodeId,
    pub set: NodeId,
}

/// Dropout source. Active only when an rng is supplied and `rate > 0`.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut SeededRng>,
}

impl Dropout<'_> {
    pub fn off() -> Dropout<'static> {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let rate = self.rate;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let (r, c) = g.value(x).shape();
                let keep = 1.0 / (1.0 - rate);
                let data = (0..r * c)
                    .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
                    .collect();
                g.mul_const(x, Matrix::from_vec(r, c, data)?)
            }
            _ => Ok(x),
        }
    }
}

/// Shared head loop. `scale` divides the raw scores; `sigma` turns them
/// into attention weights; `key_mask` excludes key rows.
#[allow(clippy::too_many_arguments)]
fn attend(
    g: &mut Graph<'_>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    w_o: NodeId,
    n_heads: usize,
    scale: f64,
    sigma: Sigma,
    key_mask: &[bool],
    dropout: &mut Dropout<'_>,
) -> Result<NodeId> {
    let d = g.value(q).cols();
    let nq = g.value(q).rows();
    if g.value(k).rows() != key_mask.len() {
        return Err(Error::Shape(format!(
            "key mask covers {} rows, keys have {}",
            key_mask.len(),
            g.value(k).rows()
        )));
    }
    if !key_mask.iter().any(|&m| m) {
        return Err(Error::EmptySet("every key is masked".into()));
    }
    let hw = d / n_heads;
    let mask = Mask::columns(nq, key_mask);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * hw, hw)?;
        let kh = g.slice_cols(k, h * hw, hw)?;
        let vh = g.slice_cols(v, h * hw, hw)?;
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, 1.0 / scale);
        let weights = match sigma {
            Sigma::Softmax => g.softmax_rows(scores, Some(&mask))?,
            Sigma::Tanh => {
                let t = g.tanh(scores);
                g.mul_const(t, mask.to_matrix())?
            }
            Sigma::Relu => {
                let t = g.relu(scores);
                g.mul_const(t, mask.to_matrix())?
            }
        };
        let weights = dropout.apply(g, weights)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(cat, w_o)
}

/// `Concat_i(softmax(Q_i K_i^T / sqrt(d_k)) V_i) W^O` with `Q = xq W^Q`,
/// `K = xkv W^K`, `V = xkv W^V` and `d_k = d_model / m`.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    xq: NodeId,
    xkv: NodeId,
    w: &MhaWeights,
    key_mask: &[bool],
) -> Result<NodeId> {
    let (wq, wk, wv, wo) = (g.param(w.w_q), g.param(w.w_k), g.param(w.w_v), g.param(w.w_o));
    let q = g.matmul(xq, wq)?;
    let k = g.matmul(xkv, wk)?;
    let v = g.matmul(xkv, wv)?;
    let d = g.value(q).cols();
    let scale = ((d / w.n_heads) as f64).sqrt();
    attend(g, q, k, v, wo, w.n_heads, scale, Sigma::Softmax, key_mask, &mut Dropout::off())
}

/// Permutation-equivariant self-attention over the set rows.
pub fn encode_elements(g: &mut Graph<'_>, x: NodeId, w: &MhaWeights, mask: &[bool]) -> Result<NodeId> {
    multi_head_attention(g, x, x, w, mask)
}

/// Pooling by multi-head attention: head `j` attends from `seed_j W_j^Q`
/// over `E W_j^K`, `E W_j^V`; heads are concatenated and projected.
pub fn pma(g: &mut Graph<'_>, e: NodeId, w: &PmaWeights, mask: &[bool]) -> Result<NodeId> {
    if g.value(e).rows() == 0 {
        return Err(Error::EmptySet("pooling an empty set".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptySet("pooling a fully padded set".into()));
    }
    let a = &w.attn;
    let (seeds, wq, wk, wv, wo) = (
        g.param(w.seeds),
        g.param(a.w_q),
        g.param(a.w_k),
        g.param(a.w_v),
        g.param(a.w_o),
    );
    let q_all = g.matmul(seeds, wq)?;
    let k = g.matmul(e, wk)?;
    let v = g.matmul(e, wv)?;
    let d = g.value(k).cols();
    let hw = d / a.n_heads;
    let scale = (hw as f64).sqrt();
    let key_mask = Mask::columns(1, mask);
    let mut heads = Vec::with_capacity(a.n_heads);
    for h in 0..a.n_heads {
        let qh = g.slice_rows(q_all, h, 1)?;
        let qh = g.slice_cols(qh, h * hw, hw)?;
        let kh = g.slice_cols(k, h * hw, hw)?;
        let vh = g.slice_cols(v, h * hw, hw)?;
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, 1.0 / scale);
        let att = g.softmax_rows(scores, Some(&key_mask))?;
        heads.push(g.matmul(att, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(cat, wo)
}

/// `(E | s)`: the set vector becomes the final row.
pub fn augment(g: &mut Graph<'_>, e: NodeId, s: NodeId) -> Result<NodeId> {
    if g.value(s).rows() != 1 {
        return Err(Error::Shape("set vector must be a single row".into()));
    }
    g.concat_rows(&[e, s])
}

/// Inverse of [`augment`]: last row is the set vector, the rest are elements.
pub fn split(g: &mut Graph<'_>, s_pi: NodeId) -> Result<(NodeId, NodeId)> {
    let rows = g.value(s_pi).rows();
    if rows < 2 {
        return Err(Error::Shape(format!(
            "split needs at least 2 rows, got {rows}"
        )));
    }
    let e = g.slice_rows(s_pi, 0, rows - 1)?;
    let s = g.slice_rows(s_pi, rows - 1, 1)?;
    Ok((e, s))
}

/// One interdependence layer:
/// `sigma((S W^Q)(S W^K)^T / sqrt(d_model)) S W^V` per head, heads
/// concatenated and projected, then optional residual and layer norm.
/// `mask` covers every row of `s_pi`; for augmented input the set row must
/// be kept.
pub fn sit_layer(
    g: &mut Graph<'_>,
    s_pi: NodeId,
    w: &SitLayerWeights,
    cfg: &EncoderConfig,
    mask: &[bool],
    dropout: &mut Dropout<'_>,
) -> Result<NodeId> {
    let a = &w.attn;
    let (wq, wk, wv, wo) = (g.param(a.w_q), g.param(a.w_k), g.param(a.w_v), g.param(a.w_o));
    let q = g.matmul(s_pi, wq)?;
    let k = g.matmul(s_pi, wk)?;
    let v = g.matmul(s_pi, wv)?;
    let scale = (cfg.d_model as f64).sqrt();
    let mut out = attend(g, q, k, v, wo, a.n_heads, scale, cfg.sigma, mask, dropout)?;
    if cfg.use_residual {
        out = g.add(out, s_pi)?;
    }
    if cfg.use_layer_norm {
        let (gain, bias) = (g.param(w.ln_gain), g.param(w.ln_bias));
        out = g.layer_norm(out, gain, bias, 1e-5)?;
    }
    Ok(out)
}

/// Full encoder stack on an `n x d_input` input. `mask[i]` is false for
/// padding rows; at least one row must be real.
pub fn encode_set_graph(
    g: &mut Graph<'_>,
    x: NodeId,
    w: &EncoderWeights,
    cfg: &EncoderConfig,
    mask: &[bool],
    dropout: &mut Dropout<'_>,
) -> Result<EncodedNodes> {
    let n = g.value(x).rows();
    if n == 0 || !mask.iter().any(|&m| m) {
        return Err(Error::EmptySet("encoding a set with no elements".into()));
    }
    if mask.len() != n {
        return Err(Error::Shape(format!("mask length {} for {n} rows", mask.len())));
    }
    let (iw, ib) = (g.param(w.input_w), g.param(w.input_b));
    let h = g.matmul(x, iw)?;
    let h = g.add_row(h, ib)?;
    let e = encode_elements(g, h, &w.elements, mask)?;
    let s = pma(g, e, &w.pma, mask)?;
    if w.sit.is_empty() {
        return Ok(EncodedNodes { elements: e, set: s });
    }

    if cfg.augment_set {
        let mut aug_mask = mask.to_vec();
        aug_mask.push(true);
        let mut s_pi = augment(g, e, s)?;
        for layer in &w.sit {
            s_pi = sit_layer(g, s_pi, layer, cfg, &aug_mask, dropout)?;
        }
        let (e, s) = split(g, s_pi)?;
        Ok(EncodedNodes { elements: e, set: s })
    } else {
        let mut e = e;
        for layer in &w.sit {
            e = sit_layer(g, e, layer, cfg, mask, dropout)?;
        }
        let s = pma(g, e, &w.pma, mask)?;
        Ok(EncodedNodes { elements: e, set: s })
    }
}

/// Inference-mode encoding (no dropout) returning plain matrices.
pub fn encode_set(
    store: &ParameterStore,
    w: &EncoderWeights,
    cfg: &EncoderConfig,
    x: &Matrix,
    mask: &[bool],
) -> Result<EncodedSet> {
    let mut g = Graph::new(store);
    let xn = g.constant(x.clone());
    let out = encode_set_graph(&mut g, xn, w, cfg, mask, &mut Dropout::off())?;
    Ok(EncodedSet {
        elements: g.value(out.elements).clone(),
        set: g.value(out.set).clone(),
        pad_mask: mask.to_vec(),
    })
}
