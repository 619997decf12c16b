//! Scaled-dot and multi-head attention, entity-aware attention (EA),
//! relation-aware attention (RA) and the entity-and-relation aware
//! contextual block (ERCB) that composes them.
//!
//! Batched inputs are `[batch, rows, d]`; unbatched `[rows, d]` inputs are
//! accepted wherever the batch extent would be 1.

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{ReduceMode, Tape, Tensor, Var};

/// Per-key validity, one row of flags per batch item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    batch: usize,
    keys: usize,
    valid: Vec<bool>,
}

impl AttentionMask {
    /// Every batch item must keep at least one valid key.
    pub fn new(batch: usize, keys: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * keys || keys == 0 {
            return Err(Error::Shape {
                op: "attention_mask",
                left: vec![batch, keys],
                right: vec![valid.len()],
            });
        }
        if valid.chunks_exact(keys).any(|row| !row.iter().any(|&v| v)) {
            return Err(Error::FullyMasked);
        }
        Ok(Self { batch, keys, valid })
    }

    pub fn all(batch: usize, keys: usize) -> Self {
        Self {
            batch,
            keys,
            valid: vec![true; batch * keys],
        }
    }

    /// Keeps the first `lens[b]` keys of each batch item.
    pub fn from_lengths(keys: usize, lens: &[usize]) -> Result<Self> {
        let valid = lens.iter().flat_map(|&n| (0..keys).map(move |k| k < n)).collect();
        Self::new(lens.len(), keys, valid)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn flags(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, batch: usize, key: usize) -> bool {
        self.valid[batch * self.keys + key]
    }

    pub fn count(&self, batch: usize) -> usize {
        self.valid[batch * self.keys..(batch + 1) * self.keys]
            .iter()
            .filter(|&&v| v)
            .count()
    }

    /// Mask reordered by `perm` within every batch item: new key `k` is old
    /// key `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.keys);
        let mut valid = Vec::with_capacity(self.valid.len());
        for b in 0..self.batch {
            valid.extend(perm.iter().map(|&p| self.valid[b * self.keys + p]));
        }
        Self {
            batch: self.batch,
            keys: self.keys,
            valid,
        }
    }
}

/// Output of an attention call together with its weight map(s).
#[derive(Clone, Debug)]
pub struct Attended {
    pub output: Var,
    /// One `[batch, queries, keys]` map per head.
    pub weights: Vec<Var>,
}

fn batched(tape: &mut Tape, v: Var) -> Result<(Var, bool)> {
    match tape.shape(v).len() {
        3 => Ok((v, false)),
        2 => {
            let s = tape.shape(v).to_vec();
            Ok((tape.reshape(v, &[1, s[0], s[1]])?, true))
        }
        _ => Err(Error::Shape {
            op: "attention",
            left: tape.shape(v).to_vec(),
            right: vec![],
        }),
    }
}

fn unbatched(tape: &mut Tape, v: Var, squeeze: bool) -> Result<Var> {
    if squeeze {
        let s = tape.shape(v).to_vec();
        tape.reshape(v, &s[1..])
    } else {
        Ok(v)
    }
}

/// `softmax(Q·Kᵀ/√d)·V` with masked keys excluded from the softmax.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &AttentionMask) -> Result<Attended> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    let rank = sq.len();
    if rank < 2 || sk.len() != rank || sv.len() != rank || sq[rank - 1] != sk[rank - 1] || sk[rank - 2] != sv[rank - 2] {
        return Err(Error::Shape {
            op: "scaled_dot_attention",
            left: sq,
            right: sk,
        });
    }
    let batch = if rank == 3 { sq[0] } else { 1 };
    if mask.batch() != batch || mask.keys() != sk[rank - 2] {
        return Err(Error::Shape {
            op: "scaled_dot_attention",
            left: sk,
            right: vec![mask.batch(), mask.keys()],
        });
    }
    let d = sq[rank - 1] as f64;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / d.sqrt());
    let weights = tape.masked_softmax(scores, Some(mask.flags()))?;
    let output = tape.matmul(weights, v)?;
    Ok(Attended {
        output,
        weights: vec![weights],
    })
}

/// Per-head projections `W_q, W_k, W_v` (`d_h × d` each) and the output
/// projection `W_out` (`d × H·d_h`).
#[derive(Clone, Debug)]
pub struct MultiHeadWeights {
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wout: ParamId,
}

impl MultiHeadWeights {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let mut proj = |kind: &str, rng: &mut Rng| -> Result<Vec<ParamId>> {
            (0..heads)
                .map(|h| store.add_weight(format!("{prefix}.{kind}.{h}"), dh, d, rng))
                .collect()
        };
        let wq = proj("wq", rng)?;
        let wk = proj("wk", rng)?;
        let wv = proj("wv", rng)?;
        let wout = store.add_weight(format!("{prefix}.wout"), d, heads * dh, rng)?;
        Ok(Self {
            heads,
            head_dim: dh,
            wq,
            wk,
            wv,
            wout,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::with_capacity(3 * self.heads + 1);
        out.extend(&self.wq);
        out.extend(&self.wk);
        out.extend(&self.wv);
        out.push(self.wout);
        out
    }
}

/// `W_out · [head_1, …, head_H]` with `head_i = Attn(W_q⁽ⁱ⁾Q, W_k⁽ⁱ⁾K, W_v⁽ⁱ⁾V)`.
pub fn multi_head_attention(
    tape: &mut Tape,
    p: &Binding,
    w: &MultiHeadWeights,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask,
) -> Result<Attended> {
    let mut heads = Vec::with_capacity(w.heads);
    let mut weights = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = tape.linear(q, p.var(w.wq[h]), None)?;
        let kh = tape.linear(k, p.var(w.wk[h]), None)?;
        let vh = tape.linear(v, p.var(w.wv[h]), None)?;
        let a = scaled_dot_attention(tape, qh, kh, vh, mask)?;
        heads.push(a.output);
        weights.extend(a.weights);
    }
    let joined = if heads.len() == 1 { heads[0] } else { tape.concat(&heads)? };
    let output = tape.linear(joined, p.var(w.wout), None)?;
    Ok(Attended { output, weights })
}

/// Entity-aware attention: queries from `x`, keys and values from the
/// other modality `y`.
pub fn entity_aware_attention(
    tape: &mut Tape,
    p: &Binding,
    w: &MultiHeadWeights,
    x: Var,
    y: Var,
    y_mask: &AttentionMask,
) -> Result<Attended> {
    multi_head_attention(tape, p, w, x, y, y, y_mask)
}

/// `relu(W·(f_i − f_j) + b)` with a square `W`.
#[derive(Clone, Debug)]
pub struct RelationMlp {
    pub w: ParamId,
    pub b: ParamId,
}

impl RelationMlp {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            w: store.add_weight(format!("{prefix}.w"), d, d, rng)?,
            b: store.add_zeros(format!("{prefix}.b"), d)?,
        })
    }
}

/// Pre-activation `W·(f_i − f_j) + b`.
pub fn relation_preactivation(tape: &mut Tape, p: &Binding, r: &RelationMlp, fi: Var, fj: Var) -> Result<Var> {
    let diff = tape.sub(fi, fj)?;
    tape.linear(diff, p.var(r.w), Some(p.var(r.b)))
}

/// Asymmetric pairwise relation feature `r(f_i, f_j)`.
pub fn relation_representation(tape: &mut Tape, p: &Binding, r: &RelationMlp, fi: Var, fj: Var) -> Result<Var> {
    let pre = relation_preactivation(tape, p, r, fi, fj)?;
    Ok(tape.relu(pre))
}

/// Relation MLP plus the single-head projections that let relation rows
/// attend over words.
#[derive(Clone, Debug)]
pub struct RelationWeights {
    pub mlp: RelationMlp,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl RelationWeights {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            mlp: RelationMlp::init(store, &format!("{prefix}.rel"), d, rng)?,
            wq: store.add_weight(format!("{prefix}.wq"), d, d, rng)?,
            wk: store.add_weight(format!("{prefix}.wk"), d, d, rng)?,
            wv: store.add_weight(format!("{prefix}.wv"), d, d, rng)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.mlp.w, self.mlp.b, self.wq, self.wk, self.wv]
    }
}

/// Relation-aware attention.
///
/// For every object `i`, the rows `r(f_i, f_j)` over all valid `j` (the
/// self-pair included) attend over the words; the attended rows are then
/// reduced by a channel-wise max to one vector per object.
///
/// The returned weight map is `[batch, n·n, m]`, row `i·n + j` holding the
/// word distribution of pair `(i, j)`.
pub fn relation_aware_attention(
    tape: &mut Tape,
    p: &Binding,
    w: &RelationWeights,
    f: Var,
    l: Var,
    object_mask: &AttentionMask,
    word_mask: &AttentionMask,
) -> Result<Attended> {
    let (f, squeeze) = batched(tape, f)?;
    let (l, _) = batched(tape, l)?;
    let s = tape.shape(f).to_vec();
    let (batch, n, d) = (s[0], s[1], s[2]);
    if object_mask.batch() != batch || object_mask.keys() != n {
        return Err(Error::Shape {
            op: "relation_aware_attention",
            left: s,
            right: vec![object_mask.batch(), object_mask.keys()],
        });
    }
    let mut left = Vec::with_capacity(batch * n * n);
    let mut right = Vec::with_capacity(batch * n * n);
    for b in 0..batch {
        for i in 0..n {
            for j in 0..n {
                left.push(b * n + i);
                right.push(b * n + j);
            }
        }
    }
    let fi = tape.gather_rows(f, &left)?;
    let fj = tape.gather_rows(f, &right)?;
    let r = relation_representation(tape, p, &w.mlp, fi, fj)?;
    let r = tape.reshape(r, &[batch, n * n, d])?;
    let q = tape.linear(r, p.var(w.wq), None)?;
    let k = tape.linear(l, p.var(w.wk), None)?;
    let v = tape.linear(l, p.var(w.wv), None)?;
    let att = scaled_dot_attention(tape, q, k, v, word_mask)?;
    let rows = tape.reshape(att.output, &[batch * n, n, d])?;
    // pair (i, j) takes part in object i's aggregate iff j is a valid object
    let mut pair_mask = Vec::with_capacity(batch * n * n);
    for b in 0..batch {
        for _ in 0..n {
            pair_mask.extend((0..n).map(|j| object_mask.is_valid(b, j)));
        }
    }
    let agg = tape.reduce(rows, 1, ReduceMode::Max, Some(&pair_mask))?;
    let out = tape.reshape(agg, &[batch, n, d])?;
    let output = unbatched(tape, out, squeeze)?;
    Ok(Attended {
        output,
        weights: att.weights,
    })
}

#[derive(Clone, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_ones(format!("{prefix}.gamma"), d)?,
            beta: store.add_zeros(format!("{prefix}.beta"), d)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, p: &Binding, x: Var, eps: f64) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), eps)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Two linear layers with a rectifier in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn init(store: &mut ParamStore, prefix: &str, din: usize, hidden: usize, dout: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            w1: store.add_weight(format!("{prefix}.w1"), hidden, din, rng)?,
            b1: store.add_zeros(format!("{prefix}.b1"), hidden)?,
            w2: store.add_weight(format!("{prefix}.w2"), dout, hidden, rng)?,
            b2: store.add_zeros(format!("{prefix}.b2"), dout)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let h = tape.linear(x, p.var(self.w1), Some(p.var(self.b1)))?;
        let h = tape.relu(h);
        tape.linear(h, p.var(self.w2), Some(p.var(self.b2)))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// Which sublayers of a block run. A disabled sublayer is bypassed along
/// with its add-and-norm, so its input passes through unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModuleSwitches {
    pub self_attention: bool,
    pub ea_lang_to_vis: bool,
    pub ea_vis_to_lang: bool,
    pub relation: bool,
}

impl Default for ModuleSwitches {
    fn default() -> Self {
        Self {
            self_attention: true,
            ea_lang_to_vis: true,
            ea_vis_to_lang: true,
            relation: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlockVariant {
    /// EA and RA read the same input and are fused afterwards.
    #[default]
    Parallel,
    /// RA reads the EA output.
    Stacked,
}

impl BlockVariant {
    pub fn name(self) -> &'static str {
        match self {
            BlockVariant::Parallel => "parallel",
            BlockVariant::Stacked => "stacked",
        }
    }
}

impl std::str::FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Self::Parallel),
            "stacked" => Ok(Self::Stacked),
            other => Err(Error::Config(format!("unknown block variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOptions {
    pub variant: BlockVariant,
    pub switches: ModuleSwitches,
    pub eps: f64,
    pub record_trace: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            variant: BlockVariant::Parallel,
            switches: ModuleSwitches::default(),
            eps: 1e-5,
            record_trace: false,
        }
    }
}

/// Weights of one entity-and-relation aware contextual block.
#[derive(Clone, Debug)]
pub struct ErcbWeights {
    pub sa_vis: MultiHeadWeights,
    pub sa_vis_norm: NormParams,
    pub sa_lang: MultiHeadWeights,
    pub sa_lang_norm: NormParams,
    pub ea_lv: MultiHeadWeights,
    pub ea_lv_norm: NormParams,
    pub ra: RelationWeights,
    pub ra_norm: NormParams,
    pub fuse_ffn: FeedForward,
    pub out_norm: NormParams,
    pub ea_vl: MultiHeadWeights,
    pub ea_vl_norm: NormParams,
    pub lang_ffn: FeedForward,
    pub lang_ffn_norm: NormParams,
}

impl ErcbWeights {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, d_ff: usize, rng: &mut Rng) -> Result<Self> {
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            sa_vis: MultiHeadWeights::init(store, &n("sa_v"), d, heads, rng)?,
            sa_vis_norm: NormParams::init(store, &n("sa_v.ln"), d)?,
            sa_lang: MultiHeadWeights::init(store, &n("sa_l"), d, heads, rng)?,
            sa_lang_norm: NormParams::init(store, &n("sa_l.ln"), d)?,
            ea_lv: MultiHeadWeights::init(store, &n("ea_lv"), d, heads, rng)?,
            ea_lv_norm: NormParams::init(store, &n("ea_lv.ln"), d)?,
            ra: RelationWeights::init(store, &n("ra"), d, rng)?,
            ra_norm: NormParams::init(store, &n("ra.ln"), d)?,
            fuse_ffn: FeedForward::init(store, &n("fuse_ffn"), 2 * d, d_ff, d, rng)?,
            out_norm: NormParams::init(store, &n("out.ln"), d)?,
            ea_vl: MultiHeadWeights::init(store, &n("ea_vl"), d, heads, rng)?,
            ea_vl_norm: NormParams::init(store, &n("ea_vl.ln"), d)?,
            lang_ffn: FeedForward::init(store, &n("lang_ffn"), d, d_ff, d, rng)?,
            lang_ffn_norm: NormParams::init(store, &n("lang_ffn.ln"), d)?,
        })
    }

    /// Parameters owned by sublayers that `switches` turn off.
    pub fn disabled_params(&self, switches: &ModuleSwitches) -> Vec<ParamId> {
        let mut out = Vec::new();
        if !switches.self_attention {
            out.extend(self.sa_vis.params());
            out.extend(self.sa_vis_norm.params());
            out.extend(self.sa_lang.params());
            out.extend(self.sa_lang_norm.params());
        }
        if !switches.ea_lang_to_vis {
            out.extend(self.ea_lv.params());
            out.extend(self.ea_lv_norm.params());
        }
        if !switches.relation {
            out.extend(self.ra.params());
            out.extend(self.ra_norm.params());
        }
        if !switches.ea_vis_to_lang {
            out.extend(self.ea_vl.params());
            out.extend(self.ea_vl_norm.params());
        }
        out
    }
}

/// Attention maps and intermediate features of one block.
#[derive(Clone, Debug, Default)]
pub struct LayerTrace {
    /// Per head, `[batch, n, m]`: objects attending over words.
    pub ea_lang_to_vis: Vec<Tensor>,
    /// Per head, `[batch, m, n]`: words attending over objects.
    pub ea_vis_to_lang: Vec<Tensor>,
    /// `[batch, n·n, m]`: relation pair `(i, j)` at row `i·n + j`.
    pub relation: Option<Tensor>,
    pub g_entity: Option<Tensor>,
    pub g_relation: Option<Tensor>,
    pub joint: Option<Tensor>,
    pub visual_out: Option<Tensor>,
}

/// Per-block traces of a whole forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub visual: Var,
    pub linguistic: Var,
    pub trace: Option<LayerTrace>,
}

/// One ERCB step over visual features `f_v` (`[batch, n, d]`) and
/// linguistic features `f_l` (`[batch, m, d]`).
///
/// 1. self-attention on each modality (add and norm);
/// 2. `f^E` = EA(words → objects) and `f^R` = RA;
/// 3. `g^E = LN(f^E + f)`, `g^R = LN(f^R + f)`;
/// 4. `f^J = FFN([g^E, g^R])`;
/// 5. `f' = LN(f^J + g^E)`;
/// 6. words: EA(objects → words) then their own FFN, each with add and norm.
///
/// In the stacked variant RA reads `g^E` instead of `f`.
#[allow(clippy::too_many_arguments)]
pub fn ercb_forward(
    tape: &mut Tape,
    p: &Binding,
    w: &ErcbWeights,
    f_v: Var,
    f_l: Var,
    object_mask: &AttentionMask,
    word_mask: &AttentionMask,
    opts: &BlockOptions,
) -> Result<BlockOutput> {
    let sw = opts.switches;
    let eps = opts.eps;
    let mut trace = opts.record_trace.then(LayerTrace::default);

    let (f, f_lang) = if sw.self_attention {
        let sv = multi_head_attention(tape, p, &w.sa_vis, f_v, f_v, f_v, object_mask)?;
        let v = tape.add(sv.output, f_v)?;
        let v = w.sa_vis_norm.apply(tape, p, v, eps)?;
        let sl = multi_head_attention(tape, p, &w.sa_lang, f_l, f_l, f_l, word_mask)?;
        let l = tape.add(sl.output, f_l)?;
        let l = w.sa_lang_norm.apply(tape, p, l, eps)?;
        (v, l)
    } else {
        (f_v, f_l)
    };

    let g_e = if sw.ea_lang_to_vis {
        let ea = entity_aware_attention(tape, p, &w.ea_lv, f, f_lang, word_mask)?;
        if let Some(t) = trace.as_mut() {
            t.ea_lang_to_vis = ea.weights.iter().map(|&v| tape.value(v).clone()).collect();
        }
        let s = tape.add(ea.output, f)?;
        w.ea_lv_norm.apply(tape, p, s, eps)?
    } else {
        f
    };

    let g_r = if sw.relation {
        let ra_input = match opts.variant {
            BlockVariant::Parallel => f,
            BlockVariant::Stacked => g_e,
        };
        let ra = relation_aware_attention(tape, p, &w.ra, ra_input, f_lang, object_mask, word_mask)?;
        if let Some(t) = trace.as_mut() {
            t.relation = Some(tape.value(ra.weights[0]).clone());
        }
        let s = tape.add(ra.output, f)?;
        w.ra_norm.apply(tape, p, s, eps)?
    } else {
        f
    };

    let cat = tape.concat(&[g_e, g_r])?;
    let joint = w.fuse_ffn.apply(tape, p, cat)?;
    let s = tape.add(joint, g_e)?;
    let visual = w.out_norm.apply(tape, p, s, eps)?;

    let l = if sw.ea_vis_to_lang {
        let ea = entity_aware_attention(tape, p, &w.ea_vl, f_lang, f, object_mask)?;
        if let Some(t) = trace.as_mut() {
            t.ea_vis_to_lang = ea.weights.iter().map(|&v| tape.value(v).clone()).collect();
        }
        let s = tape.add(ea.output, f_lang)?;
        w.ea_vl_norm.apply(tape, p, s, eps)?
    } else {
        f_lang
    };
    let h = w.lang_ffn.apply(tape, p, l)?;
    let s = tape.add(h, l)?;
    let linguistic = w.lang_ffn_norm.apply(tape, p, s, eps)?;

    if let Some(t) = trace.as_mut() {
        t.g_entity = Some(tape.value(g_e).clone());
        t.g_relation = Some(tape.value(g_r).clone());
        t.joint = Some(tape.value(joint).clone());
        t.visual_out = Some(tape.value(visual).clone());
    }
    Ok(BlockOutput {
        visual,
        linguistic,
        trace,
    })
}

/// [`ercb_forward`] with EA and RA applied one after the other.
#[allow(clippy::too_many_arguments)]
pub fn ercb_forward_stacked(
    tape: &mut Tape,
    p: &Binding,
    w: &ErcbWeights,
    f_v: Var,
    f_l: Var,
    object_mask: &AttentionMask,
    word_mask: &AttentionMask,
    opts: &BlockOptions,
) -> Result<BlockOutput> {
    let opts = BlockOptions {
        variant: BlockVariant::Stacked,
        ..*opts
    };
    ercb_forward(tape, p, w, f_v, f_l, object_mask, word_mask, &opts)
}
