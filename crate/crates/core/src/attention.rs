//! Multi-head self-attention over the concatenated query/exemplar sequence and
//! the decoupled four-block view of its attention map.
//!
//! For a sequence of `M` query tokens followed by `K·M_z` exemplar tokens, each
//! head's `T×T` attention map (with `T = M + K·M_z`) splits into
//!
//! ```text
//! [ a_query (M×M)      a_class (M×K·M_z)     ]
//! [ a_match (K·M_z×M)  a_exp (K·M_z×K·M_z)   ]
//! ```
//!
//! `a_query`/`a_exp` are the within-segment self-attentions, `a_match` is the
//! exemplar-to-query cross-attention used as the similarity signal, and
//! `a_class` carries exemplar information back into the query tokens.

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{ParamRng, Tensor, INIT_STD};

pub const LN_EPS: f64 = 1e-6;

/// Token matrix plus the segment bookkeeping that stays fixed through every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub m_query: usize,
    pub m_exemplar_each: usize,
    pub k_shots: usize,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, m_query: usize, m_exemplar_each: usize, k_shots: usize) -> Result<Self> {
        let t = m_query + m_exemplar_each * k_shots;
        match tokens.shape() {
            [n, _] if *n == t => Ok(TokenSequence { tokens, m_query, m_exemplar_each, k_shots }),
            s => Err(dim_err!("token matrix {:?} does not hold {m_query} + {k_shots}·{m_exemplar_each} tokens", s)),
        }
    }

    pub fn len(&self) -> usize {
        self.m_query + self.exemplar_tokens()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn exemplar_tokens(&self) -> usize {
        self.m_exemplar_each * self.k_shots
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Tape-resident token sequence.
#[derive(Clone, Copy, Debug)]
pub struct SeqVar {
    pub tokens: Var,
    pub m_query: usize,
    pub m_exemplar_each: usize,
    pub k_shots: usize,
}

impl SeqVar {
    pub fn len(&self) -> usize {
        self.m_query + self.m_exemplar_each * self.k_shots
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Head-resolved attention split into its four blocks. Each field is
/// `[heads, rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledAttention {
    pub a_query: Tensor,
    pub a_class: Tensor,
    pub a_match: Tensor,
    pub a_exp: Tensor,
}

impl DecoupledAttention {
    pub fn heads(&self) -> usize {
        self.a_query.shape()[0]
    }

    pub fn m_query(&self) -> usize {
        self.a_query.shape()[1]
    }

    pub fn m_exemplar_total(&self) -> usize {
        self.a_exp.shape()[1]
    }
}

/// Pure slicing of a `[heads, T, T]` map into its four blocks; rows keep their
/// full-row softmax normalization.
pub fn decouple(full_map: &Tensor, m: usize, mz_total: usize) -> Result<DecoupledAttention> {
    let (heads, t) = match full_map.shape() {
        [h, r, c] if r == c => (*h, *r),
        s => return Err(dim_err!("attention map must be [heads, T, T], got {:?}", s)),
    };
    if t != m + mz_total {
        return Err(dim_err!("attention map has {t} tokens but M + K·M_z = {}", m + mz_total));
    }
    let data = full_map.data();
    let block = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| {
        let mut out = Vec::with_capacity(heads * rows.len() * cols.len());
        for h in 0..heads {
            for r in rows.clone() {
                let base = (h * t + r) * t;
                out.extend_from_slice(&data[base + cols.start..base + cols.end]);
            }
        }
        Tensor::new(vec![heads, rows.len(), cols.len()], out)
    };
    Ok(DecoupledAttention {
        a_query: block(0..m, 0..m)?,
        a_class: block(0..m, m..t)?,
        a_match: block(m..t, 0..m)?,
        a_exp: block(m..t, m..t)?,
    })
}

/// Reassembles the `[heads, T, T]` map from its blocks.
pub fn retile(att: &DecoupledAttention) -> Tensor {
    let (heads, m, mz) = (att.heads(), att.m_query(), att.m_exemplar_total());
    let t = m + mz;
    let mut out = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for r in 0..m {
            out.extend_from_slice(&att.a_query.data()[(h * m + r) * m..(h * m + r + 1) * m]);
            out.extend_from_slice(&att.a_class.data()[(h * m + r) * mz..(h * m + r + 1) * mz]);
        }
        for r in 0..mz {
            out.extend_from_slice(&att.a_match.data()[(h * mz + r) * m..(h * mz + r + 1) * m]);
            out.extend_from_slice(&att.a_exp.data()[(h * mz + r) * mz..(h * mz + r + 1) * mz]);
        }
    }
    Tensor::new(vec![heads, t, t], out).expect("block shapes are consistent")
}

/// One similarity score per query token: the mean of `a_match` over heads and
/// over all exemplar-token rows.
pub fn match_similarity(att: &DecoupledAttention) -> Result<Tensor> {
    let (heads, m, mz) = (att.heads(), att.m_query(), att.m_exemplar_total());
    if mz == 0 {
        return Err(Error::Config("match similarity needs at least one exemplar".into()));
    }
    let mut out = vec![0.0; m];
    for h in 0..heads {
        let mut head = vec![0.0; m];
        for r in 0..mz {
            let row = &att.a_match.data()[(h * mz + r) * m..(h * mz + r + 1) * m];
            head.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().zip(&head).for_each(|(o, v)| *o += v / mz as f64);
    }
    out.iter_mut().for_each(|v| *v /= heads as f64);
    Ok(Tensor::from_vec(out))
}

/// Per-query-token summaries of one layer, each of length `M`: the row-mean
/// of `a_query` (mass received by each query token), the row-mean of
/// `a_match`, and the row-mean of `a_class` transposed (mass each query token
/// sends to the exemplars). All are averaged over heads.
pub fn token_maps(att: &DecoupledAttention) -> [Vec<f64>; 3] {
    let (heads, m, mz) = (att.heads(), att.m_query(), att.m_exemplar_total());
    let mut query = vec![0.0; m];
    let mut matched = vec![0.0; m];
    let mut class = vec![0.0; m];
    for h in 0..heads {
        for r in 0..m {
            let row = &att.a_query.data()[(h * m + r) * m..(h * m + r + 1) * m];
            query.iter_mut().zip(row).for_each(|(o, v)| *o += v / m as f64);
            let row = &att.a_class.data()[(h * m + r) * mz..(h * m + r + 1) * mz];
            class[r] += row.iter().sum::<f64>() / mz.max(1) as f64;
        }
        for r in 0..mz {
            let row = &att.a_match.data()[(h * mz + r) * m..(h * mz + r + 1) * m];
            matched.iter_mut().zip(row).for_each(|(o, v)| *o += v / mz as f64);
        }
    }
    for v in [&mut query, &mut matched, &mut class] {
        v.iter_mut().for_each(|x| *x /= heads as f64);
    }
    [query, matched, class]
}

/// Tape version of [`match_similarity`] over per-head `[T×T]` maps; returns `[1×M]`.
pub fn match_similarity_var(tape: &mut Tape, head_maps: &[Var], m: usize) -> Result<Var> {
    let first = *head_maps.first().ok_or_else(|| Error::Config("no attention heads".into()))?;
    let t = tape.shape(first)[0];
    if t <= m {
        return Err(Error::Config("match similarity needs at least one exemplar".into()));
    }
    let mut acc: Option<Var> = None;
    for &a in head_maps {
        let block = tape.slice(a, &[m..t, 0..m])?;
        let mean = tape.mean_rows(block)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, mean)?,
            None => mean,
        });
    }
    tape.scale(acc.unwrap(), 1.0 / head_maps.len() as f64)
}

/// Pre-norm transformer encoder block: `x + Attn(LN(x))`, then `+ MLP(LN(·))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub dim: usize,
    pub heads: usize,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc1: Tensor,
    pub b_fc1: Tensor,
    pub w_fc2: Tensor,
    pub b_fc2: Tensor,
}

/// Bound parameters of one block on a tape.
#[derive(Clone, Debug)]
pub struct BlockVars {
    dim: usize,
    heads: usize,
    v: [Var; 16],
}

impl BlockVars {
    /// Wraps sixteen already-recorded vars given in [`EncoderBlock::params`] order.
    pub fn from_vars(dim: usize, heads: usize, vars: &[Var]) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        let v: [Var; 16] = vars
            .try_into()
            .map_err(|_| Error::Config(format!("an encoder block binds 16 vars, got {}", vars.len())))?;
        Ok(BlockVars { dim, heads, v })
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AttentionOptions {
    /// Masks the query→exemplar (`a_class`) logits to `-inf` before softmax.
    pub mask_class: bool,
}

/// Per-head softmax maps of one forward pass, each `[T×T]`.
#[derive(Clone, Debug)]
pub struct HeadMaps {
    pub heads: Vec<Var>,
    pub m_query: usize,
}

impl HeadMaps {
    /// Stacks the head maps into `[heads, T, T]` and splits them.
    pub fn decoupled(&self, tape: &Tape) -> Result<DecoupledAttention> {
        let full = self.full_map(tape);
        let t = full.shape()[1];
        decouple(&full, self.m_query, t - self.m_query)
    }

    pub fn full_map(&self, tape: &Tape) -> Tensor {
        let t = self.heads.first().map_or(0, |h| tape.shape(*h)[0]);
        let mut data = Vec::with_capacity(self.heads.len() * t * t);
        for h in &self.heads {
            data.extend_from_slice(tape.value(*h));
        }
        Tensor::new(vec![self.heads.len(), t, t], data).expect("head maps share a shape")
    }
}

impl EncoderBlock {
    pub fn new(dim: usize, heads: usize, rng: &mut ParamRng) -> Result<Self> {
        if heads == 0 || dim == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        let hidden = 4 * dim;
        let mut w = |r: usize, c: usize| Tensor::randn(&[r, c], INIT_STD, rng);
        let (w_q, w_k, w_v, w_o) = (w(dim, dim), w(dim, dim), w(dim, dim), w(dim, dim));
        let (w_fc1, w_fc2) = (w(dim, hidden), w(hidden, dim));
        Ok(EncoderBlock {
            dim,
            heads,
            ln1_gain: Tensor::filled(&[dim], 1.0),
            ln1_bias: Tensor::zeros(&[dim]),
            w_q,
            b_q: Tensor::zeros(&[dim]),
            w_k,
            b_k: Tensor::zeros(&[dim]),
            w_v,
            b_v: Tensor::zeros(&[dim]),
            w_o,
            b_o: Tensor::zeros(&[dim]),
            ln2_gain: Tensor::filled(&[dim], 1.0),
            ln2_bias: Tensor::zeros(&[dim]),
            w_fc1,
            b_fc1: Tensor::zeros(&[hidden]),
            w_fc2,
            b_fc2: Tensor::zeros(&[dim]),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    const NAMES: [&'static str; 16] = [
        "ln1.gain", "ln1.bias", "attn.w_q", "attn.b_q", "attn.w_k", "attn.b_k", "attn.w_v", "attn.b_v", "attn.w_o",
        "attn.b_o", "ln2.gain", "ln2.bias", "mlp.w_fc1", "mlp.b_fc1", "mlp.w_fc2", "mlp.b_fc2",
    ];

    /// Parameters in canonical order.
    pub fn params(&self) -> [(&'static str, &Tensor); 16] {
        let t = [
            &self.ln1_gain, &self.ln1_bias, &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v,
            &self.w_o, &self.b_o, &self.ln2_gain, &self.ln2_bias, &self.w_fc1, &self.b_fc1, &self.w_fc2,
            &self.b_fc2,
        ];
        std::array::from_fn(|i| (Self::NAMES[i], t[i]))
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        let t = [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.w_q, &mut self.b_q, &mut self.w_k, &mut self.b_k,
            &mut self.w_v, &mut self.b_v, &mut self.w_o, &mut self.b_o, &mut self.ln2_gain, &mut self.ln2_bias,
            &mut self.w_fc1, &mut self.b_fc1, &mut self.w_fc2, &mut self.b_fc2,
        ];
        let mut it = t.into_iter();
        std::array::from_fn(|i| (Self::NAMES[i], it.next().unwrap()))
    }

    /// Records the parameters on `tape` (as trainable leaves when `trainable`),
    /// appending their vars to `out` in canonical order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool, out: &mut Vec<Var>) -> Result<BlockVars> {
        let mut v = Vec::with_capacity(16);
        for (_, t) in self.params() {
            v.push(if trainable { tape.param(t)? } else { tape.constant(t)? });
        }
        out.extend_from_slice(&v);
        let v: [Var; 16] = v.try_into().expect("sixteen parameters");
        Ok(BlockVars { dim: self.dim, heads: self.heads, v })
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// One pre-norm block on the tape. Returns the new token matrix and the
/// per-head attention maps.
pub fn block_forward(tape: &mut Tape, seq: &SeqVar, block: &BlockVars, opts: AttentionOptions) -> Result<(SeqVar, HeadMaps)> {
    let [ln1_g, ln1_b, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2] = block.v;
    let t = seq.len();
    let (dim, heads) = (block.dim, block.heads);
    if tape.shape(seq.tokens) != [t, dim] {
        return Err(dim_err!("block expects [{t}, {dim}] tokens, got {:?}", tape.shape(seq.tokens)));
    }
    let dh = dim / heads;
    let h = tape.layer_norm(seq.tokens, ln1_g, ln1_b, LN_EPS)?;
    let q = linear(tape, h, w_q, b_q)?;
    let k = linear(tape, h, w_k, b_k)?;
    let v = linear(tape, h, w_v, b_v)?;
    let mask = (opts.mask_class && seq.m_query < t).then(|| {
        (0..t * t).map(|i| i / t < seq.m_query && i % t >= seq.m_query).collect::<Vec<bool>>()
    });
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for head in 0..heads {
        let cols = head * dh..(head + 1) * dh;
        let qh = tape.slice(q, &[0..t, cols.clone()])?;
        let kh = tape.slice(k, &[0..t, cols.clone()])?;
        let vh = tape.slice(v, &[0..t, cols])?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale)?;
        let a = tape.softmax_rows_masked(logits, mask.clone())?;
        outs.push(tape.matmul(a, vh)?);
        maps.push(a);
    }
    let attn = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    let attn = linear(tape, attn, w_o, b_o)?;
    let x1 = tape.add(seq.tokens, attn)?;
    let h2 = tape.layer_norm(x1, ln2_g, ln2_b, LN_EPS)?;
    let hidden = linear(tape, h2, w_fc1, b_fc1)?;
    let hidden = tape.gelu(hidden)?;
    let mlp = linear(tape, hidden, w_fc2, b_fc2)?;
    let x2 = tape.add(x1, mlp)?;
    Ok((SeqVar { tokens: x2, ..*seq }, HeadMaps { heads: maps, m_query: seq.m_query }))
}

/// Applies `blocks` in order. Returns the final sequence and the head maps of
/// the last block, plus those of every block when `retain_all` is set.
pub fn stack_forward(
    tape: &mut Tape,
    seq: &SeqVar,
    blocks: &[BlockVars],
    opts: AttentionOptions,
    retain_all: bool,
) -> Result<(SeqVar, HeadMaps, Vec<HeadMaps>)> {
    if blocks.is_empty() {
        return Err(Error::Config("encoder stack has no blocks".into()));
    }
    let mut cur = *seq;
    let mut all = Vec::new();
    let mut last = None;
    for b in blocks {
        let (next, maps) = block_forward(tape, &cur, b, opts)?;
        if retain_all {
            all.push(maps.clone());
        }
        last = Some(maps);
        cur = next;
    }
    Ok((cur, last.unwrap(), all))
}

/// Value-level single block: returns the updated sequence and its decoupled attention.
pub fn attention_forward(
    seq: &TokenSequence,
    block: &EncoderBlock,
    opts: AttentionOptions,
) -> Result<(TokenSequence, DecoupledAttention)> {
    stack_blocks(seq, std::slice::from_ref(block), opts)
}

/// Value-level stack: returns the final sequence and the last block's decoupled attention.
pub fn stack_blocks(
    seq: &TokenSequence,
    blocks: &[EncoderBlock],
    opts: AttentionOptions,
) -> Result<(TokenSequence, DecoupledAttention)> {
    if blocks.is_empty() {
        return Err(Error::Config("encoder stack has no blocks".into()));
    }
    for b in blocks {
        if b.dim != seq.dim() {
            return Err(Error::Config(format!("block dim {} vs token dim {}", b.dim, seq.dim())));
        }
    }
    let mut tape = Tape::new();
    let tokens = tape.constant(&seq.tokens)?;
    let mut scratch = Vec::new();
    let bound = blocks.iter().map(|b| b.bind(&mut tape, false, &mut scratch)).collect::<Result<Vec<_>>>()?;
    let sv = SeqVar { tokens, m_query: seq.m_query, m_exemplar_each: seq.m_exemplar_each, k_shots: seq.k_shots };
    let (out, last, _) = stack_forward(&mut tape, &sv, &bound, opts, false)?;
    let att = decouple(&last.full_map(&tape), seq.m_query, seq.exemplar_tokens())?;
    Ok((TokenSequence { tokens: tape.tensor(out.tokens), ..seq.clone() }, att))
}
