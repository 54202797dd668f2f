use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{HeadLayout, LayerLayout};
use super::real::{gelu, gemm, View, ViewMut};
use super::{HeadKind, Model, Real};
use crate::{Error, Result};

/// A padded batch of `size` sequences of `seq_len` tokens, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    pub ids: Vec<u32>,
    pub segments: Vec<u32>,
    pub mask: Vec<u8>,
}

impl Batch {
    /// Stacks rows and trims trailing columns that are padding in every row.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = (&'a [u32], &'a [u32], &'a [u8])>) -> Self {
        let rows: Vec<_> = rows.into_iter().collect();
        let real = rows
            .iter()
            .map(|(_, _, m)| m.iter().rposition(|&v| v == 1).map_or(1, |p| p + 1))
            .max()
            .unwrap_or(1);
        let mut b = Batch {
            size: rows.len(),
            seq_len: real,
            ids: Vec::with_capacity(rows.len() * real),
            segments: Vec::with_capacity(rows.len() * real),
            mask: Vec::with_capacity(rows.len() * real),
        };
        for (ids, seg, mask) in rows {
            b.ids.extend(&ids[..real]);
            b.segments.extend(&seg[..real]);
            b.mask.extend(&mask[..real]);
        }
        b
    }

    pub fn rows(&self) -> usize {
        self.size * self.seq_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from a generator seeded with `dropout_seed`,
    /// activations cached for the backward pass.
    Train { dropout_seed: u64 },
}

/// Row-major `rows x cols` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Logits<T> {
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn argmax(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadLogits<T> {
    /// Masked-LM logits for the requested rows, plus next-sentence logits.
    Pretrain { mlm: Logits<T>, nsp: Option<Logits<T>> },
    /// One row per batch position (`size * seq_len` rows).
    Token(Logits<T>),
    /// One row per sequence, from the first-position representation.
    Seq(Logits<T>),
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    pub x: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Attention probabilities, `size * heads * seq * seq`.
    pub probs: Vec<T>,
    pub probs_drop: Option<Vec<T>>,
    pub ctx: Vec<T>,
    pub attn_drop: Option<Vec<T>>,
    pub ln1: LnCache<T>,
    pub h1: Vec<T>,
    pub ff_pre: Vec<T>,
    pub ff_act: Vec<T>,
    pub ff_drop: Option<Vec<T>>,
    pub ln2: LnCache<T>,
}

#[derive(Debug, Clone)]
pub(crate) enum HeadCache<T> {
    Pretrain {
        rows: Vec<usize>,
        gathered: Vec<T>,
        t_pre: Vec<T>,
        ln: LnCache<T>,
        t_out: Vec<T>,
        /// (cls rows, pooled)
        nsp: Option<(Vec<T>, Vec<T>)>,
    },
    Token {
        drop: Option<Vec<T>>,
        input: Vec<T>,
    },
    Seq {
        cls: Vec<T>,
        pooled: Vec<T>,
        drop: Option<Vec<T>>,
        input: Vec<T>,
    },
}

/// Activations recorded by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub(crate) size: usize,
    pub(crate) seq_len: usize,
    pub(crate) ids: Vec<u32>,
    pub(crate) segments: Vec<u32>,
    pub(crate) mask: Vec<u8>,
    pub(crate) emb_ln: LnCache<T>,
    pub(crate) emb_drop: Option<Vec<T>>,
    pub(crate) layers: Vec<LayerCache<T>>,
    pub(crate) hidden: Vec<T>,
    pub(crate) head: HeadCache<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Normalized (pre-gain) activations of every layer norm in the encoder.
    pub fn normalized_activations(&self) -> Vec<&[T]> {
        let mut out = vec![self.emb_ln.xhat.as_slice()];
        for l in &self.layers {
            out.push(&l.ln1.xhat);
            out.push(&l.ln2.xhat);
        }
        out
    }

    /// Attention probabilities of layer `l`, laid out `size * heads * seq * seq`.
    pub fn attention_probs(&self, l: usize) -> &[T] {
        &self.layers[l].probs
    }

    pub fn hidden(&self) -> &[T] {
        &self.hidden
    }
}

pub struct Forward<T> {
    pub logits: HeadLogits<T>,
    pub cache: Option<ForwardCache<T>>,
}

pub(crate) struct Dropout {
    rng: Option<ChaCha8Rng>,
    p: f64,
}

impl Dropout {
    fn new(mode: Mode, p: f64) -> Self {
        let rng = match mode {
            Mode::Train { dropout_seed } if p > 0.0 => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            _ => None,
        };
        Dropout { rng, p }
    }

    /// Applies inverted dropout in place and returns the scaled mask.
    fn apply<T: Real>(&mut self, x: &mut [T]) -> Option<Vec<T>> {
        let rng = self.rng.as_mut()?;
        let keep = T::c(1.0 / (1.0 - self.p));
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.random::<f64>() < self.p { T::zero() } else { keep })
            .collect();
        for (v, &m) in x.iter_mut().zip(&mask) {
            *v *= m;
        }
        Some(mask)
    }
}

/// `x W + b` for `n` rows.
pub(crate) fn linear<T: Real>(x: &[T], n: usize, din: usize, w: &[T], b: &[T], dout: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(n * dout);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    gemm(T::one(), View::full(x, n, din), View::full(w, din, dout), T::one(), ViewMut::full(&mut y, dout));
    y
}

pub(crate) fn layer_norm<T: Real>(x: &[T], h: usize, g: &[T], b: &[T], eps: f64) -> (Vec<T>, LnCache<T>) {
    let n = x.len() / h;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    for r in 0..n {
        let row = &x[r * h..(r + 1) * h];
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / h as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = T::c(rs);
        for j in 0..h {
            let xh = T::c((row[j].f64() - mean) * rs);
            xhat[r * h + j] = xh;
            y[r * h + j] = xh * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn check_batch<T: Real>(model: &Model<T>, batch: &Batch) -> Result<()> {
    let n = batch.rows();
    if batch.ids.len() != n || batch.segments.len() != n || batch.mask.len() != n {
        return Err(Error::Shape("batch arrays disagree with size x seq_len".into()));
    }
    if batch.seq_len > model.config.max_positions {
        return Err(Error::Shape(format!(
            "sequence length {} exceeds max_positions {}",
            batch.seq_len, model.config.max_positions
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&t| t as usize >= model.config.vocab_size) {
        return Err(Error::Shape(format!("token id {bad} out of range")));
    }
    if batch.segments.iter().any(|&s| s as usize >= model.config.type_vocab) {
        return Err(Error::Shape("segment id out of range".into()));
    }
    for b in 0..batch.size {
        if batch.mask[b * batch.seq_len] != 1 {
            return Err(Error::Shape(format!("sequence {b} has no real first token")));
        }
    }
    Ok(())
}

fn masked_softmax_rows<T: Real>(scores: &mut [T], s: usize, key_mask: &[u8]) {
    for row in scores.chunks_mut(s) {
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if key_mask[j] == 1 && v > max {
                max = v;
            }
        }
        let mut sum = 0.0f64;
        for (j, v) in row.iter_mut().enumerate() {
            if key_mask[j] == 1 {
                *v = (*v - max).exp();
                sum += v.f64();
            } else {
                *v = T::zero();
            }
        }
        let inv = T::c(1.0 / sum);
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

fn layer_forward<T: Real>(
    model: &Model<T>,
    ll: &LayerLayout,
    x: Vec<T>,
    batch: &Batch,
    drop: &mut Dropout,
) -> (Vec<T>, LayerCache<T>) {
    let c = &model.config;
    let (h, a, dh, f) = (c.hidden, c.heads, c.head_dim(), c.ff_dim);
    let (bsz, s) = (batch.size, batch.seq_len);
    let n = bsz * s;
    let q = linear(&x, n, h, model.p(ll.q_w), model.p(ll.q_b), h);
    let k = linear(&x, n, h, model.p(ll.k_w), model.p(ll.k_b), h);
    let v = linear(&x, n, h, model.p(ll.v_w), model.p(ll.v_b), h);

    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::zero(); bsz * a * s * s];
    for b in 0..bsz {
        let key_mask = &batch.mask[b * s..(b + 1) * s];
        for head in 0..a {
            let off = b * s * h + head * dh;
            let poff = (b * a + head) * s * s;
            gemm(
                scale,
                View::new(&q, off, s, dh, h),
                View::new(&k, off, s, dh, h).t(),
                T::zero(),
                ViewMut { data: &mut probs, off: poff, ld: s },
            );
            masked_softmax_rows(&mut probs[poff..poff + s * s], s, key_mask);
        }
    }
    let mut used = probs.clone();
    let probs_drop = drop.apply(&mut used);
    let mut ctx = vec![T::zero(); n * h];
    for b in 0..bsz {
        for head in 0..a {
            let off = b * s * h + head * dh;
            let poff = (b * a + head) * s * s;
            gemm(
                T::one(),
                View::new(&used, poff, s, s, s),
                View::new(&v, off, s, dh, h),
                T::zero(),
                ViewMut { data: &mut ctx, off, ld: h },
            );
        }
    }
    let mut attn = linear(&ctx, n, h, model.p(ll.o_w), model.p(ll.o_b), h);
    let attn_drop = drop.apply(&mut attn);
    for (o, &xi) in attn.iter_mut().zip(&x) {
        *o += xi;
    }
    let (h1, ln1) = layer_norm(&attn, h, model.p(ll.ln1_g), model.p(ll.ln1_b), c.layer_norm_eps);
    let ff_pre = linear(&h1, n, h, model.p(ll.ff1_w), model.p(ll.ff1_b), f);
    let ff_act: Vec<T> = ff_pre.iter().map(|&z| gelu(z)).collect();
    let mut ff = linear(&ff_act, n, f, model.p(ll.ff2_w), model.p(ll.ff2_b), h);
    let ff_drop = drop.apply(&mut ff);
    for (o, &hi) in ff.iter_mut().zip(&h1) {
        *o += hi;
    }
    let (out, ln2) = layer_norm(&ff, h, model.p(ll.ln2_g), model.p(ll.ln2_b), c.layer_norm_eps);
    (
        out,
        LayerCache {
            x,
            q,
            k,
            v,
            probs,
            probs_drop,
            ctx,
            attn_drop,
            ln1,
            h1,
            ff_pre,
            ff_act,
            ff_drop,
            ln2,
        },
    )
}

struct Encoded<T> {
    hidden: Vec<T>,
    emb_ln: LnCache<T>,
    emb_drop: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
}

fn encode<T: Real>(model: &Model<T>, batch: &Batch, drop: &mut Dropout) -> Encoded<T> {
    let c = &model.config;
    let h = c.hidden;
    let lay = &model.layout;
    let (tok, pos, seg) = (model.p(lay.tok), model.p(lay.pos), model.p(lay.seg));
    let n = batch.rows();
    let mut x = vec![T::zero(); n * h];
    for r in 0..n {
        let t = batch.ids[r] as usize;
        let p = r % batch.seq_len;
        let sg = batch.segments[r] as usize;
        let row = &mut x[r * h..(r + 1) * h];
        for j in 0..h {
            row[j] = tok[t * h + j] + pos[p * h + j] + seg[sg * h + j];
        }
    }
    let (mut x, emb_ln) = layer_norm(&x, h, model.p(lay.emb_ln_g), model.p(lay.emb_ln_b), c.layer_norm_eps);
    let emb_drop = drop.apply(&mut x);
    let mut layers = Vec::with_capacity(c.layers);
    for ll in &lay.layers {
        let (out, cache) = layer_forward(model, ll, x, batch, drop);
        layers.push(cache);
        x = out;
    }
    Encoded {
        hidden: x,
        emb_ln,
        emb_drop,
        layers,
    }
}

fn gather_rows<T: Real>(x: &[T], h: usize, rows: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * h);
    for &r in rows {
        out.extend_from_slice(&x[r * h..(r + 1) * h]);
    }
    out
}

fn run_head<T: Real>(
    model: &Model<T>,
    hidden: &[T],
    batch: &Batch,
    mlm_rows: &[usize],
    drop: &mut Dropout,
) -> Result<(HeadLogits<T>, HeadCache<T>)> {
    let c = &model.config;
    let h = c.hidden;
    let lay = &model.layout;
    let cls_rows: Vec<usize> = (0..batch.size).map(|b| b * batch.seq_len).collect();
    let pooler = |cls: &[T]| -> Vec<T> {
        linear(cls, batch.size, h, model.p(lay.pool_w), model.p(lay.pool_b), h)
            .into_iter()
            .map(|v| v.tanh())
            .collect()
    };
    match (&lay.head, model.head) {
        (
            HeadLayout::Pretrain {
                t_w,
                t_b,
                ln_g,
                ln_b,
                out_b,
                out_w,
                nsp,
            },
            _,
        ) => {
            if let Some(&bad) = mlm_rows.iter().find(|&&r| r >= batch.rows()) {
                return Err(Error::Shape(format!("masked row {bad} outside the batch")));
            }
            let m = mlm_rows.len();
            let v = c.vocab_size;
            let gathered = gather_rows(hidden, h, mlm_rows);
            let t_pre = linear(&gathered, m, h, model.p(*t_w), model.p(*t_b), h);
            let t_act: Vec<T> = t_pre.iter().map(|&z| gelu(z)).collect();
            let (t_out, ln) = layer_norm(&t_act, h, model.p(*ln_g), model.p(*ln_b), c.layer_norm_eps);
            let mut logits = Vec::with_capacity(m * v);
            for _ in 0..m {
                logits.extend_from_slice(model.p(*out_b));
            }
            let out_view = match out_w {
                Some(w) => View::full(model.p(*w), h, v),
                None => View::full(model.p(lay.tok), v, h).t(),
            };
            gemm(T::one(), View::full(&t_out, m, h), out_view, T::one(), ViewMut::full(&mut logits, v));
            let (nsp_logits, nsp_cache) = match nsp {
                Some((w, b)) => {
                    let cls = gather_rows(hidden, h, &cls_rows);
                    let pooled = pooler(&cls);
                    let l = linear(&pooled, batch.size, h, model.p(*w), model.p(*b), 2);
                    (
                        Some(Logits {
                            rows: batch.size,
                            cols: 2,
                            data: l,
                        }),
                        Some((cls, pooled)),
                    )
                }
                None => (None, None),
            };
            Ok((
                HeadLogits::Pretrain {
                    mlm: Logits {
                        rows: m,
                        cols: v,
                        data: logits,
                    },
                    nsp: nsp_logits,
                },
                HeadCache::Pretrain {
                    rows: mlm_rows.to_vec(),
                    gathered,
                    t_pre,
                    ln,
                    t_out,
                    nsp: nsp_cache,
                },
            ))
        }
        (HeadLayout::Classifier { w, b }, HeadKind::TokenClassify { classes }) => {
            let mut input = hidden.to_vec();
            let dmask = drop.apply(&mut input);
            let n = batch.rows();
            let l = linear(&input, n, h, model.p(*w), model.p(*b), classes);
            Ok((
                HeadLogits::Token(Logits {
                    rows: n,
                    cols: classes,
                    data: l,
                }),
                HeadCache::Token { drop: dmask, input },
            ))
        }
        (HeadLayout::Classifier { w, b }, HeadKind::SeqClassify { classes }) => {
            let cls = gather_rows(hidden, h, &cls_rows);
            let pooled = pooler(&cls);
            let mut input = pooled.clone();
            let dmask = drop.apply(&mut input);
            let l = linear(&input, batch.size, h, model.p(*w), model.p(*b), classes);
            Ok((
                HeadLogits::Seq(Logits {
                    rows: batch.size,
                    cols: classes,
                    data: l,
                }),
                HeadCache::Seq {
                    cls,
                    pooled,
                    drop: dmask,
                    input,
                },
            ))
        }
        _ => Err(Error::Shape("head layout does not match head kind".into())),
    }
}

/// Runs the encoder and the model's head. `mlm_rows` lists flattened
/// `(sequence * seq_len + position)` rows scored by the masked-LM head and is
/// ignored by the classification heads.
pub fn forward<T: Real>(model: &Model<T>, batch: &Batch, mlm_rows: &[usize], mode: Mode) -> Result<Forward<T>> {
    check_batch(model, batch)?;
    let mut drop = Dropout::new(mode, model.config.dropout);
    let enc = encode(model, batch, &mut drop);
    let (logits, head) = run_head(model, &enc.hidden, batch, mlm_rows, &mut drop)?;
    let cache = match mode {
        Mode::Eval => None,
        Mode::Train { .. } => Some(ForwardCache {
            size: batch.size,
            seq_len: batch.seq_len,
            ids: batch.ids.clone(),
            segments: batch.segments.clone(),
            mask: batch.mask.clone(),
            emb_ln: enc.emb_ln,
            emb_drop: enc.emb_drop,
            layers: enc.layers,
            hidden: enc.hidden,
            head,
        }),
    };
    Ok(Forward { logits, cache })
}

/// Final-layer hidden states (`size * seq_len * hidden`) in evaluation mode.
pub fn encode_hidden<T: Real>(model: &Model<T>, batch: &Batch) -> Result<Vec<T>> {
    check_batch(model, batch)?;
    let mut drop = Dropout::new(Mode::Eval, 0.0);
    Ok(encode(model, batch, &mut drop).hidden)
}

/// Head logits for externally supplied final-layer states, in evaluation mode.
pub fn head_logits<T: Real>(model: &Model<T>, hidden: &[T], batch: &Batch, mlm_rows: &[usize]) -> Result<HeadLogits<T>> {
    if hidden.len() != batch.rows() * model.config.hidden {
        return Err(Error::Shape("hidden states do not match the batch".into()));
    }
    let mut drop = Dropout::new(Mode::Eval, 0.0);
    Ok(run_head(model, hidden, batch, mlm_rows, &mut drop)?.0)
}
