use super::forward::{ForwardCache, HeadCache, HeadLogits, LayerCache, LnCache};
use super::params::{HeadLayout, LayerLayout};
use super::real::{gelu_grad, gemm, View, ViewMut};
use super::{LossOutput, Model, ParamSet, Real};
use crate::{Error, Result};

/// Mutable access to two distinct gradient arrays.
fn pair_mut<T>(g: &mut [Vec<T>], i: usize, j: usize) -> (&mut Vec<T>, &mut Vec<T>) {
    assert_ne!(i, j);
    if i < j {
        let (a, b) = g.split_at_mut(j);
        (&mut a[i], &mut b[0])
    } else {
        let (a, b) = g.split_at_mut(i);
        (&mut b[0], &mut a[j])
    }
}

/// Accumulates `dW += x^T dy`, `db += colsum(dy)` and returns `dy W^T`.
#[allow(clippy::too_many_arguments)]
fn linear_back<T: Real>(
    x: &[T],
    dy: &[T],
    n: usize,
    din: usize,
    dout: usize,
    w: &[T],
    grads: &mut [Vec<T>],
    iw: usize,
    ib: usize,
) -> Vec<T> {
    let (dw, db) = pair_mut(grads, iw, ib);
    gemm(T::one(), View::full(x, n, din).t(), View::full(dy, n, dout), T::one(), ViewMut::full(dw, dout));
    for r in 0..n {
        for (b, &d) in db.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
            *b += d;
        }
    }
    let mut dx = vec![T::zero(); n * din];
    gemm(T::one(), View::full(dy, n, dout), View::full(w, din, dout).t(), T::zero(), ViewMut::full(&mut dx, din));
    dx
}

fn ln_back<T: Real>(dy: &[T], cache: &LnCache<T>, h: usize, g: &[T], grads: &mut [Vec<T>], ig: usize, ib: usize) -> Vec<T> {
    let (dg, db) = pair_mut(grads, ig, ib);
    let n = cache.rstd.len();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![0.0f64; h];
    for r in 0..n {
        let dyr = &dy[r * h..(r + 1) * h];
        let xh = &cache.xhat[r * h..(r + 1) * h];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..h {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = (dyr[j] * g[j]).f64();
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j].f64();
        }
        mean_d /= h as f64;
        mean_dx /= h as f64;
        let rs = cache.rstd[r].f64();
        for j in 0..h {
            dx[r * h + j] = T::c(rs * (dxhat[j] - mean_d - xh[j].f64() * mean_dx));
        }
    }
    dx
}

fn apply_mask<T: Real>(d: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in d.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

fn layer_back<T: Real>(
    model: &Model<T>,
    ll: &LayerLayout,
    cache: &LayerCache<T>,
    c: &ForwardCache<T>,
    mask: &[u8],
    dout: Vec<T>,
    grads: &mut [Vec<T>],
) -> Vec<T> {
    let cfg = &model.config;
    let (h, a, dh, f) = (cfg.hidden, cfg.heads, cfg.head_dim(), cfg.ff_dim);
    let (bsz, s) = (c.size, c.seq_len);
    let n = bsz * s;

    // out = LN2(h1 + drop(ffn(h1)))
    let dsum2 = ln_back(&dout, &cache.ln2, h, model.p(ll.ln2_g), grads, ll.ln2_g, ll.ln2_b);
    let mut dff = dsum2.clone();
    apply_mask(&mut dff, &cache.ff_drop);
    let mut dact = linear_back(&cache.ff_act, &dff, n, f, h, model.p(ll.ff2_w), grads, ll.ff2_w, ll.ff2_b);
    for (d, &z) in dact.iter_mut().zip(&cache.ff_pre) {
        *d *= gelu_grad(z);
    }
    let mut dh1 = linear_back(&cache.h1, &dact, n, h, f, model.p(ll.ff1_w), grads, ll.ff1_w, ll.ff1_b);
    for (d, &r) in dh1.iter_mut().zip(&dsum2) {
        *d += r;
    }

    // h1 = LN1(x + drop(attn(x)))
    let dsum1 = ln_back(&dh1, &cache.ln1, h, model.p(ll.ln1_g), grads, ll.ln1_g, ll.ln1_b);
    let mut dattn = dsum1.clone();
    apply_mask(&mut dattn, &cache.attn_drop);
    let dctx = linear_back(&cache.ctx, &dattn, n, h, h, model.p(ll.o_w), grads, ll.o_w, ll.o_b);

    let used: Vec<T> = match &cache.probs_drop {
        Some(m) => cache.probs.iter().zip(m).map(|(&p, &k)| p * k).collect(),
        None => cache.probs.clone(),
    };
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); n * h];
    let mut dk = vec![T::zero(); n * h];
    let mut dv = vec![T::zero(); n * h];
    let mut dp = vec![T::zero(); s * s];
    for b in 0..bsz {
        let key_mask = &mask[b * s..(b + 1) * s];
        for head in 0..a {
            let off = b * s * h + head * dh;
            let poff = (b * a + head) * s * s;
            // dV = P_used^T dctx
            gemm(
                T::one(),
                View::new(&used, poff, s, s, s).t(),
                View::new(&dctx, off, s, dh, h),
                T::zero(),
                ViewMut { data: &mut dv, off, ld: h },
            );
            // dP_used = dctx V^T
            gemm(
                T::one(),
                View::new(&dctx, off, s, dh, h),
                View::new(&cache.v, off, s, dh, h).t(),
                T::zero(),
                ViewMut::full(&mut dp, s),
            );
            if let Some(m) = &cache.probs_drop {
                for (d, &k) in dp.iter_mut().zip(&m[poff..poff + s * s]) {
                    *d *= k;
                }
            }
            let p = &cache.probs[poff..poff + s * s];
            for i in 0..s {
                let row = &mut dp[i * s..(i + 1) * s];
                let prow = &p[i * s..(i + 1) * s];
                let dot: f64 = row.iter().zip(prow).map(|(d, p)| (*d * *p).f64()).sum();
                let dot = T::c(dot);
                for j in 0..s {
                    row[j] = if key_mask[j] == 1 { prow[j] * (row[j] - dot) } else { T::zero() };
                }
            }
            gemm(
                scale,
                View::full(&dp, s, s),
                View::new(&cache.k, off, s, dh, h),
                T::zero(),
                ViewMut { data: &mut dq, off, ld: h },
            );
            gemm(
                scale,
                View::full(&dp, s, s).t(),
                View::new(&cache.q, off, s, dh, h),
                T::zero(),
                ViewMut { data: &mut dk, off, ld: h },
            );
        }
    }
    let mut dx = dsum1;
    for (dy, iw, ib) in [(&dq, ll.q_w, ll.q_b), (&dk, ll.k_w, ll.k_b), (&dv, ll.v_w, ll.v_b)] {
        let part = linear_back(&cache.x, dy, n, h, h, model.p(iw), grads, iw, ib);
        for (d, p) in dx.iter_mut().zip(part) {
            *d += p;
        }
    }
    dx
}

fn scatter_rows<T: Real>(dst: &mut [T], h: usize, rows: &[usize], src: &[T]) {
    for (i, &r) in rows.iter().enumerate() {
        for (d, &s) in dst[r * h..(r + 1) * h].iter_mut().zip(&src[i * h..(i + 1) * h]) {
            *d += s;
        }
    }
}

/// Gradients of the loss with respect to every parameter array, given the
/// cache of a training-mode forward pass and the loss's logit gradients.
pub fn backward<T: Real>(model: &Model<T>, cache: &ForwardCache<T>, loss: &LossOutput<T>) -> Result<ParamSet<T>> {
    let cfg = &model.config;
    let h = cfg.hidden;
    let lay = &model.layout;
    let n = cache.size * cache.seq_len;
    let mut grads: Vec<Vec<T>> = model.params.arrays.iter().map(|a| vec![T::zero(); a.data.len()]).collect();
    let mut dhidden = vec![T::zero(); n * h];
    let cls_rows: Vec<usize> = (0..cache.size).map(|b| b * cache.seq_len).collect();

    match (&cache.head, &lay.head, &loss.grad) {
        (
            HeadCache::Pretrain {
                rows,
                gathered,
                t_pre,
                ln,
                t_out,
                nsp,
            },
            HeadLayout::Pretrain {
                t_w,
                t_b,
                ln_g,
                ln_b,
                out_b,
                out_w,
                nsp: nsp_idx,
            },
            HeadLogits::Pretrain { mlm, nsp: dnsp },
        ) => {
            let m = rows.len();
            let v = cfg.vocab_size;
            if mlm.rows != m || mlm.cols != v {
                return Err(Error::Shape("masked-LM gradient does not match the cache".into()));
            }
            for r in 0..m {
                for (b, &d) in grads[*out_b].iter_mut().zip(mlm.row(r)) {
                    *b += d;
                }
            }
            let mut dt = vec![T::zero(); m * h];
            match out_w {
                Some(w) => {
                    gemm(T::one(), View::full(&mlm.data, m, v), View::full(model.p(*w), h, v).t(), T::zero(), ViewMut::full(&mut dt, h));
                    gemm(T::one(), View::full(t_out, m, h).t(), View::full(&mlm.data, m, v), T::one(), ViewMut::full(&mut grads[*w], v));
                }
                None => {
                    gemm(T::one(), View::full(&mlm.data, m, v), View::full(model.p(lay.tok), v, h), T::zero(), ViewMut::full(&mut dt, h));
                    gemm(T::one(), View::full(&mlm.data, m, v).t(), View::full(t_out, m, h), T::one(), ViewMut::full(&mut grads[lay.tok], h));
                }
            }
            let mut dact = ln_back(&dt, ln, h, model.p(*ln_g), &mut grads, *ln_g, *ln_b);
            for (d, &z) in dact.iter_mut().zip(t_pre) {
                *d *= gelu_grad(z);
            }
            let dg = linear_back(gathered, &dact, m, h, h, model.p(*t_w), &mut grads, *t_w, *t_b);
            scatter_rows(&mut dhidden, h, rows, &dg);

            match (nsp, nsp_idx, dnsp) {
                (Some((cls, pooled)), Some((w, b)), Some(d)) => {
                    let mut dpooled = linear_back(pooled, &d.data, cache.size, h, 2, model.p(*w), &mut grads, *w, *b);
                    for (dp, &p) in dpooled.iter_mut().zip(pooled) {
                        *dp *= T::one() - p * p;
                    }
                    let dcls = linear_back(cls, &dpooled, cache.size, h, h, model.p(lay.pool_w), &mut grads, lay.pool_w, lay.pool_b);
                    scatter_rows(&mut dhidden, h, &cls_rows, &dcls);
                }
                (None, None, None) => {}
                _ => return Err(Error::Shape("next-sentence gradient does not match the cache".into())),
            }
        }
        (HeadCache::Token { drop, input }, HeadLayout::Classifier { w, b }, HeadLogits::Token(d)) => {
            let mut dh = linear_back(input, &d.data, n, h, d.cols, model.p(*w), &mut grads, *w, *b);
            apply_mask(&mut dh, drop);
            dhidden = dh;
        }
        (
            HeadCache::Seq {
                cls,
                pooled,
                drop,
                input,
            },
            HeadLayout::Classifier { w, b },
            HeadLogits::Seq(d),
        ) => {
            let mut dpooled = linear_back(input, &d.data, cache.size, h, d.cols, model.p(*w), &mut grads, *w, *b);
            apply_mask(&mut dpooled, drop);
            for (dp, &p) in dpooled.iter_mut().zip(pooled) {
                *dp *= T::one() - p * p;
            }
            let dcls = linear_back(cls, &dpooled, cache.size, h, h, model.p(lay.pool_w), &mut grads, lay.pool_w, lay.pool_b);
            scatter_rows(&mut dhidden, h, &cls_rows, &dcls);
        }
        _ => return Err(Error::Shape("loss gradient does not match the cached head".into())),
    }

    let mask = &cache.mask;
    let mut d = dhidden;
    for (ll, lc) in lay.layers.iter().zip(&cache.layers).rev() {
        d = layer_back(model, ll, lc, cache, mask, d, &mut grads);
    }
    apply_mask(&mut d, &cache.emb_drop);
    let dsum = ln_back(&d, &cache.emb_ln, h, model.p(lay.emb_ln_g), &mut grads, lay.emb_ln_g, lay.emb_ln_b);
    for r in 0..n {
        let t = cache.ids[r] as usize;
        let p = r % cache.seq_len;
        let sg = cache.segments[r] as usize;
        let src = &dsum[r * h..(r + 1) * h];
        for (dst, off) in [(lay.tok, t), (lay.pos, p), (lay.seg, sg)] {
            for (g, &s) in grads[dst][off * h..(off + 1) * h].iter_mut().zip(src) {
                *g += s;
            }
        }
    }

    Ok(ParamSet {
        arrays: model
            .params
            .arrays
            .iter()
            .zip(grads)
            .map(|(a, data)| super::Array {
                name: a.name.clone(),
                shape: a.shape.clone(),
                data,
            })
            .collect(),
    })
}
