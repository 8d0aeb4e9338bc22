//! One pre-LayerNorm transformer block with single-head attention.
//!
//! ```text
//! e   = embed · x_s + embed.bias                 per token
//! r1  = e  + wf · Attn(LN1(e))                    Attn: softmax(QKᵀ/√H) V, [Q;K;V] = wqkv · LN1(e)
//! r2  = r1 + w2 · tanh(w1 · LN2(r1) + w1.bias) + w2.bias
//! out = head · mean_s(r2) + head.bias
//! ```

use super::ops::{
    add_assign, argmax, cross_entropy, dot, layer_norm, layer_norm_backward, matvec, matvec_t_acc,
    outer_acc, pair_mut, softmax, LnCache,
};
use super::ModelSpec;
use crate::scalar::Real;

/// Parameter groups of the block, as used in per-layer telemetry.
pub const TINY_ATTENTION_GROUPS: [&str; 6] = ["wqkv", "wf", "ln1", "w1", "w2", "ln2"];

const EMBED: usize = 0;
const EMBED_B: usize = 1;
const LN1_G: usize = 2;
const LN1_B: usize = 3;
const WQKV: usize = 4;
const WF: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W1: usize = 8;
const W1_B: usize = 9;
const W2: usize = 10;
const W2_B: usize = 11;
const HEAD: usize = 12;
const HEAD_B: usize = 13;

fn ffn_dim(spec: &ModelSpec) -> usize {
    2 * spec.hidden_dim
}

pub(super) fn layout(spec: &ModelSpec) -> Vec<(String, usize)> {
    let (d, h, c, f) = (spec.input_dim, spec.hidden_dim, spec.num_classes, ffn_dim(spec));
    [
        ("embed", h * d),
        ("embed.bias", h),
        ("ln1.gain", h),
        ("ln1.bias", h),
        ("wqkv", 3 * h * h),
        ("wf", h * h),
        ("ln2.gain", h),
        ("ln2.bias", h),
        ("w1", f * h),
        ("w1.bias", f),
        ("w2", h * f),
        ("w2.bias", h),
        ("head", c * h),
        ("head.bias", c),
    ]
    .into_iter()
    .map(|(n, k)| (n.to_string(), k))
    .collect()
}

pub(super) fn fan_in(spec: &ModelSpec, layer: &str) -> Option<usize> {
    match layer {
        "embed" => Some(spec.input_dim),
        "wqkv" | "wf" | "w1" | "head" => Some(spec.hidden_dim),
        "w2" => Some(ffn_dim(spec)),
        _ => None,
    }
}

struct Token<T> {
    e: Vec<T>,
    ln1: LnCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    o: Vec<T>,
    ln2: LnCache<T>,
    b: Vec<T>,
    m: Vec<T>,
}

pub(super) fn example<T: Real>(
    spec: &ModelSpec,
    p: &[&[T]],
    x: &[T],
    label: usize,
    grads: Option<&mut [Vec<T>]>,
) -> (T, usize) {
    let (d, h, s_len, f) = (spec.input_dim, spec.hidden_dim, spec.seq_len, ffn_dim(spec));
    let eps = T::of(spec.layernorm_epsilon);
    let inv_sqrt_h = T::one() / T::of_usize(h).sqrt();

    // embedding, LN1, projections
    let mut toks: Vec<Token<T>> = (0..s_len)
        .map(|s| {
            let mut e = vec![T::zero(); h];
            matvec(p[EMBED], &x[s * d..(s + 1) * d], &mut e);
            add_assign(&mut e, p[EMBED_B]);
            let (a, ln1) = layer_norm(&e, p[LN1_G], p[LN1_B], eps);
            let mut qkv = vec![T::zero(); 3 * h];
            matvec(p[WQKV], &a, &mut qkv);
            let v = qkv.split_off(2 * h);
            let k = qkv.split_off(h);
            Token {
                e,
                ln1,
                a,
                q: qkv,
                k,
                v,
                probs: Vec::new(),
                o: vec![T::zero(); h],
                ln2: LnCache {
                    xhat: Vec::new(),
                    inv_std: T::zero(),
                },
                b: Vec::new(),
                m: Vec::new(),
            }
        })
        .collect();

    // attention
    for s in 0..s_len {
        let scores: Vec<T> = toks.iter().map(|u| dot(&toks[s].q, &u.k) * inv_sqrt_h).collect();
        let probs = softmax(&scores);
        let mut o = vec![T::zero(); h];
        for (u, &pw) in probs.iter().enumerate() {
            for (oi, &vi) in o.iter_mut().zip(&toks[u].v) {
                *oi = *oi + pw * vi;
            }
        }
        toks[s].probs = probs;
        toks[s].o = o;
    }

    // output projection + residual, MLP + residual, pooling
    let mut pooled = vec![T::zero(); h];
    let inv_s = T::one() / T::of_usize(s_len);
    let mut r1s = Vec::with_capacity(s_len);
    for tok in toks.iter_mut() {
        let mut r1 = vec![T::zero(); h];
        matvec(p[WF], &tok.o, &mut r1);
        add_assign(&mut r1, &tok.e);
        let (b, ln2) = layer_norm(&r1, p[LN2_G], p[LN2_B], eps);
        let mut pre = vec![T::zero(); f];
        matvec(p[W1], &b, &mut pre);
        add_assign(&mut pre, p[W1_B]);
        let m: Vec<T> = pre.iter().map(|v| v.tanh()).collect();
        let mut r2 = vec![T::zero(); h];
        matvec(p[W2], &m, &mut r2);
        add_assign(&mut r2, p[W2_B]);
        add_assign(&mut r2, &r1);
        for (pi, &ri) in pooled.iter_mut().zip(&r2) {
            *pi = *pi + ri * inv_s;
        }
        tok.ln2 = ln2;
        tok.b = b;
        tok.m = m;
        r1s.push(r1);
    }
    let mut z = vec![T::zero(); spec.num_classes];
    matvec(p[HEAD], &pooled, &mut z);
    add_assign(&mut z, p[HEAD_B]);
    let (loss, mut dz) = cross_entropy(&z, label);
    let pred = argmax(&z);

    let Some(g) = grads else {
        return (loss, pred);
    };

    dz[label] = dz[label] - T::one();
    outer_acc(&mut g[HEAD], &dz, &pooled);
    add_assign(&mut g[HEAD_B], &dz);
    let mut dpooled = vec![T::zero(); h];
    matvec_t_acc(p[HEAD], &dz, &mut dpooled);
    let dr2: Vec<T> = dpooled.iter().map(|&v| v * inv_s).collect();

    // MLP + LN2 backward, per token; dr1 holds the gradient reaching r1
    let mut dr1s = Vec::with_capacity(s_len);
    for tok in &toks {
        add_assign(&mut g[W2_B], &dr2);
        outer_acc(&mut g[W2], &dr2, &tok.m);
        let mut dm = vec![T::zero(); f];
        matvec_t_acc(p[W2], &dr2, &mut dm);
        let dpre: Vec<T> = dm.iter().zip(&tok.m).map(|(&dv, &mv)| dv * (T::one() - mv * mv)).collect();
        outer_acc(&mut g[W1], &dpre, &tok.b);
        add_assign(&mut g[W1_B], &dpre);
        let mut db = vec![T::zero(); h];
        matvec_t_acc(p[W1], &dpre, &mut db);
        let (gg, gb) = pair_mut(g, LN2_G, LN2_B);
        let mut dr1 = layer_norm_backward(&db, p[LN2_G], &tok.ln2, gg, gb);
        add_assign(&mut dr1, &dr2);
        dr1s.push(dr1);
    }

    // output projection and attention backward
    let mut dq = vec![vec![T::zero(); h]; s_len];
    let mut dk = vec![vec![T::zero(); h]; s_len];
    let mut dv = vec![vec![T::zero(); h]; s_len];
    for (s, tok) in toks.iter().enumerate() {
        outer_acc(&mut g[WF], &dr1s[s], &tok.o);
        let mut d_o = vec![T::zero(); h];
        matvec_t_acc(p[WF], &dr1s[s], &mut d_o);
        let dp: Vec<T> = toks.iter().map(|u| dot(&d_o, &u.v)).collect();
        let mean = dot(&dp, &tok.probs);
        for (u, other) in toks.iter().enumerate() {
            let pw = tok.probs[u];
            for (dvi, &doi) in dv[u].iter_mut().zip(&d_o) {
                *dvi = *dvi + pw * doi;
            }
            let ds = pw * (dp[u] - mean) * inv_sqrt_h;
            for i in 0..h {
                dq[s][i] = dq[s][i] + ds * other.k[i];
                dk[u][i] = dk[u][i] + ds * tok.q[i];
            }
        }
    }

    // projections, LN1, embedding
    for (s, tok) in toks.iter().enumerate() {
        let dqkv: Vec<T> = dq[s].iter().chain(&dk[s]).chain(&dv[s]).copied().collect();
        outer_acc(&mut g[WQKV], &dqkv, &tok.a);
        let mut da = vec![T::zero(); h];
        matvec_t_acc(p[WQKV], &dqkv, &mut da);
        let (gg, gb) = pair_mut(g, LN1_G, LN1_B);
        let mut de = layer_norm_backward(&da, p[LN1_G], &tok.ln1, gg, gb);
        add_assign(&mut de, &dr1s[s]);
        outer_acc(&mut g[EMBED], &de, &x[s * d..(s + 1) * d]);
        add_assign(&mut g[EMBED_B], &de);
    }
    (loss, pred)
}
