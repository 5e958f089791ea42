use super::kernels::{gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, softmax_in_place};
use super::{DenoiserConfig, Layout};

/// Activations of one transformer block, kept for the backward pass.
#[derive(Debug, Clone, Default)]
struct BlockCache {
    x_in: Vec<f64>,
    ln1: Vec<f64>,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[head, query, key]` attention probabilities
    att: Vec<f64>,
    attn_out: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: Vec<f64>,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
}

/// Activations for one sequence.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    tokens: Vec<u32>,
    blocks: Vec<BlockCache>,
    x_final: Vec<f64>,
    lnf: Vec<f64>,
    lnf_mean: Vec<f64>,
    lnf_rstd: Vec<f64>,
    pub(crate) logits: Vec<f64>,
}

pub(crate) fn forward(cfg: &DenoiserConfig, lay: &Layout, p: &[f64], tokens: &[u32]) -> ForwardCache {
    let (t, d, f, v) = (tokens.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let (nh, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = vec![0.0; t * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let te = &p[lay.tok_emb + tok as usize * d..][..d];
        let pe = &p[lay.pos_emb + i * d..][..d];
        for j in 0..d {
            x[i * d + j] = te[j] + pe[j];
        }
    }

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for lo in &lay.layers {
        let mut c = BlockCache {
            ln1: vec![0.0; t * d],
            ln1_mean: vec![0.0; t],
            ln1_rstd: vec![0.0; t],
            q: vec![0.0; t * d],
            k: vec![0.0; t * d],
            v: vec![0.0; t * d],
            att: vec![0.0; nh * t * t],
            attn_out: vec![0.0; t * d],
            ln2: vec![0.0; t * d],
            ln2_mean: vec![0.0; t],
            ln2_rstd: vec![0.0; t],
            ff_pre: vec![0.0; t * f],
            ff_act: vec![0.0; t * f],
            ..Default::default()
        };
        layer_norm(&mut c.ln1, &mut c.ln1_mean, &mut c.ln1_rstd, &x, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d], t, d);
        linear(&mut c.q, &c.ln1, &p[lo.wq..][..d * d], &p[lo.bq..][..d], t, d, d);
        linear(&mut c.k, &c.ln1, &p[lo.wk..][..d * d], &p[lo.bk..][..d], t, d, d);
        linear(&mut c.v, &c.ln1, &p[lo.wv..][..d * d], &p[lo.bv..][..d], t, d, d);

        // full bidirectional attention: every query sees every key
        for h in 0..nh {
            let off = h * hd;
            for i in 0..t {
                let qi = &c.q[i * d + off..][..hd];
                let row = &mut c.att[(h * t + i) * t..][..t];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &c.k[j * d + off..][..hd];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(row);
                let out = &mut c.attn_out[i * d + off..][..hd];
                for (j, &a) in row.iter().enumerate() {
                    let vj = &c.v[j * d + off..][..hd];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += a * vv;
                    }
                }
            }
        }

        let mut proj = vec![0.0; t * d];
        linear(&mut proj, &c.attn_out, &p[lo.wo..][..d * d], &p[lo.bo..][..d], t, d, d);
        let x_mid: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();

        layer_norm(&mut c.ln2, &mut c.ln2_mean, &mut c.ln2_rstd, &x_mid, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d], t, d);
        linear(&mut c.ff_pre, &c.ln2, &p[lo.w1..][..d * f], &p[lo.b1..][..f], t, d, f);
        gelu(&mut c.ff_act, &c.ff_pre);
        let mut ff_out = vec![0.0; t * d];
        linear(&mut ff_out, &c.ff_act, &p[lo.w2..][..f * d], &p[lo.b2..][..d], t, f, d);
        let x_out: Vec<f64> = x_mid.iter().zip(&ff_out).map(|(a, b)| a + b).collect();

        c.x_in = std::mem::replace(&mut x, x_out);
        c.x_mid = x_mid;
        blocks.push(c);
    }

    let mut lnf = vec![0.0; t * d];
    let mut lnf_mean = vec![0.0; t];
    let mut lnf_rstd = vec![0.0; t];
    layer_norm(&mut lnf, &mut lnf_mean, &mut lnf_rstd, &x, &p[lay.lnf_g..][..d], &p[lay.lnf_b..][..d], t, d);
    let mut logits = vec![0.0; t * v];
    linear(&mut logits, &lnf, &p[lay.out_w..][..d * v], &p[lay.out_b..][..v], t, d, v);

    ForwardCache {
        tokens: tokens.to_vec(),
        blocks,
        x_final: x,
        lnf,
        lnf_mean,
        lnf_rstd,
        logits,
    }
}

/// Accumulates `∂loss/∂params` into `grads` given `∂loss/∂logits`.
pub(crate) fn backward(cfg: &DenoiserConfig, lay: &Layout, p: &[f64], c: &ForwardCache, dlogits: &[f64], grads: &mut [f64]) {
    let (t, d, f, v) = (c.tokens.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let (nh, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();

    // Disjoint mutable views into `grads` are taken one tensor at a time via
    // this helper; offsets come from the layout so ranges never overlap.
    fn two(g: &mut [f64], a: (usize, usize), b: (usize, usize)) -> (&mut [f64], &mut [f64]) {
        debug_assert!(a.0 + a.1 <= b.0);
        let (lo, hi) = g.split_at_mut(b.0);
        (&mut lo[a.0..a.0 + a.1], &mut hi[..b.1])
    }

    let mut dlnf = vec![0.0; t * d];
    {
        let (dw, db) = two(grads, (lay.out_w, d * v), (lay.out_b, v));
        linear_backward(&mut dlnf, dw, db, dlogits, &c.lnf, &p[lay.out_w..][..d * v], t, d, v);
    }
    let mut dx = vec![0.0; t * d];
    {
        let (dg, db) = two(grads, (lay.lnf_g, d), (lay.lnf_b, d));
        layer_norm_backward(&mut dx, dg, db, &dlnf, &c.x_final, &c.lnf_mean, &c.lnf_rstd, &p[lay.lnf_g..][..d], t, d);
    }

    for (lo, bc) in lay.layers.iter().zip(&c.blocks).rev() {
        // feed-forward branch: x_out = x_mid + W2·gelu(W1·ln2(x_mid))
        let mut dff_act = vec![0.0; t * f];
        {
            let (dw, db) = two(grads, (lo.w2, f * d), (lo.b2, d));
            linear_backward(&mut dff_act, dw, db, &dx, &bc.ff_act, &p[lo.w2..][..f * d], t, f, d);
        }
        let mut dff_pre = vec![0.0; t * f];
        gelu_backward(&mut dff_pre, &dff_act, &bc.ff_pre);
        let mut dln2 = vec![0.0; t * d];
        {
            let (dw, db) = two(grads, (lo.w1, d * f), (lo.b1, f));
            linear_backward(&mut dln2, dw, db, &dff_pre, &bc.ln2, &p[lo.w1..][..d * f], t, d, f);
        }
        let mut dx_mid = dx;
        {
            let (dg, db) = two(grads, (lo.ln2_g, d), (lo.ln2_b, d));
            layer_norm_backward(&mut dx_mid, dg, db, &dln2, &bc.x_mid, &bc.ln2_mean, &bc.ln2_rstd, &p[lo.ln2_g..][..d], t, d);
        }

        // attention branch: x_mid = x_in + Wo·attn(ln1(x_in))
        let mut dattn_out = vec![0.0; t * d];
        {
            let (dw, db) = two(grads, (lo.wo, d * d), (lo.bo, d));
            linear_backward(&mut dattn_out, dw, db, &dx_mid, &bc.attn_out, &p[lo.wo..][..d * d], t, d, d);
        }
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut datt = vec![0.0; t];
        for h in 0..nh {
            let off = h * hd;
            for i in 0..t {
                let a = &bc.att[(h * t + i) * t..][..t];
                let dout = &dattn_out[i * d + off..][..hd];
                for j in 0..t {
                    let vj = &bc.v[j * d + off..][..hd];
                    datt[j] = dout.iter().zip(vj).map(|(x, y)| x * y).sum();
                    let dvj = &mut dv[j * d + off..][..hd];
                    for (g, &o) in dvj.iter_mut().zip(dout) {
                        *g += a[j] * o;
                    }
                }
                let dot: f64 = a.iter().zip(&datt).map(|(x, y)| x * y).sum();
                let qi = &bc.q[i * d + off..][..hd];
                for j in 0..t {
                    let ds = a[j] * (datt[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &bc.k[j * d + off..][..hd];
                    let dqi = &mut dq[i * d + off..][..hd];
                    for (g, &kk) in dqi.iter_mut().zip(kj) {
                        *g += ds * kk;
                    }
                    let dkj = &mut dk[j * d + off..][..hd];
                    for (g, &qq) in dkj.iter_mut().zip(qi) {
                        *g += ds * qq;
                    }
                }
            }
        }
        let mut dln1 = vec![0.0; t * d];
        for (dproj, w, b) in [(&dq, lo.wq, lo.bq), (&dk, lo.wk, lo.bk), (&dv, lo.wv, lo.bv)] {
            let (dw, db) = two(grads, (w, d * d), (b, d));
            linear_backward(&mut dln1, dw, db, dproj, &bc.ln1, &p[w..][..d * d], t, d, d);
        }
        let mut dx_in = dx_mid;
        {
            let (dg, db) = two(grads, (lo.ln1_g, d), (lo.ln1_b, d));
            layer_norm_backward(&mut dx_in, dg, db, &dln1, &bc.x_in, &bc.ln1_mean, &bc.ln1_rstd, &p[lo.ln1_g..][..d], t, d);
        }
        dx = dx_in;
    }

    for (i, &tok) in c.tokens.iter().enumerate() {
        let src = &dx[i * d..(i + 1) * d];
        let te = &mut grads[lay.tok_emb + tok as usize * d..][..d];
        te.iter_mut().zip(src).for_each(|(g, s)| *g += s);
        let pe = &mut grads[lay.pos_emb + i * d..][..d];
        pe.iter_mut().zip(src).for_each(|(g, s)| *g += s);
    }
}
