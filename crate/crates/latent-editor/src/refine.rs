//! Refinement adapter: restores inter-pixel structure in rendered latent
//! maps. NeRF predicts each latent pixel independently, so a rendered map
//! lacks the cross-pixel correlations the scene's original latents carry;
//! this residual module (strided conv down, single-head self-attention over
//! the coarse grid, transposed conv up) learns them back.
//!
//! The up-convolution starts zero-initialized, making a fresh adapter the
//! identity map so it cannot perturb early field training.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::scene::LatentImage;

const K: usize = 3; // kernel size
const LATENT_CH: usize = 4;

/// Default channel width; chosen so the parameter budget lands near 0.28M
/// (see [`adapter_param_count`]).
pub const DEFAULT_CHANNELS: usize = 256;

#[derive(Debug, Clone, Copy)]
struct Layout {
    cd_w: usize,
    cd_b: usize,
    q_w: usize,
    q_b: usize,
    k_w: usize,
    k_b: usize,
    v_w: usize,
    v_b: usize,
    o_w: usize,
    o_b: usize,
    cu_w: usize,
    cu_b: usize,
    total: usize,
}

fn layout(c: usize) -> Layout {
    let mut off = 0;
    let mut take = |n: usize| {
        let at = off;
        off += n;
        at
    };
    let cd_w = take(c * LATENT_CH * K * K);
    let cd_b = take(c);
    let q_w = take(c * c);
    let q_b = take(c);
    let k_w = take(c * c);
    let k_b = take(c);
    let v_w = take(c * c);
    let v_b = take(c);
    let o_w = take(c * c);
    let o_b = take(c);
    let cu_w = take(c * LATENT_CH * K * K);
    let cu_b = take(LATENT_CH);
    Layout {
        cd_w,
        cd_b,
        q_w,
        q_b,
        k_w,
        k_b,
        v_w,
        v_b,
        o_w,
        o_b,
        cu_w,
        cu_b,
        total: off,
    }
}

/// Exact number of adapter parameters for a channel width.
pub fn adapter_param_count(channels: usize) -> usize {
    layout(channels).total
}

/// Trainable adapter weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub channels: usize,
    pub params: Vec<f64>,
}

impl AdapterWeights {
    /// Seeded initialization: random down-conv and attention maps, zero
    /// up-conv (identity start).
    pub fn init(channels: usize, seed: u64) -> Result<AdapterWeights> {
        if channels == 0 {
            return Err(Error::config("adapter needs at least one channel"));
        }
        let l = layout(channels);
        let mut params = vec![0.0; l.total];
        let mut rng = rng::stream(seed, tags::ADAPTER_INIT, 0);
        let cd_scale = (2.0 / (LATENT_CH * K * K) as f64).sqrt();
        for p in params[l.cd_w..l.cd_b].iter_mut() {
            *p = rng.gen_range(-cd_scale..cd_scale);
        }
        let attn_scale = (3.0 / channels as f64).sqrt();
        for range in [
            l.q_w..l.q_b,
            l.k_w..l.k_b,
            l.v_w..l.v_b,
            l.o_w..l.o_b,
        ] {
            for p in params[range].iter_mut() {
                *p = rng.gen_range(-attn_scale..attn_scale);
            }
        }
        // cu_w / cu_b stay zero.
        Ok(AdapterWeights { channels, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.len() != adapter_param_count(self.channels) {
            return Err(Error::validation(format!(
                "adapter has {} parameters, expected {} for {} channels",
                self.params.len(),
                adapter_param_count(self.channels),
                self.channels
            )));
        }
        if !self.params.iter().all(|p| p.is_finite()) {
            return Err(Error::validation("adapter parameters must be finite"));
        }
        Ok(())
    }
}

/// Cached intermediates of one adapter forward pass.
pub struct AdapterTrace {
    tokens: Array2<f64>,   // (T, C) flattened down map
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,     // (T, T) softmax weights
    av: Array2<f64>,       // (T, C)
    out_tokens: Array2<f64>, // (T, C)
    shape: (usize, usize),
}

impl AdapterTrace {
    /// Softmax attention matrix (rows sum to one).
    pub fn attention(&self) -> &Array2<f64> {
        &self.attn
    }
}

fn conv_down(w: &AdapterWeights, l: &Layout, z: &Array3<f64>) -> Array3<f64> {
    let (h, wd, _) = z.dim();
    let (h2, w2) = (h / 2, wd / 2);
    let c = w.channels;
    let mut out = Array3::zeros((h2, w2, c));
    for r2 in 0..h2 {
        for c2 in 0..w2 {
            for co in 0..c {
                let mut acc = w.params[l.cd_b + co];
                for ci in 0..LATENT_CH {
                    for kh in 0..K {
                        let r = (2 * r2 + kh) as isize - 1;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for kw in 0..K {
                            let cc = (2 * c2 + kw) as isize - 1;
                            if cc < 0 || cc >= wd as isize {
                                continue;
                            }
                            acc += z[(r as usize, cc as usize, ci)]
                                * w.params[l.cd_w + ((co * LATENT_CH + ci) * K + kh) * K + kw];
                        }
                    }
                }
                out[(r2, c2, co)] = acc;
            }
        }
    }
    out
}

fn conv_down_backward(
    w: &AdapterWeights,
    l: &Layout,
    z: &Array3<f64>,
    d_out: &Array3<f64>,
    grads: &mut [f64],
    d_input: &mut Array3<f64>,
) {
    let (h, wd, _) = z.dim();
    let (h2, w2) = (h / 2, wd / 2);
    let c = w.channels;
    for r2 in 0..h2 {
        for c2 in 0..w2 {
            for co in 0..c {
                let g = d_out[(r2, c2, co)];
                grads[l.cd_b + co] += g;
                for ci in 0..LATENT_CH {
                    for kh in 0..K {
                        let r = (2 * r2 + kh) as isize - 1;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for kw in 0..K {
                            let cc = (2 * c2 + kw) as isize - 1;
                            if cc < 0 || cc >= wd as isize {
                                continue;
                            }
                            let widx = l.cd_w + ((co * LATENT_CH + ci) * K + kh) * K + kw;
                            grads[widx] += g * z[(r as usize, cc as usize, ci)];
                            d_input[(r as usize, cc as usize, ci)] += g * w.params[widx];
                        }
                    }
                }
            }
        }
    }
}

fn conv_up(w: &AdapterWeights, l: &Layout, tokens: &Array2<f64>, shape: (usize, usize)) -> Array3<f64> {
    let (h2, w2) = shape;
    let (h, wd) = (2 * h2, 2 * w2);
    let c = w.channels;
    let mut out = Array3::zeros((h, wd, LATENT_CH));
    for or in 0..h {
        for oc in 0..wd {
            for co in 0..LATENT_CH {
                let mut acc = w.params[l.cu_b + co];
                for kh in 0..K {
                    let ir2 = or as isize + 1 - kh as isize;
                    if ir2 < 0 || ir2 % 2 != 0 {
                        continue;
                    }
                    let ir = (ir2 / 2) as usize;
                    if ir >= h2 {
                        continue;
                    }
                    for kw in 0..K {
                        let ic2 = oc as isize + 1 - kw as isize;
                        if ic2 < 0 || ic2 % 2 != 0 {
                            continue;
                        }
                        let ic = (ic2 / 2) as usize;
                        if ic >= w2 {
                            continue;
                        }
                        let tok = ir * w2 + ic;
                        for ci in 0..c {
                            acc += tokens[(tok, ci)]
                                * w.params[l.cu_w + ((ci * LATENT_CH + co) * K + kh) * K + kw];
                        }
                    }
                }
                out[(or, oc, co)] = acc;
            }
        }
    }
    out
}

fn conv_up_backward(
    w: &AdapterWeights,
    l: &Layout,
    tokens: &Array2<f64>,
    shape: (usize, usize),
    d_out: &Array3<f64>,
    grads: &mut [f64],
    d_tokens: &mut Array2<f64>,
) {
    let (h2, w2) = shape;
    let (h, wd) = (2 * h2, 2 * w2);
    let c = w.channels;
    for or in 0..h {
        for oc in 0..wd {
            for co in 0..LATENT_CH {
                let g = d_out[(or, oc, co)];
                grads[l.cu_b + co] += g;
                for kh in 0..K {
                    let ir2 = or as isize + 1 - kh as isize;
                    if ir2 < 0 || ir2 % 2 != 0 {
                        continue;
                    }
                    let ir = (ir2 / 2) as usize;
                    if ir >= h2 {
                        continue;
                    }
                    for kw in 0..K {
                        let ic2 = oc as isize + 1 - kw as isize;
                        if ic2 < 0 || ic2 % 2 != 0 {
                            continue;
                        }
                        let ic = (ic2 / 2) as usize;
                        if ic >= w2 {
                            continue;
                        }
                        let tok = ir * w2 + ic;
                        for ci in 0..c {
                            let widx = l.cu_w + ((ci * LATENT_CH + co) * K + kh) * K + kw;
                            grads[widx] += g * tokens[(tok, ci)];
                            d_tokens[(tok, ci)] += g * w.params[widx];
                        }
                    }
                }
            }
        }
    }
}

fn linear_tokens(params: &[f64], w_off: usize, b_off: usize, c: usize, x: &Array2<f64>) -> Array2<f64> {
    let t = x.nrows();
    let mut y = Array2::zeros((t, c));
    for ti in 0..t {
        for r in 0..c {
            let mut acc = params[b_off + r];
            for cc in 0..c {
                acc += params[w_off + r * c + cc] * x[(ti, cc)];
            }
            y[(ti, r)] = acc;
        }
    }
    y
}

fn linear_tokens_backward(
    params: &[f64],
    w_off: usize,
    b_off: usize,
    c: usize,
    x: &Array2<f64>,
    d_y: &Array2<f64>,
    grads: &mut [f64],
    d_x: &mut Array2<f64>,
) {
    let t = x.nrows();
    for ti in 0..t {
        for r in 0..c {
            let g = d_y[(ti, r)];
            grads[b_off + r] += g;
            for cc in 0..c {
                grads[w_off + r * c + cc] += g * x[(ti, cc)];
                d_x[(ti, cc)] += g * params[w_off + r * c + cc];
            }
        }
    }
}

/// Adapter forward pass with trace:
/// `out = z + ConvUp(SelfAttention(ConvDown(z)))`.
pub fn adapter_forward_traced(
    w: &AdapterWeights,
    z_hat: &LatentImage,
) -> Result<(LatentImage, AdapterTrace)> {
    w.validate()?;
    let (h, wd) = z_hat.shape2();
    if h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::validation(format!(
            "adapter needs even spatial dims, got {h}x{wd}"
        )));
    }
    let l = layout(w.channels);
    let c = w.channels;
    let down = conv_down(w, &l, &z_hat.data);
    let (h2, w2) = (h / 2, wd / 2);
    let t = h2 * w2;
    let tokens = Array2::from_shape_fn((t, c), |(ti, ci)| down[(ti / w2, ti % w2, ci)]);

    let q = linear_tokens(&w.params, l.q_w, l.q_b, c, &tokens);
    let k = linear_tokens(&w.params, l.k_w, l.k_b, c, &tokens);
    let v = linear_tokens(&w.params, l.v_w, l.v_b, c, &tokens);

    let scale = 1.0 / (c as f64).sqrt();
    let mut attn = Array2::zeros((t, t));
    for a in 0..t {
        let mut row_max = f64::NEG_INFINITY;
        for b in 0..t {
            let mut s = 0.0;
            for ci in 0..c {
                s += q[(a, ci)] * k[(b, ci)];
            }
            let s = s * scale;
            attn[(a, b)] = s;
            row_max = row_max.max(s);
        }
        let mut denom = 0.0;
        for b in 0..t {
            let e = (attn[(a, b)] - row_max).exp();
            attn[(a, b)] = e;
            denom += e;
        }
        for b in 0..t {
            attn[(a, b)] /= denom;
        }
    }

    let mut av = Array2::zeros((t, c));
    for a in 0..t {
        for b in 0..t {
            let wgt = attn[(a, b)];
            for ci in 0..c {
                av[(a, ci)] += wgt * v[(b, ci)];
            }
        }
    }
    let out_tokens = linear_tokens(&w.params, l.o_w, l.o_b, c, &av);

    let up = conv_up(w, &l, &out_tokens, (h2, w2));
    let mut data = z_hat.data.clone();
    for r in 0..h {
        for cc in 0..wd {
            for ch in 0..LATENT_CH {
                data[(r, cc, ch)] += up[(r, cc, ch)];
            }
        }
    }
    let refined = LatentImage::new(data, z_hat.view_id)?;
    Ok((
        refined,
        AdapterTrace {
            tokens,
            q,
            k,
            v,
            attn,
            av,
            out_tokens,
            shape: (h2, w2),
        },
    ))
}

/// Adapter forward pass without the trace.
pub fn adapter_forward(w: &AdapterWeights, z_hat: &LatentImage) -> Result<LatentImage> {
    adapter_forward_traced(w, z_hat).map(|(img, _)| img)
}

/// Backward pass: given `d_out = dL/d(refined map)`, accumulate parameter
/// gradients and return `dL/d(input map)` (including the residual path).
pub fn adapter_backward(
    w: &AdapterWeights,
    z_hat: &LatentImage,
    trace: &AdapterTrace,
    d_out: &Array3<f64>,
    grads: &mut [f64],
) -> Array3<f64> {
    let l = layout(w.channels);
    let c = w.channels;
    let (h2, w2) = trace.shape;
    let t = h2 * w2;
    let scale = 1.0 / (c as f64).sqrt();

    // Residual path.
    let mut d_input = d_out.clone();

    // ConvUp.
    let mut d_out_tokens = Array2::zeros((t, c));
    conv_up_backward(
        w,
        &l,
        &trace.out_tokens,
        (h2, w2),
        d_out,
        grads,
        &mut d_out_tokens,
    );

    // Output projection.
    let mut d_av = Array2::zeros((t, c));
    linear_tokens_backward(
        &w.params,
        l.o_w,
        l.o_b,
        c,
        &trace.av,
        &d_out_tokens,
        grads,
        &mut d_av,
    );

    // Attention application: av = attn v.
    let mut d_attn = Array2::zeros((t, t));
    let mut d_v = Array2::zeros((t, c));
    for a in 0..t {
        for b in 0..t {
            let mut acc = 0.0;
            for ci in 0..c {
                acc += d_av[(a, ci)] * trace.v[(b, ci)];
                d_v[(b, ci)] += trace.attn[(a, b)] * d_av[(a, ci)];
            }
            d_attn[(a, b)] = acc;
        }
    }

    // Softmax rows.
    let mut d_scores = Array2::zeros((t, t));
    for a in 0..t {
        let mut dot = 0.0;
        for b in 0..t {
            dot += d_attn[(a, b)] * trace.attn[(a, b)];
        }
        for b in 0..t {
            d_scores[(a, b)] = trace.attn[(a, b)] * (d_attn[(a, b)] - dot);
        }
    }

    // scores = scale * q k^T.
    let mut d_q = Array2::zeros((t, c));
    let mut d_k = Array2::zeros((t, c));
    for a in 0..t {
        for b in 0..t {
            let g = d_scores[(a, b)] * scale;
            for ci in 0..c {
                d_q[(a, ci)] += g * trace.k[(b, ci)];
                d_k[(b, ci)] += g * trace.q[(a, ci)];
            }
        }
    }

    // Projections back to tokens.
    let mut d_tokens = Array2::zeros((t, c));
    linear_tokens_backward(&w.params, l.q_w, l.q_b, c, &trace.tokens, &d_q, grads, &mut d_tokens);
    linear_tokens_backward(&w.params, l.k_w, l.k_b, c, &trace.tokens, &d_k, grads, &mut d_tokens);
    linear_tokens_backward(&w.params, l.v_w, l.v_b, c, &trace.tokens, &d_v, grads, &mut d_tokens);

    // Un-flatten and ConvDown backward.
    let d_down = Array3::from_shape_fn((h2, w2, c), |(r, cc, ci)| d_tokens[(r * w2 + cc, ci)]);
    conv_down_backward(w, &l, &z_hat.data, &d_down, grads, &mut d_input);
    d_input
}

/// Refinement loss: mean over pixels of the squared L2 distance between the
/// refined map and its target.
pub fn loss_refinement(refined: &LatentImage, target: &LatentImage) -> Result<f64> {
    if refined.data.dim() != target.data.dim() {
        return Err(Error::validation(format!(
            "refinement loss shape mismatch: {:?} vs {:?}",
            refined.data.dim(),
            target.data.dim()
        )));
    }
    let n = (refined.data.dim().0 * refined.data.dim().1) as f64;
    let sum: f64 = refined
        .data
        .iter()
        .zip(target.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}
