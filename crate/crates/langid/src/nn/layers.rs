//! Layer kernels: forward and exact reverse passes.
//!
//! Activations are `Mat` values with rows = channels and cols = frames.
//! Batches carry a valid-length mask; every kernel writes zeros into padded
//! frames and reads only valid ones, so padding can never leak into
//! outputs. Inner summation loops run in a fixed order (in-channels, then
//! kernel taps, ascending time) that the streaming path mirrors exactly.

use crate::par;

use super::tensor::{Mat, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const POOL_VAR_EPS: f64 = 1e-9;

/// Batch of activations padded to a common frame count.
#[derive(Clone, Debug)]
pub struct Batch<S> {
    pub items: Vec<Mat<S>>,
    pub lengths: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    /// Pad per-utterance matrices to the longest frame count.
    pub fn from_items(items: Vec<Mat<S>>) -> Batch<S> {
        assert!(!items.is_empty(), "empty batch");
        let t_max = items.iter().map(Mat::cols).max().unwrap();
        let lengths: Vec<usize> = items.iter().map(Mat::cols).collect();
        let padded = items
            .into_iter()
            .map(|m| {
                if m.cols() == t_max {
                    m
                } else {
                    let mut p = Mat::zeros(m.rows(), t_max);
                    for r in 0..m.rows() {
                        p.row_mut(r)[..m.cols()].copy_from_slice(m.row(r));
                    }
                    p
                }
            })
            .collect();
        Batch {
            items: padded,
            lengths,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn zeros_like(&self) -> Batch<S> {
        Batch {
            items: self
                .items
                .iter()
                .map(|m| Mat::zeros(m.rows(), m.cols()))
                .collect(),
            lengths: self.lengths.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Plain 1D convolution (prologue / epilogue)
// ---------------------------------------------------------------------------

/// Same-padded stride-1 conv; weight dims (C_out, C_in, k).
pub fn conv1d_forward<S: Scalar>(w: &Tensor<S>, b: &Tensor<S>, x: &Batch<S>) -> Batch<S> {
    let (c_out, c_in, k) = (w.dims()[0], w.dims()[1], w.dims()[2]);
    let pad = (k - 1) / 2;
    let items = par::map_range(x.len(), |bi| {
        let xm = &x.items[bi];
        let len = x.lengths[bi];
        debug_assert_eq!(xm.rows(), c_in);
        let mut y = Mat::zeros(c_out, xm.cols());
        for o in 0..c_out {
            for t in 0..len {
                let mut acc = b.at1(o);
                for i in 0..c_in {
                    for j in 0..k {
                        let tt = t + j;
                        if tt >= pad && tt - pad < len {
                            acc = acc + w.at3(o, i, j) * xm.at(i, tt - pad);
                        }
                    }
                }
                y.set(o, t, acc);
            }
        }
        y
    });
    Batch {
        items,
        lengths: x.lengths.clone(),
    }
}

pub fn conv1d_backward<S: Scalar>(
    w: &Tensor<S>,
    x: &Batch<S>,
    gy: &Batch<S>,
) -> (Batch<S>, Tensor<S>, Tensor<S>) {
    let (c_out, c_in, k) = (w.dims()[0], w.dims()[1], w.dims()[2]);
    let pad = (k - 1) / 2;
    let per_item = par::map_range(x.len(), |bi| {
        let xm = &x.items[bi];
        let gym = &gy.items[bi];
        let len = x.lengths[bi];
        let mut gx = Mat::zeros(c_in, xm.cols());
        let mut gw = Tensor::zeros(w.dims());
        let mut gb = Tensor::zeros(&[c_out]);
        for o in 0..c_out {
            for t in 0..len {
                let g = gym.at(o, t);
                if g == S::zero() {
                    continue;
                }
                gb.add1(o, g);
                for i in 0..c_in {
                    for j in 0..k {
                        let tt = t + j;
                        if tt >= pad && tt - pad < len {
                            gw.add3(o, i, j, g * xm.at(i, tt - pad));
                            gx.add_at(i, tt - pad, g * w.at3(o, i, j));
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    });
    reduce_grads(per_item, x.lengths.clone(), w.dims(), &[c_out])
}

fn reduce_grads<S: Scalar>(
    per_item: Vec<(Mat<S>, Tensor<S>, Tensor<S>)>,
    lengths: Vec<usize>,
    wdims: &[usize],
    bdims: &[usize],
) -> (Batch<S>, Tensor<S>, Tensor<S>) {
    let mut gw = Tensor::zeros(wdims);
    let mut gb = Tensor::zeros(bdims);
    let mut items = Vec::with_capacity(per_item.len());
    for (gx, gwi, gbi) in per_item {
        for (a, &v) in gw.data_mut().iter_mut().zip(gwi.data()) {
            *a = *a + v;
        }
        for (a, &v) in gb.data_mut().iter_mut().zip(gbi.data()) {
            *a = *a + v;
        }
        items.push(gx);
    }
    (Batch { items, lengths }, gw, gb)
}

// ---------------------------------------------------------------------------
// Depthwise + pointwise convolutions
// ---------------------------------------------------------------------------

/// Per-channel conv; weight dims (C, k), no bias.
pub fn depthwise_forward<S: Scalar>(w: &Tensor<S>, x: &Batch<S>) -> Batch<S> {
    let (c, k) = (w.dims()[0], w.dims()[1]);
    let pad = (k - 1) / 2;
    let items = par::map_range(x.len(), |bi| {
        let xm = &x.items[bi];
        let len = x.lengths[bi];
        debug_assert_eq!(xm.rows(), c);
        let mut y = Mat::zeros(c, xm.cols());
        for ch in 0..c {
            for t in 0..len {
                let mut acc = S::zero();
                for j in 0..k {
                    let tt = t + j;
                    if tt >= pad && tt - pad < len {
                        acc = acc + w.at2(ch, j) * xm.at(ch, tt - pad);
                    }
                }
                y.set(ch, t, acc);
            }
        }
        y
    });
    Batch {
        items,
        lengths: x.lengths.clone(),
    }
}

pub fn depthwise_backward<S: Scalar>(
    w: &Tensor<S>,
    x: &Batch<S>,
    gy: &Batch<S>,
) -> (Batch<S>, Tensor<S>) {
    let (c, k) = (w.dims()[0], w.dims()[1]);
    let pad = (k - 1) / 2;
    let per_item = par::map_range(x.len(), |bi| {
        let xm = &x.items[bi];
        let gym = &gy.items[bi];
        let len = x.lengths[bi];
        let mut gx = Mat::zeros(c, xm.cols());
        let mut gw = Tensor::zeros(w.dims());
        for ch in 0..c {
            for t in 0..len {
                let g = gym.at(ch, t);
                if g == S::zero() {
                    continue;
                }
                for j in 0..k {
                    let tt = t + j;
                    if tt >= pad && tt - pad < len {
                        gw.add2(ch, j, g * xm.at(ch, tt - pad));
                        gx.add_at(ch, tt - pad, g * w.at2(ch, j));
                    }
                }
            }
        }
        (gx, gw)
    });
    let mut gw = Tensor::zeros(w.dims());
    let mut items = Vec::with_capacity(per_item.len());
    for (gx, gwi) in per_item {
        for (a, &v) in gw.data_mut().iter_mut().zip(gwi.data()) {
            *a = *a + v;
        }
        items.push(gx);
    }
    (
        Batch {
            items,
            lengths: x.lengths.clone(),
        },
        gw,
    )
}

/// 1x1 channel-mixing conv; weight dims (C_out, C_in).
pub fn pointwise_forward<S: Scalar>(w: &Tensor<S>, b: &Tensor<S>, x: &Batch<S>) -> Batch<S> {
    let (c_out, c_in) = (w.dims()[0], w.dims()[1]);
    let items = par::map_range(x.len(), |bi| {
        let xm = &x.items[bi];
        let len = x.lengths[bi];
        debug_assert_eq!(xm.rows(), c_in);
        let mut y = Mat::zeros(c_out, xm.cols());
        for o in 0..c_out {
            for t in 0..len {
                y.set(o, t, pointwise_frame(w, b, xm, o, t));
            }
        }
        y
    });
    Batch {
        items,
        lengths: x.lengths.clone(),
    }
}

#[inline]
fn pointwise_frame<S: Scalar>(w: &Tensor<S>, b: &Tensor<S>, x: &Mat<S>, o: usize, t: usize) -> S {
    let c_in = w.dims()[1];
    let mut acc = b.at1(o);
    for i in 0..c_in {
        acc = acc + w.at2(o, i) * x.at(i, t);
    }
    acc
}

/// Pointwise conv applied to one frame held as a channel vector; used by
/// the streaming path and kept next to the batched kernel so both sum in
/// the same order.
pub fn pointwise_col<S: Scalar>(w: &Tensor<S>, b: &Tensor<S>, x: &[S], out: &mut Vec<S>) {
    let (c_out, c_in) = (w.dims()[0], w.dims()[1]);
    debug_assert_eq!(x.len(), c_in);
    out.clear();
    for o in 0..c_out {
        let mut acc = b.at1(o);
        for (i, &xi) in x.iter().enumerate() {
            acc = acc + w.at2(o, i) * xi;
        }
        out.push(acc);
    }
}

pub fn pointwise_backward<S: Scalar>(
    w: &Tensor<S>,
    x: &Batch<S>,
    gy: &Batch<S>,
) -> (Batch<S>, Tensor<S>, Tensor<S>) {
    let (c_out, c_in) = (w.dims()[0], w.dims()[1]);
    let per_item = par::map_range(x.len(), |bi| {
        let xm = &x.items[bi];
        let gym = &gy.items[bi];
        let len = x.lengths[bi];
        let mut gx = Mat::zeros(c_in, xm.cols());
        let mut gw = Tensor::zeros(w.dims());
        let mut gb = Tensor::zeros(&[c_out]);
        for o in 0..c_out {
            for t in 0..len {
                let g = gym.at(o, t);
                if g == S::zero() {
                    continue;
                }
                gb.add1(o, g);
                for i in 0..c_in {
                    gw.add2(o, i, g * xm.at(i, t));
                    gx.add_at(i, t, g * w.at2(o, i));
                }
            }
        }
        (gx, gw, gb)
    });
    reduce_grads(per_item, x.lengths.clone(), w.dims(), &[c_out])
}

// ---------------------------------------------------------------------------
// Batch normalization over (batch, time) per channel
// ---------------------------------------------------------------------------

pub struct BnCache<S> {
    pub x: Batch<S>,
    pub mean: Vec<S>,
    pub inv_std: Vec<S>,
    pub n_valid: usize,
    /// Biased batch variance, for the running-statistics update.
    pub var: Vec<S>,
}

pub fn bn_forward_train<S: Scalar>(
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    x: &Batch<S>,
) -> (Batch<S>, BnCache<S>) {
    let c = gamma.numel();
    let n_valid: usize = x.lengths.iter().sum();
    assert!(n_valid > 0, "batch norm over zero valid frames");
    let nf = S::from_f64(n_valid as f64);
    // Per-channel stats: each channel reduces sequentially over the batch,
    // so results do not depend on thread count.
    let stats = par::map_range(c, |ch| {
        let mut sum = S::zero();
        let mut sumsq = S::zero();
        for (bi, xm) in x.items.iter().enumerate() {
            for t in 0..x.lengths[bi] {
                let v = xm.at(ch, t);
                sum = sum + v;
                sumsq = sumsq + v * v;
            }
        }
        let mean = sum / nf;
        let var = (sumsq / nf - mean * mean).max(S::zero());
        (mean, var)
    });
    let mean: Vec<S> = stats.iter().map(|s| s.0).collect();
    let var: Vec<S> = stats.iter().map(|s| s.1).collect();
    let inv_std: Vec<S> = var
        .iter()
        .map(|&v| S::one() / (v + S::from_f64(BN_EPS)).sqrt())
        .collect();
    let items = par::map_range(x.len(), |bi| {
        let xm = &x.items[bi];
        let len = x.lengths[bi];
        let mut y = Mat::zeros(c, xm.cols());
        for ch in 0..c {
            let (m, is, g, b) = (mean[ch], inv_std[ch], gamma.at1(ch), beta.at1(ch));
            for t in 0..len {
                y.set(ch, t, (xm.at(ch, t) - m) * is * g + b);
            }
        }
        y
    });
    let y = Batch {
        items,
        lengths: x.lengths.clone(),
    };
    let cache = BnCache {
        x: x.clone(),
        mean,
        inv_std,
        n_valid,
        var,
    };
    (y, cache)
}

/// Per-channel affine form of eval-mode batch norm: y = a*x + b. The
/// streaming path uses the identical coefficients, keeping both bit-equal.
pub fn bn_eval_affine<S: Scalar>(
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
) -> (Vec<S>, Vec<S>) {
    let c = gamma.numel();
    let mut a = Vec::with_capacity(c);
    let mut b = Vec::with_capacity(c);
    for ch in 0..c {
        let inv = S::one() / (running_var.at1(ch) + S::from_f64(BN_EPS)).sqrt();
        let scale = gamma.at1(ch) * inv;
        a.push(scale);
        b.push(beta.at1(ch) - running_mean.at1(ch) * scale);
    }
    (a, b)
}

pub fn bn_forward_eval<S: Scalar>(
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    x: &Batch<S>,
) -> Batch<S> {
    let (a, b) = bn_eval_affine(gamma, beta, running_mean, running_var);
    let c = gamma.numel();
    let items = par::map_range(x.len(), |bi| {
        let xm = &x.items[bi];
        let len = x.lengths[bi];
        let mut y = Mat::zeros(c, xm.cols());
        for ch in 0..c {
            for t in 0..len {
                y.set(ch, t, a[ch] * xm.at(ch, t) + b[ch]);
            }
        }
        y
    });
    Batch {
        items,
        lengths: x.lengths.clone(),
    }
}

pub fn bn_backward_train<S: Scalar>(
    gamma: &Tensor<S>,
    cache: &BnCache<S>,
    gy: &Batch<S>,
) -> (Batch<S>, Tensor<S>, Tensor<S>) {
    let c = gamma.numel();
    let n = S::from_f64(cache.n_valid as f64);
    // Channel-wise reductions first (deterministic order).
    let sums = par::map_range(c, |ch| {
        let mut sum_gy = S::zero();
        let mut sum_gy_xhat = S::zero();
        for (bi, gym) in gy.items.iter().enumerate() {
            let xm = &cache.x.items[bi];
            for t in 0..gy.lengths[bi] {
                let g = gym.at(ch, t);
                let xhat = (xm.at(ch, t) - cache.mean[ch]) * cache.inv_std[ch];
                sum_gy = sum_gy + g;
                sum_gy_xhat = sum_gy_xhat + g * xhat;
            }
        }
        (sum_gy, sum_gy_xhat)
    });
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        dbeta.add1(ch, sums[ch].0);
        dgamma.add1(ch, sums[ch].1);
    }
    let items = par::map_range(gy.len(), |bi| {
        let gym = &gy.items[bi];
        let xm = &cache.x.items[bi];
        let len = gy.lengths[bi];
        let mut gx = Mat::zeros(c, gym.cols());
        for ch in 0..c {
            let (sg, sgx) = sums[ch];
            let scale = gamma.at1(ch) * cache.inv_std[ch] / n;
            for t in 0..len {
                let xhat = (xm.at(ch, t) - cache.mean[ch]) * cache.inv_std[ch];
                let g = gym.at(ch, t);
                gx.set(ch, t, scale * (n * g - sg - xhat * sgx));
            }
        }
        gx
    });
    (
        Batch {
            items,
            lengths: gy.lengths.clone(),
        },
        dgamma,
        dbeta,
    )
}

// ---------------------------------------------------------------------------
// ReLU and dropout
// ---------------------------------------------------------------------------

pub fn relu_forward<S: Scalar>(x: &Batch<S>) -> Batch<S> {
    Batch {
        items: x.items.iter().map(|m| m.map(|v| v.max(S::zero()))).collect(),
        lengths: x.lengths.clone(),
    }
}

pub fn relu_backward<S: Scalar>(y: &Batch<S>, gy: &Batch<S>) -> Batch<S> {
    let items = y
        .items
        .iter()
        .zip(&gy.items)
        .map(|(ym, gym)| {
            Mat::from_fn(ym.rows(), ym.cols(), |r, c| {
                if ym.at(r, c) > S::zero() {
                    gym.at(r, c)
                } else {
                    S::zero()
                }
            })
        })
        .collect();
    Batch {
        items,
        lengths: y.lengths.clone(),
    }
}

/// Inverted dropout with a per-(item, layer) derived RNG stream, so masks
/// are reproducible independent of batch parallelism.
pub fn dropout_forward<S: Scalar>(
    x: &Batch<S>,
    p: f64,
    base_seed: u64,
    layer_id: u64,
) -> (Batch<S>, Batch<S>) {
    use rand::{Rng, SeedableRng};
    if p <= 0.0 {
        let mask = Batch {
            items: x
                .items
                .iter()
                .map(|m| Mat::from_fn(m.rows(), m.cols(), |_, _| S::one()))
                .collect(),
            lengths: x.lengths.clone(),
        };
        return (x.clone(), mask);
    }
    let keep = S::from_f64(1.0 / (1.0 - p));
    let masks = par::map_range(x.len(), |bi| {
        let seed = crate::audio::derive_seed(base_seed, bi as u64, layer_id);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = &x.items[bi];
        Mat::from_fn(m.rows(), m.cols(), |_, _| {
            if rng.random::<f64>() < p {
                S::zero()
            } else {
                keep
            }
        })
    });
    let items = x
        .items
        .iter()
        .zip(&masks)
        .enumerate()
        .map(|(bi, (xm, mm))| {
            let mut y = Mat::zeros(xm.rows(), xm.cols());
            for r in 0..xm.rows() {
                for t in 0..x.lengths[bi] {
                    y.set(r, t, xm.at(r, t) * mm.at(r, t));
                }
            }
            y
        })
        .collect();
    (
        Batch {
            items,
            lengths: x.lengths.clone(),
        },
        Batch {
            items: masks,
            lengths: x.lengths.clone(),
        },
    )
}

pub fn dropout_backward<S: Scalar>(mask: &Batch<S>, gy: &Batch<S>) -> Batch<S> {
    let items = mask
        .items
        .iter()
        .zip(&gy.items)
        .enumerate()
        .map(|(bi, (mm, gym))| {
            let mut gx = Mat::zeros(gym.rows(), gym.cols());
            for r in 0..gym.rows() {
                for t in 0..gy.lengths[bi] {
                    gx.set(r, t, gym.at(r, t) * mm.at(r, t));
                }
            }
            gx
        })
        .collect();
    Batch {
        items,
        lengths: gy.lengths.clone(),
    }
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation
// ---------------------------------------------------------------------------

/// Gate MLP shared by the batched and streaming paths:
/// squeeze vector -> fc1 -> relu -> fc2 -> sigmoid.
pub fn se_gate<S: Scalar>(
    w1: &Tensor<S>,
    b1: &Tensor<S>,
    w2: &Tensor<S>,
    b2: &Tensor<S>,
    s: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let h = w1.dims()[0];
    let c = w2.dims()[0];
    let mut a1 = Vec::with_capacity(h);
    for hh in 0..h {
        let mut acc = b1.at1(hh);
        for (ci, &sv) in s.iter().enumerate() {
            acc = acc + w1.at2(hh, ci) * sv;
        }
        a1.push(acc);
    }
    let r: Vec<S> = a1.iter().map(|&v| v.max(S::zero())).collect();
    let mut g = Vec::with_capacity(c);
    for cc in 0..c {
        let mut acc = b2.at1(cc);
        for (hh, &rv) in r.iter().enumerate() {
            acc = acc + w2.at2(cc, hh) * rv;
        }
        g.push(S::one() / (S::one() + (-acc).exp()));
    }
    (a1, r, g)
}

pub struct SeGlobalCache<S> {
    pub x: Batch<S>,
    pub s: Vec<Vec<S>>,
    pub a1: Vec<Vec<S>>,
    pub r: Vec<Vec<S>>,
    pub g: Vec<Vec<S>>,
}

pub fn se_global_forward<S: Scalar>(
    w1: &Tensor<S>,
    b1: &Tensor<S>,
    w2: &Tensor<S>,
    b2: &Tensor<S>,
    x: &Batch<S>,
) -> (Batch<S>, SeGlobalCache<S>) {
    let c = w2.dims()[0];
    let per_item = par::map_range(x.len(), |bi| {
        let xm = &x.items[bi];
        let len = x.lengths[bi];
        let nf = S::from_f64(len as f64);
        let s: Vec<S> = (0..c)
            .map(|ch| {
                let mut acc = S::zero();
                for t in 0..len {
                    acc = acc + xm.at(ch, t);
                }
                acc / nf
            })
            .collect();
        let (a1, r, g) = se_gate(w1, b1, w2, b2, &s);
        let mut y = Mat::zeros(c, xm.cols());
        for ch in 0..c {
            for t in 0..len {
                y.set(ch, t, xm.at(ch, t) * g[ch]);
            }
        }
        (y, s, a1, r, g)
    });
    let mut items = Vec::with_capacity(per_item.len());
    let (mut sv, mut a1v, mut rv, mut gv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (y, s, a1, r, g) in per_item {
        items.push(y);
        sv.push(s);
        a1v.push(a1);
        rv.push(r);
        gv.push(g);
    }
    (
        Batch {
            items,
            lengths: x.lengths.clone(),
        },
        SeGlobalCache {
            x: x.clone(),
            s: sv,
            a1: a1v,
            r: rv,
            g: gv,
        },
    )
}

#[allow(clippy::type_complexity)]
pub fn se_global_backward<S: Scalar>(
    w1: &Tensor<S>,
    w2: &Tensor<S>,
    cache: &SeGlobalCache<S>,
    gy: &Batch<S>,
) -> (Batch<S>, Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>) {
    let h = w1.dims()[0];
    let c = w2.dims()[0];
    let per_item = par::map_range(gy.len(), |bi| {
        let xm = &cache.x.items[bi];
        let gym = &gy.items[bi];
        let len = gy.lengths[bi];
        let nf = S::from_f64(len as f64);
        let (s, a1, r, g) = (&cache.s[bi], &cache.a1[bi], &cache.r[bi], &cache.g[bi]);
        let mut gx = Mat::zeros(c, xm.cols());
        // Direct scale path and per-channel gate gradient.
        let mut dg = vec![S::zero(); c];
        for ch in 0..c {
            for t in 0..len {
                let gyv = gym.at(ch, t);
                gx.set(ch, t, gyv * g[ch]);
                dg[ch] = dg[ch] + gyv * xm.at(ch, t);
            }
        }
        // Through the gate MLP.
        let da2: Vec<S> = (0..c)
            .map(|ch| dg[ch] * g[ch] * (S::one() - g[ch]))
            .collect();
        let mut gw2 = Tensor::zeros(w2.dims());
        let mut gb2 = Tensor::zeros(&[c]);
        for ch in 0..c {
            gb2.add1(ch, da2[ch]);
            for hh in 0..h {
                gw2.add2(ch, hh, da2[ch] * r[hh]);
            }
        }
        let mut da1 = vec![S::zero(); h];
        for hh in 0..h {
            let mut acc = S::zero();
            for ch in 0..c {
                acc = acc + w2.at2(ch, hh) * da2[ch];
            }
            da1[hh] = if a1[hh] > S::zero() { acc } else { S::zero() };
        }
        let mut gw1 = Tensor::zeros(w1.dims());
        let mut gb1 = Tensor::zeros(&[h]);
        for hh in 0..h {
            gb1.add1(hh, da1[hh]);
            for ch in 0..c {
                gw1.add2(hh, ch, da1[hh] * s[ch]);
            }
        }
        // Squeeze path: ds spread uniformly over valid frames.
        for ch in 0..c {
            let mut ds = S::zero();
            for hh in 0..h {
                ds = ds + w1.at2(hh, ch) * da1[hh];
            }
            let spread = ds / nf;
            for t in 0..len {
                gx.add_at(ch, t, spread);
            }
        }
        (gx, gw1, gb1, gw2, gb2)
    });
    let mut gw1 = Tensor::zeros(w1.dims());
    let mut gb1 = Tensor::zeros(&[h]);
    let mut gw2 = Tensor::zeros(w2.dims());
    let mut gb2 = Tensor::zeros(&[c]);
    let mut items = Vec::with_capacity(per_item.len());
    for (gx, a, b, cc, d) in per_item {
        add_into(&mut gw1, &a);
        add_into(&mut gb1, &b);
        add_into(&mut gw2, &cc);
        add_into(&mut gb2, &d);
        items.push(gx);
    }
    (
        Batch {
            items,
            lengths: gy.lengths.clone(),
        },
        gw1,
        gb1,
        gw2,
        gb2,
    )
}

fn add_into<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>) {
    for (a, &v) in dst.data_mut().iter_mut().zip(src.data()) {
        *a = *a + v;
    }
}

pub struct SeWindowCache<S> {
    pub x: Batch<S>,
    /// Per item: squeeze vectors (C x T), fc1 pre-activations (H x T),
    /// gates (C x T).
    pub s: Vec<Mat<S>>,
    pub a1: Vec<Mat<S>>,
    pub g: Vec<Mat<S>>,
    pub window: usize,
}

pub fn se_window_forward<S: Scalar>(
    w1: &Tensor<S>,
    b1: &Tensor<S>,
    w2: &Tensor<S>,
    b2: &Tensor<S>,
    x: &Batch<S>,
    window: usize,
) -> (Batch<S>, SeWindowCache<S>) {
    let h = w1.dims()[0];
    let c = w2.dims()[0];
    let per_item = par::map_range(x.len(), |bi| {
        let xm = &x.items[bi];
        let len = x.lengths[bi];
        let mut y = Mat::zeros(c, xm.cols());
        let mut s_all = Mat::zeros(c, xm.cols());
        let mut a1_all = Mat::zeros(h, xm.cols());
        let mut g_all = Mat::zeros(c, xm.cols());
        let mut s = vec![S::zero(); c];
        for t in 0..len {
            let start = (t + 1).saturating_sub(window);
            let wf = S::from_f64((t + 1 - start) as f64);
            // Fresh ascending-time sums each frame; the streaming ring
            // buffer reproduces exactly this order.
            for (ch, sv) in s.iter_mut().enumerate() {
                let mut acc = S::zero();
                for u in start..=t {
                    acc = acc + xm.at(ch, u);
                }
                *sv = acc / wf;
            }
            let (a1, _r, g) = se_gate(w1, b1, w2, b2, &s);
            for ch in 0..c {
                s_all.set(ch, t, s[ch]);
                g_all.set(ch, t, g[ch]);
                y.set(ch, t, xm.at(ch, t) * g[ch]);
            }
            for hh in 0..h {
                a1_all.set(hh, t, a1[hh]);
            }
        }
        (y, s_all, a1_all, g_all)
    });
    let mut items = Vec::new();
    let (mut sv, mut a1v, mut gv) = (Vec::new(), Vec::new(), Vec::new());
    for (y, s, a1, g) in per_item {
        items.push(y);
        sv.push(s);
        a1v.push(a1);
        gv.push(g);
    }
    (
        Batch {
            items,
            lengths: x.lengths.clone(),
        },
        SeWindowCache {
            x: x.clone(),
            s: sv,
            a1: a1v,
            g: gv,
            window,
        },
    )
}

#[allow(clippy::type_complexity)]
pub fn se_window_backward<S: Scalar>(
    w1: &Tensor<S>,
    w2: &Tensor<S>,
    cache: &SeWindowCache<S>,
    gy: &Batch<S>,
) -> (Batch<S>, Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>) {
    let h = w1.dims()[0];
    let c = w2.dims()[0];
    let window = cache.window;
    let per_item = par::map_range(gy.len(), |bi| {
        let xm = &cache.x.items[bi];
        let gym = &gy.items[bi];
        let len = gy.lengths[bi];
        let mut gx = Mat::zeros(c, xm.cols());
        let mut gw1 = Tensor::zeros(w1.dims());
        let mut gb1 = Tensor::zeros(&[h]);
        let mut gw2 = Tensor::zeros(w2.dims());
        let mut gb2 = Tensor::zeros(&[c]);
        for t in 0..len {
            let start = (t + 1).saturating_sub(window);
            let wf = S::from_f64((t + 1 - start) as f64);
            // Direct scale path + gate gradient for this frame.
            let mut da2 = vec![S::zero(); c];
            for ch in 0..c {
                let gv = cache.g[bi].at(ch, t);
                let gyv = gym.at(ch, t);
                gx.add_at(ch, t, gyv * gv);
                let dg = gyv * xm.at(ch, t);
                da2[ch] = dg * gv * (S::one() - gv);
            }
            let mut da1 = vec![S::zero(); h];
            for hh in 0..h {
                let mut acc = S::zero();
                for ch in 0..c {
                    acc = acc + w2.at2(ch, hh) * da2[ch];
                }
                da1[hh] = if cache.a1[bi].at(hh, t) > S::zero() {
                    acc
                } else {
                    S::zero()
                };
            }
            for ch in 0..c {
                gb2.add1(ch, da2[ch]);
                for hh in 0..h {
                    let r = cache.a1[bi].at(hh, t).max(S::zero());
                    gw2.add2(ch, hh, da2[ch] * r);
                }
            }
            for hh in 0..h {
                gb1.add1(hh, da1[hh]);
                for ch in 0..c {
                    gw1.add2(hh, ch, da1[hh] * cache.s[bi].at(ch, t));
                }
            }
            for ch in 0..c {
                let mut ds = S::zero();
                for hh in 0..h {
                    ds = ds + w1.at2(hh, ch) * da1[hh];
                }
                let spread = ds / wf;
                for u in start..=t {
                    gx.add_at(ch, u, spread);
                }
            }
        }
        (gx, gw1, gb1, gw2, gb2)
    });
    let mut gw1 = Tensor::zeros(w1.dims());
    let mut gb1 = Tensor::zeros(&[h]);
    let mut gw2 = Tensor::zeros(w2.dims());
    let mut gb2 = Tensor::zeros(&[c]);
    let mut items = Vec::new();
    for (gx, a, b, cc, d) in per_item {
        add_into(&mut gw1, &a);
        add_into(&mut gb1, &b);
        add_into(&mut gw2, &cc);
        add_into(&mut gb2, &d);
        items.push(gx);
    }
    (
        Batch {
            items,
            lengths: gy.lengths.clone(),
        },
        gw1,
        gb1,
        gw2,
        gb2,
    )
}

// ---------------------------------------------------------------------------
// Attentive temporal pooling
// ---------------------------------------------------------------------------

pub struct PoolCache<S> {
    pub h: Batch<S>,
    /// tanh(W h_t + b) per item (A x T).
    pub u: Vec<Mat<S>>,
    pub alpha: Vec<Vec<S>>,
    pub mu: Vec<Vec<S>>,
    pub m2: Vec<Vec<S>>,
    pub var: Vec<Vec<S>>,
    pub sigma: Vec<Vec<S>>,
}

/// Attention score for one frame vector; shared with streaming.
pub fn attention_score<S: Scalar>(
    w: &Tensor<S>,
    b: &Tensor<S>,
    v: &Tensor<S>,
    h: &[S],
) -> S {
    let a_dim = w.dims()[0];
    let mut e = S::zero();
    for a in 0..a_dim {
        let mut z = b.at1(a);
        for (c, &hv) in h.iter().enumerate() {
            z = z + w.at2(a, c) * hv;
        }
        e = e + v.at1(a) * z.tanh();
    }
    e
}

pub fn pool_forward<S: Scalar>(
    w: &Tensor<S>,
    b: &Tensor<S>,
    v: &Tensor<S>,
    x: &Batch<S>,
) -> (Mat<S>, PoolCache<S>) {
    let a_dim = w.dims()[0];
    let c = w.dims()[1];
    let eps = S::from_f64(POOL_VAR_EPS);
    let per_item = par::map_range(x.len(), |bi| {
        let hm = &x.items[bi];
        let len = x.lengths[bi];
        assert!(len > 0, "pooling over zero frames");
        let mut u = Mat::zeros(a_dim, hm.cols());
        let mut e = Vec::with_capacity(len);
        for t in 0..len {
            let mut et = S::zero();
            for a in 0..a_dim {
                let mut z = b.at1(a);
                for ch in 0..c {
                    z = z + w.at2(a, ch) * hm.at(ch, t);
                }
                let ut = z.tanh();
                u.set(a, t, ut);
                et = et + v.at1(a) * ut;
            }
            e.push(et);
        }
        let m = e.iter().cloned().fold(S::neg_infinity(), S::max);
        let ws: Vec<S> = e.iter().map(|&ev| (ev - m).exp()).collect();
        let denom: S = ws.iter().cloned().sum();
        let alpha: Vec<S> = ws.iter().map(|&wv| wv / denom).collect();
        let mut mu = vec![S::zero(); c];
        let mut m2 = vec![S::zero(); c];
        for (t, &a_t) in alpha.iter().enumerate() {
            for ch in 0..c {
                let hv = hm.at(ch, t);
                mu[ch] = mu[ch] + a_t * hv;
                m2[ch] = m2[ch] + a_t * hv * hv;
            }
        }
        let var: Vec<S> = (0..c).map(|ch| m2[ch] - mu[ch] * mu[ch]).collect();
        let sigma: Vec<S> = var.iter().map(|&vv| (vv.max(S::zero()) + eps).sqrt()).collect();
        (u, alpha, mu, m2, var, sigma)
    });
    let n = x.len();
    let mut out = Mat::zeros(n, 2 * c);
    let mut cache = PoolCache {
        h: x.clone(),
        u: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
        mu: Vec::with_capacity(n),
        m2: Vec::with_capacity(n),
        var: Vec::with_capacity(n),
        sigma: Vec::with_capacity(n),
    };
    for (bi, (u, alpha, mu, m2, var, sigma)) in per_item.into_iter().enumerate() {
        for ch in 0..c {
            out.set(bi, ch, mu[ch]);
            out.set(bi, c + ch, sigma[ch]);
        }
        cache.u.push(u);
        cache.alpha.push(alpha);
        cache.mu.push(mu);
        cache.m2.push(m2);
        cache.var.push(var);
        cache.sigma.push(sigma);
    }
    (out, cache)
}

#[allow(clippy::type_complexity)]
pub fn pool_backward<S: Scalar>(
    w: &Tensor<S>,
    v: &Tensor<S>,
    cache: &PoolCache<S>,
    gout: &Mat<S>,
) -> (Batch<S>, Tensor<S>, Tensor<S>, Tensor<S>) {
    let a_dim = w.dims()[0];
    let c = w.dims()[1];
    let per_item = par::map_range(cache.h.len(), |bi| {
        let hm = &cache.h.items[bi];
        let len = cache.h.lengths[bi];
        let alpha = &cache.alpha[bi];
        let mut gh = Mat::zeros(c, hm.cols());
        let mut gw = Tensor::zeros(w.dims());
        let mut gb = Tensor::zeros(&[a_dim]);
        let mut gv = Tensor::zeros(&[a_dim]);
        // Split upstream gradient into mean and std parts.
        let mut dmu = vec![S::zero(); c];
        let mut dm2 = vec![S::zero(); c];
        for ch in 0..c {
            let dmu_ext = gout.at(bi, ch);
            let dsigma = gout.at(bi, c + ch);
            let dvarc = dsigma / (S::from_f64(2.0) * cache.sigma[bi][ch]);
            let dvar = if cache.var[bi][ch] > S::zero() {
                dvarc
            } else {
                S::zero()
            };
            dm2[ch] = dvar;
            dmu[ch] = dmu_ext - S::from_f64(2.0) * cache.mu[bi][ch] * dvar;
        }
        // Frame-value path and attention-weight gradient.
        let mut dalpha = vec![S::zero(); len];
        for (t, da) in dalpha.iter_mut().enumerate() {
            let mut acc = S::zero();
            for ch in 0..c {
                let hv = hm.at(ch, t);
                gh.add_at(ch, t, alpha[t] * (dmu[ch] + S::from_f64(2.0) * hv * dm2[ch]));
                acc = acc + dmu[ch] * hv + dm2[ch] * hv * hv;
            }
            *da = acc;
        }
        let inner: S = (0..len).map(|t| alpha[t] * dalpha[t]).sum();
        for t in 0..len {
            let de = alpha[t] * (dalpha[t] - inner);
            if de == S::zero() {
                continue;
            }
            for a in 0..a_dim {
                let u = cache.u[bi].at(a, t);
                gv.add1(a, de * u);
                let dz = de * v.at1(a) * (S::one() - u * u);
                gb.add1(a, dz);
                for ch in 0..c {
                    gw.add2(a, ch, dz * hm.at(ch, t));
                    gh.add_at(ch, t, w.at2(a, ch) * dz);
                }
            }
        }
        (gh, gw, gb, gv)
    });
    let mut gw = Tensor::zeros(w.dims());
    let mut gb = Tensor::zeros(&[a_dim]);
    let mut gv = Tensor::zeros(&[a_dim]);
    let mut items = Vec::new();
    for (gh, a, b, vv) in per_item {
        add_into(&mut gw, &a);
        add_into(&mut gb, &b);
        add_into(&mut gv, &vv);
        items.push(gh);
    }
    (
        Batch {
            items,
            lengths: cache.h.lengths.clone(),
        },
        gw,
        gb,
        gv,
    )
}

// ---------------------------------------------------------------------------
// Linear layers on per-utterance vectors (rows = batch items)
// ---------------------------------------------------------------------------

pub fn linear_forward<S: Scalar>(
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    x: &Mat<S>,
) -> Mat<S> {
    let (out_dim, in_dim) = (w.dims()[0], w.dims()[1]);
    debug_assert_eq!(x.cols(), in_dim);
    Mat::from_fn(x.rows(), out_dim, |i, o| {
        let mut acc = match b {
            Some(bt) => bt.at1(o),
            None => S::zero(),
        };
        for k in 0..in_dim {
            acc = acc + w.at2(o, k) * x.at(i, k);
        }
        acc
    })
}

/// Same computation on a single vector; used by streaming.
pub fn linear_vec<S: Scalar>(w: &Tensor<S>, b: Option<&Tensor<S>>, x: &[S]) -> Vec<S> {
    let (out_dim, in_dim) = (w.dims()[0], w.dims()[1]);
    debug_assert_eq!(x.len(), in_dim);
    (0..out_dim)
        .map(|o| {
            let mut acc = match b {
                Some(bt) => bt.at1(o),
                None => S::zero(),
            };
            for (k, &xv) in x.iter().enumerate() {
                acc = acc + w.at2(o, k) * xv;
            }
            acc
        })
        .collect()
}

pub fn linear_backward<S: Scalar>(
    w: &Tensor<S>,
    x: &Mat<S>,
    gy: &Mat<S>,
) -> (Mat<S>, Tensor<S>, Tensor<S>) {
    let (out_dim, in_dim) = (w.dims()[0], w.dims()[1]);
    let mut gx = Mat::zeros(x.rows(), in_dim);
    let mut gw = Tensor::zeros(w.dims());
    let mut gb = Tensor::zeros(&[out_dim]);
    for i in 0..x.rows() {
        for o in 0..out_dim {
            let g = gy.at(i, o);
            if g == S::zero() {
                continue;
            }
            gb.add1(o, g);
            for k in 0..in_dim {
                gw.add2(o, k, g * x.at(i, k));
                gx.add_at(i, k, g * w.at2(o, k));
            }
        }
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// Vector batch norm (over the batch dimension; used after the embedding)
// ---------------------------------------------------------------------------

pub struct VecBnCache<S> {
    pub x: Mat<S>,
    pub mean: Vec<S>,
    pub inv_std: Vec<S>,
    pub var: Vec<S>,
}

pub fn vec_bn_forward_train<S: Scalar>(
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    x: &Mat<S>,
) -> (Mat<S>, VecBnCache<S>) {
    let f = gamma.numel();
    let n = x.rows();
    let nf = S::from_f64(n as f64);
    let mut mean = vec![S::zero(); f];
    let mut var = vec![S::zero(); f];
    for ff in 0..f {
        let mut sum = S::zero();
        let mut sumsq = S::zero();
        for i in 0..n {
            let vx = x.at(i, ff);
            sum = sum + vx;
            sumsq = sumsq + vx * vx;
        }
        let m = sum / nf;
        mean[ff] = m;
        var[ff] = (sumsq / nf - m * m).max(S::zero());
    }
    let inv_std: Vec<S> = var
        .iter()
        .map(|&v| S::one() / (v + S::from_f64(BN_EPS)).sqrt())
        .collect();
    let y = Mat::from_fn(n, f, |i, ff| {
        (x.at(i, ff) - mean[ff]) * inv_std[ff] * gamma.at1(ff) + beta.at1(ff)
    });
    (
        y,
        VecBnCache {
            x: x.clone(),
            mean,
            inv_std,
            var,
        },
    )
}

pub fn vec_bn_forward_eval<S: Scalar>(
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    rm: &Tensor<S>,
    rv: &Tensor<S>,
    x: &Mat<S>,
) -> Mat<S> {
    let (a, b) = bn_eval_affine(gamma, beta, rm, rv);
    Mat::from_fn(x.rows(), x.cols(), |i, ff| a[ff] * x.at(i, ff) + b[ff])
}

pub fn vec_bn_backward_train<S: Scalar>(
    gamma: &Tensor<S>,
    cache: &VecBnCache<S>,
    gy: &Mat<S>,
) -> (Mat<S>, Tensor<S>, Tensor<S>) {
    let f = gamma.numel();
    let n = cache.x.rows();
    let nf = S::from_f64(n as f64);
    let mut dgamma = Tensor::zeros(&[f]);
    let mut dbeta = Tensor::zeros(&[f]);
    let mut sums = vec![(S::zero(), S::zero()); f];
    for ff in 0..f {
        for i in 0..n {
            let g = gy.at(i, ff);
            let xhat = (cache.x.at(i, ff) - cache.mean[ff]) * cache.inv_std[ff];
            sums[ff].0 = sums[ff].0 + g;
            sums[ff].1 = sums[ff].1 + g * xhat;
        }
        dbeta.add1(ff, sums[ff].0);
        dgamma.add1(ff, sums[ff].1);
    }
    let gx = Mat::from_fn(n, f, |i, ff| {
        let (sg, sgx) = sums[ff];
        let xhat = (cache.x.at(i, ff) - cache.mean[ff]) * cache.inv_std[ff];
        let g = gy.at(i, ff);
        gamma.at1(ff) * cache.inv_std[ff] / nf * (nf * g - sg - xhat * sgx)
    });
    (gx, dgamma, dbeta)
}
