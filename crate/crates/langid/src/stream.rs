//! Chunked streaming inference.
//!
//! The incremental frontend buffers raw samples into whole hops, each conv
//! layer caches exactly its receptive-field tail, windowed SE keeps a ring
//! of its trailing context, and attentive pooling runs on max-shifted
//! exponential accumulators. With windowed SE and precomputed
//! normalization statistics the final logits match the offline forward
//! pass; global-context SE streams with a causal running mean instead and
//! is an approximation by construction.
//!
//! All per-frame arithmetic is shared with the batch kernels, so any chunk
//! partition of the same audio produces identical results.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::frontend::{LogmelExtractor, HOP_LENGTH, N_MELS, STD_FLOOR, WIN_LENGTH};
use crate::nn::layers::{
    attention_score, bn_eval_affine, linear_vec, pointwise_col, se_gate, POOL_VAR_EPS,
};
use crate::nn::{HeadKind, ModelConfig, ParameterSet, Scalar, SeContext, Tensor};

/// Feature normalization mode for streaming.
#[derive(Clone, Debug)]
pub enum StreamNorm {
    /// Causal per-bin running mean/variance (self-contained, but differs
    /// from the offline per-utterance statistics).
    Running,
    /// Per-bin statistics supplied up front (e.g. from a first pass);
    /// matches the offline frontend exactly.
    Precomputed { mean: Vec<f32>, std: Vec<f32> },
}

#[derive(Clone)]
enum NormState {
    Running {
        count: f64,
        mean: Vec<f64>,
        m2: Vec<f64>,
    },
    Precomputed {
        mean: Vec<f32>,
        std: Vec<f32>,
    },
}

impl NormState {
    fn normalize(&mut self, frame: &mut [f32]) {
        match self {
            NormState::Precomputed { mean, std } => {
                for (v, (m, s)) in frame.iter_mut().zip(mean.iter().zip(std.iter())) {
                    *v = (*v - m) / s.max(STD_FLOOR);
                }
            }
            NormState::Running { count, mean, m2 } => {
                // Welford update; frame t normalizes with statistics over
                // frames 0..=t, so chunk boundaries cannot matter.
                *count += 1.0;
                for (i, v) in frame.iter_mut().enumerate() {
                    let x = *v as f64;
                    let delta = x - mean[i];
                    mean[i] += delta / *count;
                    m2[i] += delta * (x - mean[i]);
                    let std = ((m2[i] / *count).sqrt() as f32).max(STD_FLOOR);
                    *v = (x - mean[i]) as f32 / std;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Streaming layer states
// ---------------------------------------------------------------------------

/// Context cache for a same-padded conv: keeps just enough input frames
/// (channel vectors) to produce each output once its right context has
/// arrived. Memory is O(kernel * channels).
#[derive(Clone)]
struct ConvTail {
    pad: usize,
    buf: VecDeque<Vec<f32>>,
    /// Absolute index of buf[0].
    buf_start: usize,
    total_in: usize,
    next_out: usize,
}

impl ConvTail {
    fn new(kernel: usize) -> Self {
        ConvTail {
            pad: (kernel - 1) / 2,
            buf: VecDeque::new(),
            buf_start: 0,
            total_in: 0,
            next_out: 0,
        }
    }

    /// Input frame by absolute index; None outside what exists (treated as
    /// zero padding by callers, exactly like the batch kernels).
    fn input(&self, abs: usize) -> Option<&Vec<f32>> {
        if abs < self.buf_start || abs >= self.total_in {
            None
        } else {
            self.buf.get(abs - self.buf_start)
        }
    }

    fn feed(
        &mut self,
        frames: &[Vec<f32>],
        compute: &mut impl FnMut(&ConvTail, usize) -> Vec<f32>,
    ) -> Vec<Vec<f32>> {
        for f in frames {
            self.buf.push_back(f.clone());
            self.total_in += 1;
        }
        let mut out = Vec::new();
        while self.next_out + self.pad < self.total_in {
            out.push(self.emit_one(compute));
        }
        out
    }

    /// End of stream: the missing right context is zero padding.
    fn flush(&mut self, compute: &mut impl FnMut(&ConvTail, usize) -> Vec<f32>) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        while self.next_out < self.total_in {
            out.push(self.emit_one(compute));
        }
        out
    }

    fn emit_one(&mut self, compute: &mut impl FnMut(&ConvTail, usize) -> Vec<f32>) -> Vec<f32> {
        let t = self.next_out;
        let y = compute(&*self, t);
        self.next_out += 1;
        while self.buf_start + self.pad < self.next_out {
            self.buf.pop_front();
            self.buf_start += 1;
        }
        y
    }
}

#[derive(Clone)]
struct SubStream {
    tail: ConvTail,
    /// The last sub-block of a mega block defers its activation.
    relu: bool,
}

#[derive(Clone)]
enum SeStream {
    Window {
        window: usize,
        ring: VecDeque<Vec<f32>>,
    },
    /// Causal running-mean context standing in for global SE.
    CausalMean { sum: Vec<f64>, count: usize },
}

#[derive(Clone)]
struct BlockStream {
    subs: Vec<SubStream>,
    se: SeStream,
    res_fifo: VecDeque<Vec<f32>>,
}

#[derive(Clone)]
struct EncoderStream {
    prologue: ConvTail,
    blocks: Vec<BlockStream>,
    epilogue: ConvTail,
}

/// Max-shifted exponential accumulators realizing softmax-weighted mean
/// and standard deviation online.
#[derive(Clone, Debug)]
pub struct OnlinePool<S: Scalar> {
    max_score: S,
    denom: S,
    num_mu: Vec<S>,
    num_m2: Vec<S>,
    pub frames: usize,
}

impl<S: Scalar> OnlinePool<S> {
    pub fn new(channels: usize) -> Self {
        OnlinePool {
            max_score: S::neg_infinity(),
            denom: S::zero(),
            num_mu: vec![S::zero(); channels],
            num_m2: vec![S::zero(); channels],
            frames: 0,
        }
    }

    /// Fold in one frame with attention score `e`.
    pub fn update(&mut self, e: S, h: &[S]) {
        debug_assert_eq!(h.len(), self.num_mu.len());
        if e > self.max_score {
            let scale = if self.frames == 0 {
                S::zero()
            } else {
                (self.max_score - e).exp()
            };
            self.denom = self.denom * scale;
            for v in &mut self.num_mu {
                *v = *v * scale;
            }
            for v in &mut self.num_m2 {
                *v = *v * scale;
            }
            self.max_score = e;
        }
        let w = (e - self.max_score).exp();
        self.denom = self.denom + w;
        for (i, &hv) in h.iter().enumerate() {
            self.num_mu[i] = self.num_mu[i] + w * hv;
            self.num_m2[i] = self.num_m2[i] + w * hv * hv;
        }
        self.frames += 1;
    }

    /// Softmax-weighted mean and std over everything seen so far.
    pub fn stats(&self) -> (Vec<S>, Vec<S>) {
        assert!(self.frames > 0, "no frames accumulated");
        let eps = S::from_f64(POOL_VAR_EPS);
        let mu: Vec<S> = self.num_mu.iter().map(|&v| v / self.denom).collect();
        let sigma: Vec<S> = self
            .num_m2
            .iter()
            .zip(&mu)
            .map(|(&m2, &m)| ((m2 / self.denom - m * m).max(S::zero()) + eps).sqrt())
            .collect();
        (mu, sigma)
    }
}

// ---------------------------------------------------------------------------
// Per-frame layer math (shared op order with the batch kernels)
// ---------------------------------------------------------------------------

fn bn_affine(params: &ParameterSet<f32>, prefix: &str) -> (Vec<f32>, Vec<f32>) {
    bn_eval_affine(
        params.get(&format!("{prefix}.gamma")),
        params.get(&format!("{prefix}.beta")),
        params.get(&format!("{prefix}.running_mean")),
        params.get(&format!("{prefix}.running_var")),
    )
}

fn apply_affine(a: &[f32], b: &[f32], v: &mut [f32]) {
    for (i, x) in v.iter_mut().enumerate() {
        *x = a[i] * *x + b[i];
    }
}

fn relu_vec(v: &mut [f32]) {
    for x in v.iter_mut() {
        *x = x.max(0.0);
    }
}

/// Plain conv output frame t from cached inputs; the i-then-j summation
/// order matches `conv1d_forward`.
fn conv_frame(w: &Tensor<f32>, b: &Tensor<f32>, tail: &ConvTail, t: usize) -> Vec<f32> {
    let (c_out, c_in, k) = (w.dims()[0], w.dims()[1], w.dims()[2]);
    let pad = (k - 1) / 2;
    let mut y = Vec::with_capacity(c_out);
    for o in 0..c_out {
        let mut acc = b.at1(o);
        for i in 0..c_in {
            for j in 0..k {
                let tt = t + j;
                if tt >= pad {
                    if let Some(frame) = tail.input(tt - pad) {
                        acc += w.at3(o, i, j) * frame[i];
                    }
                }
            }
        }
        y.push(acc);
    }
    y
}

/// Depthwise conv output frame t; matches `depthwise_forward`.
fn dw_frame(w: &Tensor<f32>, tail: &ConvTail, t: usize) -> Vec<f32> {
    let (ch, k) = (w.dims()[0], w.dims()[1]);
    let pad = (k - 1) / 2;
    let mut y = vec![0.0f32; ch];
    for (cix, yv) in y.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for j in 0..k {
            let tt = t + j;
            if tt >= pad {
                if let Some(frame) = tail.input(tt - pad) {
                    acc += w.at2(cix, j) * frame[cix];
                }
            }
        }
        *yv = acc;
    }
    y
}

// ---------------------------------------------------------------------------
// The stream session
// ---------------------------------------------------------------------------

/// One streaming inference session over a single utterance. A session is
/// single-owner; distinct sessions share the immutable model freely.
pub struct Stream<'m> {
    cfg: &'m ModelConfig,
    params: &'m ParameterSet<f32>,
    extractor: LogmelExtractor,
    norm: NormState,
    pending: Vec<f32>,
    frames_seen: usize,
    enc: EncoderStream,
    pool: OnlinePool<f64>,
    finished: bool,
}

impl<'m> Stream<'m> {
    pub fn new(
        cfg: &'m ModelConfig,
        params: &'m ParameterSet<f32>,
        norm: StreamNorm,
    ) -> Result<Self> {
        cfg.validate()?;
        let norm = match norm {
            StreamNorm::Running => NormState::Running {
                count: 0.0,
                mean: vec![0.0; N_MELS],
                m2: vec![0.0; N_MELS],
            },
            StreamNorm::Precomputed { mean, std } => {
                if mean.len() != N_MELS || std.len() != N_MELS {
                    return Err(Error::Stream(format!(
                        "normalization stats must have {N_MELS} bins"
                    )));
                }
                NormState::Precomputed { mean, std }
            }
        };
        let blocks = cfg
            .mega_blocks
            .iter()
            .map(|b| BlockStream {
                subs: (0..b.repeats)
                    .map(|j| SubStream {
                        tail: ConvTail::new(b.kernel),
                        relu: j + 1 != b.repeats,
                    })
                    .collect(),
                se: match cfg.se_context {
                    SeContext::Window(w) => SeStream::Window {
                        window: w,
                        ring: VecDeque::new(),
                    },
                    SeContext::Global => SeStream::CausalMean {
                        sum: vec![0.0; b.channels],
                        count: 0,
                    },
                },
                res_fifo: VecDeque::new(),
            })
            .collect();
        Ok(Stream {
            cfg,
            params,
            extractor: LogmelExtractor::new(),
            norm,
            pending: Vec::new(),
            frames_seen: 0,
            enc: EncoderStream {
                prologue: ConvTail::new(cfg.prologue_kernel),
                blocks,
                epilogue: ConvTail::new(cfg.epilogue_kernel),
            },
            pool: OnlinePool::new(cfg.epilogue_channels),
            finished: false,
        })
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Feed a chunk of 16 kHz samples. Returns an interim probability
    /// estimate (what finalize would report if the stream ended here), or
    /// None before the first whole frame.
    pub fn push(&mut self, samples: &[f32]) -> Result<Option<Vec<f64>>> {
        if self.finished {
            return Err(Error::Stream("stream already finalized".into()));
        }
        self.pending.extend_from_slice(samples);
        let mut feat_frames: Vec<Vec<f32>> = Vec::new();
        while self.pending.len() >= WIN_LENGTH {
            let mut frame = self.extractor.frame(&self.pending[..WIN_LENGTH]);
            self.norm.normalize(&mut frame);
            feat_frames.push(frame);
            self.pending.drain(..HOP_LENGTH);
            self.frames_seen += 1;
        }
        if !feat_frames.is_empty() {
            let enc_frames = encoder_feed(self.cfg, self.params, &mut self.enc, &feat_frames);
            for h in &enc_frames {
                pool_update_into(self.params, &mut self.pool, h);
            }
        }
        if self.frames_seen == 0 {
            return Ok(None);
        }
        // Interim view: flush a copy of the pipeline.
        let mut enc = self.enc.clone();
        let mut pool = self.pool.clone();
        for h in encoder_flush(self.cfg, self.params, &mut enc) {
            pool_update_into(self.params, &mut pool, &h);
        }
        if pool.frames == 0 {
            return Ok(None);
        }
        Ok(Some(self.decode(&pool)))
    }

    /// Flush the remaining lookahead and return final probabilities.
    pub fn finalize(&mut self) -> Result<Vec<f64>> {
        self.finalize_with_logits().map(|(_, probs)| probs)
    }

    /// As [`finalize`](Self::finalize), also exposing the raw logits (for
    /// parity checks against the offline forward pass).
    pub fn finalize_with_logits(&mut self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.finished {
            return Err(Error::Stream("stream already finalized".into()));
        }
        self.finished = true;
        let tail = encoder_flush(self.cfg, self.params, &mut self.enc);
        for h in tail {
            pool_update_into(self.params, &mut self.pool, &h);
        }
        if self.pool.frames == 0 {
            return Err(Error::Stream("no frames pushed before finalize".into()));
        }
        let pool = self.pool.clone();
        let logits = self.decode_logits(&pool);
        let probs = crate::loss::softmax(&logits);
        Ok((logits, probs))
    }

    /// Decoder on pooled statistics: embedding linear (+optional BN+ReLU),
    /// head, softmax.
    fn decode(&self, pool: &OnlinePool<f64>) -> Vec<f64> {
        crate::loss::softmax(&self.decode_logits(pool))
    }

    fn decode_logits(&self, pool: &OnlinePool<f64>) -> Vec<f64> {
        let (mu, sigma) = pool.stats();
        let c = self.cfg.epilogue_channels;
        let mut pooled = Vec::with_capacity(2 * c);
        pooled.extend(mu.iter().map(|&v| v as f32));
        pooled.extend(sigma.iter().map(|&v| v as f32));
        let mut e = linear_vec(
            self.params.get("embed.weight"),
            Some(self.params.get("embed.bias")),
            &pooled,
        );
        if self.cfg.embed_bn {
            let (a, b) = bn_affine(self.params, "embed.bn");
            apply_affine(&a, &b, &mut e);
            relu_vec(&mut e);
        }
        let logits: Vec<f64> = match self.cfg.head {
            HeadKind::Linear { bias } => linear_vec(
                self.params.get("head.weight"),
                if bias {
                    Some(self.params.get("head.bias"))
                } else {
                    None
                },
                &e,
            )
            .iter()
            .map(|&v| v as f64)
            .collect(),
            HeadKind::Cosine { scale } => cosine_vec(self.params.get("head.weight"), scale, &e),
        };
        logits
    }
}

fn cosine_vec(w: &Tensor<f32>, scale: f64, e: &[f32]) -> Vec<f64> {
    let (n, dim) = (w.dims()[0], w.dims()[1]);
    let ne = e.iter().map(|&v| v * v).sum::<f32>().sqrt().max(1e-12);
    (0..n)
        .map(|j| {
            let mut dot = 0.0f32;
            let mut nw = 0.0f32;
            for d in 0..dim {
                dot += e[d] * w.at2(j, d);
                nw += w.at2(j, d) * w.at2(j, d);
            }
            scale * (dot / (ne * nw.sqrt().max(1e-12))) as f64
        })
        .collect()
}

fn pool_update_into(params: &ParameterSet<f32>, pool: &mut OnlinePool<f64>, h: &[f32]) {
    let e = attention_score(
        params.get("pool.att.w"),
        params.get("pool.att.b"),
        params.get("pool.att.v"),
        h,
    );
    let h64: Vec<f64> = h.iter().map(|&v| v as f64).collect();
    pool.update(e as f64, &h64);
}

// ---------------------------------------------------------------------------
// Streaming encoder drive
// ---------------------------------------------------------------------------

enum Drive<'a> {
    Feed(&'a [Vec<f32>]),
    Flush,
}

fn encoder_feed(
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    enc: &mut EncoderStream,
    frames: &[Vec<f32>],
) -> Vec<Vec<f32>> {
    encoder_drive(cfg, params, enc, Drive::Feed(frames))
}

fn encoder_flush(cfg: &ModelConfig, params: &ParameterSet<f32>, enc: &mut EncoderStream) -> Vec<Vec<f32>> {
    encoder_drive(cfg, params, enc, Drive::Flush)
}

fn encoder_drive(
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    enc: &mut EncoderStream,
    drive: Drive<'_>,
) -> Vec<Vec<f32>> {
    let flush = matches!(drive, Drive::Flush);

    // Prologue conv + BN + ReLU.
    let w = params.get("prologue.conv.weight");
    let b = params.get("prologue.conv.bias");
    let (bn_a, bn_b) = bn_affine(params, "prologue.bn");
    let mut compute = |tail: &ConvTail, t: usize| {
        let mut y = conv_frame(w, b, tail, t);
        apply_affine(&bn_a, &bn_b, &mut y);
        relu_vec(&mut y);
        y
    };
    let mut cur = match drive {
        Drive::Feed(frames) => enc.prologue.feed(frames, &mut compute),
        Drive::Flush => {
            let mut out = enc.prologue.feed(&[], &mut compute);
            out.extend(enc.prologue.flush(&mut compute));
            out
        }
    };

    // Mega blocks.
    for (bi, _) in cfg.mega_blocks.iter().enumerate() {
        let bs = &mut enc.blocks[bi];
        // Residual projections queue as soon as block input frames exist.
        let res_w = params.get(&format!("block{bi:02}.res.pw.weight"));
        let res_b = params.get(&format!("block{bi:02}.res.pw.bias"));
        let (res_a, res_bb) = bn_affine(params, &format!("block{bi:02}.res.bn"));
        for f in &cur {
            let mut proj = Vec::new();
            pointwise_col(res_w, res_b, f, &mut proj);
            apply_affine(&res_a, &res_bb, &mut proj);
            bs.res_fifo.push_back(proj);
        }
        // Sub-block chain.
        for (j, sub) in bs.subs.iter_mut().enumerate() {
            let p = format!("block{bi:02}.sub{j}");
            let dw = params.get(&format!("{p}.dw.weight"));
            let pw = params.get(&format!("{p}.pw.weight"));
            let pwb = params.get(&format!("{p}.pw.bias"));
            let (a, bb) = bn_affine(params, &format!("{p}.bn"));
            let relu = sub.relu;
            let mut compute = |tail: &ConvTail, t: usize| {
                let y = dw_frame(dw, tail, t);
                let mut z = Vec::new();
                pointwise_col(pw, pwb, &y, &mut z);
                apply_affine(&a, &bb, &mut z);
                if relu {
                    relu_vec(&mut z);
                }
                z
            };
            let mut out = sub.tail.feed(&cur, &mut compute);
            if flush {
                out.extend(sub.tail.flush(&mut compute));
            }
            cur = out;
        }
        // SE gate, residual add, ReLU.
        let se_p = format!("block{bi:02}.se");
        let w1 = params.get(&format!("{se_p}.fc1.weight"));
        let b1 = params.get(&format!("{se_p}.fc1.bias"));
        let w2 = params.get(&format!("{se_p}.fc2.weight"));
        let b2 = params.get(&format!("{se_p}.fc2.bias"));
        let mut gated: Vec<Vec<f32>> = Vec::with_capacity(cur.len());
        for f in cur {
            let s: Vec<f32> = match &mut bs.se {
                SeStream::Window { window, ring } => {
                    ring.push_back(f.clone());
                    if ring.len() > *window {
                        ring.pop_front();
                    }
                    let wf = ring.len() as f32;
                    // Fresh ascending-time sums, mirroring the batch kernel.
                    (0..f.len())
                        .map(|ch| {
                            let mut acc = 0.0f32;
                            for frame in ring.iter() {
                                acc += frame[ch];
                            }
                            acc / wf
                        })
                        .collect()
                }
                SeStream::CausalMean { sum, count } => {
                    *count += 1;
                    for (s, &v) in sum.iter_mut().zip(&f) {
                        *s += v as f64;
                    }
                    sum.iter().map(|&s| (s / *count as f64) as f32).collect()
                }
            };
            let (_a1, _r, g) = se_gate(w1, b1, w2, b2, &s);
            let mut y: Vec<f32> = f.iter().zip(&g).map(|(&x, &gv)| x * gv).collect();
            let res = bs
                .res_fifo
                .pop_front()
                .expect("residual frame aligned with main path");
            for (yv, rv) in y.iter_mut().zip(&res) {
                *yv += rv;
            }
            relu_vec(&mut y);
            gated.push(y);
        }
        cur = gated;
    }

    // Epilogue conv + BN + ReLU.
    let w = params.get("epilogue.conv.weight");
    let b = params.get("epilogue.conv.bias");
    let (bn_a, bn_b) = bn_affine(params, "epilogue.bn");
    let mut compute = |tail: &ConvTail, t: usize| {
        let mut y = conv_frame(w, b, tail, t);
        apply_affine(&bn_a, &bn_b, &mut y);
        relu_vec(&mut y);
        y
    };
    let mut out = enc.epilogue.feed(&cur, &mut compute);
    if flush {
        out.extend(enc.epilogue.flush(&mut compute));
    }
    out
}
