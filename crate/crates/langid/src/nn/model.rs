//! Full model: prologue conv, SE-gated mega blocks with residuals,
//! epilogue conv, attentive temporal pooling, and the linear decoder.
//!
//! `forward` caches every intermediate needed by `backward`, which fills a
//! gradient store that parallels the parameter store. Batch-norm running
//! statistics are not touched by `forward`; the trainer applies them
//! explicitly via [`apply_bn_updates`].

use crate::error::{Error, Result};

pub use super::layers::Batch;
use super::layers::{self, BnCache, PoolCache, SeGlobalCache, SeWindowCache, VecBnCache};
use super::tensor::{Mat, ParameterSet, Scalar, Tensor};
use super::{HeadKind, ModelConfig, SeContext};

/// Forward-pass mode: training uses batch statistics and dropout, eval uses
/// running statistics and no dropout.
#[derive(Clone, Copy, Debug)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

impl Mode {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

pub(crate) enum BnState<S> {
    Train(BnCache<S>),
    Eval,
}

pub(crate) enum SeState<S> {
    Global(SeGlobalCache<S>),
    Window(SeWindowCache<S>),
}

pub(crate) struct SubActs<S> {
    pub dw_in: Batch<S>,
    pub pw_in: Batch<S>,
    pub bn: BnState<S>,
    /// Present on all but the last sub-block of a mega block.
    pub relu_out: Option<Batch<S>>,
    pub drop_mask: Option<Batch<S>>,
}

pub(crate) struct BlockActs<S> {
    pub subs: Vec<SubActs<S>>,
    pub se: SeState<S>,
    pub res_bn: BnState<S>,
    pub relu_out: Batch<S>,
    pub drop_mask: Option<Batch<S>>,
}

pub(crate) struct EncoderActs<S> {
    pub input: Batch<S>,
    pub pro_bn: BnState<S>,
    pub pro_relu: Batch<S>,
    pub blocks: Vec<BlockActs<S>>,
    pub epi_bn: BnState<S>,
    pub epi_relu: Batch<S>,
}

/// Everything the reverse pass needs, plus the batch-norm statistics the
/// trainer folds into the running estimates.
pub struct Activations<S> {
    pub(crate) mode: Mode,
    pub(crate) enc: EncoderActs<S>,
    pub(crate) pool: PoolCache<S>,
    pub(crate) pooled: Mat<S>,
    pub(crate) embed_bn: Option<VecBnCache<S>>,
    /// Embedding after the optional BN+ReLU; what the head consumes.
    pub(crate) embedding: Mat<S>,
    /// (bn prefix, batch mean, batch var) for every train-mode BN.
    pub(crate) bn_updates: Vec<(String, Vec<S>, Vec<S>)>,
}

pub struct ForwardOut<S> {
    pub logits: Mat<S>,
    /// Final embedding, rows = batch items.
    pub embedding: Mat<S>,
    pub acts: Activations<S>,
}

/// Where the loss injects its gradient.
pub enum BackSignal<S> {
    /// d(loss)/d(logits); linear head only.
    Logits(Mat<S>),
    /// d(loss)/d(embedding); used by the angular-margin loss, which owns
    /// the head gradient itself.
    Embedding(Mat<S>),
}

fn bn_tensors<'p, S: Scalar>(
    params: &'p ParameterSet<S>,
    prefix: &str,
) -> (&'p Tensor<S>, &'p Tensor<S>, &'p Tensor<S>, &'p Tensor<S>) {
    (
        params.get(&format!("{prefix}.gamma")),
        params.get(&format!("{prefix}.beta")),
        params.get(&format!("{prefix}.running_mean")),
        params.get(&format!("{prefix}.running_var")),
    )
}

#[allow(clippy::too_many_arguments)]
fn bn_apply<S: Scalar>(
    params: &ParameterSet<S>,
    prefix: &str,
    x: &Batch<S>,
    mode: Mode,
    updates: &mut Vec<(String, Vec<S>, Vec<S>)>,
) -> (Batch<S>, BnState<S>) {
    let (gamma, beta, rm, rv) = bn_tensors(params, prefix);
    if mode.is_train() {
        let (y, cache) = layers::bn_forward_train(gamma, beta, x);
        updates.push((prefix.to_string(), cache.mean.clone(), cache.var.clone()));
        (y, BnState::Train(cache))
    } else {
        let y = layers::bn_forward_eval(gamma, beta, rm, rv, x);
        (y, BnState::Eval)
    }
}

fn add_batches<S: Scalar>(a: &Batch<S>, b: &Batch<S>) -> Batch<S> {
    let items = a
        .items
        .iter()
        .zip(&b.items)
        .map(|(am, bm)| Mat::from_fn(am.rows(), am.cols(), |r, c| am.at(r, c) + bm.at(r, c)))
        .collect();
    Batch {
        items,
        lengths: a.lengths.clone(),
    }
}

/// Run the convolutional encoder; output is the epilogue activation
/// (C_e x T per item).
pub(crate) fn encoder_forward<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParameterSet<S>,
    input: Batch<S>,
    mode: Mode,
    updates: &mut Vec<(String, Vec<S>, Vec<S>)>,
) -> EncoderActs<S> {
    let mut dropout_layer = 0u64;
    let dropout_seed = match mode {
        Mode::Train { dropout_seed } => dropout_seed,
        Mode::Eval => 0,
    };

    let pro_out = layers::conv1d_forward(
        params.get("prologue.conv.weight"),
        params.get("prologue.conv.bias"),
        &input,
    );
    let (pro_bn_out, pro_bn) = bn_apply(params, "prologue.bn", &pro_out, mode, updates);
    let pro_relu = layers::relu_forward(&pro_bn_out);

    let mut x = pro_relu.clone();
    let mut blocks = Vec::with_capacity(cfg.mega_blocks.len());
    for (bi, block) in cfg.mega_blocks.iter().enumerate() {
        let block_input = x.clone();
        let mut subs = Vec::with_capacity(block.repeats);
        let mut cur = block_input.clone();
        for j in 0..block.repeats {
            let p = format!("block{bi:02}.sub{j}");
            let dw_in = cur;
            let dw_out = layers::depthwise_forward(params.get(&format!("{p}.dw.weight")), &dw_in);
            let pw_out = layers::pointwise_forward(
                params.get(&format!("{p}.pw.weight")),
                params.get(&format!("{p}.pw.bias")),
                &dw_out,
            );
            let (bn_out, bn) = bn_apply(params, &format!("{p}.bn"), &pw_out, mode, updates);
            let last = j + 1 == block.repeats;
            if last {
                subs.push(SubActs {
                    dw_in,
                    pw_in: dw_out,
                    bn,
                    relu_out: None,
                    drop_mask: None,
                });
                cur = bn_out;
            } else {
                let relu_out = layers::relu_forward(&bn_out);
                let (dropped, mask) = if mode.is_train() {
                    let (d, m) =
                        layers::dropout_forward(&relu_out, block.dropout, dropout_seed, dropout_layer);
                    dropout_layer += 1;
                    (d, Some(m))
                } else {
                    (relu_out.clone(), None)
                };
                subs.push(SubActs {
                    dw_in,
                    pw_in: dw_out,
                    bn,
                    relu_out: Some(relu_out),
                    drop_mask: mask,
                });
                cur = dropped;
            }
        }
        // SE on the last sub-block output.
        let se_p = format!("block{bi:02}.se");
        let (se_out, se) = match cfg.se_context {
            SeContext::Global => {
                let (y, cache) = layers::se_global_forward(
                    params.get(&format!("{se_p}.fc1.weight")),
                    params.get(&format!("{se_p}.fc1.bias")),
                    params.get(&format!("{se_p}.fc2.weight")),
                    params.get(&format!("{se_p}.fc2.bias")),
                    &cur,
                );
                (y, SeState::Global(cache))
            }
            SeContext::Window(w) => {
                let (y, cache) = layers::se_window_forward(
                    params.get(&format!("{se_p}.fc1.weight")),
                    params.get(&format!("{se_p}.fc1.bias")),
                    params.get(&format!("{se_p}.fc2.weight")),
                    params.get(&format!("{se_p}.fc2.bias")),
                    &cur,
                    w,
                );
                (y, SeState::Window(cache))
            }
        };
        // Residual: 1x1 projection of the block input.
        let res_p = format!("block{bi:02}.res");
        let res_pw = layers::pointwise_forward(
            params.get(&format!("{res_p}.pw.weight")),
            params.get(&format!("{res_p}.pw.bias")),
            &block_input,
        );
        let (res_out, res_bn) = bn_apply(params, &format!("{res_p}.bn"), &res_pw, mode, updates);
        let sum = add_batches(&se_out, &res_out);
        let relu_out = layers::relu_forward(&sum);
        let (out, drop_mask) = if mode.is_train() {
            let (d, m) =
                layers::dropout_forward(&relu_out, block.dropout, dropout_seed, dropout_layer);
            dropout_layer += 1;
            (d, Some(m))
        } else {
            (relu_out.clone(), None)
        };
        blocks.push(BlockActs {
            subs,
            se,
            res_bn,
            relu_out,
            drop_mask,
        });
        x = out;
    }

    let epi_out = layers::conv1d_forward(
        params.get("epilogue.conv.weight"),
        params.get("epilogue.conv.bias"),
        &x,
    );
    let (epi_bn_out, epi_bn) = bn_apply(params, "epilogue.bn", &epi_out, mode, updates);
    let epi_relu = layers::relu_forward(&epi_bn_out);

    EncoderActs {
        input,
        pro_bn,
        pro_relu,
        blocks,
        epi_bn,
        epi_relu,
    }
}

fn cosine_logits<S: Scalar>(w: &Tensor<S>, scale: f64, e: &Mat<S>) -> Mat<S> {
    let (n_classes, dim) = (w.dims()[0], w.dims()[1]);
    let floor = S::from_f64(1e-12);
    let s = S::from_f64(scale);
    Mat::from_fn(e.rows(), n_classes, |i, j| {
        let mut dot = S::zero();
        let mut ne = S::zero();
        let mut nw = S::zero();
        for k in 0..dim {
            let ev = e.at(i, k);
            let wv = w.at2(j, k);
            dot = dot + ev * wv;
            ne = ne + ev * ev;
            nw = nw + wv * wv;
        }
        s * dot / (ne.sqrt().max(floor) * nw.sqrt().max(floor))
    })
}

/// Full forward pass over a padded feature batch.
pub fn forward<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParameterSet<S>,
    batch: &Batch<S>,
    mode: Mode,
) -> Result<ForwardOut<S>> {
    for m in &batch.items {
        if m.rows() != cfg.n_mels {
            return Err(Error::Shape(format!(
                "feature rows {} != n_mels {}",
                m.rows(),
                cfg.n_mels
            )));
        }
    }
    if batch.lengths.iter().any(|&l| l == 0) {
        return Err(Error::Shape("zero-length utterance in batch".into()));
    }
    let mut updates = Vec::new();
    let enc = encoder_forward(cfg, params, batch.clone(), mode, &mut updates);

    let (pooled, pool) = layers::pool_forward(
        params.get("pool.att.w"),
        params.get("pool.att.b"),
        params.get("pool.att.v"),
        &enc.epi_relu,
    );
    let embed_lin = layers::linear_forward(
        params.get("embed.weight"),
        Some(params.get("embed.bias")),
        &pooled,
    );
    let (embedding, embed_bn) = if cfg.embed_bn {
        let (gamma, beta, rm, rv) = bn_tensors(params, "embed.bn");
        if mode.is_train() {
            let (y, cache) = layers::vec_bn_forward_train(gamma, beta, &embed_lin);
            updates.push(("embed.bn".to_string(), cache.mean.clone(), cache.var.clone()));
            (y.map(|v| v.max(S::zero())), Some(cache))
        } else {
            let y = layers::vec_bn_forward_eval(gamma, beta, rm, rv, &embed_lin);
            (y.map(|v| v.max(S::zero())), None)
        }
    } else {
        (embed_lin.clone(), None)
    };

    let logits = match cfg.head {
        HeadKind::Linear { bias } => layers::linear_forward(
            params.get("head.weight"),
            if bias {
                Some(params.get("head.bias"))
            } else {
                None
            },
            &embedding,
        ),
        HeadKind::Cosine { scale } => cosine_logits(params.get("head.weight"), scale, &embedding),
    };

    Ok(ForwardOut {
        logits: logits.clone(),
        embedding: embedding.clone(),
        acts: Activations {
            mode,
            enc,
            pool,
            pooled,
            embed_bn,
            embedding,
            bn_updates: updates,
        },
    })
}

fn grad_add<S: Scalar>(grads: &mut ParameterSet<S>, name: &str, t: &Tensor<S>) {
    let dst = grads.get_mut(name);
    for (a, &v) in dst.data_mut().iter_mut().zip(t.data()) {
        *a = *a + v;
    }
}

fn bn_backward<S: Scalar>(
    params: &ParameterSet<S>,
    grads: &mut ParameterSet<S>,
    prefix: &str,
    state: &BnState<S>,
    gy: &Batch<S>,
) -> Batch<S> {
    match state {
        BnState::Train(cache) => {
            let gamma = params.get(&format!("{prefix}.gamma"));
            let (gx, dgamma, dbeta) = layers::bn_backward_train(gamma, cache, gy);
            grad_add(grads, &format!("{prefix}.gamma"), &dgamma);
            grad_add(grads, &format!("{prefix}.beta"), &dbeta);
            gx
        }
        BnState::Eval => panic!("backward requires train-mode activations"),
    }
}

/// Reverse pass; returns a gradient store shaped like the parameters.
/// Running statistics entries stay zero.
pub fn backward<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParameterSet<S>,
    acts: &Activations<S>,
    signal: BackSignal<S>,
) -> ParameterSet<S> {
    assert!(acts.mode.is_train(), "backward requires train-mode activations");
    let mut grads = params.zeros_like();

    // Head and embedding.
    let mut ge = match signal {
        BackSignal::Logits(gl) => match cfg.head {
            HeadKind::Linear { bias } => {
                let (gx, gw, gb) = layers::linear_backward(params.get("head.weight"), &acts.embedding, &gl);
                grad_add(&mut grads, "head.weight", &gw);
                if bias {
                    grad_add(&mut grads, "head.bias", &gb);
                }
                gx
            }
            HeadKind::Cosine { .. } => {
                panic!("cosine head is trained through the margin loss, not logits")
            }
        },
        BackSignal::Embedding(ge) => ge,
    };

    if cfg.embed_bn {
        let cache = acts.embed_bn.as_ref().expect("embed bn cache");
        // ReLU over the BN output.
        ge = Mat::from_fn(ge.rows(), ge.cols(), |i, j| {
            if acts.embedding.at(i, j) > S::zero() {
                ge.at(i, j)
            } else {
                S::zero()
            }
        });
        let gamma = params.get("embed.bn.gamma");
        let (gx, dgamma, dbeta) = layers::vec_bn_backward_train(gamma, cache, &ge);
        grad_add(&mut grads, "embed.bn.gamma", &dgamma);
        grad_add(&mut grads, "embed.bn.beta", &dbeta);
        ge = gx;
    }

    let (g_pooled, gw, gb) = layers::linear_backward(params.get("embed.weight"), &acts.pooled, &ge);
    grad_add(&mut grads, "embed.weight", &gw);
    grad_add(&mut grads, "embed.bias", &gb);

    let (mut gx, gw, gb, gv) = layers::pool_backward(
        params.get("pool.att.w"),
        params.get("pool.att.v"),
        &acts.pool,
        &g_pooled,
    );
    grad_add(&mut grads, "pool.att.w", &gw);
    grad_add(&mut grads, "pool.att.b", &gb);
    grad_add(&mut grads, "pool.att.v", &gv);

    // Epilogue.
    gx = layers::relu_backward(&acts.enc.epi_relu, &gx);
    gx = bn_backward(params, &mut grads, "epilogue.bn", &acts.enc.epi_bn, &gx);
    {
        // Epilogue conv input = last block output (dropout of its relu_out
        // in train mode).
        let last = acts.enc.blocks.last().expect("blocks");
        let conv_in = match &last.drop_mask {
            Some(mask) => {
                // Recompute the dropped output cheaply: relu_out * mask.
                let items = last
                    .relu_out
                    .items
                    .iter()
                    .zip(&mask.items)
                    .map(|(r, m)| Mat::from_fn(r.rows(), r.cols(), |a, b| r.at(a, b) * m.at(a, b)))
                    .collect();
                Batch {
                    items,
                    lengths: last.relu_out.lengths.clone(),
                }
            }
            None => last.relu_out.clone(),
        };
        let (g_in, gw, gb) = layers::conv1d_backward(params.get("epilogue.conv.weight"), &conv_in, &gx);
        grad_add(&mut grads, "epilogue.conv.weight", &gw);
        grad_add(&mut grads, "epilogue.conv.bias", &gb);
        gx = g_in;
    }

    // Mega blocks in reverse.
    for (bi, (block, bacts)) in cfg
        .mega_blocks
        .iter()
        .zip(&acts.enc.blocks)
        .enumerate()
        .rev()
    {
        if let Some(mask) = &bacts.drop_mask {
            gx = layers::dropout_backward(mask, &gx);
        }
        gx = layers::relu_backward(&bacts.relu_out, &gx);
        // Sum splits into the SE branch and the residual branch.
        let g_res = gx.clone();
        let se_p = format!("block{bi:02}.se");
        let mut g_main = match &bacts.se {
            SeState::Global(cache) => {
                let (g, gw1, gb1, gw2, gb2) = layers::se_global_backward(
                    params.get(&format!("{se_p}.fc1.weight")),
                    params.get(&format!("{se_p}.fc2.weight")),
                    cache,
                    &gx,
                );
                grad_add(&mut grads, &format!("{se_p}.fc1.weight"), &gw1);
                grad_add(&mut grads, &format!("{se_p}.fc1.bias"), &gb1);
                grad_add(&mut grads, &format!("{se_p}.fc2.weight"), &gw2);
                grad_add(&mut grads, &format!("{se_p}.fc2.bias"), &gb2);
                g
            }
            SeState::Window(cache) => {
                let (g, gw1, gb1, gw2, gb2) = layers::se_window_backward(
                    params.get(&format!("{se_p}.fc1.weight")),
                    params.get(&format!("{se_p}.fc2.weight")),
                    cache,
                    &gx,
                );
                grad_add(&mut grads, &format!("{se_p}.fc1.weight"), &gw1);
                grad_add(&mut grads, &format!("{se_p}.fc1.bias"), &gb1);
                grad_add(&mut grads, &format!("{se_p}.fc2.weight"), &gw2);
                grad_add(&mut grads, &format!("{se_p}.fc2.bias"), &gb2);
                g
            }
        };
        // Residual branch.
        let res_p = format!("block{bi:02}.res");
        let g_res_pw = bn_backward(params, &mut grads, &format!("{res_p}.bn"), &bacts.res_bn, &g_res);
        let (g_block_input_res, gw, gb) = layers::pointwise_backward(
            params.get(&format!("{res_p}.pw.weight")),
            &bacts.subs[0].dw_in,
            &g_res_pw,
        );
        grad_add(&mut grads, &format!("{res_p}.pw.weight"), &gw);
        grad_add(&mut grads, &format!("{res_p}.pw.bias"), &gb);

        // Sub-blocks in reverse.
        for (j, sub) in bacts.subs.iter().enumerate().rev() {
            let p = format!("block{bi:02}.sub{j}");
            if let Some(mask) = &sub.drop_mask {
                g_main = layers::dropout_backward(mask, &g_main);
            }
            if let Some(relu_out) = &sub.relu_out {
                g_main = layers::relu_backward(relu_out, &g_main);
            }
            g_main = bn_backward(params, &mut grads, &format!("{p}.bn"), &sub.bn, &g_main);
            let (g_dw_out, gw, gb) = layers::pointwise_backward(
                params.get(&format!("{p}.pw.weight")),
                &sub.pw_in,
                &g_main,
            );
            grad_add(&mut grads, &format!("{p}.pw.weight"), &gw);
            grad_add(&mut grads, &format!("{p}.pw.bias"), &gb);
            let (g_dw_in, gw) =
                layers::depthwise_backward(params.get(&format!("{p}.dw.weight")), &sub.dw_in, &g_dw_out);
            grad_add(&mut grads, &format!("{p}.dw.weight"), &gw);
            g_main = g_dw_in;
        }
        gx = add_batches(&g_main, &g_block_input_res);
        let _ = block;
    }

    // Prologue.
    gx = layers::relu_backward(&acts.enc.pro_relu, &gx);
    gx = bn_backward(params, &mut grads, "prologue.bn", &acts.enc.pro_bn, &gx);
    let (_, gw, gb) = layers::conv1d_backward(params.get("prologue.conv.weight"), &acts.enc.input, &gx);
    grad_add(&mut grads, "prologue.conv.weight", &gw);
    grad_add(&mut grads, "prologue.conv.bias", &gb);

    grads
}

/// Fold the batch statistics recorded by a train-mode forward pass into the
/// running estimates.
pub fn apply_bn_updates<S: Scalar>(params: &mut ParameterSet<S>, acts: &Activations<S>) {
    let mom = S::from_f64(layers::BN_MOMENTUM);
    let keep = S::one() - mom;
    for (prefix, mean, var) in &acts.bn_updates {
        let rm = params.get_mut(&format!("{prefix}.running_mean"));
        for (r, &m) in rm.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + mom * m;
        }
        let rv = params.get_mut(&format!("{prefix}.running_var"));
        for (r, &v) in rv.data_mut().iter_mut().zip(var) {
            *r = keep * *r + mom * v;
        }
    }
}

/// Eval-mode class probabilities for a set of feature matrices, in f64.
pub fn infer_probs<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParameterSet<S>,
    feats: Vec<Mat<S>>,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(feats.len());
    for chunk in feats.chunks(batch_size.max(1)) {
        let batch = Batch::from_items(chunk.to_vec());
        let fwd = forward(cfg, params, &batch, Mode::Eval)?;
        for i in 0..batch.len() {
            let row: Vec<f64> = fwd.logits.row(i).iter().map(|v| v.as_f64()).collect();
            out.push(crate::loss::softmax(&row));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, MegaBlock};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_mels: 6,
            prologue_kernel: 3,
            prologue_channels: 8,
            mega_blocks: vec![
                MegaBlock {
                    repeats: 2,
                    kernel: 3,
                    channels: 8,
                    dropout: 0.0,
                },
                MegaBlock {
                    repeats: 2,
                    kernel: 5,
                    channels: 10,
                    dropout: 0.0,
                },
            ],
            epilogue_kernel: 1,
            epilogue_channels: 12,
            se_reduction: 4,
            se_context: SeContext::Global,
            attention_hidden: 5,
            embed_dim: 7,
            embed_bn: false,
            n_classes: 2,
            head: HeadKind::Linear { bias: true },
        }
    }

    fn rand_feat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn forward_shapes_and_softmax_rows() {
        let cfg = small_cfg();
        let params = init_params::<f64>(&cfg, 0);
        let batch = Batch::from_items(vec![rand_feat(6, 12, 1), rand_feat(6, 9, 2)]);
        let out = forward(&cfg, &params, &batch, Mode::Eval).unwrap();
        assert_eq!(out.logits.rows(), 2);
        assert_eq!(out.logits.cols(), 2);
        assert_eq!(out.embedding.cols(), 7);
        for i in 0..2 {
            let row: Vec<f64> = out.logits.row(i).to_vec();
            let p = crate::loss::softmax(&row);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let cfg = small_cfg();
        let params = init_params::<f64>(&cfg, 3);
        let a = rand_feat(6, 10, 10);
        let b = rand_feat(6, 14, 11);
        let c = rand_feat(6, 8, 12);
        let fwd1 = forward(
            &cfg,
            &params,
            &Batch::from_items(vec![a.clone(), b.clone(), c.clone()]),
            Mode::Eval,
        )
        .unwrap();
        let fwd2 = forward(
            &cfg,
            &params,
            &Batch::from_items(vec![c, a, b]),
            Mode::Eval,
        )
        .unwrap();
        for (i1, i2) in [(0usize, 1usize), (1, 2), (2, 0)] {
            for j in 0..2 {
                let d = (fwd1.logits.at(i1, j) - fwd2.logits.at(i2, j)).abs();
                assert!(d < 1e-9, "permutation changed logits by {d}");
            }
        }
    }

    #[test]
    fn extra_padding_leaves_logits_unchanged() {
        let cfg = small_cfg();
        let params = init_params::<f64>(&cfg, 4);
        let a = rand_feat(6, 11, 20);
        let unpadded = forward(
            &cfg,
            &params,
            &Batch::from_items(vec![a.clone()]),
            Mode::Eval,
        )
        .unwrap();
        // Same utterance forced to 30 padded frames by batching with a
        // longer one.
        let long = rand_feat(6, 30, 21);
        let padded = forward(
            &cfg,
            &params,
            &Batch::from_items(vec![a, long]),
            Mode::Eval,
        )
        .unwrap();
        for j in 0..2 {
            let d = (unpadded.logits.at(0, j) - padded.logits.at(0, j)).abs();
            assert!(d < 1e-5, "padding shifted logit by {d}");
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let cfg = small_cfg();
        let params = init_params::<f64>(&cfg, 5);
        let batch = Batch::from_items(vec![rand_feat(6, 10, 30)]);
        let out = forward(&cfg, &params, &batch, Mode::Train { dropout_seed: 0 }).unwrap();
        let gl = Mat::zeros(1, 2);
        let grads = backward(&cfg, &params, &out.acts, BackSignal::Logits(gl));
        for (name, t) in grads.iter() {
            for &v in t.data() {
                assert_eq!(v, 0.0, "nonzero grad in {name}");
            }
        }
    }

    #[test]
    fn train_eval_forward_agree_when_stats_match() {
        // With running stats equal to the batch stats and dropout 0, the
        // two modes produce nearly identical outputs.
        let cfg = small_cfg();
        let mut params = init_params::<f64>(&cfg, 6);
        let batch = Batch::from_items(vec![rand_feat(6, 16, 40), rand_feat(6, 16, 41)]);
        let train = forward(&cfg, &params, &batch, Mode::Train { dropout_seed: 9 }).unwrap();
        // Overwrite running stats with the recorded batch stats.
        for (prefix, mean, var) in &train.acts.bn_updates {
            params
                .get_mut(&format!("{prefix}.running_mean"))
                .data_mut()
                .copy_from_slice(mean);
            params
                .get_mut(&format!("{prefix}.running_var"))
                .data_mut()
                .copy_from_slice(var);
        }
        let eval = forward(&cfg, &params, &batch, Mode::Eval).unwrap();
        assert!(train.logits.max_abs_diff(&eval.logits) < 1e-9);
    }

    #[test]
    fn windowed_se_causality_probe() {
        // With windowed SE, encoder frame t must not depend on inputs
        // beyond t + lookahead.
        let cfg = small_cfg().with_se_window(4);
        let params = init_params::<f64>(&cfg, 7);
        let base = rand_feat(6, 40, 50);
        let mut updates = Vec::new();
        let enc1 = encoder_forward(
            &cfg,
            &params,
            Batch::from_items(vec![base.clone()]),
            Mode::Eval,
            &mut updates,
        );
        let la = cfg.lookahead_frames();
        let probe_frame = 30usize;
        let mut perturbed = base.clone();
        for r in 0..6 {
            perturbed.set(r, probe_frame, perturbed.at(r, probe_frame) + 10.0);
        }
        let enc2 = encoder_forward(
            &cfg,
            &params,
            Batch::from_items(vec![perturbed]),
            Mode::Eval,
            &mut updates,
        );
        let safe_until = probe_frame - la; // frames strictly before this are unaffected
        for t in 0..safe_until {
            for ch in 0..enc1.epi_relu.items[0].rows() {
                let d = (enc1.epi_relu.items[0].at(ch, t) - enc2.epi_relu.items[0].at(ch, t)).abs();
                assert_eq!(d, 0.0, "frame {t} influenced by future frame {probe_frame}");
            }
        }
        // Sanity: the probe does change something later.
        assert!(enc1.epi_relu.items[0].max_abs_diff(&enc2.epi_relu.items[0]) > 0.0);
    }
}
