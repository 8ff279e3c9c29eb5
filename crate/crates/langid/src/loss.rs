//! Training criteria: class-weighted cross-entropy and additive angular
//! margin, both with exact gradients.

use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::nn::{Mat, Scalar, Tensor};

/// Numerically stable softmax (f64 helper for probabilities).
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn softmax_generic<S: Scalar>(xs: &[S]) -> Vec<S> {
    let m = xs.iter().cloned().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = xs.iter().map(|&x| (x - m).exp()).collect();
    let sum: S = exps.iter().cloned().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Per-class weights w_x = N / N_x, indexed like `labels`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub labels: Vec<String>,
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn equal(labels: &[String]) -> ClassWeights {
        ClassWeights {
            labels: labels.to_vec(),
            weights: vec![1.0; labels.len()],
        }
    }
}

/// w_x = N / N_x over the manifest, for the given class set.
pub fn compute_class_weights(manifest: &Manifest, labels: &[String]) -> Result<ClassWeights> {
    if manifest.is_empty() {
        return Err(Error::Manifest("empty manifest".into()));
    }
    let counts = manifest.label_counts();
    let n = manifest.len() as f64;
    let mut weights = Vec::with_capacity(labels.len());
    for label in labels {
        match counts.get(label) {
            Some(&c) if c > 0 => weights.push(n / c as f64),
            _ => {
                return Err(Error::Manifest(format!("class absent: {label}")));
            }
        }
    }
    Ok(ClassWeights {
        labels: labels.to_vec(),
        weights,
    })
}

/// Weight-normalized cross-entropy:
/// loss = sum_i w_{y_i} * (-log softmax(logits_i)[y_i]) / sum_i w_{y_i}.
/// Returns the loss and d(loss)/d(logits).
pub fn weighted_ce<S: Scalar>(
    logits: &Mat<S>,
    labels: &[usize],
    weights: &[f64],
) -> Result<(S, Mat<S>)> {
    let n = logits.rows();
    let k = logits.cols();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("non-finite logits".into()));
    }
    let mut weight_sum = S::zero();
    let mut loss = S::zero();
    let mut grad = Mat::zeros(n, k);
    for i in 0..n {
        let y = labels[i];
        if y >= k {
            return Err(Error::Shape(format!("unknown label index {y} for {k} classes")));
        }
        let w = S::from_f64(weights[y]);
        weight_sum = weight_sum + w;
        let p = softmax_generic(logits.row(i));
        loss = loss - w * p[y].max(S::from_f64(1e-300)).ln();
        for j in 0..k {
            let delta = if j == y { S::one() } else { S::zero() };
            grad.set(i, j, w * (p[j] - delta));
        }
    }
    let inv = S::one() / weight_sum;
    for g in grad.data_mut() {
        *g = *g * inv;
    }
    Ok((loss * inv, grad))
}

/// Additive-angular-margin settings; scale 30 and margin 0.01 rad by
/// default.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AamConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        AamConfig {
            scale: 30.0,
            margin: 0.01,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(Error::Config("aam scale must be positive".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config("aam margin must lie in [0, pi/2)".into()));
        }
        Ok(())
    }
}

/// Margin loss on L2-normalized embeddings against class prototype vectors
/// (the head weight matrix). The target class logit is s*cos(theta + m)
/// while theta + m stays below pi; past that the standard linear fallback
/// c - m*sin(m) keeps the objective monotone. Returns the batch-mean loss,
/// d/d(embeddings), and d/d(class vectors).
pub fn aam_loss<S: Scalar>(
    embeddings: &Mat<S>,
    labels: &[usize],
    class_vectors: &Tensor<S>,
    cfg: &AamConfig,
) -> Result<(S, Mat<S>, Tensor<S>)> {
    cfg.validate()?;
    let n = embeddings.rows();
    let dim = embeddings.cols();
    let k = class_vectors.dims()[0];
    if class_vectors.dims()[1] != dim {
        return Err(Error::Shape(format!(
            "class vectors of dim {} vs embeddings of dim {dim}",
            class_vectors.dims()[1]
        )));
    }
    if labels.len() != n {
        return Err(Error::Shape("label count != batch size".into()));
    }
    let floor = 1e-12f64;

    // Normalize class vectors once.
    let mut w_norms = Vec::with_capacity(k);
    for j in 0..k {
        let norm: f64 = (0..dim)
            .map(|d| class_vectors.at2(j, d).as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        if norm < floor {
            return Err(Error::Shape(format!("zero-norm class vector {j}")));
        }
        w_norms.push(S::from_f64(norm));
    }

    let s = S::from_f64(cfg.scale);
    let cos_m = S::from_f64(cfg.margin.cos());
    let sin_m = S::from_f64(cfg.margin.sin());
    let th = S::from_f64((std::f64::consts::PI - cfg.margin).cos());
    let mm = S::from_f64(cfg.margin * cfg.margin.sin());

    let mut loss = S::zero();
    let mut grad_e = Mat::zeros(n, dim);
    let mut grad_w = Tensor::zeros(class_vectors.dims());
    let inv_n = S::from_f64(1.0 / n as f64);

    for i in 0..n {
        let y = labels[i];
        if y >= k {
            return Err(Error::Shape(format!("unknown label index {y}")));
        }
        let e_norm_f64: f64 = (0..dim)
            .map(|d| embeddings.at(i, d).as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        if e_norm_f64 < floor {
            return Err(Error::Shape(format!("zero-norm embedding {i}")));
        }
        let e_norm = S::from_f64(e_norm_f64);
        // Cosines against every class.
        let mut cos: Vec<S> = Vec::with_capacity(k);
        for j in 0..k {
            let mut dot = S::zero();
            for d in 0..dim {
                dot = dot + embeddings.at(i, d) * class_vectors.at2(j, d);
            }
            cos.push(dot / (e_norm * w_norms[j]));
        }
        // Margin on the target class.
        let c_y = cos[y];
        let sin_y = (S::one() - c_y * c_y).max(S::from_f64(1e-12)).sqrt();
        let use_margin = c_y > th;
        let phi = if use_margin {
            c_y * cos_m - sin_y * sin_m
        } else {
            c_y - mm
        };
        let logits: Vec<S> = (0..k)
            .map(|j| if j == y { s * phi } else { s * cos[j] })
            .collect();
        let p = softmax_generic(&logits);
        loss = loss - p[y].max(S::from_f64(1e-300)).ln() * inv_n;

        // d(loss)/d(cos_j), including the margin chain on the target.
        for j in 0..k {
            let delta = if j == y { S::one() } else { S::zero() };
            let mut dcos = (p[j] - delta) * s * inv_n;
            if j == y {
                let dphi_dc = if use_margin {
                    cos_m + c_y / sin_y * sin_m
                } else {
                    S::one()
                };
                dcos = dcos * dphi_dc;
            }
            // cos = e.w / (|e||w|): push into both vector sets.
            for d in 0..dim {
                let e_hat = embeddings.at(i, d) / e_norm;
                let w_hat = class_vectors.at2(j, d) / w_norms[j];
                grad_e.add_at(i, d, dcos * (w_hat - cos[j] * e_hat) / e_norm);
                grad_w.add2(j, d, dcos * (e_hat - cos[j] * w_hat) / w_norms[j]);
            }
        }
    }
    Ok((loss, grad_e, grad_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::UtteranceRecord;

    fn rec(label: &str) -> UtteranceRecord {
        UtteranceRecord {
            audio_filepath: "x.wav".into(),
            offset: 0.0,
            duration: 1.0,
            label: label.into(),
            recording_id: None,
        }
    }

    fn labels2() -> Vec<String> {
        vec!["en".to_string(), "zh".to_string()]
    }

    #[test]
    fn class_weights_balanced() {
        let m = Manifest::new((0..50).map(|_| rec("en")).chain((0..50).map(|_| rec("zh"))).collect());
        let w = compute_class_weights(&m, &labels2()).unwrap();
        assert_eq!(w.weights, vec![2.0, 2.0]);
    }

    #[test]
    fn class_weights_unbalanced() {
        let m = Manifest::new((0..80).map(|_| rec("en")).chain((0..20).map(|_| rec("zh"))).collect());
        let w = compute_class_weights(&m, &labels2()).unwrap();
        assert_eq!(w.weights, vec![1.25, 5.0]);
    }

    #[test]
    fn class_weights_absent_class_errors() {
        let m = Manifest::new((0..10).map(|_| rec("en")).collect());
        let err = compute_class_weights(&m, &labels2()).unwrap_err();
        assert!(err.to_string().contains("class absent"));
    }

    #[test]
    fn ce_uniform_logits_is_ln2() {
        let logits = Mat::<f64>::zeros(4, 2);
        let (loss, _) = weighted_ce(&logits, &[0, 1, 0, 1], &[1.0, 1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_confident_correct_sample_contributes_zero() {
        // Big margin on the true class: contribution ~ 0.
        let logits = Mat::<f64>::from_vec(1, 2, vec![60.0, 0.0]);
        let (loss, _) = weighted_ce(&logits, &[0], &[3.0, 1.0]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn ce_weighted_example_matches_direct_arithmetic() {
        // Probabilities 0.8 on en-true and 0.4 on zh-true with weights
        // (1.25, 5.0). Expected value computed directly from the formula:
        // (1.25*(-ln 0.8) + 5*(-ln 0.4)) / 6.25.
        let logits = Mat::<f64>::from_vec(
            2,
            2,
            vec![
                (0.8f64 / 0.2).ln(),
                0.0, // softmax -> (0.8, 0.2)
                (0.6f64 / 0.4).ln(),
                0.0, // softmax -> (0.6, 0.4); label zh has p=0.4
            ],
        );
        let (loss, _) = weighted_ce(&logits, &[0, 1], &[1.25, 5.0]).unwrap();
        let expect = (1.25 * (-(0.8f64.ln())) + 5.0 * (-(0.4f64.ln()))) / 6.25;
        assert!((loss - expect).abs() < 1e-10, "{loss} vs {expect}");
        assert!((loss - 0.777_661).abs() < 1e-5);
    }

    #[test]
    fn ce_weight_rescaling_invariance() {
        let logits = Mat::<f64>::from_vec(3, 2, vec![0.3, -0.2, 1.0, 0.4, -0.7, 0.1]);
        let labels = [0usize, 1, 1];
        let (l1, g1) = weighted_ce(&logits, &labels, &[1.25, 5.0]).unwrap();
        let (l2, g2) = weighted_ce(&logits, &labels, &[12.5, 50.0]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.max_abs_diff(&g2) < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut logits = Mat::<f64>::from_vec(2, 2, vec![0.4, -0.3, -1.2, 0.9]);
        let labels = [1usize, 0];
        let weights = [1.25, 5.0];
        let (_, grad) = weighted_ce(&logits, &labels, &weights).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let orig = logits.at(i, j);
                logits.set(i, j, orig + h);
                let (lp, _) = weighted_ce(&logits, &labels, &weights).unwrap();
                logits.set(i, j, orig - h);
                let (lm, _) = weighted_ce(&logits, &labels, &weights).unwrap();
                logits.set(i, j, orig);
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - grad.at(i, j)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn aam_zero_margin_reduces_to_ce_on_scaled_cosines() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let emb = Mat::<f64>::from_fn(3, 5, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let w = Tensor::<f64>::from_vec(
            &[2, 5],
            (0..10).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        );
        let labels = [0usize, 1, 0];
        let cfg = AamConfig {
            scale: 30.0,
            margin: 0.0,
        };
        let (loss, _, _) = aam_loss(&emb, &labels, &w, &cfg).unwrap();
        // Reference: CE over s*cos logits.
        let mut logits = Mat::<f64>::zeros(3, 2);
        for i in 0..3 {
            let en: f64 = (0..5).map(|d| emb.at(i, d).powi(2)).sum::<f64>().sqrt();
            for j in 0..2 {
                let wn: f64 = (0..5).map(|d| w.at2(j, d).powi(2)).sum::<f64>().sqrt();
                let dot: f64 = (0..5).map(|d| emb.at(i, d) * w.at2(j, d)).sum();
                logits.set(i, j, 30.0 * dot / (en * wn));
            }
        }
        let (ce, _) = weighted_ce(&logits, &labels, &[1.0, 1.0]).unwrap();
        assert!((loss - ce).abs() < 1e-9);
    }

    #[test]
    fn aam_aligned_embedding_closed_form() {
        // Embedding aligned with its class vector, orthogonal to the other.
        let emb = Mat::<f64>::from_vec(1, 2, vec![2.0, 0.0]);
        let w = Tensor::<f64>::from_vec(&[2, 2], vec![0.5, 0.0, 0.0, 3.0]);
        let (loss, _, _) = aam_loss(&emb, &[0], &w, &AamConfig::default()).unwrap();
        let expect = (1.0 + (-30.0 * 0.01f64.cos()).exp()).ln();
        assert!((loss - expect).abs() < 1e-15);
        assert!(loss < 1e-12);
    }

    #[test]
    fn aam_scale_invariance_of_embeddings() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let emb = Mat::<f64>::from_fn(2, 4, |_, _| rng.random::<f64>() - 0.5);
        let scaled = emb.map(|v| v * 7.5);
        let w = Tensor::<f64>::from_vec(
            &[2, 4],
            (0..8).map(|_| rng.random::<f64>() - 0.5).collect(),
        );
        let labels = [1usize, 0];
        let cfg = AamConfig::default();
        let (l1, _, _) = aam_loss(&emb, &labels, &w, &cfg).unwrap();
        let (l2, _, _) = aam_loss(&scaled, &labels, &w, &cfg).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn aam_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut emb = Mat::<f64>::from_fn(3, 4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let mut w = Tensor::<f64>::from_vec(
            &[2, 4],
            (0..8).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        );
        let labels = [0usize, 1, 1];
        let cfg = AamConfig::default();
        let (_, ge, gw) = aam_loss(&emb, &labels, &w, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for d in 0..4 {
                let orig = emb.at(i, d);
                emb.set(i, d, orig + h);
                let (lp, _, _) = aam_loss(&emb, &labels, &w, &cfg).unwrap();
                emb.set(i, d, orig - h);
                let (lm, _, _) = aam_loss(&emb, &labels, &w, &cfg).unwrap();
                emb.set(i, d, orig);
                let fd = (lp - lm) / (2.0 * h);
                let rel = (fd - ge.at(i, d)).abs() / fd.abs().max(ge.at(i, d).abs()).max(1e-4);
                assert!(rel < 1e-4, "emb grad rel err {rel}");
            }
        }
        for j in 0..2 {
            for d in 0..4 {
                let orig = w.at2(j, d);
                w.data_mut()[j * 4 + d] = orig + h;
                let (lp, _, _) = aam_loss(&emb, &labels, &w, &cfg).unwrap();
                w.data_mut()[j * 4 + d] = orig - h;
                let (lm, _, _) = aam_loss(&emb, &labels, &w, &cfg).unwrap();
                w.data_mut()[j * 4 + d] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let rel = (fd - gw.at2(j, d)).abs() / fd.abs().max(gw.at2(j, d).abs()).max(1e-4);
                assert!(rel < 1e-4, "class vector grad rel err {rel}");
            }
        }
    }

    #[test]
    fn aam_rejects_zero_norm() {
        let emb = Mat::<f64>::zeros(1, 3);
        let w = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(aam_loss(&emb, &[0], &w, &AamConfig::default()).is_err());
    }
}
