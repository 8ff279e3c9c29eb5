//! Probability-sum ensembling and exhaustive validation-EER subset search.

use crate::error::{Error, Result};
use crate::metrics::{eer, Trial, TrialScores};
use crate::par;

/// How member probabilities are fused. The sum-then-softmax rule is the
/// primary behavior; mean-of-probabilities is a non-default alternative
/// for comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FuseRule {
    #[default]
    SumSoftmax,
    MeanProb,
}

/// Scores from one ensemble member, aligned by utterance id.
#[derive(Clone, Debug)]
pub struct MemberScores {
    pub member_id: String,
    /// (utterance id, class probabilities), sorted by utterance id.
    pub utterances: Vec<(String, Vec<f64>)>,
}

/// A pool of members covering the identical utterance set.
#[derive(Clone, Debug)]
pub struct EnsemblePool {
    pub members: Vec<MemberScores>,
}

impl EnsemblePool {
    pub fn new(mut members: Vec<MemberScores>) -> Result<EnsemblePool> {
        if members.is_empty() {
            return Err(Error::Ensemble("empty pool".into()));
        }
        for m in &mut members {
            m.utterances.sort_by(|a, b| a.0.cmp(&b.0));
        }
        let ids: Vec<&String> = members[0].utterances.iter().map(|(id, _)| id).collect();
        for m in &members[1..] {
            let other: Vec<&String> = m.utterances.iter().map(|(id, _)| id).collect();
            if other != ids {
                return Err(Error::Ensemble(format!(
                    "member {} covers a different utterance set",
                    m.member_id
                )));
            }
        }
        Ok(EnsemblePool { members })
    }

    pub fn utterance_ids(&self) -> Vec<String> {
        self.members[0]
            .utterances
            .iter()
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Fuse per-utterance probability vectors: sum member probabilities, then
/// softmax (or plain mean under [`FuseRule::MeanProb`]).
pub fn ensemble_probs(members: &[&[Vec<f64>]], rule: FuseRule) -> Result<Vec<Vec<f64>>> {
    if members.is_empty() {
        return Err(Error::Ensemble("no members".into()));
    }
    let n = members[0].len();
    for m in members {
        if m.len() != n {
            return Err(Error::Ensemble("misaligned utterance sets".into()));
        }
    }
    let k = members[0][0].len();
    let mut out = Vec::with_capacity(n);
    for u in 0..n {
        let mut sum = vec![0.0f64; k];
        for m in members {
            if m[u].len() != k {
                return Err(Error::Ensemble("probability vectors of unequal length".into()));
            }
            for (s, &p) in sum.iter_mut().zip(&m[u]) {
                *s += p;
            }
        }
        let fused = match rule {
            FuseRule::SumSoftmax => crate::loss::softmax(&sum),
            FuseRule::MeanProb => sum.iter().map(|&s| s / members.len() as f64).collect(),
        };
        out.push(fused);
    }
    Ok(out)
}

/// Result of the exhaustive subset search.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetChoice {
    pub member_ids: Vec<String>,
    pub eer: f64,
}

fn fused_trials(
    pool: &EnsemblePool,
    subset: &[usize],
    labels: &[usize],
    rule: FuseRule,
) -> Result<TrialScores> {
    let probs: Vec<&[Vec<f64>]> = Vec::new();
    let _ = probs;
    let member_probs: Vec<Vec<Vec<f64>>> = subset
        .iter()
        .map(|&mi| {
            pool.members[mi]
                .utterances
                .iter()
                .map(|(_, p)| p.clone())
                .collect()
        })
        .collect();
    let refs: Vec<&[Vec<f64>]> = member_probs.iter().map(|m| m.as_slice()).collect();
    let fused = ensemble_probs(&refs, rule)?;
    let trials = pool.members[0]
        .utterances
        .iter()
        .zip(fused)
        .zip(labels)
        .map(|(((id, _), probs), &label)| Trial {
            id: id.clone(),
            probs,
            label,
        })
        .collect();
    Ok(TrialScores {
        class_names: vec!["en".into(), "zh".into()],
        trials,
    })
}

/// Evaluate the validation EER of every non-empty member subset and return
/// the best one. Ties prefer lower EER, then fewer members, then
/// lexicographically smaller member-id lists. Pools beyond 15 members are
/// rejected (2^n subsets).
pub fn subset_search(
    pool: &EnsemblePool,
    labels: &[usize],
    positive_class: usize,
    rule: FuseRule,
) -> Result<SubsetChoice> {
    let n = pool.members.len();
    if n > 15 {
        return Err(Error::Ensemble(format!(
            "pool of {n} members too large for exhaustive search (max 15)"
        )));
    }
    if labels.len() != pool.members[0].utterances.len() {
        return Err(Error::Ensemble("label count != utterance count".into()));
    }
    let total = (1usize << n) - 1;
    let results = par::map_range(total, |idx| {
        let mask = idx + 1;
        let subset: Vec<usize> = (0..n).filter(|b| mask & (1 << b) != 0).collect();
        let trials = fused_trials(pool, &subset, labels, rule)?;
        let e = eer(&trials, positive_class)?;
        Ok::<(Vec<usize>, f64), Error>((subset, e))
    });
    let mut best: Option<(Vec<usize>, f64, Vec<String>)> = None;
    for r in results {
        let (subset, e) = r?;
        let ids: Vec<String> = subset
            .iter()
            .map(|&i| pool.members[i].member_id.clone())
            .collect();
        let better = match &best {
            None => true,
            Some((bs, be, bids)) => {
                e < *be
                    || (e == *be && subset.len() < bs.len())
                    || (e == *be && subset.len() == bs.len() && ids < *bids)
            }
        };
        if better {
            best = Some((subset, e, ids));
        }
    }
    let (_, eer_value, member_ids) = best.expect("non-empty subset list");
    Ok(SubsetChoice {
        member_ids,
        eer: eer_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_members_fuse_to_uniform() {
        let a = vec![vec![0.9, 0.1]];
        let b = vec![vec![0.1, 0.9]];
        let fused = ensemble_probs(&[&a, &b], FuseRule::SumSoftmax).unwrap();
        assert!((fused[0][0] - 0.5).abs() < 1e-12);
        assert!((fused[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sum_softmax_matches_direct_arithmetic() {
        let a = vec![vec![0.9, 0.1]];
        let b = vec![vec![0.6, 0.4]];
        let fused = ensemble_probs(&[&a, &b], FuseRule::SumSoftmax).unwrap();
        // softmax(1.5, 0.5) = (e / (e + 1), 1 / (e + 1)) with e = exp(1.0)
        let e = 1.0f64.exp();
        assert!((fused[0][0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((fused[0][0] - 0.731_059).abs() < 1e-6);
        assert!((fused[0][1] - 0.268_941).abs() < 1e-6);
    }

    #[test]
    fn identical_members_preserve_argmax() {
        let m = vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.55, 0.45]];
        let fused = ensemble_probs(&[&m, &m, &m], FuseRule::SumSoftmax).unwrap();
        for (orig, f) in m.iter().zip(&fused) {
            assert_eq!(crate::metrics::argmax(orig), crate::metrics::argmax(f));
        }
    }

    #[test]
    fn fused_vectors_are_valid_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let members: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|_| {
                (0..10)
                    .map(|_| {
                        let p: f64 = rng.random();
                        vec![p, 1.0 - p]
                    })
                    .collect()
            })
            .collect();
        let refs: Vec<&[Vec<f64>]> = members.iter().map(|m| m.as_slice()).collect();
        for rule in [FuseRule::SumSoftmax, FuseRule::MeanProb] {
            let fused = ensemble_probs(&refs, rule).unwrap();
            for p in &fused {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn member_order_permutation_is_exact() {
        let a = vec![vec![0.8, 0.2], vec![0.4, 0.6]];
        let b = vec![vec![0.7, 0.3], vec![0.1, 0.9]];
        let c = vec![vec![0.5, 0.5], vec![0.6, 0.4]];
        let f1 = ensemble_probs(&[&a, &b, &c], FuseRule::SumSoftmax).unwrap();
        let f2 = ensemble_probs(&[&c, &a, &b], FuseRule::SumSoftmax).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn misaligned_members_rejected() {
        let a = vec![vec![0.9, 0.1]];
        let b = vec![vec![0.1, 0.9], vec![0.4, 0.6]];
        assert!(ensemble_probs(&[&a, &b], FuseRule::SumSoftmax).is_err());
    }

    fn random_pool(n_members: usize, n_utts: usize, seed: u64) -> (EnsemblePool, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n_utts).map(|i| i % 2).collect();
        let members = (0..n_members)
            .map(|m| {
                let utterances = (0..n_utts)
                    .map(|u| {
                        // Noisy but informative scores.
                        let base = if labels[u] == 0 { 0.65 } else { 0.35 };
                        let p = (base + rng.random::<f64>() * 0.5 - 0.25).clamp(0.01, 0.99);
                        (format!("u{u:03}"), vec![p, 1.0 - p])
                    })
                    .collect();
                MemberScores {
                    member_id: format!("m{m}"),
                    utterances,
                }
            })
            .collect();
        (EnsemblePool::new(members).unwrap(), labels)
    }

    #[test]
    fn pool_of_one_returns_that_member() {
        let (pool, labels) = random_pool(1, 24, 5);
        let choice = subset_search(&pool, &labels, 0, FuseRule::SumSoftmax).unwrap();
        assert_eq!(choice.member_ids, vec!["m0".to_string()]);
    }

    #[test]
    fn chosen_subset_beats_every_singleton() {
        let (pool, labels) = random_pool(5, 40, 9);
        let choice = subset_search(&pool, &labels, 0, FuseRule::SumSoftmax).unwrap();
        for mi in 0..5 {
            let trials = fused_trials(&pool, &[mi], &labels, FuseRule::SumSoftmax).unwrap();
            let single = eer(&trials, 0).unwrap();
            assert!(
                choice.eer <= single + 1e-12,
                "subset {:?} eer {} worse than member {mi} at {single}",
                choice.member_ids,
                choice.eer
            );
        }
    }

    #[test]
    fn search_matches_independent_brute_force() {
        let (pool, labels) = random_pool(5, 30, 21);
        let choice = subset_search(&pool, &labels, 0, FuseRule::SumSoftmax).unwrap();
        // Brute force re-evaluation with plain nested loops.
        let mut best: Option<(f64, Vec<String>)> = None;
        for mask in 1usize..(1 << 5) {
            let subset: Vec<usize> = (0..5).filter(|b| mask & (1 << b) != 0).collect();
            let trials = fused_trials(&pool, &subset, &labels, FuseRule::SumSoftmax).unwrap();
            let e = eer(&trials, 0).unwrap();
            let ids: Vec<String> = subset.iter().map(|&i| format!("m{i}")).collect();
            let better = match &best {
                None => true,
                Some((be, bids)) => {
                    e < *be
                        || (e == *be && ids.len() < bids.len())
                        || (e == *be && ids.len() == bids.len() && ids < *bids)
                }
            };
            if better {
                best = Some((e, ids));
            }
        }
        let (be, bids) = best.unwrap();
        assert_eq!(choice.member_ids, bids);
        assert_eq!(choice.eer, be);
    }
}
