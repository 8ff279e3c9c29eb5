//! Scoring: equal error rate, balanced accuracy, micro accuracy, and the
//! line-delimited score file format.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored utterance: class probabilities plus the true label index.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub id: String,
    pub probs: Vec<f64>,
    pub label: usize,
}

/// Scored utterances with their class-name table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialScores {
    pub class_names: Vec<String>,
    pub trials: Vec<Trial>,
}

impl TrialScores {
    pub fn validate(&self) -> Result<()> {
        for t in &self.trials {
            if t.probs.len() != self.class_names.len() {
                return Err(Error::Metrics(format!(
                    "trial {} has {} probabilities for {} classes",
                    t.id,
                    t.probs.len(),
                    self.class_names.len()
                )));
            }
            let sum: f64 = t.probs.iter().sum();
            if t.probs.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) || (sum - 1.0).abs() > 1e-6
            {
                return Err(Error::Metrics(format!(
                    "trial {} probabilities invalid (sum {sum})",
                    t.id
                )));
            }
            if t.label >= self.class_names.len() {
                return Err(Error::Metrics(format!("trial {} label out of range", t.id)));
            }
        }
        Ok(())
    }
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Equal error rate from detection scores: `scores[i]` is the detection
/// score for trial i and `positive[i]` its ground truth. The ROC polyline
/// is linearly interpolated at the FAR = FRR crossing.
pub fn eer_from_scores(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Metrics("scores/labels length mismatch".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metrics(
            "EER needs at least one positive and one negative trial".into(),
        ));
    }
    // Sweep the threshold downward over distinct scores. At each operating
    // point: FAR = negatives with score >= t, FRR = positives with score < t.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = Vec::with_capacity(scores.len() + 1);
    points.push((0.0f64, 1.0f64)); // threshold above every score
    let mut fa = 0usize;
    let mut hit = 0usize;
    let mut i = 0usize;
    while i < order.len() {
        // Consume a tie group.
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                hit += 1;
            } else {
                fa += 1;
            }
            i += 1;
        }
        points.push((fa as f64 / n_neg as f64, (n_pos - hit) as f64 / n_pos as f64));
    }
    // FAR rises, FRR falls along the sweep: find the sign change of
    // (FRR - FAR) and interpolate.
    for w in points.windows(2) {
        let (fa1, fr1) = w[0];
        let (fa2, fr2) = w[1];
        let d1 = fr1 - fa1;
        let d2 = fr2 - fa2;
        if d1 == 0.0 {
            return Ok(fa1);
        }
        if d1 > 0.0 && d2 <= 0.0 {
            let lambda = d1 / (d1 - d2);
            return Ok(fa1 + lambda * (fa2 - fa1));
        }
    }
    let last = points.last().unwrap();
    Ok(last.0.max(last.1))
}

/// EER over trial scores using p(positive_class) as the detection score.
pub fn eer(trials: &TrialScores, positive_class: usize) -> Result<f64> {
    let scores: Vec<f64> = trials.trials.iter().map(|t| t.probs[positive_class]).collect();
    let positive: Vec<bool> = trials.trials.iter().map(|t| t.label == positive_class).collect();
    eer_from_scores(&scores, &positive)
}

/// Balanced accuracy: mean per-class recall under argmax decisions.
pub fn bac(trials: &TrialScores) -> Result<f64> {
    let k = trials.class_names.len();
    let mut total = vec![0usize; k];
    let mut correct = vec![0usize; k];
    for t in &trials.trials {
        total[t.label] += 1;
        if argmax(&t.probs) == t.label {
            correct[t.label] += 1;
        }
    }
    let mut acc = 0.0;
    for c in 0..k {
        if total[c] == 0 {
            return Err(Error::Metrics(format!(
                "class {} absent from trials",
                trials.class_names[c]
            )));
        }
        acc += correct[c] as f64 / total[c] as f64;
    }
    Ok(acc / k as f64)
}

/// Fraction of utterances whose argmax equals the label.
pub fn micro_acc(trials: &TrialScores) -> Result<f64> {
    if trials.trials.is_empty() {
        return Err(Error::Metrics("no trials".into()));
    }
    let correct = trials
        .trials
        .iter()
        .filter(|t| argmax(&t.probs) == t.label)
        .count();
    Ok(correct as f64 / trials.trials.len() as f64)
}

// ---------------------------------------------------------------------------
// Score file I/O (two-class: p_en / p_zh)
// ---------------------------------------------------------------------------

/// One line of a two-class score file. The label is optional so prediction
/// outputs on unlabeled audio use the same format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub id: String,
    pub p_en: f64,
    pub p_zh: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<String>,
}

pub fn write_scores(path: impl AsRef<Path>, lines: &[ScoreLine]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in lines {
        let json = serde_json::to_string(line).map_err(|e| Error::Metrics(e.to_string()))?;
        writeln!(f, "{json}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreLine>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ScoreLine = serde_json::from_str(&line)
            .map_err(|e| Error::Metrics(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(parsed);
    }
    Ok(out)
}

/// Assemble trials from score lines; every line must carry a label from
/// {en, zh} (or have one supplied via `labels_by_id`).
pub fn trials_from_scores(
    lines: &[ScoreLine],
    labels_by_id: Option<&std::collections::BTreeMap<String, String>>,
) -> Result<TrialScores> {
    let class_names = vec!["en".to_string(), "zh".to_string()];
    let mut trials = Vec::with_capacity(lines.len());
    for line in lines {
        let label_str = match (&line.label, labels_by_id) {
            (_, Some(map)) => map
                .get(&line.id)
                .cloned()
                .ok_or_else(|| Error::Metrics(format!("no label for utterance {}", line.id)))?,
            (Some(l), None) => l.clone(),
            (None, None) => {
                return Err(Error::Metrics(format!("utterance {} has no label", line.id)))
            }
        };
        let label = class_names
            .iter()
            .position(|c| *c == label_str)
            .ok_or_else(|| Error::Metrics(format!("unknown label {label_str}")))?;
        trials.push(Trial {
            id: line.id.clone(),
            probs: vec![line.p_en, line.p_zh],
            label,
        });
    }
    let scores = TrialScores {
        class_names,
        trials,
    };
    scores.validate()?;
    Ok(scores)
}
