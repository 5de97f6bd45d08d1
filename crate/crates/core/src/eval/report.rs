use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{ClassifierHead, EmbeddingBundle};
use crate::error::{Error, Result};

/// Per-row embedding transform applied before classification. Receives the
/// row index and its steering-space embedding.
pub type SteerFn<'a> = dyn Fn(usize, &[f64]) -> Result<Vec<f64>> + Sync + 'a;

/// Classes ranked by cosine similarity, best first, ties to the lower id.
pub fn classify(x: &[f64], head: &ClassifierHead, top: usize) -> Result<Vec<(usize, f64)>> {
    if top > head.num_classes() {
        return Err(Error::Config(format!(
            "asked for top {top} of {} classes",
            head.num_classes()
        )));
    }
    let scores = head.scores(x)?;
    let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub class: usize,
    pub name: String,
    pub acc: f64,
    pub support: usize,
    /// Most frequent wrong prediction for this class, lowest id on ties.
    pub top_confusion: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub top1: f64,
    pub top5: f64,
    pub per_class: Vec<ClassStat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<serde_json::Value>,
    /// Top-1 prediction per row.
    #[serde(skip)]
    pub predictions: Vec<usize>,
    #[serde(skip)]
    pub runtime: Duration,
}

impl EvalReport {
    /// Pretty JSON with a fixed key order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn correct(&self) -> usize {
        self.per_class
            .iter()
            .map(|c| (c.acc * c.support as f64).round() as usize)
            .sum()
    }

    pub fn total(&self) -> usize {
        self.per_class.iter().map(|c| c.support).sum()
    }
}

/// Classifies every row of `test` (after the optional steering transform)
/// and aggregates top-1/top-5 and per-class statistics.
pub fn evaluate(
    test: &EmbeddingBundle,
    head: &ClassifierHead,
    steer: Option<&SteerFn<'_>>,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let start = Instant::now();
    let labels = test
        .labels()
        .ok_or_else(|| Error::Config("evaluation needs a labelled bundle".into()))?;
    let num_classes = head.num_classes();
    if test.num_classes() != num_classes {
        return Err(Error::Config(format!(
            "bundle declares {} classes but head has {num_classes}",
            test.num_classes()
        )));
    }
    if test.dim() != head.dim() {
        return Err(Error::shape(head.dim(), test.dim()));
    }
    let top = num_classes.min(5);
    let outcomes: Vec<(usize, bool)> = (0..test.rows())
        .into_par_iter()
        .map(|i| {
            let x = test.row_f64(i);
            let x = match steer {
                Some(f) => f(i, &x)?,
                None => x,
            };
            let ranked = classify(&x, head, top)?;
            let truth = labels[i] as usize;
            Ok((ranked[0].0, ranked.iter().any(|&(c, _)| c == truth)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut support = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    for (i, &(pred, in_top)) in outcomes.iter().enumerate() {
        let truth = labels[i] as usize;
        support[truth] += 1;
        confusion[truth][pred] += 1;
        if pred == truth {
            correct[truth] += 1;
            hits1 += 1;
        }
        if in_top {
            hits5 += 1;
        }
    }
    let rows = test.rows().max(1) as f64;
    let per_class = (0..num_classes)
        .map(|c| {
            let top_confusion = (0..num_classes)
                .filter(|&p| p != c && confusion[c][p] > 0)
                .max_by(|&a, &b| confusion[c][a].cmp(&confusion[c][b]).then(b.cmp(&a)));
            ClassStat {
                class: c,
                name: head.class_names()[c].clone(),
                acc: if support[c] == 0 {
                    0.0
                } else {
                    correct[c] as f64 / support[c] as f64
                },
                support: support[c],
                top_confusion,
            }
        })
        .collect();
    Ok(EvalReport {
        config,
        top1: hits1 as f64 / rows,
        top5: hits5 as f64 / rows,
        per_class,
        grid: None,
        predictions: outcomes.iter().map(|&(p, _)| p).collect(),
        runtime: start.elapsed(),
    })
}

/// Per-class accuracy change between two reports over the same test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub class: usize,
    pub name: String,
    pub support: usize,
    pub baseline_acc: f64,
    pub treated_acc: f64,
    pub delta: f64,
}

impl ClassDelta {
    pub fn gain(&self) -> f64 {
        self.delta.max(0.0)
    }

    pub fn loss(&self) -> f64 {
        (-self.delta).max(0.0)
    }
}

pub fn class_deltas(baseline: &EvalReport, treated: &EvalReport) -> Result<Vec<ClassDelta>> {
    if baseline.per_class.len() != treated.per_class.len() {
        return Err(Error::shape(
            baseline.per_class.len(),
            treated.per_class.len(),
        ));
    }
    baseline
        .per_class
        .iter()
        .zip(&treated.per_class)
        .map(|(b, t)| {
            if b.support != t.support {
                return Err(Error::Config(format!(
                    "class {} has support {} vs {}",
                    b.class, b.support, t.support
                )));
            }
            Ok(ClassDelta {
                class: b.class,
                name: b.name.clone(),
                support: b.support,
                baseline_acc: b.acc,
                treated_acc: t.acc,
                delta: t.acc - b.acc,
            })
        })
        .collect()
}

/// The `n` largest gains and `n` largest losses (by accuracy delta).
pub fn top_changes(deltas: &[ClassDelta], n: usize) -> (Vec<ClassDelta>, Vec<ClassDelta>) {
    let mut gains: Vec<ClassDelta> = deltas.iter().filter(|d| d.delta > 0.0).cloned().collect();
    gains.sort_by(|a, b| b.delta.total_cmp(&a.delta).then(a.class.cmp(&b.class)));
    gains.truncate(n);
    let mut losses: Vec<ClassDelta> = deltas.iter().filter(|d| d.delta < 0.0).cloned().collect();
    losses.sort_by(|a, b| a.delta.total_cmp(&b.delta).then(a.class.cmp(&b.class)));
    losses.truncate(n);
    (gains, losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head3() -> ClassifierHead {
        ClassifierHead::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap()
    }

    #[test]
    fn classify_prototype_itself() {
        let ranked = classify(&[0.0, 3.0], &head3(), 3).unwrap();
        assert_eq!(ranked[0].0, 1);
        assert!((ranked[0].1 - 1.0).abs() < 1e-15);
        assert!(classify(&[0.0, 3.0], &head3(), 4).is_err());
        assert!(matches!(
            classify(&[0.0, 0.0], &head3(), 1),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn classify_is_scale_invariant() {
        let a = classify(&[0.3, -0.7], &head3(), 3).unwrap();
        let b = classify(&[3.0, -7.0], &head3(), 3).unwrap();
        assert_eq!(
            a.iter().map(|p| p.0).collect::<Vec<_>>(),
            b.iter().map(|p| p.0).collect::<Vec<_>>()
        );
    }

    fn tiny_test() -> EmbeddingBundle {
        EmbeddingBundle::from_rows(
            &[
                vec![1.0, 0.1],
                vec![0.2, 1.0],
                vec![1.0, 0.9],
                vec![-1.0, 0.2],
                vec![0.9, 1.0],
            ],
            Some(vec![0, 1, 1, 2, 0]),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap()
    }

    #[test]
    fn hand_counted_tally() {
        let r = evaluate(&tiny_test(), &head3(), None, serde_json::Value::Null).unwrap();
        // predictions: 0, 1, 0, 2, 1  -> correct rows 0, 1, 3
        assert_eq!(r.predictions, vec![0, 1, 0, 2, 1]);
        assert!((r.top1 - 0.6).abs() < 1e-15);
        assert_eq!(r.top5, 1.0);
        assert_eq!(r.per_class[0].support, 2);
        assert_eq!(r.per_class[0].acc, 0.5);
        assert_eq!(r.per_class[0].top_confusion, Some(1));
        assert_eq!(r.per_class[1].top_confusion, Some(0));
        assert_eq!(r.per_class[2].top_confusion, None);
        assert_eq!(r.correct(), 3);
    }

    #[test]
    fn steering_closure_is_applied() {
        let flip = |_: usize, x: &[f64]| Ok(vec![-x[0], x[1]]);
        let r = evaluate(&tiny_test(), &head3(), Some(&flip), serde_json::Value::Null).unwrap();
        assert_eq!(r.predictions[0], 2);
    }

    #[test]
    fn head_mismatch_is_config_error() {
        let head = ClassifierHead::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert!(matches!(
            evaluate(&tiny_test(), &head, None, serde_json::Value::Null),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn json_is_stable_and_skips_runtime() {
        let cfg = serde_json::json!({"b": 1, "a": 2});
        let r1 = evaluate(&tiny_test(), &head3(), None, cfg.clone()).unwrap();
        let r2 = evaluate(&tiny_test(), &head3(), None, cfg).unwrap();
        assert_eq!(r1.to_json(), r2.to_json());
        assert!(!r1.to_json().contains("runtime"));
        let keys: Vec<&str> = ["\"config\"", "\"top1\"", "\"top5\"", "\"per_class\""].to_vec();
        let json = r1.to_json();
        let pos: Vec<usize> = keys.iter().map(|k| json.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn delta_tables() {
        let base = evaluate(&tiny_test(), &head3(), None, serde_json::Value::Null).unwrap();
        let flip = |_: usize, x: &[f64]| Ok(vec![x[0], x[1] * 2.0]);
        let treated =
            evaluate(&tiny_test(), &head3(), Some(&flip), serde_json::Value::Null).unwrap();
        let deltas = class_deltas(&base, &treated).unwrap();
        let net: f64 = deltas
            .iter()
            .map(|d| d.gain() * d.support as f64 - d.loss() * d.support as f64)
            .sum();
        let total = base.total() as f64;
        assert!((net - (treated.top1 - base.top1) * total).abs() < 1e-9);
        let (gains, losses) = top_changes(&deltas, 10);
        assert!(gains.iter().all(|d| d.delta > 0.0));
        assert!(losses.iter().all(|d| d.delta < 0.0));
    }
}
