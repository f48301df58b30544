//! Property definitions shared by the property suite and the acceptance run.
//! Each check returns `Err` with a description on violation.

use halleval::dataset::{balanced_sample, EvalItem};
use halleval::metrics::{compute_metrics, harmonic_mean, tally, ConfusionMatrix, MetricsReport};
use halleval::{GoldLabel, Prediction};
use proptest::prelude::*;

pub const CASES: u32 = 1000;
const EPS: f64 = 1e-12;

pub type Check = Result<(), String>;

fn close(a: f64, b: f64, what: &str) -> Check {
    if (a - b).abs() <= EPS {
        Ok(())
    } else {
        Err(format!("{what}: {a} vs {b}"))
    }
}

pub fn matrix() -> impl Strategy<Value = ConfusionMatrix> {
    (0u64..60, 0u64..60, 0u64..60, 0u64..60, 0u64..8, 0u64..8)
        .prop_filter("non-empty", |t| t.0 + t.1 + t.2 + t.3 + t.4 + t.5 > 0)
        .prop_map(|(tp, fp, tn, fn_, uy, un)| {
            ConfusionMatrix::new(tp, fp, tn, fn_).with_unresolved(uy, un)
        })
}

fn prediction() -> impl Strategy<Value = Prediction> {
    prop_oneof![
        4 => Just(Prediction::Yes),
        4 => Just(Prediction::No),
        1 => Just(Prediction::Unresolved),
    ]
}

fn gold() -> impl Strategy<Value = GoldLabel> {
    prop_oneof![Just(GoldLabel::Yes), Just(GoldLabel::No)]
}

pub fn records() -> impl Strategy<Value = Vec<(GoldLabel, Prediction)>> {
    prop::collection::vec((gold(), prediction()), 1..200)
}

/// Relabeling yes as no swaps the per-class scores and leaves the
/// class-symmetric ones unchanged.
pub fn label_swap_symmetry(cm: ConfusionMatrix) -> Check {
    let a = compute_metrics(&cm).map_err(|e| e.to_string())?;
    let b = compute_metrics(&cm.swapped()).map_err(|e| e.to_string())?;
    close(a.recall_yes, b.recall_no, "recall_yes")?;
    close(a.recall_no, b.recall_yes, "recall_no")?;
    close(a.f1_pos, b.f1_neg, "f1_pos")?;
    close(a.f1_neg, b.f1_pos, "f1_neg")?;
    for (x, y, what) in [
        (a.accuracy, b.accuracy, "accuracy"),
        (a.macro_f1, b.macro_f1, "macro_f1"),
        (a.h_recall, b.h_recall, "h_recall"),
        (a.phd_score, b.phd_score, "phd_score"),
        (a.unresolved_rate, b.unresolved_rate, "unresolved_rate"),
    ] {
        close(x, y, what)?;
    }
    Ok(())
}

/// min ≤ harmonic ≤ geometric ≤ arithmetic ≤ max, for the two mean pairs
/// inside the report and for arbitrary ratios.
pub fn harmonic_bounds(cm: ConfusionMatrix, a: f64, b: f64) -> Check {
    let chain = |x: f64, y: f64, what: &str| -> Check {
        let h = harmonic_mean(x, y);
        let g = (x * y).sqrt();
        let m = (x + y) / 2.0;
        let ok = x.min(y) - EPS <= h && h <= g + EPS && g <= m + EPS && m <= x.max(y) + EPS;
        if ok {
            Ok(())
        } else {
            Err(format!(
                "{what}: chain broken for ({x}, {y}): h={h} g={g} m={m}"
            ))
        }
    };
    chain(a, b, "arbitrary")?;
    let r = compute_metrics(&cm).map_err(|e| e.to_string())?;
    chain(r.recall_yes, r.recall_no, "recalls")?;
    chain(r.h_recall, r.accuracy, "h_recall/accuracy")?;
    close(
        r.h_recall,
        harmonic_mean(r.recall_yes, r.recall_no),
        "h_recall",
    )?;
    close(
        r.phd_score,
        harmonic_mean(r.h_recall, r.accuracy),
        "phd_score",
    )?;
    if r.phd_score > r.recall_yes.max(r.recall_no).max(r.accuracy) + EPS {
        return Err("phd_score exceeds every component".into());
    }
    Ok(())
}

fn div(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn hm(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Scores computed by scanning the records directly, with unresolved
/// answers counted as wrong.
pub fn counting_oracle(records: &[(GoldLabel, Prediction)]) -> [f64; 7] {
    let count = |f: &dyn Fn(GoldLabel, Prediction) -> bool| {
        records.iter().filter(|(g, p)| f(*g, *p)).count()
    };
    let correct = count(&|g, p| p.matches(g));
    let said_yes_right = count(&|g, p| g == GoldLabel::Yes && p == Prediction::Yes);
    let said_no_right = count(&|g, p| g == GoldLabel::No && p == Prediction::No);
    let gold_yes = count(&|g, _| g == GoldLabel::Yes);
    let gold_no = count(&|g, _| g == GoldLabel::No);
    // Predicted-positive denominators treat an unresolved gold-no answer as a
    // wrong "yes", and an unresolved gold-yes answer as a wrong "no".
    let claimed_yes =
        count(&|g, p| p == Prediction::Yes || (g == GoldLabel::No && p == Prediction::Unresolved));
    let claimed_no =
        count(&|g, p| p == Prediction::No || (g == GoldLabel::Yes && p == Prediction::Unresolved));

    let accuracy = div(correct, records.len());
    let precision = div(said_yes_right, claimed_yes);
    let recall = div(said_yes_right, gold_yes);
    let recall_no = div(said_no_right, gold_no);
    let precision_no = div(said_no_right, claimed_no);
    let f1_p = hm(precision, recall);
    let f1_n = hm(precision_no, recall_no);
    let phd = hm(hm(recall, recall_no), accuracy);
    [
        accuracy,
        precision,
        recall,
        f1_p,
        f1_n,
        (f1_p + f1_n) / 2.0,
        phd,
    ]
}

pub fn counting_oracle_equivalence(records: &[(GoldLabel, Prediction)]) -> Check {
    let cm = tally(records.iter().copied()).map_err(|e| e.to_string())?;
    let report = compute_metrics(&cm).map_err(|e| e.to_string())?;
    let oracle = counting_oracle(records);
    for (i, (a, b)) in report.table_columns().iter().zip(oracle).enumerate() {
        close(*a, b, &format!("column {i}"))?;
    }
    Ok(())
}

fn scores(r: &MetricsReport) -> [f64; 7] {
    r.table_columns()
}

/// Turning the `index`-th resolved answer into an unresolved one never
/// raises any score.
pub fn unresolved_penalty(records: &[(GoldLabel, Prediction)], index: usize) -> Check {
    let resolved: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].1 != Prediction::Unresolved)
        .collect();
    if resolved.is_empty() {
        return Ok(());
    }
    let target = resolved[index % resolved.len()];
    let mut converted = records.to_vec();
    converted[target].1 = Prediction::Unresolved;

    let before = compute_metrics(&tally(records.iter().copied()).unwrap()).unwrap();
    let after = compute_metrics(&tally(converted.iter().copied()).unwrap()).unwrap();
    for (i, (b, a)) in scores(&before).iter().zip(scores(&after)).enumerate() {
        if a > b + EPS {
            return Err(format!("column {i} rose from {b} to {a}"));
        }
    }
    if after.unresolved_rate <= before.unresolved_rate {
        return Err("unresolved_rate did not rise".into());
    }
    Ok(())
}

pub fn items() -> impl Strategy<Value = (Vec<EvalItem>, usize)> {
    (prop::collection::vec(any::<bool>(), 2..120), 0usize..40).prop_map(|(labels, n)| {
        let items: Vec<EvalItem> = labels
            .iter()
            .enumerate()
            .map(|(i, &yes)| EvalItem {
                id: format!("item-{i:04}"),
                image_ref: format!("{i}.png"),
                question: "Is there a dog?".into(),
                gold: if yes { GoldLabel::Yes } else { GoldLabel::No },
                dataset: "d".into(),
                split: "s".into(),
                subtask: None,
                mode: None,
            })
            .collect();
        (items, n)
    })
}

/// Exact class counts when feasible, an error otherwise; strict yes/no
/// alternation.
pub fn sample_class_counts(items: &[EvalItem], n: usize, seed: u64) -> Check {
    let yes = items.iter().filter(|i| i.gold == GoldLabel::Yes).count();
    let no = items.len() - yes;
    match balanced_sample(items, n, seed) {
        Ok(sample) => {
            if yes < n || no < n {
                return Err(format!("sampled {n}/class from {yes} yes, {no} no"));
            }
            if sample.len() != 2 * n {
                return Err(format!("sample size {} != {}", sample.len(), 2 * n));
            }
            for (k, item) in sample.iter().enumerate() {
                let want = if k % 2 == 0 {
                    GoldLabel::Yes
                } else {
                    GoldLabel::No
                };
                if item.gold != want {
                    return Err(format!("position {k} is {}", item.gold));
                }
            }
            let mut ids: Vec<&str> = sample.iter().map(|i| i.id.as_str()).collect();
            ids.sort();
            ids.dedup();
            if ids.len() != sample.len() {
                return Err("duplicate items in sample".into());
            }
            Ok(())
        }
        Err(_) if yes < n || no < n => Ok(()),
        Err(e) => Err(format!("unexpected error: {e}")),
    }
}

pub fn sample_seed_determinism(items: &[EvalItem], n: usize, seed: u64) -> Check {
    let a = balanced_sample(items, n, seed).ok();
    let b = balanced_sample(items, n, seed).ok();
    if a == b {
        Ok(())
    } else {
        Err("same seed produced different samples".into())
    }
}

pub fn items_with_permutation() -> impl Strategy<Value = (Vec<EvalItem>, Vec<EvalItem>, usize)> {
    items().prop_flat_map(|(items, n)| (Just(items.clone()), Just(items).prop_shuffle(), Just(n)))
}

pub fn sample_order_independence(
    items: &[EvalItem],
    permuted: &[EvalItem],
    n: usize,
    seed: u64,
) -> Check {
    let a = balanced_sample(items, n, seed).ok();
    let b = balanced_sample(permuted, n, seed).ok();
    if a == b {
        Ok(())
    } else {
        Err("input order changed the sample".into())
    }
}
