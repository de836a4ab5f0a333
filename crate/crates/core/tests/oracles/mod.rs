//! Brute-force reference implementations shared by the integration tests
//! and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeMap;

use cpcx_core::abx::{AbxMode, AbxSegment, Aggregation, NORM_GUARD};
use cpcx_core::tensor::Tensor;

/// Sums the probability of every frame path that collapses to `labels`.
pub fn ctc_enumerate(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (u, classes) = (logits.rows(), logits.cols());
    let probs: Vec<Vec<f64>> = (0..u)
        .map(|r| {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(|v| v.exp() / z).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut path = vec![0usize; u];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &c in &path {
            if Some(c) != prev && c != 0 {
                collapsed.push(c - 1);
            }
            prev = Some(c);
        }
        if collapsed == labels {
            total += path.iter().enumerate().map(|(t, &c)| probs[t][c]).product::<f64>();
        }
        let mut i = 0;
        loop {
            if i == u {
                return total;
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    match (a.split_last(), b.split_last()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = levenshtein(ra, rb) + usize::from(x != y);
            sub.min(levenshtein(ra, b) + 1).min(levenshtein(a, rb) + 1)
        }
    }
}

fn cosine_cost(a: &Tensor<f32>, i: usize, b: &Tensor<f32>, j: usize) -> f64 {
    let norm = |t: &Tensor<f32>, r: usize| t.row(r).iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt() + NORM_GUARD;
    let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| *x as f64 * *y as f64).sum();
    1.0 - dot / (norm(a, i) * norm(b, j))
}

/// Every monotone path from (0,0) to the last pair; cheapest wins, shorter on ties.
pub fn dtw_brute(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    fn walk(a: &Tensor<f32>, b: &Tensor<f32>, i: usize, j: usize, sum: f64, len: usize, best: &mut (f64, usize)) {
        let sum = sum + cosine_cost(a, i, b, j);
        let len = len + 1;
        if i + 1 == a.rows() && j + 1 == b.rows() {
            if sum < best.0 || (sum == best.0 && len < best.1) {
                *best = (sum, len);
            }
            return;
        }
        if i + 1 < a.rows() {
            walk(a, b, i + 1, j, sum, len, best);
        }
        if j + 1 < b.rows() {
            walk(a, b, i, j + 1, sum, len, best);
        }
        if i + 1 < a.rows() && j + 1 < b.rows() {
            walk(a, b, i + 1, j + 1, sum, len, best);
        }
    }
    let mut best = (f64::INFINITY, usize::MAX);
    walk(a, b, 0, 0, 0.0, 0, &mut best);
    best.0 / best.1 as f64
}

/// Brute-force ABX: every eligible (A, B, X), cells by grouping and ordered
/// category pair, symmetrised, then aggregated.
pub fn abx_brute(segs: &[AbxSegment], mode: AbxMode, aggregation: Aggregation) -> (f64, BTreeMap<(usize, usize), f64>) {
    let mut cells: BTreeMap<(String, usize, usize), (f64, usize)> = BTreeMap::new();
    for (ai, a) in segs.iter().enumerate() {
        for b in segs {
            for (xi, x) in segs.iter().enumerate() {
                if a.category == b.category || x.category != a.category || a.speaker != b.speaker {
                    continue;
                }
                let key = match mode {
                    AbxMode::Within if x.speaker == a.speaker && xi != ai => a.speaker.clone(),
                    AbxMode::Across if x.speaker != a.speaker => format!("{}>{}", a.speaker, x.speaker),
                    _ => continue,
                };
                let (dxa, dxb) = (dtw_brute(&x.features, &a.features), dtw_brute(&x.features, &b.features));
                let score = if dxb < dxa {
                    1.0
                } else if dxb == dxa {
                    0.5
                } else {
                    0.0
                };
                let e = cells.entry((key, a.category, b.category)).or_insert((0.0, 0));
                e.0 += score;
                e.1 += 1;
            }
        }
    }
    let mut per_group: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut per_pair: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for ((g, ca, cb), (s, n)) in &cells {
        if ca < cb {
            if let Some((s2, n2)) = cells.get(&(g.clone(), *cb, *ca)) {
                let v = (s / *n as f64 + s2 / *n2 as f64) / 2.0;
                per_group.entry(g.clone()).or_default().push(v);
                per_pair.entry((*ca, *cb)).or_default().push(v);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let error = match aggregation {
        Aggregation::PairsThenSpeakers => mean(&per_group.values().map(|v| mean(v)).collect::<Vec<_>>()),
        Aggregation::SpeakersThenPairs => mean(&per_pair.values().map(|v| mean(v)).collect::<Vec<_>>()),
    };
    (100.0 * error, per_pair.into_iter().map(|(k, v)| (k, 100.0 * mean(&v))).collect())
}
