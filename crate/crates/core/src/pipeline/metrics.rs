//! Grouping quality measures.

use std::collections::BTreeMap;

use crate::geometry::{nearest_index, Point};

/// Shannon entropy (nats) of the component histogram of `assignment`.
pub fn assignment_entropy(assignment: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &a in assignment {
        *counts.entry(a).or_default() += 1;
    }
    let n = assignment.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Fraction of tokens whose ground-truth label matches the majority label
/// of their component.
pub fn purity(assignment: &[usize], truth: &[usize]) -> f64 {
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&a, &t) in assignment.iter().zip(truth) {
        *table.entry(a).or_default().entry(t).or_default() += 1;
    }
    let hits: usize = table
        .values()
        .map(|row| row.values().copied().max().unwrap_or(0))
        .sum();
    hits as f64 / assignment.len().max(1) as f64
}

/// Normalised mutual information with arithmetic-mean normalisation.
/// Two constant labelings count as identical (1); one constant labeling
/// against a varying one scores 0.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut ca: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cb: BTreeMap<usize, f64> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1.0;
        *cb.entry(y).or_default() += 1.0;
        *joint.entry((x, y)).or_default() += 1.0;
    }
    let h =
        |m: &BTreeMap<usize, f64>| -> f64 { m.values().map(|&c| -(c / n) * (c / n).ln()).sum() };
    let (ha, hb) = (h(&ca), h(&cb));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c / n;
            pxy * (pxy / ((ca[&x] / n) * (cb[&y] / n))).ln()
        })
        .sum();
    (2.0 * mi / (ha + hb)).max(0.0)
}

/// Labels every point with the component of its nearest patch center.
pub fn point_labels(points: &[Point], centers: &[Point], assignment: &[usize]) -> Vec<usize> {
    points
        .iter()
        .map(|p| assignment[nearest_index(p, centers)])
        .collect()
}
