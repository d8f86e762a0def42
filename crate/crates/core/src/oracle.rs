//! Deliberately naive reference implementations, and randomized
//! comparisons of the production kernels against them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{chamfer, fps, knn, Point};
use crate::masking::{csem_mask, target_count};

fn sq(a: &Point, b: &Point) -> f64 {
    (0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum()
}

/// Farthest-point sampling by recomputing every min-distance from scratch.
pub fn fps_reference(points: &[Point], count: usize, start: usize) -> Vec<usize> {
    let mut picked = vec![start];
    while picked.len() < count {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..points.len() {
            if picked.contains(&i) {
                continue;
            }
            let d = picked
                .iter()
                .map(|&j| sq(&points[i], &points[j]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        picked.push(best.expect("count <= points").0);
    }
    picked
}

/// k nearest points by fully sorting all candidates.
pub fn knn_reference(points: &[Point], center: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (sq(p, &points[center]), i))
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn chamfer_reference(a: &[Point], b: &[Point]) -> f64 {
    let mut ab = 0.0;
    for x in a {
        let mut m = f64::INFINITY;
        for y in b {
            m = m.min(sq(x, y));
        }
        ab += m;
    }
    let mut ba = 0.0;
    for y in b {
        let mut m = f64::INFINITY;
        for x in a {
            m = m.min(sq(x, y));
        }
        ba += m;
    }
    ab / a.len() as f64 + ba / b.len() as f64
}

/// Random cloud of 2..=`max_points` points. Half of them are snapped to a
/// coarse grid so that distance ties are common.
pub fn random_cloud(rng: &mut ChaCha8Rng, max_points: usize) -> Vec<Point> {
    let n = rng.gen_range(2..=max_points);
    let snap = rng.gen_bool(0.5);
    (0..n)
        .map(|_| {
            let mut p = [0.0f64; 3];
            for v in &mut p {
                *v = rng.gen_range(-1.0..1.0);
                if snap {
                    *v = (*v * 4.0).round() / 4.0;
                }
            }
            p
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeometryReport {
    pub instances: usize,
    pub fps_mismatches: usize,
    pub knn_mismatches: usize,
    pub chamfer_max_abs_err: f64,
}

impl GeometryReport {
    pub fn passes(&self, chamfer_tol: f64) -> bool {
        self.fps_mismatches == 0
            && self.knn_mismatches == 0
            && self.chamfer_max_abs_err <= chamfer_tol
    }
}

/// Compares FPS, kNN and Chamfer against the references on `instances`
/// random clouds each.
pub fn geometry_suite(instances: usize, seed: u64) -> Result<GeometryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GeometryReport {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let pts = random_cloud(&mut rng, 64);
        let count = rng.gen_range(1..=pts.len());
        let start = rng.gen_range(0..pts.len());
        if fps(&pts, count, start)? != fps_reference(&pts, count, start) {
            report.fps_mismatches += 1;
        }

        let k = rng.gen_range(1..=pts.len());
        let centers: Vec<usize> = (0..pts.len()).filter(|_| rng.gen_bool(0.3)).collect();
        let hoods = knn(&pts, &centers, k)?;
        if hoods
            .iter()
            .any(|h| h.member_indices != knn_reference(&pts, h.center_point, k))
        {
            report.knn_mismatches += 1;
        }

        let other = random_cloud(&mut rng, 64);
        let err = (chamfer(&pts, &other)? - chamfer_reference(&pts, &other)).abs();
        report.chamfer_max_abs_err = report.chamfer_max_abs_err.max(err);
    }
    Ok(report)
}

/// Largest-remainder split of `n` by `weights`; ties go to the lower
/// position.
pub fn apportion_reference(n: usize, weights: &[usize]) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    let mut out: Vec<usize> = weights.iter().map(|&w| n * w / total).collect();
    let left = n - out.iter().sum::<usize>();
    let mut rema: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ((n * w) % total, i))
        .collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rema.iter().take(left) {
        out[i] += 1;
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct CsemReport {
    pub instances: usize,
    pub violations: Vec<String>,
}

/// Checks component-masking invariants on random assignments: exact masked
/// count, every selected component fully masked, remaining quota split by
/// largest remainder, and determinism under a fixed seed.
pub fn csem_suite(instances: usize, seed: u64) -> Result<CsemReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CsemReport {
        instances,
        violations: Vec::new(),
    };
    for inst in 0..instances {
        let g = rng.gen_range(4..=64);
        let q = rng.gen_range(2..=8);
        let assignment: Vec<usize> = (0..g).map(|_| rng.gen_range(0..q)).collect();
        let ratio = rng.gen_range(0.1..0.9);
        let Ok(target) = target_count(g, ratio) else {
            continue;
        };
        let m_c = rng.gen_range(0..=3);
        let plan_seed: u64 = rng.gen();
        let plan = csem_mask(
            &assignment,
            m_c,
            ratio,
            &mut ChaCha8Rng::seed_from_u64(plan_seed),
        )?;
        let again = csem_mask(
            &assignment,
            m_c,
            ratio,
            &mut ChaCha8Rng::seed_from_u64(plan_seed),
        )?;
        let mut fail = |msg: String| report.violations.push(format!("instance {inst}: {msg}"));
        if plan != again {
            fail("not deterministic".into());
        }
        if plan.masked_count() != target {
            fail(format!("masked {} != target {target}", plan.masked_count()));
        }
        let mut comps: Vec<usize> = assignment.clone();
        comps.sort_unstable();
        comps.dedup();
        let size = |c: usize| assignment.iter().filter(|&&a| a == c).count();
        let masked_in = |c: usize| {
            (0..g)
                .filter(|&i| assignment[i] == c && plan.masked[i])
                .count()
        };
        let full = &plan.fully_masked_components;
        if comps.len() > 1 && full.len() > m_c.min(comps.len() - 1) {
            fail(format!(
                "{} components fully masked, asked for {m_c}",
                full.len()
            ));
        }
        let mut sorted_full = full.clone();
        sorted_full.sort_unstable();
        sorted_full.dedup();
        if sorted_full.len() != full.len() {
            fail("duplicate selected component".into());
        }
        for &c in full {
            if masked_in(c) != size(c) || size(c) == 0 {
                fail(format!("component {c} not fully masked"));
            }
        }
        if comps.len() > 1 {
            let covered: usize = full.iter().map(|&c| size(c)).sum();
            let rest: Vec<usize> = comps
                .iter()
                .copied()
                .filter(|c| !full.contains(c))
                .collect();
            let want = apportion_reference(
                target - covered,
                &rest.iter().map(|&c| size(c)).collect::<Vec<_>>(),
            );
            for (&c, &w) in rest.iter().zip(&want) {
                if masked_in(c) != w {
                    fail(format!(
                        "component {c} masked {} expected {w}",
                        masked_in(c)
                    ));
                }
            }
        }
        for (&c, &(n, m)) in &plan.per_component_counts {
            if n != size(c) || m != masked_in(c) {
                fail(format!("counts for component {c} disagree"));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn references_agree_with_hand_example() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
        ];
        assert_eq!(fps_reference(&pts, 3, 0), vec![0, 4, 3]);
        assert_eq!(knn_reference(&pts, 1, 3), vec![1, 0, 2]);
    }

    #[test]
    fn apportion_reference_example() {
        assert_eq!(apportion_reference(22, &[16, 16, 16]), vec![8, 7, 7]);
        assert_eq!(apportion_reference(5, &[1, 3]), vec![1, 4]);
    }

    #[test]
    fn small_suites_pass() {
        assert!(geometry_suite(20, 1).unwrap().passes(1e-12));
        let r = csem_suite(50, 2).unwrap();
        assert!(r.violations.is_empty(), "{:?}", r.violations);
    }
}
