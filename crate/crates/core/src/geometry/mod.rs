//! Exact geometric kernels: farthest-point sampling, k-nearest neighbours,
//! Chamfer distance, plus the labelled synthetic shape generator.
//!
//! Everything here is exhaustive O(N^2) search over small clouds.

mod io;
mod shapes;

pub use io::{read_cloud, read_cloud_file, write_cloud, write_cloud_file};
pub use shapes::{make_shape, ShapeKind, MIN_POINTS};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// Per-point component id (synthetic ground truth, evaluation only).
    pub labels: Option<Vec<usize>>,
    pub shape_class: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid(
                "point cloud must contain at least one point",
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "point cloud contains non-finite coordinates",
            ));
        }
        Ok(PointCloud {
            points,
            labels: None,
            shape_class: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        c.map(|v| v / n)
    }

    /// Centers the cloud at the origin and scales it into the unit ball.
    pub fn normalize(&mut self) {
        let c = self.centroid();
        for p in &mut self.points {
            for d in 0..3 {
                p[d] -= c[d];
            }
        }
        let max_norm = self
            .points
            .iter()
            .map(|p| norm_sq(p).sqrt())
            .fold(0.0, f64::max);
        if max_norm > 0.0 {
            for p in &mut self.points {
                for v in p.iter_mut() {
                    *v /= max_norm;
                }
            }
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_points(&self.points)
    }

    /// Same cloud with points reordered so that new index `i` holds old
    /// point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        PointCloud {
            points: perm.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| perm.iter().map(|&i| l[i]).collect()),
            shape_class: self.shape_class,
        }
    }
}

fn norm_sq(p: &Point) -> f64 {
    p[0] * p[0] + p[1] * p[1] + p[2] * p[2]
}

pub fn dist_sq(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest-point sampling. The first pick is `start`; every later
/// pick maximises the distance to the nearest already-picked point, with ties
/// going to the lowest index. Indices are returned in pick order.
pub fn fps(points: &[Point], count: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if count == 0 || count > n {
        return Err(Error::invalid(format!(
            "fps: cannot pick {count} of {n} points"
        )));
    }
    if start >= n {
        return Err(Error::invalid(format!(
            "fps: start {start} out of range for {n} points"
        )));
    }
    let mut picked = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut order = Vec::with_capacity(count);
    let mut current = start;
    loop {
        picked[current] = true;
        order.push(current);
        if order.len() == count {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = dist_sq(&points[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !picked[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(order)
}

/// A center point together with its `k` nearest neighbours.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    /// Token id of this patch, in `[0, G)`.
    pub center_index: usize,
    /// Index of the center in the source cloud.
    pub center_point: usize,
    /// Neighbour ids sorted by distance, then by index; includes the center.
    pub member_indices: Vec<usize>,
    /// `points[member] - points[center_point]`.
    pub local_coords: Vec<Point>,
}

/// The `k` nearest points (self included) around each center, sorted by
/// distance then index.
pub fn knn(points: &[Point], centers: &[usize], k: usize) -> Result<Vec<Neighborhood>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("knn: k = {k} with {n} points")));
    }
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    centers
        .iter()
        .enumerate()
        .map(|(token, &ci)| {
            if ci >= n {
                return Err(Error::invalid(format!("knn: center {ci} out of range")));
            }
            let c = points[ci];
            scratch.clear();
            scratch.extend(points.iter().enumerate().map(|(i, p)| (dist_sq(p, &c), i)));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < n {
                scratch.select_nth_unstable_by(k - 1, cmp);
            }
            let head = &mut scratch[..k];
            head.sort_unstable_by(cmp);
            let member_indices: Vec<usize> = head.iter().map(|&(_, i)| i).collect();
            let local_coords = member_indices
                .iter()
                .map(|&i| {
                    let p = points[i];
                    [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
                })
                .collect();
            Ok(Neighborhood {
                center_index: token,
                center_point: ci,
                member_indices,
                local_coords,
            })
        })
        .collect()
}

/// Symmetric squared-L2 Chamfer distance:
/// `mean_a min_b |a-b|^2 + mean_b min_a |b-a|^2`.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer: empty point set"));
    }
    let one_way = |xs: &[Point], ys: &[Point]| {
        xs.iter()
            .map(|x| {
                ys.iter()
                    .map(|y| dist_sq(x, y))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / xs.len() as f64
    };
    Ok(one_way(a, b) + one_way(b, a))
}

/// FPS centers plus kNN neighbourhoods of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    pub neighborhoods: Vec<Neighborhood>,
    pub k: usize,
}

impl PatchSet {
    pub fn build(cloud: &PointCloud, groups: usize, k: usize, start: usize) -> Result<Self> {
        let center_ids = fps(&cloud.points, groups, start)?;
        let neighborhoods = knn(&cloud.points, &center_ids, k)?;
        Ok(PatchSet {
            centers: center_ids.iter().map(|&i| cloud.points[i]).collect(),
            neighborhoods,
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn center_points(&self) -> Vec<usize> {
        self.neighborhoods.iter().map(|n| n.center_point).collect()
    }

    pub fn centers_tensor(&self) -> Tensor {
        Tensor::from_points(&self.centers)
    }

    /// All local coordinates stacked as `(G*k) x 3`.
    pub fn local_tensor(&self) -> Tensor {
        let pts: Vec<Point> = self
            .neighborhoods
            .iter()
            .flat_map(|n| n.local_coords.iter().copied())
            .collect();
        Tensor::from_points(&pts)
    }

    /// Local coordinates of the selected patches, one flattened `k x 3`
    /// set per row.
    pub fn local_rows(&self, patches: &[usize]) -> Tensor {
        let w = self.k * 3;
        let data = patches
            .iter()
            .flat_map(|&p| self.neighborhoods[p].local_coords.iter().flatten().copied())
            .collect();
        Tensor::matrix(patches.len(), w, data).expect("k x 3 per patch")
    }
}

/// Index of the nearest point in `set` to `p` (lowest index on ties).
pub fn nearest_index(p: &Point, set: &[Point]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, q) in set.iter().enumerate() {
        let d = dist_sq(p, q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}
