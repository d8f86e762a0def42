//! Procedural labelled shapes: each kind is a union of a few surface
//! primitives, and every primitive is one component label.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

pub const MIN_POINTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Plane,
    Chair,
    Table,
    Rocket,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Plane,
        ShapeKind::Chair,
        ShapeKind::Table,
        ShapeKind::Rocket,
    ];

    pub fn class_id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Plane => "plane",
            ShapeKind::Chair => "chair",
            ShapeKind::Table => "table",
            ShapeKind::Rocket => "rocket",
        }
    }

    /// Fraction of the cloud drawn from each component, in label order.
    pub fn quotas(self) -> &'static [f64] {
        match self {
            // fuselage, left wing, right wing, tail
            ShapeKind::Plane => &[0.40, 0.22, 0.22, 0.16],
            // seat, back, left frame, right frame
            ShapeKind::Chair => &[0.30, 0.30, 0.20, 0.20],
            // top, four legs
            ShapeKind::Table => &[0.40, 0.15, 0.15, 0.15, 0.15],
            // body, nose, three fins
            ShapeKind::Rocket => &[0.40, 0.15, 0.15, 0.15, 0.15],
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(ShapeKind::Plane),
            "chair" => Ok(ShapeKind::Chair),
            "table" => Ok(ShapeKind::Table),
            "rocket" => Ok(ShapeKind::Rocket),
            other => Err(Error::invalid(format!("unknown shape kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Axis {
    X,
    Z,
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    /// Axis-aligned box (before a rotation of `yaw` about z).
    Cuboid {
        center: Point,
        half: [f64; 3],
        yaw: f64,
    },
    /// Closed cylinder.
    Cylinder {
        center: Point,
        axis: Axis,
        radius: f64,
        half_len: f64,
    },
    /// Lateral cone surface from `base` along +z.
    Cone {
        base: Point,
        radius: f64,
        height: f64,
    },
}

fn along(axis: Axis, center: Point, a: f64, u: f64, v: f64) -> Point {
    match axis {
        Axis::X => [center[0] + a, center[1] + u, center[2] + v],
        Axis::Z => [center[0] + u, center[1] + v, center[2] + a],
    }
}

impl Primitive {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        match *self {
            Primitive::Cuboid { center, half, yaw } => {
                let [hx, hy, hz] = half;
                let areas = [hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy];
                let face = pick_weighted(rng, &areas);
                let mut p = [
                    rng.gen_range(-hx..=hx),
                    rng.gen_range(-hy..=hy),
                    rng.gen_range(-hz..=hz),
                ];
                let sign = if face.is_multiple_of(2) { 1.0 } else { -1.0 };
                p[face / 2] = sign * half[face / 2];
                let (s, c) = yaw.sin_cos();
                [
                    center[0] + c * p[0] - s * p[1],
                    center[1] + s * p[0] + c * p[1],
                    center[2] + p[2],
                ]
            }
            Primitive::Cylinder {
                center,
                axis,
                radius,
                half_len,
            } => {
                let lateral = 2.0 * PI * radius * 2.0 * half_len;
                let cap = PI * radius * radius;
                let theta = rng.gen_range(0.0..2.0 * PI);
                match pick_weighted(rng, &[lateral, cap, cap]) {
                    0 => {
                        let a = rng.gen_range(-half_len..=half_len);
                        along(axis, center, a, radius * theta.cos(), radius * theta.sin())
                    }
                    side => {
                        let r = radius * rng.gen::<f64>().sqrt();
                        let a = if side == 1 { half_len } else { -half_len };
                        along(axis, center, a, r * theta.cos(), r * theta.sin())
                    }
                }
            }
            Primitive::Cone {
                base,
                radius,
                height,
            } => {
                // Lateral area density grows linearly toward the base.
                let t = 1.0 - rng.gen::<f64>().sqrt();
                let r = radius * (1.0 - t);
                let theta = rng.gen_range(0.0..2.0 * PI);
                [
                    base[0] + r * theta.cos(),
                    base[1] + r * theta.sin(),
                    base[2] + t * height,
                ]
            }
        }
    }
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Splits `n` into integer counts proportional to `fractions` using
/// largest-remainder rounding (ties to the lower index).
pub(crate) fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let total: f64 = fractions.iter().sum();
    let exact: Vec<f64> = fractions.iter().map(|f| n as f64 * f / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

fn primitives(kind: ShapeKind, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let mut j = |v: f64| v * rng.gen_range(0.85..1.15);
    match kind {
        ShapeKind::Plane => {
            let span = j(0.45);
            let chord = j(0.18);
            let wing_x = j(0.05);
            vec![
                Primitive::Cylinder {
                    center: [0.0, 0.0, 0.0],
                    axis: Axis::X,
                    radius: j(0.12),
                    half_len: j(0.9),
                },
                Primitive::Cuboid {
                    center: [wing_x, 0.12 + span, 0.0],
                    half: [chord, span, 0.015],
                    yaw: 0.0,
                },
                Primitive::Cuboid {
                    center: [wing_x, -0.12 - span, 0.0],
                    half: [chord, span, 0.015],
                    yaw: 0.0,
                },
                Primitive::Cuboid {
                    center: [-0.8, 0.0, 0.12 + j(0.18)],
                    half: [j(0.1), 0.015, j(0.18)],
                    yaw: 0.0,
                },
            ]
        }
        ShapeKind::Chair => {
            let w = j(0.4);
            let d = j(0.4);
            let h = j(0.45);
            vec![
                Primitive::Cuboid {
                    center: [0.0, 0.0, 0.0],
                    half: [d, w, 0.04],
                    yaw: 0.0,
                },
                Primitive::Cuboid {
                    center: [-d, 0.0, j(0.5)],
                    half: [0.04, w, j(0.45)],
                    yaw: 0.0,
                },
                Primitive::Cuboid {
                    center: [0.0, w, -h],
                    half: [d, 0.04, h],
                    yaw: 0.0,
                },
                Primitive::Cuboid {
                    center: [0.0, -w, -h],
                    half: [d, 0.04, h],
                    yaw: 0.0,
                },
            ]
        }
        ShapeKind::Table => {
            let x = j(0.8);
            let y = j(0.5);
            let leg_h = j(0.45);
            let r = j(0.05);
            let mut prims = vec![Primitive::Cuboid {
                center: [0.0, 0.0, 0.0],
                half: [x, y, 0.04],
                yaw: 0.0,
            }];
            for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                prims.push(Primitive::Cylinder {
                    center: [sx * (x - 0.08), sy * (y - 0.08), -leg_h],
                    axis: Axis::Z,
                    radius: r,
                    half_len: leg_h,
                });
            }
            prims
        }
        ShapeKind::Rocket => {
            let r = j(0.16);
            let half = j(0.7);
            let fin = j(0.22);
            let mut prims = vec![
                Primitive::Cylinder {
                    center: [0.0, 0.0, 0.0],
                    axis: Axis::Z,
                    radius: r,
                    half_len: half,
                },
                Primitive::Cone {
                    base: [0.0, 0.0, half],
                    radius: r,
                    height: j(0.45),
                },
            ];
            for i in 0..3 {
                let yaw = i as f64 * 2.0 * PI / 3.0;
                let reach = r + fin;
                prims.push(Primitive::Cuboid {
                    center: [
                        0.5 * reach * yaw.cos(),
                        0.5 * reach * yaw.sin(),
                        -half + 0.15,
                    ],
                    half: [0.5 * reach, 0.012, 0.18],
                    yaw,
                });
            }
            prims
        }
    }
}

/// Generates a normalised, labelled cloud of `n` points for `kind`.
/// Deterministic in `(kind, n, seed)`.
pub fn make_shape(kind: ShapeKind, n: usize, seed: u64) -> Result<PointCloud> {
    if n < MIN_POINTS {
        return Err(Error::invalid(format!(
            "make_shape: need at least {MIN_POINTS} points, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = primitives(kind, &mut rng);
    let counts = apportion(n, kind.quotas());
    let mut points: Vec<Point> = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (label, (prim, &count)) in prims.iter().zip(&counts).enumerate() {
        for _ in 0..count {
            points.push(prim.sample(&mut rng));
            labels.push(label);
        }
    }
    let mut cloud = PointCloud::new(points)?.with_labels(labels)?;
    cloud.shape_class = Some(kind.class_id());
    cloud.normalize();
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_uses_largest_remainder() {
        assert_eq!(apportion(22, &[1.0, 1.0, 1.0]), vec![8, 7, 7]);
        assert_eq!(apportion(10, &[0.4, 0.22, 0.22, 0.16]), vec![4, 2, 2, 2]);
    }

    #[test]
    fn quotas_match_primitive_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in ShapeKind::ALL {
            assert_eq!(primitives(kind, &mut rng).len(), kind.quotas().len());
            assert!((kind.quotas().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn plane_has_several_labels() {
        let c = make_shape(ShapeKind::Plane, 1024, 7).unwrap();
        assert_eq!(c.len(), 1024);
        let mut l = c.labels.clone().unwrap();
        l.sort();
        l.dedup();
        assert!(l.len() >= 3);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = make_shape(ShapeKind::Rocket, 300, 11).unwrap();
        let b = make_shape(ShapeKind::Rocket, 300, 11).unwrap();
        assert_eq!(a, b);
        let c = make_shape(ShapeKind::Rocket, 300, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn chair_components_meet_minimum_share() {
        for seed in 0..20 {
            let c = make_shape(ShapeKind::Chair, 512, seed).unwrap();
            let labels = c.labels.unwrap();
            for l in 0..4 {
                let count = labels.iter().filter(|&&x| x == l).count();
                assert!(count as f64 >= 0.05 * 512.0, "label {l} has {count}");
            }
        }
    }

    #[test]
    fn unknown_kind_and_small_n_are_rejected() {
        assert!("boat".parse::<ShapeKind>().is_err());
        assert!(make_shape(ShapeKind::Table, 10, 0).is_err());
    }
}
