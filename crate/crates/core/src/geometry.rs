//! Distance, inside/outside and alignment kernels on plain `f64` geometry.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};

/// Exact minimum Euclidean distance between two point sets and the index
/// pair attaining it. Ties go to the lexicographically smallest pair.
pub fn min_pair_distance(a: &[Vec3], b: &[Vec3]) -> Result<(f64, (usize, usize))> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("point set"));
    }
    let mut best = f64::INFINITY;
    let mut arg = (0, 0);
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            let d = math::dist_sq(p, q);
            if d < best {
                best = d;
                arg = (i, j);
            }
        }
    }
    Ok((libm::sqrt(best), arg))
}

/// Minimum over index subsets of two point arrays. Returns the squared
/// distance and the pair of original indices.
pub fn min_pair_indexed(
    points_a: &[Vec3],
    index_a: &[u32],
    points_b: &[Vec3],
    index_b: &[u32],
) -> Option<(f64, (u32, u32))> {
    let mut best = f64::INFINITY;
    let mut arg = None;
    for &i in index_a {
        let p = &points_a[i as usize];
        for &j in index_b {
            let d = math::dist_sq(p, &points_b[j as usize]);
            if d < best {
                best = d;
                arg = Some((i, j));
            }
        }
    }
    arg.map(|a| (best, a))
}

/// Signed solid angle of triangle (a, b, c) seen from the origin.
fn solid_angle(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let la = math::norm(a);
    let lb = math::norm(b);
    let lc = math::norm(c);
    let num = math::dot(a, math::cross(b, c));
    let den = la * lb * lc + math::dot(a, b) * lc + math::dot(b, c) * la + math::dot(c, a) * lb;
    2.0 * libm::atan2(num, den)
}

/// Generalized winding number of a triangle mesh around `query`.
///
/// Sum of signed triangle solid angles divided by 4π: about 1 inside a
/// closed, outward-oriented mesh and about 0 outside. Queries lying exactly
/// on the surface get whatever the solid-angle sum yields; no special case.
pub fn winding_number(vertices: &[Vec3], faces: &[[u32; 3]], query: Vec3) -> f64 {
    let mut total = 0.0;
    for f in faces {
        let a = math::sub(vertices[f[0] as usize], query);
        let b = math::sub(vertices[f[1] as usize], query);
        let c = math::sub(vertices[f[2] as usize], query);
        total += solid_angle(a, b, c);
    }
    total / (4.0 * PI)
}

/// Axis-aligned bounds of the vertices referenced by `faces`.
fn face_bounds(vertices: &[Vec3], faces: &[[u32; 3]]) -> Option<(Vec3, Vec3)> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for f in faces {
        for &v in f {
            let p = vertices[v as usize];
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    (!faces.is_empty()).then_some((lo, hi))
}

/// Indices of `points` whose winding number with respect to the mesh
/// exceeds 0.5. Points outside the mesh bounding box are skipped, which is
/// exact for closed meshes.
pub fn intersect_subset(points: &[Vec3], vertices: &[Vec3], faces: &[[u32; 3]]) -> Vec<usize> {
    let Some((lo, hi)) = face_bounds(vertices, faces) else {
        return Vec::new();
    };
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k]))
        .filter(|(_, p)| winding_number(vertices, faces, **p) > 0.5)
        .map(|(i, _)| i)
        .collect()
}

/// True when every edge is shared by exactly two faces with opposite
/// orientation.
pub fn is_closed(faces: &[[u32; 3]]) -> bool {
    let mut edges: BTreeMap<(u32, u32), i32> = BTreeMap::new();
    for f in faces {
        for k in 0..3 {
            let (u, v) = (f[k], f[(k + 1) % 3]);
            *edges.entry((u, v)).or_default() += 1;
        }
    }
    edges
        .iter()
        .all(|(&(u, v), &n)| n == 1 && edges.get(&(v, u)) == Some(&1))
}

/// Similarity transform `y ≈ scale * rotation * x + translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, p: Vec3) -> Vec3 {
        math::add(
            math::scale(math::mat_vec(&self.rotation, p), self.scale),
            self.translation,
        )
    }
}

/// Least-squares similarity alignment of `source` onto `target`, with a
/// proper rotation. Returns the transform and the aligned source.
pub fn procrustes_align(source: &[Vec3], target: &[Vec3]) -> Result<(Similarity, Vec<Vec3>)> {
    if source.len() != target.len() {
        return Err(Error::Dimension {
            what: "procrustes point count",
            expected: source.len(),
            found: target.len(),
        });
    }
    let n = source.len();
    if n < 3 {
        return Err(Error::Degenerate("procrustes needs at least 3 points"));
    }
    let mean = |pts: &[Vec3]| {
        let mut m = Vector3::zeros();
        for p in pts {
            m += Vector3::from(*p);
        }
        m / n as f64
    };
    let mx = mean(source);
    let my = mean(target);
    let mut cov = Matrix3::zeros();
    let mut sxx = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in source.iter().zip(target) {
        let dx = Vector3::from(*x) - mx;
        let dy = Vector3::from(*y) - my;
        cov += dy * dx.transpose();
        sxx += dx * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= n as f64;
    var_x /= n as f64;

    let spread = sxx.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= ev[0] * 1e-12 {
        return Err(Error::Degenerate("procrustes source points are collinear"));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(Error::Degenerate("svd failed"))?;
    let v_t = svd.v_t.ok_or(Error::Degenerate("svd failed"))?;
    let sign = if (u.determinant() * v_t.determinant()) < 0.0 {
        -1.0
    } else {
        1.0
    };
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let r = u * d * v_t;
    let sv = svd.singular_values;
    let scale = (sv[0] + sv[1] + sign * sv[2]) / var_x;
    let t = my - r * mx * scale;

    let rotation = [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
    ];
    let sim = Similarity {
        scale,
        rotation,
        translation: [t[0], t[1], t[2]],
    };
    let aligned = source.iter().map(|p| sim.apply(*p)).collect();
    Ok((sim, aligned))
}

/// Deterministic random subset of a region's vertex indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VertexSample {
    pub indices: Vec<u32>,
    pub seed: u64,
}

/// Picks `min(len, cap)` distinct indices from `region`, sorted ascending.
pub fn subsample_region(region: &[u32], cap: usize, seed: u64) -> VertexSample {
    let cap = cap.max(1);
    let indices = if region.len() <= cap {
        region.to_vec()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<u32> = rand::seq::index::sample(&mut rng, region.len(), cap)
            .into_iter()
            .map(|i| region[i])
            .collect();
        picked.sort_unstable();
        picked
    };
    VertexSample { indices, seed }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use alloc::vec;
    use rand::Rng;

    /// Axis-aligned cube with outward-facing triangles.
    pub(crate) fn cube(center: Vec3, half: f64) -> (Vec<Vec3>, Vec<[u32; 3]>) {
        let mut v = Vec::new();
        for i in 0..8 {
            let s = |bit: usize| if i & bit != 0 { half } else { -half };
            v.push([center[0] + s(1), center[1] + s(2), center[2] + s(4)]);
        }
        let quads = [
            [0, 2, 3, 1],
            [4, 5, 7, 6],
            [0, 1, 5, 4],
            [2, 6, 7, 3],
            [0, 4, 6, 2],
            [1, 3, 7, 5],
        ];
        let mut f = Vec::new();
        for q in quads {
            f.push([q[0], q[1], q[2]]);
            f.push([q[0], q[2], q[3]]);
        }
        (v, f)
    }

    /// Icosphere by repeated midpoint subdivision.
    pub(crate) fn icosphere(levels: usize) -> (Vec<Vec3>, Vec<[u32; 3]>) {
        let t = (1.0 + libm::sqrt(5.0)) / 2.0;
        let mut v: Vec<Vec3> = vec![
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ];
        let mut f: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for p in &mut v {
            *p = math::scale(*p, 1.0 / math::norm(*p));
        }
        for _ in 0..levels {
            let mut mid: BTreeMap<(u32, u32), u32> = BTreeMap::new();
            let mut midpoint = |a: u32, b: u32, v: &mut Vec<Vec3>| {
                let key = (a.min(b), a.max(b));
                *mid.entry(key).or_insert_with(|| {
                    let m = math::scale(math::add(v[a as usize], v[b as usize]), 0.5);
                    v.push(math::scale(m, 1.0 / math::norm(m)));
                    (v.len() - 1) as u32
                })
            };
            let mut next = Vec::new();
            for [a, b, c] in f {
                let ab = midpoint(a, b, &mut v);
                let bc = midpoint(b, c, &mut v);
                let ca = midpoint(c, a, &mut v);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            f = next;
        }
        (v, f)
    }

    /// Crossing-parity along a fixed skew ray (Möller-Trumbore).
    fn ray_parity_inside(vertices: &[Vec3], faces: &[[u32; 3]], q: Vec3) -> bool {
        let dir = [0.5773, 0.5774, 0.5776];
        let mut hits = 0;
        for f in faces {
            let a = vertices[f[0] as usize];
            let e1 = math::sub(vertices[f[1] as usize], a);
            let e2 = math::sub(vertices[f[2] as usize], a);
            let p = math::cross(dir, e2);
            let det = math::dot(e1, p);
            if det.abs() < 1e-14 {
                continue;
            }
            let s = math::sub(q, a);
            let u = math::dot(s, p) / det;
            if !(0.0..=1.0).contains(&u) {
                continue;
            }
            let qv = math::cross(s, e1);
            let w = math::dot(dir, qv) / det;
            if w < 0.0 || u + w > 1.0 {
                continue;
            }
            if math::dot(e2, qv) / det > 0.0 {
                hits += 1;
            }
        }
        hits % 2 == 1
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                ]
            })
            .collect()
    }

    #[test]
    fn three_four_five() {
        let (d, pair) = min_pair_distance(&[[0.0; 3]], &[[3.0, 4.0, 0.0]]).unwrap();
        assert_eq!(d, 5.0);
        assert_eq!(pair, (0, 0));
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_points(&mut rng, 10, 1.0);
        assert_eq!(min_pair_distance(&a, &a).unwrap().0, 0.0);
    }

    #[test]
    fn empty_sets_are_rejected() {
        assert_eq!(
            min_pair_distance(&[], &[[0.0; 3]]),
            Err(Error::Empty("point set"))
        );
    }

    #[test]
    fn min_distance_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = random_points(&mut rng, 50, 1.0);
            let b = random_points(&mut rng, 60, 1.0);
            let mut oracle = f64::INFINITY;
            for p in &a {
                for q in &b {
                    let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                        .sqrt();
                    oracle = oracle.min(d);
                }
            }
            let (d, (i, j)) = min_pair_distance(&a, &b).unwrap();
            assert!((d - oracle).abs() <= 1e-12);
            assert!((math::dist_sq(&a[i], &b[j]).sqrt() - d).abs() <= 1e-15);
        }
    }

    #[test]
    fn cube_winding_numbers() {
        let (v, f) = cube([0.0; 3], 0.5);
        assert!(is_closed(&f));
        assert!((winding_number(&v, &f, [0.0; 3]) - 1.0).abs() < 1e-6);
        assert!(winding_number(&v, &f, [10.0, 0.0, 0.0]).abs() < 1e-6);
    }

    #[test]
    fn icosphere_matches_ray_parity() {
        let (v, f) = icosphere(2);
        assert!(is_closed(&f));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 500 {
            let q = random_points(&mut rng, 1, 1.5)[0];
            // Keep clear of the faceted surface, where both tests are ill-posed.
            let r = math::norm(q);
            if (0.93..1.01).contains(&r) {
                continue;
            }
            let inside = winding_number(&v, &f, q) > 0.5;
            assert_eq!(inside, ray_parity_inside(&v, &f, q), "query {q:?}");
            checked += 1;
        }
    }

    #[test]
    fn intersect_subset_examples() {
        let (a, _) = cube([0.0; 3], 0.5);
        let (far, far_f) = cube([10.0, 0.0, 0.0], 0.5);
        assert!(intersect_subset(&a, &far, &far_f).is_empty());
        let (big, big_f) = cube([0.0; 3], 1.0);
        assert_eq!(intersect_subset(&a, &big, &big_f), (0..8).collect::<Vec<_>>());
        let (shifted, shifted_f) = cube([0.6, 0.6, 0.6], 0.5);
        // Only the (+,+,+) corner of `a` lies inside the shifted cube.
        assert_eq!(intersect_subset(&a, &shifted, &shifted_f), vec![7]);
    }

    #[test]
    fn open_mesh_is_detected() {
        let (_, mut f) = cube([0.0; 3], 0.5);
        f.pop();
        assert!(!is_closed(&f));
    }

    fn rot_z(deg: f64) -> Mat3 {
        math::rodrigues([0.0, 0.0, deg.to_radians()])
    }

    #[test]
    fn procrustes_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_points(&mut rng, 10, 1.0);
        let (sim, aligned) = procrustes_align(&x, &x).unwrap();
        assert!((sim.scale - 1.0).abs() < 1e-12);
        for k in 0..3 {
            assert!(sim.translation[k].abs() < 1e-12);
            assert!((aligned[0][k] - x[0][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn procrustes_recovers_scaled_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_points(&mut rng, 12, 1.0);
        let r = rot_z(30.0);
        let y: Vec<Vec3> = x
            .iter()
            .map(|p| math::add(math::scale(math::mat_vec(&r, *p), 2.0), [1.0, 2.0, 3.0]))
            .collect();
        let (sim, _) = procrustes_align(&x, &y).unwrap();
        assert!((sim.scale - 2.0).abs() < 1e-9);
        for i in 0..3 {
            assert!((sim.translation[i] - [1.0, 2.0, 3.0][i]).abs() < 1e-9);
            for j in 0..3 {
                assert!((sim.rotation[i][j] - r[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn procrustes_rejects_degenerate_input() {
        let same = vec![[1.0, 2.0, 3.0]; 5];
        assert!(matches!(procrustes_align(&same, &same), Err(Error::Degenerate(_))));
        let line: Vec<Vec3> = (0..5).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        assert!(matches!(procrustes_align(&line, &line), Err(Error::Degenerate(_))));
    }

    #[test]
    fn procrustes_never_reflects() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_points(&mut rng, 8, 1.0);
        let y: Vec<Vec3> = x.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let (sim, _) = procrustes_align(&x, &y).unwrap();
        let m = nalgebra::Matrix3::from_fn(|i, j| sim.rotation[i][j]);
        assert!((m.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn subsample_examples() {
        let small: Vec<u32> = (0..50).collect();
        assert_eq!(subsample_region(&small, 128, 7).indices, small);
        let big: Vec<u32> = (0..1000).map(|i| i * 2).collect();
        let s = subsample_region(&big, 128, 7);
        assert_eq!(s.indices.len(), 128);
        assert_eq!(s, subsample_region(&big, 128, 7));
        let mut dedup = s.indices.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 128);
        assert!(s.indices.iter().all(|i| big.contains(i)));
    }

    #[test]
    fn seeds_give_different_samples() {
        let big: Vec<u32> = (0..1000).collect();
        let base = subsample_region(&big, 128, 0).indices;
        let differing = (1..=100)
            .filter(|s| subsample_region(&big, 128, *s).indices != base)
            .count();
        assert_eq!(differing, 100);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pts(n: core::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec3>> {
            proptest::collection::vec([-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0], n)
        }

        proptest! {
            #[test]
            fn min_distance_is_symmetric(a in pts(1..20), b in pts(1..20)) {
                prop_assert_eq!(min_pair_distance(&a, &b).unwrap().0, min_pair_distance(&b, &a).unwrap().0);
            }

            #[test]
            fn subsample_never_beats_exact(a in pts(1..300), b in pts(1..300), seed in 0u64..1000) {
                let ia: Vec<u32> = (0..a.len() as u32).collect();
                let ib: Vec<u32> = (0..b.len() as u32).collect();
                let sa = subsample_region(&ia, 32, seed).indices;
                let sb = subsample_region(&ib, 32, seed + 1).indices;
                let sub = min_pair_indexed(&a, &sa, &b, &sb).unwrap().0.sqrt();
                prop_assert!(sub >= min_pair_distance(&a, &b).unwrap().0);
            }

            #[test]
            fn winding_is_rigidly_invariant(
                q in [-1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5],
                r in [-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0],
                t in [-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0],
            ) {
                let (v, f) = icosphere(1);
                let rot = math::rodrigues(r);
                let moved: Vec<Vec3> = v.iter().map(|p| math::add(math::mat_vec(&rot, *p), t)).collect();
                let mq = math::add(math::mat_vec(&rot, q), t);
                let w0 = winding_number(&v, &f, q);
                let w1 = winding_number(&moved, &f, mq);
                prop_assert!((w0 - w1).abs() < 1e-9);
            }

            #[test]
            fn procrustes_residual_ignores_pre_transform(
                x in pts(5..12),
                r in [-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0],
                s in 0.2f64..5.0,
                t in [-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0],
                noise in pts(12..13),
            ) {
                let y: Vec<Vec3> = x.iter().zip(&noise).map(|(p, e)| math::add(*p, math::scale(*e, 0.1))).collect();
                let rot = math::rodrigues(r);
                let x2: Vec<Vec3> = x.iter().map(|p| math::add(math::scale(math::mat_vec(&rot, *p), s), t)).collect();
                let residual = |src: &[Vec3]| -> Option<f64> {
                    let (_, al) = procrustes_align(src, &y).ok()?;
                    Some(al.iter().zip(&y).map(|(a, b)| math::dist_sq(a, b)).sum())
                };
                if let (Some(r1), Some(r2)) = (residual(&x), residual(&x2)) {
                    prop_assert!((r1 - r2).abs() < 1e-9 * (1.0 + r1));
                }
            }
        }
    }
}
