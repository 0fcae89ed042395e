//! Evaluation: Procrustes-aligned joint error and contact recall.

use alloc::collections::BinaryHeap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{min_pair_indexed, procrustes_align};
use crate::math::{self, Vec3};
use crate::regions::RegionRegistry;

/// Radii in millimeters: 0, 5, ..., 95.
pub const PCC_RADII_MM: [f64; 20] = [
    0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0, 65.0, 70.0, 75.0,
    80.0, 85.0, 90.0, 95.0,
];

/// Slack when comparing a distance in millimeters against a radius, so
/// that a pair placed at exactly a radius counts as inside it.
const RADIUS_SLACK_MM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Align each person separately and average.
    PerPerson,
    /// Align all persons with one shared transform.
    Joint,
}

fn mean_error(a: &[Vec3], b: &[Vec3]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| libm::sqrt(math::dist_sq(p, q)))
        .sum();
    sum / a.len() as f64
}

/// Procrustes-aligned mean per-joint position error in millimeters.
pub fn pa_mpjpe(pred: &[&[Vec3]], gt: &[&[Vec3]], mode: AlignMode) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Dimension {
            what: "persons",
            expected: gt.len(),
            found: pred.len(),
        });
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(Error::Dimension {
                what: "joints",
                expected: g.len(),
                found: p.len(),
            });
        }
    }
    let meters = match mode {
        AlignMode::PerPerson => {
            let mut total = 0.0;
            for (p, g) in pred.iter().zip(gt) {
                let (_, aligned) = procrustes_align(p, g)?;
                total += mean_error(&aligned, g);
            }
            total / pred.len() as f64
        }
        AlignMode::Joint => {
            let p: Vec<Vec3> = pred.iter().flat_map(|s| s.iter().copied()).collect();
            let g: Vec<Vec3> = gt.iter().flat_map(|s| s.iter().copied()).collect();
            let (_, aligned) = procrustes_align(&p, &g)?;
            mean_error(&aligned, &g)
        }
    };
    Ok(meters * 1000.0)
}

/// Ground-truth contact: pairs of fine region names, the first on person 0
/// (or the single person), the second on person 1 (or the same person).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContactMap {
    pub pairs: Vec<[String; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusScore {
    pub radius_mm: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pa_mpjpe_per_person: f64,
    pub pa_mpjpe_joint: f64,
    pub pcc_at_radius: Vec<RadiusScore>,
    pub pcc_avg: f64,
}

/// Exact minimum distance in meters between every ground-truth pair.
pub fn contact_distances(
    meshes: [&[Vec3]; 2],
    gt: &ContactMap,
    registry: &RegionRegistry,
) -> Result<Vec<f64>> {
    gt.pairs
        .iter()
        .map(|[a, b]| {
            let ra = registry.fine(a)?;
            let rb = registry.fine(b)?;
            let (d2, _) = min_pair_indexed(meshes[0], &ra.vertices, meshes[1], &rb.vertices)
                .ok_or(Error::Empty("fine region"))?;
            Ok(libm::sqrt(d2))
        })
        .collect()
}

/// Fraction of ground-truth pairs within each radius, and their mean.
/// Pass the same mesh twice for one person.
pub fn pcc(
    meshes: [&[Vec3]; 2],
    gt: &ContactMap,
    registry: &RegionRegistry,
    radii_mm: &[f64],
) -> Result<(Vec<RadiusScore>, f64)> {
    if radii_mm.is_empty() {
        return Err(Error::Empty("radii"));
    }
    let dists = contact_distances(meshes, gt, registry)?;
    let scores: Vec<RadiusScore> = radii_mm
        .iter()
        .map(|&r| {
            let fraction = if dists.is_empty() {
                // Nothing to recover counts as fully recovered.
                1.0
            } else {
                let hit = dists
                    .iter()
                    .filter(|d| **d * 1000.0 <= r + RADIUS_SLACK_MM)
                    .count();
                hit as f64 / dists.len() as f64
            };
            RadiusScore {
                radius_mm: r,
                fraction,
            }
        })
        .collect();
    let avg = scores.iter().map(|s| s.fraction).sum::<f64>() / scores.len() as f64;
    Ok((scores, avg))
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier(f64, u32);

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    // Reversed so the max-heap pops the closest vertex first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

/// Shortest path lengths along mesh edges, plus any extra `bridges`, from
/// a set of source vertices. Unreachable vertices get infinity.
pub fn edge_geodesics(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    bridges: &[[u32; 2]],
    sources: &[u32],
) -> Vec<f64> {
    let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); vertices.len()];
    let edges = faces
        .iter()
        .flat_map(|f| [[f[0], f[1]], [f[1], f[2]], [f[2], f[0]]])
        .chain(bridges.iter().copied());
    for [u, v] in edges {
        let w = libm::sqrt(math::dist_sq(&vertices[u as usize], &vertices[v as usize]));
        adj[u as usize].push((v, w));
        adj[v as usize].push((u, w));
    }
    let mut dist = vec![f64::INFINITY; vertices.len()];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        dist[s as usize] = 0.0;
        heap.push(Frontier(0.0, s));
    }
    while let Some(Frontier(d, u)) = heap.pop() {
        if d > dist[u as usize] {
            continue;
        }
        for &(v, w) in &adj[u as usize] {
            let nd = d + w;
            if nd < dist[v as usize] {
                dist[v as usize] = nd;
                heap.push(Frontier(nd, v));
            }
        }
    }
    dist
}

/// Derives a contact map from posed meshes.
///
/// With two meshes every cross-person fine-region pair closer than
/// `euclid_m` is kept. With one mesh, pairs must also be at least
/// `geodesic_m` apart along the surface, which drops neighbouring regions;
/// regions on disconnected components count as infinitely far apart.
/// `bridges` are extra surface edges, e.g. joining separately modelled
/// body segments.
pub fn pseudo_contact_map(
    meshes: &[&[Vec3]],
    faces: &[[u32; 3]],
    bridges: &[[u32; 2]],
    registry: &RegionRegistry,
    euclid_m: f64,
    geodesic_m: f64,
) -> Result<ContactMap> {
    let fine = registry.fine_regions();
    let mut pairs = Vec::new();
    match meshes {
        [one] => {
            for (i, a) in fine.iter().enumerate() {
                let geo = edge_geodesics(one, faces, bridges, &a.vertices);
                for b in &fine[i + 1..] {
                    let (d2, _) = min_pair_indexed(one, &a.vertices, one, &b.vertices)
                        .ok_or(Error::Empty("fine region"))?;
                    if libm::sqrt(d2) > euclid_m {
                        continue;
                    }
                    let g = b
                        .vertices
                        .iter()
                        .map(|v| geo[*v as usize])
                        .fold(f64::INFINITY, f64::min);
                    if g >= geodesic_m {
                        pairs.push([a.name.clone(), b.name.clone()]);
                    }
                }
            }
        }
        [m0, m1] => {
            for a in fine {
                for b in fine {
                    let (d2, _) = min_pair_indexed(m0, &a.vertices, m1, &b.vertices)
                        .ok_or(Error::Empty("fine region"))?;
                    if libm::sqrt(d2) <= euclid_m {
                        pairs.push([a.name.clone(), b.name.clone()]);
                    }
                }
            }
        }
        _ => {
            return Err(Error::Dimension {
                what: "meshes",
                expected: 2,
                found: meshes.len(),
            })
        }
    }
    Ok(ContactMap { pairs })
}
