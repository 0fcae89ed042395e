//! Objective terms over posed meshes.
//!
//! Every term is generic over [`Real`] so the same code produces plain
//! values and taped values for gradients. Discrete choices (which vertex
//! pair is closest, which limb variant satisfies a constraint, which
//! vertices are inside the other mesh) are made on plain values and only
//! the selected geometry is recorded. Each term also reports those choices
//! as a fingerprint so callers can tell when a perturbation switched them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::body_model::{project, Camera, LowRes, PoseParams};
use crate::error::{invalid, Error, Result};
use crate::geometry::{self, subsample_region};
use crate::math::{self, Vec3};
use crate::parser::{ConstraintSet, ContactConstraint};
use crate::regions::{Chirality, RegionId, RegionRegistry};
use crate::Mode;

/// Term weights. Contact weights depend on the mode; see
/// [`LossWeights::for_mode`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_lmm: f64,
    pub lambda_gmm: f64,
    pub lambda_beta: f64,
    pub lambda_theta: f64,
    pub lambda_2d: f64,
    pub lambda_p: f64,
    pub lambda_heuristic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::for_mode(Mode::TwoPerson)
    }
}

impl LossWeights {
    /// Contact weight 1000 for two people and 10000 for one. The auxiliary
    /// weights were tuned on the synthetic scenes and are not canonical.
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            lambda_lmm: match mode {
                Mode::TwoPerson => 1000.0,
                Mode::OnePerson => 10000.0,
            },
            lambda_gmm: 10.0,
            lambda_beta: 0.1,
            lambda_theta: 0.1,
            lambda_2d: 1.0,
            lambda_p: 1.0,
            lambda_heuristic: 1000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_lmm", self.lambda_lmm),
            ("lambda_gmm", self.lambda_gmm),
            ("lambda_beta", self.lambda_beta),
            ("lambda_theta", self.lambda_theta),
            ("lambda_2d", self.lambda_2d),
            ("lambda_p", self.lambda_p),
            ("lambda_heuristic", self.lambda_heuristic),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(
                    "loss weights",
                    format!("{name} must be finite and non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Detected 2D joints for one person, in pixels, with per-joint confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keypoints2D {
    pub points: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

impl Keypoints2D {
    pub fn validate(&self, num_joints: usize) -> Result<()> {
        if self.points.len() != num_joints || self.confidence.len() != num_joints {
            return Err(Error::Dimension {
                what: "keypoints",
                expected: num_joints,
                found: self.points.len().min(self.confidence.len()),
            });
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("keypoints"));
        }
        if self.confidence.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(invalid(
                "keypoint confidence",
                "confidences must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Confidence-weighted squared reprojection error, summed over persons.
pub fn keypoint_loss<T: Real>(
    joints: &[&[Vec3<T>]],
    camera: &Camera,
    keypoints: &[Keypoints2D],
) -> Result<T> {
    let mut acc: Option<T> = None;
    for (person, kp) in joints.iter().zip(keypoints) {
        let uv = project(person, camera)?;
        for ((p, k), &c) in uv.iter().zip(&kp.points).zip(&kp.confidence) {
            if c == 0.0 {
                continue;
            }
            let du = p[0] - k[0];
            let dv = p[1] - k[1];
            let term = (du * du + dv * dv) * c;
            acc = Some(match acc {
                Some(a) => a + term,
                None => term,
            });
        }
    }
    Ok(acc.unwrap_or_else(|| joints[0][0][0].zero_like()))
}

/// Squared norm of every shape vector, summed over persons.
pub fn shape_loss<T: Real>(params: &[&PoseParams<T>]) -> T {
    let mut acc = params[0].trans[0].zero_like();
    for p in params {
        for b in &p.beta {
            acc += b.square();
        }
    }
    acc
}

/// Squared distance of joint rotations from their initial values.
pub fn init_pose_loss<T: Real>(params: &[&PoseParams<T>], init: &[&PoseParams]) -> T {
    let mut acc = params[0].trans[0].zero_like();
    for (p, q) in params.iter().zip(init) {
        for (a, b) in p.theta.iter().zip(&q.theta) {
            for k in 0..3 {
                acc += (a[k] - b[k]).square();
            }
        }
    }
    acc
}

/// Gaussian mixture prior file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmData {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
struct Component {
    log_norm: f64,
    mean: Vec<f64>,
    /// Rows of the inverse Cholesky factor, zeros dropped.
    whiten: Vec<Vec<(usize, f64)>>,
}

/// Mixture of Gaussians over flattened joint rotations.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    dim: usize,
    components: Vec<Component>,
}

impl GmmPrior {
    pub fn new(data: &GmmData) -> Result<Self> {
        let k = data.weights.len();
        if k == 0 {
            return Err(Error::Empty("mixture components"));
        }
        if data.means.len() != k || data.covariances.len() != k {
            return Err(invalid(
                "mixture",
                format!(
                    "{k} weights but {} means and {} covariances",
                    data.means.len(),
                    data.covariances.len()
                ),
            ));
        }
        let total: f64 = data.weights.iter().sum();
        if data.weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(invalid(
                "mixture weights",
                format!("weights must be non-negative and sum to 1, got {total}"),
            ));
        }
        let dim = data.means[0].len();
        let mut components = Vec::with_capacity(k);
        for (i, ((w, mean), cov)) in data
            .weights
            .iter()
            .zip(&data.means)
            .zip(&data.covariances)
            .enumerate()
        {
            if mean.len() != dim || cov.len() != dim || cov.iter().any(|r| r.len() != dim) {
                return Err(Error::Dimension {
                    what: "mixture component",
                    expected: dim,
                    found: mean.len(),
                });
            }
            let m = DMatrix::from_fn(dim, dim, |r, c| cov[r][c]);
            if (0..dim).any(|r| (0..r).any(|c| (m[(r, c)] - m[(c, r)]).abs() > 1e-9)) {
                return Err(invalid(
                    "mixture covariance",
                    format!("covariance {i} is not symmetric"),
                ));
            }
            let chol = m.cholesky().ok_or_else(|| {
                invalid(
                    "mixture covariance",
                    format!("covariance {i} is not positive definite"),
                )
            })?;
            let l = chol.l();
            let log_det: f64 = 2.0 * (0..dim).map(|d| libm::log(l[(d, d)])).sum::<f64>();
            let linv = l
                .solve_lower_triangular(&DMatrix::identity(dim, dim))
                .ok_or(Error::Degenerate("covariance factor"))?;
            let whiten = (0..dim)
                .map(|r| {
                    (0..=r)
                        .filter(|&c| linv[(r, c)] != 0.0)
                        .map(|c| (c, linv[(r, c)]))
                        .collect()
                })
                .collect();
            let log_w = if *w > 0.0 { libm::log(*w) } else { f64::NEG_INFINITY };
            components.push(Component {
                log_norm: log_w
                    - 0.5 * (dim as f64 * libm::log(2.0 * core::f64::consts::PI) + log_det),
                mean: mean.clone(),
                whiten,
            });
        }
        Ok(Self { dim, components })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Negative log density of `x` under the mixture, via log-sum-exp.
    pub fn nll<T: Real>(&self, x: &[T]) -> Result<T> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                what: "prior input",
                expected: self.dim,
                found: x.len(),
            });
        }
        let zero = x[0].zero_like();
        let mut exponents = Vec::with_capacity(self.components.len());
        for comp in &self.components {
            if comp.log_norm == f64::NEG_INFINITY {
                continue;
            }
            let r: Vec<T> = x.iter().zip(&comp.mean).map(|(v, m)| *v - *m).collect();
            let mut quad = zero;
            for row in &comp.whiten {
                let mut z = zero;
                for &(c, w) in row {
                    z += r[c] * w;
                }
                quad += z.square();
            }
            exponents.push(quad * -0.5 + comp.log_norm);
        }
        let peak = exponents
            .iter()
            .map(|e| e.value())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = zero;
        for e in &exponents {
            sum += (*e - peak).exp();
        }
        Ok(-(sum.ln() + peak))
    }
}

/// Prior term over every person's flattened joint rotations.
pub fn gmm_prior_loss<T: Real>(params: &[&PoseParams<T>], prior: &GmmPrior) -> Result<T> {
    let mut acc = params[0].trans[0].zero_like();
    for p in params {
        let flat: Vec<T> = p.theta.iter().flatten().copied().collect();
        acc += prior.nll(&flat)?;
    }
    Ok(acc)
}

/// Fixed per-region vertex samples, drawn once per run.
#[derive(Debug, Clone)]
pub struct RegionSamples {
    samples: Vec<Vec<u32>>,
}

impl RegionSamples {
    pub fn new(registry: &RegionRegistry, cap: usize, seed: u64) -> Self {
        let samples = registry
            .coarse_regions()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let s = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                subsample_region(&r.vertices, cap, s).indices
            })
            .collect();
        Self { samples }
    }

    pub fn get(&self, id: RegionId) -> &[u32] {
        &self.samples[id.0 as usize]
    }
}

/// A region of one person's mesh.
type Side = (RegionId, usize);

/// The geometry selected for one constraint: closest vertices of two regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Pick {
    pub a: Side,
    pub b: Side,
    pub vertices: (u32, u32),
}

/// Memoized region-to-region nearest pairs for one set of posed meshes.
pub struct ContactEval<'a> {
    registry: &'a RegionRegistry,
    samples: &'a RegionSamples,
    points: [&'a [Vec3]; 2],
    same_mesh: bool,
    memo: BTreeMap<(Side, Side), Option<(f64, (u32, u32))>>,
}

impl<'a> ContactEval<'a> {
    /// `points` holds each person's vertex positions; pass the same slice
    /// twice for self-contact.
    pub fn new(
        registry: &'a RegionRegistry,
        samples: &'a RegionSamples,
        points: [&'a [Vec3]; 2],
        mode: Mode,
    ) -> Self {
        Self {
            registry,
            samples,
            points,
            same_mesh: mode == Mode::OnePerson,
            memo: BTreeMap::new(),
        }
    }

    fn mesh(&self, person: usize) -> usize {
        if self.same_mesh {
            0
        } else {
            person
        }
    }

    /// Distance and vertex pair between two regions. `None` when the two
    /// sides are the same region of the same mesh, which is trivially in
    /// contact and carries no information.
    fn pair(&mut self, a: Side, b: Side) -> Option<(f64, Pick)> {
        let a = (a.0, self.mesh(a.1));
        let b = (b.0, self.mesh(b.1));
        if a == b {
            return None;
        }
        let samples = self.samples;
        let points = self.points;
        let hit = *self.memo.entry((a, b)).or_insert_with(|| {
            geometry::min_pair_indexed(
                points[a.1],
                samples.get(a.0),
                points[b.1],
                samples.get(b.0),
            )
        });
        hit.map(|(d2, vertices)| (libm::sqrt(d2), Pick { a, b, vertices }))
    }

    fn variants_with(&self, ids: &[RegionId], side: Option<Chirality>) -> Vec<RegionId> {
        ids.iter()
            .copied()
            .filter(|id| side.map_or(true, |s| self.registry.region(*id).chirality == s))
            .collect()
    }

    fn best_over(
        &mut self,
        side_a: &[RegionId],
        person_a: usize,
        side_b: &[RegionId],
        person_b: usize,
    ) -> Option<(f64, Pick)> {
        let mut best: Option<(f64, Pick)> = None;
        for &ra in side_a {
            for &rb in side_b {
                if let Some((d, pick)) = self.pair((ra, person_a), (rb, person_b)) {
                    if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                        best = Some((d, pick));
                    }
                }
            }
        }
        best
    }

    /// Smallest distance between any variant of side a on `person_a` and
    /// any variant of side b on `person_b`, ignoring limb groups.
    pub fn constraint_distance(
        &mut self,
        c: &ContactConstraint,
        person_a: usize,
        person_b: usize,
    ) -> Option<(f64, Pick)> {
        self.best_over(&c.side_a, person_a, &c.side_b, person_b)
    }

    /// Total distance of a constraint set with side a on `person_a`,
    /// honoring limb groups: constraints sharing a group are jointly
    /// assigned left/right so that both limbs take part.
    pub fn set_distance(
        &mut self,
        set: &ConstraintSet,
        person_a: usize,
    ) -> (f64, Vec<Pick>) {
        let person_b = 1 - person_a;
        let cs = &set.constraints;

        // Binary slots: (constraint, side) pairs whose chirality is jointly chosen.
        let mut group_members: BTreeMap<(usize, &str), Vec<usize>> = BTreeMap::new();
        for (k, c) in cs.iter().enumerate() {
            if let Some(g) = &c.group_a {
                group_members.entry((0, g.as_str())).or_default().push(k);
            }
            if let Some(g) = &c.group_b {
                group_members.entry((1, g.as_str())).or_default().push(k);
            }
        }
        let mut slots: Vec<(usize, usize)> = Vec::new();
        let mut groups: Vec<core::ops::Range<usize>> = Vec::new();
        for ((side, _), members) in &group_members {
            // Oversized groups and singletons fall back to independent minima.
            if members.len() < 2 || members.len() > 4 || slots.len() + members.len() > 16 {
                continue;
            }
            let start = slots.len();
            slots.extend(members.iter().map(|k| (*k, *side)));
            groups.push(start..slots.len());
        }

        let mut best_total = f64::INFINITY;
        let mut best_picks = Vec::new();
        for mask in 0u32..(1u32 << slots.len()) {
            let valid = groups.iter().all(|g| {
                let bits = g.clone().map(|s| (mask >> s) & 1);
                let ones = bits.clone().filter(|b| *b == 1).count();
                ones > 0 && ones < g.len()
            });
            if !valid {
                continue;
            }
            let mut total = 0.0;
            let mut picks = Vec::with_capacity(cs.len());
            for (k, c) in cs.iter().enumerate() {
                let chosen = |side: usize| {
                    slots
                        .iter()
                        .position(|s| *s == (k, side))
                        .map(|s| {
                            if (mask >> s) & 1 == 1 {
                                Chirality::Right
                            } else {
                                Chirality::Left
                            }
                        })
                };
                let va = self.variants_with(&c.side_a, chosen(0));
                let vb = self.variants_with(&c.side_b, chosen(1));
                if let Some((d, pick)) = self.best_over(&va, person_a, &vb, person_b) {
                    total += d;
                    picks.push(pick);
                }
            }
            if total < best_total {
                best_total = total;
                best_picks = picks;
            }
        }
        if best_total.is_infinite() {
            best_total = 0.0;
        }
        (best_total, best_picks)
    }

    /// Per-set loss: the better of the two person assignments. Empty sets
    /// contribute zero. Ties keep the first assignment.
    pub fn dist_sum(&mut self, set: &ConstraintSet) -> (f64, Vec<Pick>) {
        if set.is_empty() {
            return (0.0, Vec::new());
        }
        let forward = self.set_distance(set, 0);
        if self.same_mesh {
            return forward;
        }
        let backward = self.set_distance(set, 1);
        if backward.0 < forward.0 {
            backward
        } else {
            forward
        }
    }
}

fn pick_distance<T: Real>(verts: [&[Vec3<T>]; 2], pick: &Pick) -> T {
    let p = verts[pick.a.1][pick.vertices.0 as usize];
    let q = verts[pick.b.1][pick.vertices.1 as usize];
    math::norm(math::sub(p, q))
}

fn fingerprint_picks(out: &mut Vec<u32>, picks: &[Pick]) {
    for p in picks {
        out.extend([
            p.a.0 .0,
            p.a.1 as u32,
            p.b.0 .0,
            p.b.1 as u32,
            p.vertices.0,
            p.vertices.1,
        ]);
    }
    out.push(u32::MAX);
}

/// Mean of the per-set losses over all sampled sets.
///
/// `verts` holds each person's posed vertices (the same slice twice in the
/// one-person mode). Returns the value and a fingerprint of the chosen
/// geometry.
pub fn lmm_loss<T: Real>(
    registry: &RegionRegistry,
    samples: &RegionSamples,
    verts: [&[Vec3<T>]; 2],
    sets: &[ConstraintSet],
    mode: Mode,
) -> (T, Vec<u32>) {
    let zero = verts[0][0][0].zero_like();
    if sets.is_empty() {
        return (zero, Vec::new());
    }
    let v0: Vec<Vec3> = verts[0].iter().map(math::values).collect();
    let v1: Vec<Vec3> = if mode == Mode::OnePerson {
        Vec::new()
    } else {
        verts[1].iter().map(math::values).collect()
    };
    let points = if mode == Mode::OnePerson {
        [v0.as_slice(), v0.as_slice()]
    } else {
        [v0.as_slice(), v1.as_slice()]
    };
    let mut eval = ContactEval::new(registry, samples, points, mode);
    let mut taped: BTreeMap<Pick, T> = BTreeMap::new();
    let mut per_set = Vec::with_capacity(sets.len());
    let mut fp = Vec::new();
    for set in sets {
        let (_, picks) = eval.dist_sum(set);
        fingerprint_picks(&mut fp, &picks);
        let mut sum = zero;
        for pick in &picks {
            sum += *taped
                .entry(*pick)
                .or_insert_with(|| pick_distance(verts, pick));
        }
        per_set.push(sum);
    }
    // Summing in value order makes the mean independent of set order.
    per_set.sort_by(|a, b| a.value().total_cmp(&b.value()));
    let mut total = zero;
    for s in per_set {
        total += s;
    }
    (total / sets.len() as f64, fp)
}

/// Squared distance from every vertex of one collision mesh that lies
/// inside the other to the nearest vertex of the other, in both directions.
/// Inside membership is decided on values and carries no gradient.
pub fn interpenetration_loss<T: Real>(
    verts0: &[Vec3<T>],
    verts1: &[Vec3<T>],
    mesh: &LowRes,
) -> (T, Vec<u32>) {
    let zero = verts0[0][0].zero_like();
    let pick = |verts: &[Vec3<T>]| -> Vec<Vec3> {
        mesh.vertices
            .iter()
            .map(|&i| math::values(&verts[i as usize]))
            .collect()
    };
    let p0 = pick(verts0);
    let p1 = pick(verts1);
    let all: Vec<u32> = (0..mesh.vertices.len() as u32).collect();
    let mut total = zero;
    let mut fp = Vec::new();
    for (inner, outer, vin, vout) in [(&p0, &p1, verts0, verts1), (&p1, &p0, verts1, verts0)] {
        for i in geometry::intersect_subset(inner, outer, &mesh.faces) {
            let (_, (_, j)) = geometry::min_pair_indexed(inner, &[i as u32], outer, &all)
                .expect("collision mesh has vertices");
            fp.extend([i as u32, j]);
            let a = vin[mesh.vertices[i] as usize];
            let b = vout[mesh.vertices[j as usize] as usize];
            let d = math::sub(a, b);
            total += math::dot(d, d);
        }
        fp.push(u32::MAX);
    }
    (total, fp)
}

/// Minimum distance between the sampled vertices of two meshes.
pub fn heuristic_contact_loss<T: Real>(
    verts0: &[Vec3<T>],
    verts1: &[Vec3<T>],
    sample: &[u32],
) -> (T, Vec<u32>) {
    let p0: Vec<Vec3> = verts0.iter().map(math::values).collect();
    let p1: Vec<Vec3> = verts1.iter().map(math::values).collect();
    let (_, (i, j)) =
        geometry::min_pair_indexed(&p0, sample, &p1, sample).expect("nonempty vertex sample");
    let d = math::norm(math::sub(verts0[i as usize], verts1[j as usize]));
    (d, vec![i, j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::geometry::tests::cube;
    use nalgebra::DVector;
    use crate::parser::{parse_response, RawResponse};
    use crate::regions::tests::tiny_region_data;
    use alloc::string::String;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Registry over `tiny_region_data` with vertex positions that can be
    /// placed freely per test.
    fn registry() -> (RegionRegistry, usize) {
        let (data, n) = tiny_region_data();
        (RegionRegistry::new(&data, n).unwrap(), n)
    }

    fn far_points(n: usize, offset: f64) -> Vec<Vec3> {
        (0..n).map(|i| [offset + i as f64 * 10.0, 100.0, 0.0]).collect()
    }

    fn place(points: &mut [Vec3], reg: &RegionRegistry, key: &str, at: Vec3) {
        let ids = reg.resolve_part(key);
        assert_eq!(ids.len(), 1, "{key}");
        for (k, &v) in reg.region(ids[0]).vertices.iter().enumerate() {
            points[v as usize] = [at[0] + k as f64 * 1e-3, at[1], at[2]];
        }
    }

    fn set(reg: &RegionRegistry, rows: &[(&str, &str)]) -> ConstraintSet {
        let mut text = String::from("| a | b |\n|---|---|\n");
        for (a, b) in rows {
            text.push_str(&format!("| {a} | {b} |\n"));
        }
        parse_response(
            &RawResponse {
                sample_index: 0,
                text,
            },
            reg,
            Mode::TwoPerson,
        )
    }

    #[test]
    fn touching_regions_have_zero_distance() {
        let (reg, n) = registry();
        let samples = RegionSamples::new(&reg, 128, 0);
        let mut p0 = far_points(n, 0.0);
        let mut p1 = far_points(n, 5.0);
        place(&mut p0, &reg, "left hand", [0.0; 3]);
        place(&mut p1, &reg, "back", [0.0; 3]);
        let mut eval = ContactEval::new(&reg, &samples, [&p0, &p1], Mode::TwoPerson);
        let s = set(&reg, &[("hand", "back")]);
        assert_eq!(eval.dist_sum(&s).0, 0.0);
    }

    #[test]
    fn explicit_chirality_is_respected() {
        let (reg, n) = registry();
        let samples = RegionSamples::new(&reg, 128, 0);
        let mut p0 = far_points(n, 0.0);
        let mut p1 = far_points(n, 5.0);
        place(&mut p1, &reg, "back", [0.0; 3]);
        place(&mut p0, &reg, "left hand", [0.1, 0.0, 0.0]);
        place(&mut p0, &reg, "right hand", [0.0, 0.01, 0.0]);
        let mut eval = ContactEval::new(&reg, &samples, [&p0, &p1], Mode::TwoPerson);
        let c = &set(&reg, &[("left hand", "back")]).constraints[0];
        let (d, _) = eval.constraint_distance(c, 0, 1).unwrap();
        assert!((d - 0.099).abs() < 1e-12, "{d}");
    }

    #[test]
    fn limb_group_forces_both_sides() {
        let (reg, n) = registry();
        let samples = RegionSamples::new(&reg, 128, 0);
        let mut p0 = far_points(n, 0.0);
        let mut p1 = far_points(n, 5.0);
        place(&mut p0, &reg, "left hand", [0.0; 3]);
        place(&mut p0, &reg, "right hand", [0.0, 1.0, 0.0]);
        place(&mut p1, &reg, "left shoulder (front)", [0.0, 0.0, 0.02]);
        place(&mut p1, &reg, "right shoulder (front)", [0.0, 0.0, 0.03]);
        place(&mut p1, &reg, "waist (front)", [0.0, 0.0, 0.05]);
        place(&mut p1, &reg, "waist (back)", [0.0, 0.0, 0.07]);
        let s = set(&reg, &[("hand", "shoulder (front)"), ("hand", "waist")]);
        assert_eq!(s.constraints[0].group_a.as_deref(), Some("hand"));
        let mut eval = ContactEval::new(&reg, &samples, [&p0, &p1], Mode::TwoPerson);

        // Oracle: all four left/right assignments of the two rows.
        let hand = |side: &str| reg.resolve_part(&format!("{side} hand"));
        let mut per_row = Vec::new();
        for c in &s.constraints {
            let mut row = Vec::new();
            for side in ["left", "right"] {
                let c2 = ContactConstraint {
                    side_a: hand(side),
                    ..c.clone()
                };
                row.push(eval.constraint_distance(&c2, 0, 1).unwrap().0);
            }
            per_row.push(row);
        }
        let mut oracle = f64::INFINITY;
        for x in 0..2 {
            for y in 0..2 {
                if x != y {
                    oracle = oracle.min(per_row[0][x] + per_row[1][y]);
                }
            }
        }
        let independent = per_row[0][0] + per_row[1][0];
        let (d, _) = eval.set_distance(&s, 0);
        assert_eq!(d, oracle);
        assert!(d > independent);
    }

    #[test]
    fn empty_set_contributes_zero() {
        let (reg, n) = registry();
        let samples = RegionSamples::new(&reg, 128, 0);
        let p = far_points(n, 0.0);
        let mut eval = ContactEval::new(&reg, &samples, [&p, &p], Mode::TwoPerson);
        assert_eq!(eval.dist_sum(&ConstraintSet::default()).0, 0.0);
    }

    #[test]
    fn dist_sum_takes_better_ordering() {
        let (reg, n) = registry();
        let samples = RegionSamples::new(&reg, 128, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p0: Vec<Vec3> = (0..n)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
                .collect();
            let p1: Vec<Vec3> = (0..n)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
                .collect();
            let s = set(&reg, &[("head", "left hand"), ("back", "chest")]);
            let mut eval = ContactEval::new(&reg, &samples, [&p0, &p1], Mode::TwoPerson);
            let forward: f64 = s
                .constraints
                .iter()
                .map(|c| eval.constraint_distance(c, 0, 1).unwrap().0)
                .sum();
            let backward: f64 = s
                .constraints
                .iter()
                .map(|c| eval.constraint_distance(c, 1, 0).unwrap().0)
                .sum();
            assert_eq!(eval.dist_sum(&s).0, forward.min(backward));
        }
    }

    #[test]
    fn lmm_loss_averages_sets() {
        let (reg, n) = registry();
        let samples = RegionSamples::new(&reg, 128, 0);
        let mut p0 = far_points(n, 0.0);
        let mut p1 = far_points(n, 5.0);
        place(&mut p0, &reg, "head", [0.0; 3]);
        place(&mut p1, &reg, "head", [0.0, 0.3, 0.4]);
        let one = set(&reg, &[("head", "head")]);
        let single = lmm_loss(&reg, &samples, [&p0, &p1], &[one.clone()], Mode::TwoPerson).0;
        assert!((single - 0.5).abs() < 1e-12);
        let same: Vec<_> = (0..5).map(|_| one.clone()).collect();
        assert_eq!(lmm_loss(&reg, &samples, [&p0, &p1], &same, Mode::TwoPerson).0, single);
        let mut half = same.clone();
        half.extend((0..5).map(|_| ConstraintSet::default()));
        let diluted = lmm_loss(&reg, &samples, [&p0, &p1], &half, Mode::TwoPerson).0;
        assert!((diluted - single / 2.0).abs() < 1e-15);
    }

    #[test]
    fn self_contact_skips_identical_region() {
        let (reg, n) = registry();
        let samples = RegionSamples::new(&reg, 128, 0);
        let mut p = far_points(n, 0.0);
        place(&mut p, &reg, "left hand", [0.0; 3]);
        place(&mut p, &reg, "right hand", [0.2, 0.0, 0.0]);
        let s = set(&reg, &[("hand", "hand")]);
        let (d, _) = lmm_loss(&reg, &samples, [&p, &p], &[s], Mode::OnePerson);
        assert!((d - (0.2 - 1e-3)).abs() < 1e-12);
    }

    #[test]
    fn keypoint_examples() {
        let cam = Camera::new(1000.0, 1000.0, 500.0, 500.0).unwrap();
        let joints = [[0.0, 0.0, 1.0], [0.1, 0.0, 1.0]];
        let exact = Keypoints2D {
            points: vec![[500.0, 500.0], [600.0, 500.0]],
            confidence: vec![1.0, 1.0],
        };
        assert!(keypoint_loss(&[&joints], &cam, &[exact.clone()]).unwrap().abs() < 1e-20);
        let off = Keypoints2D {
            points: vec![[503.0, 504.0], [600.0, 500.0]],
            confidence: vec![2.0, 1.0],
        };
        assert!((keypoint_loss(&[&joints], &cam, &[off.clone()]).unwrap() - 50.0).abs() < 1e-9);
        let blind = Keypoints2D {
            confidence: vec![0.0, 0.0],
            ..off
        };
        assert_eq!(keypoint_loss(&[&joints], &cam, &[blind]).unwrap(), 0.0);
    }

    fn params(theta: Vec<[f64; 3]>, beta: Vec<f64>) -> PoseParams {
        PoseParams {
            theta,
            beta,
            phi: [0.0; 3],
            trans: [0.0; 3],
        }
    }

    #[test]
    fn quadratic_terms() {
        let p = params(vec![[0.0; 3]; 2], vec![1.0, 2.0]);
        assert_eq!(shape_loss(&[&p]), 5.0);
        assert_eq!(init_pose_loss(&[&p], &[&p]), 0.0);
        let mut q = p.clone();
        q.theta[1][2] += 0.1;
        assert!((init_pose_loss(&[&q], &[&p]) - 0.01).abs() < 1e-15);
    }

    fn diag_gmm(weights: Vec<f64>, means: Vec<Vec<f64>>, var: f64) -> GmmPrior {
        let d = means[0].len();
        let cov: Vec<Vec<f64>> = (0..d)
            .map(|r| (0..d).map(|c| if r == c { var } else { 0.0 }).collect())
            .collect();
        GmmPrior::new(&GmmData {
            covariances: vec![cov; weights.len()],
            weights,
            means,
        })
        .unwrap()
    }

    #[test]
    fn gmm_single_component_at_mode() {
        let d = 6;
        let var: f64 = 0.3;
        let g = diag_gmm(vec![1.0], vec![vec![0.2; d]], var);
        let expected = 0.5 * ((2.0 * core::f64::consts::PI).powi(d as i32) * var.powi(d as i32)).ln();
        assert!((g.nll(&[0.2; 6]).unwrap() - expected).abs() < 1e-12);
        let shifted: Vec<f64> = (0..d).map(|_| 0.2 + 3.0 * var.sqrt()).collect();
        assert!((g.nll(&shifted).unwrap() - expected - 4.5 * d as f64).abs() < 1e-9);
    }

    #[test]
    fn gmm_two_components_far_apart() {
        let g1 = diag_gmm(vec![1.0], vec![vec![0.0; 3]], 0.1);
        let g2 = diag_gmm(vec![0.5, 0.5], vec![vec![0.0; 3], vec![50.0; 3]], 0.1);
        let x = [0.0; 3];
        let expected = -(0.5f64).ln() + g1.nll(&x).unwrap();
        assert!((g2.nll(&x).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn gmm_rejects_bad_inputs() {
        let bad_weights = GmmData {
            weights: vec![0.7, 0.7],
            means: vec![vec![0.0]; 2],
            covariances: vec![vec![vec![1.0]]; 2],
        };
        assert!(GmmPrior::new(&bad_weights).is_err());
        let not_pd = GmmData {
            weights: vec![1.0],
            means: vec![vec![0.0, 0.0]],
            covariances: vec![vec![vec![1.0, 2.0], vec![2.0, 1.0]]],
        };
        assert!(GmmPrior::new(&not_pd).is_err());
        let g = diag_gmm(vec![1.0], vec![vec![0.0; 3]], 1.0);
        assert!(matches!(g.nll(&[0.0; 2]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gmm_full_covariance_matches_direct_formula() {
        let cov = vec![vec![2.0, 0.3, 0.1], vec![0.3, 1.0, -0.2], vec![0.1, -0.2, 0.5]];
        let mean = vec![0.1, -0.2, 0.3];
        let g = GmmPrior::new(&GmmData {
            weights: vec![1.0],
            means: vec![mean.clone()],
            covariances: vec![cov.clone()],
        })
        .unwrap();
        let m = DMatrix::from_fn(3, 3, |r, c| cov[r][c]);
        let inv = m.clone().try_inverse().unwrap();
        let x = [0.5, 0.4, -0.3];
        let r = DVector::from_fn(3, |i, _| x[i] - mean[i]);
        let quad = (r.transpose() * &inv * &r)[(0, 0)];
        let expected =
            0.5 * quad + 0.5 * (3.0 * (2.0 * core::f64::consts::PI).ln() + m.determinant().ln());
        assert!((g.nll(&x).unwrap() - expected).abs() < 1e-12);
    }

    fn lowres_of(v: &[Vec3], f: &[[u32; 3]]) -> LowRes {
        LowRes {
            vertices: (0..v.len() as u32).collect(),
            faces: f.to_vec(),
        }
    }

    #[test]
    fn interpenetration_examples() {
        let (a, f) = cube([0.0; 3], 0.5);
        let mesh = lowres_of(&a, &f);
        let (far, _) = cube([1.5, 0.0, 0.0], 0.5);
        assert_eq!(interpenetration_loss(&a, &far, &mesh).0, 0.0);
        // One corner of each cube pokes 0.1 into the other along every axis.
        let (b, _) = cube([0.9, 0.1, 0.1], 0.5);
        let (value, _) = interpenetration_loss(&a, &b, &mesh);
        assert!((value - 0.06).abs() < 1e-12, "{value}");
        // Coincident meshes: every vertex sits on the other surface at zero
        // distance from its twin, so the nearest-vertex penalty vanishes.
        let (same, _) = interpenetration_loss(&a, &a, &mesh);
        assert_eq!(same, 0.0);
        let (shifted, _) = cube([0.01, 0.0, 0.0], 0.5);
        assert!(interpenetration_loss(&a, &shifted, &mesh).0 > 0.0);
    }

    #[test]
    fn heuristic_examples() {
        let (a, _) = cube([0.0; 3], 0.5);
        let (b, _) = cube([1.2, 0.0, 0.0], 0.5);
        let all: Vec<u32> = (0..8).collect();
        assert!((heuristic_contact_loss(&a, &b, &all).0 - 0.2).abs() < 1e-12);
        let (c, _) = cube([1.0, 0.0, 0.0], 0.5);
        assert_eq!(heuristic_contact_loss(&a, &c, &all).0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let p: Vec<Vec3> = (0..8).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let q: Vec<Vec3> = (0..8).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let oracle = geometry::min_pair_distance(&p, &q).unwrap().0;
            assert!((heuristic_contact_loss(&p, &q, &all).0 - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn taped_contact_gradient_points_along_the_gap() {
        let (reg, n) = registry();
        let samples = RegionSamples::new(&reg, 128, 0);
        let mut p0 = far_points(n, 0.0);
        let mut p1 = far_points(n, 5.0);
        place(&mut p0, &reg, "head", [0.0; 3]);
        place(&mut p1, &reg, "head", [0.0, 0.3, 0.4]);
        let tape = Tape::new();
        let v0: Vec<_> = p0.iter().map(|p| p.map(|x| tape.var(x))).collect();
        let v1: Vec<_> = p1.iter().map(|p| p.map(|x| tape.var(x))).collect();
        let s = set(&reg, &[("head", "head")]);
        let (loss, _) = lmm_loss(&reg, &samples, [&v0, &v1], &[s], Mode::TwoPerson);
        let g = tape.gradient(loss);
        let head = reg.region(reg.resolve_part("head")[0]).vertices[0] as usize;
        assert!((g.wrt(v1[head][1]) - 0.6).abs() < 1e-12);
        assert!((g.wrt(v1[head][2]) - 0.8).abs() < 1e-12);
        assert!((g.wrt(v0[head][1]) + 0.6).abs() < 1e-12);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            lambda_p: -1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(LossWeights::for_mode(Mode::OnePerson).lambda_lmm, 10000.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cloud(n: usize) -> impl Strategy<Value = Vec<Vec3>> {
            proptest::collection::vec([-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0], n)
        }

        fn rows() -> impl Strategy<Value = Vec<(&'static str, &'static str)>> {
            let part = proptest::sample::select(vec![
                "hand", "arm", "back", "head", "waist", "left foot", "chest", "shoulder (back)",
            ]);
            proptest::collection::vec((part.clone(), part), 0..4)
        }

        proptest! {
            #[test]
            fn person_swap_with_flip_is_invariant(
                p0 in cloud(tiny_region_data().1),
                p1 in cloud(tiny_region_data().1),
                rows in rows(),
            ) {
                let (reg, _) = registry();
                let samples = RegionSamples::new(&reg, 128, 0);
                let s = set(&reg, &rows);
                let flipped = ConstraintSet {
                    constraints: s.constraints.iter().map(|c| c.flipped()).collect(),
                    ..s.clone()
                };
                let a = ContactEval::new(&reg, &samples, [&p0, &p1], Mode::TwoPerson).dist_sum(&s).0;
                let b = ContactEval::new(&reg, &samples, [&p1, &p0], Mode::TwoPerson).dist_sum(&flipped).0;
                prop_assert_eq!(a, b);
                prop_assert!(a >= 0.0 && a.is_finite());
            }

            #[test]
            fn lmm_loss_ignores_set_order(
                p0 in cloud(tiny_region_data().1),
                p1 in cloud(tiny_region_data().1),
                all in proptest::collection::vec(rows(), 1..5),
                rot in 0usize..5,
            ) {
                let (reg, _) = registry();
                let samples = RegionSamples::new(&reg, 128, 0);
                let sets: Vec<_> = all.iter().map(|r| set(&reg, r)).collect();
                let mut rotated = sets.clone();
                rotated.rotate_left(rot % sets.len());
                rotated.reverse();
                let a = lmm_loss(&reg, &samples, [&p0, &p1], &sets, Mode::TwoPerson).0;
                let b = lmm_loss(&reg, &samples, [&p0, &p1], &rotated, Mode::TwoPerson).0;
                prop_assert_eq!(a, b);
            }
        }
    }
}
