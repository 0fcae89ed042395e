//! Generator for the bundled 16-joint stick figure: mesh, skinning,
//! shape basis, coarse and fine regions, and a small pose prior.
//!
//! Every body segment is a closed pentagonal tube of three rings, so the
//! mesh has 16 * 15 = 240 vertices and each segment is watertight on its own.

use std::collections::BTreeMap;
use std::path::Path;

use contactfit_core::body_model::{BodyModel, ModelData};
use contactfit_core::losses::{GmmData, GmmPrior};
use contactfit_core::math::{self, Vec3};
use contactfit_core::regions::{CoarseEntry, RegionData, RegionRegistry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NUM_JOINTS: usize = 16;
pub const NUM_BETAS: usize = 10;
pub const RING: usize = 5;
pub const SEGMENT_VERTS: usize = 3 * RING;
pub const NUM_VERTICES: usize = NUM_JOINTS * SEGMENT_VERTS;

pub const PARENTS: [i64; NUM_JOINTS] = [-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14];

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "spine",
    "neck",
    "head",
    "left_upper_arm",
    "left_forearm",
    "left_hand",
    "right_upper_arm",
    "right_forearm",
    "right_hand",
    "left_thigh",
    "left_shin",
    "left_foot",
    "right_thigh",
    "right_shin",
    "right_foot",
];

/// Joint indices used by scene construction.
pub mod joint {
    pub const PELVIS: usize = 0;
    pub const SPINE: usize = 1;
    pub const L_SHOULDER: usize = 4;
    pub const L_ELBOW: usize = 5;
    pub const L_WRIST: usize = 6;
    pub const R_SHOULDER: usize = 7;
    pub const R_ELBOW: usize = 8;
    pub const R_WRIST: usize = 9;
    pub const L_HIP: usize = 10;
    pub const L_KNEE: usize = 11;
    pub const R_HIP: usize = 13;
    pub const R_KNEE: usize = 14;
}

/// Fine regions per segment; sums to 75.
const FINE_SPLITS: [usize; NUM_JOINTS] = [6, 9, 2, 4, 5, 4, 5, 5, 4, 5, 5, 4, 4, 5, 4, 4];

const SHAPE_SEED: u64 = 0x5717_C416;

struct Segment {
    start: Vec3,
    end: Vec3,
    radius: f64,
}

fn segments() -> Vec<Segment> {
    let seg = |start: Vec3, end: Vec3, radius: f64| Segment { start, end, radius };
    let mut out = vec![
        seg([0.0, 0.80, 0.0], [0.0, 1.10, 0.0], 0.14),
        seg([0.0, 1.10, 0.0], [0.0, 1.45, 0.0], 0.15),
        seg([0.0, 1.45, 0.0], [0.0, 1.55, 0.0], 0.05),
        seg([0.0, 1.55, 0.0], [0.0, 1.80, 0.0], 0.09),
    ];
    for s in [1.0, -1.0] {
        out.push(seg([0.18 * s, 1.40, 0.0], [0.45 * s, 1.40, 0.0], 0.045));
        out.push(seg([0.45 * s, 1.40, 0.0], [0.70 * s, 1.40, 0.0], 0.04));
        out.push(seg([0.70 * s, 1.40, 0.0], [0.88 * s, 1.40, 0.0], 0.035));
    }
    for s in [1.0, -1.0] {
        out.push(seg([0.09 * s, 0.90, 0.0], [0.09 * s, 0.50, 0.0], 0.07));
        out.push(seg([0.09 * s, 0.50, 0.0], [0.09 * s, 0.08, 0.0], 0.05));
        out.push(seg([0.09 * s, 0.08, 0.0], [0.09 * s, 0.04, 0.18], 0.04));
    }
    out
}

fn normalize(v: Vec3) -> Vec3 {
    math::scale(v, 1.0 / math::norm(v))
}

/// Ring frame: `front` is +z projected off the axis (or +y for segments
/// running mostly along z).
fn frame(axis: Vec3) -> (Vec3, Vec3) {
    let hint = if axis[2].abs() > 0.9 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let front = normalize(math::sub(hint, math::scale(axis, math::dot(hint, axis))));
    let side = math::cross(front, axis);
    (side, front)
}

fn signed_volume(v: &[Vec3], faces: &[[usize; 3]]) -> f64 {
    faces
        .iter()
        .map(|f| math::dot(v[f[0]], math::cross(v[f[1]], v[f[2]])) / 6.0)
        .sum()
}

fn tube(seg: &Segment, base: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let axis = normalize(math::sub(seg.end, seg.start));
    let (side, front) = frame(axis);
    let mut verts = Vec::with_capacity(SEGMENT_VERTS);
    for ring in 0..3 {
        let c = math::add(seg.start, math::scale(math::sub(seg.end, seg.start), ring as f64 / 2.0));
        for k in 0..RING {
            let a = std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * k as f64 / RING as f64;
            let off = math::add(math::scale(side, a.cos()), math::scale(front, a.sin()));
            verts.push(math::add(c, math::scale(off, seg.radius)));
        }
    }
    let mut faces = Vec::new();
    for ring in 0..2 {
        for k in 0..RING {
            let k1 = (k + 1) % RING;
            let a = ring * RING + k;
            let b = ring * RING + k1;
            let c = (ring + 1) * RING + k1;
            let d = (ring + 1) * RING + k;
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    for k in 1..RING - 1 {
        faces.push([0, k + 1, k]);
        faces.push([2 * RING, 2 * RING + k, 2 * RING + k + 1]);
    }
    if signed_volume(&verts, &faces) < 0.0 {
        for f in &mut faces {
            f.swap(1, 2);
        }
    }
    let faces = faces.into_iter().map(|f| f.map(|i| i + base)).collect();
    (verts, faces)
}

fn seg_range(s: usize) -> std::ops::Range<usize> {
    s * SEGMENT_VERTS..(s + 1) * SEGMENT_VERTS
}

fn ring_range(s: usize, ring: usize) -> std::ops::Range<usize> {
    let b = s * SEGMENT_VERTS + ring * RING;
    b..b + RING
}

/// The stick figure in its rest pose: T-pose, facing +z, feet near y = 0.
pub fn stick16_model() -> ModelData {
    let segs = segments();
    let mut template = Vec::with_capacity(NUM_VERTICES);
    let mut faces = Vec::new();
    for (s, seg) in segs.iter().enumerate() {
        let (v, f) = tube(seg, s * SEGMENT_VERTS);
        template.extend(v);
        faces.extend(f);
    }

    let mut weights = vec![vec![0.0; NUM_JOINTS]; NUM_VERTICES];
    for s in 0..NUM_JOINTS {
        for v in seg_range(s) {
            weights[v][s] = 1.0;
        }
        if PARENTS[s] >= 0 {
            for v in ring_range(s, 0) {
                weights[v][s] = 0.7;
                weights[v][PARENTS[s] as usize] = 0.3;
            }
        }
    }

    let mut joint_regressor = vec![vec![0.0; NUM_VERTICES]; NUM_JOINTS];
    for (s, row) in joint_regressor.iter_mut().enumerate() {
        let ring = if s == joint::PELVIS { 1 } else { 0 };
        for v in ring_range(s, ring) {
            row[v] = 1.0 / RING as f64;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(SHAPE_SEED);
    let waves: Vec<(Vec3, f64, Vec3)> = (0..NUM_BETAS - 4)
        .map(|_| {
            let freq = [rng.random_range(1.0..4.0), rng.random_range(1.0..4.0), rng.random_range(1.0..4.0)];
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let dir = normalize([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            (freq, phase, dir)
        })
        .collect();
    let mut shape_dirs = Vec::with_capacity(NUM_VERTICES);
    for (v, p) in template.iter().enumerate() {
        let s = v / SEGMENT_VERTS;
        let seg = &segs[s];
        let axis = normalize(math::sub(seg.end, seg.start));
        let rel = math::sub(*p, seg.start);
        let radial = math::sub(rel, math::scale(axis, math::dot(rel, axis)));
        let mut d: Vec<Vec3> = Vec::with_capacity(NUM_BETAS);
        // Overall size about the floor point under the pelvis.
        d.push(math::scale(*p, 0.05));
        // Girth.
        d.push(math::scale(radial, 0.15));
        // Arm length.
        d.push(if (4..10).contains(&s) {
            let shoulder_x = 0.18 * p[0].signum();
            [0.1 * (p[0] - shoulder_x), 0.0, 0.0]
        } else {
            [0.0; 3]
        });
        // Leg length.
        d.push(if s >= 10 { [0.0, 0.1 * (p[1] - 0.90), 0.0] } else { [0.0; 3] });
        for (freq, phase, dir) in &waves {
            let w = (freq[0] * p[0] + freq[1] * p[1] + freq[2] * p[2] + phase).sin();
            d.push(math::scale(*dir, 0.01 * w));
        }
        shape_dirs.push([0, 1, 2].map(|axis| d.iter().map(|dv| dv[axis]).collect()));
    }

    ModelData {
        template,
        faces,
        parents: PARENTS.to_vec(),
        weights,
        shape_dirs,
        joint_regressor,
        lowres: None,
    }
}

/// Coarse regions for both prompt vocabularies and 75 disjoint fine regions.
pub fn stick16_regions() -> RegionData {
    let model = stick16_model();
    let t = &model.template;
    let front = |v: usize, s: usize| {
        let seg = &segments()[s];
        let axis = normalize(math::sub(seg.end, seg.start));
        let (_, f) = frame(axis);
        let c = math::sub(t[v], seg.start);
        math::dot(c, f) > 1e-9
    };
    let pick = |s: usize, rings: &[usize], keep: &dyn Fn(usize) -> bool| -> Vec<usize> {
        rings
            .iter()
            .flat_map(|r| ring_range(s, *r))
            .filter(|v| keep(*v))
            .collect()
    };
    let is_front = |s: usize| move |v: usize| front(v, s);
    let is_back = |s: usize| move |v: usize| !front(v, s);

    let mut coarse = BTreeMap::new();
    let plain = |v: Vec<usize>| CoarseEntry::Plain(v);
    coarse.insert("head".into(), plain(seg_range(3).collect()));
    coarse.insert("neck".into(), plain(seg_range(2).collect()));
    coarse.insert("chest".into(), plain(pick(1, &[1, 2], &is_front(1))));
    let mut stomach = pick(1, &[0], &is_front(1));
    stomach.extend(pick(0, &[2], &is_front(0)));
    coarse.insert("stomach".into(), plain(stomach));
    let mut back = pick(1, &[0, 1, 2], &is_back(1));
    back.extend(pick(0, &[2], &is_back(0)));
    coarse.insert("back".into(), plain(back));
    coarse.insert("waist (front)".into(), plain(pick(0, &[1, 2], &is_front(0))));
    coarse.insert("waist (back)".into(), plain(pick(0, &[1, 2], &is_back(0))));
    coarse.insert("butt".into(), plain(pick(0, &[0, 1], &is_back(0))));

    let shoulder_half = |front_half: bool, left: bool| -> Vec<usize> {
        let arm = if left { joint::L_SHOULDER } else { joint::R_SHOULDER };
        let mut v: Vec<usize> = pick(1, &[2], &|v| front(v, 1) == front_half && (t[v][0] > 0.0) == left);
        v.extend(pick(arm, &[0], &|v| front(v, arm) == front_half));
        v
    };
    let sided = |left: Vec<usize>, right: Vec<usize>| CoarseEntry::Sided { left, right };
    coarse.insert(
        "shoulder (front)".into(),
        sided(shoulder_half(true, true), shoulder_half(true, false)),
    );
    coarse.insert(
        "shoulder (back)".into(),
        sided(shoulder_half(false, true), shoulder_half(false, false)),
    );
    let segs_of = |ids: &[usize]| -> Vec<usize> { ids.iter().flat_map(|s| seg_range(*s)).collect() };
    coarse.insert("arm".into(), sided(segs_of(&[4, 5]), segs_of(&[7, 8])));
    coarse.insert("hand".into(), sided(segs_of(&[6]), segs_of(&[9])));
    coarse.insert("leg".into(), sided(segs_of(&[10, 11]), segs_of(&[13, 14])));
    coarse.insert("foot".into(), sided(segs_of(&[12]), segs_of(&[15])));

    let mut fine = BTreeMap::new();
    for (s, parts) in FINE_SPLITS.iter().enumerate() {
        let verts: Vec<usize> = seg_range(s).collect();
        for p in 0..*parts {
            let lo = p * verts.len() / parts;
            let hi = (p + 1) * verts.len() / parts;
            fine.insert(format!("{}_{p}", JOINT_NAMES[s]), verts[lo..hi].to_vec());
        }
    }
    RegionData { coarse, fine }
}

/// A three-component prior over the flattened joint rotations: a neutral
/// stance, arms lowered, and bent elbows and knees.
pub fn stick16_prior() -> GmmData {
    let dim = NUM_JOINTS * 3;
    let mut sigma = vec![0.5; dim];
    for k in 0..3 {
        sigma[joint::PELVIS * 3 + k] = 1.5;
        sigma[joint::SPINE * 3 + k] = 0.3;
        sigma[2 * 3 + k] = 0.3;
        sigma[3 * 3 + k] = 0.3;
    }
    let covariance: Vec<Vec<f64>> = (0..dim)
        .map(|i| (0..dim).map(|j| if i == j { sigma[i] * sigma[i] } else { 0.0 }).collect())
        .collect();

    let neutral = vec![0.0; dim];
    let mut lowered = vec![0.0; dim];
    lowered[joint::L_SHOULDER * 3 + 2] = -1.2;
    lowered[joint::R_SHOULDER * 3 + 2] = 1.2;
    let mut bent = lowered.clone();
    bent[joint::L_ELBOW * 3 + 1] = 0.8;
    bent[joint::R_ELBOW * 3 + 1] = -0.8;
    bent[joint::L_KNEE * 3] = 0.5;
    bent[joint::R_KNEE * 3] = 0.5;

    GmmData {
        weights: vec![0.4, 0.35, 0.25],
        means: vec![neutral, lowered, bent],
        covariances: vec![covariance.clone(), covariance.clone(), covariance],
    }
}

/// Extra geodesic edges: each ring vertex at the start of a segment is
/// joined to the closest rest-pose vertex of the parent segment.
pub fn stick16_bridges() -> Vec<[u32; 2]> {
    let t = stick16_model().template;
    let mut out = Vec::new();
    for s in 1..NUM_JOINTS {
        let parent = PARENTS[s] as usize;
        for v in ring_range(s, 0) {
            let nearest = seg_range(parent)
                .min_by(|a, b| math::dist_sq(&t[v], &t[*a]).total_cmp(&math::dist_sq(&t[v], &t[*b])))
                .expect("segments are non-empty");
            out.push([v as u32, nearest as u32]);
        }
    }
    out
}

/// Model, regions, prior and geodesic bridges loaded together.
pub struct Bundle {
    pub model: BodyModel,
    pub registry: RegionRegistry,
    pub prior: GmmPrior,
    pub bridges: Vec<[u32; 2]>,
}

impl Bundle {
    /// The generated stick figure.
    pub fn builtin() -> crate::Result<Self> {
        let model = BodyModel::new(stick16_model())?;
        let registry = RegionRegistry::new(&stick16_regions(), model.num_vertices())?;
        let prior = GmmPrior::new(&stick16_prior())?;
        Ok(Self {
            model,
            registry,
            prior,
            bridges: stick16_bridges(),
        })
    }

    /// Loads files where given and falls back to the built-in figure for
    /// the rest. Bridges are only known for the built-in mesh.
    pub fn load(model: Option<&Path>, regions: Option<&Path>, prior: Option<&Path>) -> crate::Result<Self> {
        let builtin_mesh = model.is_none();
        let model = match model {
            Some(p) => crate::io::load_model(p)?,
            None => BodyModel::new(stick16_model())?,
        };
        let registry = match regions {
            Some(p) => crate::io::load_regions(p, model.num_vertices())?,
            None => RegionRegistry::new(&stick16_regions(), model.num_vertices())?,
        };
        let prior = match prior {
            Some(p) => crate::io::load_prior(p)?,
            None => GmmPrior::new(&stick16_prior())?,
        };
        Ok(Self {
            model,
            registry,
            prior,
            bridges: if builtin_mesh { stick16_bridges() } else { Vec::new() },
        })
    }
}

/// Writes the three asset files into `dir`.
pub fn write_assets(dir: &Path) -> crate::Result<()> {
    crate::io::write_json(&dir.join("stick16.json"), &stick16_model())?;
    crate::io::write_json(&dir.join("stick16.regions.json"), &stick16_regions())?;
    crate::io::write_json(&dir.join("stick16.prior.json"), &stick16_prior())
}

/// Vertex ranges of a segment, for scene construction.
pub fn segment_vertices(joint: usize) -> std::ops::Range<usize> {
    seg_range(joint)
}
