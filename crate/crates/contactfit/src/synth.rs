//! Synthetic scenes on the stick figure: touching ground-truth poses,
//! noisy initial poses, rendered keypoints and canned model responses.

use std::path::Path;

use contactfit_core::autodiff::Real;
use contactfit_core::body_model::{BodyModel, Camera, PoseParams};
use contactfit_core::losses::Keypoints2D;
use contactfit_core::math::{self, Mat3, Vec3};
use contactfit_core::metrics::pseudo_contact_map;
use contactfit_core::optimizer::{gradient, Adam, OptimizerConfig};
use contactfit_core::parser::RawResponse;
use contactfit_core::Mode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assets::{joint, segment_vertices, Bundle};
use crate::error::{AppError, Result};
use crate::scene::{GroundTruth, ResponsesRef, Scene};

pub const EUCLID_THRESHOLD_M: f64 = 0.020;
pub const GEODESIC_THRESHOLD_M: f64 = 0.100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Handshake,
    HugProxy,
    SelfTouch,
}

impl std::str::FromStr for SynthKind {
    type Err = AppError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "handshake" => Ok(Self::Handshake),
            "hug-proxy" => Ok(Self::HugProxy),
            "self-touch" => Ok(Self::SelfTouch),
            other => Err(AppError::Validation(format!(
                "unknown scene kind {other:?}; expected handshake, hug-proxy or self-touch"
            ))),
        }
    }
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Handshake => "handshake",
            Self::HugProxy => "hug-proxy",
            Self::SelfTouch => "self-touch",
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            Self::SelfTouch => Mode::OnePerson,
            _ => Mode::TwoPerson,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Standard deviation of the pose noise, radians.
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    /// Carries the responses inline; [`write_synthetic`] moves them to a file.
    pub scene: Scene,
    pub responses: Vec<RawResponse>,
}

pub fn camera() -> Camera {
    Camera {
        focal: [1000.0, 1000.0],
        principal: [500.0, 500.0],
    }
}

fn rot_x(a: f64) -> Mat3 {
    math::rodrigues([a, 0.0, 0.0])
}

fn rot_y(a: f64) -> Mat3 {
    math::rodrigues([0.0, a, 0.0])
}

fn rot_z(a: f64) -> Mat3 {
    math::rodrigues([0.0, 0.0, a])
}

fn aa(m: Mat3) -> Vec3 {
    math::axis_angle(&m)
}

/// Half turn about the vertical line through `c`.
fn half_turn(p: Vec3, c: Vec3) -> Vec3 {
    [2.0 * c[0] - p[0], p[1], 2.0 * c[2] - p[2]]
}

fn argmax_x(verts: &[Vec3], among: impl Iterator<Item = usize>) -> usize {
    let mut best = None::<usize>;
    for i in among {
        if best.map_or(true, |b| verts[i][0] > verts[b][0]) {
            best = Some(i);
        }
    }
    best.expect("non-empty vertex set")
}

/// Mirrors person 0 by a half turn about the vertical through its vertex
/// `pivot`, which becomes a shared point of both bodies. When the pivot is
/// the body's extreme point along +x the two bodies sit on opposite sides
/// of the plane x = pivot.x and touch without overlapping.
fn mirrored_partner(model: &BodyModel, p0: &PoseParams, pivot: usize) -> Result<PoseParams> {
    let verts = model.forward(p0)?.vertices;
    let c = verts[pivot];
    let phi = aa(math::mat_mul(&rot_y(std::f64::consts::PI), &math::rodrigues(p0.phi)));
    Ok(PoseParams {
        theta: p0.theta.clone(),
        beta: p0.beta.clone(),
        phi,
        trans: half_turn(p0.trans, c),
    })
}

fn handshake_pair(model: &BodyModel) -> Result<Vec<PoseParams>> {
    let mut p0 = PoseParams::zeros(model);
    p0.theta[joint::R_SHOULDER] = aa(math::mat_mul(&rot_x(0.5), &rot_y(std::f64::consts::FRAC_PI_2)));
    p0.theta[joint::R_ELBOW] = [0.0, -0.25, 0.0];
    p0.theta[joint::L_SHOULDER] = [0.0, 0.0, -1.2];
    p0.theta[joint::L_ELBOW] = [0.0, 0.3, 0.0];
    p0.phi = [0.0, std::f64::consts::FRAC_PI_2, 0.0];
    p0.trans = [-0.75, -0.9, 4.0];
    let verts = model.forward(&p0)?.vertices;
    let pivot = argmax_x(&verts, segment_vertices(joint::R_WRIST));
    let p1 = mirrored_partner(model, &p0, pivot)?;
    Ok(vec![p0, p1])
}

fn hug_pair(model: &BodyModel) -> Result<Vec<PoseParams>> {
    let mut p0 = PoseParams::zeros(model);
    p0.theta[joint::SPINE] = [0.35, 0.0, 0.0];
    p0.theta[2] = [-0.35, 0.0, 0.0];
    p0.theta[joint::L_SHOULDER] = [0.0, 0.0, -1.1];
    p0.theta[joint::R_SHOULDER] = [0.0, 0.0, 1.1];
    p0.theta[joint::L_ELBOW] = [0.0, 0.6, 0.0];
    p0.theta[joint::R_ELBOW] = [0.0, -0.6, 0.0];
    p0.phi = [0.0, std::f64::consts::FRAC_PI_2, 0.0];
    p0.trans = [-0.4, -0.9, 4.0];
    let verts = model.forward(&p0)?.vertices;
    let pivot = argmax_x(&verts, 0..verts.len());
    let p1 = mirrored_partner(model, &p0, pivot)?;
    Ok(vec![p0, p1])
}

/// Closest (hand, foot) vertex pair between the right hand and right foot.
fn closest_pair(verts: &[Vec3], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (usize, usize) {
    let mut best = (f64::INFINITY, (0, 0));
    for i in a {
        for j in b.clone() {
            let d = math::dist_sq(&verts[i], &verts[j]);
            if d < best.0 {
                best = (d, (i, j));
            }
        }
    }
    best.1
}

/// Squared distance between two vertices with the given joints free.
fn arm_gap<T: Real>(
    model: &BodyModel,
    base: &PoseParams,
    free: &[usize],
    (a, b): (usize, usize),
    x: &[T],
) -> contactfit_core::Result<T> {
    let mut q = base.map(|v| x[0].lift(v));
    for (k, j) in free.iter().enumerate() {
        q.theta[*j] = [x[3 * k], x[3 * k + 1], x[3 * k + 2]];
    }
    let v = model.forward(&q)?.vertices;
    let d = math::sub(v[a], v[b]);
    Ok(math::dot(d, d))
}

/// Standing quad stretch: the right knee is folded back, then the right
/// arm, right hip and spine are solved so the right hand meets the right
/// foot.
fn self_touch_pose(model: &BodyModel) -> Result<Vec<PoseParams>> {
    let mut p = PoseParams::zeros(model);
    p.theta[joint::R_KNEE] = [2.4, 0.0, 0.0];
    p.theta[joint::R_HIP] = [-0.2, 0.0, 0.15];
    p.theta[joint::L_SHOULDER] = [0.0, 0.0, -1.2];
    p.theta[joint::R_SHOULDER] = aa(math::mat_mul(&rot_x(-0.6), &rot_z(1.2)));
    p.phi = [0.0, std::f64::consts::FRAC_PI_2, 0.0];
    p.trans = [0.0, -0.9, 4.0];

    let hand = segment_vertices(joint::R_WRIST);
    let foot = segment_vertices(15);
    let verts = model.forward(&p)?.vertices;
    let (h, f) = closest_pair(&verts, hand, foot);

    let arm = [joint::R_SHOULDER, joint::R_ELBOW, joint::R_HIP, joint::SPINE];
    let mut x: Vec<f64> = arm.iter().flat_map(|j| p.theta[*j]).collect();
    let mut cfg = OptimizerConfig::for_mode(Mode::OnePerson);
    cfg.learning_rate = 0.02;
    let mut adam = Adam::new(x.len(), &cfg);
    let mask = vec![true; x.len()];
    let base = p.clone();
    for step in 0..4000 {
        if step == 2500 {
            cfg.learning_rate = 0.002;
            adam = Adam::new(x.len(), &cfg);
        }
        let (value, g) = gradient(|v| arm_gap(model, &base, &arm, (h, f), v), &x)?;
        if value < 1e-14 {
            break;
        }
        adam.step(&mut x, &g, &mask);
    }
    for (k, j) in arm.iter().enumerate() {
        p.theta[*j] = [x[3 * k], x[3 * k + 1], x[3 * k + 2]];
    }
    Ok(vec![p])
}

fn render(model: &BodyModel, camera: &Camera, params: &[PoseParams]) -> Result<(Vec<Vec<Vec3>>, Vec<Keypoints2D>)> {
    let mut joints = Vec::new();
    let mut kps = Vec::new();
    for p in params {
        let j = model.forward(p)?.joints;
        let uv = contactfit_core::body_model::project(&j, camera)?;
        kps.push(Keypoints2D {
            points: uv,
            confidence: vec![1.0; j.len()],
        });
        joints.push(j);
    }
    Ok((joints, kps))
}

const TWO_PERSON_HEADER: &str = "| Person 1 Body Part | Person 2 Body Part |\n|---|---|\n";

fn two_person_text(reason: &str, rows: &[(&str, &str)]) -> String {
    let mut s = format!("{reason}\n\n{TWO_PERSON_HEADER}");
    for (a, b) in rows {
        s.push_str(&format!("| {a} | {b} |\n"));
    }
    s
}

fn one_person_text(reason: &str, rows: &[(&str, &str)]) -> String {
    let mut s = format!("{reason}\n\n| Body Part 1 | Body Part 2 |\n| --- | --- |\n");
    for (a, b) in rows {
        s.push_str(&format!("| {a} | {b} |\n"));
    }
    s
}

/// Twenty canned answers in the style of the prompt's expected output.
pub fn fixture_responses(kind: SynthKind) -> Vec<RawResponse> {
    let texts: Vec<String> = match kind {
        SynthKind::Handshake => (0..20)
            .map(|i| match i {
                4 | 13 => two_person_text(
                    "The two people stand apart; I cannot tell whether they touch.",
                    &[],
                ),
                7 | 16 => two_person_text(
                    "Reasoning: the people greet each other. Their hands are clasped.",
                    &[("**hand**", "**hand**")],
                ),
                10 => two_person_text(
                    "They shake hands at arm's length.",
                    &[("hand", "hand"), ("hand", "hand")],
                ),
                _ => two_person_text(
                    "The two people are shaking hands, so one hand of Person 1 touches one hand of Person 2.",
                    &[("hand", "hand")],
                ),
            })
            .collect(),
        SynthKind::HugProxy => (0..20)
            .map(|i| match i {
                3 | 11 => two_person_text("It is unclear whether they touch.", &[]),
                6 => two_person_text(
                    "They embrace; chests and stomachs are pressed together.",
                    &[("chest", "chest"), ("stomach", "stomach")],
                ),
                _ => two_person_text(
                    "The two people lean into a hug, chest against chest.",
                    &[("chest", "chest")],
                ),
            })
            .collect(),
        SynthKind::SelfTouch => (0..20)
            .map(|i| match i {
                5 | 15 => one_person_text(
                    "Standing pose on one leg.",
                    &[("foot", "ground")],
                ),
                8 | 17 => one_person_text(
                    "This is a standing quadriceps stretch: the yogi holds the raised foot.",
                    &[("hand", "foot")],
                ),
                _ => one_person_text(
                    "Pose: Natarajasana variant (standing quad stretch). The hand grabs the foot behind the body while the other foot stands on the ground.",
                    &[("hand", "foot"), ("foot", "ground")],
                ),
            })
            .collect(),
    };
    texts
        .into_iter()
        .enumerate()
        .map(|(sample_index, text)| RawResponse { sample_index, text })
        .collect()
}

pub fn synth_scene(bundle: &Bundle, spec: SynthSpec) -> Result<Synthetic> {
    if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
        return Err(AppError::Validation(format!("noise must be finite and >= 0, got {}", spec.noise)));
    }
    let model = &bundle.model;
    let gt = match spec.kind {
        SynthKind::Handshake => handshake_pair(model)?,
        SynthKind::HugProxy => hug_pair(model)?,
        SynthKind::SelfTouch => self_touch_pose(model)?,
    };
    let camera = camera();
    let (gt_joints, keypoints) = render(model, &camera, &gt)?;

    let meshes: Vec<Vec<Vec3>> = gt
        .iter()
        .map(|p| model.forward(p).map(|f| f.vertices))
        .collect::<std::result::Result<_, _>>()?;
    let refs: Vec<&[Vec3]> = meshes.iter().map(|m| m.as_slice()).collect();
    let contact_map = pseudo_contact_map(
        &refs,
        model.faces(),
        &bundle.bridges,
        &bundle.registry,
        EUCLID_THRESHOLD_M,
        GEODESIC_THRESHOLD_M,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise).map_err(|e| AppError::Validation(e.to_string()))?;
    let init: Vec<PoseParams> = gt
        .iter()
        .map(|p| {
            let mut q = p.clone();
            for r in &mut q.theta {
                for c in r {
                    *c += normal.sample(&mut rng);
                }
            }
            q
        })
        .collect();

    let responses = fixture_responses(spec.kind);
    let scene = Scene {
        id: format!("{}-s{}", spec.kind.name(), spec.seed),
        mode: spec.kind.mode(),
        persons: init,
        camera,
        keypoints,
        image: None,
        responses: Some(ResponsesRef::Inline(responses.clone())),
        gt: Some(GroundTruth {
            joints: gt_joints,
            contact_map,
            params: Some(gt),
        }),
    };
    scene.validate(model)?;
    Ok(Synthetic { scene, responses })
}

/// Writes `scene.json` and `responses.json` into `dir`.
pub fn write_synthetic(dir: &Path, synth: &Synthetic) -> Result<()> {
    let mut scene = synth.scene.clone();
    scene.responses = Some(ResponsesRef::Path("responses.json".into()));
    crate::io::write_json(&dir.join("responses.json"), &synth.responses)?;
    crate::io::write_json(&dir.join("scene.json"), &scene)
}
