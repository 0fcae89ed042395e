//! Parametric articulated body: linear blend skinning with linear shape
//! blendshapes, a rigid global placement, and pinhole projection of joints.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{invalid, Error, Result};
use crate::math::{self, Mat3, Vec3};

const SUM_TOLERANCE: f64 = 1e-6;

/// Raw model contents exactly as stored in a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelData {
    pub template: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    /// Parent joint per joint; `-1` marks the root.
    pub parents: Vec<i64>,
    /// `d_v x d_theta` skinning weights.
    pub weights: Vec<Vec<f64>>,
    /// `d_v x 3 x d_beta` shape basis.
    pub shape_dirs: Vec<[Vec<f64>; 3]>,
    /// `d_j x d_v` regressor. The first `d_theta` rows locate the kinematic joints.
    pub joint_regressor: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lowres: Option<LowResData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowResData {
    /// Indices into the full vertex array.
    pub vertices: Vec<usize>,
    /// Triangles indexing into `vertices`.
    pub faces: Vec<[usize; 3]>,
}

/// Reduced mesh used for the interpenetration term.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRes {
    pub vertices: Vec<u32>,
    pub faces: Vec<[u32; 3]>,
}

/// Per-person parameters: joint rotations, shape, global rotation, translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams<T = f64> {
    /// Axis-angle rotation per joint, radians.
    pub theta: Vec<[T; 3]>,
    pub beta: Vec<T>,
    /// Global axis-angle rotation, radians.
    pub phi: [T; 3],
    /// Global translation, meters.
    pub trans: [T; 3],
}

impl PoseParams<f64> {
    pub fn zeros(model: &BodyModel) -> Self {
        Self {
            theta: vec![[0.0; 3]; model.num_joints()],
            beta: vec![0.0; model.num_betas()],
            phi: [0.0; 3],
            trans: [0.0; 3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().flatten().all(|v| v.is_finite())
            && self.beta.iter().all(|v| v.is_finite())
            && self.phi.iter().all(|v| v.is_finite())
            && self.trans.iter().all(|v| v.is_finite())
    }
}

impl<T: Copy> PoseParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> PoseParams<U> {
        PoseParams {
            theta: self.theta.iter().map(|r| [f(r[0]), f(r[1]), f(r[2])]).collect(),
            beta: self.beta.iter().map(|&b| f(b)).collect(),
            phi: [f(self.phi[0]), f(self.phi[1]), f(self.phi[2])],
            trans: [f(self.trans[0]), f(self.trans[1]), f(self.trans[2])],
        }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: [f64; 2],
    pub principal: [f64; 2],
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let cam = Self {
            focal: [fx, fy],
            principal: [cx, cy],
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal[0] > 0.0 && self.focal[1] > 0.0) {
            return Err(invalid(
                "camera focal length",
                format!("fx, fy must be positive, got {:?}", self.focal),
            ));
        }
        if !self.principal.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera principal point"));
        }
        Ok(())
    }
}

/// Output of [`BodyModel::forward`].
#[derive(Debug, Clone)]
pub struct Posed<T> {
    pub vertices: Vec<Vec3<T>>,
    pub joints: Vec<Vec3<T>>,
}

impl<T: Real> Posed<T> {
    pub fn values(&self) -> Posed<f64> {
        Posed {
            vertices: self.vertices.iter().map(math::values).collect(),
            joints: self.joints.iter().map(math::values).collect(),
        }
    }
}

/// Validated, immutable body model.
#[derive(Debug, Clone)]
pub struct BodyModel {
    data: ModelData,
    parents: Vec<Option<usize>>,
    /// Joints ordered so every parent precedes its children.
    order: Vec<usize>,
    weights: Vec<Vec<(u32, f64)>>,
    regressor: Vec<Vec<(u32, f64)>>,
    faces: Vec<[u32; 3]>,
    lowres: Option<LowRes>,
}

impl BodyModel {
    pub fn new(data: ModelData) -> Result<Self> {
        let dv = data.template.len();
        if dv == 0 {
            return Err(invalid("template", "model has no vertices".into()));
        }
        if data.template.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("template"));
        }

        let dt = data.parents.len();
        if dt == 0 {
            return Err(invalid("joint tree", "model has no joints".into()));
        }
        let parents = validate_tree(&data.parents)?;
        let order = topological_order(&parents);

        for (f, face) in data.faces.iter().enumerate() {
            if let Some(&bad) = face.iter().find(|&&i| i >= dv) {
                return Err(invalid(
                    "face indices",
                    format!("face {f} references vertex {bad} but d_v = {dv}"),
                ));
            }
        }
        let faces = data.faces.iter().map(|f| f.map(|i| i as u32)).collect();

        if data.weights.len() != dv {
            return Err(Error::Dimension {
                what: "skinning weights rows",
                expected: dv,
                found: data.weights.len(),
            });
        }
        let mut weights = Vec::with_capacity(dv);
        for (v, row) in data.weights.iter().enumerate() {
            if row.len() != dt {
                return Err(Error::Dimension {
                    what: "skinning weights columns",
                    expected: dt,
                    found: row.len(),
                });
            }
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(invalid(
                    "skinning weights",
                    format!("vertex {v} has a negative or non-finite weight"),
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(invalid(
                    "skinning weights",
                    format!("vertex {v} weights sum to {sum}"),
                ));
            }
            weights.push(sparse(row));
        }

        if data.shape_dirs.len() != dv {
            return Err(Error::Dimension {
                what: "shape_dirs rows",
                expected: dv,
                found: data.shape_dirs.len(),
            });
        }
        let db = data.shape_dirs[0][0].len();
        for dirs in &data.shape_dirs {
            for axis in dirs {
                if axis.len() != db {
                    return Err(Error::Dimension {
                        what: "shape_dirs components",
                        expected: db,
                        found: axis.len(),
                    });
                }
                if axis.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("shape_dirs"));
                }
            }
        }

        let dj = data.joint_regressor.len();
        if dj < dt {
            return Err(invalid(
                "joint regressor",
                format!("{dj} rows cannot locate {dt} kinematic joints"),
            ));
        }
        let mut regressor = Vec::with_capacity(dj);
        for (j, row) in data.joint_regressor.iter().enumerate() {
            if row.len() != dv {
                return Err(Error::Dimension {
                    what: "joint regressor columns",
                    expected: dv,
                    found: row.len(),
                });
            }
            let sum: f64 = row.iter().sum();
            if !sum.is_finite() || (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(invalid(
                    "joint regressor",
                    format!("row {j} sums to {sum}"),
                ));
            }
            regressor.push(sparse(row));
        }

        let lowres = match &data.lowres {
            None => None,
            Some(lr) => Some(validate_lowres(lr, dv)?),
        };

        Ok(Self {
            data,
            parents,
            order,
            weights,
            regressor,
            faces,
            lowres,
        })
    }

    pub fn data(&self) -> &ModelData {
        &self.data
    }

    pub fn num_vertices(&self) -> usize {
        self.data.template.len()
    }

    /// `d_theta`.
    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    /// `d_j`, the number of regressed output joints.
    pub fn num_output_joints(&self) -> usize {
        self.regressor.len()
    }

    pub fn num_betas(&self) -> usize {
        self.data.shape_dirs[0][0].len()
    }

    pub fn template(&self) -> &[[f64; 3]] {
        &self.data.template
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    /// Low-resolution mesh, or the full mesh when the model has none.
    pub fn collision_mesh(&self) -> LowRes {
        match &self.lowres {
            Some(lr) => lr.clone(),
            None => LowRes {
                vertices: (0..self.num_vertices() as u32).collect(),
                faces: self.faces.clone(),
            },
        }
    }

    pub fn check_params<T>(&self, params: &PoseParams<T>) -> Result<()> {
        if params.theta.len() != self.num_joints() {
            return Err(Error::Dimension {
                what: "theta",
                expected: self.num_joints(),
                found: params.theta.len(),
            });
        }
        if params.beta.len() != self.num_betas() {
            return Err(Error::Dimension {
                what: "beta",
                expected: self.num_betas(),
                found: params.beta.len(),
            });
        }
        Ok(())
    }

    /// Maps parameters to posed vertices and regressed joints.
    ///
    /// Shape blendshapes are applied to the template, kinematic joints are
    /// regressed from the shaped rest mesh, per-joint rigid transforms are
    /// chained along the tree and blended per vertex, and finally the global
    /// rotation `phi` (about the origin) and translation are applied.
    pub fn forward<T: Real>(&self, params: &PoseParams<T>) -> Result<Posed<T>> {
        self.check_params(params)?;
        let seed = params.trans[0];
        let dt = self.num_joints();

        let shaped: Vec<Vec3<T>> = self
            .data
            .template
            .iter()
            .zip(&self.data.shape_dirs)
            .map(|(t, dirs)| {
                let mut v = [seed.lift(t[0]), seed.lift(t[1]), seed.lift(t[2])];
                for (b, &beta) in params.beta.iter().enumerate() {
                    for axis in 0..3 {
                        let d = dirs[axis][b];
                        if d != 0.0 {
                            v[axis] += beta * d;
                        }
                    }
                }
                v
            })
            .collect();

        let rest_joints: Vec<Vec3<T>> = self.regressor[..dt]
            .iter()
            .map(|row| regress(row, &shaped, seed))
            .collect();

        // World transform of each joint: rotation and joint position.
        let mut rot: Vec<Option<Mat3<T>>> = vec![None; dt];
        let mut pos: Vec<Option<Vec3<T>>> = vec![None; dt];
        for &j in &self.order {
            let local = math::rodrigues(params.theta[j]);
            match self.parents[j] {
                None => {
                    rot[j] = Some(local);
                    pos[j] = Some(rest_joints[j]);
                }
                Some(p) => {
                    let prot = rot[p].expect("parent precedes child");
                    let ppos = pos[p].expect("parent precedes child");
                    let offset = math::sub(rest_joints[j], rest_joints[p]);
                    rot[j] = Some(math::mat_mul(&prot, &local));
                    pos[j] = Some(math::add(math::mat_vec(&prot, offset), ppos));
                }
            }
        }
        // Skinning transform x -> R (x - J_rest) + J_world = R x + (J_world - R J_rest).
        let skin: Vec<(Mat3<T>, Vec3<T>)> = (0..dt)
            .map(|j| {
                let r = rot[j].expect("all joints visited");
                let t = math::sub(
                    pos[j].expect("all joints visited"),
                    math::mat_vec(&r, rest_joints[j]),
                );
                (r, t)
            })
            .collect();

        let global_rot = math::rodrigues(params.phi);
        let vertices: Vec<Vec3<T>> = shaped
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| {
                let posed = if w.len() == 1 {
                    let (r, t) = &skin[w[0].0 as usize];
                    math::add(math::mat_vec(r, *v), *t)
                } else {
                    let z = seed.zero_like();
                    let mut m = [[z; 3]; 3];
                    let mut t = [z; 3];
                    for &(j, wt) in w {
                        let (rj, tj) = &skin[j as usize];
                        for a in 0..3 {
                            for b in 0..3 {
                                m[a][b] += rj[a][b] * wt;
                            }
                            t[a] += tj[a] * wt;
                        }
                    }
                    math::add(math::mat_vec(&m, *v), t)
                };
                math::add(math::mat_vec(&global_rot, posed), params.trans)
            })
            .collect();

        let joints = self
            .regressor
            .iter()
            .map(|row| regress(row, &vertices, seed))
            .collect();
        Ok(Posed { vertices, joints })
    }
}

fn regress<T: Real>(row: &[(u32, f64)], points: &[Vec3<T>], seed: T) -> Vec3<T> {
    let z = seed.zero_like();
    let mut acc = [z; 3];
    for &(i, w) in row {
        let p = points[i as usize];
        for a in 0..3 {
            acc[a] += p[a] * w;
        }
    }
    acc
}

fn sparse(row: &[f64]) -> Vec<(u32, f64)> {
    row.iter()
        .enumerate()
        .filter(|(_, w)| **w != 0.0)
        .map(|(i, w)| (i as u32, *w))
        .collect()
}

fn validate_tree(raw: &[i64]) -> Result<Vec<Option<usize>>> {
    let n = raw.len();
    let mut parents = Vec::with_capacity(n);
    let mut roots = 0;
    for (j, &p) in raw.iter().enumerate() {
        if p < 0 {
            roots += 1;
            parents.push(None);
        } else if (p as usize) < n && p as usize != j {
            parents.push(Some(p as usize));
        } else {
            return Err(invalid(
                "joint tree",
                format!("joint {j} has invalid parent {p}"),
            ));
        }
    }
    if roots != 1 {
        return Err(invalid(
            "joint tree",
            format!("expected exactly one root, found {roots}"),
        ));
    }
    for start in 0..n {
        let mut cur = start;
        let mut steps = 0;
        while let Some(p) = parents[cur] {
            cur = p;
            steps += 1;
            if steps > n {
                return Err(invalid(
                    "joint tree",
                    format!("cycle reachable from joint {start}"),
                ));
            }
        }
    }
    Ok(parents)
}

fn topological_order(parents: &[Option<usize>]) -> Vec<usize> {
    let n = parents.len();
    let depth = |mut j: usize| {
        let mut d = 0;
        while let Some(p) = parents[j] {
            j = p;
            d += 1;
        }
        d
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&j| (depth(j), j));
    order
}

fn validate_lowres(lr: &LowResData, dv: usize) -> Result<LowRes> {
    let mut seen = vec![false; dv];
    for &v in &lr.vertices {
        if v >= dv {
            return Err(invalid(
                "lowres vertices",
                format!("index {v} out of range for d_v = {dv}"),
            ));
        }
        if seen[v] {
            return Err(invalid("lowres vertices", format!("duplicate index {v}")));
        }
        seen[v] = true;
    }
    let n = lr.vertices.len();
    for face in &lr.faces {
        if face.iter().any(|&i| i >= n) {
            return Err(invalid(
                "lowres faces",
                format!("face {face:?} out of range for {n} low-res vertices"),
            ));
        }
    }
    Ok(LowRes {
        vertices: lr.vertices.iter().map(|&v| v as u32).collect(),
        faces: lr.faces.iter().map(|f| f.map(|i| i as u32)).collect(),
    })
}

/// Pinhole projection `u = fx x / z + cx`, `v = fy y / z + cy`.
pub fn project<T: Real>(joints: &[Vec3<T>], camera: &Camera) -> Result<Vec<[T; 2]>> {
    joints
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let z = p[2];
            if !(z.value() > 0.0) {
                return Err(Error::Projection {
                    joint: j,
                    z: z.value(),
                });
            }
            Ok([
                p[0] / z * camera.focal[0] + camera.principal[0],
                p[1] / z * camera.focal[1] + camera.principal[1],
            ])
        })
        .collect()
}
