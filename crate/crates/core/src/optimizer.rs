//! Two-stage Adam refinement of per-person pose parameters.
//!
//! Stage one moves joint rotations, shape and translation; stage two
//! freezes shape. Global rotation is never optimized.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::body_model::{BodyModel, Camera, LowRes, PoseParams};
use crate::error::{invalid, Error, Result};
use crate::geometry::subsample_region;
use crate::losses::{self, GmmPrior, Keypoints2D, LossWeights, RegionSamples};
use crate::math::Vec3;
use crate::parser::ConstraintSet;
use crate::regions::RegionRegistry;
use crate::Mode;

/// Consecutive small-change steps required to stop a stage early.
pub const PATIENCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Lmm,
    Gmm,
    Shape,
    InitPose,
    Keypoints,
    Interpenetration,
    Heuristic,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::Lmm => "lmm",
            Term::Gmm => "gmm",
            Term::Shape => "shape",
            Term::InitPose => "init_pose",
            Term::Keypoints => "keypoints",
            Term::Interpenetration => "interpenetration",
            Term::Heuristic => "heuristic",
        }
    }
}

/// What replaces the contact term when too many samples were empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackoffMode {
    /// Pull the two meshes together by their closest vertices.
    Heuristic,
    /// Auxiliary terms only.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub max_steps_per_stage: usize,
    pub weights: LossWeights,
    pub mode: Mode,
    pub backoff: BackoffMode,
    pub seed: u64,
    pub convergence_tol: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Vertices sampled per coarse region for contact distances.
    pub sample_cap: usize,
    /// Vertices sampled per mesh for the closest-mesh baseline.
    pub heuristic_sample_cap: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::for_mode(Mode::TwoPerson)
    }
}

impl OptimizerConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            learning_rate: 0.01,
            max_steps_per_stage: 1000,
            weights: LossWeights::for_mode(mode),
            mode,
            backoff: match mode {
                Mode::TwoPerson => BackoffMode::Heuristic,
                Mode::OnePerson => BackoffMode::Plain,
            },
            seed: 0,
            convergence_tol: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            sample_cap: 128,
            heuristic_sample_cap: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid(
                "optimizer config",
                format!("learning_rate must be positive, got {}", self.learning_rate),
            ));
        }
        if self.max_steps_per_stage == 0 {
            return Err(invalid(
                "optimizer config",
                "max_steps_per_stage must be at least 1".into(),
            ));
        }
        if self.sample_cap == 0 || self.heuristic_sample_cap == 0 {
            return Err(invalid(
                "optimizer config",
                "sample caps must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid(
                "optimizer config",
                "Adam moment decays must lie in [0, 1)".into(),
            ));
        }
        if !(self.convergence_tol >= 0.0) || !(self.epsilon > 0.0) {
            return Err(invalid(
                "optimizer config",
                "convergence_tol must be >= 0 and epsilon > 0".into(),
            ));
        }
        self.weights.validate()
    }
}

/// Weighted terms of the objective for a run.
///
/// Two people get the contact term plus every auxiliary term. One person
/// loses the pose prior and gets twice the initial-pose weight. After a
/// backoff the contact term is dropped; two people may then use the
/// closest-mesh baseline instead.
pub fn select_objective(
    mode: Mode,
    backoff_fired: bool,
    weights: &LossWeights,
    backoff: BackoffMode,
) -> Vec<(Term, f64)> {
    let mut terms = Vec::new();
    if !backoff_fired {
        terms.push((Term::Lmm, weights.lambda_lmm));
    }
    match mode {
        Mode::TwoPerson => {
            terms.push((Term::Gmm, weights.lambda_gmm));
            terms.push((Term::Shape, weights.lambda_beta));
            terms.push((Term::InitPose, weights.lambda_theta));
        }
        Mode::OnePerson => {
            terms.push((Term::Shape, weights.lambda_beta));
            terms.push((Term::InitPose, 2.0 * weights.lambda_theta));
        }
    }
    terms.push((Term::Keypoints, weights.lambda_2d));
    terms.push((Term::Interpenetration, weights.lambda_p));
    if backoff_fired && mode == Mode::TwoPerson && backoff == BackoffMode::Heuristic {
        terms.push((Term::Heuristic, weights.lambda_heuristic));
    }
    terms
}

/// Gradient of a taped scalar function at `at`. Fails on a non-finite value.
pub fn gradient<F>(objective: F, at: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = at.iter().map(|&v| tape.var(v)).collect();
    let out = objective(&vars)?;
    if !out.value().is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    let grads = tape.gradient(out);
    Ok((out.value(), vars.iter().map(|v| grads.wrt(*v)).collect()))
}

/// Which parameter blocks a stage moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Active {
    pub theta: bool,
    pub beta: bool,
    pub trans: bool,
}

/// Flat parameter vector layout: per person `theta`, then `beta`, then `trans`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub persons: usize,
    pub joints: usize,
    pub betas: usize,
}

impl ParamLayout {
    pub fn per_person(&self) -> usize {
        self.joints * 3 + self.betas + 3
    }

    pub fn len(&self) -> usize {
        self.persons * self.per_person()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self, params: &[PoseParams]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        for p in params.iter().take(self.persons) {
            x.extend(p.theta.iter().flatten());
            x.extend(&p.beta);
            x.extend(p.trans);
        }
        x
    }

    /// Rebuilds per-person parameters; `phi` comes from `fixed`.
    pub fn unflatten<T: Real>(&self, x: &[T], fixed: &[PoseParams]) -> Vec<PoseParams<T>> {
        let n = self.per_person();
        (0..self.persons)
            .map(|p| {
                let chunk = &x[p * n..(p + 1) * n];
                let theta = (0..self.joints)
                    .map(|j| [chunk[3 * j], chunk[3 * j + 1], chunk[3 * j + 2]])
                    .collect();
                let b0 = self.joints * 3;
                let beta = chunk[b0..b0 + self.betas].to_vec();
                let t0 = b0 + self.betas;
                let seed = chunk[0];
                PoseParams {
                    theta,
                    beta,
                    phi: fixed[p].phi.map(|v| seed.lift(v)),
                    trans: [chunk[t0], chunk[t0 + 1], chunk[t0 + 2]],
                }
            })
            .collect()
    }

    pub fn mask(&self, active: Active) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.len());
        for _ in 0..self.persons {
            m.extend(core::iter::repeat(active.theta).take(self.joints * 3));
            m.extend(core::iter::repeat(active.beta).take(self.betas));
            m.extend(core::iter::repeat(active.trans).take(3));
        }
        m
    }
}

/// Everything the objective needs besides the parameters being optimized.
pub struct Problem<'a> {
    pub model: &'a BodyModel,
    pub registry: &'a RegionRegistry,
    pub prior: Option<&'a GmmPrior>,
    pub camera: &'a Camera,
    /// Initial parameters, one per person.
    pub init: &'a [PoseParams],
    pub keypoints: &'a [Keypoints2D],
    /// Constraint sets after frequency filtering.
    pub sets: &'a [ConstraintSet],
    pub mode: Mode,
}

/// Objective evaluation bound to a problem, a term list and fixed samples.
pub struct Objective<'a> {
    problem: &'a Problem<'a>,
    terms: Vec<(Term, f64)>,
    layout: ParamLayout,
    samples: RegionSamples,
    collision: LowRes,
    mesh_sample: Vec<u32>,
}

/// Value of every term at one point plus the discrete choices made.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub total: f64,
    pub terms: Vec<(Term, f64)>,
    pub fingerprint: Vec<u32>,
}

impl<'a> Objective<'a> {
    pub fn new(problem: &'a Problem<'a>, terms: Vec<(Term, f64)>, config: &OptimizerConfig) -> Result<Self> {
        let persons = problem.mode.num_persons();
        if problem.init.len() != persons {
            return Err(invalid(
                "scene",
                format!(
                    "{:?} mode needs {persons} person(s), scene has {}",
                    problem.mode,
                    problem.init.len()
                ),
            ));
        }
        if problem.keypoints.len() != persons {
            return Err(Error::Dimension {
                what: "keypoint sets",
                expected: persons,
                found: problem.keypoints.len(),
            });
        }
        for (p, kp) in problem.init.iter().zip(problem.keypoints) {
            problem.model.check_params(p)?;
            if !p.is_finite() {
                return Err(Error::NonFinite("initial parameters"));
            }
            kp.validate(problem.model.num_output_joints())?;
        }
        if terms.iter().any(|(t, w)| *t == Term::Gmm && *w != 0.0) {
            let prior = problem.prior.ok_or_else(|| {
                invalid("pose prior", "objective uses the prior but none was given".into())
            })?;
            if prior.dim() != problem.model.num_joints() * 3 {
                return Err(Error::Dimension {
                    what: "pose prior",
                    expected: problem.model.num_joints() * 3,
                    found: prior.dim(),
                });
            }
        }
        let all: Vec<u32> = (0..problem.model.num_vertices() as u32).collect();
        Ok(Self {
            problem,
            terms,
            layout: ParamLayout {
                persons,
                joints: problem.model.num_joints(),
                betas: problem.model.num_betas(),
            },
            samples: RegionSamples::new(problem.registry, config.sample_cap, config.seed),
            collision: problem.model.collision_mesh(),
            mesh_sample: subsample_region(&all, config.heuristic_sample_cap, config.seed).indices,
        })
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn terms(&self) -> &[(Term, f64)] {
        &self.terms
    }

    /// Weighted total and per-term (unweighted) values at `x`.
    pub fn evaluate<T: Real>(&self, x: &[T]) -> Result<(T, Evaluation)> {
        let pb = self.problem;
        let params = self.layout.unflatten(x, pb.init);
        let mut posed = Vec::with_capacity(params.len());
        for p in &params {
            posed.push(pb.model.forward(p)?);
        }
        let refs: Vec<&PoseParams<T>> = params.iter().collect();
        let init: Vec<&PoseParams> = pb.init.iter().collect();
        let verts = |p: usize| posed[p.min(posed.len() - 1)].vertices.as_slice();

        let mut total = x[0].zero_like();
        let mut values = Vec::with_capacity(self.terms.len());
        let mut fingerprint = Vec::new();
        for &(term, weight) in &self.terms {
            if weight == 0.0 {
                values.push((term, 0.0));
                continue;
            }
            let v: T = match term {
                Term::Lmm => {
                    let (v, fp) =
                        losses::lmm_loss(pb.registry, &self.samples, [verts(0), verts(1)], pb.sets, pb.mode);
                    fingerprint.extend(fp);
                    v
                }
                Term::Gmm => losses::gmm_prior_loss(&refs, pb.prior.expect("checked in new"))?,
                Term::Shape => losses::shape_loss(&refs),
                Term::InitPose => losses::init_pose_loss(&refs, &init),
                Term::Keypoints => {
                    let joints: Vec<&[Vec3<T>]> = posed.iter().map(|p| p.joints.as_slice()).collect();
                    losses::keypoint_loss(&joints, pb.camera, pb.keypoints)?
                }
                Term::Interpenetration => {
                    if posed.len() < 2 {
                        x[0].zero_like()
                    } else {
                        let (v, fp) = losses::interpenetration_loss(verts(0), verts(1), &self.collision);
                        fingerprint.extend(fp);
                        v
                    }
                }
                Term::Heuristic => {
                    if posed.len() < 2 {
                        x[0].zero_like()
                    } else {
                        let (v, fp) = losses::heuristic_contact_loss(verts(0), verts(1), &self.mesh_sample);
                        fingerprint.extend(fp);
                        v
                    }
                }
            };
            values.push((term, v.value()));
            total += v * weight;
        }
        let value = total.value();
        Ok((
            total,
            Evaluation {
                total: value,
                terms: values,
                fingerprint,
            },
        ))
    }

    /// Value, gradient and term breakdown at `x`.
    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(Evaluation, Vec<f64>)> {
        let tape = Tape::with_capacity(1 << 16);
        let vars: Vec<Var<'_>> = x.iter().map(|&v| tape.var(v)).collect();
        let (out, eval) = self.evaluate(&vars)?;
        if !eval.total.is_finite() {
            return Ok((eval, vec![f64::NAN; x.len()]));
        }
        let grads = tape.gradient(out);
        Ok((eval, vars.iter().map(|v| grads.wrt(*v)).collect()))
    }
}

/// Per-stage loss traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub steps: usize,
    pub converged: bool,
    /// Weighted total at every step, before that step's update.
    pub total: Vec<f64>,
    /// Unweighted value of each term at every step.
    pub terms: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub stages: Vec<StageReport>,
    pub final_params: Vec<PoseParams>,
    pub backoff: bool,
    /// Objective terms and their weights.
    pub objective: Vec<(Term, f64)>,
    pub warnings: Vec<String>,
    /// `(stage, step)` at which the loss became non-finite, if it did.
    pub diverged: Option<(usize, usize)>,
}

impl OptimizationReport {
    pub fn has_term(&self, term: Term) -> bool {
        self.objective.iter().any(|(t, _)| *t == term)
    }
}

/// Adam moments for a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, config: &OptimizerConfig) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.epsilon,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One update of the entries where `mask` is true.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64], mask: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..x.len() {
            if !mask[i] {
                continue;
            }
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            x[i] -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
        }
    }
}

/// Runs one stage in place. Returns the step at which evaluation failed,
/// in which case `x` holds the last parameters that evaluated cleanly.
/// Failures at the very first evaluation of a run (`strict`) are errors.
fn run_stage(
    objective: &Objective<'_>,
    x: &mut [f64],
    active: Active,
    config: &OptimizerConfig,
    strict: bool,
) -> Result<(StageReport, Option<usize>)> {
    let mask = objective.layout().mask(active);
    let mut adam = Adam::new(x.len(), config);
    let mut report = StageReport {
        steps: 0,
        converged: false,
        total: Vec::new(),
        terms: objective
            .terms()
            .iter()
            .map(|(t, _)| (t.name().to_string(), Vec::new()))
            .collect(),
    };
    let mut calm = 0;
    let mut previous: Option<f64> = None;
    let mut last_good = x.to_vec();
    for step in 0..config.max_steps_per_stage {
        let evaluated = objective.value_and_gradient(x);
        let ok = match evaluated {
            Ok((eval, grad)) if eval.total.is_finite() && grad.iter().all(|g| g.is_finite()) => {
                Some((eval, grad))
            }
            Err(e) if strict && step == 0 => return Err(e),
            _ => None,
        };
        let Some((eval, grad)) = ok else {
            if strict && step == 0 {
                return Err(Error::NonFinite("initial objective"));
            }
            x.copy_from_slice(&last_good);
            return Ok((report, Some(step)));
        };
        last_good.copy_from_slice(x);
        report.total.push(eval.total);
        for (term, v) in &eval.terms {
            if let Some(trace) = report.terms.get_mut(term.name()) {
                trace.push(*v);
            }
        }
        if let Some(prev) = previous {
            if (prev - eval.total).abs() < config.convergence_tol {
                calm += 1;
            } else {
                calm = 0;
            }
        }
        previous = Some(eval.total);
        report.steps = step + 1;
        if calm >= PATIENCE {
            report.converged = true;
            break;
        }
        adam.step(x, &grad, &mask);
    }
    Ok((report, None))
}

/// Runs both stages from the problem's initial parameters.
///
/// A non-finite loss stops the run; the report then carries the traces so
/// far, the last finite parameters and `diverged`.
pub fn run_two_stage(
    problem: &Problem<'_>,
    config: &OptimizerConfig,
    backoff_fired: bool,
) -> Result<OptimizationReport> {
    config.validate()?;
    if config.mode != problem.mode {
        return Err(invalid(
            "optimizer config",
            format!("config mode {:?} differs from scene mode {:?}", config.mode, problem.mode),
        ));
    }
    let terms = select_objective(problem.mode, backoff_fired, &config.weights, config.backoff);
    let objective = Objective::new(problem, terms.clone(), config)?;
    let layout = objective.layout();
    let mut x = layout.flatten(problem.init);

    let mut report = OptimizationReport {
        stages: Vec::new(),
        final_params: Vec::new(),
        backoff: backoff_fired,
        objective: terms,
        warnings: Vec::new(),
        diverged: None,
    };
    let stages = [
        Active {
            theta: true,
            beta: true,
            trans: true,
        },
        Active {
            theta: true,
            beta: false,
            trans: true,
        },
    ];
    for (s, active) in stages.into_iter().enumerate() {
        let (stage, failed) = run_stage(&objective, &mut x, active, config, s == 0)?;
        report.stages.push(stage);
        if let Some(step) = failed {
            report.diverged = Some((s, step));
            report
                .warnings
                .push(format!("stage {} diverged at step {step}", s + 1));
            break;
        }
    }
    report.final_params = layout.unflatten(&x, problem.init);
    if report.final_params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("final parameters"));
    }
    Ok(report)
}
