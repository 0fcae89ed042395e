//! parse -> aggregate -> backoff decision -> two-stage fit -> metrics, and
//! the output directory.
//!
//! Output layout, under `<out>/<scene-id>/`:
//! `params.json`, `person0.obj` (and `person1.obj`), `constraints.json`,
//! `report.json`, `metrics.json` (with ground truth), `warnings.log`, and
//! `FAILED` when the run did not finish cleanly.

use std::fs;
use std::path::{Path, PathBuf};

use contactfit_core::body_model::PoseParams;
use contactfit_core::math::Vec3;
use contactfit_core::metrics::{pa_mpjpe, pcc, AlignMode, MetricsReport, PCC_RADII_MM};
use contactfit_core::optimizer::{run_two_stage, OptimizerConfig, Problem, StageReport, Term};
use contactfit_core::parser::{aggregate, parse_response, should_backoff, CanonicalSet, ConstraintSet, RawResponse};
use contactfit_core::Mode;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::assets::Bundle;
use crate::error::{AppError, Result};
use crate::gateway::{CacheMode, Gateway, PromptTemplate, QuerySpec};
use crate::scene::{GroundTruth, ResponsesRef, Scene};

pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub optimizer: OptimizerConfig,
    /// A constraint survives if at least this many samples contain it.
    pub min_count: usize,
    /// Back off when at least this many samples are empty; unset means
    /// the number of samples.
    pub empty_threshold: Option<usize>,
    pub template: PromptTemplate,
    pub pcc_radii_mm: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::for_mode(Mode::TwoPerson)
    }
}

impl PipelineConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            optimizer: OptimizerConfig::for_mode(mode),
            min_count: match mode {
                Mode::TwoPerson => 1,
                Mode::OnePerson => 10,
            },
            empty_threshold: None,
            template: PromptTemplate::for_mode(mode),
            pcc_radii_mm: PCC_RADII_MM.to_vec(),
        }
    }

    /// Mode defaults overlaid with a partial JSON document.
    pub fn from_overrides(mode: Mode, overrides: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::for_mode(mode)).expect("serializable config");
        merge(&mut base, overrides);
        serde_json::from_value(base).map_err(|e| AppError::Validation(format!("config: {e}")))
    }

    pub fn load(mode: Mode, path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::for_mode(mode)),
            Some(p) => Self::from_overrides(mode, &crate::io::read_json::<Value>(p)?),
        }
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Where responses come from when the scene does not carry them.
#[derive(Debug, Clone)]
pub struct GatewayOptions {
    pub cache_dir: PathBuf,
    pub mode: CacheMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub scene_id: String,
    pub mode: Mode,
    pub num_samples: usize,
    pub empty_count: usize,
    pub empty_threshold: usize,
    pub min_count: usize,
    pub backoff: bool,
    pub objective: Vec<ObjectiveTerm>,
    pub stages: Vec<StageReport>,
    pub diverged: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerm {
    pub term: Term,
    pub weight: f64,
}

impl PipelineReport {
    pub fn has_term(&self, term: Term) -> bool {
        self.objective.iter().any(|t| t.term == term)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub params: Vec<PoseParams>,
    pub vertices: Vec<Vec<Vec3>>,
    pub constraints: Vec<CanonicalSet>,
    pub report: PipelineReport,
    pub metrics: Option<MetricsReport>,
    pub warnings: Vec<String>,
}

/// Responses from the scene, or through the gateway for its image.
pub fn acquire_responses(scene: &Scene, config: &PipelineConfig, gateway: Option<&GatewayOptions>) -> Result<Vec<RawResponse>> {
    match &scene.responses {
        Some(ResponsesRef::Path(p)) => crate::gateway::load_responses(p),
        Some(ResponsesRef::Inline(r)) => Ok(r.clone()),
        Some(ResponsesRef::Sets(_)) => Ok(Vec::new()),
        None => {
            let img = scene.image.as_ref().ok_or_else(|| {
                AppError::Validation("scene has neither responses nor an image to query".into())
            })?;
            let opts = gateway.ok_or_else(|| {
                AppError::Validation("scene needs a response cache (--cache) to query its image".into())
            })?;
            let bytes = fs::read(&img.path).map_err(|e| AppError::io(&img.path, e))?;
            let spec = QuerySpec::new(&bytes, img.crop, config.template.clone())?;
            Gateway::from_env(&opts.cache_dir, opts.mode).sample(&spec)
        }
    }
}

/// Parses every response and collects per-sample warnings.
pub fn parse_all(responses: &[RawResponse], bundle: &Bundle, mode: Mode) -> (Vec<ConstraintSet>, Vec<String>) {
    let mut warnings = Vec::new();
    let sets: Vec<ConstraintSet> = responses
        .iter()
        .map(|r| {
            let set = parse_response(r, &bundle.registry, mode);
            warnings.extend(set.warnings.iter().map(|w| format!("sample {}: {w}", r.sample_index)));
            set
        })
        .collect();
    (sets, warnings)
}

pub fn evaluate(
    bundle: &Bundle,
    mode: Mode,
    params: &[PoseParams],
    gt: &GroundTruth,
    radii_mm: &[f64],
) -> Result<MetricsReport> {
    let mut joints = Vec::new();
    let mut verts = Vec::new();
    for p in params {
        let posed = bundle.model.forward(p)?;
        joints.push(posed.joints);
        verts.push(posed.vertices);
    }
    let pred: Vec<&[Vec3]> = joints.iter().map(|j| j.as_slice()).collect();
    let truth: Vec<&[Vec3]> = gt.joints.iter().map(|j| j.as_slice()).collect();
    let meshes = match mode {
        Mode::TwoPerson => [verts[0].as_slice(), verts[1].as_slice()],
        Mode::OnePerson => [verts[0].as_slice(), verts[0].as_slice()],
    };
    let (scores, avg) = pcc(meshes, &gt.contact_map, &bundle.registry, radii_mm)?;
    Ok(MetricsReport {
        pa_mpjpe_per_person: pa_mpjpe(&pred, &truth, AlignMode::PerPerson)?,
        pa_mpjpe_joint: pa_mpjpe(&pred, &truth, AlignMode::Joint)?,
        pcc_at_radius: scores,
        pcc_avg: avg,
    })
}

/// Runs the whole chain on an already validated scene.
pub fn run_pipeline(
    scene: &Scene,
    bundle: &Bundle,
    config: &PipelineConfig,
    responses: &[RawResponse],
) -> Result<PipelineOutput> {
    scene.validate(&bundle.model)?;
    let mode = scene.mode;
    let (sets, mut warnings) = match &scene.responses {
        Some(ResponsesRef::Sets(canon)) => {
            let sets = canon
                .iter()
                .map(|c| ConstraintSet::from_canonical(c, &bundle.registry))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            (sets, Vec::new())
        }
        _ => parse_all(responses, bundle, mode),
    };
    let (filtered, empty_count) = aggregate(&sets, config.min_count);
    let threshold = config.empty_threshold.unwrap_or(sets.len());
    let backoff = should_backoff(empty_count, threshold);

    let problem = Problem {
        model: &bundle.model,
        registry: &bundle.registry,
        prior: Some(&bundle.prior),
        camera: &scene.camera,
        init: &scene.persons,
        keypoints: &scene.keypoints,
        sets: &filtered,
        mode,
    };
    let mut opt = config.optimizer.clone();
    opt.mode = mode;
    let result = run_two_stage(&problem, &opt, backoff)?;
    warnings.extend(result.warnings.iter().cloned());

    let vertices = result
        .final_params
        .iter()
        .map(|p| bundle.model.forward(p).map(|f| f.vertices))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let metrics = match &scene.gt {
        Some(gt) => Some(evaluate(bundle, mode, &result.final_params, gt, &config.pcc_radii_mm)?),
        None => None,
    };
    let report = PipelineReport {
        scene_id: scene.id.clone(),
        mode,
        num_samples: sets.len(),
        empty_count,
        empty_threshold: threshold,
        min_count: config.min_count,
        backoff,
        objective: result
            .objective
            .iter()
            .map(|(term, weight)| ObjectiveTerm { term: *term, weight: *weight })
            .collect(),
        stages: result.stages,
        diverged: result.diverged,
    };
    Ok(PipelineOutput {
        params: result.final_params,
        vertices,
        constraints: filtered.iter().map(|s| s.canonical(&bundle.registry)).collect(),
        report,
        metrics,
        warnings,
    })
}

pub fn write_outputs(dir: &Path, out: &PipelineOutput, bundle: &Bundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let marker = dir.join(FAILURE_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| AppError::io(&marker, e))?;
    }
    crate::io::write_json(&dir.join("params.json"), &out.params)?;
    for (i, v) in out.vertices.iter().enumerate() {
        crate::io::export_obj(v, bundle.model.faces(), &dir.join(format!("person{i}.obj")))?;
    }
    crate::io::write_json(&dir.join("constraints.json"), &out.constraints)?;
    crate::io::write_json(&dir.join("report.json"), &out.report)?;
    if let Some(m) = &out.metrics {
        crate::io::write_json(&dir.join("metrics.json"), m)?;
    }
    let mut log = out.warnings.join("\n");
    if !log.is_empty() {
        log.push('\n');
    }
    crate::io::write_text(&dir.join("warnings.log"), &log)?;
    if let Some((stage, step)) = out.report.diverged {
        write_failure(dir, &AppError::Diverged { stage: stage + 1, step })?;
    }
    Ok(())
}

pub fn write_failure(dir: &Path, err: &AppError) -> Result<()> {
    crate::io::write_text(&dir.join(FAILURE_MARKER), &format!("{err}\n"))
}

/// Runs one scene file end to end and writes its directory under `out_root`.
/// Any failure after the directory exists leaves a `FAILED` marker.
pub fn run_scene_file(
    scene_path: &Path,
    bundle: &Bundle,
    config_path: Option<&Path>,
    gateway: Option<&GatewayOptions>,
    out_root: &Path,
) -> Result<PipelineOutput> {
    let scene = Scene::load(scene_path)?;
    scene.validate(&bundle.model)?;
    let config = PipelineConfig::load(scene.mode, config_path)?;
    let dir = out_root.join(&scene.id);
    fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
    let result = acquire_responses(&scene, &config, gateway)
        .and_then(|responses| run_pipeline(&scene, bundle, &config, &responses));
    match result {
        Ok(out) => {
            write_outputs(&dir, &out, bundle)?;
            if let Some((stage, step)) = out.report.diverged {
                return Err(AppError::Diverged { stage: stage + 1, step });
            }
            Ok(out)
        }
        Err(e) => {
            write_failure(&dir, &e)?;
            Err(e)
        }
    }
}
