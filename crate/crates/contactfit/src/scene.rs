//! Scene files: initial parameters, camera, detections, where the model
//! responses come from, and optional ground truth.

use std::path::{Path, PathBuf};

use contactfit_core::body_model::{BodyModel, Camera, PoseParams};
use contactfit_core::losses::Keypoints2D;
use contactfit_core::math::Vec3;
use contactfit_core::metrics::ContactMap;
use contactfit_core::parser::{CanonicalSet, RawResponse};
use contactfit_core::Mode;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::gateway::Rect;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<Rect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponsesRef {
    /// JSON list of responses, or a directory of `sample_<i>.txt` files.
    Path(PathBuf),
    Inline(Vec<RawResponse>),
    /// Already parsed constraint sets, in canonical form.
    Sets(Vec<CanonicalSet>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    /// Per person, one entry per model output joint.
    pub joints: Vec<Vec<Vec3>>,
    #[serde(default)]
    pub contact_map: ContactMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<PoseParams>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub id: String,
    pub mode: Mode,
    pub persons: Vec<PoseParams>,
    pub camera: Camera,
    pub keypoints: Vec<Keypoints2D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses: Option<ResponsesRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<GroundTruth>,
}

impl Scene {
    /// Reads a scene and makes its relative paths relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut scene: Scene = crate::io::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(img) = &mut scene.image {
            img.path = base.join(&img.path);
        }
        if let Some(ResponsesRef::Path(p)) = &mut scene.responses {
            *p = base.join(&*p);
        }
        Ok(scene)
    }

    pub fn validate(&self, model: &BodyModel) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) || self.id == "." || self.id == ".." {
            return Err(AppError::Validation(format!(
                "scene id {:?} is not usable as a directory name",
                self.id
            )));
        }
        let n = self.mode.num_persons();
        if self.persons.len() != n {
            return Err(AppError::Validation(format!(
                "{:?} scene needs {n} person(s), found {}",
                self.mode,
                self.persons.len()
            )));
        }
        if self.keypoints.len() != n {
            return Err(AppError::Validation(format!(
                "expected keypoints for {n} person(s), found {}",
                self.keypoints.len()
            )));
        }
        self.camera.validate()?;
        for p in &self.persons {
            model.check_params(p)?;
        }
        for k in &self.keypoints {
            k.validate(model.num_output_joints())?;
        }
        if let Some(gt) = &self.gt {
            if gt.joints.len() != n || gt.joints.iter().any(|j| j.len() != model.num_output_joints()) {
                return Err(AppError::Validation(format!(
                    "ground-truth joints must be {n} x {}",
                    model.num_output_joints()
                )));
            }
            if let Some(params) = &gt.params {
                if params.len() != n {
                    return Err(AppError::Validation("ground-truth params person count".into()));
                }
                for p in params {
                    model.check_params(p)?;
                }
            }
        }
        Ok(())
    }
}
