//! JSON and OBJ files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use contactfit_core::body_model::{BodyModel, ModelData};
use contactfit_core::losses::{GmmData, GmmPrior};
use contactfit_core::math::Vec3;
use contactfit_core::regions::{RegionData, RegionRegistry};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{AppError, Result};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| AppError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<BodyModel> {
    let data: ModelData = read_json(path)?;
    Ok(BodyModel::new(data)?)
}

pub fn load_regions(path: &Path, num_vertices: usize) -> Result<RegionRegistry> {
    let data: RegionData = read_json(path)?;
    Ok(RegionRegistry::new(&data, num_vertices)?)
}

pub fn load_prior(path: &Path) -> Result<GmmPrior> {
    let data: GmmData = read_json(path)?;
    Ok(GmmPrior::new(&data)?)
}

/// Wavefront OBJ text: `v` lines with six decimals, then 1-based `f` lines.
pub fn obj_string(vertices: &[Vec3], faces: &[[u32; 3]]) -> String {
    let mut s = String::new();
    for v in vertices {
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn export_obj(vertices: &[Vec3], faces: &[[u32; 3]], path: &Path) -> Result<()> {
    if let Some(bad) = faces.iter().flatten().find(|i| **i as usize >= vertices.len()) {
        return Err(AppError::Validation(format!(
            "face index {bad} out of range for {} vertices",
            vertices.len()
        )));
    }
    write_text(path, &obj_string(vertices, faces))
}

/// Reads `v` and `f` records back; other records are ignored.
pub fn parse_obj(text: &str) -> Result<(Vec<Vec3>, Vec<[u32; 3]>)> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let bad = || AppError::Validation(format!("OBJ line {}: {line:?}", n + 1));
        match it.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for c in &mut p {
                    *c = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
                }
                verts.push(p);
            }
            Some("f") => {
                let mut f = [0u32; 3];
                for c in &mut f {
                    let tok = it.next().ok_or_else(bad)?;
                    let idx: u32 = tok.split('/').next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
                    *c = idx.checked_sub(1).ok_or_else(bad)?;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    Ok((verts, faces))
}
