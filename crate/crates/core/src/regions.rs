//! Named vertex regions and the body-part vocabulary used to resolve
//! language model output onto them.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::Mode;

/// Coarse part names offered to the model in the two-person prompt.
pub const TWO_PERSON_PARTS: [&str; 14] = [
    "head",
    "neck",
    "chest",
    "stomach",
    "waist (back)",
    "waist (front)",
    "back",
    "shoulder (back)",
    "shoulder (front)",
    "arm",
    "hand",
    "leg",
    "foot",
    "butt",
];

/// Coarse part names offered in the one-person prompt.
pub const ONE_PERSON_PARTS: [&str; 10] = [
    "head", "back", "shoulder", "arm", "hand", "leg", "foot", "stomach", "butt", "ground",
];

/// Extra surface forms recognised in both modes.
pub const ALIASES: [&str; 15] = [
    "left hand",
    "right hand",
    "left arm",
    "right arm",
    "left foot",
    "right foot",
    "left leg",
    "right leg",
    "left shoulder",
    "right shoulder",
    "left shoulder (front)",
    "right shoulder (front)",
    "left shoulder (back)",
    "right shoulder (back)",
    "waist",
];

/// Parts that come in a left and a right variant.
pub const CHIRAL_PARTS: [&str; 7] = [
    "hand",
    "arm",
    "leg",
    "foot",
    "shoulder",
    "shoulder (front)",
    "shoulder (back)",
];

pub const GROUND: &str = "ground";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Chirality {
    Left,
    Right,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub name: String,
    pub chirality: Chirality,
    pub vertices: Vec<u32>,
}

impl Region {
    /// Stable textual key, e.g. `hand/left` or `back`.
    pub fn key(&self) -> String {
        match self.chirality {
            Chirality::Left => format!("{}/left", self.name),
            Chirality::Right => format!("{}/right", self.name),
            Chirality::None => self.name.clone(),
        }
    }

    pub fn is_ground(&self) -> bool {
        self.name == GROUND
    }
}

/// Handle to a coarse region inside a [`RegionRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegionId(pub u32);

/// Coarse entry in a region file: one list, or separate left/right lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoarseEntry {
    Sided { left: Vec<usize>, right: Vec<usize> },
    Plain(Vec<usize>),
}

/// Region file contents.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionData {
    pub coarse: BTreeMap<String, CoarseEntry>,
    pub fine: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct RegionRegistry {
    coarse: Vec<Region>,
    by_name: BTreeMap<String, Vec<RegionId>>,
    fine: Vec<Region>,
    fine_by_name: BTreeMap<String, usize>,
    num_vertices: usize,
}

/// Lowercases, trims, collapses whitespace, strips Markdown emphasis and
/// puts exactly one space before an opening parenthesis.
pub fn normalize_surface(surface: &str) -> String {
    let stripped: String = surface
        .chars()
        .filter(|c| !matches!(c, '*' | '`'))
        .collect::<String>()
        .to_lowercase();
    let spaced = stripped.replace('(', " (").replace("( ", "(").replace(" )", ")");
    let mut out = String::with_capacity(spaced.len());
    for word in spaced.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

fn in_vocabulary(normalized: &str, mode: Mode) -> bool {
    if ALIASES.contains(&normalized) {
        return true;
    }
    match mode {
        // The merged "shoulder" is accepted in the two-person mode as well; it
        // is the natural bare form of the two shoulder halves.
        Mode::TwoPerson => TWO_PERSON_PARTS.contains(&normalized) || normalized == "shoulder",
        Mode::OnePerson => ONE_PERSON_PARTS.contains(&normalized),
    }
}

fn checked_indices(name: &str, raw: &[usize], num_vertices: usize) -> Result<Vec<u32>> {
    if raw.is_empty() {
        return Err(invalid("region", format!("region {name:?} is empty")));
    }
    let mut seen = BTreeSet::new();
    for &i in raw {
        if i >= num_vertices {
            return Err(invalid(
                "region indices",
                format!("region {name:?} has index {i} but d_v = {num_vertices}"),
            ));
        }
        if !seen.insert(i) {
            return Err(invalid(
                "region indices",
                format!("region {name:?} repeats index {i}"),
            ));
        }
    }
    Ok(raw.iter().map(|&i| i as u32).collect())
}

impl RegionRegistry {
    pub fn new(data: &RegionData, num_vertices: usize) -> Result<Self> {
        let mut coarse = Vec::new();
        let mut by_name: BTreeMap<String, Vec<RegionId>> = BTreeMap::new();
        fn push(
            coarse: &mut Vec<Region>,
            by_name: &mut BTreeMap<String, Vec<RegionId>>,
            region: Region,
        ) {
            let id = RegionId(coarse.len() as u32);
            by_name.entry(region.name.clone()).or_default().push(id);
            coarse.push(region);
        }

        for (raw_name, entry) in &data.coarse {
            let name = normalize_surface(raw_name);
            if name == GROUND {
                return Err(invalid(
                    "coarse regions",
                    "\"ground\" is reserved and cannot carry vertices".into(),
                ));
            }
            match entry {
                CoarseEntry::Plain(ix) => push(
                    &mut coarse,
                    &mut by_name,
                    Region {
                        vertices: checked_indices(&name, ix, num_vertices)?,
                        name,
                        chirality: Chirality::None,
                    },
                ),
                CoarseEntry::Sided { left, right } => {
                    let l = checked_indices(&name, left, num_vertices)?;
                    let r = checked_indices(&name, right, num_vertices)?;
                    let lset: BTreeSet<u32> = l.iter().copied().collect();
                    if let Some(shared) = r.iter().find(|i| lset.contains(i)) {
                        return Err(invalid(
                            "chirality variants",
                            format!("left and right {name:?} share vertex {shared}"),
                        ));
                    }
                    push(
                        &mut coarse,
                        &mut by_name,
                        Region {
                            name: name.clone(),
                            chirality: Chirality::Left,
                            vertices: l,
                        },
                    );
                    push(
                        &mut coarse,
                        &mut by_name,
                        Region {
                            name,
                            chirality: Chirality::Right,
                            vertices: r,
                        },
                    );
                }
            }
        }

        for required in TWO_PERSON_PARTS {
            if !by_name.contains_key(required) {
                return Err(invalid(
                    "coarse regions",
                    format!("missing required region {required:?}"),
                ));
            }
        }

        // The merged shoulder is derived from its halves unless given explicitly.
        if !by_name.contains_key("shoulder") {
            for side in [Chirality::Left, Chirality::Right] {
                let mut merged = BTreeSet::new();
                for half in ["shoulder (front)", "shoulder (back)"] {
                    for id in &by_name[half] {
                        let region = &coarse[id.0 as usize];
                        if region.chirality == side || region.chirality == Chirality::None {
                            merged.extend(region.vertices.iter().copied());
                        }
                    }
                }
                push(
                    &mut coarse,
                    &mut by_name,
                    Region {
                        name: "shoulder".into(),
                        chirality: side,
                        vertices: merged.into_iter().collect(),
                    },
                );
            }
        }

        push(
            &mut coarse,
            &mut by_name,
            Region {
                name: GROUND.into(),
                chirality: Chirality::None,
                vertices: Vec::new(),
            },
        );

        let mut fine = Vec::with_capacity(data.fine.len());
        let mut fine_by_name = BTreeMap::new();
        for (name, ix) in &data.fine {
            let vertices = checked_indices(name, ix, num_vertices)?;
            fine_by_name.insert(name.clone(), fine.len());
            fine.push(Region {
                name: name.clone(),
                chirality: Chirality::None,
                vertices,
            });
        }
        if fine.is_empty() {
            return Err(invalid("fine regions", "no fine regions defined".into()));
        }

        Ok(Self {
            coarse,
            by_name,
            fine,
            fine_by_name,
            num_vertices,
        })
    }

    pub fn region(&self, id: RegionId) -> &Region {
        &self.coarse[id.0 as usize]
    }

    /// Every coarse variant, indexed by `RegionId`.
    pub fn coarse_regions(&self) -> &[Region] {
        &self.coarse
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn coarse_names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    /// All variants registered under a canonical coarse name.
    pub fn variants(&self, name: &str) -> &[RegionId] {
        self.by_name.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn fine_regions(&self) -> &[Region] {
        &self.fine
    }

    pub fn fine(&self, name: &str) -> Result<&Region> {
        self.fine_by_name
            .get(name)
            .map(|&i| &self.fine[i])
            .ok_or_else(|| Error::UnknownRegion(name.to_string()))
    }

    /// Fraction of mesh vertices covered by at least one fine region.
    pub fn fine_coverage(&self) -> f64 {
        let covered: BTreeSet<u32> = self
            .fine
            .iter()
            .flat_map(|r| r.vertices.iter().copied())
            .collect();
        covered.len() as f64 / self.num_vertices as f64
    }

    /// Pairs of fine regions that share at least one vertex.
    pub fn fine_overlaps(&self) -> Vec<(String, String)> {
        let mut owner: BTreeMap<u32, usize> = BTreeMap::new();
        let mut out = BTreeSet::new();
        for (i, region) in self.fine.iter().enumerate() {
            for v in &region.vertices {
                if let Some(&j) = owner.get(v) {
                    out.insert((self.fine[j].name.clone(), region.name.clone()));
                } else {
                    owner.insert(*v, i);
                }
            }
        }
        out.into_iter().collect()
    }

    /// Resolves a surface form against the union of both vocabularies.
    pub fn resolve_part(&self, surface: &str) -> Vec<RegionId> {
        let n = normalize_surface(surface);
        if in_vocabulary(&n, Mode::TwoPerson) || in_vocabulary(&n, Mode::OnePerson) {
            self.resolve_normalized(&n)
        } else {
            Vec::new()
        }
    }

    /// Resolves a surface form against one mode's vocabulary.
    pub fn resolve_in(&self, surface: &str, mode: Mode) -> Vec<RegionId> {
        let n = normalize_surface(surface);
        if in_vocabulary(&n, mode) {
            self.resolve_normalized(&n)
        } else {
            Vec::new()
        }
    }

    fn resolve_normalized(&self, n: &str) -> Vec<RegionId> {
        if n == "waist" {
            let mut out = Vec::new();
            out.extend_from_slice(self.variants("waist (front)"));
            out.extend_from_slice(self.variants("waist (back)"));
            return out;
        }
        let (side, base) = if let Some(rest) = n.strip_prefix("left ") {
            (Some(Chirality::Left), rest)
        } else if let Some(rest) = n.strip_prefix("right ") {
            (Some(Chirality::Right), rest)
        } else {
            (None, n)
        };
        let variants = self.variants(base);
        match side {
            None => variants.to_vec(),
            Some(side) => variants
                .iter()
                .copied()
                .filter(|id| self.region(*id).chirality == side)
                .collect(),
        }
    }
}

/// Bare chiral part name, if the normalized surface is one (no left/right prefix).
pub fn bare_chiral_part(surface: &str) -> Option<&'static str> {
    let n = normalize_surface(surface);
    CHIRAL_PARTS.iter().copied().find(|p| *p == n)
}
