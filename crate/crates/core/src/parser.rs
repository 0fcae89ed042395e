//! Turns free-form model responses into contact constraint sets.
//!
//! A response is expected to end with a two-column Markdown table naming
//! touching body parts. The last well-formed table in the text is used,
//! cells may list alternatives separated by `/`, and every fragment is
//! resolved through the [`RegionRegistry`] vocabulary of the active mode.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::regions::{self, normalize_surface, RegionId, RegionRegistry};
use crate::Mode;

/// One sampled model answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResponse {
    pub sample_index: usize,
    pub text: String,
}

/// A pair of regions asserted to touch.
///
/// `group_a` / `group_b` name a bare limb (e.g. `hand`) that occurs in at
/// least two rows of the same column; all constraints sharing a group must
/// be satisfied jointly using both the left and the right variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContactConstraint {
    pub side_a: Vec<RegionId>,
    pub side_b: Vec<RegionId>,
    pub surface_a: String,
    pub surface_b: String,
    pub group_a: Option<String>,
    pub group_b: Option<String>,
}

impl ContactConstraint {
    /// The same contact seen from the other person.
    pub fn flipped(&self) -> Self {
        Self {
            side_a: self.side_b.clone(),
            side_b: self.side_a.clone(),
            surface_a: self.surface_b.clone(),
            surface_b: self.surface_a.clone(),
            group_a: self.group_b.clone(),
            group_b: self.group_a.clone(),
        }
    }

    /// Order-free identity used for frequency counting.
    pub fn signature(&self) -> (Vec<RegionId>, Vec<RegionId>) {
        let mut a = self.side_a.clone();
        let mut b = self.side_b.clone();
        a.sort();
        b.sort();
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConstraintSet {
    pub sample_index: usize,
    pub constraints: Vec<ContactConstraint>,
    pub warnings: Vec<String>,
}

impl ConstraintSet {
    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// Name-based form with sorted region keys, suitable for stable serialization.
    pub fn canonical(&self, registry: &RegionRegistry) -> CanonicalSet {
        let keys = |ids: &[RegionId]| {
            let mut k: Vec<String> = ids.iter().map(|id| registry.region(*id).key()).collect();
            k.sort();
            k
        };
        CanonicalSet {
            sample_index: self.sample_index,
            constraints: self
                .constraints
                .iter()
                .map(|c| CanonicalConstraint {
                    a: keys(&c.side_a),
                    b: keys(&c.side_b),
                    surface_a: c.surface_a.clone(),
                    surface_b: c.surface_b.clone(),
                    group_a: c.group_a.clone(),
                    group_b: c.group_b.clone(),
                })
                .collect(),
            warnings: self.warnings.clone(),
        }
    }

    /// Inverse of [`ConstraintSet::canonical`].
    pub fn from_canonical(
        canonical: &CanonicalSet,
        registry: &RegionRegistry,
    ) -> crate::Result<Self> {
        let ids = |keys: &[String]| -> crate::Result<Vec<RegionId>> {
            keys.iter()
                .map(|k| {
                    let (name, side) = match k.rsplit_once('/') {
                        Some((n, "left")) => (n, Some(regions::Chirality::Left)),
                        Some((n, "right")) => (n, Some(regions::Chirality::Right)),
                        _ => (k.as_str(), None),
                    };
                    registry
                        .variants(name)
                        .iter()
                        .copied()
                        .find(|id| {
                            side.map_or(true, |s| registry.region(*id).chirality == s)
                        })
                        .ok_or_else(|| crate::Error::UnknownRegion(k.clone()))
                })
                .collect()
        };
        let mut constraints = Vec::with_capacity(canonical.constraints.len());
        for c in &canonical.constraints {
            let side_a = ids(&c.a)?;
            let side_b = ids(&c.b)?;
            if side_a.is_empty() || side_b.is_empty() {
                return Err(crate::error::invalid(
                    "constraint",
                    format!("constraint {:?} / {:?} has an empty side", c.surface_a, c.surface_b),
                ));
            }
            constraints.push(ContactConstraint {
                side_a,
                side_b,
                surface_a: c.surface_a.clone(),
                surface_b: c.surface_b.clone(),
                group_a: c.group_a.clone(),
                group_b: c.group_b.clone(),
            });
        }
        Ok(Self {
            sample_index: canonical.sample_index,
            constraints,
            warnings: canonical.warnings.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalConstraint {
    pub a: Vec<String>,
    pub b: Vec<String>,
    pub surface_a: String,
    pub surface_b: String,
    pub group_a: Option<String>,
    pub group_b: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalSet {
    pub sample_index: usize,
    pub constraints: Vec<CanonicalConstraint>,
    pub warnings: Vec<String>,
}

/// Result of scanning a response for its final table.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Table {
    pub rows: Vec<(String, String)>,
    pub columns: usize,
    pub warnings: Vec<String>,
}

fn split_cells(line: &str) -> Option<Vec<String>> {
    let t = line.trim();
    if !t.contains('|') {
        return None;
    }
    let inner = t.strip_prefix('|').unwrap_or(t);
    let inner = inner.strip_suffix('|').unwrap_or(inner);
    Some(
        inner
            .split('|')
            .map(|c| {
                c.chars()
                    .filter(|ch| !matches!(ch, '*' | '`'))
                    .collect::<String>()
                    .trim()
                    .to_string()
            })
            .collect(),
    )
}

fn is_separator(cells: &[String]) -> bool {
    !cells.is_empty()
        && cells.iter().all(|c| {
            let c = c.trim();
            let body = c.trim_start_matches(':').trim_end_matches(':');
            !body.is_empty() && body.chars().all(|ch| ch == '-')
        })
}

/// Finds the last well-formed table: a header line, a separator line with
/// the same number of cells, and the body rows that follow.
pub fn find_last_table(text: &str) -> Option<Table> {
    let lines: Vec<&str> = text.lines().collect();
    let mut last = None;
    let mut i = 0;
    while i + 1 < lines.len() {
        let (Some(header), Some(sep)) = (split_cells(lines[i]), split_cells(lines[i + 1])) else {
            i += 1;
            continue;
        };
        if header.len() < 2 || !is_separator(&sep) || sep.len() != header.len() {
            i += 1;
            continue;
        }
        let columns = header.len();
        let mut table = Table {
            columns,
            ..Table::default()
        };
        if columns > 2 {
            table
                .warnings
                .push(format!("table has {columns} columns; using the first two"));
        }
        let mut j = i + 2;
        while j < lines.len() {
            let Some(cells) = split_cells(lines[j]) else {
                break;
            };
            j += 1;
            if is_separator(&cells) {
                continue;
            }
            if cells.len() < 2 {
                table
                    .warnings
                    .push(format!("skipped malformed row {:?}", lines[j - 1].trim()));
                continue;
            }
            table.rows.push((cells[0].clone(), cells[1].clone()));
        }
        last = Some(table);
        i = j;
    }
    last
}

/// Rows of the last well-formed two-or-more-column table; empty if none.
pub fn extract_table(text: &str) -> Vec<(String, String)> {
    find_last_table(text).map(|t| t.rows).unwrap_or_default()
}

fn fragments(cell: &str) -> Vec<String> {
    cell.split('/')
        .map(|f| f.trim().to_string())
        .filter(|f| !f.is_empty())
        .collect()
}

/// Parses one response into a constraint set. Never fails: problems are
/// recorded as warnings on the returned set.
pub fn parse_response(
    response: &RawResponse,
    registry: &RegionRegistry,
    mode: Mode,
) -> ConstraintSet {
    let mut set = ConstraintSet {
        sample_index: response.sample_index,
        ..ConstraintSet::default()
    };
    let Some(table) = find_last_table(&response.text) else {
        set.warnings.push("no table found".into());
        return set;
    };
    set.warnings.extend(table.warnings);

    // Deduplicate rows after normalization so a repeated row neither doubles
    // its weight nor forms a limb group with itself.
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for (row_no, (a, b)) in table.rows.iter().enumerate() {
        let norm = |cell: &str| -> Vec<String> { fragments(cell).iter().map(|f| normalize_surface(f)).collect() };
        let key = (norm(a), norm(b));
        if key.0.is_empty() || key.1.is_empty() {
            set.warnings
                .push(format!("row {}: empty cell", row_no + 1));
            continue;
        }
        if !seen.insert(key) {
            set.warnings
                .push(format!("row {}: duplicate of an earlier row", row_no + 1));
            continue;
        }
        rows.push((row_no + 1, fragments(a), fragments(b)));
    }

    // Bare limb names that occur in two or more rows of the same column.
    let mut groups = [BTreeSet::new(), BTreeSet::new()];
    if mode == Mode::TwoPerson {
        for col in 0..2 {
            let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
            for (_, fa, fb) in &rows {
                let frags = if col == 0 { fa } else { fb };
                let parts: BTreeSet<&'static str> = frags
                    .iter()
                    .filter_map(|f| regions::bare_chiral_part(f))
                    .collect();
                for p in parts {
                    *counts.entry(p).or_default() += 1;
                }
            }
            groups[col] = counts
                .into_iter()
                .filter(|(_, n)| *n >= 2)
                .map(|(p, _)| p)
                .collect();
        }
    }
    let group_of = |frag: &str, col: usize| -> Option<String> {
        regions::bare_chiral_part(frag)
            .filter(|p| groups[col].contains(p))
            .map(String::from)
    };

    for (row_no, fa, fb) in rows {
        let mut resolve_col = |frags: &[String]| -> Vec<(String, Vec<RegionId>)> {
            let mut out = Vec::new();
            for f in frags {
                let n = normalize_surface(f);
                if n == regions::GROUND {
                    set.warnings
                        .push(format!("row {row_no}: dropped contact with \"ground\""));
                    continue;
                }
                let ids = registry.resolve_in(f, mode);
                if ids.is_empty() {
                    set.warnings
                        .push(format!("row {row_no}: unresolved body part {f:?}"));
                } else {
                    out.push((f.clone(), ids));
                }
            }
            out
        };
        let ra = resolve_col(&fa);
        let rb = resolve_col(&fb);
        if ra.is_empty() || rb.is_empty() {
            continue;
        }
        for (sa, ia) in &ra {
            for (sb, ib) in &rb {
                set.constraints.push(ContactConstraint {
                    side_a: ia.clone(),
                    side_b: ib.clone(),
                    surface_a: sa.clone(),
                    surface_b: sb.clone(),
                    group_a: group_of(sa, 0),
                    group_b: group_of(sb, 1),
                });
            }
        }
    }
    set
}

/// Keeps only constraints whose signature appears in at least `min_count`
/// sets. Returns the filtered sets and the number of sets that were empty
/// before filtering.
pub fn aggregate(sets: &[ConstraintSet], min_count: usize) -> (Vec<ConstraintSet>, usize) {
    let empty_count = sets.iter().filter(|s| s.is_empty()).count();
    let mut counts: BTreeMap<(Vec<RegionId>, Vec<RegionId>), usize> = BTreeMap::new();
    for set in sets {
        let present: BTreeSet<_> = set.constraints.iter().map(|c| c.signature()).collect();
        for sig in present {
            *counts.entry(sig).or_default() += 1;
        }
    }
    let filtered = sets
        .iter()
        .map(|set| {
            let mut out = set.clone();
            out.constraints
                .retain(|c| counts.get(&c.signature()).copied().unwrap_or(0) >= min_count);
            out
        })
        .collect();
    (filtered, empty_count)
}

/// True when enough samples came back empty to fall back to a baseline.
pub fn should_backoff(empty_count: usize, threshold: usize) -> bool {
    empty_count >= threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regions::tests::tiny_region_data;
    use alloc::vec;

    fn registry() -> RegionRegistry {
        let (data, n) = tiny_region_data();
        RegionRegistry::new(&data, n).unwrap()
    }

    fn table(rows: &[(&str, &str)]) -> String {
        let mut s = String::from(
            "Reasoning first.\n\n| Person 1 Body Part | Person 2 Body Part |\n|---|---|\n",
        );
        for (a, b) in rows {
            s.push_str(&format!("| {a} | {b} |\n"));
        }
        s
    }

    fn parse(text: &str, mode: Mode) -> ConstraintSet {
        parse_response(
            &RawResponse {
                sample_index: 0,
                text: text.into(),
            },
            &registry(),
            mode,
        )
    }

    #[test]
    fn single_row_table() {
        let rows = extract_table("| A | B |\n|---|---|\n| Hand | Back |\n");
        assert_eq!(rows, vec![("Hand".to_string(), "Back".to_string())]);
    }

    #[test]
    fn reasoning_without_table_gives_no_rows() {
        assert!(extract_table("They are standing apart; no contact.").is_empty());
    }

    #[test]
    fn last_table_wins() {
        let text = "Example:\n| a | b |\n|-|-|\n| head | head |\n\nAnswer:\n| a | b |\n|:--|--:|\n| hand | hand |\n| arm | back |";
        assert_eq!(
            extract_table(text),
            vec![
                ("hand".to_string(), "hand".to_string()),
                ("arm".to_string(), "back".to_string())
            ]
        );
    }

    #[test]
    fn header_without_separator_is_not_a_table() {
        assert!(find_last_table("| a | b |\n| hand | back |").is_none());
    }

    #[test]
    fn bare_hand_resolves_both_variants() {
        let reg = registry();
        let set = parse(&table(&[("hand", "back")]), Mode::TwoPerson);
        assert_eq!(set.constraints.len(), 1);
        assert_eq!(set.constraints[0].side_a, reg.resolve_part("hand"));
        assert_eq!(set.constraints[0].side_a.len(), 2);
        assert_eq!(set.constraints[0].group_a, None);
    }

    #[test]
    fn repeated_bare_part_forms_a_group() {
        let set = parse(&table(&[("hand", "shoulder (front)"), ("hand", "waist")]), Mode::TwoPerson);
        assert_eq!(set.constraints.len(), 2);
        for c in &set.constraints {
            assert_eq!(c.group_a.as_deref(), Some("hand"));
            assert_eq!(c.group_b, None);
        }
    }

    #[test]
    fn explicit_sides_do_not_count_towards_groups() {
        let set = parse(&table(&[("left hand", "back"), ("hand", "chest")]), Mode::TwoPerson);
        assert!(set.constraints.iter().all(|c| c.group_a.is_none()));
    }

    #[test]
    fn ground_rows_dropped_in_one_person_mode() {
        let set = parse(&table(&[("foot", "ground")]), Mode::OnePerson);
        assert!(set.is_empty());
        assert!(set.warnings.iter().any(|w| w.contains("ground")));
    }

    #[test]
    fn slash_cells_expand_to_cross_product() {
        let set = parse(&table(&[("hand / arm", "back/head")]), Mode::TwoPerson);
        let pairs: Vec<_> = set
            .constraints
            .iter()
            .map(|c| (c.surface_a.as_str(), c.surface_b.as_str()))
            .collect();
        assert_eq!(
            pairs,
            [("hand", "back"), ("hand", "head"), ("arm", "back"), ("arm", "head")]
        );
    }

    #[test]
    fn unknown_fragment_is_skipped_with_warning() {
        let set = parse(&table(&[("elbow / hand", "back"), ("hip", "back")]), Mode::TwoPerson);
        assert_eq!(set.constraints.len(), 1);
        assert_eq!(set.warnings.len(), 2);
    }

    #[test]
    fn extra_columns_are_ignored_with_warning() {
        let set = parse(
            "| a | b | note |\n|---|---|---|\n| hand | back | light |\n",
            Mode::TwoPerson,
        );
        assert_eq!(set.constraints.len(), 1);
        assert!(set.warnings[0].contains("3 columns"));
    }

    #[test]
    fn duplicate_rows_collapse() {
        let set = parse(&table(&[("hand", "back"), ("Hand", "back")]), Mode::TwoPerson);
        assert_eq!(set.constraints.len(), 1);
        assert_eq!(set.constraints[0].group_a, None);
    }

    fn set_of(reg: &RegionRegistry, idx: usize, pairs: &[(&str, &str)]) -> ConstraintSet {
        ConstraintSet {
            sample_index: idx,
            constraints: pairs
                .iter()
                .map(|(a, b)| ContactConstraint {
                    side_a: reg.resolve_part(a),
                    side_b: reg.resolve_part(b),
                    surface_a: a.to_string(),
                    surface_b: b.to_string(),
                    group_a: None,
                    group_b: None,
                })
                .collect(),
            warnings: vec![],
        }
    }

    #[test]
    fn aggregate_examples() {
        let reg = registry();
        let sets: Vec<_> = (0..3).map(|i| set_of(&reg, i, &[("hand", "back")])).collect();
        let (out, empty) = aggregate(&sets, 1);
        assert_eq!(out, sets);
        assert_eq!(empty, 0);

        let mut sets: Vec<_> = (0..20).map(|i| set_of(&reg, i, &[])).collect();
        assert_eq!(aggregate(&sets, 10).1, 20);
        for s in sets.iter_mut().take(9) {
            *s = set_of(&reg, s.sample_index, &[("hand", "back")]);
        }
        let (out, empty) = aggregate(&sets, 10);
        assert!(out.iter().all(|s| s.is_empty()));
        assert_eq!(empty, 11);
    }

    #[test]
    fn signature_ignores_order_and_duplicates_count_once() {
        let reg = registry();
        let mut sets = vec![
            set_of(&reg, 0, &[("hand", "back"), ("hand", "back")]),
            set_of(&reg, 1, &[("back", "hand")]),
        ];
        sets.push(set_of(&reg, 2, &[("head", "head")]));
        let (out, _) = aggregate(&sets, 2);
        assert_eq!(out[0].constraints.len(), 2);
        assert_eq!(out[1].constraints.len(), 1);
        assert!(out[2].is_empty());
    }

    #[test]
    fn backoff_threshold() {
        assert!(should_backoff(2, 2));
        assert!(!should_backoff(19, 20));
        assert!(!should_backoff(0, 1));
    }

    #[test]
    fn canonical_round_trip() {
        let reg = registry();
        let set = parse(&table(&[("hand", "shoulder (front)"), ("hand", "waist")]), Mode::TwoPerson);
        let canon = set.canonical(&reg);
        assert_eq!(canon.constraints[1].b, ["waist (back)", "waist (front)"]);
        let back = ConstraintSet::from_canonical(&canon, &reg).unwrap();
        assert_eq!(back.canonical(&reg), canon);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn part() -> impl Strategy<Value = &'static str> {
            proptest::sample::select(vec![
                "hand", "arm", "back", "head", "waist", "left foot", "chest", "elbow",
            ])
        }

        proptest! {
            #[test]
            fn parsing_is_pure(rows in proptest::collection::vec((part(), part()), 0..6)) {
                let text = table(&rows);
                prop_assert_eq!(parse(&text, Mode::TwoPerson), parse(&text, Mode::TwoPerson));
            }

            #[test]
            fn unit_threshold_is_identity(
                sets in proptest::collection::vec(proptest::collection::vec((part(), part()), 0..4), 1..6),
            ) {
                let reg = registry();
                let sets: Vec<_> = sets
                    .iter()
                    .enumerate()
                    .map(|(i, rows)| parse_response(
                        &RawResponse { sample_index: i, text: table(rows) }, &reg, Mode::TwoPerson))
                    .collect();
                let (out, empty) = aggregate(&sets, 1);
                prop_assert_eq!(&out, &sets);
                prop_assert_eq!(empty, aggregate(&sets, 5).1);
            }
        }
    }
}
