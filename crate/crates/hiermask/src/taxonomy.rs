//! Organ/tumor class taxonomy and the two label spaces derived from it.
//!
//! A taxonomy declares organs, "major" tumor classes that split into
//! diagnosis subtypes, and shared tumor classes that appear identically in
//! both granularities. From the declaration two dense `u8` label spaces are
//! derived:
//!
//! * the **detection** space: background, organs, shared tumors, majors;
//! * the **diagnosis** space: background, organs, shared tumors, subtypes.
//!
//! Background is always id 0 and organs/shared tumors occupy the same ids
//! in both spaces, so a diagnosis-space map can be merged down to the
//! detection space by a pure id remapping.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

/// Reserved id for background in both label spaces.
pub const BACKGROUND: u8 = 0;

/// Which of the two derived label spaces a map or mask lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    /// Organs + shared tumors + major tumor classes.
    Detection,
    /// Organs + shared tumors + subtype classes.
    Diagnosis,
}

impl std::fmt::Display for LabelSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelSpace::Detection => f.write_str("detection"),
            LabelSpace::Diagnosis => f.write_str("diagnosis"),
        }
    }
}

/// A major tumor class together with its diagnosis subtypes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MajorSpec {
    /// Detection-level class name, e.g. `"liver tumor"`.
    pub name: String,
    /// Host organ; must be one of the declared organs.
    pub organ: String,
    /// Diagnosis-level subtype names; at least two are required.
    pub subtypes: Vec<String>,
}

/// A tumor class without subtypes, shared by both label spaces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedTumorSpec {
    /// Class name, e.g. `"lung cancer"`.
    pub name: String,
    /// Host organ; must be one of the declared organs.
    pub organ: String,
}

/// Declarative taxonomy description, the serialized form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomySpec {
    pub organs: Vec<String>,
    pub majors: Vec<MajorSpec>,
    pub shared_tumors: Vec<SharedTumorSpec>,
}

impl TaxonomySpec {
    /// The full eight-organ configuration used by the reference experiments.
    pub fn eight_organ() -> Self {
        TaxonomySpec {
            organs: vec![
                "breast".into(),
                "lung".into(),
                "kidney".into(),
                "pancreas".into(),
                "esophagus".into(),
                "liver".into(),
                "stomach".into(),
                "colorectum".into(),
            ],
            majors: vec![
                MajorSpec {
                    name: "pancreas tumor".into(),
                    organ: "pancreas".into(),
                    subtypes: vec!["PDAC".into(), "nonPDAC".into()],
                },
                MajorSpec {
                    name: "liver tumor".into(),
                    organ: "liver".into(),
                    subtypes: vec![
                        "HCC".into(),
                        "ICC".into(),
                        "liver metastasis".into(),
                        "hemangioma".into(),
                    ],
                },
                MajorSpec {
                    name: "stomach tumor".into(),
                    organ: "stomach".into(),
                    subtypes: vec!["GC".into(), "nonGC".into()],
                },
                MajorSpec {
                    name: "esophagus tumor".into(),
                    organ: "esophagus".into(),
                    subtypes: vec!["EC".into(), "nonEC".into()],
                },
            ],
            shared_tumors: vec![
                SharedTumorSpec { name: "breast cancer".into(), organ: "breast".into() },
                SharedTumorSpec { name: "lung cancer".into(), organ: "lung".into() },
                SharedTumorSpec { name: "kidney tumor".into(), organ: "kidney".into() },
                SharedTumorSpec { name: "colorectal cancer".into(), organ: "colorectum".into() },
            ],
        }
    }

    /// A four-organ configuration sized for desk-scale experiments: two
    /// majors with subtypes plus two shared tumor classes.
    pub fn four_organ() -> Self {
        TaxonomySpec {
            organs: vec!["liver".into(), "pancreas".into(), "lung".into(), "kidney".into()],
            majors: vec![
                MajorSpec {
                    name: "liver tumor".into(),
                    organ: "liver".into(),
                    subtypes: vec!["HCC".into(), "ICC".into()],
                },
                MajorSpec {
                    name: "pancreas tumor".into(),
                    organ: "pancreas".into(),
                    subtypes: vec!["PDAC".into(), "nonPDAC".into()],
                },
            ],
            shared_tumors: vec![
                SharedTumorSpec { name: "lung cancer".into(), organ: "lung".into() },
                SharedTumorSpec { name: "kidney tumor".into(), organ: "kidney".into() },
            ],
        }
    }

    /// A minimal two-organ configuration: one major with two subtypes and
    /// one shared tumor class. Used by the smallest end-to-end tests.
    pub fn two_organ() -> Self {
        TaxonomySpec {
            organs: vec!["liver".into(), "lung".into()],
            majors: vec![MajorSpec {
                name: "liver tumor".into(),
                organ: "liver".into(),
                subtypes: vec!["HCC".into(), "ICC".into()],
            }],
            shared_tumors: vec![SharedTumorSpec {
                name: "lung cancer".into(),
                organ: "lung".into(),
            }],
        }
    }

    /// Look up a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "eight-organ" => Ok(Self::eight_organ()),
            "four-organ" => Ok(Self::four_organ()),
            "two-organ" => Ok(Self::two_organ()),
            other => Err(Error::Config(format!(
                "unknown taxonomy preset {other:?} (expected eight-organ, four-organ or two-organ)"
            ))),
        }
    }
}

/// One class in a derived label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassKind {
    Background,
    Organ,
    SharedTumor,
    Major,
    Subtype,
}

/// A validated taxonomy with both derived label spaces.
///
/// Serializes as its [`TaxonomySpec`]; deserialization re-runs validation,
/// so an invalid spec cannot round-trip into a `Taxonomy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TaxonomySpec", try_from = "TaxonomySpec")]
pub struct Taxonomy {
    spec: TaxonomySpec,
    /// Shared class names: organs first, then shared tumors.
    shared: Vec<String>,
    /// Diagnosis space names, index = class id (0 = background).
    diag_names: Vec<String>,
    /// Detection space names, index = class id (0 = background).
    det_names: Vec<String>,
    /// Diagnosis id -> detection id.
    diag_to_det: Vec<u8>,
    /// For each major (spec order): its subtype diagnosis-space ids.
    subtype_ids_per_major: Vec<Vec<u8>>,
    /// For each organ (spec order): diagnosis-space tumor ids hosted in it.
    diag_tumors_per_organ: Vec<Vec<u8>>,
    /// For each organ (spec order): detection-space tumor ids hosted in it.
    det_tumors_per_organ: Vec<Vec<u8>>,
}

impl TryFrom<TaxonomySpec> for Taxonomy {
    type Error = Error;
    fn try_from(spec: TaxonomySpec) -> Result<Self> {
        Taxonomy::new(spec)
    }
}

impl From<Taxonomy> for TaxonomySpec {
    fn from(t: Taxonomy) -> TaxonomySpec {
        t.spec
    }
}

fn check_name(name: &str, what: &str) -> Result<()> {
    if name.trim().is_empty() {
        return Err(Error::Config(format!("{what} name is empty")));
    }
    if name != name.trim() {
        return Err(Error::Config(format!(
            "{what} name {name:?} has leading or trailing whitespace"
        )));
    }
    if name.chars().any(|c| c.is_control() || c == ',') {
        return Err(Error::Config(format!(
            "{what} name {name:?} contains a comma or control character"
        )));
    }
    Ok(())
}

impl Taxonomy {
    /// Validate a spec and derive both label spaces.
    pub fn new(spec: TaxonomySpec) -> Result<Self> {
        if spec.organs.is_empty() {
            return Err(Error::Config("taxonomy declares no organs".into()));
        }
        // Every class name (plus the implicit background) must be unique.
        let register = |kind: &str, name: String, seen: &mut BTreeMap<String, String>| {
            if let Some(prev) = seen.insert(name.clone(), kind.to_string()) {
                return Err(Error::Config(format!(
                    "duplicate class name {name:?} (declared as {prev} and {kind})"
                )));
            }
            Ok(())
        };
        let mut names: BTreeMap<String, String> = BTreeMap::new();
        names.insert("background".into(), "reserved background class".into());
        for organ in &spec.organs {
            check_name(organ, "organ")?;
            register("organ", organ.clone(), &mut names)?;
        }
        for major in &spec.majors {
            check_name(&major.name, "major tumor")?;
            register("major tumor", major.name.clone(), &mut names)?;
            if !spec.organs.contains(&major.organ) {
                return Err(Error::Config(format!(
                    "major {:?} references unknown organ {:?}",
                    major.name, major.organ
                )));
            }
            if major.subtypes.len() < 2 {
                return Err(Error::Config(format!(
                    "major {:?} declares {} subtype(s); a major needs at least two",
                    major.name,
                    major.subtypes.len()
                )));
            }
            for sub in &major.subtypes {
                check_name(sub, "subtype")?;
                register("subtype", sub.clone(), &mut names)?;
            }
        }
        for shared in &spec.shared_tumors {
            check_name(&shared.name, "shared tumor")?;
            register("shared tumor", shared.name.clone(), &mut names)?;
            if !spec.organs.contains(&shared.organ) {
                return Err(Error::Config(format!(
                    "shared tumor {:?} references unknown organ {:?}",
                    shared.name, shared.organ
                )));
            }
        }
        // No two majors may share a host organ (the expansion maps one
        // detection query to one subtype group per organ).
        for (i, a) in spec.majors.iter().enumerate() {
            for b in spec.majors.iter().skip(i + 1) {
                if a.organ == b.organ {
                    return Err(Error::Config(format!(
                        "majors {:?} and {:?} share host organ {:?}",
                        a.name, b.name, a.organ
                    )));
                }
            }
        }

        let mut shared: Vec<String> = spec.organs.clone();
        shared.extend(spec.shared_tumors.iter().map(|s| s.name.clone()));

        // Detection space: background, shared block, then majors.
        let mut det_names = vec!["background".to_string()];
        det_names.extend(shared.iter().cloned());
        let major_det_base = det_names.len();
        det_names.extend(spec.majors.iter().map(|m| m.name.clone()));

        // Diagnosis space: background, shared block, then subtypes in
        // major-declaration order.
        let mut diag_names = vec!["background".to_string()];
        diag_names.extend(shared.iter().cloned());
        let mut diag_to_det: Vec<u8> = (0..diag_names.len() as u8).collect();
        let mut subtype_ids_per_major = Vec::with_capacity(spec.majors.len());
        for (mi, major) in spec.majors.iter().enumerate() {
            let mut ids = Vec::with_capacity(major.subtypes.len());
            for sub in &major.subtypes {
                let id = diag_names.len();
                if id > u8::MAX as usize {
                    return Err(Error::Config(
                        "taxonomy exceeds 255 diagnosis classes".into(),
                    ));
                }
                diag_names.push(sub.clone());
                diag_to_det.push((major_det_base + mi) as u8);
                ids.push(id as u8);
            }
            subtype_ids_per_major.push(ids);
        }
        if det_names.len() > u8::MAX as usize + 1 {
            return Err(Error::Config("taxonomy exceeds 255 detection classes".into()));
        }

        // Per-organ tumor id tables in both spaces.
        let organ_count = spec.organs.len();
        let mut diag_tumors_per_organ = vec![Vec::new(); organ_count];
        let mut det_tumors_per_organ = vec![Vec::new(); organ_count];
        for (mi, major) in spec.majors.iter().enumerate() {
            let oi = spec.organs.iter().position(|o| o == &major.organ).unwrap();
            det_tumors_per_organ[oi].push((major_det_base + mi) as u8);
            diag_tumors_per_organ[oi].extend(subtype_ids_per_major[mi].iter().copied());
        }
        for (si, sh) in spec.shared_tumors.iter().enumerate() {
            let oi = spec.organs.iter().position(|o| o == &sh.organ).unwrap();
            let id = (1 + organ_count + si) as u8;
            det_tumors_per_organ[oi].push(id);
            diag_tumors_per_organ[oi].push(id);
        }
        for ids in diag_tumors_per_organ.iter_mut().chain(det_tumors_per_organ.iter_mut()) {
            ids.sort_unstable();
        }

        Ok(Taxonomy {
            spec,
            shared,
            diag_names,
            det_names,
            diag_to_det,
            subtype_ids_per_major,
            diag_tumors_per_organ,
            det_tumors_per_organ,
        })
    }

    /// The declarative spec this taxonomy was built from.
    pub fn spec(&self) -> &TaxonomySpec {
        &self.spec
    }

    /// Number of organs.
    pub fn organ_count(&self) -> usize {
        self.spec.organs.len()
    }

    /// Number of major (detection-level) tumor classes with subtypes.
    pub fn major_count(&self) -> usize {
        self.spec.majors.len()
    }

    /// Total number of diagnosis subtypes across all majors.
    pub fn subtype_count(&self) -> usize {
        self.subtype_ids_per_major.iter().map(Vec::len).sum()
    }

    /// Number of shared classes (organs + shared tumors).
    pub fn shared_count(&self) -> usize {
        self.shared.len()
    }

    /// Number of tumor classes without subtypes.
    pub fn shared_tumor_count(&self) -> usize {
        self.spec.shared_tumors.len()
    }

    /// Total tumor classes at subtype granularity (subtypes + shared tumors).
    pub fn tumor_class_count(&self) -> usize {
        self.subtype_count() + self.shared_tumor_count()
    }

    /// Total number of queries the model instantiates:
    /// majors + subtypes + shared classes.
    pub fn query_count(&self) -> usize {
        self.major_count() + self.subtype_count() + self.shared_count()
    }

    /// Subtype group sizes in major-declaration order.
    pub fn subtype_group_sizes(&self) -> Vec<usize> {
        self.subtype_ids_per_major.iter().map(Vec::len).collect()
    }

    /// Number of classes in a label space, including background.
    pub fn class_count(&self, space: LabelSpace) -> usize {
        match space {
            LabelSpace::Detection => self.det_names.len(),
            LabelSpace::Diagnosis => self.diag_names.len(),
        }
    }

    /// Class names of a label space, indexed by class id.
    pub fn class_names(&self, space: LabelSpace) -> &[String] {
        match space {
            LabelSpace::Detection => &self.det_names,
            LabelSpace::Diagnosis => &self.diag_names,
        }
    }

    /// Name of one class id.
    pub fn class_name(&self, space: LabelSpace, id: u8) -> Result<&str> {
        self.class_names(space).get(id as usize).map(String::as_str).ok_or_else(|| {
            Error::Data(format!("class id {id} out of range for {space} space"))
        })
    }

    /// Id of a named class in a label space.
    pub fn class_id(&self, space: LabelSpace, name: &str) -> Result<u8> {
        self.class_names(space)
            .iter()
            .position(|n| n == name)
            .map(|i| i as u8)
            .ok_or_else(|| Error::Data(format!("unknown class {name:?} in {space} space")))
    }

    /// Kind of a class id within a label space.
    pub fn class_kind(&self, space: LabelSpace, id: u8) -> Result<ClassKind> {
        let id = id as usize;
        let n = self.class_count(space);
        if id >= n {
            return Err(Error::Data(format!("class id {id} out of range for {space} space")));
        }
        let organs = self.organ_count();
        let shared_end = 1 + self.shared_count();
        Ok(if id == 0 {
            ClassKind::Background
        } else if id <= organs {
            ClassKind::Organ
        } else if id < shared_end {
            ClassKind::SharedTumor
        } else if space == LabelSpace::Detection {
            ClassKind::Major
        } else {
            ClassKind::Subtype
        })
    }

    /// Organ ids; identical in both label spaces.
    pub fn organ_ids(&self) -> Vec<u8> {
        (1..=self.organ_count() as u8).collect()
    }

    /// All tumor class ids of a label space (shared tumors plus majors or
    /// subtypes), ascending.
    pub fn tumor_ids(&self, space: LabelSpace) -> Vec<u8> {
        let first_tumor = 1 + self.organ_count();
        (first_tumor..self.class_count(space)).map(|i| i as u8).collect()
    }

    /// Tumor class ids hosted in one organ (by organ index) in a space.
    pub fn organ_tumor_ids(&self, space: LabelSpace, organ_index: usize) -> Result<&[u8]> {
        let table = match space {
            LabelSpace::Detection => &self.det_tumors_per_organ,
            LabelSpace::Diagnosis => &self.diag_tumors_per_organ,
        };
        table
            .get(organ_index)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("organ index {organ_index} out of range")))
    }

    /// Diagnosis-space subtype ids of one major (by major index).
    pub fn major_subtype_ids(&self, major_index: usize) -> Result<&[u8]> {
        self.subtype_ids_per_major
            .get(major_index)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("major index {major_index} out of range")))
    }

    /// Map a diagnosis-space id to its detection-space id.
    pub fn merge_id(&self, diag_id: u8) -> Result<u8> {
        self.diag_to_det.get(diag_id as usize).copied().ok_or_else(|| {
            Error::Data(format!("class id {diag_id} out of range for diagnosis space"))
        })
    }

    /// The full diagnosis-to-detection id map, indexed by diagnosis id.
    pub fn merge_table(&self) -> &[u8] {
        &self.diag_to_det
    }

    /// Index of the organ hosting a tumor class, in either space.
    pub fn host_organ(&self, space: LabelSpace, id: u8) -> Result<Option<usize>> {
        match self.class_kind(space, id)? {
            ClassKind::SharedTumor | ClassKind::Major | ClassKind::Subtype => {
                let table = match space {
                    LabelSpace::Detection => &self.det_tumors_per_organ,
                    LabelSpace::Diagnosis => &self.diag_tumors_per_organ,
                };
                Ok(table.iter().position(|ids| ids.contains(&id)))
            }
            _ => Ok(None),
        }
    }

    /// Canonical human-readable text form. Byte-identical for equal
    /// taxonomies; its SHA-256 is the taxonomy hash.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "taxonomy v1");
        let _ = writeln!(s, "organs: {}", self.spec.organs.join(", "));
        let _ = writeln!(
            s,
            "shared-tumors: {}",
            self.spec
                .shared_tumors
                .iter()
                .map(|t| format!("{} @ {}", t.name, t.organ))
                .collect::<Vec<_>>()
                .join(", ")
        );
        for major in &self.spec.majors {
            let _ = writeln!(
                s,
                "major: {} @ {} -> {}",
                major.name,
                major.organ,
                major.subtypes.join(", ")
            );
        }
        let _ = writeln!(s, "detection-space: {}", self.det_names.join(", "));
        let _ = writeln!(s, "diagnosis-space: {}", self.diag_names.join(", "));
        let merge: Vec<String> = self
            .diag_to_det
            .iter()
            .enumerate()
            .map(|(d, m)| format!("{d}->{m}"))
            .collect();
        let _ = writeln!(s, "merge: {}", merge.join(", "));
        s
    }

    /// SHA-256 (hex) of the canonical text form.
    pub fn hash_hex(&self) -> String {
        sha256_hex(self.canonical_text().as_bytes())
    }
}
