//! Three-level evaluation against ground truth: patient-level detection,
//! class-agnostic lesion-level detection, voxel-level Dice, and
//! patient-level diagnosis — plus report emission and the query-structure
//! ablation harness.
//!
//! Counts are kept as exact integer ratios so reports are reproducible
//! byte for byte and invariants are checkable after a round trip.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::caseio::{self, Manifest};
use crate::error::{Error, Result};
use crate::infer::{
    connected_components, extract_instances, file_sha256, patient_diagnosis, predict_split,
    InstanceRules, PredictionSet, SlidingOptions,
};
use crate::model::RepresentationMode;
use crate::taxonomy::{LabelSpace, Taxonomy};
use crate::train::{train, TrainConfig};
use crate::util::write_bytes;
use crate::volume::LabelMap;

/// An exact `hits / total` count with its quotient; `value` is `None` when
/// the denominator is zero (the metric is undefined, not zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ratio {
    pub hits: usize,
    pub total: usize,
    pub value: Option<f64>,
}

impl Ratio {
    pub fn new(hits: usize, total: usize) -> Ratio {
        let value = if total > 0 { Some(hits as f64 / total as f64) } else { None };
        Ratio { hits, total, value }
    }

    fn consistent(&self) -> bool {
        self.hits <= self.total && *self == Ratio::new(self.hits, self.total)
    }
}

/// One case's aligned inputs for evaluation.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub id: String,
    /// Ground-truth diagnosis-space labels.
    pub gt_diagnosis: LabelMap,
    /// Ground truth merged into the detection space.
    pub gt_detection: LabelMap,
    /// Ground-truth patient record: organ name → subtype name for the
    /// diseased organs.
    pub gt_diagnoses: BTreeMap<String, String>,
    /// Predicted detection-space argmax labels.
    pub pred_detection: LabelMap,
    /// Predicted diagnosis-space argmax labels.
    pub pred_diagnosis: LabelMap,
}

impl EvalCase {
    /// Build a case from diagnosis-space ground truth and the two
    /// predicted maps, deriving the detection-space ground truth.
    pub fn new(
        id: impl Into<String>,
        gt_diagnosis: LabelMap,
        gt_diagnoses: BTreeMap<String, String>,
        pred_detection: LabelMap,
        pred_diagnosis: LabelMap,
        taxonomy: &Taxonomy,
    ) -> Result<EvalCase> {
        let gt_detection = gt_diagnosis.merge_to_detection(taxonomy)?;
        pred_detection.validate_ids(taxonomy, LabelSpace::Detection)?;
        pred_diagnosis.validate_ids(taxonomy, LabelSpace::Diagnosis)?;
        for pred in [&pred_detection, &pred_diagnosis] {
            if pred.dims() != gt_diagnosis.dims() || pred.spacing() != gt_diagnosis.spacing() {
                return Err(Error::Data(
                    "prediction and ground truth disagree on geometry".to_string(),
                ));
            }
        }
        Ok(EvalCase {
            id: id.into(),
            gt_diagnosis,
            gt_detection,
            gt_diagnoses,
            pred_detection,
            pred_diagnosis,
        })
    }
}

/// Patient-level detection outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientDetection {
    /// Organ name → detected / tumor-bearing case ratio.
    pub sensitivity: BTreeMap<String, Ratio>,
    /// Tumor-free cases with no predicted instance of any class, over all
    /// tumor-free cases.
    pub specificity: Ratio,
}

impl PatientDetection {
    /// Mean of the defined per-organ sensitivities.
    pub fn mean_sensitivity(&self) -> Option<f64> {
        mean_defined(self.sensitivity.values().map(|r| r.value))
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Per-organ patient-level sensitivity and pooled specificity.
///
/// A tumor-bearing case counts as detected for organ `o` when some
/// predicted detection-space instance of `o`'s tumor class shares at least
/// one voxel with `o`'s ground-truth tumor voxels. A tumor-free case
/// counts toward specificity only when the prediction has no instance of
/// any tumor class.
pub fn patient_detection_eval(
    cases: &[EvalCase],
    taxonomy: &Taxonomy,
    rules: &InstanceRules,
) -> Result<PatientDetection> {
    rules.validate()?;
    let organ_names = taxonomy.organ_ids();
    let mut hits = vec![0usize; organ_names.len()];
    let mut totals = vec![0usize; organ_names.len()];
    let mut free_clean = 0usize;
    let mut free_total = 0usize;
    for case in cases {
        let instances = extract_instances(
            &case.pred_detection,
            taxonomy,
            LabelSpace::Detection,
            rules.min_voxels,
            rules.connectivity,
        )?;
        let mut any_gt_tumor = false;
        for (organ_index, _) in organ_names.iter().enumerate() {
            let tumor_ids = taxonomy.organ_tumor_ids(LabelSpace::Detection, organ_index)?;
            let gt = case.gt_detection.labels();
            let bearing = gt.iter().any(|l| tumor_ids.contains(l));
            if !bearing {
                continue;
            }
            any_gt_tumor = true;
            totals[organ_index] += 1;
            let detected = instances
                .iter()
                .filter(|inst| tumor_ids.contains(&inst.class_id))
                .any(|inst| inst.voxels.iter().any(|&[z, y, x]| tumor_ids.contains(&gt[[z, y, x]])));
            if detected {
                hits[organ_index] += 1;
            }
        }
        if !any_gt_tumor {
            free_total += 1;
            if instances.is_empty() {
                free_clean += 1;
            }
        }
    }
    let mut sensitivity = BTreeMap::new();
    for (organ_index, &organ_id) in organ_names.iter().enumerate() {
        let name = taxonomy.class_name(LabelSpace::Detection, organ_id)?.to_string();
        sensitivity.insert(name, Ratio::new(hits[organ_index], totals[organ_index]));
    }
    Ok(PatientDetection { sensitivity, specificity: Ratio::new(free_clean, free_total) })
}

/// Class-agnostic lesion-level counts pooled over cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionCounts {
    /// Connected tumor components in the ground truth (never size-filtered).
    pub gt_lesions: usize,
    /// Predicted instances after the size filter.
    pub predicted: usize,
    /// Predicted instances overlapping at least one ground-truth lesion;
    /// several predictions may match the same lesion and all count.
    pub true_positives: usize,
    /// Predicted instances overlapping no ground-truth lesion.
    pub false_positives: usize,
    /// Ground-truth lesions overlapped by no prediction.
    pub false_negatives: usize,
    /// `TP / (TP + FP)`; `None` when nothing was predicted.
    pub precision: Option<f64>,
    /// `(gt_lesions − FN) / gt_lesions`; `None` without ground-truth lesions.
    pub recall: Option<f64>,
}

impl LesionCounts {
    fn from_counts(gt_lesions: usize, tp: usize, fp: usize, fn_: usize) -> LesionCounts {
        let precision = if tp + fp > 0 { Some(tp as f64 / (tp + fp) as f64) } else { None };
        let recall = if gt_lesions > 0 {
            Some((gt_lesions - fn_) as f64 / gt_lesions as f64)
        } else {
            None
        };
        LesionCounts {
            gt_lesions,
            predicted: tp + fp,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision,
            recall,
        }
    }

    fn consistent(&self) -> bool {
        self.false_negatives <= self.gt_lesions
            && *self
                == LesionCounts::from_counts(
                    self.gt_lesions,
                    self.true_positives,
                    self.false_positives,
                    self.false_negatives,
                )
    }
}

fn tumor_mask(map: &LabelMap, taxonomy: &Taxonomy, space: LabelSpace) -> Array3<bool> {
    let first_tumor = taxonomy.tumor_ids(space)[0];
    map.labels().mapv(|l| l >= first_tumor)
}

/// Lesion-level detection with all tumor classes binarized to a single
/// foreground on both sides. Prediction components smaller than
/// `rules.min_voxels` are discarded; ground-truth components never are.
pub fn lesion_detection_eval(
    cases: &[EvalCase],
    taxonomy: &Taxonomy,
    rules: &InstanceRules,
) -> Result<LesionCounts> {
    rules.validate()?;
    let (mut gt_lesions, mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for case in cases {
        let gt_mask = tumor_mask(&case.gt_detection, taxonomy, LabelSpace::Detection);
        let pred_mask = tumor_mask(&case.pred_detection, taxonomy, LabelSpace::Detection);
        let gt_comps = connected_components(&gt_mask.view(), rules.connectivity)?;
        let pred_comps: Vec<_> = connected_components(&pred_mask.view(), rules.connectivity)?
            .into_iter()
            .filter(|c| c.len() >= rules.min_voxels)
            .collect();
        // Component index grid for O(1) overlap lookups; 0 = background.
        let mut gt_index = Array3::<usize>::zeros(gt_mask.dim());
        for (i, comp) in gt_comps.iter().enumerate() {
            for &[z, y, x] in comp {
                gt_index[[z, y, x]] = i + 1;
            }
        }
        let mut gt_hit = vec![false; gt_comps.len()];
        for comp in &pred_comps {
            let mut overlapped = false;
            for &[z, y, x] in comp {
                let idx = gt_index[[z, y, x]];
                if idx > 0 {
                    overlapped = true;
                    gt_hit[idx - 1] = true;
                }
            }
            if overlapped {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        gt_lesions += gt_comps.len();
        fn_ += gt_hit.iter().filter(|&&h| !h).count();
    }
    Ok(LesionCounts::from_counts(gt_lesions, tp, fp, fn_))
}

/// A named set of class ids whose voxels are pooled before computing Dice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceGroup {
    pub name: String,
    pub classes: Vec<u8>,
}

/// Detection-space grouping: one group per organ pooling its tumor
/// classes (subtypes merged).
pub fn detection_tumor_groups(taxonomy: &Taxonomy) -> Result<Vec<DiceGroup>> {
    let mut groups = Vec::new();
    for (organ_index, &organ_id) in taxonomy.organ_ids().iter().enumerate() {
        let classes = taxonomy.organ_tumor_ids(LabelSpace::Detection, organ_index)?.to_vec();
        if classes.is_empty() {
            continue;
        }
        groups.push(DiceGroup {
            name: taxonomy.class_name(LabelSpace::Detection, organ_id)?.to_string(),
            classes,
        });
    }
    Ok(groups)
}

/// Diagnosis-space grouping: one group per tumor subtype.
pub fn diagnosis_subtype_groups(taxonomy: &Taxonomy) -> Result<Vec<DiceGroup>> {
    taxonomy
        .tumor_ids(LabelSpace::Diagnosis)
        .iter()
        .map(|&id| {
            Ok(DiceGroup {
                name: taxonomy.class_name(LabelSpace::Diagnosis, id)?.to_string(),
                classes: vec![id],
            })
        })
        .collect()
}

/// Per-group Dice for one case: `2|P∩G| / (|P|+|G|)`, or `None` when the
/// group has no ground-truth voxels (such cases are excluded from macro
/// averages rather than scored 0/0).
pub fn dice_case(
    pred: &LabelMap,
    gt: &LabelMap,
    groups: &[DiceGroup],
) -> Result<Vec<Option<f64>>> {
    if pred.dims() != gt.dims() {
        return Err(Error::Data("dice inputs disagree on dimensions".to_string()));
    }
    let mut out = Vec::with_capacity(groups.len());
    for group in groups {
        let mut p = 0usize;
        let mut g = 0usize;
        let mut both = 0usize;
        for (&pv, &gv) in pred.labels().iter().zip(gt.labels().iter()) {
            let in_p = group.classes.contains(&pv);
            let in_g = group.classes.contains(&gv);
            p += in_p as usize;
            g += in_g as usize;
            both += (in_p && in_g) as usize;
        }
        if g == 0 {
            out.push(None);
        } else {
            out.push(Some(2.0 * both as f64 / (p + g) as f64));
        }
    }
    Ok(out)
}

/// Macro Dice: per-case Dice averaged over the cases where each group is
/// present in the ground truth; `None` for groups present nowhere.
pub fn dice_eval(
    pairs: &[(&LabelMap, &LabelMap)],
    groups: &[DiceGroup],
) -> Result<BTreeMap<String, Option<f64>>> {
    let mut sums = vec![0.0f64; groups.len()];
    let mut counts = vec![0usize; groups.len()];
    for (pred, gt) in pairs {
        for (i, d) in dice_case(pred, gt, groups)?.into_iter().enumerate() {
            if let Some(d) = d {
                sums[i] += d;
                counts[i] += 1;
            }
        }
    }
    Ok(groups
        .iter()
        .zip(sums.iter().zip(counts.iter()))
        .map(|(g, (&s, &n))| {
            (g.name.clone(), if n > 0 { Some(s / n as f64) } else { None })
        })
        .collect())
}

/// Patient-level diagnosis outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosisEval {
    /// Subtype name → correctly diagnosed / ground-truth cases of that
    /// subtype. A missing prediction for a diseased organ is incorrect.
    pub sensitivity: BTreeMap<String, Ratio>,
    /// Organ name → mean over its subtypes with at least one case.
    pub per_organ_average: BTreeMap<String, Option<f64>>,
    /// Correct (case, organ) diagnoses over all diseased (case, organ)
    /// pairs.
    pub accuracy: Ratio,
    /// Accuracy of always predicting each organ's most frequent
    /// ground-truth subtype on this split (ties to the lower class id).
    pub majority_baseline: Ratio,
}

/// Per-subtype diagnosis sensitivity, per-organ averages, pooled accuracy
/// and the majority-class baseline it must beat.
pub fn diagnosis_eval(
    cases: &[(&BTreeMap<String, String>, &BTreeMap<String, String>)],
    taxonomy: &Taxonomy,
) -> Result<DiagnosisEval> {
    // counts[subtype name] = (correct, total); organ frequency tables for
    // the majority baseline keyed by (organ, subtype).
    let mut correct: BTreeMap<String, usize> = BTreeMap::new();
    let mut total: BTreeMap<String, usize> = BTreeMap::new();
    let mut organ_freq: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut pooled_correct = 0usize;
    let mut pooled_total = 0usize;
    for (pred, gt) in cases {
        for (organ, subtype) in gt.iter() {
            *total.entry(subtype.clone()).or_insert(0) += 1;
            *organ_freq.entry(organ.clone()).or_default().entry(subtype.clone()).or_insert(0) +=
                1;
            pooled_total += 1;
            if pred.get(organ) == Some(subtype) {
                *correct.entry(subtype.clone()).or_insert(0) += 1;
                pooled_correct += 1;
            }
        }
    }

    let mut sensitivity = BTreeMap::new();
    let mut per_organ_average = BTreeMap::new();
    for (organ_index, &organ_id) in taxonomy.organ_ids().iter().enumerate() {
        let organ_name = taxonomy.class_name(LabelSpace::Diagnosis, organ_id)?.to_string();
        let mut organ_values = Vec::new();
        for &subtype_id in taxonomy.organ_tumor_ids(LabelSpace::Diagnosis, organ_index)? {
            let name = taxonomy.class_name(LabelSpace::Diagnosis, subtype_id)?.to_string();
            let t = total.get(&name).copied().unwrap_or(0);
            let c = correct.get(&name).copied().unwrap_or(0);
            let ratio = Ratio::new(c, t);
            if let Some(v) = ratio.value {
                organ_values.push(v);
            }
            sensitivity.insert(name, ratio);
        }
        per_organ_average.insert(organ_name, mean_defined(organ_values.into_iter().map(Some)));
    }

    // Majority baseline: per organ, the most frequent ground-truth subtype
    // (ties to the lower class id, i.e. taxonomy order) predicted always.
    let mut baseline_correct = 0usize;
    for (organ_index, &organ_id) in taxonomy.organ_ids().iter().enumerate() {
        let organ_name = taxonomy.class_name(LabelSpace::Diagnosis, organ_id)?;
        let Some(freq) = organ_freq.get(organ_name) else { continue };
        let mut majority: Option<usize> = None;
        for &subtype_id in taxonomy.organ_tumor_ids(LabelSpace::Diagnosis, organ_index)? {
            let name = taxonomy.class_name(LabelSpace::Diagnosis, subtype_id)?;
            let n = freq.get(name).copied().unwrap_or(0);
            if majority.is_none_or(|best| n > best) {
                majority = Some(n);
            }
        }
        baseline_correct += majority.unwrap_or(0);
    }
    Ok(DiagnosisEval {
        sensitivity,
        per_organ_average,
        accuracy: Ratio::new(pooled_correct, pooled_total),
        majority_baseline: Ratio::new(baseline_correct, pooled_total),
    })
}

/// Provenance carried by every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMetadata {
    pub manifest_hash: String,
    pub taxonomy_hash: String,
    pub checkpoint_sha256: String,
    pub split: String,
    /// Instance conventions the metrics were computed under.
    pub rules: InstanceRules,
}

/// The full evaluation document. Serializes deterministically (sorted
/// maps, no timestamps), so identical inputs yield identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub format_version: u32,
    pub metadata: ReportMetadata,
    pub cases: usize,
    pub patient: PatientDetection,
    pub lesion: LesionCounts,
    /// Organ name → macro Dice of its merged tumor classes (detection
    /// space).
    pub dice_detection: BTreeMap<String, Option<f64>>,
    /// Subtype name → macro Dice (diagnosis space).
    pub dice_diagnosis: BTreeMap<String, Option<f64>>,
    pub diagnosis: DiagnosisEval,
}

impl EvalReport {
    /// Canonical JSON bytes (pretty, trailing newline).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let bytes = crate::util::read_bytes(path)?;
        let report: EvalReport = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path, format!("report does not parse: {e}")))?;
        report.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(report)
    }

    /// Check internal consistency: ratios match their counts, counts obey
    /// the matching rule, every quotient lies in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != 1 {
            return Err(Error::Data(format!(
                "unsupported report format_version {}",
                self.format_version
            )));
        }
        for (field, value) in [
            ("manifest_hash", &self.metadata.manifest_hash),
            ("taxonomy_hash", &self.metadata.taxonomy_hash),
            ("checkpoint_sha256", &self.metadata.checkpoint_sha256),
        ] {
            if value.is_empty() {
                return Err(Error::Data(format!("report metadata field {field} is empty")));
            }
        }
        self.metadata.rules.validate()?;
        let ratios = self
            .patient
            .sensitivity
            .values()
            .chain(std::iter::once(&self.patient.specificity))
            .chain(self.diagnosis.sensitivity.values())
            .chain([&self.diagnosis.accuracy, &self.diagnosis.majority_baseline]);
        for ratio in ratios {
            if !ratio.consistent() {
                return Err(Error::Data(format!(
                    "inconsistent ratio {}/{} = {:?}",
                    ratio.hits, ratio.total, ratio.value
                )));
            }
        }
        if !self.lesion.consistent() {
            return Err(Error::Data("inconsistent lesion counts".to_string()));
        }
        let dices = self
            .dice_detection
            .values()
            .chain(self.dice_diagnosis.values())
            .chain(self.diagnosis.per_organ_average.values())
            .flatten();
        for &d in dices {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Data(format!("value {d} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Human-readable summary, one metric per line.
    pub fn summary_lines(&self) -> Vec<String> {
        fn show(v: Option<f64>) -> String {
            v.map_or("n/a".to_string(), |x| format!("{x:.3}"))
        }
        let mut lines = vec![
            format!("cases evaluated: {}", self.cases),
            format!(
                "patient sensitivity (mean over organs): {}",
                show(self.patient.mean_sensitivity())
            ),
        ];
        for (organ, r) in &self.patient.sensitivity {
            lines.push(format!(
                "  {organ}: {} ({}/{})",
                show(r.value),
                r.hits,
                r.total
            ));
        }
        lines.push(format!(
            "patient specificity: {} ({}/{})",
            show(self.patient.specificity.value),
            self.patient.specificity.hits,
            self.patient.specificity.total
        ));
        lines.push(format!(
            "lesions: GT {} | TP {} FP {} FN {} | precision {} recall {}",
            self.lesion.gt_lesions,
            self.lesion.true_positives,
            self.lesion.false_positives,
            self.lesion.false_negatives,
            show(self.lesion.precision),
            show(self.lesion.recall)
        ));
        lines.push(format!(
            "tumor Dice (detection space, macro): {}",
            show(mean_defined(self.dice_detection.values().copied()))
        ));
        for (organ, d) in &self.dice_detection {
            lines.push(format!("  {organ}: {}", show(*d)));
        }
        lines.push(format!(
            "diagnosis accuracy: {} (majority baseline {})",
            show(self.diagnosis.accuracy.value),
            show(self.diagnosis.majority_baseline.value)
        ));
        for (subtype, r) in &self.diagnosis.sensitivity {
            lines.push(format!(
                "  {subtype}: {} ({}/{})",
                show(r.value),
                r.hits,
                r.total
            ));
        }
        lines
    }
}

/// Compute every metric over in-memory cases and assemble a report.
pub fn evaluate_cases(
    cases: &[EvalCase],
    taxonomy: &Taxonomy,
    rules: &InstanceRules,
    metadata: ReportMetadata,
) -> Result<EvalReport> {
    let patient = patient_detection_eval(cases, taxonomy, rules)?;
    let lesion = lesion_detection_eval(cases, taxonomy, rules)?;
    let det_pairs: Vec<(&LabelMap, &LabelMap)> =
        cases.iter().map(|c| (&c.pred_detection, &c.gt_detection)).collect();
    let diag_pairs: Vec<(&LabelMap, &LabelMap)> =
        cases.iter().map(|c| (&c.pred_diagnosis, &c.gt_diagnosis)).collect();
    let dice_detection = dice_eval(&det_pairs, &detection_tumor_groups(taxonomy)?)?;
    let dice_diagnosis = dice_eval(&diag_pairs, &diagnosis_subtype_groups(taxonomy)?)?;

    // Patient diagnoses are recomputed from the predicted maps under this
    // evaluation's instance rules, so the whole report shares one
    // convention regardless of what inference stored.
    let mut predicted_diagnoses = Vec::with_capacity(cases.len());
    for case in cases {
        let instances = extract_instances(
            &case.pred_diagnosis,
            taxonomy,
            LabelSpace::Diagnosis,
            rules.min_voxels,
            rules.connectivity,
        )?;
        predicted_diagnoses.push(patient_diagnosis(&instances, taxonomy)?);
    }
    let pairs: Vec<(&BTreeMap<String, String>, &BTreeMap<String, String>)> = predicted_diagnoses
        .iter()
        .zip(cases.iter())
        .map(|(pred, case)| (pred, &case.gt_diagnoses))
        .collect();
    let diagnosis = diagnosis_eval(&pairs, taxonomy)?;

    let report = EvalReport {
        format_version: 1,
        metadata,
        cases: cases.len(),
        patient,
        lesion,
        dice_detection,
        dice_diagnosis,
        diagnosis,
    };
    report.validate()?;
    Ok(report)
}

/// Evaluate a saved prediction set against one dataset split.
///
/// Fails when the prediction set was made against a different manifest or
/// taxonomy, or when its case ids do not exactly match the split.
pub fn evaluate_predictions(
    dataset_root: &Path,
    manifest: &Manifest,
    split: &str,
    prediction_root: &Path,
    predictions: &PredictionSet,
    rules: &InstanceRules,
) -> Result<EvalReport> {
    rules.validate()?;
    let manifest_hash = manifest.hash_hex()?;
    if predictions.manifest_hash != manifest_hash {
        return Err(Error::Data(
            "prediction set was made against a different manifest".to_string(),
        ));
    }
    if predictions.taxonomy_hash != manifest.taxonomy_hash {
        return Err(Error::Data(
            "prediction set was made against a different taxonomy".to_string(),
        ));
    }
    let split_cases = manifest.split_cases(split);
    if split_cases.is_empty() {
        return Err(Error::Data(format!("split {split:?} has no cases")));
    }
    let by_id: BTreeMap<&str, &crate::infer::PredictedCase> =
        predictions.cases.iter().map(|c| (c.id.as_str(), c)).collect();
    if by_id.len() != predictions.cases.len() {
        return Err(Error::Data("prediction set contains duplicate case ids".to_string()));
    }
    if split_cases.len() != by_id.len()
        || split_cases.iter().any(|c| !by_id.contains_key(c.id.as_str()))
    {
        return Err(Error::Data(format!(
            "prediction set does not cover split {split:?} exactly ({} predictions, {} cases)",
            by_id.len(),
            split_cases.len()
        )));
    }

    let taxonomy = &manifest.taxonomy;
    let mut cases = Vec::with_capacity(split_cases.len());
    for record in split_cases {
        let (gt, space, gt_hash) = caseio::load_labels(&dataset_root.join(&record.labels))?;
        if space != LabelSpace::Diagnosis || gt_hash != manifest.taxonomy_hash {
            return Err(Error::Data(format!(
                "case {:?}: ground-truth labels do not match the manifest",
                record.id
            )));
        }
        let predicted = by_id[record.id.as_str()];
        let load_pred = |rel: &str, want: LabelSpace| -> Result<LabelMap> {
            let (map, space, hash) = caseio::load_labels(&prediction_root.join(rel))?;
            if space != want || hash != manifest.taxonomy_hash {
                return Err(Error::Data(format!(
                    "case {:?}: predicted {want} labels do not match the manifest",
                    record.id
                )));
            }
            Ok(map)
        };
        cases.push(EvalCase::new(
            record.id.clone(),
            gt,
            record.diagnoses.clone(),
            load_pred(&predicted.detection, LabelSpace::Detection)?,
            load_pred(&predicted.diagnosis, LabelSpace::Diagnosis)?,
            taxonomy,
        )?);
    }

    let metadata = ReportMetadata {
        manifest_hash,
        taxonomy_hash: manifest.taxonomy_hash.clone(),
        checkpoint_sha256: predictions.checkpoint_sha256.clone(),
        split: split.to_string(),
        rules: *rules,
    };
    evaluate_cases(&cases, taxonomy, rules, metadata)
}

/// Emit the report's headline metrics as PNG bar charts under `dir`;
/// returns the written paths. Undefined metrics are skipped, and charts
/// whose every bar is undefined are omitted.
pub fn save_report_charts(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |file: &str, title: &str, bars: Vec<(String, Option<f64>)>| -> Result<()> {
        let defined: Vec<(String, f64)> =
            bars.into_iter().filter_map(|(n, v)| v.map(|v| (n, v))).collect();
        if defined.is_empty() {
            return Ok(());
        }
        let path = dir.join(file);
        crate::plot::save_bar_chart(&path, title, &defined)?;
        written.push(path);
        Ok(())
    };
    let mut patient: Vec<(String, Option<f64>)> = report
        .patient
        .sensitivity
        .iter()
        .map(|(n, r)| (n.clone(), r.value))
        .collect();
    patient.push(("specificity".to_string(), report.patient.specificity.value));
    emit("patient_detection.png", "Patient detection", patient)?;
    emit(
        "dice_detection.png",
        "Tumor Dice by organ",
        report.dice_detection.iter().map(|(n, d)| (n.clone(), *d)).collect(),
    )?;
    emit(
        "diagnosis_sensitivity.png",
        "Diagnosis sensitivity",
        report.diagnosis.sensitivity.iter().map(|(n, r)| (n.clone(), r.value)).collect(),
    )?;
    Ok(written)
}

/// One mode's row in the ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub mode: RepresentationMode,
    /// Mean patient sensitivity over organs with tumor-bearing cases.
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// Mean detection-space tumor Dice over organs.
    pub dice: Option<f64>,
    pub checkpoint_sha256: String,
}

/// Comparison of query representations trained and evaluated identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationReport {
    pub format_version: u32,
    pub manifest_hash: String,
    pub train_split: String,
    pub eval_split: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<AblationReport> {
        let bytes = crate::util::read_bytes(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path, format!("ablation report does not parse: {e}")))
    }

    /// Fixed-width text table with one row per mode.
    pub fn render_table(&self) -> String {
        fn show(v: Option<f64>) -> String {
            v.map_or("n/a".to_string(), |x| format!("{x:.3}"))
        }
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>12} {:>12} {:>8}\n",
            "Mode", "Sensitivity", "Specificity", "Dice"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>12} {:>12} {:>8}\n",
                row.mode.to_string(),
                show(row.sensitivity),
                show(row.specificity),
                show(row.dice)
            ));
        }
        out
    }
}

/// Train and evaluate one model per representation mode on identical data
/// and seeds, writing per-mode artifacts plus `ablation.json` and a text
/// table under `out_dir`.
pub fn run_ablation(
    dataset_root: &Path,
    manifest: &Manifest,
    train_split: &str,
    eval_split: &str,
    base_config: &TrainConfig,
    options: &SlidingOptions,
    rules: &InstanceRules,
    modes: &[RepresentationMode],
    out_dir: &Path,
) -> Result<AblationReport> {
    if modes.is_empty() {
        return Err(Error::Config("ablation needs at least one mode".into()));
    }
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut config = base_config.clone();
        config.model.mode = mode;
        let mode_dir = out_dir.join(mode.to_string());
        let outcome = train(dataset_root, manifest, train_split, &config, &mode_dir)?;
        let checkpoint_sha256 = file_sha256(&outcome.checkpoint_path)?;
        let predictions = predict_split(
            dataset_root,
            manifest,
            eval_split,
            &outcome.model,
            &checkpoint_sha256,
            options,
            rules,
            &mode_dir.join("predictions"),
        )?;
        let report = evaluate_predictions(
            dataset_root,
            manifest,
            eval_split,
            &mode_dir.join("predictions"),
            &predictions,
            rules,
        )?;
        report.save(&mode_dir.join("report.json"))?;
        rows.push(AblationRow {
            mode,
            sensitivity: report.patient.mean_sensitivity(),
            specificity: report.patient.specificity.value,
            dice: mean_defined(report.dice_detection.values().copied()),
            checkpoint_sha256,
        });
    }
    let report = AblationReport {
        format_version: 1,
        manifest_hash: manifest.hash_hex()?,
        train_split: train_split.to_string(),
        eval_split: eval_split.to_string(),
        rows,
    };
    report.save(&out_dir.join("ablation.json"))?;
    write_bytes(&out_dir.join("ablation.txt"), report.render_table().as_bytes())?;
    Ok(report)
}
