//! Whole-volume inference: Gaussian-blended sliding windows with optional
//! flip test-time augmentation, connected-component instance extraction,
//! and the patient-level diagnosis rule (largest component per organ).
//!
//! Window forwards run serially in a fixed order, so predictions are
//! deterministic for a given model and volume.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::caseio;
use crate::error::{Error, Result};
use crate::model::{Model, PatchPrediction};
use crate::taxonomy::{LabelSpace, Taxonomy};
use crate::util::sha256_hex;
use crate::volume::{all_flips, flip3, flip4_spatial, argmax_labels, pad_to, Dims, LabelMap, Spacing, Volume};

/// Sliding-window settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlidingOptions {
    /// Window extent; should equal the training patch size.
    pub window: Dims,
    /// Window stride as a fraction of the window per axis.
    pub step_frac: f64,
    /// Weight overlapping windows with a separable Gaussian instead of
    /// uniformly.
    pub gaussian: bool,
    /// Gaussian σ per axis as a fraction of the half-window.
    pub sigma_frac: f64,
    /// Average predictions over all eight axis-flip combinations.
    pub tta: bool,
}

impl Default for SlidingOptions {
    fn default() -> Self {
        SlidingOptions {
            window: [16, 32, 32],
            step_frac: 0.5,
            gaussian: true,
            sigma_frac: 0.25,
            tta: true,
        }
    }
}

impl SlidingOptions {
    pub fn validate(&self) -> Result<()> {
        if self.window.iter().any(|&w| w == 0) {
            return Err(Error::Config("window dims must be positive".into()));
        }
        if !(self.step_frac > 0.0 && self.step_frac <= 1.0) {
            return Err(Error::Config(format!("step_frac {} outside (0, 1]", self.step_frac)));
        }
        if !(self.sigma_frac > 0.0) {
            return Err(Error::Config("sigma_frac must be positive".into()));
        }
        Ok(())
    }
}

/// Instance-extraction conventions shared by inference and evaluation:
/// which neighborhood defines a component and how small a component may be
/// before it is discarded as noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRules {
    /// Component connectivity, 6 or 26.
    pub connectivity: u8,
    /// Minimum component size in voxels; smaller components are dropped.
    pub min_voxels: usize,
}

impl Default for InstanceRules {
    fn default() -> Self {
        InstanceRules { connectivity: 26, min_voxels: 200 }
    }
}

impl InstanceRules {
    /// Default rules with the size threshold rescaled to `spacing` so the
    /// physical volume cut-off stays constant.
    pub fn for_spacing(spacing: Spacing) -> Self {
        InstanceRules { connectivity: 26, min_voxels: scaled_min_voxels(spacing) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.connectivity != 6 && self.connectivity != 26 {
            return Err(Error::Config(format!(
                "connectivity {} not in {{6, 26}}",
                self.connectivity
            )));
        }
        if self.min_voxels == 0 {
            return Err(Error::Config("min_voxels must be at least 1".into()));
        }
        Ok(())
    }
}

/// Anything that maps an intensity patch to dual-space probabilities.
/// Implemented by [`Model`]; tests substitute stubs.
pub trait PatchPredictor {
    /// `(detection classes, diagnosis classes)`.
    fn class_counts(&self) -> (usize, usize);
    fn predict(&self, patch: &ArrayView3<'_, f32>) -> Result<PatchPrediction>;
}

impl PatchPredictor for Model {
    fn class_counts(&self) -> (usize, usize) {
        (
            self.taxonomy.class_count(LabelSpace::Detection),
            self.taxonomy.class_count(LabelSpace::Diagnosis),
        )
    }

    fn predict(&self, patch: &ArrayView3<'_, f32>) -> Result<PatchPrediction> {
        let p = self.predict_patch(patch)?;
        Ok(PatchPrediction { detection: p.detection, diagnosis: p.diagnosis })
    }
}

/// Full-volume probabilities for both label spaces.
#[derive(Debug, Clone)]
pub struct VolumePrediction {
    /// `(C_det, z, y, x)`, per-voxel sums 1.
    pub detection: Array4<f64>,
    /// `(C_diag, z, y, x)`, per-voxel sums 1.
    pub diagnosis: Array4<f64>,
}

/// Separable window weights: a Gaussian centered on the window center,
/// normalized to peak 1. σ per axis is `sigma_frac` of the half-window,
/// so the profile is resolution-independent; a length-1 axis contributes
/// weight 1. Symmetric under each axis reflection by construction.
pub fn gaussian_weight(window: Dims, sigma_frac: f64) -> Array3<f64> {
    let axis = |n: usize| -> Vec<f64> {
        if n == 1 {
            return vec![1.0];
        }
        let center = (n - 1) as f64 / 2.0;
        let sigma = sigma_frac * center;
        (0..n)
            .map(|i| {
                let d = i as f64 - center;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect()
    };
    let (wz, wy, wx) = (axis(window[0]), axis(window[1]), axis(window[2]));
    Array3::from_shape_fn(window, |(z, y, x)| wz[z] * wy[y] * wx[x])
}

fn axis_origins(dim: usize, window: usize, step_frac: f64) -> Vec<usize> {
    let step = ((window as f64 * step_frac).round() as usize).max(1);
    let mut origins = Vec::new();
    let mut o = 0usize;
    loop {
        origins.push(o.min(dim - window));
        if o + window >= dim {
            break;
        }
        o += step;
    }
    origins.dedup();
    origins
}

/// Predict a whole volume by blending overlapping window forwards.
///
/// Volumes smaller than the window are reflect-padded, predicted, and
/// cropped back. With `tta`, each window is averaged over all eight flip
/// combinations (flip input, un-flip output). Accumulated probabilities
/// are normalized by the accumulated weight, so per-voxel sums stay 1.
pub fn sliding_window_predict<P: PatchPredictor>(
    predictor: &P,
    volume: &Volume,
    options: &SlidingOptions,
) -> Result<VolumePrediction> {
    options.validate()?;
    let dims = volume.dims();
    if (0..3).any(|ax| dims[ax] < options.window[ax]) {
        let (padded, lo) = pad_to(&volume.voxels().view(), options.window)?;
        let vol = Volume::new(padded, volume.spacing())?;
        let full = sliding_window_predict(predictor, &vol, options)?;
        let crop = |p: &Array4<f64>| {
            p.slice(ndarray::s![
                ..,
                lo[0]..lo[0] + dims[0],
                lo[1]..lo[1] + dims[1],
                lo[2]..lo[2] + dims[2]
            ])
            .to_owned()
        };
        return Ok(VolumePrediction {
            detection: crop(&full.detection),
            diagnosis: crop(&full.diagnosis),
        });
    }

    let (c_det, c_diag) = predictor.class_counts();
    let window = options.window;
    let weight = if options.gaussian {
        gaussian_weight(window, options.sigma_frac)
    } else {
        Array3::ones(window)
    };
    let flips: &[crate::volume::FlipMask] =
        if options.tta { &all_flips() } else { &[[false; 3]] };

    let mut det_acc = Array4::<f64>::zeros((c_det, dims[0], dims[1], dims[2]));
    let mut diag_acc = Array4::<f64>::zeros((c_diag, dims[0], dims[1], dims[2]));
    let mut w_acc = Array3::<f64>::zeros(dims);

    for &z0 in &axis_origins(dims[0], window[0], options.step_frac) {
        for &y0 in &axis_origins(dims[1], window[1], options.step_frac) {
            for &x0 in &axis_origins(dims[2], window[2], options.step_frac) {
                let patch = volume.voxels().slice(ndarray::s![
                    z0..z0 + window[0],
                    y0..y0 + window[1],
                    x0..x0 + window[2]
                ]);
                let mut det = Array4::<f64>::zeros((c_det, window[0], window[1], window[2]));
                let mut diag = Array4::<f64>::zeros((c_diag, window[0], window[1], window[2]));
                for &flip in flips {
                    let flipped = flip3(&patch, flip);
                    let pred = predictor.predict(&flipped.view())?;
                    det += &flip4_spatial(&pred.detection, flip);
                    diag += &flip4_spatial(&pred.diagnosis, flip);
                }
                let scale = 1.0 / flips.len() as f64;
                for z in 0..window[0] {
                    for y in 0..window[1] {
                        for x in 0..window[2] {
                            let w = weight[[z, y, x]];
                            let (gz, gy, gx) = (z0 + z, y0 + y, x0 + x);
                            for c in 0..c_det {
                                det_acc[[c, gz, gy, gx]] += w * det[[c, z, y, x]] * scale;
                            }
                            for c in 0..c_diag {
                                diag_acc[[c, gz, gy, gx]] += w * diag[[c, z, y, x]] * scale;
                            }
                            w_acc[[gz, gy, gx]] += w;
                        }
                    }
                }
            }
        }
    }

    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let w = w_acc[[z, y, x]];
                debug_assert!(w > 0.0, "window layout left voxel uncovered");
                for c in 0..c_det {
                    det_acc[[c, z, y, x]] /= w;
                }
                for c in 0..c_diag {
                    diag_acc[[c, z, y, x]] /= w;
                }
            }
        }
    }
    Ok(VolumePrediction { detection: det_acc, diagnosis: diag_acc })
}

/// Partition the true voxels of `mask` into maximal connected components.
///
/// `connectivity` is 6 (faces) or 26 (faces, edges, corners). Components
/// are ordered by their first voxel in raster scan order and each voxel
/// list is sorted ascending.
pub fn connected_components(
    mask: &ArrayView3<'_, bool>,
    connectivity: u8,
) -> Result<Vec<Vec<[usize; 3]>>> {
    if connectivity != 6 && connectivity != 26 {
        return Err(Error::Config(format!("connectivity {connectivity} not in {{6, 26}}")));
    }
    let (dz, dy, dx) = mask.dim();
    let mut seen = Array3::<bool>::from_elem((dz, dy, dx), false);
    let mut components = Vec::new();
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                if !mask[[z, y, x]] || seen[[z, y, x]] {
                    continue;
                }
                let mut comp = Vec::new();
                let mut queue = std::collections::VecDeque::new();
                seen[[z, y, x]] = true;
                queue.push_back([z, y, x]);
                while let Some(v) = queue.pop_front() {
                    comp.push(v);
                    for nz in v[0].saturating_sub(1)..=(v[0] + 1).min(dz - 1) {
                        for ny in v[1].saturating_sub(1)..=(v[1] + 1).min(dy - 1) {
                            for nx in v[2].saturating_sub(1)..=(v[2] + 1).min(dx - 1) {
                                let manhattan = nz.abs_diff(v[0])
                                    + ny.abs_diff(v[1])
                                    + nx.abs_diff(v[2]);
                                if manhattan == 0 || (connectivity == 6 && manhattan != 1) {
                                    continue;
                                }
                                if mask[[nz, ny, nx]] && !seen[[nz, ny, nx]] {
                                    seen[[nz, ny, nx]] = true;
                                    queue.push_back([nz, ny, nx]);
                                }
                            }
                        }
                    }
                }
                comp.sort_unstable();
                components.push(comp);
            }
        }
    }
    Ok(components)
}

/// A single predicted (or ground-truth) lesion: one connected component of
/// one tumor class.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionInstance {
    pub class_id: u8,
    /// Sorted voxel coordinates.
    pub voxels: Vec<[usize; 3]>,
    pub volume_mm3: f64,
    /// Inclusive `[lo, hi]` per axis.
    pub bbox: [[usize; 2]; 3],
}

impl LesionInstance {
    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }
}

/// The instance-size threshold (200 voxels) expressed at a reference
/// spacing of (3.0, 0.8, 0.8) mm and rescaled to the actual voxel volume.
pub fn scaled_min_voxels(spacing: Spacing) -> usize {
    let reference_mm3 = 200.0 * (3.0 * 0.8 * 0.8);
    let voxel = spacing[0] * spacing[1] * spacing[2];
    ((reference_mm3 / voxel).round() as usize).max(1)
}

/// Extract per-class connected components of tumor classes, dropping
/// components smaller than `min_voxels`. Organ and background labels never
/// produce instances.
pub fn extract_instances(
    map: &LabelMap,
    taxonomy: &Taxonomy,
    space: LabelSpace,
    min_voxels: usize,
    connectivity: u8,
) -> Result<Vec<LesionInstance>> {
    map.validate_ids(taxonomy, space)?;
    let voxel_mm3 = map.voxel_volume_mm3();
    let mut out = Vec::new();
    for &class in &taxonomy.tumor_ids(space) {
        let mask = map.labels().mapv(|l| l == class);
        for comp in connected_components(&mask.view(), connectivity)? {
            if comp.len() < min_voxels {
                continue;
            }
            let mut bbox = [[usize::MAX, 0]; 3];
            for v in &comp {
                for ax in 0..3 {
                    bbox[ax][0] = bbox[ax][0].min(v[ax]);
                    bbox[ax][1] = bbox[ax][1].max(v[ax]);
                }
            }
            out.push(LesionInstance {
                class_id: class,
                volume_mm3: comp.len() as f64 * voxel_mm3,
                voxels: comp,
                bbox,
            });
        }
    }
    Ok(out)
}

/// Patient-level diagnosis: for each organ, the class of the largest
/// instance among that organ's tumor classes wins; organs with no instance
/// get no entry. Ties by voxel count resolve to the lower class id, then
/// to the earlier instance in scan order.
pub fn patient_diagnosis(
    instances: &[LesionInstance],
    taxonomy: &Taxonomy,
) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (organ_index, &organ_id) in taxonomy.organ_ids().iter().enumerate() {
        let candidates = taxonomy.organ_tumor_ids(LabelSpace::Diagnosis, organ_index)?;
        let mut best: Option<&LesionInstance> = None;
        // Instances arrive sorted by class then scan order, so strict
        // comparison implements both documented tie-breaks.
        for inst in instances.iter().filter(|i| candidates.contains(&i.class_id)) {
            if best.is_none_or(|b| inst.voxel_count() > b.voxel_count()) {
                best = Some(inst);
            }
        }
        if let Some(inst) = best {
            out.insert(
                taxonomy.class_name(LabelSpace::Diagnosis, organ_id)?.to_string(),
                taxonomy.class_name(LabelSpace::Diagnosis, inst.class_id)?.to_string(),
            );
        }
    }
    Ok(out)
}

/// Everything predicted for one case.
#[derive(Debug, Clone)]
pub struct CasePrediction {
    pub probabilities: VolumePrediction,
    pub detection_labels: LabelMap,
    pub diagnosis_labels: LabelMap,
    /// Diagnosis-space instances above the size threshold.
    pub instances: Vec<LesionInstance>,
    /// Organ name → predicted subtype name.
    pub diagnoses: BTreeMap<String, String>,
}

/// Run the full per-case pipeline: sliding-window probabilities → argmax
/// label maps → instance extraction → patient diagnosis.
pub fn predict_case(
    model: &Model,
    volume: &Volume,
    options: &SlidingOptions,
    rules: &InstanceRules,
) -> Result<CasePrediction> {
    rules.validate()?;
    let probabilities = sliding_window_predict(model, volume, options)?;
    let spacing = volume.spacing();
    let detection_labels = LabelMap::new(argmax_labels(&probabilities.detection), spacing)?;
    let diagnosis_labels = LabelMap::new(argmax_labels(&probabilities.diagnosis), spacing)?;
    let instances = extract_instances(
        &diagnosis_labels,
        &model.taxonomy,
        LabelSpace::Diagnosis,
        rules.min_voxels,
        rules.connectivity,
    )?;
    let diagnoses = patient_diagnosis(&instances, &model.taxonomy)?;
    Ok(CasePrediction {
        probabilities,
        detection_labels,
        diagnosis_labels,
        instances,
        diagnoses,
    })
}

/// Compact serialized form of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub class: String,
    pub voxels: usize,
    pub volume_mm3: f64,
    pub bbox: [[usize; 2]; 3],
}

/// One case inside a saved prediction set; label paths are relative to the
/// prediction root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedCase {
    pub id: String,
    pub detection: String,
    pub diagnosis: String,
    pub instances: Vec<InstanceSummary>,
    pub diagnoses: BTreeMap<String, String>,
}

/// Saved predictions for a set of cases, as written by the `infer`
/// command and consumed by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionSet {
    pub format_version: u32,
    /// Hash of the manifest the predictions were made against.
    pub manifest_hash: String,
    pub taxonomy_hash: String,
    /// SHA-256 of the checkpoint file used, if any.
    pub checkpoint_sha256: String,
    pub cases: Vec<PredictedCase>,
}

impl PredictionSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        crate::util::write_bytes(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<PredictionSet> {
        let bytes = crate::util::read_bytes(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path, format!("bad prediction set: {e}")))
    }
}

/// Write one case's label maps under `root` and return its record.
pub fn save_case_prediction(
    root: &Path,
    case_id: &str,
    prediction: &CasePrediction,
    taxonomy: &Taxonomy,
) -> Result<PredictedCase> {
    let det_rel = format!("predictions/{case_id}.det.lab");
    let diag_rel = format!("predictions/{case_id}.diag.lab");
    let hash = taxonomy.hash_hex();
    caseio::save_labels(
        &root.join(&det_rel),
        &prediction.detection_labels,
        LabelSpace::Detection,
        &hash,
    )?;
    caseio::save_labels(
        &root.join(&diag_rel),
        &prediction.diagnosis_labels,
        LabelSpace::Diagnosis,
        &hash,
    )?;
    let mut instances = Vec::with_capacity(prediction.instances.len());
    for inst in &prediction.instances {
        instances.push(InstanceSummary {
            class: taxonomy.class_name(LabelSpace::Diagnosis, inst.class_id)?.to_string(),
            voxels: inst.voxel_count(),
            volume_mm3: inst.volume_mm3,
            bbox: inst.bbox,
        });
    }
    Ok(PredictedCase {
        id: case_id.to_string(),
        detection: det_rel,
        diagnosis: diag_rel,
        instances,
        diagnoses: prediction.diagnoses.clone(),
    })
}

/// SHA-256 of a file's bytes, for provenance records.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&crate::util::read_bytes(path)?))
}

/// Predict every case of one dataset split and save the results under
/// `out_root` (label maps plus `predictions.json`). Returns the saved set.
pub fn predict_split(
    dataset_root: &Path,
    manifest: &crate::caseio::Manifest,
    split: &str,
    model: &Model,
    checkpoint_sha256: &str,
    options: &SlidingOptions,
    rules: &InstanceRules,
    out_root: &Path,
) -> Result<PredictionSet> {
    options.validate()?;
    rules.validate()?;
    if model.taxonomy.hash_hex() != manifest.taxonomy_hash {
        return Err(Error::Data(
            "model taxonomy does not match the dataset manifest".to_string(),
        ));
    }
    let cases = manifest.split_cases(split);
    if cases.is_empty() {
        return Err(Error::Data(format!("split {split:?} has no cases")));
    }
    let mut records = Vec::with_capacity(cases.len());
    for case in cases {
        let (volume, _labels) = manifest.load_case(dataset_root, case)?;
        let prediction = predict_case(model, &volume, options, rules)?;
        records.push(save_case_prediction(out_root, &case.id, &prediction, &model.taxonomy)?);
    }
    let set = PredictionSet {
        format_version: 1,
        manifest_hash: manifest.hash_hex()?,
        taxonomy_hash: manifest.taxonomy_hash.clone(),
        checkpoint_sha256: checkpoint_sha256.to_string(),
        cases: records,
    };
    set.save(&out_root.join("predictions.json"))?;
    Ok(set)
}
