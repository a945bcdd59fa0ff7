//! Score a set of saved predictions at all three levels — patient
//! detection, lesion counting and voxel overlap — plus subtype diagnosis,
//! and render the summary charts.
//!
//! Predictions are crafted by hand here (ground truth copied verbatim,
//! then a degraded variant) so the expected scores are obvious; see the
//! `run_inference` example for producing them with a model.
//!
//! Usage: `cargo run --example evaluate_predictions [out_dir]`

use std::path::{Path, PathBuf};

use hiermask::caseio::{save_labels, Manifest};
use hiermask::eval::{evaluate_predictions, save_report_charts};
use hiermask::infer::{InstanceRules, PredictedCase, PredictionSet};
use hiermask::phantom::{make_dataset, PhantomSpec};
use hiermask::taxonomy::{LabelSpace, Taxonomy, TaxonomySpec};
use hiermask::volume::LabelMap;

/// Write one case's prediction files, optionally blanking the upper half
/// of the z range to simulate a model that misses part of every lesion.
fn save_prediction(
    root: &Path,
    manifest: &Manifest,
    taxonomy: &Taxonomy,
    case_id: &str,
    gt: &LabelMap,
    degrade: bool,
) -> hiermask::Result<PredictedCase> {
    let mut labels = gt.labels().clone();
    if degrade {
        let half = labels.shape()[0] / 2;
        labels.slice_mut(ndarray::s![half.., .., ..]).fill(0);
    }
    let diag = LabelMap::new(labels, gt.spacing())?;
    let det = diag.merge_to_detection(taxonomy)?;
    let det_rel = format!("predictions/{case_id}.det.lab");
    let diag_rel = format!("predictions/{case_id}.diag.lab");
    save_labels(&root.join(&det_rel), &det, LabelSpace::Detection, &manifest.taxonomy_hash)?;
    save_labels(&root.join(&diag_rel), &diag, LabelSpace::Diagnosis, &manifest.taxonomy_hash)?;
    Ok(PredictedCase {
        id: case_id.to_string(),
        detection: det_rel,
        diagnosis: diag_rel,
        instances: Vec::new(),
        diagnoses: Default::default(),
    })
}

fn evaluate(
    data: &Path,
    manifest: &Manifest,
    taxonomy: &Taxonomy,
    out: &Path,
    degrade: bool,
) -> hiermask::Result<()> {
    let pred_root = out.join(if degrade { "pred_degraded" } else { "pred_perfect" });
    let mut cases = Vec::new();
    for record in &manifest.cases {
        let (_, gt) = manifest.load_case(data, record)?;
        cases.push(save_prediction(&pred_root, manifest, taxonomy, &record.id, &gt, degrade)?);
    }
    let predictions = PredictionSet {
        format_version: 1,
        manifest_hash: manifest.hash_hex()?,
        taxonomy_hash: manifest.taxonomy_hash.clone(),
        checkpoint_sha256: "handmade".into(),
        cases,
    };

    let rules = InstanceRules { connectivity: 26, min_voxels: 5 };
    let report = evaluate_predictions(data, manifest, "test", &pred_root, &predictions, &rules)?;
    let label = if degrade { "degraded (upper z half blanked)" } else { "perfect copy" };
    println!("\n=== {label} ===");
    for line in report.summary_lines() {
        println!("{line}");
    }
    report.save(&pred_root.join("report.json"))?;
    for chart in save_report_charts(&report, &pred_root)? {
        println!("chart: {}", chart.display());
    }
    Ok(())
}

fn main() -> hiermask::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hiermask-evaluate-predictions"));
    let data = out.join("data");

    let taxonomy = Taxonomy::new(TaxonomySpec::two_organ())?;
    let spec = PhantomSpec {
        dims: [16, 24, 24],
        min_tumor_voxels: 10,
        tumor_free_prob: 0.5,
        organ_disease_prob: 1.0,
        ..PhantomSpec::default()
    };
    let manifest = make_dataset(&data, &spec, &taxonomy, 6, 9, &[("test".to_string(), 1.0)])?;
    let free = manifest.cases.iter().filter(|c| c.diagnoses.is_empty()).count();
    println!("dataset: 6 cases, {free} tumor-free");

    // Copying the ground truth scores 1.0 everywhere. Blanking the upper z
    // half wipes out the organ living there while leaving the other organ's
    // scores untouched — each level localizes the damage differently:
    // patient sensitivity and lesion recall drop by whole cases/lesions,
    // Dice by the erased voxel fraction.
    evaluate(&data, &manifest, &taxonomy, &out, false)?;
    evaluate(&data, &manifest, &taxonomy, &out, true)?;
    Ok(())
}
