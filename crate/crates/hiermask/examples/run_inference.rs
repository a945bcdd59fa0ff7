//! Slide a trained model across whole volumes with Gaussian-weighted
//! window blending and flip averaging, then extract lesion instances and a
//! per-organ patient diagnosis from the fused probability maps.
//!
//! Usage: `cargo run --example run_inference [out_dir]`

use std::path::PathBuf;

use hiermask::infer::{file_sha256, predict_split, InstanceRules, SlidingOptions};
use hiermask::model::ModelConfig;
use hiermask::phantom::{make_dataset, PhantomSpec};
use hiermask::taxonomy::{Taxonomy, TaxonomySpec};
use hiermask::train::{train, TrainConfig};

fn main() -> hiermask::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hiermask-run-inference"));
    let data = out.join("data");

    // A small self-contained setup: generate, then briefly train.
    let taxonomy = Taxonomy::new(TaxonomySpec::two_organ())?;
    let spec = PhantomSpec {
        dims: [16, 24, 24],
        min_tumor_voxels: 10,
        organ_disease_prob: 1.0,
        tumor_free_prob: 0.0,
        ..PhantomSpec::default()
    };
    let splits = vec![("train".to_string(), 0.5), ("test".to_string(), 0.5)];
    let manifest = make_dataset(&data, &spec, &taxonomy, 4, 3, &splits)?;
    let config = TrainConfig {
        model: ModelConfig {
            query_dim: 8,
            base_channels: 2,
            heads: 2,
            ffn_expansion: 2,
            downsample: [[1, 2, 2], [2, 2, 2], [2, 1, 1]],
            ..ModelConfig::default()
        },
        patch: [8, 16, 16],
        batch_size: 1,
        epochs: 1,
        steps_per_epoch: 6,
        seed: 0,
        ..TrainConfig::default()
    };
    let outcome = train(&data, &manifest, "train", &config, &out.join("run"))?;
    println!("trained; final loss {:.4}", outcome.trace.last().unwrap().total);

    // Windows smaller than the volume are placed on an overlapping grid and
    // blended with peak-normalized Gaussian weights; each window is averaged
    // over all eight axis flips. Volumes smaller than the window are
    // reflect-padded and cropped back transparently.
    let options = SlidingOptions { window: config.patch, ..SlidingOptions::default() };
    let rules = InstanceRules { connectivity: 26, min_voxels: 5 };
    let checkpoint_sha = file_sha256(&outcome.checkpoint_path)?;
    let set = predict_split(
        &data,
        &manifest,
        "test",
        &outcome.model,
        &checkpoint_sha,
        &options,
        &rules,
        &out.join("pred"),
    )?;

    println!("\npredicted {} cases -> {}", set.cases.len(), out.join("pred").display());
    for case in &set.cases {
        println!("case {}:", case.id);
        println!("  detection map:  {}", case.detection);
        println!("  diagnosis map:  {}", case.diagnosis);
        for inst in &case.instances {
            println!(
                "  instance: {:<18} {:>5} voxels  {:>9.1} mm^3  bbox z{:?} y{:?} x{:?}",
                inst.class, inst.voxels, inst.volume_mm3, inst.bbox[0], inst.bbox[1], inst.bbox[2]
            );
        }
        if case.instances.is_empty() {
            println!("  no instances above {} voxels", rules.min_voxels);
        }
        for (organ, subtype) in &case.diagnoses {
            println!("  diagnosis: {organ} -> {subtype}");
        }
    }
    Ok(())
}
