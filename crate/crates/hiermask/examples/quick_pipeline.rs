//! Minute-scale end-to-end run: generate phantoms, train a small
//! hierarchy model, slide it over the held-out split, and score the
//! predictions at every level.
//!
//! Usage: `cargo run --example quick_pipeline [out_dir]`

use std::path::PathBuf;

use hiermask::eval::evaluate_predictions;
use hiermask::infer::{file_sha256, predict_split, InstanceRules, SlidingOptions};
use hiermask::model::ModelConfig;
use hiermask::phantom::{make_dataset, PhantomSpec};
use hiermask::taxonomy::{Taxonomy, TaxonomySpec};
use hiermask::train::{train, TrainConfig};

fn main() -> hiermask::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hiermask-quick-pipeline"));
    let data = out.join("data");
    let started = std::time::Instant::now();

    // 1. Generate.
    let taxonomy = Taxonomy::new(TaxonomySpec::two_organ())?;
    let spec = PhantomSpec {
        dims: [16, 32, 32],
        min_tumor_voxels: 10,
        organ_disease_prob: 1.0,
        tumor_free_prob: 0.25,
        ..PhantomSpec::default()
    };
    let splits = vec![("train".to_string(), 0.75), ("test".to_string(), 0.25)];
    let manifest = make_dataset(&data, &spec, &taxonomy, 12, 1, &splits)?;
    println!(
        "[{:>5.1}s] generated {} cases ({} train, {} test)",
        started.elapsed().as_secs_f64(),
        manifest.cases.len(),
        manifest.split_cases("train").len(),
        manifest.split_cases("test").len()
    );

    // 2. Train.
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
        epochs: 4,
        steps_per_epoch: 75,
        seed: 0,
        ..TrainConfig::default()
    };
    let outcome = train(&data, &manifest, "train", &config, &out.join("run"))?;
    println!(
        "[{:>5.1}s] trained: loss {:.4} -> {:.4}",
        started.elapsed().as_secs_f64(),
        outcome.trace.first().unwrap().total,
        outcome.trace.last().unwrap().total
    );

    // 3. Infer on the held-out split.
    let options = SlidingOptions { window: config.patch, ..SlidingOptions::default() };
    let rules = InstanceRules { connectivity: 26, min_voxels: 5 };
    let checkpoint_sha = file_sha256(&outcome.checkpoint_path)?;
    let pred_root = out.join("pred");
    let set = predict_split(
        &data,
        &manifest,
        "test",
        &outcome.model,
        &checkpoint_sha,
        &options,
        &rules,
        &pred_root,
    )?;
    let instances: usize = set.cases.iter().map(|c| c.instances.len()).sum();
    println!(
        "[{:>5.1}s] predicted {} cases, {} lesion instances",
        started.elapsed().as_secs_f64(),
        set.cases.len(),
        instances
    );

    // 4. Evaluate.
    let report = evaluate_predictions(&data, &manifest, "test", &pred_root, &set, &rules)?;
    report.save(&pred_root.join("report.json"))?;
    println!("[{:>5.1}s] evaluated:", started.elapsed().as_secs_f64());
    for line in report.summary_lines() {
        println!("  {line}");
    }
    println!("\nartifacts under {}", out.display());
    Ok(())
}
