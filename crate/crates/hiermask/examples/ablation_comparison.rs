//! Train the three query representations — plain, parallel, hierarchy —
//! on identical data with identical seeds and compare detection quality
//! in one table.
//!
//! Usage: `cargo run --example ablation_comparison [out_dir]`

use std::path::PathBuf;

use hiermask::eval::run_ablation;
use hiermask::infer::{InstanceRules, SlidingOptions};
use hiermask::model::{ModelConfig, RepresentationMode};
use hiermask::phantom::{make_dataset, PhantomSpec};
use hiermask::taxonomy::{Taxonomy, TaxonomySpec};
use hiermask::train::TrainConfig;

fn main() -> hiermask::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hiermask-ablation"));
    let data = out.join("data");

    let taxonomy = Taxonomy::new(TaxonomySpec::two_organ())?;
    let spec = PhantomSpec {
        dims: [16, 24, 24],
        min_tumor_voxels: 10,
        organ_disease_prob: 1.0,
        tumor_free_prob: 0.25,
        ..PhantomSpec::default()
    };
    let splits = vec![("train".to_string(), 0.7), ("test".to_string(), 0.3)];
    let manifest = make_dataset(&data, &spec, &taxonomy, 8, 1, &splits)?;
    for split in ["train", "test"] {
        let cases = manifest.split_cases(split);
        let free = cases.iter().filter(|c| c.diagnoses.is_empty()).count();
        println!("{split}: {} cases ({free} tumor-free)", cases.len());
    }

    // One base config; only `model.mode` varies between rows. Deliberately
    // tiny so the comparison finishes in about a minute — expect noisy
    // numbers, not a faithful ranking.
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
        steps_per_epoch: 10,
        seed: 0,
        ..TrainConfig::default()
    };
    let options = SlidingOptions { window: config.patch, ..SlidingOptions::default() };
    let rules = InstanceRules { connectivity: 26, min_voxels: 5 };
    let modes =
        [RepresentationMode::Plain, RepresentationMode::Parallel, RepresentationMode::Hierarchy];

    let report = run_ablation(
        &data,
        &manifest,
        "train",
        "test",
        &config,
        &options,
        &rules,
        &modes,
        &out.join("ablation"),
    )?;

    println!("\n{}", report.render_table());
    println!("per-mode artifacts (checkpoint, predictions, report.json) under:");
    for row in &report.rows {
        println!("  {}", out.join("ablation").join(row.mode.to_string()).display());
    }
    Ok(())
}
