//! Train a compact hierarchy-mode model on synthetic phantoms and watch
//! the dual segmentation loss fall, then round-trip the checkpoint.
//!
//! Usage: `cargo run --example train_model [out_dir]`

use std::path::PathBuf;

use hiermask::model::{load_checkpoint, ModelConfig};
use hiermask::phantom::{make_dataset, PhantomSpec};
use hiermask::taxonomy::{Taxonomy, TaxonomySpec};
use hiermask::train::{train, TrainConfig};

fn main() -> hiermask::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hiermask-train-model"));
    let data = out.join("data");

    let taxonomy = Taxonomy::new(TaxonomySpec::two_organ())?;
    let spec = PhantomSpec {
        dims: [16, 32, 32],
        min_tumor_voxels: 10,
        organ_disease_prob: 1.0,
        tumor_free_prob: 0.2,
        ..PhantomSpec::default()
    };
    let manifest = make_dataset(&data, &spec, &taxonomy, 6, 11, &[("train".into(), 1.0)])?;
    println!("dataset: {} cases at {:?} voxels", manifest.cases.len(), spec.dims);

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
        epochs: 3,
        steps_per_epoch: 8,
        seed: 4,
        ..TrainConfig::default()
    };
    println!(
        "training {} mode, {} epochs x {} steps, patch {:?}",
        config.model.mode, config.epochs, config.steps_per_epoch, config.patch
    );

    let outcome = train(&data, &manifest, "train", &config, &out.join("run"))?;
    for (e, chunk) in outcome.trace.chunks(config.steps_per_epoch).enumerate() {
        let mean = chunk.iter().map(|r| r.total).sum::<f64>() / chunk.len() as f64;
        let last = chunk.last().unwrap();
        println!(
            "epoch {e}: mean total {mean:.4}  (last step: ce_det {:.4} dice_det {:.4} \
             ce_diag {:.4} dice_diag {:.4})",
            last.ce_detection, last.dice_detection, last.ce_diagnosis, last.dice_diagnosis
        );
    }
    let first = outcome.trace.first().unwrap().total;
    let last = outcome.trace.last().unwrap().total;
    println!("total loss {first:.4} -> {last:.4} over {} steps", outcome.trace.len());

    // The checkpoint captures config, taxonomy and weights; reloading gives
    // back a model with the same architecture and the training patch shape.
    let (reloaded, train_patch) = load_checkpoint(&outcome.checkpoint_path)?;
    assert_eq!(reloaded.config, outcome.model.config);
    assert_eq!(train_patch, Some(config.patch));
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("loss trace: {}", outcome.trace_path.display());
    Ok(())
}
