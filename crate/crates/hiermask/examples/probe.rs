//! Scratch probe for tuning (not part of the deliverable).

use std::time::Instant;

use hiermask::infer::{sliding_window_predict, SlidingOptions};
use hiermask::model::ModelConfig;
use hiermask::phantom::{make_dataset, PhantomSpec};
use hiermask::taxonomy::{LabelSpace, Taxonomy, TaxonomySpec};
use hiermask::train::{train, TrainConfig};

fn main() -> hiermask::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let base_channels: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4);
    let query_dim: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(16);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2);

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let tax = Taxonomy::new(TaxonomySpec::two_organ())?;
    let spec = PhantomSpec {
        dims: [48, 48, 48],
        tumor_free_prob: 0.0,
        organ_disease_prob: 1.0,
        ..PhantomSpec::default()
    };
    let manifest = make_dataset(&data, &spec, &tax, 4, 0, &[("train".into(), 1.0)])?;
    for c in &manifest.cases {
        println!("{}: {:?} tumors={}", c.id, c.diagnoses, c.tumors.len());
    }

    let config = TrainConfig {
        model: ModelConfig {
            query_dim,
            base_channels,
            ..ModelConfig::default()
        },
        patch: [16, 32, 32],
        batch_size: batch,
        epochs: 1,
        steps_per_epoch: steps,
        seed: 0,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let outcome = train(&data, &manifest, "train", &config, &dir.path().join("run"))?;
    let train_secs = t0.elapsed().as_secs_f64();
    println!(
        "train: {steps} steps x batch {batch} in {train_secs:.1}s ({:.0} ms/step)",
        1000.0 * train_secs / steps as f64
    );
    for r in outcome.trace.iter().step_by((steps / 10).max(1)) {
        println!(
            "  step {:>4}: total {:.4} ce_det {:.4} dice_det {:.4} ce_diag {:.4} dice_diag {:.4}",
            r.step, r.total, r.ce_detection, r.dice_detection, r.ce_diagnosis, r.dice_diagnosis
        );
    }
    let last = outcome.trace.last().unwrap();
    println!("  final: total {:.4} dice_det {:.4} dice_diag {:.4}", last.total, last.dice_detection, last.dice_diagnosis);

    // Training tumor soft-Dice on the full train volumes.
    let options = SlidingOptions { window: config.patch, tta: false, ..SlidingOptions::default() };
    let tumor_ids = tax.tumor_ids(LabelSpace::Detection);
    let t1 = Instant::now();
    let mut dices = Vec::new();
    for case in &manifest.cases {
        let (vol, gt) = manifest.load_case(&data, case)?;
        let det_gt = gt.merge_to_detection(&tax)?;
        let probs = sliding_window_predict(&outcome.model, &vol, &options)?;
        let mut num = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        let dims = vol.dims();
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let mut p = 0.0;
                    for &c in &tumor_ids {
                        p += probs.detection[[c as usize, z, y, x]];
                    }
                    let g = if tumor_ids.contains(&det_gt.labels()[[z, y, x]]) { 1.0 } else { 0.0 };
                    num += p * g;
                    psum += p;
                    gsum += g;
                }
            }
        }
        let dice = 2.0 * num / (psum + gsum);
        println!("  {}: tumor soft-dice {:.4} (gt {} vox, pred mass {:.0})", case.id, dice, gsum, psum);
        dices.push(dice);
    }
    let mean = dices.iter().sum::<f64>() / dices.len() as f64;
    println!(
        "mean train tumor soft-dice {:.4}; inference {:.1}s; total {:.1}s",
        mean,
        t1.elapsed().as_secs_f64(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
