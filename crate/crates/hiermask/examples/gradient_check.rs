//! Verify the analytic gradients of the full dual loss against central
//! finite differences on a toy model and patch.
//!
//! Usage: `cargo run --example gradient_check`

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hiermask::autodiff::Graph;
use hiermask::gradcheck::{check_gradients, GradCheckOptions};
use hiermask::model::{Model, ModelConfig};
use hiermask::params::ParamStore;
use hiermask::taxonomy::{LabelSpace, Taxonomy, TaxonomySpec};

fn main() -> hiermask::Result<()> {
    let taxonomy = Taxonomy::new(TaxonomySpec::two_organ())?;
    let config = ModelConfig {
        query_dim: 8,
        base_channels: 2,
        heads: 2,
        ffn_expansion: 2,
        // Keeps the coarsest level at 2³ so instance norms stay
        // non-degenerate while the finest level stays small.
        downsample: [[1, 2, 2], [2, 2, 2], [2, 1, 1]],
        ..ModelConfig::default()
    };
    let model = Model::init(taxonomy.clone(), config.clone(), 7)?;

    // A random 8³ patch with labels drawn over the full diagnosis space.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let patch = Array3::from_shape_fn((8, 8, 8), |_| rng.random_range(-80.0_f32..90.0));
    let diag_classes = taxonomy.class_count(LabelSpace::Diagnosis) as u8;
    let labels = Array3::from_shape_fn((8, 8, 8), |_| rng.random_range(0..diag_classes));

    let (loss, analytic) = model.loss_and_grads(&patch.view(), &labels.view())?;
    println!(
        "loss: total {:.5} (ce_det {:.5} dice_det {:.5} ce_diag {:.5} dice_diag {:.5})",
        loss.total, loss.ce_detection, loss.dice_detection, loss.ce_diagnosis, loss.dice_diagnosis
    );
    println!("parameters: {} tensors, up to 4 entries spot-checked each", analytic.len());

    // The probe only needs the forward loss, so skip the backward pass.
    let eval = |store: &ParamStore| -> hiermask::Result<f64> {
        let probe =
            Model { config: config.clone(), taxonomy: taxonomy.clone(), params: store.clone() };
        let mut g = Graph::new();
        let bound = probe.params.bind(&mut g);
        let (_, loss) = probe.loss(&mut g, &bound, &patch.view(), &labels.view())?;
        Ok(loss.total)
    };
    // A smaller step than the default keeps truncation error of the central
    // difference below tolerance for this deeply composed loss.
    let opts = GradCheckOptions { max_entries_per_tensor: 4, step: 1e-6, ..Default::default() };
    let report = check_gradients(&model.params, &analytic, eval, &opts)?;

    println!(
        "checked {} entries; max relative error {:.3e} (tolerance {:.1e})",
        report.entries_checked, report.max_relative_error, report.tolerance
    );
    if let Some(worst) = &report.worst {
        println!(
            "worst entry: {}[{}] analytic {:.6e} numeric {:.6e}",
            worst.name, worst.flat_index, worst.analytic, worst.numeric
        );
    }
    if report.passed() {
        println!("PASS: analytic gradients match finite differences");
        Ok(())
    } else {
        Err(hiermask::Error::Data("gradient check failed".into()))
    }
}
