//! Model assembly: configuration, parameter initialization, the full
//! forward pass from a raw patch to dual-task masks, and checkpointing.

use std::collections::BTreeMap;
use std::path::Path;

use clap::ValueEnum;
use ndarray::{Array4, ArrayView3, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::backbone;
use crate::decode::{self, DualMasks, LossBreakdown};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::queries;
use crate::taxonomy::Taxonomy;
use crate::util::{read_bytes, write_bytes};

/// How class queries are structured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationMode {
    /// Diagnosis queries are derived from detection queries by learned
    /// per-major expansion matrices; both heads are supervised.
    Hierarchy,
    /// Detection and diagnosis queries are independent learnable sets;
    /// both heads are supervised.
    Parallel,
    /// Only diagnosis queries exist; detection output is obtained post hoc
    /// by summing subtype probabilities into their major.
    Plain,
}

impl std::fmt::Display for RepresentationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RepresentationMode::Hierarchy => f.write_str("hierarchy"),
            RepresentationMode::Parallel => f.write_str("parallel"),
            RepresentationMode::Plain => f.write_str("plain"),
        }
    }
}

/// Architecture and numeric hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: RepresentationMode,
    /// Query / feature embedding width `d`.
    pub query_dim: usize,
    /// Base channel width `c`; encoder levels use `c, 2c, 4c, 8c`.
    pub base_channels: usize,
    /// Attention heads; must divide `query_dim`.
    pub heads: usize,
    /// FFN hidden width as a multiple of `query_dim`.
    pub ffn_expansion: usize,
    /// Transformer decoder layers (1–3); layer `l` attends to pyramid
    /// level `4 − l + 1`, i.e. coarsest first.
    pub decoder_layers: usize,
    /// Per-transition spatial downsampling factors `(z, y, x)`.
    pub downsample: [[usize; 3]; 3],
    /// Epsilon inside normalization denominators.
    pub norm_eps: f64,
    /// Additive stabilizer inside the per-voxel feature norm:
    /// features are divided by `sqrt(‖f‖² + eps)`, so gradients stay
    /// bounded even at voxels whose features vanish.
    pub feature_norm_eps: f64,
    /// Additive smoothing in both soft-Dice numerator and denominator.
    pub dice_smooth: f64,
    /// Input intensities are mapped to `(v − offset) / scale`.
    pub intensity_offset: f64,
    pub intensity_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: RepresentationMode::Hierarchy,
            query_dim: 16,
            base_channels: 8,
            heads: 4,
            ffn_expansion: 4,
            decoder_layers: 3,
            downsample: [[2, 2, 2], [2, 2, 2], [2, 2, 2]],
            norm_eps: 1e-5,
            feature_norm_eps: 1e-4,
            dice_smooth: 1.0,
            intensity_offset: 0.0,
            intensity_scale: 100.0,
        }
    }
}

impl ModelConfig {
    /// The reference full-scale instantiation: `d = 32`, base width 32,
    /// anisotropic downsampling that halves `z` only at the two coarsest
    /// transitions (for patches like 48×192×192 at 3×0.8×0.8 mm).
    pub fn reference() -> Self {
        ModelConfig {
            query_dim: 32,
            base_channels: 32,
            downsample: [[1, 2, 2], [2, 2, 2], [2, 2, 2]],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_dim == 0 || self.base_channels == 0 {
            return Err(Error::Config("query_dim and base_channels must be positive".into()));
        }
        if self.heads == 0 || self.query_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide query_dim ({})",
                self.heads, self.query_dim
            )));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::Config("ffn_expansion must be positive".into()));
        }
        if self.decoder_layers == 0 || self.decoder_layers > 3 {
            return Err(Error::Config(format!(
                "decoder_layers must be 1..=3, got {}",
                self.decoder_layers
            )));
        }
        if self.downsample.iter().flatten().any(|&f| f == 0) {
            return Err(Error::Config("downsample factors must be positive".into()));
        }
        if self.downsample.iter().flatten().all(|&f| f == 1) {
            return Err(Error::Config("at least one downsample factor must exceed 1".into()));
        }
        for v in [self.norm_eps, self.feature_norm_eps, self.dice_smooth] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config("epsilons must be finite and positive".into()));
            }
        }
        if !(self.intensity_scale.is_finite() && self.intensity_scale != 0.0) {
            return Err(Error::Config("intensity_scale must be finite and nonzero".into()));
        }
        if !self.intensity_offset.is_finite() {
            return Err(Error::Config("intensity_offset must be finite".into()));
        }
        Ok(())
    }

    /// Total downsampling per axis across all transitions.
    pub fn total_downsample(&self) -> [usize; 3] {
        let mut total = [1usize; 3];
        for f in &self.downsample {
            for ax in 0..3 {
                total[ax] *= f[ax];
            }
        }
        total
    }

    /// Check a patch extent is compatible with the pyramid.
    pub fn check_patch(&self, dims: [usize; 3]) -> Result<()> {
        let total = self.total_downsample();
        for ax in 0..3 {
            if dims[ax] == 0 || dims[ax] % total[ax] != 0 {
                return Err(Error::Config(format!(
                    "patch dims {dims:?} must be divisible by the total downsampling {total:?}"
                )));
            }
        }
        Ok(())
    }

    /// Map raw intensities into network input range.
    pub fn normalize(&self, v: f32) -> f64 {
        (v as f64 - self.intensity_offset) / self.intensity_scale
    }
}

/// Dual-head prediction for one patch, as probability grids.
pub struct PatchPrediction {
    /// Detection-space probabilities `(C_det, z, y, x)`.
    pub detection: Array4<f64>,
    /// Diagnosis-space probabilities `(C_diag, z, y, x)`.
    pub diagnosis: Array4<f64>,
}

/// A fully assembled model: configuration, taxonomy and parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub taxonomy: Taxonomy,
    pub params: ParamStore,
}

impl Model {
    /// Initialize parameters deterministically from a seed.
    pub fn init(taxonomy: Taxonomy, config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        backbone::init_params(&mut store, &mut rng, &config)?;
        queries::init_params(&mut store, &mut rng, &config, &taxonomy)?;
        Ok(Model { config, taxonomy, params: store })
    }

    /// Convert a raw f32 patch into the normalized graph input `(1,z,y,x)`.
    fn input_tensor(&self, patch: &ArrayView3<'_, f32>) -> Tensor {
        let dims = patch.shape();
        let data: Vec<f64> = patch.iter().map(|&v| self.config.normalize(v)).collect();
        Tensor::from_shape_vec(IxDyn(&[1, dims[0], dims[1], dims[2]]), data).unwrap()
    }

    /// Build the full forward graph for one patch and return the dual
    /// masks over the finest pyramid level.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        patch: &ArrayView3<'_, f32>,
    ) -> Result<DualMasks> {
        let input = g.constant(self.input_tensor(patch));
        let pyramid = backbone::forward(g, bound, &self.config, input)?;
        let refined = queries::run_decoder(g, bound, &self.config, &self.taxonomy, &pyramid)?;
        decode::decode_masks(g, &self.config, &self.taxonomy, &refined, pyramid.features[0])
    }

    /// Forward + loss for one labelled patch.
    pub fn loss(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        patch: &ArrayView3<'_, f32>,
        labels: &ArrayView3<'_, u8>,
    ) -> Result<(DualMasks, LossBreakdown)> {
        if patch.shape() != labels.shape() {
            return Err(Error::Data(format!(
                "patch {:?} and labels {:?} disagree on shape",
                patch.shape(),
                labels.shape()
            )));
        }
        let masks = self.forward(g, bound, patch)?;
        let loss = decode::dual_loss(g, &self.config, &self.taxonomy, &masks, labels)?;
        Ok((masks, loss))
    }

    /// Loss value and parameter gradients for one labelled patch.
    pub fn loss_and_grads(
        &self,
        patch: &ArrayView3<'_, f32>,
        labels: &ArrayView3<'_, u8>,
    ) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let (_, loss) = self.loss(&mut g, &bound, patch, labels)?;
        g.backward(loss.total_var)?;
        let grads = bound.grads(&g);
        Ok((loss, grads))
    }

    /// Probability grids for one patch (no gradients tracked).
    pub fn predict_patch(&self, patch: &ArrayView3<'_, f32>) -> Result<PatchPrediction> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let masks = self.forward(&mut g, &bound, patch)?;
        let dims = patch.shape();
        let to_grid = |v: Var, g: &Graph| -> Array4<f64> {
            let t = g.value(v);
            let c = t.shape()[0];
            t.to_owned()
                .into_shape_with_order((c, dims[0], dims[1], dims[2]))
                .unwrap()
        };
        let detection = to_grid(masks.detection_probs, &g);
        let diagnosis = to_grid(masks.diagnosis_probs, &g);
        for grid in [&detection, &diagnosis] {
            if grid.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence("non-finite probabilities in prediction".into()));
            }
        }
        Ok(PatchPrediction { detection, diagnosis })
    }

    /// Bind parameters as constants (inference: no gradient bookkeeping).
    fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        let mut vars = BTreeMap::new();
        for name in self.params.names() {
            let v = g.constant(self.params.get(name).unwrap().clone());
            vars.insert(name.clone(), v);
        }
        BoundParams::from_vars(vars)
    }
}

/// Checkpoint header, serialized as one JSON line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    taxonomy: Taxonomy,
    /// Training patch extent, recorded so inference can default its window.
    train_patch: Option<[usize; 3]>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

const CHECKPOINT_MAGIC: &str = "hiermask-checkpoint v1";

/// Write a checkpoint: text magic, one-line JSON header, then tensor data
/// as little-endian f32 in header order.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    train_patch: Option<[usize; 3]>,
) -> Result<()> {
    let tensors: Vec<TensorEntry> = model
        .params
        .names()
        .iter()
        .map(|n| TensorEntry { name: n.clone(), shape: model.params.get(n).unwrap().shape().to_vec() })
        .collect();
    let header = CheckpointHeader {
        format_version: 1,
        config: model.config.clone(),
        taxonomy: model.taxonomy.clone(),
        train_patch,
        tensors,
    };
    let mut out = format!("{CHECKPOINT_MAGIC}\n{}\n", serde_json::to_string(&header)?).into_bytes();
    for name in model.params.names() {
        for v in model.params.get(name)?.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

/// Read a checkpoint back into a model plus the recorded training patch.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<[usize; 3]>)> {
    let bytes = read_bytes(path)?;
    let first_nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing magic line".to_string()))?;
    if &bytes[..first_nl] != CHECKPOINT_MAGIC.as_bytes() {
        return Err(Error::format(path, "not a checkpoint file".to_string()));
    }
    let rest = &bytes[first_nl + 1..];
    let second_nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line".to_string()))?;
    let header: CheckpointHeader = serde_json::from_slice(&rest[..second_nl])
        .map_err(|e| Error::format(path, format!("header does not parse: {e}")))?;
    if header.format_version != 1 {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint format_version {}", header.format_version),
        ));
    }
    header.config.validate()?;
    let payload = &rest[second_nl + 1..];
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum::<usize>()
        * 4;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for chunk in payload[offset..offset + 4 * n].chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(Error::format(
                    path,
                    format!("tensor {:?} contains non-finite values", entry.name),
                ));
            }
            data.push(v);
        }
        offset += 4 * n;
        store.insert(&entry.name, Tensor::from_shape_vec(IxDyn(&entry.shape), data).unwrap())?;
    }
    // Shape-check against a fresh initialization of the same config: a
    // checkpoint must describe exactly the parameter set the architecture
    // expects.
    let fresh = Model::init(header.taxonomy.clone(), header.config.clone(), 0)?;
    if fresh.params.names() != store.names() {
        return Err(Error::format(
            path,
            "checkpoint tensor names do not match the architecture".to_string(),
        ));
    }
    for name in fresh.params.names() {
        if fresh.params.get(name)?.shape() != store.get(name)?.shape() {
            return Err(Error::format(
                path,
                format!("tensor {name:?} has the wrong shape for the architecture"),
            ));
        }
    }
    Ok((
        Model { config: header.config, taxonomy: header.taxonomy, params: store },
        header.train_patch,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::TaxonomySpec;
    use ndarray::Array3;

    fn tiny_model() -> Model {
        let tax = Taxonomy::new(TaxonomySpec::two_organ()).unwrap();
        let cfg = ModelConfig {
            query_dim: 8,
            base_channels: 2,
            heads: 2,
            ffn_expansion: 2,
            ..ModelConfig::default()
        };
        Model::init(tax, cfg, 42).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::reference().validate().is_ok());
        let mut c = ModelConfig::default();
        c.heads = 3; // does not divide 16
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.decoder_layers = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.downsample = [[1, 1, 1]; 3];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.intensity_scale = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn patch_compatibility() {
        let cfg = ModelConfig::default();
        assert!(cfg.check_patch([16, 16, 16]).is_ok());
        assert!(cfg.check_patch([12, 16, 16]).is_err());
        let aniso = ModelConfig::reference();
        assert_eq!(aniso.total_downsample(), [4, 8, 8]);
        assert!(aniso.check_patch([48, 192, 192]).is_ok());
        assert!(aniso.check_patch([48, 100, 192]).is_err());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let json = r#"{"mode":"hierarchy","nonsense":3}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
        let ok = r#"{"mode":"parallel"}"#;
        let cfg: ModelConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(cfg.mode, RepresentationMode::Parallel);
        assert_eq!(cfg.query_dim, ModelConfig::default().query_dim);
    }

    #[test]
    fn init_deterministic_and_seed_sensitive() {
        let m1 = tiny_model();
        let m2 = tiny_model();
        for name in m1.params.names() {
            assert_eq!(m1.params.get(name).unwrap(), m2.params.get(name).unwrap());
        }
        let tax = Taxonomy::new(TaxonomySpec::two_organ()).unwrap();
        let m3 = Model::init(tax, m1.config.clone(), 43).unwrap();
        let differs = m1
            .params
            .names()
            .iter()
            .any(|n| m1.params.get(n).unwrap() != m3.params.get(n).unwrap());
        assert!(differs);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, Some([16, 16, 16])).unwrap();
        let (back, patch) = load_checkpoint(&path).unwrap();
        assert_eq!(patch, Some([16, 16, 16]));
        assert_eq!(back.config, model.config);
        assert_eq!(back.taxonomy, model.taxonomy);
        assert_eq!(back.params.names(), model.params.names());
        // Values round-trip exactly through the f32 payload.
        for name in model.params.names() {
            let a = model.params.get(name).unwrap();
            let b = back.params.get(name).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
        // The reloaded model must be directly usable for prediction.
        let patch_arr = Array3::<f32>::from_elem((8, 8, 8), 10.0);
        let p = back.predict_patch(&patch_arr.view()).unwrap();
        assert_eq!(p.detection.shape()[0], back.taxonomy.class_count(crate::taxonomy::LabelSpace::Detection));
    }

    /// End-to-end gradient check: analytic gradients of the full dual-task
    /// loss against central finite differences, for a sample of entries in
    /// every parameter tensor.
    #[test]
    fn finite_differences_confirm_model_gradients() {
        use crate::gradcheck::{check_gradients, GradCheckOptions};
        use rand::Rng;
        use rand::SeedableRng;

        let tax = Taxonomy::new(TaxonomySpec::two_organ()).unwrap();
        let cfg = ModelConfig {
            query_dim: 8,
            base_channels: 2,
            heads: 2,
            ffn_expansion: 2,
            // Keeps the coarsest level at 2³ so instance norms stay
            // non-degenerate while the finest level stays small.
            downsample: [[1, 2, 2], [2, 2, 2], [2, 1, 1]],
            ..ModelConfig::default()
        };
        let model = Model::init(tax.clone(), cfg.clone(), 7).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let patch = Array3::from_shape_fn((8, 8, 8), |_| rng.random_range(-80.0_f32..90.0));
        let diag_c = tax.class_count(crate::taxonomy::LabelSpace::Diagnosis) as u8;
        let labels = Array3::from_shape_fn((8, 8, 8), |_| rng.random_range(0..diag_c));

        let (_, analytic) = model.loss_and_grads(&patch.view(), &labels.view()).unwrap();
        let eval = |store: &ParamStore| -> Result<f64> {
            let m = Model {
                config: cfg.clone(),
                taxonomy: tax.clone(),
                params: store.clone(),
            };
            let mut g = Graph::new();
            let bound = m.params.bind(&mut g);
            let (_, loss) = m.loss(&mut g, &bound, &patch.view(), &labels.view())?;
            Ok(loss.total)
        };
        // A smaller step than the default keeps truncation error of the
        // central difference below tolerance for this deeply composed loss.
        let opts = GradCheckOptions {
            max_entries_per_tensor: 4,
            step: 1e-6,
            ..GradCheckOptions::default()
        };
        let report = check_gradients(&model.params, &analytic, eval, &opts).unwrap();
        assert!(
            report.passed(),
            "max relative error {} at {:?}",
            report.max_relative_error,
            report.worst
        );
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, None).unwrap();
        let bytes = crate::util::read_bytes(&path).unwrap();
        // Truncate payload.
        crate::util::write_bytes(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        // Wrong magic.
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        crate::util::write_bytes(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
