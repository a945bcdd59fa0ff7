//! End-to-end training: balanced patch sampling, flip/noise augmentation,
//! a decoupled-weight-decay Adam optimizer, per-step loss tracing and
//! checkpointing.
//!
//! The loop is strictly serial and seeded, so a given `(manifest, config)`
//! pair reproduces the same parameter trajectory bit for bit. Gradients for
//! a batch are accumulated by running its patches one at a time, which
//! keeps peak memory at one tape regardless of batch size.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::caseio::Manifest;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::params::ParamStore;
use crate::util::write_bytes;
use crate::volume::{Dims, LabelMap, Volume};

/// Hyperparameters for a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Model architecture; `model.mode` selects the query representation.
    pub model: ModelConfig,
    /// Training patch extent `(z, y, x)`; every entry must be divisible
    /// by 8 so all pyramid levels stay integral.
    pub patch: Dims,
    /// Patches per optimizer step (gradients are averaged).
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay, applied as `θ ← θ − lr·wd·θ`.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds both parameter initialization and patch sampling.
    pub seed: u64,
    /// When set, each patch targets a class drawn uniformly from the
    /// classes present in its case; otherwise crops are uniform.
    pub balanced_sampling: bool,
    pub flip_augment: bool,
    /// Standard deviation of additive intensity noise; 0 disables.
    pub noise_augment_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            patch: [16, 32, 32],
            batch_size: 2,
            epochs: 4,
            steps_per_epoch: 50,
            learning_rate: 3e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            balanced_sampling: true,
            flip_augment: true,
            noise_augment_sigma: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.patch.iter().any(|&d| d == 0 || d % 8 != 0) {
            return Err(Error::Config(format!(
                "patch dims {:?} must be positive multiples of 8",
                self.patch
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("epochs and steps_per_epoch must be positive".into()));
        }
        // A zero learning rate is allowed so no-op runs can be used as a
        // determinism diagnostic; negative rates are rejected.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be ≥ 0", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.noise_augment_sigma >= 0.0) {
            return Err(Error::Config("weight_decay and noise sigma must be ≥ 0".into()));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("Adam beta {b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// One training patch together with where and how it was sampled.
#[derive(Debug, Clone)]
pub struct SampledPatch {
    pub volume: Array3<f32>,
    pub labels: Array3<u8>,
    /// Crop origin in the source volume.
    pub origin: [usize; 3],
    /// The class the crop was steered to contain (balanced mode only).
    pub target_class: Option<u8>,
}

/// Crop a training patch. In balanced mode a class is drawn uniformly from
/// the non-background classes present in the case and the crop window is
/// drawn uniformly among windows containing at least one voxel of it; when
/// the case has no foreground (or in uniform mode) the crop is uniform.
pub fn sample_patch<R: Rng>(
    volume: &Volume,
    labels: &LabelMap,
    rng: &mut R,
    patch: Dims,
    balanced: bool,
) -> Result<SampledPatch> {
    let dims = volume.dims();
    if labels.dims() != dims {
        return Err(Error::Config(format!(
            "volume dims {:?} and label dims {:?} differ",
            dims,
            labels.dims()
        )));
    }
    for ax in 0..3 {
        if patch[ax] > dims[ax] {
            return Err(Error::Config(format!(
                "patch {patch:?} exceeds volume {dims:?} on axis {ax}"
            )));
        }
    }

    let mut target_class = None;
    let origin = if balanced {
        // Classes present in the case, ascending; ascending scan keeps the
        // draw order independent of hash-map iteration.
        let mut present = [false; 256];
        for &l in labels.labels().iter() {
            present[l as usize] = true;
        }
        let classes: Vec<u8> =
            (1..=255u8).filter(|&c| present[c as usize]).collect();
        match classes.as_slice().choose(rng) {
            None => uniform_origin(rng, dims, patch),
            Some(&class) => {
                target_class = Some(class);
                let voxels: Vec<[usize; 3]> = labels
                    .labels()
                    .indexed_iter()
                    .filter(|(_, &l)| l == class)
                    .map(|((z, y, x), _)| [z, y, x])
                    .collect();
                let &anchor = voxels.as_slice().choose(rng).expect("class is present");
                let mut origin = [0usize; 3];
                for ax in 0..3 {
                    // Window starts that keep `anchor[ax]` inside the patch;
                    // lo ≤ hi holds whenever the patch fits in the volume.
                    let lo = anchor[ax].saturating_sub(patch[ax] - 1);
                    let hi = anchor[ax].min(dims[ax] - patch[ax]);
                    origin[ax] = rng.random_range(lo..=hi);
                }
                origin
            }
        }
    } else {
        uniform_origin(rng, dims, patch)
    };

    let slice = |z0: usize, y0: usize, x0: usize| {
        ndarray::s![z0..z0 + patch[0], y0..y0 + patch[1], x0..x0 + patch[2]]
    };
    let vol = volume.voxels().slice(slice(origin[0], origin[1], origin[2])).to_owned();
    let lab = labels.labels().slice(slice(origin[0], origin[1], origin[2])).to_owned();
    Ok(SampledPatch { volume: vol, labels: lab, origin, target_class })
}

fn uniform_origin<R: Rng>(rng: &mut R, dims: Dims, patch: Dims) -> [usize; 3] {
    let mut origin = [0usize; 3];
    for ax in 0..3 {
        origin[ax] = rng.random_range(0..=dims[ax] - patch[ax]);
    }
    origin
}

/// Mirror the patch pair along the axes flagged true.
pub fn flip_patch(volume: &mut Array3<f32>, labels: &mut Array3<u8>, axes: [bool; 3]) {
    for (ax, &flip) in axes.iter().enumerate() {
        if flip {
            volume.invert_axis(ndarray::Axis(ax));
            labels.invert_axis(ndarray::Axis(ax));
        }
    }
}

/// In-place augmentation: joint axis flips (each axis an independent coin
/// toss) and additive Gaussian intensity noise on the volume only. Label
/// values are never changed, only moved with the volume.
pub fn augment<R: Rng>(
    volume: &mut Array3<f32>,
    labels: &mut Array3<u8>,
    rng: &mut R,
    flips: bool,
    noise_sigma: f64,
) {
    if flips {
        let axes = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        flip_patch(volume, labels, axes);
    }
    if noise_sigma > 0.0 {
        let dist = Normal::new(0.0, noise_sigma).expect("validated sigma");
        for v in volume.iter_mut() {
            *v += dist.sample(rng) as f32;
        }
    }
}

/// Adam with decoupled weight decay. State is kept per parameter tensor
/// and updates are elementwise:
///
/// ```text
/// m ← β₁·m + (1−β₁)·g        v ← β₂·v + (1−β₂)·g²
/// θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ
/// ```
///
/// with bias-corrected `m̂ = m/(1−β₁ᵗ)` and `v̂ = v/(1−β₂ᵗ)`.
#[derive(Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        AdamW {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Apply one update using `grads` (missing entries are treated as zero
    /// gradients, which still decay the second moment and apply decay).
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().to_vec();
        for name in names {
            let theta = params.get_mut(&name)?;
            let zero = Tensor::zeros(theta.raw_dim());
            let g = grads.get(&name).unwrap_or(&zero);
            if g.shape() != theta.shape() {
                return Err(Error::Config(format!(
                    "gradient shape {:?} does not match parameter {name:?} {:?}",
                    g.shape(),
                    theta.shape()
                )));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(theta.raw_dim()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(theta.raw_dim()));
            ndarray::Zip::from(theta)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|t, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *t -= self.learning_rate * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *t);
                });
        }
        Ok(())
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One line of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub total: f64,
    pub ce_detection: f64,
    pub dice_detection: f64,
    pub ce_diagnosis: f64,
    pub dice_diagnosis: f64,
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<TraceRecord>,
    pub checkpoint_path: PathBuf,
    pub trace_path: PathBuf,
}

/// Train a model on one split of a dataset.
///
/// Cases are held in memory (desk-scale datasets are a few hundred MB at
/// most), sampled uniformly per batch item, cropped, augmented, and run one
/// at a time with gradient averaging. The checkpoint is rewritten after
/// every epoch, the loss trace (one JSON record per line) at the end.
pub fn train(
    root: &Path,
    manifest: &Manifest,
    split: &str,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    let cases = manifest.split_cases(split);
    if cases.is_empty() {
        return Err(Error::Config(format!("split {split:?} has no cases")));
    }
    let mut loaded = Vec::with_capacity(cases.len());
    for case in &cases {
        loaded.push(manifest.load_case(root, case)?);
    }
    for (vol, _) in &loaded {
        for ax in 0..3 {
            if config.patch[ax] > vol.dims()[ax] {
                return Err(Error::Config(format!(
                    "patch {:?} exceeds case dims {:?}",
                    config.patch,
                    vol.dims()
                )));
            }
        }
    }

    let mut model = Model::init(manifest.taxonomy.clone(), config.model.clone(), config.seed)?;
    let mut optimizer = AdamW::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut trace = Vec::with_capacity(config.epochs * config.steps_per_epoch);
    let checkpoint_path = out_dir.join("model.ckpt");
    let trace_path = out_dir.join("trace.jsonl");

    for epoch in 0..config.epochs {
        for step_in_epoch in 0..config.steps_per_epoch {
            let step = epoch * config.steps_per_epoch + step_in_epoch + 1;
            let mut grad_sum: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut record = TraceRecord {
                step,
                total: 0.0,
                ce_detection: 0.0,
                dice_detection: 0.0,
                ce_diagnosis: 0.0,
                dice_diagnosis: 0.0,
            };
            for _item in 0..config.batch_size {
                let case_idx = rng.random_range(0..loaded.len());
                let (vol, lab) = &loaded[case_idx];
                let mut patch =
                    sample_patch(vol, lab, &mut rng, config.patch, config.balanced_sampling)?;
                augment(
                    &mut patch.volume,
                    &mut patch.labels,
                    &mut rng,
                    config.flip_augment,
                    config.noise_augment_sigma,
                );
                let (loss, grads) =
                    model.loss_and_grads(&patch.volume.view(), &patch.labels.view())?;
                if !loss.total.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss {} at step {step}",
                        loss.total
                    )));
                }
                record.total += loss.total;
                record.ce_detection += loss.ce_detection;
                record.dice_detection += loss.dice_detection;
                record.ce_diagnosis += loss.ce_diagnosis;
                record.dice_diagnosis += loss.dice_diagnosis;
                for (name, g) in grads {
                    grad_sum
                        .entry(name)
                        .and_modify(|acc| *acc += &g)
                        .or_insert(g);
                }
            }
            let scale = 1.0 / config.batch_size as f64;
            for g in grad_sum.values_mut() {
                g.mapv_inplace(|x| x * scale);
            }
            record.total *= scale;
            record.ce_detection *= scale;
            record.dice_detection *= scale;
            record.ce_diagnosis *= scale;
            record.dice_diagnosis *= scale;
            optimizer.step(&mut model.params, &grad_sum)?;
            trace.push(record);
        }
        save_checkpoint(&checkpoint_path, &model, Some(config.patch))?;
    }

    let mut lines = String::new();
    for record in &trace {
        let json = serde_json::to_string(record)?;
        writeln!(lines, "{json}").expect("string write cannot fail");
    }
    write_bytes(&trace_path, lines.as_bytes())?;
    Ok(TrainOutcome { model, trace, checkpoint_path, trace_path })
}

/// Parse a loss trace written by [`train`].
pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let bytes = crate::util::read_bytes(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::format(path, format!("trace is not UTF-8: {e}")))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(path, format!("bad trace record on line {}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_checkpoint;
    use crate::phantom::{self, PhantomSpec};
    use crate::taxonomy::{Taxonomy, TaxonomySpec, BACKGROUND};
    use crate::volume::Spacing;

    const SPACING: Spacing = [1.0, 1.0, 1.0];

    fn test_case() -> (Volume, LabelMap) {
        // Three blocks of classes 1, 2, 3 in a 16³ volume, otherwise
        // background, with intensity equal to the class id.
        let mut labels = Array3::<u8>::zeros((16, 16, 16));
        let mut vox = Array3::<f32>::zeros((16, 16, 16));
        for (class, z0) in [(1u8, 0usize), (2, 6), (3, 12)] {
            for z in z0..z0 + 3 {
                for y in 4..8 {
                    for x in 9..13 {
                        labels[[z, y, x]] = class;
                        vox[[z, y, x]] = class as f32;
                    }
                }
            }
        }
        (Volume::new(vox, SPACING).unwrap(), LabelMap::new(labels, SPACING).unwrap())
    }

    #[test]
    fn whole_volume_patch_is_identity() {
        let (vol, lab) = test_case();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_patch(&vol, &lab, &mut rng, [16, 16, 16], true).unwrap();
        assert_eq!(p.origin, [0, 0, 0]);
        assert_eq!(&p.volume, vol.voxels());
        assert_eq!(&p.labels, lab.labels());
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let (vol, lab) = test_case();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_patch(&vol, &lab, &mut rng, [16, 16, 24], true).is_err());
    }

    #[test]
    fn sampling_is_deterministic_in_rng_state() {
        let (vol, lab) = test_case();
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = sample_patch(&vol, &lab, &mut r1, [8, 8, 8], true).unwrap();
            let b = sample_patch(&vol, &lab, &mut r2, [8, 8, 8], true).unwrap();
            assert_eq!(a.origin, b.origin);
            assert_eq!(a.target_class, b.target_class);
        }
    }

    /// The targeted class must appear in the patch, and targets must be
    /// uniform over present classes: over 1000 draws each of the three
    /// classes lands in 333 ± 50 (±50 ≈ 3.3 binomial standard deviations
    /// at n = 1000, p = 1/3, so a sound sampler fails this by chance well
    /// under once in a thousand runs).
    #[test]
    fn balanced_sampling_targets_classes_uniformly() {
        let (vol, lab) = test_case();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        for _ in 0..1000 {
            let p = sample_patch(&vol, &lab, &mut rng, [8, 8, 8], true).unwrap();
            let class = p.target_class.expect("foreground exists");
            counts[class as usize] += 1;
            assert!(
                p.labels.iter().any(|&l| l == class),
                "patch misses its target class {class}"
            );
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            assert!((283..=383).contains(&c), "class count {c} outside 333±50");
        }
    }

    #[test]
    fn unbalanced_sampling_ignores_classes() {
        let (vol, lab) = test_case();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = sample_patch(&vol, &lab, &mut rng, [8, 8, 8], false).unwrap();
        assert_eq!(p.target_class, None);
    }

    #[test]
    fn background_only_case_falls_back_to_uniform() {
        let vox = Array3::<f32>::zeros((8, 8, 8));
        let lab = Array3::<u8>::zeros((8, 8, 8));
        let vol = Volume::new(vox, SPACING).unwrap();
        let lab = LabelMap::new(lab, SPACING).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_patch(&vol, &lab, &mut rng, [8, 8, 8], true).unwrap();
        assert_eq!(p.target_class, None);
        assert!(p.labels.iter().all(|&l| l == BACKGROUND));
    }

    #[test]
    fn double_flip_is_identity() {
        let (vol, lab) = test_case();
        let mut v = vol.voxels().clone();
        let mut l = lab.labels().clone();
        for axes in [[true, false, false], [false, true, true], [true, true, true]] {
            flip_patch(&mut v, &mut l, axes);
            flip_patch(&mut v, &mut l, axes);
            assert_eq!(&v, vol.voxels());
            assert_eq!(&l, lab.labels());
        }
    }

    /// Exhaustive index check on a 4³ patch: flipping axis `a` moves the
    /// voxel at index `i` to `3 − i` on that axis, jointly in both arrays.
    #[test]
    fn flip_moves_every_index_to_its_mirror()
    {
        let n = 4usize;
        let mut vox = Array3::<f32>::zeros((n, n, n));
        let mut lab = Array3::<u8>::zeros((n, n, n));
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    vox[[z, y, x]] = (z * 100 + y * 10 + x) as f32;
                    lab[[z, y, x]] = (z * 16 + y * 4 + x) as u8;
                }
            }
        }
        let reference_vox = vox.clone();
        let reference_lab = lab.clone();
        for axes in [[true, false, false], [false, true, false], [false, false, true]] {
            let mut v = reference_vox.clone();
            let mut l = reference_lab.clone();
            flip_patch(&mut v, &mut l, axes);
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        let src = [
                            if axes[0] { n - 1 - z } else { z },
                            if axes[1] { n - 1 - y } else { y },
                            if axes[2] { n - 1 - x } else { x },
                        ];
                        assert_eq!(v[[z, y, x]], reference_vox[[src[0], src[1], src[2]]]);
                        assert_eq!(l[[z, y, x]], reference_lab[[src[0], src[1], src[2]]]);
                    }
                }
            }
        }
    }

    #[test]
    fn augmentation_off_is_identity() {
        let (vol, lab) = test_case();
        let mut v = vol.voxels().clone();
        let mut l = lab.labels().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        augment(&mut v, &mut l, &mut rng, false, 0.0);
        assert_eq!(&v, vol.voxels());
        assert_eq!(&l, lab.labels());
    }

    #[test]
    fn noise_touches_volume_not_labels() {
        let (vol, lab) = test_case();
        let mut v = vol.voxels().clone();
        let mut l = lab.labels().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        augment(&mut v, &mut l, &mut rng, false, 1.0);
        assert_ne!(&v, vol.voxels());
        assert_eq!(&l, lab.labels());
    }

    #[test]
    fn adamw_zero_gradient_without_decay_is_identity() {
        let config = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut opt = AdamW::new(&config);
        let mut params = ParamStore::new();
        params.insert("w", Tensor::ones(ndarray::IxDyn(&[3, 2]))).unwrap();
        let before = params.get("w").unwrap().clone();
        let grads: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::zeros(ndarray::IxDyn(&[3, 2])))].into();
        for _ in 0..5 {
            opt.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params.get("w").unwrap(), &before);
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        // One parameter, constant gradient: follow the update rule by hand
        // for three steps and compare.
        let config = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&config);
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_elem(ndarray::IxDyn(&[1]), 2.0)).unwrap();
        let grads: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::from_elem(ndarray::IxDyn(&[1]), 0.5))].into();

        let (mut theta, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            opt.step(&mut params, &grads).unwrap();
            let g = 0.5;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.1 * (mh / (vh.sqrt() + 1e-8) + 0.01 * theta);
            let got = params.get("w").unwrap()[[0]];
            assert!((got - theta).abs() < 1e-12, "step {t}: {got} vs {theta}");
        }
    }

    fn tiny_dataset(dir: &Path) -> Manifest {
        let spec = PhantomSpec {
            dims: [16, 24, 24],
            min_tumor_voxels: 10,
            tumor_free_prob: 0.0,
            organ_disease_prob: 1.0,
            ..PhantomSpec::default()
        };
        let tax = Taxonomy::new(TaxonomySpec::two_organ()).unwrap();
        phantom::make_dataset(dir, &spec, &tax, 2, 3, &[("train".into(), 1.0)]).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
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
            steps_per_epoch: 3,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_runs_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path());
        let config = tiny_config();

        let out1 = dir.path().join("run1");
        let out2 = dir.path().join("run2");
        let a = train(dir.path(), &manifest, "train", &config, &out1).unwrap();
        let b = train(dir.path(), &manifest, "train", &config, &out2).unwrap();
        assert_eq!(a.trace.len(), 3);
        assert_eq!(a.trace, b.trace);
        for r in &a.trace {
            for v in [r.total, r.ce_detection, r.dice_detection, r.ce_diagnosis, r.dice_diagnosis]
            {
                assert!(v.is_finite());
            }
        }
        assert_eq!(load_trace(&a.trace_path).unwrap(), a.trace);

        let (restored, patch) = load_checkpoint(&a.checkpoint_path).unwrap();
        assert_eq!(patch, Some(config.patch));
        // Checkpoints hold f32 payloads, so the round trip reproduces the
        // trained parameters exactly at f32 precision.
        for name in a.model.params.names() {
            let expect = a.model.params.get(name).unwrap().mapv(|x| x as f32 as f64);
            assert_eq!(
                restored.params.get(name).unwrap(),
                &expect,
                "checkpoint mismatch at {name}"
            );
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_at_init() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path());
        let config = TrainConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            ..tiny_config()
        };
        let out = train(dir.path(), &manifest, "train", &config, dir.path()).unwrap();
        let fresh =
            Model::init(manifest.taxonomy.clone(), config.model.clone(), config.seed).unwrap();
        for name in fresh.params.names() {
            assert_eq!(
                out.model.params.get(name).unwrap(),
                fresh.params.get(name).unwrap(),
                "parameter {name} moved despite lr = 0"
            );
        }
    }

    #[test]
    fn empty_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path());
        let err = train(dir.path(), &manifest, "test", &tiny_config(), dir.path());
        assert!(err.is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.patch = [12, 32, 32];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
        // Unknown fields in config files are rejected.
        let parsed: std::result::Result<TrainConfig, _> =
            serde_json::from_str(r#"{"learning_rate": 0.1, "momentum": 0.9}"#);
        assert!(parsed.is_err());
    }
}
