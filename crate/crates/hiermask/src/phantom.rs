//! Procedural 3D phantom generator: randomized superellipsoid organs
//! stacked along `z`, each optionally carrying one tumor subtype rendered
//! as one or two smaller superellipsoids with a class-specific intensity
//! offset and texture noise.
//!
//! The generator is a pure function of `(seed, spec, taxonomy)`: identical
//! inputs produce byte-identical volumes and label maps, and dataset-level
//! generation derives each case's seed from the dataset seed and case
//! index, so serial and parallel generation agree.
//!
//! Tumors are placed by rejection sampling. A placement is accepted only
//! if the rendered voxel set is large enough, lies entirely inside the
//! host organ, forms a single 6-connected component, and touches no other
//! tumor (26-neighborhood). If a tumor cannot be placed within the attempt
//! budget the generator fails with an infeasibility error rather than
//! silently shrinking it.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::caseio::{self, CaseRecord, Manifest, TumorSummary};
use crate::error::{Error, Result};
use crate::taxonomy::{LabelSpace, Taxonomy, BACKGROUND};
use crate::util::{mix_seed, sha256_hex, write_bytes};
use crate::volume::{Dims, LabelMap, Spacing, Volume, MIN_DIM};

/// Geometry and intensity ranges for phantom generation.
///
/// Organs are laid out in equal `z` slots in taxonomy organ order; all
/// radii are expressed as fractions of the relevant extent so one spec
/// scales across grid sizes. Intensities are dimensionless, HU-like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// Grid extent `(z, y, x)` in voxels.
    pub dims: Dims,
    /// Voxel spacing `(z, y, x)` in mm.
    pub spacing: Spacing,
    pub background_intensity: f64,
    /// Standard deviation of the i.i.d. noise added to every voxel.
    pub global_noise_sigma: f64,
    /// Organ base intensities are spread evenly over this range in organ
    /// order, then jittered.
    pub organ_base_range: [f64; 2],
    pub organ_base_jitter: f64,
    /// Organ z-radius as a fraction of its z slot.
    pub organ_rz_frac: [f64; 2],
    /// Organ y/x radii as fractions of the y/x extents.
    pub organ_rxy_frac: [f64; 2],
    /// Organ center jitter along z, as a fraction of the z extent.
    pub organ_z_jitter_frac: f64,
    /// Organ center jitter in y/x, as a fraction of those extents.
    pub organ_xy_jitter_frac: f64,
    /// Superellipsoid exponent range for organs and tumors.
    pub exponent_range: [f64; 2],
    /// Tumor radii as fractions of the host organ's radii (per axis). With
    /// two instances per organ, fractions above ~0.55 leave no room for a
    /// non-touching second instance and placement becomes infeasible.
    pub tumor_radius_frac: [f64; 2],
    /// Inclusive range for the number of tumor instances per diseased organ.
    pub tumor_count_range: [usize; 2],
    /// Intensity offsets (tumor minus organ base) by subtype position, for
    /// organs with 1, 2, 3, … tumor classes: `tumor_offsets[k-1]` holds the
    /// `k` offsets used when an organ hosts `k` possible classes.
    pub tumor_offsets: Vec<Vec<f64>>,
    /// Texture noise inside a tumor: sigma = base + step · subtype position.
    pub texture_sigma_base: f64,
    pub texture_sigma_step: f64,
    /// Probability that a phantom is a normal control (no tumors at all).
    pub tumor_free_prob: f64,
    /// Per-organ probability of carrying tumors (given not a normal control).
    pub organ_disease_prob: f64,
    /// Reject tumor placements rendering fewer voxels than this.
    pub min_tumor_voxels: usize,
    /// Placement attempts per tumor before giving up as infeasible.
    pub max_placement_attempts: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            spacing: [3.0, 0.8, 0.8],
            background_intensity: -80.0,
            global_noise_sigma: 6.0,
            organ_base_range: [15.0, 85.0],
            organ_base_jitter: 4.0,
            organ_rz_frac: [0.24, 0.31],
            organ_rxy_frac: [0.26, 0.33],
            organ_z_jitter_frac: 0.015,
            organ_xy_jitter_frac: 0.04,
            exponent_range: [2.0, 3.0],
            tumor_radius_frac: [0.40, 0.55],
            tumor_count_range: [1, 2],
            tumor_offsets: vec![
                vec![55.0],
                vec![-55.0, 60.0],
                vec![-60.0, 45.0, 80.0],
                vec![-75.0, -40.0, 45.0, 80.0],
            ],
            texture_sigma_base: 3.0,
            texture_sigma_step: 3.0,
            tumor_free_prob: 0.25,
            organ_disease_prob: 0.55,
            min_tumor_voxels: 150,
            max_placement_attempts: 200,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        if self.dims.iter().any(|&d| d < MIN_DIM) {
            return Err(Error::Config(format!("dims {:?} below minimum {MIN_DIM}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config(format!("spacing {:?} must be positive", self.spacing)));
        }
        for (name, r) in [
            ("organ_rz_frac", self.organ_rz_frac),
            ("organ_rxy_frac", self.organ_rxy_frac),
            ("exponent_range", self.exponent_range),
            ("tumor_radius_frac", self.tumor_radius_frac),
        ] {
            if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
                return Err(Error::Config(format!("{name} {r:?} must be an increasing positive range")));
            }
        }
        if self.organ_rz_frac[1] + self.organ_z_jitter_frac * taxonomy.organ_count() as f64 > 0.5 {
            return Err(Error::Config(
                "organ z radius plus jitter exceeds half a z slot; organs could overlap".into(),
            ));
        }
        if self.organ_rxy_frac[1] + self.organ_xy_jitter_frac > 0.48 {
            return Err(Error::Config(
                "organ y/x radius plus jitter reaches the grid boundary".into(),
            ));
        }
        if self.tumor_radius_frac[1] >= 1.0 {
            return Err(Error::Config("tumor radii must be strictly below organ radii".into()));
        }
        for p in [self.tumor_free_prob, self.organ_disease_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.tumor_count_range[0] < 1 || self.tumor_count_range[1] < self.tumor_count_range[0] {
            return Err(Error::Config(format!(
                "tumor_count_range {:?} must be an increasing range starting at 1",
                self.tumor_count_range
            )));
        }
        if self.min_tumor_voxels == 0 || self.max_placement_attempts == 0 {
            return Err(Error::Config(
                "min_tumor_voxels and max_placement_attempts must be positive".into(),
            ));
        }
        if !(self.global_noise_sigma >= 0.0
            && self.texture_sigma_base >= 0.0
            && self.texture_sigma_step >= 0.0)
        {
            return Err(Error::Config("noise sigmas must be non-negative".into()));
        }
        // Every organ's tumor class count must have an offset row, and the
        // offsets within a row must be distinct so subtypes are separable.
        for o in 0..taxonomy.organ_count() {
            let k = taxonomy.organ_tumor_ids(LabelSpace::Diagnosis, o)?.len();
            if k == 0 {
                continue;
            }
            let row = self.tumor_offsets.get(k - 1).ok_or_else(|| {
                Error::Config(format!("no tumor_offsets row for organs with {k} classes"))
            })?;
            if row.len() != k {
                return Err(Error::Config(format!(
                    "tumor_offsets[{}] has {} entries, need {k}",
                    k - 1,
                    row.len()
                )));
            }
            for (i, a) in row.iter().enumerate() {
                if !a.is_finite() {
                    return Err(Error::Config("tumor offsets must be finite".into()));
                }
                for b in &row[i + 1..] {
                    if (a - b).abs() < 1.0 {
                        return Err(Error::Config(
                            "tumor offsets within an organ must be distinct".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Stable content hash of the spec (over its canonical JSON form).
    pub fn hash_hex(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

/// Axis-aligned superellipsoid: `Σ |(p − c)/r|^e ≤ 1`.
#[derive(Debug, Clone, Copy)]
struct Blob {
    center_mm: [f64; 3],
    radii_mm: [f64; 3],
    exponent: f64,
}

impl Blob {
    fn contains(&self, p_mm: [f64; 3]) -> bool {
        let mut acc = 0.0;
        for ax in 0..3 {
            acc += ((p_mm[ax] - self.center_mm[ax]) / self.radii_mm[ax])
                .abs()
                .powf(self.exponent);
        }
        acc <= 1.0
    }

    /// Voxels whose centers fall inside the blob, in raster order.
    fn rasterize(&self, dims: Dims, spacing: Spacing) -> Vec<[usize; 3]> {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for ax in 0..3 {
            let a = (self.center_mm[ax] - self.radii_mm[ax]) / spacing[ax] - 1.0;
            let b = (self.center_mm[ax] + self.radii_mm[ax]) / spacing[ax] + 1.0;
            lo[ax] = a.max(0.0) as usize;
            hi[ax] = (b.min(dims[ax] as f64 - 1.0)).max(0.0) as usize;
        }
        let mut out = Vec::new();
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let p = [
                        (z as f64 + 0.5) * spacing[0],
                        (y as f64 + 0.5) * spacing[1],
                        (x as f64 + 0.5) * spacing[2],
                    ];
                    if self.contains(p) {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

/// One rendered organ.
#[derive(Debug, Clone)]
pub struct OrganInstance {
    /// Index into taxonomy organ order.
    pub organ_index: usize,
    /// Organ class id (shared by both label spaces).
    pub class_id: u8,
    pub base_intensity: f64,
    /// Voxels covered by the organ, raster order.
    pub voxels: Vec<[usize; 3]>,
}

/// One rendered tumor instance.
#[derive(Debug, Clone)]
pub struct TumorInstance {
    pub organ_index: usize,
    /// Diagnosis-space class id.
    pub class_id: u8,
    /// Intensity offset relative to the host organ base.
    pub offset: f64,
    pub texture_sigma: f64,
    /// Voxels covered by the tumor, raster order.
    pub voxels: Vec<[usize; 3]>,
}

/// A generated case with its exact ground truth.
#[derive(Debug, Clone)]
pub struct GeneratedPhantom {
    pub volume: Volume,
    /// Diagnosis-space label map.
    pub labels: LabelMap,
    /// Organ name → subtype class name, for diseased organs only.
    pub diagnoses: BTreeMap<String, String>,
    pub organs: Vec<OrganInstance>,
    pub tumors: Vec<TumorInstance>,
}

/// True when the voxel set forms a single 6-connected component.
fn connected6(voxels: &[[usize; 3]]) -> bool {
    if voxels.is_empty() {
        return false;
    }
    let set: std::collections::BTreeSet<[usize; 3]> = voxels.iter().copied().collect();
    let mut seen = std::collections::BTreeSet::new();
    let mut queue = VecDeque::new();
    queue.push_back(voxels[0]);
    seen.insert(voxels[0]);
    while let Some([z, y, x]) = queue.pop_front() {
        let mut push = |v: [usize; 3]| {
            if set.contains(&v) && seen.insert(v) {
                queue.push_back(v);
            }
        };
        if z > 0 {
            push([z - 1, y, x]);
        }
        if y > 0 {
            push([z, y - 1, x]);
        }
        if x > 0 {
            push([z, y, x - 1]);
        }
        push([z + 1, y, x]);
        push([z, y + 1, x]);
        push([z, y, x + 1]);
    }
    seen.len() == set.len()
}

/// Generate one phantom. Deterministic in `(seed, spec, taxonomy)`.
pub fn generate_phantom(
    seed: u64,
    spec: &PhantomSpec,
    taxonomy: &Taxonomy,
) -> Result<GeneratedPhantom> {
    spec.validate(taxonomy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = spec.dims;
    let spacing = spec.spacing;
    let extent_mm = [
        dims[0] as f64 * spacing[0],
        dims[1] as f64 * spacing[1],
        dims[2] as f64 * spacing[2],
    ];
    let n_organs = taxonomy.organ_count();
    let organ_ids = taxonomy.organ_ids();
    let slot_mm = extent_mm[0] / n_organs as f64;

    // --- Organ geometry and base intensities (fixed draw order). ---
    let mut organs = Vec::with_capacity(n_organs);
    let mut organ_grid = Array3::<u8>::zeros((dims[0], dims[1], dims[2]));
    let [b_lo, b_hi] = spec.organ_base_range;
    for o in 0..n_organs {
        let cz = (o as f64 + 0.5) * slot_mm
            + rng.random_range(-1.0..=1.0) * spec.organ_z_jitter_frac * extent_mm[0];
        let cy = (0.5 + rng.random_range(-1.0..=1.0) * spec.organ_xy_jitter_frac) * extent_mm[1];
        let cx = (0.5 + rng.random_range(-1.0..=1.0) * spec.organ_xy_jitter_frac) * extent_mm[2];
        let rz = rng.random_range(spec.organ_rz_frac[0]..=spec.organ_rz_frac[1]) * slot_mm;
        let ry = rng.random_range(spec.organ_rxy_frac[0]..=spec.organ_rxy_frac[1]) * extent_mm[1];
        let rx = rng.random_range(spec.organ_rxy_frac[0]..=spec.organ_rxy_frac[1]) * extent_mm[2];
        let exponent = rng.random_range(spec.exponent_range[0]..=spec.exponent_range[1]);
        let spread = if n_organs > 1 {
            b_lo + (b_hi - b_lo) * o as f64 / (n_organs - 1) as f64
        } else {
            (b_lo + b_hi) / 2.0
        };
        let base = spread + rng.random_range(-1.0..=1.0) * spec.organ_base_jitter;

        let blob = Blob { center_mm: [cz, cy, cx], radii_mm: [rz, ry, rx], exponent };
        let voxels = blob.rasterize(dims, spacing);
        if voxels.is_empty() {
            return Err(Error::Infeasible(format!(
                "organ {o} rasterizes to zero voxels at dims {dims:?}"
            )));
        }
        for &[z, y, x] in &voxels {
            organ_grid[[z, y, x]] = organ_ids[o];
        }
        organs.push((blob, OrganInstance {
            organ_index: o,
            class_id: organ_ids[o],
            base_intensity: base,
            voxels,
        }));
    }

    // --- Disease assignment and tumor placement. ---
    let tumor_free = rng.random_bool(spec.tumor_free_prob);
    let mut tumors: Vec<TumorInstance> = Vec::new();
    let mut tumor_grid = Array3::<bool>::from_elem((dims[0], dims[1], dims[2]), false);
    let mut diagnoses = BTreeMap::new();
    for o in 0..n_organs {
        let candidates = taxonomy.organ_tumor_ids(LabelSpace::Diagnosis, o)?;
        if tumor_free || candidates.is_empty() {
            continue;
        }
        if !rng.random_bool(spec.organ_disease_prob) {
            continue;
        }
        let pick = rng.random_range(0..candidates.len());
        let class_id = candidates[pick];
        let offset = spec.tumor_offsets[candidates.len() - 1][pick];
        let sigma = spec.texture_sigma_base + spec.texture_sigma_step * pick as f64;
        let count =
            rng.random_range(spec.tumor_count_range[0]..=spec.tumor_count_range[1]);
        let (organ_blob, organ) = &organs[o];

        // Place all instances of this organ jointly: if a later instance
        // runs out of room, discard the organ's partial placement and
        // restart so an unlucky first draw cannot wedge the second.
        let mut accepted: Vec<TumorInstance> = Vec::new();
        for restart in 0..=spec.max_placement_attempts {
            if restart == spec.max_placement_attempts {
                return Err(Error::Infeasible(format!(
                    "could not place {count} tumor instance(s) of class {class_id} in organ {o} \
                     within {} joint attempts",
                    spec.max_placement_attempts
                )));
            }
            for t in accepted.drain(..) {
                for &[z, y, x] in &t.voxels {
                    tumor_grid[[z, y, x]] = false;
                }
            }
            let mut complete = true;
            'instances: for _instance in 0..count {
                for _attempt in 0..spec.max_placement_attempts {
                    let frac =
                        rng.random_range(spec.tumor_radius_frac[0]..=spec.tumor_radius_frac[1]);
                    let radii = [
                        organ_blob.radii_mm[0] * frac,
                        organ_blob.radii_mm[1] * frac,
                        organ_blob.radii_mm[2] * frac,
                    ];
                    let mut center = [0.0; 3];
                    for ax in 0..3 {
                        let slack = (organ_blob.radii_mm[ax] - radii[ax]).max(0.0) * 0.8;
                        center[ax] =
                            organ_blob.center_mm[ax] + rng.random_range(-1.0..=1.0) * slack;
                    }
                    let exponent =
                        rng.random_range(spec.exponent_range[0]..=spec.exponent_range[1]);
                    let blob = Blob { center_mm: center, radii_mm: radii, exponent };
                    let voxels = blob.rasterize(dims, spacing);
                    if voxels.len() < spec.min_tumor_voxels {
                        continue;
                    }
                    if !voxels.iter().all(|&[z, y, x]| organ_grid[[z, y, x]] == organ.class_id) {
                        continue;
                    }
                    if voxels.iter().any(|&v| near_tumor(&tumor_grid, v)) {
                        continue;
                    }
                    if !connected6(&voxels) {
                        continue;
                    }
                    for &[z, y, x] in &voxels {
                        tumor_grid[[z, y, x]] = true;
                    }
                    accepted.push(TumorInstance {
                        organ_index: o,
                        class_id,
                        offset,
                        texture_sigma: sigma,
                        voxels,
                    });
                    continue 'instances;
                }
                complete = false;
                break;
            }
            if complete {
                break;
            }
        }
        tumors.extend(accepted);
        let organ_name = taxonomy.class_name(LabelSpace::Diagnosis, organ.class_id)?.to_string();
        let class_name = taxonomy.class_name(LabelSpace::Diagnosis, class_id)?.to_string();
        diagnoses.insert(organ_name, class_name);
    }

    // --- Intensity assembly: bases, tumor texture, then global noise. ---
    let mut intensity =
        Array3::<f64>::from_elem((dims[0], dims[1], dims[2]), spec.background_intensity);
    let mut labels = Array3::<u8>::from_elem((dims[0], dims[1], dims[2]), BACKGROUND);
    for (_, organ) in &organs {
        for &[z, y, x] in &organ.voxels {
            intensity[[z, y, x]] = organ.base_intensity;
            labels[[z, y, x]] = organ.class_id;
        }
    }
    for t in &tumors {
        let base = organs[t.organ_index].1.base_intensity;
        let noise = Normal::new(0.0, t.texture_sigma).map_err(|e| {
            Error::Config(format!("invalid texture sigma {}: {e}", t.texture_sigma))
        })?;
        for &[z, y, x] in &t.voxels {
            intensity[[z, y, x]] = base + t.offset + noise.sample(&mut rng);
            labels[[z, y, x]] = t.class_id;
        }
    }
    let noise = Normal::new(0.0, spec.global_noise_sigma)
        .map_err(|e| Error::Config(format!("invalid noise sigma: {e}")))?;
    for v in intensity.iter_mut() {
        *v += noise.sample(&mut rng);
    }

    let volume = Volume::new(intensity.mapv(|v| v as f32), spacing)?;
    let labels = LabelMap::new(labels, spacing)?;
    labels.validate_ids(taxonomy, LabelSpace::Diagnosis)?;
    Ok(GeneratedPhantom {
        volume,
        labels,
        diagnoses,
        organs: organs.into_iter().map(|(_, o)| o).collect(),
        tumors,
    })
}

/// True when `v` or any of its 26 neighbors is already tumor-occupied.
fn near_tumor(tumor_grid: &Array3<bool>, v: [usize; 3]) -> bool {
    let (dz, dy, dx) = tumor_grid.dim();
    let [z, y, x] = v;
    for nz in z.saturating_sub(1)..=(z + 1).min(dz - 1) {
        for ny in y.saturating_sub(1)..=(y + 1).min(dy - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(dx - 1) {
                if tumor_grid[[nz, ny, nx]] {
                    return true;
                }
            }
        }
    }
    false
}

/// Generate `n_cases` phantoms under `root`, split by the given named
/// fractions (must sum to 1), and return the manifest. Case `i` uses seed
/// `mix(seed, i)`, so any subset of cases can be regenerated independently.
pub fn make_dataset(
    root: &Path,
    spec: &PhantomSpec,
    taxonomy: &Taxonomy,
    n_cases: usize,
    seed: u64,
    splits: &[(String, f64)],
) -> Result<Manifest> {
    spec.validate(taxonomy)?;
    if n_cases == 0 {
        return Err(Error::Config("n_cases must be at least 1".into()));
    }
    if splits.is_empty() {
        return Err(Error::Config("at least one split is required".into()));
    }
    let mut names = std::collections::BTreeSet::new();
    for (name, frac) in splits {
        if name.is_empty() || !names.insert(name.clone()) {
            return Err(Error::Config(format!("split names must be unique and non-empty: {name:?}")));
        }
        if !(0.0..=1.0).contains(frac) {
            return Err(Error::Config(format!("split fraction {frac} outside [0, 1]")));
        }
    }
    let total: f64 = splits.iter().map(|(_, f)| f).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {total}, expected 1")));
    }

    // Cumulative rounding gives per-split counts that sum to n exactly.
    let mut boundaries = Vec::with_capacity(splits.len() + 1);
    boundaries.push(0usize);
    let mut cum = 0.0;
    for (_, frac) in splits {
        cum += frac;
        boundaries.push((cum * n_cases as f64).round() as usize);
    }
    *boundaries.last_mut().unwrap() = n_cases;

    let taxonomy_hash = taxonomy.hash_hex();
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let case_seed = mix_seed(seed, i as u64);
        let phantom = generate_phantom(case_seed, spec, taxonomy)?;
        let id = format!("case_{i:04}");
        let vol_rel = format!("cases/{id}.vol");
        let lab_rel = format!("cases/{id}.lab");
        let vol_bytes = caseio::volume_to_bytes(&phantom.volume, &taxonomy_hash);
        let lab_bytes =
            caseio::labels_to_bytes(&phantom.labels, LabelSpace::Diagnosis, &taxonomy_hash);
        write_bytes(&root.join(&vol_rel), &vol_bytes)?;
        write_bytes(&root.join(&lab_rel), &lab_bytes)?;

        let split_idx = boundaries[1..].iter().position(|&b| i < b).unwrap_or(splits.len() - 1);
        let mut voxel_counts = Vec::new();
        for t in &phantom.tumors {
            voxel_counts.push(TumorSummary {
                class: taxonomy.class_name(LabelSpace::Diagnosis, t.class_id)?.to_string(),
                voxels: t.voxels.len(),
            });
        }
        cases.push(CaseRecord {
            id,
            split: splits[split_idx].0.clone(),
            seed: case_seed,
            volume: vol_rel,
            labels: lab_rel,
            volume_sha256: sha256_hex(&vol_bytes),
            labels_sha256: sha256_hex(&lab_bytes),
            diagnoses: phantom.diagnoses,
            tumors: voxel_counts,
        });
    }

    let manifest = Manifest {
        format_version: 1,
        seed,
        taxonomy: taxonomy.clone(),
        taxonomy_hash,
        phantom_spec_hash: spec.hash_hex()?,
        dims: spec.dims,
        spacing: spec.spacing,
        cases,
    };
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}

/// The default split layout: 80% train, 20% test.
pub fn default_splits() -> Vec<(String, f64)> {
    vec![("train".to_string(), 0.8), ("test".to_string(), 0.2)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::TaxonomySpec;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            dims: [32, 32, 32],
            min_tumor_voxels: 40,
            ..PhantomSpec::default()
        }
    }

    fn two_organ() -> Taxonomy {
        Taxonomy::new(TaxonomySpec::two_organ()).unwrap()
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = small_spec();
        let tax = two_organ();
        let a = generate_phantom(7, &spec, &tax).unwrap();
        let b = generate_phantom(7, &spec, &tax).unwrap();
        assert_eq!(a.volume.voxels(), b.volume.voxels());
        assert_eq!(a.labels.labels(), b.labels.labels());
        assert_eq!(a.diagnoses, b.diagnoses);
        let c = generate_phantom(8, &spec, &tax).unwrap();
        assert_ne!(a.volume.voxels(), c.volume.voxels());
    }

    #[test]
    fn tumor_free_probability_one_yields_normal_controls() {
        let spec = PhantomSpec { tumor_free_prob: 1.0, ..small_spec() };
        let tax = two_organ();
        for seed in 0..5 {
            let p = generate_phantom(seed, &spec, &tax).unwrap();
            assert!(p.diagnoses.is_empty());
            assert!(p.tumors.is_empty());
            let organ_ids = tax.organ_ids();
            for &l in p.labels.labels().iter() {
                assert!(l == BACKGROUND || organ_ids.contains(&l), "unexpected label {l}");
            }
        }
    }

    /// Containment and label consistency, checked from generator internals
    /// and independently by scanning the rendered label map.
    #[test]
    fn tumors_contained_and_labels_consistent() {
        let spec = PhantomSpec { tumor_free_prob: 0.0, organ_disease_prob: 1.0, ..small_spec() };
        let tax = two_organ();
        for seed in 0..8 {
            let p = generate_phantom(seed, &spec, &tax).unwrap();
            assert!(!p.tumors.is_empty());
            // Containment: every tumor voxel inside its host organ's set.
            for t in &p.tumors {
                let organ: std::collections::BTreeSet<_> =
                    p.organs[t.organ_index].voxels.iter().copied().collect();
                assert!(t.voxels.iter().all(|v| organ.contains(v)));
                assert!(t.voxels.len() >= spec.min_tumor_voxels);
            }
            // Independent scan: subtype ids present in the map equal the
            // patient-level diagnosis set.
            let mut present = std::collections::BTreeSet::new();
            for &l in p.labels.labels().iter() {
                if tax.tumor_ids(LabelSpace::Diagnosis).contains(&l) {
                    present.insert(l);
                }
            }
            let declared: std::collections::BTreeSet<u8> = p
                .diagnoses
                .iter()
                .map(|(_, class)| tax.class_id(LabelSpace::Diagnosis, class).unwrap())
                .collect();
            assert_eq!(present, declared);
            // One subtype per diseased organ.
            assert_eq!(p.diagnoses.len(), {
                let mut organs: Vec<usize> = p.tumors.iter().map(|t| t.organ_index).collect();
                organs.sort_unstable();
                organs.dedup();
                organs.len()
            });
        }
    }

    #[test]
    fn tumor_instances_connected_and_separated() {
        let spec = PhantomSpec {
            tumor_free_prob: 0.0,
            organ_disease_prob: 1.0,
            tumor_count_range: [2, 2],
            ..small_spec()
        };
        let tax = two_organ();
        let p = generate_phantom(3, &spec, &tax).unwrap();
        assert_eq!(p.tumors.len(), 2 * tax.organ_count());
        for t in &p.tumors {
            assert!(connected6(&t.voxels), "instance not 6-connected");
        }
        // No voxel of one instance may touch another instance (26-adjacency),
        // so lesion counting by connected components recovers instances.
        for (i, a) in p.tumors.iter().enumerate() {
            for b in &p.tumors[i + 1..] {
                for &[az, ay, ax] in &a.voxels {
                    for &[bz, by, bx] in &b.voxels {
                        let close = az.abs_diff(bz) <= 1 && ay.abs_diff(by) <= 1 && ax.abs_diff(bx) <= 1;
                        assert!(!close, "instances touch at [{az},{ay},{ax}] / [{bz},{by},{bx}]");
                    }
                }
            }
        }
    }

    /// Exact central binomial interval: smallest symmetric `[lo, hi]`
    /// around n/2 with two-sided coverage at least `level`.
    fn binomial_central_interval(n: usize, level: f64) -> (usize, usize) {
        // P(X = k) for p = 1/2, computed iteratively in f64.
        let mut pmf = vec![0.0f64; n + 1];
        pmf[0] = 0.5f64.powi(n as i32);
        for k in 1..=n {
            pmf[k] = pmf[k - 1] * (n - k + 1) as f64 / k as f64;
        }
        let tail = (1.0 - level) / 2.0;
        let mut lo = 0;
        let mut acc = 0.0;
        while lo <= n {
            acc += pmf[lo];
            if acc > tail {
                break;
            }
            lo += 1;
        }
        (lo, n - lo)
    }

    #[test]
    fn disease_frequency_within_binomial_interval() {
        let n = 100;
        let (lo, hi) = binomial_central_interval(n, 0.99);
        // Sanity on the oracle itself: symmetric and non-degenerate.
        assert_eq!(lo + hi, n);
        assert!(lo >= 30 && lo <= 45, "suspicious interval [{lo}, {hi}]");

        let spec = PhantomSpec {
            tumor_free_prob: 0.0,
            organ_disease_prob: 0.5,
            ..small_spec()
        };
        let tax = two_organ();
        let mut counts = vec![0usize; tax.organ_count()];
        for i in 0..n {
            let p = generate_phantom(mix_seed(1234, i as u64), &spec, &tax).unwrap();
            for (organ_name, _) in &p.diagnoses {
                let id = tax.class_id(LabelSpace::Diagnosis, organ_name).unwrap();
                let idx = tax.organ_ids().iter().position(|&o| o == id).unwrap();
                counts[idx] += 1;
            }
        }
        for (o, &c) in counts.iter().enumerate() {
            assert!(
                (lo..=hi).contains(&c),
                "organ {o} diseased in {c}/{n} phantoms, outside 99% interval [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn infeasible_spec_fails_loudly() {
        let spec = PhantomSpec {
            tumor_free_prob: 0.0,
            organ_disease_prob: 1.0,
            min_tumor_voxels: 1_000_000,
            max_placement_attempts: 5,
            ..small_spec()
        };
        let tax = two_organ();
        match generate_phantom(0, &spec, &tax) {
            Err(Error::Infeasible(_)) => {}
            other => panic!("expected infeasibility error, got {other:?}"),
        }
    }

    #[test]
    fn spec_validation_rejects_bad_fields() {
        let tax = two_organ();
        let ok = small_spec();
        assert!(ok.validate(&tax).is_ok());
        let mut s = small_spec();
        s.tumor_radius_frac = [0.5, 1.0];
        assert!(s.validate(&tax).is_err());
        let mut s = small_spec();
        s.tumor_free_prob = 1.5;
        assert!(s.validate(&tax).is_err());
        let mut s = small_spec();
        s.dims = [4, 32, 32];
        assert!(s.validate(&tax).is_err());
        let mut s = small_spec();
        s.tumor_offsets = vec![vec![55.0]];
        // two_organ's liver has two subtype classes; no row for k = 2.
        assert!(s.validate(&tax).is_err());
        let mut s = small_spec();
        s.tumor_count_range = [0, 2];
        assert!(s.validate(&tax).is_err());
    }

    #[test]
    fn dataset_roundtrip_and_split_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let tax = two_organ();
        let manifest =
            make_dataset(dir.path(), &spec, &tax, 10, 0, &default_splits()).unwrap();
        assert_eq!(manifest.split_cases("train").len(), 8);
        assert_eq!(manifest.split_cases("test").len(), 2);
        manifest.validate_files(dir.path(), true).unwrap();
        let reloaded = Manifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(reloaded, manifest);
        // Per-case regeneration: the recorded case seed reproduces the case.
        let case = &manifest.cases[3];
        let again = generate_phantom(case.seed, &spec, &tax).unwrap();
        let (vol, labs) = manifest.load_case(dir.path(), case).unwrap();
        assert_eq!(vol.voxels(), again.volume.voxels());
        assert_eq!(labs.labels(), again.labels.labels());
    }

    #[test]
    fn dataset_is_deterministic_across_directories() {
        let spec = small_spec();
        let tax = two_organ();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = make_dataset(d1.path(), &spec, &tax, 4, 9, &default_splits()).unwrap();
        let m2 = make_dataset(d2.path(), &spec, &tax, 4, 9, &default_splits()).unwrap();
        assert_eq!(m1.hash_hex().unwrap(), m2.hash_hex().unwrap());
        assert_eq!(m1.to_bytes().unwrap(), m2.to_bytes().unwrap());
    }

    #[test]
    fn dataset_argument_validation() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let tax = two_organ();
        assert!(make_dataset(dir.path(), &spec, &tax, 0, 0, &default_splits()).is_err());
        let bad = vec![("train".into(), 0.5), ("test".into(), 0.3)];
        assert!(make_dataset(dir.path(), &spec, &tax, 4, 0, &bad).is_err());
        let dup = vec![("train".into(), 0.5), ("train".into(), 0.5)];
        assert!(make_dataset(dir.path(), &spec, &tax, 4, 0, &dup).is_err());
    }

    #[test]
    fn subtype_means_are_separated() {
        // The two liver subtypes must be distinguishable by mean intensity:
        // that is the signal diagnosis training relies on.
        let spec = PhantomSpec { tumor_free_prob: 0.0, organ_disease_prob: 1.0, ..small_spec() };
        let tax = two_organ();
        let mut means: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
        for seed in 0..12 {
            let p = generate_phantom(seed, &spec, &tax).unwrap();
            for t in &p.tumors {
                let vox = p.volume.voxels();
                let m: f64 = t.voxels.iter().map(|&[z, y, x]| vox[[z, y, x]] as f64).sum::<f64>()
                    / t.voxels.len() as f64;
                means.entry(t.class_id).or_default().push(m);
            }
        }
        // Average the observed means per class and require clear separation
        // between the liver subtypes.
        let liver: Vec<u8> = tax.organ_tumor_ids(LabelSpace::Diagnosis, 0).unwrap().to_vec();
        assert_eq!(liver.len(), 2);
        let avg = |c: u8| -> f64 {
            let v = &means[&c];
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(
            (avg(liver[0]) - avg(liver[1])).abs() > 40.0,
            "liver subtypes not separated: {} vs {}",
            avg(liver[0]),
            avg(liver[1])
        );
    }
}
