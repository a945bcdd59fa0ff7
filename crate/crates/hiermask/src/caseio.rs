//! On-disk formats: case files (volume / label map) and dataset manifests.
//!
//! A case file is a short text header followed by a raw little-endian
//! payload:
//!
//! ```text
//! volcase v1
//! kind: volume
//! dtype: f32
//! dims: 48 192 192
//! spacing: 3 0.8 0.8
//! space: -
//! taxonomy: <sha256 hex>
//! payload: 21233664
//!
//! <raw bytes>
//! ```
//!
//! `dims`/`spacing` are `(z, y, x)`. Label maps use `dtype: u8` and set
//! `space` to `diagnosis` or `detection`. Headers are written with `{}`
//! float formatting (shortest round-trip), so identical data produces
//! byte-identical files.
//!
//! A dataset manifest is a JSON document listing every case with its split,
//! per-case seed, ground-truth summary and content hashes; the SHA-256 of
//! the manifest bytes identifies the dataset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{LabelSpace, Taxonomy};
use crate::util::{read_bytes, sha256_hex, write_bytes};
use crate::volume::{Dims, LabelMap, Spacing, Volume};

const MAGIC: &str = "volcase v1";

fn format_f64_triplet(v: Spacing) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn encode_header(
    kind: &str,
    dtype: &str,
    dims: Dims,
    spacing: Spacing,
    space: Option<LabelSpace>,
    taxonomy_hash: &str,
    payload_len: usize,
) -> String {
    let space = space.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
    format!(
        "{MAGIC}\nkind: {kind}\ndtype: {dtype}\ndims: {} {} {}\nspacing: {}\nspace: {space}\ntaxonomy: {taxonomy_hash}\npayload: {payload_len}\n\n",
        dims[0],
        dims[1],
        dims[2],
        format_f64_triplet(spacing),
    )
}

struct Header {
    kind: String,
    dtype: String,
    dims: Dims,
    spacing: Spacing,
    space: Option<LabelSpace>,
    taxonomy_hash: String,
    payload_len: usize,
}

fn parse_header(path: &Path, text: &str) -> Result<Header> {
    let mut lines = text.lines();
    let first = lines.next().unwrap_or("");
    if first != MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic line {first:?} (expected {MAGIC:?})"),
        ));
    }
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for line in lines {
        let Some((key, value)) = line.split_once(": ") else {
            return Err(Error::format(path, format!("malformed header line {line:?}")));
        };
        if fields.insert(key, value).is_some() {
            return Err(Error::format(path, format!("duplicate header field {key:?}")));
        }
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| Error::format(path, format!("missing header field {key:?}")))
    };
    let parse3 = |key: &str| -> Result<[f64; 3]> {
        let raw = get(key)?;
        let parts: Vec<&str> = raw.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::format(path, format!("field {key:?} needs 3 values, got {raw:?}")));
        }
        let mut out = [0.0; 3];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = p
                .parse::<f64>()
                .map_err(|_| Error::format(path, format!("field {key:?}: bad number {p:?}")))?;
        }
        Ok(out)
    };
    let dims_f = parse3("dims")?;
    let mut dims = [0usize; 3];
    for (d, f) in dims.iter_mut().zip(dims_f) {
        if f.fract() != 0.0 || f < 1.0 || f > 1e9 {
            return Err(Error::format(path, format!("bad dims entry {f}")));
        }
        *d = f as usize;
    }
    let space = match get("space")? {
        "-" => None,
        "diagnosis" => Some(LabelSpace::Diagnosis),
        "detection" => Some(LabelSpace::Detection),
        other => return Err(Error::format(path, format!("unknown label space {other:?}"))),
    };
    let payload_len = get("payload")?
        .parse::<usize>()
        .map_err(|_| Error::format(path, "payload field is not an integer".to_string()))?;
    for key in fields.keys() {
        if !matches!(*key, "kind" | "dtype" | "dims" | "spacing" | "space" | "taxonomy" | "payload")
        {
            return Err(Error::format(path, format!("unknown header field {key:?}")));
        }
    }
    Ok(Header {
        kind: get("kind")?.to_string(),
        dtype: get("dtype")?.to_string(),
        dims,
        spacing: parse3("spacing")?,
        space,
        taxonomy_hash: get("taxonomy")?.to_string(),
        payload_len,
    })
}

fn split_header_payload<'a>(path: &Path, bytes: &'a [u8]) -> Result<(&'a str, &'a [u8])> {
    let sep = b"\n\n";
    let pos = bytes
        .windows(sep.len())
        .position(|w| w == sep)
        .ok_or_else(|| Error::format(path, "no blank line terminating the header".to_string()))?;
    let header = std::str::from_utf8(&bytes[..pos + 1])
        .map_err(|_| Error::format(path, "header is not UTF-8".to_string()))?;
    Ok((header, &bytes[pos + 2..]))
}

/// Serialize a volume to case-file bytes.
pub fn volume_to_bytes(vol: &Volume, taxonomy_hash: &str) -> Vec<u8> {
    let data = vol.voxels();
    let mut payload = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let header = encode_header(
        "volume",
        "f32",
        vol.dims(),
        vol.spacing(),
        None,
        taxonomy_hash,
        payload.len(),
    );
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out
}

/// Serialize a label map to case-file bytes.
pub fn labels_to_bytes(map: &LabelMap, space: LabelSpace, taxonomy_hash: &str) -> Vec<u8> {
    let data = map.labels();
    let payload: Vec<u8> = data.iter().copied().collect();
    let header = encode_header(
        "labels",
        "u8",
        map.dims(),
        map.spacing(),
        Some(space),
        taxonomy_hash,
        payload.len(),
    );
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out
}

/// Write a volume case file.
pub fn save_volume(path: &Path, vol: &Volume, taxonomy_hash: &str) -> Result<()> {
    write_bytes(path, &volume_to_bytes(vol, taxonomy_hash))
}

/// Write a label-map case file.
pub fn save_labels(
    path: &Path,
    map: &LabelMap,
    space: LabelSpace,
    taxonomy_hash: &str,
) -> Result<()> {
    write_bytes(path, &labels_to_bytes(map, space, taxonomy_hash))
}

/// Read a volume case file, checking dtype, payload size and value
/// finiteness. Returns the volume and the taxonomy hash recorded with it.
pub fn load_volume(path: &Path) -> Result<(Volume, String)> {
    let bytes = read_bytes(path)?;
    let (htext, payload) = split_header_payload(path, &bytes)?;
    let h = parse_header(path, htext)?;
    if h.kind != "volume" || h.dtype != "f32" {
        return Err(Error::format(
            path,
            format!("expected a volume (f32) file, found kind {:?} dtype {:?}", h.kind, h.dtype),
        ));
    }
    let n = h.dims.iter().product::<usize>();
    if h.payload_len != n * 4 || payload.len() != h.payload_len {
        return Err(Error::format(
            path,
            format!(
                "payload size mismatch: dims {:?} imply {} bytes, header says {}, file has {}",
                h.dims,
                n * 4,
                h.payload_len,
                payload.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let arr = Array3::from_shape_vec((h.dims[0], h.dims[1], h.dims[2]), data).unwrap();
    let vol = Volume::new(arr, h.spacing)?;
    Ok((vol, h.taxonomy_hash))
}

/// Read a label-map case file. Returns the map, its label space and the
/// taxonomy hash recorded with it.
pub fn load_labels(path: &Path) -> Result<(LabelMap, LabelSpace, String)> {
    let bytes = read_bytes(path)?;
    let (htext, payload) = split_header_payload(path, &bytes)?;
    let h = parse_header(path, htext)?;
    if h.kind != "labels" || h.dtype != "u8" {
        return Err(Error::format(
            path,
            format!("expected a labels (u8) file, found kind {:?} dtype {:?}", h.kind, h.dtype),
        ));
    }
    let space = h.space.ok_or_else(|| {
        Error::format(path, "labels file is missing its label space".to_string())
    })?;
    let n = h.dims.iter().product::<usize>();
    if h.payload_len != n || payload.len() != h.payload_len {
        return Err(Error::format(
            path,
            format!(
                "payload size mismatch: dims {:?} imply {} bytes, header says {}, file has {}",
                h.dims,
                n,
                h.payload_len,
                payload.len()
            ),
        ));
    }
    let arr = Array3::from_shape_vec((h.dims[0], h.dims[1], h.dims[2]), payload.to_vec()).unwrap();
    let map = LabelMap::new(arr, h.spacing)?;
    Ok((map, space, h.taxonomy_hash))
}

/// Ground-truth summary of one placed tumor instance, as recorded in the
/// manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TumorSummary {
    /// Diagnosis-space class name.
    pub class: String,
    /// Voxel count in the rendered label map.
    pub voxels: usize,
}

/// One dataset case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub id: String,
    /// Split name, e.g. `"train"` or `"test"`.
    pub split: String,
    /// Seed the case was generated from.
    pub seed: u64,
    /// Volume path, relative to the manifest directory.
    pub volume: String,
    /// Diagnosis-space label map path, relative to the manifest directory.
    pub labels: String,
    /// SHA-256 of the volume file bytes.
    pub volume_sha256: String,
    /// SHA-256 of the labels file bytes.
    pub labels_sha256: String,
    /// Patient-level ground truth: organ name → subtype class name for the
    /// diseased organs (organs absent from the map are healthy).
    pub diagnoses: BTreeMap<String, String>,
    /// Per-instance ground-truth summaries, placement order.
    pub tumors: Vec<TumorSummary>,
}

/// A generated dataset: taxonomy, geometry and the case table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// Base seed the dataset was generated from.
    pub seed: u64,
    pub taxonomy: Taxonomy,
    pub taxonomy_hash: String,
    /// SHA-256 of the canonical phantom-spec JSON.
    pub phantom_spec_hash: String,
    pub dims: Dims,
    pub spacing: Spacing,
    pub cases: Vec<CaseRecord>,
}

impl Manifest {
    /// Canonical JSON bytes (pretty, stable field order).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// SHA-256 of the canonical JSON bytes.
    pub fn hash_hex(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let bytes = read_bytes(path)?;
        let m: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path, format!("manifest does not parse: {e}")))?;
        if m.format_version != 1 {
            return Err(Error::format(
                path,
                format!("unsupported manifest format_version {}", m.format_version),
            ));
        }
        if m.taxonomy.hash_hex() != m.taxonomy_hash {
            return Err(Error::format(
                path,
                "taxonomy_hash does not match the embedded taxonomy".to_string(),
            ));
        }
        Ok(m)
    }

    /// Case ids of one split, in manifest order.
    pub fn split_cases(&self, split: &str) -> Vec<&CaseRecord> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }

    /// Check every referenced file exists relative to `root` and matches
    /// its recorded hash when `verify_hashes` is set.
    pub fn validate_files(&self, root: &Path, verify_hashes: bool) -> Result<()> {
        for case in &self.cases {
            for (rel, expect) in
                [(&case.volume, &case.volume_sha256), (&case.labels, &case.labels_sha256)]
            {
                let path = root.join(rel);
                if !path.is_file() {
                    return Err(Error::Data(format!(
                        "case {:?} references missing file {}",
                        case.id,
                        path.display()
                    )));
                }
                if verify_hashes {
                    let got = sha256_hex(&read_bytes(&path)?);
                    if &got != expect {
                        return Err(Error::Data(format!(
                            "case {:?}: {} content hash mismatch",
                            case.id,
                            path.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Load one case's volume and diagnosis-space labels, cross-checking
    /// geometry and taxonomy hashes.
    pub fn load_case(&self, root: &Path, case: &CaseRecord) -> Result<(Volume, LabelMap)> {
        let vol_path = root.join(&case.volume);
        let lab_path = root.join(&case.labels);
        let (vol, vtax) = load_volume(&vol_path)?;
        let (labels, space, ltax) = load_labels(&lab_path)?;
        if space != LabelSpace::Diagnosis {
            return Err(Error::Data(format!(
                "case {:?}: ground-truth labels must be diagnosis-space, found {space}",
                case.id
            )));
        }
        if vtax != self.taxonomy_hash || ltax != self.taxonomy_hash {
            return Err(Error::Data(format!(
                "case {:?}: file taxonomy hash does not match the manifest",
                case.id
            )));
        }
        if vol.dims() != labels.dims() || vol.spacing() != labels.spacing() {
            return Err(Error::Data(format!(
                "case {:?}: volume and labels disagree on geometry",
                case.id
            )));
        }
        labels.validate_ids(&self.taxonomy, LabelSpace::Diagnosis)?;
        Ok((vol, labels))
    }
}

/// Resolve an output path against the `HIERMASK_OUT` root if it is set and
/// the path is relative.
pub fn resolve_out_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("HIERMASK_OUT") {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
