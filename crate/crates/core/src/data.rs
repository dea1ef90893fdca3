//! Dataset storage and synthetic data generation.
//!
//! A dataset on disk is a directory with a `manifest.json` at the root and
//! one subdirectory per case under `cases/`.  Every tensor is a raw
//! little-endian file (float32 volumes, uint8 mask) described by a JSON
//! sidecar carrying shape, dtype, axis order, and a SHA-256 checksum, so a
//! round trip is bit-exact and corruption is caught at read time.  All
//! writes go through a temp-file-plus-rename so readers never observe a
//! half-written file.
//!
//! The synthetic generator builds nested ellipsoidal regions (an outer,
//! middle, and inner shell sharing a centre) and per-modality intensity
//! profiles: each region is assigned one modality in which its boundary
//! step is three times larger than in any other modality, plus Gaussian
//! noise.  That known contrast ordering is what the interpretability
//! checks later recover.

use crate::config::{ModalitySet, RegionDecl, RegionSet, VolumeSample};
use crate::nn::hex_digest;
use crate::{CimlError, Result};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

/// Strong-to-weak boundary step ratio built into generated volumes.
pub const CONTRAST_RATIO: f64 = 3.0;
/// Intensity step across a region boundary in the region's assigned modality.
pub const STRONG_STEP: f64 = 0.9;
/// Conventional step in the non-assigned modalities; [`SyntheticSpec`] can
/// lower it to make those views genuinely uninformative.
pub const WEAK_STEP: f64 = STRONG_STEP / CONTRAST_RATIO;
const BACKGROUND_LEVEL: f64 = 0.1;
const NOISE_SIGMA: f64 = 0.05;

// ---------------------------------------------------------------------------
// Manifest and sidecar schema

/// Top-level description of a stored dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub modalities: Vec<String>,
    pub regions: Vec<RegionDecl>,
    /// Physical voxel size per axis, shared by every case.
    pub spacing: Vec<f64>,
    pub cases: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorRef {
    file: String,
    dtype: String,
    sha256: String,
}

/// Per-case sidecar: everything needed to reload the raw tensor files.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CaseSidecar {
    case_id: String,
    shape: Vec<usize>,
    /// Row-major axis order, outermost first.
    axis_order: String,
    spacing: Vec<f64>,
    volumes: Vec<TensorRef>,
    mask: TensorRef,
}

fn axis_order_name(rank: usize) -> String {
    match rank {
        2 => "yx".to_string(),
        3 => "zyx".to_string(),
        r => format!("axis-major-{r}"),
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| CimlError::io(&tmp, &e))?;
        f.write_all(bytes).map_err(|e| CimlError::io(&tmp, &e))?;
        f.sync_all().map_err(|e| CimlError::io(&tmp, &e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| CimlError::io(path, &e))?;
    Ok(())
}

fn f32_bytes(t: &ArrayD<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for &v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn case_dir(root: &Path, case_id: &str) -> PathBuf {
    root.join("cases").join(case_id)
}

fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

/// Writes the dataset manifest (atomically) to `root/manifest.json`.
pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| CimlError::io(root, &e))?;
    let json = serde_json::to_vec_pretty(manifest)
        .map_err(|e| CimlError::io(manifest_path(root), &e))?;
    atomic_write(&manifest_path(root), &json)
}

/// Reads and structurally validates `root/manifest.json`.
pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(root);
    let bytes = std::fs::read(&path).map_err(|e| CimlError::io(&path, &e))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| CimlError::io(&path, &e))?;
    // Names must form valid vocabularies; RegionSet checks nesting too.
    ModalitySet::new(manifest.modalities.clone())?;
    RegionSet::new(&manifest.regions)?;
    if manifest.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(CimlError::Validation(format!(
            "manifest spacing must be positive, got {:?}",
            manifest.spacing
        )));
    }
    Ok(manifest)
}

/// Stores one case under `root/cases/{case_id}/`: one raw float32 file per
/// modality, a uint8 mask, and a checksummed JSON sidecar.
pub fn write_case(root: &Path, sample: &VolumeSample, modality_names: &[String]) -> Result<()> {
    if sample.volumes.len() != modality_names.len() {
        return Err(CimlError::Validation(format!(
            "case {}: {} volumes for {} modality names",
            sample.case_id,
            sample.volumes.len(),
            modality_names.len()
        )));
    }
    let dir = case_dir(root, &sample.case_id);
    std::fs::create_dir_all(&dir).map_err(|e| CimlError::io(&dir, &e))?;
    let shape = sample.mask.shape().to_vec();
    let mut volumes = Vec::with_capacity(sample.volumes.len());
    for (name, vol) in modality_names.iter().zip(&sample.volumes) {
        if vol.shape() != &shape[..] {
            return Err(CimlError::Shape(format!(
                "case {}: volume {name} shape {:?} != mask shape {shape:?}",
                sample.case_id,
                vol.shape()
            )));
        }
        let bytes = f32_bytes(vol);
        let file = format!("{name}.f32");
        atomic_write(&dir.join(&file), &bytes)?;
        volumes.push(TensorRef { file, dtype: "f32le".into(), sha256: hex_digest(&bytes) });
    }
    let mask_bytes: Vec<u8> = sample.mask.iter().copied().collect();
    atomic_write(&dir.join("mask.u8"), &mask_bytes)?;
    let sidecar = CaseSidecar {
        case_id: sample.case_id.clone(),
        axis_order: axis_order_name(shape.len()),
        shape,
        spacing: sample.spacing.clone(),
        volumes,
        mask: TensorRef {
            file: "mask.u8".into(),
            dtype: "u8".into(),
            sha256: hex_digest(&mask_bytes),
        },
    };
    let json = serde_json::to_vec_pretty(&sidecar)
        .map_err(|e| CimlError::io(dir.join("case.json"), &e))?;
    atomic_write(&dir.join("case.json"), &json)
}

fn read_tensor_bytes(dir: &Path, tref: &TensorRef, expect_len: usize) -> Result<Vec<u8>> {
    let path = dir.join(&tref.file);
    let bytes = std::fs::read(&path).map_err(|e| CimlError::io(&path, &e))?;
    if bytes.len() != expect_len {
        return Err(CimlError::Io {
            path: path.display().to_string(),
            message: format!("expected {expect_len} bytes from sidecar shape, found {}", bytes.len()),
        });
    }
    if hex_digest(&bytes) != tref.sha256 {
        return Err(CimlError::Io {
            path: path.display().to_string(),
            message: "checksum mismatch against sidecar".into(),
        });
    }
    Ok(bytes)
}

/// Loads one case back, verifying sidecar shapes and checksums.
pub fn read_case(root: &Path, case_id: &str, modality_names: &[String]) -> Result<VolumeSample> {
    let dir = case_dir(root, case_id);
    let sidecar_path = dir.join("case.json");
    let bytes = std::fs::read(&sidecar_path).map_err(|e| CimlError::io(&sidecar_path, &e))?;
    let sidecar: CaseSidecar =
        serde_json::from_slice(&bytes).map_err(|e| CimlError::io(&sidecar_path, &e))?;
    if sidecar.case_id != case_id {
        return Err(CimlError::Io {
            path: sidecar_path.display().to_string(),
            message: format!("sidecar case_id {:?} != directory {case_id:?}", sidecar.case_id),
        });
    }
    let voxels: usize = sidecar.shape.iter().product();
    if voxels == 0 {
        return Err(CimlError::Io {
            path: sidecar_path.display().to_string(),
            message: format!("sidecar shape {:?} has zero volume", sidecar.shape),
        });
    }
    let names: Vec<&str> = sidecar.volumes.iter().map(|v| v.file.trim_end_matches(".f32")).collect();
    if names != modality_names.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(CimlError::Io {
            path: sidecar_path.display().to_string(),
            message: format!("sidecar modalities {names:?} != requested {modality_names:?}"),
        });
    }
    let mut volumes = Vec::with_capacity(sidecar.volumes.len());
    for tref in &sidecar.volumes {
        if tref.dtype != "f32le" {
            return Err(CimlError::Io {
                path: dir.join(&tref.file).display().to_string(),
                message: format!("unsupported dtype {:?}", tref.dtype),
            });
        }
        let bytes = read_tensor_bytes(&dir, tref, voxels * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        volumes.push(ArrayD::from_shape_vec(IxDyn(&sidecar.shape), data).unwrap());
    }
    if sidecar.mask.dtype != "u8" {
        return Err(CimlError::Io {
            path: dir.join(&sidecar.mask.file).display().to_string(),
            message: format!("unsupported mask dtype {:?}", sidecar.mask.dtype),
        });
    }
    let mask_bytes = read_tensor_bytes(&dir, &sidecar.mask, voxels)?;
    let mask = ArrayD::from_shape_vec(IxDyn(&sidecar.shape), mask_bytes).unwrap();
    Ok(VolumeSample {
        case_id: case_id.to_string(),
        volumes,
        mask,
        spacing: sidecar.spacing,
    })
}

/// A dataset opened for reading: validated manifest plus lazy case loading.
pub struct Dataset {
    root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Opens `root`, validating the manifest and each case's sidecar
    /// existence up front (tensor payloads are checked on load).
    pub fn open(root: &Path) -> Result<Dataset> {
        let manifest = read_manifest(root)?;
        if manifest.cases.is_empty() {
            return Err(CimlError::Validation(format!(
                "dataset {} lists no cases",
                root.display()
            )));
        }
        for case in &manifest.cases {
            let sidecar = case_dir(root, case).join("case.json");
            if !sidecar.exists() {
                return Err(CimlError::Io {
                    path: sidecar.display().to_string(),
                    message: "case listed in manifest but sidecar missing".into(),
                });
            }
        }
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.cases.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<VolumeSample> {
        let case = &self.manifest.cases[index];
        let sample = read_case(&self.root, case, &self.manifest.modalities)?;
        let modalities = ModalitySet::new(self.manifest.modalities.clone())?;
        let regions = RegionSet::new(&self.manifest.regions)?;
        sample.validate(&modalities, &regions)?;
        Ok(sample)
    }

    pub fn vocabularies(&self) -> Result<(ModalitySet, RegionSet)> {
        Ok((
            ModalitySet::new(self.manifest.modalities.clone())?,
            RegionSet::new(&self.manifest.regions)?,
        ))
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Everything the nested-ellipsoid generator needs.
pub struct SyntheticSpec {
    pub n_cases: usize,
    /// Cubic edge length; must be ≥ 16 and divisible by 16.
    pub size: usize,
    pub n_modalities: usize,
    /// For each region (outermost first), the modality whose boundary step
    /// is [`CONTRAST_RATIO`] times stronger than every other modality's.
    pub contrast_modality: Vec<usize>,
    /// Boundary step outside the assigned modality.  [`WEAK_STEP`] keeps the
    /// conventional 3:1 contrast; values at or below the noise floor make
    /// each region visible only through its assigned modality.
    pub weak_step: f64,
    pub seed: u64,
}

/// Default three-region nesting used by the generator and the demos.
pub fn nested_region_decls() -> Vec<RegionDecl> {
    vec![
        RegionDecl { name: "outer".into(), class_index: 1, parent: None },
        RegionDecl { name: "middle".into(), class_index: 2, parent: Some("outer".into()) },
        RegionDecl { name: "inner".into(), class_index: 3, parent: Some("middle".into()) },
    ]
}

struct Ellipsoid {
    center: [f64; 3],
    semi_axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut acc = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.semi_axes[a];
            acc += d * d;
        }
        acc <= 1.0
    }
}

/// Generates `spec.n_cases` nested-ellipsoid volumes under `root` and
/// returns the written manifest.  Identical inputs produce identical bytes.
pub fn generate_synthetic_volumes(root: &Path, spec: &SyntheticSpec) -> Result<DatasetManifest> {
    if spec.size < 16 || spec.size % 16 != 0 {
        return Err(CimlError::Validation(format!(
            "volume size must be ≥ 16 and divisible by 16, got {}",
            spec.size
        )));
    }
    if spec.n_cases == 0 {
        return Err(CimlError::Validation("need at least one case".into()));
    }
    let regions = nested_region_decls();
    if spec.contrast_modality.len() != regions.len() {
        return Err(CimlError::Validation(format!(
            "need one contrast modality per region ({}), got {}",
            regions.len(),
            spec.contrast_modality.len()
        )));
    }
    if let Some(&bad) = spec.contrast_modality.iter().find(|&&m| m >= spec.n_modalities) {
        return Err(CimlError::Validation(format!(
            "contrast modality {bad} out of range for {} modalities",
            spec.n_modalities
        )));
    }
    if !spec.weak_step.is_finite() || spec.weak_step < 0.0 || spec.weak_step >= STRONG_STEP {
        return Err(CimlError::Validation(format!(
            "weak step must lie in [0, {STRONG_STEP}), got {}",
            spec.weak_step
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cases = Vec::with_capacity(spec.n_cases);
    for i in 0..spec.n_cases {
        let case_id = format!("case{i:04}");
        let sample = synthesize_case(&mut rng, &case_id, spec)?;
        write_case(root, &sample, &modality_names(spec.n_modalities))?;
        cases.push(case_id);
    }
    let manifest = DatasetManifest {
        modalities: modality_names(spec.n_modalities),
        regions,
        spacing: vec![1.0; 3],
        cases,
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

pub fn modality_names(n: usize) -> Vec<String> {
    (0..n).map(|m| format!("m{m}")).collect()
}

fn synthesize_case(rng: &mut ChaCha8Rng, case_id: &str, spec: &SyntheticSpec) -> Result<VolumeSample> {
    let s = spec.size as f64;
    let center: [f64; 3] = std::array::from_fn(|_| s / 2.0 + rng.random_range(-0.04..0.04) * s);
    // Outer semi-axes jitter per axis.  The two shell ratios are drawn per
    // case (bounds keep the innermost region ≥ 2 voxels at size 16) so no
    // boundary's geometry is predictable from another's — each one has to
    // be read out of its own assigned modality.
    let outer: [f64; 3] = std::array::from_fn(|_| 0.38 * s * rng.random_range(0.95..1.05));
    let r1 = rng.random_range(0.60..0.78);
    let r2 = rng.random_range(0.60..0.78);
    let shells = [1.0, r1, r1 * r2];
    let ellipsoids: Vec<Ellipsoid> = shells
        .iter()
        .map(|&f| Ellipsoid { center, semi_axes: std::array::from_fn(|a| outer[a] * f) })
        .collect();
    if let Some(e) = ellipsoids.iter().find(|e| e.semi_axes.iter().any(|&a| a < 2.0)) {
        return Err(CimlError::Generation(format!(
            "case {case_id}: innermost semi-axes {:?} fall below 2 voxels; increase size",
            e.semi_axes
        )));
    }

    let n = spec.size;
    let shape = [n, n, n];
    let mut mask = ArrayD::from_elem(IxDyn(&shape), 0u8);
    {
        let flat = mask.as_slice_mut().unwrap();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                    let mut label = 0u8;
                    for (r, e) in ellipsoids.iter().enumerate() {
                        if e.contains(p) {
                            label = (r + 1) as u8;
                        }
                    }
                    flat[(z * n + y) * n + x] = label;
                }
            }
        }
    }

    // Intensity per modality: background plus one additive step per
    // containing region — strong in the region's contrast modality, weak
    // elsewhere — so every boundary is sharpest in its assigned modality.
    let mask_flat = mask.as_slice().unwrap().to_vec();
    let mut volumes = Vec::with_capacity(spec.n_modalities);
    for m in 0..spec.n_modalities {
        let mut levels = [BACKGROUND_LEVEL; 4];
        for depth in 1..=3usize {
            let step =
                if spec.contrast_modality[depth - 1] == m { STRONG_STEP } else { spec.weak_step };
            levels[depth] = levels[depth - 1] + step;
        }
        let data: Vec<f32> = mask_flat
            .iter()
            .map(|&l| {
                let noise: f64 = rng.sample(StandardNormal);
                (levels[l as usize] + NOISE_SIGMA * noise) as f32
            })
            .collect();
        volumes.push(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
    }

    Ok(VolumeSample {
        case_id: case_id.to_string(),
        volumes,
        mask,
        spacing: vec![1.0; 3],
    })
}

/// Mean absolute intensity step across each region's boundary, per modality:
/// `result[region][modality]`.  The step compares voxels just inside the
/// boundary against adjacent voxels just outside (6-neighbourhood).
pub fn boundary_contrast(sample: &VolumeSample, n_regions: usize) -> Vec<Vec<f64>> {
    let dims = sample.mask.shape().to_vec();
    let flat = sample.mask.as_slice().unwrap();
    let strides = {
        let mut s = vec![1isize; dims.len()];
        for a in (0..dims.len().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * dims[a + 1] as isize;
        }
        s
    };
    let mut out = vec![vec![0.0; sample.volumes.len()]; n_regions];
    let mut counts = vec![0usize; n_regions];
    let coords = |mut i: usize| -> Vec<usize> {
        let mut c = vec![0usize; dims.len()];
        for a in 0..dims.len() {
            c[a] = i / strides[a] as usize;
            i %= strides[a] as usize;
        }
        c
    };
    for i in 0..flat.len() {
        let inside = flat[i] as usize;
        if inside == 0 {
            continue;
        }
        let c = coords(i);
        for a in 0..dims.len() {
            for dir in [-1isize, 1] {
                let nc = c[a] as isize + dir;
                if nc < 0 || nc >= dims[a] as isize {
                    continue;
                }
                let j = (i as isize + dir * strides[a]) as usize;
                let outside = flat[j] as usize;
                // A boundary pair of region `inside`: the neighbour is
                // shallower, so the step between them is region `inside`'s.
                if outside < inside {
                    counts[inside - 1] += 1;
                    for (m, vol) in sample.volumes.iter().enumerate() {
                        let v = vol.as_slice().unwrap();
                        out[inside - 1][m] += (v[i] as f64 - v[j] as f64).abs();
                    }
                }
            }
        }
    }
    for r in 0..n_regions {
        if counts[r] > 0 {
            for m in 0..out[r].len() {
                out[r][m] /= counts[r] as f64;
            }
        }
    }
    out
}
