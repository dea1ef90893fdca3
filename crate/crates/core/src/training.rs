//! Joint training of the per-modality networks.
//!
//! Every iteration runs all encoders, exchanges message bundles, runs all
//! decoders, and takes a single Adam step on the summed objective, so
//! gradients flow across networks through the messages (the only cut is the
//! receiver-local attention detach inside the gates).  The learning rate
//! follows the polynomial decay schedule, and each iteration appends one
//! JSON-serialisable record with the per-network loss breakdown.
//!
//! Patches are uniform random crops; half of them are re-aimed to contain
//! at least one foreground voxel so sparse masks still supervise the
//! foreground classes.  Augmentation is limited to axis flips and 90°
//! rotations, which keep cubic patches cubic.

use crate::autodiff::{Adam, AdamConfig, ParamStore, Tape, TensorD};
use crate::config::{
    poly_lr, ArchitectureConfig, ModalityId, ModalitySet, RegionSet, TaskAssignment, TrainConfig,
    VolumeSample,
};
use crate::data::Dataset;
use crate::losses::{ciml_total_loss, remap_mask, LossBreakdown};
use crate::metrics::{ensemble_regions, evaluate_case};
use crate::nn::{MessageBundle, NoiseSource, Segmentor, SegmentorOutput};
use crate::{CimlError, Result};
use ndarray::{ArrayD, Axis, IxDyn, Slice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::Path;

/// One optimizer step's worth of telemetry.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub per_segmentor: Vec<LossBreakdown>,
}

/// A batch ready for the networks: one `[B, 1, P^d]` tensor per modality
/// plus the global-class mask crops `[B, P^d]`.
pub struct PatchBatch {
    pub inputs: Vec<TensorD>,
    pub mask: ArrayD<u8>,
}

/// Everything that advances during training.
pub struct Trainer {
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
    pub modalities: ModalitySet,
    pub regions: RegionSet,
    pub assignment: TaskAssignment,
    pub store: ParamStore,
    pub segmentors: Vec<Segmentor>,
    adam: Adam,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    pub epoch: usize,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(
        arch: ArchitectureConfig,
        train: TrainConfig,
        modalities: ModalitySet,
        regions: RegionSet,
        assignment: TaskAssignment,
    ) -> Result<Trainer> {
        arch.validate()?;
        train.validate()?;
        crate::config::validate_assignment(&assignment, &modalities, &regions)?;
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(train.seed);
        let n_messages = modalities.len() - 1;
        let mut segmentors = Vec::with_capacity(modalities.len());
        for m in modalities.ids() {
            let prefix = format!("seg.{}", modalities.name(m));
            let seg = Segmentor::new(
                &mut store,
                &mut init_rng,
                &prefix,
                &arch,
                n_messages,
                assignment.n_outputs(m),
            )?;
            segmentors.push(seg);
        }
        let adam = Adam::new(
            AdamConfig { weight_decay: train.weight_decay, ..AdamConfig::default() },
            &store,
        );
        Ok(Trainer {
            data_rng: ChaCha8Rng::seed_from_u64(train.seed ^ 0x9e3779b97f4a7c15),
            noise_rng: ChaCha8Rng::seed_from_u64(train.seed ^ 0x1f83d9abfb41bd6b),
            adam,
            arch,
            train,
            modalities,
            regions,
            assignment,
            store,
            segmentors,
            epoch: 0,
            iteration: 0,
        })
    }

    /// Learning rate in force for the current epoch.
    pub fn current_lr(&self) -> f64 {
        poly_lr(self.train.initial_lr, self.epoch, self.train.max_epochs)
    }

    /// Draws one batch of aligned crops: uniform origins, with half the
    /// draws re-aimed so the crop contains a foreground voxel.
    pub fn sample_batch(&mut self, data: &[VolumeSample]) -> Result<PatchBatch> {
        if data.is_empty() {
            return Err(CimlError::Validation("training dataset is empty".into()));
        }
        let d = self.arch.spatial_dims;
        let p = self.arch.patch_size;
        let b = self.train.batch_size;
        let n_mod = self.modalities.len();
        let mut mask_data = Vec::with_capacity(b * p.pow(d as u32));
        let mut input_data: Vec<Vec<f64>> = vec![Vec::with_capacity(b * p.pow(d as u32)); n_mod];
        for _ in 0..b {
            let case = &data[self.data_rng.random_range(0..data.len())];
            let dims = case.mask.shape().to_vec();
            if dims.len() != d || case.volumes.len() != n_mod {
                return Err(CimlError::Validation(format!(
                    "case {}: rank {} with {} volumes, expected rank {d} with {n_mod}",
                    case.case_id,
                    dims.len(),
                    case.volumes.len()
                )));
            }
            if dims.iter().any(|&x| x < p) {
                return Err(CimlError::Validation(format!(
                    "case {}: extent {dims:?} smaller than patch {p}",
                    case.case_id
                )));
            }
            let origin = self.pick_origin(case, &dims, p);
            let crop_mask = crop(&case.mask, &origin, p);
            let mut crops: Vec<ArrayD<f64>> = case
                .volumes
                .iter()
                .map(|v| crop(v, &origin, p).mapv(|x| x as f64))
                .collect();
            let mut crop_mask = crop_mask;
            augment(&mut self.data_rng, &mut crop_mask, &mut crops);
            mask_data.extend(crop_mask.iter().copied());
            for (m, c) in crops.iter().enumerate() {
                input_data[m].extend(c.iter().copied());
            }
        }
        let mut spatial = vec![b];
        spatial.extend(std::iter::repeat(p).take(d));
        let mask = ArrayD::from_shape_vec(IxDyn(&spatial), mask_data).unwrap();
        let mut in_shape = vec![b, 1];
        in_shape.extend(std::iter::repeat(p).take(d));
        let inputs = input_data
            .into_iter()
            .map(|v| ArrayD::from_shape_vec(IxDyn(&in_shape), v).unwrap())
            .collect();
        Ok(PatchBatch { inputs, mask })
    }

    fn pick_origin(&mut self, case: &VolumeSample, dims: &[usize], p: usize) -> Vec<usize> {
        let force_fg = self.data_rng.random_bool(0.5);
        if force_fg {
            let fg: Vec<usize> = case
                .mask
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0)
                .map(|(i, _)| i)
                .collect();
            if let Some(&pick) = fg.get(self.data_rng.random_range(0..fg.len().max(1)) % fg.len().max(1)) {
                if !fg.is_empty() {
                    let coords = unflatten(pick, dims);
                    return dims
                        .iter()
                        .zip(&coords)
                        .map(|(&dim, &c)| {
                            let low = c.saturating_sub(p - 1).min(dim - p);
                            let high = c.min(dim - p);
                            self.data_rng.random_range(low..=high)
                        })
                        .collect();
                }
            }
        }
        dims.iter().map(|&dim| self.data_rng.random_range(0..=dim - p)).collect()
    }

    /// Runs one joint step on a prepared batch and returns its record.
    pub fn train_iteration(&mut self, batch: &PatchBatch) -> Result<IterationRecord> {
        let lr = self.current_lr();
        let mut t = Tape::new();
        let mut feats = Vec::with_capacity(self.segmentors.len());
        for (m, seg) in self.segmentors.iter().enumerate() {
            let x = t.constant(batch.inputs[m].clone());
            feats.push(seg.encode(&mut t, &mut self.store, x, true)?);
        }
        let bundles: Vec<MessageBundle> = feats
            .iter()
            .map(|f| MessageBundle { stages: f.messages.stages.clone() })
            .collect();
        let mut outputs = Vec::with_capacity(self.segmentors.len());
        let mut local_masks = Vec::with_capacity(self.segmentors.len());
        for (m, seg) in self.segmentors.iter().enumerate() {
            let incoming: Vec<MessageBundle> = bundles
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != m)
                .map(|(_, b)| MessageBundle { stages: b.stages.clone() })
                .collect();
            let mut noise = NoiseSource::Fixed(self.noise_rng.random());
            let out =
                seg.decode(&mut t, &mut self.store, &feats[m], &incoming, &mut noise, true)?;
            outputs.push(out);
            local_masks.push(remap_mask(
                &self.regions,
                &self.assignment,
                ModalityId(m),
                &batch.mask,
            ));
        }
        let (grand, parts) = ciml_total_loss(&mut t, &outputs, &local_masks, self.train.beta)?;
        for (m, part) in parts.iter().enumerate() {
            for (term, value) in [
                ("cross-entropy", part.ce),
                ("dice", part.dice_loss),
                ("code-penalty", part.kl),
                ("total", part.total),
            ] {
                if !value.is_finite() {
                    return Err(CimlError::Numeric(format!(
                        "network {} {term} loss is {value} at epoch {} iteration {}",
                        self.modalities.name(ModalityId(m)),
                        self.epoch,
                        self.iteration,
                    )));
                }
            }
        }
        let grads = t.backward(grand);
        let param_grads = t.param_grads(&grads, &self.store);
        self.adam.step(&mut self.store, &param_grads, lr);
        let record = IterationRecord {
            epoch: self.epoch,
            iteration: self.iteration,
            lr,
            per_segmentor: parts,
        };
        self.iteration += 1;
        Ok(record)
    }

    /// One full epoch: `iterations_per_epoch` sampled batches and steps.
    pub fn train_epoch(&mut self, data: &[VolumeSample]) -> Result<Vec<IterationRecord>> {
        let mut records = Vec::with_capacity(self.train.iterations_per_epoch);
        for _ in 0..self.train.iterations_per_epoch {
            let batch = self.sample_batch(data)?;
            records.push(self.train_iteration(&batch)?);
        }
        self.epoch += 1;
        Ok(records)
    }

    /// Inference-mode forward on one prepared `[1, 1, P^d]` crop per
    /// modality.  The whole exchange graph stays alive on `t`, so callers
    /// can differentiate through any of the returned handles.  Codes
    /// collapse to their means.
    pub fn forward_patch(
        &mut self,
        t: &mut Tape,
        inputs: &[TensorD],
    ) -> Result<Vec<SegmentorOutput>> {
        if inputs.len() != self.segmentors.len() {
            return Err(CimlError::Validation(format!(
                "got {} input crops for {} networks",
                inputs.len(),
                self.segmentors.len()
            )));
        }
        let mut feats = Vec::with_capacity(self.segmentors.len());
        for (m, seg) in self.segmentors.iter().enumerate() {
            let x = t.constant(inputs[m].clone());
            feats.push(seg.encode(t, &mut self.store, x, false)?);
        }
        let bundles: Vec<MessageBundle> = feats
            .iter()
            .map(|f| MessageBundle { stages: f.messages.stages.clone() })
            .collect();
        let mut outputs = Vec::with_capacity(self.segmentors.len());
        for (m, seg) in self.segmentors.iter().enumerate() {
            let incoming: Vec<MessageBundle> = bundles
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != m)
                .map(|(_, b)| MessageBundle { stages: b.stages.clone() })
                .collect();
            outputs.push(seg.decode(
                t,
                &mut self.store,
                &feats[m],
                &incoming,
                &mut NoiseSource::Mean,
                false,
            )?);
        }
        Ok(outputs)
    }

    /// Per-network class probabilities on a full volume, assembled from
    /// non-overlapping patch tiles (each extent must be a multiple of the
    /// patch size).  Deterministic: codes collapse to their means.
    pub fn predict_probs(&mut self, sample: &VolumeSample) -> Result<Vec<ArrayD<f64>>> {
        let d = self.arch.spatial_dims;
        let p = self.arch.patch_size;
        let dims = sample.mask.shape().to_vec();
        if dims.len() != d {
            return Err(CimlError::Validation(format!(
                "case {}: rank {} volume for a rank-{d} model",
                sample.case_id,
                dims.len()
            )));
        }
        if dims.iter().any(|&x| x % p != 0) {
            return Err(CimlError::Validation(format!(
                "case {}: extents {dims:?} are not multiples of the patch size {p}",
                sample.case_id
            )));
        }
        if sample.volumes.len() != self.modalities.len() {
            return Err(CimlError::Validation(format!(
                "case {}: {} volumes for {} modalities",
                sample.case_id,
                sample.volumes.len(),
                self.modalities.len()
            )));
        }
        let mut probs: Vec<ArrayD<f64>> = self
            .segmentors
            .iter()
            .enumerate()
            .map(|(m, _)| {
                let mut shape = vec![self.assignment.n_outputs(ModalityId(m))];
                shape.extend_from_slice(&dims);
                ArrayD::zeros(IxDyn(&shape))
            })
            .collect();
        let tiles: Vec<Vec<usize>> = tile_origins(&dims, p);
        for origin in tiles {
            let mut in_shape = vec![1, 1];
            in_shape.extend(std::iter::repeat(p).take(d));
            let inputs: Vec<TensorD> = sample
                .volumes
                .iter()
                .map(|v| {
                    let c = crop(v, &origin, p).mapv(|x| x as f64);
                    c.into_shape_with_order(IxDyn(&in_shape)).unwrap()
                })
                .collect();
            let mut t = Tape::new();
            let outputs = self.forward_patch(&mut t, &inputs)?;
            for (m, out) in outputs.iter().enumerate() {
                let sm = t.softmax_channels(out.logits);
                let tile = t.value(sm);
                paste_tile(&mut probs[m], tile, &origin, p);
            }
        }
        Ok(probs)
    }

    /// Ensemble label volume for one case (most specific region wins).
    pub fn predict_labels(&mut self, sample: &VolumeSample) -> Result<ArrayD<u8>> {
        let probs = self.predict_probs(sample)?;
        ensemble_regions(&probs, &self.assignment, &self.regions)
    }

    /// Mean per-region overlap quality over full cases.
    pub fn evaluate_cases(&mut self, data: &[VolumeSample]) -> Result<EvalSummary> {
        if data.is_empty() {
            return Err(CimlError::Validation("evaluation dataset is empty".into()));
        }
        let n_regions = self.regions.len();
        let mut dice_sums = vec![0.0; n_regions];
        let mut hd_sums = vec![0.0; n_regions];
        let mut hd_counts = vec![0usize; n_regions];
        for sample in data {
            let labels = self.predict_labels(sample)?;
            let reports = evaluate_case(&labels, &sample.mask, &sample.spacing, &self.regions)?;
            for (r, report) in reports.iter().enumerate() {
                dice_sums[r] += report.dice;
                if let Some(h) = report.hd95 {
                    hd_sums[r] += h;
                    hd_counts[r] += 1;
                }
            }
        }
        let n = data.len() as f64;
        let per_region = self
            .regions
            .ids()
            .enumerate()
            .map(|(r, id)| RegionSummary {
                region: self.regions.name(id).to_string(),
                mean_dice: dice_sums[r] / n,
                mean_hd95: if hd_counts[r] > 0 { Some(hd_sums[r] / hd_counts[r] as f64) } else { None },
            })
            .collect::<Vec<_>>();
        let mean_dice = per_region.iter().map(|r| r.mean_dice).sum::<f64>() / n_regions as f64;
        Ok(EvalSummary { per_region, mean_dice })
    }

    /// Writes all weights plus a manifest describing the run.  The manifest
    /// carries the full setup (vocabulary, assignment, hyperparameters), so
    /// [`Trainer::from_checkpoint`] can rebuild the trainer from the file
    /// alone.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let targets: std::collections::BTreeMap<String, Vec<String>> = self
            .modalities
            .ids()
            .map(|m| {
                let names = self
                    .assignment
                    .targets(m)
                    .iter()
                    .map(|&r| self.regions.name(r).to_string())
                    .collect();
                (self.modalities.name(m).to_string(), names)
            })
            .collect();
        let manifest = serde_json::json!({
            "epoch": self.epoch,
            "iteration": self.iteration,
            "architecture": self.arch,
            "training": self.train,
            "modalities": self.modalities.names(),
            "regions": self.regions.decls(),
            "targets": targets,
        });
        crate::nn::save_checkpoint(path, &self.store, manifest)
    }

    /// Rebuilds a trainer entirely from a checkpoint written by
    /// [`Trainer::save_checkpoint`]: setup from the manifest, weights from
    /// the payload.
    pub fn from_checkpoint(path: &Path) -> Result<Trainer> {
        let (manifest, _) = crate::nn::load_checkpoint(path)?;
        let field = |key: &str| {
            manifest.get(key).cloned().ok_or_else(|| {
                CimlError::Validation(format!(
                    "{}: checkpoint manifest lacks the {key} section",
                    path.display()
                ))
            })
        };
        let arch: ArchitectureConfig = parse_manifest(path, "architecture", field("architecture")?)?;
        let train: TrainConfig = parse_manifest(path, "training", field("training")?)?;
        let modality_names: Vec<String> = parse_manifest(path, "modalities", field("modalities")?)?;
        let decls: Vec<crate::config::RegionDecl> =
            parse_manifest(path, "regions", field("regions")?)?;
        let targets: std::collections::BTreeMap<String, Vec<String>> =
            parse_manifest(path, "targets", field("targets")?)?;
        let modalities = ModalitySet::new(modality_names)?;
        let regions = RegionSet::new(&decls)?;
        let mut target_ids = Vec::with_capacity(modalities.len());
        for m in modalities.ids() {
            let names = targets.get(modalities.name(m)).ok_or_else(|| {
                CimlError::Validation(format!(
                    "{}: no target list for modality {}",
                    path.display(),
                    modalities.name(m)
                ))
            })?;
            let ids = names
                .iter()
                .map(|n| {
                    regions.id_of(n).ok_or_else(|| {
                        CimlError::Validation(format!(
                            "{}: unknown region {n} in target list",
                            path.display()
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            target_ids.push(ids);
        }
        let assignment = TaskAssignment::new(target_ids, &regions)?;
        let mut trainer = Trainer::new(arch, train, modalities, regions, assignment)?;
        trainer.load_checkpoint(path)?;
        Ok(trainer)
    }

    /// Restores weights from a checkpoint written by [`Trainer::save_checkpoint`]
    /// and resumes its epoch counter.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let manifest = crate::nn::load_checkpoint_into(path, &mut self.store)?;
        if let Some(epoch) = manifest.get("epoch").and_then(|v| v.as_u64()) {
            self.epoch = epoch as usize;
        }
        if let Some(iter) = manifest.get("iteration").and_then(|v| v.as_u64()) {
            self.iteration = iter as usize;
        }
        Ok(())
    }
}

fn parse_manifest<T: serde::de::DeserializeOwned>(
    path: &Path,
    key: &str,
    value: serde_json::Value,
) -> Result<T> {
    serde_json::from_value(value).map_err(|e| {
        CimlError::Validation(format!("{}: checkpoint manifest {key}: {e}", path.display()))
    })
}

/// Per-region evaluation means over a dataset.
#[derive(Debug, Clone, Serialize)]
pub struct RegionSummary {
    pub region: String,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub per_region: Vec<RegionSummary>,
    pub mean_dice: f64,
}

/// Loads every case of an opened dataset into memory.
pub fn load_all(ds: &Dataset) -> Result<Vec<VolumeSample>> {
    (0..ds.len()).map(|i| ds.load(i)).collect()
}

/// Appends iteration records to a JSON-lines file.
pub fn append_records(path: &Path, records: &[IterationRecord]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CimlError::io(path, &e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CimlError::io(path, &e))?;
        writeln!(f, "{line}").map_err(|e| CimlError::io(path, &e))?;
    }
    Ok(())
}

fn unflatten(mut index: usize, dims: &[usize]) -> Vec<usize> {
    let mut coords = vec![0usize; dims.len()];
    for a in (0..dims.len()).rev() {
        coords[a] = index % dims[a];
        index /= dims[a];
    }
    coords
}

fn crop<T: Clone>(a: &ArrayD<T>, origin: &[usize], p: usize) -> ArrayD<T> {
    let view = a.slice_each_axis(|ax| {
        let o = origin[ax.axis.index()] as isize;
        Slice::new(o, Some(o + p as isize), 1)
    });
    view.to_owned()
}

fn tile_origins(dims: &[usize], p: usize) -> Vec<Vec<usize>> {
    let mut origins = vec![vec![]];
    for &dim in dims {
        let mut next = Vec::new();
        for base in &origins {
            for o in (0..dim).step_by(p) {
                let mut b = base.clone();
                b.push(o);
                next.push(b);
            }
        }
        origins = next;
    }
    origins
}

/// Writes a `[1, O, P^d]` probability tile into `probs` (`[O, full^d]`).
fn paste_tile(probs: &mut ArrayD<f64>, tile: &TensorD, origin: &[usize], p: usize) {
    let classes = probs.shape()[0];
    let mut dst = probs.slice_each_axis_mut(|ax| {
        let i = ax.axis.index();
        if i == 0 {
            Slice::from(..)
        } else {
            let o = origin[i - 1] as isize;
            Slice::new(o, Some(o + p as isize), 1)
        }
    });
    let mut tile_shape = vec![classes];
    tile_shape.extend(tile.shape()[2..].iter());
    let tile = tile.view().into_shape_with_order(IxDyn(&tile_shape)).unwrap();
    dst.assign(&tile);
}

/// In-place axis flips (each spatial axis with probability ½) and one
/// quarter-turn rotation in a random spatial plane, applied identically to
/// the mask and every volume crop.
fn augment(rng: &mut ChaCha8Rng, mask: &mut ArrayD<u8>, volumes: &mut [ArrayD<f64>]) {
    let d = mask.ndim();
    for axis in 0..d {
        if rng.random_bool(0.5) {
            mask.invert_axis(Axis(axis));
            for v in volumes.iter_mut() {
                v.invert_axis(Axis(axis));
            }
        }
    }
    // Pick an ordered pair of distinct spatial axes and a turn count.
    let a = rng.random_range(0..d);
    let b = (a + 1 + rng.random_range(0..d - 1)) % d;
    let k = rng.random_range(0..4u8);
    for _ in 0..k {
        mask.swap_axes(a, b);
        mask.invert_axis(Axis(a));
        for v in volumes.iter_mut() {
            v.swap_axes(a, b);
            v.invert_axis(Axis(a));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{NormKind, RegionDecl};
    use crate::data::{generate_synthetic_volumes, Dataset, SyntheticSpec, WEAK_STEP};

    fn tiny_setup(seed: u64, n_modalities: usize) -> (Trainer, Vec<VolumeSample>) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            n_cases: 3,
            size: 16,
            n_modalities,
            contrast_modality: vec![1 % n_modalities, 2 % n_modalities, 3 % n_modalities],
            weak_step: WEAK_STEP,
            seed: 77,
        };
        generate_synthetic_volumes(dir.path(), &spec).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let data = load_all(&ds).unwrap();
        let (modalities, regions) = ds.vocabularies().unwrap();
        let outer = regions.id_of("outer").unwrap();
        let middle = regions.id_of("middle").unwrap();
        let inner = regions.id_of("inner").unwrap();
        let targets = match n_modalities {
            2 => vec![vec![outer], vec![middle, inner]],
            4 => vec![vec![outer], vec![middle], vec![inner], vec![outer]],
            _ => panic!("unsupported modality count in tests"),
        };
        let assignment = TaskAssignment::new(targets, &regions).unwrap();
        let arch = ArchitectureConfig {
            patch_size: 16,
            base_channels: 1,
            spatial_dims: 3,
            norm: NormKind::Instance,
        };
        let train = TrainConfig {
            max_epochs: 10,
            iterations_per_epoch: 2,
            batch_size: 1,
            initial_lr: 1e-3,
            weight_decay: 3e-5,
            beta: 0.5,
            seed,
        };
        let trainer = Trainer::new(arch, train, modalities, regions, assignment).unwrap();
        (trainer, data)
    }

    #[test]
    fn two_runs_with_the_same_seed_are_bit_identical() {
        let (mut a, data_a) = tiny_setup(5, 2);
        let (mut b, data_b) = tiny_setup(5, 2);
        let ra = a.train_epoch(&data_a).unwrap();
        let rb = b.train_epoch(&data_b).unwrap();
        assert_eq!(ra.len(), 2);
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!(x.lr.to_bits(), y.lr.to_bits());
            for (p, q) in x.per_segmentor.iter().zip(&y.per_segmentor) {
                assert_eq!(p.ce.to_bits(), q.ce.to_bits());
                assert_eq!(p.dice_loss.to_bits(), q.dice_loss.to_bits());
                assert_eq!(p.kl.to_bits(), q.kl.to_bits());
                assert_eq!(p.total.to_bits(), q.total.to_bits());
            }
        }
        // A different seed changes the trajectory.
        let (mut c, data_c) = tiny_setup(6, 2);
        let rc = c.train_epoch(&data_c).unwrap();
        assert_ne!(ra[0].per_segmentor[0].total.to_bits(), rc[0].per_segmentor[0].total.to_bits());
    }

    #[test]
    fn logged_lr_follows_the_polynomial_schedule() {
        let (mut t, data) = tiny_setup(3, 2);
        for epoch in 0..3 {
            let records = t.train_epoch(&data).unwrap();
            let expect = poly_lr(t.train.initial_lr, epoch, t.train.max_epochs);
            for r in &records {
                assert_eq!(r.epoch, epoch);
                assert_eq!(r.lr.to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_naming_the_network_and_term() {
        let (mut t, data) = tiny_setup(4, 2);
        let batch = t.sample_batch(&data).unwrap();
        let id = t.store.lookup("seg.m1.output.weight").unwrap();
        t.store.value_mut(id)[[0, 0, 0, 0, 0]] = f64::NAN;
        let err = t.train_iteration(&batch).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, CimlError::Numeric(_)), "{msg}");
        assert!(msg.contains("m1"), "should name the network: {msg}");
        assert!(
            ["cross-entropy", "dice", "code-penalty"].iter().any(|t| msg.contains(t)),
            "should name the offending term: {msg}"
        );
    }

    #[test]
    fn batches_have_contract_shapes_and_sane_values() {
        let (mut t, data) = tiny_setup(8, 4);
        let batch = t.sample_batch(&data).unwrap();
        assert_eq!(batch.inputs.len(), 4);
        for x in &batch.inputs {
            assert_eq!(x.shape(), &[1, 1, 16, 16, 16]);
            assert!(x.iter().all(|v| v.is_finite()));
        }
        assert_eq!(batch.mask.shape(), &[1, 16, 16, 16]);
        assert!(batch.mask.iter().all(|&v| v <= 3));
    }

    #[test]
    fn augmentation_preserves_voxel_multisets() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mask0 = ArrayD::from_shape_vec(
            IxDyn(&[4, 4, 4]),
            (0..64u32).map(|i| (i % 5) as u8).collect(),
        )
        .unwrap();
        let vol0 = ArrayD::from_shape_vec(IxDyn(&[4, 4, 4]), (0..64).map(f64::from).collect())
            .unwrap();
        for _ in 0..20 {
            let mut mask = mask0.clone();
            let mut vols = vec![vol0.clone()];
            augment(&mut rng, &mut mask, &mut vols);
            assert_eq!(mask.shape(), &[4, 4, 4]);
            let mut pairs: Vec<(u64, u8)> = vols[0]
                .iter()
                .zip(mask.iter())
                .map(|(&v, &m)| (v.to_bits(), m))
                .collect();
            let mut expect: Vec<(u64, u8)> = vol0
                .iter()
                .zip(mask0.iter())
                .map(|(&v, &m)| (v.to_bits(), m))
                .collect();
            pairs.sort_unstable();
            expect.sort_unstable();
            assert_eq!(pairs, expect, "flips and quarter turns only permute voxels");
        }
    }

    #[test]
    fn prediction_tiles_cover_multi_patch_volumes() {
        let (mut t, _) = tiny_setup(9, 2);
        // A 32-wide case tiled by 16-wide patches: 8 tiles.
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            n_cases: 1,
            size: 32,
            n_modalities: 2,
            contrast_modality: vec![1, 0, 1],
            weak_step: WEAK_STEP,
            seed: 3,
        };
        generate_synthetic_volumes(dir.path(), &spec).unwrap();
        let sample = Dataset::open(dir.path()).unwrap().load(0).unwrap();
        let probs = t.predict_probs(&sample).unwrap();
        assert_eq!(probs.len(), 2);
        assert_eq!(probs[0].shape(), &[2, 32, 32, 32]);
        assert_eq!(probs[1].shape(), &[3, 32, 32, 32]);
        // Every voxel's class probabilities sum to one (softmax pasted everywhere).
        for pr in &probs {
            let classes = pr.shape()[0];
            let spatial: usize = pr.shape()[1..].iter().product();
            let flat = pr.as_slice().unwrap();
            for v in 0..spatial {
                let s: f64 = (0..classes).map(|c| flat[c * spatial + v]).sum();
                assert!((s - 1.0).abs() < 1e-9, "voxel {v} sums to {s}");
            }
        }
        let labels = t.predict_labels(&sample).unwrap();
        assert_eq!(labels.shape(), &[32, 32, 32]);
    }

    #[test]
    fn checkpoint_round_trip_resumes_epoch_and_weights() {
        let (mut t, data) = tiny_setup(10, 2);
        t.train_epoch(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        t.save_checkpoint(&path).unwrap();

        let (mut fresh, _) = tiny_setup(11, 2);
        fresh.load_checkpoint(&path).unwrap();
        assert_eq!(fresh.epoch, 1);
        for id in t.store.ids() {
            let name = t.store.name(id).to_string();
            let other = fresh.store.lookup(&name).unwrap();
            let a = t.store.value(id);
            let b = fresh.store.value(other);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits(), "{name}");
            }
        }

        // The manifest alone rebuilds the whole setup.
        let rebuilt = Trainer::from_checkpoint(&path).unwrap();
        assert_eq!(rebuilt.epoch, 1);
        assert_eq!(rebuilt.modalities, t.modalities);
        assert_eq!(rebuilt.assignment, t.assignment);
        assert_eq!(rebuilt.arch, t.arch);
        for id in t.store.ids() {
            let name = t.store.name(id).to_string();
            let other = rebuilt.store.lookup(&name).unwrap();
            let a = t.store.value(id);
            let b = rebuilt.store.value(other);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn rejects_mismatched_vocabularies() {
        let modalities = ModalitySet::new(vec!["a".into(), "b".into()]).unwrap();
        let regions = RegionSet::new(&[RegionDecl {
            name: "only".into(),
            class_index: 1,
            parent: None,
        }])
        .unwrap();
        let only = regions.id_of("only").unwrap();
        // Assignment that covers just one of the two modalities.
        let bad = TaskAssignment::new(vec![vec![only]], &regions).unwrap();
        let arch = ArchitectureConfig {
            patch_size: 16,
            base_channels: 1,
            spatial_dims: 3,
            norm: NormKind::Instance,
        };
        let err = Trainer::new(arch, TrainConfig::default(), modalities, regions, bad);
        assert!(err.is_err());
    }
}
