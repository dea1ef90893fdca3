//! Modality/region vocabulary, task assignment, and run configuration.
//!
//! A dataset declares an ordered list of input modalities and a catalogue of
//! target regions.  Regions may nest (e.g. an "enhancing core" inside a
//! "core" inside a "whole" region); masks store the most specific class at
//! each voxel.  A [`TaskAssignment`] gives every modality the region subset
//! its segmentor predicts; the remaining modalities act as auxiliary message
//! sources for that segmentor.

use crate::{CimlError, Result};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Index into the dataset's modality list.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalityId(pub usize);

/// Index into the dataset's region catalogue.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionId(pub usize);

/// Ordered modality names; order fixes both channel order in samples and
/// segmentor order in the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySet {
    names: Vec<String>,
}

impl ModalitySet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(CimlError::Validation("modality list is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(CimlError::Validation("empty modality name".into()));
            }
            if names[..i].contains(n) {
                return Err(CimlError::Validation(format!("duplicate modality name: {n}")));
            }
        }
        Ok(ModalitySet { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ModalityId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ModalityId> {
        self.names.iter().position(|n| n == name).map(ModalityId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ModalityId> {
        (0..self.names.len()).map(ModalityId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One region as declared by a dataset or config file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionDecl {
    pub name: String,
    /// Value this region contributes to masks; `0` is reserved for background.
    pub class_index: u8,
    /// Name of the immediately containing region, if nested.
    #[serde(default)]
    pub parent: Option<String>,
}

#[derive(Clone, Debug)]
struct RegionInfo {
    name: String,
    class_index: u8,
    parent: Option<RegionId>,
}

/// Region catalogue with containment structure.
///
/// Class indices must be exactly `1..=len` (each used once) so that masks
/// and one-hot channel layouts are unambiguous.
#[derive(Clone, Debug)]
pub struct RegionSet {
    regions: Vec<RegionInfo>,
}

impl RegionSet {
    pub fn new(decls: &[RegionDecl]) -> Result<Self> {
        if decls.is_empty() {
            return Err(CimlError::Validation("region list is empty".into()));
        }
        let n = decls.len();
        let mut seen_class = vec![false; n + 1];
        for d in decls {
            if d.name.is_empty() {
                return Err(CimlError::Validation("empty region name".into()));
            }
            let c = d.class_index as usize;
            if c == 0 || c > n {
                return Err(CimlError::Validation(format!(
                    "region {} has class index {} outside 1..={}",
                    d.name, d.class_index, n
                )));
            }
            if seen_class[c] {
                return Err(CimlError::Validation(format!(
                    "class index {} assigned to more than one region",
                    d.class_index
                )));
            }
            seen_class[c] = true;
        }
        let id_of = |name: &str| decls.iter().position(|d| d.name == name).map(RegionId);
        let mut regions = Vec::with_capacity(n);
        for (i, d) in decls.iter().enumerate() {
            if decls[..i].iter().any(|p| p.name == d.name) {
                return Err(CimlError::Validation(format!("duplicate region name: {}", d.name)));
            }
            let parent = match &d.parent {
                None => None,
                Some(p) => Some(id_of(p).ok_or_else(|| {
                    CimlError::Validation(format!("region {}: unknown parent {p}", d.name))
                })?),
            };
            regions.push(RegionInfo { name: d.name.clone(), class_index: d.class_index, parent });
        }
        let set = RegionSet { regions };
        // Containment must be a forest.
        for id in set.ids() {
            let mut hops = 0;
            let mut cur = Some(id);
            while let Some(c) = cur {
                hops += 1;
                if hops > n {
                    return Err(CimlError::Validation(format!(
                        "region containment cycle through {}",
                        set.name(id)
                    )));
                }
                cur = set.parent(c);
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = RegionId> {
        (0..self.regions.len()).map(RegionId)
    }

    pub fn name(&self, id: RegionId) -> &str {
        &self.regions[id.0].name
    }

    pub fn class_index(&self, id: RegionId) -> u8 {
        self.regions[id.0].class_index
    }

    pub fn parent(&self, id: RegionId) -> Option<RegionId> {
        self.regions[id.0].parent
    }

    pub fn id_of(&self, name: &str) -> Option<RegionId> {
        self.regions.iter().position(|r| r.name == name).map(RegionId)
    }

    pub fn by_class(&self, class_index: u8) -> Option<RegionId> {
        self.regions.iter().position(|r| r.class_index == class_index).map(RegionId)
    }

    /// Number of mask classes including background.
    pub fn n_classes(&self) -> usize {
        self.regions.len() + 1
    }

    /// `a` strictly contains `b`.
    pub fn is_ancestor(&self, a: RegionId, b: RegionId) -> bool {
        let mut cur = self.parent(b);
        while let Some(c) = cur {
            if c == a {
                return true;
            }
            cur = self.parent(c);
        }
        false
    }

    /// Mask classes whose voxels belong to region `r`'s extent:
    /// `r`'s own class plus every descendant's.
    pub fn member_classes(&self, r: RegionId) -> Vec<u8> {
        let mut out = vec![self.class_index(r)];
        for id in self.ids() {
            if self.is_ancestor(r, id) {
                out.push(self.class_index(id));
            }
        }
        out.sort_unstable();
        out
    }

    /// Declarations that rebuild this set through [`RegionSet::new`].
    pub fn decls(&self) -> Vec<RegionDecl> {
        self.regions
            .iter()
            .map(|r| RegionDecl {
                name: r.name.clone(),
                class_index: r.class_index,
                parent: r.parent.map(|p| self.regions[p.0].name.clone()),
            })
            .collect()
    }

    /// Nesting depth (0 for outermost regions).
    pub fn depth(&self, r: RegionId) -> usize {
        let mut d = 0;
        let mut cur = self.parent(r);
        while let Some(c) = cur {
            d += 1;
            cur = self.parent(c);
        }
        d
    }
}

/// Per-modality primary target sets.  Entry `i` belongs to modality `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskAssignment {
    targets: Vec<Vec<RegionId>>,
}

impl TaskAssignment {
    /// `targets[i]` lists the regions modality `i` predicts.  Target lists
    /// are stored sorted by class index, which also fixes each segmentor's
    /// output-channel order (background first).
    pub fn new(mut targets: Vec<Vec<RegionId>>, regions: &RegionSet) -> Result<Self> {
        for t in &mut targets {
            t.sort_by_key(|r| regions.class_index(*r));
        }
        let a = TaskAssignment { targets };
        Ok(a)
    }

    pub fn n_modalities(&self) -> usize {
        self.targets.len()
    }

    pub fn targets(&self, m: ModalityId) -> &[RegionId] {
        &self.targets[m.0]
    }

    /// Modalities whose segmentor predicts `r`.
    pub fn primaries_of(&self, r: RegionId) -> Vec<ModalityId> {
        self.targets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.contains(&r))
            .map(|(i, _)| ModalityId(i))
            .collect()
    }

    /// Output channels of modality `m`'s segmentor: background + its targets.
    pub fn n_outputs(&self, m: ModalityId) -> usize {
        1 + self.targets[m.0].len()
    }

    /// Local label (channel index) of a most-specific mask class within
    /// modality `m`'s segmentor: the innermost assigned region containing
    /// that class, or 0 (background) if none does.
    pub fn local_label(&self, regions: &RegionSet, m: ModalityId, global_class: u8) -> u8 {
        if global_class == 0 {
            return 0;
        }
        let Some(mut cur) = regions.by_class(global_class) else { return 0 };
        loop {
            if let Some(pos) = self.targets[m.0].iter().position(|&t| t == cur) {
                return (pos + 1) as u8;
            }
            match regions.parent(cur) {
                Some(p) => cur = p,
                None => return 0,
            }
        }
    }
}

/// Checks an assignment against the vocabulary: each modality appears exactly
/// once with a non-empty, duplicate-free target list, every region is covered
/// by at least one modality, and all ids are in range.
pub fn validate_assignment(
    assignment: &TaskAssignment,
    modalities: &ModalitySet,
    regions: &RegionSet,
) -> Result<()> {
    if assignment.n_modalities() != modalities.len() {
        return Err(CimlError::Validation(format!(
            "assignment covers {} modalities, dataset has {}",
            assignment.n_modalities(),
            modalities.len()
        )));
    }
    let mut covered = vec![false; regions.len()];
    for m in modalities.ids() {
        let t = assignment.targets(m);
        if t.is_empty() {
            return Err(CimlError::Validation(format!(
                "modality {} has no target regions",
                modalities.name(m)
            )));
        }
        for (i, r) in t.iter().enumerate() {
            if r.0 >= regions.len() {
                return Err(CimlError::Validation(format!(
                    "modality {}: region id {} out of range",
                    modalities.name(m),
                    r.0
                )));
            }
            if t[..i].contains(r) {
                return Err(CimlError::Validation(format!(
                    "modality {}: duplicate target {}",
                    modalities.name(m),
                    regions.name(*r)
                )));
            }
            covered[r.0] = true;
        }
    }
    for (i, c) in covered.iter().enumerate() {
        if !c {
            return Err(CimlError::Validation(format!(
                "region {} is not assigned to any modality",
                regions.name(RegionId(i))
            )));
        }
    }
    Ok(())
}

/// How feature maps are normalised inside the networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Instance,
    Batch,
}

/// Network shape parameters shared by every segmentor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Cubic patch side `P`; must be divisible by 16 (four halvings).
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    /// Channel width `C` of the first encoder stage; stage `s` uses `C * 2^(s-1)`.
    #[serde(default = "default_channels")]
    pub base_channels: usize,
    /// 2 for planar inputs, 3 for volumetric.
    #[serde(default = "default_dims")]
    pub spatial_dims: usize,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
}

fn default_patch() -> usize {
    16
}
fn default_channels() -> usize {
    4
}
fn default_dims() -> usize {
    3
}
fn default_norm() -> NormKind {
    NormKind::Instance
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            patch_size: default_patch(),
            base_channels: default_channels(),
            spatial_dims: default_dims(),
            norm: default_norm(),
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 16 != 0 {
            return Err(CimlError::Validation(format!(
                "patch_size {} must be a positive multiple of 16",
                self.patch_size
            )));
        }
        if self.base_channels == 0 {
            return Err(CimlError::Validation("base_channels must be positive".into()));
        }
        if !(self.spatial_dims == 2 || self.spatial_dims == 3) {
            return Err(CimlError::Validation(format!(
                "spatial_dims must be 2 or 3, got {}",
                self.spatial_dims
            )));
        }
        Ok(())
    }

    /// Channels of encoder stage `s` (1-based): `C * 2^(s-1)`.
    pub fn stage_channels(&self, stage: usize) -> usize {
        assert!((1..=4).contains(&stage));
        self.base_channels << (stage - 1)
    }

    /// Spatial side of encoder stage `s` output: `P / 2^s`.
    pub fn stage_size(&self, stage: usize) -> usize {
        assert!((1..=4).contains(&stage));
        self.patch_size >> stage
    }
}

/// Optimisation schedule and loss weighting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_iters")]
    pub iterations_per_epoch: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub initial_lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Weight of the KL term in the per-segmentor loss.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    500
}
fn default_iters() -> usize {
    100
}
fn default_batch() -> usize {
    2
}
fn default_lr() -> f64 {
    1e-4
}
fn default_wd() -> f64 {
    3e-5
}
fn default_beta() -> f64 {
    0.5
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: default_epochs(),
            iterations_per_epoch: default_iters(),
            batch_size: default_batch(),
            initial_lr: default_lr(),
            weight_decay: default_wd(),
            beta: default_beta(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.iterations_per_epoch == 0 || self.batch_size == 0 {
            return Err(CimlError::Validation(
                "max_epochs, iterations_per_epoch and batch_size must be positive".into(),
            ));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(CimlError::Validation("initial_lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(CimlError::Validation("weight_decay must be non-negative".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CimlError::Validation("beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Polynomial learning-rate decay: `initial * (1 - epoch/max_epochs)^0.9`.
/// Reaches exactly `initial` at epoch 0 and exactly 0 at `epoch == max_epochs`.
pub fn poly_lr(initial_lr: f64, epoch: usize, max_epochs: usize) -> f64 {
    assert!(max_epochs > 0, "poly_lr: max_epochs must be positive");
    let frac = 1.0 - (epoch as f64 / max_epochs as f64);
    initial_lr * frac.max(0.0).powf(0.9)
}

/// One multimodal case held in memory: aligned volumes (one per modality,
/// identical shapes) and a most-specific-class mask.
#[derive(Clone, Debug)]
pub struct VolumeSample {
    pub case_id: String,
    pub volumes: Vec<ArrayD<f32>>,
    pub mask: ArrayD<u8>,
    /// Physical voxel size per axis, used by surface-distance metrics.
    pub spacing: Vec<f64>,
}

impl VolumeSample {
    pub fn validate(&self, modalities: &ModalitySet, regions: &RegionSet) -> Result<()> {
        if self.volumes.len() != modalities.len() {
            return Err(CimlError::Validation(format!(
                "case {}: {} volumes for {} modalities",
                self.case_id,
                self.volumes.len(),
                modalities.len()
            )));
        }
        let shape = self.mask.shape();
        for (i, v) in self.volumes.iter().enumerate() {
            if v.shape() != shape {
                return Err(CimlError::Validation(format!(
                    "case {}: volume {} shape {:?} != mask shape {:?}",
                    self.case_id,
                    modalities.name(ModalityId(i)),
                    v.shape(),
                    shape
                )));
            }
        }
        if self.spacing.len() != shape.len() {
            return Err(CimlError::Validation(format!(
                "case {}: spacing rank {} != volume rank {}",
                self.case_id,
                self.spacing.len(),
                shape.len()
            )));
        }
        let n_classes = regions.n_classes() as u8;
        if let Some(&bad) = self.mask.iter().find(|&&v| v >= n_classes) {
            return Err(CimlError::Validation(format!(
                "case {}: mask value {} outside 0..{}",
                self.case_id, bad, n_classes
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Config files

/// `[assignment]` section: modality order and per-modality target regions.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentSection {
    pub modalities: Vec<String>,
    /// Modality name -> names of the regions its segmentor predicts.
    pub targets: BTreeMap<String, Vec<String>>,
}

/// A full run configuration file (TOML or JSON).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub assignment: AssignmentSection,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub training: TrainConfig,
}

impl FileConfig {
    /// Parses by file extension (`.toml` or `.json`); unknown keys anywhere
    /// are validation errors.
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CimlError::io(path, e))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let cfg: FileConfig = match ext {
            "toml" => toml::from_str(&text)
                .map_err(|e| CimlError::Validation(format!("{}: {e}", path.display())))?,
            "json" => serde_json::from_str(&text)
                .map_err(|e| CimlError::Validation(format!("{}: {e}", path.display())))?,
            other => {
                return Err(CimlError::Validation(format!(
                    "unsupported config extension {other:?} (want .toml or .json)"
                )))
            }
        };
        cfg.validate_sections()?;
        Ok(cfg)
    }

    /// Structural checks that do not need the dataset's region catalogue.
    pub fn validate_sections(&self) -> Result<()> {
        let modalities = ModalitySet::new(self.assignment.modalities.clone())?;
        for name in self.assignment.targets.keys() {
            if modalities.id_of(name).is_none() {
                return Err(CimlError::Validation(format!(
                    "targets given for unknown modality {name}"
                )));
            }
        }
        for name in modalities.names() {
            match self.assignment.targets.get(name) {
                None => {
                    return Err(CimlError::Validation(format!(
                        "modality {name} has no target entry"
                    )))
                }
                Some(t) if t.is_empty() => {
                    return Err(CimlError::Validation(format!(
                        "modality {name} has an empty target list"
                    )))
                }
                Some(_) => {}
            }
        }
        self.architecture.validate()?;
        self.training.validate()?;
        Ok(())
    }

    /// Resolves the assignment's region names against a region catalogue.
    pub fn resolve_assignment(&self, regions: &RegionSet) -> Result<(ModalitySet, TaskAssignment)> {
        let modalities = ModalitySet::new(self.assignment.modalities.clone())?;
        let mut targets = Vec::with_capacity(modalities.len());
        for name in modalities.names() {
            let list = self.assignment.targets.get(name).ok_or_else(|| {
                CimlError::Validation(format!("modality {name} has no target entry"))
            })?;
            let mut ids = Vec::with_capacity(list.len());
            for rname in list {
                let id = regions.id_of(rname).ok_or_else(|| {
                    CimlError::Validation(format!("modality {name}: unknown region {rname}"))
                })?;
                ids.push(id);
            }
            targets.push(ids);
        }
        let assignment = TaskAssignment::new(targets, regions)?;
        validate_assignment(&assignment, &modalities, regions)?;
        Ok((modalities, assignment))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brats_like() -> (ModalitySet, RegionSet, TaskAssignment) {
        let modalities = ModalitySet::new(
            ["flair", "t1", "t2", "t1ce"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let regions = RegionSet::new(&[
            RegionDecl { name: "whole".into(), class_index: 1, parent: None },
            RegionDecl { name: "core".into(), class_index: 2, parent: Some("whole".into()) },
            RegionDecl { name: "enhancing".into(), class_index: 3, parent: Some("core".into()) },
        ])
        .unwrap();
        let (w, c, e) = (
            regions.id_of("whole").unwrap(),
            regions.id_of("core").unwrap(),
            regions.id_of("enhancing").unwrap(),
        );
        let assignment =
            TaskAssignment::new(vec![vec![w], vec![c], vec![w, c], vec![c, e]], &regions).unwrap();
        (modalities, regions, assignment)
    }

    #[test]
    fn valid_assignment_passes() {
        let (m, r, a) = brats_like();
        validate_assignment(&a, &m, &r).unwrap();
    }

    #[test]
    fn uncovered_region_is_rejected() {
        let (m, r, _) = brats_like();
        let w = r.id_of("whole").unwrap();
        let c = r.id_of("core").unwrap();
        let a = TaskAssignment::new(vec![vec![w], vec![c], vec![w], vec![c]], &r).unwrap();
        let err = validate_assignment(&a, &m, &r).unwrap_err();
        assert!(err.to_string().contains("enhancing"));
    }

    #[test]
    fn empty_target_list_is_rejected() {
        let (m, r, _) = brats_like();
        let w = r.id_of("whole").unwrap();
        let c = r.id_of("core").unwrap();
        let e = r.id_of("enhancing").unwrap();
        let a = TaskAssignment::new(vec![vec![w], vec![], vec![c], vec![e]], &r).unwrap();
        assert!(validate_assignment(&a, &m, &r).is_err());
    }

    #[test]
    fn wrong_modality_count_is_rejected() {
        let (m, r, _) = brats_like();
        let w = r.id_of("whole").unwrap();
        let a = TaskAssignment::new(vec![vec![w]], &r).unwrap();
        assert!(validate_assignment(&a, &m, &r).is_err());
    }

    #[test]
    fn local_labels_follow_containment() {
        let (_, r, a) = brats_like();
        // flair predicts only "whole": every tumour class folds into it.
        let flair = ModalityId(0);
        assert_eq!(a.local_label(&r, flair, 0), 0);
        assert_eq!(a.local_label(&r, flair, 1), 1);
        assert_eq!(a.local_label(&r, flair, 2), 1);
        assert_eq!(a.local_label(&r, flair, 3), 1);
        // t1ce predicts core+enhancing: whole (outside core) is background.
        let t1ce = ModalityId(3);
        assert_eq!(a.local_label(&r, t1ce, 1), 0);
        assert_eq!(a.local_label(&r, t1ce, 2), 1);
        assert_eq!(a.local_label(&r, t1ce, 3), 2);
    }

    #[test]
    fn member_classes_include_descendants() {
        let (_, r, _) = brats_like();
        let w = r.id_of("whole").unwrap();
        let e = r.id_of("enhancing").unwrap();
        assert_eq!(r.member_classes(w), vec![1, 2, 3]);
        assert_eq!(r.member_classes(e), vec![3]);
        assert_eq!(r.depth(e), 2);
    }

    #[test]
    fn region_set_rejects_bad_class_indices() {
        assert!(RegionSet::new(&[RegionDecl {
            name: "a".into(),
            class_index: 0,
            parent: None
        }])
        .is_err());
        assert!(RegionSet::new(&[
            RegionDecl { name: "a".into(), class_index: 1, parent: None },
            RegionDecl { name: "b".into(), class_index: 1, parent: None },
        ])
        .is_err());
        assert!(RegionSet::new(&[RegionDecl {
            name: "a".into(),
            class_index: 2,
            parent: None
        }])
        .is_err());
    }

    #[test]
    fn region_cycle_is_rejected() {
        let err = RegionSet::new(&[
            RegionDecl { name: "a".into(), class_index: 1, parent: Some("b".into()) },
            RegionDecl { name: "b".into(), class_index: 2, parent: Some("a".into()) },
        ])
        .unwrap_err();
        assert!(err.to_string().contains("cycle"));
    }

    #[test]
    fn poly_lr_endpoints_and_midpoint() {
        assert_eq!(poly_lr(1e-4, 0, 500), 1e-4);
        assert_eq!(poly_lr(1e-4, 500, 500), 0.0);
        // (1/2)^0.9 = 0.535886731268...
        let mid = poly_lr(1e-4, 250, 500);
        let expect = 5.358867312681466e-5;
        assert!((mid - expect).abs() / expect < 1e-12);
        // Past the end the schedule stays clamped at zero.
        assert_eq!(poly_lr(1e-4, 600, 500), 0.0);
    }

    #[test]
    fn architecture_validation() {
        let mut a = ArchitectureConfig::default();
        a.validate().unwrap();
        assert_eq!(a.stage_channels(1), a.base_channels);
        assert_eq!(a.stage_channels(4), a.base_channels * 8);
        assert_eq!(a.stage_size(4), a.patch_size / 16);
        a.patch_size = 24;
        assert!(a.validate().is_err());
        a.patch_size = 32;
        a.spatial_dims = 4;
        assert!(a.validate().is_err());
    }

    #[test]
    fn toml_config_round_trip_and_unknown_key() {
        let good = r#"
[assignment]
modalities = ["flair", "t1"]
[assignment.targets]
flair = ["whole"]
t1 = ["core"]

[architecture]
patch_size = 32
base_channels = 2
spatial_dims = 2
norm = "batch"

[training]
max_epochs = 10
initial_lr = 1e-3
"#;
        let cfg: FileConfig = toml::from_str(good).unwrap();
        cfg.validate_sections().unwrap();
        assert_eq!(cfg.architecture.patch_size, 32);
        assert_eq!(cfg.architecture.norm, NormKind::Batch);
        assert_eq!(cfg.training.max_epochs, 10);
        // Unspecified training keys fall back to defaults.
        assert_eq!(cfg.training.iterations_per_epoch, 100);
        assert_eq!(cfg.training.weight_decay, 3e-5);
        assert_eq!(cfg.training.beta, 0.5);

        let with_typo = good.replace("initial_lr", "initial_lrr");
        assert!(toml::from_str::<FileConfig>(&with_typo).is_err());
    }

    #[test]
    fn json_config_parses() {
        let text = r#"{
            "assignment": {
                "modalities": ["a", "b"],
                "targets": {"a": ["r1"], "b": ["r2"]}
            },
            "architecture": {"patch_size": 16, "base_channels": 1, "spatial_dims": 2, "norm": "instance"},
            "training": {"max_epochs": 5}
        }"#;
        let cfg: FileConfig = serde_json::from_str(text).unwrap();
        cfg.validate_sections().unwrap();
        let regions = RegionSet::new(&[
            RegionDecl { name: "r1".into(), class_index: 1, parent: None },
            RegionDecl { name: "r2".into(), class_index: 2, parent: None },
        ])
        .unwrap();
        let (modalities, assignment) = cfg.resolve_assignment(&regions).unwrap();
        assert_eq!(modalities.len(), 2);
        assert_eq!(assignment.targets(ModalityId(0)), &[regions.id_of("r1").unwrap()]);
    }

    #[test]
    fn missing_target_entry_is_rejected() {
        let text = r#"
[assignment]
modalities = ["a", "b"]
[assignment.targets]
a = ["r1"]
"#;
        let cfg: FileConfig = toml::from_str(text).unwrap();
        assert!(cfg.validate_sections().is_err());
    }

    #[test]
    fn volume_sample_validation() {
        let modalities = ModalitySet::new(vec!["a".into(), "b".into()]).unwrap();
        let regions =
            RegionSet::new(&[RegionDecl { name: "r".into(), class_index: 1, parent: None }])
                .unwrap();
        let sample = VolumeSample {
            case_id: "c0".into(),
            volumes: vec![ArrayD::zeros(ndarray::IxDyn(&[4, 4])); 2],
            mask: ArrayD::zeros(ndarray::IxDyn(&[4, 4])),
            spacing: vec![1.0, 1.0],
        };
        sample.validate(&modalities, &regions).unwrap();

        let mut bad_mask = sample.clone();
        bad_mask.mask[[0, 0]] = 2;
        assert!(bad_mask.validate(&modalities, &regions).is_err());

        let mut bad_count = sample.clone();
        bad_count.volumes.pop();
        assert!(bad_count.validate(&modalities, &regions).is_err());
    }
}
