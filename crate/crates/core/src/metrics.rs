//! Segmentation quality metrics and the cross-segmentor ensemble rule.
//!
//! Dice and the 95th-percentile Hausdorff distance are computed per region
//! on *membership* masks: a voxel belongs to a region if its label is that
//! region's class or any descendant's, so nested structures are scored the
//! way they are annotated (whole ⊇ core ⊇ enhancing, etc.).
//!
//! Conventions, since the literature varies:
//! * Dice of two empty masks is `1.0`.
//! * HD is measured from each mask's face-boundary voxels to the nearest
//!   foreground voxel of the *other mask's full set*, per direction, then the
//!   requested percentile (linear interpolation between order statistics) is
//!   taken per direction and the two directions maxed.
//! * HD against an empty mask has no value and reports `None`.

use crate::config::{RegionId, RegionSet, TaskAssignment};
use crate::{CimlError, Result};
use ndarray::{ArrayD, Axis, IxDyn};

/// Per-region evaluation row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionReport {
    pub region: RegionId,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
}

/// Overlap score `2|A∩B| / (|A| + |B|)`; `1.0` when both masks are empty.
pub fn dice_score(pred: &ArrayD<bool>, truth: &ArrayD<bool>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(CimlError::Shape(format!(
            "dice_score: mask shapes differ ({:?} vs {:?})",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        a += p as usize;
        b += t as usize;
        inter += (p && t) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// 95th-percentile symmetric Hausdorff distance in physical units.
pub fn hd95(pred: &ArrayD<bool>, truth: &ArrayD<bool>, spacing: &[f64]) -> Result<Option<f64>> {
    hausdorff_distance(pred, truth, spacing, 95.0)
}

/// Symmetric `percentile`-Hausdorff distance between two masks;
/// `percentile = 100` gives the classical maximum Hausdorff distance.
/// Returns `None` if either mask has no foreground.
pub fn hausdorff_distance(
    pred: &ArrayD<bool>,
    truth: &ArrayD<bool>,
    spacing: &[f64],
    percentile: f64,
) -> Result<Option<f64>> {
    if pred.shape() != truth.shape() {
        return Err(CimlError::Shape(format!(
            "hausdorff: mask shapes differ ({:?} vs {:?})",
            pred.shape(),
            truth.shape()
        )));
    }
    let d = pred.ndim();
    if spacing.len() != d {
        return Err(CimlError::Validation(format!(
            "hausdorff: {} spacing entries for a {d}-d mask",
            spacing.len()
        )));
    }
    if spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
        return Err(CimlError::Validation(format!("hausdorff: invalid spacing {spacing:?}")));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(CimlError::Validation(format!("hausdorff: percentile {percentile}")));
    }

    let a = MaskGeometry::new(pred);
    let b = MaskGeometry::new(truth);
    if a.fg_count == 0 || b.fg_count == 0 {
        return Ok(None);
    }
    let d_ab = directed_percentile(&a, &b, spacing, percentile);
    let d_ba = directed_percentile(&b, &a, spacing, percentile);
    Ok(Some(d_ab.max(d_ba)))
}

/// Foreground bitmap plus the coordinates of face-boundary voxels
/// (foreground with at least one background or out-of-volume face neighbour).
struct MaskGeometry {
    dims: Vec<usize>,
    membership: Vec<bool>,
    /// Flattened boundary coordinates, `dims.len()` entries per voxel.
    boundary: Vec<isize>,
    fg_count: usize,
}

impl MaskGeometry {
    fn new(mask: &ArrayD<bool>) -> Self {
        let dims: Vec<usize> = mask.shape().to_vec();
        let d = dims.len();
        let mut strides = vec![1usize; d];
        for i in (0..d.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * dims[i + 1];
        }
        // `iter` walks in logical row-major order regardless of layout.
        let membership: Vec<bool> = mask.iter().copied().collect();
        let mut boundary = Vec::new();
        let mut fg_count = 0usize;
        let mut coord = vec![0usize; d];
        for (idx, &fg) in membership.iter().enumerate() {
            if fg {
                fg_count += 1;
                let mut rem = idx;
                for ax in 0..d {
                    coord[ax] = rem / strides[ax];
                    rem %= strides[ax];
                }
                let mut on_edge = false;
                'axes: for ax in 0..d {
                    for dir in [-1isize, 1] {
                        let n = coord[ax] as isize + dir;
                        if n < 0 || n as usize >= dims[ax] {
                            on_edge = true;
                            break 'axes;
                        }
                        let nidx = (idx as isize + dir * strides[ax] as isize) as usize;
                        if !membership[nidx] {
                            on_edge = true;
                            break 'axes;
                        }
                    }
                }
                if on_edge {
                    boundary.extend(coord.iter().map(|&c| c as isize));
                }
            }
        }
        MaskGeometry { dims, membership, boundary, fg_count }
    }

    fn linear(&self, coord: &[isize]) -> usize {
        let mut idx = 0usize;
        for (ax, &c) in coord.iter().enumerate() {
            idx = idx * self.dims[ax] + c as usize;
        }
        idx
    }
}

/// Percentile of `min_{y in to} dist(x, y)` over boundary voxels `x` of `from`.
fn directed_percentile(from: &MaskGeometry, to: &MaskGeometry, spacing: &[f64], q: f64) -> f64 {
    let d = spacing.len();
    let mut dists = Vec::with_capacity(from.boundary.len() / d);
    for x in from.boundary.chunks_exact(d) {
        if to.membership[to.linear(x)] {
            dists.push(0.0);
            continue;
        }
        // An exterior point's nearest foreground voxel lies on the boundary.
        let mut best = f64::INFINITY;
        for y in to.boundary.chunks_exact(d) {
            let mut acc = 0.0;
            for ax in 0..d {
                let delta = (x[ax] - y[ax]) as f64 * spacing[ax];
                acc += delta * delta;
            }
            best = best.min(acc);
        }
        dists.push(best.sqrt());
    }
    percentile_linear(&mut dists, q)
}

/// Percentile with linear interpolation between order statistics.
fn percentile_linear(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = rank - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

/// Membership mask of region `r` in a label map: voxels whose class is `r`'s
/// or any descendant's.
pub fn region_mask(labels: &ArrayD<u8>, regions: &RegionSet, r: RegionId) -> ArrayD<bool> {
    let classes = regions.member_classes(r);
    labels.mapv(|c| classes.contains(&c))
}

/// Dice and HD95 for every region of the vocabulary.
pub fn evaluate_case(
    pred_labels: &ArrayD<u8>,
    true_labels: &ArrayD<u8>,
    spacing: &[f64],
    regions: &RegionSet,
) -> Result<Vec<RegionReport>> {
    if pred_labels.shape() != true_labels.shape() {
        return Err(CimlError::Shape(format!(
            "evaluate_case: label shapes differ ({:?} vs {:?})",
            pred_labels.shape(),
            true_labels.shape()
        )));
    }
    let mut out = Vec::with_capacity(regions.len());
    for r in regions.ids() {
        let pm = region_mask(pred_labels, regions, r);
        let tm = region_mask(true_labels, regions, r);
        out.push(RegionReport {
            region: r,
            dice: dice_score(&pm, &tm)?,
            hd95: hd95(&pm, &tm, spacing)?,
        });
    }
    Ok(out)
}

/// Averaged per-region membership probabilities across the segmentors
/// assigned to each region.
///
/// Input `per_segmentor_probs[m]` holds modality `m`'s softmax output with
/// shape `[1 + n_targets(m), spatial...]`.  A segmentor's belief that a voxel
/// belongs to region `r` is the sum of its channels for targets contained in
/// `r` — its channels are exclusive ("in this target and no deeper one"), so
/// the cumulative sum is the comparable quantity across segmentors with
/// different target depths.
///
/// Returns one spatial array per region, indexed by `RegionId`.
pub fn region_memberships(
    per_segmentor_probs: &[ArrayD<f64>],
    assignment: &TaskAssignment,
    regions: &RegionSet,
) -> Result<Vec<ArrayD<f64>>> {
    if per_segmentor_probs.len() != assignment.n_modalities() {
        return Err(CimlError::Validation(format!(
            "expected {} probability maps, got {}",
            assignment.n_modalities(),
            per_segmentor_probs.len()
        )));
    }
    let spatial: Vec<usize> = per_segmentor_probs
        .first()
        .ok_or_else(|| CimlError::Validation("no segmentor outputs".into()))?
        .shape()[1..]
        .to_vec();
    let n_sp: usize = spatial.iter().product();

    for (m_idx, probs) in per_segmentor_probs.iter().enumerate() {
        let m = crate::config::ModalityId(m_idx);
        let want = assignment.n_outputs(m);
        if probs.ndim() != spatial.len() + 1
            || probs.shape()[0] != want
            || probs.shape()[1..] != spatial[..]
        {
            return Err(CimlError::Shape(format!(
                "segmentor {m_idx}: expected probabilities [{want}, {spatial:?}], got {:?}",
                probs.shape()
            )));
        }
        let mut sums = vec![0.0f64; n_sp];
        for ch in 0..want {
            for (s, &p) in sums.iter_mut().zip(probs.index_axis(Axis(0), ch).iter()) {
                if !(0.0..=1.0 + 1e-9).contains(&p) {
                    return Err(CimlError::Validation(format!(
                        "segmentor {m_idx}: probability {p} out of range"
                    )));
                }
                *s += p;
            }
        }
        if sums.iter().any(|&s| (s - 1.0).abs() > 1e-6) {
            return Err(CimlError::Validation(format!(
                "segmentor {m_idx}: probabilities do not sum to 1 per voxel"
            )));
        }
    }

    let mut memberships = Vec::with_capacity(regions.len());
    for r in regions.ids() {
        let owners = assignment.primaries_of(r);
        if owners.is_empty() {
            return Err(CimlError::Domain(format!(
                "region {} has no assigned segmentor",
                regions.name(r)
            )));
        }
        let mut acc = vec![0.0f64; n_sp];
        for &m in &owners {
            let probs = &per_segmentor_probs[m.0];
            for (pos, &t) in assignment.targets(m).iter().enumerate() {
                if t == r || regions.is_ancestor(r, t) {
                    let ch = probs.index_axis(Axis(0), pos + 1);
                    for (a, &p) in acc.iter_mut().zip(ch.iter()) {
                        *a += p;
                    }
                }
            }
        }
        let scale = 1.0 / owners.len() as f64;
        for a in &mut acc {
            *a *= scale;
        }
        memberships.push(ArrayD::from_shape_vec(IxDyn(&spatial), acc).expect("shape matches"));
    }
    Ok(memberships)
}

/// Fuses all segmentors into one label map.
///
/// Per voxel, a region is *present* when its averaged membership probability
/// exceeds the complementary background mass (`> 0.5`); among present
/// regions the most specific one (greatest nesting depth, ties broken by
/// probability then class index) supplies the label, and a voxel with no
/// present region is background.  The result automatically satisfies region
/// nesting because each voxel stores only its most specific region.
pub fn ensemble_regions(
    per_segmentor_probs: &[ArrayD<f64>],
    assignment: &TaskAssignment,
    regions: &RegionSet,
) -> Result<ArrayD<u8>> {
    let memberships = region_memberships(per_segmentor_probs, assignment, regions)?;
    let spatial: Vec<usize> = per_segmentor_probs[0].shape()[1..].to_vec();
    let n_sp: usize = spatial.iter().product();

    let order: Vec<RegionId> = {
        let mut ids: Vec<RegionId> = regions.ids().collect();
        // Deepest first; stable fall-back to class order for determinism.
        ids.sort_by_key(|&r| (usize::MAX - regions.depth(r), regions.class_index(r)));
        ids
    };

    let mut labels = vec![0u8; n_sp];
    for v in 0..n_sp {
        let mut best: Option<(usize, f64, RegionId)> = None;
        for &r in &order {
            let p = memberships[r.0].as_slice().expect("owned layout")[v];
            if p <= 0.5 {
                continue;
            }
            let depth = regions.depth(r);
            let better = match best {
                None => true,
                Some((bd, bp, _)) => depth > bd || (depth == bd && p > bp),
            };
            if better {
                best = Some((depth, p, r));
            }
        }
        if let Some((_, _, r)) = best {
            labels[v] = regions.class_index(r);
        }
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&spatial), labels).expect("shape matches"))
}
