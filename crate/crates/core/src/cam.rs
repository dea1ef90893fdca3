//! Gradient-weighted activation maps over the exchanged codes.
//!
//! For a chosen network, target region and sending modality, the map answers
//! "where did that sender's code push this region's score?".  The class
//! score is the sum of the region's logits over the voxels actually
//! predicted as the region; its gradient against the shallowest-stage code
//! received from the sender gives per-channel importances, and the
//! ReLU-rectified importance-weighted channel sum is the heatmap.  Summing
//! heatmap mass per sender and normalizing across senders yields each
//! modality's contribution weight for that region.

use crate::autodiff::{Tape, TensorD, Var};
use crate::config::{ModalityId, RegionId, RegionSet, TaskAssignment};
use crate::nn::SegmentorOutput;
use crate::training::Trainer;
use crate::{CimlError, Result};
use ndarray::{ArrayD, IxDyn};
use serde::Serialize;

/// Heatmap for one (network, region, sending modality) triple.
pub struct HeatmapStack {
    /// The modality whose code is being explained.
    pub auxiliary: ModalityId,
    /// The region whose score was differentiated.
    pub region: RegionId,
    /// Per-channel importance weights of the code.
    pub alpha: Vec<f64>,
    /// Non-negative map at patch resolution (spatial axes only).
    pub map: ArrayD<f64>,
    /// Total map mass: sum over all voxels.
    pub mass: f64,
}

impl HeatmapStack {
    fn new(auxiliary: ModalityId, region: RegionId, alpha: Vec<f64>, map: ArrayD<f64>) -> Self {
        debug_assert!(map.iter().all(|&v| v >= 0.0));
        let mass = map.sum();
        HeatmapStack { auxiliary, region, alpha, map, mass }
    }
}

/// Normalized heatmap-mass shares of every sending modality, for one region.
#[derive(Debug, Clone, Serialize)]
pub struct ComplementaryWeights {
    pub region: RegionId,
    /// `(sender, share)` sorted by modality; shares are non-negative and
    /// sum to one.
    pub weights: Vec<(ModalityId, f64)>,
}

/// Per-channel importance: the gradient of `class_score` against
/// `feature_map`, averaged over voxels.  `feature_map` must be a single
/// sample `[1, C, spatial...]`; the score must be a scalar with a live
/// gradient path to the map.
pub fn gradcam_alpha(t: &Tape, feature_map: Var, class_score: Var) -> Result<Vec<f64>> {
    if t.value(class_score).len() != 1 {
        return Err(CimlError::Shape(format!(
            "class score must be a scalar, got shape {:?}",
            t.shape(class_score)
        )));
    }
    let a_shape = t.shape(feature_map).to_vec();
    if a_shape.len() < 3 || a_shape[0] != 1 {
        return Err(CimlError::Shape(format!(
            "feature map must be [1, C, spatial...], got {a_shape:?}"
        )));
    }
    let grads = t.backward(class_score);
    let g = grads.get(feature_map).ok_or_else(|| {
        CimlError::Domain("feature map is detached from the class score".into())
    })?;
    let c = a_shape[1];
    let n: usize = a_shape[2..].iter().product();
    let flat = g.as_slice().expect("gradients are contiguous");
    Ok((0..c).map(|ch| flat[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64).collect())
}

/// ReLU of the importance-weighted channel sum.  `feature_map` is a single
/// sample `[1, C, spatial...]`; the result drops the leading axes and keeps
/// the spatial shape.
pub fn gradcam_heatmap(feature_map: &TensorD, alpha: &[f64]) -> Result<ArrayD<f64>> {
    let a_shape = feature_map.shape();
    if a_shape.len() < 3 || a_shape[0] != 1 {
        return Err(CimlError::Shape(format!(
            "feature map must be [1, C, spatial...], got {a_shape:?}"
        )));
    }
    if a_shape[1] != alpha.len() {
        return Err(CimlError::Domain(format!(
            "{} importance weights for {} channels",
            alpha.len(),
            a_shape[1]
        )));
    }
    let spatial = a_shape[2..].to_vec();
    let n: usize = spatial.iter().product();
    let flat = feature_map.as_slice().expect("feature maps are contiguous");
    let mut out = vec![0.0; n];
    for (ch, &w) in alpha.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(&flat[ch * n..(ch + 1) * n]) {
            *o += w * v;
        }
    }
    for v in out.iter_mut() {
        *v = v.max(0.0);
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&spatial), out).unwrap())
}

/// Normalizes the masses of one region's heatmaps into shares.  All stacks
/// must explain the same region, one per sender.
pub fn complementary_weights(stacks: &[HeatmapStack]) -> Result<ComplementaryWeights> {
    let Some(first) = stacks.first() else {
        return Err(CimlError::Validation("no heatmaps to normalize".into()));
    };
    let region = first.region;
    let mut seen = std::collections::BTreeSet::new();
    for s in stacks {
        if s.region != region {
            return Err(CimlError::Validation(
                "heatmaps for different regions cannot share a weight row".into(),
            ));
        }
        if !seen.insert(s.auxiliary) {
            return Err(CimlError::Validation(format!(
                "two heatmaps claim sender {:?}",
                s.auxiliary
            )));
        }
    }
    let total: f64 = stacks.iter().map(|s| s.mass).sum();
    if !(total > 0.0) {
        return Err(CimlError::Domain(
            "total heatmap mass is zero; contribution weights are undefined".into(),
        ));
    }
    let mut weights: Vec<(ModalityId, f64)> =
        stacks.iter().map(|s| (s.auxiliary, s.mass / total)).collect();
    weights.sort_by_key(|&(m, _)| m);
    Ok(ComplementaryWeights { region, weights })
}

/// Which (network, region, sender) triple to explain.
#[derive(Clone, Copy, Debug)]
pub struct CamQuery {
    /// The network whose prediction is being explained.
    pub segmentor: ModalityId,
    /// A region that network predicts.
    pub region: RegionId,
    /// The modality whose incoming code is attributed.
    pub auxiliary: ModalityId,
}

/// Position of `auxiliary` in `segmentor`'s incoming-message list (every
/// other modality, in id order).
fn message_index(segmentor: ModalityId, auxiliary: ModalityId, n_modalities: usize) -> Result<usize> {
    if auxiliary == segmentor {
        return Err(CimlError::Validation(
            "a network receives no message from itself".into(),
        ));
    }
    if auxiliary.0 >= n_modalities || segmentor.0 >= n_modalities {
        return Err(CimlError::Validation(format!(
            "modality out of range for {n_modalities} networks"
        )));
    }
    Ok((0..n_modalities).filter(|&j| j != segmentor.0).position(|j| j == auxiliary.0).unwrap())
}

fn upsample_nearest(map: &ArrayD<f64>, factors: &[usize]) -> ArrayD<f64> {
    let in_shape = map.shape().to_vec();
    let out_shape: Vec<usize> =
        in_shape.iter().zip(factors).map(|(s, f)| s * f).collect();
    ArrayD::from_shape_fn(IxDyn(&out_shape), |idx| {
        let src: Vec<usize> = (0..in_shape.len()).map(|i| idx[i] / factors[i]).collect();
        map[IxDyn(&src)]
    })
}

/// Explains one (network, region, sender) triple on a finished forward
/// pass.  The class score is the sum of the region's logits over voxels
/// predicted as the region; the explained representation is the
/// shallowest-stage (highest-resolution) code received from the sender,
/// and the map is nearest-upsampled to patch resolution.
pub fn extract_complementary_cam(
    t: &mut Tape,
    outputs: &[SegmentorOutput],
    assignment: &TaskAssignment,
    regions: &RegionSet,
    query: &CamQuery,
) -> Result<HeatmapStack> {
    let m = query.segmentor;
    if m.0 >= outputs.len() {
        return Err(CimlError::Validation(format!(
            "network {} out of range for {} outputs",
            m.0,
            outputs.len()
        )));
    }
    let idx = message_index(m, query.auxiliary, outputs.len())?;
    let local = assignment
        .targets(m)
        .iter()
        .position(|&r| r == query.region)
        .map(|p| p + 1)
        .ok_or_else(|| {
            CimlError::Validation(format!(
                "network {} does not predict region {}",
                m.0,
                regions.name(query.region)
            ))
        })?;
    let out = &outputs[m.0];
    let logits_shape = t.shape(out.logits).to_vec();
    if logits_shape[0] != 1 {
        return Err(CimlError::Validation(
            "activation maps explain one sample at a time".into(),
        ));
    }
    let n_classes = logits_shape[1];
    let n: usize = logits_shape[2..].iter().product();

    // Frozen argmax selection: which voxels the network calls the region.
    let flat = t.value(out.logits).as_slice().expect("logits are contiguous").to_vec();
    let mut selector = vec![0.0; flat.len()];
    let mut hits = 0usize;
    for v in 0..n {
        let mut best = 0usize;
        for c in 1..n_classes {
            if flat[c * n + v] > flat[best * n + v] {
                best = c;
            }
        }
        if best == local {
            selector[local * n + v] = 1.0;
            hits += 1;
        }
    }
    if hits == 0 {
        return Err(CimlError::Domain(format!(
            "no voxel predicted as {}; its class score is undefined",
            regions.name(query.region)
        )));
    }
    let sel = t.constant(ArrayD::from_shape_vec(IxDyn(&logits_shape), selector).unwrap());
    let picked = t.mul(out.logits, sel);
    let score = t.sum_all(picked);

    let latent = out
        .latents
        .iter()
        .find(|l| l.stage == 1 && l.message_index == idx)
        .ok_or_else(|| {
            CimlError::Validation("the network holds no shallow-stage code for that sender".into())
        })?;
    let alpha = gradcam_alpha(t, latent.kappa, score)?;
    let map_half = gradcam_heatmap(t.value(latent.kappa), &alpha)?;
    let factors: Vec<usize> = logits_shape[2..]
        .iter()
        .zip(map_half.shape())
        .map(|(&full, &half)| {
            if full % half == 0 {
                Ok(full / half)
            } else {
                Err(CimlError::Shape(format!(
                    "code extent {half} does not divide patch extent {full}"
                )))
            }
        })
        .collect::<Result<_>>()?;
    let map = upsample_nearest(&map_half, &factors);
    Ok(HeatmapStack::new(query.auxiliary, query.region, alpha, map))
}

/// Heatmaps for every sender into `segmentor`, plus their normalized
/// shares, for one region on one finished forward pass.
pub fn segmentor_weights(
    t: &mut Tape,
    outputs: &[SegmentorOutput],
    assignment: &TaskAssignment,
    regions: &RegionSet,
    segmentor: ModalityId,
    region: RegionId,
) -> Result<(Vec<HeatmapStack>, ComplementaryWeights)> {
    let mut stacks = Vec::with_capacity(outputs.len().saturating_sub(1));
    for j in 0..outputs.len() {
        if j == segmentor.0 {
            continue;
        }
        let query = CamQuery { segmentor, region, auxiliary: ModalityId(j) };
        stacks.push(extract_complementary_cam(t, outputs, assignment, regions, &query)?);
    }
    let weights = complementary_weights(&stacks)?;
    Ok((stacks, weights))
}

/// Runs the exchange rig on one crop and explains `region` inside
/// `segmentor`: one heatmap per sender plus the normalized shares.
pub fn case_weights(
    trainer: &mut Trainer,
    inputs: &[TensorD],
    segmentor: ModalityId,
    region: RegionId,
) -> Result<(Vec<HeatmapStack>, ComplementaryWeights)> {
    let mut t = Tape::new();
    let outputs = trainer.forward_patch(&mut t, inputs)?;
    let assignment = trainer.assignment.clone();
    let regions = trainer.regions.clone();
    segmentor_weights(&mut t, &outputs, &assignment, &regions, segmentor, region)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ConvSpec;
    use crate::config::{ArchitectureConfig, ModalitySet, NormKind, RegionDecl, TrainConfig};
    use crate::training::Trainer;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_map(values: &[f64], shape: &[usize]) -> TensorD {
        ArrayD::from_shape_vec(IxDyn(shape), values.to_vec()).unwrap()
    }

    #[test]
    fn alpha_recovers_linear_functionals() {
        use crate::autodiff::ParamStore;
        let a_data = toy_map(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[1, 2, 2, 2]);
        let mut store = ParamStore::new();
        let a_id = store.add("toy.a", a_data, true).unwrap();

        // y = mean of channel 0 over 4 voxels: each of those voxels carries
        // gradient 1/4, so channel 0 averages to 1/4 and channel 1 to 0.
        let mut t = Tape::new();
        let a = t.param(&store, a_id);
        let w = toy_map(&[0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0], &[1, 2, 2, 2]);
        let wv = t.constant(w);
        let prod = t.mul(a, wv);
        let y = t.sum_all(prod);
        let alpha = gradcam_alpha(&t, a, y).unwrap();
        assert!((alpha[0] - 0.25).abs() < 1e-12);
        assert!(alpha[1].abs() < 1e-12);

        // y = sum of every entry: unit gradients average to 1 per channel.
        let mut t = Tape::new();
        let a = t.param(&store, a_id);
        let y = t.sum_all(a);
        let alpha = gradcam_alpha(&t, a, y).unwrap();
        assert!(alpha.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        // y insensitive to A (a zero-scaled copy): zero vector, not an error.
        let mut t = Tape::new();
        let a = t.param(&store, a_id);
        let dead = t.scale(a, 0.0);
        let y = t.sum_all(dead);
        let alpha = gradcam_alpha(&t, a, y).unwrap();
        assert!(alpha.iter().all(|&v| v == 0.0));

        // A cut out of the graph entirely: that is an error.
        let mut t = Tape::new();
        let a = t.param(&store, a_id);
        let cut = t.detach(a);
        let y = t.sum_all(cut);
        assert!(matches!(gradcam_alpha(&t, a, y), Err(CimlError::Domain(_))));
    }

    #[test]
    fn alpha_rejects_bad_shapes() {
        let mut t = Tape::new();
        let a = t.constant(toy_map(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]));
        let y = t.sum_all(a);
        // Non-scalar score.
        assert!(matches!(gradcam_alpha(&t, a, a), Err(CimlError::Shape(_))));
        // Batch of two feature maps.
        let mut t2 = Tape::new();
        let b = t2.constant(toy_map(&[1.0, 2.0, 3.0, 4.0], &[2, 1, 2]));
        let yb = t2.sum_all(b);
        assert!(matches!(gradcam_alpha(&t2, b, yb), Err(CimlError::Shape(_))));
        let _ = y;
    }

    #[test]
    fn alpha_matches_finite_differences_on_a_toy_conv_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x_shape = [1usize, 2, 5, 5];
        let n_x: usize = x_shape.iter().product();
        let x0: TensorD = ArrayD::from_shape_vec(
            IxDyn(&x_shape),
            (0..n_x).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w: TensorD = ArrayD::from_shape_vec(
            IxDyn(&[3, 2, 3, 3]),
            (0..54).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        // Frozen voxel selector, as the real class score uses.
        let sel: TensorD = ArrayD::from_shape_vec(
            IxDyn(&[1, 3, 5, 5]),
            (0..75).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect(),
        )
        .unwrap();
        let build = |t: &mut Tape, x_data: &TensorD| -> (Var, Var) {
            let mut store = crate::autodiff::ParamStore::new();
            let x_id = store.add("toy.x", x_data.clone(), true).unwrap();
            let x = t.param(&store, x_id);
            let wv = t.constant(w.clone());
            let logits = t.conv(x, wv, None, ConvSpec::K3S1);
            let sq = t.square(logits);
            let sv = t.constant(sel.clone());
            let prod = t.mul(sq, sv);
            let y = t.sum_all(prod);
            (x, y)
        };
        let forward = |x_data: &TensorD| -> f64 {
            let mut t = Tape::new();
            let (_, y) = build(&mut t, x_data);
            t.value(y)[0]
        };
        let mut t = Tape::new();
        let (x, y) = build(&mut t, &x0);
        let alpha = gradcam_alpha(&t, x, y).unwrap();

        // Average central differences over every voxel of each channel.
        let h = 1e-5;
        let n = 25;
        for (c, &a_c) in alpha.iter().enumerate() {
            let mut fd_sum = 0.0;
            for v in 0..n {
                let mut plus = x0.clone();
                let mut minus = x0.clone();
                let flat_plus = plus.as_slice_mut().unwrap();
                flat_plus[c * n + v] += h;
                let flat_minus = minus.as_slice_mut().unwrap();
                flat_minus[c * n + v] -= h;
                fd_sum += (forward(&plus) - forward(&minus)) / (2.0 * h);
            }
            let fd = fd_sum / n as f64;
            let denom = fd.abs().max(1e-12);
            assert!(
                (a_c - fd).abs() / denom < 1e-3,
                "channel {c}: analytic {a_c} vs finite difference {fd}"
            );
        }
    }

    #[test]
    fn heatmap_follows_the_sign_structure() {
        // Negative weights against positive maps: everything rectifies away.
        let a = toy_map(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let z = gradcam_heatmap(&a, &[-1.0]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));

        // Identity weight on one channel reproduces its ReLU.
        let a = toy_map(&[1.0, -2.0, 3.0, -4.0], &[1, 1, 2, 2]);
        let z = gradcam_heatmap(&a, &[1.0]).unwrap();
        assert_eq!(z.shape(), &[2, 2]);
        let expect = [1.0, 0.0, 3.0, 0.0];
        for (&got, &want) in z.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }

        // Two channels with opposing weights: hand-computed combination.
        let a = toy_map(&[1.0, 2.0, 3.0, 4.0, 4.0, 1.0, 5.0, 1.0], &[1, 2, 2, 2]);
        let z = gradcam_heatmap(&a, &[1.0, -1.0]).unwrap();
        let expect = [0.0, 1.0, 0.0, 3.0];
        for (&got, &want) in z.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }

        // Weight count must match the channel count.
        assert!(matches!(
            gradcam_heatmap(&a, &[1.0]),
            Err(CimlError::Domain(_))
        ));
    }

    fn stack(aux: usize, region: usize, values: &[f64]) -> HeatmapStack {
        HeatmapStack::new(
            ModalityId(aux),
            RegionId(region),
            vec![1.0],
            ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap(),
        )
    }

    #[test]
    fn weights_normalize_masses() {
        // A single sender takes the whole share.
        let w = complementary_weights(&[stack(1, 0, &[2.0, 2.0])]).unwrap();
        assert_eq!(w.weights, vec![(ModalityId(1), 1.0)]);

        // Equal masses split evenly; a 3:1 ratio splits 0.75 / 0.25.
        let w = complementary_weights(&[stack(1, 0, &[2.0]), stack(2, 0, &[2.0])]).unwrap();
        assert!((w.weights[0].1 - 0.5).abs() < 1e-12);
        assert!((w.weights[1].1 - 0.5).abs() < 1e-12);
        let w = complementary_weights(&[stack(1, 0, &[3.0]), stack(2, 0, &[1.0])]).unwrap();
        assert!((w.weights[0].1 - 0.75).abs() < 1e-12);
        assert!((w.weights[1].1 - 0.25).abs() < 1e-12);

        // Scaling every map by the same constant leaves the shares alone.
        let scaled =
            complementary_weights(&[stack(1, 0, &[12.0]), stack(2, 0, &[4.0])]).unwrap();
        for (a, b) in w.weights.iter().zip(&scaled.weights) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-12);
        }

        // All-zero mass leaves the shares undefined.
        assert!(matches!(
            complementary_weights(&[stack(1, 0, &[0.0]), stack(2, 0, &[0.0])]),
            Err(CimlError::Domain(_))
        ));
        // Mixed regions and duplicate senders are caller mistakes.
        assert!(complementary_weights(&[stack(1, 0, &[1.0]), stack(2, 1, &[1.0])]).is_err());
        assert!(complementary_weights(&[stack(1, 0, &[1.0]), stack(1, 0, &[1.0])]).is_err());
        assert!(complementary_weights(&[]).is_err());
    }

    fn rig() -> (Trainer, Vec<TensorD>) {
        let modalities = ModalitySet::new(vec!["m0".into(), "m1".into(), "m2".into()]).unwrap();
        let regions = RegionSet::new(&[
            RegionDecl { name: "outer".into(), class_index: 1, parent: None },
            RegionDecl { name: "middle".into(), class_index: 2, parent: Some("outer".into()) },
            RegionDecl { name: "inner".into(), class_index: 3, parent: Some("middle".into()) },
        ])
        .unwrap();
        let assignment = TaskAssignment::new(
            vec![
                vec![regions.id_of("outer").unwrap()],
                vec![regions.id_of("middle").unwrap()],
                vec![regions.id_of("inner").unwrap()],
            ],
            &regions,
        )
        .unwrap();
        let arch = ArchitectureConfig {
            patch_size: 16,
            base_channels: 1,
            spatial_dims: 2,
            norm: NormKind::Instance,
        };
        let train = TrainConfig { seed: 5, ..TrainConfig::default() };
        let trainer = Trainer::new(arch, train, modalities, regions, assignment).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let inputs: Vec<TensorD> = (0..3)
            .map(|_| {
                ArrayD::from_shape_vec(
                    IxDyn(&[1, 1, 16, 16]),
                    (0..256).map(|_| rng.random_range(0.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        (trainer, inputs)
    }

    #[test]
    fn live_rig_maps_are_rectified_and_shares_form_a_simplex() {
        let (mut trainer, inputs) = rig();
        let region = trainer.regions.id_of("outer").unwrap();
        let (stacks, weights) =
            case_weights(&mut trainer, &inputs, ModalityId(0), region).unwrap();
        assert_eq!(stacks.len(), 2);
        for s in &stacks {
            assert_eq!(s.map.shape(), &[16, 16], "maps come back at patch resolution");
            assert!(s.map.iter().all(|&v| v >= 0.0));
            assert!(s.mass >= 0.0);
        }
        assert_eq!(weights.weights.len(), 2);
        let total: f64 = weights.weights.iter().map(|w| w.1).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(weights.weights.iter().all(|w| w.1 >= 0.0));
        assert_eq!(weights.weights[0].0, ModalityId(1));
        assert_eq!(weights.weights[1].0, ModalityId(2));
    }

    #[test]
    fn severing_the_code_path_zeroes_its_map() {
        let (mut trainer, inputs) = rig();
        let region = trainer.regions.id_of("outer").unwrap();
        // Kill the 1x1 convolutions that inject sender m1's shallow code
        // into network m0: with both the alignment weight and bias at zero,
        // the score cannot depend on that code.
        for name in ["seg.m0.gate.stage1.align.0.weight", "seg.m0.gate.stage1.align.0.bias"] {
            let id = trainer.store.lookup(name).unwrap();
            trainer.store.value_mut(id).fill(0.0);
        }
        let mut t = Tape::new();
        let outputs = trainer.forward_patch(&mut t, &inputs).unwrap();
        let assignment = trainer.assignment.clone();
        let regions = trainer.regions.clone();
        let query =
            CamQuery { segmentor: ModalityId(0), region, auxiliary: ModalityId(1) };
        let severed =
            extract_complementary_cam(&mut t, &outputs, &assignment, &regions, &query).unwrap();
        assert!(severed.map.iter().all(|&v| v == 0.0), "severed sender leaves no mass");
        assert_eq!(severed.mass, 0.0);
        // The untouched sender still contributes, so the pair row stays
        // defined; were both severed the weights would error out.
        let other = CamQuery { segmentor: ModalityId(0), region, auxiliary: ModalityId(2) };
        let alive =
            extract_complementary_cam(&mut t, &outputs, &assignment, &regions, &other).unwrap();
        let weights = complementary_weights(&[severed, alive]).unwrap();
        assert!((weights.weights[1].1 - 1.0).abs() < 1e-12);
        assert_eq!(weights.weights[0].1, 0.0);
    }

    #[test]
    fn queries_must_name_a_predicted_region_and_a_real_sender() {
        let (mut trainer, inputs) = rig();
        let middle = trainer.regions.id_of("middle").unwrap();
        let mut t = Tape::new();
        let outputs = trainer.forward_patch(&mut t, &inputs).unwrap();
        let assignment = trainer.assignment.clone();
        let regions = trainer.regions.clone();
        // m0 predicts outer, not middle.
        let bad_region =
            CamQuery { segmentor: ModalityId(0), region: middle, auxiliary: ModalityId(1) };
        assert!(matches!(
            extract_complementary_cam(&mut t, &outputs, &assignment, &regions, &bad_region),
            Err(CimlError::Validation(_))
        ));
        // A network is not its own sender.
        let self_msg = CamQuery {
            segmentor: ModalityId(0),
            region: trainer.regions.id_of("outer").unwrap(),
            auxiliary: ModalityId(0),
        };
        assert!(matches!(
            extract_complementary_cam(&mut t, &outputs, &assignment, &regions, &self_msg),
            Err(CimlError::Validation(_))
        ));
    }
}
