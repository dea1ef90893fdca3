//! The training objective: voxelwise cross-entropy, soft Dice over the
//! foreground classes, and a Gaussian penalty pulling every sampled message
//! code toward the standard normal prior.  The three pieces combine as
//! `ce + dice + beta * kl` per network, summed across networks.
//!
//! Masks arrive with global region class indices; [`remap_mask`] converts
//! them into a single network's local label space (background plus its
//! assigned regions, nested regions resolved to the most specific target).

use crate::autodiff::{Tape, TensorD, Var};
use crate::config::{ModalityId, RegionSet, TaskAssignment};
use crate::nn::SegmentorOutput;
use crate::{CimlError, Result};
use ndarray::ArrayD;

/// Smoothing constant in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// One network's share of the objective for a single batch.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dice_loss: f64,
    pub kl: f64,
    pub total: f64,
    pub beta: f64,
}

/// Mean elementwise KL divergence from a diagonal Gaussian `N(mu, sigma^2)`
/// to the standard normal: `mean(0.5 * (mu^2 + sigma^2 - ln sigma^2 - 1))`.
pub fn gaussian_kl_to_standard(mu: &TensorD, sigma: &TensorD) -> Result<f64> {
    if mu.shape() != sigma.shape() {
        return Err(CimlError::Shape(format!(
            "gaussian code mu {:?} and sigma {:?} differ in shape",
            mu.shape(),
            sigma.shape()
        )));
    }
    let mut acc = 0.0;
    for (&m, &s) in mu.iter().zip(sigma.iter()) {
        if s <= 0.0 {
            return Err(CimlError::Domain(format!(
                "gaussian code sigma must be positive, got {s}"
            )));
        }
        let s2 = s * s;
        acc += 0.5 * (m * m + s2 - s2.ln() - 1.0);
    }
    Ok(acc / mu.len() as f64)
}

/// Tape node for the same quantity, for use inside the training objective.
/// Positivity of sigma is guaranteed upstream by the emitting softplus floor.
pub fn gaussian_kl_term(t: &mut Tape, mu: Var, sigma: Var) -> Var {
    let m2 = t.square(mu);
    let s2 = t.square(sigma);
    let ln_s2 = t.ln(s2);
    let sum = t.add(m2, s2);
    let diff = t.sub(sum, ln_s2);
    let shifted = t.add_scalar(diff, -1.0);
    let half = t.scale(shifted, 0.5);
    t.mean_all(half)
}

fn check_labels(t: &Tape, logits: Var, labels: &ArrayD<u8>) -> Result<()> {
    let ls = t.shape(logits).to_vec();
    if ls.len() < 3 {
        return Err(CimlError::Shape(format!(
            "class logits must be [N, O, spatial...], got {ls:?}"
        )));
    }
    let classes = ls[1];
    let mut expect = vec![ls[0]];
    expect.extend_from_slice(&ls[2..]);
    if labels.shape() != expect {
        return Err(CimlError::Shape(format!(
            "label mask shape {:?} does not match logits {:?} (want {:?})",
            labels.shape(),
            ls,
            expect
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&v| v as usize >= classes) {
        return Err(CimlError::Domain(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean voxelwise negative log-softmax probability of the true class.
pub fn ce_loss(t: &mut Tape, logits: Var, labels: &ArrayD<u8>) -> Result<Var> {
    check_labels(t, logits, labels)?;
    Ok(t.cross_entropy_mean(logits, labels))
}

/// Soft Dice loss over foreground classes on softmax probabilities:
/// `1 - mean_c (2*sum(p_c*g_c) + s) / (sum(p_c) + sum(g_c) + s)`.
pub fn soft_dice_loss(t: &mut Tape, logits: Var, labels: &ArrayD<u8>) -> Result<Var> {
    check_labels(t, logits, labels)?;
    let probs = t.softmax_channels(logits);
    Ok(t.soft_dice(probs, labels, DICE_SMOOTH))
}

/// Converts a mask of global region class indices into one network's local
/// classes: `0` stays background, every other value maps to the position of
/// the most specific assigned target containing that region (or background
/// when no assigned target contains it).
pub fn remap_mask(
    regions: &RegionSet,
    assignment: &TaskAssignment,
    m: ModalityId,
    global: &ArrayD<u8>,
) -> ArrayD<u8> {
    global.mapv(|v| assignment.local_label(regions, m, v))
}

/// The full objective for one batch: per network `ce + dice + beta * kl`,
/// with `kl` the mean of [`gaussian_kl_term`] over that network's gate codes
/// (zero when it receives no messages), plus the summed scalar for backward.
pub fn ciml_total_loss(
    t: &mut Tape,
    outputs: &[SegmentorOutput],
    masks: &[ArrayD<u8>],
    beta: f64,
) -> Result<(Var, Vec<LossBreakdown>)> {
    if !(beta >= 0.0) {
        return Err(CimlError::Domain(format!(
            "code penalty weight must be non-negative, got {beta}"
        )));
    }
    if outputs.is_empty() || outputs.len() != masks.len() {
        return Err(CimlError::Validation(format!(
            "{} network outputs vs {} masks",
            outputs.len(),
            masks.len()
        )));
    }
    let mut breakdowns = Vec::with_capacity(outputs.len());
    let mut grand: Option<Var> = None;
    for (out, mask) in outputs.iter().zip(masks) {
        let ce = ce_loss(t, out.logits, mask)?;
        let dice = soft_dice_loss(t, out.logits, mask)?;
        let kl = match out.latents.len() {
            0 => None,
            n => {
                let mut acc: Option<Var> = None;
                for latent in &out.latents {
                    let term = gaussian_kl_term(t, latent.mu, latent.sigma);
                    acc = Some(match acc {
                        Some(a) => t.add(a, term),
                        None => term,
                    });
                }
                Some(t.scale(acc.unwrap(), 1.0 / n as f64))
            }
        };
        let seg_sum = t.add(ce, dice);
        let total = match kl {
            Some(kl) => {
                let weighted = t.scale(kl, beta);
                t.add(seg_sum, weighted)
            }
            None => seg_sum,
        };
        let kl_value = kl.map(|v| t.value(v)[0]).unwrap_or(0.0);
        debug_assert!(kl_value >= -1e-6, "code penalty went negative: {kl_value}");
        breakdowns.push(LossBreakdown {
            ce: t.value(ce)[0],
            dice_loss: t.value(dice)[0],
            kl: kl_value,
            total: t.value(total)[0],
            beta,
        });
        grand = Some(match grand {
            Some(g) => t.add(g, total),
            None => total,
        });
    }
    Ok((grand.unwrap(), breakdowns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RegionDecl, RegionSet, TaskAssignment};
    use crate::nn::{GaussianLatent, MessageBundle};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(shape: &[usize], data: Vec<f64>) -> TensorD {
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    fn filled(shape: &[usize], v: f64) -> TensorD {
        ArrayD::from_elem(IxDyn(shape), v)
    }

    #[test]
    fn kl_reference_values() {
        let zeros = filled(&[2, 3], 0.0);
        let ones = filled(&[2, 3], 1.0);
        assert!(gaussian_kl_to_standard(&zeros, &ones).unwrap().abs() < 1e-15);

        let twos = filled(&[4], 2.0);
        let kl = gaussian_kl_to_standard(&twos, &filled(&[4], 1.0)).unwrap();
        assert!((kl - 2.0).abs() < 1e-12, "mu=2 sigma=1 gives {kl}");

        let e = std::f64::consts::E;
        let kl = gaussian_kl_to_standard(&filled(&[5], 0.0), &filled(&[5], e)).unwrap();
        assert!((kl - 2.1945280494653248).abs() < 1e-12, "mu=0 sigma=e gives {kl}");

        // Mean over elements: one element at the prior, one at mu=2.
        let mu = tensor(&[2, 1], vec![2.0, 0.0]);
        let kl = gaussian_kl_to_standard(&mu, &filled(&[2, 1], 1.0)).unwrap();
        assert!((kl - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_nonpositive_sigma() {
        let mu = filled(&[3], 0.0);
        for bad in [0.0, -1.0] {
            let err = gaussian_kl_to_standard(&mu, &filled(&[3], bad)).unwrap_err();
            assert!(matches!(err, CimlError::Domain(_)), "sigma {bad}: {err}");
        }
        let err = gaussian_kl_to_standard(&mu, &filled(&[2], 1.0)).unwrap_err();
        assert!(matches!(err, CimlError::Shape(_)));
    }

    #[test]
    fn kl_is_positive_away_from_the_prior_and_tape_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.random_range(1..6);
            let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..3.0)).collect();
            let mu = tensor(&[n], mu);
            let sigma = tensor(&[n], sigma);
            let plain = gaussian_kl_to_standard(&mu, &sigma).unwrap();
            assert!(plain > 0.0, "continuous draws never hit the prior exactly");

            let mut t = Tape::new();
            let latent = GaussianLatent {
                stage: 1,
                message_index: 0,
                mu: t.constant(mu.clone()),
                sigma: t.constant(sigma.clone()),
                kappa: t.constant(mu.clone()),
            };
            let node = gaussian_kl_term(&mut t, latent.mu, latent.sigma);
            assert!((t.value(node)[0] - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let mut t = Tape::new();
        let logits = t.constant(filled(&[1, 2, 4], 0.3));
        let labels = ArrayD::from_elem(IxDyn(&[1, 4]), 1u8);
        let ce = ce_loss(&mut t, logits, &labels).unwrap();
        assert!((t.value(ce)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_drives_ce_toward_zero() {
        let labels = ArrayD::from_elem(IxDyn(&[1, 3]), 1u8);
        let mut last = f64::INFINITY;
        for margin in [2.0, 5.0, 20.0] {
            let mut t = Tape::new();
            let mut data = vec![0.0; 6];
            data[3..].iter_mut().for_each(|v| *v = margin);
            let logits = t.constant(tensor(&[1, 2, 3], data));
            let ce = ce_loss(&mut t, logits, &labels).unwrap();
            let ce = t.value(ce)[0];
            assert!(ce < last, "ce should fall as the margin grows");
            last = ce;
        }
        assert!(last < 1e-8, "margin 20 leaves ce {last}");
    }

    #[test]
    fn two_voxel_toy_matches_hand_computed_ce() {
        // Voxel 0: logits (1, -1), true class 0 -> ln(1 + e^-2).
        // Voxel 1: logits (0.5, 1.5), true class 1 -> ln(1 + e^-1).
        let mut t = Tape::new();
        let logits = t.constant(tensor(&[1, 2, 2], vec![1.0, 0.5, -1.0, 1.5]));
        let labels = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0u8, 1u8]).unwrap();
        let ce = ce_loss(&mut t, logits, &labels).unwrap();
        let ce = t.value(ce)[0];
        assert!((ce - 0.22009484928059775).abs() < 1e-12, "got {ce}");
    }

    #[test]
    fn dice_loss_extremes() {
        // Hard correct prediction: loss near zero.
        let labels =
            ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![0u8, 1, 1, 0]).unwrap();
        let mut t = Tape::new();
        let mut data = vec![0.0; 8];
        for (i, &l) in labels.iter().enumerate() {
            data[l as usize * 4 + i] = 40.0;
        }
        let logits = t.constant(tensor(&[1, 2, 4], data));
        let loss = soft_dice_loss(&mut t, logits, &labels).unwrap();
        let loss = t.value(loss)[0];
        assert!(loss.abs() < 1e-4, "perfect prediction scores {loss}");

        // All-background prediction against an all-foreground target.
        let mut t = Tape::new();
        let mut data = vec![0.0; 8];
        data[..4].iter_mut().for_each(|v| *v = 40.0);
        let logits = t.constant(tensor(&[1, 2, 4], data));
        let labels = ArrayD::from_elem(IxDyn(&[1, 4]), 1u8);
        let loss = soft_dice_loss(&mut t, logits, &labels).unwrap();
        let loss = t.value(loss)[0];
        assert!(loss > 0.999, "disjoint prediction scores {loss}");
    }

    #[test]
    fn half_overlap_hard_prediction_scores_half() {
        // Target foreground {0,1}, predicted foreground {1,2}: Dice 1/2.
        let labels =
            ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![1u8, 1, 0, 0]).unwrap();
        let mut t = Tape::new();
        // Channel-major layout [1, 2, 4]: background row then foreground row.
        let data = vec![40.0, 0.0, 0.0, 40.0, 0.0, 40.0, 40.0, 0.0];
        let logits = t.constant(tensor(&[1, 2, 4], data));
        let loss = soft_dice_loss(&mut t, logits, &labels).unwrap();
        let loss = t.value(loss)[0];
        assert!((loss - 0.5).abs() < 1e-5, "half overlap scores {loss}");
    }

    #[test]
    fn label_out_of_range_is_a_domain_error() {
        let mut t = Tape::new();
        let logits = t.constant(filled(&[1, 2, 2], 0.0));
        let labels = ArrayD::from_elem(IxDyn(&[1, 2]), 2u8);
        for r in [
            ce_loss(&mut t, logits, &labels),
            soft_dice_loss(&mut t, logits, &labels),
        ] {
            assert!(matches!(r.unwrap_err(), CimlError::Domain(_)));
        }
        let bad_shape = ArrayD::from_elem(IxDyn(&[1, 3]), 0u8);
        assert!(matches!(
            ce_loss(&mut t, logits, &bad_shape).unwrap_err(),
            CimlError::Shape(_)
        ));
    }

    fn synthetic_output(
        t: &mut Tape,
        logits: TensorD,
        codes: &[(f64, f64)],
    ) -> SegmentorOutput {
        let shape = vec![1usize, 4];
        let latents = codes
            .iter()
            .enumerate()
            .map(|(i, &(m, s))| GaussianLatent {
                stage: 4 - i,
                message_index: 0,
                mu: t.constant(filled(&shape, m)),
                sigma: t.constant(filled(&shape, s)),
                kappa: t.constant(filled(&shape, m)),
            })
            .collect();
        SegmentorOutput {
            logits: t.constant(logits),
            latents,
            attention_maps: Vec::new(),
            messages: MessageBundle { stages: Vec::new() },
        }
    }

    #[test]
    fn total_loss_sums_parts_and_respects_beta() {
        let labels = vec![
            ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![0u8, 1, 1, 0]).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![1u8, 0, 0, 1]).unwrap(),
        ];
        let build = |t: &mut Tape| {
            vec![
                // First network's codes sit at the prior: zero penalty.
                synthetic_output(t, filled(&[1, 2, 4], 0.25), &[(0.0, 1.0), (0.0, 1.0)]),
                // Second network's codes are displaced: 2.0 nats each.
                synthetic_output(t, tensor(&[1, 2, 4], (0..8).map(f64::from).collect()), &[(2.0, 1.0), (2.0, 1.0)]),
            ]
        };

        let mut t = Tape::new();
        let outputs = build(&mut t);
        let (grand, parts) = ciml_total_loss(&mut t, &outputs, &labels, 0.5).unwrap();
        assert_eq!(parts.len(), 2);
        assert!(parts[0].kl.abs() < 1e-12);
        assert!((parts[1].kl - 2.0).abs() < 1e-12);
        let mut sum = 0.0;
        for p in &parts {
            let expect = p.ce + p.dice_loss + p.beta * p.kl;
            assert!((p.total - expect).abs() <= 1e-10 * expect.abs().max(1.0));
            sum += p.total;
        }
        let grand = t.value(grand)[0];
        assert!((grand - sum).abs() <= 1e-10 * sum.abs().max(1.0));

        // beta = 0 strips the penalty entirely.
        let mut t = Tape::new();
        let outputs = build(&mut t);
        let (grand0, parts0) = ciml_total_loss(&mut t, &outputs, &labels, 0.0).unwrap();
        let expect: f64 = parts0.iter().map(|p| p.ce + p.dice_loss).sum();
        assert!((t.value(grand0)[0] - expect).abs() <= 1e-10 * expect.abs().max(1.0));

        // Negative beta is rejected.
        let mut t = Tape::new();
        let outputs = build(&mut t);
        assert!(matches!(
            ciml_total_loss(&mut t, &outputs, &labels, -1.0).unwrap_err(),
            CimlError::Domain(_)
        ));
        let mut t = Tape::new();
        let outputs = build(&mut t);
        assert!(matches!(
            ciml_total_loss(&mut t, &outputs, &labels[..1], 0.5).unwrap_err(),
            CimlError::Validation(_)
        ));
    }

    #[test]
    fn mask_remap_resolves_nesting_to_the_most_specific_target() {
        let regions = RegionSet::new(&[
            RegionDecl { name: "whole".into(), class_index: 1, parent: None },
            RegionDecl { name: "core".into(), class_index: 2, parent: Some("whole".into()) },
            RegionDecl { name: "enhancing".into(), class_index: 3, parent: Some("core".into()) },
        ])
        .unwrap();
        let whole = regions.id_of("whole").unwrap();
        let core = regions.id_of("core").unwrap();
        let enhancing = regions.id_of("enhancing").unwrap();
        let assignment =
            TaskAssignment::new(vec![vec![whole], vec![core, enhancing]], &regions).unwrap();

        let global = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0u8, 1, 2, 3]).unwrap();
        // Network 0 owns only "whole": every tumour voxel collapses onto it.
        let m0 = remap_mask(&regions, &assignment, ModalityId(0), &global);
        assert_eq!(m0.as_slice().unwrap(), &[0, 1, 1, 1]);
        // Network 1 owns "core" and "enhancing"; bare "whole" voxels are
        // outside its label space and fall back to background.
        let m1 = remap_mask(&regions, &assignment, ModalityId(1), &global);
        assert_eq!(m1.as_slice().unwrap(), &[0, 0, 1, 2]);
    }
}
