//! `viz-cam` and `viz-weights`: render where each sender's code pushed a
//! region's score, and how the senders' contributions split numerically.

use crate::png;
use ciml_core::cam::segmentor_weights;
use ciml_core::config::{ModalityId, RegionId};
use ciml_core::config::VolumeSample;
use ciml_core::data::Dataset;
use ciml_core::training::Trainer;
use ciml_core::{CimlError, Result};
use ndarray::{ArrayD, Axis, IxDyn, Slice};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub struct CamArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub case: Option<String>,
}

pub struct WeightsArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
}

/// Center crop of every modality volume, shaped `[1, 1, P^d]` in f64.
fn center_crop_inputs(trainer: &Trainer, sample: &VolumeSample) -> Result<Vec<ArrayD<f64>>> {
    let p = trainer.arch.patch_size;
    let dims = sample.mask.shape().to_vec();
    if dims.len() != trainer.arch.spatial_dims {
        return Err(CimlError::Validation(format!(
            "case {}: rank {} volume for a rank-{} model",
            sample.case_id,
            dims.len(),
            trainer.arch.spatial_dims
        )));
    }
    if dims.iter().any(|&x| x < p) {
        return Err(CimlError::Validation(format!(
            "case {}: extent {dims:?} smaller than the patch size {p}",
            sample.case_id
        )));
    }
    let mut shape = vec![1, 1];
    shape.extend(std::iter::repeat(p).take(dims.len()));
    sample
        .volumes
        .iter()
        .map(|v| {
            let cropped = v.slice_each_axis(|ax| {
                let o = ((ax.len - p) / 2) as isize;
                Slice::new(o, Some(o + p as isize), 1)
            });
            let data: Vec<f64> = cropped.iter().map(|&x| f64::from(x)).collect();
            Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap())
        })
        .collect()
}

/// `[1, 1, spatial...]` crop reduced to its middle `[H, W]` plane.
fn crop_plane(crop: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    let spatial = crop.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned().into_dyn();
    png::mid_slice(&spatial)
}

#[derive(serde::Serialize)]
struct WeightRow {
    region: String,
    segmentor: String,
    /// Sender name → share; `None` while the row is undefined (no voxel
    /// predicted as the region, or all-zero heatmaps).
    weights: Option<BTreeMap<String, f64>>,
    error: Option<String>,
}

#[derive(serde::Serialize)]
struct CaseReport {
    case: String,
    rows: Vec<WeightRow>,
}

/// Every (region, explaining segmentor) pair, region-major.
fn rows_of(trainer: &Trainer) -> Vec<(RegionId, ModalityId)> {
    let mut rows = Vec::new();
    for r in trainer.regions.ids() {
        for m in trainer.assignment.primaries_of(r) {
            rows.push((r, m));
        }
    }
    rows
}

fn explain_case(
    trainer: &mut Trainer,
    sample: &VolumeSample,
    fig_dir: Option<&Path>,
) -> Result<CaseReport> {
    let inputs = center_crop_inputs(trainer, sample)?;
    let mut tape = ciml_core::autodiff::Tape::new();
    let outputs = trainer.forward_patch(&mut tape, &inputs)?;
    let assignment = trainer.assignment.clone();
    let regions = trainer.regions.clone();
    let mut rows = Vec::new();
    for (region, segmentor) in rows_of(trainer) {
        let row_result = segmentor_weights(
            &mut tape,
            &outputs,
            &assignment,
            &regions,
            segmentor,
            region,
        );
        let (stacks, weights) = match row_result {
            Ok(v) => v,
            Err(CimlError::Domain(message)) => {
                rows.push(WeightRow {
                    region: regions.name(region).to_string(),
                    segmentor: trainer.modalities.name(segmentor).to_string(),
                    weights: None,
                    error: Some(message),
                });
                continue;
            }
            Err(other) => return Err(other),
        };
        if let Some(dir) = fig_dir {
            let base = crop_plane(&inputs[segmentor.0])?;
            for stack in &stacks {
                let heat = png::mid_slice(&stack.map)?;
                let img = png::overlay_image(&base, &heat, 0.6)?;
                let name = format!(
                    "{}_{}_{}_from_{}.png",
                    sample.case_id,
                    regions.name(region),
                    trainer.modalities.name(segmentor),
                    trainer.modalities.name(stack.auxiliary),
                );
                png::save(&img, &dir.join(name))?;
            }
        }
        let named: BTreeMap<String, f64> = weights
            .weights
            .iter()
            .map(|&(m, w)| (trainer.modalities.name(m).to_string(), w))
            .collect();
        rows.push(WeightRow {
            region: regions.name(region).to_string(),
            segmentor: trainer.modalities.name(segmentor).to_string(),
            weights: Some(named),
            error: None,
        });
    }
    Ok(CaseReport { case: sample.case_id.clone(), rows })
}

fn open_pair(checkpoint: &Path, data: &Path) -> Result<(Trainer, Dataset)> {
    let trainer = Trainer::from_checkpoint(checkpoint)?;
    let ds = Dataset::open(data)?;
    crate::check_vocab(&trainer, &ds)?;
    Ok((trainer, ds))
}

pub fn run_cam(args: &CamArgs) -> Result<()> {
    let (mut trainer, ds) = open_pair(&args.checkpoint, &args.data)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CimlError::io(&args.out, &e))?;
    let mut reports = Vec::new();
    for i in 0..ds.len() {
        let sample = ds.load(i)?;
        if let Some(only) = &args.case {
            if &sample.case_id != only {
                continue;
            }
        }
        reports.push(explain_case(&mut trainer, &sample, Some(&args.out))?);
    }
    if reports.is_empty() {
        return Err(CimlError::Validation(match &args.case {
            Some(c) => format!("case {c} is not in the dataset"),
            None => "dataset has no cases".into(),
        }));
    }
    let json_path = args.out.join("weights.json");
    let text = serde_json::to_string_pretty(&reports)
        .map_err(|e| CimlError::io(&json_path, &e))?;
    std::fs::write(&json_path, text).map_err(|e| CimlError::io(&json_path, &e))?;
    println!(
        "explained {} case(s); maps and {} written to {}",
        reports.len(),
        json_path.display(),
        args.out.display()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct AveragedRow {
    region: String,
    segmentor: String,
    /// Sender → mean share over the cases where the row was defined.
    weights: BTreeMap<String, f64>,
    cases_counted: usize,
}

pub fn run_weights(args: &WeightsArgs) -> Result<()> {
    let (mut trainer, ds) = open_pair(&args.checkpoint, &args.data)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CimlError::io(&args.out, &e))?;
    // Accumulate per-row sender sums over the dataset.
    let rows = rows_of(&trainer);
    let mut sums: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); rows.len()];
    let mut counts = vec![0usize; rows.len()];
    for i in 0..ds.len() {
        let sample = ds.load(i)?;
        let report = explain_case(&mut trainer, &sample, None)?;
        for (idx, row) in report.rows.iter().enumerate() {
            if let Some(w) = &row.weights {
                for (name, &v) in w {
                    *sums[idx].entry(name.clone()).or_insert(0.0) += v;
                }
                counts[idx] += 1;
            }
        }
    }
    let averaged: Vec<AveragedRow> = rows
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(&(region, segmentor), (sum, &n))| AveragedRow {
            region: trainer.regions.name(region).to_string(),
            segmentor: trainer.modalities.name(segmentor).to_string(),
            weights: if n > 0 {
                sum.iter().map(|(k, v)| (k.clone(), v / n as f64)).collect()
            } else {
                BTreeMap::new()
            },
            cases_counted: n,
        })
        .collect();
    if averaged.iter().all(|r| r.cases_counted == 0) {
        return Err(CimlError::Domain(
            "no case produced defined contribution weights".into(),
        ));
    }
    // Chart: one group per row; one bar per modality in name order, zero
    // for the segmentor itself and for senders missing from the row.
    let modality_names: Vec<String> =
        trainer.modalities.names().iter().cloned().collect();
    let groups: Vec<Vec<f64>> = averaged
        .iter()
        .map(|row| {
            modality_names
                .iter()
                .map(|name| row.weights.get(name).copied().unwrap_or(0.0))
                .collect()
        })
        .collect();
    let chart = png::bar_chart(&groups)?;
    let chart_path = args.out.join("weights.png");
    png::save(&chart, &chart_path)?;
    let sidecar = serde_json::json!({
        "note": "mean contribution share per sender, averaged over the evaluation dataset",
        "rows": averaged,
        "chart": {
            "group_order": averaged.iter().map(|r| format!("{}:{}", r.region, r.segmentor)).collect::<Vec<_>>(),
            "series_order": modality_names,
            "series_colors": png::SERIES_COLORS.iter().take(trainer.modalities.len()).collect::<Vec<_>>(),
        },
    });
    let json_path = args.out.join("weights.json");
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| CimlError::io(&json_path, &e))?;
    std::fs::write(&json_path, text).map_err(|e| CimlError::io(&json_path, &e))?;
    println!(
        "averaged contribution weights over {} case(s); wrote {} and {}",
        ds.len(),
        chart_path.display(),
        json_path.display()
    );
    Ok(())
}
