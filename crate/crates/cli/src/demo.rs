//! The `demo shapes` pipeline: generate overlapping triangle/ellipse pairs,
//! train the two-pathway model on the shape union, score it on a held-out
//! split, and export figure panels.

use crate::png;
use ciml_core::config::RegionDecl;
use ciml_core::config::VolumeSample;
use ciml_core::data::{write_case, write_manifest, Dataset, DatasetManifest};
use ciml_core::shapes::{
    complementary_map, evaluate_dice, evaluate_localization, generate_dataset, load_demo,
    predict_union, save_demo, train_demo, DemoConfig, ShapePair,
};
use ciml_core::{CimlError, Result};
use ndarray::ArrayD;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Share of pairs withheld from training for evaluation.
const HOLD_OUT: f64 = 0.1;

pub struct ShapesArgs {
    pub out: PathBuf,
    pub n: usize,
    pub image_size: usize,
    pub seed: u64,
    pub epochs: usize,
    pub generate: bool,
    pub train: bool,
    pub evaluate: bool,
    pub export_figures: bool,
}

fn dataset_dir(out: &Path) -> PathBuf {
    out.join("dataset")
}

fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("model.ckpt")
}

fn pair_to_sample(pair: &ShapePair, case_id: String) -> VolumeSample {
    let to_f32 = |m: &ArrayD<bool>| m.mapv(|v| f32::from(u8::from(v)));
    VolumeSample {
        case_id,
        volumes: vec![to_f32(&pair.primary), to_f32(&pair.auxiliary)],
        mask: pair.union_mask.mapv(u8::from),
        spacing: vec![1.0, 1.0],
    }
}

fn sample_to_pair(sample: &VolumeSample) -> Result<ShapePair> {
    if sample.volumes.len() != 2 {
        return Err(CimlError::Validation(format!(
            "case {}: expected primary and auxiliary images, got {} volumes",
            sample.case_id,
            sample.volumes.len()
        )));
    }
    let to_bool = |m: &ArrayD<f32>| m.mapv(|v| v > 0.5);
    ShapePair::new(to_bool(&sample.volumes[0]), to_bool(&sample.volumes[1]))
}

fn write_pairs(root: &Path, pairs: &[ShapePair]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| CimlError::io(root, &e))?;
    let modalities = vec!["primary".to_string(), "auxiliary".to_string()];
    let mut cases = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let id = format!("pair{i:04}");
        write_case(root, &pair_to_sample(pair, id.clone()), &modalities)?;
        cases.push(id);
    }
    let manifest = DatasetManifest {
        modalities,
        regions: vec![RegionDecl { name: "union".into(), class_index: 1, parent: None }],
        spacing: vec![1.0, 1.0],
        cases,
    };
    write_manifest(root, &manifest)
}

fn read_pairs(root: &Path) -> Result<Vec<ShapePair>> {
    let ds = Dataset::open(root)?;
    (0..ds.len()).map(|i| sample_to_pair(&ds.load(i)?)).collect()
}

/// Index where the evaluation split begins: at least one pair is always
/// held out.
fn split_point(n: usize) -> usize {
    let train = ((n as f64) * (1.0 - HOLD_OUT)).floor() as usize;
    train.clamp(1, n - 1)
}

pub fn run(args: &ShapesArgs) -> Result<()> {
    if !(args.generate || args.train || args.evaluate || args.export_figures) {
        return Err(CimlError::Validation(
            "pick at least one stage: --generate, --train, --evaluate, --export-figures".into(),
        ));
    }
    if args.n < 2 {
        return Err(CimlError::Validation("need at least two pairs to hold one out".into()));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| CimlError::io(&args.out, &e))?;
    let data_dir = dataset_dir(&args.out);

    if args.generate {
        let pairs = generate_dataset(args.n, args.image_size, args.seed)?;
        write_pairs(&data_dir, &pairs)?;
        println!(
            "wrote {} pairs of {}x{} images to {}",
            pairs.len(),
            args.image_size,
            args.image_size,
            data_dir.display()
        );
    }

    let needs_pairs = args.train || args.evaluate || args.export_figures;
    let pairs = if needs_pairs { read_pairs(&data_dir)? } else { Vec::new() };
    let cut = if needs_pairs { split_point(pairs.len()) } else { 0 };

    if args.train {
        let config = DemoConfig {
            image_size: args.image_size,
            seed: args.seed,
            max_epochs: args.epochs,
            ..DemoConfig::default()
        };
        let (model, history) = train_demo(config, &pairs[..cut])?;
        let log_path = args.out.join("train_log.jsonl");
        let mut log = std::fs::File::create(&log_path).map_err(|e| CimlError::io(&log_path, &e))?;
        for record in &history {
            let line =
                serde_json::to_string(record).map_err(|e| CimlError::io(&log_path, &e))?;
            writeln!(log, "{line}").map_err(|e| CimlError::io(&log_path, &e))?;
            println!(
                "epoch {:>3}  lr {:.5}  ce {:.4}  dice-loss {:.4}  code-penalty {:.4}",
                record.epoch, record.lr, record.ce, record.dice_loss, record.kl
            );
        }
        save_demo(&checkpoint_path(&args.out), &model)?;
        println!("saved model to {}", checkpoint_path(&args.out).display());
    }

    if args.evaluate || args.export_figures {
        let model = load_demo(&checkpoint_path(&args.out))?;
        if model.config.image_size != args.image_size {
            return Err(CimlError::Validation(format!(
                "checkpoint was trained at {}px, asked to evaluate at {}px",
                model.config.image_size, args.image_size
            )));
        }
        let held = &pairs[cut..];

        if args.evaluate {
            let dice = evaluate_dice(&model, held)?;
            let loc = evaluate_localization(&model, held)?;
            println!(
                "held-out pairs {}: union dice {:.4}, complementary localization {:.4}",
                held.len(),
                dice,
                loc
            );
        }

        if args.export_figures {
            let fig_dir = args.out.join("figures");
            for (i, pair) in held.iter().take(4).enumerate() {
                let base = |m: &ArrayD<bool>| m.mapv(|v| f64::from(u8::from(v)));
                let panels: Vec<(&str, image::RgbImage)> = vec![
                    ("primary", png::gray_image(&base(&pair.primary))?),
                    ("auxiliary", png::gray_image(&base(&pair.auxiliary))?),
                    ("truth", png::mask_image(&pair.union_mask)?),
                    ("prediction", png::mask_image(&predict_union(&model, pair)?)?),
                    (
                        "complementary",
                        png::overlay_image(
                            &base(&pair.primary),
                            &complementary_map(&model, pair)?,
                            0.6,
                        )?,
                    ),
                ];
                for (name, img) in panels {
                    png::save(&img, &fig_dir.join(format!("pair{i:02}_{name}.png")))?;
                }
            }
            println!("figures written to {}", fig_dir.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_split_always_leaves_at_least_one_pair_on_each_side() {
        assert_eq!(split_point(2), 1);
        assert_eq!(split_point(10), 9);
        assert_eq!(split_point(1000), 900);
        for n in 2..40 {
            let cut = split_point(n);
            assert!((1..n).contains(&cut), "n={n} cut={cut}");
        }
    }

    #[test]
    fn pairs_survive_the_disk_round_trip() {
        let pairs = generate_dataset(3, 32, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_pairs(dir.path(), &pairs).unwrap();
        let back = read_pairs(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.primary, b.primary);
            assert_eq!(a.auxiliary, b.auxiliary);
            assert_eq!(a.union_mask, b.union_mask);
        }
    }
}
