//! Tiny raster helpers for figure export: grayscale panels, a three-color
//! heat ramp, overlays, and a grouped bar chart.  Everything takes plain
//! `[H, W]` arrays; 3-D maps are reduced to their middle slice first.

use ciml_core::{CimlError, Result};
use image::{Rgb, RgbImage};
use ndarray::{ArrayD, IxDyn};
use std::path::Path;

/// Middle slice along the leading axis for rank-3 maps; rank-2 maps pass
/// through unchanged.
pub fn mid_slice(map: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    match map.ndim() {
        2 => Ok(map.clone()),
        3 => {
            let z = map.shape()[0] / 2;
            Ok(map.index_axis(ndarray::Axis(0), z).to_owned().into_dyn())
        }
        n => Err(CimlError::Shape(format!("cannot render a rank-{n} map"))),
    }
}

fn to_unit(map: &ArrayD<f64>) -> (ArrayD<f64>, bool) {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        (map.mapv(|v| (v - lo) / (hi - lo)), true)
    } else {
        (map.mapv(|_| 0.0), false)
    }
}

fn require_2d(map: &ArrayD<f64>) -> Result<(usize, usize)> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(CimlError::Shape(format!("expected a [H, W] map, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Min-max normalized grayscale rendering.
pub fn gray_image(map: &ArrayD<f64>) -> Result<RgbImage> {
    let (h, w) = require_2d(map)?;
    let (unit, _) = to_unit(map);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (unit[IxDyn(&[y, x])] * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, Rgb([v, v, v]));
        }
    }
    Ok(img)
}

/// Dark blue (low) through light blue to yellow (high).
pub fn ramp_color(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, u: f64| (a + (b - a) * u).round() as u8;
    if t < 0.5 {
        let u = t * 2.0;
        Rgb([lerp(8.0, 65.0, u), lerp(29.0, 182.0, u), lerp(88.0, 196.0, u)])
    } else {
        let u = (t - 0.5) * 2.0;
        Rgb([lerp(65.0, 253.0, u), lerp(182.0, 231.0, u), lerp(196.0, 37.0, u)])
    }
}

/// Heat map blended over a grayscale base at the given opacity.
pub fn overlay_image(base: &ArrayD<f64>, heat: &ArrayD<f64>, opacity: f64) -> Result<RgbImage> {
    let (h, w) = require_2d(base)?;
    if heat.shape() != base.shape() {
        return Err(CimlError::Shape(format!(
            "heat map {:?} does not match base {:?}",
            heat.shape(),
            base.shape()
        )));
    }
    let (base_u, _) = to_unit(base);
    let (heat_u, _) = to_unit(heat);
    let a = opacity.clamp(0.0, 1.0);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let g = base_u[IxDyn(&[y, x])] * 255.0;
            let c = ramp_color(heat_u[IxDyn(&[y, x])]);
            let mix = |hc: u8| (g * (1.0 - a) + f64::from(hc) * a).round() as u8;
            img.put_pixel(x as u32, y as u32, Rgb([mix(c.0[0]), mix(c.0[1]), mix(c.0[2])]));
        }
    }
    Ok(img)
}

/// Distinguishable fill colors, reused cyclically for bar series.
pub const SERIES_COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Vertical grouped bar chart of values in `[0, 1]`.  Bars within a group
/// appear left to right in series order; the series→color mapping is the
/// caller's to document (a JSON sidecar, typically).
pub fn bar_chart(groups: &[Vec<f64>]) -> Result<RgbImage> {
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(CimlError::Validation("bar chart needs non-empty groups".into()));
    }
    let bar_w = 24u32;
    let gap = 18u32;
    let plot_h = 220u32;
    let margin = 20u32;
    let n_bars: u32 = groups.iter().map(|g| g.len() as u32).sum();
    let width = 2 * margin + n_bars * bar_w + (groups.len() as u32 - 1) * gap;
    let height = plot_h + 2 * margin;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    // Baseline.
    for x in margin..width - margin {
        img.put_pixel(x, height - margin, Rgb([0, 0, 0]));
    }
    let mut x0 = margin;
    for group in groups {
        for (s, &v) in group.iter().enumerate() {
            let v = v.clamp(0.0, 1.0);
            let bh = (v * f64::from(plot_h)).round() as u32;
            let color = SERIES_COLORS[s % SERIES_COLORS.len()];
            for x in x0..x0 + bar_w {
                for y in height - margin - bh..height - margin {
                    img.put_pixel(x, y, Rgb(color));
                }
            }
            x0 += bar_w;
        }
        x0 += gap;
    }
    Ok(img)
}

/// Saves a rendered image, creating parent directories as needed.
pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CimlError::io(dir, &e))?;
    }
    img.save(path).map_err(|e| CimlError::io(path, e))
}

/// Binary mask as a black-on-white panel.
pub fn mask_image(mask: &ArrayD<bool>) -> Result<RgbImage> {
    let map = mask.mapv(|v| f64::from(u8::from(v)));
    let (h, w) = require_2d(&map)?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let on = map[IxDyn(&[y, x])] > 0.5;
            let v = if on { 0 } else { 255 };
            img.put_pixel(x as u32, y as u32, Rgb([v, v, v]));
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mid_slice_reduces_rank_3_and_passes_rank_2_through() {
        let flat = ArrayD::from_shape_fn(IxDyn(&[2, 2]), |ix| (ix[0] * 2 + ix[1]) as f64);
        assert_eq!(mid_slice(&flat).unwrap(), flat);
        let vol = ArrayD::from_shape_fn(IxDyn(&[3, 2, 2]), |ix| ix[0] as f64);
        let mid = mid_slice(&vol).unwrap();
        assert_eq!(mid.shape(), &[2, 2]);
        assert!(mid.iter().all(|&v| v == 1.0));
        assert!(mid_slice(&ArrayD::zeros(IxDyn(&[2, 2, 2, 2]))).is_err());
    }

    #[test]
    fn the_heat_ramp_hits_its_anchor_colors_and_clamps() {
        assert_eq!(ramp_color(0.0), Rgb([8, 29, 88]));
        assert_eq!(ramp_color(0.5), Rgb([65, 182, 196]));
        assert_eq!(ramp_color(1.0), Rgb([253, 231, 37]));
        assert_eq!(ramp_color(-3.0), ramp_color(0.0));
        assert_eq!(ramp_color(7.0), ramp_color(1.0));
    }

    #[test]
    fn panels_take_the_map_geometry_and_tolerate_constant_maps() {
        let map = ArrayD::from_shape_fn(IxDyn(&[4, 6]), |ix| (ix[0] + ix[1]) as f64);
        let img = gray_image(&map).unwrap();
        assert_eq!((img.width(), img.height()), (6, 4));
        let flat = ArrayD::zeros(IxDyn(&[4, 6]));
        gray_image(&flat).unwrap();
        let over = overlay_image(&map, &flat, 0.5).unwrap();
        assert_eq!((over.width(), over.height()), (6, 4));
        assert!(overlay_image(&map, &ArrayD::zeros(IxDyn(&[2, 2])), 0.5).is_err());
        assert!(gray_image(&ArrayD::zeros(IxDyn(&[4]))).is_err());
    }

    #[test]
    fn bar_charts_grow_with_the_bar_count_and_reject_empty_input() {
        let one = bar_chart(&[vec![0.5, 0.5]]).unwrap();
        let two = bar_chart(&[vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        assert!(two.width() > one.width());
        assert_eq!(one.height(), two.height());
        assert!(bar_chart(&[]).is_err());
        assert!(bar_chart(&[vec![]]).is_err());
    }
}
