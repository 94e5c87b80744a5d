//! PNG output: relevance heatmaps, overlays on the input slice and ROC
//! plots with a confidence band.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{ensure, Error, Result};
use crate::metrics::{BandPoint, RocPoint};

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn to_rgb(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

const BLUE: [f64; 3] = [0.23, 0.30, 0.75];
const WHITE: [f64; 3] = [1.0, 1.0, 1.0];
const RED: [f64; 3] = [0.71, 0.02, 0.15];

/// Diverging blue-white-red colour for `t` in [-1, 1].
pub fn diverging(t: f64) -> [f64; 3] {
    let t = t.clamp(-1.0, 1.0);
    if t >= 0.0 {
        lerp(WHITE, RED, t)
    } else {
        lerp(WHITE, BLUE, -t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Polarity {
    /// Negative relevance is clipped to zero.
    #[default]
    PositiveOnly,
    Signed,
}

/// Map relevance into [-1, 1] using the largest magnitude that is shown.
fn normalized(map: &Array2<f64>, polarity: Polarity) -> Array2<f64> {
    let shown = match polarity {
        Polarity::PositiveOnly => map.mapv(|v| v.max(0.0)),
        Polarity::Signed => map.clone(),
    };
    let scale = shown.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale > 0.0 {
        shown / scale
    } else {
        shown
    }
}

fn upscaled(h: usize, w: usize, scale: u32, pixel: impl Fn(usize, usize) -> Rgb<u8>) -> RgbImage {
    RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        pixel((y / scale) as usize, (x / scale) as usize)
    })
}

/// Heatmap image, each pixel enlarged to `scale x scale`.
pub fn heatmap_image(map: &Array2<f64>, polarity: Polarity, scale: u32) -> RgbImage {
    let n = normalized(map, polarity);
    let (h, w) = map.dim();
    upscaled(h, w, scale.max(1), |i, j| to_rgb(diverging(n[[i, j]])))
}

/// Relevance over the grey input slice (values in [0, 1]); opacity follows
/// the relevance magnitude.
pub fn overlay_image(slice: &Array2<f64>, map: &Array2<f64>, polarity: Polarity, scale: u32) -> Result<RgbImage> {
    ensure(slice.dim() == map.dim(), || {
        format!("slice {:?} and relevance {:?} differ in shape", slice.dim(), map.dim())
    })?;
    let n = normalized(map, polarity);
    let (h, w) = map.dim();
    Ok(upscaled(h, w, scale.max(1), |i, j| {
        let g = slice[[i, j]].clamp(0.0, 1.0);
        let t = n[[i, j]];
        to_rgb(lerp([g, g, g], diverging(t.signum()), t.abs() * 0.7))
    }))
}

pub fn save_heatmap(map: &Array2<f64>, polarity: Polarity, scale: u32, path: &Path) -> Result<()> {
    save(&heatmap_image(map, polarity, scale), path)
}

pub fn save_overlay(slice: &Array2<f64>, map: &Array2<f64>, polarity: Polarity, scale: u32, path: &Path) -> Result<()> {
    save(&overlay_image(slice, map, polarity, scale)?, path)
}

const PLOT_SIZE: u32 = 400;
const MARGIN: u32 = 30;

fn plot_xy(fpr: f64, tpr: f64) -> (f64, f64) {
    let span = (PLOT_SIZE - 2 * MARGIN) as f64;
    (MARGIN as f64 + fpr * span, (PLOT_SIZE - MARGIN) as f64 - tpr * span)
}

fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// ROC plot: chance diagonal, shaded pointwise band and the empirical curve
/// drawn as a step function.
pub fn roc_plot_image(points: &[RocPoint], band: &[BandPoint]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_SIZE, PLOT_SIZE, Rgb([255, 255, 255]));
    let shade = Rgb([198, 219, 239]);
    for pair in band.windows(2) {
        let (x0, _) = plot_xy(pair[0].fpr, 0.0);
        let (x1, _) = plot_xy(pair[1].fpr, 0.0);
        for x in x0.round() as u32..=x1.round() as u32 {
            let f = if x1 > x0 { (x as f64 - x0) / (x1 - x0) } else { 0.0 };
            let low = pair[0].low + (pair[1].low - pair[0].low) * f;
            let high = pair[0].high + (pair[1].high - pair[0].high) * f;
            let (_, y_low) = plot_xy(0.0, low);
            let (_, y_high) = plot_xy(0.0, high);
            for y in y_high.round() as u32..=y_low.round() as u32 {
                if x < PLOT_SIZE && y < PLOT_SIZE {
                    img.put_pixel(x, y, shade);
                }
            }
        }
    }
    let axis = Rgb([0, 0, 0]);
    for (a, b) in [((0.0, 0.0), (1.0, 0.0)), ((0.0, 0.0), (0.0, 1.0)), ((1.0, 0.0), (1.0, 1.0)), ((0.0, 1.0), (1.0, 1.0))] {
        draw_segment(&mut img, plot_xy(a.0, a.1), plot_xy(b.0, b.1), axis);
    }
    draw_segment(&mut img, plot_xy(0.0, 0.0), plot_xy(1.0, 1.0), Rgb([160, 160, 160]));
    let curve = Rgb([8, 48, 107]);
    for pair in points.windows(2) {
        let corner = (pair[1].fpr, pair[0].tpr);
        draw_segment(&mut img, plot_xy(pair[0].fpr, pair[0].tpr), plot_xy(corner.0, corner.1), curve);
        draw_segment(&mut img, plot_xy(corner.0, corner.1), plot_xy(pair[1].fpr, pair[1].tpr), curve);
    }
    img
}

pub fn save_roc_plot(points: &[RocPoint], band: &[BandPoint], path: &Path) -> Result<()> {
    save(&roc_plot_image(points, band), path)
}
