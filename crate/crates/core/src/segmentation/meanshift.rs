use rayon::prelude::*;

use super::color::{luv_to_rgb, rgb_to_luv, Luv};
use super::SegmentationParams;
use crate::error::Result;
use crate::raster::RasterImage;

/// Converged joint-space mode `[x, y, L, u, v]` of every pixel.
pub fn meanshift_modes(img: &RasterImage, params: &SegmentationParams) -> Result<Vec<[f64; 5]>> {
    params.validate()?;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let luv: Vec<Luv> = img.iter_rgb().map(rgb_to_luv).collect();
    let modes = (0..(w * h) as usize)
        .into_par_iter()
        .map(|i| {
            let start = [(i as i64 % w) as f64, (i as i64 / w) as f64, luv[i][0], luv[i][1], luv[i][2]];
            climb(&luv, w, h, start, params)
        })
        .collect();
    Ok(modes)
}

fn climb(luv: &[Luv], w: i64, h: i64, start: [f64; 5], p: &SegmentationParams) -> [f64; 5] {
    let (sr2, rr2) = (p.spatial_radius * p.spatial_radius, p.range_radius * p.range_radius);
    let eps2 = p.convergence_eps * p.convergence_eps;
    let mut m = start;
    for _ in 0..p.max_iterations {
        let y0 = ((m[1] - p.spatial_radius).ceil() as i64).max(0);
        let y1 = ((m[1] + p.spatial_radius).floor() as i64).min(h - 1);
        let x0 = ((m[0] - p.spatial_radius).ceil() as i64).max(0);
        let x1 = ((m[0] + p.spatial_radius).floor() as i64).min(w - 1);
        let mut sum = [0.0f64; 5];
        let mut count = 0usize;
        for yy in y0..=y1 {
            let dy = yy as f64 - m[1];
            for xx in x0..=x1 {
                let dx = xx as f64 - m[0];
                if dx * dx + dy * dy > sr2 {
                    continue;
                }
                let c = &luv[(yy * w + xx) as usize];
                let dr = (c[0] - m[2]).powi(2) + (c[1] - m[3]).powi(2) + (c[2] - m[4]).powi(2);
                if dr > rr2 {
                    continue;
                }
                sum[0] += xx as f64;
                sum[1] += yy as f64;
                sum[2] += c[0];
                sum[3] += c[1];
                sum[4] += c[2];
                count += 1;
            }
        }
        if count == 0 {
            break;
        }
        let next = sum.map(|s| s / count as f64);
        let shift2: f64 = next.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum();
        m = next;
        if shift2 <= eps2 {
            break;
        }
    }
    m
}

/// Replaces every pixel's color with the color of its mode.
pub fn meanshift_filter(img: &RasterImage, params: &SegmentationParams) -> Result<RasterImage> {
    let modes = meanshift_modes(img, params)?;
    let mut px = Vec::with_capacity(modes.len() * 3);
    for m in &modes {
        px.extend_from_slice(&luv_to_rgb([m[2], m[3], m[4]]));
    }
    RasterImage::new(img.width(), img.height(), px)
}
