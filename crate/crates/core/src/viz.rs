//! Raster helpers: flow colour coding and frame strips.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::io::quantize;
use crate::tensor::Tensor;

// Hue segment lengths of the usual optical-flow colour wheel
// (red-yellow, yellow-green, green-cyan, cyan-blue, blue-magenta,
// magenta-red).
const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

fn wheel() -> Vec<[f32; 3]> {
    let mut out = Vec::with_capacity(SEGMENTS.iter().sum());
    let ramp = |i: usize, n: usize| i as f32 / n as f32;
    for i in 0..SEGMENTS[0] {
        out.push([1.0, ramp(i, SEGMENTS[0]), 0.0]);
    }
    for i in 0..SEGMENTS[1] {
        out.push([1.0 - ramp(i, SEGMENTS[1]), 1.0, 0.0]);
    }
    for i in 0..SEGMENTS[2] {
        out.push([0.0, 1.0, ramp(i, SEGMENTS[2])]);
    }
    for i in 0..SEGMENTS[3] {
        out.push([0.0, 1.0 - ramp(i, SEGMENTS[3]), 1.0]);
    }
    for i in 0..SEGMENTS[4] {
        out.push([ramp(i, SEGMENTS[4]), 0.0, 1.0]);
    }
    for i in 0..SEGMENTS[5] {
        out.push([1.0, 0.0, 1.0 - ramp(i, SEGMENTS[5])]);
    }
    out
}

/// Colour of one flow vector already divided by the normalising radius.
/// Zero maps to white; saturation grows with magnitude.
pub fn flow_color(u: f32, v: f32) -> [f32; 3] {
    let wheel = wheel();
    let n = wheel.len();
    let rad = (u * u + v * v).sqrt();
    let angle = (-v).atan2(-u) / std::f32::consts::PI;
    let fk = (angle + 1.0) / 2.0 * (n - 1) as f32;
    let k0 = (fk.floor() as usize).min(n - 1);
    let k1 = (k0 + 1) % n;
    let f = fk - k0 as f32;
    let mut out = [0.0; 3];
    for c in 0..3 {
        let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
        out[c] = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
    }
    out
}

/// `[2, H, W]` flow to a `[3, H, W]` image. `max_radius` defaults to the
/// largest magnitude present.
pub fn flow_to_rgb(flow: &Tensor<f32>, max_radius: Option<f32>) -> Result<Tensor<f32>> {
    if flow.ndim() != 3 || flow.dim(0) != 2 {
        return Err(Error::InvalidInput(format!("flow must be [2, H, W], got {:?}", flow.shape())));
    }
    let plane = flow.dim(1) * flow.dim(2);
    let d = flow.data();
    let radius = max_radius.unwrap_or_else(|| {
        (0..plane)
            .map(|p| (d[p] * d[p] + d[plane + p] * d[plane + p]).sqrt())
            .fold(0.0, f32::max)
    });
    let scale = if radius > 1e-6 { 1.0 / radius } else { 0.0 };
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        let c = flow_color(d[p] * scale, d[plane + p] * scale);
        for k in 0..3 {
            out[k * plane + p] = c[k];
        }
    }
    Tensor::from_vec(&[3, flow.dim(1), flow.dim(2)], out)
}

/// Single-channel `[1, H, W]` map shown as grey.
pub fn gray_to_rgb(map: &Tensor<f32>) -> Result<Tensor<f32>> {
    if map.ndim() != 3 || map.dim(0) != 1 {
        return Err(Error::InvalidInput(format!("map must be [1, H, W], got {:?}", map.shape())));
    }
    let refs = [map, map, map];
    Tensor::concat(&refs, 0)
}

/// Grid of `[3, H, W]` tiles, one row per inner vector, separated by
/// `gap` pixels of white. All tiles must share a size and rows must have
/// equal length.
pub fn frame_strip(rows: &[Vec<Tensor<f32>>], gap: usize) -> Result<RgbImage> {
    let cols = rows.first().map(Vec::len).unwrap_or(0);
    if cols == 0 {
        return Err(Error::InvalidInput("frame strip needs at least one tile".into()));
    }
    let (h, w) = (rows[0][0].dim(1), rows[0][0].dim(2));
    for row in rows {
        if row.len() != cols {
            return Err(Error::InvalidInput("frame strip rows differ in length".into()));
        }
        for t in row {
            t.expect_shape(&[3, h, w])?;
        }
    }
    let width = cols * w + (cols - 1) * gap;
    let height = rows.len() * h + (rows.len() - 1) * gap;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([255, 255, 255]));
    let plane = h * w;
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let d = tile.data();
            let (ox, oy) = (c * (w + gap), r * (h + gap));
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    img.put_pixel(
                        (ox + x) as u32,
                        (oy + y) as u32,
                        Rgb([quantize(d[p]), quantize(d[plane + p]), quantize(d[2 * plane + p])]),
                    );
                }
            }
        }
    }
    Ok(img)
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
