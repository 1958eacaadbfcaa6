//! Color renderings of flow, disparity and mask maps.

use std::f64::consts::PI;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::grid::{Grid, MaskMap, ScalarMap, VectorMap};

pub type Rgb8Image = Grid<[u8; 3]>;

/// The 55-entry hue wheel (red, yellow, green, cyan, blue, magenta segments
/// of 15, 6, 4, 11, 13 and 6 steps).
fn color_wheel() -> Vec<[f64; 3]> {
    let segs = [(15, 0), (6, 1), (4, 2), (11, 3), (13, 4), (6, 5)];
    let mut wheel = Vec::with_capacity(55);
    for (n, seg) in segs {
        for i in 0..n {
            let t = i as f64 / n as f64;
            wheel.push(match seg {
                0 => [1.0, t, 0.0],
                1 => [1.0 - t, 1.0, 0.0],
                2 => [0.0, 1.0, t],
                3 => [0.0, 1.0 - t, 1.0],
                4 => [t, 0.0, 1.0],
                _ => [1.0, 0.0, 1.0 - t],
            });
        }
    }
    wheel
}

/// Hue from direction, saturation from magnitude relative to `max_radius`.
/// Vectors beyond the radius are darkened.
pub fn flow_color(f: Vector2<f64>, max_radius: f64, wheel: &[[f64; 3]]) -> [u8; 3] {
    if !(f.x.is_finite() && f.y.is_finite()) {
        return [0, 0, 0];
    }
    let (u, v) = (f.x / max_radius, f.y / max_radius);
    let rad = (u * u + v * v).sqrt();
    let a = (-v).atan2(-u) / PI;
    let fk = (a + 1.0) / 2.0 * (wheel.len() - 1) as f64;
    let k0 = fk.floor() as usize % wheel.len();
    let k1 = (k0 + 1) % wheel.len();
    let t = fk - fk.floor();
    let mut out = [0u8; 3];
    for c in 0..3 {
        let col = (1.0 - t) * wheel[k0][c] + t * wheel[k1][c];
        let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
        out[c] = (255.0 * col).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Largest finite vector length, at least 1.
pub fn max_flow_radius(flow: &VectorMap) -> f64 {
    flow.iter()
        .filter(|f| f.x.is_finite() && f.y.is_finite())
        .map(|f| f.norm())
        .fold(1.0, f64::max)
}

pub fn flow_to_rgb(flow: &VectorMap, max_radius: Option<f64>) -> Rgb8Image {
    let r = max_radius.unwrap_or_else(|| max_flow_radius(flow));
    let wheel = color_wheel();
    flow.map(|&f| flow_color(f, r, &wheel))
}

/// Blue (far) to red (near) ramp; invalid pixels black.
pub fn disparity_to_rgb(d: &ScalarMap, max: Option<f64>) -> Rgb8Image {
    let m = max.unwrap_or_else(|| d.iter().filter(|v| v.is_finite()).fold(1.0, |a: f64, &b| a.max(b)));
    d.map(|&v| {
        if !v.is_finite() || v <= 0.0 {
            return [0, 0, 0];
        }
        let t = (v / m).clamp(0.0, 1.0);
        let ramp = |c: f64| (255.0 * (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0)).round() as u8;
        [ramp(3.0), ramp(2.0), ramp(1.0)]
    })
}

pub fn mask_to_rgb(m: &MaskMap) -> Rgb8Image {
    m.map(|&b| if b { [255, 64, 64] } else { [40, 40, 40] })
}

pub fn write_rgb8(path: &Path, img: &Rgb8Image) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        })?;
    }
    let buf = ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| Rgb(img.get(x as usize, y as usize)));
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Render a map file by its format: 16-bit RGB is flow, 16-bit gray is
/// disparity, 8-bit gray is a mask.
pub fn render_file(input: &Path) -> Result<Rgb8Image> {
    let img = image::ImageReader::open(input)
        .map_err(|source| Error::Io {
            path: input.to_path_buf(),
            source,
        })?
        .decode()
        .map_err(|source| Error::Image {
            path: input.to_path_buf(),
            source,
        })?;
    match img.color() {
        image::ColorType::Rgb16 => Ok(flow_to_rgb(&super::io::read_flow(input)?, None)),
        image::ColorType::L16 => Ok(disparity_to_rgb(&super::io::read_disparity(input)?, None)),
        image::ColorType::L8 => Ok(mask_to_rgb(&super::io::read_mask(input)?)),
        other => Err(Error::Format {
            path: input.to_path_buf(),
            message: format!("not a flow, disparity or mask map ({other:?})"),
        }),
    }
}
