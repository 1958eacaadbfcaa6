//! Map file formats.
//!
//! * disparity: 16-bit gray PNG, `round(256 d)`, 0 = invalid
//! * flow: 16-bit RGB PNG, `u, v = (value - 2^15) / 64`, blue = validity
//! * mask: 8-bit gray PNG, 0 or 255
//! * poses: text, one row-major 3x4 matrix per line
//! * calibration: text, `key = value` for f, cx, cy, baseline, width, height

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, StereoRig};
use crate::grid::{ColorImage, Grid, MaskMap, ScalarMap, VectorMap};
use crate::synthetic::Sequence;

const FLOW_OFFSET: f64 = 32768.0;
const FLOW_SCALE: f64 = 64.0;
const DISPARITY_SCALE: f64 = 256.0;

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(io_err(p)),
        _ => Ok(()),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(io_err(path))?
        .decode()
        .map_err(image_err(path))
}

/// Any 8- or 16-bit PNG as RGB in [0, 1]; gray images are replicated.
pub fn read_color(path: &Path) -> Result<ColorImage> {
    let img = open(path)?.to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_fn(w, h, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }))
}

/// 8-bit RGB PNG.
pub fn write_color(path: &Path, img: &ColorImage) -> Result<()> {
    ensure_parent(path)?;
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf = ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let c = img.get(x as usize, y as usize);
        Rgb([q(c[0]), q(c[1]), q(c[2])])
    });
    buf.save(path).map_err(image_err(path))
}

/// Encoded value of one disparity; non-finite and non-positive are invalid.
pub fn encode_disparity(d: f64) -> u16 {
    if d.is_finite() && d > 0.0 {
        (d * DISPARITY_SCALE).round().clamp(1.0, 65535.0) as u16
    } else {
        0
    }
}

pub fn decode_disparity(v: u16) -> f64 {
    if v == 0 {
        f64::NAN
    } else {
        v as f64 / DISPARITY_SCALE
    }
}

pub fn encode_flow(f: Vector2<f64>) -> [u16; 3] {
    if !(f.x.is_finite() && f.y.is_finite()) {
        return [0, 0, 0];
    }
    let q = |v: f64| (v * FLOW_SCALE + FLOW_OFFSET).round().clamp(0.0, 65535.0) as u16;
    [q(f.x), q(f.y), 1]
}

pub fn decode_flow(v: [u16; 3]) -> Vector2<f64> {
    if v[2] == 0 {
        return Vector2::new(f64::NAN, f64::NAN);
    }
    let d = |c: u16| (c as f64 - FLOW_OFFSET) / FLOW_SCALE;
    Vector2::new(d(v[0]), d(v[1]))
}

/// Invalid pixels read back as `NaN`.
pub fn write_disparity(path: &Path, d: &ScalarMap) -> Result<()> {
    ensure_parent(path)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(d.width() as u32, d.height() as u32, |x, y| {
        Luma([encode_disparity(d.get(x as usize, y as usize))])
    });
    buf.save(path).map_err(image_err(path))
}

pub fn read_disparity(path: &Path) -> Result<ScalarMap> {
    match open(path)? {
        image::DynamicImage::ImageLuma16(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            Ok(Grid::from_fn(w, h, |x, y| decode_disparity(img.get_pixel(x as u32, y as u32).0[0])))
        }
        other => Err(format_err(path, format!("expected a 16-bit gray disparity PNG, got {:?}", other.color()))),
    }
}

/// Non-finite vectors are written as invalid.
pub fn write_flow(path: &Path, f: &VectorMap) -> Result<()> {
    ensure_parent(path)?;
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(f.width() as u32, f.height() as u32, |x, y| {
        Rgb(encode_flow(f.get(x as usize, y as usize)))
    });
    buf.save(path).map_err(image_err(path))
}

pub fn read_flow(path: &Path) -> Result<VectorMap> {
    match open(path)? {
        image::DynamicImage::ImageRgb16(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            Ok(Grid::from_fn(w, h, |x, y| decode_flow(img.get_pixel(x as u32, y as u32).0)))
        }
        other => Err(format_err(path, format!("expected a 16-bit RGB flow PNG, got {:?}", other.color()))),
    }
}

pub fn write_mask(path: &Path, m: &MaskMap) -> Result<()> {
    ensure_parent(path)?;
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        Luma([if m.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    buf.save(path).map_err(image_err(path))
}

/// Any nonzero pixel is foreground.
pub fn read_mask(path: &Path) -> Result<MaskMap> {
    let img = open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_fn(w, h, |x, y| img.get_pixel(x as u32, y as u32).0[0] != 0))
}

pub fn format_pose(p: &Pose) -> String {
    p.to_row_major().iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")
}

pub fn parse_pose(line: &str) -> Option<Pose> {
    let v: Vec<f64> = line.split_whitespace().map(|t| t.parse().ok()).collect::<Option<_>>()?;
    let a: [f64; 12] = v.try_into().ok()?;
    Some(Pose::from_row_major(&a))
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    ensure_parent(path)?;
    let text: String = poses.iter().map(|p| format_pose(p) + "\n").collect();
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| parse_pose(l).ok_or_else(|| format_err(path, format!("line {}: expected 12 numbers", n + 1))))
        .collect()
}

pub fn format_calibration(rig: &StereoRig) -> String {
    let k = &rig.intrinsics;
    format!(
        "f = {}\ncx = {}\ncy = {}\nbaseline = {}\nwidth = {}\nheight = {}\n",
        k.f, k.cx, k.cy, rig.baseline, rig.width, rig.height
    )
}

pub fn parse_calibration(text: &str) -> std::result::Result<StereoRig, String> {
    let mut vals: [Option<f64>; 6] = [None; 6];
    const KEYS: [&str; 6] = ["f", "cx", "cy", "baseline", "width", "height"];
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .or_else(|| line.split_once(':'))
            .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
        let i = KEYS
            .iter()
            .position(|&key| key == k.trim())
            .ok_or_else(|| format!("line {}: unknown key `{}`", n + 1, k.trim()))?;
        let x: f64 = v.trim().parse().map_err(|_| format!("line {}: bad number `{}`", n + 1, v.trim()))?;
        vals[i] = Some(x);
    }
    let get = |i: usize| vals[i].ok_or_else(|| format!("missing `{}`", KEYS[i]));
    let (f, cx, cy, b, w, h) = (get(0)?, get(1)?, get(2)?, get(3)?, get(4)?, get(5)?);
    if !(f > 0.0 && b > 0.0 && w >= 1.0 && h >= 1.0) || w.fract() != 0.0 || h.fract() != 0.0 {
        return Err("f and baseline must be positive, width and height positive integers".into());
    }
    Ok(StereoRig::new(Intrinsics::new(f, cx, cy), b, w as usize, h as usize))
}

pub fn write_calibration(path: &Path, rig: &StereoRig) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, format_calibration(rig)).map_err(io_err(path))
}

pub fn read_calibration(path: &Path) -> Result<StereoRig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_calibration(&text).map_err(|m| format_err(path, m))
}

/// File name of frame `index` in the output layout.
pub fn frame_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Expand a frame pattern: a printf-style `%d` / `%0Nd` placeholder is
/// filled with 0, 1, ... until a file is missing; a directory lists its PNG
/// files in name order.
pub fn expand_pattern(pattern: &str) -> Result<Vec<PathBuf>> {
    let p = Path::new(pattern);
    if p.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(p)
            .map_err(io_err(p))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        return Ok(files);
    }
    let Some(start) = pattern.find('%') else {
        return Err(format_err(p, "pattern needs a %d placeholder or must name a directory"));
    };
    let rest = &pattern[start + 1..];
    let Some(d) = rest.find('d') else {
        return Err(format_err(p, "unterminated % placeholder"));
    };
    let spec = &rest[..d];
    let width: usize = if spec.is_empty() {
        0
    } else if spec.chars().all(|c| c.is_ascii_digit()) {
        spec.parse().unwrap_or(0)
    } else {
        return Err(format_err(p, format!("unsupported placeholder `%{spec}d`")));
    };
    let (head, tail) = (&pattern[..start], &rest[d + 1..]);
    let mut out = Vec::new();
    for i in 0.. {
        let f = PathBuf::from(format!("{head}{i:0width$}{tail}"));
        if !f.is_file() {
            break;
        }
        out.push(f);
    }
    Ok(out)
}

/// Subdirectories of a result or ground-truth directory.
pub const DISPARITY_DIR: &str = "disp_0";
pub const DISPARITY_NEXT_DIR: &str = "disp_1";
pub const FLOW_DIR: &str = "flow";
pub const MASK_DIR: &str = "mask";
pub const POSES_FILE: &str = "poses.txt";

/// The per-frame maps of a result or ground-truth directory.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMaps {
    pub disparity: ScalarMap,
    pub disparity_next: ScalarMap,
    pub flow: VectorMap,
    pub mask: Option<MaskMap>,
}

pub fn write_frame_maps(dir: &Path, index: usize, maps: &FrameMaps) -> Result<()> {
    let name = frame_name(index);
    write_disparity(&dir.join(DISPARITY_DIR).join(&name), &maps.disparity)?;
    write_disparity(&dir.join(DISPARITY_NEXT_DIR).join(&name), &maps.disparity_next)?;
    write_flow(&dir.join(FLOW_DIR).join(&name), &maps.flow)?;
    if let Some(m) = &maps.mask {
        write_mask(&dir.join(MASK_DIR).join(&name), m)?;
    }
    Ok(())
}

/// The mask is optional; every other map must exist.
pub fn read_frame_maps(dir: &Path, index: usize) -> Result<FrameMaps> {
    let name = frame_name(index);
    let mask = dir.join(MASK_DIR).join(&name);
    Ok(FrameMaps {
        disparity: read_disparity(&dir.join(DISPARITY_DIR).join(&name))?,
        disparity_next: read_disparity(&dir.join(DISPARITY_NEXT_DIR).join(&name))?,
        flow: read_flow(&dir.join(FLOW_DIR).join(&name))?,
        mask: if mask.is_file() { Some(read_mask(&mask)?) } else { None },
    })
}

/// Frame indices present in a result directory, from its disparity files.
pub fn list_frames(dir: &Path) -> Result<Vec<usize>> {
    let d = dir.join(DISPARITY_DIR);
    let mut out = Vec::new();
    for entry in fs::read_dir(&d).map_err(io_err(&d))? {
        let path = entry.map_err(io_err(&d))?.path();
        let index = path
            .extension()
            .filter(|x| x.eq_ignore_ascii_case("png"))
            .and_then(|_| path.file_stem())
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok());
        if let Some(i) = index {
            out.push(i);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// A rendered sequence on disk: `left/`, `right/`, `calib.txt`, and under
/// `gt/` the maps and camera motion of every frame that has a successor.
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    for (i, f) in seq.frames.iter().enumerate() {
        write_color(&dir.join("left").join(frame_name(i)), &f.left)?;
        write_color(&dir.join("right").join(frame_name(i)), &f.right)?;
    }
    write_calibration(&dir.join("calib.txt"), &seq.rig)?;
    let gt = dir.join("gt");
    let mut poses = Vec::new();
    for (i, t) in seq.truth.iter().enumerate() {
        let Some(m) = &t.motion else { continue };
        let maps = FrameMaps {
            disparity: t.disparity.clone(),
            disparity_next: m.disparity_next.clone(),
            flow: m.flow.clone(),
            mask: Some(t.mask.clone()),
        };
        write_frame_maps(&gt, i, &maps)?;
        poses.push(m.pose);
    }
    write_poses(&gt.join(POSES_FILE), &poses)
}
