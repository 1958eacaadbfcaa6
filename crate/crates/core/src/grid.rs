//! Dense per-pixel fields.
//!
//! Every map in the engine (intensity images, disparities, flows, masks,
//! per-pixel cost terms) is a [`Grid`] stored row-major.

use nalgebra::Vector2;
use rayon::prelude::*;

/// A dense row-major 2D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Grayscale intensities in [0, 1].
pub type GrayImage = Grid<f64>;
/// Per-pixel scalar field (disparity, uncertainty, cost terms).
pub type ScalarMap = Grid<f64>;
/// Per-pixel 2D vectors (optical flow).
pub type VectorMap = Grid<Vector2<f64>>;
/// Per-pixel binary field.
pub type MaskMap = Grid<bool>;
/// RGB intensities in [0, 1].
pub type ColorImage = Grid<[f64; 3]>;

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::from_vec(width, height, data)
    }

    /// Row-parallel construction. Output is independent of the thread count.
    pub fn par_from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> T + Sync) -> Self
    where
        T: Send,
    {
        let rows: Vec<Vec<T>> = (0..height)
            .into_par_iter()
            .map(|y| (0..width).map(|x| f(x, y)).collect())
            .collect();
        Self::from_vec(width, height, rows.into_iter().flatten().collect())
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn index_of(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn contains(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// True when the continuous point lies inside the pixel-center hull.
    #[inline]
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid::from_vec(self.width, self.height, self.data.iter().map(f).collect())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, value: T) -> Self {
        Self::from_vec(width, height, vec![value; width * height])
    }
}

impl<T: Copy> Grid<T> {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let w = self.width;
        self.data[y * w + x] = value;
    }

    /// Edge-replicated lookup.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> T {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }
}

impl<T> std::ops::Index<(usize, usize)> for Grid<T> {
    type Output = T;
    #[inline]
    fn index(&self, (x, y): (usize, usize)) -> &T {
        &self.data[y * self.width + x]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Grid<T> {
    #[inline]
    fn index_mut(&mut self, (x, y): (usize, usize)) -> &mut T {
        let w = self.width;
        &mut self.data[y * w + x]
    }
}

impl Grid<f64> {
    /// Bilinear sample with edge replication outside the image.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let xf = x.floor();
        let yf = y.floor();
        let ax = x - xf;
        let ay = y - yf;
        let x0 = xf as isize;
        let y0 = yf as isize;
        // Exact integer coordinates must reproduce the stored value bit-for-bit.
        if ax == 0.0 && ay == 0.0 {
            return self.get_clamped(x0, y0);
        }
        let v00 = self.get_clamped(x0, y0);
        let v10 = self.get_clamped(x0 + 1, y0);
        let v01 = self.get_clamped(x0, y0 + 1);
        let v11 = self.get_clamped(x0 + 1, y0 + 1);
        let top = v00 + ax * (v10 - v00);
        let bottom = v01 + ax * (v11 - v01);
        top + ay * (bottom - top)
    }

    /// Bilinear sample, `None` outside the pixel-center hull.
    #[inline]
    pub fn sample_checked(&self, x: f64, y: f64) -> Option<f64> {
        self.contains_point(x, y).then(|| self.sample(x, y))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Central-difference gradients with one-sided differences at borders.
    pub fn gradients(&self) -> (Grid<f64>, Grid<f64>) {
        let (w, h) = self.dims();
        let gx = Grid::from_fn(w, h, |x, y| {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let span = (xr - xl).max(1) as f64;
            (self.get(xr, y) - self.get(xl, y)) / span
        });
        let gy = Grid::from_fn(w, h, |x, y| {
            let yu = y.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            let span = (yd - yu).max(1) as f64;
            (self.get(x, yd) - self.get(x, yu)) / span
        });
        (gx, gy)
    }
}

impl Grid<Vector2<f64>> {
    /// Bilinear sample of a vector field with edge replication.
    pub fn sample(&self, x: f64, y: f64) -> Vector2<f64> {
        let xf = x.floor();
        let yf = y.floor();
        let ax = x - xf;
        let ay = y - yf;
        let x0 = xf as isize;
        let y0 = yf as isize;
        let v00 = self.get_clamped(x0, y0);
        let v10 = self.get_clamped(x0 + 1, y0);
        let v01 = self.get_clamped(x0, y0 + 1);
        let v11 = self.get_clamped(x0 + 1, y0 + 1);
        let top = v00 + (v10 - v00) * ax;
        let bottom = v01 + (v11 - v01) * ax;
        top + (bottom - top) * ay
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    /// Binary dilation with a square structuring element of the given radius.
    pub fn dilate(&self, radius: usize) -> Grid<bool> {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = self.dims();
        let r = radius as isize;
        // Separable: rows then columns.
        let horiz = Grid::from_fn(w, h, |x, y| {
            (-r..=r).any(|dx| {
                let xx = x as isize + dx;
                xx >= 0 && (xx as usize) < w && self.get(xx as usize, y)
            })
        });
        Grid::from_fn(w, h, |x, y| {
            (-r..=r).any(|dy| {
                let yy = y as isize + dy;
                yy >= 0 && (yy as usize) < h && horiz.get(x, yy as usize)
            })
        })
    }

    /// Intersection over union; 1.0 when both masks are empty.
    pub fn iou(&self, other: &Grid<bool>) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

impl Grid<[f64; 3]> {
    /// Luma conversion (Rec. 601 weights).
    pub fn to_gray(&self) -> GrayImage {
        self.map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
    }

    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let xf = x.floor();
        let yf = y.floor();
        let ax = x - xf;
        let ay = y - yf;
        let x0 = xf as isize;
        let y0 = yf as isize;
        let v00 = self.get_clamped(x0, y0);
        let v10 = self.get_clamped(x0 + 1, y0);
        let v01 = self.get_clamped(x0, y0 + 1);
        let v11 = self.get_clamped(x0 + 1, y0 + 1);
        std::array::from_fn(|c| {
            let top = v00[c] + ax * (v10[c] - v00[c]);
            let bottom = v01[c] + ax * (v11[c] - v01[c]);
            top + ay * (bottom - top)
        })
    }
}

/// The 8-connected neighborhood offsets.
pub const NEIGHBORS_8: [(isize, isize); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (-1, -1),
    (1, -1),
    (-1, 1),
];

/// One representative per undirected 8-neighborhood edge orientation.
pub const FORWARD_EDGES: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (-1, 1)];

/// Box-area resampling of a grid of scalars to a new size.
pub fn resize_scalar(src: &ScalarMap, width: usize, height: usize) -> ScalarMap {
    let sx = src.width() as f64 / width as f64;
    let sy = src.height() as f64 / height as f64;
    if sx > 1.0 || sy > 1.0 {
        area_resample(src.width(), src.height(), width, height, |x, y| src.get(x, y))
    } else {
        Grid::from_fn(width, height, |x, y| {
            let u = (x as f64 + 0.5) * sx - 0.5;
            let v = (y as f64 + 0.5) * sy - 0.5;
            src.sample(u, v)
        })
    }
}

pub fn resize_color(src: &ColorImage, width: usize, height: usize) -> ColorImage {
    let channels: Vec<ScalarMap> = (0..3)
        .map(|c| resize_scalar(&src.map(|p| p[c]), width, height))
        .collect();
    Grid::from_fn(width, height, |x, y| {
        [
            channels[0].get(x, y),
            channels[1].get(x, y),
            channels[2].get(x, y),
        ]
    })
}

/// Nearest-neighbor resampling, for label maps and masks.
pub fn resize_nearest<T: Copy>(src: &Grid<T>, width: usize, height: usize) -> Grid<T> {
    let sx = src.width() as f64 / width as f64;
    let sy = src.height() as f64 / height as f64;
    Grid::from_fn(width, height, |x, y| {
        let u = (((x as f64 + 0.5) * sx) as usize).min(src.width() - 1);
        let v = (((y as f64 + 0.5) * sy) as usize).min(src.height() - 1);
        src.get(u, v)
    })
}

fn area_resample(
    sw: usize,
    sh: usize,
    width: usize,
    height: usize,
    value: impl Fn(usize, usize) -> f64,
) -> ScalarMap {
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    Grid::from_fn(width, height, |x, y| {
        let x0 = x as f64 * sx;
        let x1 = x0 + sx;
        let y0 = y as f64 * sy;
        let y1 = y0 + sy;
        let mut acc = 0.0;
        let mut area = 0.0;
        let mut yy = y0.floor() as usize;
        while (yy as f64) < y1 && yy < sh {
            let wy = (y1.min(yy as f64 + 1.0) - y0.max(yy as f64)).max(0.0);
            let mut xx = x0.floor() as usize;
            while (xx as f64) < x1 && xx < sw {
                let wx = (x1.min(xx as f64 + 1.0) - x0.max(xx as f64)).max(0.0);
                acc += wx * wy * value(xx, yy);
                area += wx * wy;
                xx += 1;
            }
            yy += 1;
        }
        if area > 0.0 {
            acc / area
        } else {
            0.0
        }
    })
}

/// Separable [1 2 1] / 4 blur with edge replication.
pub fn binomial_blur(img: &GrayImage) -> GrayImage {
    let (w, h) = img.dims();
    let tmp = Grid::from_fn(w, h, |x, y| {
        0.25 * img.get_clamped(x as isize - 1, y as isize) + 0.5 * img.get(x, y) + 0.25 * img.get_clamped(x as isize + 1, y as isize)
    });
    Grid::from_fn(w, h, |x, y| {
        0.25 * tmp.get_clamped(x as isize, y as isize - 1) + 0.5 * tmp.get(x, y) + 0.25 * tmp.get_clamped(x as isize, y as isize + 1)
    })
}

/// Scaled output dimensions, never below 1.
pub fn scaled_dims(width: usize, height: usize, scale: f64) -> (usize, usize) {
    (
        ((width as f64 * scale).round() as usize).max(1),
        ((height as f64 * scale).round() as usize).max(1),
    )
}
