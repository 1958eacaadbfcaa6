//! Per-edge weights on the 8-connected pixel grid.

use crate::grid::{ColorImage, Grid, FORWARD_EDGES};

/// Lower bound for data-estimated contrast scales.
pub const KAPPA_FLOOR: f64 = 1e-6;

/// One weight per undirected 8-neighborhood edge, stored at the edge's
/// first endpoint for the orientations in [`FORWARD_EDGES`].
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeightMap {
    width: usize,
    height: usize,
    weights: Vec<[f64; 4]>,
}

impl EdgeWeightMap {
    pub fn uniform(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            weights: vec![[value; 4]; width * height],
        }
    }

    /// Build from a per-edge function `f(p, q)`; edges leaving the image get 0.
    pub fn from_fn(width: usize, height: usize, f: impl Fn((usize, usize), (usize, usize)) -> f64) -> Self {
        let mut weights = vec![[0.0; 4]; width * height];
        for y in 0..height {
            for x in 0..width {
                for (k, &(dx, dy)) in FORWARD_EDGES.iter().enumerate() {
                    let qx = x as isize + dx;
                    let qy = y as isize + dy;
                    if qx >= 0 && qy >= 0 && (qx as usize) < width && (qy as usize) < height {
                        weights[y * width + x][k] = f((x, y), (qx as usize, qy as usize));
                    }
                }
            }
        }
        Self {
            width,
            height,
            weights,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Weight of the edge between `(x, y)` and `(x + dx, y + dy)`.
    #[inline]
    pub fn weight(&self, x: usize, y: usize, dx: isize, dy: isize) -> f64 {
        // Normalize to a forward orientation anchored at the first endpoint.
        let (ax, ay, fx, fy) = if dy > 0 || (dy == 0 && dx > 0) {
            (x as isize, y as isize, dx, dy)
        } else {
            (x as isize + dx, y as isize + dy, -dx, -dy)
        };
        let k = match (fx, fy) {
            (1, 0) => 0,
            (0, 1) => 1,
            (1, 1) => 2,
            (-1, 1) => 3,
            _ => panic!("not an 8-neighborhood step: ({dx}, {dy})"),
        };
        self.weights[ay as usize * self.width + ax as usize][k]
    }

    /// Iterate `((x, y), (qx, qy), weight)` over every in-image edge once.
    pub fn edges(&self) -> impl Iterator<Item = ((usize, usize), (usize, usize), f64)> + '_ {
        let (w, h) = (self.width, self.height);
        (0..h).flat_map(move |y| {
            (0..w).flat_map(move |x| {
                FORWARD_EDGES.iter().enumerate().filter_map(move |(k, &(dx, dy))| {
                    let qx = x as isize + dx;
                    let qy = y as isize + dy;
                    (qx >= 0 && qy >= 0 && (qx as usize) < w && (qy as usize) < h)
                        .then(|| ((x, y), (qx as usize, qy as usize), self.weights[y * w + x][k]))
                })
            })
        })
    }

    pub fn add(&self, other: &EdgeWeightMap) -> EdgeWeightMap {
        assert_eq!(self.dims(), other.dims());
        EdgeWeightMap {
            width: self.width,
            height: self.height,
            weights: self
                .weights
                .iter()
                .zip(&other.weights)
                .map(|(a, b)| std::array::from_fn(|k| a[k] + b[k]))
                .collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> EdgeWeightMap {
        EdgeWeightMap {
            width: self.width,
            height: self.height,
            weights: self.weights.iter().map(|a| a.map(|v| v * s)).collect(),
        }
    }
}

/// Mean of `f(p, q)` over every 8-neighborhood pair of a `w x h` grid.
pub fn neighbor_mean(w: usize, h: usize, f: impl Fn((usize, usize), (usize, usize)) -> f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            for &(dx, dy) in &FORWARD_EDGES {
                let qx = x as isize + dx;
                let qy = y as isize + dy;
                if qx >= 0 && qy >= 0 && (qx as usize) < w && (qy as usize) < h {
                    sum += f((x, y), (qx as usize, qy as usize));
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[inline]
fn color_dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// `exp(-|I_p - I_q|^2 / kappa1)` with `kappa1 = E[2 |I_p - I_q|^2]`.
pub fn color_edge_weights(img: &ColorImage) -> EdgeWeightMap {
    let (w, h) = img.dims();
    let kappa = (2.0 * neighbor_mean(w, h, |p, q| color_dist2(&img[p], &img[q]))).max(KAPPA_FLOOR);
    EdgeWeightMap::from_fn(w, h, |p, q| (-color_dist2(&img[p], &img[q]) / kappa).exp())
}

/// Grayscale variant of [`color_edge_weights`].
pub fn gray_edge_weights(img: &Grid<f64>) -> EdgeWeightMap {
    let (w, h) = img.dims();
    let kappa = (2.0 * neighbor_mean(w, h, |p, q| (img[p] - img[q]).powi(2))).max(KAPPA_FLOOR);
    EdgeWeightMap::from_fn(w, h, |p, q| (-(img[p] - img[q]).powi(2) / kappa).exp())
}
