//! Semi-global matching over 1D (disparity) and 2D (flow) label grids.
//!
//! Scan-line costs are kept in 16-bit fixed point (`FIXED_SCALE` units per
//! cost unit) with saturating arithmetic; aggregated costs in 32 bits.

use nalgebra::Vector2;

use crate::edges::EdgeWeightMap;
use crate::grid::{Grid, MaskMap, ScalarMap, VectorMap, NEIGHBORS_8};
use crate::matching::{CostVolume, LabelSpace};

pub const FIXED_SCALE: f64 = 1024.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SgmParams {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Smoothness-to-data weight of the MRF energy that the aggregation
    /// approximates. `1 / c` is how many times the data term is counted in
    /// the aggregated cost; `1 / directions.len()` is plain SGM.
    pub c: f64,
    pub directions: Vec<(isize, isize)>,
}

impl Default for SgmParams {
    fn default() -> Self {
        Self {
            lambda: 200.0 / 255.0,
            beta: 2.0,
            gamma: 2.0,
            c: 1.0 / 8.0,
            directions: NEIGHBORS_8.to_vec(),
        }
    }
}

impl SgmParams {
    /// `(P1, P2)` for a step `p - q` and color edge weight `w` in [0, 1].
    pub fn penalties(&self, step: (isize, isize), w: f64) -> (f64, f64) {
        let len = ((step.0 * step.0 + step.1 * step.1) as f64).sqrt();
        let p1 = self.lambda / len;
        (p1, p1 * (self.beta + self.gamma * w))
    }

    /// Pairwise smoothness between two labels of `space`.
    pub fn pairwise(&self, space: &LabelSpace, a: usize, b: usize, step: (isize, isize), w: f64) -> f64 {
        if a == b {
            return 0.0;
        }
        let (ua, va) = space.label(a);
        let (ub, vb) = space.label(b);
        let (p1, p2) = self.penalties(step, w);
        if (ua - ub).abs() <= 1 && (va - vb).abs() <= 1 {
            p1
        } else {
            p2
        }
    }
}

/// Quadratic offset from three aggregated costs around a minimum.
///
/// Returns 0 when a neighbor is missing (boundary label) or the curvature is
/// not positive; otherwise the offset clamped to [-0.5, 0.5].
pub fn subpixel_offset(prev: Option<f64>, center: f64, next: Option<f64>) -> f64 {
    let (Some(a), Some(b)) = (prev, next) else {
        return 0.0;
    };
    let curvature = a - 2.0 * center + b;
    if curvature <= 0.0 {
        return 0.0;
    }
    ((a - b) / (2.0 * curvature)).clamp(-0.5, 0.5)
}

/// Aggregated costs at the winning label and its axis neighbors.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MinSlice {
    pub center: f64,
    pub u_prev: Option<f64>,
    pub u_next: Option<f64>,
    pub v_prev: Option<f64>,
    pub v_next: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SgmResult {
    pub origin: (usize, usize),
    pub labels: LabelSpace,
    /// Winning label index; `None` for inactive pixels.
    pub best: Grid<Option<usize>>,
    pub slices: Grid<MinSlice>,
    /// `min_d sum_r L_r - sum_r min_d L_r`, in cost units.
    pub uncertainty: ScalarMap,
}

impl SgmResult {
    /// Integer label coordinates plus quadratic refinement along each axis.
    pub fn refined(&self, x: usize, y: usize) -> Option<Vector2<f64>> {
        let l = self.best.get(x, y)?;
        let (u, v) = self.labels.label(l);
        let s = self.slices.get(x, y);
        let du = subpixel_offset(s.u_prev, s.center, s.u_next);
        let dv = subpixel_offset(s.v_prev, s.center, s.v_next);
        Some(Vector2::new(u as f64 + du, v as f64 + dv))
    }

    /// Refined first label coordinate; `NaN` at inactive pixels.
    pub fn disparity_map(&self) -> ScalarMap {
        let (w, h) = self.best.dims();
        Grid::from_fn(w, h, |x, y| self.refined(x, y).map_or(f64::NAN, |v| v.x))
    }

    pub fn integer_disparity_map(&self) -> ScalarMap {
        let (w, h) = self.best.dims();
        Grid::from_fn(w, h, |x, y| {
            self.best
                .get(x, y)
                .map_or(f64::NAN, |l| self.labels.label(l).0 as f64)
        })
    }

    /// Refined 2D labels; `NaN` vectors at inactive pixels.
    pub fn flow_map(&self) -> VectorMap {
        let (w, h) = self.best.dims();
        Grid::from_fn(w, h, |x, y| {
            self.refined(x, y)
                .unwrap_or_else(|| Vector2::new(f64::NAN, f64::NAN))
        })
    }

    pub fn active(&self) -> MaskMap {
        self.best.map(|b| b.is_some())
    }
}

#[inline]
fn to_fixed(v: f64) -> u32 {
    (v * FIXED_SCALE).round().clamp(0.0, u16::MAX as f64) as u32
}

/// Run SGM on `volume`. `edges` (image coordinates) modulates P2; `None`
/// means `w = 0` on every edge.
pub fn solve(volume: &CostVolume, params: &SgmParams, edges: Option<&EdgeWeightMap>) -> SgmResult {
    let (w, h) = (volume.width, volume.height);
    let space = volume.labels;
    let n = space.count();
    let npix = w * h;
    let active: Vec<bool> = (0..npix).map(|i| volume.is_active(i % w, i / w)).collect();
    let data: Vec<u16> = volume.data().iter().map(|&c| to_fixed(c as f64) as u16).collect();

    let mut aggregated = vec![0u32; npix * n];
    let mut min_sum = vec![0u64; npix];
    for &dir in &params.directions {
        scan(volume, params, edges, dir, &active, &data, &mut aggregated, &mut min_sum);
    }

    // Re-weight the data term to multiplicity 1 / c.
    let extra = 1.0 / params.c - params.directions.len() as f64;
    let mut best = Grid::new(w, h, None);
    let mut slices = Grid::new(w, h, MinSlice::default());
    let mut uncertainty = Grid::new(w, h, 0.0);
    let mut adjusted = vec![0i64; n];
    for p in 0..npix {
        if !active[p] {
            uncertainty.data_mut()[p] = f64::NAN;
            continue;
        }
        let s = &aggregated[p * n..(p + 1) * n];
        let raw_min = *s.iter().min().unwrap() as u64;
        uncertainty.data_mut()[p] = (raw_min.saturating_sub(min_sum[p])) as f64 / FIXED_SCALE;
        for l in 0..n {
            adjusted[l] = s[l] as i64 + (extra * data[p * n + l] as f64).round() as i64;
        }
        let mut arg = 0;
        for l in 1..n {
            if adjusted[l] < adjusted[arg] {
                arg = l;
            }
        }
        let iu = arg / space.nv;
        let iv = arg % space.nv;
        let at = |l: usize| adjusted[l] as f64 / FIXED_SCALE;
        best.data_mut()[p] = Some(arg);
        slices.data_mut()[p] = MinSlice {
            center: at(arg),
            u_prev: (iu > 0).then(|| at(arg - space.nv)),
            u_next: (iu + 1 < space.nu).then(|| at(arg + space.nv)),
            v_prev: (iv > 0).then(|| at(arg - 1)),
            v_next: (iv + 1 < space.nv).then(|| at(arg + 1)),
        };
    }
    SgmResult {
        origin: volume.origin,
        labels: space,
        best,
        slices,
        uncertainty,
    }
}

/// One directional pass of the normalized scan-line recursion, adding
/// `L_r(p, .)` into `aggregated` and `min_d L_r(p, d)` into `min_sum`.
#[allow(clippy::too_many_arguments)]
fn scan(
    volume: &CostVolume,
    params: &SgmParams,
    edges: Option<&EdgeWeightMap>,
    (dx, dy): (isize, isize),
    active: &[bool],
    data: &[u16],
    aggregated: &mut [u32],
    min_sum: &mut [u64],
) {
    let (w, h) = (volume.width, volume.height);
    let space = volume.labels;
    let n = space.count();
    let (ox, oy) = volume.origin;
    let (p1, _) = params.penalties((dx, dy), 0.0);
    let p1 = to_fixed(p1);

    // Normalized costs of the previous and current row.
    let mut prev = vec![0u16; w * n];
    let mut prev_valid = vec![false; w];
    let mut cur = vec![0u16; w * n];
    let mut cur_valid = vec![false; w];
    let mut pred = vec![0u16; n];
    let mut block = vec![0u32; n];
    let mut tmp = vec![0u32; n];
    let mut line = vec![0u32; n];

    let rows: Vec<usize> = if dy >= 0 { (0..h).collect() } else { (0..h).rev().collect() };
    let cols: Vec<usize> = if dx >= 0 { (0..w).collect() } else { (0..w).rev().collect() };
    for &y in &rows {
        cur_valid.iter_mut().for_each(|v| *v = false);
        for &x in &cols {
            let p = y * w + x;
            if !active[p] {
                continue;
            }
            let c = &data[p * n..(p + 1) * n];
            let qx = x as isize - dx;
            let qy = y as isize - dy;
            let has_pred = qx >= 0
                && qy >= 0
                && (qx as usize) < w
                && (qy as usize) < h
                && if dy == 0 {
                    cur_valid[qx as usize]
                } else {
                    prev_valid[qx as usize]
                };
            if has_pred {
                let q = qx as usize;
                let src = if dy == 0 { &cur[q * n..(q + 1) * n] } else { &prev[q * n..(q + 1) * n] };
                pred.copy_from_slice(src);
                let wcol = edges.map_or(0.0, |e| e.weight(x + ox, y + oy, -dx, -dy));
                let (_, p2) = params.penalties((dx, dy), wcol);
                let p2 = to_fixed(p2);
                neighborhood_min(&pred, &space, &mut tmp, &mut block);
                for (((li, &ci), &stay), &b) in line.iter_mut().zip(c).zip(pred.iter()).zip(block.iter()) {
                    *li = ci as u32 + (stay as u32).min(b + p1).min(p2);
                }
            } else {
                for (li, &ci) in line.iter_mut().zip(c) {
                    *li = ci as u32;
                }
            }
            let m = line.iter().fold(u32::MAX, |a, &v| a.min(v));
            let out = &mut cur[x * n..(x + 1) * n];
            let agg = &mut aggregated[p * n..(p + 1) * n];
            for ((o, a), &v) in out.iter_mut().zip(agg.iter_mut()).zip(line.iter()) {
                *o = (v - m).min(u16::MAX as u32) as u16;
                *a = a.saturating_add(v);
            }
            debug_assert_eq!(*out.iter().min().unwrap(), 0);
            min_sum[p] += m as u64;
            cur_valid[x] = true;
        }
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut prev_valid, &mut cur_valid);
    }
}

/// Minimum over the 3x3 block of label-grid neighbors (center included).
fn neighborhood_min(src: &[u16], space: &LabelSpace, tmp: &mut [u32], out: &mut [u32]) {
    let (nu, nv) = (space.nu, space.nv);
    if nu == 1 || nv == 1 {
        let n = src.len();
        if n == 1 {
            out[0] = src[0] as u32;
            return;
        }
        out[0] = src[0].min(src[1]) as u32;
        for (o, w) in out[1..n - 1].iter_mut().zip(src.windows(3)) {
            *o = w[0].min(w[1]).min(w[2]) as u32;
        }
        out[n - 1] = src[n - 2].min(src[n - 1]) as u32;
        return;
    }
    // Along v.
    for iu in 0..nu {
        let row = &src[iu * nv..(iu + 1) * nv];
        let dst = &mut tmp[iu * nv..(iu + 1) * nv];
        for iv in 0..nv {
            let mut m = row[iv];
            if iv > 0 {
                m = m.min(row[iv - 1]);
            }
            if iv + 1 < nv {
                m = m.min(row[iv + 1]);
            }
            dst[iv] = m as u32;
        }
    }
    // Along u.
    for iu in 0..nu {
        for iv in 0..nv {
            let mut m = tmp[iu * nv + iv];
            if iu > 0 {
                m = m.min(tmp[(iu - 1) * nv + iv]);
            }
            if iu + 1 < nu {
                m = m.min(tmp[(iu + 1) * nv + iv]);
            }
            out[iu * nv + iv] = m;
        }
    }
}

/// `sum_p C_p(l_p) + c * sum_(p,q) V(l_p, l_q)` over the undirected edges
/// spanned by `params.directions`, restricted to active pixels.
pub fn labeling_energy(
    volume: &CostVolume,
    labeling: &Grid<Option<usize>>,
    params: &SgmParams,
    edges: Option<&EdgeWeightMap>,
) -> f64 {
    let (w, h) = (volume.width, volume.height);
    let (ox, oy) = volume.origin;
    let mut steps: Vec<(isize, isize)> = Vec::new();
    for &(dx, dy) in &params.directions {
        let canon = if dy > 0 || (dy == 0 && dx > 0) { (dx, dy) } else { (-dx, -dy) };
        if !steps.contains(&canon) {
            steps.push(canon);
        }
    }
    let mut e = 0.0;
    for y in 0..h {
        for x in 0..w {
            let Some(l) = labeling.get(x, y) else { continue };
            e += volume.cost(x, y, l) as f64;
            for &(dx, dy) in &steps {
                let qx = x as isize + dx;
                let qy = y as isize + dy;
                if qx < 0 || qy < 0 || qx as usize >= w || qy as usize >= h {
                    continue;
                }
                if let Some(m) = labeling.get(qx as usize, qy as usize) {
                    let wcol = edges.map_or(0.0, |ew| ew.weight(x + ox, y + oy, dx, dy));
                    e += params.c * params.pairwise(&volume.labels, l, m, (dx, dy), wcol);
                }
            }
        }
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn penalty_values() {
        let p = SgmParams::default();
        let (p1, p2) = p.penalties((1, 0), 0.0);
        assert!((p1 - 200.0 / 255.0).abs() < 1e-15);
        assert!((p2 - 2.0 * p1).abs() < 1e-15);
        let (d1, _) = p.penalties((1, 1), 0.0);
        assert!((d1 - 200.0 / 255.0 / 2f64.sqrt()).abs() < 1e-15);
        let (q1, q2) = p.penalties((0, 1), 1.0);
        assert!((q2 - 4.0 * q1).abs() < 1e-15);
        assert!(q2 > q1);
    }

    #[test]
    fn subpixel_cases() {
        assert_eq!(subpixel_offset(Some(2.0), 1.0, Some(2.0)), 0.0);
        // Vertex of the parabola through (-1, 3), (0, 1), (1, 2).
        let (a, b) = {
            // y = a x^2 + b x + 1: a - b = 2, a + b = 1.
            (1.5, -0.5)
        };
        let oracle = -b / (2.0 * a);
        assert!((subpixel_offset(Some(3.0), 1.0, Some(2.0)) - oracle).abs() < 1e-12);
        assert!((oracle - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(subpixel_offset(None, 1.0, Some(2.0)), 0.0);
        assert_eq!(subpixel_offset(Some(1.0), 1.0, Some(1.0)), 0.0);
    }

    fn random_volume(rng: &mut ChaCha8Rng, w: usize, labels: LabelSpace) -> CostVolume {
        let data = (0..w * labels.count()).map(|_| rng_cost(rng)).collect();
        CostVolume::from_vec(w, 1, labels, 1.0, data)
    }

    fn uniform_volume(rng: &mut ChaCha8Rng, w: usize, h: usize, labels: LabelSpace) -> CostVolume {
        let data = (0..w * h * labels.count()).map(|_| rng.random::<f32>()).collect();
        CostVolume::from_vec(w, h, labels, 1.0, data)
    }

    fn rng_cost(rng: &mut ChaCha8Rng) -> f32 {
        // Multiples of 1/1024 so fixed point is exact.
        rng.random_range(0..=1024u32) as f32 / 1024.0
    }

    #[test]
    fn zero_penalties_give_data_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..9 * 7 * 6).map(|_| rng_cost(&mut rng)).collect();
        let vol = CostVolume::from_vec(9, 7, LabelSpace::disparity(5), 1.0, data);
        let params = SgmParams {
            lambda: 0.0,
            ..Default::default()
        };
        let r = solve(&vol, &params, None);
        for y in 0..7 {
            for x in 0..9 {
                let c = vol.costs(x, y);
                let mut arg = 0;
                for l in 1..c.len() {
                    if c[l] < c[arg] {
                        arg = l;
                    }
                }
                assert_eq!(r.best.get(x, y), Some(arg));
            }
        }
    }

    #[test]
    fn constant_cost_has_zero_uncertainty() {
        let vol = CostVolume::filled(10, 6, LabelSpace::disparity(4), 0.37);
        let r = solve(&vol, &SgmParams::default(), None);
        assert!(r.uncertainty.iter().all(|&u| u == 0.0));
        assert!(r.best.iter().all(|&b| b == Some(0)));
    }

    fn brute_force(vol: &CostVolume, params: &SgmParams) -> f64 {
        let n = vol.labels.count();
        let w = vol.width;
        let mut best = f64::INFINITY;
        let total = n.pow(w as u32);
        for code in 0..total {
            let mut c = code;
            let labels: Vec<usize> = (0..w)
                .map(|_| {
                    let l = c % n;
                    c /= n;
                    l
                })
                .collect();
            let mut e = 0.0;
            for x in 0..w {
                e += vol.cost(x, 0, labels[x]) as f64;
                if x + 1 < w {
                    let (a, b) = (labels[x], labels[x + 1]);
                    if a != b {
                        let (ua, va) = vol.labels.label(a);
                        let (ub, vb) = vol.labels.label(b);
                        let near = (ua - ub).abs() <= 1 && (va - vb).abs() <= 1;
                        e += params.c * if near { params.lambda } else { params.lambda * params.beta };
                    }
                }
            }
            best = best.min(e);
        }
        best
    }

    fn chain_params() -> SgmParams {
        SgmParams {
            lambda: 0.25,
            beta: 2.0,
            gamma: 0.0,
            c: 1.0,
            directions: vec![(1, 0), (-1, 0)],
        }
    }

    #[test]
    fn chain_1d_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = chain_params();
        for _ in 0..20 {
            let vol = random_volume(&mut rng, 6, LabelSpace::disparity(3));
            let r = solve(&vol, &params, None);
            let e = labeling_energy(&vol, &r.best, &params, None);
            assert!((e - brute_force(&vol, &params)).abs() < 1e-9);
        }
    }

    #[test]
    fn chain_2d_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let params = chain_params();
        let space = LabelSpace {
            u_min: -1,
            nu: 3,
            v_min: -1,
            nv: 3,
        };
        for _ in 0..5 {
            let vol = random_volume(&mut rng, 5, space);
            let r = solve(&vol, &params, None);
            let e = labeling_energy(&vol, &r.best, &params, None);
            assert!((e - brute_force(&vol, &params)).abs() < 1e-9);
        }
    }

    #[test]
    fn scanline_costs_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vol = uniform_volume(&mut rng, 12, 9, LabelSpace::disparity(7));
        let params = SgmParams::default();
        let r = solve(&vol, &params, None);
        // Each L_r <= max C + max P2, so S <= 8 (1 + 4 P1).
        let bound = 8.0 * (1.0 + 4.0 * params.lambda) + 1e-6;
        for s in r.slices.iter() {
            assert!(s.center <= bound);
        }
        assert!(r.uncertainty.iter().all(|&u| u >= 0.0));
    }

    #[test]
    fn deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vol = uniform_volume(&mut rng, 15, 11, LabelSpace::disparity(6));
        let a = solve(&vol, &SgmParams::default(), None);
        let b = solve(&vol, &SgmParams::default(), None);
        assert_eq!(a.best, b.best);
        assert_eq!(a.uncertainty, b.uncertainty);
    }
}
