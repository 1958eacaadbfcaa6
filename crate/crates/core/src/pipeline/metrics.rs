//! Scene-flow outlier rates.
//!
//! A disparity or flow estimate is correct when its end-point error is below
//! 3 px or below 5% of the ground-truth magnitude. A scene-flow pixel is
//! correct when D1, D2 and Fl all are. Pixels without ground truth are
//! skipped; estimates that are missing where ground truth exists count as
//! outliers.

use std::fmt;
use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::grid::{MaskMap, ScalarMap, VectorMap};
use crate::pipeline::io::{list_frames, read_frame_maps};

pub const ABS_THRESHOLD: f64 = 3.0;
pub const REL_THRESHOLD: f64 = 0.05;

pub fn is_correct(error: f64, gt_magnitude: f64) -> bool {
    error < ABS_THRESHOLD || error < REL_THRESHOLD * gt_magnitude
}

/// `Some(correct)` where ground truth exists.
pub fn disparity_correct(est: f64, gt: f64) -> Option<bool> {
    if !gt.is_finite() {
        return None;
    }
    Some(est.is_finite() && is_correct((est - gt).abs(), gt.abs()))
}

pub fn flow_correct(est: Vector2<f64>, gt: Vector2<f64>) -> Option<bool> {
    if !(gt.x.is_finite() && gt.y.is_finite()) {
        return None;
    }
    Some(est.x.is_finite() && est.y.is_finite() && is_correct((est - gt).norm(), gt.norm()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Split<T> {
    pub bg: T,
    pub fg: T,
    pub all: T,
}

/// Outlier counts over evaluated pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Count {
    pub outliers: usize,
    pub total: usize,
}

impl Count {
    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.outliers += usize::from(!correct);
    }

    /// Percentage in [0, 100]; 0 when nothing was evaluated.
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.outliers as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Mean {
    pub sum: f64,
    pub count: usize,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn value(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

fn split_add<T>(s: &mut Split<T>, fg: bool, f: impl Fn(&mut T)) {
    f(&mut s.all);
    f(if fg { &mut s.fg } else { &mut s.bg });
}

#[derive(Clone, Copy, Debug)]
pub struct Estimate<'a> {
    pub disparity: &'a ScalarMap,
    /// Disparity of each reference pixel in the next frame.
    pub disparity_next: &'a ScalarMap,
    pub flow: &'a VectorMap,
}

#[derive(Clone, Copy, Debug)]
pub struct GroundTruth<'a> {
    pub disparity: &'a ScalarMap,
    pub disparity_next: &'a ScalarMap,
    pub flow: &'a VectorMap,
    /// Moving-object pixels; everything is background without it.
    pub foreground: Option<&'a MaskMap>,
}

/// Accumulates counts over any number of frames.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneFlowMetrics {
    pub d1: Split<Count>,
    pub d2: Split<Count>,
    pub fl: Split<Count>,
    pub sf: Split<Count>,
    /// Mean end-point errors where ground truth and estimate both exist.
    pub d1_epe: Split<Mean>,
    pub d2_epe: Split<Mean>,
    pub fl_epe: Split<Mean>,
    pub frames: usize,
}

impl SceneFlowMetrics {
    pub fn add(&mut self, est: &Estimate, gt: &GroundTruth) -> Result<()> {
        let dims = gt.disparity.dims();
        let check = |actual: (usize, usize)| {
            if actual == dims {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected: dims, actual })
            }
        };
        check(gt.disparity_next.dims())?;
        check(gt.flow.dims())?;
        check(est.disparity.dims())?;
        check(est.disparity_next.dims())?;
        check(est.flow.dims())?;
        if let Some(m) = gt.foreground {
            check(m.dims())?;
        }
        for i in 0..gt.disparity.len() {
            let fg = gt.foreground.is_some_and(|m| m.data()[i]);
            let (de, dg) = (est.disparity.data()[i], gt.disparity.data()[i]);
            let (ne, ng) = (est.disparity_next.data()[i], gt.disparity_next.data()[i]);
            let (fe, fgt) = (est.flow.data()[i], gt.flow.data()[i]);
            let d1 = disparity_correct(de, dg);
            let d2 = disparity_correct(ne, ng);
            let fl = flow_correct(fe, fgt);
            for (c, count, mean, err) in [
                (d1, &mut self.d1, &mut self.d1_epe, (de - dg).abs()),
                (d2, &mut self.d2, &mut self.d2_epe, (ne - ng).abs()),
                (fl, &mut self.fl, &mut self.fl_epe, (fe - fgt).norm()),
            ] {
                if let Some(ok) = c {
                    split_add(count, fg, |x| x.add(ok));
                    if err.is_finite() {
                        split_add(mean, fg, |x| x.add(err));
                    }
                }
            }
            if let (Some(a), Some(b), Some(c)) = (d1, d2, fl) {
                split_add(&mut self.sf, fg, |x| x.add(a && b && c));
            }
        }
        self.frames += 1;
        Ok(())
    }
}

/// Metrics of one frame.
pub fn evaluate(est: &Estimate, gt: &GroundTruth) -> Result<SceneFlowMetrics> {
    let mut m = SceneFlowMetrics::default();
    m.add(est, gt)?;
    Ok(m)
}

/// Metrics over every ground-truth frame of `gt_dir`. The estimate
/// directory must hold the same frames; masks are read from `gt_dir` only.
pub fn evaluate_dirs(est_dir: &Path, gt_dir: &Path) -> Result<SceneFlowMetrics> {
    let frames = list_frames(gt_dir)?;
    if frames.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: no ground-truth frames", gt_dir.display())));
    }
    let mut m = SceneFlowMetrics::default();
    for i in frames {
        let gt = read_frame_maps(gt_dir, i)?;
        let est = read_frame_maps(est_dir, i)?;
        m.add(
            &Estimate {
                disparity: &est.disparity,
                disparity_next: &est.disparity_next,
                flow: &est.flow,
            },
            &GroundTruth {
                disparity: &gt.disparity,
                disparity_next: &gt.disparity_next,
                flow: &gt.flow,
                foreground: gt.mask.as_ref(),
            },
        )
        .map_err(|e| Error::InvalidArgument(format!("frame {i}: {e}")))?;
    }
    Ok(m)
}

impl fmt::Display for SceneFlowMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frames: {}", self.frames)?;
        writeln!(f, "{:<6}{:>9}{:>9}{:>9}", "", "bg %", "fg %", "all %")?;
        for (name, s) in [("D1", &self.d1), ("D2", &self.d2), ("Fl", &self.fl), ("SF", &self.sf)] {
            writeln!(f, "{:<6}{:>9.2}{:>9.2}{:>9.2}", name, s.bg.rate(), s.fg.rate(), s.all.rate())?;
        }
        writeln!(f, "{:<6}{:>9}{:>9}{:>9}", "EPE", "bg px", "fg px", "all px")?;
        for (name, s) in [("D1", &self.d1_epe), ("D2", &self.d2_epe), ("Fl", &self.fl_epe)] {
            writeln!(f, "{:<6}{:>9.3}{:>9.3}{:>9.3}", name, s.bg.value(), s.fg.value(), s.all.value())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn rule_cases() {
        assert_eq!(disparity_correct(104.0, 100.0), Some(true));
        assert_eq!(disparity_correct(14.0, 10.0), Some(false));
        assert_eq!(disparity_correct(12.9, 10.0), Some(true));
        assert_eq!(disparity_correct(13.0, 10.0), Some(false));
        assert_eq!(disparity_correct(f64::NAN, 10.0), Some(false));
        assert_eq!(disparity_correct(1.0, f64::NAN), None);
        assert_eq!(flow_correct(Vector2::new(0.0, 104.0), Vector2::new(0.0, 100.0)), Some(true));
        assert_eq!(flow_correct(Vector2::new(63.0, 0.0), Vector2::new(60.0, 0.0)), Some(false));
        assert_eq!(flow_correct(Vector2::new(3.0, 4.0), Vector2::zeros()), Some(false));
    }

    #[test]
    fn exact_estimate_scores_zero_and_sf_needs_all_three() {
        let d = Grid::from_fn(4, 3, |x, _| 10.0 + x as f64);
        let f = Grid::new(4, 3, Vector2::new(1.0, 2.0));
        let fg = Grid::from_fn(4, 3, |x, _| x == 0);
        let gt = GroundTruth {
            disparity: &d,
            disparity_next: &d,
            flow: &f,
            foreground: Some(&fg),
        };
        let m = evaluate(&Estimate { disparity: &d, disparity_next: &d, flow: &f }, &gt).unwrap();
        assert_eq!(m.sf.all, Count { outliers: 0, total: 12 });
        assert_eq!((m.sf.fg.total, m.sf.bg.total), (3, 9));

        // One wrong D2 pixel on the foreground.
        let mut d2 = d.clone();
        d2.set(0, 1, 100.0);
        let m = evaluate(&Estimate { disparity: &d, disparity_next: &d2, flow: &f }, &gt).unwrap();
        assert_eq!(m.d1.all.outliers, 0);
        assert_eq!(m.d2.fg, Count { outliers: 1, total: 3 });
        assert_eq!(m.sf.fg.outliers, 1);
        assert!((m.sf.fg.rate() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.sf.bg.outliers, 0);
    }

    #[test]
    fn missing_ground_truth_is_skipped_and_sizes_must_match() {
        let d = Grid::new(3, 3, f64::NAN);
        let e = Grid::new(3, 3, 5.0);
        let f = Grid::new(3, 3, Vector2::zeros());
        let gt = GroundTruth {
            disparity: &d,
            disparity_next: &d,
            flow: &f,
            foreground: None,
        };
        let m = evaluate(&Estimate { disparity: &e, disparity_next: &e, flow: &f }, &gt).unwrap();
        assert_eq!(m.d1.all.total, 0);
        assert_eq!(m.sf.all.total, 0);
        assert_eq!(m.fl.all.total, 9);
        let small = Grid::new(2, 3, 5.0);
        assert!(evaluate(&Estimate { disparity: &small, disparity_next: &e, flow: &f }, &gt).is_err());
    }
}
