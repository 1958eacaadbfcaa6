//! Parameter profiles and `key = value` configuration text.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::odometry::VoParams;
use crate::segmentation::SegParams;
use crate::stereo::{EpipolarParams, StereoParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Profile {
    #[default]
    General,
    /// Ground prior and forward-translation pose candidates.
    Road,
    /// Color term and appearance threshold tuned for rendered movies.
    Sintel,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "general" => Ok(Profile::General),
            "road" => Ok(Profile::Road),
            "sintel" => Ok(Profile::Sintel),
            other => Err(Error::InvalidArgument(format!(
                "unknown profile `{other}` (expected general, road or sintel)"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::General => "general",
            Profile::Road => "road",
            Profile::Sintel => "sintel",
        })
    }
}

/// Every tunable constant of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub profile: Profile,
    /// Working scale of stereo, odometry, segmentation and fusion.
    pub stereo_scale: f64,
    /// Working scale of the non-rigid flow.
    pub flow_scale: f64,
    /// Disparity search range at input resolution.
    pub max_disparity: usize,
    pub stereo: StereoParams,
    pub epipolar: EpipolarParams,
    pub vo: VoParams,
    pub seg: SegParams,
    pub flow: FlowParams,
    pub ground_prior: bool,
    /// Dilation of the warped previous mask, in working pixels.
    pub mask_dilation: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config::profile(Profile::General)
    }
}

const FORWARD_CANDIDATES: usize = 16;

impl Config {
    pub fn profile(profile: Profile) -> Self {
        let mut c = Config {
            profile,
            stereo_scale: 0.65,
            flow_scale: 0.4,
            max_disparity: 255,
            stereo: StereoParams::default(),
            epipolar: EpipolarParams::default(),
            vo: VoParams::default(),
            seg: SegParams::default(),
            flow: FlowParams::default(),
            ground_prior: false,
            mask_dilation: 3,
        };
        match profile {
            Profile::General => {}
            Profile::Road => {
                c.ground_prior = true;
                c.vo.forward_candidates = FORWARD_CANDIDATES;
            }
            Profile::Sintel => {
                c.seg.lambda_col = 1.5;
                c.seg.tau_ncc = 0.25;
            }
        }
        c
    }

    /// Apply every `key = value` line of `text`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Set one parameter by name. A rejected value leaves `self` unchanged.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut next = self.clone();
        next.set_unchecked(key, value)?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    fn set_unchecked(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for `{key}`")))
        }
        let f = |v: &str| num::<f64>(key, v);
        let u = |v: &str| num::<usize>(key, v);
        match key {
            "profile" => {
                // Switching profiles resets everything else.
                *self = Config::profile(value.parse()?);
            }
            "stereo_scale" => self.stereo_scale = f(value)?,
            "flow_scale" => self.flow_scale = f(value)?,
            "max_disparity" => self.max_disparity = u(value)?,
            "tau" => {
                let t = f(value)?;
                self.stereo.tau = t;
                self.seg.tau = t;
                self.flow.tau = t;
                self.vo.tau = t;
            }
            "lr_tolerance" => self.stereo.lr_tolerance = f(value)?,
            "lambda_sgm" => {
                let l = f(value)?;
                self.stereo.sgm.lambda = l;
                self.flow.sgm.lambda = l;
            }
            "beta" => {
                let b = f(value)?;
                self.stereo.sgm.beta = b;
                self.flow.sgm.beta = b;
            }
            "gamma_sgm" => {
                let g = f(value)?;
                self.stereo.sgm.gamma = g;
                self.flow.sgm.gamma = g;
            }
            "epipolar_tau" => self.epipolar.tau = f(value)?,
            "tau_c" => self.epipolar.tau_c = f(value)?,
            "tau_u" => self.epipolar.tau_u = f(value)?,
            "vo_levels" => self.vo.levels = u(value)?,
            "vo_iterations" => self.vo.max_iterations = u(value)?,
            "ransac_iterations" => self.vo.ransac_iterations = u(value)?,
            "forward_candidates" => self.vo.forward_candidates = u(value)?,
            "seed" => self.vo.seed = num(key, value)?,
            "lambda_ncc" => self.seg.lambda_ncc = f(value)?,
            "tau_ncc" => self.seg.tau_ncc = f(value)?,
            "tau_w" => self.seg.tau_w = f(value)?,
            "lambda_flo" => self.seg.lambda_flo = f(value)?,
            "tau_flo" => self.seg.tau_flo = f(value)?,
            "gamma" => self.seg.gamma_flo = f(value)?,
            "lambda_col" => self.seg.lambda_col = f(value)?,
            "lambda_potts" => self.seg.lambda_potts = f(value)?,
            "kappa3" => self.seg.kappa3 = f(value)?,
            "lambda_mask" => self.seg.lambda_mask = f(value)?,
            "lambda_gro" => self.seg.lambda_gro = f(value)?,
            "seg_iterations" => self.seg.max_iterations = u(value)?,
            "superpixels" => self.seg.superpixels = u(value)?,
            "ground_prior" => self.ground_prior = num(key, value)?,
            "mask_dilation" => self.mask_dilation = u(value)?,
            "flow_check" => self.flow.check_tolerance = f(value)?,
            "kappa_geo" => self.flow.kappa_geo = f(value)?,
            "wm_window" => self.flow.wm_window = u(value)?,
            "median_window" => self.flow.median_window = u(value)?,
            "max_range_side" => self.flow.max_range_side = u(value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown parameter `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.stereo_scale > 0.0 && self.stereo_scale <= 1.0) {
            return bad("stereo_scale must be in (0, 1]");
        }
        if !(self.flow_scale > 0.0 && self.flow_scale <= 1.0) {
            return bad("flow_scale must be in (0, 1]");
        }
        if self.max_disparity == 0 {
            return bad("max_disparity must be positive");
        }
        if self.flow.wm_window % 2 == 0 || self.flow.median_window % 2 == 0 {
            return bad("filter windows must be odd");
        }
        if self.seg.superpixels == 0 {
            return bad("superpixels must be positive");
        }
        if self.vo.levels == 0 || self.flow.max_range_side == 0 {
            return bad("vo_levels and max_range_side must be positive");
        }
        let (st, sg, fl) = (&self.stereo, &self.seg, &self.flow);
        let positive = [
            ("tau", st.tau.min(sg.tau).min(fl.tau).min(self.vo.tau)),
            ("epipolar_tau", self.epipolar.tau),
            ("tau_c", self.epipolar.tau_c),
            ("tau_ncc", sg.tau_ncc),
            ("tau_w", sg.tau_w),
            ("tau_flo", sg.tau_flo),
            ("kappa3", sg.kappa3),
            ("kappa_geo", fl.kappa_geo),
        ];
        let non_negative = [
            ("lr_tolerance", st.lr_tolerance),
            ("lambda_sgm", st.sgm.lambda.min(fl.sgm.lambda)),
            ("beta", st.sgm.beta.min(fl.sgm.beta)),
            ("gamma_sgm", st.sgm.gamma.min(fl.sgm.gamma)),
            ("tau_u", self.epipolar.tau_u),
            ("lambda_ncc", sg.lambda_ncc),
            ("lambda_flo", sg.lambda_flo),
            ("gamma", sg.gamma_flo),
            ("lambda_col", sg.lambda_col),
            ("lambda_potts", sg.lambda_potts),
            ("lambda_mask", sg.lambda_mask),
            ("lambda_gro", sg.lambda_gro),
            ("flow_check", fl.check_tolerance),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive and finite")));
            }
        }
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative and finite")));
            }
        }
        Ok(())
    }

    /// The configuration as `key = value` text that [`Config::apply_text`]
    /// reads back.
    pub fn to_text(&self) -> String {
        let rows: Vec<(&str, String)> = vec![
            ("profile", self.profile.to_string()),
            ("stereo_scale", self.stereo_scale.to_string()),
            ("flow_scale", self.flow_scale.to_string()),
            ("max_disparity", self.max_disparity.to_string()),
            ("tau", self.seg.tau.to_string()),
            ("lr_tolerance", self.stereo.lr_tolerance.to_string()),
            ("lambda_sgm", self.stereo.sgm.lambda.to_string()),
            ("beta", self.stereo.sgm.beta.to_string()),
            ("gamma_sgm", self.stereo.sgm.gamma.to_string()),
            ("epipolar_tau", self.epipolar.tau.to_string()),
            ("tau_c", self.epipolar.tau_c.to_string()),
            ("tau_u", self.epipolar.tau_u.to_string()),
            ("vo_levels", self.vo.levels.to_string()),
            ("vo_iterations", self.vo.max_iterations.to_string()),
            ("ransac_iterations", self.vo.ransac_iterations.to_string()),
            ("forward_candidates", self.vo.forward_candidates.to_string()),
            ("seed", self.vo.seed.to_string()),
            ("lambda_ncc", self.seg.lambda_ncc.to_string()),
            ("tau_ncc", self.seg.tau_ncc.to_string()),
            ("tau_w", self.seg.tau_w.to_string()),
            ("lambda_flo", self.seg.lambda_flo.to_string()),
            ("tau_flo", self.seg.tau_flo.to_string()),
            ("gamma", self.seg.gamma_flo.to_string()),
            ("lambda_col", self.seg.lambda_col.to_string()),
            ("lambda_potts", self.seg.lambda_potts.to_string()),
            ("kappa3", self.seg.kappa3.to_string()),
            ("lambda_mask", self.seg.lambda_mask.to_string()),
            ("lambda_gro", self.seg.lambda_gro.to_string()),
            ("seg_iterations", self.seg.max_iterations.to_string()),
            ("superpixels", self.seg.superpixels.to_string()),
            ("ground_prior", self.ground_prior.to_string()),
            ("mask_dilation", self.mask_dilation.to_string()),
            ("flow_check", self.flow.check_tolerance.to_string()),
            ("kappa_geo", self.flow.kappa_geo.to_string()),
            ("wm_window", self.flow.wm_window.to_string()),
            ("median_window", self.flow.median_window.to_string()),
            ("max_range_side", self.flow.max_range_side.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_defaults() {
        let c = Config::default();
        assert_eq!(c.seg.tau, 1.0);
        assert_eq!((c.seg.lambda_ncc, c.seg.tau_ncc, c.seg.tau_w), (4.0, 0.5, 0.005));
        assert_eq!((c.seg.lambda_flo, c.seg.tau_flo, c.seg.gamma_flo), (4.0, 0.75, 0.3));
        assert_eq!(c.seg.lambda_col, 0.5);
        assert_eq!((c.seg.lambda_potts, c.seg.kappa3), (10.0, 0.2));
        assert_eq!(c.epipolar.tau_c, 0.1);
        assert_eq!((c.seg.lambda_mask, c.seg.lambda_gro), (2.0, 10.0));
        assert_eq!(
            (c.stereo.sgm.lambda, c.stereo.sgm.beta, c.stereo.sgm.gamma),
            (200.0 / 255.0, 2.0, 2.0)
        );
        assert_eq!((c.stereo_scale, c.flow_scale), (0.65, 0.4));
        assert!(!c.ground_prior);
        assert_eq!(c.vo.forward_candidates, 0);
    }

    #[test]
    fn profile_overrides() {
        let s = Config::profile(Profile::Sintel);
        assert_eq!((s.seg.lambda_col, s.seg.tau_ncc), (1.5, 0.25));
        let mut rest = s.clone();
        rest.seg.lambda_col = 0.5;
        rest.seg.tau_ncc = 0.5;
        rest.profile = Profile::General;
        assert_eq!(rest, Config::default());

        let r = Config::profile(Profile::Road);
        assert!(r.ground_prior && r.vo.forward_candidates > 0);
    }

    #[test]
    fn text_round_trip() {
        for p in [Profile::General, Profile::Road, Profile::Sintel] {
            let mut c = Config::profile(p);
            c.seg.lambda_potts = 7.5;
            c.flow_scale = 0.5;
            let mut back = Config::default();
            back.apply_text(&c.to_text()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn bad_lines_are_rejected() {
        let mut c = Config::default();
        for kv in ["tau_ncc=-1", "lambda_potts=-2", "kappa3=0", "tau=nan", "vo_levels=0"] {
            let (k, v) = kv.split_once('=').unwrap();
            assert!(c.set(k, v).is_err(), "{kv}");
        }
        assert_eq!(c, Config::default());
        let mut c = Config::default();
        assert!(c.apply_text("lambda_col 3").is_err());
        assert!(c.apply_text("nope = 1").is_err());
        assert!(c.apply_text("superpixels = many").is_err());
        assert!(c.apply_text("flow_scale = 0").is_err());
        assert!(c.apply_text("profile = highway").is_err());
        c.apply_text("# comment\n\nlambda_col = 2 # trailing\n").unwrap();
        assert_eq!(c.seg.lambda_col, 2.0);
    }
}
