//! Closed-form model ingredients: optimal velocity, interaction weight,
//! the Bando and follow-the-leader convolution kernels, the lane-change
//! rate curve, and the parameter record shared by every simulator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationErrors};

fn one() -> f64 {
    1.0
}

/// Physical and model constants. Serialized as one flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Bando response rate (1/time).
    pub alpha: f64,
    /// Follow-the-leader gain (length²/time).
    pub beta: f64,
    /// Interaction range.
    pub eps0: f64,
    /// Lane-change acceleration threshold.
    pub delta_lc: f64,
    pub v_max: f64,
    /// Headway at the inflection of the optimal-velocity curve.
    pub d_mid: f64,
    /// Saturation rate of the lane-change curve (1/time).
    pub p_max: f64,
    /// Acceleration scale of the lane-change curve.
    pub a_ref: f64,
    /// Upper bound on autonomous-vehicle controls.
    pub u_max: f64,
    /// Number of timer periods in the horizon.
    pub n_tau: u32,
    #[serde(rename = "horizon_T")]
    pub horizon_t: f64,
    #[serde(default = "one")]
    pub gw_a: f64,
    #[serde(default = "one")]
    pub gw_b: f64,
    pub m_lanes: u32,
}

impl ModelParams {
    /// Field names as they appear in JSON, in declaration order.
    pub const FIELDS: &'static [&'static str] = &[
        "alpha",
        "beta",
        "eps0",
        "delta_lc",
        "v_max",
        "d_mid",
        "p_max",
        "a_ref",
        "u_max",
        "n_tau",
        "horizon_T",
        "gw_a",
        "gw_b",
        "m_lanes",
    ];

    /// Fields that may be omitted from JSON.
    pub const OPTIONAL_FIELDS: &'static [&'static str] = &["gw_a", "gw_b"];

    /// Timer limit T₁ = horizon / n_tau.
    pub fn timer_limit(&self) -> f64 {
        self.horizon_t / self.n_tau as f64
    }

    pub fn m_lanes(&self) -> usize {
        self.m_lanes as usize
    }

    /// Collect every violated invariant, prefixing paths with `prefix`.
    pub fn check(&self, prefix: &str) -> ValidationErrors {
        let mut errs = ValidationErrors::default();
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("eps0", self.eps0),
            ("delta_lc", self.delta_lc),
            ("v_max", self.v_max),
            ("d_mid", self.d_mid),
            ("p_max", self.p_max),
            ("a_ref", self.a_ref),
            ("horizon_T", self.horizon_t),
            ("gw_a", self.gw_a),
            ("gw_b", self.gw_b),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                errs.push(
                    format!("{prefix}{name}"),
                    format!("must be finite and > 0, got {value}"),
                );
            }
        }
        if !(self.u_max.is_finite() && self.u_max >= 0.0) {
            errs.push(
                format!("{prefix}u_max"),
                format!("must be finite and >= 0, got {}", self.u_max),
            );
        }
        if self.n_tau < 1 {
            errs.push(format!("{prefix}n_tau"), "must be >= 1");
        }
        if self.m_lanes < 1 {
            errs.push(format!("{prefix}m_lanes"), "must be >= 1");
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        self.check("params.").into_result()
    }
}

/// Piecewise-constant, right-continuous control on `[0, horizon]`:
/// `values[i]` holds on `[breakpoints[i], breakpoints[i + 1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSchedule {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl ControlSchedule {
    pub fn constant(u: f64) -> Self {
        Self {
            breakpoints: vec![0.0],
            values: vec![u],
        }
    }

    pub fn check(&self, prefix: &str, u_max: f64) -> ValidationErrors {
        let mut errs = ValidationErrors::default();
        if self.breakpoints.is_empty() {
            errs.push(format!("{prefix}breakpoints"), "must not be empty");
        } else if self.breakpoints[0] != 0.0 {
            errs.push(format!("{prefix}breakpoints"), "first breakpoint must be 0");
        }
        if self.breakpoints.len() != self.values.len() {
            errs.push(
                format!("{prefix}values"),
                format!(
                    "expected {} values (one per breakpoint), got {}",
                    self.breakpoints.len(),
                    self.values.len()
                ),
            );
        }
        if self.breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            errs.push(format!("{prefix}breakpoints"), "must be strictly increasing");
        }
        for (i, &u) in self.values.iter().enumerate() {
            if !(u.is_finite() && (0.0..=u_max).contains(&u)) {
                errs.push(
                    format!("{prefix}values[{i}]"),
                    format!("{u} outside [0, u_max = {u_max}]"),
                );
            }
        }
        errs
    }

    /// Control value at time `t` (right-continuous).
    pub fn value_at(&self, t: f64) -> f64 {
        let idx = self.breakpoints.partition_point(|&b| b <= t);
        if idx == 0 {
            self.values.first().copied().unwrap_or(0.0)
        } else {
            self.values[idx - 1]
        }
    }

    /// Control value on the open interval that starts at `t`.
    pub fn value_on_step(&self, t: f64) -> f64 {
        self.value_at(t)
    }

    /// Breakpoints strictly inside `(t0, t1)`.
    pub fn breakpoints_within(&self, t0: f64, t1: f64) -> impl Iterator<Item = f64> + '_ {
        self.breakpoints.iter().copied().filter(move |&b| b > t0 && b < t1)
    }
}

/// Kernel evaluator bound to one parameter set.
#[derive(Debug, Clone)]
pub struct Kernels {
    params: ModelParams,
    tanh_mid: f64,
}

impl Kernels {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            params: params.clone(),
            tanh_mid: params.d_mid.tanh(),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Optimal velocity for headway `d`.
    pub fn optimal_velocity(&self, d: f64) -> Result<f64> {
        if !(d >= 0.0) {
            return Err(Error::Domain(format!("headway must be >= 0, got {d}")));
        }
        Ok(self.optimal_velocity_unchecked(d))
    }

    #[inline]
    pub(crate) fn optimal_velocity_unchecked(&self, d: f64) -> f64 {
        let p = &self.params;
        p.v_max * ((d - p.d_mid).tanh() + self.tanh_mid) / (1.0 + self.tanh_mid)
    }

    /// Interaction weight: a C∞ bump supported on `(-eps0, 0)` with peak 1
    /// at `-eps0/2`.
    #[inline]
    pub fn weight_h(&self, x: f64) -> f64 {
        let eps0 = self.params.eps0;
        if !(x > -eps0 && x < 0.0) {
            return 0.0;
        }
        let z = 2.0 * x / eps0 + 1.0;
        let s = 1.0 - z * z;
        if s <= 0.0 {
            0.0
        } else {
            (1.0 - 1.0 / s).exp()
        }
    }

    /// Bando kernel `alpha h(x) (V(-x) - v)`.
    pub fn kernel_h1(&self, x: f64, v: f64) -> Result<f64> {
        if !(v >= 0.0) {
            return Err(Error::Domain(format!("velocity must be >= 0, got {v}")));
        }
        Ok(self.h1_unchecked(x, v))
    }

    #[inline]
    pub(crate) fn h1_unchecked(&self, x: f64, v: f64) -> f64 {
        let w = self.weight_h(x);
        if w == 0.0 {
            return 0.0;
        }
        self.params.alpha * w * (self.optimal_velocity_unchecked(-x) - v)
    }

    /// Follow-the-leader kernel `beta h(dx) (-dv) / dx²`; zero off the support.
    #[inline]
    pub fn kernel_h2(&self, dx: f64, dv: f64) -> f64 {
        let w = self.weight_h(dx);
        if w == 0.0 {
            return 0.0;
        }
        self.params.beta * w * (-dv) / (dx * dx)
    }

    /// Pairwise acceleration felt at `(x, v)` from one unit-mass atom at
    /// `(xk, vk)`. `v` is clamped at 0 so stage values of an integrator
    /// that dip below the floor stay inside the kernel domain.
    #[inline]
    pub(crate) fn pair_accel(&self, x: f64, v: f64, xk: f64, vk: f64) -> f64 {
        let dx = x - xk;
        let w = self.weight_h(dx);
        if w == 0.0 {
            return 0.0;
        }
        let v = v.max(0.0);
        let p = &self.params;
        w * (p.alpha * (self.optimal_velocity_unchecked(-dx) - v) + p.beta * (vk - v) / (dx * dx))
    }

    /// Lane-change rate for an acceleration gap.
    #[inline]
    pub fn lane_change_prob(&self, gap: f64) -> f64 {
        let p = &self.params;
        if !(gap > 0.0) {
            return 0.0;
        }
        p.p_max * (1.0 - (-gap / p.a_ref).exp())
    }
}

/// Constants of the a-priori growth estimate `|y(t)| <= (|y0| + C t) e^{C t}`.
#[derive(Debug, Clone, Copy)]
pub struct GrowthBound {
    pub constant: f64,
}

impl GrowthBound {
    /// Growth constant for particles driven by a field of total interacting
    /// mass at most `mass`, plus a control bounded by `u_max`.
    ///
    /// With `K = sup h(x)/x²`, each unit of mass contributes at most
    /// `alpha (v_max + |v|) + beta K (|v| + |v_k|)` to the acceleration; the
    /// norm used is the max over particles of the Euclidean `(x, v)` norm.
    pub fn new(kernels: &Kernels, mass: f64, u_max: f64) -> Self {
        let p = kernels.params();
        let k = sup_h_over_x2(kernels);
        let c0 = u_max + mass * p.alpha * p.v_max;
        let c1 = mass * (p.alpha + p.beta * k);
        let c2 = mass * p.beta * k;
        Self {
            constant: c0.max(1.0 + c1 + c2),
        }
    }

    pub fn radius(&self, r0: f64, t: f64) -> f64 {
        (r0 + self.constant * t) * (self.constant * t).exp()
    }
}

/// Upper bound on `h(x)/x²` over the support, from dense sampling with a
/// 1% margin (the function is smooth and unimodal on `(-eps0, 0)`).
pub fn sup_h_over_x2(kernels: &Kernels) -> f64 {
    let eps0 = kernels.params().eps0;
    let n = 20_000;
    let mut best = 0.0_f64;
    for i in 1..n {
        let x = -eps0 * i as f64 / n as f64;
        best = best.max(kernels.weight_h(x) / (x * x));
    }
    best * 1.01
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn params() -> ModelParams {
        ModelParams {
            alpha: 2.0,
            beta: 0.5,
            eps0: 2.0,
            delta_lc: 0.3,
            v_max: 30.0,
            d_mid: 2.5,
            p_max: 1.5,
            a_ref: 0.4,
            u_max: 1.0,
            n_tau: 4,
            horizon_t: 8.0,
            gw_a: 1.0,
            gw_b: 1.0,
            m_lanes: 2,
        }
    }

    #[test]
    fn optimal_velocity_endpoints() {
        let k = Kernels::new(&params());
        assert_eq!(k.optimal_velocity(0.0).unwrap(), 0.0);
        let far = k.optimal_velocity(25.0).unwrap();
        assert!((far - 30.0).abs() <= 1e-6 * 30.0);
        let mid = k.optimal_velocity(2.5).unwrap();
        let t = 2.5_f64.tanh();
        assert!((mid - 30.0 * t / (1.0 + t)).abs() < 1e-12);
        assert!(k.optimal_velocity(-0.1).is_err());
    }

    #[test]
    fn bump_values() {
        let k = Kernels::new(&params());
        let eps0 = 2.0;
        assert_eq!(k.weight_h(0.0), 0.0);
        assert_eq!(k.weight_h(-eps0), 0.0);
        assert_eq!(k.weight_h(1.0), 0.0);
        assert_eq!(k.weight_h(-eps0 / 2.0), 1.0);
        let expected = (1.0 - 1.0 / (1.0 - 0.25_f64)).exp();
        assert!((k.weight_h(-eps0 / 4.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn bando_kernel_cases() {
        let p = params();
        let k = Kernels::new(&p);
        assert_eq!(k.kernel_h1(-2.0 * p.eps0, 3.0).unwrap(), 0.0);
        let v_opt = k.optimal_velocity(p.eps0 / 2.0).unwrap();
        assert_eq!(k.kernel_h1(-p.eps0 / 2.0, v_opt).unwrap(), 0.0);
        let got = k.kernel_h1(-p.eps0 / 2.0, 0.0).unwrap();
        assert!((got - p.alpha * v_opt).abs() < 1e-12);
        assert!(k.kernel_h1(-1.0, -0.5).is_err());
    }

    #[test]
    fn ftl_kernel_cases() {
        let p = params();
        let k = Kernels::new(&p);
        for dx in [-1.9, -1.0, -0.3, 0.5] {
            assert_eq!(k.kernel_h2(dx, 0.0), 0.0);
        }
        let dv = 1.7;
        let got = k.kernel_h2(-p.eps0 / 2.0, dv);
        let expected = p.beta * (-dv) / (p.eps0 / 2.0).powi(2);
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(k.kernel_h2(0.0, 5.0), 0.0);
    }

    #[test]
    fn lane_change_curve() {
        let p = params();
        let k = Kernels::new(&p);
        assert_eq!(k.lane_change_prob(-3.0), 0.0);
        assert_eq!(k.lane_change_prob(0.0), 0.0);
        let got = k.lane_change_prob(p.a_ref);
        assert!((got - p.p_max * (1.0 - (-1.0_f64).exp())).abs() < 1e-15);
        assert!(k.lane_change_prob(1e6) <= p.p_max);
    }

    #[test]
    fn monotone_on_grid() {
        let k = Kernels::new(&params());
        let n = 10_000;
        let mut prev_v = -1.0;
        let mut prev_p = -1.0;
        for i in 0..n {
            let d = 20.0 * i as f64 / n as f64;
            let v = k.optimal_velocity(d).unwrap();
            assert!(v >= prev_v);
            prev_v = v;
            let gap = -5.0 + 10.0 * i as f64 / n as f64;
            let pr = k.lane_change_prob(gap);
            assert!(pr >= prev_p);
            prev_p = pr;
        }
    }

    #[test]
    fn support_and_sign() {
        let k = Kernels::new(&params());
        for i in 0..4001 {
            let x = -6.0 + 10.0 * i as f64 / 4000.0;
            let h = k.weight_h(x);
            assert!(h >= 0.0);
            if !(x > -2.0 && x < 0.0) {
                assert_eq!(h, 0.0);
            }
        }
    }

    #[test]
    fn kernels_bounded_and_lipschitz() {
        let p = params();
        let k = Kernels::new(&p);
        // Dense finite-difference slopes stay bounded on R x [0, 2 v_max].
        let nx = 800;
        let nv = 40;
        let hx = 1e-5;
        let mut max_val: f64 = 0.0;
        let mut max_slope: f64 = 0.0;
        for i in 0..nx {
            let x = -2.5 + 3.0 * i as f64 / nx as f64;
            for j in 0..nv {
                let v = 2.0 * p.v_max * j as f64 / nv as f64;
                let a = k.kernel_h1(x, v).unwrap();
                let b = k.kernel_h2(x, v - p.v_max);
                max_val = max_val.max(a.abs()).max(b.abs());
                let sa = (k.kernel_h1(x + hx, v).unwrap() - a).abs() / hx;
                let sb = (k.kernel_h2(x + hx, v - p.v_max) - b).abs() / hx;
                max_slope = max_slope.max(sa).max(sb);
            }
        }
        assert!(max_val.is_finite() && max_val < 1e4);
        assert!(max_slope.is_finite() && max_slope < 1e5);
    }

    #[test]
    fn control_schedule_lookup() {
        let c = ControlSchedule {
            breakpoints: vec![0.0, 1.0, 2.5],
            values: vec![0.1, 0.5, 0.0],
        };
        assert!(c.check("c.", 1.0).is_empty());
        assert_eq!(c.value_at(0.0), 0.1);
        assert_eq!(c.value_at(0.99), 0.1);
        assert_eq!(c.value_at(1.0), 0.5);
        assert_eq!(c.value_at(3.0), 0.0);
        let bad = ControlSchedule {
            breakpoints: vec![0.0, 0.0],
            values: vec![2.0],
        };
        assert_eq!(bad.check("c.", 1.0).0.len(), 3);
    }

    #[test]
    fn params_validation_names_fields() {
        let mut p = params();
        p.eps0 = -1.0;
        p.n_tau = 0;
        let errs = p.check("params.");
        let paths: Vec<_> = errs.0.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(paths, vec!["params.eps0", "params.n_tau"]);
        assert_eq!(params().timer_limit(), 2.0);
    }

    #[test]
    fn params_json_defaults() {
        let json = r#"{"alpha":1,"beta":1,"eps0":1,"delta_lc":0.1,"v_max":2,"d_mid":1,
            "p_max":1,"a_ref":0.1,"u_max":0.5,"n_tau":2,"horizon_T":4,"m_lanes":2}"#;
        let p: ModelParams = serde_json::from_str(json).unwrap();
        assert_eq!((p.gw_a, p.gw_b), (1.0, 1.0));
        let missing = r#"{"alpha":1}"#;
        assert!(serde_json::from_str::<ModelParams>(missing).is_err());
    }
}
