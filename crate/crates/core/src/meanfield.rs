//! The mean-field hybrid system: per-lane human densities carried as
//! particle clouds, exchanging mass between lanes through the source term,
//! coupled to autonomous-vehicle ODEs. Evolved by a sample-and-hold
//! Lagrangian scheme with step `T / 2^k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationErrors};
use crate::kernels::{ControlSchedule, GrowthBound, Kernels, ModelParams};
use crate::measures::{conv_accel, prune_merge, Atom, LaneField, ParticleCloud};
use crate::micro::{pick_side, uniform_times, LaneDecision, LaneEvent};
use crate::numerics::neumaier_sum;

#[derive(Debug, Clone, PartialEq)]
pub struct AvState {
    pub id: u64,
    /// Lane index in `1..=m`.
    pub lane: usize,
    pub y: f64,
    pub w: f64,
    pub timer: f64,
    pub control: ControlSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeParams {
    pub k_dyadic: u32,
    #[serde(default = "SchemeParams::default_eps_mass")]
    pub eps_mass: f64,
    #[serde(default)]
    pub grid_h: f64,
    pub dt_max: f64,
}

impl SchemeParams {
    pub const FIELDS: &'static [&'static str] = &["k_dyadic", "eps_mass", "grid_h", "dt_max"];

    fn default_eps_mass() -> f64 {
        1e-10
    }

    pub fn new(k_dyadic: u32, dt_max: f64) -> Self {
        Self {
            k_dyadic,
            eps_mass: Self::default_eps_mass(),
            grid_h: 0.0,
            dt_max,
        }
    }

    /// `T / 2^k`.
    pub fn dt(&self, horizon: f64) -> f64 {
        horizon / 2f64.powi(self.k_dyadic as i32)
    }

    pub fn check(&self, prefix: &str) -> ValidationErrors {
        let mut errs = ValidationErrors::default();
        if !(1..=30).contains(&self.k_dyadic) {
            errs.push(
                format!("{prefix}k_dyadic"),
                format!("must be in 1..=30, got {}", self.k_dyadic),
            );
        }
        if !(self.eps_mass >= 0.0 && self.eps_mass.is_finite()) {
            errs.push(format!("{prefix}eps_mass"), "must be finite and >= 0");
        }
        if !(self.grid_h >= 0.0 && self.grid_h.is_finite()) {
            errs.push(format!("{prefix}grid_h"), "must be finite and >= 0");
        }
        if !(self.dt_max > 0.0 && self.dt_max.is_finite()) {
            errs.push(format!("{prefix}dt_max"), "must be finite and > 0");
        }
        errs
    }
}

#[derive(Debug, Clone)]
pub struct MeanFieldState {
    pub time: f64,
    /// Human cloud of lane `j` at index `j - 1`.
    pub lanes: Vec<ParticleCloud>,
    pub avs: Vec<AvState>,
    params: ModelParams,
    kernels: Kernels,
}

impl MeanFieldState {
    pub fn new(params: ModelParams, time: f64, lanes: Vec<ParticleCloud>, avs: Vec<AvState>) -> Result<Self> {
        params.validate()?;
        let kernels = Kernels::new(&params);
        let state = Self {
            time,
            lanes,
            avs,
            params,
            kernels,
        };
        state.check().into_result()?;
        Ok(state)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn kernels(&self) -> &Kernels {
        &self.kernels
    }

    pub fn check(&self) -> ValidationErrors {
        let mut errs = ValidationErrors::default();
        let m = self.params.m_lanes();
        let t1 = self.params.timer_limit();
        if self.lanes.len() != m {
            errs.push("lanes", format!("expected {m} lane clouds, got {}", self.lanes.len()));
        }
        for (j, cloud) in self.lanes.iter().enumerate() {
            if let Some(i) = cloud.atoms().iter().position(|a| !(a.v >= 0.0)) {
                errs.push(format!("lanes[{j}].atoms[{i}].v"), "must be >= 0");
            }
        }
        for (i, av) in self.avs.iter().enumerate() {
            let p = format!("avs[{i}].");
            if !(1..=m).contains(&av.lane) {
                errs.push(format!("{p}lane"), format!("lane {} outside 1..={m}", av.lane));
            }
            if !av.y.is_finite() {
                errs.push(format!("{p}y"), "must be finite");
            }
            if !(av.w.is_finite() && av.w >= 0.0) {
                errs.push(format!("{p}w"), "must be finite and >= 0");
            }
            if !(av.timer >= 0.0 && av.timer < t1) {
                errs.push(format!("{p}timer0"), format!("{} outside [0, T1 = {t1})", av.timer));
            }
            errs.extend(av.control.check(&format!("{p}control."), self.params.u_max));
            for other in &self.avs[..i] {
                if other.id == av.id {
                    errs.push(format!("{p}id"), format!("duplicate id {}", av.id));
                }
                if other.timer == av.timer {
                    errs.push(
                        format!("{p}timer0"),
                        format!("vehicles {} and {} share initial timer {}", other.id, av.id, av.timer),
                    );
                }
            }
        }
        errs
    }

    /// Autonomous cloud of `lane`: atoms `(y, w)` with mass `1/M_j`.
    pub fn av_cloud(&self, lane: usize) -> ParticleCloud {
        let count = self.avs.iter().filter(|a| a.lane == lane).count();
        ParticleCloud::from_atoms_unchecked(
            self.avs
                .iter()
                .filter(|a| a.lane == lane)
                .map(|a| Atom::new(a.y, a.w, 1.0 / count as f64))
                .collect(),
        )
    }

    pub fn total_mass(&self) -> f64 {
        neumaier_sum(self.lanes.iter().map(ParticleCloud::total_mass))
    }

    /// Max Euclidean `(x, v)` norm over all atoms and vehicles.
    pub fn norm(&self) -> f64 {
        let lanes = self.lanes.iter().map(ParticleCloud::support_radius).fold(0.0, f64::max);
        self.avs.iter().map(|a| a.y.hypot(a.w)).fold(lanes, f64::max)
    }

    fn fields(&self) -> Vec<LaneField<'_>> {
        (1..=self.lanes.len())
            .map(|j| LaneField::new(&self.kernels, &[&self.lanes[j - 1], &self.av_cloud(j)]))
            .collect()
    }
}

/// Mass leaving one lane in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTerm {
    /// Remaining mass of each atom, in atom order.
    pub retained: Vec<f64>,
    /// Clones bound for lane `j - 1`.
    pub to_lower: Vec<Atom>,
    /// Clones bound for lane `j + 1`.
    pub to_upper: Vec<Atom>,
}

impl SourceTerm {
    pub fn outflow(&self) -> f64 {
        neumaier_sum(self.to_lower.iter().chain(&self.to_upper).map(|a| a.mass))
    }
}

fn source_with(
    kernels: &Kernels,
    fields: &[LaneField],
    cloud: &ParticleCloud,
    lane: usize,
    h: f64,
    t: f64,
) -> Result<SourceTerm> {
    let p = kernels.params();
    let m = fields.len();
    let mut retained = Vec::with_capacity(cloud.len());
    let mut to_lower = Vec::new();
    let mut to_upper = Vec::new();
    for a in cloud.atoms() {
        let own = fields[lane - 1].accel(a.x, a.v);
        let rate = |l: usize| kernels.lane_change_prob(fields[l - 1].accel(a.x, a.v) - own - p.delta_lc);
        let r_lo = if lane > 1 { rate(lane - 1) } else { 0.0 };
        let r_up = if lane < m { rate(lane + 1) } else { 0.0 };
        if h * (r_lo + r_up) > 1.0 {
            return Err(Error::StepSize(format!(
                "atom at ({}, {}) on lane {lane} would lose {} of its mass at t = {t}",
                a.x,
                a.v,
                h * (r_lo + r_up)
            )));
        }
        let c_lo = h * r_lo * a.mass;
        let c_up = h * r_up * a.mass;
        if c_lo > 0.0 {
            to_lower.push(Atom::new(a.x, a.v, c_lo));
        }
        if c_up > 0.0 {
            to_upper.push(Atom::new(a.x, a.v, c_up));
        }
        retained.push(a.mass - (c_lo + c_up));
    }
    Ok(SourceTerm {
        retained,
        to_lower,
        to_upper,
    })
}

/// Source transfers out of lane `lane` over a step of length `h`, with all
/// fields evaluated on `state`.
pub fn source_term(state: &MeanFieldState, lane: usize, h: f64) -> Result<SourceTerm> {
    check_lane(state, lane)?;
    let fields = state.fields();
    source_with(&state.kernels, &fields, &state.lanes[lane - 1], lane, h, state.time)
}

fn check_lane(state: &MeanFieldState, lane: usize) -> Result<()> {
    if lane == 0 || lane > state.lanes.len() {
        return Err(Error::Domain(format!("lane {lane} outside 1..={}", state.lanes.len())));
    }
    Ok(())
}

#[inline]
fn floored_accel(field: &LaneField, x: f64, v: f64, u: f64) -> f64 {
    let a = field.accel(x, v) + u;
    if v <= 0.0 && a < 0.0 {
        0.0
    } else {
        a
    }
}

/// One RK4 step of `(x, v)` in a frozen field, with the velocity floor.
fn rk4_frozen(field: &LaneField, x: f64, v: f64, u: f64, h: f64) -> (f64, f64) {
    let a1 = floored_accel(field, x, v, u);
    let (x2, v2) = (x + 0.5 * h * v, v + 0.5 * h * a1);
    let a2 = floored_accel(field, x2, v2, u);
    let (x3, v3) = (x + 0.5 * h * v2, v + 0.5 * h * a2);
    let a3 = floored_accel(field, x3, v3, u);
    let (x4, v4) = (x + h * v3, v + h * a3);
    let a4 = floored_accel(field, x4, v4, u);
    (
        x + h / 6.0 * (v + 2.0 * v2 + 2.0 * v3 + v4),
        (v + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)).max(0.0),
    )
}

fn push_with(field: &LaneField, cloud: &ParticleCloud, h: f64, t: f64) -> Result<Vec<(f64, f64)>> {
    cloud
        .atoms()
        .iter()
        .map(|a| {
            let (x, v) = rk4_frozen(field, a.x, a.v, 0.0, h);
            if x.is_finite() && v.is_finite() {
                Ok((x, v))
            } else {
                Err(Error::NonFinite {
                    t: t + h,
                    what: format!("atom from ({}, {})", a.x, a.v),
                })
            }
        })
        .collect()
}

/// Lane `lane`'s cloud advanced by one RK4 step of length `h` in the field
/// frozen at `state`; masses unchanged.
pub fn flow_push(state: &MeanFieldState, lane: usize, h: f64) -> Result<ParticleCloud> {
    check_lane(state, lane)?;
    let fields = state.fields();
    let cloud = &state.lanes[lane - 1];
    let moved = push_with(&fields[lane - 1], cloud, h, state.time)?;
    Ok(ParticleCloud::from_atoms_unchecked(
        moved
            .into_iter()
            .zip(cloud.atoms())
            .map(|((x, v), a)| Atom::new(x, v, a.mass))
            .collect(),
    ))
}

/// Mass bookkeeping of one step, per lane (index `j - 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t_start: f64,
    pub h: f64,
    pub mass_before: Vec<f64>,
    pub outflow: Vec<f64>,
    pub inflow: Vec<f64>,
    /// After transport and source, before pruning.
    pub mass_after: Vec<f64>,
    pub pruned: Vec<f64>,
    pub atoms: Vec<usize>,
}

/// One step of length `T / 2^k` (clipped to the horizon).
pub fn lagrangian_step(state: &MeanFieldState, scheme: &SchemeParams) -> Result<MeanFieldState> {
    let h = scheme
        .dt(state.params.horizon_t)
        .min(state.params.horizon_t - state.time);
    if !(h > 0.0) {
        return Err(Error::Domain(format!(
            "state at t = {} is already at the horizon",
            state.time
        )));
    }
    Ok(lagrangian_step_by(state, scheme, h)?.0)
}

/// One sample-and-hold step of length `h`: source on the step-start state,
/// transport of the retained mass, clones deposited unmoved in the
/// neighbouring lanes, pruning, and the AV ODEs under the frozen measures.
pub fn lagrangian_step_by(
    state: &MeanFieldState,
    scheme: &SchemeParams,
    h: f64,
) -> Result<(MeanFieldState, StepRecord)> {
    let m = state.lanes.len();
    let t = state.time;
    let kernels = &state.kernels;
    let p = &state.params;
    let fields = state.fields();

    let sources: Vec<SourceTerm> = (1..=m)
        .map(|j| source_with(kernels, &fields, &state.lanes[j - 1], j, h, t))
        .collect::<Result<_>>()?;

    let mut new_lanes: Vec<Vec<Atom>> = Vec::with_capacity(m);
    for j in 1..=m {
        let cloud = &state.lanes[j - 1];
        let moved = push_with(&fields[j - 1], cloud, h, t)?;
        let mut atoms: Vec<Atom> = moved
            .into_iter()
            .zip(&sources[j - 1].retained)
            .map(|((x, v), &mass)| Atom::new(x, v, mass))
            .collect();
        if j > 1 {
            atoms.extend_from_slice(&sources[j - 2].to_upper);
        }
        if j < m {
            atoms.extend_from_slice(&sources[j].to_lower);
        }
        new_lanes.push(atoms);
    }

    let mass_before: Vec<f64> = state.lanes.iter().map(ParticleCloud::total_mass).collect();
    let outflow: Vec<f64> = sources.iter().map(SourceTerm::outflow).collect();
    let inflow: Vec<f64> = (0..m)
        .map(|i| {
            let lo = if i > 0 { sources[i - 1].to_upper.as_slice() } else { &[] };
            let up = if i + 1 < m {
                sources[i + 1].to_lower.as_slice()
            } else {
                &[]
            };
            neumaier_sum(lo.iter().chain(up).map(|a| a.mass))
        })
        .collect();
    let mass_after: Vec<f64> = new_lanes
        .iter()
        .map(|a| neumaier_sum(a.iter().map(|a| a.mass)))
        .collect();

    let total_before = neumaier_sum(mass_before.iter().copied());
    let total_after = neumaier_sum(mass_after.iter().copied());
    let tol = 1e-12 * total_before.max(f64::MIN_POSITIVE);
    if (total_after - total_before).abs() > tol {
        return Err(Error::Invariant {
            t,
            what: format!("total mass {total_before} -> {total_after} across the step"),
        });
    }
    for j in 0..m {
        let expected = mass_before[j] - outflow[j] + inflow[j];
        if (mass_after[j] - expected).abs() > tol {
            return Err(Error::Invariant {
                t,
                what: format!("lane {} mass {} differs from balance {expected}", j + 1, mass_after[j]),
            });
        }
    }
    // Bounded source mass and support.
    let neighbours = (m - 1).min(2) as f64;
    let out_total = neumaier_sum(outflow.iter().copied());
    if out_total > neighbours * p.p_max * h * total_before * (1.0 + 1e-12) {
        return Err(Error::Invariant {
            t,
            what: format!("source mass {out_total} exceeds the per-step bound"),
        });
    }
    let support = state
        .lanes
        .iter()
        .map(ParticleCloud::support_radius)
        .fold(0.0, f64::max);
    let clone_radius = sources
        .iter()
        .flat_map(|s| s.to_lower.iter().chain(&s.to_upper))
        .map(Atom::norm)
        .fold(0.0, f64::max);
    if clone_radius > support {
        return Err(Error::Invariant {
            t,
            what: "source support leaves the lane supports".into(),
        });
    }

    let mut lanes = Vec::with_capacity(m);
    let mut pruned = Vec::with_capacity(m);
    let mut atoms = Vec::with_capacity(m);
    for a in new_lanes {
        let (cloud, report) = prune_merge(&ParticleCloud::from_atoms_unchecked(a), scheme.eps_mass, scheme.grid_h)?;
        pruned.push(report.removed_mass);
        atoms.push(cloud.len());
        lanes.push(cloud);
    }

    let n_sub = (h / scheme.dt_max).ceil().max(1.0) as usize;
    let hs = h / n_sub as f64;
    let mut avs = state.avs.clone();
    for av in &mut avs {
        let u = av.control.value_at(t);
        let field = &fields[av.lane - 1];
        let (mut y, mut w) = (av.y, av.w);
        for _ in 0..n_sub {
            (y, w) = rk4_frozen(field, y, w, u, hs);
        }
        if !(y.is_finite() && w.is_finite()) {
            return Err(Error::NonFinite {
                t: t + h,
                what: format!("autonomous vehicle {} state ({y:e}, {w:e})", av.id),
            });
        }
        av.y = y;
        av.w = w;
        av.timer += h;
    }

    let next = MeanFieldState {
        time: t + h,
        lanes,
        avs,
        params: state.params.clone(),
        kernels: state.kernels.clone(),
    };
    let record = StepRecord {
        t_start: t,
        h,
        mass_before,
        outflow,
        inflow,
        mass_after,
        pruned,
        atoms,
    };
    Ok((next, record))
}

/// Lane decision for autonomous vehicle `idx` at its timer expiry: a
/// neighbour `j'` qualifies when its field at `(y, w)` beats the vehicle's
/// own acceleration by at least `delta_lc`.
pub fn av_lane_change(state: &MeanFieldState, idx: usize) -> Result<LaneDecision> {
    let av = state
        .avs
        .get(idx)
        .ok_or_else(|| Error::Domain(format!("no autonomous vehicle at index {idx}")))?;
    let m = state.lanes.len();
    let k = &state.kernels;
    let own = conv_accel(k, &state.lanes[av.lane - 1], &state.av_cloud(av.lane), (av.y, av.w))?
        + av.control.value_at(state.time);
    let qualifies = |lane: usize| -> Result<Option<f64>> {
        let a = conv_accel(k, &state.lanes[lane - 1], &state.av_cloud(lane), (av.y, av.w))?;
        Ok((a >= own + state.params.delta_lc).then_some(a))
    };
    let down = if av.lane > 1 { qualifies(av.lane - 1)? } else { None };
    let up = if av.lane < m { qualifies(av.lane + 1)? } else { None };
    Ok(pick_side(down, up))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvSnapshot {
    pub id: u64,
    pub lane: usize,
    pub y: f64,
    pub w: f64,
}

#[derive(Debug, Clone)]
pub struct MeanFieldSample {
    pub t: f64,
    pub lanes: Vec<ParticleCloud>,
    pub avs: Vec<AvSnapshot>,
}

impl MeanFieldSample {
    fn of(state: &MeanFieldState) -> Self {
        Self {
            t: state.time,
            lanes: state.lanes.clone(),
            avs: state
                .avs
                .iter()
                .map(|a| AvSnapshot {
                    id: a.id,
                    lane: a.lane,
                    y: a.y,
                    w: a.w,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MeanFieldTrajectory {
    pub samples: Vec<MeanFieldSample>,
    pub steps: Vec<StepRecord>,
    pub events: Vec<LaneEvent>,
    pub final_state: MeanFieldState,
    /// Cumulative mass removed by pruning.
    pub pruned_mass: f64,
}

/// Checks the scheme step against the source rate bound.
pub fn check_scheme(params: &ModelParams, scheme: &SchemeParams) -> Result<()> {
    scheme.check("scheme.").into_result()?;
    let dt = scheme.dt(params.horizon_t);
    if dt * 2.0 * params.p_max > 0.5 {
        return Err(Error::StepSize(format!(
            "dt = {dt} with p_max = {} violates dt * 2 * p_max <= 0.5",
            params.p_max
        )));
    }
    Ok(())
}

/// Run the scheme to the horizon, sampling at `sample_times`.
pub fn simulate_sigma2(
    initial: &MeanFieldState,
    scheme: &SchemeParams,
    sample_times: &[f64],
) -> Result<MeanFieldTrajectory> {
    initial.check().into_result()?;
    check_scheme(&initial.params, scheme)?;
    let p = initial.params.clone();
    let horizon = p.horizon_t;
    let t0 = initial.time;
    let t1 = p.timer_limit();
    let dt = scheme.dt(horizon);

    let mut events: Vec<(f64, usize)> = Vec::new();
    for (i, av) in initial.avs.iter().enumerate() {
        let mut n = 1u64;
        loop {
            let te = t0 + n as f64 * t1 - av.timer;
            if te > horizon {
                break;
            }
            events.push((te, i));
            n += 1;
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut stops: Vec<f64> = uniform_times(t0, horizon, dt);
    stops.extend(events.iter().map(|e| e.0));
    stops.extend(sample_times.iter().copied().filter(|&s| s > t0 && s <= horizon));
    for av in &initial.avs {
        stops.extend(av.control.breakpoints_within(t0, horizon));
    }
    stops.retain(|&s| s > t0);
    stops.sort_by(f64::total_cmp);
    stops.dedup();

    let growth = GrowthBound::new(&initial.kernels, initial.total_mass() + 1.0, p.u_max);
    let norm0 = initial.norm();
    let total0 = initial.total_mass();

    let mut state = initial.clone();
    let mut samples = Vec::new();
    let mut sample_iter = sample_times
        .iter()
        .copied()
        .filter(|&s| s >= t0 && s <= horizon)
        .peekable();
    if sample_iter.peek() == Some(&t0) {
        samples.push(MeanFieldSample::of(&state));
        sample_iter.next();
    }
    let mut last_reset: Vec<f64> = state.avs.iter().map(|a| t0 - a.timer).collect();
    let mut steps = Vec::new();
    let mut log_events = Vec::new();
    let mut next_event = 0;
    let mut pruned_mass = 0.0;

    for &stop in &stops {
        let h = stop - state.time;
        let (mut next, record) = lagrangian_step_by(&state, scheme, h)?;
        next.time = stop;
        for (av, lr) in next.avs.iter_mut().zip(&last_reset) {
            av.timer = stop - lr;
        }
        pruned_mass += neumaier_sum(record.pruned.iter().copied());
        steps.push(record);
        state = next;

        let total = state.total_mass();
        let slack = 1e-12 * total0 * steps.len() as f64;
        if (total + pruned_mass - total0).abs() > slack.max(f64::MIN_POSITIVE) {
            return Err(Error::Invariant {
                t: stop,
                what: format!("mass {total} plus pruned {pruned_mass} differs from initial {total0}"),
            });
        }
        let norm = state.norm();
        let bound = growth.radius(norm0, stop - t0);
        if norm > bound * (1.0 + 1e-12) {
            return Err(Error::Invariant {
                t: stop,
                what: format!("support radius {norm} exceeds a-priori bound {bound}"),
            });
        }

        while next_event < events.len() && events[next_event].0 == stop {
            let idx = events[next_event].1;
            let timer = state.avs[idx].timer;
            if (timer - t1).abs() > 1e-9 * t1.max(1.0) {
                return Err(Error::Invariant {
                    t: stop,
                    what: format!("timer {timer} of vehicle {} not at limit {t1}", state.avs[idx].id),
                });
            }
            let decision = av_lane_change(&state, idx)?;
            let av = &mut state.avs[idx];
            let before = (av.y, av.w);
            let from = av.lane;
            av.lane = decision.target(from);
            av.timer = 0.0;
            last_reset[idx] = stop;
            log_events.push(LaneEvent {
                t: stop,
                id: av.id,
                from,
                to: av.lane,
                before,
                after: (av.y, av.w),
            });
            next_event += 1;
        }

        while sample_iter.peek().is_some_and(|&s| s <= stop) {
            sample_iter.next();
            samples.push(MeanFieldSample::of(&state));
        }
    }

    Ok(MeanFieldTrajectory {
        samples,
        steps,
        events: log_events,
        final_state: state,
        pruned_mass,
    })
}

/// Smooth compactly supported test function: product of bumps centred at
/// `(cx, cv)` with radii `(rx, rv)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BumpTest {
    pub cx: f64,
    pub cv: f64,
    pub rx: f64,
    pub rv: f64,
}

impl BumpTest {
    fn bump(s: f64) -> (f64, f64) {
        if s.abs() >= 1.0 {
            return (0.0, 0.0);
        }
        let q = 1.0 - s * s;
        let b = (-1.0 / q).exp();
        (b, b * (-2.0 * s / (q * q)))
    }

    /// Value and gradient `(phi, d_x phi, d_v phi)`.
    pub fn eval(&self, x: f64, v: f64) -> (f64, f64, f64) {
        let (bx, dbx) = Self::bump((x - self.cx) / self.rx);
        let (bv, dbv) = Self::bump((v - self.cv) / self.rv);
        (bx * bv, dbx / self.rx * bv, bx * dbv / self.rv)
    }

    fn pair(&self, cloud: &[Atom]) -> f64 {
        neumaier_sum(cloud.iter().map(|a| a.mass * self.eval(a.x, a.v).0))
    }
}

/// One-step weak-form residual of lane `lane` for test function `phi`:
/// the finite-difference rate of `<phi, mu>` over a step of length `h`
/// minus `<phi, S> + <grad phi . omega, mu>` at the step start.
pub fn step_residual(
    state: &MeanFieldState,
    scheme: &SchemeParams,
    lane: usize,
    h: f64,
    phi: &BumpTest,
) -> Result<f64> {
    check_lane(state, lane)?;
    let unpruned = SchemeParams {
        eps_mass: 0.0,
        grid_h: 0.0,
        ..*scheme
    };
    let (next, _) = lagrangian_step_by(state, &unpruned, h)?;
    let before = phi.pair(state.lanes[lane - 1].atoms());
    let after = phi.pair(next.lanes[lane - 1].atoms());
    let rate = (after - before) / h;

    let fields = state.fields();
    let m = state.lanes.len();
    let own = source_with(&state.kernels, &fields, &state.lanes[lane - 1], lane, 1.0, state.time)?;
    let mut source = -phi.pair(&own.to_lower) - phi.pair(&own.to_upper);
    if lane > 1 {
        let s = source_with(
            &state.kernels,
            &fields,
            &state.lanes[lane - 2],
            lane - 1,
            1.0,
            state.time,
        )?;
        source += phi.pair(&s.to_upper);
    }
    if lane < m {
        let s = source_with(&state.kernels, &fields, &state.lanes[lane], lane + 1, 1.0, state.time)?;
        source += phi.pair(&s.to_lower);
    }
    let field = &fields[lane - 1];
    let transport = neumaier_sum(state.lanes[lane - 1].atoms().iter().map(|a| {
        let (_, px, pv) = phi.eval(a.x, a.v);
        a.mass * (px * a.v + pv * floored_accel(field, a.x, a.v, 0.0))
    }));
    Ok((rate - source - transport).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(m_lanes: u32) -> ModelParams {
        ModelParams {
            alpha: 2.0,
            beta: 0.5,
            eps0: 2.0,
            delta_lc: 0.1,
            v_max: 2.0,
            d_mid: 1.0,
            p_max: 1.0,
            a_ref: 0.2,
            u_max: 0.5,
            n_tau: 4,
            horizon_t: 2.0,
            gw_a: 1.0,
            gw_b: 1.0,
            m_lanes,
        }
    }

    fn cloud(atoms: &[(f64, f64, f64)]) -> ParticleCloud {
        ParticleCloud::new(atoms.iter().map(|&(x, v, m)| Atom::new(x, v, m)).collect()).unwrap()
    }

    #[test]
    fn single_lane_has_no_source() {
        let s = MeanFieldState::new(params(1), 0.0, vec![cloud(&[(0.0, 1.0, 0.5), (0.5, 0.2, 0.5)])], vec![]).unwrap();
        let src = source_term(&s, 1, 0.1).unwrap();
        assert!(src.to_lower.is_empty() && src.to_upper.is_empty());
        assert_eq!(src.retained, vec![0.5, 0.5]);
    }

    #[test]
    fn identical_lanes_have_no_source() {
        let c = cloud(&[(0.0, 1.0, 0.5), (0.5, 0.2, 0.5)]);
        let s = MeanFieldState::new(params(3), 0.0, vec![c.clone(), c.clone(), c], vec![]).unwrap();
        for j in 1..=3 {
            assert_eq!(source_term(&s, j, 0.1).unwrap().outflow(), 0.0);
        }
    }

    #[test]
    fn constructed_transfer() {
        // Lone atom on lane 1 feels nothing; lane 2 carries a leader chosen so
        // that A2 at the atom equals delta + a_ref.
        let p = params(2);
        let k = Kernels::new(&p);
        let (x0, v0) = (0.0, 0.3);
        let (xl, vl) = (0.9, 0.3);
        let unit = k.pair_accel(x0, v0, xl, vl);
        assert!(unit > 0.0);
        let mass = (p.delta_lc + p.a_ref) / unit;
        let s = MeanFieldState::new(
            p.clone(),
            0.0,
            vec![cloud(&[(x0, v0, 1.0)]), cloud(&[(xl, vl, mass)])],
            vec![],
        )
        .unwrap();
        let dt = 0.05;
        let src = source_term(&s, 1, dt).unwrap();
        let expected = dt * p.p_max * (1.0 - (-1.0f64).exp());
        assert_eq!(src.to_upper.len(), 1);
        assert!((src.to_upper[0].mass - expected).abs() < 1e-14);
        assert_eq!((src.to_upper[0].x, src.to_upper[0].v), (x0, v0));
        assert!((src.retained[0] - (1.0 - expected)).abs() < 1e-15);

        let scheme = SchemeParams::new(5, 0.01);
        let (next, rec) = lagrangian_step_by(&s, &scheme, dt).unwrap();
        assert!(next.lanes[1].atoms().contains(&src.to_upper[0]));
        assert!((rec.inflow[1] - expected).abs() < 1e-15);
    }

    #[test]
    fn step_size_error() {
        let mut p = params(2);
        p.p_max = 30.0;
        p.a_ref = 1e-3;
        let s = MeanFieldState::new(
            p,
            0.0,
            vec![cloud(&[(0.0, 0.3, 1.0)]), cloud(&[(0.9, 0.3, 5.0)])],
            vec![],
        )
        .unwrap();
        assert!(matches!(source_term(&s, 1, 0.1), Err(Error::StepSize(_))));
    }

    #[test]
    fn lone_atom_drifts() {
        let s = MeanFieldState::new(params(1), 0.0, vec![cloud(&[(1.0, 0.7, 0.3)])], vec![]).unwrap();
        let c = flow_push(&s, 1, 0.25).unwrap();
        assert_eq!(c.atoms(), &[Atom::new(1.0 + 0.7 * 0.25, 0.7, 0.3)]);
    }

    #[test]
    fn two_atoms_match_scalar_rk4() {
        let p = params(1);
        let k = Kernels::new(&p);
        let atoms = [(0.0, 1.0, 0.4), (0.8, 0.5, 0.6)];
        let s = MeanFieldState::new(p, 0.0, vec![cloud(&atoms)], vec![]).unwrap();
        let h = 0.1;
        let pushed = flow_push(&s, 1, h).unwrap();
        // Scalar oracle: the follower sees only the frozen leader.
        let acc = |x: f64, v: f64| 0.6 * (k.kernel_h1(x - 0.8, v).unwrap() + k.kernel_h2(x - 0.8, v - 0.5));
        let (x, v) = (0.0, 1.0);
        let a1 = acc(x, v);
        let a2 = acc(x + h / 2.0 * v, v + h / 2.0 * a1);
        let v2 = v + h / 2.0 * a1;
        let a3 = acc(x + h / 2.0 * v2, v + h / 2.0 * a2);
        let v3 = v + h / 2.0 * a2;
        let a4 = acc(x + h * v3, v + h * a3);
        let v4 = v + h * a3;
        let xe = x + h / 6.0 * (v + 2.0 * v2 + 2.0 * v3 + v4);
        let ve = v + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        let f = pushed.atoms()[0];
        assert!((f.x - xe).abs() < 1e-14 && (f.v - ve).abs() < 1e-14);
        assert_eq!(pushed.atoms()[1], Atom::new(0.8 + 0.05, 0.5, 0.6));
        assert_eq!(pushed.total_mass(), s.lanes[0].total_mass());
    }

    #[test]
    fn av_rules() {
        let p = params(3);
        let av = AvState {
            id: 1,
            lane: 2,
            y: 0.0,
            w: 0.5,
            timer: 0.1,
            control: ControlSchedule::constant(0.2),
        };
        let empty = ParticleCloud::empty();
        let s = MeanFieldState::new(
            p.clone(),
            0.0,
            vec![empty.clone(), empty.clone(), empty.clone()],
            vec![av.clone()],
        )
        .unwrap();
        assert_eq!(av_lane_change(&s, 0).unwrap(), LaneDecision::Stay);

        // Equal attractive leaders on both neighbours: j + 1 wins.
        let lead = cloud(&[(0.9, 0.5, 1.0)]);
        let mut av0 = av.clone();
        av0.control = ControlSchedule::constant(0.0);
        let s = MeanFieldState::new(
            p.clone(),
            0.0,
            vec![lead.clone(), empty.clone(), lead.clone()],
            vec![av0.clone()],
        )
        .unwrap();
        assert_eq!(av_lane_change(&s, 0).unwrap(), LaneDecision::Up);
        let s = MeanFieldState::new(p, 0.0, vec![lead, empty.clone(), empty], vec![av0]).unwrap();
        assert_eq!(av_lane_change(&s, 0).unwrap(), LaneDecision::Down);
    }

    #[test]
    fn simulation_conserves_mass_and_logs_events() {
        let p = params(2);
        let lane1 = cloud(&[(0.0, 1.0, 0.3), (0.6, 0.4, 0.3), (1.0, 0.2, 0.4)]);
        let lane2 = cloud(&[(5.0, 1.0, 1.0)]);
        let av = AvState {
            id: 9,
            lane: 1,
            y: -0.5,
            w: 1.0,
            timer: 0.05,
            control: ControlSchedule::constant(0.1),
        };
        let s = MeanFieldState::new(p, 0.0, vec![lane1, lane2], vec![av]).unwrap();
        let scheme = SchemeParams::new(6, 0.01);
        let traj = simulate_sigma2(&s, &scheme, &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(traj.samples.len(), 3);
        let total = traj.final_state.total_mass() + traj.pruned_mass;
        assert!((total - 2.0).abs() < 1e-12);
        // T1 = 0.5, timer 0.05: expiries at 0.45, 0.95, 1.45, 1.95.
        let times: Vec<f64> = traj.events.iter().map(|e| e.t).collect();
        assert_eq!(times.len(), 4);
        assert!((times[0] - 0.45).abs() < 1e-15);
        assert!(traj.steps.iter().all(|r| r.h <= 2.0 / 64.0 + 1e-15));
        let second = simulate_sigma2(&s, &scheme, &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(second.final_state.lanes, traj.final_state.lanes);
    }

    #[test]
    fn unstable_step_rejected() {
        let mut p = params(2);
        p.p_max = 20.0;
        let s = MeanFieldState::new(p, 0.0, vec![ParticleCloud::empty(), ParticleCloud::empty()], vec![]).unwrap();
        assert!(matches!(
            simulate_sigma2(&s, &SchemeParams::new(3, 0.01), &[]),
            Err(Error::StepSize(_))
        ));
    }

    #[test]
    fn residual_is_first_order() {
        let p = params(2);
        let lane1 = cloud(&[(0.0, 1.0, 0.3), (0.6, 0.6, 0.3), (1.0, 0.4, 0.4)]);
        let lane2 = cloud(&[(0.3, 0.9, 0.5), (2.0, 0.5, 0.5)]);
        let s = MeanFieldState::new(p, 0.0, vec![lane1, lane2], vec![]).unwrap();
        let phi = BumpTest {
            cx: 0.5,
            cv: 0.7,
            rx: 2.0,
            rv: 1.0,
        };
        let scheme = SchemeParams::new(5, 0.01);
        let r1 = step_residual(&s, &scheme, 1, 0.02, &phi).unwrap();
        let r2 = step_residual(&s, &scheme, 1, 0.01, &phi).unwrap();
        assert!(r2 < r1 / 1.5, "{r1} {r2}");
    }

    #[test]
    fn bump_gradient_matches_difference() {
        let phi = BumpTest {
            cx: 0.2,
            cv: 0.5,
            rx: 1.5,
            rv: 0.8,
        };
        let (x, v, e) = (0.4, 0.3, 1e-6);
        let (_, px, pv) = phi.eval(x, v);
        let fx = (phi.eval(x + e, v).0 - phi.eval(x - e, v).0) / (2.0 * e);
        let fv = (phi.eval(x, v + e).0 - phi.eval(x, v - e).0) / (2.0 * e);
        assert!((px - fx).abs() < 1e-8 && (pv - fv).abs() < 1e-8);
    }
}
