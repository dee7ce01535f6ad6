//! The finite-dimensional hybrid system: autonomous and human vehicles on
//! `m` lanes following the convolution Bando/follow-the-leader dynamics,
//! with lane changes evaluated only when a vehicle's timer expires.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationErrors};
use crate::kernels::{ControlSchedule, GrowthBound, Kernels, ModelParams};
use crate::measures::{conv_accel, Atom, LaneField, ParticleCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Autonomous,
    Human,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: u64,
    pub class: VehicleClass,
    /// Lane index in `1..=m`.
    pub lane: usize,
    pub x: f64,
    pub v: f64,
    /// Time since the last lane-change evaluation, in `[0, T1)`.
    pub timer: f64,
    /// Present exactly for autonomous vehicles.
    pub control: Option<ControlSchedule>,
}

impl VehicleState {
    pub fn human(id: u64, lane: usize, x: f64, v: f64, timer: f64) -> Self {
        Self {
            id,
            class: VehicleClass::Human,
            lane,
            x,
            v,
            timer,
            control: None,
        }
    }

    pub fn autonomous(id: u64, lane: usize, x: f64, v: f64, timer: f64, control: ControlSchedule) -> Self {
        Self {
            id,
            class: VehicleClass::Autonomous,
            lane,
            x,
            v,
            timer,
            control: Some(control),
        }
    }

    pub fn control_at(&self, t: f64) -> f64 {
        self.control.as_ref().map_or(0.0, |c| c.value_at(t))
    }
}

/// Lane-change outcome at a timer expiry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneDecision {
    Stay,
    /// To lane `j - 1`.
    Down,
    /// To lane `j + 1`.
    Up,
}

impl LaneDecision {
    pub fn target(self, lane: usize) -> usize {
        match self {
            LaneDecision::Stay => lane,
            LaneDecision::Down => lane - 1,
            LaneDecision::Up => lane + 1,
        }
    }
}

/// Expected accelerations used by the safety and incentive tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateAccels {
    /// Current acceleration on the own lane.
    pub a_now: f64,
    /// Acceleration the candidate would feel on the target lane.
    pub a_self: f64,
    /// Acceleration of the new follower after insertion; `+inf` without one.
    pub a_follower: f64,
}

#[derive(Debug, Clone)]
pub struct MicroState {
    pub time: f64,
    pub vehicles: Vec<VehicleState>,
    params: ModelParams,
    kernels: Kernels,
}

impl MicroState {
    /// Build and validate a hybrid state.
    pub fn new(params: ModelParams, time: f64, vehicles: Vec<VehicleState>) -> Result<Self> {
        params.validate()?;
        let kernels = Kernels::new(&params);
        let state = Self {
            time,
            vehicles,
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

    /// All invariant violations, with `vehicles[i].field` paths.
    pub fn check(&self) -> ValidationErrors {
        let mut errs = ValidationErrors::default();
        let m = self.params.m_lanes();
        let t1 = self.params.timer_limit();
        for (i, veh) in self.vehicles.iter().enumerate() {
            let p = format!("vehicles[{i}].");
            if !(1..=m).contains(&veh.lane) {
                errs.push(format!("{p}lane"), format!("lane {} outside 1..={m}", veh.lane));
            }
            if !veh.x.is_finite() {
                errs.push(format!("{p}x"), "must be finite");
            }
            if !(veh.v.is_finite() && veh.v >= 0.0) {
                errs.push(format!("{p}v"), format!("must be finite and >= 0, got {}", veh.v));
            }
            if !(veh.timer >= 0.0 && veh.timer < t1) {
                errs.push(format!("{p}timer0"), format!("{} outside [0, T1 = {t1})", veh.timer));
            }
            match (veh.class, &veh.control) {
                (VehicleClass::Autonomous, None) => {
                    errs.push(format!("{p}control"), "autonomous vehicle needs a control")
                }
                (VehicleClass::Human, Some(_)) => errs.push(format!("{p}control"), "human vehicles carry no control"),
                (VehicleClass::Autonomous, Some(c)) => errs.extend(c.check(&format!("{p}control."), self.params.u_max)),
                _ => {}
            }
            for (k, other) in self.vehicles.iter().enumerate().take(i) {
                if other.id == veh.id {
                    errs.push(format!("{p}id"), format!("duplicate id {}", veh.id));
                }
                if other.timer == veh.timer {
                    errs.push(
                        format!("{p}timer0"),
                        format!("vehicles {} and {} share initial timer {}", other.id, veh.id, veh.timer),
                    );
                }
                if other.lane == veh.lane && other.x == veh.x {
                    errs.push(
                        format!("{p}x"),
                        format!(
                            "vehicles {} and {} (index {k}) share lane {} and position {}",
                            other.id, veh.id, veh.lane, veh.x
                        ),
                    );
                }
            }
        }
        errs
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.vehicles.iter().position(|v| v.id == id)
    }

    fn counts(&self, lane: usize) -> (usize, usize) {
        let mut humans = 0;
        let mut avs = 0;
        for v in self.vehicles.iter().filter(|v| v.lane == lane) {
            match v.class {
                VehicleClass::Human => humans += 1,
                VehicleClass::Autonomous => avs += 1,
            }
        }
        (humans, avs)
    }

    /// Sup over vehicles of the Euclidean `(x, v)` norm.
    pub fn norm(&self) -> f64 {
        self.vehicles.iter().map(|v| v.x.hypot(v.v)).fold(0.0, f64::max)
    }
}

/// Human cloud (masses `1/N_j`) and autonomous cloud (masses `1/M_j`) of a lane.
pub fn empirical_measures(state: &MicroState, lane: usize) -> (ParticleCloud, ParticleCloud) {
    let (n, m) = state.counts(lane);
    let mut mu = Vec::with_capacity(n);
    let mut nu = Vec::with_capacity(m);
    for v in state.vehicles.iter().filter(|v| v.lane == lane) {
        match v.class {
            VehicleClass::Human => mu.push(Atom::new(v.x, v.v, 1.0 / n as f64)),
            VehicleClass::Autonomous => nu.push(Atom::new(v.x, v.v, 1.0 / m as f64)),
        }
    }
    (
        ParticleCloud::from_atoms_unchecked(mu),
        ParticleCloud::from_atoms_unchecked(nu),
    )
}

/// Per-vehicle `(dx, dv, dtimer)` at time `t`, with the velocity floor.
pub fn rhs_micro(state: &MicroState, t: f64) -> Vec<(f64, f64, f64)> {
    let lanes: Vec<(ParticleCloud, ParticleCloud)> = (1..=state.params.m_lanes())
        .map(|j| empirical_measures(state, j))
        .collect();
    state
        .vehicles
        .iter()
        .map(|veh| {
            let (mu, nu) = &lanes[veh.lane - 1];
            let mut dv = conv_accel(&state.kernels, mu, nu, (veh.x, veh.v.max(0.0))).unwrap_or(0.0) + veh.control_at(t);
            if veh.v <= 0.0 && dv < 0.0 {
                dv = 0.0;
            }
            (veh.v, dv, 1.0)
        })
        .collect()
}

/// Earliest timer expiry `(time, vehicle id)`.
pub fn next_event_time(state: &MicroState) -> Option<(f64, u64)> {
    let t1 = state.params.timer_limit();
    state
        .vehicles
        .iter()
        .map(|v| (state.time + (t1 - v.timer), v.id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
}

/// Expected accelerations for vehicle `idx` moving to `target`.
pub fn candidate_accels(state: &MicroState, idx: usize, target: usize) -> Result<CandidateAccels> {
    let veh = state
        .vehicles
        .get(idx)
        .ok_or_else(|| Error::Domain(format!("no vehicle at index {idx}")))?;
    let m = state.params.m_lanes();
    if !(target >= 1 && target <= m && (target + 1 == veh.lane || target == veh.lane + 1)) {
        return Err(Error::Domain(format!(
            "lane {target} is not adjacent to lane {} (m = {m})",
            veh.lane
        )));
    }
    let k = &state.kernels;
    let t = state.time;
    let u = veh.control_at(t);
    let (mu_own, nu_own) = empirical_measures(state, veh.lane);
    let (mu_tgt, nu_tgt) = empirical_measures(state, target);
    let a_now = conv_accel(k, &mu_own, &nu_own, (veh.x, veh.v))? + u;
    let a_self = conv_accel(k, &mu_tgt, &nu_tgt, (veh.x, veh.v))? + u;

    let follower = state
        .vehicles
        .iter()
        .filter(|o| o.lane == target && o.x < veh.x)
        .max_by(|a, b| a.x.total_cmp(&b.x));
    let a_follower = match follower {
        None => f64::INFINITY,
        Some(f) => {
            let (n_h, n_a) = state.counts(target);
            let insert = |cloud: &ParticleCloud, count: usize| {
                let w = 1.0 / (count + 1) as f64;
                let mut atoms: Vec<Atom> = cloud.atoms().iter().map(|a| Atom::new(a.x, a.v, w)).collect();
                atoms.push(Atom::new(veh.x, veh.v, w));
                ParticleCloud::from_atoms_unchecked(atoms)
            };
            let (mu_ins, nu_ins) = match veh.class {
                VehicleClass::Autonomous => (mu_tgt.clone(), insert(&nu_tgt, n_a)),
                VehicleClass::Human => (insert(&mu_tgt, n_h), nu_tgt.clone()),
            };
            conv_accel(k, &mu_ins, &nu_ins, (f.x, f.v))? + f.control_at(t)
        }
    };
    Ok(CandidateAccels {
        a_now,
        a_self,
        a_follower,
    })
}

/// Safety-and-incentive decision for vehicle `idx`; ties go to `j + 1`,
/// otherwise the larger expected acceleration wins.
pub fn lane_change_decision(state: &MicroState, idx: usize) -> Result<LaneDecision> {
    let veh = &state.vehicles[idx];
    let delta = state.params.delta_lc;
    let m = state.params.m_lanes();
    let qualifies = |target: usize| -> Result<Option<f64>> {
        let c = candidate_accels(state, idx, target)?;
        let safe = c.a_self >= -delta && c.a_follower >= -delta;
        let incentive = c.a_self >= c.a_now + delta;
        Ok((safe && incentive).then_some(c.a_self))
    };
    let down = if veh.lane > 1 { qualifies(veh.lane - 1)? } else { None };
    let up = if veh.lane < m { qualifies(veh.lane + 1)? } else { None };
    Ok(pick_side(down, up))
}

/// Shared resolution rule: `j + 1` on ties, else the larger gain.
pub(crate) fn pick_side(down: Option<f64>, up: Option<f64>) -> LaneDecision {
    match (down, up) {
        (None, None) => LaneDecision::Stay,
        (Some(_), None) => LaneDecision::Down,
        (None, Some(_)) => LaneDecision::Up,
        (Some(d), Some(u)) => {
            if d > u {
                LaneDecision::Down
            } else {
                LaneDecision::Up
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventOutcome {
    pub from: usize,
    pub to: usize,
    /// A requested change was cancelled because the landing spot is taken.
    pub cancelled: bool,
}

/// Apply the jump at vehicle `idx`'s timer expiry: timer reset, lane update,
/// `(x, v)` untouched.
pub fn apply_event(state: &mut MicroState, idx: usize, decision: LaneDecision) -> Result<EventOutcome> {
    let (lane, x) = (state.vehicles[idx].lane, state.vehicles[idx].x);
    let target = decision.target(lane);
    let occupied = target != lane
        && state
            .vehicles
            .iter()
            .enumerate()
            .any(|(k, o)| k != idx && o.lane == target && o.x == x);
    let veh = &mut state.vehicles[idx];
    veh.timer = 0.0;
    if !occupied {
        veh.lane = target;
    }
    Ok(EventOutcome {
        from: lane,
        to: if occupied { lane } else { target },
        cancelled: occupied,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleSnapshot {
    pub id: u64,
    pub class: VehicleClass,
    pub lane: usize,
    pub x: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroSample {
    pub t: f64,
    pub vehicles: Vec<VehicleSnapshot>,
}

impl MicroSample {
    fn of(state: &MicroState) -> Self {
        Self {
            t: state.time,
            vehicles: state
                .vehicles
                .iter()
                .map(|v| VehicleSnapshot {
                    id: v.id,
                    class: v.class,
                    lane: v.lane,
                    x: v.x,
                    v: v.v,
                })
                .collect(),
        }
    }

    /// Human atoms on `lane`, each carrying `mass`.
    pub fn human_cloud(&self, lane: usize, mass: f64) -> ParticleCloud {
        ParticleCloud::from_atoms_unchecked(
            self.vehicles
                .iter()
                .filter(|v| v.lane == lane && v.class == VehicleClass::Human)
                .map(|v| Atom::new(v.x, v.v, mass))
                .collect(),
        )
    }
}

/// A timer expiry; `from == to` for vehicles that stayed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneEvent {
    pub t: f64,
    pub id: u64,
    pub from: usize,
    pub to: usize,
    /// `(x, v)` just before and just after the jump.
    pub before: (f64, f64),
    pub after: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventWarning {
    pub t: f64,
    pub id: u64,
    pub target: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct TrajectoryLog {
    pub samples: Vec<MicroSample>,
    pub events: Vec<LaneEvent>,
    pub warnings: Vec<EventWarning>,
    pub final_state: MicroState,
    /// Growth constant used for the runtime a-priori bound.
    pub growth: GrowthBound,
}

/// Sample times `0, dt, 2dt, ...` up to the horizon, always including it.
pub fn uniform_times(t0: f64, horizon: f64, dt: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let n = ((horizon - t0) / dt + 1e-9).floor() as usize;
    for k in 0..=n {
        out.push(t0 + k as f64 * dt);
    }
    if horizon - out.last().copied().unwrap_or(t0) > 1e-12 * horizon.abs().max(1.0) {
        out.push(horizon);
    }
    out
}

/// Run to the horizon, sampling every `sample_dt`.
pub fn simulate_sigma1(initial: &MicroState, dt_max: f64, sample_dt: f64) -> Result<TrajectoryLog> {
    if !(sample_dt > 0.0) {
        return Err(Error::Domain("sample_dt must be > 0".into()));
    }
    let times = uniform_times(initial.time, initial.params.horizon_t, sample_dt);
    simulate_sigma1_at(initial, dt_max, &times)
}

/// Run to the horizon, sampling at the given times (clipped to the run).
pub fn simulate_sigma1_at(initial: &MicroState, dt_max: f64, sample_times: &[f64]) -> Result<TrajectoryLog> {
    if !(dt_max > 0.0) {
        return Err(Error::Domain("dt_max must be > 0".into()));
    }
    initial.check().into_result()?;
    let mut state = initial.clone();
    let params = state.params.clone();
    let horizon = params.horizon_t;
    let t0 = state.time;
    let t1 = params.timer_limit();
    let growth = GrowthBound::new(&state.kernels, 2.0, params.u_max);
    let norm0 = state.norm();

    // Timer expiries are known in closed form: t0 + n T1 - tau0.
    let mut events: Vec<(f64, usize)> = Vec::new();
    for (i, v) in state.vehicles.iter().enumerate() {
        let mut n = 1u64;
        loop {
            let te = t0 + n as f64 * t1 - v.timer;
            if te > horizon {
                break;
            }
            events.push((te, i));
            n += 1;
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(w) = events.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Invariant {
            t: w[0].0,
            what: "two timers expire at the same instant".into(),
        });
    }

    let mut stops: Vec<f64> = events.iter().map(|e| e.0).collect();
    stops.extend(sample_times.iter().copied().filter(|&s| s > t0 && s <= horizon));
    for v in &state.vehicles {
        if let Some(c) = &v.control {
            stops.extend(c.breakpoints_within(t0, horizon));
        }
    }
    stops.push(horizon);
    stops.sort_by(f64::total_cmp);
    stops.dedup();

    let mut samples = Vec::new();
    let mut sample_iter = sample_times
        .iter()
        .copied()
        .filter(|&s| s >= t0 && s <= horizon)
        .peekable();
    if sample_iter.peek() == Some(&t0) {
        samples.push(MicroSample::of(&state));
        sample_iter.next();
    }

    let mut last_reset: Vec<f64> = state.vehicles.iter().map(|v| t0 - v.timer).collect();
    let mut log_events = Vec::new();
    let mut warnings = Vec::new();
    let mut next_event = 0;
    let mut integrator = Rk4Micro::new(&state);

    for &stop in &stops {
        let span = stop - state.time;
        if span > 0.0 {
            let n = (span / dt_max).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for s in 0..n {
                let t_start = state.time;
                let t_end = if s + 1 == n { stop } else { t_start + h };
                integrator.step(&mut state, t_start, t_end - t_start)?;
                state.time = t_end;
                for (veh, lr) in state.vehicles.iter_mut().zip(&last_reset) {
                    veh.timer = t_end - lr;
                }
            }
        }
        state.time = stop;

        while next_event < events.len() && events[next_event].0 == stop {
            let idx = events[next_event].1;
            let timer = state.vehicles[idx].timer;
            if (timer - t1).abs() > 1e-9 * t1.max(1.0) {
                return Err(Error::Invariant {
                    t: stop,
                    what: format!("timer {timer} of vehicle {} not at limit {t1}", state.vehicles[idx].id),
                });
            }
            let before = (state.vehicles[idx].x, state.vehicles[idx].v);
            let decision = lane_change_decision(&state, idx)?;
            let outcome = apply_event(&mut state, idx, decision)?;
            last_reset[idx] = stop;
            let id = state.vehicles[idx].id;
            if outcome.cancelled {
                warnings.push(EventWarning {
                    t: stop,
                    id,
                    target: decision.target(outcome.from),
                    reason: "landing position occupied; change cancelled".into(),
                });
            }
            log_events.push(LaneEvent {
                t: stop,
                id,
                from: outcome.from,
                to: outcome.to,
                before,
                after: (state.vehicles[idx].x, state.vehicles[idx].v),
            });
            next_event += 1;
        }

        while sample_iter.peek().is_some_and(|&s| s <= stop) {
            sample_iter.next();
            let norm = state.norm();
            let bound = growth.radius(norm0, stop - t0);
            if norm > bound * (1.0 + 1e-12) {
                return Err(Error::Invariant {
                    t: stop,
                    what: format!("state norm {norm} exceeds a-priori bound {bound}"),
                });
            }
            samples.push(MicroSample::of(&state));
        }
    }

    Ok(TrajectoryLog {
        samples,
        events: log_events,
        warnings,
        final_state: state,
        growth,
    })
}

/// Fixed-step RK4 on the joint `(x, v)` vector with fields rebuilt at every
/// stage. Controls hold their value on the open step interval.
struct Rk4Micro {
    lanes: Vec<usize>,
    human_weight: Vec<f64>,
    av_weight: Vec<f64>,
    is_av: Vec<bool>,
}

impl Rk4Micro {
    fn new(state: &MicroState) -> Self {
        Self {
            lanes: Vec::new(),
            human_weight: vec![0.0; state.params.m_lanes() + 1],
            av_weight: vec![0.0; state.params.m_lanes() + 1],
            is_av: state
                .vehicles
                .iter()
                .map(|v| v.class == VehicleClass::Autonomous)
                .collect(),
        }
    }

    fn accelerations(&self, kernels: &Kernels, xs: &[f64], vs: &[f64], u: &[f64], out: &mut [f64]) {
        let m = self.human_weight.len() - 1;
        let mut buckets: Vec<Vec<Atom>> = vec![Vec::new(); m + 1];
        for i in 0..xs.len() {
            let lane = self.lanes[i];
            let w = if self.is_av[i] {
                self.av_weight[lane]
            } else {
                self.human_weight[lane]
            };
            buckets[lane].push(Atom::new(xs[i], vs[i].max(0.0), w));
        }
        let fields: Vec<LaneField> = buckets.into_iter().map(|b| LaneField::from_atoms(kernels, b)).collect();
        for i in 0..xs.len() {
            let mut a = fields[self.lanes[i]].accel(xs[i], vs[i]) + u[i];
            if vs[i] <= 0.0 && a < 0.0 {
                a = 0.0;
            }
            out[i] = a;
        }
    }

    fn step(&mut self, state: &mut MicroState, t: f64, h: f64) -> Result<()> {
        let n = state.vehicles.len();
        let m = state.params.m_lanes();
        self.lanes = state.vehicles.iter().map(|v| v.lane).collect();
        let mut nh = vec![0usize; m + 1];
        let mut na = vec![0usize; m + 1];
        for (lane, av) in self.lanes.iter().zip(&self.is_av) {
            if *av {
                na[*lane] += 1;
            } else {
                nh[*lane] += 1;
            }
        }
        for j in 1..=m {
            self.human_weight[j] = if nh[j] > 0 { 1.0 / nh[j] as f64 } else { 0.0 };
            self.av_weight[j] = if na[j] > 0 { 1.0 / na[j] as f64 } else { 0.0 };
        }
        let u: Vec<f64> = state.vehicles.iter().map(|v| v.control_at(t)).collect();
        let x0: Vec<f64> = state.vehicles.iter().map(|v| v.x).collect();
        let v0: Vec<f64> = state.vehicles.iter().map(|v| v.v).collect();
        let kernels = state.kernels.clone();

        let mut a1 = vec![0.0; n];
        let mut a2 = vec![0.0; n];
        let mut a3 = vec![0.0; n];
        let mut a4 = vec![0.0; n];
        self.accelerations(&kernels, &x0, &v0, &u, &mut a1);
        let xs2: Vec<f64> = (0..n).map(|i| x0[i] + 0.5 * h * v0[i]).collect();
        let vs2: Vec<f64> = (0..n).map(|i| v0[i] + 0.5 * h * a1[i]).collect();
        self.accelerations(&kernels, &xs2, &vs2, &u, &mut a2);
        let xs3: Vec<f64> = (0..n).map(|i| x0[i] + 0.5 * h * vs2[i]).collect();
        let vs3: Vec<f64> = (0..n).map(|i| v0[i] + 0.5 * h * a2[i]).collect();
        self.accelerations(&kernels, &xs3, &vs3, &u, &mut a3);
        let xs4: Vec<f64> = (0..n).map(|i| x0[i] + h * vs3[i]).collect();
        let vs4: Vec<f64> = (0..n).map(|i| v0[i] + h * a3[i]).collect();
        self.accelerations(&kernels, &xs4, &vs4, &u, &mut a4);

        for (i, veh) in state.vehicles.iter_mut().enumerate() {
            let x = x0[i] + h / 6.0 * (v0[i] + 2.0 * vs2[i] + 2.0 * vs3[i] + vs4[i]);
            let v = v0[i] + h / 6.0 * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i]);
            if !(x.is_finite() && v.is_finite()) {
                return Err(Error::NonFinite {
                    t: t + h,
                    what: format!("vehicle {} state ({x:e}, {v:e})", veh.id),
                });
            }
            veh.x = x;
            veh.v = v.max(0.0);
        }
        Ok(())
    }
}
