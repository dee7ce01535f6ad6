//! Desk-scale experiments: microscopic to mean-field convergence, stability
//! under perturbed initial data, scheme self-convergence and the weak-form
//! residual of the scheme.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result, ValidationErrors};
use crate::io::{fmt_f64, CsvTable};
use crate::kernels::{ControlSchedule, ModelParams};
use crate::meanfield::{simulate_sigma2, step_residual, AvSnapshot, AvState, BumpTest, MeanFieldState, SchemeParams};
use crate::measures::{discretize, Atom, DensitySpec, ParticleCloud};
use crate::micro::{simulate_sigma1_at, MicroState, VehicleState};
use crate::transport::gw11;

/// An autonomous vehicle shared by both systems.
#[derive(Debug, Clone, PartialEq)]
pub struct AvSpec {
    pub id: u64,
    pub lane: usize,
    pub y: f64,
    pub w: f64,
    pub timer0: f64,
    pub control: ControlSchedule,
}

/// Shared initial data for the experiments: one density per lane plus the
/// autonomous vehicles.
#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub params: ModelParams,
    pub densities: Vec<DensitySpec>,
    pub avs: Vec<AvSpec>,
    pub seed: u64,
    /// Atoms per lane of the mean-field initial clouds.
    pub n_ref: usize,
    pub scheme: SchemeParams,
    /// Step bound for the microscopic integrator.
    pub dt_max: f64,
}

impl ExperimentSetup {
    pub fn check(&self) -> ValidationErrors {
        let mut errs = self.params.check("params.");
        if self.densities.len() != self.params.m_lanes() {
            errs.push(
                "lanes",
                format!("expected {} lanes, got {}", self.params.m_lanes(), self.densities.len()),
            );
        }
        for (j, d) in self.densities.iter().enumerate() {
            errs.extend(d.check(&format!("lanes[{j}].density.")));
        }
        if self.n_ref == 0 {
            errs.push("n_ref", "must be >= 1");
        }
        if !(self.dt_max > 0.0) {
            errs.push("dt_max", "must be > 0");
        }
        errs.extend(self.scheme.check("scheme."));
        errs
    }

    fn clouds(&self, n: usize) -> Result<Vec<ParticleCloud>> {
        self.densities.iter().map(|d| discretize(d, n, self.seed)).collect()
    }

    fn av_states(&self, shift: f64) -> Vec<AvState> {
        self.avs
            .iter()
            .map(|a| AvState {
                id: a.id,
                lane: a.lane,
                y: a.y + shift,
                w: a.w,
                timer: a.timer0,
                control: a.control.clone(),
            })
            .collect()
    }

    /// Mean-field initial state from `n_ref` atoms per lane, with clouds and
    /// AV positions translated by `shift` along `x`.
    pub fn meanfield_state(&self, shift: f64) -> Result<MeanFieldState> {
        self.perturbed_state(Perturbation::Translate, shift)
    }

    /// Mean-field initial state with every atom and AV moved by `delta`
    /// along the coordinate selected by `kind`.
    pub fn perturbed_state(&self, kind: Perturbation, delta: f64) -> Result<MeanFieldState> {
        let (dx, dv) = match kind {
            Perturbation::Translate => (delta, 0.0),
            Perturbation::Velocity => (0.0, delta),
        };
        let lanes = self
            .clouds(self.n_ref)?
            .into_iter()
            .map(|c| {
                ParticleCloud::new(
                    c.atoms()
                        .iter()
                        .map(|a| Atom::new(a.x + dx, a.v + dv, a.mass))
                        .collect(),
                )
            })
            .collect::<Result<_>>()?;
        let avs = self
            .av_states(dx)
            .into_iter()
            .map(|a| AvState { w: a.w + dv, ..a })
            .collect();
        MeanFieldState::new(self.params.clone(), 0.0, lanes, avs)
    }

    /// Microscopic initial state with `n` humans per lane.
    pub fn micro_state(&self, n: usize) -> Result<MicroState> {
        let t1 = self.params.timer_limit();
        let taken: Vec<f64> = self.avs.iter().map(|a| a.timer0).collect();
        let mut timers = human_timers(n * self.densities.len(), t1, self.seed, &taken).into_iter();
        let first_id = self.avs.iter().map(|a| a.id + 1).max().unwrap_or(0);
        let mut vehicles: Vec<VehicleState> = self
            .avs
            .iter()
            .map(|a| VehicleState::autonomous(a.id, a.lane, a.y, a.w, a.timer0, a.control.clone()))
            .collect();
        let mut id = first_id;
        for (j, cloud) in self.clouds(n)?.iter().enumerate() {
            for a in cloud.atoms() {
                let timer = timers.next().expect("one timer per human");
                vehicles.push(VehicleState::human(id, j + 1, a.x, a.v, timer));
                id += 1;
            }
        }
        MicroState::new(self.params.clone(), 0.0, vehicles)
    }
}

/// How the initial data of a stability run is displaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    /// Shift positions of all atoms and AVs.
    #[default]
    Translate,
    /// Raise velocities of all atoms and AVs.
    Velocity,
}

/// `count` pairwise distinct timers in `[0, t1)` avoiding `taken`: a golden
/// ratio sequence with a seeded offset.
pub fn human_timers(count: usize, t1: f64, seed: u64, taken: &[f64]) -> Vec<f64> {
    let golden = 0.618_033_988_749_894_9;
    let offset: f64 = ChaCha8Rng::seed_from_u64(seed ^ 0x7469_6d65_7273).gen();
    let mut out: Vec<f64> = Vec::with_capacity(count);
    let mut i = 0u64;
    while out.len() < count {
        let t = (offset + i as f64 * golden).fract() * t1;
        i += 1;
        if t < t1 && !taken.contains(&t) && !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

/// Distance on one lane between two mean-field states: mean absolute AV
/// deviation plus W₁^{a,b} of the human clouds.
pub fn x_norm(
    avs_a: &[(f64, f64)],
    avs_b: &[(f64, f64)],
    mu_a: &ParticleCloud,
    mu_b: &ParticleCloud,
    a: f64,
    b: f64,
) -> Result<f64> {
    if avs_a.len() != avs_b.len() {
        return Err(Error::Domain(format!(
            "autonomous vehicle counts differ: {} vs {}",
            avs_a.len(),
            avs_b.len()
        )));
    }
    let mut av = 0.0;
    if !avs_a.is_empty() {
        av = avs_a
            .iter()
            .zip(avs_b)
            .map(|(p, q)| (p.0 - q.0).abs() + (p.1 - q.1).abs())
            .sum::<f64>()
            / avs_a.len() as f64;
    }
    Ok(av + gw11(mu_a, mu_b, a, b)?.0)
}

fn pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("SIMTRAFFIC_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
    {
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(|e| Error::Domain(format!("thread pool: {e}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceCell {
    pub t: f64,
    pub lane: usize,
    /// Distance for each entry of `ns`, in order.
    pub distances: Vec<f64>,
    /// Nonincreasing in `N` within the slack.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub ns: Vec<usize>,
    pub times: Vec<f64>,
    pub cells: Vec<ConvergenceCell>,
    pub slack: f64,
    pub required_fraction: f64,
}

impl ConvergenceReport {
    pub fn pass_fraction(&self) -> f64 {
        self.cells.iter().filter(|c| c.pass).count() as f64 / self.cells.len().max(1) as f64
    }

    pub fn passed(&self) -> bool {
        self.pass_fraction() >= self.required_fraction
    }

    pub fn to_csv(&self) -> String {
        let mut t = CsvTable::new(&["t", "lane", "N", "distance", "cell_pass"]);
        for c in &self.cells {
            for (n, d) in self.ns.iter().zip(&c.distances) {
                t.row([
                    fmt_f64(c.t),
                    c.lane.to_string(),
                    n.to_string(),
                    fmt_f64(*d),
                    c.pass.to_string(),
                ]);
            }
        }
        t.into_string()
    }
}

fn nonincreasing(values: &[f64], slack: f64) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] * (1.0 + slack))
}

/// Compare microscopic runs with `N` humans per lane against one mean-field
/// run, per sample time and lane.
pub fn convergence_experiment(setup: &ExperimentSetup, ns: &[usize], times: &[f64]) -> Result<ConvergenceReport> {
    setup.check().into_result()?;
    if ns.len() < 2 || ns.windows(2).any(|w| w[0] >= w[1]) || ns[0] == 0 {
        return Err(Error::Domain(
            "Ns must have at least two strictly increasing positive entries".into(),
        ));
    }
    check_times(times, setup.params.horizon_t)?;
    let (a, b) = (setup.params.gw_a, setup.params.gw_b);
    let m = setup.params.m_lanes();
    let pool = pool()?;

    let mean = setup.meanfield_state(0.0)?;
    let reference = simulate_sigma2(&mean, &setup.scheme, times)?;

    let per_n: Vec<Vec<Vec<f64>>> = pool.install(|| {
        ns.par_iter()
            .map(|&n| -> Result<Vec<Vec<f64>>> {
                let micro = setup.micro_state(n)?;
                let log = simulate_sigma1_at(&micro, setup.dt_max, times)?;
                log.samples
                    .par_iter()
                    .zip(&reference.samples)
                    .map(|(s1, s2)| {
                        (1..=m)
                            .map(|j| {
                                let mass = setup.densities[j - 1].mass() / n as f64;
                                Ok(gw11(&s1.human_cloud(j, mass), &s2.lanes[j - 1], a, b)?.0)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect::<Result<_>>()
    })?;

    let slack = 0.10;
    let mut cells = Vec::new();
    for (ti, &t) in times.iter().enumerate() {
        for j in 1..=m {
            let distances: Vec<f64> = per_n.iter().map(|d| d[ti][j - 1]).collect();
            let pass = nonincreasing(&distances, slack);
            cells.push(ConvergenceCell {
                t,
                lane: j,
                distances,
                pass,
            });
        }
    }
    Ok(ConvergenceReport {
        ns: ns.to_vec(),
        times: times.to_vec(),
        cells,
        slack,
        required_fraction: 0.8,
    })
}

fn check_times(times: &[f64], horizon: f64) -> Result<()> {
    if times.is_empty() || times.windows(2).any(|w| w[0] >= w[1]) || times[0] < 0.0 || times[times.len() - 1] > horizon
    {
        return Err(Error::Domain(format!(
            "sample times must be strictly increasing within [0, {horizon}]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub delta: f64,
    pub t: f64,
    pub deviation: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub deltas: Vec<f64>,
    pub times: Vec<f64>,
    pub rows: Vec<StabilityRow>,
    pub tolerance: f64,
}

impl StabilityReport {
    /// Largest over times of `max ratio / min ratio` across the deltas.
    pub fn worst_spread(&self) -> f64 {
        self.times
            .iter()
            .map(|&t| {
                let r: Vec<f64> = self.rows.iter().filter(|r| r.t == t).map(|r| r.ratio).collect();
                let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
                if hi == 0.0 && lo == 0.0 {
                    1.0
                } else {
                    hi / lo
                }
            })
            .fold(1.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst_spread() <= 1.0 + self.tolerance
    }

    /// Amplification constant per time: largest ratio over the deltas.
    pub fn amplification(&self, t: f64) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.t == t)
            .map(|r| r.ratio)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut t = CsvTable::new(&["delta", "t", "deviation", "ratio"]);
        for r in &self.rows {
            t.row([fmt_f64(r.delta), fmt_f64(r.t), fmt_f64(r.deviation), fmt_f64(r.ratio)]);
        }
        t.into_string()
    }
}

fn lane_avs(avs: &[AvSnapshot], lane: usize) -> Vec<(f64, f64)> {
    let mut v: Vec<(u64, f64, f64)> = avs
        .iter()
        .filter(|a| a.lane == lane)
        .map(|a| (a.id, a.y, a.w))
        .collect();
    v.sort_by_key(|a| a.0);
    v.into_iter().map(|a| (a.1, a.2)).collect()
}

/// Deviation summed over lanes between two mean-field samples.
pub fn sample_deviation(
    a_lanes: &[ParticleCloud],
    a_avs: &[AvSnapshot],
    b_lanes: &[ParticleCloud],
    b_avs: &[AvSnapshot],
    params: &ModelParams,
) -> Result<f64> {
    let mut total = 0.0;
    for j in 1..=a_lanes.len() {
        total += x_norm(
            &lane_avs(a_avs, j),
            &lane_avs(b_avs, j),
            &a_lanes[j - 1],
            &b_lanes[j - 1],
            params.gw_a,
            params.gw_b,
        )?;
    }
    Ok(total)
}

/// Baseline mean-field run against runs whose initial clouds and AV
/// positions are translated by each `delta`.
pub fn stability_experiment(setup: &ExperimentSetup, deltas: &[f64], times: &[f64]) -> Result<StabilityReport> {
    stability_experiment_with(setup, deltas, times, Perturbation::Translate)
}

/// As [`stability_experiment`] with a chosen kind of perturbation.
pub fn stability_experiment_with(
    setup: &ExperimentSetup,
    deltas: &[f64],
    times: &[f64],
    kind: Perturbation,
) -> Result<StabilityReport> {
    setup.check().into_result()?;
    if deltas.is_empty() || deltas.iter().any(|d| !(*d > 0.0)) || deltas.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Domain("deltas must be positive and strictly decreasing".into()));
    }
    check_times(times, setup.params.horizon_t)?;
    let pool = pool()?;
    let shifts: Vec<f64> = std::iter::once(0.0).chain(deltas.iter().copied()).collect();
    let runs = pool.install(|| {
        shifts
            .par_iter()
            .map(|&d| simulate_sigma2(&setup.perturbed_state(kind, d)?, &setup.scheme, times))
            .collect::<Result<Vec<_>>>()
    })?;
    let base = &runs[0];
    let mut rows = Vec::new();
    for (di, &delta) in deltas.iter().enumerate() {
        let run = &runs[di + 1];
        let devs: Vec<f64> = pool.install(|| {
            base.samples
                .par_iter()
                .zip(&run.samples)
                .map(|(s0, s1)| sample_deviation(&s0.lanes, &s0.avs, &s1.lanes, &s1.avs, &setup.params))
                .collect::<Result<_>>()
        })?;
        for (&t, deviation) in times.iter().zip(devs) {
            rows.push(StabilityRow {
                delta,
                t,
                deviation,
                ratio: deviation / delta,
            });
        }
    }
    Ok(StabilityReport {
        deltas: deltas.to_vec(),
        times: times.to_vec(),
        rows,
        tolerance: 0.25,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeGap {
    pub k_coarse: u32,
    pub k_fine: u32,
    /// Per-lane W₁^{a,b} at the horizon.
    pub lane_gaps: Vec<f64>,
}

impl SchemeGap {
    pub fn total(&self) -> f64 {
        self.lane_gaps.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeReport {
    pub gaps: Vec<SchemeGap>,
    pub ratio_range: (f64, f64),
}

impl SchemeReport {
    /// Successive ratios of total gaps.
    pub fn ratios(&self) -> Vec<f64> {
        self.gaps.windows(2).map(|w| w[0].total() / w[1].total()).collect()
    }

    pub fn passed(&self) -> bool {
        let (lo, hi) = self.ratio_range;
        let r = self.ratios();
        !r.is_empty() && r.iter().all(|&x| x >= lo && x <= hi)
    }

    pub fn to_csv(&self) -> String {
        let mut t = CsvTable::new(&["k_coarse", "k_fine", "lane", "gap"]);
        for g in &self.gaps {
            for (j, gap) in g.lane_gaps.iter().enumerate() {
                t.row([
                    g.k_coarse.to_string(),
                    g.k_fine.to_string(),
                    (j + 1).to_string(),
                    fmt_f64(*gap),
                ]);
            }
            t.row([
                g.k_coarse.to_string(),
                g.k_fine.to_string(),
                "all".to_string(),
                fmt_f64(g.total()),
            ]);
        }
        t.into_string()
    }
}

/// Mean-field runs at each `k` of `k_list`, compared at the horizon.
pub fn scheme_convergence(setup: &ExperimentSetup, k_list: &[u32]) -> Result<SchemeReport> {
    setup.check().into_result()?;
    if k_list.len() < 2 || k_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Domain(
            "k_list must be nondecreasing with at least two entries".into(),
        ));
    }
    let horizon = setup.params.horizon_t;
    let initial = setup.meanfield_state(0.0)?;
    let pool = pool()?;
    let finals: Vec<Vec<ParticleCloud>> = pool.install(|| {
        k_list
            .par_iter()
            .map(|&k| {
                let scheme = SchemeParams {
                    k_dyadic: k,
                    ..setup.scheme
                };
                Ok(simulate_sigma2(&initial, &scheme, &[horizon])?.final_state.lanes)
            })
            .collect::<Result<_>>()
    })?;
    let (a, b) = (setup.params.gw_a, setup.params.gw_b);
    let gaps = pool.install(|| {
        (0..k_list.len() - 1)
            .into_par_iter()
            .map(|i| {
                let lane_gaps = finals[i]
                    .iter()
                    .zip(&finals[i + 1])
                    .map(|(c, f)| Ok(gw11(c, f, a, b)?.0))
                    .collect::<Result<_>>()?;
                Ok(SchemeGap {
                    k_coarse: k_list[i],
                    k_fine: k_list[i + 1],
                    lane_gaps,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SchemeReport {
        gaps,
        ratio_range: (1.5, 3.0),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakFormReport {
    pub checkpoints: Vec<f64>,
    /// Step lengths, halving.
    pub steps: Vec<f64>,
    /// Max residual over checkpoints, lanes and test functions, per step.
    pub residuals: Vec<f64>,
}

impl WeakFormReport {
    pub fn ratios(&self) -> Vec<f64> {
        self.residuals.windows(2).map(|w| w[0] / w[1]).collect()
    }

    /// `residual / dt` per step: the empirical constant `C`.
    pub fn constants(&self) -> Vec<f64> {
        self.residuals.iter().zip(&self.steps).map(|(r, h)| r / h).collect()
    }
}

/// Weak-form residual of the scheme at states sampled from a reference run,
/// for step lengths `T / 2^k` and successive halvings.
pub fn weak_form_experiment(
    setup: &ExperimentSetup,
    checkpoints: &[f64],
    tests: &[BumpTest],
    halvings: usize,
) -> Result<WeakFormReport> {
    setup.check().into_result()?;
    check_times(checkpoints, setup.params.horizon_t)?;
    let initial = setup.meanfield_state(0.0)?;
    let run = simulate_sigma2(&initial, &setup.scheme, checkpoints)?;
    let dt = setup.scheme.dt(setup.params.horizon_t);
    let steps: Vec<f64> = (0..=halvings).map(|i| dt / 2f64.powi(i as i32)).collect();
    let m = setup.params.m_lanes();
    let mut states = Vec::new();
    for s in &run.samples {
        let avs = s
            .avs
            .iter()
            .zip(&initial.avs)
            .map(|(snap, av)| AvState {
                lane: snap.lane,
                y: snap.y,
                w: snap.w,
                ..av.clone()
            })
            .collect();
        states.push(MeanFieldState::new(setup.params.clone(), s.t, s.lanes.clone(), avs)?);
    }
    let pool = pool()?;
    let residuals = pool.install(|| {
        steps
            .par_iter()
            .map(|&h| {
                let mut worst: f64 = 0.0;
                for state in &states {
                    for j in 1..=m {
                        for phi in tests {
                            worst = worst.max(step_residual(state, &setup.scheme, j, h, phi)?);
                        }
                    }
                }
                Ok(worst)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(WeakFormReport {
        checkpoints: checkpoints.to_vec(),
        steps,
        residuals,
    })
}
