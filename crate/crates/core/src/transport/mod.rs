//! Exact W₁ and generalized Wasserstein W₁^{a,b} distances between
//! particle clouds, solved as minimum-cost flows, plus a brute-force grid
//! oracle for tiny instances.

mod brute;
mod flow;

pub use brute::gw_brute;

use crate::error::{Error, Result};
use crate::measures::{Atom, ParticleCloud};
use crate::numerics::neumaier_sum;
use flow::Transportation;

/// Euclidean ground metric on `(x, v)` with an optional velocity weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundMetric {
    pub velocity_weight: f64,
}

impl Default for GroundMetric {
    fn default() -> Self {
        Self { velocity_weight: 1.0 }
    }
}

impl GroundMetric {
    #[inline]
    pub fn dist(&self, a: &Atom, b: &Atom) -> f64 {
        (a.x - b.x).hypot(self.velocity_weight * (a.v - b.v))
    }
}

/// Optimal (partial) transport plan between two clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `(source index, target index, mass)`, sorted by index pair.
    pub matches: Vec<(usize, usize, f64)>,
    /// Mass removed from each source atom.
    pub destroyed: Vec<f64>,
    /// Mass supplied to each target atom.
    pub created: Vec<f64>,
    pub cost: f64,
}

impl TransportPlan {
    /// `a (destroyed + created) + b sum(mass * distance)`, from the plan alone.
    pub fn evaluate(&self, src: &ParticleCloud, dst: &ParticleCloud, a: f64, b: f64, metric: GroundMetric) -> f64 {
        let moved = neumaier_sum(
            self.matches
                .iter()
                .map(|&(i, j, m)| m * metric.dist(&src.atoms()[i], &dst.atoms()[j])),
        );
        let unbalanced = neumaier_sum(self.destroyed.iter().chain(&self.created).copied());
        a * unbalanced + b * moved
    }

    /// Largest violation of per-atom flow conservation.
    pub fn marginal_error(&self, src: &ParticleCloud, dst: &ParticleCloud) -> f64 {
        let mut out = self.destroyed.clone();
        let mut inn = self.created.clone();
        for &(i, j, m) in &self.matches {
            out[i] += m;
            inn[j] += m;
        }
        let e1 = out
            .iter()
            .zip(src.atoms())
            .map(|(o, a)| (o - a.mass).abs())
            .fold(0.0, f64::max);
        let e2 = inn
            .iter()
            .zip(dst.atoms())
            .map(|(o, a)| (o - a.mass).abs())
            .fold(0.0, f64::max);
        e1.max(e2)
    }

    /// Rows `src,dst,mass`, with `-1` standing for the creation/destruction sink.
    pub fn to_csv(&self) -> String {
        use crate::io::{fmt_f64, CsvTable};
        let mut t = CsvTable::new(&["src", "dst", "mass"]);
        for &(i, j, m) in &self.matches {
            t.row([i.to_string(), j.to_string(), fmt_f64(m)]);
        }
        for (i, &m) in self.destroyed.iter().enumerate() {
            if m > 0.0 {
                t.row([i.to_string(), "-1".to_string(), fmt_f64(m)]);
            }
        }
        for (j, &m) in self.created.iter().enumerate() {
            if m > 0.0 {
                t.row(["-1".to_string(), j.to_string(), fmt_f64(m)]);
            }
        }
        t.into_string()
    }
}

/// Classical W₁ between clouds of equal mass (1e-9 relative).
pub fn w1(mu_a: &ParticleCloud, mu_b: &ParticleCloud) -> Result<(f64, TransportPlan)> {
    w1_with(mu_a, mu_b, GroundMetric::default())
}

pub fn w1_with(mu_a: &ParticleCloud, mu_b: &ParticleCloud, metric: GroundMetric) -> Result<(f64, TransportPlan)> {
    let (ma, mb) = (mu_a.total_mass(), mu_b.total_mass());
    if mu_a.is_empty() || mu_b.is_empty() {
        return Err(Error::Domain("w1 needs two nonempty clouds".into()));
    }
    if (ma - mb).abs() > 1e-9 * ma.max(mb) {
        return Err(Error::MassMismatch { mass_a: ma, mass_b: mb });
    }
    let problem = Transportation {
        supply: mu_a.atoms().iter().map(|a| a.mass).collect(),
        demand: mu_b.atoms().iter().map(|a| a.mass).collect(),
        arcs: mu_a
            .atoms()
            .iter()
            .map(|a| {
                mu_b.atoms()
                    .iter()
                    .enumerate()
                    .map(|(j, b)| (j, metric.dist(a, b)))
                    .collect()
            })
            .collect(),
    };
    let flows = problem.solve()?;
    let mut plan = TransportPlan {
        matches: flows,
        destroyed: vec![0.0; mu_a.len()],
        created: vec![0.0; mu_b.len()],
        cost: 0.0,
    };
    plan.cost = plan.evaluate(mu_a, mu_b, 1.0, 1.0, metric);
    Ok((plan.cost, plan))
}

/// Generalized Wasserstein distance W₁^{a,b}.
pub fn gw11(mu_a: &ParticleCloud, mu_b: &ParticleCloud, a: f64, b: f64) -> Result<(f64, TransportPlan)> {
    gw11_with(mu_a, mu_b, a, b, GroundMetric::default())
}

/// Generalized Wasserstein distance W₁^{a,b} under `metric`.
///
/// Solved as a balanced transportation problem: an extra row supplies
/// `|mu_b|` (creation, cost `a` to every target atom) and an extra column
/// absorbs `|mu_a|` (destruction, cost `a` from every source atom), with a
/// free arc between the two. Transport arcs with `b d >= 2a` are omitted;
/// destroying and recreating that mass is never more expensive.
pub fn gw11_with(
    mu_a: &ParticleCloud,
    mu_b: &ParticleCloud,
    a: f64,
    b: f64,
    metric: GroundMetric,
) -> Result<(f64, TransportPlan)> {
    if !(a > 0.0 && a.is_finite()) || !(b > 0.0 && b.is_finite()) {
        return Err(Error::Domain(format!(
            "gw11 weights must be positive, got a = {a}, b = {b}"
        )));
    }
    let (n, m) = (mu_a.len(), mu_b.len());
    let (ma, mb) = (mu_a.total_mass(), mu_b.total_mass());
    let mut plan = TransportPlan {
        matches: Vec::new(),
        destroyed: mu_a.atoms().iter().map(|x| x.mass).collect(),
        created: mu_b.atoms().iter().map(|x| x.mass).collect(),
        cost: 0.0,
    };
    if n == 0 || m == 0 || ma == 0.0 || mb == 0.0 {
        plan.cost = plan.evaluate(mu_a, mu_b, a, b, metric);
        return Ok((plan.cost, plan));
    }

    let cutoff = 2.0 * a;
    let mut arcs: Vec<Vec<(usize, f64)>> = mu_a
        .atoms()
        .iter()
        .map(|x| {
            let mut row: Vec<(usize, f64)> = mu_b
                .atoms()
                .iter()
                .enumerate()
                .filter_map(|(j, y)| {
                    let c = b * metric.dist(x, y);
                    (c < cutoff).then_some((j, c))
                })
                .collect();
            row.push((m, a));
            row
        })
        .collect();
    let mut dummy: Vec<(usize, f64)> = (0..m).map(|j| (j, a)).collect();
    dummy.push((m, 0.0));
    arcs.push(dummy);

    let mut supply: Vec<f64> = mu_a.atoms().iter().map(|x| x.mass).collect();
    supply.push(mb);
    let mut demand: Vec<f64> = mu_b.atoms().iter().map(|x| x.mass).collect();
    demand.push(ma);

    let flows = Transportation { supply, demand, arcs }.solve()?;
    plan.destroyed = vec![0.0; n];
    plan.created = vec![0.0; m];
    for (i, j, f) in flows {
        match (i < n, j < m) {
            (true, true) => plan.matches.push((i, j, f)),
            (true, false) => plan.destroyed[i] += f,
            (false, true) => plan.created[j] += f,
            (false, false) => {}
        }
    }
    plan.cost = plan.evaluate(mu_a, mu_b, a, b, metric);
    Ok((plan.cost, plan))
}

/// W₁^{1,1} distance value only.
pub fn gw11_distance(mu_a: &ParticleCloud, mu_b: &ParticleCloud) -> Result<f64> {
    gw11(mu_a, mu_b, 1.0, 1.0).map(|(d, _)| d)
}
