//! Weighted atomic measures on position–velocity space and the
//! convolution operators that turn them into acceleration fields.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result, ValidationErrors};
use crate::kernels::Kernels;
use crate::numerics::neumaier_sum;

/// One weighted point mass at `(x, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub x: f64,
    pub v: f64,
    pub mass: f64,
}

impl Atom {
    pub const fn new(x: f64, v: f64, mass: f64) -> Self {
        Self { x, v, mass }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.v)
    }
}

/// Finite weighted atomic measure with nonnegative masses and velocities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParticleCloud {
    atoms: Vec<Atom>,
}

impl ParticleCloud {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        for (i, a) in atoms.iter().enumerate() {
            if !(a.x.is_finite() && a.v.is_finite() && a.mass.is_finite()) {
                return Err(Error::Domain(format!("atom {i} has a non-finite component")));
            }
            if a.mass < 0.0 {
                return Err(Error::Domain(format!("atom {i} has negative mass {}", a.mass)));
            }
            if a.v < 0.0 {
                return Err(Error::Domain(format!("atom {i} has negative velocity {}", a.v)));
            }
        }
        Ok(Self { atoms })
    }

    pub(crate) fn from_atoms_unchecked(atoms: Vec<Atom>) -> Self {
        debug_assert!(atoms.iter().all(|a| a.mass >= 0.0 && a.v >= 0.0));
        Self { atoms }
    }

    pub fn empty() -> Self {
        Self { atoms: Vec::new() }
    }

    /// Single point mass.
    pub fn dirac(x: f64, v: f64, mass: f64) -> Result<Self> {
        Self::new(vec![Atom::new(x, v, mass)])
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn into_atoms(self) -> Vec<Atom> {
        self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        neumaier_sum(self.atoms.iter().map(|a| a.mass))
    }

    /// Radius of the smallest origin-centred ball containing the support.
    pub fn support_radius(&self) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.mass > 0.0)
            .map(Atom::norm)
            .fold(0.0, f64::max)
    }

    pub fn first_moment(&self) -> f64 {
        neumaier_sum(self.atoms.iter().map(|a| a.mass * a.norm()))
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::from_atoms_unchecked(self.atoms.iter().map(|a| Atom::new(a.x, a.v, a.mass * k)).collect())
    }

    /// Sum of two measures (atoms concatenated, not merged).
    pub fn plus(&self, other: &ParticleCloud) -> Self {
        let mut atoms = self.atoms.clone();
        atoms.extend_from_slice(&other.atoms);
        Self::from_atoms_unchecked(atoms)
    }

    pub fn push(&mut self, atom: Atom) -> Result<()> {
        if !(atom.mass >= 0.0 && atom.v >= 0.0 && atom.x.is_finite()) {
            return Err(Error::Domain(format!("invalid atom {atom:?}")));
        }
        self.atoms.push(atom);
        Ok(())
    }
}

/// Absolutely continuous initial density with bounded support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensitySpec {
    /// Uniform density on `[x_min, x_max] x [v_min, v_max]`.
    UniformBox {
        x_min: f64,
        x_max: f64,
        v_min: f64,
        v_max: f64,
        mass: f64,
    },
    /// Gaussian with covariance `cov`, truncated to `|z_i| <= radius` in
    /// whitened (Cholesky) coordinates.
    TruncatedGaussian {
        mean: [f64; 2],
        cov: [[f64; 2]; 2],
        radius: f64,
        mass: f64,
    },
}

impl DensitySpec {
    pub fn mass(&self) -> f64 {
        match self {
            DensitySpec::UniformBox { mass, .. } | DensitySpec::TruncatedGaussian { mass, .. } => *mass,
        }
    }

    fn cholesky(cov: &[[f64; 2]; 2]) -> Option<[f64; 3]> {
        let l11 = cov[0][0].sqrt();
        if !(l11 > 0.0) {
            return None;
        }
        let l21 = cov[1][0] / l11;
        let rest = cov[1][1] - l21 * l21;
        if !(rest > 0.0) {
            return None;
        }
        Some([l11, l21, rest.sqrt()])
    }

    pub fn check(&self, prefix: &str) -> ValidationErrors {
        let mut errs = ValidationErrors::default();
        if !(self.mass().is_finite() && self.mass() > 0.0) {
            errs.push(format!("{prefix}mass"), "must be finite and > 0");
        }
        match self {
            DensitySpec::UniformBox {
                x_min,
                x_max,
                v_min,
                v_max,
                ..
            } => {
                if !(x_min.is_finite() && x_max.is_finite() && x_min < x_max) {
                    errs.push(format!("{prefix}x_max"), "need finite x_min < x_max");
                }
                if !(v_min.is_finite() && v_max.is_finite() && v_min < v_max) {
                    errs.push(format!("{prefix}v_max"), "need finite v_min < v_max");
                }
                if !(*v_min >= 0.0) {
                    errs.push(format!("{prefix}v_min"), "velocities must be >= 0");
                }
            }
            DensitySpec::TruncatedGaussian { mean, cov, radius, .. } => {
                if !(radius.is_finite() && *radius > 0.0) {
                    errs.push(format!("{prefix}radius"), "must be finite and > 0");
                }
                if cov[0][1] != cov[1][0] {
                    errs.push(format!("{prefix}cov"), "must be symmetric");
                }
                match Self::cholesky(cov) {
                    None => errs.push(format!("{prefix}cov"), "must be positive definite"),
                    Some([_, l21, l22]) => {
                        let v_low = mean[1] - radius * (l21.abs() + l22);
                        if !(v_low >= 0.0) {
                            errs.push(
                                format!("{prefix}mean"),
                                format!("truncated support reaches negative velocity {v_low}"),
                            );
                        }
                    }
                }
            }
        }
        errs
    }

    /// Map a point of the unit square into the support.
    fn map_unit(&self, u: [f64; 2]) -> (f64, f64) {
        match self {
            DensitySpec::UniformBox {
                x_min,
                x_max,
                v_min,
                v_max,
                ..
            } => (x_min + u[0] * (x_max - x_min), v_min + u[1] * (v_max - v_min)),
            DensitySpec::TruncatedGaussian { mean, cov, radius, .. } => {
                let [l11, l21, l22] = Self::cholesky(cov).expect("validated covariance");
                let normal = Normal::new(0.0, 1.0).expect("standard normal");
                let lo = normal.cdf(-radius);
                let hi = normal.cdf(*radius);
                let z0 = normal.inverse_cdf(lo + u[0] * (hi - lo)).clamp(-radius, *radius);
                let z1 = normal.inverse_cdf(lo + u[1] * (hi - lo)).clamp(-radius, *radius);
                (mean[0] + l11 * z0, (mean[1] + l21 * z0 + l22 * z1).max(0.0))
            }
        }
    }
}

/// Additive-recurrence (R2) constants from the plastic number.
const PLASTIC: f64 = 1.324_717_957_244_746;

/// `n` equal-mass atoms from a seeded low-discrepancy sequence. The first
/// `n` atoms of `discretize(spec, 2n, seed)` coincide with those of
/// `discretize(spec, n, seed)` up to the mass split. Seed 0 leaves the
/// sequence unshifted, so its first point is the centre of the support.
pub fn discretize(spec: &DensitySpec, n: usize, seed: u64) -> Result<ParticleCloud> {
    if n == 0 {
        return Err(Error::Domain("discretize needs at least one atom".into()));
    }
    spec.check("density.").into_result()?;
    let shift = if seed == 0 {
        [0.0, 0.0]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [rng.gen::<f64>(), rng.gen::<f64>()]
    };
    let step = [1.0 / PLASTIC, 1.0 / (PLASTIC * PLASTIC)];
    let mass = spec.mass() / n as f64;
    let atoms = (0..n)
        .map(|i| {
            let u = [
                (0.5 + shift[0] + i as f64 * step[0]).fract(),
                (0.5 + shift[1] + i as f64 * step[1]).fract(),
            ];
            let (x, v) = spec.map_unit(u);
            Atom::new(x, v, mass)
        })
        .collect();
    ParticleCloud::new(atoms)
}

/// Mass-weighted convolution `sum_k m_k [H1(x - x_k, v) + H2(x - x_k, v - v_k)]`
/// over the atoms of `mu + nu`.
pub fn conv_accel(kernels: &Kernels, mu: &ParticleCloud, nu: &ParticleCloud, at: (f64, f64)) -> Result<f64> {
    let (x, v) = at;
    if !(v >= 0.0) {
        return Err(Error::Domain(format!("velocity must be >= 0, got {v}")));
    }
    let mut acc = 0.0;
    for a in mu.atoms().iter().chain(nu.atoms()) {
        acc += a.mass * (kernels.h1_unchecked(x - a.x, v) + kernels.kernel_h2(x - a.x, v - a.v));
    }
    Ok(acc)
}

/// Average acceleration field of a lane at one point; same quantity as
/// [`conv_accel`].
pub fn avg_accel_field(
    kernels: &Kernels,
    lane_mu: &ParticleCloud,
    lane_nu: &ParticleCloud,
    at: (f64, f64),
) -> Result<f64> {
    conv_accel(kernels, lane_mu, lane_nu, at)
}

/// Position-sorted index over the atoms of `mu + nu` for fast evaluation of
/// the convolution field: only atoms in `(x, x + eps0)` contribute.
#[derive(Debug, Clone)]
pub struct LaneField<'k> {
    kernels: &'k Kernels,
    atoms: Vec<Atom>,
}

impl<'k> LaneField<'k> {
    pub fn new(kernels: &'k Kernels, clouds: &[&ParticleCloud]) -> Self {
        let atoms = clouds.iter().flat_map(|c| c.atoms().iter().copied()).collect();
        Self::from_atoms(kernels, atoms)
    }

    pub fn from_atoms(kernels: &'k Kernels, mut atoms: Vec<Atom>) -> Self {
        atoms.retain(|a| a.mass > 0.0);
        atoms.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.v.total_cmp(&b.v)));
        Self { kernels, atoms }
    }

    pub fn empty(kernels: &'k Kernels) -> Self {
        Self {
            kernels,
            atoms: Vec::new(),
        }
    }

    pub fn total_mass(&self) -> f64 {
        neumaier_sum(self.atoms.iter().map(|a| a.mass))
    }

    /// Field value at `(x, v)`; `v` below zero is treated as zero.
    #[inline]
    pub fn accel(&self, x: f64, v: f64) -> f64 {
        let eps0 = self.kernels.params().eps0;
        let start = self.atoms.partition_point(|a| a.x <= x);
        let end = start + self.atoms[start..].partition_point(|a| a.x - x < eps0);
        let mut acc = 0.0;
        for a in &self.atoms[start..end] {
            acc += a.mass * self.kernels.pair_accel(x, v, a.x, a.v);
        }
        acc
    }
}

/// Image measure under `map`; masses are carried unchanged.
pub fn push_forward<F>(cloud: &ParticleCloud, map: F) -> Result<ParticleCloud>
where
    F: Fn(f64, f64) -> (f64, f64),
{
    let atoms = cloud
        .atoms()
        .iter()
        .map(|a| {
            let (x, v) = map(a.x, a.v);
            Atom::new(x, v, a.mass)
        })
        .collect();
    ParticleCloud::new(atoms)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PruneReport {
    /// Mass of the dropped atoms.
    pub removed_mass: f64,
    /// Transport cost of moving merged atoms to their centroids.
    pub moved_cost: f64,
    pub atoms_before: usize,
    pub atoms_after: usize,
}

impl PruneReport {
    /// Upper bound on W₁^{1,1}(before, after).
    pub fn distance_bound(&self) -> f64 {
        self.removed_mass + self.moved_cost
    }
}

/// Drop atoms lighter than `eps_mass * total / count`, then merge atoms
/// sharing a grid cell of diameter `grid_h` at their mass-weighted centroid
/// (`grid_h == 0` disables merging). Fails if the perturbation exceeds
/// `(eps_mass + grid_h) * total` in W₁^{1,1}.
pub fn prune_merge(cloud: &ParticleCloud, eps_mass: f64, grid_h: f64) -> Result<(ParticleCloud, PruneReport)> {
    if !(eps_mass >= 0.0) || !(grid_h >= 0.0) {
        return Err(Error::Domain("eps_mass and grid_h must be >= 0".into()));
    }
    let total = cloud.total_mass();
    let count = cloud.len().max(1) as f64;
    let threshold = eps_mass * total / count;
    let mut removed = Vec::new();
    let mut kept: Vec<Atom> = Vec::with_capacity(cloud.len());
    for a in cloud.atoms() {
        if a.mass < threshold || a.mass == 0.0 {
            removed.push(a.mass);
        } else {
            kept.push(*a);
        }
    }
    let removed_mass = neumaier_sum(removed);

    let mut moved_cost = 0.0;
    let merged = if grid_h > 0.0 && kept.len() > 1 {
        // Square cells of side grid_h / sqrt(2) have diameter grid_h.
        let side = grid_h / std::f64::consts::SQRT_2;
        let mut cell_of: HashMap<(i64, i64), usize> = HashMap::new();
        let mut groups: Vec<Vec<Atom>> = Vec::new();
        for a in kept {
            let key = ((a.x / side).floor() as i64, (a.v / side).floor() as i64);
            let idx = *cell_of.entry(key).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[idx].push(a);
        }
        groups
            .into_iter()
            .map(|g| {
                if g.len() == 1 {
                    return g[0];
                }
                let base = g[0];
                let m = neumaier_sum(g.iter().map(|a| a.mass));
                let dx = neumaier_sum(g.iter().map(|a| a.mass * (a.x - base.x))) / m;
                let dv = neumaier_sum(g.iter().map(|a| a.mass * (a.v - base.v))) / m;
                let c = Atom::new(base.x + dx, (base.v + dv).max(0.0), m);
                moved_cost += g.iter().map(|a| a.mass * (a.x - c.x).hypot(a.v - c.v)).sum::<f64>();
                c
            })
            .collect()
    } else {
        kept
    };

    let report = PruneReport {
        removed_mass,
        moved_cost,
        atoms_before: cloud.len(),
        atoms_after: merged.len(),
    };
    let bound = (eps_mass + grid_h) * total;
    if report.distance_bound() > bound * (1.0 + 1e-12) + 1e-300 {
        return Err(Error::Invariant {
            t: f64::NAN,
            what: format!(
                "prune/merge perturbation {} exceeds bound {bound}",
                report.distance_bound()
            ),
        });
    }
    Ok((ParticleCloud::from_atoms_unchecked(merged), report))
}
