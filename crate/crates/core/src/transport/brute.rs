use crate::error::{Error, Result};
use crate::measures::ParticleCloud;

use super::GroundMetric;

const MAX_ATOMS: usize = 3;

/// Exhaustive search over transport plans whose per-arc masses are
/// multiples of `max(|mu_a|, |mu_b|) / resolution`. Independent of the
/// flow solver; returns an upper bound on W₁^{a,b} that is within
/// `2 a n m q` of it, `q` being the grid step.
pub fn gw_brute(mu_a: &ParticleCloud, mu_b: &ParticleCloud, a: f64, b: f64, resolution: usize) -> Result<f64> {
    let (n, m) = (mu_a.len(), mu_b.len());
    if n.max(m) > MAX_ATOMS {
        return Err(Error::TooManyAtoms {
            max: MAX_ATOMS,
            got: n.max(m),
        });
    }
    if resolution < 16 {
        return Err(Error::Domain(format!("resolution must be >= 16, got {resolution}")));
    }
    if !(a > 0.0) || !(b > 0.0) {
        return Err(Error::Domain("weights must be positive".into()));
    }
    let metric = GroundMetric::default();
    let ma: f64 = mu_a.atoms().iter().map(|x| x.mass).sum();
    let mb: f64 = mu_b.atoms().iter().map(|x| x.mass).sum();
    let base = a * (ma + mb);
    let total = ma.max(mb);
    if n == 0 || m == 0 || total == 0.0 {
        return Ok(base);
    }
    let q = total / resolution as f64;
    let units = |mass: f64| (mass / q + 1e-9).floor() as usize;
    let mut row_cap: Vec<usize> = mu_a.atoms().iter().map(|x| units(x.mass)).collect();
    let mut col_cap: Vec<usize> = mu_b.atoms().iter().map(|x| units(x.mass)).collect();
    // Gain per unit moved on each arc: transport cost minus the 2a saved.
    let gain: Vec<f64> = mu_a
        .atoms()
        .iter()
        .flat_map(|x| mu_b.atoms().iter().map(move |y| q * (b * metric.dist(x, y) - 2.0 * a)))
        .collect();

    // Lower bound on the gain still reachable: every remaining unit of a row
    // moves along its cheapest unfixed arc.
    let rest_bound = |arc: usize, row_cap: &[usize]| -> f64 {
        let (i0, j0) = (arc / m, arc % m);
        let mut bound = 0.0;
        for (i, &cap) in row_cap.iter().enumerate().skip(i0) {
            let from = if i == i0 { j0 } else { 0 };
            let g = (from..m).map(|j| gain[i * m + j]).fold(0.0_f64, f64::min);
            bound += cap as f64 * g;
        }
        bound
    };

    #[allow(clippy::too_many_arguments)]
    fn search(
        arc: usize,
        m: usize,
        gain: &[f64],
        row_cap: &mut [usize],
        col_cap: &mut [usize],
        acc: f64,
        best: &mut f64,
        bound: &dyn Fn(usize, &[usize]) -> f64,
    ) {
        if arc == gain.len() {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        if acc + bound(arc, row_cap) >= *best - 1e-15 {
            return;
        }
        let (i, j) = (arc / m, arc % m);
        let limit = row_cap[i].min(col_cap[j]);
        for k in (0..=limit).rev() {
            row_cap[i] -= k;
            col_cap[j] -= k;
            search(
                arc + 1,
                m,
                gain,
                row_cap,
                col_cap,
                acc + k as f64 * gain[arc],
                best,
                bound,
            );
            row_cap[i] += k;
            col_cap[j] += k;
        }
    }

    let mut best = 0.0;
    search(0, m, &gain, &mut row_cap, &mut col_cap, 0.0, &mut best, &rest_bound);
    Ok(base + best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::Atom;

    #[test]
    fn trivial_cases() {
        let mu = ParticleCloud::new(vec![Atom::new(0.0, 1.0, 0.25), Atom::new(1.0, 0.0, 0.75)]).unwrap();
        assert_eq!(gw_brute(&mu, &mu, 1.0, 1.0, 64).unwrap(), 0.0);
        let d = ParticleCloud::dirac(2.0, 1.0, 0.7).unwrap();
        assert_eq!(gw_brute(&d, &ParticleCloud::empty(), 1.0, 1.0, 64).unwrap(), 0.7);
    }

    #[test]
    fn two_delta_cases() {
        let o = ParticleCloud::dirac(0.0, 0.0, 1.0).unwrap();
        let far = ParticleCloud::dirac(3.0, 0.0, 1.0).unwrap();
        let near = ParticleCloud::dirac(0.5, 0.0, 1.0).unwrap();
        assert!((gw_brute(&o, &far, 1.0, 1.0, 16).unwrap() - 2.0).abs() < 1e-12);
        assert!((gw_brute(&o, &near, 1.0, 1.0, 16).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_large_inputs() {
        let big = ParticleCloud::new((0..4).map(|i| Atom::new(i as f64, 0.0, 1.0)).collect()).unwrap();
        assert!(matches!(
            gw_brute(&big, &big, 1.0, 1.0, 16),
            Err(Error::TooManyAtoms { .. })
        ));
        assert!(gw_brute(&ParticleCloud::empty(), &ParticleCloud::empty(), 1.0, 1.0, 8).is_err());
    }
}
