//! Blow-ups, homogeneity and translation-invariance of tangent maps, and
//! threshold detection of singular points from the extrapolated density.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rayon::prelude::*;
use serde::Serialize;

use crate::constants::FracParams;
use crate::error::{config, domain, Error, Result};
use crate::extension::{density_theta, extend, half_ball_energies, xi_from_samples, ExteriorFill, HalfSpaceGrid, TargetBox};
use crate::field::{interpolate, norm, preset_map, preset_field, Field, PresetParams, SphereField};
use crate::lattice::{DomainShape, Lattice, LatticeConfig, TailMode};
use crate::solver::{minimize, SolverConfig};

/// u_{x0,ρ}(y) = u(x0 + ρ y) sampled at every node y of `reference`, renormalised.
pub fn blowup(lat: &Lattice, u: &SphereField, x0: &[f64], rho: f64, reference: &Lattice) -> Result<SphereField> {
    if !(rho > 0.0) {
        return Err(Error::Usage("blow-up scale must be positive".into()));
    }
    if x0.len() != lat.dim() || reference.dim() != lat.dim() {
        return Err(Error::Usage("base point and reference lattice must match the dimension".into()));
    }
    u.check_lattice(lat)?;
    let d = u.d();
    let mut out = Field::zeros(reference.n_nodes, d);
    for p in 0..reference.n_nodes {
        let y = reference.coord(p);
        let x: Vec<f64> = x0.iter().zip(&y).map(|(a, b)| a + rho * b).collect();
        let v = interpolate(lat, u, &x).ok_or_else(|| domain(format!("blow-up sample {x:?} leaves the source box")))?;
        let m = norm(&v);
        if m < 0.5 {
            return Err(Error::Numerical { msg: format!("degenerate interpolation at {x:?}"), residual: m });
        }
        out.get_mut(p).iter_mut().zip(&v).for_each(|(o, a)| *o = a / m);
    }
    SphereField::new(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct BlowupResult {
    pub x0: Vec<f64>,
    pub scales: Vec<f64>,
    #[serde(skip)]
    pub fields: Vec<SphereField>,
    /// θ_s(u, x0, ρ r_ref) with r_ref = L_ref / 2, the lattice density at the matching radius.
    pub densities: Vec<f64>,
    /// sup distance of each blow-up to the constant u(x0) over the reference Ω.
    pub distance_to_constant: Vec<f64>,
}

/// Blow-ups at strictly decreasing scales.
pub fn blowup_family(lat: &Lattice, u: &SphereField, x0: &[f64], scales: &[f64], reference: &Lattice) -> Result<BlowupResult> {
    if scales.is_empty() || scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Usage("scales must be nonempty and strictly decreasing".into()));
    }
    let r_ref = 0.5 * reference.l;
    let centre = interpolate(lat, u, x0).ok_or_else(|| domain("base point outside the source box"))?;
    let cn = norm(&centre);
    let centre: Vec<f64> = centre.iter().map(|c| c / cn.max(f64::MIN_POSITIVE)).collect();
    let mut fields = Vec::new();
    let mut densities = Vec::new();
    let mut distance_to_constant = Vec::new();
    for &rho in scales {
        let f = blowup(lat, u, x0, rho, reference)?;
        let dist = reference
            .omega_nodes
            .iter()
            .map(|&p| f.get(p).iter().zip(&centre).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        densities.push(crate::extension::density_theta_small(lat, u, x0, rho * r_ref));
        distance_to_constant.push(dist);
        fields.push(f);
    }
    Ok(BlowupResult { x0: x0.to_vec(), scales: scales.to_vec(), fields, densities, distance_to_constant })
}

/// max over λ ∈ {1/2, 2} and nodes x with |x|, |λx| ≥ 4h of |φ(λx) - φ(x)|.
pub fn homogeneity_defect(lat: &Lattice, phi: &SphereField) -> Result<f64> {
    phi.check_lattice(lat)?;
    let rmin = 4.0 * lat.h * (1.0 - 1e-12);
    let defect = (0..lat.n_nodes)
        .into_par_iter()
        .map(|p| {
            let x = lat.coord(p);
            if norm(&x) < rmin {
                return 0.0;
            }
            let mut m = 0.0f64;
            for lambda in [0.5, 2.0] {
                let y: Vec<f64> = x.iter().map(|v| lambda * v).collect();
                if norm(&y) < rmin {
                    continue;
                }
                if let Some(v) = interpolate(lat, phi, &y) {
                    let dist = v.iter().zip(phi.get(p)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    m = m.max(dist);
                }
            }
            m
        })
        .reduce(|| 0.0, f64::max);
    Ok(defect)
}

/// Largest |∇_h φ| over the nodes sampled by [`homogeneity_defect`] (a Lipschitz proxy).
pub fn lipschitz_proxy(lat: &Lattice, phi: &SphereField) -> f64 {
    let rmin = 4.0 * lat.h * (1.0 - 1e-12);
    (0..lat.n_nodes)
        .filter(|&p| norm(&lat.coord(p)) >= rmin)
        .map(|p| norm(&crate::extension::lattice_gradient(lat, phi, p)))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct SymmetryReport {
    pub dimension: usize,
    /// Orthonormal basis of the invariant subspace.
    pub basis: Vec<Vec<f64>>,
    /// Accepted directions, closed under v ↦ -v.
    pub directions: Vec<Vec<f64>>,
    /// (direction, sup defect) for every tested direction.
    pub defects: Vec<(Vec<f64>, f64)>,
}

/// Translation invariance along the axes and the diagonals (e_a ± e_b)/√2, tested by
/// interpolated shifts of ±L/4 and ±L/2 at Ω nodes.
pub fn symmetry_subspace(lat: &Lattice, phi: &SphereField, tol: f64) -> Result<SymmetryReport> {
    phi.check_lattice(lat)?;
    let n = lat.dim();
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    for a in 0..n {
        let mut e = vec![0.0; n];
        e[a] = 1.0;
        candidates.push(e);
    }
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    for a in 0..n {
        for b in a + 1..n {
            for sign in [1.0, -1.0] {
                let mut e = vec![0.0; n];
                e[a] = r2;
                e[b] = sign * r2;
                candidates.push(e);
            }
        }
    }
    let shifts = [0.25 * lat.l, 0.5 * lat.l];
    let defect_of = |v: &[f64]| -> f64 {
        lat.omega_nodes
            .par_iter()
            .map(|&p| {
                let x = lat.coord(p);
                let mut m = 0.0f64;
                for t in shifts {
                    for sgn in [1.0, -1.0] {
                        let y: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + sgn * t * b).collect();
                        if let Some(w) = interpolate(lat, phi, &y) {
                            let dist = w.iter().zip(phi.get(p)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                            m = m.max(dist);
                        }
                    }
                }
                m
            })
            .reduce(|| 0.0, f64::max)
    };
    let defects: Vec<(Vec<f64>, f64)> = candidates.iter().map(|v| (v.clone(), defect_of(v))).collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut directions = Vec::new();
    for (v, def) in &defects {
        if *def > tol {
            continue;
        }
        directions.push(v.clone());
        directions.push(v.iter().map(|c| -c).collect());
        let mut w = v.clone();
        for b in &basis {
            let proj: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
            w.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let m = norm(&w);
        if m > 1e-8 {
            basis.push(w.iter().map(|c| c / m).collect());
        }
    }
    Ok(SymmetryReport { dimension: basis.len(), basis, directions, defects })
}

#[derive(Clone, Debug, Serialize)]
pub struct SingularReport {
    pub epsilon: f64,
    /// Smallest radius used in the extrapolation.
    pub scale: f64,
    pub radii: Vec<f64>,
    /// Flagged lattice nodes (all in Ω).
    pub flagged: Vec<usize>,
    pub flagged_coords: Vec<Vec<f64>>,
    pub flagged_xi: Vec<f64>,
    /// Ξ estimate per Ω node, indexed by Ω position.
    pub xi: Vec<f64>,
    /// Θ at the smallest radius per Ω node.
    pub theta_rmin: Vec<f64>,
}

impl SingularReport {
    pub fn flagged_csv(&self) -> String {
        let mut out = String::new();
        let n = self.flagged_coords.first().map_or(0, |c| c.len());
        let head: Vec<String> = (1..=n).map(|a| format!("x{a}")).collect();
        out.push_str(&head.join(","));
        out.push_str(",xi\n");
        for (i, c) in self.flagged_coords.iter().enumerate() {
            let cols: Vec<String> = c.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&format!("{},{:?}\n", cols.join(","), self.flagged_xi[i]));
        }
        out
    }
}

/// Radii 4h, 5h, 6h: the three smallest admissible extrapolation radii.
pub fn default_singular_radii(h: f64) -> Vec<f64> {
    vec![4.0 * h, 5.0 * h, 6.0 * h]
}

/// Flag Ω nodes with Ξ ≥ ε. One extension over the box covering every half ball is reused for all nodes.
pub fn detect_singular(lat: &Lattice, u: &SphereField, epsilon: f64, radii: &[f64], fill: &ExteriorFill) -> Result<SingularReport> {
    if !(epsilon > 0.0) {
        return Err(Error::Usage("epsilon must be positive".into()));
    }
    if radii.is_empty() || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Usage("radii must be nonempty and strictly increasing".into()));
    }
    u.check_lattice(lat)?;
    let rmax = *radii.last().unwrap();
    let reach = lat
        .omega_nodes
        .iter()
        .map(|&p| lat.coord(p).iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .fold(0.0, f64::max)
        + rmax;
    if reach > lat.l_ext + 1e-9 * lat.h {
        return Err(domain(format!("half balls of radius {rmax} around Ω leave the lattice box")));
    }
    let grid = HalfSpaceGrid::default_for(lat)?;
    let v = extend(lat, u, &grid, &TargetBox::centered(lat, reach + lat.h), fill)?;
    let dens = v.energy_density();
    let n = lat.dim() as f64;
    let s = lat.params.s;
    let per_node: Vec<(f64, f64)> = lat
        .omega_nodes
        .par_iter()
        .map(|&p| {
            let x = lat.coord(p);
            let energies = half_ball_energies(&v, &dens, &x, radii);
            let theta: Vec<f64> = energies.iter().zip(radii).map(|(e, r)| r.powf(2.0 * s - n) * e).collect();
            (xi_from_samples(radii, &theta, lat.h), theta[0])
        })
        .collect();
    let xi: Vec<f64> = per_node.iter().map(|p| p.0).collect();
    let theta_rmin: Vec<f64> = per_node.iter().map(|p| p.1).collect();
    let hits: Vec<(usize, f64)> = lat.omega_nodes.iter().zip(&xi).filter(|(_, &x)| x >= epsilon).map(|(&p, &x)| (p, x)).collect();
    let flagged: Vec<usize> = hits.iter().map(|h| h.0).collect();
    let flagged_xi = hits.iter().map(|h| h.1).collect();
    let flagged_coords = flagged.iter().map(|&p| lat.coord(p)).collect();
    Ok(SingularReport { epsilon, scale: radii[0], radii: radii.to_vec(), flagged, flagged_coords, flagged_xi, xi, theta_rmin })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Calibration {
    pub epsilon: f64,
    /// Mean of Θ(r) over r ∈ [L/4, 3L/4] for the singular model.
    pub plateau: f64,
}

fn calibration_cache() -> &'static Mutex<HashMap<(usize, u64, u64), Calibration>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64, u64), Calibration>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// ε = plateau / 2 for the minimiser with 0-homogeneous data on the unit ball (L = 1, L_ext = 2):
/// x/|x| into S^1 for n = 2 and the step sign(x) into S^0 for n = 1. Cached per (n, s, h).
pub fn calibrated_epsilon(n: usize, s: f64, h: f64) -> Result<Calibration> {
    let key = (n, s.to_bits(), h.to_bits());
    if let Some(c) = calibration_cache().lock().unwrap().get(&key) {
        return Ok(*c);
    }
    let (d, preset) = match n {
        1 => (1, "step"),
        2 => (2, "hedgehog"),
        _ => return Err(config("calibration is available for n in {1, 2}")),
    };
    let params = FracParams::new(n, s, d)?;
    let cfg = LatticeConfig { h, l: 1.0, l_ext: 2.0, shape: DomainShape::Ball, tail: TailMode::Zero, ..Default::default() };
    let lat = Lattice::build(&params, &cfg)?;
    let pp = PresetParams::default();
    let u0 = preset_field(&lat, preset, &pp)?;
    let (u, _) = minimize(&u0, &lat, &SolverConfig::default())?;
    let fill = ExteriorFill::Map(preset_map(preset, n, d, h, lat.l_ext, &pp)?);
    let grid = HalfSpaceGrid::default_for(&lat)?;
    let v = extend(&lat, &u, &grid, &TargetBox::centered(&lat, 0.75 + h), &fill)?;
    let origin = vec![0.0; n];
    let radii: Vec<f64> = (1..)
        .map(|k| k as f64 * h)
        .skip_while(|&r| r < 0.25 - 1e-12)
        .take_while(|&r| r <= 0.75 + 1e-12)
        .collect();
    let mut sum = 0.0;
    for &r in &radii {
        sum += density_theta(&v, &origin, r)?;
    }
    let plateau = sum / radii.len() as f64;
    let c = Calibration { epsilon: 0.5 * plateau, plateau };
    calibration_cache().lock().unwrap().insert(key, c);
    Ok(c)
}
