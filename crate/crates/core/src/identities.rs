//! The exactness-class identities evaluated on one field, as a report.
//!
//! Every check compares two discrete quantities that agree by rearrangement of
//! finite sums, so the residuals sit at rounding level for any unit field.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{preset_field, random_unit_field, Field, PresetParams, SphereField};
use crate::lattice::Lattice;
use crate::nonlocal::*;

pub const EXACTNESS_TOL: f64 = 1e-11;

#[derive(Clone, Debug, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// Relative residual; for the antisymmetry checks the sup defect over the sup value.
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl IdentityCheck {
    fn new(name: &str, lhs: f64, rhs: f64, residual: f64) -> Self {
        Self { name: name.into(), lhs, rhs, residual, tolerance: EXACTNESS_TOL, passed: residual <= EXACTNESS_TOL }
    }

    fn relative(name: &str, lhs: f64, rhs: f64, floor: f64) -> Self {
        let scale = lhs.abs().max(rhs.abs()).max(floor).max(f64::MIN_POSITIVE);
        Self::new(name, lhs, rhs, (lhs - rhs).abs() / scale)
    }
}

/// Random scalar test function supported in Ω.
pub fn random_test_function(lat: &Lattice, seed: u64) -> Field {
    let mut phi = random_unit_field(lat, 1, seed).into_field();
    for &x in &lat.ext_nodes {
        phi.values[x] = 0.0;
    }
    // unit scalars are ±1; a smooth factor makes the values generic
    for (p, v) in phi.values.iter_mut().enumerate() {
        *v *= 0.5 + 0.5 * ((p as f64) * 0.618).sin().abs();
    }
    phi
}

/// d_s antisymmetry, ‖d_s u‖² = 2E, weak/strong duality, ⊙ vs weak form, Σ|d_s u^j|² = λ,
/// Ω^{ij} antisymmetry, the decomposition λu = Ω ⊙ d_s u + T and the conservation
/// pairing vs its cross form, for the test function drawn from `seed`.
pub fn exactness_suite(lat: &Lattice, u: &SphereField, seed: u64) -> Result<Vec<IdentityCheck>> {
    u.check_lattice(lat)?;
    let d = u.d();
    let e = energy(lat, u);
    let grads: Vec<PairField> = (0..d).map(|c| s_gradient(lat, &u.component(c))).collect::<Result<_>>()?;
    let mut out = Vec::new();

    let mut defect = 0.0f64;
    let mut size = 0.0f64;
    for du in &grads {
        for &p in &lat.omega_nodes {
            for q in 0..lat.n_nodes {
                if q == p {
                    continue;
                }
                let a = du.get(lat, p, q);
                defect = defect.max((a + du.get(lat, q, p)).abs());
                size = size.max(a.abs());
            }
        }
    }
    out.push(IdentityCheck::new("s_gradient_antisymmetry", defect, 0.0, defect / size.max(f64::MIN_POSITIVE)));

    let norm_total: f64 = grads.iter().map(|g| od_norm_sq(lat, g)).sum();
    out.push(IdentityCheck::relative("gradient_norm_vs_twice_energy", norm_total, 2.0 * e, 0.0));

    let phi = random_test_function(lat, seed);
    let phi_d = Field { d, values: phi.values.iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect() };
    let weak = frac_laplacian_weak(lat, u, &phi_d)?;
    let strong = omega_pairing(lat, &frac_laplacian_strong(lat, u), &phi_d);
    out.push(IdentityCheck::relative("weak_strong_duality", weak, strong, 0.0));

    let mut od = 0.0;
    for (c, du) in grads.iter().enumerate() {
        let dp = s_gradient(lat, &phi_d.component(c))?;
        od += odot_total(lat, du, &dp)?;
    }
    out.push(IdentityCheck::relative("odot_vs_weak_form", od, weak, 0.0));

    let lambda = lagrange_multiplier(lat, u);
    let mut sq = vec![0.0; lat.n_omega()];
    for du in &grads {
        for (a, b) in sq.iter_mut().zip(odot(lat, du, du)?) {
            *a += b;
        }
    }
    let lsup = lambda.iter().cloned().fold(0.0, f64::max);
    let ldef = sq.iter().zip(&lambda).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.push(IdentityCheck::new("lambda_vs_gradient_squares", ldef, 0.0, ldef / lsup.max(f64::MIN_POSITIVE)));

    if d >= 2 {
        let mut odef = 0.0f64;
        let mut osize = 0.0f64;
        for i in 0..d {
            let oii = omega_field(lat, u, i, i)?;
            odef = odef.max(oii.inner.iter().chain(&oii.outer).fold(0.0, |m, v| m.max(v.abs())));
            for j in i + 1..d {
                let a = omega_field(lat, u, i, j)?;
                let b = omega_field(lat, u, j, i)?;
                for (x, y) in a.inner.iter().chain(&a.outer).zip(b.inner.iter().chain(&b.outer)) {
                    odef = odef.max((x + y).abs());
                    osize = osize.max(x.abs());
                }
            }
        }
        out.push(IdentityCheck::new("omega_antisymmetry", odef, 0.0, odef / osize.max(f64::MIN_POSITIVE)));
    }

    let dec = decomposition_residual(lat, u);
    out.push(IdentityCheck::new("decomposition", dec.residual, 0.0, dec.relative()));

    if d >= 2 {
        let mut worst = IdentityCheck::new("conservation_pairing_vs_cross_form", 0.0, 0.0, 0.0);
        for i in 0..d {
            for j in i + 1..d {
                let c = conservation_residual(lat, u, &phi, i, j)?;
                let chk = IdentityCheck::relative("conservation_pairing_vs_cross_form", c.pairing, c.cross_form, e);
                if chk.residual >= worst.residual {
                    worst = chk;
                }
            }
        }
        out.push(worst);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct PerimeterCheck {
    pub radius: f64,
    pub energy: f64,
    pub gamma: f64,
    pub perimeter: f64,
    /// E / (γ P); the discrete sums give exactly 2.
    pub ratio: f64,
    pub check: IdentityCheck,
}

/// E(χ_E - χ_{E^c}) against 2γ P(E) for E the ball of the given radius.
pub fn perimeter_identity(lat: &Lattice, radius: f64) -> Result<PerimeterCheck> {
    if !(radius > 0.0) {
        return Err(Error::Usage("radius must be positive".into()));
    }
    let u = preset_field(lat, "char-ball", &PresetParams { radius, ..Default::default() })?;
    let d = u.d();
    let mask: Vec<bool> = (0..lat.n_nodes).map(|q| u.values[q * d] > 0.0).collect();
    let perimeter = frac_perimeter(lat, &mask)?;
    let e = energy(lat, &u);
    let gamma = lat.params.gamma_ns;
    let check = IdentityCheck::relative("perimeter_identity", e, 2.0 * gamma * perimeter, 0.0);
    Ok(PerimeterCheck { radius, energy: e, gamma, perimeter, ratio: e / (gamma * perimeter), check })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::FracParams;
    use crate::lattice::build_lattice;

    #[test]
    fn suite_passes_on_random_field() {
        let lat = build_lattice(&FracParams::new(1, 0.4, 3).unwrap(), 1.0 / 16.0, 1.0, 2.0, 2, 4).unwrap();
        let u = random_unit_field(&lat, 3, 3);
        let checks = exactness_suite(&lat, &u, 5).unwrap();
        assert_eq!(checks.len(), 8);
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
        let per = perimeter_identity(&lat, 0.5).unwrap();
        assert!(per.check.passed && (per.ratio - 2.0).abs() < 1e-12);
    }
}
