//! Discrete nonlocal calculus on a lattice: energy, s-gradient, ⊙-product,
//! fractional Laplacian, Euler-Lagrange structure, conservation laws,
//! fractional perimeter and Sobolev-type seminorms.
//!
//! Node sums carry h^n, pair sums carry the kernel weights w_ij (which already
//! contain h^{2n}). Every identity below is an exact rearrangement of these sums.

use rayon::prelude::*;

use crate::error::{precondition, Error, Result};
use crate::field::{dot, Field, SphereField};
use crate::lattice::{tail_integral, Lattice};

/// Values on ordered node pairs with at least one node in Ω.
///
/// `inner[pos * N + j]` holds F(p, j) for the Ω node p = omega_nodes[pos];
/// `outer[e * N_Ω + q]` holds F(x, y) for x = ext_nodes[e], y = omega_nodes[q].
#[derive(Clone, Debug)]
pub struct PairField {
    pub n_nodes: usize,
    pub n_omega: usize,
    pub inner: Vec<f64>,
    pub outer: Vec<f64>,
}

impl PairField {
    /// F(p, q) for any active pair.
    pub fn get(&self, lat: &Lattice, p: usize, q: usize) -> f64 {
        if lat.is_omega(p) {
            self.inner[lat.omega_pos[p] * self.n_nodes + q]
        } else {
            let e = lat.ext_nodes.binary_search(&p).expect("exterior node");
            self.outer[e * self.n_omega + lat.omega_pos[q]]
        }
    }

    fn build<F: Fn(usize, usize, usize) -> f64 + Sync>(lat: &Lattice, f: F) -> Self {
        let n = lat.n_nodes;
        let inner: Vec<f64> = lat
            .omega_nodes
            .par_iter()
            .flat_map_iter(|&p| {
                let base = lat.row_base(p);
                let f = &f;
                (0..n).map(move |q| f(p, q, base))
            })
            .collect();
        let outer: Vec<f64> = lat
            .ext_nodes
            .par_iter()
            .flat_map_iter(|&x| {
                let base = lat.row_base(x);
                let f = &f;
                lat.omega_nodes.iter().map(move |&q| f(x, q, base))
            })
            .collect();
        Self { n_nodes: n, n_omega: lat.omega_nodes.len(), inner, outer }
    }

    fn same_shape(&self, other: &PairField) -> Result<()> {
        if self.n_nodes != other.n_nodes || self.n_omega != other.n_omega {
            return Err(Error::Usage("pair fields live on different lattices".into()));
        }
        Ok(())
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_scalar(f: &Field) -> Result<()> {
    if f.d != 1 {
        return Err(Error::Usage(format!("expected a scalar field, got d = {}", f.d)));
    }
    Ok(())
}

/// Discrete s-Dirichlet energy in Ω (plus the exterior tail in constant-exterior mode).
pub fn energy(lat: &Lattice, u: &Field) -> f64 {
    energy_masked(lat, u, &lat.omega_mask)
}

/// Energy with an arbitrary active set `mask` in place of Ω.
pub fn energy_masked(lat: &Lattice, u: &Field, mask: &[bool]) -> f64 {
    let gamma = lat.params.gamma_ns;
    let hn = lat.cell_volume();
    let rows: Vec<usize> = (0..lat.n_nodes).filter(|&p| mask[p]).collect();
    let per_node: Vec<f64> = rows
        .par_iter()
        .map(|&p| {
            let base = lat.row_base(p);
            let up = u.get(p);
            let mut acc = 0.0;
            for j in 0..lat.n_nodes {
                let w = lat.w_at(base, j);
                if w == 0.0 {
                    continue;
                }
                let c = if mask[j] { 1.0 } else { 2.0 };
                acc += c * sq_dist(up, u.get(j)) * w;
            }
            let mut tail = 0.0;
            if let Some(c) = lat.tail_value() {
                let k = if lat.is_omega(p) && mask.as_ptr() == lat.omega_mask.as_ptr() {
                    lat.tail_k(lat.omega_pos[p])
                } else {
                    tail_integral(&lat.coord(p), lat.l_ext + 0.5 * lat.h, lat.params.s)
                };
                tail = 2.0 * hn * sq_dist(up, c) * k;
            }
            acc + tail
        })
        .collect();
    0.25 * gamma * per_node.iter().sum::<f64>()
}

/// d_s u(p, q) = √(γ/2) (u_p - u_q) / |x_p - x_q|^s for a scalar field.
pub fn s_gradient(lat: &Lattice, u: &Field) -> Result<PairField> {
    check_scalar(u)?;
    u.check_lattice(lat)?;
    let c = (0.5 * lat.params.gamma_ns).sqrt();
    let v = &u.values;
    Ok(PairField::build(lat, |p, q, base| c * (v[p] - v[q]) * lat.rs_at(base, q)))
}

/// Σ_pairs F² μ_pq over all active ordered pairs.
pub fn od_norm_sq(lat: &Lattice, f: &PairField) -> f64 {
    odot_total(lat, f, f).unwrap()
}

/// (F⊙G)(p) = Σ_q F(p,q) G(p,q) μ_pq / h^n at each Ω node.
pub fn odot(lat: &Lattice, f: &PairField, g: &PairField) -> Result<Vec<f64>> {
    f.same_shape(g)?;
    let n = lat.n_nodes;
    let hn = lat.cell_volume();
    Ok(lat
        .omega_nodes
        .par_iter()
        .enumerate()
        .map(|(pos, &p)| {
            let base = lat.row_base(p);
            let fr = &f.inner[pos * n..(pos + 1) * n];
            let gr = &g.inner[pos * n..(pos + 1) * n];
            let mut acc = 0.0;
            for q in 0..n {
                acc += fr[q] * gr[q] * lat.mu_at(base, q);
            }
            acc / hn
        })
        .collect())
}

/// Σ_i h^n (F⊙G)(i) summed over every row of the active pair set (Ω rows and exterior rows).
pub fn odot_total(lat: &Lattice, f: &PairField, g: &PairField) -> Result<f64> {
    let hn = lat.cell_volume();
    let inner: f64 = odot(lat, f, g)?.iter().sum::<f64>() * hn;
    let m = lat.n_omega();
    let outer: Vec<f64> = lat
        .ext_nodes
        .par_iter()
        .enumerate()
        .map(|(e, &x)| {
            let base = lat.row_base(x);
            let mut acc = 0.0;
            for (qpos, &q) in lat.omega_nodes.iter().enumerate() {
                acc += f.outer[e * m + qpos] * g.outer[e * m + qpos] * lat.mu_at(base, q);
            }
            acc
        })
        .collect();
    Ok(inner + outer.iter().sum::<f64>())
}

impl Lattice {
    pub fn n_omega(&self) -> usize {
        self.omega_nodes.len()
    }
}

fn check_supported(lat: &Lattice, phi: &Field) -> Result<()> {
    for &e in &lat.ext_nodes {
        if phi.get(e).iter().any(|&v| v != 0.0) {
            return Err(precondition("test function must vanish outside Ω"));
        }
    }
    Ok(())
}

/// Weak fractional Laplacian (γ/2) Σ_{active ordered pairs} (u_i - u_j)·(φ_i - φ_j) w_ij (+ tail).
pub fn frac_laplacian_weak(lat: &Lattice, u: &Field, phi: &Field) -> Result<f64> {
    if let Some(cv) = lat.tail_value() {
        if cv.len() != u.d {
            return Err(Error::Usage("exterior constant and field have different numbers of components".into()));
        }
    }
    weak_with_tail(lat, u, phi, lat.tail_value())
}

fn weak_with_tail(lat: &Lattice, u: &Field, phi: &Field, tail_value: Option<&[f64]>) -> Result<f64> {
    u.check_lattice(lat)?;
    phi.check_lattice(lat)?;
    if u.d != phi.d {
        return Err(Error::Usage("u and phi must have the same number of components".into()));
    }
    check_supported(lat, phi)?;
    let gamma = lat.params.gamma_ns;
    let hn = lat.cell_volume();
    let rows: Vec<f64> = lat
        .omega_nodes
        .par_iter()
        .enumerate()
        .map(|(pos, &p)| {
            let base = lat.row_base(p);
            let (up, pp) = (u.get(p), phi.get(p));
            let mut acc = 0.0;
            for j in 0..lat.n_nodes {
                let w = lat.w_at(base, j);
                if w == 0.0 {
                    continue;
                }
                let (uj, pj) = (u.get(j), phi.get(j));
                let mut t = 0.0;
                for c in 0..u.d {
                    t += (up[c] - uj[c]) * (pp[c] - pj[c]);
                }
                // exterior columns stand for both orderings of the pair
                let mult = if lat.is_omega(j) { 1.0 } else { 2.0 };
                acc += mult * t * w;
            }
            let mut tail = 0.0;
            if let Some(cv) = tail_value {
                let k = lat.tail_k(pos);
                for c in 0..u.d {
                    tail += 2.0 * hn * (up[c] - cv[c]) * pp[c] * k;
                }
            }
            acc + tail
        })
        .collect();
    Ok(0.5 * gamma * rows.iter().sum::<f64>())
}

/// Strong fractional Laplacian at Ω nodes: γ Σ_j (u_p - u_j) w_pj / h^n (+ γ (u_p - c) K(x_p)).
/// The returned field is indexed by Ω position.
pub fn frac_laplacian_strong(lat: &Lattice, u: &Field) -> Field {
    let gamma = lat.params.gamma_ns;
    let hn = lat.cell_volume();
    let d = u.d;
    let values: Vec<f64> = lat
        .omega_nodes
        .par_iter()
        .enumerate()
        .flat_map_iter(|(pos, &p)| {
            let base = lat.row_base(p);
            let up = u.get(p);
            let mut acc = vec![0.0; d];
            for j in 0..lat.n_nodes {
                let w = lat.w_at(base, j);
                if w == 0.0 {
                    continue;
                }
                let uj = u.get(j);
                for c in 0..d {
                    acc[c] += (up[c] - uj[c]) * w;
                }
            }
            let k = lat.tail_k(pos);
            let cv = lat.tail_value();
            (0..d).map(move |c| {
                let mut v = gamma * acc[c] / hn;
                if let Some(cv) = cv {
                    v += gamma * (up[c] - cv[c]) * k;
                }
                v
            })
        })
        .collect();
    Field { d, values }
}

/// ⟨a, φ⟩_h = Σ_{p∈Ω} h^n a_p·φ_p for `a` indexed by Ω position.
pub fn omega_pairing(lat: &Lattice, a: &Field, phi: &Field) -> f64 {
    let hn = lat.cell_volume();
    lat.omega_nodes.iter().enumerate().map(|(pos, &p)| hn * dot(a.get(pos), phi.get(p))).sum()
}

/// λ(p) = (γ/2) Σ_j |u_p - u_j|² w_pj / h^n (+ tail), the sphere-constraint multiplier.
pub fn lagrange_multiplier(lat: &Lattice, u: &SphereField) -> Vec<f64> {
    lambda_unchecked(lat, u)
}

fn lambda_unchecked(lat: &Lattice, u: &Field) -> Vec<f64> {
    let gamma = lat.params.gamma_ns;
    let hn = lat.cell_volume();
    lat.omega_nodes
        .par_iter()
        .enumerate()
        .map(|(pos, &p)| {
            let base = lat.row_base(p);
            let up = u.get(p);
            let mut acc = 0.0;
            for j in 0..lat.n_nodes {
                let w = lat.w_at(base, j);
                if w != 0.0 {
                    acc += sq_dist(up, u.get(j)) * w;
                }
            }
            let mut v = 0.5 * gamma * acc / hn;
            if let Some(c) = lat.tail_value() {
                v += 0.5 * gamma * sq_dist(up, c) * lat.tail_k(pos);
            }
            v
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ElResidual {
    /// r_p = (-Δ)^s_h u_p - λ_p u_p, indexed by Ω position.
    pub residual: Field,
    pub sup: f64,
    /// Tangential part r_p - (r_p·u_p) u_p.
    pub tangential: Field,
    pub tangential_sup: f64,
}

pub fn el_residual(lat: &Lattice, u: &SphereField) -> ElResidual {
    let lap = frac_laplacian_strong(lat, u);
    let lambda = lagrange_multiplier(lat, u);
    let d = u.d;
    let mut residual = Field::zeros(lat.n_omega(), d);
    let mut tangential = Field::zeros(lat.n_omega(), d);
    let (mut sup, mut tsup) = (0.0f64, 0.0f64);
    for (pos, &p) in lat.omega_nodes.iter().enumerate() {
        let up = u.get(p);
        let r: Vec<f64> = (0..d).map(|c| lap.get(pos)[c] - lambda[pos] * up[c]).collect();
        let ru = dot(&r, up);
        let t: Vec<f64> = (0..d).map(|c| r[c] - ru * up[c]).collect();
        sup = sup.max(crate::field::norm(&r));
        tsup = tsup.max(crate::field::norm(&t));
        residual.get_mut(pos).copy_from_slice(&r);
        tangential.get_mut(pos).copy_from_slice(&t);
    }
    ElResidual { residual, sup, tangential, tangential_sup: tsup }
}

/// Tangential part of (-Δ)^s_h u at every Ω node (the Riemannian gradient direction).
pub fn tangential_laplacian(lat: &Lattice, u: &Field) -> Field {
    let mut lap = frac_laplacian_strong(lat, u);
    for (pos, &p) in lat.omega_nodes.iter().enumerate() {
        let up = u.get(p);
        let g = lap.get_mut(pos);
        let gu = dot(g, up);
        for c in 0..up.len() {
            g[c] -= gu * up[c];
        }
    }
    lap
}

fn check_comp(u: &Field, i: usize, j: usize) -> Result<()> {
    if i >= u.d || j >= u.d {
        return Err(Error::Usage(format!("component index out of range (d = {})", u.d)));
    }
    Ok(())
}

/// Ω^{ij}(p, q) = u^i_p d_s u^j(p, q) - u^j_p d_s u^i(p, q).
pub fn omega_field(lat: &Lattice, u: &SphereField, i: usize, j: usize) -> Result<PairField> {
    check_comp(u, i, j)?;
    let c = (0.5 * lat.params.gamma_ns).sqrt();
    let d = u.d;
    let v = &u.values;
    Ok(PairField::build(lat, |p, q, base| {
        let rs = lat.rs_at(base, q);
        let dj = c * (v[p * d + j] - v[q * d + j]) * rs;
        let di = c * (v[p * d + i] - v[q * d + i]) * rs;
        v[p * d + i] * dj - v[p * d + j] * di
    }))
}

/// T^i(p) = (γ/4) Σ_q |u_p - u_q|² (u^i_p - u^i_q) w_pq / h^n (+ tail), indexed by Ω position.
pub fn t_field(lat: &Lattice, u: &SphereField) -> Field {
    t_field_raw(lat, u)
}

fn t_field_raw(lat: &Lattice, u: &Field) -> Field {
    let gamma = lat.params.gamma_ns;
    let hn = lat.cell_volume();
    let d = u.d;
    let values: Vec<f64> = lat
        .omega_nodes
        .par_iter()
        .enumerate()
        .flat_map_iter(|(pos, &p)| {
            let base = lat.row_base(p);
            let up = u.get(p);
            let mut acc = vec![0.0; d];
            for q in 0..lat.n_nodes {
                let w = lat.w_at(base, q);
                if w == 0.0 {
                    continue;
                }
                let uq = u.get(q);
                let m = sq_dist(up, uq) * w;
                for c in 0..d {
                    acc[c] += m * (up[c] - uq[c]);
                }
            }
            let mut out: Vec<f64> = acc.iter().map(|a| 0.25 * gamma * a / hn).collect();
            if let Some(cv) = lat.tail_value() {
                let k = lat.tail_k(pos);
                let m = sq_dist(up, cv);
                for c in 0..d {
                    out[c] += 0.25 * gamma * m * (up[c] - cv[c]) * k;
                }
            }
            out
        })
        .collect();
    Field { d, values }
}

/// Σ_j (Ω^{ij} ⊙ d_s u^j)(p) for every component i, evaluated pair by pair
/// without materialising the pair fields. Indexed by Ω position.
pub fn omega_odot_du(lat: &Lattice, u: &SphereField) -> Field {
    omega_odot_du_raw(lat, u)
}

fn omega_odot_du_raw(lat: &Lattice, u: &Field) -> Field {
    let gamma = lat.params.gamma_ns;
    let c = (0.5 * gamma).sqrt();
    let hn = lat.cell_volume();
    let d = u.d;
    let values: Vec<f64> = lat
        .omega_nodes
        .par_iter()
        .enumerate()
        .flat_map_iter(|(pos, &p)| {
            let base = lat.row_base(p);
            let up = u.get(p);
            let mut acc = vec![0.0; d];
            let mut du = vec![0.0; d];
            for q in 0..lat.n_nodes {
                let mu = lat.mu_at(base, q);
                if mu == 0.0 {
                    continue;
                }
                let rs = lat.rs_at(base, q);
                let uq = u.get(q);
                for k in 0..d {
                    du[k] = c * (up[k] - uq[k]) * rs;
                }
                for i in 0..d {
                    let mut t = 0.0;
                    for j in 0..d {
                        t += (up[i] * du[j] - up[j] * du[i]) * du[j];
                    }
                    acc[i] += t * mu;
                }
            }
            let mut out: Vec<f64> = acc.iter().map(|a| a / hn).collect();
            if let Some(cv) = lat.tail_value() {
                let k = lat.tail_k(pos);
                for i in 0..d {
                    let mut t = 0.0;
                    for j in 0..d {
                        t += (up[i] * (up[j] - cv[j]) - up[j] * (up[i] - cv[i])) * (up[j] - cv[j]);
                    }
                    out[i] += 0.5 * gamma * t * k;
                }
            }
            out
        })
        .collect();
    Field { d, values }
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct DecompositionResidual {
    /// sup over Ω nodes and components of |λ u^i - Σ_j Ω^{ij}⊙d_s u^j - T^i|.
    pub residual: f64,
    pub lambda_sup: f64,
}

impl DecompositionResidual {
    /// Residual divided by 1 + sup λ.
    pub fn relative(&self) -> f64 {
        self.residual / (1.0 + self.lambda_sup)
    }
}

/// Algebraic check of λ u^i = Σ_j Ω^{ij} ⊙ d_s u^j + T^i. Accepts any field so
/// that non-unit inputs can be diagnosed.
pub fn decomposition_residual(lat: &Lattice, u: &Field) -> DecompositionResidual {
    let lambda = lambda_unchecked(lat, u);
    let od = omega_odot_du_raw(lat, u);
    let t = t_field_raw(lat, u);
    let mut res = 0.0f64;
    for (pos, &p) in lat.omega_nodes.iter().enumerate() {
        let up = u.get(p);
        for i in 0..u.d {
            res = res.max((lambda[pos] * up[i] - od.get(pos)[i] - t.get(pos)[i]).abs());
        }
    }
    DecompositionResidual { residual: res, lambda_sup: lambda.iter().cloned().fold(0.0, f64::max) }
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct Conservation {
    /// Σ over the active pair set of Ω^{ij} d_s φ μ (+ tail).
    pub pairing: f64,
    /// ⟨(-Δ)^s u^j, u^i φ⟩ - ⟨(-Δ)^s u^i, u^j φ⟩.
    pub cross_form: f64,
}

/// Conservation-law pairing of div_s Ω^{ij} with a scalar test function φ supported in Ω.
pub fn conservation_residual(lat: &Lattice, u: &SphereField, phi: &Field, i: usize, j: usize) -> Result<Conservation> {
    check_comp(u, i, j)?;
    check_scalar(phi)?;
    phi.check_lattice(lat)?;
    check_supported(lat, phi)?;
    let gamma = lat.params.gamma_ns;
    let c = (0.5 * gamma).sqrt();
    let hn = lat.cell_volume();
    let d = u.d;
    let v = &u.values;
    let ph = &phi.values;
    let pair_term = |p: usize, q: usize, base: usize| -> f64 {
        let mu = lat.mu_at(base, q);
        if mu == 0.0 {
            return 0.0;
        }
        let rs = lat.rs_at(base, q);
        let dj = c * (v[p * d + j] - v[q * d + j]) * rs;
        let di = c * (v[p * d + i] - v[q * d + i]) * rs;
        let om = v[p * d + i] * dj - v[p * d + j] * di;
        om * c * (ph[p] - ph[q]) * rs * mu
    };
    let inner: Vec<f64> = lat
        .omega_nodes
        .par_iter()
        .enumerate()
        .map(|(pos, &p)| {
            let base = lat.row_base(p);
            let mut acc = 0.0;
            for q in 0..lat.n_nodes {
                acc += pair_term(p, q, base);
            }
            if let Some(cv) = lat.tail_value() {
                acc += gamma * hn * lat.tail_k(pos) * ph[p] * (cv[i] * v[p * d + j] - cv[j] * v[p * d + i]);
            }
            acc
        })
        .collect();
    let outer: Vec<f64> = lat
        .ext_nodes
        .par_iter()
        .map(|&x| {
            let base = lat.row_base(x);
            lat.omega_nodes.iter().map(|&q| pair_term(x, q, base)).sum::<f64>()
        })
        .collect();
    let pairing = inner.iter().sum::<f64>() + outer.iter().sum::<f64>();
    let comp = |k: usize| u.component(k);
    let times = |k: usize| Field { d: 1, values: (0..lat.n_nodes).map(|p| v[p * d + k] * ph[p]).collect() };
    let tail = |k: usize| lat.tail_value().map(|cv| vec![cv[k]]);
    let cross_form = weak_with_tail(lat, &comp(j), &times(i), tail(j).as_deref())?
        - weak_with_tail(lat, &comp(i), &times(j), tail(i).as_deref())?;
    Ok(Conservation { pairing, cross_form })
}

/// Conservation pairing for the indicator of one Ω node `m`, touching only pairs containing m.
pub fn conservation_indicator(lat: &Lattice, u: &SphereField, m: usize, i: usize, j: usize, lap: &Field) -> Result<Conservation> {
    check_comp(u, i, j)?;
    let pos = lat.omega_pos[m];
    if pos == usize::MAX {
        return Err(precondition("indicator node must lie in Ω"));
    }
    let gamma = lat.params.gamma_ns;
    let c = (0.5 * gamma).sqrt();
    let hn = lat.cell_volume();
    let d = u.d;
    let v = &u.values;
    let base_m = lat.row_base(m);
    let mut acc = 0.0;
    for q in 0..lat.n_nodes {
        let mu = lat.mu_at(base_m, q);
        if mu == 0.0 {
            continue;
        }
        let rs = lat.rs_at(base_m, q);
        // pair (m, q): d_s φ = c rs; pair (q, m): d_s φ = -c rs, same μ and rs by symmetry
        let dj = c * (v[m * d + j] - v[q * d + j]) * rs;
        let di = c * (v[m * d + i] - v[q * d + i]) * rs;
        let om_mq = v[m * d + i] * dj - v[m * d + j] * di;
        let om_qm = v[q * d + i] * (-dj) - v[q * d + j] * (-di);
        acc += (om_mq - om_qm) * c * rs * mu;
    }
    if let Some(cv) = lat.tail_value() {
        acc += gamma * hn * lat.tail_k(pos) * (cv[i] * v[m * d + j] - cv[j] * v[m * d + i]);
    }
    let lp = lap.get(pos);
    let cross_form = hn * (lp[j] * v[m * d + i] - lp[i] * v[m * d + j]);
    Ok(Conservation { pairing: acc, cross_form })
}

/// Displayed three-class fractional perimeter: Σ w_xy over ordered pairs x∈E, y∉E with
/// (x,y) in (Ω×Ω) ∪ (Ω^c×Ω) ∪ (Ω×Ω^c), plus the exterior tail in constant-exterior mode.
pub fn frac_perimeter(lat: &Lattice, e_mask: &[bool]) -> Result<f64> {
    if e_mask.len() != lat.n_nodes {
        return Err(Error::Usage("mask length does not match lattice".into()));
    }
    let hn = lat.cell_volume();
    let rows: Vec<f64> = (0..lat.n_nodes)
        .into_par_iter()
        .filter(|&x| e_mask[x])
        .map(|x| {
            let base = lat.row_base(x);
            let xo = lat.is_omega(x);
            let mut acc = 0.0;
            for y in 0..lat.n_nodes {
                if !e_mask[y] && (xo || lat.is_omega(y)) {
                    acc += lat.w_at(base, y);
                }
            }
            acc
        })
        .collect();
    let mut total: f64 = rows.iter().sum();
    if let Some(cv) = lat.tail_value() {
        // Points beyond the box belong to E when the exterior value is +1.
        let beyond_in_e = cv[0] > 0.0;
        for (pos, &p) in lat.omega_nodes.iter().enumerate() {
            if e_mask[p] != beyond_in_e {
                total += hn * lat.tail_k(pos);
            }
        }
    }
    Ok(total)
}

fn ball_nodes(lat: &Lattice, center: &[f64], radius: f64) -> Vec<usize> {
    let tol = 1e-9 * lat.h;
    (0..lat.n_nodes)
        .filter(|&p| {
            let x = lat.coord(p);
            sq_dist(&x, center).sqrt() <= radius + tol
        })
        .collect()
}

/// [f]_{W^{s',p}(D)} = (Σ_{i≠j ∈ D} |f_i - f_j|^p w'_ij)^{1/p}, w' the kernel with exponent n + s'p.
pub fn sobolev_seminorm(lat: &Lattice, f: &Field, center: &[f64], radius: f64, s_prime: f64, p: f64) -> Result<f64> {
    f.check_lattice(lat)?;
    if !(s_prime > 0.0 && s_prime < 1.0) || !(p >= 1.0) {
        return Err(crate::error::domain("need s' in (0,1) and p >= 1"));
    }
    let table = lat.kernel_table_for_exponent(lat.dim() as f64 + s_prime * p);
    let nodes = ball_nodes(lat, center, radius);
    Ok(seminorm_on(lat, f, &nodes, &table, p).powf(1.0 / p))
}

fn seminorm_on(lat: &Lattice, f: &Field, nodes: &[usize], table: &[f64], p: f64) -> f64 {
    let rows: Vec<f64> = nodes
        .par_iter()
        .map(|&i| {
            let base = lat.row_base(i);
            let fi = f.get(i);
            let mut acc = 0.0;
            for &j in nodes {
                let w = table[base - lat.lin4(j)];
                if w != 0.0 {
                    acc += sq_dist(fi, f.get(j)).sqrt().powf(p) * w;
                }
            }
            acc
        })
        .collect();
    rows.iter().sum()
}

/// Lattice-centred balls with radii h·2^k (k ≥ 1) contained in the box, centred at Ω nodes.
fn ball_family(lat: &Lattice) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for &c in &lat.omega_nodes {
        let x = lat.coord(c);
        let room = x.iter().map(|xi| lat.l_ext - xi.abs()).fold(f64::INFINITY, f64::min);
        let mut r = 2.0 * lat.h;
        while r <= room + 1e-9 * lat.h {
            out.push((c, r));
            r *= 2.0;
        }
    }
    out
}

/// sup over the ball family of r^{2(s'p - n)/p} [f]²_{W^{s',p}(D_r)}.
pub fn morrey_seminorm(lat: &Lattice, f: &Field, s_prime: f64, p: f64) -> Result<f64> {
    f.check_lattice(lat)?;
    if !(s_prime > 0.0 && s_prime < 1.0) || !(p >= 1.0) {
        return Err(crate::error::domain("need s' in (0,1) and p >= 1"));
    }
    let n = lat.dim() as f64;
    let table = lat.kernel_table_for_exponent(n + s_prime * p);
    let mut best = 0.0f64;
    for (c, r) in ball_family(lat) {
        let nodes = ball_nodes(lat, &lat.coord(c), r);
        let sn = seminorm_on(lat, f, &nodes, &table, p).powf(1.0 / p);
        best = best.max(r.powf(2.0 * (s_prime * p - n) / p) * sn * sn);
    }
    Ok(best)
}

/// sup over the ball family of the mean distance of f to its ball average.
pub fn bmo_seminorm(lat: &Lattice, f: &Field) -> Result<f64> {
    f.check_lattice(lat)?;
    let mut best = 0.0f64;
    for (c, r) in ball_family(lat) {
        let nodes = ball_nodes(lat, &lat.coord(c), r);
        let mut avg = vec![0.0; f.d];
        for &p in &nodes {
            for (a, v) in avg.iter_mut().zip(f.get(p)) {
                *a += v;
            }
        }
        avg.iter_mut().for_each(|a| *a /= nodes.len() as f64);
        let dev: f64 = nodes.iter().map(|&p| sq_dist(f.get(p), &avg).sqrt()).sum::<f64>() / nodes.len() as f64;
        best = best.max(dev);
    }
    Ok(best)
}
