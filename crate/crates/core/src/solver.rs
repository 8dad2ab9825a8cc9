//! Sphere-constrained minimisation of the discrete energy and the linear s-harmonic solve.
//!
//! For d ≥ 2 the minimiser is projected gradient descent with a renormalisation
//! retraction, Barzilai-Borwein trial steps and Armijo backtracking. Energy
//! differences are evaluated from (new - old)·(new + old) pair products so the
//! sufficient-decrease test stays meaningful once the decrease drops below the
//! rounding level of the total energy. For d = 1 the target S^0 = {±1} is
//! discrete and the minimiser performs greedy single-node sign flips instead.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::extension::lattice_gradient;
use crate::field::{dot, norm, Field, SphereField};
use crate::lattice::Lattice;
use crate::nonlocal::{energy, frac_laplacian_strong, tangential_laplacian};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub tol_tangential: f64,
    /// 0 selects 1 / max_p (γ Σ_j w_pj / h^n).
    pub initial_step: f64,
    pub backtrack_factor: f64,
    pub armijo_c: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iters: 20000, tol_tangential: 1e-6, initial_step: 0.0, backtrack_factor: 0.5, armijo_c: 1e-4, seed: 0x5EED }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.tol_tangential > 0.0) || self.initial_step < 0.0 || !self.initial_step.is_finite() {
            return Err(config("max_iters and tol_tangential must be positive, initial_step nonnegative"));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) || !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(config("backtrack_factor and armijo_c must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_energy: f64,
    pub energy_history: Vec<f64>,
    pub final_residual: f64,
    pub accepted: usize,
    pub rejected: usize,
    pub converged: bool,
}

/// 1 / max_p (γ Σ_j w_pj / h^n + γ K_p): the inverse row-sum bound on the Hessian.
pub fn default_step(lat: &Lattice) -> f64 {
    let gamma = lat.params.gamma_ns;
    let hn = lat.cell_volume();
    let max_row = lat
        .omega_nodes
        .par_iter()
        .enumerate()
        .map(|(pos, &p)| {
            let base = lat.row_base(p);
            let sum: f64 = (0..lat.n_nodes).map(|j| lat.w_at(base, j)).sum();
            gamma * sum / hn + if lat.tail_value().is_some() { gamma * lat.tail_k(pos) } else { 0.0 }
        })
        .reduce(|| 0.0, f64::max);
    1.0 / max_row
}

/// E(new) - E(old) for fields that differ only in Ω.
fn energy_change(lat: &Lattice, old: &Field, new: &Field) -> f64 {
    let gamma = lat.params.gamma_ns;
    let hn = lat.cell_volume();
    let d = old.d;
    let delta: Vec<f64> = new.values.iter().zip(&old.values).map(|(a, b)| a - b).collect();
    let sum: Vec<f64> = new.values.iter().zip(&old.values).map(|(a, b)| a + b).collect();
    let per_node: Vec<f64> = lat
        .omega_nodes
        .par_iter()
        .enumerate()
        .map(|(pos, &p)| {
            let base = lat.row_base(p);
            let mut acc = 0.0;
            for j in 0..lat.n_nodes {
                let w = lat.w_at(base, j);
                if w == 0.0 {
                    continue;
                }
                let c = if lat.is_omega(j) { 1.0 } else { 2.0 };
                let mut t = 0.0;
                for k in 0..d {
                    t += (delta[p * d + k] - delta[j * d + k]) * (sum[p * d + k] - sum[j * d + k]);
                }
                acc += c * t * w;
            }
            if let Some(cv) = lat.tail_value() {
                let mut t = 0.0;
                for k in 0..d {
                    t += delta[p * d + k] * (sum[p * d + k] - 2.0 * cv[k]);
                }
                acc += 2.0 * hn * t * lat.tail_k(pos);
            }
            acc
        })
        .collect();
    0.25 * gamma * per_node.iter().sum::<f64>()
}

/// Riemannian gradient at Ω nodes (indexed by Ω position); the Euclidean energy gradient is h^n times this.
pub fn energy_gradient(lat: &Lattice, u: &SphereField) -> Field {
    tangential_laplacian(lat, u)
}

fn sup_norm(g: &Field) -> f64 {
    (0..g.n_nodes()).map(|i| norm(g.get(i))).fold(0.0, f64::max)
}

/// Minimise the discrete energy over unit-valued fields agreeing with `u0` outside Ω.
pub fn minimize(u0: &SphereField, lat: &Lattice, cfg: &SolverConfig) -> Result<(SphereField, SolveReport)> {
    cfg.validate()?;
    u0.check_lattice(lat)?;
    if u0.d() == 1 {
        return minimize_flips(u0, lat, cfg);
    }
    let hn = lat.cell_volume();
    let d = u0.d();
    let tau0 = if cfg.initial_step > 0.0 { cfg.initial_step } else { default_step(lat) };
    let mut u = u0.field().clone();
    let mut e = energy(lat, &u);
    let mut report = SolveReport { energy_history: vec![e], ..Default::default() };
    let mut g = tangential_laplacian(lat, &u);
    let mut gsup = sup_norm(&g);
    let mut tau = tau0;
    let mut prev: Option<(Vec<f64>, Field)> = None;
    while gsup > cfg.tol_tangential && report.iterations < cfg.max_iters {
        report.iterations += 1;
        let gg: f64 = g.values.iter().map(|v| v * v).sum();
        // Barzilai-Borwein trial step from the previous accepted move
        if let Some((s, gprev)) = prev.take() {
            let y: Vec<f64> = g.values.iter().zip(&gprev.values).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            tau = if sy > 0.0 { (dot(&s, &s) / sy).clamp(1e-3 * tau0, 1e6 * tau0) } else { 2.0 * tau };
        }
        loop {
            if tau < 1e-14 * tau0 {
                return Err(Error::Numerical { msg: "line search stalled".into(), residual: gsup });
            }
            let mut cand = u.clone();
            let mut degenerate = false;
            for (pos, &p) in lat.omega_nodes.iter().enumerate() {
                let gp = g.get(pos);
                if gp.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let up = cand.get_mut(p);
                for c in 0..d {
                    up[c] -= tau * gp[c];
                }
                let m = norm(up);
                if m < 1e-8 {
                    degenerate = true;
                    break;
                }
                for c in up.iter_mut() {
                    *c /= m;
                }
            }
            if degenerate {
                report.rejected += 1;
                tau *= cfg.backtrack_factor;
                continue;
            }
            let de = energy_change(lat, &u, &cand);
            if de <= -cfg.armijo_c * tau * hn * gg {
                let s: Vec<f64> = lat
                    .omega_nodes
                    .iter()
                    .flat_map(|&p| (0..d).map(move |c| (p, c)))
                    .map(|(p, c)| cand.values[p * d + c] - u.values[p * d + c])
                    .collect();
                u = cand;
                e += de;
                report.energy_history.push(e);
                report.accepted += 1;
                let gnew = tangential_laplacian(lat, &u);
                prev = Some((s, std::mem::replace(&mut g, gnew)));
                gsup = sup_norm(&g);
                break;
            }
            report.rejected += 1;
            tau *= cfg.backtrack_factor;
        }
    }
    report.final_energy = energy(lat, &u);
    report.final_residual = gsup;
    report.converged = gsup <= cfg.tol_tangential;
    Ok((SphereField::new(u)?, report))
}

/// d = 1: greedy descent over single-node sign flips until no flip lowers the energy.
fn minimize_flips(u0: &SphereField, lat: &Lattice, cfg: &SolverConfig) -> Result<(SphereField, SolveReport)> {
    let gamma = lat.params.gamma_ns;
    let hn = lat.cell_volume();
    let mut u = u0.field().clone();
    let no = lat.n_omega();
    // S_p = Σ_j u_j w_pj, updated incrementally after each flip
    let mut field_sum: Vec<f64> = lat
        .omega_nodes
        .par_iter()
        .map(|&p| {
            let base = lat.row_base(p);
            (0..lat.n_nodes).map(|j| u.values[j] * lat.w_at(base, j)).sum()
        })
        .collect();
    let flip_gain = |u: &Field, s: &[f64], pos: usize| -> f64 {
        let p = lat.omega_nodes[pos];
        let up = u.values[p];
        // (γ/2) Σ_j [(u_p + u_j)² - (u_p - u_j)²] w_pj = 2γ u_p S_p
        let mut de = 2.0 * gamma * up * s[pos];
        if let Some(c) = lat.tail_value() {
            de += 2.0 * gamma * hn * up * c[0] * lat.tail_k(pos);
        }
        de
    };
    let mut e = energy(lat, &u);
    let mut report = SolveReport { energy_history: vec![e], ..Default::default() };
    let threshold = 1e-14 * e.abs().max(f64::MIN_POSITIVE);
    while report.iterations < cfg.max_iters {
        let (best, de) = (0..no)
            .map(|pos| (pos, flip_gain(&u, &field_sum, pos)))
            .fold((usize::MAX, 0.0), |acc, x| if x.1 < acc.1 { x } else { acc });
        if best == usize::MAX || de >= -threshold {
            report.converged = true;
            break;
        }
        report.iterations += 1;
        let p = lat.omega_nodes[best];
        let old = u.values[p];
        u.values[p] = -old;
        for (pos, &q) in lat.omega_nodes.iter().enumerate() {
            field_sum[pos] -= 2.0 * old * lat.w(q, p);
        }
        e += de;
        report.energy_history.push(e);
        report.accepted += 1;
    }
    report.final_energy = energy(lat, &u);
    report.final_residual = 0.0;
    Ok((SphereField::new(u)?, report))
}

/// Solve (-Δ)^s_h w = rhs at Ω nodes with w = u0 outside Ω, by conjugate gradients to relative residual 1e-10.
pub fn solve_linear(u0: &Field, lat: &Lattice, rhs: &Field, cfg: &SolverConfig) -> Result<Field> {
    cfg.validate()?;
    u0.check_lattice(lat)?;
    rhs.check_lattice(lat)?;
    if u0.d != 1 || rhs.d != 1 {
        return Err(Error::Usage("solve_linear expects scalar fields".into()));
    }
    if lat.tail_value().is_some_and(|c| c.len() != 1) {
        return Err(Error::Usage("constant-exterior tail needs a scalar exterior value for solve_linear".into()));
    }
    let no = lat.n_omega();
    let lap = |w: &Field| frac_laplacian_strong(lat, w).values;
    let zero = Field::zeros(lat.n_nodes, 1);
    let offset = lap(&zero);
    let apply = |x: &[f64]| -> Vec<f64> {
        let mut f = Field::zeros(lat.n_nodes, 1);
        for (pos, &p) in lat.omega_nodes.iter().enumerate() {
            f.values[p] = x[pos];
        }
        lap(&f).iter().zip(&offset).map(|(a, b)| a - b).collect()
    };
    let mut w = u0.clone();
    let l0 = lap(&w);
    let mut r: Vec<f64> = (0..no).map(|pos| rhs.values[lat.omega_nodes[pos]] - l0[pos]).collect();
    let r0 = dot(&r, &r).sqrt();
    if r0 == 0.0 {
        return Ok(w);
    }
    let mut x: Vec<f64> = lat.omega_nodes.iter().map(|&p| w.values[p]).collect();
    let mut pdir = r.clone();
    let mut rr = dot(&r, &r);
    let max_iter = cfg.max_iters.max(10 * no);
    for _ in 0..max_iter {
        let ap = apply(&pdir);
        let alpha = rr / dot(&pdir, &ap);
        for i in 0..no {
            x[i] += alpha * pdir[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= 1e-10 * r0 {
            for (pos, &p) in lat.omega_nodes.iter().enumerate() {
                w.values[p] = x[pos];
            }
            return Ok(w);
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..no {
            pdir[i] = r[i] + beta * pdir[i];
        }
    }
    Err(Error::Numerical { msg: format!("CG did not converge in {max_iter} iterations"), residual: rr.sqrt() / r0 })
}

/// max over hat-profile coordinate fields X (one per node and axis, support |x - x_m|_∞ < 2h inside Ω)
/// of |δE(u)[X]| / (‖X‖_∞ E(u)), with δE from the discrete Laplacian paired against the
/// tangential part of X·∇u.
pub fn stationarity_residual(u: &SphereField, lat: &Lattice) -> Result<f64> {
    u.check_lattice(lat)?;
    let e = energy(lat, u);
    if e <= 0.0 {
        return Ok(0.0);
    }
    let n = lat.dim();
    let d = u.d();
    let hn = lat.cell_volume();
    let lapt = tangential_laplacian(lat, u);
    // q[p][a] = lapt_p · ∂_a u_p
    let mut q = vec![0.0; lat.n_nodes * n];
    for (pos, &p) in lat.omega_nodes.iter().enumerate() {
        let g = lattice_gradient(lat, u, p);
        let lp = lapt.get(pos);
        for a in 0..n {
            q[p * n + a] = (0..d).map(|c| lp[c] * g[a * d + c]).sum();
        }
    }
    let side = lat.side;
    let offsets: Vec<(Vec<isize>, f64)> = {
        let m = 3usize.pow(n as u32);
        (0..m)
            .map(|k| {
                let mut rem = k;
                let o: Vec<isize> = (0..n)
                    .map(|_| {
                        let v = (rem % 3) as isize - 1;
                        rem /= 3;
                        v
                    })
                    .collect();
                let wgt = o.iter().map(|&v| if v == 0 { 1.0 } else { 0.5 }).product();
                (o, wgt)
            })
            .collect()
    };
    let best = lat
        .omega_nodes
        .par_iter()
        .map(|&m| {
            let idx = lat.multi_index(m);
            let mut acc = vec![0.0; n];
            for (o, wgt) in &offsets {
                let mut ni = Vec::with_capacity(n);
                for a in 0..n {
                    let v = idx[a] as isize + o[a];
                    if v < 0 || v >= side as isize {
                        return 0.0;
                    }
                    ni.push(v as usize);
                }
                let node = lat.node_of(&ni);
                if !lat.is_omega(node) {
                    return 0.0;
                }
                for a in 0..n {
                    acc[a] += wgt * q[node * n + a];
                }
            }
            acc.iter().map(|v| (hn * v).abs()).fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    Ok(best / e)
}
