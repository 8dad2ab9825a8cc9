//! Finite-volume solver for div(|z|^a ∇w) = 0 on boxes in R^{n+1}.
//!
//! Edge conductances come from exact integrals of the weight: x-edges in row k
//! use h^{n-2} ∫_{cell k} |z|^a dz, z-edges use h^n / ∫_{z_k}^{z_{k+1}} |z|^{-a} dz.
//! Both are finite and positive for every s in (0,1), including a face at z = 0.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{config, Error, Result};
use crate::extension::ExtensionField;

/// ∫_{z1}^{z2} |z|^p dz for p > -1.
fn weight_integral(z1: f64, z2: f64, p: f64) -> f64 {
    let f = |z: f64| z.signum() * z.abs().powf(p + 1.0) / (p + 1.0);
    f(z2) - f(z1)
}

#[derive(Clone, Debug, Serialize)]
pub struct WeightedGrid {
    pub n: usize,
    pub s: f64,
    pub a: f64,
    pub h: f64,
    pub x_dims: Vec<usize>,
    pub x_origin: Vec<f64>,
    /// Node heights, strictly increasing.
    pub z: Vec<f64>,
    /// z-extent of each row's control cell.
    pub cell_lo: Vec<f64>,
    pub cell_hi: Vec<f64>,
    /// x-edge conductance per row.
    pub cx: Vec<f64>,
    /// z-edge conductance between rows k and k+1.
    pub cz: Vec<f64>,
    /// Dirichlet nodes (outer layer of the box).
    pub boundary: Vec<bool>,
}

impl WeightedGrid {
    /// Box [-half_width, half_width]^n × {z_k} with given row heights.
    pub fn new(n: usize, s: f64, h: f64, half_width: f64, z: Vec<f64>) -> Result<Self> {
        if !(1..=2).contains(&n) {
            return Err(config("weighted grids support n in {1, 2}"));
        }
        if !(s > 0.0 && s < 1.0) || !(h > 0.0) || z.len() < 3 || z.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config("need s in (0,1), h > 0 and at least 3 strictly increasing rows"));
        }
        let m = (half_width / h).round() as usize;
        if m == 0 {
            return Err(config("half width must be at least h"));
        }
        let side = 2 * m + 1;
        let a = 1.0 - 2.0 * s;
        let nz = z.len();
        let mut cell_lo = vec![0.0; nz];
        let mut cell_hi = vec![0.0; nz];
        for k in 0..nz {
            cell_lo[k] = if k == 0 { z[0] - 0.5 * (z[1] - z[0]) } else { 0.5 * (z[k - 1] + z[k]) };
            cell_hi[k] = if k == nz - 1 { z[k] + 0.5 * (z[k] - z[k - 1]) } else { 0.5 * (z[k] + z[k + 1]) };
        }
        // x-weights from |z| so mirrored rows get bitwise identical values
        let cx: Vec<f64> = (0..nz)
            .map(|k| {
                let (lo, hi) = (cell_lo[k], cell_hi[k]);
                let integral = if lo >= 0.0 || hi <= 0.0 {
                    let (p, q) = (lo.abs().min(hi.abs()), lo.abs().max(hi.abs()));
                    weight_integral(p, q, a)
                } else {
                    weight_integral(0.0, -lo, a) + weight_integral(0.0, hi, a)
                };
                h.powi(n as i32 - 2) * integral
            })
            .collect();
        let cz: Vec<f64> = (0..nz - 1)
            .map(|k| {
                let (lo, hi) = (z[k], z[k + 1]);
                let r = if lo >= 0.0 || hi <= 0.0 {
                    let (p, q) = (lo.abs().min(hi.abs()), lo.abs().max(hi.abs()));
                    weight_integral(p, q, -a)
                } else {
                    weight_integral(0.0, -lo, -a) + weight_integral(0.0, hi, -a)
                };
                h.powi(n as i32) / r
            })
            .collect();
        let x_dims = vec![side; n];
        let x_origin = vec![-(m as f64) * h; n];
        let nx: usize = x_dims.iter().product();
        let mut boundary = vec![false; nx * nz];
        for k in 0..nz {
            for t in 0..nx {
                let mut edge = k == 0 || k == nz - 1;
                let mut rem = t;
                for _ in 0..n {
                    let i = rem % side;
                    rem /= side;
                    edge |= i == 0 || i == side - 1;
                }
                boundary[k * nx + t] = edge;
            }
        }
        Ok(Self { n, s, a, h, x_dims, x_origin, z, cell_lo, cell_hi, cx, cz, boundary })
    }

    /// Rows symmetric about z = 0 at ±(j + 1/2) h_z, j < half_levels; no node sits on z = 0.
    pub fn symmetric(n: usize, s: f64, h: f64, half_width: f64, h_z: f64, half_levels: usize) -> Result<Self> {
        let mut z: Vec<f64> = (0..half_levels).rev().map(|j| -((2 * j + 1) as f64) * 0.5 * h_z).collect();
        z.extend((0..half_levels).map(|j| ((2 * j + 1) as f64) * 0.5 * h_z));
        Self::new(n, s, h, half_width, z)
    }

    /// Grid matching an extension field: x nodes = targets, rows = trace (z = 0) and levels.
    pub fn from_extension(v: &ExtensionField) -> Result<Self> {
        let dims = v.dims();
        if dims.iter().any(|&d| d != dims[0]) || dims[0] % 2 == 0 {
            return Err(config("extension targets must form a centred cube"));
        }
        let half = (dims[0] / 2) as f64 * v.h;
        if v.origin.iter().any(|&o| (o + half).abs() > 1e-9 * v.h) {
            return Err(config("extension targets must be centred at the origin"));
        }
        let mut z = vec![0.0];
        z.extend_from_slice(&v.grid.z);
        Self::new(v.n, v.s, v.h, half, z)
    }

    pub fn nx(&self) -> usize {
        self.x_dims.iter().product()
    }

    pub fn len(&self) -> usize {
        self.nx() * self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coord(&self, node: usize) -> (Vec<f64>, f64) {
        let nx = self.nx();
        let (k, mut t) = (node / nx, node % nx);
        let x = (0..self.n)
            .map(|a| {
                let i = t % self.x_dims[a];
                t /= self.x_dims[a];
                self.x_origin[a] + i as f64 * self.h
            })
            .collect();
        (x, self.z[k])
    }

    /// Node field from a function of (x, z).
    pub fn sample<F: Fn(&[f64], f64) -> f64>(&self, f: F) -> Vec<f64> {
        (0..self.len()).map(|p| {
            let (x, z) = self.coord(p);
            f(&x, z)
        }).collect()
    }

    /// (A w)_p = Σ_edges c_e (w_p - w_q); the Dirichlet energy is ½ Σ_e c_e (Δw)².
    fn apply_at(&self, w: &[f64], p: usize) -> f64 {
        let nx = self.nx();
        let (k, t) = (p / nx, p % nx);
        let wp = w[p];
        let mut xs = 0.0;
        let mut stride = 1;
        let mut rem = t;
        for a in 0..self.n {
            let i = rem % self.x_dims[a];
            rem /= self.x_dims[a];
            let left = if i > 0 { wp - w[p - stride] } else { 0.0 };
            let right = if i + 1 < self.x_dims[a] { wp - w[p + stride] } else { 0.0 };
            xs += left + right;
            stride *= self.x_dims[a];
        }
        let down = if k > 0 { self.cz[k - 1] * (wp - w[p - nx]) } else { 0.0 };
        let up = if k + 1 < self.z.len() { self.cz[k] * (wp - w[p + nx]) } else { 0.0 };
        self.cx[k] * xs + (down + up)
    }

    fn diag(&self, p: usize) -> f64 {
        let nx = self.nx();
        let (k, t) = (p / nx, p % nx);
        let mut cnt = 0.0;
        let mut rem = t;
        for a in 0..self.n {
            let i = rem % self.x_dims[a];
            rem /= self.x_dims[a];
            cnt += (i > 0) as u8 as f64 + (i + 1 < self.x_dims[a]) as u8 as f64;
        }
        let down = if k > 0 { self.cz[k - 1] } else { 0.0 };
        let up = if k + 1 < self.z.len() { self.cz[k] } else { 0.0 };
        self.cx[k] * cnt + (down + up)
    }

    /// Discrete weighted energy ½ Σ_e c_e (Δw)² (no δ_s factor).
    pub fn energy(&self, w: &[f64]) -> f64 {
        self.edge_energies(w).iter().map(|e| e.0).sum()
    }

    // (energy, centre x, z-lo, z-hi, axis or n for vertical) per edge
    fn edge_energies(&self, w: &[f64]) -> Vec<(f64, Vec<f64>, f64, f64, usize)> {
        let nx = self.nx();
        let mut out = Vec::new();
        for p in 0..self.len() {
            let (k, t) = (p / nx, p % nx);
            let (x, _) = self.coord(p);
            let mut stride = 1;
            let mut rem = t;
            for a in 0..self.n {
                let i = rem % self.x_dims[a];
                rem /= self.x_dims[a];
                if i + 1 < self.x_dims[a] {
                    let dw = w[p + stride] - w[p];
                    let mut c = x.clone();
                    c[a] += 0.5 * self.h;
                    out.push((0.5 * self.cx[k] * dw * dw, c, self.cell_lo[k], self.cell_hi[k], a));
                }
                stride *= self.x_dims[a];
            }
            if k + 1 < self.z.len() {
                let dw = w[p + nx] - w[p];
                out.push((0.5 * self.cz[k] * dw * dw, x, self.z[k], self.z[k + 1], self.n));
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WeightedSolution {
    pub values: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solve the Dirichlet problem with boundary values taken from `boundary` on Dirichlet nodes,
/// by Jacobi-preconditioned conjugate gradients to relative residual `tol`.
pub fn solve_weighted_dirichlet(grid: &WeightedGrid, boundary: &[f64], tol: f64) -> Result<WeightedSolution> {
    let len = grid.len();
    if boundary.len() != len {
        return Err(Error::Usage("boundary vector length does not match the grid".into()));
    }
    if grid.boundary.iter().zip(boundary).any(|(&b, v)| b && !v.is_finite()) {
        return Err(Error::Usage("boundary values must be finite".into()));
    }
    let interior: Vec<usize> = (0..len).filter(|&p| !grid.boundary[p]).collect();
    let mut w: Vec<f64> = (0..len).map(|p| if grid.boundary[p] { boundary[p] } else { 0.0 }).collect();
    let ni = interior.len();
    let apply = |w: &[f64]| -> Vec<f64> { interior.par_iter().map(|&p| grid.apply_at(w, p)).collect() };
    let dinv: Vec<f64> = interior.iter().map(|&p| 1.0 / grid.diag(p)).collect();
    let dotv = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    // r = -A w (boundary contributions with zero interior guess)
    let mut r: Vec<f64> = apply(&w).iter().map(|v| -v).collect();
    let bnorm = dotv(&r, &r).sqrt();
    if bnorm == 0.0 || ni == 0 {
        return Ok(WeightedSolution { values: w, iterations: 0, relative_residual: 0.0 });
    }
    let mut zv: Vec<f64> = r.iter().zip(&dinv).map(|(a, b)| a * b).collect();
    let mut pdir = zv.clone();
    let mut rz = dotv(&r, &zv);
    let mut full = vec![0.0; len];
    let max_iter = 100 * ni.max(1);
    let mut rel = 1.0;
    for it in 1..=max_iter {
        for (i, &p) in interior.iter().enumerate() {
            full[p] = pdir[i];
        }
        let ap = apply(&full);
        let alpha = rz / dotv(&pdir, &ap);
        for (i, &p) in interior.iter().enumerate() {
            w[p] += alpha * pdir[i];
            r[i] -= alpha * ap[i];
        }
        rel = dotv(&r, &r).sqrt() / bnorm;
        if rel <= tol {
            return Ok(WeightedSolution { values: w, iterations: it, relative_residual: rel });
        }
        zv = r.iter().zip(&dinv).map(|(a, b)| a * b).collect();
        let rz_new = dotv(&r, &zv);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..ni {
            pdir[i] = zv[i] + beta * pdir[i];
        }
    }
    Err(Error::Numerical { msg: format!("CG did not converge in {max_iter} iterations"), residual: rel })
}

#[derive(Clone, Debug, Serialize)]
pub struct MaxPrincipleReport {
    pub boundary_min: f64,
    pub boundary_max: f64,
    pub interior_min: f64,
    pub interior_max: f64,
    /// Largest excursion of interior values outside the boundary range (0 when satisfied).
    pub excess: f64,
    pub ok: bool,
}

pub fn check_max_principle(grid: &WeightedGrid, w: &[f64]) -> MaxPrincipleReport {
    let (mut bmin, mut bmax, mut imin, mut imax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (p, &v) in w.iter().enumerate() {
        if grid.boundary[p] {
            bmin = bmin.min(v);
            bmax = bmax.max(v);
        } else {
            imin = imin.min(v);
            imax = imax.max(v);
        }
    }
    let excess = (bmin - imin).max(imax - bmax).max(0.0);
    MaxPrincipleReport { boundary_min: bmin, boundary_max: bmax, interior_min: imin, interior_max: imax, excess, ok: excess <= 1e-12 }
}

/// max |w(x, z) - w(x, -z)| for a grid whose rows are symmetric about 0.
pub fn symmetry_defect(grid: &WeightedGrid, w: &[f64]) -> Result<f64> {
    let nz = grid.z.len();
    if (0..nz).any(|k| (grid.z[k] + grid.z[nz - 1 - k]).abs() > 1e-12 * grid.z[nz - 1].abs()) {
        return Err(config("rows are not symmetric about z = 0"));
    }
    let nx = grid.nx();
    let mut m = 0.0f64;
    for k in 0..nz {
        for t in 0..nx {
            m = m.max((w[k * nx + t] - w[(nz - 1 - k) * nx + t]).abs());
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, Serialize)]
pub struct EnergyMonotonicityReport {
    pub radii: Vec<f64>,
    /// r^{-(n+2-2s)} ∫_{B_r} |z|^a |∇w|².
    pub ratios: Vec<f64>,
    /// Largest decrease between consecutive radii divided by the largest ratio.
    pub relative_violation: f64,
}

/// Energy ratio on balls B_r((x0, 0)); edge energies are split by sub-sampled ball fractions.
pub fn check_energy_monotonicity(grid: &WeightedGrid, w: &[f64], x0: &[f64], radii: &[f64]) -> Result<EnergyMonotonicityReport> {
    if radii.is_empty() || radii.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::Usage("radii must be nonempty and increasing".into()));
    }
    let edges = grid.edge_energies(w);
    let n = grid.n;
    let sub = 4usize;
    let pts = sub.pow(n as u32 + 1);
    let energies: Vec<f64> = radii
        .par_iter()
        .map(|&r| {
            let mut acc = 0.0;
            for (e, c, zlo, zhi, _axis) in &edges {
                if *e == 0.0 {
                    continue;
                }
                // dual box: h in every x-direction around c, [zlo, zhi] vertically
                let dist_c: f64 = c.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let zc = 0.5 * (zlo + zhi);
                let reach = (n as f64).sqrt() * grid.h + 0.5 * (zhi - zlo);
                let dc = (dist_c + zc * zc).sqrt();
                if dc - reach >= r {
                    continue;
                }
                if dc + reach < r {
                    acc += e;
                    continue;
                }
                let mut inside = 0usize;
                for q in 0..pts {
                    let mut rem = q;
                    let mut d2 = 0.0;
                    for a in 0..n {
                        let i = rem % sub;
                        rem /= sub;
                        let x = c[a] + ((i as f64 + 0.5) / sub as f64 - 0.5) * grid.h - x0[a];
                        d2 += x * x;
                    }
                    let z = zlo + (rem as f64 + 0.5) / sub as f64 * (zhi - zlo);
                    if d2 + z * z < r * r {
                        inside += 1;
                    }
                }
                acc += e * inside as f64 / pts as f64;
            }
            // edge energies are ½ c (Δw)²; report ∫ |z|^a |∇w|² = 2 × discrete energy
            2.0 * acc
        })
        .collect();
    let expo = n as f64 + 2.0 - 2.0 * grid.s;
    let ratios: Vec<f64> = radii.iter().zip(&energies).map(|(r, e)| e / r.powf(expo)).collect();
    let maxr = ratios.iter().cloned().fold(0.0, f64::max);
    let viol = ratios.windows(2).map(|p| (p[0] - p[1]).max(0.0)).fold(0.0, f64::max);
    Ok(EnergyMonotonicityReport { radii: radii.to_vec(), ratios, relative_violation: if maxr > 0.0 { viol / maxr } else { 0.0 } })
}

/// sup over interior rows with z ≥ z_min of the flux divergence per unit volume of an extension field component.
pub fn pde_residual(v: &ExtensionField, component: usize, z_min: f64) -> Result<f64> {
    let grid = WeightedGrid::from_extension(v)?;
    let nx = grid.nx();
    let mut w = vec![0.0; grid.len()];
    for k in 0..grid.z.len() {
        for t in 0..nx {
            w[k * nx + t] = v.value(k, t)[component];
        }
    }
    let hn = grid.h.powi(grid.n as i32);
    let mut sup = 0.0f64;
    for p in 0..grid.len() {
        let k = p / nx;
        if grid.boundary[p] || grid.z[k] < z_min {
            continue;
        }
        let vol = hn * (grid.cell_hi[k] - grid.cell_lo[k]);
        sup = sup.max((grid.apply_at(&w, p) / vol).abs());
    }
    Ok(sup)
}

/// Harmonic replacement of every component of an extension field inside its box.
pub fn harmonic_replacement(v: &ExtensionField, tol: f64) -> Result<(WeightedGrid, Vec<WeightedSolution>)> {
    let grid = WeightedGrid::from_extension(v)?;
    let nx = grid.nx();
    let mut sols = Vec::new();
    for c in 0..v.d {
        let mut b = vec![0.0; grid.len()];
        for k in 0..grid.z.len() {
            for t in 0..nx {
                b[k * nx + t] = v.value(k, t)[c];
            }
        }
        sols.push(solve_weighted_dirichlet(&grid, &b, tol)?);
    }
    Ok((grid, sols))
}

/// Data of an extension field component laid out on its weighted grid.
pub fn extension_values(v: &ExtensionField, grid: &WeightedGrid, component: usize) -> Vec<f64> {
    let nx = grid.nx();
    let mut w = vec![0.0; grid.len()];
    for k in 0..grid.z.len() {
        for t in 0..nx {
            w[k * nx + t] = v.value(k, t)[component];
        }
    }
    w
}
