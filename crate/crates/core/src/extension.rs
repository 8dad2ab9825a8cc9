//! Poisson extension to the upper half-space, the weighted Dirichlet energy,
//! density functions and the first inner variation.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{config, domain, Error, Result};
use crate::field::{dot, Field};
use crate::lattice::Lattice;
use crate::nonlocal;
use crate::quadrature::{gauss_legendre, gl_integrate};

pub const DEFAULT_LEVELS: usize = 48;
/// First z-cell width as a fraction of h.
pub const DEFAULT_FIRST_CELL: f64 = 0.003;

/// Vertical cells [edges[k], edges[k+1]] with midpoints `z`; edges[0] = 0.
#[derive(Clone, Debug, Serialize)]
pub struct HalfSpaceGrid {
    pub edges: Vec<f64>,
    pub z: Vec<f64>,
    pub dz: Vec<f64>,
}

impl HalfSpaceGrid {
    fn from_widths(widths: &[f64]) -> Self {
        let mut edges = vec![0.0];
        for w in widths {
            edges.push(edges.last().unwrap() + w);
        }
        let z = edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect();
        Self { edges, z, dz: widths.to_vec() }
    }

    pub fn uniform(h_z: f64, levels: usize) -> Result<Self> {
        if !(h_z > 0.0) || levels == 0 {
            return Err(config("uniform z-grid needs h_z > 0 and at least one level"));
        }
        Ok(Self::from_widths(&vec![h_z; levels]))
    }

    /// Geometric widths w_k = first·ρ^k with ρ chosen so the top edge is `z_max`.
    pub fn geometric(first: f64, levels: usize, z_max: f64) -> Result<Self> {
        if !(first > 0.0) || levels < 2 || !(z_max > first * levels as f64) {
            return Err(config("geometric z-grid needs first > 0, levels >= 2 and z_max > levels·first"));
        }
        let total = |q: f64| first * (q.powi(levels as i32) - 1.0) / (q - 1.0);
        let (mut lo, mut hi) = (1.0 + 1e-12, 2.0);
        while total(hi) < z_max {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if total(mid) < z_max {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let q = 0.5 * (lo + hi);
        let widths: Vec<f64> = (0..levels).map(|k| first * q.powi(k as i32)).collect();
        Ok(Self::from_widths(&widths))
    }

    /// 48 geometric levels from a first cell of 0.003h up to z_max = L_ext.
    pub fn default_for(lat: &Lattice) -> Result<Self> {
        Self::geometric(DEFAULT_FIRST_CELL * lat.h, DEFAULT_LEVELS, lat.l_ext)
    }

    pub fn levels(&self) -> usize {
        self.z.len()
    }

    pub fn z_max(&self) -> f64 {
        *self.edges.last().unwrap()
    }
}

/// How the part of the Poisson integral beyond the lattice box is treated.
#[derive(Clone)]
pub enum ExteriorFill {
    /// Divide by the in-box mass so every row has unit mass (exact for constants).
    Renormalize,
    /// Data vanish outside the box.
    Zero,
    /// Data equal the constant outside the box.
    Constant(Vec<f64>),
    /// Data given by a function outside the box, integrated by quadrature.
    Map(Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>),
}

impl std::fmt::Debug for ExteriorFill {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Renormalize => write!(f, "Renormalize"),
            Self::Zero => write!(f, "Zero"),
            Self::Constant(c) => write!(f, "Constant({c:?})"),
            Self::Map(_) => write!(f, "Map(..)"),
        }
    }
}

impl ExteriorFill {
    /// Fill implied by the lattice tail mode.
    pub fn from_lattice(lat: &Lattice) -> Self {
        match lat.tail_value() {
            Some(c) => Self::Constant(c.to_vec()),
            None => Self::Renormalize,
        }
    }
}

/// Lattice index box [lo, hi] (inclusive) of extension targets.
#[derive(Clone, Debug, Serialize)]
pub struct TargetBox {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

impl TargetBox {
    pub fn full(lat: &Lattice) -> Self {
        Self { lo: vec![0; lat.dim()], hi: vec![lat.side - 1; lat.dim()] }
    }

    /// Nodes with every coordinate in [-half_width, half_width].
    pub fn centered(lat: &Lattice, half_width: f64) -> Self {
        let m = ((half_width / lat.h).round() as usize).min(lat.k);
        Self { lo: vec![lat.k - m; lat.dim()], hi: vec![lat.k + m; lat.dim()] }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l + 1).collect()
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Values of u^e on target nodes × z-levels, with the trace u at z = 0.
#[derive(Clone, Debug)]
pub struct ExtensionField {
    pub n: usize,
    pub d: usize,
    pub h: f64,
    pub s: f64,
    pub delta_s: f64,
    pub targets: TargetBox,
    /// x-coordinate of target index 0 along each axis.
    pub origin: Vec<f64>,
    pub grid: HalfSpaceGrid,
    /// Trace values, target-major (d per target).
    pub trace: Vec<f64>,
    /// Level-major values: level k, target t, component c at (k·T + t)·d + c.
    pub values: Vec<f64>,
    /// max of |1 - in-box mass - exterior mass| over sampled (target, level) rows, for Map fills.
    pub mass_defect: f64,
}

impl ExtensionField {
    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.targets.dims()
    }

    pub fn target_coord(&self, t: usize) -> Vec<f64> {
        let dims = self.dims();
        let mut rem = t;
        (0..self.n)
            .map(|a| {
                let i = rem % dims[a];
                rem /= dims[a];
                self.origin[a] + i as f64 * self.h
            })
            .collect()
    }

    /// Value at level `k` (k = 0 is the trace, k ≥ 1 is grid level k-1).
    pub fn value(&self, k: usize, t: usize) -> &[f64] {
        if k == 0 {
            &self.trace[t * self.d..(t + 1) * self.d]
        } else {
            let base = ((k - 1) * self.n_targets() + t) * self.d;
            &self.values[base..base + self.d]
        }
    }

    /// Maximum absolute value over all stored entries.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn stride(&self, axis: usize) -> usize {
        self.dims()[..axis].iter().product()
    }

    fn axis_index(&self, t: usize, axis: usize) -> usize {
        (t / self.stride(axis)) % self.dims()[axis]
    }

    /// ∂v/∂x_axis at (level k ≥ 1, target t): central inside the box, one-sided at the edge.
    fn dx(&self, k: usize, t: usize, axis: usize, out: &mut [f64]) {
        let dims = self.dims();
        let st = self.stride(axis);
        let i = self.axis_index(t, axis);
        let (tm, tp, den) = if dims[axis] == 1 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        } else if i == 0 {
            (t, t + st, self.h)
        } else if i == dims[axis] - 1 {
            (t - st, t, self.h)
        } else {
            (t - st, t + st, 2.0 * self.h)
        };
        let (a, b) = (self.value(k, tm), self.value(k, tp));
        for c in 0..self.d {
            out[c] = (b[c] - a[c]) / den;
        }
    }

    /// ∂v/∂z at level k ≥ 1 using the trace at z = 0 as the lowest point.
    fn dz(&self, k: usize, t: usize, out: &mut [f64]) {
        let m = self.grid.levels();
        let zk = |j: usize| if j == 0 { 0.0 } else { self.grid.z[j - 1] };
        if k == m {
            let (a, b) = (self.value(k - 1, t), self.value(k, t));
            let den = zk(k) - zk(k - 1);
            for c in 0..self.d {
                out[c] = (b[c] - a[c]) / den;
            }
            return;
        }
        let h1 = zk(k) - zk(k - 1);
        let h2 = zk(k + 1) - zk(k);
        let (fm, f0, fp) = (self.value(k - 1, t), self.value(k, t), self.value(k + 1, t));
        for c in 0..self.d {
            out[c] = (h1 * h1 * fp[c] - h2 * h2 * fm[c] + (h2 * h2 - h1 * h1) * f0[c]) / (h1 * h2 * (h1 + h2));
        }
    }

    /// Full gradient at (level k ≥ 1, target t): n x-derivatives then the z-derivative, each with d components.
    pub fn gradient(&self, k: usize, t: usize) -> Vec<f64> {
        let d = self.d;
        let mut g = vec![0.0; (self.n + 1) * d];
        for a in 0..self.n {
            self.dx(k, t, a, &mut g[a * d..(a + 1) * d]);
        }
        self.dz(k, t, &mut g[self.n * d..]);
        g
    }

    /// |∇v|² at (level k ≥ 1, target t). In x this is the mean of the squared forward and backward
    /// quotients: unlike a squared central difference it does not lose energy where v turns across
    /// one or two lattice cells. The graded z-grid resolves the trace, so z uses the 3-point formula.
    fn grad_sq(&self, k: usize, t: usize) -> f64 {
        let dims = self.dims();
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let v0 = self.value(k, t);
        let mut total = 0.0;
        for axis in 0..self.n {
            let st = self.stride(axis);
            let i = self.axis_index(t, axis);
            let mut parts = 0.0;
            let mut cnt = 0.0;
            if i > 0 {
                parts += sq(v0, self.value(k, t - st));
                cnt += 1.0;
            }
            if i + 1 < dims[axis] {
                parts += sq(v0, self.value(k, t + st));
                cnt += 1.0;
            }
            if cnt > 0.0 {
                total += parts / (cnt * self.h * self.h);
            }
        }
        let mut gz = vec![0.0; self.d];
        self.dz(k, t, &mut gz);
        total += gz.iter().map(|g| g * g).sum::<f64>();
        total
    }

    /// Per-cell z^a |∇v|² (level-major, without δ_s/2 and without volume).
    pub fn energy_density(&self) -> Vec<f64> {
        let a = 1.0 - 2.0 * self.s;
        let nt = self.n_targets();
        (0..self.grid.levels() * nt)
            .into_par_iter()
            .map(|e| {
                let (k, t) = (e / nt, e % nt);
                self.grid.z[k].powf(a) * self.grad_sq(k + 1, t)
            })
            .collect()
    }

    /// Cell volume h^n dz_k of level k (0-based grid level).
    pub fn cell_volume(&self, k: usize) -> f64 {
        self.h.powi(self.n as i32) * self.grid.dz[k]
    }

    /// True when the ball of radius r about x0 (on z = 0) fits inside the target box and grid.
    pub fn contains_half_ball(&self, x0: &[f64], r: f64) -> bool {
        let dims = self.dims();
        let tol = 1e-9 * self.h;
        r <= self.grid.z_max() + tol
            && (0..self.n).all(|a| {
                let lo = self.origin[a];
                let hi = lo + (dims[a] - 1) as f64 * self.h;
                x0[a] - r >= lo - tol && x0[a] + r <= hi + tol
            })
    }
}

/// σ z^{2s} / (|x|² + z²)^{(n+2s)/2}.
pub fn poisson_kernel(x: &[f64], z: f64, sigma: f64, s: f64) -> f64 {
    let n = x.len() as f64;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    sigma * z.powf(2.0 * s) * (r2 + z * z).powf(-(n + 2.0 * s) / 2.0)
}

// Mass of the n = 1 kernel on [0, t·z] for t ≥ 0 (odd extension for t < 0).
fn mass_1d(t: f64, s: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    let w = 1.0 / (1.0 + t * t);
    let v = 0.5 * (1.0 - statrs::function::beta::beta_reg(s, 0.5, w));
    v.copysign(t)
}

// Mass of the n = 2 kernel on [0,x]×[0,y] (x, y ≥ 0), via the directional form.
fn quadrant_mass(x: f64, y: f64, z: f64, s: f64, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    if x <= 0.0 || y <= 0.0 {
        return 0.0;
    }
    let th = y.atan2(x);
    let f = |r: f64| 1.0 - (z * z / (z * z + r * r)).powf(s);
    let a = gl_integrate(|t| f(x / t.cos()), 0.0, th, rule);
    let b = gl_integrate(|t| f(y / t.sin()), th, 0.5 * PI, rule);
    (a + b) / (2.0 * PI)
}

fn signed_quadrant(x: f64, y: f64, z: f64, s: f64, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    x.signum() * y.signum() * quadrant_mass(x.abs(), y.abs(), z, s, rule)
}

const NEAR_CELLS: usize = 3;

/// Kernel mass of the lattice cell centred at offset `o·h` from the target, at height z.
pub fn cell_mass(o: &[isize], h: f64, z: f64, sigma: f64, s: f64) -> f64 {
    let n = o.len();
    let near = o.iter().all(|&v| v.unsigned_abs() <= NEAR_CELLS);
    let lo: Vec<f64> = o.iter().map(|&v| (v as f64 - 0.5) * h).collect();
    let hi: Vec<f64> = o.iter().map(|&v| (v as f64 + 0.5) * h).collect();
    if near {
        match n {
            1 => return mass_1d(hi[0] / z, s) - mass_1d(lo[0] / z, s),
            2 => {
                let rule = gauss_legendre(32);
                let q = |a: f64, b: f64| signed_quadrant(a, b, z, s, &rule);
                return q(hi[0], hi[1]) - q(lo[0], hi[1]) - q(hi[0], lo[1]) + q(lo[0], lo[1]);
            }
            _ => {}
        }
    }
    let rule = gauss_legendre(6);
    match n {
        1 => gl_integrate(|y| poisson_kernel(&[y], z, sigma, s), lo[0], hi[0], &rule),
        2 => gl_integrate(
            |y1| gl_integrate(|y2| poisson_kernel(&[y1, y2], z, sigma, s), lo[1], hi[1], &rule),
            lo[0],
            hi[0],
            &rule,
        ),
        _ => f64::NAN,
    }
}

/// ∫_{R^n \ [-r, r]^n} P(x - y, z) g(y) dy for n ∈ {1, 2}, in the mass variable of the kernel.
fn exterior_integral(x: &[f64], r: f64, z: f64, s: f64, d: usize, g: &dyn Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let rule = gauss_legendre(16);
    let mut out = vec![0.0; d];
    let mut add = |y: &[f64], wgt: f64| {
        let v = g(y);
        for c in 0..d {
            out[c] += wgt * v[c];
        }
    };
    match x.len() {
        1 => {
            let beta = statrs::function::beta::beta(s, 0.5);
            for side in [1.0f64, -1.0] {
                let rho = r - side * x[0];
                let w_rho = z * z / (z * z + rho * rho);
                let yat = |w: f64| x[0] + side * z * (1.0 / w - 1.0).max(0.0).sqrt();
                // w in (0, min(w_rho, 1/2)]: v = w^s removes the w^{s-1} endpoint factor
                let va = w_rho.min(0.5).powf(s);
                let (c0, hl) = (0.5 * va, 0.5 * va);
                for (t, wt) in rule.0.iter().zip(&rule.1) {
                    let v = c0 + hl * t;
                    let w = v.powf(1.0 / s);
                    add(&[yat(w)], wt * hl * (1.0 - w).powf(-0.5) / (2.0 * s * beta));
                }
                if w_rho > 0.5 {
                    // w in [1/2, w_rho]: q = sqrt(1 - w) removes the (1-w)^{-1/2} factor
                    let (qa, qb) = ((1.0 - w_rho).sqrt(), 0.5f64.sqrt());
                    let (c0, hl) = (0.5 * (qa + qb), 0.5 * (qb - qa));
                    for (t, wt) in rule.0.iter().zip(&rule.1) {
                        let q = c0 + hl * t;
                        let w = 1.0 - q * q;
                        add(&[yat(w)], wt * hl * w.powf(s - 1.0) / beta);
                    }
                }
            }
        }
        2 => {
            let rho = |th: f64| {
                let (sn, cs) = th.sin_cos();
                let tx = if cs.abs() > 1e-300 { (r - x[0] * cs.signum()) / cs.abs() } else { f64::INFINITY };
                let ty = if sn.abs() > 1e-300 { (r - x[1] * sn.signum()) / sn.abs() } else { f64::INFINITY };
                tx.min(ty)
            };
            let mut breaks: Vec<f64> = [(r - x[1]).atan2(r - x[0]), (r - x[1]).atan2(-r - x[0]), (-r - x[1]).atan2(-r - x[0]), (-r - x[1]).atan2(r - x[0])]
                .iter()
                .map(|&a| if a < 0.0 { a + 2.0 * PI } else { a })
                .collect();
            breaks.extend([0.0, 2.0 * PI]);
            breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for win in breaks.windows(2) {
                if win[1] <= win[0] {
                    continue;
                }
                let (tc, th) = (0.5 * (win[0] + win[1]), 0.5 * (win[1] - win[0]));
                for (tt, tw) in rule.0.iter().zip(&rule.1) {
                    let theta = tc + th * tt;
                    let (sn, cs) = theta.sin_cos();
                    let vmax = (z * z / (z * z + rho(theta).powi(2))).powf(s);
                    let (vc, vh) = (0.5 * vmax, 0.5 * vmax);
                    for (vt, vw) in rule.0.iter().zip(&rule.1) {
                        let v = vc + vh * vt;
                        let rad = z * (v.powf(-1.0 / s) - 1.0).max(0.0).sqrt();
                        add(&[x[0] + rad * cs, x[1] + rad * sn], tw * th * vw * vh / (2.0 * PI));
                    }
                }
            }
        }
        _ => {}
    }
    out
}

/// u^e(x_t, z_k) = Σ_j W_j(x_t, z_k) u_j with cell-integrated kernel masses W_j, plus the exterior part.
pub fn extend(lat: &Lattice, u: &Field, grid: &HalfSpaceGrid, targets: &TargetBox, fill: &ExteriorFill) -> Result<ExtensionField> {
    let n = lat.dim();
    if n > 2 {
        return Err(config("the extension is implemented for n <= 2"));
    }
    u.check_lattice(lat)?;
    let d = u.d;
    if let ExteriorFill::Constant(c) = fill {
        if c.len() != d {
            return Err(config("exterior constant must have d components"));
        }
    }
    let s = lat.params.s;
    let sigma = lat.params.sigma_ns;
    let k = lat.k as isize;
    let width = 4 * lat.k + 1;
    let table_len = width.pow(n as u32);
    let m = grid.levels();
    // mass tables per level, indexed like the lattice offset table
    let tables: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|lev| {
            let z = grid.z[lev];
            (0..table_len)
                .map(|e| {
                    let mut rem = e;
                    let o: Vec<isize> = (0..n)
                        .map(|_| {
                            let v = (rem % width) as isize - 2 * k;
                            rem /= width;
                            v
                        })
                        .collect();
                    cell_mass(&o, lat.h, z, sigma, s)
                })
                .collect()
        })
        .collect();
    let dims = targets.dims();
    let nt = targets.len();
    let origin: Vec<f64> = targets.lo.iter().map(|&i| lat.axis_coord(i)).collect();
    let target_node = |t: usize| {
        let mut rem = t;
        let idx: Vec<usize> = (0..n)
            .map(|a| {
                let i = rem % dims[a];
                rem /= dims[a];
                targets.lo[a] + i
            })
            .collect();
        lat.node_of(&idx)
    };
    let target_nodes: Vec<usize> = (0..nt).map(target_node).collect();
    let box_r = lat.l_ext + 0.5 * lat.h;
    let one: &(dyn Fn(&[f64]) -> Vec<f64> + Sync) = &|_| vec![1.0];
    let rows: Vec<(Vec<f64>, f64)> = (0..m * nt)
        .into_par_iter()
        .map(|e| {
            let (lev, t) = (e / nt, e % nt);
            let z = grid.z[lev];
            let tab = &tables[lev];
            let p = target_nodes[t];
            let base = lat.row_base(p);
            let mut acc = vec![0.0; d];
            let mut mass = 0.0;
            for j in 0..lat.n_nodes {
                let w = tab[base - lat.lin4(j)];
                mass += w;
                let uj = u.get(j);
                for c in 0..d {
                    acc[c] += w * uj[c];
                }
            }
            let x = lat.coord(p);
            let mut defect = 0.0;
            match fill {
                ExteriorFill::Renormalize => acc.iter_mut().for_each(|a| *a /= mass),
                ExteriorFill::Zero => {}
                ExteriorFill::Constant(c) => {
                    for (a, cv) in acc.iter_mut().zip(c) {
                        *a += (1.0 - mass) * cv;
                    }
                }
                ExteriorFill::Map(g) => {
                    let ext = exterior_integral(&x, box_r, z, s, d, g.as_ref());
                    for (a, b) in acc.iter_mut().zip(&ext) {
                        *a += b;
                    }
                    // quadrature check on a sparse deterministic subset of rows
                    if t % 61 == 0 {
                        let ext_mass = exterior_integral(&x, box_r, z, s, 1, one)[0];
                        defect = (1.0 - mass - ext_mass).abs();
                    }
                }
            }
            (acc, defect)
        })
        .collect();
    let mut values = Vec::with_capacity(m * nt * d);
    let mut mass_defect = 0.0f64;
    for (v, def) in rows {
        values.extend_from_slice(&v);
        mass_defect = mass_defect.max(def);
    }
    let mut trace = Vec::with_capacity(nt * d);
    for &p in &target_nodes {
        trace.extend_from_slice(u.get(p));
    }
    Ok(ExtensionField { n, d, h: lat.h, s, delta_s: lat.params.delta_s, targets: targets.clone(), origin, grid: grid.clone(), trace, values, mass_defect })
}

/// Mass of the kernel outside the lattice box seen from x at height z (quadrature in the mass variable).
pub fn exterior_mass(lat: &Lattice, x: &[f64], z: f64) -> f64 {
    exterior_integral(x, lat.l_ext + 0.5 * lat.h, z, lat.params.s, 1, &|_| vec![1.0])[0]
}

/// (δ_s/2) Σ_cells z^a |∇v|² h^n dz over cells whose midpoint satisfies `region` (all cells if None).
pub fn weighted_energy(v: &ExtensionField, region: Option<&(dyn Fn(&[f64], f64) -> bool + Sync)>) -> f64 {
    let dens = v.energy_density();
    let nt = v.n_targets();
    let per_level: Vec<f64> = (0..v.grid.levels())
        .into_par_iter()
        .map(|k| {
            let z = v.grid.z[k];
            let mut acc = 0.0;
            for t in 0..nt {
                if let Some(reg) = region {
                    if !reg(&v.target_coord(t), z) {
                        continue;
                    }
                }
                acc += dens[k * nt + t];
            }
            acc * v.cell_volume(k)
        })
        .collect();
    0.5 * v.delta_s * per_level.iter().sum::<f64>()
}

fn half_ball_energy(v: &ExtensionField, dens: &[f64], x0: &[f64], r: f64) -> f64 {
    half_ball_energies(v, dens, x0, &[r])[0]
}

/// Weighted energies over the half balls B_r^+(x0) for several radii in one sweep,
/// visiting only the targets inside the box of the largest radius.
pub(crate) fn half_ball_energies(v: &ExtensionField, dens: &[f64], x0: &[f64], radii: &[f64]) -> Vec<f64> {
    let nt = v.n_targets();
    let dims = v.dims();
    let rmax = radii.iter().cloned().fold(0.0, f64::max);
    let mut lo = vec![0usize; v.n];
    let mut hi = vec![0usize; v.n];
    for a in 0..v.n {
        let c = (x0[a] - v.origin[a]) / v.h;
        let w = rmax / v.h + 1.0;
        lo[a] = (c - w).floor().max(0.0) as usize;
        hi[a] = ((c + w).ceil().max(0.0) as usize).min(dims[a] - 1);
    }
    let window: Vec<(usize, f64)> = (0..nt)
        .filter_map(|t| {
            let mut rem = t;
            let mut r2 = 0.0;
            for a in 0..v.n {
                let i = rem % dims[a];
                rem /= dims[a];
                if i < lo[a] || i > hi[a] {
                    return None;
                }
                let x = v.origin[a] + i as f64 * v.h - x0[a];
                r2 += x * x;
            }
            (r2 < rmax * rmax).then_some((t, r2))
        })
        .collect();
    let mut out = vec![0.0; radii.len()];
    for k in 0..v.grid.levels() {
        let z = v.grid.z[k];
        if z >= rmax {
            break;
        }
        let vol = v.cell_volume(k);
        for &(t, r2) in &window {
            let rho2 = r2 + z * z;
            let e = dens[k * nt + t] * vol;
            for (o, r) in out.iter_mut().zip(radii) {
                if rho2 < r * r {
                    *o += e;
                }
            }
        }
    }
    out.iter().map(|e| 0.5 * v.delta_s * e).collect()
}

/// Θ_s(v, x0, r) = r^{2s-n} × weighted energy over the half ball B_r^+(x0) (cells by midpoint).
pub fn density_theta(v: &ExtensionField, x0: &[f64], r: f64) -> Result<f64> {
    if !v.contains_half_ball(x0, r) {
        return Err(domain(format!("half ball of radius {r} around {x0:?} leaves the extension grid")));
    }
    let dens = v.energy_density();
    Ok(r.powf(2.0 * v.s - v.n as f64) * half_ball_energy(v, &dens, x0, r))
}

/// θ_s(u, x0, r) = r^{2s-n} E_s(u, D_r(x0)) on the lattice.
pub fn density_theta_small(lat: &Lattice, u: &Field, x0: &[f64], r: f64) -> f64 {
    let tol = 1e-9 * lat.h;
    let mask: Vec<bool> = (0..lat.n_nodes)
        .map(|p| {
            let x = lat.coord(p);
            x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() <= r + tol
        })
        .collect();
    r.powf(2.0 * lat.params.s - lat.dim() as f64) * nonlocal::energy_masked(lat, u, &mask)
}

#[derive(Clone, Debug, Serialize)]
pub struct DensityProfile {
    pub center: Vec<f64>,
    pub radii: Vec<f64>,
    pub theta_vals: Vec<f64>,
    pub theta_small_vals: Vec<f64>,
    /// Monotonicity remainder δ_s ∫ z^a |(X - X0)·∇v|² / |X - X0|^{n+2-2s} over each annulus.
    pub remainder: Vec<f64>,
    /// |ΔΘ - remainder| per annulus.
    pub remainder_gap: Vec<f64>,
    pub xi_estimate: f64,
    /// Largest decrease Θ(r_k) - Θ(r_{k+1}) (0 if nondecreasing).
    pub violation: f64,
}

impl DensityProfile {
    /// CSV rows r, Theta, theta_small, remainder_gap (gap of the annulus ending at r; empty for the first radius).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,Theta,theta_small,remainder_gap\n");
        for k in 0..self.radii.len() {
            let gap = if k == 0 { String::new() } else { format!("{:?}", self.remainder_gap[k - 1]) };
            out.push_str(&format!("{:?},{:?},{:?},{}\n", self.radii[k], self.theta_vals[k], self.theta_small_vals[k], gap));
        }
        out
    }
}

/// Θ, θ and the monotonicity remainder at each radius about x0.
pub fn monotonicity_profile(lat: &Lattice, u: &Field, v: &ExtensionField, x0: &[f64], radii: &[f64]) -> Result<DensityProfile> {
    if radii.windows(2).any(|w| w[1] <= w[0]) || radii.is_empty() {
        return Err(Error::Usage("radii must be nonempty and strictly increasing".into()));
    }
    for &r in radii {
        if !v.contains_half_ball(x0, r) {
            return Err(domain(format!("half ball of radius {r} leaves the extension grid")));
        }
    }
    let n = v.n;
    let s = v.s;
    let a = 1.0 - 2.0 * s;
    let dens = v.energy_density();
    let theta_vals: Vec<f64> = half_ball_energies(v, &dens, x0, radii).iter().zip(radii).map(|(e, r)| r.powf(2.0 * s - n as f64) * e).collect();
    let theta_small_vals: Vec<f64> = radii.iter().map(|&r| density_theta_small(lat, u, x0, r)).collect();
    let nt = v.n_targets();
    let d = v.d;
    let mut remainder = vec![0.0; radii.len() - 1];
    for k in 0..v.grid.levels() {
        let z = v.grid.z[k];
        if z >= *radii.last().unwrap() {
            break;
        }
        for t in 0..nt {
            let x = v.target_coord(t);
            let rel: Vec<f64> = x.iter().zip(x0).map(|(p, q)| p - q).collect();
            let rho = (rel.iter().map(|q| q * q).sum::<f64>() + z * z).sqrt();
            let Some(slot) = radii.windows(2).position(|w| rho >= w[0] && rho < w[1]) else { continue };
            let g = v.gradient(k + 1, t);
            let mut radial2 = 0.0;
            for c in 0..d {
                let mut dr = z * g[n * d + c];
                for ax in 0..n {
                    dr += rel[ax] * g[ax * d + c];
                }
                radial2 += dr * dr;
            }
            remainder[slot] += v.delta_s * z.powf(a) * radial2 / rho.powf(n as f64 + 2.0 - 2.0 * s) * v.cell_volume(k);
        }
    }
    let remainder_gap: Vec<f64> = (0..remainder.len()).map(|i| ((theta_vals[i + 1] - theta_vals[i]) - remainder[i]).abs()).collect();
    let violation = theta_vals.windows(2).map(|w| (w[0] - w[1]).max(0.0)).fold(0.0, f64::max);
    let mut profile = DensityProfile {
        center: x0.to_vec(),
        radii: radii.to_vec(),
        theta_vals,
        theta_small_vals,
        remainder,
        remainder_gap,
        xi_estimate: 0.0,
        violation,
    };
    profile.xi_estimate = xi_estimate(&profile, lat.h);
    Ok(profile)
}

/// Linear extrapolation to r = 0 of Θ over the three smallest radii ≥ 4h, clamped at 0.
pub fn xi_estimate(profile: &DensityProfile, h: f64) -> f64 {
    xi_from_samples(&profile.radii, &profile.theta_vals, h)
}

pub(crate) fn xi_from_samples(radii: &[f64], theta: &[f64], h: f64) -> f64 {
    let pts: Vec<(f64, f64)> = radii.iter().zip(theta).filter(|(r, _)| **r >= 4.0 * h * (1.0 - 1e-9)).map(|(r, t)| (*r, *t)).take(3).collect();
    match pts.len() {
        0 => theta.first().copied().unwrap_or(0.0).max(0.0),
        1 => pts[0].1.max(0.0),
        m => {
            let mf = m as f64;
            let mr = pts.iter().map(|p| p.0).sum::<f64>() / mf;
            let mt = pts.iter().map(|p| p.1).sum::<f64>() / mf;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mr) * (p.1 - mt)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mr) * (p.0 - mr)).sum();
            let slope = sxy / sxx;
            (mt - slope * mr).max(0.0)
        }
    }
}

/// Central-difference gradient of a lattice field at node p: n blocks of d components.
pub fn lattice_gradient(lat: &Lattice, f: &Field, p: usize) -> Vec<f64> {
    let n = lat.dim();
    let d = f.d;
    let idx = lat.multi_index(p);
    let mut g = vec![0.0; n * d];
    for a in 0..n {
        let mut lo = idx.clone();
        let mut hi = idx.clone();
        let mut den = 2.0 * lat.h;
        if idx[a] == 0 {
            den = lat.h;
        } else {
            lo[a] -= 1;
        }
        if idx[a] == lat.side - 1 {
            den = lat.h;
        } else {
            hi[a] += 1;
        }
        let (fl, fh) = (f.get(lat.node_of(&lo)), f.get(lat.node_of(&hi)));
        for c in 0..d {
            g[a * d + c] = (fh[c] - fl[c]) / den;
        }
    }
    g
}

/// Smooth vertical cutoff: 1 below z_max/4, 0 above z_max/2. Returns (ψ, ψ').
pub fn vertical_cutoff(z: f64, z_max: f64) -> (f64, f64) {
    let (a, b) = (0.25 * z_max, 0.5 * z_max);
    if z <= a {
        (1.0, 0.0)
    } else if z >= b {
        (0.0, 0.0)
    } else {
        let t = (z - a) / (b - a);
        (1.0 - t * t * (3.0 - 2.0 * t), -6.0 * t * (1.0 - t) / (b - a))
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct InnerVariation {
    /// Extension-side quadrature with X = (X(x) ψ(z), 0).
    pub a: f64,
    /// -⟨(-Δ)^s_h u, X·∇_h u⟩_h.
    pub b: f64,
}

/// Evaluation B only: -⟨(-Δ)^s_h u, X·∇_h u⟩ summed over Ω.
pub fn inner_variation_b(lat: &Lattice, u: &Field, x_field: &Field) -> Result<f64> {
    let lap = nonlocal::frac_laplacian_strong(lat, u);
    inner_variation_b_with(lat, u, x_field, &lap)
}

pub(crate) fn inner_variation_b_with(lat: &Lattice, u: &Field, x_field: &Field, lap: &Field) -> Result<f64> {
    let n = lat.dim();
    if x_field.d != n {
        return Err(Error::Usage("vector field X must have n components".into()));
    }
    let hn = lat.cell_volume();
    let d = u.d;
    let mut acc = 0.0;
    for (pos, &p) in lat.omega_nodes.iter().enumerate() {
        let xv = x_field.get(p);
        if xv.iter().all(|&v| v == 0.0) {
            continue;
        }
        let g = lattice_gradient(lat, u, p);
        let lp = lap.get(pos);
        for c in 0..d {
            let mut xg = 0.0;
            for a in 0..n {
                xg += xv[a] * g[a * d + c];
            }
            acc += lp[c] * xg;
        }
    }
    Ok(-hn * acc)
}

/// First inner variation of the energy along X (supported in Ω), evaluated two ways.
pub fn first_inner_variation(lat: &Lattice, u: &Field, x_field: &Field, v: &ExtensionField) -> Result<InnerVariation> {
    let n = lat.dim();
    if x_field.d != n {
        return Err(Error::Usage("vector field X must have n components".into()));
    }
    for &e in &lat.ext_nodes {
        if x_field.get(e).iter().any(|&c| c != 0.0) {
            return Err(crate::error::precondition("X must vanish outside Ω"));
        }
    }
    let b = inner_variation_b(lat, u, x_field)?;
    let z_max = v.grid.z_max();
    let a_exp = 1.0 - 2.0 * v.s;
    let d = v.d;
    let nt = v.n_targets();
    // X and its x-gradient at the targets
    let xs: Vec<(Vec<f64>, Vec<f64>)> = (0..nt)
        .map(|t| {
            let p = lat.nearest_node(&v.target_coord(t));
            (x_field.get(p).to_vec(), lattice_gradient(lat, x_field, p))
        })
        .collect();
    let per_level: Vec<f64> = (0..v.grid.levels())
        .into_par_iter()
        .map(|k| {
            let z = v.grid.z[k];
            let (psi, dpsi) = vertical_cutoff(z, z_max);
            if psi == 0.0 && dpsi == 0.0 {
                return 0.0;
            }
            let mut acc = 0.0;
            for t in 0..nt {
                let (xv, xg) = &xs[t];
                if xv.iter().all(|&c| c == 0.0) && xg.iter().all(|&c| c == 0.0) {
                    continue;
                }
                let g = v.gradient(k + 1, t);
                let grad2: f64 = g.iter().map(|q| q * q).sum();
                let div: f64 = (0..n).map(|a| xg[a * n + a]).sum::<f64>() * psi;
                let mut cross = 0.0;
                for i in 0..n {
                    for j in 0..=n {
                        // ∂_j X_i: x-derivatives scale with ψ, the z-derivative is X_i ψ'
                        let dxi = if j < n { xg[j * n + i] * psi } else { xv[i] * dpsi };
                        if dxi == 0.0 {
                            continue;
                        }
                        cross += dot(&g[i * d..(i + 1) * d], &g[j * d..(j + 1) * d]) * dxi;
                    }
                }
                acc += z.powf(a_exp) * (grad2 * div - 2.0 * cross);
            }
            acc * v.cell_volume(k)
        })
        .collect();
    Ok(InnerVariation { a: 0.5 * v.delta_s * per_level.iter().sum::<f64>(), b })
}

const EXTENSION_MAGIC: &str = "FRACMAP-EXTENSION 1";

/// Text header like the field dump, then little-endian f64 blocks: the z-cell edges
/// (levels + 1), the trace (targets × d) and the level-major values (levels × targets × d).
pub fn write_extension_dump<W: std::io::Write>(mut w: W, v: &ExtensionField) -> Result<()> {
    let join = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    writeln!(w, "{EXTENSION_MAGIC}")?;
    writeln!(w, "n {}", v.n)?;
    writeln!(w, "d {}", v.d)?;
    writeln!(w, "h {:?}", v.h)?;
    writeln!(w, "s {:?}", v.s)?;
    writeln!(w, "lo {}", join(&v.targets.lo))?;
    writeln!(w, "hi {}", join(&v.targets.hi))?;
    writeln!(w, "origin {}", v.origin.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" "))?;
    writeln!(w, "levels {}", v.grid.levels())?;
    writeln!(w, "mass_defect {:?}", v.mass_defect)?;
    writeln!(w, "end")?;
    crate::field::write_f64s(&mut w, &v.grid.edges)?;
    crate::field::write_f64s(&mut w, &v.trace)?;
    crate::field::write_f64s(&mut w, &v.values)
}

pub fn read_extension_dump<R: std::io::BufRead>(mut r: R) -> Result<ExtensionField> {
    let kv = crate::field::read_header(&mut r, EXTENSION_MAGIC)?;
    let (n, d, s) = (kv.usize("n")?, kv.usize("d")?, kv.f64("s")?);
    let targets = TargetBox { lo: kv.list("lo")?, hi: kv.list("hi")? };
    let origin: Vec<f64> = kv.list("origin")?;
    if targets.lo.len() != n || targets.hi.len() != n || origin.len() != n || targets.lo.iter().zip(&targets.hi).any(|(l, h)| h < l) {
        return Err(Error::Usage("inconsistent extension dump header".into()));
    }
    let levels = kv.usize("levels")?;
    let edges = crate::field::read_f64s(&mut r, levels + 1)?;
    if edges[0] != 0.0 || edges.windows(2).any(|e| e[1] <= e[0]) {
        return Err(Error::Usage("z-cell edges must start at 0 and increase".into()));
    }
    let widths: Vec<f64> = edges.windows(2).map(|e| e[1] - e[0]).collect();
    let mut grid = HalfSpaceGrid::from_widths(&widths);
    grid.edges = edges;
    let nt = targets.len();
    let trace = crate::field::read_f64s(&mut r, nt * d)?;
    let values = crate::field::read_f64s(&mut r, levels * nt * d)?;
    Ok(ExtensionField {
        n,
        d,
        h: kv.f64("h")?,
        s,
        delta_s: crate::constants::delta_s(s)?,
        targets,
        origin,
        grid,
        trace,
        values,
        mass_defect: kv.f64("mass_defect")?,
    })
}
