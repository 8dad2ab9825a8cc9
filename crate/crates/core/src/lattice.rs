//! Truncated uniform lattice on [-L_ext, L_ext]^n, the domain mask and the
//! singular pair-kernel table.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::FracParams;
use crate::error::{config, Error, Result};
use crate::quadrature;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainShape {
    Ball,
    Box,
}

/// Treatment of node pairs reaching beyond the lattice box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TailMode {
    /// Pairs with one point outside the box are dropped.
    Zero,
    /// The field equals the given constant outside the box; the exact tail
    /// integral is added wherever a node sum meets the complement.
    ConstantExterior(Vec<f64>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LatticeConfig {
    pub h: f64,
    pub l: f64,
    pub l_ext: f64,
    pub cutoff: usize,
    pub subsamples: usize,
    pub shape: DomainShape,
    pub tail: TailMode,
    pub max_nodes: usize,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            h: 1.0 / 16.0,
            l: 1.0,
            l_ext: 2.0,
            cutoff: 2,
            subsamples: 4,
            shape: DomainShape::Ball,
            tail: TailMode::Zero,
            max_nodes: 40_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Lattice {
    pub params: FracParams,
    pub h: f64,
    pub l: f64,
    pub l_ext: f64,
    pub cutoff: usize,
    pub subsamples: usize,
    pub shape: DomainShape,
    pub tail: TailMode,
    /// Nodes per half axis; axis indices run over 0..=2k.
    pub k: usize,
    pub side: usize,
    pub n_nodes: usize,
    pub omega_mask: Vec<bool>,
    pub omega_nodes: Vec<usize>,
    pub ext_nodes: Vec<usize>,
    /// Position of a node inside `omega_nodes`, `usize::MAX` for exterior nodes.
    pub omega_pos: Vec<usize>,
    lin4: Vec<usize>,
    center: usize,
    w_table: Vec<f64>,
    mu_table: Vec<f64>,
    rs_table: Vec<f64>,
    tail_k: Vec<f64>,
}

/// Build with the default domain shape (ball) and tail mode (zero).
pub fn build_lattice(params: &FracParams, h: f64, l: f64, l_ext: f64, cutoff: usize, subsamples: usize) -> Result<Lattice> {
    let cfg = LatticeConfig { h, l, l_ext, cutoff, subsamples, ..LatticeConfig::default() };
    Lattice::build(params, &cfg)
}

impl Lattice {
    pub fn build(params: &FracParams, cfg: &LatticeConfig) -> Result<Self> {
        let n = params.n;
        if !(cfg.h > 0.0) || !(cfg.l > 0.0) || cfg.l > cfg.l_ext {
            return Err(config(format!("need h > 0 and 0 < L <= L_ext (h={}, L={}, L_ext={})", cfg.h, cfg.l, cfg.l_ext)));
        }
        if cfg.cutoff < 1 || cfg.subsamples < 1 {
            return Err(config("cutoff and subsamples must be at least 1"));
        }
        let kf = cfg.l_ext / cfg.h;
        let k = kf.round() as usize;
        if k == 0 || (kf - k as f64).abs() > 1e-9 * kf.max(1.0) {
            return Err(config(format!("L_ext/h = {kf} must be a positive integer")));
        }
        let side = 2 * k + 1;
        let n_nodes = side.checked_pow(n as u32).unwrap_or(usize::MAX);
        if n_nodes > cfg.max_nodes {
            return Err(Error::Resource(format!("{n_nodes} nodes exceed the configured maximum {}", cfg.max_nodes)));
        }
        if let TailMode::ConstantExterior(c) = &cfg.tail {
            if c.len() != params.d {
                return Err(config("constant exterior value must have d components"));
            }
            if n > 2 {
                return Err(config("constant-exterior tail is implemented for n <= 2"));
            }
        }
        let width = 4 * k + 1;
        let mut lin4 = vec![0usize; n_nodes];
        let mut omega_mask = vec![false; n_nodes];
        let mut idx = vec![0usize; n];
        let tol = 1e-9 * cfg.h;
        for node in 0..n_nodes {
            multi_index_into(node, side, &mut idx);
            let mut l4 = 0;
            let mut stride = 1;
            let mut r2 = 0.0;
            let mut rinf: f64 = 0.0;
            for &i in idx.iter() {
                l4 += i * stride;
                stride *= width;
                let x = (i as f64 - k as f64) * cfg.h;
                r2 += x * x;
                rinf = rinf.max(x.abs());
            }
            lin4[node] = l4;
            omega_mask[node] = match cfg.shape {
                DomainShape::Ball => r2.sqrt() <= cfg.l + tol,
                DomainShape::Box => rinf <= cfg.l + tol,
            };
        }
        let mut center = 0;
        let mut stride = 1;
        for _ in 0..n {
            center += 2 * k * stride;
            stride *= width;
        }
        let omega_nodes: Vec<usize> = (0..n_nodes).filter(|&i| omega_mask[i]).collect();
        let ext_nodes: Vec<usize> = (0..n_nodes).filter(|&i| !omega_mask[i]).collect();
        if ext_nodes.is_empty() || omega_nodes.is_empty() {
            return Err(config("domain must leave a nonempty exterior collar and contain at least one node"));
        }
        let mut omega_pos = vec![usize::MAX; n_nodes];
        for (pos, &node) in omega_nodes.iter().enumerate() {
            omega_pos[node] = pos;
        }
        let (w_table, mu_table, rs_table) = kernel_tables(n, params.s, cfg.h, k, cfg.cutoff, cfg.subsamples, n as f64 + 2.0 * params.s);
        let mut lat = Self {
            params: params.clone(),
            h: cfg.h,
            l: cfg.l,
            l_ext: cfg.l_ext,
            cutoff: cfg.cutoff,
            subsamples: cfg.subsamples,
            shape: cfg.shape,
            tail: cfg.tail.clone(),
            k,
            side,
            n_nodes,
            omega_mask,
            omega_nodes,
            ext_nodes,
            omega_pos,
            lin4,
            center,
            w_table,
            mu_table,
            rs_table,
            tail_k: Vec::new(),
        };
        if let TailMode::ConstantExterior(_) = lat.tail {
            let r = lat.l_ext + 0.5 * lat.h;
            let s = params.s;
            lat.tail_k = lat.omega_nodes.par_iter().map(|&p| tail_integral(&lat.coord(p), r, s)).collect();
        }
        Ok(lat)
    }

    pub fn dim(&self) -> usize {
        self.params.n
    }

    /// Cell volume h^n.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.params.n as i32)
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut idx = vec![0; self.params.n];
        multi_index_into(node, self.side, &mut idx);
        idx
    }

    pub fn node_of(&self, idx: &[usize]) -> usize {
        let mut node = 0;
        let mut stride = 1;
        for &i in idx {
            node += i * stride;
            stride *= self.side;
        }
        node
    }

    pub fn axis_coord(&self, i: usize) -> f64 {
        (i as f64 - self.k as f64) * self.h
    }

    pub fn coord(&self, node: usize) -> Vec<f64> {
        self.multi_index(node).into_iter().map(|i| self.axis_coord(i)).collect()
    }

    /// Node whose coordinates are closest to `x` (clamped to the box).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let idx: Vec<usize> = x
            .iter()
            .map(|&xi| ((xi / self.h).round() + self.k as f64).clamp(0.0, (self.side - 1) as f64) as usize)
            .collect();
        self.node_of(&idx)
    }

    pub fn is_omega(&self, node: usize) -> bool {
        self.omega_mask[node]
    }

    /// Base index for kernel lookups on row `p`: entry for column j is `base - lin4(j)`.
    #[inline]
    pub fn row_base(&self, p: usize) -> usize {
        self.center + self.lin4[p]
    }

    #[inline]
    pub fn lin4(&self, j: usize) -> usize {
        self.lin4[j]
    }

    /// Kernel weight w_pj (h^{2n} measure included; zero on the diagonal).
    #[inline]
    pub fn w(&self, p: usize, j: usize) -> f64 {
        self.w_table[self.center + self.lin4[p] - self.lin4[j]]
    }

    #[inline]
    pub fn w_at(&self, base: usize, j: usize) -> f64 {
        self.w_table[base - self.lin4[j]]
    }

    /// Off-diagonal pair measure μ_pj = w_pj |x_p - x_j|^{2s}.
    #[inline]
    pub fn mu_at(&self, base: usize, j: usize) -> f64 {
        self.mu_table[base - self.lin4[j]]
    }

    /// |x_p - x_j|^{-s} (zero on the diagonal).
    #[inline]
    pub fn rs_at(&self, base: usize, j: usize) -> f64 {
        self.rs_table[base - self.lin4[j]]
    }

    /// Exterior constant when the tail mode is constant-exterior.
    pub fn tail_value(&self) -> Option<&[f64]> {
        match &self.tail {
            TailMode::ConstantExterior(c) => Some(c),
            TailMode::Zero => None,
        }
    }

    /// ∫_{R^n \ box} |x_p - y|^{-n-2s} dy for the Ω node at position `pos` (0 in zero-tail mode).
    #[inline]
    pub fn tail_k(&self, pos: usize) -> f64 {
        if self.tail_k.is_empty() {
            0.0
        } else {
            self.tail_k[pos]
        }
    }

    /// Kernel table for a different exponent n + s'p, same near-field rule.
    pub fn kernel_table_for_exponent(&self, exponent: f64) -> Vec<f64> {
        kernel_tables(self.params.n, self.params.s, self.h, self.k, self.cutoff, self.subsamples, exponent).0
    }
}

fn multi_index_into(mut node: usize, side: usize, idx: &mut [usize]) {
    for slot in idx.iter_mut() {
        *slot = node % side;
        node /= side;
    }
}

/// Weight for an offset given by absolute integer components.
pub(crate) fn pair_weight(offset: &[usize], h: f64, cutoff: usize, subsamples: usize, exponent: f64) -> f64 {
    let n = offset.len();
    let hn2 = h.powi(2 * n as i32);
    if offset.iter().all(|&o| o == 0) {
        return 0.0;
    }
    let near = offset.iter().all(|&o| o <= cutoff);
    if !near {
        let r2: f64 = offset.iter().map(|&o| (o as f64 * h).powi(2)).sum();
        return hn2 * r2.powf(-exponent / 2.0);
    }
    // Mean of |y|^{-exponent} over a tensor grid of cell-midpoint subsamples in cell j.
    let m = subsamples;
    let total = m.pow(n as u32);
    let mut sum = 0.0;
    let mut sub = vec![0usize; n];
    for t in 0..total {
        multi_index_into(t, m, &mut sub);
        let mut r2 = 0.0;
        for a in 0..n {
            let y = (offset[a] as f64 + (sub[a] as f64 + 0.5) / m as f64 - 0.5) * h;
            r2 += y * y;
        }
        sum += r2.powf(-exponent / 2.0);
    }
    hn2 * sum / total as f64
}

fn kernel_tables(n: usize, s: f64, h: f64, k: usize, cutoff: usize, subsamples: usize, exponent: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let width = 4 * k + 1;
    let size = width.pow(n as u32);
    let entries: Vec<(f64, f64, f64)> = (0..size)
        .into_par_iter()
        .map(|e| {
            let mut idx = vec![0usize; n];
            multi_index_into(e, width, &mut idx);
            let abs: Vec<usize> = idx.iter().map(|&i| (i as isize - 2 * k as isize).unsigned_abs()).collect();
            let w = pair_weight(&abs, h, cutoff, subsamples, exponent);
            let r2: f64 = abs.iter().map(|&o| (o as f64 * h).powi(2)).sum();
            if r2 == 0.0 {
                (0.0, 0.0, 0.0)
            } else {
                let r = r2.sqrt();
                (w, w * r.powf(2.0 * s), r.powf(-s))
            }
        })
        .collect();
    let mut w = Vec::with_capacity(size);
    let mut mu = Vec::with_capacity(size);
    let mut rs = Vec::with_capacity(size);
    for (a, b, c) in entries {
        w.push(a);
        mu.push(b);
        rs.push(c);
    }
    (w, mu, rs)
}

/// ∫_{R^n \ [-r,r]^n} |x - y|^{-n-2s} dy for x inside the box (n = 1 or 2).
pub fn tail_integral(x: &[f64], r: f64, s: f64) -> f64 {
    match x.len() {
        1 => ((r - x[0]).powf(-2.0 * s) + (r + x[0]).powf(-2.0 * s)) / (2.0 * s),
        2 => {
            // Directional form: ∫_{S^1} ρ(θ)^{-2s}/(2s) dθ, ρ = distance to the box wall.
            let rho = |th: f64| {
                let (sn, cs) = th.sin_cos();
                let tx = if cs.abs() > 1e-300 { (r - x[0] * cs.signum()) / cs.abs() } else { f64::INFINITY };
                let ty = if sn.abs() > 1e-300 { (r - x[1] * sn.signum()) / sn.abs() } else { f64::INFINITY };
                tx.min(ty)
            };
            let mut breaks: Vec<f64> = [(r - x[1]).atan2(r - x[0]), (r - x[1]).atan2(-r - x[0]), (-r - x[1]).atan2(-r - x[0]), (-r - x[1]).atan2(r - x[0])]
                .iter()
                .map(|&a| if a < 0.0 { a + 2.0 * std::f64::consts::PI } else { a })
                .collect();
            breaks.push(0.0);
            breaks.push(2.0 * std::f64::consts::PI);
            breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rule = quadrature::gauss_legendre(32);
            let mut acc = 0.0;
            for w in breaks.windows(2) {
                if w[1] > w[0] {
                    acc += quadrature::gl_integrate(|t| rho(t).powf(-2.0 * s), w[0], w[1], &rule);
                }
            }
            acc / (2.0 * s)
        }
        _ => f64::NAN,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn far_pair_weight_is_point_kernel() {
        let w = pair_weight(&[2], 1.0, 1, 4, 2.0);
        assert!((w - 0.25).abs() < 1e-15);
    }

    #[test]
    fn adjacent_weight_subsample_refinement() {
        let a = pair_weight(&[1], 1.0, 2, 64, 2.0);
        let b = pair_weight(&[1], 1.0, 2, 128, 2.0);
        assert!((a - b).abs() / b < 1e-3);
        // point-to-cell mean of y^{-2} over [0.5, 1.5] is 4/3
        assert!((b - 4.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn tail_integral_2d_matches_radial_formula_at_centre_of_disc_like_box() {
        // For x = 0 the result is bounded between the disc values with radius r and r√2.
        let s = 0.4;
        let v = tail_integral(&[0.0, 0.0], 1.0, s);
        let disc = |rad: f64| 2.0 * std::f64::consts::PI * rad.powf(-2.0 * s) / (2.0 * s);
        assert!(v < disc(1.0) && v > disc(2f64.sqrt()));
        let (num, _) = crate::quadrature::integrate(
            |t| {
                let rho = 1.0 / t.cos().max(t.sin());
                rho.powf(-2.0 * s)
            },
            0.0,
            std::f64::consts::FRAC_PI_2,
            1e-13,
        );
        assert!((v - 4.0 * num / (2.0 * s)).abs() < 1e-10 * v);
    }
}
