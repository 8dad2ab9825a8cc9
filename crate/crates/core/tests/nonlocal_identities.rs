use fracmap_core::constants::FracParams;
use fracmap_core::field::{preset_field, random_unit_field, Field, PresetParams, SphereField};
use fracmap_core::lattice::{build_lattice, DomainShape, Lattice, LatticeConfig, TailMode};
use fracmap_core::nonlocal::*;

const SEED: u64 = 0x5EED;
const EXACT: f64 = 1e-11;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn lattice(n: usize, s: f64, d: usize, h: f64, l: f64, l_ext: f64) -> Lattice {
    let p = FracParams::new(n, s, d).unwrap();
    let cfg = LatticeConfig { h, l, l_ext, ..Default::default() };
    Lattice::build(&p, &cfg).unwrap()
}

/// Nodes {-1, 0, 1} with h = 1, Ω = {0}; subsamples = 1 makes every weight the point kernel.
fn three_nodes(s: f64) -> Lattice {
    let p = FracParams::new(1, s, 1).unwrap();
    build_lattice(&p, 1.0, 0.5, 1.0, 1, 1).unwrap()
}

fn scalar(vals: &[f64]) -> Field {
    Field { d: 1, values: vals.to_vec() }
}

#[test]
fn three_node_energy_hand_sum() {
    let lat = three_nodes(0.5);
    assert_eq!(lat.n_nodes, 3);
    assert_eq!(lat.omega_nodes, vec![1]);
    let u = scalar(&[0.0, 1.0, 0.0]);
    // Active pairs (0,-1) and (0,1), each |Δu|² = 1, w = 1, exterior columns counted twice:
    // E = (γ/4) (2 + 2) = γ.
    let g = 1.0 / std::f64::consts::PI;
    assert!(rel(energy(&lat, &u), g) < 1e-14);
    let u2 = scalar(&[0.3, -0.2, 1.1]);
    let hand = 0.25 * g * 2.0 * ((-0.2f64 - 0.3).powi(2) + (-0.2f64 - 1.1).powi(2));
    assert!(rel(energy(&lat, &u2), hand) < 1e-14);
}

#[test]
fn three_node_laplacian_hand_sum() {
    let lat = three_nodes(0.5);
    let g = 1.0 / std::f64::consts::PI;
    let u = scalar(&[0.0, 1.0, 0.0]);
    let phi = scalar(&[0.0, 1.0, 0.0]);
    // (γ/2) Σ over ordered pairs (0,±1) and (±1,0): 4 pairs with Δu Δφ = 1
    assert!(rel(frac_laplacian_weak(&lat, &u, &phi).unwrap(), 2.0 * g) < 1e-14);
    let strong = frac_laplacian_strong(&lat, &u);
    assert!(rel(strong.values[0], 2.0 * g) < 1e-14);
}

#[test]
fn two_node_offset_weight() {
    let p = FracParams::new(1, 0.5, 1).unwrap();
    let lat = build_lattice(&p, 1.0, 1.0, 2.0, 1, 4).unwrap();
    // nodes 0 and 2 in lattice coordinates are 2 apart: h²/2^{1+2s} = 1/4
    assert!(rel(lat.w(0, 2), 0.25) < 1e-15);
    for p in 0..lat.n_nodes {
        for q in 0..lat.n_nodes {
            assert_eq!(lat.w(p, q), lat.w(q, p));
            assert!(lat.w(p, q) >= 0.0);
        }
        assert_eq!(lat.w(p, p), 0.0);
    }
}

#[test]
fn constant_field_vanishes_everywhere() {
    let lat = lattice(2, 0.4, 3, 0.125, 0.5, 1.0);
    let u = preset_field(&lat, "constant", &PresetParams::default()).unwrap();
    assert_eq!(energy(&lat, &u), 0.0);
    assert!(lagrange_multiplier(&lat, &u).iter().all(|&l| l == 0.0));
    assert_eq!(el_residual(&lat, &u).sup, 0.0);
    assert!(t_field(&lat, &u).values.iter().all(|&v| v == 0.0));
    assert!(frac_laplacian_strong(&lat, &u).values.iter().all(|&v| v == 0.0));
    let c = u.component(1);
    assert_eq!(sobolev_seminorm(&lat, &c, &[0.0, 0.0], 0.5, 0.3, 2.0).unwrap(), 0.0);
    assert_eq!(bmo_seminorm(&lat, &c).unwrap(), 0.0);
    assert_eq!(morrey_seminorm(&lat, &c, 0.3, 2.0).unwrap(), 0.0);
}

fn exactness_suite(lat: &Lattice, u: &SphereField) {
    let d = u.d();
    // d_s antisymmetry and the norm identity, component by component
    let mut norm_total = 0.0;
    for c in 0..d {
        let comp = u.component(c);
        let du = s_gradient(lat, &comp).unwrap();
        for &p in lat.omega_nodes.iter().step_by(7) {
            for &q in lat.omega_nodes.iter().step_by(5) {
                assert_eq!(du.get(lat, p, q), -du.get(lat, q, p));
            }
        }
        norm_total += od_norm_sq(lat, &du);
    }
    let e = energy(lat, u);
    assert!(rel(norm_total, 2.0 * e) < EXACT, "‖d_s u‖² vs 2E: {norm_total} {e}");

    // weak / strong duality with a random test function supported in Ω
    let phi_full = random_unit_field(lat, d, SEED ^ 1);
    let mut phi = phi_full.field().clone();
    for &x in &lat.ext_nodes {
        phi.get_mut(x).iter_mut().for_each(|v| *v = 0.0);
    }
    let weak = frac_laplacian_weak(lat, u, &phi).unwrap();
    let strong = omega_pairing(lat, &frac_laplacian_strong(lat, u), &phi);
    assert!(rel(weak, strong) < EXACT, "duality {weak} {strong}");

    // d_s u ⊙ d_s φ summed over the active set equals the weak form
    let mut od = 0.0;
    for c in 0..d {
        let du = s_gradient(lat, &u.component(c)).unwrap();
        let dp = s_gradient(lat, &phi.component(c)).unwrap();
        od += odot_total(lat, &du, &dp).unwrap();
    }
    assert!(rel(od, weak) < EXACT, "odot vs weak {od} {weak}");

    // Σ_j |d_s u^j|² (p) = λ(p)
    let lambda = lagrange_multiplier(lat, u);
    let mut sq = vec![0.0; lat.n_omega()];
    for c in 0..d {
        let du = s_gradient(lat, &u.component(c)).unwrap();
        for (a, b) in sq.iter_mut().zip(odot(lat, &du, &du).unwrap()) {
            *a += b;
        }
    }
    for (a, b) in sq.iter().zip(&lambda) {
        assert!((a - b).abs() <= EXACT * (1.0 + b.abs()));
    }

    // λ u = Σ_j Ω^{ij} ⊙ d_s u^j + T
    let dec = decomposition_residual(lat, u);
    assert!(dec.relative() < EXACT, "decomposition {:?}", dec);

    // conservation: pairing form vs cross form, for a random φ and several (i, j)
    for (i, j) in [(0, 1), (1, 0), (0, d - 1)] {
        let c = conservation_residual(lat, u, &phi.component(0), i, j).unwrap();
        let scale = c.pairing.abs().max(c.cross_form.abs()).max(1e-300);
        assert!((c.pairing - c.cross_form).abs() / scale < EXACT || (c.pairing - c.cross_form).abs() < EXACT * e, "{i}{j} {:?}", c);
    }
    let cii = conservation_residual(lat, u, &phi.component(0), 1, 1).unwrap();
    assert_eq!(cii.pairing, 0.0);
}

#[test]
fn exactness_n1_random_unit_field() {
    let lat = lattice(1, 0.3, 3, 1.0 / 64.0, 1.0, 2.0);
    assert!(lat.n_nodes <= 257);
    let u = random_unit_field(&lat, 3, SEED);
    exactness_suite(&lat, &u);
}

#[test]
fn exactness_n2_random_unit_field() {
    let lat = lattice(2, 0.6, 3, 0.125, 1.0, 2.0);
    assert!(lat.n_nodes <= 33 * 33);
    let u = random_unit_field(&lat, 3, SEED);
    exactness_suite(&lat, &u);
}

#[test]
fn exactness_with_constant_exterior_tail() {
    let p = FracParams::new(1, 0.4, 2).unwrap();
    let cfg = LatticeConfig { h: 1.0 / 32.0, l: 1.0, l_ext: 2.0, tail: TailMode::ConstantExterior(vec![1.0, 0.0]), ..Default::default() };
    let lat = Lattice::build(&p, &cfg).unwrap();
    let mut u = random_unit_field(&lat, 2, SEED).into_field();
    for &x in &lat.ext_nodes {
        u.get_mut(x).copy_from_slice(&[1.0, 0.0]);
    }
    let u = SphereField::new(u).unwrap();
    let mut phi = Field::zeros(lat.n_nodes, 2);
    for (k, &p) in lat.omega_nodes.iter().enumerate() {
        phi.get_mut(p).copy_from_slice(&[(k as f64 * 0.37).sin(), (k as f64 * 0.11).cos()]);
    }
    let weak = frac_laplacian_weak(&lat, &u, &phi).unwrap();
    let strong = omega_pairing(&lat, &frac_laplacian_strong(&lat, &u), &phi);
    assert!(rel(weak, strong) < EXACT);
    assert!(decomposition_residual(&lat, &u).relative() < EXACT);
    let c = conservation_residual(&lat, &u, &phi.component(1), 0, 1).unwrap();
    assert!(rel(c.pairing, c.cross_form) < 1e-10, "{:?}", c);
}

#[test]
fn hedgehog_decomposition_is_exact() {
    let lat = lattice(2, 0.5, 2, 0.125, 1.0, 2.0);
    let u = preset_field(&lat, "hedgehog", &PresetParams::default()).unwrap();
    assert!(decomposition_residual(&lat, &u).relative() < EXACT);
}

#[test]
fn decomposition_detects_non_unit_node() {
    let lat = lattice(1, 0.5, 2, 1.0 / 32.0, 1.0, 2.0);
    let mut u = random_unit_field(&lat, 2, SEED).into_field();
    let p = lat.omega_nodes[lat.n_omega() / 2];
    u.get_mut(p).iter_mut().for_each(|v| *v *= 2.0);
    let dec = decomposition_residual(&lat, &u);
    assert!(dec.relative() > 1e-3, "{:?}", dec);
}

#[test]
fn el_residual_tangential_part_matches_projected_laplacian() {
    let lat = lattice(2, 0.35, 3, 0.125, 1.0, 2.0);
    let u = random_unit_field(&lat, 3, SEED);
    let el = el_residual(&lat, &u);
    let tl = tangential_laplacian(&lat, &u);
    for (a, b) in el.tangential.values.iter().zip(&tl.values) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn omega_field_structure() {
    let lat = lattice(1, 0.5, 3, 1.0 / 16.0, 1.0, 2.0);
    let u = random_unit_field(&lat, 3, SEED);
    let o01 = omega_field(&lat, &u, 0, 1).unwrap();
    let o10 = omega_field(&lat, &u, 1, 0).unwrap();
    let o00 = omega_field(&lat, &u, 0, 0).unwrap();
    let d0 = s_gradient(&lat, &u.component(0)).unwrap();
    let d1 = s_gradient(&lat, &u.component(1)).unwrap();
    assert!(o00.inner.iter().chain(&o00.outer).all(|&v| v == 0.0));
    for k in 0..o01.inner.len() {
        assert_eq!(o01.inner[k], -o10.inner[k]);
        assert!(o01.inner[k].abs() <= d0.inner[k].abs() + d1.inner[k].abs() + 1e-15);
    }
}

#[test]
fn linear_field_laplacian_vanishes_at_centre() {
    let p = FracParams::new(1, 0.5, 1).unwrap();
    let lat = build_lattice(&p, 1.0 / 16.0, 1.0, 2.0, 2, 4).unwrap();
    let u = Field::from_fn(&lat, 1, |x| vec![x[0]]);
    let lap = frac_laplacian_strong(&lat, &u);
    let centre = lat.omega_pos[lat.nearest_node(&[0.0])];
    assert!(lap.values[centre].abs() < 1e-12);
}

#[test]
fn weak_form_is_symmetric() {
    let lat = lattice(2, 0.7, 1, 0.125, 1.0, 2.0);
    let mk = |seed: u64| {
        let mut f = random_unit_field(&lat, 1, seed).into_field();
        for &x in &lat.ext_nodes {
            f.values[x] = 0.0;
        }
        f
    };
    let (a, b) = (mk(1), mk(2));
    let ab = frac_laplacian_weak(&lat, &a, &b).unwrap();
    let ba = frac_laplacian_weak(&lat, &b, &a).unwrap();
    assert!(rel(ab, ba) < 1e-13);
}

#[test]
fn char_function_identities() {
    for (n, h) in [(1usize, 1.0 / 32.0), (2, 0.125)] {
        let p = FracParams::new(n, 0.3, 1).unwrap();
        let cfg = LatticeConfig { h, l: 1.0, l_ext: 2.0, shape: DomainShape::Ball, ..Default::default() };
        let lat = Lattice::build(&p, &cfg).unwrap();
        let pp = PresetParams { radius: 0.55, ..Default::default() };
        let u = preset_field(&lat, "char-ball", &pp).unwrap();
        let mask: Vec<bool> = (0..lat.n_nodes).map(|q| u.values[q] > 0.0).collect();
        let per = frac_perimeter(&lat, &mask).unwrap();
        let e = energy(&lat, &u);
        let g = lat.params.gamma_ns;
        // every mixed ordered pair has |Δu|² = 4 and the energy counts it with weight γ/4·c,
        // which gives E = 2γ P for the three-class perimeter
        assert!(rel(e, 2.0 * g * per) < 1e-12, "n={n}: E={e} γP={}", g * per);
        let swapped: Vec<bool> = mask.iter().map(|m| !m).collect();
        assert!(rel(frac_perimeter(&lat, &swapped).unwrap(), per) < 1e-12);
        assert_eq!(frac_perimeter(&lat, &vec![false; lat.n_nodes]).unwrap(), 0.0);
        // λ = 2γ Σ_{opposite} w / h^n and T = γ Σ_{opposite} (u_p - u_q) w / h^n
        let lambda = lagrange_multiplier(&lat, &u);
        let t = t_field(&lat, &u);
        let hn = lat.cell_volume();
        for (pos, &pn) in lat.omega_nodes.iter().enumerate() {
            let mut opp = 0.0;
            let mut tsum = 0.0;
            for q in 0..lat.n_nodes {
                if mask[q] != mask[pn] {
                    opp += lat.w(pn, q);
                    tsum += (u.values[pn] - u.values[q]) * lat.w(pn, q);
                }
            }
            assert!((lambda[pos] - 2.0 * g * opp / hn).abs() <= 1e-12 * (1.0 + lambda[pos]));
            assert!((t.values[pos] - g * tsum / hn).abs() <= 1e-12 * (1.0 + t.values[pos].abs()));
        }
    }
}

#[test]
fn seminorm_matches_energy_sum_on_ball() {
    let lat = lattice(1, 0.4, 1, 1.0 / 32.0, 1.0, 2.0);
    let u = random_unit_field(&lat, 1, SEED).into_field();
    // with s' = s, p = 2 the seminorm over D_r is the D×D pair sum
    let r = 0.5;
    let sn = sobolev_seminorm(&lat, &u, &[0.0], r, 0.4, 2.0).unwrap();
    let mut direct = 0.0;
    let inside: Vec<usize> = (0..lat.n_nodes).filter(|&p| lat.coord(p)[0].abs() <= r + 1e-12).collect();
    for &p in &inside {
        for &q in &inside {
            direct += (u.values[p] - u.values[q]).powi(2) * lat.w(p, q);
        }
    }
    assert!(rel(sn * sn, direct) < 1e-12);
}

#[test]
fn seminorm_of_linear_function_converges() {
    let value = |h: f64| {
        let p = FracParams::new(1, 0.5, 1).unwrap();
        let lat = build_lattice(&p, h, 1.0, 2.0, 2, 4).unwrap();
        let f = Field::from_fn(&lat, 1, |x| vec![x[0]]);
        sobolev_seminorm(&lat, &f, &[0.0], 1.0, 0.25, 2.0).unwrap()
    };
    // midpoint-rule oracle: ∫∫_{[-1,1]²} |x-y|^{2-1-0.5} = ∫∫ |x-y|^{0.5} dx dy = 2·∫_0^2 (2-t) t^{0.5} dt
    let exact = (2.0 * (2.0 * (2.0f64).powf(1.5) / 1.5 - (2.0f64).powf(2.5) / 2.5)).sqrt();
    let (a, b) = (value(1.0 / 16.0), value(1.0 / 32.0));
    assert!((a - b).abs() / b < 0.05);
    assert!((b - exact).abs() / exact < 0.05, "{b} vs {exact}");
}

#[test]
fn subsample_refinement_of_adjacent_weight() {
    let p = FracParams::new(1, 0.5, 1).unwrap();
    let a = build_lattice(&p, 1.0 / 8.0, 1.0, 2.0, 2, 64).unwrap();
    let b = build_lattice(&p, 1.0 / 8.0, 1.0, 2.0, 2, 128).unwrap();
    let (wa, wb) = (a.w(10, 11), b.w(10, 11));
    assert!(rel(wa, wb) <= 1e-3);
}

#[test]
fn gaussian_energy_refinement_consistency() {
    let e = |h: f64| {
        let p = FracParams::new(1, 0.5, 1).unwrap();
        let cfg = LatticeConfig { h, l: 4.0, l_ext: 8.0, shape: DomainShape::Box, ..Default::default() };
        let lat = Lattice::build(&p, &cfg).unwrap();
        let u = Field::from_fn(&lat, 1, |x| vec![(-x[0] * x[0]).exp()]);
        let omega = lat.omega_mask.clone();
        // Ω×Ω part only: a mask without exterior doubling
        let mut all = vec![false; lat.n_nodes];
        all.iter_mut().zip(&omega).for_each(|(a, b)| *a = *b);
        let full = energy_masked(&lat, &u, &all);
        let outer: f64 = {
            let g = lat.params.gamma_ns;
            let mut acc = 0.0;
            for &p in &lat.omega_nodes {
                for &x in &lat.ext_nodes {
                    acc += (u.values[p] - u.values[x]).powi(2) * lat.w(p, x);
                }
            }
            0.5 * g * acc
        };
        full - outer
    };
    let (a, b) = (e(1.0 / 8.0), e(1.0 / 16.0));
    assert!(rel(a, b) <= 0.1, "{a} {b}");
}
