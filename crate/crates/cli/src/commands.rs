use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use fracmap_core::analysis::{
    blowup_family, calibrated_epsilon, default_singular_radii, detect_singular, homogeneity_defect, symmetry_subspace, Calibration,
};
use fracmap_core::constants::{alpha_ns, gamma_ns, sphere_area, FracParams};
use fracmap_core::error::{Error, Result};
use fracmap_core::extension::{
    extend, monotonicity_profile, read_extension_dump, weighted_energy, write_extension_dump, ExteriorFill, HalfSpaceGrid, TargetBox,
};
use fracmap_core::field::{preset_field, preset_map, random_unit_field, read_dump, write_csv, write_dump, Field, SphereField};
use fracmap_core::identities::{exactness_suite, perimeter_identity};
use fracmap_core::lattice::{Lattice, LatticeConfig, TailMode};
use fracmap_core::nonlocal::{decomposition_residual, el_residual, energy, lagrange_multiplier};
use fracmap_core::solver::{minimize, stationarity_residual};
use fracmap_core::weighted_pde::{check_max_principle, extension_values, harmonic_replacement, pde_residual};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Command, FillMode, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// What a command hands back to the report writer.
pub struct Outcome {
    pub result: Value,
    pub status: i32,
}

impl Outcome {
    fn ok<T: Serialize>(result: &T) -> Result<Self> {
        Ok(Self { result: to_value(result)?, status: EXIT_OK })
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Usage(format!("cannot serialise report: {e}")))
}

/// Lattice, dump-derived parameters and extension settings are taken from a field dump
/// given with `--input`, so the embedded config describes what was actually run.
pub fn adopt_input_header(cmd: Command, cfg: &mut RunConfig) -> Result<()> {
    let Some(path) = cfg.options.input.clone() else { return Ok(()) };
    if matches!(cmd, Command::Constants | Command::Check | Command::Perimeter) {
        return Ok(());
    }
    if cmd == Command::Replace {
        let v = read_extension_dump(BufReader::new(File::open(&path)?))?;
        cfg.n = v.n;
        cfg.s = v.s;
        cfg.d = v.d;
        cfg.lattice.h = v.h;
        return Ok(());
    }
    let (hdr, _) = read_dump(BufReader::new(File::open(&path)?))?;
    cfg.n = hdr.n;
    cfg.s = hdr.s;
    cfg.d = hdr.d;
    cfg.lattice.h = hdr.h;
    cfg.lattice.l = hdr.l;
    cfg.lattice.l_ext = hdr.l_ext;
    Ok(())
}

pub fn execute(cmd: Command, cfg: &RunConfig) -> Result<Outcome> {
    match cmd {
        Command::Constants => constants(cfg),
        Command::Energy => energy_cmd(cfg),
        Command::Minimize => minimize_cmd(cfg),
        Command::Extend => extend_cmd(cfg),
        Command::Density => density(cfg),
        Command::Check => check(cfg),
        Command::Replace => replace(cfg),
        Command::Blowup => blowup(cfg),
        Command::Singular => singular(cfg),
        Command::Perimeter => perimeter(cfg),
    }
}

fn params(cfg: &RunConfig) -> Result<FracParams> {
    FracParams::new(cfg.n, cfg.s, cfg.d)
}

fn lattice(cfg: &RunConfig) -> Result<Lattice> {
    Lattice::build(&params(cfg)?, &cfg.lattice)
}

fn load_field(cfg: &RunConfig, lat: &Lattice) -> Result<SphereField> {
    match &cfg.options.input {
        Some(path) => {
            let (_, f) = read_dump(BufReader::new(File::open(path)?))?;
            f.check_lattice(lat)?;
            SphereField::new(f)
        }
        None => preset_field(lat, &cfg.preset, &cfg.preset_params),
    }
}

fn exterior_fill(cfg: &RunConfig, lat: &Lattice) -> Result<ExteriorFill> {
    let map = || preset_map(&cfg.preset, cfg.n, cfg.d, lat.h, lat.l_ext, &cfg.preset_params).map(ExteriorFill::Map);
    Ok(match cfg.options.fill {
        FillMode::Renormalize => ExteriorFill::Renormalize,
        FillMode::Zero => ExteriorFill::Zero,
        FillMode::Preset => map()?,
        FillMode::Auto => match lat.tail_value() {
            Some(c) => ExteriorFill::Constant(c.to_vec()),
            None if cfg.options.input.is_none() => map().unwrap_or(ExteriorFill::Renormalize),
            None => ExteriorFill::Renormalize,
        },
    })
}

fn z_grid(cfg: &RunConfig, lat: &Lattice) -> Result<HalfSpaceGrid> {
    let e = &cfg.extension;
    let z_max = if e.z_max > 0.0 { e.z_max } else { lat.l_ext };
    HalfSpaceGrid::geometric(e.first_cell * lat.h, e.levels, z_max)
}

fn out_file(cfg: &RunConfig, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(cfg.out.join(name))?))
}

fn dump_field(cfg: &RunConfig, name: &str, lat: &Lattice, f: &Field) -> Result<()> {
    let mut w = out_file(cfg, name)?;
    write_dump(&mut w, lat, f)?;
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn constants(cfg: &RunConfig) -> Result<Outcome> {
    let p = params(cfg)?;
    let alpha_quadrature = if cfg.n >= 2 { Some(alpha_ns(cfg.n, cfg.s)?.quadrature) } else { None };
    let alpha = gamma_ns(1, cfg.s)? / p.gamma_ns;
    Outcome::ok(&json!({
        "n": p.n,
        "s": p.s,
        "gamma": p.gamma_ns,
        "sigma": p.sigma_ns,
        "delta": p.delta_s,
        "a": p.a,
        "alpha": alpha,
        "alpha_quadrature": alpha_quadrature,
        "sphere_area": sphere_area(p.n),
    }))
}

fn energy_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let lat = lattice(cfg)?;
    let u = load_field(cfg, &lat)?;
    let el = el_residual(&lat, &u);
    let lambda = lagrange_multiplier(&lat, &u);
    Outcome::ok(&json!({
        "nodes": lat.n_nodes,
        "omega_nodes": lat.n_omega(),
        "energy": energy(&lat, &u),
        "lambda_sup": lambda.iter().cloned().fold(0.0, f64::max),
        "el_residual_sup": el.sup,
        "el_tangential_sup": el.tangential_sup,
        "stationarity_residual": stationarity_residual(&u, &lat).ok(),
        "decomposition": decomposition_residual(&lat, &u),
        "max_norm_defect": u.max_norm_defect(),
    }))
}

fn minimize_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let lat = lattice(cfg)?;
    let u0 = load_field(cfg, &lat)?;
    let (u, rep) = minimize(&u0, &lat, &cfg.solver)?;
    dump_field(cfg, "field.dump", &lat, &u)?;
    if lat.dim() <= 2 {
        let mut w = out_file(cfg, "field.csv")?;
        write_csv(&mut w, &lat, &u)?;
        w.flush()?;
    }
    let result = json!({
        "initial_energy": energy(&lat, &u0),
        "solve": rep,
        "energy_nonincreasing": rep.energy_history.windows(2).all(|w| w[1] <= w[0]),
        "stationarity_residual": stationarity_residual(&u, &lat).ok(),
        "max_norm_defect": u.max_norm_defect(),
        "field": "field.dump",
    });
    let status = if rep.converged { EXIT_OK } else { EXIT_NUMERICAL };
    Ok(Outcome { result, status })
}

fn extend_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let lat = lattice(cfg)?;
    let u = load_field(cfg, &lat)?;
    let grid = z_grid(cfg, &lat)?;
    let hw = if cfg.options.half_width > 0.0 { cfg.options.half_width } else { lat.l };
    let v = extend(&lat, &u, &grid, &TargetBox::centered(&lat, hw), &exterior_fill(cfg, &lat)?)?;
    let mut w = out_file(cfg, "extension.dump")?;
    write_extension_dump(&mut w, &v)?;
    w.flush()?;
    let residuals: Vec<Option<f64>> = (0..v.d).map(|c| pde_residual(&v, c, 4.0 * lat.h).ok()).collect();
    Outcome::ok(&json!({
        "levels": grid.levels(),
        "z_max": grid.z_max(),
        "targets": v.targets,
        "weighted_energy": weighted_energy(&v, None),
        "nonlocal_energy": energy(&lat, &u),
        "mass_defect": v.mass_defect,
        "sup_norm": v.sup_norm(),
        "pde_residual_above_4h": residuals,
        "extension": "extension.dump",
    }))
}

fn default_radii(cfg: &RunConfig, lat: &Lattice) -> Vec<f64> {
    if !cfg.options.radii.is_empty() {
        return cfg.options.radii.clone();
    }
    (4..).map(|k| k as f64 * lat.h).take_while(|&r| r <= 0.75 * lat.l + 1e-12).collect()
}

fn density(cfg: &RunConfig) -> Result<Outcome> {
    let lat = lattice(cfg)?;
    let u = load_field(cfg, &lat)?;
    let x0 = cfg.center();
    let radii = default_radii(cfg, &lat);
    let rmax = radii.last().copied().ok_or_else(|| Error::Config("no radii".into()))?;
    let reach = x0.iter().fold(0.0f64, |m, v| m.max(v.abs())) + rmax + lat.h;
    let v = extend(&lat, &u, &z_grid(cfg, &lat)?, &TargetBox::centered(&lat, reach), &exterior_fill(cfg, &lat)?)?;
    let profile = monotonicity_profile(&lat, &u, &v, &x0, &radii)?;
    write_text(&cfg.out.join("density.csv"), &profile.to_csv())?;
    Outcome::ok(&json!({ "profile": profile, "nondecreasing": profile.violation == 0.0, "csv": "density.csv" }))
}

fn check(cfg: &RunConfig) -> Result<Outcome> {
    let lat = lattice(cfg)?;
    let u = random_unit_field(&lat, cfg.d, cfg.seed);
    let checks = exactness_suite(&lat, &u, cfg.seed ^ 1)?;
    let per = perimeter_identity(&lat, cfg.preset_params.radius)?;
    let passed = checks.iter().all(|c| c.passed) && per.check.passed;
    let result = json!({ "passed": passed, "checks": checks, "perimeter": per });
    Ok(Outcome { result, status: if passed { EXIT_OK } else { EXIT_CHECK_FAILED } })
}

fn replace(cfg: &RunConfig) -> Result<Outcome> {
    let path = cfg.options.input.as_ref().ok_or_else(|| Error::Usage("replace needs --input <extension dump>".into()))?;
    let v = read_extension_dump(BufReader::new(File::open(path)?))?;
    let (grid, sols) = harmonic_replacement(&v, cfg.options.pde_tol)?;
    let nx = grid.nx();
    let nt = v.n_targets();
    let mut replaced = v.clone();
    let mut components = Vec::new();
    let (mut before, mut after) = (0.0, 0.0);
    for (c, sol) in sols.iter().enumerate() {
        let data = grid.energy(&extension_values(&v, &grid, c));
        let rep = grid.energy(&sol.values);
        before += data;
        after += rep;
        for k in 1..grid.z.len() {
            for t in 0..nx {
                replaced.values[((k - 1) * nt + t) * v.d + c] = sol.values[k * nx + t];
            }
        }
        components.push(json!({
            "component": c,
            "data_energy": data,
            "replacement_energy": rep,
            "iterations": sol.iterations,
            "relative_residual": sol.relative_residual,
            "max_principle": check_max_principle(&grid, &sol.values),
        }));
    }
    let mut w = out_file(cfg, "replacement.dump")?;
    write_extension_dump(&mut w, &replaced)?;
    w.flush()?;
    Outcome::ok(&json!({
        "components": components,
        "data_energy": before,
        "replacement_energy": after,
        "energy_not_increased": after <= before,
        "replacement": "replacement.dump",
    }))
}

fn blowup(cfg: &RunConfig) -> Result<Outcome> {
    let lat = lattice(cfg)?;
    let u = load_field(cfg, &lat)?;
    let r = &cfg.options.reference;
    let ref_cfg = LatticeConfig { h: r.h, l: r.l, l_ext: r.l_ext, tail: TailMode::Zero, ..cfg.lattice.clone() };
    let reference = Lattice::build(&params(cfg)?, &ref_cfg)?;
    let fam = blowup_family(&lat, &u, &cfg.center(), &cfg.options.scales, &reference)?;
    for (k, f) in fam.fields.iter().enumerate() {
        dump_field(cfg, &format!("blowup_{k}.dump"), &reference, f)?;
    }
    let last = fam.fields.last().expect("nonempty family");
    let symmetry = symmetry_subspace(&reference, last, cfg.options.symmetry_tol).ok();
    Outcome::ok(&json!({
        "family": fam,
        "smallest_scale": {
            "homogeneity_defect": homogeneity_defect(&reference, last).ok(),
            "symmetry_dimension": symmetry.as_ref().map(|s| s.dimension),
            "symmetry": symmetry,
        },
        "dumps": (0..fam.fields.len()).map(|k| format!("blowup_{k}.dump")).collect::<Vec<_>>(),
    }))
}

fn singular(cfg: &RunConfig) -> Result<Outcome> {
    let lat = lattice(cfg)?;
    let u = load_field(cfg, &lat)?;
    let (epsilon, calibration): (f64, Option<Calibration>) = match cfg.options.epsilon {
        Some(e) => (e, None),
        None => {
            let c = calibrated_epsilon(cfg.n, cfg.s, lat.h)?;
            (c.epsilon, Some(c))
        }
    };
    let radii = if cfg.options.radii.is_empty() { default_singular_radii(lat.h) } else { cfg.options.radii.clone() };
    let rep = detect_singular(&lat, &u, epsilon, &radii, &exterior_fill(cfg, &lat)?)?;
    write_text(&cfg.out.join("singular.csv"), &rep.flagged_csv())?;
    Outcome::ok(&json!({ "calibration": calibration, "report": rep, "csv": "singular.csv" }))
}

fn perimeter(cfg: &RunConfig) -> Result<Outcome> {
    let lat = lattice(cfg)?;
    let per = perimeter_identity(&lat, cfg.preset_params.radius)?;
    let status = if per.check.passed { EXIT_OK } else { EXIT_CHECK_FAILED };
    Ok(Outcome { result: to_value(&per)?, status })
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical { .. } => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}
