use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fracmap_core::error::{Error, Result};
use fracmap_core::extension::{DEFAULT_FIRST_CELL, DEFAULT_LEVELS};
use fracmap_core::field::PresetParams;
use fracmap_core::lattice::LatticeConfig;
use fracmap_core::solver::SolverConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Print γ_{n,s}, σ_{n,s}, δ_s, a and α_{n,s}.
    Constants,
    /// Energy and Euler-Lagrange residuals of a field.
    Energy,
    /// Minimise the energy from a preset start.
    Minimize,
    /// Poisson extension to the upper half-space.
    Extend,
    /// Density profile Θ, θ and the monotonicity remainder about a point.
    Density,
    /// Run the exactness suite on a random unit field.
    Check,
    /// Harmonic replacement of a dumped extension field.
    Replace,
    /// Blow-ups at decreasing scales about a point.
    Blowup,
    /// Flag nodes whose density limit exceeds ε.
    Singular,
    /// Perimeter identity for a ball-shaped set.
    Perimeter,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Constants => "constants",
            Self::Energy => "energy",
            Self::Minimize => "minimize",
            Self::Extend => "extend",
            Self::Density => "density",
            Self::Check => "check",
            Self::Replace => "replace",
            Self::Blowup => "blowup",
            Self::Singular => "singular",
            Self::Perimeter => "perimeter",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fracmap", version, about = "Fractional harmonic maps into spheres on a lattice")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Per-field overrides applied on top of `--config`.
#[derive(Debug, Default, clap::Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    pub s: Option<f64>,
    #[arg(long, global = true)]
    pub d: Option<usize>,
    #[arg(long, global = true)]
    pub h: Option<f64>,
    /// Half width of Ω.
    #[arg(long = "L", global = true)]
    pub l: Option<f64>,
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Tangential residual tolerance of the minimiser.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long = "max-iters", global = true)]
    pub max_iters: Option<usize>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Field dump (or extension dump for `replace`) to read instead of a preset.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Singular-set threshold; default is the calibrated value.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillMode {
    /// Constant tail if the lattice has one, else the preset map, else renormalisation.
    Auto,
    Renormalize,
    Zero,
    Preset,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtensionGridConfig {
    /// Top of the z-grid; 0 selects L_ext.
    pub z_max: f64,
    pub levels: usize,
    /// First cell width as a multiple of h; later cells grow geometrically.
    pub first_cell: f64,
}

impl Default for ExtensionGridConfig {
    fn default() -> Self {
        Self { z_max: 0.0, levels: DEFAULT_LEVELS, first_cell: DEFAULT_FIRST_CELL }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceLattice {
    pub h: f64,
    pub l: f64,
    pub l_ext: f64,
}

impl Default for ReferenceLattice {
    fn default() -> Self {
        Self { h: 0.125, l: 0.5, l_ext: 0.75 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommandOptions {
    pub input: Option<PathBuf>,
    /// Base point for density and blowup; empty means the origin.
    pub center: Vec<f64>,
    /// Radii for density and singular; empty selects the defaults.
    pub radii: Vec<f64>,
    /// Strictly decreasing blow-up scales.
    pub scales: Vec<f64>,
    pub reference: ReferenceLattice,
    pub epsilon: Option<f64>,
    pub fill: FillMode,
    /// Half width of the extension target box; 0 selects L.
    pub half_width: f64,
    /// Relative CG tolerance for `replace`.
    pub pde_tol: f64,
    /// Tolerance for accepting a translation symmetry of a blow-up.
    pub symmetry_tol: f64,
}

impl Default for CommandOptions {
    fn default() -> Self {
        Self {
            input: None,
            center: Vec::new(),
            radii: Vec::new(),
            scales: vec![1.0, 0.5, 0.25],
            reference: ReferenceLattice::default(),
            epsilon: None,
            fill: FillMode::Auto,
            half_width: 0.0,
            pde_tol: 1e-10,
            symmetry_tol: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    pub s: f64,
    pub d: usize,
    pub lattice: LatticeConfig,
    pub extension: ExtensionGridConfig,
    pub solver: SolverConfig,
    pub preset: String,
    pub preset_params: PresetParams,
    pub options: CommandOptions,
    /// Seeds random fields, the preset perturbation and the solver.
    pub seed: u64,
    /// 0 defers to FRACMAP_THREADS, then to the rayon default.
    pub threads: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 1,
            s: 0.5,
            d: 2,
            lattice: LatticeConfig::default(),
            extension: ExtensionGridConfig::default(),
            solver: SolverConfig::default(),
            preset: "winding".into(),
            preset_params: PresetParams::default(),
            options: CommandOptions::default(),
            seed: 0x5EED,
            threads: 0,
            out: PathBuf::from("fracmap-out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Config file (or defaults), then flags, then FRACMAP_THREADS if no thread count was set.
    /// Validation happens in [`crate::run`], after a field dump has supplied its lattice parameters.
    pub fn resolve(ov: &Overrides) -> Result<Self> {
        let mut cfg = match &ov.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(v) = ov.n {
            cfg.n = v;
        }
        if let Some(v) = ov.s {
            cfg.s = v;
        }
        if let Some(v) = ov.d {
            cfg.d = v;
        }
        if let Some(v) = ov.h {
            cfg.lattice.h = v;
        }
        if let Some(v) = ov.l {
            // keep the collar proportion of the default lattice
            cfg.lattice.l_ext *= v / cfg.lattice.l;
            cfg.lattice.l = v;
        }
        if let Some(v) = &ov.preset {
            cfg.preset = v.clone();
        }
        if let Some(v) = ov.tol {
            cfg.solver.tol_tangential = v;
        }
        if let Some(v) = ov.max_iters {
            cfg.solver.max_iters = v;
        }
        if let Some(v) = ov.threads {
            cfg.threads = v;
        }
        if let Some(v) = ov.seed {
            cfg.seed = v;
        }
        if let Some(v) = &ov.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &ov.input {
            cfg.options.input = Some(v.clone());
        }
        if let Some(v) = ov.epsilon {
            cfg.options.epsilon = Some(v);
        }
        if cfg.threads == 0 {
            if let Ok(v) = std::env::var("FRACMAP_THREADS") {
                cfg.threads = v.trim().parse().map_err(|_| Error::Config(format!("FRACMAP_THREADS={v} is not a count")))?;
            }
        }
        cfg.preset_params.seed = cfg.seed;
        cfg.solver.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.extension;
        if e.levels < 4 || !(e.z_max >= 0.0) || !(e.first_cell > 0.0) {
            return Err(Error::Config("extension grid needs levels >= 4, z_max >= 0 and first_cell > 0".into()));
        }
        let o = &self.options;
        if !(o.half_width >= 0.0) || !(o.pde_tol > 0.0) || !(o.symmetry_tol > 0.0) {
            return Err(Error::Config("half_width must be nonnegative, pde_tol and symmetry_tol positive".into()));
        }
        if !o.center.is_empty() && o.center.len() != self.n {
            return Err(Error::Config(format!("center has {} coordinates, n = {}", o.center.len(), self.n)));
        }
        self.solver.validate()
    }

    pub fn center(&self) -> Vec<f64> {
        if self.options.center.is_empty() {
            vec![0.0; self.n]
        } else {
            self.options.center.clone()
        }
    }
}
