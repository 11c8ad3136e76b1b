//! Problem configuration files.

use std::path::{Path, PathBuf};

use bridgekit::{DiscreteMeasure, Grid, Kernel, KernelMatrix, SimulationConfig, SolverConfig, TransitionKernel, VectorParam};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{self, InputHash};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GridSpec {
    fn build(&self, field: &str) -> CliResult<Grid> {
        let d = self.counts.len();
        if d == 0 || self.lower.len() != d || self.upper.len() != d {
            return Err(CliError::invalid(field, "lower, upper and counts must have the same positive length"));
        }
        if let Some(a) = self.counts.iter().position(|&n| n < 2) {
            return Err(CliError::invalid(format!("{field}.counts[{a}]"), "resolution must be at least 2 per axis"));
        }
        for a in 0..d {
            if !(self.lower[a] < self.upper[a]) {
                return Err(CliError::invalid(format!("{field}.upper[{a}]"), "upper bound must exceed lower bound"));
            }
        }
        Grid::new(self.lower.clone(), self.upper.clone(), self.counts.clone()).map_err(CliError::at(field))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: VectorParam,
    pub sd: f64,
}

/// A marginal on the grid: an analytic density evaluated at the grid points, or weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarginalSpec {
    Uniform,
    /// Isotropic Gaussian density.
    Gaussian { mean: VectorParam, sd: f64 },
    GaussianMixture { components: Vec<MixtureComponent> },
    /// Nonnegative weights, one per grid point in row-major order.
    Weights { values: Vec<f64> },
    /// Weights from a JSON array or the last column of a CSV file.
    File { path: PathBuf },
}

fn gaussian_log(x: &[f64], mean: &[f64], sd: f64) -> f64 {
    let r2: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -r2 / (2.0 * sd * sd) - x.len() as f64 * sd.ln()
}

impl MarginalSpec {
    pub fn resolve(&self, grid: &Grid, inputs: &mut Inputs, field: &str) -> CliResult<DiscreteMeasure> {
        let d = grid.dim();
        let check_sd = |sd: f64, f: String| {
            if sd > 0.0 && sd.is_finite() {
                Ok(())
            } else {
                Err(CliError::invalid(f, "standard deviation must be positive"))
            }
        };
        let at = CliError::at(field);
        match self {
            MarginalSpec::Uniform => DiscreteMeasure::uniform(grid).map_err(at),
            MarginalSpec::Gaussian { mean, sd } => {
                check_sd(*sd, format!("{field}.sd"))?;
                let m = mean.resolve(d).map_err(CliError::at(&format!("{field}.mean")))?;
                DiscreteMeasure::probability_from_density(grid, |x| gaussian_log(x, &m, *sd).exp()).map_err(at)
            }
            MarginalSpec::GaussianMixture { components } => {
                if components.is_empty() {
                    return Err(CliError::invalid(format!("{field}.components"), "at least one component is required"));
                }
                let mut parts = Vec::with_capacity(components.len());
                for (k, c) in components.iter().enumerate() {
                    let f = format!("{field}.components[{k}]");
                    check_sd(c.sd, format!("{f}.sd"))?;
                    if !(c.weight > 0.0 && c.weight.is_finite()) {
                        return Err(CliError::invalid(format!("{f}.weight"), "weight must be positive"));
                    }
                    parts.push((c.weight, c.mean.resolve(d).map_err(CliError::at(&format!("{f}.mean")))?, c.sd));
                }
                DiscreteMeasure::probability_from_density(grid, |x| {
                    parts.iter().map(|(w, m, sd)| w * gaussian_log(x, m, *sd).exp()).sum()
                })
                .map_err(at)
            }
            MarginalSpec::Weights { values } => weights_measure(grid, values.clone(), &format!("{field}.values")),
            MarginalSpec::File { path } => {
                let f = format!("{field}.path");
                let (full, bytes) = inputs.read(path, &f)?;
                let values = io::read_values(&full, &bytes, &f)?;
                weights_measure(grid, values, &f)
            }
        }
    }
}

fn weights_measure(grid: &Grid, values: Vec<f64>, field: &str) -> CliResult<DiscreteMeasure> {
    if values.len() != grid.len() {
        return Err(CliError::invalid(
            field,
            format!("expected {} weights (one per grid point), got {}", grid.len(), values.len()),
        ));
    }
    if let Some(i) = values.iter().position(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(CliError::invalid(format!("{field}[{i}]"), "weights must be finite and nonnegative"));
    }
    DiscreteMeasure::on_grid(grid, values)
        .and_then(|m| m.normalized())
        .map_err(CliError::at(field))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilitySection {
    pub family: Option<String>,
    pub levels: usize,
    pub eps_max: f64,
    pub eps_min: f64,
    /// Mixture component for `μ₁` (default: uniform).
    pub other1: Option<MarginalSpec>,
    /// Mixture component for `μ₂` in the `marginal_mixture_both` family (default: uniform).
    pub other2: Option<MarginalSpec>,
    /// Dilation centre (default: grid centre).
    pub centre: Option<Vec<f64>>,
}

impl Default for StabilitySection {
    fn default() -> Self {
        Self { family: None, levels: 13, eps_max: 1e-1, eps_min: 1e-7, other1: None, other2: None, centre: None }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExhaustionSection {
    /// Box half-widths, increasing.
    pub windows: Vec<f64>,
    /// Box centre (default: grid centre).
    pub centre: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSection {
    pub transition: TransitionKernel,
    #[serde(default = "default_time_steps")]
    pub time_steps: usize,
}

fn default_time_steps() -> usize {
    1000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub grid: GridSpec,
    /// Grid for the second marginal; the first grid is reused when absent.
    #[serde(default)]
    pub grid2: Option<GridSpec>,
    #[serde(default)]
    pub kernel: Option<Kernel>,
    /// Kernel values from a CSV table (row `i` = `x_i`, column `j` = `y_j`) or a JSON array of rows.
    #[serde(default)]
    pub kernel_file: Option<PathBuf>,
    pub mu1: MarginalSpec,
    pub mu2: MarginalSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub stability: StabilitySection,
    #[serde(default)]
    pub exhaustion: ExhaustionSection,
    #[serde(default)]
    pub bridge: Option<BridgeSection>,
}

/// Reads referenced files relative to the config and folds their bytes into the input hash.
pub struct Inputs {
    pub base: PathBuf,
    pub hash: InputHash,
}

impl Inputs {
    pub fn new(base: PathBuf) -> Self {
        Self { base, hash: InputHash::new() }
    }

    pub fn read(&mut self, path: &Path, field: &str) -> CliResult<(PathBuf, Vec<u8>)> {
        let full = io::resolve(&self.base, path);
        let bytes = std::fs::read(&full)
            .map_err(|e| CliError::invalid(field, format!("cannot read {}: {e}", full.display())))?;
        self.hash.add(field, &bytes);
        Ok((full, bytes))
    }
}

/// A problem with every default filled in and every referenced file resolved.
pub struct Problem {
    pub config: ProblemConfig,
    pub grid: Grid,
    pub grid2: Grid,
    pub mu1: DiscreteMeasure,
    pub mu2: DiscreteMeasure,
    pub inputs: Inputs,
}

pub fn parse_config(bytes: &[u8]) -> CliResult<ProblemConfig> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| CliError::invalid(e.path().to_string(), e.inner().to_string()))
}

pub fn validate_solver(cfg: &SolverConfig) -> CliResult<()> {
    if !(cfg.tol > 0.0 && cfg.tol.is_finite()) {
        return Err(CliError::invalid("solver.tol", format!("must be a positive number, got {}", cfg.tol)));
    }
    if cfg.max_iter == 0 {
        return Err(CliError::invalid("solver.max_iter", "must be at least 1"));
    }
    Ok(())
}

impl Problem {
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = io::read_bytes(path)?;
        let config = parse_config(&bytes)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_config(config, base)
    }

    pub fn from_config(config: ProblemConfig, base: PathBuf) -> CliResult<Self> {
        validate_solver(&config.solver)?;
        let grid = config.grid.build("grid")?;
        let grid2 = match &config.grid2 {
            Some(g) => g.build("grid2")?,
            None => grid.clone(),
        };
        if config.kernel.is_some() && config.kernel_file.is_some() {
            return Err(CliError::invalid("kernel_file", "give either kernel or kernel_file, not both"));
        }
        let mut inputs = Inputs::new(base);
        let mu1 = config.mu1.resolve(&grid, &mut inputs, "mu1")?;
        let mu2 = config.mu2.resolve(&grid2, &mut inputs, "mu2")?;
        Ok(Self { config, grid, grid2, mu1, mu2, inputs })
    }

    pub fn kernel_matrix(&mut self) -> CliResult<KernelMatrix> {
        if let Some(k) = &self.config.kernel {
            return k.as_matrix_on(&self.grid, &self.grid2).map_err(CliError::at("kernel"));
        }
        let Some(path) = self.config.kernel_file.clone() else {
            return Err(CliError::invalid("kernel", "this command needs kernel or kernel_file"));
        };
        let (full, bytes) = self.inputs.read(&path, "kernel_file")?;
        let rows = io::read_matrix(&full, &bytes, "kernel_file")?;
        if rows.len() != self.grid.len() || rows.iter().any(|r| r.len() != self.grid2.len()) {
            return Err(CliError::invalid(
                "kernel_file",
                format!("expected a {}x{} table", self.grid.len(), self.grid2.len()),
            ));
        }
        KernelMatrix::from_values(&rows).map_err(CliError::at("kernel_file"))
    }

    /// Input hash over the resolved config and the contents of every file read so far.
    pub fn input_hash(&self, extra: &serde_json::Value) -> String {
        let mut h = InputHash::new();
        h.add_json("config", &self.config);
        h.add_json("options", extra);
        h.add("files", self.inputs.hash.hex().as_bytes());
        h.hex()
    }

    pub fn grid_centre(&self) -> Vec<f64> {
        self.grid.lower().iter().zip(self.grid.upper()).map(|(a, b)| 0.5 * (a + b)).collect()
    }
}
