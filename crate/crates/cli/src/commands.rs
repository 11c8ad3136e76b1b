use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bridgekit::{
    backward_pde_residual, build_bridge, build_meanfield_field, control_cost_report, empirical_marginal_check,
    exhaustion_solve, geometric_levels, holder_exponent_fit, meanfield_residuals, simulate_bridge,
    spatial_order_study, stability_experiment, verify_solution, BridgeModel, BridgeSpec, BruteConjugateOptions,
    ControlSpec, DiscreteMeasure, DualityInstance, ExhaustionScheme, PerturbationFamily, SchrodingerSolution,
    SimulationConfig, SolutionReport,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{parse_config, MarginalSpec, Problem};
use crate::error::{CliError, CliResult};
use crate::io::{self, csv_text, num, InputHash};

/// Bundled instance for `stability` without `--config`.
const DEFAULT_STABILITY: &str = include_str!("../../../configs/stability.json");

pub const FAMILIES: [&str; 5] =
    ["kernel_scaling", "kernel_mollification", "marginal_mixture", "marginal_mixture_both", "support_dilation"];

#[derive(Serialize)]
pub struct Output<'a, T> {
    pub command: &'a str,
    pub version: &'a str,
    pub input_hash: String,
    pub config: Value,
    pub result: T,
}

fn emit<T: Serialize>(out: &Path, command: &str, input_hash: String, config: Value, result: T) -> CliResult<()> {
    let doc = Output { command, version: env!("CARGO_PKG_VERSION"), input_hash, config, result };
    io::write_json(out, &doc)
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("results serialise")
}

#[derive(Serialize)]
struct SolveResult<'a> {
    #[serde(flatten)]
    solution: &'a SchrodingerSolution,
    report: SolutionReport,
}

pub fn solve(config: &Path, out: &Path, csv: Option<&Path>) -> CliResult<()> {
    let mut p = Problem::load(config)?;
    let q = p.kernel_matrix()?;
    let sol = bridgekit::solve(&q, &p.mu1, &p.mu2, &p.config.solver)?;
    let report = verify_solution(&q, &p.mu1, &p.mu2, &sol)?;
    if let Some(path) = csv {
        let mut rows = Vec::new();
        for (side, mu, nu, u) in [(1, &p.mu1, &sol.nu1, &sol.u1), (2, &p.mu2, &sol.nu2, &sol.u2)] {
            for i in 0..mu.len() {
                let mut r = vec![side.to_string(), i.to_string()];
                r.extend(mu.point(i).iter().map(|&x| num(x)));
                r.extend([num(mu.weights()[i]), num(nu.weights()[i]), num(u[i])]);
                rows.push(r);
            }
        }
        let mut header = vec!["side".to_string(), "index".to_string()];
        header.extend((0..p.grid.dim()).map(|a| format!("x{a}")));
        header.extend(["mu", "nu", "u"].map(String::from));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let text = csv_text(&header, rows);
        io::write_atomic(path, |w| w.write_all(text.as_bytes()))?;
    }
    let hash = p.input_hash(&Value::Null);
    emit(out, "solve", hash, to_value(&p.config), SolveResult { solution: &sol, report })
}

pub fn stability(config: Option<&Path>, family: Option<&str>, levels: Option<usize>, out: &Path) -> CliResult<()> {
    let mut p = match config {
        Some(c) => Problem::load(c)?,
        None => Problem::from_config(parse_config(DEFAULT_STABILITY.as_bytes())?, PathBuf::new())?,
    };
    if let Some(f) = family {
        p.config.stability.family = Some(f.to_string());
    }
    if let Some(k) = levels {
        p.config.stability.levels = k;
    }
    let sec = p.config.stability.clone();
    let name = sec.family.clone().ok_or_else(|| CliError::invalid("stability.family", "no family given"))?;
    if sec.levels < 2 {
        return Err(CliError::invalid("stability.levels", "need at least 2 levels"));
    }
    if !(sec.eps_min > 0.0 && sec.eps_min < sec.eps_max && sec.eps_max.is_finite()) {
        return Err(CliError::invalid("stability.eps_min", "need 0 < eps_min < eps_max"));
    }
    let eps = geometric_levels(sec.eps_max, sec.eps_min, sec.levels);
    let q = p.kernel_matrix()?;
    let base = bridgekit::Problem::new(q, p.mu1.clone(), p.mu2.clone()).map_err(CliError::at("mu1"))?;
    let other = |spec: &Option<MarginalSpec>, p: &mut Problem, field: &str| -> CliResult<DiscreteMeasure> {
        let grid = if field.ends_with('2') { p.grid2.clone() } else { p.grid.clone() };
        spec.clone().unwrap_or(MarginalSpec::Uniform).resolve(&grid, &mut p.inputs, field)
    };
    let fam = match name.as_str() {
        "kernel_scaling" => PerturbationFamily::kernel_scaling(&base, &eps),
        "kernel_mollification" => PerturbationFamily::kernel_mollification(&base, &eps),
        "marginal_mixture" => {
            let o1 = other(&sec.other1, &mut p, "stability.other1")?;
            PerturbationFamily::marginal_mixture(&base, &o1, None, &eps)
        }
        "marginal_mixture_both" => {
            let o1 = other(&sec.other1, &mut p, "stability.other1")?;
            let o2 = other(&sec.other2, &mut p, "stability.other2")?;
            PerturbationFamily::marginal_mixture(&base, &o1, Some(&o2), &eps)
        }
        "support_dilation" => {
            if p.config.grid2.is_some() {
                return Err(CliError::invalid("grid2", "support dilation needs both marginals on one grid"));
            }
            let centre = sec.centre.clone().unwrap_or_else(|| p.grid_centre());
            if centre.len() != p.grid.dim() {
                return Err(CliError::invalid("stability.centre", "centre dimension must match the grid"));
            }
            PerturbationFamily::support_dilation(&base, &p.grid, &centre, &eps)
        }
        other => {
            return Err(CliError::invalid(
                "stability.family",
                format!("unknown family {other:?}; expected one of {}", FAMILIES.join(", ")),
            ))
        }
    }
    .map_err(CliError::at("stability"))?;
    let report = stability_experiment(&fam, &p.config.solver)?;
    let (fit, fit_error) = match holder_exponent_fit(&report) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let csv = csv_text(
        &["index", "parameter", "marginal_delta", "kernel_delta", "delta", "solution_delta", "u_sup_distance", "u_pointwise_distance", "iterations"],
        report.levels.iter().map(|l| {
            vec![
                l.index.to_string(),
                num(l.parameter),
                num(l.marginal_delta),
                num(l.kernel_delta),
                num(l.delta),
                num(l.solution_delta),
                num(l.u_sup_distance),
                num(l.u_pointwise_distance),
                l.iterations.to_string(),
            ]
        }),
    );
    let hash = p.input_hash(&Value::Null);
    let result = json!({
        "family": name,
        "eps": eps,
        "report": report,
        "holder_fit": fit,
        "holder_fit_error": fit_error,
        "csv": csv,
    });
    emit(out, "stability", hash, to_value(&p.config), result)
}

pub fn exhaustion(config: &Path, windows: Option<Vec<f64>>, out: &Path) -> CliResult<()> {
    let mut p = Problem::load(config)?;
    if let Some(w) = windows {
        p.config.exhaustion.windows = w;
    }
    if p.config.grid2.is_some() {
        return Err(CliError::invalid("grid2", "exhaustion windows need both marginals on one grid"));
    }
    let sec = p.config.exhaustion.clone();
    if sec.windows.is_empty() {
        return Err(CliError::invalid("exhaustion.windows", "no windows given"));
    }
    if let Some(i) = sec.windows.iter().position(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(CliError::invalid(format!("exhaustion.windows[{i}]"), "half-widths must be positive"));
    }
    let centre = sec.centre.clone().unwrap_or_else(|| p.grid_centre());
    if centre.len() != p.grid.dim() {
        return Err(CliError::invalid("exhaustion.centre", "centre dimension must match the grid"));
    }
    let q = p.kernel_matrix()?;
    let boxes = ExhaustionScheme::boxes(&p.grid, &centre, &sec.windows);
    let sizes: Vec<usize> = boxes.iter().map(Vec::len).collect();
    let scheme = ExhaustionScheme::new(boxes, &p.mu1, &p.mu2).map_err(CliError::at("exhaustion.windows"))?;
    let (_, report) = exhaustion_solve(&q, &p.mu1, &p.mu2, &scheme, &p.config.solver, &[])?;
    let csv = csv_text(
        &["n", "half_width", "window_size", "mass1", "mass2", "iterations", "marginal_residual", "bl_distance"],
        report.levels.iter().map(|l| {
            vec![
                l.n.to_string(),
                num(sec.windows[l.n - 1]),
                l.window_size.to_string(),
                num(l.mass1),
                num(l.mass2),
                l.iterations.to_string(),
                num(l.marginal_residual),
                num(l.bl_distance),
            ]
        }),
    );
    let hash = p.input_hash(&Value::Null);
    let result = json!({
        "centre": centre,
        "half_widths": sec.windows,
        "window_sizes": sizes,
        "report": report,
        "csv": csv,
    });
    emit(out, "exhaustion", hash, to_value(&p.config), result)
}

pub fn bridge(config: &Path, out: &Path) -> CliResult<()> {
    let p = Problem::load(config)?;
    let sec = p.config.bridge.clone().ok_or_else(|| CliError::invalid("bridge", "missing bridge section"))?;
    if p.config.grid2.is_some() {
        return Err(CliError::invalid("grid2", "the bridge lives on a single grid"));
    }
    if sec.time_steps < 2 {
        return Err(CliError::invalid("bridge.time_steps", "need at least 2 time steps"));
    }
    sec.transition.validate(p.grid.dim()).map_err(CliError::at("bridge.transition"))?;
    let model = build_bridge(sec.transition, p.mu1.clone(), p.mu2.clone(), p.grid.clone(), sec.time_steps, &p.config.solver)
        .map_err(|e| match e {
            bridgekit::Error::TerminalNotDensity => CliError::invalid("mu2", e.to_string()),
            other => other.into(),
        })?;
    let sol = model.solution();
    let result = json!({
        "model": model.spec(),
        "summary": {
            "iterations": sol.iterations,
            "marginal_residual": sol.marginal_residual,
            "normalization_mass": sol.normalization_mass,
            "relative_entropy": model.relative_entropy(),
        },
    });
    let hash = p.input_hash(&Value::Null);
    emit(out, "bridge", hash, to_value(&p.config), result)
}

/// A model written by `bridge`, with its provenance.
pub struct LoadedModel {
    pub model: BridgeModel,
    pub config: Value,
    pub echo: Value,
    pub hash: InputHash,
}

pub fn load_model(path: &Path) -> CliResult<LoadedModel> {
    let bytes = io::read_bytes(path)?;
    let doc: Value = serde_json::from_slice(&bytes).map_err(|e| CliError::invalid("model", e.to_string()))?;
    if doc.get("command").and_then(Value::as_str) != Some("bridge") {
        return Err(CliError::invalid("model.command", "not a model written by `bridgekit bridge`"));
    }
    let spec_value = doc.pointer("/result/model").cloned().unwrap_or(Value::Null);
    let spec: BridgeSpec = serde_path_to_error::deserialize(spec_value)
        .map_err(|e| CliError::invalid(format!("model.result.model.{}", e.path()), e.inner().to_string()))?;
    let model = BridgeModel::from_spec(spec).map_err(CliError::at("model.result.model"))?;
    let config = doc.get("config").cloned().unwrap_or(Value::Null);
    let echo = json!({
        "path": path.display().to_string(),
        "input_hash": doc.get("input_hash").cloned().unwrap_or(Value::Null),
        "config": config,
    });
    let mut hash = InputHash::new();
    hash.add("model", &bytes);
    Ok(LoadedModel { model, config, echo, hash })
}

pub struct PdeOptions {
    pub centres: Vec<f64>,
    pub time_stride: usize,
}

pub fn pde_check(model_path: &Path, out: &Path, summary: Option<&Path>, opts: &PdeOptions) -> CliResult<()> {
    if opts.time_stride == 0 {
        return Err(CliError::invalid("time_stride", "must be at least 1"));
    }
    let lm = load_model(model_path)?;
    let model = &lm.model;
    let big_k = model.spec().time_steps;
    let back = backward_pde_residual(model).map_err(CliError::at("model"))?;
    // backward rows are model times 1..K-1
    let mut rows: BTreeMap<usize, (Option<usize>, Option<(usize, usize)>)> = BTreeMap::new();
    for r in (0..back.times.len()).step_by(opts.time_stride) {
        rows.entry(r + 1).or_default().0 = Some(r);
    }
    let mut fields = Vec::new();
    for (c_idx, &c) in opts.centres.iter().enumerate() {
        let k = (c * big_k as f64).round() as usize;
        if !(c > 0.0 && c < 1.0) || k == 0 || k + 1 > big_k {
            return Err(CliError::invalid(format!("centres[{c_idx}]"), format!("time {c} must lie strictly inside the time grid")));
        }
        let ts = [k - 1, k, k + 1].map(|j| j as f64 / big_k as f64);
        let field = build_meanfield_field(model, &ts)?;
        let mf = meanfield_residuals(model, &field).map_err(CliError::at("model"))?;
        let entry = rows.entry(k).or_default();
        entry.1 = Some((fields.len(), 0));
        if k >= 1 && k - 1 < back.times.len() {
            entry.0 = Some(k - 1);
        }
        fields.push((ts[1], mf, field.deviations));
    }
    let xs = &back.xs;
    let text = csv_text(
        &["t", "x", "r_backward", "r_fp", "r_hjb"],
        rows.iter().flat_map(|(&k, &(b, f))| {
            let t = k as f64 / big_k as f64;
            let back = &back;
            let fields = &fields;
            (0..xs.len()).map(move |i| {
                let (fp, hjb) = match f {
                    Some((j, row)) => (num(fields[j].1.fokker_planck.at(row, i)), num(fields[j].1.hjb.at(row, i))),
                    None => (String::new(), String::new()),
                };
                vec![num(t), num(xs[i]), b.map_or(String::new(), |r| num(back.at(r, i))), fp, hjb]
            })
        }),
    );
    io::write_atomic(out, |w| w.write_all(text.as_bytes()))?;

    if let Some(path) = summary {
        let g = model.grid();
        let (lo, hi) = (g.lower()[0], g.upper()[0]);
        let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        let probes: Vec<f64> = [-0.3, -0.15, 0.0, 0.1, 0.25].iter().map(|s| mid + s * half).collect();
        let dx = g.spacing(0);
        let order = spatial_order_study(model, 0.5, &probes, &[4.0 * dx, 2.0 * dx, dx]).map_err(CliError::at("model"))?;
        let ratios: Vec<f64> = order.windows(2).map(|w| w[0].max_error / w[1].max_error).collect();
        let per_time: Vec<Value> = fields
            .iter()
            .map(|(t, mf, dev)| {
                json!({
                    "t": t,
                    "fokker_planck_interior_max": mf.fokker_planck.interior_max,
                    "hjb_interior_max": mf.hjb.interior_max,
                    "terminal_error": mf.terminal_error,
                    "terminal_band": mf.terminal_band,
                    "recompute_deviations": dev,
                    "weak_fokker_planck": mf.weak_fokker_planck,
                    "weak_hjb": mf.weak_hjb,
                })
            })
            .collect();
        let result = json!({
            "residuals_csv": out.display().to_string(),
            "backward": {
                "interior_max": back.interior_max,
                "interior_l2": back.interior_l2,
                "interior_points": back.interior.len(),
            },
            "meanfield": per_time,
            "spatial_order": { "t": 0.5, "probes": probes, "rows": order, "ratios": ratios },
        });
        let opts_echo = json!({ "centres": opts.centres, "time_stride": opts.time_stride });
        let mut hash = lm.hash;
        hash.add_json("options", &opts_echo);
        emit(path, "pde-check", hash.hex(), json!({ "model": lm.echo, "options": opts_echo }), result)?;
    }
    Ok(())
}

pub struct SimulateOptions {
    pub paths: Option<usize>,
    pub dt: Option<f64>,
    pub seed: Option<u64>,
    pub record_stride: Option<usize>,
    pub noise_refinement: Option<usize>,
    pub control_scale: f64,
    pub threshold: f64,
    pub trajectories: Option<PathBuf>,
}

pub fn simulate(model_path: &Path, out: &Path, opts: &SimulateOptions) -> CliResult<()> {
    let lm = load_model(model_path)?;
    let model = &lm.model;
    let mut cfg: SimulationConfig = match lm.config.get("simulation") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::invalid("model.config.simulation", e.to_string()))?,
        None => SimulationConfig::default(),
    };
    cfg.n_paths = opts.paths.unwrap_or(cfg.n_paths);
    cfg.dt = opts.dt.unwrap_or(cfg.dt);
    cfg.seed = opts.seed.unwrap_or(cfg.seed);
    cfg.noise_refinement = opts.noise_refinement.unwrap_or(cfg.noise_refinement);
    cfg.record_stride = match (opts.record_stride, &opts.trajectories) {
        (Some(s), _) => s,
        (None, Some(_)) => 1,
        (None, None) => cfg.record_stride,
    };
    let steps = cfg.steps().map_err(CliError::at("simulation"))?;
    if !(opts.control_scale.is_finite()) {
        return Err(CliError::invalid("control_scale", "must be finite"));
    }
    if !(opts.threshold > 0.0) {
        return Err(CliError::invalid("threshold", "must be positive"));
    }
    let control = ControlSpec { scale: opts.control_scale };
    let ens = simulate_bridge(model, &cfg, &control).map_err(CliError::at("simulation"))?;
    let initial = empirical_marginal_check(&ens, 0.0, model.grid(), model.p0(), opts.threshold)?;
    let terminal = empirical_marginal_check(&ens, 1.0, model.grid(), model.p1(), opts.threshold)?;
    let cost = control_cost_report(&ens, model)?;
    let d = ens.dim;
    let fin = ens.final_states();
    let n = ens.n_paths as f64;
    let mean: Vec<f64> = (0..d).map(|a| fin.iter().skip(a).step_by(d).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..d)
        .map(|a| fin.iter().skip(a).step_by(d).map(|x| (x - mean[a]).powi(2)).sum::<f64>() / (n - 1.0).max(1.0))
        .collect();
    let target_var: Vec<f64> = (0..d).map(|a| model.p1().variance(a)).collect();
    let trajectories = match &opts.trajectories {
        Some(path) => {
            io::write_atomic(path, |w| ens.write_binary(w))?;
            json!({
                "path": path.display().to_string(),
                "n_paths": ens.n_paths,
                "n_records": ens.record_times.len(),
                "dim": d,
            })
        }
        None => Value::Null,
    };
    let result = json!({
        "steps": steps,
        "record_times": ens.record_times.len(),
        "initial": initial,
        "terminal": terminal,
        "terminal_moments": {
            "mean": mean,
            "variance": var,
            "target_mean": model.p1().mean(),
            "target_variance": target_var,
        },
        "cost": cost,
        "out_of_hull_fraction": ens.out_of_hull_fraction(),
        "hull_clamps": ens.hull_clamps,
        "warnings": ens.warnings,
        "trajectories": trajectories,
    });
    let opts_echo = json!({
        "simulation": cfg,
        "control": control,
        "threshold": opts.threshold,
        "trajectories": opts.trajectories.is_some(),
    });
    let mut hash = lm.hash;
    hash.add_json("options", &opts_echo);
    emit(out, "simulate", hash.hex(), json!({ "model": lm.echo, "options": opts_echo }), result)
}

pub fn duality_check(model_path: &Path, psi_path: &Path, eps: &[f64], out: &Path) -> CliResult<()> {
    if eps.is_empty() {
        return Err(CliError::invalid("eps", "give at least one step"));
    }
    if let Some(i) = eps.iter().position(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(CliError::invalid(format!("eps[{i}]"), "steps must be positive"));
    }
    let lm = load_model(model_path)?;
    let model = &lm.model;
    let psi_bytes = io::read_bytes(psi_path)?;
    let psi = io::read_values(psi_path, &psi_bytes, "psi")?;
    if psi.len() != model.grid().len() {
        return Err(CliError::invalid(
            "psi",
            format!("expected {} values (one per grid point), got {}", model.grid().len(), psi.len()),
        ));
    }
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(CliError::invalid("psi", "values must be finite"));
    }
    let inst = DualityInstance::from_model(model)?;
    let report = inst.gateaux_report(&psi, eps)?;
    let brute = if model.grid().len() <= 8 {
        let b = inst.v_star_brute(&psi, &BruteConjugateOptions::default())?;
        let closed = inst.v_star(&psi)?;
        json!({ "brute": b, "closed_form": closed, "difference": (b.value - closed).abs() })
    } else {
        Value::Null
    };
    let result = json!({
        "v_value": inst.v_value(),
        "v_star_psi": inst.v_star(&psi)?,
        "psi_integral_p1": model.p1().integrate(&psi),
        "gateaux": report,
        "brute_conjugate": brute,
    });
    let opts_echo = json!({ "eps": eps, "psi": psi_path.display().to_string() });
    let mut hash = lm.hash;
    hash.add("psi", &psi_bytes);
    hash.add_json("options", &json!({ "eps": eps }));
    emit(out, "duality-check", hash.hex(), json!({ "model": lm.echo, "options": opts_echo }), result)
}
