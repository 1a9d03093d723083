use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::SVector;

use cdtm::config::RunConfig;
use cdtm::constraint::{FeatureObservation, ParamVector};
use cdtm::covariance;
use cdtm::dtm;
use cdtm::geom::ImageRay;
use cdtm::output::{fmt_f64, format_matrix, svg_line_plot, CsvTable, Series};
use cdtm::sim::{self, ScenarioParams, SweepParameter};
use cdtm::solver::{self, RobustMode, SolverError, SolverOptions};
use cdtm::asc;

const EXIT_USAGE: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;
const EXIT_DEGENERATE: u8 = 4;
const EXIT_REJECTED: u8 = 5;

#[derive(Parser)]
#[command(name = "cdtm", version, about = "Terrain-referenced pose and ego-motion estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fractal terrain file (ESRI ASCII grid)
    GenTerrain(GenTerrainArgs),
    /// Estimate pose + ego-motion from an observations file and a terrain file
    Estimate(EstimateArgs),
    /// Monte-Carlo validation of the analytic covariance
    Montecarlo(StudyArgs),
    /// Sensitivity sweep over one scenario parameter
    Sweep(SweepArgs),
    /// Convergence and conditioning versus field of view
    Fov(FovArgs),
}

#[derive(Args)]
struct GenTerrainArgs {
    #[arg(long, default_value_t = 101)]
    rows: usize,
    #[arg(long, default_value_t = 101)]
    cols: usize,
    #[arg(long, default_value_t = 30.0)]
    spacing: f64,
    #[arg(long, default_value_t = 300.0)]
    range: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Terrain file (.asc)
    #[arg(long)]
    terrain: PathBuf,
    /// Observations CSV (feature_id,q1x,q1y,q2x,q2y)
    #[arg(long)]
    observations: PathBuf,
    /// Initial guess: 12 comma-separated values
    /// p1x,p1y,p1z,phi1,theta1,psi1,p12x,p12y,p12z,phi12,theta12,psi12
    #[arg(long, value_delimiter = ',')]
    guess: Vec<f64>,
    /// Image-plane noise std (unit focal length)
    #[arg(long, default_value_t = 1.4433756729740643e-3)]
    sigma_l: f64,
    /// Terrain height noise std in meters (default 0.08 * grid spacing)
    #[arg(long)]
    sigma_h: Option<f64>,
    /// Huber-robust reweighting
    #[arg(long)]
    robust: bool,
    /// Keep the ray-traced anchors from the initial guess fixed
    #[arg(long)]
    no_reanchor: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    /// Optional config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also write SVG plots
    #[arg(long)]
    plots: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// n_features | resolution | grid_spacing | terrain_amplitude | baseline
    #[arg(long)]
    parameter: Option<String>,
    /// Comma-separated swept values
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
}

#[derive(Args)]
struct FovArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// Comma-separated fields of view in degrees
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = std::time::Instant::now();
    let code = match cli.command {
        Command::GenTerrain(a) => cmd_gen_terrain(&a),
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Montecarlo(a) => cmd_montecarlo(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Fov(a) => cmd_fov(&a),
    };
    eprintln!("runtime: {:.2}s", started.elapsed().as_secs_f64());
    match code {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn cmd_gen_terrain(a: &GenTerrainArgs) -> Result<ExitCode, String> {
    let grid = dtm::fractal_terrain(a.rows, a.cols, a.spacing, a.range, a.seed)
        .map_err(|e| e.to_string())?;
    asc::write_asc(&a.out, &grid).map_err(|e| e.to_string())?;
    println!(
        "terrain: {}x{} nodes, spacing {} m, elevation range {} m",
        grid.rows(),
        grid.cols(),
        fmt_f64(grid.spacing()),
        fmt_f64(grid.max_height() - grid.min_height())
    );
    Ok(ExitCode::SUCCESS)
}

fn read_observations(path: &Path) -> Result<Vec<FeatureObservation>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("observations file is empty")?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["feature_id", "q1x", "q1y", "q2x", "q2y"] {
        return Err(format!(
            "observations header must be 'feature_id,q1x,q1y,q2x,q2y', got '{header}'"
        ));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != 5 {
                return Err(format!("observations row {}: expected 5 cells", i + 1));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| format!("observations row {}: bad number '{s}'", i + 1))
            };
            Ok(FeatureObservation {
                q1: ImageRay::new(num(cells[1])?, num(cells[2])?),
                q2: ImageRay::new(num(cells[3])?, num(cells[4])?),
            })
        })
        .collect()
}

fn cmd_estimate(a: &EstimateArgs) -> Result<ExitCode, String> {
    let grid = asc::read_asc(&a.terrain).map_err(|e| e.to_string())?;
    let obs = read_observations(&a.observations)?;
    if a.guess.len() != 12 {
        return Err("initial guess needs exactly 12 values".into());
    }
    let theta0 = ParamVector::from_vector(&SVector::<f64, 12>::from_column_slice(&a.guess));
    let opts = SolverOptions {
        robust: if a.robust {
            RobustMode::Huber { delta: None }
        } else {
            RobustMode::Off
        },
        reanchor: !a.no_reanchor,
        ..SolverOptions::default()
    };
    std::fs::create_dir_all(&a.out_dir).map_err(|e| e.to_string())?;
    let report = match solver::solve(&theta0, &obs, &grid, &opts) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("estimate failed: {e}");
            let code = match e {
                SolverError::IllConditioned => EXIT_DEGENERATE,
                _ => EXIT_NOT_CONVERGED,
            };
            return Ok(ExitCode::from(code));
        }
    };
    let noise = covariance::NoiseModel {
        sigma_l: a.sigma_l,
        sigma_h: a.sigma_h.unwrap_or(dtm::height_noise_sigma(grid.spacing())),
    };
    let anchors = cdtm::constraint::anchor_features(
        &report.theta_hat.pose1(),
        &obs.iter().map(|o| o.q1).collect::<Vec<_>>(),
        &grid,
    )
    .map_err(|e| e.to_string())?;
    let cov = covariance::covariance_report(&report.theta_hat, &obs, &anchors, &noise);
    let write = |name: &str, text: String| {
        std::fs::write(a.out_dir.join(name), text).map_err(|e| e.to_string())
    };
    write("theta.txt", format_matrix(&report.theta_hat.to_vector().transpose()))?;
    let mut diag = String::new();
    diag.push_str(&format!("converged = {}\n", report.converged));
    diag.push_str(&format!("degenerate = {}\n", report.degenerate));
    diag.push_str(&format!("rejected = {}\n", report.rejected));
    diag.push_str(&format!("iterations = {}\n", report.iterations));
    diag.push_str(&format!("final_cost = {}\n", fmt_f64(report.final_cost)));
    diag.push_str(&format!(
        "condition_number = {}\n",
        fmt_f64(report.condition_number)
    ));
    if let Some(w) = &report.outlier_weights {
        let ws: Vec<String> = w.iter().map(|x| fmt_f64(*x)).collect();
        diag.push_str(&format!("weights = {}\n", ws.join(" ")));
    }
    match &cov {
        Ok(c) => {
            write("sigma_theta.txt", format_matrix(&c.sigma_theta))?;
            write("sigma_c2.txt", format_matrix(&c.sigma_c2))?;
        }
        Err(e) => diag.push_str(&format!("covariance_error = {e}\n")),
    }
    write("diagnostics.txt", diag)?;
    println!(
        "estimate: converged={} degenerate={} rejected={} iterations={} cost={}",
        report.converged,
        report.degenerate,
        report.rejected,
        report.iterations,
        fmt_f64(report.final_cost)
    );
    let code = if report.degenerate {
        EXIT_DEGENERATE
    } else if report.rejected {
        EXIT_REJECTED
    } else if !report.converged {
        EXIT_NOT_CONVERGED
    } else {
        0
    };
    Ok(ExitCode::from(code))
}

struct StudySetup {
    scenario: sim::Scenario,
    trials: usize,
    out_dir: PathBuf,
    plots: bool,
    config: RunConfig,
}

fn load_study(a: &StudyArgs) -> Result<StudySetup, String> {
    let mut config = match &a.config {
        Some(path) => RunConfig::read(path).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.set("scenario", "seed", seed.to_string()).map_err(|e| e.to_string())?;
    }
    if let Some(trials) = a.trials {
        config.set("run", "trials", trials.to_string()).map_err(|e| e.to_string())?;
    }
    if let Some(dir) = &a.out_dir {
        config
            .set("run", "output_dir", dir.display().to_string())
            .map_err(|e| e.to_string())?;
    }
    if a.plots {
        config.set("run", "plots", "true").map_err(|e| e.to_string())?;
    }
    let e = |err: cdtm::config::ConfigError| err.to_string();
    let seed = config.get_u64("scenario", "seed").map_err(e)?.unwrap_or(0);
    let mut p = ScenarioParams::nominal(seed);
    if let Some(v) = config.get_f64("scenario", "extent").map_err(e)? {
        p.extent = v;
    }
    if let Some(v) = config.get_f64("scenario", "spacing").map_err(e)? {
        p.spacing = v;
    }
    if let Some(v) = config.get_f64("scenario", "elevation_range").map_err(e)? {
        p.elevation_range = v;
    }
    if let Some(v) = config.get_f64("scenario", "altitude").map_err(e)? {
        p.altitude = v;
    }
    if let Some(v) = config.get_usize("scenario", "n_features").map_err(e)? {
        p.n_features = v;
    }
    if let Some(v) = config.get_u64("scenario", "resolution").map_err(e)? {
        p.resolution = v as u32;
    }
    if let Some(v) = config.get_f64("scenario", "fov_deg").map_err(e)? {
        p.fov_deg = v;
    }
    if let Some(v) = config.get_f64("scenario", "baseline").map_err(e)? {
        p.baseline = v;
    }
    if let Some(v) = config.get_f64("scenario", "rotation_norm_deg").map_err(e)? {
        p.rotation_norm_deg = v;
    }
    let mut scenario = sim::build_scenario(&p).map_err(|err| err.to_string())?;
    if let Some(v) = config.get_f64("noise", "sigma_l").map_err(e)? {
        scenario.noise.sigma_l = v;
    }
    if let Some(v) = config.get_f64("noise", "sigma_h").map_err(e)? {
        scenario.noise.sigma_h = v;
    }
    let trials = config.get_usize("run", "trials").map_err(e)?.unwrap_or(150);
    let out_dir = PathBuf::from(
        config
            .get("run", "output_dir")
            .unwrap_or("out")
            .to_string(),
    );
    let plots = config.get_bool("run", "plots").map_err(e)?.unwrap_or(false);
    std::fs::create_dir_all(&out_dir).map_err(|err| err.to_string())?;
    Ok(StudySetup {
        scenario,
        trials,
        out_dir,
        plots,
        config,
    })
}

const THETA_NAMES: [&str; 12] = [
    "p1x", "p1y", "p1z", "phi1", "theta1", "psi1", "p12x", "p12y", "p12z", "phi12", "theta12",
    "psi12",
];
const C2_NAMES: [&str; 6] = ["p2x", "p2y", "p2z", "phi2", "theta2", "psi2"];

fn trial_columns() -> Vec<String> {
    let mut cols = vec![
        "trial".to_string(),
        "converged".to_string(),
        "degenerate".to_string(),
        "iterations".to_string(),
        "final_cost".to_string(),
        "condition".to_string(),
    ];
    cols.extend(THETA_NAMES.iter().map(|n| format!("err_{n}")));
    cols.extend(C2_NAMES.iter().map(|n| format!("err_{n}")));
    cols
}

fn trial_row(r: &cdtm::sim::TrialRecord) -> Vec<String> {
    let mut row = vec![
        r.trial.to_string(),
        r.converged.to_string(),
        r.degenerate.to_string(),
        r.iterations.to_string(),
        fmt_f64(r.final_cost),
        fmt_f64(r.condition_number),
    ];
    row.extend(r.theta_error.iter().map(|x| fmt_f64(*x)));
    row.extend(r.c2_error.iter().map(|x| fmt_f64(*x)));
    row
}

fn cmd_montecarlo(a: &StudyArgs) -> Result<ExitCode, String> {
    let setup = load_study(a)?;
    let result =
        sim::monte_carlo(&setup.scenario, setup.trials).map_err(|e| e.to_string())?;

    let cols: Vec<String> = trial_columns();
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut trials_csv = CsvTable::new("mc-trials", 1, &col_refs);
    for r in &result.records {
        trials_csv.push_row(trial_row(r));
    }
    trials_csv
        .write(&setup.out_dir.join("mc_trials.csv"))
        .map_err(|e| e.to_string())?;

    let mut summary = CsvTable::new(
        "mc-summary",
        1,
        &["name", "analytic_std", "empirical_std", "ratio"],
    );
    let mut max_dev: f64 = 0.0;
    for i in 0..12 {
        let ratio = result.empirical_std_theta[i] / result.analytic_std_theta[i];
        max_dev = max_dev.max((ratio - 1.0).abs());
        summary.push_row(vec![
            THETA_NAMES[i].to_string(),
            fmt_f64(result.analytic_std_theta[i]),
            fmt_f64(result.empirical_std_theta[i]),
            fmt_f64(ratio),
        ]);
    }
    for i in 0..6 {
        let ratio = result.empirical_std_c2[i] / result.analytic_std_c2[i];
        max_dev = max_dev.max((ratio - 1.0).abs());
        summary.push_row(vec![
            C2_NAMES[i].to_string(),
            fmt_f64(result.analytic_std_c2[i]),
            fmt_f64(result.empirical_std_c2[i]),
            fmt_f64(ratio),
        ]);
    }
    summary.push_row(vec![
        "convergence_rate".to_string(),
        String::new(),
        fmt_f64(result.convergence_rate),
        String::new(),
    ]);
    summary.push_row(vec![
        "mean_condition".to_string(),
        String::new(),
        fmt_f64(result.mean_condition),
        String::new(),
    ]);
    summary
        .write(&setup.out_dir.join("mc_summary.csv"))
        .map_err(|e| e.to_string())?;
    std::fs::write(
        setup.out_dir.join("sigma_theta.txt"),
        format_matrix(&result.analytic_sigma_theta),
    )
    .map_err(|e| e.to_string())?;
    std::fs::write(
        setup.out_dir.join("sigma_c2.txt"),
        format_matrix(&result.analytic_sigma_c2),
    )
    .map_err(|e| e.to_string())?;
    if setup.plots {
        let series = vec![
            Series {
                label: "analytic".into(),
                points: (0..12)
                    .map(|i| (i as f64, result.analytic_std_theta[i]))
                    .collect(),
            },
            Series {
                label: "empirical".into(),
                points: (0..12)
                    .map(|i| (i as f64, result.empirical_std_theta[i]))
                    .collect(),
            },
        ];
        std::fs::write(
            setup.out_dir.join("mc_std.svg"),
            svg_line_plot("parameter std", "parameter index", "std", &series),
        )
        .map_err(|e| e.to_string())?;
    }
    println!(
        "monte-carlo: {} trials, convergence rate {}, max |empirical/analytic - 1| = {}",
        result.trials,
        fmt_f64(result.convergence_rate),
        fmt_f64(max_dev)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(a: &SweepArgs) -> Result<ExitCode, String> {
    let setup = load_study(&a.study)?;
    let e = |err: cdtm::config::ConfigError| err.to_string();
    let name = match &a.parameter {
        Some(n) => n.clone(),
        None => setup
            .config
            .get("run", "parameter")
            .ok_or("missing --parameter (or run.parameter in the config)")?
            .to_string(),
    };
    let parameter = SweepParameter::from_name(&name)
        .ok_or_else(|| format!("unknown sweep parameter '{name}'"))?;
    let values = if a.values.is_empty() {
        setup
            .config
            .get_f64_list("run", "values")
            .map_err(e)?
            .ok_or("missing --values (or run.values in the config)")?
    } else {
        a.values.clone()
    };
    let result = sim::sweep(&setup.scenario, parameter, &values, setup.trials);

    let mut cols = vec!["value".to_string()];
    cols.extend(trial_columns());
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut trials_csv = CsvTable::new("sweep-trials", 1, &col_refs);
    let mut summary = CsvTable::new(
        "sweep-summary",
        1,
        &[
            "parameter",
            "value",
            "trials",
            "convergence_rate",
            "mean_condition",
            "analytic_position_std",
            "empirical_position_std",
            "empirical_ego_rotation_std",
            "error",
        ],
    );
    let mut analytic_pts = Vec::new();
    let mut empirical_pts = Vec::new();
    for row in &result.rows {
        match &row.result {
            Ok(mc) => {
                for r in &mc.records {
                    let mut cells = vec![fmt_f64(row.value)];
                    cells.extend(trial_row(r));
                    trials_csv.push_row(cells);
                }
                analytic_pts.push((row.value, mc.analytic_position_std()));
                empirical_pts.push((row.value, mc.empirical_position_std()));
                summary.push_row(vec![
                    parameter.name().to_string(),
                    fmt_f64(row.value),
                    mc.trials.to_string(),
                    fmt_f64(mc.convergence_rate),
                    fmt_f64(mc.mean_condition),
                    fmt_f64(mc.analytic_position_std()),
                    fmt_f64(mc.empirical_position_std()),
                    fmt_f64(mc.empirical_ego_rotation_std()),
                    String::new(),
                ]);
                println!(
                    "{} = {}: position std {} m (analytic {} m), convergence {}",
                    parameter.name(),
                    fmt_f64(row.value),
                    fmt_f64(mc.empirical_position_std()),
                    fmt_f64(mc.analytic_position_std()),
                    fmt_f64(mc.convergence_rate)
                );
            }
            Err(msg) => {
                summary.push_row(vec![
                    parameter.name().to_string(),
                    fmt_f64(row.value),
                    "0".to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    msg.clone(),
                ]);
                eprintln!("{} = {}: {msg}", parameter.name(), fmt_f64(row.value));
            }
        }
    }
    trials_csv
        .write(&setup.out_dir.join("sweep_trials.csv"))
        .map_err(|err| err.to_string())?;
    summary
        .write(&setup.out_dir.join("sweep_summary.csv"))
        .map_err(|err| err.to_string())?;
    if setup.plots {
        let svg = svg_line_plot(
            &format!("position std vs {}", parameter.name()),
            parameter.name(),
            "position std [m]",
            &[
                Series {
                    label: "analytic".into(),
                    points: analytic_pts,
                },
                Series {
                    label: "empirical".into(),
                    points: empirical_pts,
                },
            ],
        );
        std::fs::write(setup.out_dir.join("sweep.svg"), svg).map_err(|err| err.to_string())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_fov(a: &FovArgs) -> Result<ExitCode, String> {
    let setup = load_study(&a.study)?;
    let e = |err: cdtm::config::ConfigError| err.to_string();
    let values = if a.values.is_empty() {
        setup
            .config
            .get_f64_list("run", "values")
            .map_err(e)?
            .unwrap_or_else(|| vec![5.0, 10.0, 20.0, 40.0, 60.0])
    } else {
        a.values.clone()
    };
    let reports = sim::fov_study(&setup.scenario, &values, setup.trials);
    let mut csv = CsvTable::new(
        "fov-summary",
        1,
        &[
            "fov_deg",
            "trials",
            "convergence_rate",
            "degenerate_rate",
            "mean_condition",
        ],
    );
    let mut pts = Vec::new();
    for r in &reports {
        csv.push_row(vec![
            fmt_f64(r.fov_deg),
            r.trials.to_string(),
            fmt_f64(r.convergence_rate),
            fmt_f64(r.degenerate_rate),
            fmt_f64(r.mean_condition),
        ]);
        pts.push((r.fov_deg, r.convergence_rate));
        println!(
            "fov {} deg: convergence {}, degenerate {}, mean condition {}",
            fmt_f64(r.fov_deg),
            fmt_f64(r.convergence_rate),
            fmt_f64(r.degenerate_rate),
            fmt_f64(r.mean_condition)
        );
    }
    csv.write(&setup.out_dir.join("fov_summary.csv"))
        .map_err(|err| err.to_string())?;
    if setup.plots {
        let svg = svg_line_plot(
            "convergence vs field of view",
            "fov [deg]",
            "convergence rate",
            &[Series {
                label: "convergence".into(),
                points: pts,
            }],
        );
        std::fs::write(setup.out_dir.join("fov.svg"), svg).map_err(|err| err.to_string())?;
    }
    Ok(ExitCode::SUCCESS)
}
