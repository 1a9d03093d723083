//! Scenario generation, Monte-Carlo validation of the analytic
//! covariance, and the sensitivity sweeps (feature count, image
//! resolution, grid spacing, terrain amplitude, translation baseline,
//! field of view).

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::constraint::{self, AnchorSource, FeatureAnchor, FeatureObservation, ParamVector};
use crate::covariance::{self, Matrix12, Matrix6, NoiseModel};
use crate::dtm::{self, gaussian, TerrainGrid};
use crate::geom::{self, angle_diff, EulerAngles, ImageRay, Pose, RigidMotion};
use crate::solver::{self, SolverOptions};

/// Correlation length (in grid cells) of the terrain height error the
/// estimator's DTM carries. The first-order error model treats the
/// height error as a smooth offset of the local tangent plane; white
/// per-node noise would also randomize the plane normals, an effect
/// outside the model that visibly inflates the scatter. The error is
/// therefore realized as a per-feature offset-plus-tilt field with
/// tilt std `sqrt(2) * sigma_h / (length * spacing)`.
pub const HEIGHT_ERROR_CORRELATION_CELLS: f64 = 4.0;

/// Node spacing at which the synthetic surface is generated before
/// being resampled to the scenario's grid spacing.
pub const TERRAIN_BASE_SPACING: f64 = 30.0;

/// Correlation length (in meters) of the shared map error field used
/// by the sensitivity studies; see [`ErrorRealization`]. Comparable to
/// the observed footprint, so one realization acts on all features
/// like a common offset-plus-tilt of the map.
pub const SHARED_ERROR_CORRELATION_METERS: f64 = 300.0;

/// Horizontal georegistration error of the shared map, as a fraction
/// of the grid spacing per axis. A misregistered map shifts the whole
/// estimated trajectory with it, a feature-count-independent error
/// floor that no amount of features can average away.
pub const SHARED_REGISTRATION_FRACTION: f64 = 1.0 / 3.0;

/// How the map height error is realized in a Monte-Carlo trial.
///
/// The analytic propagation treats the anchor errors of different
/// features as independent, so validating it uses an independent error
/// draw per feature. An operational flight carries one map whose error
/// field is shared by every feature; nearby features then err together
/// and adding features stops helping once the shared error dominates.
/// The sensitivity studies use that mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorRealization {
    PerFeatureIndependent,
    SharedMap,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("could not place {wanted} visible features (placed {placed})")]
    InsufficientVisibleTerrain { wanted: usize, placed: usize },
    #[error("all {0} Monte-Carlo trials diverged")]
    AllTrialsDiverged(usize),
    #[error(transparent)]
    Dtm(#[from] dtm::DtmError),
    #[error("covariance: {0}")]
    Covariance(#[from] covariance::CovarianceError),
    #[error("solver: {0}")]
    Solver(#[from] solver::SolverError),
    #[error("constraint: {0}")]
    Constraint(#[from] constraint::ConstraintError),
}

/// Everything that defines one simulated test case.
#[derive(Debug, Clone)]
pub struct ScenarioParams {
    pub extent: f64,
    pub spacing: f64,
    pub elevation_range: f64,
    pub altitude: f64,
    pub n_features: usize,
    pub resolution: u32,
    pub fov_deg: f64,
    pub baseline: f64,
    pub rotation_norm_deg: f64,
    pub seed: u64,
}

impl ScenarioParams {
    /// The nominal test case: 3x3 km terrain with 300 m elevation range
    /// on a 30 m grid, 500 m altitude, 170 features, 400x400 image,
    /// 60 deg FOV, 40 m baseline, 10 deg rotation.
    pub fn nominal(seed: u64) -> Self {
        Self {
            extent: 3000.0,
            spacing: 30.0,
            elevation_range: 300.0,
            altitude: 500.0,
            n_features: 170,
            resolution: 400,
            fov_deg: 60.0,
            baseline: 40.0,
            rotation_norm_deg: 10.0,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub grid: TerrainGrid,
    pub truth: ParamVector,
    pub n_features: usize,
    pub image_resolution: u32,
    pub fov_deg: f64,
    pub seed: u64,
    pub noise: NoiseModel,
    pub params: ScenarioParams,
}

impl Scenario {
    pub fn pose1_true(&self) -> Pose {
        self.truth.pose1()
    }

    pub fn motion_true(&self) -> RigidMotion {
        self.truth.motion()
    }
}

/// Half-pixel registration accuracy expressed on the unit-focal-length
/// image plane.
pub fn half_pixel_sigma(resolution: u32, fov_deg: f64) -> f64 {
    0.5 * 2.0 * (fov_deg.to_radians() / 2.0).tan() / resolution as f64
}

/// Deterministic sub-stream seed derivation (SplitMix-style mixing).
fn mix_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E3779B97F4A7C15) ^ index.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Builds the terrain, the true pose above its center and the true
/// ego-motion, all deterministic in the seed.
pub fn build_scenario(p: &ScenarioParams) -> Result<Scenario, SimError> {
    // The underlying surface is always synthesized at the base
    // resolution and resampled to the requested node spacing, so a
    // grid-spacing sweep varies the map resolution of one fixed world
    // instead of generating a world with different small-scale
    // roughness per value.
    let nodes = (p.extent / TERRAIN_BASE_SPACING).round() as usize + 1;
    let base = dtm::fractal_terrain(
        nodes,
        nodes,
        TERRAIN_BASE_SPACING,
        p.elevation_range,
        mix_seed(p.seed, 1, 0),
    )?;
    let grid = if p.spacing == TERRAIN_BASE_SPACING {
        base
    } else {
        base.resample(p.spacing)?
    };
    let (w, d) = grid.extent();
    let cx = 0.5 * w;
    let cy = 0.5 * d;
    let ground = grid.height_at(cx, cy)?;
    // camera over the grid center, looking straight down (roll pi in the
    // z-up world frame)
    let a1 = EulerAngles::new(std::f64::consts::PI, 0.0, 0.0);
    let p1 = Vector3::new(cx, cy, ground + p.altitude);

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(p.seed, 2, 0));
    // horizontal world-frame translation of the requested baseline
    let az = rng.gen_range(0.0..std::f64::consts::TAU);
    let delta_world = p.baseline * Vector3::new(az.cos(), az.sin(), 0.0);
    let rot_axis = unit_vector(&mut rng);
    let ang = p.rotation_norm_deg.to_radians() * rot_axis;
    let a12 = EulerAngles::new(ang.x, ang.y, ang.z);
    let r1 = geom::rotation_from_euler(&a1);
    let r12 = geom::rotation_from_euler(&a12);
    // p2 = p1 + delta_world together with p2 = p1 - R1 R12^T p12
    let p12 = -(r12 * (r1.transpose() * delta_world));
    let truth = ParamVector::new(p1, a1, p12, a12);
    Ok(Scenario {
        grid,
        truth,
        n_features: p.n_features,
        image_resolution: p.resolution,
        fov_deg: p.fov_deg,
        seed: p.seed,
        noise: NoiseModel {
            sigma_l: half_pixel_sigma(p.resolution, p.fov_deg),
            sigma_h: dtm::height_noise_sigma(p.spacing),
        },
        params: p.clone(),
    })
}

pub fn nominal_scenario(seed: u64) -> Result<Scenario, SimError> {
    build_scenario(&ScenarioParams::nominal(seed))
}

/// Noise-free correspondences: feature rays sampled uniformly in the
/// first image, ray-traced to the terrain and projected into the
/// second frame; features must be visible in both frames.
pub fn generate_true_observations(
    s: &Scenario,
) -> Result<(Vec<FeatureObservation>, ParamVector), SimError> {
    let pose1 = s.pose1_true();
    let pose2 = s.truth.pose2();
    let tan_half = (s.fov_deg.to_radians() / 2.0).tan();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(s.seed, 3, 0));
    let mut obs = Vec::with_capacity(s.n_features);
    let mut attempts = 0usize;
    while obs.len() < s.n_features {
        attempts += 1;
        if attempts > 500 * s.n_features {
            return Err(SimError::InsufficientVisibleTerrain {
                wanted: s.n_features,
                placed: obs.len(),
            });
        }
        let q1 = ImageRay::new(
            rng.gen_range(-tan_half..tan_half),
            rng.gen_range(-tan_half..tan_half),
        );
        let dir = pose1.r * q1.vector();
        let ground = match s.grid.raycast(&pose1.p, &dir) {
            Ok(sp) => sp.g,
            Err(_) => continue,
        };
        let q2 = match geom::project_to_image(&pose2, &ground) {
            Ok(q) => q,
            Err(_) => continue,
        };
        if q2.x().abs() > tan_half || q2.y().abs() > tan_half {
            continue;
        }
        obs.push(FeatureObservation { q1, q2 });
    }
    Ok((obs, s.truth))
}

/// Correspondences with the image noise applied to the second-frame
/// rays (the first frame is the noise-free reference).
pub fn generate_observations(
    s: &Scenario,
) -> Result<(Vec<FeatureObservation>, ParamVector), SimError> {
    let (obs, truth) = generate_true_observations(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(s.seed, 4, 0));
    Ok((noisy_observations(&obs, s.noise.sigma_l, &mut rng), truth))
}

fn noisy_observations(
    obs: &[FeatureObservation],
    sigma_l: f64,
    rng: &mut impl Rng,
) -> Vec<FeatureObservation> {
    obs.iter()
        .map(|o| FeatureObservation {
            q1: o.q1,
            q2: ImageRay::new(
                o.q2.x() + sigma_l * gaussian(rng),
                o.q2.y() + sigma_l * gaussian(rng),
            ),
        })
        .collect()
}

/// One independent node-noise realization of the truth terrain per
/// feature, so the height errors different features see are mutually
/// independent — matching the per-feature data covariance the analytic
/// propagation assumes. A shared noisy grid would correlate features
/// that fall in nearby cells.
pub struct FeatureNoisyTerrain {
    grids: Vec<TerrainGrid>,
}

impl FeatureNoisyTerrain {
    /// `centers` are the features' approximate ground points (the tilt
    /// component of each error field vanishes there).
    pub fn new(
        truth: &TerrainGrid,
        centers: &[nalgebra::Vector2<f64>],
        sigma_h: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let slope_sigma =
            std::f64::consts::SQRT_2 * sigma_h / (HEIGHT_ERROR_CORRELATION_CELLS * truth.spacing());
        Self {
            grids: centers
                .iter()
                .map(|c| truth.with_affine_node_noise(*c, sigma_h, slope_sigma, rng))
                .collect(),
        }
    }
}

impl AnchorSource for FeatureNoisyTerrain {
    fn trace(
        &self,
        index: usize,
        pose: &crate::geom::Pose,
        q1: &ImageRay,
    ) -> Result<FeatureAnchor, dtm::DtmError> {
        self.grids[index % self.grids.len()].trace(index, pose, q1)
    }
}

/// One realization of the map the estimator flies with in shared-map
/// mode: the truth terrain plus a correlated height error field and a
/// horizontal georegistration offset.
fn shared_noisy_map(truth: &TerrainGrid, sigma_h: f64, rng: &mut impl Rng) -> TerrainGrid {
    let noisy = truth.with_correlated_node_noise(
        sigma_h,
        SHARED_ERROR_CORRELATION_METERS / truth.spacing(),
        rng,
    );
    let reg = SHARED_REGISTRATION_FRACTION * truth.spacing();
    noisy.with_origin_offset(reg * gaussian(rng), reg * gaussian(rng))
}

/// Initial-guess perturbation: position offset of `pos_mag` meters in a
/// random direction, both attitude triples offset by `ang_mag` radians
/// in a random direction.
pub fn perturb_guess(
    truth: &ParamVector,
    pos_mag: f64,
    ang_mag: f64,
    rng: &mut impl Rng,
) -> ParamVector {
    let mut theta = *truth;
    theta.p1 += pos_mag * unit_vector(rng);
    let da1 = ang_mag * unit_vector(rng);
    theta.a1.phi += da1.x;
    theta.a1.theta += da1.y;
    theta.a1.psi += da1.z;
    let da12 = ang_mag * unit_vector(rng);
    theta.a12.phi += da12.x;
    theta.a12.theta += da12.y;
    theta.a12.psi += da12.z;
    theta
}

/// Second-pose error (position then extracted attitude, wrapped) of an
/// estimate against the truth.
pub fn second_pose_error(theta_hat: &ParamVector, truth: &ParamVector) -> [f64; 6] {
    let pose2_hat = theta_hat.pose2();
    let pose2_true = truth.pose2();
    let e_hat = geom::euler_from_rotation(&pose2_hat.r);
    let e_true = geom::euler_from_rotation(&pose2_true.r);
    let (e_hat, e_true) = match (e_hat, e_true) {
        (Ok(a), Ok(b)) => (a, b),
        _ => (EulerAngles::ZERO, EulerAngles::ZERO),
    };
    [
        pose2_hat.p.x - pose2_true.p.x,
        pose2_hat.p.y - pose2_true.p.y,
        pose2_hat.p.z - pose2_true.p.z,
        angle_diff(e_hat.phi, e_true.phi),
        angle_diff(e_hat.theta, e_true.theta),
        angle_diff(e_hat.psi, e_true.psi),
    ]
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub trial: usize,
    pub converged: bool,
    pub degenerate: bool,
    pub iterations: usize,
    pub final_cost: f64,
    pub condition_number: f64,
    pub theta_error: [f64; 12],
    pub c2_error: [f64; 6],
}

#[derive(Debug, Clone)]
pub struct McResult {
    pub analytic_sigma_theta: Matrix12,
    pub analytic_sigma_c2: Matrix6,
    pub analytic_std_theta: [f64; 12],
    pub analytic_std_c2: [f64; 6],
    pub empirical_std_theta: [f64; 12],
    pub empirical_std_c2: [f64; 6],
    pub convergence_rate: f64,
    pub mean_condition: f64,
    pub trials: usize,
    pub converged_trials: usize,
    pub records: Vec<TrialRecord>,
}

impl McResult {
    /// RMS position std of the second pose (meters).
    pub fn empirical_position_std(&self) -> f64 {
        (self.empirical_std_c2[0].powi(2)
            + self.empirical_std_c2[1].powi(2)
            + self.empirical_std_c2[2].powi(2))
        .sqrt()
    }

    pub fn analytic_position_std(&self) -> f64 {
        (self.analytic_std_c2[0].powi(2)
            + self.analytic_std_c2[1].powi(2)
            + self.analytic_std_c2[2].powi(2))
        .sqrt()
    }

    /// RMS std of the ego-motion rotation angles (radians).
    pub fn empirical_ego_rotation_std(&self) -> f64 {
        (self.empirical_std_theta[9].powi(2)
            + self.empirical_std_theta[10].powi(2)
            + self.empirical_std_theta[11].powi(2))
        .sqrt()
    }
}

fn std_dev(samples: &[f64]) -> f64 {
    let m = samples.len();
    if m < 2 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / m as f64;
    (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt()
}

/// Runs `trials` independent noise realizations of a scenario through
/// the solver and compares the empirical scatter against the analytic
/// covariance evaluated at the truth.
pub fn monte_carlo(s: &Scenario, trials: usize) -> Result<McResult, SimError> {
    monte_carlo_with(
        s,
        trials,
        &SolverOptions::default(),
        ErrorRealization::PerFeatureIndependent,
    )
}

/// [`monte_carlo`] in shared-map mode, the realization the sensitivity
/// sweeps use.
pub fn monte_carlo_shared(s: &Scenario, trials: usize) -> Result<McResult, SimError> {
    monte_carlo_with(
        s,
        trials,
        &SolverOptions::default(),
        ErrorRealization::SharedMap,
    )
}

pub fn monte_carlo_with(
    s: &Scenario,
    trials: usize,
    opts: &SolverOptions,
    realization: ErrorRealization,
) -> Result<McResult, SimError> {
    let (true_obs, truth) = generate_true_observations(s)?;
    let anchors = constraint::anchor_features(&truth.pose1(), &true_obs.iter().map(|o| o.q1).collect::<Vec<_>>(), &s.grid)?;
    let report = covariance::covariance_report(&truth, &true_obs, &anchors, &s.noise)?;
    let analytic_std_theta: [f64; 12] =
        std::array::from_fn(|i| report.sigma_theta[(i, i)].max(0.0).sqrt());
    let analytic_std_c2: [f64; 6] =
        std::array::from_fn(|i| report.sigma_c2[(i, i)].max(0.0).sqrt());
    let centers: Vec<nalgebra::Vector2<f64>> = anchors.iter().map(|a| a.g_e.xy()).collect();

    let mut records = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(s.seed, 10, trial as u64));
        let obs = noisy_observations(&true_obs, s.noise.sigma_l, &mut noise_rng);
        let mut grid_rng = ChaCha8Rng::seed_from_u64(mix_seed(s.seed, 11, trial as u64));
        let noisy_terrain: Box<dyn AnchorSource> = match realization {
            ErrorRealization::PerFeatureIndependent => Box::new(FeatureNoisyTerrain::new(
                &s.grid,
                &centers,
                s.noise.sigma_h,
                &mut grid_rng,
            )),
            ErrorRealization::SharedMap => Box::new(shared_noisy_map(&s.grid, s.noise.sigma_h, &mut grid_rng)),
        };
        let mut guess_rng = ChaCha8Rng::seed_from_u64(mix_seed(s.seed, 12, trial as u64));
        let theta0 = perturb_guess(&truth, 50.0, 2.0_f64.to_radians(), &mut guess_rng);
        match solver::solve(&theta0, &obs, noisy_terrain.as_ref(), opts) {
            Ok(rep) => {
                let dv = rep.theta_hat.to_vector() - truth.to_vector();
                records.push(TrialRecord {
                    trial,
                    converged: rep.converged,
                    degenerate: rep.degenerate,
                    iterations: rep.iterations,
                    final_cost: rep.final_cost,
                    condition_number: rep.condition_number,
                    theta_error: std::array::from_fn(|i| dv[i]),
                    c2_error: second_pose_error(&rep.theta_hat, &truth),
                });
            }
            Err(_) => records.push(TrialRecord {
                trial,
                converged: false,
                degenerate: false,
                iterations: 0,
                final_cost: f64::NAN,
                condition_number: f64::NAN,
                theta_error: [f64::NAN; 12],
                c2_error: [f64::NAN; 6],
            }),
        }
    }

    let converged: Vec<&TrialRecord> = records.iter().filter(|r| r.converged).collect();
    if converged.is_empty() {
        return Err(SimError::AllTrialsDiverged(trials));
    }
    let empirical_std_theta: [f64; 12] = std::array::from_fn(|i| {
        std_dev(&converged.iter().map(|r| r.theta_error[i]).collect::<Vec<_>>())
    });
    let empirical_std_c2: [f64; 6] = std::array::from_fn(|i| {
        std_dev(&converged.iter().map(|r| r.c2_error[i]).collect::<Vec<_>>())
    });
    let mean_condition = converged
        .iter()
        .map(|r| r.condition_number)
        .sum::<f64>()
        / converged.len() as f64;
    Ok(McResult {
        analytic_sigma_theta: report.sigma_theta,
        analytic_sigma_c2: report.sigma_c2,
        analytic_std_theta,
        analytic_std_c2,
        empirical_std_theta,
        empirical_std_c2,
        convergence_rate: converged.len() as f64 / trials as f64,
        mean_condition,
        trials,
        converged_trials: converged.len(),
        records,
    })
}

/// Parameter swept while everything else stays at the base scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    NFeatures,
    Resolution,
    GridSpacing,
    TerrainAmplitude,
    Baseline,
}

impl SweepParameter {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParameter::NFeatures => "n_features",
            SweepParameter::Resolution => "resolution",
            SweepParameter::GridSpacing => "grid_spacing",
            SweepParameter::TerrainAmplitude => "terrain_amplitude",
            SweepParameter::Baseline => "baseline",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "n_features" => SweepParameter::NFeatures,
            "resolution" => SweepParameter::Resolution,
            "grid_spacing" => SweepParameter::GridSpacing,
            "terrain_amplitude" => SweepParameter::TerrainAmplitude,
            "baseline" => SweepParameter::Baseline,
            _ => return None,
        })
    }
}

/// Base scenario with one parameter replaced; grid spacing also updates
/// sigma_h and resolution updates sigma_l through the scenario builder.
pub fn scenario_with(base: &Scenario, parameter: SweepParameter, value: f64) -> Result<Scenario, SimError> {
    let mut p = base.params.clone();
    match parameter {
        SweepParameter::NFeatures => p.n_features = value.round() as usize,
        SweepParameter::Resolution => p.resolution = value.round() as u32,
        SweepParameter::GridSpacing => p.spacing = value,
        SweepParameter::TerrainAmplitude => p.elevation_range = value,
        SweepParameter::Baseline => p.baseline = value,
    }
    build_scenario(&p)
}

#[derive(Debug)]
pub struct SweepValueResult {
    pub value: f64,
    pub result: Result<McResult, String>,
}

#[derive(Debug)]
pub struct SweepResult {
    pub parameter: SweepParameter,
    pub rows: Vec<SweepValueResult>,
}

/// Reruns the Monte-Carlo study for each value of the swept parameter.
/// Per-value failures are recorded and the sweep continues.
pub fn sweep(
    base: &Scenario,
    parameter: SweepParameter,
    values: &[f64],
    trials: usize,
) -> SweepResult {
    let rows = values
        .iter()
        .map(|&value| SweepValueResult {
            value,
            result: scenario_with(base, parameter, value)
                .and_then(|s| monte_carlo_shared(&s, trials))
                .map_err(|e| e.to_string()),
        })
        .collect();
    SweepResult { parameter, rows }
}

#[derive(Debug, Clone)]
pub struct FovReport {
    pub fov_deg: f64,
    pub trials: usize,
    pub convergence_rate: f64,
    pub degenerate_rate: f64,
    pub mean_condition: f64,
}

/// Convergence and conditioning as a function of the field of view.
pub fn fov_study(base: &Scenario, fov_values_deg: &[f64], trials: usize) -> Vec<FovReport> {
    fov_values_deg
        .iter()
        .map(|&fov| {
            let mut p = base.params.clone();
            p.fov_deg = fov;
            let scenario = match build_scenario(&p) {
                Ok(s) => s,
                Err(_) => {
                    return FovReport {
                        fov_deg: fov,
                        trials: 0,
                        convergence_rate: 0.0,
                        degenerate_rate: 1.0,
                        mean_condition: f64::INFINITY,
                    }
                }
            };
            let mut converged = 0usize;
            let mut degenerate = 0usize;
            let mut cond_sum = 0.0;
            let mut cond_count = 0usize;
            let mut ran = 0usize;
            let setup = generate_true_observations(&scenario).ok().and_then(|(o, t)| {
                constraint::anchor_features(
                    &t.pose1(),
                    &o.iter().map(|f| f.q1).collect::<Vec<_>>(),
                    &scenario.grid,
                )
                .ok()
                .map(|a| (o, t, a))
            });
            if let Some((true_obs, truth, _anchors)) = setup {
                for trial in 0..trials {
                    ran += 1;
                    let mut noise_rng =
                        ChaCha8Rng::seed_from_u64(mix_seed(scenario.seed, 10, trial as u64));
                    let obs =
                        noisy_observations(&true_obs, scenario.noise.sigma_l, &mut noise_rng);
                    let mut grid_rng =
                        ChaCha8Rng::seed_from_u64(mix_seed(scenario.seed, 11, trial as u64));
                    let noisy_terrain =
                        shared_noisy_map(&scenario.grid, scenario.noise.sigma_h, &mut grid_rng);
                    let mut guess_rng =
                        ChaCha8Rng::seed_from_u64(mix_seed(scenario.seed, 12, trial as u64));
                    let theta0 =
                        perturb_guess(&truth, 50.0, 2.0_f64.to_radians(), &mut guess_rng);
                    match solver::solve(&theta0, &obs, &noisy_terrain, &SolverOptions::default()) {
                        Ok(rep) => {
                            if rep.converged {
                                converged += 1;
                            }
                            if rep.degenerate {
                                degenerate += 1;
                            }
                            if rep.condition_number.is_finite() {
                                cond_sum += rep.condition_number;
                                cond_count += 1;
                            }
                        }
                        Err(_) => {}
                    }
                }
            }
            FovReport {
                fov_deg: fov,
                trials: ran,
                convergence_rate: if ran > 0 { converged as f64 / ran as f64 } else { 0.0 },
                degenerate_rate: if ran > 0 { degenerate as f64 / ran as f64 } else { 1.0 },
                mean_condition: if cond_count > 0 {
                    cond_sum / cond_count as f64
                } else {
                    f64::INFINITY
                },
            }
        })
        .collect()
}

/// Replaces the first-frame ray of `fraction` of the features with an
/// unrelated ray, which anchors those features onto the wrong part of
/// the terrain (the classic mis-traced outlier).
pub fn inject_anchor_outliers(
    obs: &[FeatureObservation],
    fraction: f64,
    fov_deg: f64,
    rng: &mut impl Rng,
) -> Vec<FeatureObservation> {
    let tan_half = (fov_deg.to_radians() / 2.0).tan();
    let n_out = ((obs.len() as f64) * fraction).round() as usize;
    let mut out = obs.to_vec();
    for k in 0..n_out {
        // corrupt evenly spread indices so outliers are deterministic
        let idx = k * obs.len() / n_out.max(1);
        out[idx].q1 = ImageRay::new(
            rng.gen_range(-tan_half..tan_half),
            rng.gen_range(-tan_half..tan_half),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_pixel_sigma_value() {
        let s = half_pixel_sigma(400, 60.0);
        let expect = 0.5 * 2.0 * (30.0_f64.to_radians()).tan() / 400.0;
        assert_eq!(s, expect);
    }

    #[test]
    fn scenario_is_deterministic_in_the_seed() {
        let a = nominal_scenario(5).unwrap();
        let b = nominal_scenario(5).unwrap();
        assert_eq!(a.truth.to_vector(), b.truth.to_vector());
        assert_eq!(a.grid.height_at(700.0, 1300.0).unwrap(), b.grid.height_at(700.0, 1300.0).unwrap());
        let c = nominal_scenario(6).unwrap();
        assert_ne!(a.truth.to_vector(), c.truth.to_vector());
    }

    #[test]
    fn true_observations_are_consistent() {
        let mut p = ScenarioParams::nominal(3);
        p.n_features = 30;
        let s = build_scenario(&p).unwrap();
        let (obs, truth) = generate_true_observations(&s).unwrap();
        assert_eq!(obs.len(), 30);
        let tan_half = (s.fov_deg.to_radians() / 2.0).tan();
        for o in &obs {
            assert!(o.q1.x().abs() <= tan_half && o.q1.y().abs() <= tan_half);
            assert!(o.q2.x().abs() <= tan_half && o.q2.y().abs() <= tan_half);
        }
        // noise-free correspondences satisfy the constraint exactly
        let q1: Vec<_> = obs.iter().map(|o| o.q1).collect();
        let anchors = constraint::anchor_features(&truth.pose1(), &q1, &s.grid).unwrap();
        let f = constraint::residual_stack(&truth, &obs, &anchors).unwrap();
        assert!(f.amax() < 1e-10);
    }

    #[test]
    fn noisy_observations_only_touch_the_second_frame() {
        let mut p = ScenarioParams::nominal(3);
        p.n_features = 30;
        let s = build_scenario(&p).unwrap();
        let (clean, _) = generate_true_observations(&s).unwrap();
        let (noisy, _) = generate_observations(&s).unwrap();
        let mut max_shift: f64 = 0.0;
        for (c, n) in clean.iter().zip(&noisy) {
            assert_eq!(c.q1, n.q1);
            max_shift = max_shift
                .max((c.q2.x() - n.q2.x()).abs())
                .max((c.q2.y() - n.q2.y()).abs());
        }
        assert!(max_shift > 0.0 && max_shift < 10.0 * s.noise.sigma_l);
    }

    #[test]
    fn perturb_guess_magnitudes() {
        let truth = nominal_scenario(1).unwrap().truth;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = perturb_guess(&truth, 50.0, 0.02, &mut rng);
        assert!(((g.p1 - truth.p1).norm() - 50.0).abs() < 1e-9);
        let da1 = Vector3::new(
            g.a1.phi - truth.a1.phi,
            g.a1.theta - truth.a1.theta,
            g.a1.psi - truth.a1.psi,
        );
        assert!((da1.norm() - 0.02).abs() < 1e-12);
        assert_eq!(g.p12, truth.p12);
    }

    #[test]
    fn second_pose_error_vanishes_at_truth() {
        let truth = nominal_scenario(4).unwrap().truth;
        let e = second_pose_error(&truth, &truth);
        assert!(e.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn outlier_injection_corrupts_requested_fraction() {
        let mut p = ScenarioParams::nominal(6);
        p.n_features = 50;
        let s = build_scenario(&p).unwrap();
        let (obs, _) = generate_true_observations(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corrupted = inject_anchor_outliers(&obs, 0.1, s.fov_deg, &mut rng);
        let changed = obs
            .iter()
            .zip(&corrupted)
            .filter(|(a, b)| a.q1 != b.q1)
            .count();
        assert_eq!(changed, 5);
        assert!(obs.iter().zip(&corrupted).all(|(a, b)| a.q2 == b.q2));
    }

    #[test]
    fn sweep_parameter_names_round_trip() {
        for p in [
            SweepParameter::NFeatures,
            SweepParameter::Resolution,
            SweepParameter::GridSpacing,
            SweepParameter::TerrainAmplitude,
            SweepParameter::Baseline,
        ] {
            assert_eq!(SweepParameter::from_name(p.name()), Some(p));
        }
        assert_eq!(SweepParameter::from_name("bogus"), None);
    }

    #[test]
    fn feature_noisy_terrain_shifts_heights_per_feature() {
        let s = nominal_scenario(8).unwrap();
        let centers = vec![
            nalgebra::Vector2::new(1400.0, 1500.0),
            nalgebra::Vector2::new(1600.0, 1500.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noisy = FeatureNoisyTerrain::new(&s.grid, &centers, 2.4, &mut rng);
        // at each feature's own center the tilt vanishes, leaving a pure
        // height offset of the order of sigma_h
        for (i, c) in centers.iter().enumerate() {
            let d0 = noisy.grids[i].height_at(c.x, c.y).unwrap() - s.grid.height_at(c.x, c.y).unwrap();
            assert!(d0.abs() > 1e-6 && d0.abs() < 15.0, "offset {d0}");
        }
        // realizations for different features are different
        let d_a = noisy.grids[0].height_at(1400.0, 1500.0).unwrap();
        let d_b = noisy.grids[1].height_at(1400.0, 1500.0).unwrap();
        assert_ne!(d_a, d_b);
    }
}
