//! Per-feature terrain-correspondence residuals, the stacked residual
//! vector and the rotation-conditioned linear system for the positions.

use nalgebra::{DMatrix, DVector, Matrix3, SVector, Vector3};
use thiserror::Error;

use crate::dtm::{DtmError, TerrainGrid};
use crate::geom::{
    self, EulerAngles, GeomError, ImageRay, Pose, RigidMotion, RotationMatrix,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("feature {index}: {source}")]
    Feature { index: usize, source: FeatureError },
    #[error("anchoring failed for feature {index}: {source}")]
    Anchoring { index: usize, source: DtmError },
    #[error("observation/anchor lists have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} features, got {got}")]
    TooFewFeatures { needed: usize, got: usize },
    #[error("linear system is rank deficient (rank {0} < 6)")]
    RankDeficient(usize),
    #[error("{} feature(s) failed, first: feature {} ({})", .0.len(), .0[0].0, .0[0].1)]
    Features(Vec<(usize, FeatureError)>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("ray parallel to local tangent plane")]
    RayParallelToPlane,
    #[error("predicted camera-2 depth is degenerate")]
    DegenerateDepth,
    #[error("degenerate image ray")]
    DegenerateRay,
}

impl From<GeomError> for FeatureError {
    fn from(e: GeomError) -> Self {
        match e {
            GeomError::RayParallelToPlane => FeatureError::RayParallelToPlane,
            _ => FeatureError::DegenerateRay,
        }
    }
}

/// The 12 estimated parameters: first pose position and attitude, then
/// the inter-frame motion. Flattening order is fixed to
/// (p1, phi1, theta1, psi1, p12, phi12, theta12, psi12).
#[derive(Debug, Clone, Copy)]
pub struct ParamVector {
    pub p1: Vector3<f64>,
    pub a1: EulerAngles,
    pub p12: Vector3<f64>,
    pub a12: EulerAngles,
}

impl ParamVector {
    pub fn new(p1: Vector3<f64>, a1: EulerAngles, p12: Vector3<f64>, a12: EulerAngles) -> Self {
        Self { p1, a1, p12, a12 }
    }

    pub fn to_vector(&self) -> SVector<f64, 12> {
        SVector::<f64, 12>::from_column_slice(&[
            self.p1.x,
            self.p1.y,
            self.p1.z,
            self.a1.phi,
            self.a1.theta,
            self.a1.psi,
            self.p12.x,
            self.p12.y,
            self.p12.z,
            self.a12.phi,
            self.a12.theta,
            self.a12.psi,
        ])
    }

    pub fn from_vector(v: &SVector<f64, 12>) -> Self {
        Self {
            p1: Vector3::new(v[0], v[1], v[2]),
            a1: EulerAngles::new(v[3], v[4], v[5]),
            p12: Vector3::new(v[6], v[7], v[8]),
            a12: EulerAngles::new(v[9], v[10], v[11]),
        }
    }

    pub fn pose1(&self) -> Pose {
        Pose {
            p: self.p1,
            r: geom::rotation_from_euler(&self.a1),
        }
    }

    pub fn motion(&self) -> RigidMotion {
        RigidMotion {
            p12: self.p12,
            r12: geom::rotation_from_euler(&self.a12),
        }
    }

    pub fn pose2(&self) -> Pose {
        geom::compose_second_pose(&self.pose1(), &self.motion())
    }
}

/// Matched image rays of one ground feature in the two frames.
#[derive(Debug, Clone, Copy)]
pub struct FeatureObservation {
    pub q1: ImageRay,
    pub q2: ImageRay,
}

/// Ray-traced ground point with its local tangent-plane normal.
#[derive(Debug, Clone, Copy)]
pub struct FeatureAnchor {
    pub g_e: Vector3<f64>,
    pub n: Vector3<f64>,
}

/// All per-feature data the error analysis treats as noisy: the
/// second-frame rays followed by the anchor points, in feature order.
#[derive(Debug, Clone)]
pub struct DataVector {
    pub q2_all: Vec<ImageRay>,
    pub g_e_all: Vec<Vector3<f64>>,
}

impl DataVector {
    pub fn from_features(obs: &[FeatureObservation], anchors: &[FeatureAnchor]) -> Self {
        Self {
            q2_all: obs.iter().map(|o| o.q2).collect(),
            g_e_all: anchors.iter().map(|a| a.g_e).collect(),
        }
    }
}

/// Rotations and their Euler-angle partials at a parameter point,
/// shared by all features.
#[derive(Debug, Clone)]
pub(crate) struct EvalContext {
    pub r1: RotationMatrix,
    pub r12: RotationMatrix,
    pub dr1: [Matrix3<f64>; 3],
    pub dr12: [Matrix3<f64>; 3],
}

impl EvalContext {
    pub fn new(theta: &ParamVector) -> Self {
        Self {
            r1: geom::rotation_from_euler(&theta.a1),
            r12: geom::rotation_from_euler(&theta.a12),
            dr1: geom::rotation_partials(&theta.a1),
            dr12: geom::rotation_partials(&theta.a12),
        }
    }
}

/// Everything the residual and the analytic Jacobians need for one
/// feature at the current parameter point.
#[derive(Debug, Clone)]
pub(crate) struct FeatureEval {
    /// plane-intersection operator L
    pub l: Matrix3<f64>,
    /// L (g_e - p1): anchor in camera-1 coordinates
    pub w: Vector3<f64>,
    /// predicted feature in camera-2 coordinates
    pub v: Vector3<f64>,
    /// oblique projector P(q2, q2)
    pub p_q2: Matrix3<f64>,
    /// normalized residual
    pub f: Vector3<f64>,
}

pub(crate) fn evaluate_feature(
    ctx: &EvalContext,
    theta: &ParamVector,
    obs: &FeatureObservation,
    anchor: &FeatureAnchor,
) -> Result<FeatureEval, FeatureError> {
    let l = geom::l_operator(&obs.q1, &anchor.n, &ctx.r1)?;
    let w = l * (anchor.g_e - theta.p1);
    let v = theta.p12 + ctx.r12 * w;
    if v.norm() <= 1e-6 {
        return Err(FeatureError::DegenerateDepth);
    }
    let q2 = obs.q2.vector();
    let p_q2 = geom::projector(&q2, &q2)?;
    let f = p_q2 * v / v.norm();
    Ok(FeatureEval { l, w, v, p_q2, f })
}

/// Terrain the anchoring step ray-traces against. The plain grid is the
/// normal case; simulations can substitute per-feature terrain
/// realizations (independent height-error draws per feature).
pub trait AnchorSource {
    fn trace(&self, index: usize, pose: &Pose, q1: &ImageRay) -> Result<FeatureAnchor, DtmError>;
}

impl AnchorSource for TerrainGrid {
    fn trace(&self, _index: usize, pose: &Pose, q1: &ImageRay) -> Result<FeatureAnchor, DtmError> {
        let dir = pose.r * q1.vector();
        self.raycast(&pose.p, &dir)
            .map(|sp| FeatureAnchor { g_e: sp.g, n: sp.n })
    }
}

/// Ray-traces every first-frame feature ray from the pose guess to the
/// terrain and records the local tangent plane.
pub fn anchor_features<S: AnchorSource + ?Sized>(
    pose_guess: &Pose,
    q1_list: &[ImageRay],
    terrain: &S,
) -> Result<Vec<FeatureAnchor>, ConstraintError> {
    q1_list
        .iter()
        .enumerate()
        .map(|(index, q1)| {
            terrain
                .trace(index, pose_guess, q1)
                .map_err(|source| ConstraintError::Anchoring { index, source })
        })
        .collect()
}

/// Normalized single-feature residual
/// `P(q2,q2) [p12 + R12 L (g_e - p1)] / |c2G|`.
pub fn residual_single(
    theta: &ParamVector,
    obs: &FeatureObservation,
    anchor: &FeatureAnchor,
) -> Result<Vector3<f64>, FeatureError> {
    let ctx = EvalContext::new(theta);
    Ok(evaluate_feature(&ctx, theta, obs, anchor)?.f)
}

/// Concatenation of all per-feature residuals in feature order.
pub fn residual_stack(
    theta: &ParamVector,
    obs_list: &[FeatureObservation],
    anchor_list: &[FeatureAnchor],
) -> Result<DVector<f64>, ConstraintError> {
    if obs_list.len() != anchor_list.len() {
        return Err(ConstraintError::LengthMismatch(
            obs_list.len(),
            anchor_list.len(),
        ));
    }
    if obs_list.is_empty() {
        return Err(ConstraintError::TooFewFeatures { needed: 1, got: 0 });
    }
    let ctx = EvalContext::new(theta);
    let mut out = DVector::zeros(3 * obs_list.len());
    let mut failures = Vec::new();
    for (index, (obs, anchor)) in obs_list.iter().zip(anchor_list).enumerate() {
        match evaluate_feature(&ctx, theta, obs, anchor) {
            Ok(eval) => out.fixed_rows_mut::<3>(3 * index).copy_from(&eval.f),
            Err(source) => failures.push((index, source)),
        }
    }
    if !failures.is_empty() {
        return Err(ConstraintError::Features(failures));
    }
    Ok(out)
}

/// Rotation-conditioned linear system in `[p12; p1]`: per feature the
/// 3-row block `[-P(q2) | P(q2) R12 q1 N^T / (N^T R1 q1)]` with right
/// side `P(q2) R12 q1 N^T / (N^T R1 q1) * g_e`.
pub fn linear_system(
    r1: &RotationMatrix,
    r12: &RotationMatrix,
    obs_list: &[FeatureObservation],
    anchor_list: &[FeatureAnchor],
) -> Result<(DMatrix<f64>, DVector<f64>), ConstraintError> {
    if obs_list.len() != anchor_list.len() {
        return Err(ConstraintError::LengthMismatch(
            obs_list.len(),
            anchor_list.len(),
        ));
    }
    if obs_list.len() < 3 {
        return Err(ConstraintError::TooFewFeatures {
            needed: 3,
            got: obs_list.len(),
        });
    }
    let n = obs_list.len();
    let mut a = DMatrix::zeros(3 * n, 6);
    let mut b = DVector::zeros(3 * n);
    for (index, (obs, anchor)) in obs_list.iter().zip(anchor_list).enumerate() {
        let feature = |source: FeatureError| ConstraintError::Feature { index, source };
        let l = geom::l_operator(&obs.q1, &anchor.n, r1).map_err(|e| feature(e.into()))?;
        let q2 = obs.q2.vector();
        let p_q2 = geom::projector(&q2, &q2).map_err(|e| feature(e.into()))?;
        let m = p_q2 * ctx_mul(r12, &l);
        a.view_mut((3 * index, 0), (3, 3)).copy_from(&(-p_q2));
        a.view_mut((3 * index, 3), (3, 3)).copy_from(&m);
        b.rows_mut(3 * index, 3).copy_from(&(m * anchor.g_e));
    }
    let svd = a.clone().svd(false, false);
    let sv = &svd.singular_values;
    let rank = sv.iter().filter(|s| **s > 1e-10 * sv[0]).count();
    if rank < 6 {
        return Err(ConstraintError::RankDeficient(rank));
    }
    Ok((a, b))
}

fn ctx_mul(r12: &RotationMatrix, l: &Matrix3<f64>) -> Matrix3<f64> {
    r12.matrix() * l
}

/// Least-squares solve of the linear system for `(p12, p1)`.
pub fn solve_positions(a: &DMatrix<f64>, b: &DVector<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let svd = a.clone().svd(true, true);
    let x = svd.solve(b, 1e-12).expect("svd solve");
    (
        Vector3::new(x[0], x[1], x[2]),
        Vector3::new(x[3], x[4], x[5]),
    )
}
