//! Analytic first-order error propagation: Jacobians of the stacked
//! residual with respect to the 12 parameters and the per-feature data,
//! the data covariance model, and the resulting parameter and
//! second-pose covariances.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};
use thiserror::Error;

use crate::constraint::{
    evaluate_feature, EvalContext, FeatureAnchor, FeatureError, FeatureObservation, ParamVector,
};
use crate::geom::{self, ImageRay};

pub type Matrix12 = SMatrix<f64, 12, 12>;
pub type Matrix6 = SMatrix<f64, 6, 6>;
pub type Matrix6x12 = SMatrix<f64, 6, 12>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovarianceError {
    #[error("feature {index}: {source}")]
    Feature { index: usize, source: FeatureError },
    #[error("normal equations ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("second pose at gimbal lock, Euler covariance undefined")]
    GimbalLock,
    #[error("camera-2 depth is degenerate")]
    DegenerateDepth,
}

/// Measurement noise: image-plane std at unit focal length and DTM
/// height std in meters.
#[derive(Debug, Clone, Copy)]
pub struct NoiseModel {
    pub sigma_l: f64,
    pub sigma_h: f64,
}

/// Full covariance output for one estimate.
#[derive(Debug, Clone)]
pub struct CovarianceReport {
    pub sigma_theta: Matrix12,
    pub sigma_c2: Matrix6,
    pub j_theta: DMatrix<f64>,
    pub condition_number: f64,
}

/// Block-diagonal residual/data Jacobians, one 3x3 block per feature.
#[derive(Debug, Clone)]
pub struct DataJacobian {
    pub q_blocks: Vec<Matrix3<f64>>,
    pub g_blocks: Vec<Matrix3<f64>>,
}

/// Block-diagonal data covariance, one 3x3 block per feature for the
/// image rays and one for the anchors. Cross blocks are zero.
#[derive(Debug, Clone)]
pub struct SigmaD {
    pub q_blocks: Vec<Matrix3<f64>>,
    pub g_blocks: Vec<Matrix3<f64>>,
}

/// `N_P(q2, c2g) = P(q2,q2) P(c2g,c2g) / |c2g|`: the derivative of the
/// normalized projection `v -> P(q2,q2) v / |v|`.
pub fn np_operator(q2: &ImageRay, c2g: &Vector3<f64>) -> Result<Matrix3<f64>, CovarianceError> {
    let norm = c2g.norm();
    if norm <= 1e-6 {
        return Err(CovarianceError::DegenerateDepth);
    }
    let q = q2.vector();
    let p_q2 = geom::projector(&q, &q).map_err(|_| CovarianceError::DegenerateDepth)?;
    let p_g = geom::projector(c2g, c2g).map_err(|_| CovarianceError::DegenerateDepth)?;
    Ok(p_q2 * p_g / norm)
}

fn np_from_eval(p_q2: &Matrix3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let p_v = Matrix3::identity() - v * v.transpose() / v.dot(v);
    p_q2 * p_v / v.norm()
}

/// 3n x 12 Jacobian of the stacked residual with respect to the
/// parameters, block rows per feature, columns ordered
/// (p1, phi1, theta1, psi1, p12, phi12, theta12, psi12).
pub fn jacobian_theta(
    theta: &ParamVector,
    obs_list: &[FeatureObservation],
    anchor_list: &[FeatureAnchor],
) -> Result<DMatrix<f64>, CovarianceError> {
    let ctx = EvalContext::new(theta);
    let n = obs_list.len();
    let mut j = DMatrix::zeros(3 * n, 12);
    for (index, (obs, anchor)) in obs_list.iter().zip(anchor_list).enumerate() {
        let eval = evaluate_feature(&ctx, theta, obs, anchor)
            .map_err(|source| CovarianceError::Feature { index, source })?;
        let np = np_from_eval(&eval.p_q2, &eval.v);
        let r12l = ctx.r12.matrix() * eval.l;
        let row = 3 * index;
        j.view_mut((row, 0), (3, 3)).copy_from(&(-np * r12l));
        for k in 0..3 {
            let col = np * (r12l * (ctx.dr1[k] * eval.w));
            j.view_mut((row, 3 + k), (3, 1)).copy_from(&(-col));
        }
        j.view_mut((row, 6), (3, 3)).copy_from(&np);
        for k in 0..3 {
            let col = np * (ctx.dr12[k] * eval.w);
            j.view_mut((row, 9 + k), (3, 1)).copy_from(&col);
        }
    }
    Ok(j)
}

/// Block-diagonal Jacobians of the residual with respect to the
/// second-frame rays and the anchor points.
pub fn jacobian_data(
    theta: &ParamVector,
    obs_list: &[FeatureObservation],
    anchor_list: &[FeatureAnchor],
) -> Result<DataJacobian, CovarianceError> {
    let ctx = EvalContext::new(theta);
    let mut q_blocks = Vec::with_capacity(obs_list.len());
    let mut g_blocks = Vec::with_capacity(obs_list.len());
    for (index, (obs, anchor)) in obs_list.iter().zip(anchor_list).enumerate() {
        let eval = evaluate_feature(&ctx, theta, obs, anchor)
            .map_err(|source| CovarianceError::Feature { index, source })?;
        let q2 = obs.q2.vector();
        let v = eval.v;
        let jq = -((q2.dot(&v)) * Matrix3::identity() + q2 * v.transpose())
            * eval.p_q2
            / (q2.dot(&q2) * v.norm());
        let np = np_from_eval(&eval.p_q2, &v);
        q_blocks.push(jq);
        g_blocks.push(np * (ctx.r12.matrix() * eval.l));
    }
    Ok(DataJacobian { q_blocks, g_blocks })
}

/// Data covariance: image blocks `sigma_l^2 diag(1,1,0)`, anchor blocks
/// `sigma_h^2 (R1 q1)(R1 q1)^T / (N^T R1 q1)^2` from the along-ray
/// height-error transfer.
pub fn sigma_d(
    noise: &NoiseModel,
    theta: &ParamVector,
    obs_list: &[FeatureObservation],
    anchor_list: &[FeatureAnchor],
) -> Result<SigmaD, CovarianceError> {
    let r1 = geom::rotation_from_euler(&theta.a1);
    let q_template =
        Matrix3::from_diagonal(&Vector3::new(noise.sigma_l.powi(2), noise.sigma_l.powi(2), 0.0));
    let mut q_blocks = Vec::with_capacity(obs_list.len());
    let mut g_blocks = Vec::with_capacity(obs_list.len());
    for (index, (obs, anchor)) in obs_list.iter().zip(anchor_list).enumerate() {
        let ray = r1 * obs.q1.vector();
        let denom = anchor.n.dot(&ray);
        if denom.abs() < 1e-9 {
            return Err(CovarianceError::Feature {
                index,
                source: FeatureError::RayParallelToPlane,
            });
        }
        let dg_dh = ray / denom;
        q_blocks.push(q_template);
        g_blocks.push(noise.sigma_h.powi(2) * dg_dh * dg_dh.transpose());
    }
    Ok(SigmaD { q_blocks, g_blocks })
}

/// Condition number (largest/smallest singular value) of a Jacobian.
pub fn condition_number(j: &DMatrix<f64>) -> f64 {
    let sv = j.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Parameter covariance `J_T (J_D Sigma_D J_D^T) J_T^T` with
/// `J_T = (J_theta^T J_theta)^-1 J_theta^T` formed through a
/// rank-revealing SVD.
pub fn sigma_theta(
    j_theta: &DMatrix<f64>,
    data_jac: &DataJacobian,
    sigma: &SigmaD,
) -> Result<Matrix12, CovarianceError> {
    let n = data_jac.q_blocks.len();
    assert_eq!(j_theta.nrows(), 3 * n);
    let svd = j_theta.clone().svd(true, true);
    let sv = &svd.singular_values;
    let max_sv = sv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_sv = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max_sv > 0.0) || min_sv < max_sv * 1e-10 {
        return Err(CovarianceError::IllConditioned(if min_sv > 0.0 {
            max_sv / min_sv
        } else {
            f64::INFINITY
        }));
    }
    let u = svd.u.as_ref().expect("svd u");
    let v_t = svd.v_t.as_ref().expect("svd v_t");
    // J_T = V S^-1 U^T, 12 x 3n
    let mut vs = v_t.transpose();
    for c in 0..vs.ncols() {
        let s = sv[c];
        for r in 0..vs.nrows() {
            vs[(r, c)] /= s;
        }
    }
    let jt = vs * u.transpose();
    let mut out = Matrix12::zeros();
    for i in 0..n {
        let ti = jt.view((0, 3 * i), (12, 3));
        let block = data_jac.q_blocks[i] * sigma.q_blocks[i] * data_jac.q_blocks[i].transpose()
            + data_jac.g_blocks[i] * sigma.g_blocks[i] * data_jac.g_blocks[i].transpose();
        let contrib = ti * block * ti.transpose();
        for r in 0..12 {
            for c in 0..12 {
                out[(r, c)] += contrib[(r, c)];
            }
        }
    }
    // enforce exact symmetry
    Ok((out + out.transpose()) * 0.5)
}

/// 6x12 Jacobian of the second pose (p2, phi2, theta2, psi2) with
/// respect to the 12 parameters.
pub fn jacobian_c2(theta: &ParamVector) -> Result<Matrix6x12, CovarianceError> {
    let ctx = EvalContext::new(theta);
    let r1 = ctx.r1.matrix();
    let r12 = ctx.r12.matrix();
    let r2 = r1 * r12.transpose();
    if r2[(0, 2)].abs() >= 1.0 - 1e-9 {
        return Err(CovarianceError::GimbalLock);
    }
    let mut j = Matrix6x12::zeros();

    // position rows: p2 = p1 - R1 R12^T p12
    for k in 0..3 {
        j[(k, k)] = 1.0;
    }
    for k in 0..3 {
        let d = -(ctx.dr1[k] * r12.transpose() * theta.p12);
        for r in 0..3 {
            j[(r, 3 + k)] = d[r];
        }
        let d = -(r1 * ctx.dr12[k].transpose() * theta.p12);
        for r in 0..3 {
            j[(r, 9 + k)] = d[r];
        }
    }
    for c in 0..3 {
        for r in 0..3 {
            j[(r, 6 + c)] = -r2[(r, c)];
        }
    }

    // attitude rows: Euler extraction from R2 entries
    let denom_phi = r2[(1, 2)].powi(2) + r2[(2, 2)].powi(2);
    let denom_theta = (1.0 - r2[(0, 2)].powi(2)).sqrt();
    let denom_psi = r2[(0, 0)].powi(2) + r2[(0, 1)].powi(2);
    let angle_rows = |dr2: &Matrix3<f64>| -> Vector3<f64> {
        Vector3::new(
            (r2[(2, 2)] * dr2[(1, 2)] - r2[(1, 2)] * dr2[(2, 2)]) / denom_phi,
            -dr2[(0, 2)] / denom_theta,
            (r2[(0, 0)] * dr2[(0, 1)] - r2[(0, 1)] * dr2[(0, 0)]) / denom_psi,
        )
    };
    for k in 0..3 {
        let d = angle_rows(&(ctx.dr1[k] * r12.transpose()));
        for r in 0..3 {
            j[(3 + r, 3 + k)] = d[r];
        }
        let d = angle_rows(&(r1 * ctx.dr12[k].transpose()));
        for r in 0..3 {
            j[(3 + r, 9 + k)] = d[r];
        }
    }
    Ok(j)
}

/// Second-pose covariance `J_C2 Sigma_theta J_C2^T`, the measurement
/// covariance handed to a downstream navigation filter.
pub fn sigma_c2(theta_hat: &ParamVector, sigma_theta: &Matrix12) -> Result<Matrix6, CovarianceError> {
    let j = jacobian_c2(theta_hat)?;
    let s = j * sigma_theta * j.transpose();
    Ok((s + s.transpose()) * 0.5)
}

/// Convenience wrapper producing the full covariance report at a
/// parameter point.
pub fn covariance_report(
    theta: &ParamVector,
    obs_list: &[FeatureObservation],
    anchor_list: &[FeatureAnchor],
    noise: &NoiseModel,
) -> Result<CovarianceReport, CovarianceError> {
    let j_theta = jacobian_theta(theta, obs_list, anchor_list)?;
    let data_jac = jacobian_data(theta, obs_list, anchor_list)?;
    let sd = sigma_d(noise, theta, obs_list, anchor_list)?;
    let st = sigma_theta(&j_theta, &data_jac, &sd)?;
    let sc2 = sigma_c2(theta, &st)?;
    let condition_number = condition_number(&j_theta);
    Ok(CovarianceReport {
        sigma_theta: st,
        sigma_c2: sc2,
        j_theta,
        condition_number,
    })
}
