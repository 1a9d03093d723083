//! Rotation conventions, pinhole projection and the two matrix operators
//! (the oblique projector `P` and the plane-intersection operator `L`)
//! that appear in every constraint and Jacobian.
//!
//! Euler convention used throughout: `R = Rx(phi) * Ry(theta) * Rz(psi)`
//! with the passive (coordinate-transform) axis factors, so that
//! `R[(0,2)] = -sin(theta)`, `R[(1,2)]/R[(2,2)] = tan(phi)` and
//! `R[(0,1)]/R[(0,0)] = tan(psi)`.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("pitch at +/-90 deg, Euler extraction undefined")]
    GimbalLock,
    #[error("projector denominator s^T u is numerically zero")]
    DegenerateProjector,
    #[error("ray is parallel to the local tangent plane")]
    RayParallelToPlane,
    #[error("point is behind the camera")]
    BehindCamera,
}

/// Roll/pitch/yaw in radians. Pitch must stay strictly inside
/// (-pi/2, pi/2) for the extraction formulas to be well defined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles {
    pub phi: f64,
    pub theta: f64,
    pub psi: f64,
}

impl EulerAngles {
    pub fn new(phi: f64, theta: f64, psi: f64) -> Self {
        Self { phi, theta, psi }
    }

    pub const ZERO: EulerAngles = EulerAngles {
        phi: 0.0,
        theta: 0.0,
        psi: 0.0,
    };
}

/// Proper orthonormal 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    /// Wraps a matrix that is assumed orthonormal with det +1. Intended
    /// for matrices produced by composition of existing rotations.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> RotationMatrix {
        RotationMatrix(self.0.transpose())
    }

    /// Orthonormality defect `max(|R^T R - I|)`, used by tests and
    /// validation code.
    pub fn orthonormality_defect(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).abs().max()
    }
}

impl std::ops::Mul for RotationMatrix {
    type Output = RotationMatrix;
    fn mul(self, rhs: RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vector3<f64>> for RotationMatrix {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// World pose of the camera: `world_v = r * cam_v + p`.
#[derive(Debug, Clone, Copy)]
pub struct Pose {
    pub p: Vector3<f64>,
    pub r: RotationMatrix,
}

/// Frame-to-frame motion: `cam2_v = r12 * cam1_v + p12`.
#[derive(Debug, Clone, Copy)]
pub struct RigidMotion {
    pub p12: Vector3<f64>,
    pub r12: RotationMatrix,
}

/// Homogeneous image coordinates at unit focal length, normalized so
/// that `q.z == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageRay {
    q: Vector3<f64>,
}

impl ImageRay {
    /// Builds a ray from image-plane coordinates (x, y) on the z = 1 plane.
    pub fn new(x: f64, y: f64) -> Self {
        Self {
            q: Vector3::new(x, y, 1.0),
        }
    }

    pub fn vector(&self) -> Vector3<f64> {
        self.q
    }

    pub fn x(&self) -> f64 {
        self.q.x
    }

    pub fn y(&self) -> f64 {
        self.q.y
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, s, 0.0, -s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, c, 0.0, -c, -s)
}

fn drot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, -c, 0.0, 0.0, 0.0, c, 0.0, -s)
}

fn drot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, c, 0.0, -c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// `R = Rx(phi) * Ry(theta) * Rz(psi)`.
pub fn rotation_from_euler(a: &EulerAngles) -> RotationMatrix {
    RotationMatrix(rot_x(a.phi) * rot_y(a.theta) * rot_z(a.psi))
}

/// Partial derivatives of `rotation_from_euler` with respect to
/// (phi, theta, psi), in that order.
pub fn rotation_partials(a: &EulerAngles) -> [Matrix3<f64>; 3] {
    let rx = rot_x(a.phi);
    let ry = rot_y(a.theta);
    let rz = rot_z(a.psi);
    [
        drot_x(a.phi) * ry * rz,
        rx * drot_y(a.theta) * rz,
        rx * ry * drot_z(a.psi),
    ]
}

/// Inverse of [`rotation_from_euler`]:
/// `theta = asin(-R[(0,2)])`, `phi = atan2(R[(1,2)], R[(2,2)])`,
/// `psi = atan2(R[(0,1)], R[(0,0)])`.
pub fn euler_from_rotation(r: &RotationMatrix) -> Result<EulerAngles, GeomError> {
    let m = r.matrix();
    if m[(0, 2)].abs() >= 1.0 - 1e-9 {
        return Err(GeomError::GimbalLock);
    }
    Ok(EulerAngles {
        phi: m[(1, 2)].atan2(m[(2, 2)]),
        theta: (-m[(0, 2)]).asin(),
        psi: m[(0, 1)].atan2(m[(0, 0)]),
    })
}

/// Oblique projector `P(u, s) = I - u s^T / (s^T u)`. Annihilates `u`
/// and has rank 2.
pub fn projector(u: &Vector3<f64>, s: &Vector3<f64>) -> Result<Matrix3<f64>, GeomError> {
    let denom = s.dot(u);
    if denom.abs() <= 1e-12 * s.norm() * u.norm() {
        return Err(GeomError::DegenerateProjector);
    }
    Ok(Matrix3::identity() - u * s.transpose() / denom)
}

/// Plane-intersection operator `L = q1 n^T / (n^T R1 q1)`. Applied to
/// `g - p1` it gives the camera-frame point where the ray through `q1`
/// meets the plane through `g` with normal `n`.
pub fn l_operator(
    q1: &ImageRay,
    n: &Vector3<f64>,
    r1: &RotationMatrix,
) -> Result<Matrix3<f64>, GeomError> {
    let denom = n.dot(&(*r1 * q1.vector()));
    if denom.abs() < 1e-9 {
        return Err(GeomError::RayParallelToPlane);
    }
    Ok(q1.vector() * n.transpose() / denom)
}

/// Second pose from the first pose and the inter-frame motion:
/// `p2 = p1 - R1 R12^T p12`, `R2 = R1 R12^T`.
pub fn compose_second_pose(pose1: &Pose, motion: &RigidMotion) -> Pose {
    let r2 = pose1.r * motion.r12.transpose();
    Pose {
        p: pose1.p - r2 * motion.p12,
        r: r2,
    }
}

/// Pinhole projection of a world point onto the unit-focal-length
/// image plane.
pub fn project_to_image(pose: &Pose, g: &Vector3<f64>) -> Result<ImageRay, GeomError> {
    let cg = pose.r.transpose() * (g - pose.p);
    if cg.z <= 1e-6 {
        return Err(GeomError::BehindCamera);
    }
    Ok(ImageRay::new(cg.x / cg.z, cg.y / cg.z))
}

/// Smallest signed difference `a - b` wrapped into (-pi, pi].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let mut d = (a - b) % (2.0 * std::f64::consts::PI);
    if d > std::f64::consts::PI {
        d -= 2.0 * std::f64::consts::PI;
    } else if d <= -std::f64::consts::PI {
        d += 2.0 * std::f64::consts::PI;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_euler(rng: &mut StdRng) -> EulerAngles {
        // keep pitch inside +/-80 deg so extraction is well defined
        EulerAngles::new(
            rng.gen_range(-3.1..3.1),
            rng.gen_range(-1.39..1.39),
            rng.gen_range(-3.1..3.1),
        )
    }

    pub(crate) fn random_rotation(rng: &mut StdRng) -> RotationMatrix {
        rotation_from_euler(&random_euler(rng))
    }

    #[test]
    fn rotation_identity() {
        let r = rotation_from_euler(&EulerAngles::ZERO);
        assert_abs_diff_eq!(*r.matrix(), Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn rotation_pure_yaw() {
        let r = rotation_from_euler(&EulerAngles::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let m = r.matrix();
        assert_abs_diff_eq!(m[(0, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m[(0, 1)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m[(0, 2)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rotation_extraction_identities() {
        let a = EulerAngles::new(0.3, -0.4, 1.2);
        let m = rotation_from_euler(&a);
        let m = m.matrix();
        assert_abs_diff_eq!(m[(0, 2)], -a.theta.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(m[(1, 2)] / m[(2, 2)], a.phi.tan(), epsilon = 1e-14);
        assert_abs_diff_eq!(m[(0, 1)] / m[(0, 0)], a.psi.tan(), epsilon = 1e-14);
    }

    #[test]
    fn rotation_orthonormal() {
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..200 {
            let r = random_rotation(&mut rng);
            assert!(r.orthonormality_defect() < 1e-12);
            assert_abs_diff_eq!(r.matrix().determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn euler_round_trip() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..1000 {
            let a = random_euler(&mut rng);
            let b = euler_from_rotation(&rotation_from_euler(&a)).unwrap();
            assert_abs_diff_eq!(a.phi, b.phi, epsilon = 1e-10);
            assert_abs_diff_eq!(a.theta, b.theta, epsilon = 1e-10);
            assert_abs_diff_eq!(a.psi, b.psi, epsilon = 1e-10);
        }
    }

    #[test]
    fn euler_identity_and_fixed_case() {
        let a = euler_from_rotation(&RotationMatrix::identity()).unwrap();
        assert_eq!((a.phi, a.theta, a.psi), (0.0, 0.0, 0.0));
        let b =
            euler_from_rotation(&rotation_from_euler(&EulerAngles::new(0.1, -0.2, 0.3))).unwrap();
        assert_abs_diff_eq!(b.phi, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(b.theta, -0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(b.psi, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn euler_gimbal_lock() {
        // pitch = +90 deg puts -1 at R[(0,2)]
        let r = rotation_from_euler(&EulerAngles::new(0.0, std::f64::consts::FRAC_PI_2, 0.0));
        assert_eq!(euler_from_rotation(&r), Err(GeomError::GimbalLock));
    }

    #[test]
    fn rotation_partials_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        let h = 1e-7;
        for _ in 0..50 {
            let a = random_euler(&mut rng);
            let parts = rotation_partials(&a);
            for k in 0..3 {
                let mut ap = a;
                let mut am = a;
                match k {
                    0 => {
                        ap.phi += h;
                        am.phi -= h;
                    }
                    1 => {
                        ap.theta += h;
                        am.theta -= h;
                    }
                    _ => {
                        ap.psi += h;
                        am.psi -= h;
                    }
                }
                let fd = (rotation_from_euler(&ap).matrix()
                    - rotation_from_euler(&am).matrix())
                    / (2.0 * h);
                assert!((fd - parts[k]).abs().max() < 1e-7);
            }
        }
    }

    #[test]
    fn projector_axis_case() {
        let u = Vector3::new(0.0, 0.0, 1.0);
        let p = projector(&u, &u).unwrap();
        assert_abs_diff_eq!(p, Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)));
    }

    #[test]
    fn projector_annihilates_and_rank_two() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..100 {
            let u = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() + 0.5);
            let s = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() + 0.5);
            let p = match projector(&u, &s) {
                Ok(p) => p,
                Err(_) => continue,
            };
            assert!((p * u).norm() < 1e-12 * u.norm().max(1.0) * p.norm().max(1.0));
            let sv = p.svd(false, false).singular_values;
            assert!(sv[2] < 1e-10 * sv[0]);
            assert!(sv[1] > 1e-6);
            // idempotent
            assert!((p * p - p).abs().max() < 1e-12 * p.abs().max());
        }
    }

    #[test]
    fn projector_degenerate() {
        let u = Vector3::new(1.0, 0.0, 0.0);
        let s = Vector3::new(0.0, 1.0, 0.0);
        assert_eq!(projector(&u, &s), Err(GeomError::DegenerateProjector));
    }

    #[test]
    fn l_operator_axis_case() {
        let q1 = ImageRay::new(0.0, 0.0);
        let n = Vector3::new(0.0, 0.0, 1.0);
        let l = l_operator(&q1, &n, &RotationMatrix::identity()).unwrap();
        assert_abs_diff_eq!(l, Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 1.0)));
    }

    #[test]
    fn l_operator_parallel_ray() {
        let q1 = ImageRay::new(0.0, 0.0);
        let n = Vector3::new(0.0, 1.0, 0.0);
        assert_eq!(
            l_operator(&q1, &n, &RotationMatrix::identity()),
            Err(GeomError::RayParallelToPlane)
        );
    }

    #[test]
    fn l_operator_plane_membership() {
        // p1 + R1 L (h - p1) must lie on the plane through h with normal n
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..100 {
            let r1 = random_rotation(&mut rng);
            let p1 = Vector3::new(
                rng.gen_range(-100.0..100.0),
                rng.gen_range(-100.0..100.0),
                rng.gen_range(200.0..600.0),
            );
            let q1 = ImageRay::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let n = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0);
            let h = Vector3::new(
                rng.gen_range(-200.0..200.0),
                rng.gen_range(-200.0..200.0),
                rng.gen_range(-50.0..50.0),
            );
            let l = match l_operator(&q1, &n, &r1) {
                Ok(l) => l,
                Err(_) => continue,
            };
            let x = p1 + r1 * (l * (h - p1));
            assert!(n.dot(&(x - h)).abs() < 1e-9 * (1.0 + x.norm()));
        }
    }

    #[test]
    fn compose_identity_motion() {
        let pose = Pose {
            p: Vector3::new(1.0, 2.0, 3.0),
            r: rotation_from_euler(&EulerAngles::new(0.2, 0.1, -0.4)),
        };
        let motion = RigidMotion {
            p12: Vector3::zeros(),
            r12: RotationMatrix::identity(),
        };
        let pose2 = compose_second_pose(&pose, &motion);
        assert_abs_diff_eq!(pose2.p, pose.p, epsilon = 1e-15);
        assert_abs_diff_eq!(*pose2.r.matrix(), *pose.r.matrix(), epsilon = 1e-15);
    }

    #[test]
    fn compose_direct_substitution() {
        let pose = Pose {
            p: Vector3::zeros(),
            r: RotationMatrix::identity(),
        };
        let motion = RigidMotion {
            p12: Vector3::new(1.0, 0.0, 0.0),
            r12: RotationMatrix::identity(),
        };
        let pose2 = compose_second_pose(&pose, &motion);
        assert_abs_diff_eq!(pose2.p, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn compose_point_transport() {
        // cam2 coordinates via (cam1 then motion) equal those via the
        // composed second pose
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..100 {
            let pose1 = Pose {
                p: Vector3::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0)),
                r: random_rotation(&mut rng),
            };
            let motion = RigidMotion {
                p12: Vector3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)),
                r12: random_rotation(&mut rng),
            };
            let pose2 = compose_second_pose(&pose1, &motion);
            let w = Vector3::new(rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0));
            let c1 = pose1.r.transpose() * (w - pose1.p);
            let via_motion = motion.r12 * c1 + motion.p12;
            let direct = pose2.r.transpose() * (w - pose2.p);
            assert!((via_motion - direct).norm() < 1e-10 * (1.0 + w.norm()));
        }
    }

    #[test]
    fn projection_cases() {
        let pose = Pose {
            p: Vector3::zeros(),
            r: RotationMatrix::identity(),
        };
        let q = project_to_image(&pose, &Vector3::new(0.0, 0.0, 10.0)).unwrap();
        assert_abs_diff_eq!(q.vector(), Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
        let q = project_to_image(&pose, &Vector3::new(5.0, 0.0, 10.0)).unwrap();
        assert_abs_diff_eq!(q.vector(), Vector3::new(0.5, 0.0, 1.0), epsilon = 1e-15);
        assert_eq!(
            project_to_image(&pose, &Vector3::new(0.0, 0.0, -1.0)),
            Err(GeomError::BehindCamera)
        );
    }

    #[test]
    fn projection_reprojection_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..100 {
            let pose = Pose {
                p: Vector3::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0)),
                r: random_rotation(&mut rng),
            };
            let g = pose.p + pose.r * Vector3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(10.0..500.0));
            let q = project_to_image(&pose, &g).unwrap();
            let cg = pose.r.transpose() * (g - pose.p);
            let on_ray = pose.p + pose.r * (q.vector() * cg.z);
            assert!((on_ray - g).norm() < 1e-10 * (1.0 + g.norm()));
        }
    }
}
