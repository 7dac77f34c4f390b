//! Residue frames, orientation quaternions, RBF distance encodings and rigid motions.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::rng::RngStream;

/// Cartesian point in Å.
pub type Point = [f64; 3];

pub(crate) fn vec3(p: &Point) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

pub(crate) fn point(v: &Vector3<f64>) -> Point {
    [v.x, v.y, v.z]
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub fn centroid(points: &[Point]) -> Option<Point> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    Some([c[0] / n, c[1] / n, c[2] / n])
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate local frame: N, CA and C are collinear")]
    DegenerateFrame,
}

const FRAME_EPS: f64 = 1e-8;

/// Orthonormal residue frame anchored at the Cα atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub origin: Vector3<f64>,
    /// Columns are the axes e1, e2, e3.
    pub basis: Matrix3<f64>,
}

impl LocalFrame {
    pub fn identity_at(origin: Vector3<f64>) -> Self {
        LocalFrame {
            origin,
            basis: Matrix3::identity(),
        }
    }

    pub fn axis(&self, k: usize) -> Vector3<f64> {
        self.basis.column(k).into_owned()
    }

    /// Expresses a global-frame vector in local coordinates.
    pub fn to_local(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.basis.transpose() * v
    }
}

/// Gram-Schmidt frame from backbone atoms: e1 along C−Cα, e2 the part of N−Cα
/// orthogonal to e1, e3 = e1 × e2.
pub fn build_local_frame(n: &Point, ca: &Point, c: &Point) -> Result<LocalFrame, GeometryError> {
    let origin = vec3(ca);
    let to_c = vec3(c) - origin;
    let c_norm = to_c.norm();
    if c_norm < FRAME_EPS {
        return Err(GeometryError::DegenerateFrame);
    }
    let e1 = to_c / c_norm;
    let to_n = vec3(n) - origin;
    let ortho = to_n - e1 * e1.dot(&to_n);
    let o_norm = ortho.norm();
    if o_norm < FRAME_EPS * to_n.norm().max(1.0) {
        return Err(GeometryError::DegenerateFrame);
    }
    let e2 = ortho / o_norm;
    let e3 = e1.cross(&e2);
    Ok(LocalFrame {
        origin,
        basis: Matrix3::from_columns(&[e1, e2, e3]),
    })
}

/// Unit quaternion `(w, x, y, z)` of the rotation taking frame `i`'s basis to
/// frame `j`'s basis, expressed in frame `i`. The scalar part is made non-negative.
pub fn relative_quaternion(fi: &LocalFrame, fj: &LocalFrame) -> [f64; 4] {
    let rel = fi.basis.transpose() * fj.basis;
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rel));
    let q = q.into_inner();
    let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
    [sign * q.w, sign * q.i, sign * q.j, sign * q.k]
}

/// Gaussian radial basis bank.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfBank {
    pub centers: Vec<f64>,
    pub width: f64,
}

impl RbfBank {
    /// `count` centers evenly spaced on `[lo, hi]`, width equal to the spacing.
    pub fn evenly_spaced(lo: f64, hi: f64, count: usize) -> Self {
        assert!(count >= 2 && hi > lo);
        let step = (hi - lo) / (count - 1) as f64;
        RbfBank {
            centers: (0..count).map(|k| lo + step * k as f64).collect(),
            width: step,
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn encode_into(&self, d: f64, out: &mut Vec<f64>) {
        out.extend(rbf_features(d, &self.centers, self.width));
    }
}

impl Default for RbfBank {
    fn default() -> Self {
        RbfBank::evenly_spaced(0.0, 20.0, 16)
    }
}

/// `exp(-(d - c_k)^2 / (2 w^2))` for every center `c_k`.
pub fn rbf_features(d: f64, centers: &[f64], width: f64) -> impl Iterator<Item = f64> + '_ {
    let denom = 2.0 * width * width;
    centers.iter().map(move |c| {
        let z = d - c;
        (-(z * z) / denom).exp()
    })
}

/// Proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidMotion {
    pub fn identity() -> Self {
        RigidMotion {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Uniformly random rotation with a translation of up to `max_shift` Å per axis.
    pub fn random(rng: &mut RngStream, max_shift: f64) -> Self {
        let q = loop {
            let v = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                break nalgebra::Quaternion::new(v[0] / n, v[1] / n, v[2] / n, v[3] / n);
            }
        };
        let rotation = UnitQuaternion::from_quaternion(q)
            .to_rotation_matrix()
            .into_inner();
        let translation = Vector3::new(
            rng.uniform(-max_shift, max_shift),
            rng.uniform(-max_shift, max_shift),
            rng.uniform(-max_shift, max_shift),
        );
        RigidMotion {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Point) -> Point {
        point(&(self.rotation * vec3(p) + self.translation))
    }

    pub fn rotate(&self, v: &Point) -> Point {
        point(&(self.rotation * vec3(v)))
    }
}

/// RMSD between `mobile` and `target` after optimal rigid superposition of
/// `mobile` onto `target`. Both slices must have equal, non-zero length.
pub fn superposed_rmsd(mobile: &[Point], target: &[Point]) -> f64 {
    assert_eq!(mobile.len(), target.len());
    assert!(!mobile.is_empty());
    let cm = vec3(&centroid(mobile).unwrap());
    let ct = vec3(&centroid(target).unwrap());
    let mut h = Matrix3::zeros();
    for (m, t) in mobile.iter().zip(target) {
        h += (vec3(m) - cm) * (vec3(t) - ct).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = vt.transpose() * d * u.transpose();
    let sq: f64 = mobile
        .iter()
        .zip(target)
        .map(|(m, t)| (rot * (vec3(m) - cm) + ct - vec3(t)).norm_squared())
        .sum();
    (sq / mobile.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn frame_from(rot: &Matrix3<f64>) -> LocalFrame {
        LocalFrame {
            origin: Vector3::zeros(),
            basis: *rot,
        }
    }

    /// Independent trace-based rotation-matrix-to-quaternion conversion.
    fn oracle_quaternion(m: &Matrix3<f64>) -> [f64; 4] {
        let tr = m.trace();
        let w = (1.0 + tr).max(0.0).sqrt() / 2.0;
        let x = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).max(0.0).sqrt() / 2.0;
        let y = (1.0 - m[(0, 0)] + m[(1, 1)] - m[(2, 2)]).max(0.0).sqrt() / 2.0;
        let z = (1.0 - m[(0, 0)] - m[(1, 1)] + m[(2, 2)]).max(0.0).sqrt() / 2.0;
        let x = x.copysign(m[(2, 1)] - m[(1, 2)]);
        let y = y.copysign(m[(0, 2)] - m[(2, 0)]);
        let z = z.copysign(m[(1, 0)] - m[(0, 1)]);
        [w, x, y, z]
    }

    #[test]
    fn canonical_frame() {
        let f = build_local_frame(&[0.0, 1.0, 0.0], &[0.0; 3], &[1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(f.basis, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn collinear_atoms_are_degenerate() {
        let r = build_local_frame(&[-1.0, 0.0, 0.0], &[0.0; 3], &[1.5, 0.0, 0.0]);
        assert_eq!(r, Err(GeometryError::DegenerateFrame));
        let r = build_local_frame(&[0.0, 1.0, 0.0], &[0.0; 3], &[0.0; 3]);
        assert_eq!(r, Err(GeometryError::DegenerateFrame));
    }

    #[test]
    fn random_frames_are_right_handed_orthonormal() {
        let mut rng = RngStream::new(11);
        for _ in 0..200 {
            let p = |rng: &mut RngStream| [rng.normal(), rng.normal(), rng.normal()];
            let (n, ca, c) = (p(&mut rng), p(&mut rng), p(&mut rng));
            let f = build_local_frame(&n, &ca, &c).unwrap();
            assert_abs_diff_eq!(
                f.basis.transpose() * f.basis,
                Matrix3::identity(),
                epsilon = 1e-6
            );
            assert_abs_diff_eq!(f.basis.determinant(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn quaternion_cases() {
        let id = frame_from(&Matrix3::identity());
        assert_eq!(relative_quaternion(&id, &id), [1.0, 0.0, 0.0, 0.0]);

        let half_turn = Rotation3::from_axis_angle(&Vector3::z_axis(), core::f64::consts::PI);
        let q = relative_quaternion(&id, &frame_from(half_turn.matrix()));
        assert_abs_diff_eq!(q[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q[3].abs(), 1.0, epsilon = 1e-12);

        let quarter = Rotation3::from_axis_angle(&Vector3::z_axis(), core::f64::consts::FRAC_PI_2);
        let q = relative_quaternion(&id, &frame_from(quarter.matrix()));
        let expect = oracle_quaternion(quarter.matrix());
        let h = core::f64::consts::FRAC_1_SQRT_2;
        for k in 0..4 {
            assert_abs_diff_eq!(q[k], expect[k], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(q[0], h, epsilon = 1e-12);
        assert_abs_diff_eq!(q[3], h, epsilon = 1e-12);
    }

    #[test]
    fn quaternion_matches_oracle_on_random_frames() {
        let mut rng = RngStream::new(5);
        for _ in 0..100 {
            let a = RigidMotion::random(&mut rng, 0.0).rotation;
            let b = RigidMotion::random(&mut rng, 0.0).rotation;
            let q = relative_quaternion(&frame_from(&a), &frame_from(&b));
            let mut o = oracle_quaternion(&(a.transpose() * b));
            if o[0] < 0.0 {
                o.iter_mut().for_each(|v| *v = -*v);
            }
            for k in 0..4 {
                assert_abs_diff_eq!(q[k], o[k], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn rbf_values() {
        let bank = RbfBank::default();
        assert_eq!(bank.len(), 16);
        assert_abs_diff_eq!(bank.width, 20.0 / 15.0, epsilon = 1e-12);
        let at_center: Vec<f64> =
            rbf_features(bank.centers[3], &bank.centers, bank.width).collect();
        assert_eq!(at_center[3], 1.0);
        let off: Vec<f64> =
            rbf_features(bank.centers[5] + bank.width, &bank.centers, bank.width).collect();
        assert_abs_diff_eq!(off[5], (-0.5f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(off[5], 0.6065, epsilon = 1e-4);
        for d in [0.0, 3.7, 19.0, 55.0] {
            assert!(rbf_features(d, &bank.centers, bank.width).sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn superposition_removes_rigid_motion() {
        let mut rng = RngStream::new(3);
        let pts: Vec<Point> = (0..8)
            .map(|_| [rng.normal(), rng.normal(), rng.normal()])
            .collect();
        let m = RigidMotion::random(&mut rng, 10.0);
        let moved: Vec<Point> = pts.iter().map(|p| m.apply(p)).collect();
        assert!(superposed_rmsd(&moved, &pts) < 1e-9);
    }
}
