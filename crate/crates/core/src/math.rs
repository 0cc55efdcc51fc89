//! Small fixed-size linear algebra shared by the f64 and tape paths.

use crate::autodiff::Scalar;

pub type Vec3<S = f64> = [S; 3];
pub type Quat<S = f64> = [S; 4];
pub type Mat3<S = f64> = [[S; 3]; 3];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_normalize<S: Scalar>(q: Quat<S>) -> Quat<S> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Hamilton product `a * b`: rotating by the result applies `b` first.
pub fn quat_mul<S: Scalar>(a: Quat<S>, b: Quat<S>) -> Quat<S> {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_mat<S: Scalar>(q: Quat<S>) -> Mat3<S> {
    let [w, x, y, z] = q;
    let two = |v: S| v * 2.0;
    [
        [
            -two(y * y + z * z) + 1.0,
            two(x * y - w * z),
            two(x * z + w * y),
        ],
        [
            two(x * y + w * z),
            -two(x * x + z * z) + 1.0,
            two(y * z - w * x),
        ],
        [
            two(x * z - w * y),
            two(y * z + w * x),
            -two(x * x + y * y) + 1.0,
        ],
    ]
}

pub fn mat_mul<S: Scalar>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    std::array::from_fn(|i| {
        std::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j])
    })
}

pub fn mat_transpose<S: Scalar>(a: &Mat3<S>) -> Mat3<S> {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
}

pub fn mat_vec<S: Scalar>(a: &Mat3<S>, v: Vec3<S>) -> Vec3<S> {
    std::array::from_fn(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

/// `R diag(exp(2 s)) R^T` for log-scales `s` and unit quaternion `q`.
pub fn covariance_from_scale_rot<S: Scalar>(log_scale: Vec3<S>, q: Quat<S>) -> Mat3<S> {
    let r = quat_to_mat(q);
    let var = [
        (log_scale[0] * 2.0).exp(),
        (log_scale[1] * 2.0).exp(),
        (log_scale[2] * 2.0).exp(),
    ];
    std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            r[i][0] * r[j][0] * var[0] + r[i][1] * r[j][1] * var[1] + r[i][2] * r[j][2] * var[2]
        })
    })
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm3(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Eigenvalues of a symmetric 3x3 matrix, ascending (closed form).
pub fn sym_eigenvalues(a: &Mat3) -> [f64; 3] {
    let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
    if p1 == 0.0 {
        let mut e = [a[0][0], a[1][1], a[2][2]];
        e.sort_by(f64::total_cmp);
        return e;
    }
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b: Mat3 = std::array::from_fn(|i| {
        std::array::from_fn(|j| (a[i][j] - if i == j { q } else { 0.0 }) / p)
    });
    let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let e2 = 3.0 * q - e1 - e3;
    let mut e = [e1, e2, e3];
    e.sort_by(f64::total_cmp);
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_quaternion_is_identity_matrix() {
        let m = quat_to_mat(IDENTITY_QUAT);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn quaternion_product_matches_matrix_product() {
        let a = quat_normalize([0.9, 0.1, -0.3, 0.2]);
        let b = quat_normalize([0.4, -0.5, 0.6, 0.1]);
        let lhs = quat_to_mat(quat_mul(a, b));
        let rhs = mat_mul(&quat_to_mat(a), &quat_to_mat(b));
        for i in 0..3 {
            for j in 0..3 {
                assert!((lhs[i][j] - rhs[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eigenvalues_of_diagonal_and_rotated() {
        let e = sym_eigenvalues(&[[3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]]);
        assert_eq!(e, [1.0, 2.0, 3.0]);
        let q = quat_normalize([0.3, 0.5, -0.2, 0.7]);
        let cov = covariance_from_scale_rot([0.1f64.ln(), 0.5f64.ln(), 2.0f64.ln()], q);
        let e = sym_eigenvalues(&cov);
        for (got, want) in e.iter().zip([0.01, 0.25, 4.0]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }
}
