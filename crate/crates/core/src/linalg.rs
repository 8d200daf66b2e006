//! Fixed-size 3-vector and 3x3 matrix helpers.

use crate::scalar::Scalar;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

pub fn identity<T: Scalar>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn dot<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm<T: Scalar>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn add<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<T: Scalar>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn mat_vec<T: Scalar>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_t_vec<T: Scalar>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    mat_vec(&transpose(m), v)
}

pub fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<T: Scalar>(m: &Mat3<T>) -> Mat3<T> {
    let mut out = *m;
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[j][i];
        }
    }
    out
}

pub fn det<T: Scalar>(m: &Mat3<T>) -> T {
    dot(m[0], cross(m[1], m[2]))
}

pub fn skew<T: Scalar>(v: Vec3<T>) -> Mat3<T> {
    let z = T::zero();
    [[z, -v[2], v[1]], [v[2], z, -v[0]], [-v[1], v[0], z]]
}

/// Rotation vector (axis * angle) of a rotation matrix.
pub fn log_so3<T: Scalar>(r: &Mat3<T>) -> Vec3<T> {
    let half = T::lit(0.5);
    let cos = ((r[0][0] + r[1][1] + r[2][2] - T::one()) * half)
        .max(-T::one())
        .min(T::one());
    let angle = cos.acos();
    let w = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if angle < T::lit(1e-6) {
        return scale(w, half);
    }
    let pi = T::PI();
    if pi - angle < T::lit(1e-4) {
        // Near pi: axis from the largest diagonal of (R + I) / 2.
        let b = [
            ((r[0][0] + T::one()) * half).max(T::zero()),
            ((r[1][1] + T::one()) * half).max(T::zero()),
            ((r[2][2] + T::one()) * half).max(T::zero()),
        ];
        let k = if b[0] >= b[1] && b[0] >= b[2] {
            0
        } else if b[1] >= b[2] {
            1
        } else {
            2
        };
        let mut axis = [T::zero(); 3];
        axis[k] = b[k].sqrt();
        for j in 0..3 {
            if j != k {
                axis[j] = (r[k][j] + r[j][k]) * T::lit(0.25) / axis[k];
            }
        }
        let n = norm(axis);
        let mut axis = scale(axis, T::one() / n);
        if dot(axis, w) < T::zero() {
            axis = scale(axis, -T::one());
        }
        return scale(axis, angle);
    }
    scale(w, angle / (T::lit(2.0) * angle.sin()))
}

/// Eigenvalues of a symmetric 3x3 matrix in descending order (cyclic Jacobi).
pub fn symmetric_eigenvalues<T: Scalar>(m: &Mat3<T>) -> [T; 3] {
    let mut a = *m;
    for _ in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2];
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == T::zero() {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (T::lit(2.0) * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
            let c = T::one() / (t * t + T::one()).sqrt();
            let s = t * c;
            let mut j = identity::<T>();
            j[p][p] = c;
            j[q][q] = c;
            j[p][q] = s;
            j[q][p] = -s;
            a = mat_mul(&transpose(&j), &mat_mul(&a, &j));
            a[p][q] = T::zero();
            a[q][p] = T::zero();
        }
    }
    let mut ev = [a[0][0], a[1][1], a[2][2]];
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_diagonal_of_rotated_matrix() {
        let r = [[0.36f64, 0.48, -0.8], [-0.8, 0.6, 0.0], [0.48, 0.64, 0.6]];
        let d = [[5.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 0.5]];
        let m = mat_mul(&transpose(&r), &mat_mul(&d, &r));
        let ev = symmetric_eigenvalues(&m);
        for (a, b) in ev.iter().zip([5.0, 2.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_map_of_half_turn() {
        let r: Mat3<f64> = [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]];
        let w = log_so3(&r);
        assert!((norm(w) - std::f64::consts::PI).abs() < 1e-12);
        assert!((w[2].abs() - std::f64::consts::PI).abs() < 1e-12);
    }
}
