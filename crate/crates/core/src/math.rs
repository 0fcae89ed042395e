//! Small fixed-size vector and rotation helpers, generic over [`Real`].

use crate::autodiff::Real;

pub type Vec3<T = f64> = [T; 3];
/// Row-major 3x3 matrix.
pub type Mat3<T = f64> = [[T; 3]; 3];

#[inline]
pub fn add<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm<T: Real>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist_sq(a: &Vec3, b: &Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
pub fn values<T: Real>(a: &Vec3<T>) -> Vec3 {
    [a[0].value(), a[1].value(), a[2].value()]
}

#[inline]
pub fn mat_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let z = a[0][0].zero_like();
    let mut out = [[z; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn identity<T: Real>(like: T) -> Mat3<T> {
    let o = like.lift(1.0);
    let z = like.lift(0.0);
    [[o, z, z], [z, o, z], [z, z, o]]
}

/// Rodrigues' formula for an axis-angle vector.
///
/// Uses `R = I + a K + b K^2` with `K` the cross-product matrix of `r`,
/// `a = sin|r| / |r|` and `b = (1 - cos|r|) / |r|^2`. Both coefficients are
/// replaced by their Taylor series near zero so the map stays smooth and
/// differentiable at the identity.
pub fn rodrigues<T: Real>(r: Vec3<T>) -> Mat3<T> {
    let theta_sq = dot(r, r);
    let (a, b) = if theta_sq.value() < 1e-8 {
        // sin(x)/x ~ 1 - x^2/6 + x^4/120, (1 - cos x)/x^2 ~ 1/2 - x^2/24 + x^4/720
        let t2 = theta_sq;
        let t4 = t2 * t2;
        (
            (t2 * (-1.0 / 6.0) + t4 * (1.0 / 120.0)) + 1.0,
            (t2 * (-1.0 / 24.0) + t4 * (1.0 / 720.0)) + 0.5,
        )
    } else {
        let theta = theta_sq.sqrt();
        (theta.sin() / theta, (-theta.cos() + 1.0) / theta_sq)
    };
    let [x, y, z] = r;
    let xx = x * x;
    let yy = y * y;
    let zz = z * z;
    let xy = x * y;
    let xz = x * z;
    let yz = y * z;
    // K^2 = r r^T - |r|^2 I
    [
        [
            (xx - theta_sq) * b + 1.0,
            xy * b - z * a,
            xz * b + y * a,
        ],
        [
            xy * b + z * a,
            (yy - theta_sq) * b + 1.0,
            yz * b - x * a,
        ],
        [
            xz * b - y * a,
            yz * b + x * a,
            (zz - theta_sq) * b + 1.0,
        ],
    ]
}

/// Inverse of [`rodrigues`] for plain rotation matrices. Angle in [0, pi].
pub fn axis_angle(m: &Mat3) -> Vec3 {
    let trace = m[0][0] + m[1][1] + m[2][2];
    let cos = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = libm::acos(cos);
    if angle < 1e-12 {
        return [0.0; 3];
    }
    if core::f64::consts::PI - angle < 1e-6 {
        // Near pi the skew part vanishes; recover the axis from the diagonal.
        let xx = ((m[0][0] + 1.0) * 0.5).max(0.0);
        let yy = ((m[1][1] + 1.0) * 0.5).max(0.0);
        let zz = ((m[2][2] + 1.0) * 0.5).max(0.0);
        let mut axis = if xx >= yy && xx >= zz {
            let x = libm::sqrt(xx);
            [x, m[0][1] / (2.0 * x), m[0][2] / (2.0 * x)]
        } else if yy >= zz {
            let y = libm::sqrt(yy);
            [m[0][1] / (2.0 * y), y, m[1][2] / (2.0 * y)]
        } else {
            let z = libm::sqrt(zz);
            [m[0][2] / (2.0 * z), m[1][2] / (2.0 * z), z]
        };
        let n = norm(axis);
        axis = scale(axis, angle / n);
        return axis;
    }
    let s = 2.0 * libm::sin(angle);
    [
        (m[2][1] - m[1][2]) / s * angle,
        (m[0][2] - m[2][0]) / s * angle,
        (m[1][0] - m[0][1]) / s * angle,
    ]
}
