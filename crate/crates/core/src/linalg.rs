//! Minimal fixed-size linear algebra for camera geometry.
//!
//! Only what the projection math needs: 3-vectors, 3x3 and 4x4 matrices,
//! analytic inverses for upper-triangular intrinsics and rigid transforms.

use crate::scalar::Scalar;

pub type Vec3<T> = [T; 3];
pub type Vec4<T> = [T; 4];

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<T>(pub [[T; 3]; 3]);

/// Row-major 4x4 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat4<T>(pub [[T; 4]; 4]);

impl<T: Scalar> Mat3<T> {
    pub fn identity() -> Self {
        let mut m = [[T::zero(); 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = T::one();
        }
        Mat3(m)
    }

    pub fn from_rows(r0: Vec3<T>, r1: Vec3<T>, r2: Vec3<T>) -> Self {
        Mat3([r0, r1, r2])
    }

    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn mul_mat(&self, o: &Mat3<T>) -> Mat3<T> {
        let mut out = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut s = T::zero();
                for (k, ok) in o.0.iter().enumerate() {
                    s = s + self.0[i][k] * ok[j];
                }
                out[i][j] = s;
            }
        }
        Mat3(out)
    }

    pub fn transpose(&self) -> Mat3<T> {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> T {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse of an upper-triangular matrix with unit bottom-right entry,
    /// i.e. pinhole intrinsics [[fx, s, cx], [0, fy, cy], [0, 0, 1]].
    pub fn inverse_intrinsics(&self) -> Mat3<T> {
        let m = &self.0;
        let fx = m[0][0];
        let s = m[0][1];
        let cx = m[0][2];
        let fy = m[1][1];
        let cy = m[1][2];
        let ifx = T::one() / fx;
        let ify = T::one() / fy;
        Mat3([
            [ifx, -s * ifx * ify, (s * cy * ify - cx) * ifx],
            [T::zero(), ify, -cy * ify],
            [T::zero(), T::zero(), T::one()],
        ])
    }
}

impl<T: Scalar> Mat4<T> {
    pub fn identity() -> Self {
        let mut m = [[T::zero(); 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = T::one();
        }
        Mat4(m)
    }

    pub fn mul_vec(&self, v: Vec4<T>) -> Vec4<T> {
        let mut out = [T::zero(); 4];
        for (i, row) in self.0.iter().enumerate() {
            out[i] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3];
        }
        out
    }

    pub fn mul_mat(&self, o: &Mat4<T>) -> Mat4<T> {
        let mut out = [[T::zero(); 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                let mut s = T::zero();
                for (k, ok) in o.0.iter().enumerate() {
                    s = s + self.0[i][k] * ok[j];
                }
                out[i][j] = s;
            }
        }
        Mat4(out)
    }

    /// Build a rigid transform [[R, t], [0, 1]].
    pub fn from_rigid(r: &Mat3<T>, t: Vec3<T>) -> Mat4<T> {
        let mut m = [[T::zero(); 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r.0[i][j];
            }
            m[i][3] = t[i];
        }
        m[3][3] = T::one();
        Mat4(m)
    }

    pub fn rotation(&self) -> Mat3<T> {
        let m = &self.0;
        Mat3([
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ])
    }

    pub fn translation(&self) -> Vec3<T> {
        [self.0[0][3], self.0[1][3], self.0[2][3]]
    }

    /// Inverse of a rigid transform: [[R^T, -R^T t], [0, 1]].
    pub fn inverse_rigid(&self) -> Mat4<T> {
        let rt = self.rotation().transpose();
        let t = self.translation();
        let nt = rt.mul_vec(t);
        Mat4::from_rigid(&rt, [-nt[0], -nt[1], -nt[2]])
    }

    /// Embed a 3x3 matrix as [[M, 0], [0, 1]].
    pub fn from_mat3(m: &Mat3<T>) -> Mat4<T> {
        let mut out = [[T::zero(); 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = m.0[i][j];
            }
        }
        out[3][3] = T::one();
        Mat4(out)
    }
}

pub fn dot3<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub3<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale3<T: Scalar>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm3<T: Scalar>(a: Vec3<T>) -> T {
    dot3(a, a).sqrt()
}

pub fn normalize3<T: Scalar>(a: Vec3<T>) -> Vec3<T> {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}
