//! Small fixed-size vector and matrix helpers. Lattices are stored as row
//! vectors: `lattice[k]` is the k-th cell vector.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

pub fn inverse(m: &Mat3) -> Option<Mat3> {
    let d = det(m);
    if d.abs() <= 1e-10 || !d.is_finite() {
        return None;
    }
    // Columns of the inverse are the reciprocal vectors.
    let c0 = cross(m[1], m[2]);
    let c1 = cross(m[2], m[0]);
    let c2 = cross(m[0], m[1]);
    let inv_d = 1.0 / d;
    Some([
        [c0[0] * inv_d, c1[0] * inv_d, c2[0] * inv_d],
        [c0[1] * inv_d, c1[1] * inv_d, c2[1] * inv_d],
        [c0[2] * inv_d, c1[2] * inv_d, c2[2] * inv_d],
    ])
}

/// Row vector times matrix: `v · m`.
#[inline]
pub fn vec_mat(v: Vec3, m: &Mat3) -> Vec3 {
    [
        v[0] * m[0][0] + v[1] * m[1][0] + v[2] * m[2][0],
        v[0] * m[0][1] + v[1] * m[1][1] + v[2] * m[2][1],
        v[0] * m[0][2] + v[1] * m[1][2] + v[2] * m[2][2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

/// Distance between opposite faces of the cell for each axis.
pub fn perpendicular_widths(lattice: &Mat3) -> Vec3 {
    let vol = det(lattice).abs();
    [
        vol / norm(cross(lattice[1], lattice[2])),
        vol / norm(cross(lattice[2], lattice[0])),
        vol / norm(cross(lattice[0], lattice[1])),
    ]
}

/// Integer image offset times lattice, summed in a fixed order.
#[inline]
pub fn offset_vector(offset: [i32; 3], lattice: &Mat3) -> Vec3 {
    let (a, b, c) = (offset[0] as f64, offset[1] as f64, offset[2] as f64);
    [
        a * lattice[0][0] + b * lattice[1][0] + c * lattice[2][0],
        a * lattice[0][1] + b * lattice[1][1] + c * lattice[2][1],
        a * lattice[0][2] + b * lattice[1][2] + c * lattice[2][2],
    ]
}
