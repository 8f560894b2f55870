//! Rigid-body geometry: rotations, quaternions, the unconstrained 6D
//! attitude representation, camera projection, viewsphere discretization and
//! pose-error metrics.
//!
//! Conventions, fixed for the whole crate: quaternions are scalar-last
//! (x, y, z, w) with the w >= 0 representative, Hamilton product; the pose
//! maps target-frame points into the camera frame (x_cam = R·p + t); the
//! camera looks along +z.

use thiserror::Error;

pub type Vec3 = [f64; 3];
pub type Vec2 = [f64; 2];

/// Minimum camera-frame depth for a projectable point, in meters.
pub const Z_MIN: f64 = 1e-6;

const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
    #[error("quaternion norm {0} too far from 1")]
    NotUnitQuaternion(f64),
    #[error("degenerate 6D representation: {0}")]
    DegenerateSixD(String),
    #[error("zero-range ground truth; relative position error undefined")]
    ZeroRange,
    #[error("depth {depth} outside bin range [{lo}, {hi}]")]
    DepthOutOfRange { depth: f64, lo: f64, hi: f64 },
    #[error("invalid viewsphere grid: {0}")]
    BadGrid(String),
}

// ---------------------------------------------------------------------
// small vector helpers
// ---------------------------------------------------------------------

pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: &Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn sub3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale3(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn normalize3(a: &Vec3) -> Vec3 {
    scale3(a, 1.0 / norm3(a))
}

// ---------------------------------------------------------------------
// rotations
// ---------------------------------------------------------------------

/// 3x3 attitude matrix, row-major, orthonormal with det +1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    m: [f64; 9],
}

impl Rotation {
    pub fn identity() -> Rotation {
        Rotation {
            m: [1., 0., 0., 0., 1., 0., 0., 0., 1.],
        }
    }

    /// Validates RᵀR = I and det R = +1 within 1e-6.
    pub fn from_matrix(m: [f64; 9]) -> Result<Rotation, GeometryError> {
        let r = Rotation { m };
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += m[k * 3 + i] * m[k * 3 + j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((acc - want).abs());
            }
        }
        if worst > ORTHO_TOL {
            return Err(GeometryError::NotARotation(format!(
                "|R'R - I| = {worst:.3e}"
            )));
        }
        let det = r.det();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::NotARotation(format!("det = {det:.9}")));
        }
        Ok(r)
    }

    /// Caller guarantees orthonormality (outputs of Gram-Schmidt etc.).
    pub fn from_matrix_unchecked(m: [f64; 9]) -> Rotation {
        Rotation { m }
    }

    pub fn matrix(&self) -> &[f64; 9] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn col(&self, j: usize) -> Vec3 {
        [self.m[j], self.m[3 + j], self.m[6 + j]]
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        let m = &self.m;
        [
            m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
        ]
    }

    /// Rᵀ·v.
    pub fn apply_transpose(&self, v: &Vec3) -> Vec3 {
        let m = &self.m;
        [
            m[0] * v[0] + m[3] * v[1] + m[6] * v[2],
            m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
            m[2] * v[0] + m[5] * v[1] + m[8] * v[2],
        ]
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        let (a, b) = (&self.m, &other.m);
        let mut m = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                m[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
            }
        }
        Rotation { m }
    }

    pub fn transpose(&self) -> Rotation {
        let m = &self.m;
        Rotation {
            m: [m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]],
        }
    }

    /// Rodrigues formula; `axis` need not be normalized.
    pub fn from_axis_angle(axis: &Vec3, angle_rad: f64) -> Rotation {
        let n = norm3(axis);
        if n < 1e-15 {
            return Rotation::identity();
        }
        let [x, y, z] = scale3(axis, 1.0 / n);
        let (s, c) = angle_rad.sin_cos();
        let t = 1.0 - c;
        Rotation {
            m: [
                t * x * x + c,
                t * x * y - s * z,
                t * x * z + s * y,
                t * x * y + s * z,
                t * y * y + c,
                t * y * z - s * x,
                t * x * z - s * y,
                t * y * z + s * x,
                t * z * z + c,
            ],
        }
    }

    /// Uniformly random rotation (normalized 4-normal quaternion).
    pub fn random(rng: &mut crate::diffcore::Rng) -> Rotation {
        loop {
            let q = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
            let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
            if n > 1e-6 {
                let q = UnitQuaternion::new_normalize([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
                return q.to_rotation();
            }
        }
    }
}

// ---------------------------------------------------------------------
// quaternions (scalar-last, Hamilton)
// ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion {
    q: [f64; 4],
}

impl UnitQuaternion {
    pub fn identity() -> UnitQuaternion {
        UnitQuaternion {
            q: [0.0, 0.0, 0.0, 1.0],
        }
    }

    /// Rejects inputs whose norm deviates from 1 by more than 1e-6, then
    /// renormalizes exactly.
    pub fn new(q: [f64; 4]) -> Result<UnitQuaternion, GeometryError> {
        let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(GeometryError::NotUnitQuaternion(n));
        }
        Ok(Self::new_normalize(q))
    }

    pub fn new_normalize(q: [f64; 4]) -> UnitQuaternion {
        let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        UnitQuaternion {
            q: [q[0] / n, q[1] / n, q[2] / n, q[3] / n],
        }
    }

    /// (x, y, z, w).
    pub fn coords(&self) -> [f64; 4] {
        self.q
    }

    pub fn w(&self) -> f64 {
        self.q[3]
    }

    /// Canonical double-cover representative with w >= 0.
    pub fn canonical(&self) -> UnitQuaternion {
        if self.q[3] < 0.0 {
            self.negated()
        } else {
            *self
        }
    }

    pub fn negated(&self) -> UnitQuaternion {
        UnitQuaternion {
            q: [-self.q[0], -self.q[1], -self.q[2], -self.q[3]],
        }
    }

    /// Hamilton product self ⊗ other.
    pub fn mul(&self, other: &UnitQuaternion) -> UnitQuaternion {
        let [x1, y1, z1, w1] = self.q;
        let [x2, y2, z2, w2] = other.q;
        UnitQuaternion {
            q: [
                w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
                w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            ],
        }
    }

    /// Inverse of a unit quaternion is its conjugate.
    pub fn inverse(&self) -> UnitQuaternion {
        UnitQuaternion {
            q: [-self.q[0], -self.q[1], -self.q[2], self.q[3]],
        }
    }

    pub fn to_rotation(&self) -> Rotation {
        let [x, y, z, w] = self.q;
        Rotation {
            m: [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - z * w),
                2.0 * (x * z + y * w),
                2.0 * (x * y + z * w),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - x * w),
                2.0 * (x * z - y * w),
                2.0 * (y * z + x * w),
                1.0 - 2.0 * (x * x + y * y),
            ],
        }
    }

    /// Shepperd's method; returns the w >= 0 representative.
    pub fn from_rotation(r: &Rotation) -> UnitQuaternion {
        let m = r.matrix();
        let trace = m[0] + m[4] + m[8];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            [
                (m[7] - m[5]) / s,
                (m[2] - m[6]) / s,
                (m[3] - m[1]) / s,
                0.25 * s,
            ]
        } else if m[0] > m[4] && m[0] > m[8] {
            let s = (1.0 + m[0] - m[4] - m[8]).sqrt() * 2.0;
            [
                0.25 * s,
                (m[1] + m[3]) / s,
                (m[2] + m[6]) / s,
                (m[7] - m[5]) / s,
            ]
        } else if m[4] > m[8] {
            let s = (1.0 + m[4] - m[0] - m[8]).sqrt() * 2.0;
            [
                (m[1] + m[3]) / s,
                0.25 * s,
                (m[5] + m[7]) / s,
                (m[2] - m[6]) / s,
            ]
        } else {
            let s = (1.0 + m[8] - m[0] - m[4]).sqrt() * 2.0;
            [
                (m[2] + m[6]) / s,
                (m[5] + m[7]) / s,
                0.25 * s,
                (m[3] - m[1]) / s,
            ]
        };
        UnitQuaternion::new_normalize(q).canonical()
    }
}

// ---------------------------------------------------------------------
// 6D representation
// ---------------------------------------------------------------------

/// First two columns of R stacked column-major: (R11,R21,R31,R12,R22,R32).
/// Deliberately unconstrained; the regression heads emit this directly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SixD(pub [f64; 6]);

const SIXD_TOL: f64 = 1e-9;

/// Gram-Schmidt map from the 6D representation onto SO(3).
pub fn sixd_to_rotation(r: &SixD) -> Result<Rotation, GeometryError> {
    let a1 = [r.0[0], r.0[1], r.0[2]];
    let a2 = [r.0[3], r.0[4], r.0[5]];
    let n1 = norm3(&a1);
    if n1 <= SIXD_TOL {
        return Err(GeometryError::DegenerateSixD(format!(
            "first column norm {n1:.3e}"
        )));
    }
    let b1 = scale3(&a1, 1.0 / n1);
    let proj = dot3(&b1, &a2);
    let u2 = sub3(&a2, &scale3(&b1, proj));
    let n2 = norm3(&u2);
    if n2 <= SIXD_TOL {
        return Err(GeometryError::DegenerateSixD(format!(
            "columns parallel within {n2:.3e}"
        )));
    }
    let b2 = scale3(&u2, 1.0 / n2);
    let b3 = cross3(&b1, &b2);
    Ok(Rotation::from_matrix_unchecked([
        b1[0], b2[0], b3[0], b1[1], b2[1], b3[1], b1[2], b2[2], b3[2],
    ]))
}

/// Drops the right-most column of R; exact inverse of [`sixd_to_rotation`]
/// on orthonormal inputs.
pub fn rotation_to_sixd(r: &Rotation) -> SixD {
    let c0 = r.col(0);
    let c1 = r.col(1);
    SixD([c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]])
}

// ---------------------------------------------------------------------
// pose and projection
// ---------------------------------------------------------------------

/// Rigid transform target frame -> camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub position: Vec3,
}

impl Pose {
    pub fn new(rotation: Rotation, position: Vec3) -> Pose {
        Pose { rotation, position }
    }

    pub fn identity() -> Pose {
        Pose {
            rotation: Rotation::identity(),
            position: [0.0; 3],
        }
    }

    /// Camera-frame coordinates of a target-frame point.
    pub fn transform(&self, p: &Vec3) -> Vec3 {
        add3(&self.rotation.apply(p), &self.position)
    }
}

/// Pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> CameraIntrinsics {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        CameraIntrinsics { fx, fy, cx, cy }
    }

    /// Row-major 3x3 K matrix.
    pub fn matrix(&self) -> [f64; 9] {
        [self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0]
    }

    pub fn from_matrix(m: &[f64; 9]) -> CameraIntrinsics {
        CameraIntrinsics::new(m[0], m[4], m[2], m[5])
    }
}

/// Perspective projection of a target-frame point; `None` when the point is
/// at or behind the camera plane (z_cam <= [`Z_MIN`]).
pub fn project(k: &CameraIntrinsics, pose: &Pose, p: &Vec3) -> Option<Vec2> {
    let cam = pose.transform(p);
    if cam[2] <= Z_MIN {
        return None;
    }
    Some([
        k.fx * cam[0] / cam[2] + k.cx,
        k.fy * cam[1] / cam[2] + k.cy,
    ])
}

// ---------------------------------------------------------------------
// error metrics
// ---------------------------------------------------------------------

/// Attitude error 2·arccos(|(q̂⁻¹ ⊗ q)_w|) in radians, range [0, π].
/// The absolute value makes antipodal representatives equivalent.
pub fn attitude_error(q_hat: &UnitQuaternion, q: &UnitQuaternion) -> f64 {
    let rel = q_hat.inverse().mul(q);
    2.0 * rel.w().abs().clamp(0.0, 1.0).acos()
}

/// (δt meters, δt_r dimensionless). Errors on zero-range ground truth.
pub fn position_error(t_hat: &Vec3, t: &Vec3) -> Result<(f64, f64), GeometryError> {
    let range = norm3(t);
    if range <= 0.0 {
        return Err(GeometryError::ZeroRange);
    }
    let dt = norm3(&sub3(t_hat, t));
    Ok((dt, dt / range))
}

// ---------------------------------------------------------------------
// viewsphere
// ---------------------------------------------------------------------

/// Azimuth/elevation grid over viewing directions; each cell is one
/// attitude class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewsphereGrid {
    az_step_deg: u32,
    el_step_deg: u32,
}

impl ViewsphereGrid {
    pub fn new(az_step_deg: u32, el_step_deg: u32) -> Result<ViewsphereGrid, GeometryError> {
        if az_step_deg == 0 || 360 % az_step_deg != 0 {
            return Err(GeometryError::BadGrid(format!(
                "360 % az step {az_step_deg} != 0"
            )));
        }
        if el_step_deg == 0 || 180 % el_step_deg != 0 {
            return Err(GeometryError::BadGrid(format!(
                "180 % el step {el_step_deg} != 0"
            )));
        }
        Ok(ViewsphereGrid {
            az_step_deg,
            el_step_deg,
        })
    }

    pub fn az_step_deg(&self) -> u32 {
        self.az_step_deg
    }

    pub fn el_step_deg(&self) -> u32 {
        self.el_step_deg
    }

    pub fn az_bins(&self) -> usize {
        (360 / self.az_step_deg) as usize
    }

    pub fn el_bins(&self) -> usize {
        (180 / self.el_step_deg) as usize
    }

    /// Total attitude class count.
    pub fn class_count(&self) -> usize {
        self.az_bins() * self.el_bins()
    }
}

/// Attitude class of a rotation: the camera boresight (0,0,−1) expressed in
/// the target frame, binned by azimuth and elevation. Half-open bins; the
/// north pole (el = 90°) closes into the top bin, azimuth wraps.
pub fn viewsphere_class(r: &Rotation, grid: &ViewsphereGrid) -> usize {
    let d = r.apply_transpose(&[0.0, 0.0, -1.0]);
    let az = d[1].atan2(d[0]).to_degrees().rem_euclid(360.0);
    let el = d[2].clamp(-1.0, 1.0).asin().to_degrees();
    let az_bin = ((az / grid.az_step_deg as f64) as usize).min(grid.az_bins() - 1);
    let el_bin = (((el + 90.0) / grid.el_step_deg as f64) as usize).min(grid.el_bins() - 1);
    az_bin * grid.el_bins() + el_bin
}

/// Half-open depth bins over strictly ascending edges; a value exactly at
/// the last edge falls in the last bin.
pub fn depth_bin(t: &Vec3, edges: &[f64]) -> Result<usize, GeometryError> {
    assert!(
        edges.len() >= 2 && edges.windows(2).all(|w| w[0] < w[1]),
        "edges must be strictly ascending"
    );
    let depth = norm3(t);
    let (lo, hi) = (edges[0], *edges.last().unwrap());
    if depth < lo || depth > hi {
        return Err(GeometryError::DepthOutOfRange { depth, lo, hi });
    }
    if depth == hi {
        return Ok(edges.len() - 2);
    }
    for (i, w) in edges.windows(2).enumerate() {
        if depth >= w[0] && depth < w[1] {
            return Ok(i);
        }
    }
    unreachable!("ascending edges cover [lo, hi]");
}
