//! 12-parameter affine transform.
//!
//! Parameter order is `rx, ry, rz` (radians), `tx, ty, tz` (mm), `sx, sy, sz`
//! (scale), `kxy, kxz, kyz` (shear). The map is
//!
//! ```text
//! T(p) = Rz Ry Rx Sh S (p - c) + c + t
//! ```
//!
//! with `c` the rotation/scale centre in mm.

use alloc::format;

use crate::error::{Error, Result};
use crate::math::{cos, sin};

pub const RX: usize = 0;
pub const RY: usize = 1;
pub const RZ: usize = 2;
pub const TX: usize = 3;
pub const TY: usize = 4;
pub const TZ: usize = 5;
pub const SX: usize = 6;
pub const SY: usize = 7;
pub const SZ: usize = 8;
pub const KXY: usize = 9;
pub const KXZ: usize = 10;
pub const KYZ: usize = 11;

pub const PARAM_NAMES: [&str; 12] =
    ["rx", "ry", "rz", "tx", "ty", "tz", "sx", "sy", "sz", "kxy", "kxz", "kyz"];

/// Tag describing the composition order, written into transform files.
pub const COMPOSITION_ORDER: &str = "T*C*Rz*Ry*Rx*Sh*S*C^-1";

pub type Mat3 = [[f64; 3]; 3];

const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mul_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    core::array::from_fn(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

fn chain(ms: &[Mat3]) -> Mat3 {
    ms.iter().fold(IDENTITY3, |acc, m| mul(&acc, m))
}

fn rot_x(t: f64) -> (Mat3, Mat3) {
    let (s, c) = (sin(t), cos(t));
    ([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]], [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
}

fn rot_y(t: f64) -> (Mat3, Mat3) {
    let (s, c) = (sin(t), cos(t));
    ([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]], [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])
}

fn rot_z(t: f64) -> (Mat3, Mat3) {
    let (s, c) = (sin(t), cos(t));
    ([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
}

fn unit(i: usize, j: usize) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    m[i][j] = 1.0;
    m
}

/// Which parameters the optimiser may move.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TransformMode {
    /// Rotation and translation; scale stays 1 and shear 0.
    Rigid,
    #[default]
    Affine,
}

impl TransformMode {
    pub fn active(self) -> &'static [usize] {
        match self {
            TransformMode::Rigid => &[RX, RY, RZ, TX, TY, TZ],
            TransformMode::Affine => &[RX, RY, RZ, TX, TY, TZ, SX, SY, SZ, KXY, KXZ, KYZ],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformMode::Rigid => "rigid",
            TransformMode::Affine => "affine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rigid" => Some(TransformMode::Rigid),
            "affine" => Some(TransformMode::Affine),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub mu: [f64; 12],
    pub center: [f64; 3],
}

impl AffineParams {
    pub fn identity(center: [f64; 3]) -> Self {
        let mut mu = [0.0; 12];
        mu[SX] = 1.0;
        mu[SY] = 1.0;
        mu[SZ] = 1.0;
        Self { mu, center }
    }

    pub fn new(mu: [f64; 12], center: [f64; 3]) -> Result<Self> {
        let p = Self { mu, center };
        p.validate()?;
        Ok(p)
    }

    pub fn rigid(rotation: [f64; 3], translation: [f64; 3], center: [f64; 3]) -> Self {
        let mut p = Self::identity(center);
        p.mu[RX..=RZ].copy_from_slice(&rotation);
        p.mu[TX..=TZ].copy_from_slice(&translation);
        p
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.iter().chain(&self.center).all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite transform parameter".into()));
        }
        if !(self.mu[SX] > 0.0 && self.mu[SY] > 0.0 && self.mu[SZ] > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "scales must be positive, got ({}, {}, {})",
                self.mu[SX], self.mu[SY], self.mu[SZ]
            )));
        }
        Ok(())
    }

    pub fn rotation(&self) -> [f64; 3] {
        [self.mu[RX], self.mu[RY], self.mu[RZ]]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.mu[TX], self.mu[TY], self.mu[TZ]]
    }

    fn factors(&self) -> [(Mat3, Mat3); 3] {
        [rot_z(self.mu[RZ]), rot_y(self.mu[RY]), rot_x(self.mu[RX])]
    }

    fn shear(&self) -> Mat3 {
        [[1.0, self.mu[KXY], self.mu[KXZ]], [0.0, 1.0, self.mu[KYZ]], [0.0, 0.0, 1.0]]
    }

    fn scale(&self) -> Mat3 {
        [[self.mu[SX], 0.0, 0.0], [0.0, self.mu[SY], 0.0], [0.0, 0.0, self.mu[SZ]]]
    }

    /// `Rz Ry Rx Sh S`.
    pub fn linear(&self) -> Mat3 {
        let [(rz, _), (ry, _), (rx, _)] = self.factors();
        chain(&[rz, ry, rx, self.shear(), self.scale()])
    }

    pub fn matrix(&self) -> AffineMatrix {
        let a = self.linear();
        let ac = mul_vec(&a, self.center);
        let t = self.translation();
        AffineMatrix { linear: a, offset: core::array::from_fn(|i| self.center[i] + t[i] - ac[i]) }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        self.matrix().apply(p)
    }

    /// `dT(p)/dmu` as a 3x12 matrix (rows are output coordinates).
    pub fn jacobian(&self, p: [f64; 3]) -> [[f64; 12]; 3] {
        let q: [f64; 3] = core::array::from_fn(|i| p[i] - self.center[i]);
        let [(rz, drz), (ry, dry), (rx, drx)] = self.factors();
        let sh = self.shear();
        let sc = self.scale();
        let partials: [Mat3; 9] = [
            chain(&[rz, ry, drx, sh, sc]),
            chain(&[rz, dry, rx, sh, sc]),
            chain(&[drz, ry, rx, sh, sc]),
            chain(&[rz, ry, rx, sh, unit(0, 0)]),
            chain(&[rz, ry, rx, sh, unit(1, 1)]),
            chain(&[rz, ry, rx, sh, unit(2, 2)]),
            chain(&[rz, ry, rx, unit(0, 1), sc]),
            chain(&[rz, ry, rx, unit(0, 2), sc]),
            chain(&[rz, ry, rx, unit(1, 2), sc]),
        ];
        let mut jac = [[0.0; 12]; 3];
        let cols = [RX, RY, RZ, SX, SY, SZ, KXY, KXZ, KYZ];
        for (m, &col) in partials.iter().zip(&cols) {
            let v = mul_vec(m, q);
            for i in 0..3 {
                jac[i][col] = v[i];
            }
        }
        for i in 0..3 {
            jac[i][TX + i] = 1.0;
        }
        jac
    }
}

/// `p -> linear * p + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMatrix {
    pub linear: Mat3,
    pub offset: [f64; 3],
}

impl AffineMatrix {
    pub const IDENTITY: Self = Self { linear: IDENTITY3, offset: [0.0; 3] };

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = mul_vec(&self.linear, p);
        core::array::from_fn(|i| v[i] + self.offset[i])
    }

    pub fn determinant(&self) -> f64 {
        let a = &self.linear;
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let a = &self.linear;
        let det = self.determinant();
        if !(det.abs() > 1e-300) {
            return Err(Error::InvalidParameter("singular affine matrix".into()));
        }
        let inv = [
            [
                (a[1][1] * a[2][2] - a[1][2] * a[2][1]) / det,
                (a[0][2] * a[2][1] - a[0][1] * a[2][2]) / det,
                (a[0][1] * a[1][2] - a[0][2] * a[1][1]) / det,
            ],
            [
                (a[1][2] * a[2][0] - a[1][0] * a[2][2]) / det,
                (a[0][0] * a[2][2] - a[0][2] * a[2][0]) / det,
                (a[0][2] * a[1][0] - a[0][0] * a[1][2]) / det,
            ],
            [
                (a[1][0] * a[2][1] - a[1][1] * a[2][0]) / det,
                (a[0][1] * a[2][0] - a[0][0] * a[2][1]) / det,
                (a[0][0] * a[1][1] - a[0][1] * a[1][0]) / det,
            ],
        ];
        let t = mul_vec(&inv, self.offset);
        Ok(Self { linear: inv, offset: [-t[0], -t[1], -t[2]] })
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Self {
        let linear = mul(&self.linear, &other.linear);
        let o = mul_vec(&self.linear, other.offset);
        Self { linear, offset: core::array::from_fn(|i| o[i] + self.offset[i]) }
    }
}
