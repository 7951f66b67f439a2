//! Synthetic drifted volume pairs with known ground truth.
//!
//! A phantom is a stack of smooth-edged ellipsoids painted over each other.
//! Because the phantom is analytic, the moving volume of a pair is produced by
//! evaluating it at `T_true^-1(q)` directly instead of resampling a voxel grid.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math::{cos, exp, pow, sin, sqrt};
use crate::rng::{self, streams};
use crate::transform::{AffineMatrix, AffineParams};
use crate::volume::{BinaryMask, Dims, Grid, ImageVolume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub center_mm: [f64; 3],
    pub radii_mm: [f64; 3],
    pub intensity: f64,
}

impl Blob {
    /// Normalised ellipsoidal radius: 1 on the surface.
    fn rho(&self, p: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center_mm[a]) / self.radii_mm[a];
            s += d * d;
        }
        sqrt(s)
    }

    fn weight(&self, p: [f64; 3], edge_mm: f64) -> f64 {
        let r_min = self.radii_mm.iter().copied().fold(f64::INFINITY, f64::min);
        let dist = (self.rho(p) - 1.0) * r_min;
        if edge_mm <= 0.0 {
            return if dist <= 0.0 { 1.0 } else { 0.0 };
        }
        let t = (0.5 - dist / edge_mm).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub blobs: Vec<Blob>,
    pub noise_sigma: f64,
    /// Width of the smooth intensity transition at blob surfaces.
    pub edge_mm: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn grid(&self) -> Grid {
        Grid { dims: self.dims, spacing: self.spacing }
    }

    pub fn validate(&self) -> Result<()> {
        Grid::new(self.dims, self.spacing)?;
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter("noise_sigma must be non-negative".into()));
        }
        let d = self.dims.as_array();
        for (i, b) in self.blobs.iter().enumerate() {
            let inside = (0..3).all(|a| {
                let extent = (d[a] - 1) as f64 * self.spacing[a];
                b.center_mm[a] >= 0.0 && b.center_mm[a] <= extent && b.radii_mm[a] > 0.0
            });
            if !inside || !(0.0..=1.0).contains(&b.intensity) {
                return Err(Error::InvalidParameter(format!("blob {i} is outside the volume or invalid")));
            }
        }
        Ok(())
    }

    /// Noise-free intensity at a physical point.
    pub fn clean_value_mm(&self, p: [f64; 3]) -> f64 {
        self.blobs.iter().fold(0.0, |v, b| {
            let w = b.weight(p, self.edge_mm);
            v + w * (b.intensity - v)
        })
    }

    /// Union of blob supports.
    pub fn inside_mm(&self, p: [f64; 3]) -> bool {
        self.blobs.iter().any(|b| b.rho(p) <= 1.0)
    }

    /// Head-like layered phantom with seed-dependent jitter, scaled to the
    /// field of view.
    pub fn head(dims: Dims, spacing: [f64; 3], seed: u64) -> Self {
        let grid = Grid { dims, spacing };
        let c = grid.center_mm();
        let d = dims.as_array();
        let fov = (0..3).map(|a| (d[a] - 1) as f64 * spacing[a]).fold(f64::INFINITY, f64::min);
        let mut rng = rng::seeded(seed, streams::PHANTOM_SHAPE);
        let mut jitter = |s: f64| 1.0 + rng.random_range(-s..=s);
        let l = fov;
        let at = |o: [f64; 3]| -> [f64; 3] { core::array::from_fn(|a| c[a] + o[a] * l) };
        let scale = jitter(0.05);
        let rr = |r: [f64; 3], j: f64| -> [f64; 3] { core::array::from_fn(|a| r[a] * l * scale * j) };
        let mut blobs = Vec::new();
        blobs.push(Blob { center_mm: c, radii_mm: rr([0.25, 0.30, 0.26], 1.0), intensity: 0.35 });
        blobs.push(Blob {
            center_mm: at([0.0, 0.25 * scale, -0.02]),
            radii_mm: rr([0.06, 0.05, 0.06], jitter(0.1)),
            intensity: 0.45,
        });
        blobs.push(Blob { center_mm: c, radii_mm: rr([0.22, 0.27, 0.23], 1.0), intensity: 0.6 });
        blobs.push(Blob {
            center_mm: at([0.02 * (jitter(1.0) - 1.0), -0.02, 0.02]),
            radii_mm: rr([0.15, 0.19, 0.14], jitter(0.08)),
            intensity: 0.85,
        });
        for side in [-1.0, 1.0] {
            blobs.push(Blob {
                center_mm: at([side * 0.045, 0.02, 0.03]),
                radii_mm: rr([0.03, 0.08, 0.04], jitter(0.15)),
                intensity: 0.2,
            });
        }
        let (lx, ly, lz) = (jitter(1.0) - 1.0, jitter(1.0) - 1.0, jitter(1.0) - 1.0);
        blobs.push(Blob {
            center_mm: at([0.1 * lx, -0.1 - 0.04 * ly, 0.06 * lz]),
            radii_mm: rr([0.045, 0.045, 0.05], jitter(0.2)),
            intensity: 0.95,
        });
        Self { dims, spacing, blobs, noise_sigma: 0.02, edge_mm: 2.0 * spacing[0], seed }
    }
}

fn add_noise(values: &mut [f64], sigma: f64, seed: u64, stream: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = rng::seeded(seed, stream);
    for v in values.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * z;
    }
}

/// Voxelised phantom (noise added, clamped to `[0, 1]`) and its ground-truth mask.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(ImageVolume, BinaryMask)> {
    spec.validate()?;
    let grid = spec.grid();
    let n = spec.dims.len();
    let mut values: Vec<f64> =
        (0..n).map(|i| spec.clean_value_mm(grid.voxel_to_mm(spec.dims.coords(i)))).collect();
    add_noise(&mut values, spec.noise_sigma, spec.seed, streams::PHANTOM_NOISE);
    values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let mask = BinaryMask::from_fn(spec.dims, |c| spec.inside_mm(grid.voxel_to_mm(c)));
    Ok((ImageVolume::with_grid(grid, values)?, mask))
}

/// Smooth multiplicative field `1 + c0 u + c1 v + c2 w + c3 (u^2 + v^2 + w^2)`
/// over coordinates normalised to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasField {
    pub coeffs: [f64; 4],
}

impl BiasField {
    fn factor(&self, c: [usize; 3], dims: Dims) -> f64 {
        let d = dims.as_array();
        let u: [f64; 3] =
            core::array::from_fn(|a| if d[a] > 1 { 2.0 * c[a] as f64 / (d[a] - 1) as f64 - 1.0 } else { 0.0 });
        1.0 + self.coeffs[0] * u[0]
            + self.coeffs[1] * u[1]
            + self.coeffs[2] * u[2]
            + self.coeffs[3] * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DriftKind {
    Identity,
    Gamma(f64),
    /// Logistic curve rescaled so that 0 maps to 0 and 1 maps to 1.
    SigmoidRemap { center: f64, slope: f64 },
    /// Monotone non-decreasing piecewise-linear remap through `(x, y)` knots.
    PiecewiseMonotone(Vec<(f64, f64)>),
    /// `1 - v` when `None`; otherwise an arbitrary (non-monotone) piecewise-linear
    /// remap, used for partial contrast inversion.
    Inversion(Option<Vec<(f64, f64)>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftSpec {
    pub kind: DriftKind,
    pub bias_field: Option<BiasField>,
    pub noise_sigma: f64,
}

impl DriftSpec {
    pub fn identity() -> Self {
        Self { kind: DriftKind::Identity, bias_field: None, noise_sigma: 0.0 }
    }

    /// T1-to-T2-like contrast: background stays dark, the mid/high tissue
    /// ordering is partially inverted.
    pub fn t1_to_t2() -> Self {
        Self {
            kind: DriftKind::Inversion(Some(alloc::vec![
                (0.0, 0.0),
                (0.1, 0.08),
                (0.3, 0.75),
                (0.45, 0.95),
                (0.7, 0.45),
                (1.0, 0.25),
            ])),
            bias_field: None,
            noise_sigma: 0.02,
        }
    }

    /// MR-to-CT-like contrast: soft-tissue range squeezed towards 0, bright
    /// structures kept bright.
    pub fn mr_to_ct() -> Self {
        Self {
            kind: DriftKind::SigmoidRemap { center: 0.8, slope: 20.0 },
            bias_field: None,
            noise_sigma: 0.02,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(Self::identity()),
            "t1-t2" => Some(Self::t1_to_t2()),
            "mr-ct" => Some(Self::mr_to_ct()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter("drift noise_sigma must be non-negative".into()));
        }
        let check_knots = |k: &[(f64, f64)], monotone: bool| -> Result<()> {
            if k.len() < 2 {
                return Err(Error::InvalidParameter("remap needs at least two knots".into()));
            }
            for w in k.windows(2) {
                if !(w[1].0 > w[0].0) {
                    return Err(Error::InvalidParameter("knot positions must increase".into()));
                }
                if monotone && w[1].1 < w[0].1 {
                    return Err(Error::NonMonotoneRemap(format!("{:?} -> {:?}", w[0], w[1])));
                }
            }
            Ok(())
        };
        match &self.kind {
            DriftKind::Gamma(g) if !(*g > 0.0) => {
                Err(Error::InvalidParameter(format!("gamma must be positive, got {g}")))
            }
            DriftKind::SigmoidRemap { slope, .. } if !(*slope > 0.0) => {
                Err(Error::InvalidParameter("sigmoid slope must be positive".into()))
            }
            DriftKind::PiecewiseMonotone(k) => check_knots(k, true),
            DriftKind::Inversion(Some(k)) => check_knots(k, false),
            _ => Ok(()),
        }
    }

    /// Intensity remap without bias field or noise.
    pub fn remap(&self, x: f64) -> f64 {
        match &self.kind {
            DriftKind::Identity => x,
            DriftKind::Gamma(g) => pow(x.max(0.0), *g),
            DriftKind::SigmoidRemap { center, slope } => {
                let s = |v: f64| 1.0 / (1.0 + exp(-slope * (v - center)));
                (s(x) - s(0.0)) / (s(1.0) - s(0.0))
            }
            DriftKind::PiecewiseMonotone(k) | DriftKind::Inversion(Some(k)) => piecewise(k, x),
            DriftKind::Inversion(None) => 1.0 - x,
        }
    }
}

fn piecewise(knots: &[(f64, f64)], x: f64) -> f64 {
    if x <= knots[0].0 {
        return knots[0].1;
    }
    for w in knots.windows(2) {
        if x <= w[1].0 {
            let t = (x - w[0].0) / (w[1].0 - w[0].0);
            return w[0].1 + t * (w[1].1 - w[0].1);
        }
    }
    knots[knots.len() - 1].1
}

/// Remap, optional bias field, additive noise, clamp to `[0, 1]`.
pub fn apply_drift(v: &ImageVolume, d: &DriftSpec, seed: u64) -> Result<ImageVolume> {
    d.validate()?;
    let dims = v.dims();
    let mut values: Vec<f64> = v
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let r = d.remap(x);
            match &d.bias_field {
                Some(b) => r * b.factor(dims.coords(i), dims),
                None => r,
            }
        })
        .collect();
    add_noise(&mut values, d.noise_sigma, seed, streams::DRIFT_NOISE);
    values.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    ImageVolume::with_grid(v.grid(), values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSeeds {
    pub phantom: u64,
    pub drift: u64,
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    /// Fixed volume: the voxelised phantom.
    pub target: ImageVolume,
    /// Moving volume: drifted phantom seen through `mu_true^-1`.
    pub source: ImageVolume,
    pub target_mask: BinaryMask,
    pub source_mask: BinaryMask,
    pub mu_true: AffineParams,
    /// `|source mask| / |target mask|`, capped at 1 (voxelisation can push it over).
    pub overlap: f64,
    pub low_overlap: bool,
}

/// Builds a pair such that sampling the source at `T_mu_true(p)` reproduces the
/// target contrast-drifted at `p`.
pub fn make_pair(spec: &PhantomSpec, drift: &DriftSpec, mu_true: &AffineParams, seeds: PairSeeds) -> Result<SyntheticPair> {
    mu_true.validate()?;
    drift.validate()?;
    let spec = PhantomSpec { seed: seeds.phantom, ..spec.clone() };
    let (target, target_mask) = make_phantom(&spec)?;
    let grid = spec.grid();
    let inverse: AffineMatrix = mu_true.matrix().inverse()?;
    let n = spec.dims.len();
    let mut clean = Vec::with_capacity(n);
    let mut bits = Vec::with_capacity(n);
    for i in 0..n {
        let p = inverse.apply(grid.voxel_to_mm(spec.dims.coords(i)));
        clean.push(spec.clean_value_mm(p));
        bits.push(spec.inside_mm(p));
    }
    add_noise(&mut clean, spec.noise_sigma, seeds.phantom, streams::SOURCE_NOISE);
    clean.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let undrifted = ImageVolume::with_grid(grid, clean)?;
    let source = apply_drift(&undrifted, drift, seeds.drift)?;
    let source_mask = BinaryMask::new(spec.dims, bits)?;
    let tc = target_mask.count();
    let overlap = if tc == 0 { 1.0 } else { (source_mask.count() as f64 / tc as f64).min(1.0) };
    Ok(SyntheticPair {
        target,
        source,
        target_mask,
        source_mask,
        mu_true: *mu_true,
        overlap,
        low_overlap: overlap < 0.5,
    })
}

/// Rigid perturbation with rotation-vector norm uniform in `[0, max_rot_rad]`
/// and translation norm uniform in `[0, max_trans_mm]`, both in random directions.
pub fn random_rigid(seed: u64, max_rot_rad: f64, max_trans_mm: f64, center: [f64; 3]) -> AffineParams {
    let mut rng = rng::seeded(seed, 0);
    let mut direction = || -> [f64; 3] {
        let z: f64 = rng.random_range(-1.0..=1.0);
        let phi: f64 = rng.random_range(0.0..core::f64::consts::TAU);
        let r = sqrt((1.0 - z * z).max(0.0));
        [r * cos(phi), r * sin(phi), z]
    };
    let (dr, dt) = (direction(), direction());
    let (mr, mt): (f64, f64) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
    AffineParams::rigid(
        core::array::from_fn(|a| dr[a] * mr * max_rot_rad),
        core::array::from_fn(|a| dt[a] * mt * max_trans_mm),
        center,
    )
}

/// One randomly chosen rotation parameter set uniformly in `[-max, max]`.
pub fn perturb_one_rotation(seed: u64, max_rot_rad: f64, center: [f64; 3]) -> AffineParams {
    let mut rng = rng::seeded(seed, 0);
    let axis = rng.random_range(0..3usize);
    let mut rot = [0.0; 3];
    rot[axis] = rng.random_range(-max_rot_rad..=max_rot_rad);
    AffineParams::rigid(rot, [0.0; 3], center)
}
