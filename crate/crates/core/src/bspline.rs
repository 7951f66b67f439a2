//! Cubic B-spline interpolation with analytic spatial gradients.
//!
//! Coefficients come from the recursive (IIR) prefilter with mirror-symmetric
//! boundaries, so interpolating the coefficient grid at integer positions gives
//! back the original voxel values.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{floor, pow, sqrt};
use crate::volume::{Dims, ImageVolume};

#[derive(Clone, Debug, PartialEq)]
pub struct SplineCoefficients {
    dims: Dims,
    coeffs: Vec<f64>,
}

/// What to do when a sample point falls outside the interpolation support.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutOfSupport {
    /// Value 0 with zero gradient; the sample is flagged.
    #[default]
    ZeroPad,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplineSample {
    pub value: f64,
    /// Derivative with respect to voxel coordinates.
    pub gradient: [f64; 3],
    pub in_support: bool,
}

impl SplineSample {
    const OUTSIDE: Self = Self { value: 0.0, gradient: [0.0; 3], in_support: false };
}

/// Per-axis tap indices and weights for one evaluation point.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    index: [[usize; 4]; 3],
    weight: [[f64; 4]; 3],
    deriv: [[f64; 4]; 3],
}

fn pole() -> f64 {
    sqrt(3.0) - 2.0
}

/// In-place prefilter of one line with stride `stride` and `n` samples.
fn prefilter_line(c: &mut [f64], offset: usize, stride: usize, n: usize, z: f64) {
    let at = |k: usize| offset + k * stride;
    let gain = (1.0 - z) * (1.0 - 1.0 / z);
    for k in 0..n {
        c[at(k)] *= gain;
    }
    // Causal initialisation for the mirror-symmetric extension, exact sum.
    let iz = 1.0 / z;
    let mut zn = z;
    let mut z2n = pow(z, (n - 1) as f64);
    let mut sum = c[at(0)] + z2n * c[at(n - 1)];
    z2n *= z2n * iz;
    for k in 1..n - 1 {
        sum += (zn + z2n) * c[at(k)];
        zn *= z;
        z2n *= iz;
    }
    c[at(0)] = sum / (1.0 - zn * zn);
    for k in 1..n {
        c[at(k)] += z * c[at(k - 1)];
    }
    c[at(n - 1)] = (z / (z * z - 1.0)) * (z * c[at(n - 2)] + c[at(n - 1)]);
    for k in (0..n - 1).rev() {
        c[at(k)] = z * (c[at(k + 1)] - c[at(k)]);
    }
}

/// Computes the cubic B-spline coefficient grid for `v`.
pub fn prefilter_bspline(v: &ImageVolume) -> Result<SplineCoefficients> {
    let dims = v.dims();
    let d = dims.as_array();
    if d.iter().any(|&n| n < 4) {
        return Err(Error::TooSmallForSpline(d));
    }
    let z = pole();
    let mut c = v.data().to_vec();
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    for k in 0..nz {
        for j in 0..ny {
            prefilter_line(&mut c, dims.index(0, j, k), 1, nx, z);
        }
    }
    for k in 0..nz {
        for i in 0..nx {
            prefilter_line(&mut c, dims.index(i, 0, k), nx, ny, z);
        }
    }
    for j in 0..ny {
        for i in 0..nx {
            prefilter_line(&mut c, dims.index(i, j, 0), nx * ny, nz, z);
        }
    }
    Ok(SplineCoefficients { dims, coeffs: c })
}

#[inline]
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

#[inline]
fn weights(t: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    let u = 1.0 - t;
    let w = [
        u * u * u / 6.0,
        (4.0 - 6.0 * t2 + 3.0 * t3) / 6.0,
        (1.0 + 3.0 * t + 3.0 * t2 - 3.0 * t3) / 6.0,
        t3 / 6.0,
    ];
    let dw = [-0.5 * u * u, 0.5 * (3.0 * t2 - 4.0 * t), 0.5 * (1.0 + 2.0 * t - 3.0 * t2), 0.5 * t2];
    (w, dw)
}

impl SplineCoefficients {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Support is `[1, n - 2]` on every axis.
    pub fn in_support(&self, p: [f64; 3]) -> bool {
        let d = self.dims.as_array();
        (0..3).all(|a| p[a] >= 1.0 && p[a] <= (d[a] - 2) as f64)
    }

    pub fn stencil(&self, p: [f64; 3]) -> Stencil {
        let d = self.dims.as_array();
        let mut st = Stencil { index: [[0; 4]; 3], weight: [[0.0; 4]; 3], deriv: [[0.0; 4]; 3] };
        for a in 0..3 {
            let f = floor(p[a]);
            let (w, dw) = weights(p[a] - f);
            let base = f as isize - 1;
            for k in 0..4 {
                st.index[a][k] = mirror(base + k as isize, d[a]);
            }
            st.weight[a] = w;
            st.deriv[a] = dw;
        }
        st
    }

    /// Value and gradient through a precomputed stencil.
    pub fn eval_stencil(&self, st: &Stencil) -> (f64, [f64; 3]) {
        let (nx, nxy) = (self.dims.nx, self.dims.nx * self.dims.ny);
        let mut value = 0.0;
        let mut grad = [0.0; 3];
        for kz in 0..4 {
            let oz = st.index[2][kz] * nxy;
            let (wz, dz) = (st.weight[2][kz], st.deriv[2][kz]);
            for ky in 0..4 {
                let oy = oz + st.index[1][ky] * nx;
                let (wy, dy) = (st.weight[1][ky], st.deriv[1][ky]);
                let mut sx = 0.0;
                let mut sdx = 0.0;
                for kx in 0..4 {
                    let c = self.coeffs[oy + st.index[0][kx]];
                    sx += st.weight[0][kx] * c;
                    sdx += st.deriv[0][kx] * c;
                }
                value += wz * wy * sx;
                grad[0] += wz * wy * sdx;
                grad[1] += wz * dy * sx;
                grad[2] += dz * wy * sx;
            }
        }
        (value, grad)
    }

    pub fn eval_value_stencil(&self, st: &Stencil) -> f64 {
        let (nx, nxy) = (self.dims.nx, self.dims.nx * self.dims.ny);
        let mut value = 0.0;
        for kz in 0..4 {
            let oz = st.index[2][kz] * nxy;
            for ky in 0..4 {
                let oy = oz + st.index[1][ky] * nx;
                let mut sx = 0.0;
                for kx in 0..4 {
                    sx += st.weight[0][kx] * self.coeffs[oy + st.index[0][kx]];
                }
                value += st.weight[2][kz] * st.weight[1][ky] * sx;
            }
        }
        value
    }

    /// Interpolated value and analytic gradient at `p` (voxel units).
    pub fn sample(&self, p: [f64; 3], policy: OutOfSupport) -> Result<SplineSample> {
        if !self.in_support(p) {
            return match policy {
                OutOfSupport::ZeroPad => Ok(SplineSample::OUTSIDE),
                OutOfSupport::Error => Err(Error::OutOfSupport(p)),
            };
        }
        let (value, gradient) = self.eval_stencil(&self.stencil(p));
        Ok(SplineSample { value, gradient, in_support: true })
    }

    /// Zero-padded value only.
    pub fn value(&self, p: [f64; 3]) -> f64 {
        if self.in_support(p) {
            self.eval_value_stencil(&self.stencil(p))
        } else {
            0.0
        }
    }

    /// Value at a grid point using the mirror extension, with no support check.
    pub fn value_at_voxel(&self, c: [usize; 3]) -> f64 {
        self.eval_value_stencil(&self.stencil([c[0] as f64, c[1] as f64, c[2] as f64]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn random_volume(dims: Dims, seed: u64) -> ImageVolume {
        let mut rng = seeded(seed, 0);
        let data = (0..dims.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        ImageVolume::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn rejects_small_volumes() {
        let v = ImageVolume::zeros(Dims::new(4, 3, 5).unwrap(), [1.0; 3]).unwrap();
        assert_eq!(prefilter_bspline(&v), Err(Error::TooSmallForSpline([4, 3, 5])));
    }

    #[test]
    fn constant_volume_interpolates_constant() {
        let dims = Dims::new(5, 6, 7).unwrap();
        let v = ImageVolume::new(dims, [1.0; 3], alloc::vec![2.5; dims.len()]).unwrap();
        let c = prefilter_bspline(&v).unwrap();
        assert!(c.coeffs().iter().all(|&x| (x - 2.5).abs() < 1e-12));
        let mut rng = seeded(1, 0);
        for _ in 0..100 {
            let p = [rng.random_range(1.0..3.0), rng.random_range(1.0..4.0), rng.random_range(1.0..5.0)];
            let s = c.sample(p, OutOfSupport::Error).unwrap();
            assert!((s.value - 2.5).abs() < 1e-9);
            assert!(s.gradient.iter().all(|g| g.abs() < 1e-9));
        }
    }

    #[test]
    fn interpolation_condition_on_random_volume() {
        let dims = Dims::new(6, 7, 8).unwrap();
        let v = random_volume(dims, 4);
        let c = prefilter_bspline(&v).unwrap();
        for i in 0..dims.len() {
            let g = dims.coords(i);
            let got = c.value_at_voxel(g);
            let want = v.data()[i];
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-3), "{got} vs {want}");
        }
    }

    #[test]
    fn linear_ramp_is_reproduced() {
        // Mirror extension folds the ramp, so check far from the x borders.
        let dims = Dims::new(40, 6, 5).unwrap();
        let v = ImageVolume::from_fn(dims, [1.0; 3], |c| 2.0 * c[0] as f64).unwrap();
        let c = prefilter_bspline(&v).unwrap();
        let mut rng = seeded(2, 0);
        for _ in 0..200 {
            let p = [rng.random_range(15.0..25.0), rng.random_range(1.0..4.0), rng.random_range(1.0..3.0)];
            let s = c.sample(p, OutOfSupport::Error).unwrap();
            assert!((s.value - 2.0 * p[0]).abs() < 1e-6, "{} vs {}", s.value, 2.0 * p[0]);
            assert!((s.gradient[0] - 2.0).abs() < 1e-6);
            assert!(s.gradient[1].abs() < 1e-6 && s.gradient[2].abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let dims = Dims::new(8, 8, 8).unwrap();
        let v = random_volume(dims, 9);
        let c = prefilter_bspline(&v).unwrap();
        let mut rng = seeded(3, 0);
        let h = 1e-4;
        for _ in 0..100 {
            let p: [f64; 3] = core::array::from_fn(|_| rng.random_range(1.01..5.99));
            let s = c.sample(p, OutOfSupport::Error).unwrap();
            for a in 0..3 {
                let mut hi = p;
                let mut lo = p;
                hi[a] += h;
                lo[a] -= h;
                let fd = (c.value(hi) - c.value(lo)) / (2.0 * h);
                let rel = (fd - s.gradient[a]).abs() / s.gradient[a].abs().max(1e-3);
                assert!(rel < 1e-4, "axis {a}: fd {fd} analytic {}", s.gradient[a]);
            }
        }
    }

    #[test]
    fn out_of_support_policy() {
        let v = random_volume(Dims::cube(5).unwrap(), 5);
        let c = prefilter_bspline(&v).unwrap();
        let p = [0.5, 2.0, 2.0];
        assert_eq!(c.sample(p, OutOfSupport::Error), Err(Error::OutOfSupport(p)));
        let s = c.sample(p, OutOfSupport::ZeroPad).unwrap();
        assert!(!s.in_support);
        assert_eq!((s.value, s.gradient), (0.0, [0.0; 3]));
        assert!(c.sample([3.0, 3.0, 3.0], OutOfSupport::Error).is_ok());
        assert!(c.sample([3.0001, 3.0, 3.0], OutOfSupport::Error).is_err());
    }
}
