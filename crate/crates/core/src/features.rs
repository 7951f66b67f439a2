//! Per-voxel input features for the network.
//!
//! Each feature is a scalar map over the voxel grid. Off-grid sampling goes
//! through one B-spline per map, so the spatial derivative of every feature
//! component is available analytically.

use alloc::vec::Vec;

use crate::bspline::{prefilter_bspline, SplineCoefficients};
use crate::error::Result;
use crate::math::sqrt;
use crate::volume::ImageVolume;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeatureMode {
    /// Normalised intensity only (`d = 1`).
    Intensity,
    /// Intensity, 3x3x3 local mean and 3x3x3 local standard deviation (`d = 3`).
    #[default]
    IntensityMeanStd,
}

impl FeatureMode {
    pub fn dim(self) -> usize {
        match self {
            FeatureMode::Intensity => 1,
            FeatureMode::IntensityMeanStd => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Intensity => "intensity",
            FeatureMode::IntensityMeanStd => "intensity-mean-std",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "intensity" => Some(FeatureMode::Intensity),
            "intensity-mean-std" => Some(FeatureMode::IntensityMeanStd),
            _ => None,
        }
    }
}

/// Feature maps on the voxel grid of one volume.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    mode: FeatureMode,
    maps: Vec<ImageVolume>,
}

/// 3x3x3 window statistics, truncated at the volume border.
fn local_mean_std(v: &ImageVolume) -> Result<(ImageVolume, ImageVolume)> {
    let dims = v.dims();
    let d = dims.as_array();
    let n = dims.len();
    let mut mean = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    for i in 0..n {
        let c = dims.coords(i);
        let lo: [usize; 3] = core::array::from_fn(|a| c[a].saturating_sub(1));
        let hi: [usize; 3] = core::array::from_fn(|a| (c[a] + 1).min(d[a] - 1));
        let (mut s, mut s2, mut cnt) = (0.0, 0.0, 0.0);
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let val = v.get(x, y, z);
                    s += val;
                    s2 += val * val;
                    cnt += 1.0;
                }
            }
        }
        let m = s / cnt;
        mean.push(m);
        std.push(sqrt((s2 / cnt - m * m).max(0.0)));
    }
    Ok((ImageVolume::with_grid(v.grid(), mean)?, ImageVolume::with_grid(v.grid(), std)?))
}

impl FeatureMaps {
    pub fn compute(v: &ImageVolume, mode: FeatureMode) -> Result<Self> {
        let maps = match mode {
            FeatureMode::Intensity => alloc::vec![v.clone()],
            FeatureMode::IntensityMeanStd => {
                let (m, s) = local_mean_std(v)?;
                alloc::vec![v.clone(), m, s]
            }
        };
        Ok(Self { mode, maps })
    }

    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn maps(&self) -> &[ImageVolume] {
        &self.maps
    }

    /// Writes the feature vector of voxel `index` into `out`.
    pub fn at_voxel(&self, index: usize, out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(&self.maps) {
            *o = m.data()[index];
        }
    }

    pub fn splines(&self) -> Result<FeatureSplines> {
        let coeffs = self.maps.iter().map(prefilter_bspline).collect::<Result<Vec<_>>>()?;
        Ok(FeatureSplines { coeffs })
    }
}

/// B-spline coefficients for each feature map.
#[derive(Clone, Debug)]
pub struct FeatureSplines {
    coeffs: Vec<SplineCoefficients>,
}

impl FeatureSplines {
    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn channels(&self) -> &[SplineCoefficients] {
        &self.coeffs
    }

    pub fn in_support(&self, p: [f64; 3]) -> bool {
        self.coeffs[0].in_support(p)
    }

    /// Features and their voxel-space gradients at `p`. Returns `false` (and
    /// zeros) outside the support.
    pub fn sample(&self, p: [f64; 3], values: &mut [f64], grads: &mut [[f64; 3]]) -> bool {
        if !self.in_support(p) {
            values.iter_mut().for_each(|v| *v = 0.0);
            grads.iter_mut().for_each(|g| *g = [0.0; 3]);
            return false;
        }
        let st = self.coeffs[0].stencil(p);
        for (k, c) in self.coeffs.iter().enumerate() {
            let (v, g) = c.eval_stencil(&st);
            values[k] = v;
            grads[k] = g;
        }
        true
    }

    pub fn sample_values(&self, p: [f64; 3], values: &mut [f64]) -> bool {
        if !self.in_support(p) {
            values.iter_mut().for_each(|v| *v = 0.0);
            return false;
        }
        let st = self.coeffs[0].stencil(p);
        for (k, c) in self.coeffs.iter().enumerate() {
            values[k] = c.eval_value_stencil(&st);
        }
        true
    }
}
