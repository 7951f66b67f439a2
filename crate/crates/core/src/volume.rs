//! Dense 3-D scalar volumes and binary masks.
//!
//! Storage is x-fastest: the voxel `(x, y, z)` lives at `x + nx * (y + ny * z)`.
//! Coordinates inside the crate are voxel units unless a name says `mm`; the
//! physical position of voxel `(x, y, z)` is `(x * sx, y * sy, z * sz)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidDims(format!("{nx}x{ny}x{nz}")));
        }
        nx.checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| Error::InvalidDims(format!("{nx}x{ny}x{nz} overflows")))?;
        Ok(Self { nx, ny, nz })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.nx;
        let yz = index / self.nx;
        [x, yz % self.ny, yz / self.ny]
    }

    /// Whether the voxel has a full 6-neighbourhood.
    pub fn is_interior(&self, c: [usize; 3]) -> bool {
        let d = self.as_array();
        (0..3).all(|a| c[a] >= 1 && c[a] + 2 <= d[a])
    }
}

fn validate_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidSpacing(spacing))
    }
}

/// Voxel grid geometry without intensities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub dims: Dims,
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: Dims, spacing: [f64; 3]) -> Result<Self> {
        validate_spacing(spacing)?;
        Ok(Self { dims, spacing })
    }

    pub fn voxel_to_mm(&self, c: [usize; 3]) -> [f64; 3] {
        [
            c[0] as f64 * self.spacing[0],
            c[1] as f64 * self.spacing[1],
            c[2] as f64 * self.spacing[2],
        ]
    }

    pub fn mm_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [p[0] / self.spacing[0], p[1] / self.spacing[1], p[2] / self.spacing[2]]
    }

    /// Physical centre of the field of view.
    pub fn center_mm(&self) -> [f64; 3] {
        let d = self.dims.as_array();
        core::array::from_fn(|a| 0.5 * (d[a] - 1) as f64 * self.spacing[a])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageVolume {
    grid: Grid,
    data: Vec<f64>,
    range: (f64, f64),
}

impl ImageVolume {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        let grid = Grid::new(dims, spacing)?;
        if data.len() != dims.len() {
            return Err(Error::LengthMismatch { expected: dims.len(), actual: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let range = min_max(&data);
        Ok(Self { grid, data, range })
    }

    pub fn zeros(dims: Dims, spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; dims.len()])
    }

    pub fn from_fn(
        dims: Dims,
        spacing: [f64; 3],
        mut f: impl FnMut([usize; 3]) -> f64,
    ) -> Result<Self> {
        let data = (0..dims.len()).map(|i| f(dims.coords(i))).collect();
        Self::new(dims, spacing, data)
    }

    pub fn with_grid(grid: Grid, data: Vec<f64>) -> Result<Self> {
        Self::new(grid.dims, grid.spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.dims.index(x, y, z)]
    }

    pub fn intensity_range(&self) -> (f64, f64) {
        self.range
    }

    /// True when every intensity already lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.range.0 >= 0.0 && self.range.1 <= 1.0
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::with_grid(self.grid, self.data.iter().map(|&v| f(v)).collect())
    }
}

fn min_max(data: &[f64]) -> (f64, f64) {
    data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.len() {
            return Err(Error::LengthMismatch { expected: dims.len(), actual: bits.len() });
        }
        Ok(Self { dims, bits })
    }

    pub fn empty(dims: Dims) -> Self {
        Self { dims, bits: vec![false; dims.len()] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        Self { dims, bits: (0..dims.len()).map(|i| f(dims.coords(i))).collect() }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.dims.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn set_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }
}

/// Result of [`normalize_intensities`].
#[derive(Clone, Debug)]
pub struct Normalized {
    pub volume: ImageVolume,
    /// The percentile span was zero; every voxel was mapped to 0.
    pub degenerate: bool,
    pub lo_value: f64,
    pub hi_value: f64,
}

pub const DEFAULT_LO_PERCENTILE: f64 = 0.5;
pub const DEFAULT_HI_PERCENTILE: f64 = 99.5;

/// Percentile with linear interpolation between order statistics
/// (rank `p / 100 * (n - 1)`).
pub fn percentile(data: &[f64], pct: f64) -> f64 {
    assert!(!data.is_empty(), "percentile of an empty slice");
    let mut scratch = data.to_vec();
    percentile_in_place(&mut scratch, pct)
}

fn percentile_in_place(values: &mut [f64], pct: f64) -> f64 {
    let n = values.len();
    let rank = (pct / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = crate::math::floor(rank) as usize;
    let frac = rank - lo as f64;
    let (_, lo_val, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_val = *lo_val;
    if frac == 0.0 || upper.is_empty() {
        return lo_val;
    }
    let hi_val = upper.iter().copied().fold(f64::INFINITY, f64::min);
    lo_val + frac * (hi_val - lo_val)
}

/// Maps the `lo_pct` percentile to 0 and the `hi_pct` percentile to 1, then
/// clamps to `[0, 1]`.
pub fn normalize_intensities(v: &ImageVolume, lo_pct: f64, hi_pct: f64) -> Result<Normalized> {
    if !(0.0..100.0).contains(&lo_pct) || !(lo_pct < hi_pct && hi_pct <= 100.0) {
        return Err(Error::InvalidParameter(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got ({lo_pct}, {hi_pct})"
        )));
    }
    let lo_value = percentile(v.data(), lo_pct);
    let hi_value = percentile(v.data(), hi_pct);
    let span = hi_value - lo_value;
    if !(span > 0.0) {
        return Ok(Normalized {
            volume: ImageVolume::zeros(v.dims(), v.spacing())?,
            degenerate: true,
            lo_value,
            hi_value,
        });
    }
    let volume = v.map(|x| ((x - lo_value) / span).clamp(0.0, 1.0))?;
    Ok(Normalized { volume, degenerate: false, lo_value, hi_value })
}

/// Bit set iff intensity exceeds `t`.
pub fn threshold_mask(v: &ImageVolume, t: f64) -> BinaryMask {
    BinaryMask { dims: v.dims(), bits: v.data().iter().map(|&x| x > t).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn random_volume(n: usize, seed: u64) -> ImageVolume {
        let mut rng = seeded(seed, 0);
        let dims = Dims::cube(n).unwrap();
        let data = (0..dims.len()).map(|_| rng.random_range(-3.0..7.0)).collect();
        ImageVolume::new(dims, [1.0, 1.0, 1.0], data).unwrap()
    }

    fn sorted_percentile(data: &[f64], pct: f64) -> f64 {
        let mut s = data.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = pct / 100.0 * (s.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = (lo + 1).min(s.len() - 1);
        s[lo] + (rank - lo as f64) * (s[hi] - s[lo])
    }

    #[test]
    fn index_roundtrip() {
        let d = Dims::new(3, 4, 5).unwrap();
        for i in 0..d.len() {
            let c = d.coords(i);
            assert_eq!(d.index(c[0], c[1], c[2]), i);
        }
    }

    #[test]
    fn rejects_bad_construction() {
        let d = Dims::cube(2).unwrap();
        assert!(matches!(
            ImageVolume::new(d, [1.0; 3], vec![0.0; 7]),
            Err(Error::LengthMismatch { expected: 8, actual: 7 })
        ));
        let mut data = vec![0.0; 8];
        data[3] = f64::NAN;
        assert_eq!(ImageVolume::new(d, [1.0; 3], data), Err(Error::NonFinite { index: 3 }));
        assert!(ImageVolume::zeros(d, [1.0, 0.0, 1.0]).is_err());
        assert!(Dims::new(0, 1, 1).is_err());
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let v = ImageVolume::new(Dims::cube(3).unwrap(), [1.0; 3], vec![4.2; 27]).unwrap();
        let n = normalize_intensities(&v, 0.5, 99.5).unwrap();
        assert!(n.degenerate);
        assert!(n.volume.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_valued_volume_maps_to_endpoints() {
        let d = Dims::cube(2).unwrap();
        let data = (0..8).map(|i| if i % 2 == 0 { 0.0 } else { 100.0 }).collect();
        let v = ImageVolume::new(d, [1.0; 3], data).unwrap();
        let n = normalize_intensities(&v, 0.0, 100.0).unwrap();
        for (i, &x) in n.volume.data().iter().enumerate() {
            assert_eq!(x, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn normalization_matches_sort_oracle() {
        let v = random_volume(9, 11);
        let (lo, hi) = (2.0, 97.0);
        let plo = sorted_percentile(v.data(), lo);
        let phi = sorted_percentile(v.data(), hi);
        assert_eq!(percentile(v.data(), lo), plo);
        assert_eq!(percentile(v.data(), hi), phi);
        let n = normalize_intensities(&v, lo, hi).unwrap();
        for (&x, &y) in v.data().iter().zip(n.volume.data()) {
            let expect = ((x - plo) / (phi - plo)).clamp(0.0, 1.0);
            assert!((expect - y).abs() < 1e-15);
        }
        assert!(normalize_intensities(&v, 50.0, 50.0).is_err());
    }

    #[test]
    fn threshold_mask_cases() {
        let d = Dims::cube(4).unwrap();
        let zeros = ImageVolume::zeros(d, [1.0; 3]).unwrap();
        assert!(threshold_mask(&zeros, 0.01).is_empty());
        let ones = zeros.map(|_| 1.0).unwrap();
        assert_eq!(threshold_mask(&ones, 0.01).count(), 64);

        let v = random_volume(6, 3).map(|x| (x + 3.0) / 10.0).unwrap();
        let t = 0.37;
        let mut expected = 0;
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    if v.get(x, y, z) > t {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(threshold_mask(&v, t).count(), expected);
    }
}
