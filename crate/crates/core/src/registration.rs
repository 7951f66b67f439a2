//! Affine registration against the learned metric or a histogram-MI baseline.
//!
//! Target voxel `p` (in mm) is paired with the source at `T(p)`. Metrics are
//! evaluated on a fixed, seeded set of interior target voxels; samples whose
//! source position leaves the spline support read as zero with zero gradient,
//! so the sample set never changes with `mu`. The optimiser
//! works in scaled coordinates `y_j = mu_j * w_j / L`, takes unit-length steps
//! of size `a_k = a0 / k` along the metric gradient in `y`, and keeps the best
//! parameters seen.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;

use crate::bspline::{prefilter_bspline, SplineCoefficients};
use crate::error::{Error, Result};
use crate::features::{FeatureMaps, FeatureMode, FeatureSplines};
use crate::math::{floor, ln, sqrt};
use crate::matrix::Matrix;
use crate::network::{backprop_branch, cost, forward, mi_seeds, mmd_seeds, FeatureBatch, NetworkParams, Objective};
use crate::rng::{seeded, streams};
use crate::transform::{AffineMatrix, AffineParams, TransformMode};
use crate::volume::{BinaryMask, Dims, Grid, ImageVolume};

pub const DEFAULT_BINS: usize = 75;
pub const BACKGROUND_THRESHOLD: f64 = 0.01;
pub const DEFAULT_SAMPLES: usize = 10_000;
/// Fraction of the drawn samples that must land inside the source support.
pub const MIN_OVERLAP_FRACTION: f64 = 0.25;

/// Rotations and shears in radians and unitless scales are weighted by 100,
/// translations (mm) by 1.
pub const DEFAULT_PARAM_SCALING: [f64; 12] =
    [100.0, 100.0, 100.0, 1.0, 1.0, 1.0, 100.0, 100.0, 100.0, 100.0, 100.0, 100.0];

pub fn apply_transform(mu: &AffineParams, p: [f64; 3]) -> [f64; 3] {
    mu.apply(p)
}

pub fn transform_jacobian(mu: &AffineParams, p: [f64; 3]) -> [[f64; 12]; 3] {
    mu.jacobian(p)
}

/// Source intensities pulled back onto the target grid; zero outside the
/// spline support.
pub fn resample(source: &SplineCoefficients, source_spacing: [f64; 3], mu: &AffineParams, target: Grid) -> Result<ImageVolume> {
    let m = mu.matrix();
    let src = Grid::new(source.dims(), source_spacing)?;
    let data = (0..target.dims.len())
        .map(|i| source.value(src.mm_to_voxel(m.apply(target.voxel_to_mm(target.dims.coords(i))))))
        .collect();
    ImageVolume::with_grid(target, data)
}

/// Source mask carried onto the target grid: trilinear interpolation of the
/// 0/1 mask at `T(p)`, thresholded at 0.5. Outside the source grid counts as 0.
pub fn warp_mask(mask: &BinaryMask, source_spacing: [f64; 3], mu: &AffineParams, target: Grid) -> BinaryMask {
    warp_mask_by(mask, source_spacing, &mu.matrix(), target)
}

/// Ground-truth overlap of a registration result: the target mask carried
/// through `T_truth^-1 ∘ T_mu`, so `mu == truth` reproduces the mask exactly.
pub fn registered_truth_mask(target_mask: &BinaryMask, target: Grid, truth: &AffineParams, mu: &AffineParams) -> Result<BinaryMask> {
    if target_mask.dims() != target.dims {
        return Err(Error::DimMismatch("mask does not match target grid".into()));
    }
    let m = truth.matrix().inverse()?.compose(&mu.matrix());
    Ok(warp_mask_by(target_mask, target.spacing, &m, target))
}

/// [`warp_mask`] for an explicit affine map from target to source millimetres.
pub fn warp_mask_by(mask: &BinaryMask, source_spacing: [f64; 3], m: &AffineMatrix, target: Grid) -> BinaryMask {
    let d = mask.dims().as_array();
    let at = |c: [isize; 3]| -> f64 {
        if (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < d[a]) {
            mask.get(c[0] as usize, c[1] as usize, c[2] as usize) as u8 as f64
        } else {
            0.0
        }
    };
    BinaryMask::from_fn(target.dims, |c| {
        let q = m.apply(target.voxel_to_mm(c));
        let v: [f64; 3] = core::array::from_fn(|a| q[a] / source_spacing[a]);
        let base: [f64; 3] = core::array::from_fn(|a| floor(v[a]));
        let f: [f64; 3] = core::array::from_fn(|a| v[a] - base[a]);
        let b: [isize; 3] = core::array::from_fn(|a| base[a] as isize);
        let mut acc = 0.0;
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let w: f64 = (0..3).map(|a| if o[a] == 1 { f[a] } else { 1.0 - f[a] }).product();
            if w > 0.0 {
                acc += w * at(core::array::from_fn(|a| b[a] + o[a] as isize));
            }
        }
        acc >= 0.5
    })
}

/// Up to `n` distinct interior voxel indices of `dims`, sorted.
pub fn draw_samples(dims: Dims, n: usize, seed: u64) -> Vec<usize> {
    let interior: Vec<usize> = (0..dims.len()).filter(|&i| dims.is_interior(dims.coords(i))).collect();
    let n = n.min(interior.len());
    let mut rng = seeded(seed, streams::SAMPLES);
    let mut picked: Vec<usize> = index::sample(&mut rng, interior.len(), n).into_iter().map(|k| interior[k]).collect();
    picked.sort_unstable();
    picked
}

fn required_samples(n: usize) -> usize {
    let r = (MIN_OVERLAP_FRACTION * n as f64) as usize;
    r.max(2)
}

/// A trained network together with the cost weights and input features it
/// was trained with.
#[derive(Clone, Debug)]
pub struct CdlModel {
    pub params: NetworkParams,
    pub objective: Objective,
    pub features: FeatureMode,
}

impl CdlModel {
    pub fn new(params: NetworkParams, objective: Objective, features: FeatureMode) -> Result<Self> {
        if params.input_dim() != features.dim() {
            return Err(Error::DimMismatch(format!(
                "network expects {} inputs, feature mode {} provides {}",
                params.input_dim(),
                features.name(),
                features.dim()
            )));
        }
        Ok(Self { params, objective, features })
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub enum MaskPolicy<'a> {
    /// Plain MI over every sample.
    #[default]
    None,
    /// Samples whose target intensity exceeds [`BACKGROUND_THRESHOLD`].
    Background,
    /// Samples inside a user mask on the target grid.
    Supplied(&'a BinaryMask),
}

impl MaskPolicy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            MaskPolicy::None => "none",
            MaskPolicy::Background => "background",
            MaskPolicy::Supplied(_) => "supplied",
        }
    }

    fn keeps(&self, target: &ImageVolume, index: usize) -> bool {
        match self {
            MaskPolicy::None => true,
            MaskPolicy::Background => target.data()[index] > BACKGROUND_THRESHOLD,
            MaskPolicy::Supplied(m) => m.bits()[index],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum MetricKind<'a> {
    Cdl(&'a CdlModel),
    HistMi { bins: usize, mask: MaskPolicy<'a> },
}

impl MetricKind<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Cdl(_) => "cdl",
            MetricKind::HistMi { mask: MaskPolicy::None, .. } => "mi",
            MetricKind::HistMi { mask: MaskPolicy::Background, .. } => "mi+m",
            MetricKind::HistMi { mask: MaskPolicy::Supplied(_), .. } => "mi+b",
        }
    }
}

#[inline]
fn bin_of(v: f64, bins: usize) -> usize {
    let x = v.clamp(0.0, 1.0);
    (floor(x * bins as f64) as usize).min(bins - 1)
}

/// Shannon MI (nats) of the joint histogram of paired values in `[0, 1]`.
pub fn histogram_mi(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidParameter(format!("bins must be at least 2, got {bins}")));
    }
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), actual: b.len() });
    }
    if a.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut joint = vec![0u32; bins * bins];
    let mut pa = vec![0u32; bins];
    let mut pb = vec![0u32; bins];
    for (&x, &y) in a.iter().zip(b) {
        let (i, j) = (bin_of(x, bins), bin_of(y, bins));
        joint[i * bins + j] += 1;
        pa[i] += 1;
        pb[j] += 1;
    }
    let n = a.len() as f64;
    let mut mi = 0.0;
    for i in 0..bins {
        if pa[i] == 0 {
            continue;
        }
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                let c = c as f64;
                mi += c / n * ln(c * n / (pa[i] as f64 * pb[j] as f64));
            }
        }
    }
    Ok(mi)
}

/// Histogram MI between two volumes on the same grid over the voxels kept by
/// `mask`.
pub fn hist_mi(target: &ImageVolume, moving: &ImageVolume, bins: usize, mask: &MaskPolicy) -> Result<f64> {
    if target.dims() != moving.dims() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", target.dims(), moving.dims())));
    }
    if let MaskPolicy::Supplied(m) = mask {
        if m.dims() != target.dims() {
            return Err(Error::DimMismatch("mask does not match target grid".into()));
        }
    }
    let (a, b): (Vec<f64>, Vec<f64>) = (0..target.dims().len())
        .filter(|&i| mask.keeps(target, i))
        .map(|i| (target.data()[i], moving.data()[i]))
        .unzip();
    histogram_mi(&a, &b, bins)
}

fn check_pair(target: &ImageVolume, source: &ImageVolume) -> Result<()> {
    if !target.is_normalized() || !source.is_normalized() {
        return Err(Error::InvalidParameter("volumes must be normalised to [0, 1]".into()));
    }
    Ok(())
}

/// Learned-metric problem on a fixed sample set.
#[derive(Clone, Debug)]
pub struct CdlProblem<'a> {
    model: &'a CdlModel,
    source: FeatureSplines,
    source_grid: Grid,
    positions: Vec<[f64; 3]>,
    target_rows: Matrix,
    required: usize,
}

impl<'a> CdlProblem<'a> {
    pub fn new(model: &'a CdlModel, target: &ImageVolume, source: &ImageVolume, samples: &[usize]) -> Result<Self> {
        check_pair(target, source)?;
        let maps = FeatureMaps::compute(target, model.features)?;
        let splines = FeatureMaps::compute(source, model.features)?.splines()?;
        Ok(Self::with_parts(model, &maps, target.grid(), splines, source.grid(), samples))
    }

    /// Builds a problem from precomputed target feature maps and source splines.
    pub fn with_parts(
        model: &'a CdlModel,
        target_maps: &FeatureMaps,
        target_grid: Grid,
        source: FeatureSplines,
        source_grid: Grid,
        samples: &[usize],
    ) -> Self {
        let d = model.features.dim();
        let mut target_rows = Matrix::zeros(samples.len(), d);
        let mut positions = Vec::with_capacity(samples.len());
        for (r, &i) in samples.iter().enumerate() {
            target_maps.at_voxel(i, target_rows.row_mut(r));
            positions.push(target_grid.voxel_to_mm(target_grid.dims.coords(i)));
        }
        Self { model, source, source_grid, positions, target_rows, required: required_samples(samples.len()) }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Cost at `mu`, plus `dC/dmu` when `want_gradient`.
    pub fn evaluate(&self, mu: &AffineParams, want_gradient: bool) -> Result<(f64, Option<[f64; 12]>)> {
        let d = self.source.dim();
        let m: AffineMatrix = mu.matrix();
        let n = self.len();
        let mut src = Matrix::zeros(n, d);
        let mut grads: Vec<[f64; 3]> = if want_gradient { vec![[0.0; 3]; n * d] } else { Vec::new() };
        let mut scratch = [[0.0; 3]; 3];
        let mut valid = 0;
        for (r, &p) in self.positions.iter().enumerate() {
            let v = self.source_grid.mm_to_voxel(m.apply(p));
            let g = if want_gradient { &mut grads[r * d..(r + 1) * d] } else { &mut scratch[..d] };
            valid += self.source.sample(v, src.row_mut(r), g) as usize;
        }
        if valid < self.required {
            return Err(Error::InsufficientOverlap { valid, required: self.required });
        }
        let batch = FeatureBatch::new(src, self.target_rows.clone())?;
        let params = &self.model.params;
        let obj = &self.model.objective;
        let cache = forward(params, &batch)?;
        let c = cost(params, &cache, obj)?;
        if !want_gradient {
            return Ok((c, None));
        }
        let (_, mi_s) = mi_seeds(&cache, obj.mi_form)?;
        let (_, mmd_s) = mmd_seeds(&cache);
        let mut seed = mi_s;
        for (a, b) in seed.as_mut_slice().iter_mut().zip(mmd_s.as_slice()) {
            *a -= obj.alpha * b;
        }
        let dx = backprop_branch(params, &cache.source, &seed, true).input.expect("input gradient requested");
        let inv_s = self.source_grid.spacing.map(|s| 1.0 / s);
        let mut out = [0.0; 12];
        for r in 0..n {
            let mut spatial = [0.0; 3];
            for c in 0..d {
                let w = dx.get(r, c);
                let gc = grads[r * d + c];
                for a in 0..3 {
                    spatial[a] += w * gc[a] * inv_s[a];
                }
            }
            if spatial == [0.0; 3] {
                continue;
            }
            let jac = mu.jacobian(self.positions[r]);
            for a in 0..3 {
                for j in 0..12 {
                    out[j] += spatial[a] * jac[a][j];
                }
            }
        }
        Ok((c, Some(out)))
    }
}

/// Learned cost at `mu` on `samples` seeded target voxels.
pub fn cdl_metric(
    model: &CdlModel,
    target: &ImageVolume,
    source: &ImageVolume,
    mu: &AffineParams,
    samples: usize,
    sample_seed: u64,
) -> Result<f64> {
    let idx = draw_samples(target.dims(), samples, sample_seed);
    Ok(CdlProblem::new(model, target, source, &idx)?.evaluate(mu, false)?.0)
}

/// `dC/dmu` for all 12 parameters.
pub fn search_direction(
    model: &CdlModel,
    target: &ImageVolume,
    source: &ImageVolume,
    mu: &AffineParams,
    samples: usize,
    sample_seed: u64,
) -> Result<[f64; 12]> {
    let idx = draw_samples(target.dims(), samples, sample_seed);
    let (_, g) = CdlProblem::new(model, target, source, &idx)?.evaluate(mu, true)?;
    Ok(g.expect("gradient requested"))
}

/// Histogram-MI problem on a fixed sample set.
#[derive(Clone, Debug)]
pub struct HistMiProblem {
    source: SplineCoefficients,
    source_grid: Grid,
    positions: Vec<[f64; 3]>,
    target_values: Vec<f64>,
    bins: usize,
    required: usize,
}

impl HistMiProblem {
    pub fn new(target: &ImageVolume, source: &ImageVolume, bins: usize, mask: &MaskPolicy, samples: &[usize]) -> Result<Self> {
        check_pair(target, source)?;
        Self::with_parts(target, prefilter_bspline(source)?, source.grid(), bins, mask, samples)
    }

    pub fn with_parts(
        target: &ImageVolume,
        source: SplineCoefficients,
        source_grid: Grid,
        bins: usize,
        mask: &MaskPolicy,
        samples: &[usize],
    ) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidParameter(format!("bins must be at least 2, got {bins}")));
        }
        if let MaskPolicy::Supplied(m) = mask {
            if m.dims() != target.dims() {
                return Err(Error::DimMismatch("mask does not match target grid".into()));
            }
        }
        let grid = target.grid();
        let kept: Vec<usize> = samples.iter().copied().filter(|&i| mask.keeps(target, i)).collect();
        if kept.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(Self {
            source,
            source_grid,
            positions: kept.iter().map(|&i| grid.voxel_to_mm(grid.dims.coords(i))).collect(),
            target_values: kept.iter().map(|&i| target.data()[i]).collect(),
            bins,
            required: required_samples(kept.len()),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn evaluate(&self, mu: &AffineParams) -> Result<f64> {
        let m = mu.matrix();
        let mut b = Vec::with_capacity(self.len());
        let mut valid = 0;
        for p in &self.positions {
            let v = self.source_grid.mm_to_voxel(m.apply(*p));
            if self.source.in_support(v) {
                valid += 1;
                b.push(self.source.eval_value_stencil(&self.source.stencil(v)));
            } else {
                b.push(0.0);
            }
        }
        if valid < self.required {
            return Err(Error::InsufficientOverlap { valid, required: self.required });
        }
        histogram_mi(&self.target_values, &b, self.bins)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// `a0` in `a_k = a0 / k`.
    pub base_step: f64,
    /// Length `L` (mm) of one unit step in scaled coordinates.
    pub step_unit_mm: f64,
    pub param_scaling: [f64; 12],
    /// Stop once `||mu_{k+1} - mu_k|| < stop_tol`.
    pub stop_tol: f64,
    /// Central-difference step, in scaled units, for metrics without an
    /// analytic gradient.
    pub fd_step: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            base_step: 0.2,
            step_unit_mm: 20.0,
            param_scaling: DEFAULT_PARAM_SCALING,
            stop_tol: 1e-6,
            fd_step: 0.05,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.base_step, self.step_unit_mm, self.fd_step];
        if !positive.iter().chain(&self.param_scaling).all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::InvalidParameter(
                "base_step, step_unit_mm, fd_step and param_scaling must be positive".into(),
            ));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(Error::InvalidParameter("stop_tol must be non-negative".into()));
        }
        Ok(())
    }

    /// Parameter-space increment corresponding to one scaled unit.
    pub fn unit(&self, j: usize) -> f64 {
        self.step_unit_mm / self.param_scaling[j]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationConfig {
    pub mode: TransformMode,
    pub samples: usize,
    /// Draw a fresh sample set at every iteration instead of once.
    pub resample_each_iter: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            mode: TransformMode::Affine,
            samples: DEFAULT_SAMPLES,
            resample_each_iter: false,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub cost: f64,
    /// `a_k` of the step that produced this row; 0 for the initial row.
    pub step: f64,
    pub mu: [f64; 12],
    pub dice: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegistrationTrace {
    pub rows: Vec<TraceRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxIters,
    StepTolerance,
    ZeroGradient,
    /// The metric failed after the initial evaluation; the trace holds every
    /// iterate up to the failure.
    Failed { iteration: usize, error: Error },
}

#[derive(Clone, Debug)]
pub struct Registration {
    /// Best-cost parameters.
    pub params: AffineParams,
    pub best_cost: f64,
    pub initial_cost: f64,
    pub trace: RegistrationTrace,
    pub stop: StopReason,
}

enum Evaluator<'a> {
    Cdl(CdlProblem<'a>),
    Hist(HistMiProblem),
}

impl Evaluator<'_> {
    fn evaluate(&self, mu: &AffineParams, active: &[usize], opt: &OptimizerConfig, want: bool) -> Result<(f64, Option<[f64; 12]>)> {
        match self {
            Evaluator::Cdl(p) => p.evaluate(mu, want),
            Evaluator::Hist(p) => {
                let c = p.evaluate(mu)?;
                if !want {
                    return Ok((c, None));
                }
                let mut g = [0.0; 12];
                for &j in active {
                    let h = opt.fd_step * opt.unit(j);
                    let mut plus = *mu;
                    let mut minus = *mu;
                    plus.mu[j] += h;
                    minus.mu[j] -= h;
                    g[j] = (p.evaluate(&plus)? - p.evaluate(&minus)?) / (2.0 * h);
                }
                Ok((c, Some(g)))
            }
        }
    }
}

/// Source-side precomputation shared by every sample set.
enum Prepared<'a> {
    Cdl { model: &'a CdlModel, maps: FeatureMaps, splines: FeatureSplines },
    Hist { bins: usize, mask: MaskPolicy<'a>, spline: SplineCoefficients },
}

impl<'a> Prepared<'a> {
    fn new(metric: &MetricKind<'a>, target: &ImageVolume, source: &ImageVolume) -> Result<Self> {
        check_pair(target, source)?;
        Ok(match metric {
            MetricKind::Cdl(model) => Prepared::Cdl {
                model,
                maps: FeatureMaps::compute(target, model.features)?,
                splines: FeatureMaps::compute(source, model.features)?.splines()?,
            },
            MetricKind::HistMi { bins, mask } => {
                Prepared::Hist { bins: *bins, mask: *mask, spline: prefilter_bspline(source)? }
            }
        })
    }

    fn problem(&self, target: &ImageVolume, source: &ImageVolume, samples: &[usize]) -> Result<Evaluator<'a>> {
        Ok(match self {
            Prepared::Cdl { model, maps, splines } => Evaluator::Cdl(CdlProblem::with_parts(
                model,
                maps,
                target.grid(),
                splines.clone(),
                source.grid(),
                samples,
            )),
            Prepared::Hist { bins, mask, spline } => {
                Evaluator::Hist(HistMiProblem::with_parts(target, spline.clone(), source.grid(), *bins, mask, samples)?)
            }
        })
    }
}

/// Registers `source` to `target` starting from the identity about the
/// target field-of-view centre.
pub fn register(
    metric: &MetricKind,
    target: &ImageVolume,
    source: &ImageVolume,
    cfg: &RegistrationConfig,
    seed: u64,
    dice_probe: Option<&dyn Fn(&AffineParams) -> f64>,
) -> Result<Registration> {
    let init = AffineParams::identity(target.grid().center_mm());
    register_from(metric, target, source, init, cfg, seed, dice_probe)
}

/// Regular-step gradient ascent on the metric from `init`.
pub fn register_from(
    metric: &MetricKind,
    target: &ImageVolume,
    source: &ImageVolume,
    init: AffineParams,
    cfg: &RegistrationConfig,
    seed: u64,
    dice_probe: Option<&dyn Fn(&AffineParams) -> f64>,
) -> Result<Registration> {
    let opt = &cfg.optimizer;
    opt.validate()?;
    init.validate()?;
    if let MetricKind::HistMi { bins, .. } = metric {
        if *bins < 2 {
            return Err(Error::InvalidParameter(format!("bins must be at least 2, got {bins}")));
        }
    }
    let active = cfg.mode.active();
    let prepared = Prepared::new(metric, target, source)?;
    let samples_for = |k: usize| {
        let s = if cfg.resample_each_iter { seed.wrapping_add(k as u64) } else { seed };
        draw_samples(target.dims(), cfg.samples, s)
    };
    let mut problem = prepared.problem(target, source, &samples_for(0))?;
    let want = opt.max_iters > 0;
    let (c0, mut grad) = problem.evaluate(&init, active, opt, want)?;
    if !c0.is_finite() {
        return Err(Error::NonFiniteCost { iteration: 0 });
    }
    let mut mu = init;
    let mut trace = RegistrationTrace {
        rows: vec![TraceRow { k: 0, cost: c0, step: 0.0, mu: mu.mu, dice: dice_probe.map(|f| f(&mu)) }],
    };
    let (mut best, mut best_cost) = (mu, c0);
    let mut stop = StopReason::MaxIters;
    for k in 1..=opt.max_iters {
        let g = grad.take().expect("gradient available");
        let gy: Vec<(usize, f64)> = active.iter().map(|&j| (j, g[j] * opt.unit(j))).collect();
        let norm = sqrt(gy.iter().map(|(_, v)| v * v).sum());
        if !(norm > 0.0) || !norm.is_finite() {
            stop = StopReason::ZeroGradient;
            break;
        }
        let a = opt.base_step / k as f64;
        let mut next = mu;
        let mut moved = 0.0;
        for &(j, v) in &gy {
            let dmu = a * v / norm * opt.unit(j);
            next.mu[j] += dmu;
            moved += dmu * dmu;
        }
        if let Err(e) = next.validate() {
            stop = StopReason::Failed { iteration: k, error: e };
            break;
        }
        if cfg.resample_each_iter {
            match prepared.problem(target, source, &samples_for(k)) {
                Ok(p) => problem = p,
                Err(e) => {
                    stop = StopReason::Failed { iteration: k, error: e };
                    break;
                }
            }
        }
        let (c, g) = match problem.evaluate(&next, active, opt, k < opt.max_iters) {
            Ok(r) => r,
            Err(e) => {
                stop = StopReason::Failed { iteration: k, error: e };
                break;
            }
        };
        if !c.is_finite() {
            stop = StopReason::Failed { iteration: k, error: Error::NonFiniteCost { iteration: k } };
            break;
        }
        mu = next;
        grad = g;
        trace.rows.push(TraceRow { k, cost: c, step: a, mu: mu.mu, dice: dice_probe.map(|f| f(&mu)) });
        if c > best_cost {
            best_cost = c;
            best = mu;
        }
        if sqrt(moved) < opt.stop_tol {
            stop = StopReason::StepTolerance;
            break;
        }
    }
    Ok(Registration { params: best, best_cost, initial_cost: c0, trace, stop })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, s: f64) -> Grid {
        Grid::new(Dims::cube(n).unwrap(), [s; 3]).unwrap()
    }

    #[test]
    fn samples_are_interior_distinct_and_seeded() {
        let d = Dims::new(6, 7, 8).unwrap();
        let a = draw_samples(d, 50, 3);
        assert_eq!(a, draw_samples(d, 50, 3));
        assert_ne!(a, draw_samples(d, 50, 4));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&i| d.is_interior(d.coords(i))));
        assert_eq!(draw_samples(d, 10_000, 1).len(), 4 * 5 * 6);
    }

    #[test]
    fn histogram_mi_of_self_is_entropy() {
        let v: Vec<f64> = (0..500).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let mi = histogram_mi(&v, &v, 10).unwrap();
        let mut counts = [0usize; 10];
        v.iter().for_each(|&x| counts[bin_of(x, 10)] += 1);
        let h: f64 = counts.iter().filter(|&&c| c > 0).map(|&c| -(c as f64 / 500.0) * ln(c as f64 / 500.0)).sum();
        assert!((mi - h).abs() < 1e-12);
        assert!(histogram_mi(&v, &v, 1).is_err());
    }

    #[test]
    fn warp_mask_identity_roundtrip() {
        let g = grid(6, 1.5);
        let m = BinaryMask::from_fn(g.dims, |c| c[0] > 2 && c[1] < 4);
        let w = warp_mask(&m, g.spacing, &AffineParams::identity(g.center_mm()), g);
        assert_eq!(w, m);
        let truth = AffineParams::rigid([0.1, -0.05, 0.2], [1.0, 2.0, -1.5], g.center_mm());
        assert_eq!(registered_truth_mask(&m, g, &truth, &truth).unwrap(), m);
    }

    #[test]
    fn optimizer_config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let mut c = OptimizerConfig::default();
        c.param_scaling[4] = 0.0;
        assert!(c.validate().is_err());
    }
}
