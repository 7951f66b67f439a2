//! The self-check suite behind `cdl verify`: finite-difference gradient checks,
//! estimator oracles and the density grid.

use std::path::Path;

use cdl_core::density::{density_mass, gaussianity_check, GaussianSpec};
use cdl_core::evaluation::{hausdorff_mm, ranksum_p};
use cdl_core::features::{FeatureMaps, FeatureMode};
use cdl_core::matrix::Matrix;
use cdl_core::network::{
    backward, cost, forward, mmd, mutual_information, train, Activation, FeatureBatch, ForwardCache, MiForm,
    NetworkParams, Objective, TrainConfig,
};
use cdl_core::registration::{draw_samples, CdlModel, CdlProblem, OptimizerConfig};
use cdl_core::rng::seeded;
use cdl_core::synthetic::{make_pair, random_rigid, DriftSpec, PairSeeds, PhantomSpec};
use cdl_core::transform::AffineParams;
use cdl_core::volume::{BinaryMask, Dims};
use rand::Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::density_grid;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `measured <= tolerance`.
    pub fn at_most(name: &str, measured: f64, tolerance: f64) -> Self {
        Self { name: name.into(), measured, tolerance, pass: measured <= tolerance }
    }
}

pub const NETWORK_FD_STEP: f64 = 1e-5;
pub const NETWORK_FD_TOL: f64 = 1e-4;
pub const REGISTRATION_FD_TOL: f64 = 1e-3;
pub const ORACLE_TOL: f64 = 1e-12;
pub const RANKSUM_TOL: f64 = 0.02;
pub const MASS_TOL: f64 = 1e-6;
pub const KS_TOL: f64 = 0.01;
pub const SMALL_SIGMA_SKEW_TOL: f64 = 0.05;
pub const SMALL_SIGMA_KURT_TOL: f64 = 0.1;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Analytic `dC/dtheta` in [`NetworkParams::param`] order.
pub type GradientFn = dyn Fn(&NetworkParams, &ForwardCache, &Objective) -> cdl_core::Result<Vec<f64>> + Sync;

pub fn analytic_gradient(p: &NetworkParams, c: &ForwardCache, o: &Objective) -> cdl_core::Result<Vec<f64>> {
    Ok(backward(p, c, o)?.flat())
}

/// Target features in `[0, 1)`; source features a noisy decreasing remap.
pub fn correlated_batch(n: usize, d: usize, seed: u64) -> Result<FeatureBatch> {
    let mut rng = seeded(seed, 0);
    let t = Matrix::from_fn(n, d, |_, _| rng.random_range(0.0..1.0));
    let s = Matrix::from_fn(n, d, |i, j| {
        let x = t.get(i, j);
        1.0 - x * x + 0.05 * rng.random_range(-1.0..1.0)
    });
    Ok(FeatureBatch::new(s, t)?)
}

/// Worst relative error between `grad` and central differences of the cost
/// over `seeds` random 3-4-3 networks, cycling activations and MI forms.
pub fn network_gradient_error(seeds: std::ops::Range<u64>, grad: &GradientFn) -> Result<f64> {
    let forms = [MiForm::Pearson, MiForm::UnitCentered, MiForm::Literal];
    let errs = seeds
        .into_par_iter()
        .map(|seed| -> Result<f64> {
            let act = if seed % 2 == 0 { Activation::Sigmoid } else { Activation::Tanh };
            let obj = Objective { alpha: 0.7, beta: 0.05, mi_form: forms[seed as usize % forms.len()] };
            let p = NetworkParams::init(&[3, 4, 3], act, Some(1.5), seed)?;
            let batch = correlated_batch(30, 3, 1000 + seed)?;
            let g = grad(&p, &forward(&p, &batch)?, &obj)?;
            let at = |q: &NetworkParams| -> Result<f64> { Ok(cost(q, &forward(q, &batch)?, &obj)?) };
            let mut worst: f64 = 0.0;
            for k in 0..p.parameter_count() {
                let (mut plus, mut minus) = (p.clone(), p.clone());
                plus.set_param(k, p.param(k) + NETWORK_FD_STEP);
                minus.set_param(k, p.param(k) - NETWORK_FD_STEP);
                let fd = (at(&plus)? - at(&minus)?) / (2.0 * NETWORK_FD_STEP);
                worst = worst.max(rel_err(g[k], fd, 1e-6));
            }
            Ok(worst)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

const REG_N: usize = 20;
const REG_SPACING: f64 = 6.0;

fn reg_spec(seed: u64) -> PhantomSpec {
    PhantomSpec::head(Dims::cube(REG_N).expect("positive"), [REG_SPACING; 3], seed)
}

/// A briefly trained model on one aligned 20^3 pair.
pub fn small_model() -> Result<CdlModel> {
    let feat = FeatureMode::IntensityMeanStd;
    let center = reg_spec(0).grid().center_mm();
    let pair = make_pair(&reg_spec(1), &DriftSpec::t1_to_t2(), &AffineParams::identity(center), PairSeeds { phantom: 1, drift: 2 })?;
    let ft = FeatureMaps::compute(&pair.target, feat)?;
    let fs = FeatureMaps::compute(&pair.source, feat)?;
    let idx = draw_samples(pair.target.dims(), 1500, 3);
    let mut t = Matrix::zeros(idx.len(), 3);
    let mut s = Matrix::zeros(idx.len(), 3);
    for (r, &i) in idx.iter().enumerate() {
        ft.at_voxel(i, t.row_mut(r));
        fs.at_voxel(i, s.row_mut(r));
    }
    let cfg = TrainConfig { beta: 0.01, max_iters: 200, decay: 0.99, ..TrainConfig::default() };
    let out = train(&FeatureBatch::new(s, t)?, &[3, 6, 4], Activation::Sigmoid, &cfg)?;
    Ok(CdlModel::new(out.params, cfg.objective(), feat)?)
}

/// A pose with every one of the twelve parameters away from identity.
pub fn skewed_pose(seed: u64, center: [f64; 3]) -> AffineParams {
    let mut mu = random_rigid(seed, 0.12, 6.0, center);
    let s = seed as f64;
    mu.mu[6] = 1.0 + 0.03 * (s * 0.7).sin();
    mu.mu[7] = 1.0 - 0.02 * (s * 1.3).cos();
    mu.mu[8] = 1.0 + 0.025 * (s * 0.4).sin();
    mu.mu[9] = 0.02 * (s * 1.1).cos();
    mu.mu[10] = -0.015 * (s * 0.9).sin();
    mu.mu[11] = 0.01 * (s * 1.7).cos();
    mu
}

/// Worst relative error of the metric gradient against central differences
/// over `cases` seeded pairs and all twelve parameters.
pub fn registration_gradient_error(model: &CdlModel, cases: std::ops::Range<u64>) -> Result<f64> {
    let opt = OptimizerConfig::default();
    let center = reg_spec(0).grid().center_mm();
    let errs = cases
        .into_par_iter()
        .map(|case| -> Result<f64> {
            let truth = random_rigid(40 + case, 0.1, 5.0, center);
            let seeds = PairSeeds { phantom: 10 + case, drift: 20 + case };
            let pair = make_pair(&reg_spec(10 + case), &DriftSpec::t1_to_t2(), &truth, seeds)?;
            let samples: Vec<usize> = pair.target_mask.set_indices().step_by(2).collect();
            let problem = CdlProblem::new(model, &pair.target, &pair.source, &samples)?;
            let mu = skewed_pose(case, center);
            let g = problem.evaluate(&mu, true)?.1.ok_or_else(|| Error::Numerical("no gradient".into()))?;
            let mut worst: f64 = 0.0;
            for j in 0..12 {
                let h = 1e-4 * opt.unit(j);
                let (mut plus, mut minus) = (mu, mu);
                plus.mu[j] += h;
                minus.mu[j] -= h;
                let fd = (problem.evaluate(&plus, false)?.0 - problem.evaluate(&minus, false)?.0) / (2.0 * h);
                worst = worst.max(rel_err(g[j], fd, 1e-8));
            }
            Ok(worst)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

fn two_pass_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn loop_mmd(t: &Matrix, s: &Matrix) -> f64 {
    let mut total = 0.0;
    for j in 0..t.cols() {
        let (mut mt, mut ms) = (0.0, 0.0);
        for i in 0..t.rows() {
            mt += t.get(i, j);
            ms += s.get(i, j);
        }
        let d = (mt - ms) / t.rows() as f64;
        total += d * d;
    }
    total
}

/// Worst deviation of the MI estimator from `-(1 - r)/2` with a two-pass
/// Pearson `r`, and of the MMD from a loop, over seeded networks.
pub fn estimator_oracle_errors(seeds: std::ops::Range<u64>) -> Result<(f64, f64)> {
    let (mut mi_err, mut mmd_err): (f64, f64) = (0.0, 0.0);
    for seed in seeds {
        let p = NetworkParams::init(&[3, 5, 4], Activation::Sigmoid, Some(1.5), seed)?;
        let c = forward(&p, &correlated_batch(40, 3, 500 + seed)?)?;
        let top = c.depth();
        let (t, s) = (&c.target.post[top], &c.source.post[top]);
        let oracle = -0.5 * (1.0 - two_pass_pearson(t.as_slice(), s.as_slice()));
        mi_err = mi_err.max((mutual_information(&c, top, MiForm::Pearson)? - oracle).abs());
        mmd_err = mmd_err.max((mmd(&c, top) - loop_mmd(t, s)).abs());
    }
    Ok((mi_err, mmd_err))
}

fn brute_boundary(m: &BinaryMask) -> Vec<[usize; 3]> {
    let d = m.dims().as_array();
    let mut out = Vec::new();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if !m.get(x, y, z) {
                    continue;
                }
                let c = [x, y, z];
                let mut edge = false;
                for a in 0..3 {
                    if c[a] == 0 || c[a] == d[a] - 1 {
                        edge = true;
                        continue;
                    }
                    for step in [-1isize, 1] {
                        let mut n = c;
                        n[a] = (c[a] as isize + step) as usize;
                        edge |= !m.get(n[0], n[1], n[2]);
                    }
                }
                if edge {
                    out.push(c);
                }
            }
        }
    }
    out
}

/// Symmetric Hausdorff distance by comparing every pair of boundary voxels.
pub fn brute_hausdorff(a: &BinaryMask, b: &BinaryMask, s: [f64; 3]) -> f64 {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    let dist = |p: [usize; 3], q: [usize; 3]| -> f64 { (0..3).map(|k| ((p[k] as f64 - q[k] as f64) * s[k]).powi(2)).sum() };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter().map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
    };
    directed(&ba, &bb).max(directed(&bb, &ba)).sqrt()
}

/// A blob of random radius and centre, never empty.
pub fn random_blob(dims: Dims, seed: u64) -> BinaryMask {
    let mut rng = seeded(seed, 0);
    let d = dims.as_array();
    let c: Vec<f64> = d.iter().map(|&n| rng.random_range(0.3..0.7) * n as f64).collect();
    let r = [0, 1, 2].map(|_| rng.random_range(1.5..0.4 * d[0].min(d[1]).min(d[2]) as f64));
    let mut m = BinaryMask::from_fn(dims, |v| {
        (0..3).map(|k| ((v[k] as f64 - c[k]) / r[k]).powi(2)).sum::<f64>() <= 1.0
    });
    if m.is_empty() {
        m = BinaryMask::from_fn(dims, |v| v == [d[0] / 2, d[1] / 2, d[2] / 2]);
    }
    m
}

/// Worst absolute difference between [`hausdorff_mm`] and the brute force.
pub fn hausdorff_oracle_error(cases: std::ops::Range<u64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in cases {
        let dims = Dims::new(8 + (seed % 9) as usize, 10 + (seed % 7) as usize, 16 - (seed % 5) as usize)?;
        let spacing = [1.0 + 0.25 * (seed % 3) as f64, 1.0, 0.75 + 0.5 * (seed % 2) as f64];
        let a = random_blob(dims, 2 * seed);
        let b = random_blob(dims, 2 * seed + 1);
        worst = worst.max((hausdorff_mm(&a, &b, spacing)? - brute_hausdorff(&a, &b, spacing)).abs());
    }
    Ok(worst)
}

/// Two-sided tail probability of the rank sum by enumerating every split.
pub fn permutation_p(x: &[f64], y: &[f64]) -> f64 {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let n = pooled.len();
    let rank = |v: f64| -> f64 {
        let below = pooled.iter().filter(|&&w| w < v).count() as f64;
        let equal = pooled.iter().filter(|&&w| w == v).count() as f64;
        below + (equal + 1.0) / 2.0
    };
    let ranks: Vec<f64> = pooled.iter().map(|&v| rank(v)).collect();
    let mean = x.len() as f64 * (n + 1) as f64 / 2.0;
    let observed = (ranks[..x.len()].iter().sum::<f64>() - mean).abs();
    let (mut hits, mut total) = (0u64, 0u64);
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != x.len() {
            continue;
        }
        let r: f64 = (0..n).filter(|i| bits >> i & 1 == 1).map(|i| ranks[i]).sum();
        total += 1;
        if (r - mean).abs() >= observed - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

/// Worst gap between [`ranksum_p`] and enumeration for `n = m` in 3..=5,
/// including samples with ties.
pub fn ranksum_oracle_error(trials: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for n in 3..=5usize {
        for t in 0..trials {
            let mut rng = seeded(7000 + t, n as u64);
            let ties = t % 3 == 0;
            let mut draw = || if ties { rng.random_range(0..4) as f64 } else { rng.random_range(0.0..1.0) };
            let x: Vec<f64> = (0..n).map(|_| draw()).collect();
            let y: Vec<f64> = (0..n).map(|_| draw() + 0.3).collect();
            worst = worst.max((ranksum_p(&x, &y)?.p_value - permutation_p(&x, &y)).abs());
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensitySummary {
    pub worst_mass_error: f64,
    pub worst_ks: f64,
    pub small_sigma_skew: f64,
    pub small_sigma_kurtosis: f64,
}

/// Mass and KS over the `(mu, sigma)` grid for both activations, plus the
/// largest moments seen at `sigma = 0.01`.
pub fn density_summary(samples: usize, seed: u64) -> Result<DensitySummary> {
    let mut jobs = Vec::new();
    for act in [Activation::Tanh, Activation::Sigmoid] {
        for cell in density_grid() {
            jobs.push((act, cell));
        }
    }
    let rows = jobs
        .par_iter()
        .enumerate()
        .map(|(i, &(act, (mu, sigma)))| -> Result<(f64, f64, f64, f64, f64)> {
            let g = GaussianSpec::new(mu, sigma)?;
            let r = gaussianity_check(&g, act, samples, seed + i as u64)?;
            Ok((sigma, (density_mass(&g, act) - 1.0).abs(), r.ks_closed_form, r.skewness.abs(), r.excess_kurtosis.abs()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = DensitySummary { worst_mass_error: 0.0, worst_ks: 0.0, small_sigma_skew: 0.0, small_sigma_kurtosis: 0.0 };
    for (sigma, mass, ks, skew, kurt) in rows {
        s.worst_mass_error = s.worst_mass_error.max(mass);
        s.worst_ks = s.worst_ks.max(ks);
        if sigma <= 0.01 {
            s.small_sigma_skew = s.small_sigma_skew.max(skew);
            s.small_sigma_kurtosis = s.small_sigma_kurtosis.max(kurt);
        }
    }
    Ok(s)
}

/// Runs every check with the given network gradient.
pub fn run_checks(cfg: &RunConfig, grad: &GradientFn) -> Result<Vec<Check>> {
    let mut out = vec![Check::at_most("network_gradient_fd", network_gradient_error(0..20, grad)?, NETWORK_FD_TOL)];
    let model = small_model()?;
    out.push(Check::at_most("registration_gradient_fd", registration_gradient_error(&model, 0..10)?, REGISTRATION_FD_TOL));
    let (mi, mmd) = estimator_oracle_errors(0..10)?;
    out.push(Check::at_most("mi_pearson_oracle", mi, ORACLE_TOL));
    out.push(Check::at_most("mmd_loop_oracle", mmd, ORACLE_TOL));
    out.push(Check::at_most("hausdorff_brute_force", hausdorff_oracle_error(0..12)?, 0.0));
    out.push(Check::at_most("ranksum_permutation", ranksum_oracle_error(30)?, RANKSUM_TOL));
    let d = density_summary(cfg.density_samples, cfg.seed.wrapping_mul(crate::pipeline::SEED_STRIDE))?;
    out.push(Check::at_most("density_mass", d.worst_mass_error, MASS_TOL));
    out.push(Check::at_most("density_ks", d.worst_ks, KS_TOL));
    out.push(Check::at_most("small_sigma_skewness", d.small_sigma_skew, SMALL_SIGMA_SKEW_TOL));
    out.push(Check::at_most("small_sigma_excess_kurtosis", d.small_sigma_kurtosis, SMALL_SIGMA_KURT_TOL));
    Ok(out)
}

pub fn write_checks(path: &Path, checks: &[Check]) -> Result<()> {
    let mut s = String::from("check,measured,tolerance,pass\n");
    for c in checks {
        s += &format!("{},{:e},{:e},{}\n", c.name, c.measured, c.tolerance, c.pass);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// `cdl verify`: writes `verify.csv` and fails with a numerical error when
/// any check misses its tolerance.
pub fn cmd_verify(cfg: &RunConfig) -> Result<Vec<Check>> {
    let checks = run_checks(cfg, &analytic_gradient)?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_checks(&out.join("verify.csv"), &checks)?;
    cfg.write_resolved(&out.join("verify.config"))?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(Error::Numerical(format!("checks failed: {}", failed.join(", "))));
    }
    Ok(checks)
}
