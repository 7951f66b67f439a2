//! Overlap and surface-distance metrics, the rank-sum test and Dice gain curves.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{abs, normal_cdf, sqrt};
use crate::registration::RegistrationTrace;
use crate::volume::{BinaryMask, Dims};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dice {
    pub value: f64,
    /// Both masks were empty and the value was set to 1 by convention.
    pub both_empty: bool,
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(alloc::format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2 |A ∩ B| / (|A| + |B|)`.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<Dice> {
    check_dims(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(Dice { value: 1.0, both_empty: true });
    }
    Ok(Dice { value: 2.0 * inter as f64 / (na + nb) as f64, both_empty: false })
}

/// Mask voxels with at least one 6-neighbour outside the mask (or outside the grid).
pub fn boundary_voxels(m: &BinaryMask) -> Vec<usize> {
    let dims = m.dims();
    let d = dims.as_array();
    m.set_indices()
        .filter(|&i| {
            let c = dims.coords(i);
            (0..3).any(|a| {
                let mut lo = c;
                let mut hi = c;
                if c[a] == 0 || c[a] + 1 == d[a] {
                    return true;
                }
                lo[a] -= 1;
                hi[a] += 1;
                !m.get(lo[0], lo[1], lo[2]) || !m.get(hi[0], hi[1], hi[2])
            })
        })
        .collect()
}

/// One pass of the 1-D squared distance transform with voxel step `h` (mm).
fn edt_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let w = h * h;
    let mut k: isize = -1;
    for q in 0..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + w * (q * q) as f64) - (f[p] + w * (p * p) as f64)) / (2.0 * w * (q - p) as f64);
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for q in 0..n {
        while j < k as usize && z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        // `(dq * h)^2` rather than `w * dq^2` so distances round like a direct sum.
        let t = (q as f64 - p as f64) * h;
        out[q] = f[p] + t * t;
    }
}

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// voxel of `features`.
pub fn squared_distance_transform(dims: Dims, features: &[usize], spacing: [f64; 3]) -> Vec<f64> {
    let d = dims.as_array();
    let mut g = vec![f64::INFINITY; dims.len()];
    for &i in features {
        g[i] = 0.0;
    }
    let nmax = d.iter().copied().max().unwrap_or(1);
    let (mut line, mut out) = (vec![0.0; nmax], vec![0.0; nmax]);
    let (mut v, mut z) = (vec![0usize; nmax], vec![0.0; nmax + 1]);
    let strides = [1, d[0], d[0] * d[1]];
    for axis in 0..3 {
        let n = d[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..d[o2] {
            for a in 0..d[o1] {
                let base = a * strides[o1] + b * strides[o2];
                for q in 0..n {
                    line[q] = g[base + q * strides[axis]];
                }
                edt_1d(&line[..n], spacing[axis], &mut out[..n], &mut v[..n], &mut z[..n + 1]);
                for q in 0..n {
                    g[base + q * strides[axis]] = out[q];
                }
            }
        }
    }
    g
}

/// Symmetric Hausdorff distance between the 6-connected boundaries, in mm.
pub fn hausdorff_mm(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    check_dims(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyMask);
    }
    let ba = boundary_voxels(a);
    let bb = boundary_voxels(b);
    let directed = |from: &[usize], to: &[usize]| -> f64 {
        let dt = squared_distance_transform(a.dims(), to, spacing);
        from.iter().map(|&i| dt[i]).fold(0.0, f64::max)
    };
    Ok(sqrt(directed(&ba, &bb).max(directed(&bb, &ba))))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankSum {
    /// Mann-Whitney U of the first sample.
    pub u: f64,
    /// Normal deviate with tie and continuity corrections, reported for both
    /// methods.
    pub z: f64,
    pub p_value: f64,
    /// `p_value` comes from the exact permutation distribution.
    pub exact: bool,
    /// Every value in both samples was identical.
    pub all_tied: bool,
}

/// Largest per-sample size for which the exact distribution is enumerated.
pub const EXACT_RANKSUM_MAX: usize = 8;

/// Average ranks (1-based) of the pooled values.
fn pooled_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = avg;
        }
        tie_sizes.push(j - i);
        i = j;
    }
    (ranks, tie_sizes)
}

/// Two-sided p-value of rank sum `r1` over all ways of drawing `n1` of the
/// pooled ranks. Ranks are doubled so tied (half-integer) ranks stay integral.
fn exact_p(ranks: &[f64], n1: usize, r1: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r) as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // ways[k][s]: subsets of size k with doubled rank sum s.
    let mut ways = vec![vec![0u128; max_sum + 1]; n1 + 1];
    ways[0][0] = 1;
    for &r in &doubled {
        for k in (1..=n1).rev() {
            for s in (r..=max_sum).rev() {
                ways[k][s] += ways[k - 1][s - r];
            }
        }
    }
    let total: u128 = ways[n1].iter().sum();
    let mean2 = n1 as f64 * (ranks.len() + 1) as f64;
    let observed = abs(2.0 * r1 - mean2);
    let extreme: u128 = ways[n1]
        .iter()
        .enumerate()
        .filter(|&(s, _)| abs(s as f64 - mean2) >= observed - 1e-9)
        .map(|(_, &w)| w)
        .sum();
    (extreme as f64 / total as f64).min(1.0)
}

/// Two-sided Wilcoxon rank-sum test. Uses the exact permutation distribution
/// when both samples have at most [`EXACT_RANKSUM_MAX`] values, otherwise the
/// normal approximation with tie and continuity corrections.
pub fn ranksum_p(x: &[f64], y: &[f64]) -> Result<RankSum> {
    for s in [x, y] {
        if s.len() < 3 {
            return Err(Error::SampleTooSmall { required: 3, actual: s.len() });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("rank-sum samples must be finite".into()));
        }
    }
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = pooled_ranks(&pooled);
    let r1: f64 = ranks[..x.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let n = n1 + n2;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term);
    if !(var > 0.0) {
        return Ok(RankSum { u, z: 0.0, p_value: 1.0, exact: false, all_tied: true });
    }
    let dev = (abs(u - mean) - 0.5).max(0.0);
    let z = dev / sqrt(var);
    if x.len() <= EXACT_RANKSUM_MAX && y.len() <= EXACT_RANKSUM_MAX {
        return Ok(RankSum { u, z, p_value: exact_p(&ranks, x.len(), r1), exact: true, all_tied: false });
    }
    let p_value = (2.0 * (1.0 - normal_cdf(z))).min(1.0);
    Ok(RankSum { u, z, p_value, exact: false, all_tied: false })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (`n - 1`); 0 for a single value.
    pub sd: f64,
    pub n: usize,
}

pub fn mean_sd(values: &[f64]) -> MeanSd {
    let n = values.len();
    if n == 0 {
        return MeanSd { mean: f64::NAN, sd: f64::NAN, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
    } else {
        0.0
    };
    MeanSd { mean, sd, n }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainCurve {
    /// Mean of `dice_k - dice_0` across traces, one entry per iteration.
    pub mean_gain: Vec<f64>,
    /// `(initial, final)` Dice per trace.
    pub scatter: Vec<(f64, f64)>,
}

/// Shorter traces are held at their final Dice.
pub fn gain_curve(traces: &[RegistrationTrace]) -> Result<GainCurve> {
    let mut series = Vec::with_capacity(traces.len());
    for (i, t) in traces.iter().enumerate() {
        let d: Option<Vec<f64>> = t.rows.iter().map(|r| r.dice).collect();
        match d {
            Some(d) if !d.is_empty() => series.push(d),
            _ => return Err(Error::MissingDice(i)),
        }
    }
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    let mut mean_gain = vec![0.0; len];
    for s in &series {
        let d0 = s[0];
        let last = s[s.len() - 1];
        for k in 0..len {
            mean_gain[k] += s.get(k).copied().unwrap_or(last) - d0;
        }
    }
    if !series.is_empty() {
        mean_gain.iter_mut().for_each(|g| *g /= series.len() as f64);
    }
    let scatter = series.iter().map(|s| (s[0], s[s.len() - 1])).collect();
    Ok(GainCurve { mean_gain, scatter })
}

/// Outcome of one registration case.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub case: String,
    pub method: String,
    pub initial_dice: f64,
    pub final_dice: f64,
    pub initial_hd_mm: f64,
    pub final_hd_mm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub initial_dice: MeanSd,
    pub final_dice: MeanSd,
    pub initial_hd_mm: MeanSd,
    pub final_hd_mm: MeanSd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseTest {
    pub first: String,
    pub second: String,
    pub dice_p: f64,
    pub hd_p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    pub methods: Vec<MethodSummary>,
    pub tests: Vec<PairwiseTest>,
}

impl EvalReport {
    /// Aggregates per method (in first-seen order) and runs the rank-sum test on
    /// final Dice and final HD for every pair of methods with enough cases.
    pub fn build(cases: Vec<CaseMetrics>) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut by_method: BTreeMap<String, Vec<&CaseMetrics>> = BTreeMap::new();
        for c in &cases {
            if !by_method.contains_key(&c.method) {
                order.push(c.method.clone());
            }
            by_method.entry(c.method.clone()).or_default().push(c);
        }
        let column = |m: &str, f: fn(&CaseMetrics) -> f64| -> Vec<f64> {
            by_method[m].iter().map(|c| f(c)).collect()
        };
        let methods = order
            .iter()
            .map(|m| MethodSummary {
                method: m.clone(),
                initial_dice: mean_sd(&column(m, |c| c.initial_dice)),
                final_dice: mean_sd(&column(m, |c| c.final_dice)),
                initial_hd_mm: mean_sd(&column(m, |c| c.initial_hd_mm)),
                final_hd_mm: mean_sd(&column(m, |c| c.final_hd_mm)),
            })
            .collect();
        let mut tests = Vec::new();
        for i in 0..order.len() {
            for j in i + 1..order.len() {
                let (a, b) = (&order[i], &order[j]);
                let dice_p = ranksum_p(&column(a, |c| c.final_dice), &column(b, |c| c.final_dice));
                let hd_p = ranksum_p(&column(a, |c| c.final_hd_mm), &column(b, |c| c.final_hd_mm));
                if let (Ok(d), Ok(h)) = (dice_p, hd_p) {
                    tests.push(PairwiseTest {
                        first: a.clone(),
                        second: b.clone(),
                        dice_p: d.p_value,
                        hd_p: h.p_value,
                    });
                }
            }
        }
        Self { cases, methods, tests }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(dims: Dims, on: &[[usize; 3]]) -> BinaryMask {
        let mut bits = vec![false; dims.len()];
        for c in on {
            bits[dims.index(c[0], c[1], c[2])] = true;
        }
        BinaryMask::new(dims, bits).unwrap()
    }

    #[test]
    fn dice_cases() {
        let d = Dims::cube(4).unwrap();
        let a = mask_from(d, &[[0, 0, 0], [1, 0, 0]]);
        let b = mask_from(d, &[[1, 0, 0], [2, 0, 0]]);
        let far = mask_from(d, &[[3, 3, 3]]);
        assert_eq!(dice(&a, &a).unwrap().value, 1.0);
        assert_eq!(dice(&a, &far).unwrap().value, 0.0);
        assert_eq!(dice(&a, &b).unwrap().value, 0.5);
        let e = BinaryMask::empty(d);
        assert_eq!(dice(&e, &e).unwrap(), Dice { value: 1.0, both_empty: true });
        assert!(dice(&a, &BinaryMask::empty(Dims::cube(3).unwrap())).is_err());
    }

    #[test]
    fn hausdorff_single_voxels() {
        let d = Dims::new(6, 3, 3).unwrap();
        let a = mask_from(d, &[[1, 1, 1]]);
        let b = mask_from(d, &[[4, 1, 1]]);
        assert_eq!(hausdorff_mm(&a, &b, [2.0, 1.0, 1.0]).unwrap(), 6.0);
        assert_eq!(hausdorff_mm(&a, &a, [2.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(hausdorff_mm(&a, &BinaryMask::empty(d), [1.0; 3]), Err(Error::EmptyMask));
    }

    #[test]
    fn ranksum_identical_and_symmetric() {
        let x = [1.0, 5.0, 2.0, 8.0];
        let r = ranksum_p(&x, &x).unwrap();
        assert!((r.p_value - 1.0).abs() < 1e-9);
        let y = [3.0, 9.0, 10.0, 11.0, 4.0];
        assert_eq!(ranksum_p(&x, &y).unwrap().p_value, ranksum_p(&y, &x).unwrap().p_value);
        let tied = ranksum_p(&[2.0; 3], &[2.0; 4]).unwrap();
        assert!(tied.all_tied && tied.p_value == 1.0);
        assert!(ranksum_p(&[1.0, 2.0], &y).is_err());
    }

    #[test]
    fn mean_sd_basic() {
        let m = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.sd, 1.0);
    }
}
