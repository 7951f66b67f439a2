use cdl_core::evaluation::*;
use cdl_core::registration::{RegistrationTrace, TraceRow};
use cdl_core::volume::{BinaryMask, Dims};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(dims: Dims, fill: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    BinaryMask::from_fn(dims, |_| rng.random_bool(fill))
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
                    for s in [-1isize, 1] {
                        let mut n = c;
                        n[a] = (c[a] as isize + s) as usize;
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

fn brute_hausdorff(a: &BinaryMask, b: &BinaryMask, s: [f64; 3]) -> f64 {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    let dist = |p: [usize; 3], q: [usize; 3]| -> f64 {
        (0..3).map(|k| ((p[k] as f64 - q[k] as f64) * s[k]).powi(2)).sum::<f64>()
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter().map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
    };
    directed(&ba, &bb).max(directed(&bb, &ba)).sqrt()
}

fn permutation_p(x: &[f64], y: &[f64]) -> f64 {
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

#[test]
fn dice_examples() {
    let d = Dims::cube(4).unwrap();
    let a = BinaryMask::from_fn(d, |c| c[0] < 2);
    let b = BinaryMask::from_fn(d, |c| c[0] >= 2);
    assert_eq!(dice(&a, &a).unwrap().value, 1.0);
    assert_eq!(dice(&a, &b).unwrap().value, 0.0);
    let e = dice(&BinaryMask::empty(d), &BinaryMask::empty(d)).unwrap();
    assert!(e.both_empty && e.value == 1.0);
}

#[test]
fn hausdorff_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..12 {
        let n = 4 + case % 13;
        let dims = Dims::new(n, 16 - case % 5, 3 + case).unwrap();
        let spacing = [1.0 + 0.25 * (case % 3) as f64, 0.8, 1.7];
        let a = random_mask(dims, 0.3, &mut rng);
        let b = random_mask(dims, 0.05 + 0.05 * (case % 4) as f64, &mut rng);
        if a.is_empty() || b.is_empty() {
            continue;
        }
        assert_eq!(hausdorff_mm(&a, &b, spacing).unwrap(), brute_hausdorff(&a, &b, spacing), "case {case}");
    }
}

#[test]
fn hausdorff_of_shifted_block() {
    let d = Dims::cube(10).unwrap();
    let a = BinaryMask::from_fn(d, |c| (2..6).contains(&c[0]) && (2..6).contains(&c[1]) && (2..6).contains(&c[2]));
    let b = BinaryMask::from_fn(d, |c| (5..9).contains(&c[0]) && (2..6).contains(&c[1]) && (2..6).contains(&c[2]));
    assert!((hausdorff_mm(&a, &b, [2.0, 1.0, 1.0]).unwrap() - 6.0).abs() < 1e-12);
    assert_eq!(hausdorff_mm(&a, &a, [1.0; 3]).unwrap(), 0.0);
    assert!(hausdorff_mm(&a, &BinaryMask::empty(d), [1.0; 3]).is_err());
}

#[test]
fn distance_transform_matches_brute_force() {
    let dims = Dims::new(7, 5, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let features: Vec<usize> = (0..dims.len()).filter(|_| rng.random_bool(0.08)).collect();
    let s = [1.3, 0.7, 2.1];
    let dt = squared_distance_transform(dims, &features, s);
    for i in 0..dims.len() {
        let p = dims.coords(i);
        let best = features
            .iter()
            .map(|&f| {
                let q = dims.coords(f);
                (0..3).map(|k| ((p[k] as f64 - q[k] as f64) * s[k]).powi(2)).sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        assert!((dt[i] - best).abs() < 1e-9);
    }
}

#[test]
fn ranksum_matches_permutation_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for n in 3..=5 {
        for _ in 0..40 {
            let x: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..6.0f64)).floor()).collect();
            let y: Vec<f64> = (0..n).map(|_| (rng.random_range(1.0..8.0f64)).floor()).collect();
            let r = ranksum_p(&x, &y).unwrap();
            if r.all_tied {
                continue;
            }
            worst = worst.max((r.p_value - permutation_p(&x, &y)).abs());
        }
    }
    assert!(worst < 0.02, "{worst}");
}

#[test]
fn ranksum_normal_approximation_near_exact() {
    let x: Vec<f64> = (0..10).map(|i| 0.85 + 0.01 * i as f64).collect();
    let y: Vec<f64> = (0..10).map(|i| 0.88 + 0.012 * i as f64).collect();
    let r = ranksum_p(&x, &y).unwrap();
    assert!(!r.exact);
    let exact = permutation_p(&x, &y);
    assert!((r.p_value - exact).abs() < 0.01, "{} vs {exact}", r.p_value);
    assert_eq!(ranksum_p(&x, &x).unwrap().p_value, 1.0);
}

fn trace(dice: &[f64]) -> RegistrationTrace {
    RegistrationTrace {
        rows: dice.iter().enumerate().map(|(k, &d)| TraceRow { k, cost: 0.0, step: 0.0, mu: [0.0; 12], dice: Some(d) }).collect(),
    }
}

#[test]
fn gain_curve_pads_short_traces() {
    let g = gain_curve(&[trace(&[0.5, 0.7, 0.9]), trace(&[0.6, 0.8])]).unwrap();
    assert_eq!(g.scatter, vec![(0.5, 0.9), (0.6, 0.8)]);
    let want = [0.0, 0.2, 0.3];
    for (a, b) in g.mean_gain.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut missing = trace(&[0.5]);
    missing.rows[0].dice = None;
    assert!(gain_curve(&[missing]).is_err());
}

#[test]
fn report_aggregates_match_recompute() {
    let mut cases = Vec::new();
    for i in 0..10 {
        for (m, off) in [("cdl", 0.02), ("mi", 0.0)] {
            cases.push(CaseMetrics {
                case: format!("pair{i}"),
                method: m.into(),
                initial_dice: 0.8 + 0.01 * i as f64,
                final_dice: 0.9 + off + 0.003 * i as f64,
                initial_hd_mm: 10.0 - i as f64 * 0.1,
                final_hd_mm: 3.0 - off * 10.0 + 0.05 * i as f64,
            });
        }
    }
    let report = EvalReport::build(cases.clone());
    for s in &report.methods {
        let rows: Vec<&CaseMetrics> = cases.iter().filter(|c| c.method == s.method).collect();
        let mean = rows.iter().map(|c| c.final_dice).sum::<f64>() / rows.len() as f64;
        let var = rows.iter().map(|c| (c.final_dice - mean).powi(2)).sum::<f64>() / (rows.len() - 1) as f64;
        assert!((s.final_dice.mean - mean).abs() < 1e-12);
        assert!((s.final_dice.sd - var.sqrt()).abs() < 1e-12);
        assert_eq!(s.final_dice.n, 10);
    }
    assert_eq!(report.tests.len(), 1);
    assert!(report.tests[0].dice_p < 0.05);
}
