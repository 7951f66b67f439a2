use cdl_core::evaluation::dice;
use cdl_core::registration::{register, MaskPolicy, MetricKind, RegistrationConfig};
use cdl_core::synthetic::*;
use cdl_core::transform::{AffineParams, TransformMode, RZ};
use cdl_core::volume::{BinaryMask, Dims};

fn spec(seed: u64) -> PhantomSpec {
    PhantomSpec::head(Dims::cube(20).unwrap(), [6.0; 3], seed)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn inversion_keeps_geometry_and_flips_contrast() {
    let s = spec(1);
    let c = s.grid().center_mm();
    let drift = DriftSpec { kind: DriftKind::Inversion(None), bias_field: None, noise_sigma: 0.0 };
    let pair = make_pair(&s, &drift, &AffineParams::identity(c), PairSeeds { phantom: 1, drift: 2 }).unwrap();
    assert_eq!(dice(&pair.target_mask, &pair.source_mask).unwrap().value, 1.0);
    let fg: Vec<usize> = pair.target_mask.set_indices().collect();
    let t: Vec<f64> = fg.iter().map(|&i| pair.target.data()[i]).collect();
    let v: Vec<f64> = fg.iter().map(|&i| pair.source.data()[i]).collect();
    assert!(pearson(&t, &v) < 0.0);
}

#[test]
fn rotation_perturbation_is_recoverable() {
    let s = spec(4);
    let c = s.grid().center_mm();
    let mut truth = AffineParams::identity(c);
    truth.mu[RZ] = 5f64.to_radians();
    let pair = make_pair(&s, &DriftSpec::identity(), &truth, PairSeeds { phantom: 4, drift: 5 }).unwrap();
    let g = pair.target.grid();
    let tinv = truth.matrix().inverse().unwrap();
    let spec = PhantomSpec { seed: 4, ..s };
    let probe = |m: &AffineParams| {
        let mm = m.matrix();
        let warped = BinaryMask::from_fn(g.dims, |v| spec.inside_mm(tinv.apply(mm.apply(g.voxel_to_mm(v)))));
        dice(&pair.target_mask, &warped).unwrap().value
    };
    let before = probe(&AffineParams::identity(c));
    assert!(before < 1.0);
    let mut cfg = RegistrationConfig { mode: TransformMode::Rigid, samples: 4000, ..RegistrationConfig::default() };
    cfg.optimizer.max_iters = 150;
    cfg.optimizer.step_unit_mm = 10.0;
    let metric = MetricKind::HistMi { bins: 32, mask: MaskPolicy::None };
    let r = register(&metric, &pair.target, &pair.source, &cfg, 3, None).unwrap();
    assert!(probe(&r.params) > before, "{} -> {}", before, probe(&r.params));
}

#[test]
fn presets_validate() {
    for name in ["identity", "t1-t2", "mr-ct"] {
        DriftSpec::preset(name).unwrap().validate().unwrap();
    }
    assert!(DriftSpec::preset("ct-pet").is_none());
    let bad = DriftSpec { kind: DriftKind::PiecewiseMonotone(vec![(0.0, 0.5), (1.0, 0.2)]), bias_field: None, noise_sigma: 0.0 };
    assert!(bad.validate().is_err());
}
