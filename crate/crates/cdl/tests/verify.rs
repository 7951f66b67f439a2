use cdl::config::RunConfig;
use cdl::verify::*;
use cdl_core::network::{backward_parts, ForwardCache, NetworkParams, Objective};

/// The analytic gradient with the MMD term added instead of subtracted.
fn flipped_mmd(p: &NetworkParams, c: &ForwardCache, o: &Objective) -> cdl_core::Result<Vec<f64>> {
    let parts = backward_parts(p, c, o)?;
    let reg: Vec<f64> = parts.regularizer.iter().flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied().collect::<Vec<_>>()).collect();
    Ok(parts.mi.flat().iter().zip(parts.mmd.flat()).zip(reg).map(|((mi, mmd), r)| mi + o.alpha * mmd + r).collect())
}

#[test]
fn analytic_gradient_passes_and_a_flipped_mmd_fails() {
    assert!(network_gradient_error(0..20, &analytic_gradient).unwrap() < NETWORK_FD_TOL);
    assert!(network_gradient_error(0..20, &flipped_mmd).unwrap() > 1e-2);
}

#[test]
fn fresh_checkout_passes_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_pairs([("out".to_string(), dir.path().display().to_string())]).unwrap();
    let checks = cmd_verify(&cfg).unwrap();
    assert!(checks.iter().all(|c| c.pass), "{checks:?}");
    let csv = std::fs::read_to_string(dir.path().join("verify.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "check,measured,tolerance,pass");
    assert_eq!(lines.len(), checks.len() + 1);
    for (line, c) in lines[1..].iter().zip(&checks) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], c.name);
        assert_eq!(f[1].parse::<f64>().unwrap(), c.measured);
        assert_eq!(f[2].parse::<f64>().unwrap(), c.tolerance);
        assert_eq!(f[3], "true");
    }
}

#[test]
fn brute_force_oracles_agree_with_themselves_on_simple_cases() {
    assert_eq!(permutation_p(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0);
    assert_eq!(permutation_p(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]), 0.1);
    let d = cdl_core::volume::Dims::cube(5).unwrap();
    let a = cdl_core::volume::BinaryMask::from_fn(d, |c| c == [1, 1, 1]);
    let b = cdl_core::volume::BinaryMask::from_fn(d, |c| c == [4, 1, 1]);
    assert_eq!(brute_hausdorff(&a, &b, [2.0, 1.0, 1.0]), 6.0);
}
