use cdl_core::matrix::Matrix;
use cdl_core::network::*;
use cdl_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(0.0..1.0))
}

/// Source rows are a noisy monotone remap of the target rows.
fn correlated_batch(n: usize, d: usize, seed: u64) -> FeatureBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = random_matrix(n, d, &mut rng);
    let s = Matrix::from_fn(n, d, |i, j| {
        let x = t.get(i, j);
        1.0 - x * x + 0.05 * rng.random_range(-1.0..1.0)
    });
    FeatureBatch::new(s, t).unwrap()
}

fn random_batch(n: usize, d: usize, seed: u64) -> FeatureBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = random_matrix(n, d, &mut rng);
    let t = random_matrix(n, d, &mut rng);
    FeatureBatch::new(s, t).unwrap()
}

fn naive_forward(params: &NetworkParams, x: &Matrix) -> Vec<Vec<Vec<f64>>> {
    let act = params.activation();
    let mut out = Vec::new();
    for i in 0..x.rows() {
        let mut h: Vec<f64> = x.row(i).to_vec();
        let mut per_layer = vec![h.clone()];
        for l in params.layers() {
            let mut next = Vec::new();
            for r in 0..l.outputs() {
                let mut z = l.bias[r];
                for c in 0..l.inputs() {
                    z += l.weights.get(r, c) * h[c];
                }
                next.push(act.apply(z));
            }
            h = next;
            per_layer.push(h.clone());
        }
        out.push(per_layer);
    }
    out
}

fn two_pass_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn column_centered(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::new();
    let means: Vec<f64> = (0..m.cols()).map(|j| (0..m.rows()).map(|i| m.get(i, j)).sum::<f64>() / m.rows() as f64).collect();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out.push(m.get(i, j) - means[j]);
        }
    }
    out
}

fn loop_mmd(t: &Matrix, s: &Matrix) -> f64 {
    let mut total = 0.0;
    for j in 0..t.cols() {
        let mut mt = 0.0;
        let mut ms = 0.0;
        for i in 0..t.rows() {
            mt += t.get(i, j);
            ms += s.get(i, j);
        }
        let d = (mt - ms) / t.rows() as f64;
        total += d * d;
    }
    total
}

fn loop_norm(params: &NetworkParams) -> f64 {
    let mut acc = 0.0;
    for l in params.layers() {
        for r in 0..l.outputs() {
            for c in 0..l.inputs() {
                acc += l.weights.get(r, c).powi(2);
            }
            acc += l.bias[r].powi(2);
        }
    }
    acc
}

fn cost_at(params: &NetworkParams, batch: &FeatureBatch, obj: &Objective) -> f64 {
    cost(params, &forward(params, batch).unwrap(), obj).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn zero_network_outputs_activation_at_zero() {
    let batch = random_batch(5, 3, 1);
    for (act, want) in [(Activation::Sigmoid, 0.5), (Activation::Tanh, 0.0)] {
        let mut p = NetworkParams::init(&[3, 4, 2], act, None, 0).unwrap();
        for k in 0..p.parameter_count() {
            p.set_param(k, 0.0);
        }
        let c = forward(&p, &batch).unwrap();
        for m in 1..=2 {
            assert!(c.target.post[m].as_slice().iter().chain(c.source.post[m].as_slice()).all(|&v| v == want));
        }
    }
}

#[test]
fn forward_matches_naive_loops() {
    for seed in 0..5 {
        let act = if seed % 2 == 0 { Activation::Sigmoid } else { Activation::Tanh };
        let p = NetworkParams::init(&[3, 5, 4, 2], act, Some(1.5), seed).unwrap();
        let batch = random_batch(17, 3, 100 + seed);
        let cache = forward(&p, &batch).unwrap();
        for (branch, input) in [(&cache.target, batch.target()), (&cache.source, batch.source())] {
            let oracle = naive_forward(&p, input);
            for (i, layers) in oracle.iter().enumerate() {
                for (m, h) in layers.iter().enumerate() {
                    for (j, v) in h.iter().enumerate() {
                        assert!((branch.post[m].get(i, j) - v).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn forward_rejects_wrong_width() {
    let p = NetworkParams::init(&[3, 4, 3], Activation::Sigmoid, None, 0).unwrap();
    assert!(matches!(forward(&p, &random_batch(4, 2, 0)), Err(Error::DimMismatch(_))));
}

#[test]
fn mutual_information_matches_two_pass_oracle() {
    for seed in 0..10 {
        let p = NetworkParams::init(&[3, 4, 3], Activation::Sigmoid, Some(2.0), seed).unwrap();
        let batch = correlated_batch(40, 3, seed);
        let c = forward(&p, &batch).unwrap();
        let (t, s) = (c.target.top(), c.source.top());
        let pearson = -0.5 * (1.0 - two_pass_pearson(t.as_slice(), s.as_slice()));
        assert!((mutual_information(&c, 2, MiForm::Pearson).unwrap() - pearson).abs() < 1e-12);
        let centered = -0.5 * (1.0 - two_pass_pearson(&column_centered(t), &column_centered(s)));
        assert!((mutual_information(&c, 2, MiForm::UnitCentered).unwrap() - centered).abs() < 1e-12);
    }
}

#[test]
fn mutual_information_extremes() {
    let t = Matrix::from_fn(6, 2, |i, j| (i * 2 + j) as f64 * 0.1);
    let same = ForwardCache::from_branches(
        BranchCache { post: vec![t.clone()], pre: vec![] },
        BranchCache { post: vec![t.clone()], pre: vec![] },
    );
    let anti = Matrix::from_fn(6, 2, |i, j| 1.1 - t.get(i, j));
    let opposite = ForwardCache::from_branches(
        BranchCache { post: vec![t.clone()], pre: vec![] },
        BranchCache { post: vec![anti], pre: vec![] },
    );
    for form in [MiForm::Pearson, MiForm::UnitCentered] {
        assert!(mutual_information(&same, 0, form).unwrap().abs() < 1e-12);
        assert!((mutual_information(&opposite, 0, form).unwrap() + 1.0).abs() < 1e-12);
    }
    let flat = Matrix::from_fn(6, 2, |_, _| 0.3);
    let degenerate = ForwardCache::from_branches(
        BranchCache { post: vec![t], pre: vec![] },
        BranchCache { post: vec![flat], pre: vec![] },
    );
    for form in [MiForm::Pearson, MiForm::UnitCentered, MiForm::Literal] {
        assert!(matches!(mutual_information(&degenerate, 0, form), Err(Error::DegenerateBatch { .. })));
    }
}

#[test]
fn mmd_matches_loop_oracle() {
    let pair = Matrix::from_vec(2, 1, vec![2.0, 2.0]).unwrap();
    let zero = Matrix::zeros(2, 1);
    let c = ForwardCache::from_branches(
        BranchCache { post: vec![pair], pre: vec![] },
        BranchCache { post: vec![zero], pre: vec![] },
    );
    assert_eq!(mmd(&c, 0), 4.0);
    for seed in 0..10 {
        let p = NetworkParams::init(&[3, 4, 3], Activation::Tanh, Some(1.0), seed).unwrap();
        let c = forward(&p, &random_batch(30, 3, seed)).unwrap();
        for m in 0..=2 {
            assert!((mmd(&c, m) - loop_mmd(&c.target.post[m], &c.source.post[m])).abs() < 1e-12);
        }
    }
}

#[test]
fn cost_composes_terms() {
    for seed in 0..10 {
        let p = NetworkParams::init(&[3, 4, 3], Activation::Sigmoid, Some(1.0), seed).unwrap();
        let batch = correlated_batch(25, 3, seed);
        let c = forward(&p, &batch).unwrap();
        for form in [MiForm::Pearson, MiForm::UnitCentered] {
            let obj = Objective { alpha: 0.1, beta: 10.0, mi_form: form };
            let (t, s) = (c.target.top(), c.source.top());
            let r = match form {
                MiForm::Pearson => two_pass_pearson(t.as_slice(), s.as_slice()),
                _ => two_pass_pearson(&column_centered(t), &column_centered(s)),
            };
            let oracle = -0.5 * (1.0 - r) - 0.1 * loop_mmd(t, s) - 10.0 * loop_norm(&p);
            assert!((cost(&p, &c, &obj).unwrap() - oracle).abs() < 1e-10);
        }
    }
}

#[test]
fn regularizer_only_gradient_is_exact() {
    let p = NetworkParams::init(&[3, 4, 3], Activation::Sigmoid, Some(1.0), 4).unwrap();
    let c = forward(&p, &random_batch(20, 3, 4)).unwrap();
    let obj = Objective { alpha: 0.0, beta: 10.0, mi_form: MiForm::Pearson };
    let parts = backward_parts(&p, &c, &obj).unwrap();
    for (l, g) in p.layers().iter().zip(&parts.regularizer) {
        for (w, d) in l.weights.as_slice().iter().zip(g.weights.as_slice()) {
            assert_eq!(*d, -20.0 * w);
        }
    }
    let twin = FeatureBatch::new(random_batch(20, 3, 5).target().clone(), random_batch(20, 3, 5).target().clone()).unwrap();
    let ct = forward(&p, &twin).unwrap();
    let parts = backward_parts(&p, &ct, &obj).unwrap();
    assert!(parts.mmd.flat().iter().all(|&v| v == 0.0));
}

#[test]
fn gradients_match_central_differences() {
    let forms = [MiForm::Pearson, MiForm::UnitCentered, MiForm::Literal];
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let act = if seed % 2 == 0 { Activation::Sigmoid } else { Activation::Tanh };
        let form = forms[seed as usize % forms.len()];
        let p = NetworkParams::init(&[3, 4, 3], act, Some(1.5), seed).unwrap();
        let batch = correlated_batch(30, 3, 1000 + seed);
        let obj = Objective { alpha: 0.7, beta: 0.05, mi_form: form };
        let g = backward(&p, &forward(&p, &batch).unwrap(), &obj).unwrap().flat();
        assert_eq!(g.len(), p.parameter_count());
        let h = 1e-5;
        for k in 0..p.parameter_count() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus.set_param(k, p.param(k) + h);
            minus.set_param(k, p.param(k) - h);
            let fd = (cost_at(&plus, &batch, &obj) - cost_at(&minus, &batch, &obj)) / (2.0 * h);
            let e = rel_err(g[k], fd);
            worst = worst.max(e);
            assert!(e < 1e-4, "seed {seed} param {k}: analytic {} fd {fd}", g[k]);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn training_stop_rules() {
    let batch = correlated_batch(50, 3, 9);
    let cfg = TrainConfig { eps: 1e300, ..TrainConfig::default() };
    let out = train(&batch, &[3, 4, 3], Activation::Sigmoid, &cfg).unwrap();
    assert_eq!(out.history.len(), 1);
    assert!(out.converged);
    let cfg = TrainConfig { eps: 0.0, max_iters: 5, ..TrainConfig::default() };
    let out = train(&batch, &[3, 4, 3], Activation::Sigmoid, &cfg).unwrap();
    assert_eq!(out.history.len(), 5);
    assert!(!out.converged);
}

#[test]
fn training_improves_and_is_deterministic() {
    let batch = correlated_batch(200, 3, 11);
    let cfg = TrainConfig { beta: 0.01, max_iters: 300, decay: 0.995, seed: 3, ..TrainConfig::default() };
    let a = train(&batch, &[3, 8, 4], Activation::Sigmoid, &cfg).unwrap();
    let b = train(&batch, &[3, 8, 4], Activation::Sigmoid, &cfg).unwrap();
    assert!(*a.history.last().unwrap() > a.initial_cost);
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
}

#[test]
fn quadratic_only_ascent_shrinks_weights() {
    // MI frozen: only the regularizer gradient is applied. Each step scales the
    // parameters by 1 - 2 beta lr, a contraction while 2 beta lr < 1.
    let batch = random_batch(20, 3, 2);
    let mut p = NetworkParams::init(&[3, 4, 3], Activation::Sigmoid, Some(1.0), 2).unwrap();
    let obj = Objective { alpha: 0.0, beta: 2.0, mi_form: MiForm::Pearson };
    let mut lr = 0.2;
    let mut last = p.squared_norm();
    for _ in 0..50 {
        let parts = backward_parts(&p, &forward(&p, &batch).unwrap(), &obj).unwrap();
        ascend(&mut p, &parts.regularizer, lr);
        lr *= 0.95;
        let now = p.squared_norm();
        assert!(now < last);
        last = now;
    }
}
