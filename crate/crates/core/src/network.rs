//! The communal-domain network.
//!
//! One fully connected network is applied to both the source and the target
//! features. Training maximises
//!
//! ```text
//! C = I(h_t, h_s) - alpha * D(h_t, h_s) - beta * sum_m (|W_m|_F^2 + |b_m|^2)
//! ```
//!
//! at the top layer, where `I = -(1 - r) / 2` with `r` the correlation of the
//! two branches' activations (pooled over samples and units) and `D` the squared
//! distance between the branch means. All derivatives are exact for this cost,
//! including the dependence of the standard deviations on the parameters.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::math::{exp, sqrt, tanh};
use crate::matrix::Matrix;
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + exp(-z)),
            Activation::Tanh => tanh(z),
        }
    }

    /// Derivative expressed through the activation value `h = apply(z)`.
    #[inline]
    pub fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Sigmoid => h * (1.0 - h),
            Activation::Tanh => 1.0 - h * h,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sigmoid" => Some(Activation::Sigmoid),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Correlation estimator used for the information term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MiForm {
    /// Pearson correlation of the pooled activations.
    Pearson,
    /// The uncentred variant `(sum h_t h_s / n + mean_t mean_s) / (sd_t sd_s)`,
    /// kept for comparison only. It is not bounded to `[-1, 1]`.
    Literal,
    /// Pearson correlation of the pooled activations after subtracting each
    /// unit's own mean, so constant per-unit offsets carry no correlation.
    #[default]
    UnitCentered,
}

impl MiForm {
    pub fn name(self) -> &'static str {
        match self {
            MiForm::Pearson => "pearson",
            MiForm::Literal => "literal",
            MiForm::UnitCentered => "unit-centered",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pearson" => Some(MiForm::Pearson),
            "literal" => Some(MiForm::Literal),
            "unit-centered" => Some(MiForm::UnitCentered),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `p_m x p_{m-1}`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    layers: Vec<Layer>,
    activation: Activation,
}

impl NetworkParams {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        for (m, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::DimMismatch(format!(
                    "layer {}: bias has {} entries for {} units",
                    m + 1,
                    l.bias.len(),
                    l.outputs()
                )));
            }
            if m > 0 && l.inputs() != layers[m - 1].outputs() {
                return Err(Error::DimMismatch(format!(
                    "layer {} expects {} inputs but layer {} has {} units",
                    m + 1,
                    l.inputs(),
                    m,
                    layers[m - 1].outputs()
                )));
            }
            if l.inputs() == 0 || l.outputs() == 0 {
                return Err(Error::DimMismatch(format!("layer {} has a zero dimension", m + 1)));
            }
            if !l.weights.is_finite() || !l.bias.iter().all(|b| b.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: m + 1 });
            }
        }
        Ok(Self { layers, activation })
    }

    /// Uniform initialisation in `[-s, s]` per weight with `s = init_scale` or
    /// `1 / sqrt(fan_in)`; biases start at zero.
    pub fn init(arch: &[usize], activation: Activation, init_scale: Option<f64>, seed: u64) -> Result<Self> {
        if arch.len() < 2 || arch.contains(&0) {
            return Err(Error::InvalidParameter(format!("invalid architecture {arch:?}")));
        }
        let mut rng = rng::seeded(seed, rng::streams::INIT);
        let layers = arch
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = init_scale.unwrap_or(1.0 / sqrt(fan_in as f64));
                let weights = Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-s..=s));
                Layer { weights, bias: vec![0.0; fan_out] }
            })
            .collect();
        Self::new(layers, activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// `[p0, p1, ..., pM]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Layer::outputs));
        d
    }

    /// `sum_m |W_m|_F^2 + |b_m|^2`.
    pub fn squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.squared_norm() + l.bias.iter().map(|b| b * b).sum::<f64>())
            .sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    /// Reads parameter `k` in flat order (each layer's weights row-major, then its bias).
    pub fn param(&self, mut k: usize) -> f64 {
        for l in &self.layers {
            let nw = l.weights.as_slice().len();
            if k < nw {
                return l.weights.as_slice()[k];
            }
            k -= nw;
            if k < l.bias.len() {
                return l.bias[k];
            }
            k -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_param(&mut self, mut k: usize, v: f64) {
        for l in &mut self.layers {
            let nw = l.weights.as_slice().len();
            if k < nw {
                l.weights.as_mut_slice()[k] = v;
                return;
            }
            k -= nw;
            if k < l.bias.len() {
                l.bias[k] = v;
                return;
            }
            k -= l.bias.len();
        }
        panic!("parameter index out of range")
    }
}

/// Paired source/target feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    source: Matrix,
    target: Matrix,
}

impl FeatureBatch {
    pub fn new(source: Matrix, target: Matrix) -> Result<Self> {
        if source.shape() != target.shape() {
            return Err(Error::DimMismatch(format!(
                "source {:?} vs target {:?}",
                source.shape(),
                target.shape()
            )));
        }
        if let Some(index) = source.as_slice().iter().chain(target.as_slice()).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { source, target })
    }

    pub fn source(&self) -> &Matrix {
        &self.source
    }

    pub fn target(&self) -> &Matrix {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.source.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.source.cols()
    }
}

/// Activations of one branch. `post[0]` is the input; `post[m]` is layer `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchCache {
    pub post: Vec<Matrix>,
    pub pre: Vec<Matrix>,
}

impl BranchCache {
    pub fn top(&self) -> &Matrix {
        &self.post[self.post.len() - 1]
    }
}

/// Pooled moments of a layer's activations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerStats {
    pub mean_t: f64,
    pub mean_s: f64,
    pub sd_t: f64,
    pub sd_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    pub target: BranchCache,
    pub source: BranchCache,
    /// Indexed by layer; entry 0 describes the inputs.
    pub stats: Vec<LayerStats>,
}

impl ForwardCache {
    pub fn from_branches(target: BranchCache, source: BranchCache) -> Self {
        let stats = target
            .post
            .iter()
            .zip(&source.post)
            .map(|(t, s)| {
                let (mean_t, sd_t) = pooled_moments(t.as_slice());
                let (mean_s, sd_s) = pooled_moments(s.as_slice());
                LayerStats { mean_t, mean_s, sd_t, sd_s }
            })
            .collect();
        Self { target, source, stats }
    }

    pub fn depth(&self) -> usize {
        self.target.post.len() - 1
    }
}

/// Mean and population standard deviation, two-pass.
pub fn pooled_moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, sqrt(var))
}

/// Runs one branch of the network on `input` (`N x d`).
pub fn forward_branch(params: &NetworkParams, input: &Matrix) -> Result<BranchCache> {
    if input.cols() != params.input_dim() {
        return Err(Error::DimMismatch(format!(
            "batch has {} features, network expects {}",
            input.cols(),
            params.input_dim()
        )));
    }
    let act = params.activation();
    let n = input.rows();
    let mut post = Vec::with_capacity(params.depth() + 1);
    let mut pre = Vec::with_capacity(params.depth());
    post.push(input.clone());
    for (m, layer) in params.layers().iter().enumerate() {
        let prev = &post[m];
        let mut z = Matrix::zeros(n, layer.outputs());
        let mut h = Matrix::zeros(n, layer.outputs());
        for i in 0..n {
            let x = prev.row(i);
            for j in 0..layer.outputs() {
                let w = layer.weights.row(j);
                let mut acc = layer.bias[j];
                for k in 0..x.len() {
                    acc += w[k] * x[k];
                }
                z.set(i, j, acc);
                h.set(i, j, act.apply(acc));
            }
        }
        if !h.is_finite() || !z.is_finite() {
            return Err(Error::NonFiniteLayer { layer: m + 1 });
        }
        pre.push(z);
        post.push(h);
    }
    Ok(BranchCache { post, pre })
}

pub fn forward(params: &NetworkParams, batch: &FeatureBatch) -> Result<ForwardCache> {
    let target = forward_branch(params, batch.target())?;
    let source = forward_branch(params, batch.source())?;
    Ok(ForwardCache::from_branches(target, source))
}

/// Weights of the three cost terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub alpha: f64,
    pub beta: f64,
    pub mi_form: MiForm,
}

impl Default for Objective {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 10.0, mi_form: MiForm::UnitCentered }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mi_form: MiForm,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every update.
    pub decay: f64,
    pub eps: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// `None` picks `1 / sqrt(fan_in)` per layer.
    pub init_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 10.0,
            mi_form: MiForm::UnitCentered,
            learning_rate: 0.2,
            decay: 0.95,
            eps: 1e-10,
            max_iters: 500,
            seed: 0,
            init_scale: None,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> Objective {
        Objective { alpha: self.alpha, beta: self.beta, mi_form: self.mi_form }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("train config: {what}")));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and non-negative");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if !(self.eps >= 0.0) {
            return bad("eps must be non-negative");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if let Some(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad("init_scale must be positive");
            }
        }
        Ok(())
    }
}

fn check_layer(cache: &ForwardCache, layer: usize) -> Result<LayerStats> {
    cache
        .stats
        .get(layer)
        .copied()
        .ok_or_else(|| Error::InvalidParameter(format!("layer {layer} exceeds depth {}", cache.depth())))
}

fn check_spread(st: &LayerStats, layer: usize) -> Result<()> {
    let tiny = |sd: f64, mean: f64| !(sd > 1e-12 * (1.0 + mean.abs()));
    if tiny(st.sd_t, st.mean_t) {
        return Err(Error::DegenerateBatch { layer, branch: "target" });
    }
    if tiny(st.sd_s, st.mean_s) {
        return Err(Error::DegenerateBatch { layer, branch: "source" });
    }
    Ok(())
}

/// Correlation between the pooled activations of the two branches at `layer`,
/// in the chosen form.
pub fn correlation(cache: &ForwardCache, layer: usize, form: MiForm) -> Result<f64> {
    let st = check_layer(cache, layer)?;
    if form == MiForm::UnitCentered {
        let u = unit_centered(cache, layer)?;
        let cov: f64 = u.a.iter().zip(&u.b).map(|(x, y)| x * y).sum::<f64>() / u.a.len() as f64;
        return Ok(cov / (u.sd_a * u.sd_b));
    }
    check_spread(&st, layer)?;
    let a = cache.target.post[layer].as_slice();
    let b = cache.source.post[layer].as_slice();
    let n = a.len() as f64;
    let r = match form {
        MiForm::Pearson => {
            let cov: f64 =
                a.iter().zip(b).map(|(x, y)| (x - st.mean_t) * (y - st.mean_s)).sum::<f64>() / n;
            cov / (st.sd_t * st.sd_s)
        }
        MiForm::Literal => {
            let cross: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n;
            (cross + st.mean_t * st.mean_s) / (st.sd_t * st.sd_s)
        }
        MiForm::UnitCentered => unreachable!(),
    };
    Ok(r)
}

/// Activations of both branches with each unit's mean removed, and the pooled
/// standard deviations of the result.
struct UnitCentered {
    a: Vec<f64>,
    b: Vec<f64>,
    sd_a: f64,
    sd_b: f64,
}

fn unit_centered(cache: &ForwardCache, layer: usize) -> Result<UnitCentered> {
    let center = |m: &Matrix| -> (Vec<f64>, f64) {
        let (rows, cols) = m.shape();
        let mut means = vec![0.0; cols];
        for i in 0..rows {
            for (acc, v) in means.iter_mut().zip(m.row(i)) {
                *acc += v;
            }
        }
        means.iter_mut().for_each(|v| *v /= rows as f64);
        let out: Vec<f64> = m.as_slice().iter().enumerate().map(|(k, v)| v - means[k % cols]).collect();
        let sd = sqrt(out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64);
        (out, sd)
    };
    let (a, sd_a) = center(&cache.target.post[layer]);
    let (b, sd_b) = center(&cache.source.post[layer]);
    let st = check_layer(cache, layer)?;
    if !(sd_a > 1e-12 * (1.0 + st.mean_t.abs())) {
        return Err(Error::DegenerateBatch { layer, branch: "target" });
    }
    if !(sd_b > 1e-12 * (1.0 + st.mean_s.abs())) {
        return Err(Error::DegenerateBatch { layer, branch: "source" });
    }
    Ok(UnitCentered { a, b, sd_a, sd_b })
}

/// `-(1 - r) / 2`.
pub fn mutual_information(cache: &ForwardCache, layer: usize, form: MiForm) -> Result<f64> {
    Ok(-0.5 * (1.0 - correlation(cache, layer, form)?))
}

/// Squared norm of the mean difference between the target and source activations.
pub fn mmd(cache: &ForwardCache, layer: usize) -> f64 {
    let t = &cache.target.post[layer];
    let s = &cache.source.post[layer];
    let n = t.rows() as f64;
    let mut total = 0.0;
    for j in 0..t.cols() {
        let mut d = 0.0;
        for i in 0..t.rows() {
            d += t.get(i, j) - s.get(i, j);
        }
        let d = d / n;
        total += d * d;
    }
    total
}

/// The three terms of the cost at the top layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostTerms {
    pub mi: f64,
    pub mmd: f64,
    pub squared_norm: f64,
}

impl CostTerms {
    pub fn total(&self, obj: &Objective) -> f64 {
        self.mi - obj.alpha * self.mmd - obj.beta * self.squared_norm
    }
}

pub fn cost_terms(params: &NetworkParams, cache: &ForwardCache, obj: &Objective) -> Result<CostTerms> {
    let top = cache.depth();
    Ok(CostTerms {
        mi: mutual_information(cache, top, obj.mi_form)?,
        mmd: mmd(cache, top),
        squared_norm: params.squared_norm(),
    })
}

pub fn cost(params: &NetworkParams, cache: &ForwardCache, obj: &Objective) -> Result<f64> {
    Ok(cost_terms(params, cache, obj)?.total(obj))
}

/// Derivatives of the information term with respect to the top-layer
/// activations of each branch, `(dI/dh_t, dI/dh_s)`.
pub fn mi_seeds(cache: &ForwardCache, form: MiForm) -> Result<(Matrix, Matrix)> {
    let layer = cache.depth();
    let st = check_layer(cache, layer)?;
    if form == MiForm::UnitCentered {
        let u = unit_centered(cache, layer)?;
        let n = u.a.len() as f64;
        let r = u.a.iter().zip(&u.b).map(|(x, y)| x * y).sum::<f64>() / n / (u.sd_a * u.sd_b);
        let (rows, cols) = cache.target.top().shape();
        let (sa, sb) = (u.sd_a, u.sd_b);
        let gt = Matrix::from_fn(rows, cols, |i, j| {
            let k = i * cols + j;
            0.5 * (u.b[k] / (sa * sb) - r * u.a[k] / (sa * sa)) / n
        });
        let gs = Matrix::from_fn(rows, cols, |i, j| {
            let k = i * cols + j;
            0.5 * (u.a[k] / (sa * sb) - r * u.b[k] / (sb * sb)) / n
        });
        return Ok((gt, gs));
    }
    check_spread(&st, layer)?;
    let r = correlation(cache, layer, form)?;
    let t = cache.target.top();
    let s = cache.source.top();
    let n = t.as_slice().len() as f64;
    let (sa, sb) = (st.sd_t, st.sd_s);
    let (ma, mb) = (st.mean_t, st.mean_s);
    let mut gt = Matrix::zeros(t.rows(), t.cols());
    let mut gs = Matrix::zeros(t.rows(), t.cols());
    let half = 0.5;
    for (k, (&a, &b)) in t.as_slice().iter().zip(s.as_slice()).enumerate() {
        let (da, db) = match form {
            MiForm::Pearson => (
                ((b - mb) / (sa * sb) - r * (a - ma) / (sa * sa)) / n,
                ((a - ma) / (sa * sb) - r * (b - mb) / (sb * sb)) / n,
            ),
            MiForm::Literal => (
                ((b + mb) / (sa * sb) - r * (a - ma) / (sa * sa)) / n,
                ((a + ma) / (sa * sb) - r * (b - mb) / (sb * sb)) / n,
            ),
            MiForm::UnitCentered => unreachable!(),
        };
        gt.as_mut_slice()[k] = half * da;
        gs.as_mut_slice()[k] = half * db;
    }
    Ok((gt, gs))
}

/// Derivatives of the mean discrepancy with respect to the top-layer
/// activations, `(dD/dh_t, dD/dh_s)`.
pub fn mmd_seeds(cache: &ForwardCache) -> (Matrix, Matrix) {
    let t = cache.target.top();
    let s = cache.source.top();
    let n = t.rows() as f64;
    let mut diff = vec![0.0; t.cols()];
    for i in 0..t.rows() {
        for j in 0..t.cols() {
            diff[j] += t.get(i, j) - s.get(i, j);
        }
    }
    diff.iter_mut().for_each(|d| *d /= n);
    let gt = Matrix::from_fn(t.rows(), t.cols(), |_, j| 2.0 * diff[j] / n);
    let gs = Matrix::from_fn(t.rows(), t.cols(), |_, j| -2.0 * diff[j] / n);
    (gt, gs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(l: &Layer) -> Self {
        Self { weights: Matrix::zeros(l.outputs(), l.inputs()), bias: vec![0.0; l.outputs()] }
    }

    fn add_scaled(&mut self, other: &LayerGrad, scale: f64) {
        for (a, b) in self.weights.as_mut_slice().iter_mut().zip(other.weights.as_slice()) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }
}

/// Backpropagation result for one branch.
#[derive(Clone, Debug)]
pub struct BranchGrad {
    pub layers: Vec<LayerGrad>,
    /// `L_m = dC/dz_m` per layer (index `m - 1`).
    pub deltas: Vec<Matrix>,
    /// `dC/dx` when requested.
    pub input: Option<Matrix>,
}

/// Propagates `seed = dC/dh_M` down one branch.
pub fn backprop_branch(
    params: &NetworkParams,
    branch: &BranchCache,
    seed: &Matrix,
    want_input: bool,
) -> BranchGrad {
    let act = params.activation();
    let depth = params.depth();
    let n = seed.rows();
    let mut layers: Vec<LayerGrad> = params.layers().iter().map(LayerGrad::zeros_like).collect();
    let mut deltas: Vec<Matrix> = Vec::with_capacity(depth);
    let mut upstream = seed.clone();
    let mut input = None;
    for m in (0..depth).rev() {
        let layer = &params.layers()[m];
        let h = &branch.post[m + 1];
        let mut delta = upstream;
        for (d, &hv) in delta.as_mut_slice().iter_mut().zip(h.as_slice()) {
            *d *= act.derivative_from_output(hv);
        }
        let prev = &branch.post[m];
        let g = &mut layers[m];
        for i in 0..n {
            let di = delta.row(i);
            let xi = prev.row(i);
            for j in 0..layer.outputs() {
                let dij = di[j];
                g.bias[j] += dij;
                let row = g.weights.row_mut(j);
                for k in 0..xi.len() {
                    row[k] += dij * xi[k];
                }
            }
        }
        if m > 0 || want_input {
            let mut next = Matrix::zeros(n, layer.inputs());
            for i in 0..n {
                let di = delta.row(i);
                let out = next.row_mut(i);
                for j in 0..layer.outputs() {
                    let w = layer.weights.row(j);
                    for k in 0..out.len() {
                        out[k] += w[k] * di[j];
                    }
                }
            }
            if m == 0 {
                input = Some(next.clone());
            }
            upstream = next;
        } else {
            upstream = Matrix::zeros(0, 0);
        }
        deltas.push(delta);
    }
    deltas.reverse();
    BranchGrad { layers, deltas, input }
}

/// Gradient of a cost with respect to every parameter.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub l_t: Vec<Matrix>,
    pub l_s: Vec<Matrix>,
}

impl Gradients {
    /// Flat view in the same order as [`NetworkParams::param`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

fn combine(params: &NetworkParams, cache: &ForwardCache, gt: &Matrix, gs: &Matrix) -> Gradients {
    let bt = backprop_branch(params, &cache.target, gt, false);
    let bs = backprop_branch(params, &cache.source, gs, false);
    let mut layers = bt.layers;
    for (a, b) in layers.iter_mut().zip(&bs.layers) {
        a.add_scaled(b, 1.0);
    }
    Gradients { layers, l_t: bt.deltas, l_s: bs.deltas }
}

fn regularizer_grad(params: &NetworkParams, beta: f64) -> Vec<LayerGrad> {
    params
        .layers()
        .iter()
        .map(|l| LayerGrad {
            weights: Matrix::from_fn(l.outputs(), l.inputs(), |r, c| -2.0 * beta * l.weights.get(r, c)),
            bias: l.bias.iter().map(|b| -2.0 * beta * b).collect(),
        })
        .collect()
}

/// `dC/dtheta` for every layer.
pub fn backward(params: &NetworkParams, cache: &ForwardCache, obj: &Objective) -> Result<Gradients> {
    let (mut gt, mut gs) = mi_seeds(cache, obj.mi_form)?;
    let (dt, ds) = mmd_seeds(cache);
    for (g, d) in gt.as_mut_slice().iter_mut().zip(dt.as_slice()) {
        *g -= obj.alpha * d;
    }
    for (g, d) in gs.as_mut_slice().iter_mut().zip(ds.as_slice()) {
        *g -= obj.alpha * d;
    }
    let mut grads = combine(params, cache, &gt, &gs);
    for (g, r) in grads.layers.iter_mut().zip(regularizer_grad(params, obj.beta)) {
        g.add_scaled(&r, 1.0);
    }
    Ok(grads)
}

/// The cost gradient split by term: `dI`, `dD` and `d(-beta * norm)`.
#[derive(Clone, Debug)]
pub struct GradientParts {
    pub mi: Gradients,
    pub mmd: Gradients,
    pub regularizer: Vec<LayerGrad>,
}

pub fn backward_parts(params: &NetworkParams, cache: &ForwardCache, obj: &Objective) -> Result<GradientParts> {
    let (gt, gs) = mi_seeds(cache, obj.mi_form)?;
    let (dt, ds) = mmd_seeds(cache);
    Ok(GradientParts {
        mi: combine(params, cache, &gt, &gs),
        mmd: combine(params, cache, &dt, &ds),
        regularizer: regularizer_grad(params, obj.beta),
    })
}

/// Gradient-ascent step `theta <- theta + lr * dC/dtheta`.
pub fn ascend(params: &mut NetworkParams, grads: &[LayerGrad], lr: f64) {
    for (l, g) in params.layers_mut().iter_mut().zip(grads) {
        for (w, d) in l.weights.as_mut_slice().iter_mut().zip(g.weights.as_slice()) {
            *w += lr * d;
        }
        for (b, d) in l.bias.iter_mut().zip(&g.bias) {
            *b += lr * d;
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    /// Cost after each update.
    pub history: Vec<f64>,
    pub initial_cost: f64,
    /// Stopped on `|C_k - C_{k-1}| < eps` rather than the iteration cap.
    pub converged: bool,
}

/// Full-batch training: forward, gradient, ascent step, learning-rate decay,
/// repeated until the cost change drops below `eps` or `max_iters` is reached.
pub fn train(batch: &FeatureBatch, arch: &[usize], activation: Activation, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if batch.len() < 2 {
        return Err(Error::SampleTooSmall { required: 2, actual: batch.len() });
    }
    if arch.first() != Some(&batch.dim()) {
        return Err(Error::DimMismatch(format!(
            "architecture {arch:?} does not start with the feature dimension {}",
            batch.dim()
        )));
    }
    let params = NetworkParams::init(arch, activation, cfg.init_scale, cfg.seed)?;
    train_from(params, batch, cfg)
}

/// Training from given starting parameters.
pub fn train_from(mut params: NetworkParams, batch: &FeatureBatch, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let obj = cfg.objective();
    let mut cache = forward(&params, batch)?;
    let initial_cost = cost(&params, &cache, &obj)?;
    if !initial_cost.is_finite() {
        return Err(Error::Diverged { iteration: 0, history: Vec::new() });
    }
    let mut history: Vec<f64> = Vec::new();
    let mut lr = cfg.learning_rate;
    let mut previous = initial_cost;
    for k in 1..=cfg.max_iters {
        let grads = backward(&params, &cache, &obj)?;
        ascend(&mut params, &grads.layers, lr);
        lr *= cfg.decay;
        let step = forward(&params, batch).and_then(|c| {
            let value = cost(&params, &c, &obj)?;
            Ok((c, value))
        });
        let (next_cache, value) = match step {
            Ok(v) => v,
            Err(Error::NonFiniteLayer { .. }) => return Err(Error::Diverged { iteration: k, history }),
            Err(e) => return Err(e),
        };
        if !value.is_finite() {
            return Err(Error::Diverged { iteration: k, history });
        }
        history.push(value);
        cache = next_cache;
        if (value - previous).abs() < cfg.eps {
            return Ok(TrainOutcome { params, history, initial_cost, converged: true });
        }
        previous = value;
    }
    Ok(TrainOutcome { params, history, initial_cost, converged: false })
}
