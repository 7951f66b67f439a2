//! The subcommands as library functions. Each writes its outputs under the
//! configured directory together with the resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};

use cdl_core::density::{density_mass, gaussianity_check, GaussianSpec};
use cdl_core::evaluation::{dice, gain_curve, hausdorff_mm, CaseMetrics, EvalReport, GainCurve};
use cdl_core::features::FeatureMaps;
use cdl_core::matrix::Matrix;
use cdl_core::network::{train, Activation, FeatureBatch};
use cdl_core::registration::{
    draw_samples, register, registered_truth_mask, CdlModel, MaskPolicy, MetricKind, Registration, RegistrationTrace,
    StopReason,
};
use cdl_core::synthetic::{make_pair, perturb_one_rotation, random_rigid, PairSeeds, PhantomSpec};
use cdl_core::transform::{AffineParams, TransformMode, RX, TX};
use cdl_core::volume::{normalize_intensities, BinaryMask, Dims, ImageVolume};
use rayon::prelude::*;

use crate::config::{Method, RunConfig};
use crate::error::{Error, Result};
use crate::formats::{read_manifest, read_trace, read_transform, write_manifest, write_trace, write_transform, ManifestEntry};
use crate::model::{load_model, save_model, ModelFile, Provenance};
use crate::volume_io::{load_mask, load_volume, save_mask, save_volume};

/// Exit status of `train` when the iteration cap was hit before `|dC| < eps`.
pub const EXIT_ITERATION_CAPPED: i32 = 1;

/// Seed offsets below are added to `seed * SEED_STRIDE`.
pub const SEED_STRIDE: u64 = 10_000;
const TRAIN_PHANTOM: u64 = 100;
const TEST_PHANTOM: u64 = 200;
const TEST_PERTURB: u64 = 300;
const TRAIN_SAMPLES: u64 = 500;
const REGISTER_SAMPLES: u64 = 900;
const DRIFT_OFFSET: u64 = 1000;

fn base_seed(cfg: &RunConfig) -> u64 {
    cfg.seed.wrapping_mul(SEED_STRIDE)
}

/// Runs `f` inside a pool of `threads` workers (0 picks the default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn relative_to(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads a volume, normalising it when requested and refusing unnormalised
/// input otherwise.
pub fn load_input(path: &Path, cfg: &RunConfig) -> Result<ImageVolume> {
    let loaded = load_volume(path)?;
    if loaded.normalized {
        return Ok(loaded.volume);
    }
    if !cfg.normalize {
        return Err(Error::Validation(format!(
            "{}: intensities outside [0, 1]; set normalize = true to rescale",
            path.display()
        )));
    }
    Ok(normalize_intensities(&loaded.volume, cfg.lo_pct, cfg.hi_pct)?.volume)
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Ids of pairs whose source keeps less than half of the phantom in frame.
    pub low_overlap: Vec<String>,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutput> {
    let out = cfg.out_dir();
    create_dir(&out.join("pairs"))?;
    let dims = Dims::cube(cfg.grid_size)?;
    let spacing = [cfg.spacing_mm; 3];
    let drift = cfg.drift_spec()?;
    let center = cdl_core::volume::Grid::new(dims, spacing)?.center_mm();
    let base = base_seed(cfg);
    let mut jobs = Vec::new();
    for i in 0..cfg.n_train_pairs as u64 {
        jobs.push((format!("train{i:02}"), "train", base + TRAIN_PHANTOM + i, 0u64));
    }
    for i in 0..cfg.n_test_pairs as u64 {
        jobs.push((format!("test{i:02}"), "test", base + TEST_PHANTOM + i, base + TEST_PERTURB + i));
    }
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|(id, role, phantom, perturb)| -> Result<ManifestEntry> {
            let truth = match (*role, cfg.perturbation.as_str()) {
                ("train", _) => AffineParams::identity(center),
                (_, "one-rotation") => perturb_one_rotation(*perturb, cfg.max_rotation_deg.to_radians(), center),
                _ => random_rigid(*perturb, cfg.max_rotation_deg.to_radians(), cfg.max_translation_mm, center),
            };
            let spec = PhantomSpec::head(dims, spacing, *phantom);
            let seeds = PairSeeds { phantom: *phantom, drift: phantom + DRIFT_OFFSET };
            let pair = make_pair(&spec, &drift, &truth, seeds)?;
            let name = |what: &str, ext: &str| format!("pairs/{id}_{what}.{ext}");
            let e = ManifestEntry {
                id: id.clone(),
                role: role.to_string(),
                target: name("target", "cdlv"),
                source: name("source", "cdlv"),
                target_mask: name("target_mask", "cdlm"),
                source_mask: name("source_mask", "cdlm"),
                truth: name("truth", "xform"),
                phantom_seed: seeds.phantom,
                drift_seed: seeds.drift,
                perturb_seed: *perturb,
                drift: cfg.drift.clone(),
                overlap: pair.overlap,
                low_overlap: pair.low_overlap,
            };
            save_volume(&out.join(&e.target), &pair.target)?;
            save_volume(&out.join(&e.source), &pair.source)?;
            save_mask(&out.join(&e.target_mask), &pair.target_mask, spacing)?;
            save_mask(&out.join(&e.source_mask), &pair.source_mask, spacing)?;
            write_transform(&out.join(&e.truth), &truth, TransformMode::Rigid)?;
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    cfg.write_resolved(&out.join("synth.config"))?;
    let low_overlap = entries.iter().filter(|e| e.low_overlap).map(|e| e.id.clone()).collect();
    Ok(SynthOutput { manifest, entries, low_overlap })
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model_path: PathBuf,
    pub history_path: PathBuf,
    pub history: Vec<f64>,
    pub initial_cost: f64,
    pub converged: bool,
}

impl TrainOutput {
    pub fn exit_code(&self) -> i32 {
        if self.converged {
            0
        } else {
            EXIT_ITERATION_CAPPED
        }
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    let manifest = cfg.manifest_path();
    let dir = manifest_dir(&manifest);
    let pairs: Vec<ManifestEntry> = read_manifest(&manifest)?.into_iter().filter(|e| e.role == "train").collect();
    if pairs.is_empty() {
        return Err(Error::Validation(format!("{} lists no training pairs", manifest.display())));
    }
    let mode = cfg.feature_mode()?;
    let d = mode.dim();
    let per_pair = cfg.train_samples / pairs.len();
    if per_pair < 1 {
        return Err(Error::Validation("train_samples is smaller than the number of training pairs".into()));
    }
    let sample_seed = base_seed(cfg) + TRAIN_SAMPLES;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, e)| -> Result<(Vec<f64>, Vec<f64>)> {
            let target = load_input(&relative_to(&dir, &e.target), cfg)?;
            let source = load_input(&relative_to(&dir, &e.source), cfg)?;
            if target.dims() != source.dims() {
                return Err(Error::Validation(format!("pair {}: target and source grids differ", e.id)));
            }
            let ft = FeatureMaps::compute(&target, mode)?;
            let fs = FeatureMaps::compute(&source, mode)?;
            let idx = draw_samples(target.dims(), per_pair, sample_seed + i as u64);
            let (mut t, mut s) = (vec![0.0; idx.len() * d], vec![0.0; idx.len() * d]);
            for (r, &v) in idx.iter().enumerate() {
                ft.at_voxel(v, &mut t[r * d..(r + 1) * d]);
                fs.at_voxel(v, &mut s[r * d..(r + 1) * d]);
            }
            Ok((t, s))
        })
        .collect::<Result<_>>()?;
    let (mut t, mut s) = (Vec::new(), Vec::new());
    for (a, b) in rows {
        t.extend(a);
        s.extend(b);
    }
    let n = t.len() / d;
    let batch = FeatureBatch::new(Matrix::from_vec(n, d, s)?, Matrix::from_vec(n, d, t)?)?;
    let tcfg = cfg.train_config()?;
    let outcome = train(&batch, &cfg.arch()?, cfg.activation()?, &tcfg)?;
    let model = CdlModel::new(outcome.params, tcfg.objective(), mode)?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    let manifest_name = manifest.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let provenance = Provenance {
        manifest: manifest_name,
        pairs: pairs.iter().map(|e| e.id.clone()).collect(),
        samples_per_pair: per_pair,
        sample_seed,
        normalization: if cfg.normalize { format!("percentile {} {}", cfg.lo_pct, cfg.hi_pct) } else { "none".into() },
        iterations: outcome.history.len(),
        converged: outcome.converged,
        initial_cost: outcome.initial_cost,
        final_cost: outcome.history.last().copied().unwrap_or(outcome.initial_cost),
    };
    let model_path = cfg.model_path();
    save_model(&model_path, &ModelFile::new(&model, &tcfg, provenance))?;
    let history_path = out.join("train_history.csv");
    let mut csv = String::from("k,cost\n");
    for (k, c) in outcome.history.iter().enumerate() {
        csv += &format!("{},{c}\n", k + 1);
    }
    write_text(&history_path, &csv)?;
    cfg.write_resolved(&out.join("train.config"))?;
    Ok(TrainOutput {
        model_path,
        history_path,
        history: outcome.history,
        initial_cost: outcome.initial_cost,
        converged: outcome.converged,
    })
}

/// Everything needed to register one pair.
struct Case {
    id: String,
    target: ImageVolume,
    source: ImageVolume,
    target_mask: Option<BinaryMask>,
    user_mask: Option<BinaryMask>,
    truth: Option<AffineParams>,
    seed: u64,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub id: String,
    pub method: Method,
    pub registration: Registration,
    pub xform: PathBuf,
    pub trace: PathBuf,
}

#[derive(Clone, Debug)]
pub struct RegisterOutput {
    pub results: Vec<CaseResult>,
}

fn stop_name(s: &StopReason) -> String {
    match s {
        StopReason::MaxIters => "max-iters".into(),
        StopReason::StepTolerance => "step-tolerance".into(),
        StopReason::ZeroGradient => "zero-gradient".into(),
        StopReason::Failed { iteration, error } => format!("failed at iteration {iteration}: {error}"),
    }
}

fn run_case(case: &Case, method: Method, model: Option<&CdlModel>, cfg: &RunConfig) -> Result<Registration> {
    let metric = match method {
        Method::Cdl => MetricKind::Cdl(model.ok_or_else(|| Error::Validation("cdl needs a model".into()))?),
        Method::Mi => MetricKind::HistMi { bins: cfg.bins, mask: MaskPolicy::None },
        Method::MiThreshold => MetricKind::HistMi { bins: cfg.bins, mask: MaskPolicy::Background },
        Method::MiBrain => {
            let m = case.user_mask.as_ref().ok_or_else(|| Error::Validation("mi+b needs a mask".into()))?;
            MetricKind::HistMi { bins: cfg.bins, mask: MaskPolicy::Supplied(m) }
        }
    };
    let rcfg = cfg.registration_config()?;
    let grid = case.target.grid();
    let probe = match (&case.target_mask, &case.truth) {
        (Some(mask), Some(truth)) => Some(move |mu: &AffineParams| -> f64 {
            registered_truth_mask(mask, grid, truth, mu).and_then(|w| dice(mask, &w)).map(|d| d.value).unwrap_or(f64::NAN)
        }),
        _ => None,
    };
    let probe_ref = probe.as_ref().map(|p| p as &dyn Fn(&AffineParams) -> f64);
    Ok(register(&metric, &case.target, &case.source, &rcfg, case.seed, probe_ref)?)
}

fn write_meta(path: &Path, case: &Case, method: Method, r: &Registration, cfg: &RunConfig) -> Result<()> {
    let mut s = format!("case = {}\nmethod = {}\n", case.id, method.name());
    s += &format!("mode = {}\nsamples = {}\nsample_seed = {}\n", cfg.mode, cfg.samples, case.seed);
    s += &format!("stop = {}\niterations = {}\n", stop_name(&r.stop), r.trace.rows.len().saturating_sub(1));
    s += &format!("initial_cost = {}\nbest_cost = {}\n", r.initial_cost, r.best_cost);
    if let Some(t) = &case.truth {
        let rot: f64 = (RX..RX + 3).map(|j| (r.params.mu[j] - t.mu[j]).powi(2)).sum::<f64>().sqrt();
        let tr: f64 = (TX..TX + 3).map(|j| (r.params.mu[j] - t.mu[j]).powi(2)).sum::<f64>().sqrt();
        s += &format!("rotation_error_deg = {}\ntranslation_error_mm = {tr}\n", rot.to_degrees());
    }
    if let Some(d) = r.trace.rows.last().and_then(|row| row.dice) {
        s += &format!("final_dice = {d}\n");
    }
    write_text(path, &s)
}

pub fn cmd_register(cfg: &RunConfig) -> Result<RegisterOutput> {
    let methods = cfg.methods()?;
    let model = if methods.contains(&Method::Cdl) { Some(load_model(&cfg.model_path())?) } else { None };
    let mode = cfg.registration_config()?.mode;
    let (cases, dirs): (Vec<Case>, Vec<PathBuf>) = if let Some(target) = &cfg.target {
        let source = cfg.source.as_ref().ok_or_else(|| Error::Config("single-pair mode needs `source`".into()))?;
        let target_mask = cfg.target_mask.as_ref().map(|p| load_mask(Path::new(p)).map(|m| m.0)).transpose()?;
        let truth = cfg.truth.as_ref().map(|p| read_transform(Path::new(p)).map(|t| t.0)).transpose()?;
        let user_mask = cfg.mask.as_ref().map(|p| load_mask(Path::new(p)).map(|m| m.0)).transpose()?;
        let case = Case {
            id: Path::new(target).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "pair".into()),
            target: load_input(Path::new(target), cfg)?,
            source: load_input(Path::new(source), cfg)?,
            target_mask,
            user_mask,
            truth,
            seed: cfg.seed,
        };
        (vec![case], vec![cfg.out_dir()])
    } else {
        let manifest = cfg.manifest_path();
        let dir = manifest_dir(&manifest);
        let tests: Vec<ManifestEntry> = read_manifest(&manifest)?.into_iter().filter(|e| e.role == "test").collect();
        let base = base_seed(cfg);
        let cases = tests
            .par_iter()
            .enumerate()
            .map(|(i, e)| -> Result<Case> {
                let mask = load_mask(&relative_to(&dir, &e.target_mask))?.0;
                Ok(Case {
                    id: e.id.clone(),
                    target: load_input(&relative_to(&dir, &e.target), cfg)?,
                    source: load_input(&relative_to(&dir, &e.source), cfg)?,
                    user_mask: Some(mask.clone()),
                    target_mask: Some(mask),
                    truth: Some(read_transform(&relative_to(&dir, &e.truth))?.0),
                    seed: base + REGISTER_SAMPLES + i as u64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dirs = methods.iter().map(|m| cfg.results_dir().join(m.name())).collect();
        (cases, dirs)
    };
    let single = cfg.target.is_some();
    for d in &dirs {
        create_dir(d)?;
    }
    let jobs: Vec<(usize, usize)> = (0..cases.len()).flat_map(|c| (0..methods.len()).map(move |m| (c, m))).collect();
    let results = jobs
        .par_iter()
        .map(|&(c, m)| -> Result<CaseResult> {
            let case = &cases[c];
            let method = methods[m];
            let r = run_case(case, method, model.as_ref(), cfg)?;
            let (dir, stem) = if single { (&dirs[0], method.name().to_string()) } else { (&dirs[m], case.id.clone()) };
            let xform = dir.join(format!("{stem}.xform"));
            let trace = dir.join(format!("{stem}.trace.csv"));
            write_transform(&xform, &r.params, mode)?;
            write_trace(&trace, &r.trace)?;
            write_meta(&dir.join(format!("{stem}.meta.txt")), case, method, &r, cfg)?;
            Ok(CaseResult { id: case.id.clone(), method, registration: r, xform, trace })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    cfg.write_resolved(&out.join("register.config"))?;
    let failed: Vec<String> = results
        .iter()
        .filter_map(|r| match &r.registration.stop {
            StopReason::Failed { .. } => Some(format!("{} {}: {}", r.method.name(), r.id, stop_name(&r.registration.stop))),
            _ => None,
        })
        .collect();
    if !failed.is_empty() {
        return Err(Error::Numerical(format!("registration failed: {}", failed.join("; "))));
    }
    Ok(RegisterOutput { results })
}

#[derive(Clone, Debug)]
pub struct EvaluateOutput {
    pub report: EvalReport,
    pub gains: Vec<(Method, GainCurve)>,
    pub summary: String,
}

fn overlap_metrics(mask: &BinaryMask, truth: &AffineParams, mu: &AffineParams, grid: cdl_core::volume::Grid) -> Result<(f64, f64)> {
    let warped = registered_truth_mask(mask, grid, truth, mu)?;
    let d = dice(mask, &warped)?.value;
    let hd = hausdorff_mm(mask, &warped, grid.spacing)?;
    Ok((d, hd))
}

fn summary_text(report: &EvalReport) -> String {
    let mut s = String::from("method      n   Dice initial     Dice final       HD initial (mm)   HD final (mm)\n");
    for m in &report.methods {
        let f = |x: &cdl_core::evaluation::MeanSd| format!("{:.4} ± {:.4}", x.mean, x.sd);
        s += &format!(
            "{:<10} {:>2}   {:<16} {:<16} {:<17} {}\n",
            m.method,
            m.final_dice.n,
            f(&m.initial_dice),
            f(&m.final_dice),
            f(&m.initial_hd_mm),
            f(&m.final_hd_mm)
        );
    }
    if !report.tests.is_empty() {
        s += "\nrank-sum p-values (final values)\n";
        for t in &report.tests {
            s += &format!("{} vs {}: Dice p = {:.4}, HD p = {:.4}\n", t.first, t.second, t.dice_p, t.hd_p);
        }
    }
    s
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluateOutput> {
    let manifest = cfg.manifest_path();
    let dir = manifest_dir(&manifest);
    let tests: Vec<ManifestEntry> = read_manifest(&manifest)?.into_iter().filter(|e| e.role == "test").collect();
    let methods = cfg.methods()?;
    let results = cfg.results_dir();
    let jobs: Vec<(usize, usize)> = (0..methods.len()).flat_map(|m| (0..tests.len()).map(move |c| (m, c))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(m, c)| -> Result<(CaseMetrics, RegistrationTrace)> {
            let e = &tests[c];
            let method = methods[m];
            let stem = results.join(method.name()).join(&e.id);
            let (mu, _) = read_transform(&stem.with_extension("xform"))?;
            let trace = read_trace(&stem.with_extension("trace.csv"))?;
            let (mask, spacing) = load_mask(&relative_to(&dir, &e.target_mask))?;
            let grid = cdl_core::volume::Grid::new(mask.dims(), spacing)?;
            let (truth, _) = read_transform(&relative_to(&dir, &e.truth))?;
            let first = trace.rows.first().ok_or_else(|| Error::Validation(format!("{}: empty trace", stem.display())))?;
            let init = AffineParams::new(first.mu, mu.center)?;
            let (d0, h0) = overlap_metrics(&mask, &truth, &init, grid)?;
            let (d1, h1) = overlap_metrics(&mask, &truth, &mu, grid)?;
            let metrics = CaseMetrics {
                case: e.id.clone(),
                method: method.name().into(),
                initial_dice: d0,
                final_dice: d1,
                initial_hd_mm: h0,
                final_hd_mm: h1,
            };
            Ok((metrics, trace))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut gains = Vec::new();
    for (m, method) in methods.iter().enumerate() {
        let traces: Vec<RegistrationTrace> = rows[m * tests.len()..(m + 1) * tests.len()].iter().map(|r| r.1.clone()).collect();
        if !traces.is_empty() {
            gains.push((*method, gain_curve(&traces)?));
        }
    }
    let report = EvalReport::build(rows.into_iter().map(|r| r.0).collect());
    let out = cfg.out_dir();
    create_dir(&out)?;
    let mut csv = String::from("case,method,initial_dice,final_dice,initial_hd_mm,final_hd_mm\n");
    for c in &report.cases {
        csv += &format!("{},{},{},{},{},{}\n", c.case, c.method, c.initial_dice, c.final_dice, c.initial_hd_mm, c.final_hd_mm);
    }
    write_text(&out.join("report.csv"), &csv)?;
    let summary = summary_text(&report);
    write_text(&out.join("summary.txt"), &summary)?;
    let len = gains.iter().map(|g| g.1.mean_gain.len()).max().unwrap_or(0);
    let mut gain_csv = String::from("k");
    for (m, _) in &gains {
        gain_csv += &format!(",{}", m.name());
    }
    gain_csv.push('\n');
    for k in 0..len {
        gain_csv += &k.to_string();
        for (_, g) in &gains {
            let v = g.mean_gain.get(k).or(g.mean_gain.last()).copied().unwrap_or(0.0);
            gain_csv += &format!(",{v}");
        }
        gain_csv.push('\n');
    }
    write_text(&out.join("gain_curve.csv"), &gain_csv)?;
    let mut scatter = String::from("method,case,initial_dice,final_dice\n");
    for (m, g) in &gains {
        for (e, (a, b)) in tests.iter().zip(&g.scatter) {
            scatter += &format!("{},{},{a},{b}\n", m.name(), e.id);
        }
    }
    write_text(&out.join("scatter.csv"), &scatter)?;
    cfg.write_resolved(&out.join("evaluate.config"))?;
    Ok(EvaluateOutput { report, gains, summary })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityRow {
    pub mu: f64,
    pub sigma: f64,
    pub activation: Activation,
    pub mass: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub ks_closed_form: f64,
    pub ks_gaussian: f64,
}

/// `(mu, sigma)` cells checked by `densitycheck`.
pub fn density_grid() -> Vec<(f64, f64)> {
    let mut cells = vec![(0.0, 0.01)];
    for mu in [-1.0, 0.0, 1.0] {
        for sigma in [0.1, 0.5, 1.0, 2.0] {
            cells.push((mu, sigma));
        }
    }
    cells
}

pub fn cmd_densitycheck(cfg: &RunConfig) -> Result<Vec<DensityRow>> {
    let mut jobs = Vec::new();
    for act in [Activation::Tanh, Activation::Sigmoid] {
        for (mu, sigma) in density_grid() {
            jobs.push((act, mu, sigma));
        }
    }
    let base = base_seed(cfg);
    let rows = jobs
        .par_iter()
        .enumerate()
        .map(|(i, &(act, mu, sigma))| -> Result<DensityRow> {
            let g = GaussianSpec::new(mu, sigma)?;
            let r = gaussianity_check(&g, act, cfg.density_samples, base + i as u64)?;
            Ok(DensityRow {
                mu,
                sigma,
                activation: act,
                mass: density_mass(&g, act),
                skewness: r.skewness,
                excess_kurtosis: r.excess_kurtosis,
                ks_closed_form: r.ks_closed_form,
                ks_gaussian: r.ks_gaussian,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    let mut csv = String::from("mu,sigma,act,skew,kurtosis,ks_closed_form,ks_gaussian,mass\n");
    for r in &rows {
        csv += &format!(
            "{},{},{},{},{},{},{},{}\n",
            r.mu,
            r.sigma,
            r.activation.name(),
            r.skewness,
            r.excess_kurtosis,
            r.ks_closed_form,
            r.ks_gaussian,
            r.mass
        );
    }
    write_text(&out.join("density.csv"), &csv)?;
    write_text(
        &out.join("density.meta.txt"),
        "tanh_inverse = atanh(y) = ln((1 + y) / (1 - y)) / 2\n\
         sigmoid_inverse = ln(y / (1 - y))\n\
         kurtosis = excess (normal = 0)\n",
    )?;
    cfg.write_resolved(&out.join("densitycheck.config"))?;
    Ok(rows)
}
