//! The work behind each subcommand. Every function takes explicit paths and
//! settings and returns what it wrote, so the binary stays a thin wrapper.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cli::config::RunConfig;
use crate::cli::container::{self, Container};
use crate::cli::dataset::{self, ManifestEntry, PairFiles, Split};
use crate::cli::report::Report;
use crate::cvae_model::{encode, register as register_pair, ModelParams, RegistrationMode, RegistrationResult};
use crate::error::{invalid, Error, Result};
use crate::grid_field::{
    choose_scaling_n, exponentiate, jacobian_map, negative_jacobian_fraction, FieldKind, Mask, ScalarImage, Transform,
};
use crate::latent_analysis::{
    cca_fit, cca_project, cross_validate, sample_deformation, transport as transport_code, write_projection,
};
use crate::similarity::{dice, field_stats, hausdorff95};
use crate::synth_data::{generate_dataset, DatasetConfig};
use crate::trainer::{self, load_checkpoint, save_checkpoint, TrainOutcome, TrainPair};

pub const MODEL_FILE: &str = "model.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const PROJECTION_FILE: &str = "projection.csv";
pub const LATENT_FILE: &str = "latent.bin";

/// Folds used by the classification estimate in [`eval`].
pub const CV_FOLDS: usize = 10;

/// Generates a synthetic dataset into `out`.
pub fn synth(cfg: &DatasetConfig, out: &Path) -> Result<Vec<ManifestEntry>> {
    let data = generate_dataset(cfg)?;
    dataset::write_dataset(out, &data)
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Trains on the `train` split of the dataset in `data`. The resolved
/// configuration, loss log, checkpoints and the final `model.bin` go to `out`.
pub fn train(config: &RunConfig, data: &Path, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = data.join(dataset::MANIFEST);
    let entries = dataset::read_manifest(&manifest)?;
    let pairs = entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| {
            let p = dataset::load_pair(&data.join(&e.filename))?;
            Ok(TrainPair {
                moving: p.moving,
                fixed: p.fixed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = pairs.first() {
        if p.moving.grid().dims() != config.model.dims.as_slice() {
            return Err(Error::GridMismatch {
                left: p.moving.grid().dims().to_vec(),
                right: config.model.dims.clone(),
            });
        }
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(CONFIG_FILE), config.to_json())?;
    let params = ModelParams::init(&config.model, &mut ChaCha8Rng::seed_from_u64(config.train.seed))?;
    let outcome = trainer::train(&pairs, params, &config.train, Some(out))?;
    save_checkpoint(&out.join(MODEL_FILE), &outcome.params)?;
    Ok(outcome)
}

fn jacobian_container(phi: &Transform) -> Container {
    Container::from_image(&jacobian_map(phi)).with_meta("kind", "jacobian".into())
}

fn latent_archive(r: &RegistrationResult) -> Vec<Container> {
    let vec = |name: &str, v: &[f64]| Container::f64(vec![v.len()], v.to_vec()).with_name(name);
    vec![
        vec("z", &r.latent.z),
        vec("mu", &r.latent.mu),
        vec("logvar", &r.latent.logvar),
    ]
}

/// Writes velocity, displacement, warped image, Jacobian map and latent code.
fn write_outputs(out: &Path, r: &RegistrationResult) -> Result<()> {
    std::fs::create_dir_all(out)?;
    container::save(&out.join("velocity.bin"), &[Container::from_field(&r.velocity)])?;
    container::save(
        &out.join("displacement.bin"),
        &[Container::from_field(r.phi.displacement())],
    )?;
    container::save(&out.join("warped.bin"), &[Container::from_image(&r.warped)])?;
    container::save(&out.join("jacobian.bin"), &[jacobian_container(&r.phi)])?;
    container::save(&out.join(LATENT_FILE), &latent_archive(r))
}

fn field_report(r: &RegistrationResult) -> Report {
    let mut rep = Report::new();
    rep.num("mean_magnitude", r.metrics.mean_magnitude)
        .num("mean_gradient", r.metrics.mean_gradient)
        .num("neg_jac_fraction", r.metrics.neg_jac_fraction);
    rep
}

/// Distinct positive labels, ascending.
fn labels_of(img: &ScalarImage) -> Vec<f64> {
    let mut out: Vec<f64> = img.values().iter().copied().filter(|&v| v > 0.0).collect();
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

fn label_key(prefix: &str, label: f64) -> String {
    if label.fract() == 0.0 {
        format!("{prefix}_{}", label as i64)
    } else {
        format!("{prefix}_{label}")
    }
}

/// Registration metrics of `m -> f`, with overlap scores for each label
/// present in both label maps.
pub fn pair_metrics(pair: &PairFiles, r: &RegistrationResult) -> Result<Report> {
    let mut rep = Report::new();
    if let Some(v) = r.metrics.rmse {
        rep.num("rmse", v);
    }
    if let Some(v) = r.metrics.lcc {
        rep.num("lcc", v);
    }
    if let (Some(ml), Some(fl)) = (&pair.moving_labels, &pair.fixed_labels) {
        for label in labels_of(fl) {
            let moved = Mask::from_labels(ml, label);
            let target = Mask::from_labels(fl, label);
            if moved.is_empty() {
                continue;
            }
            let warped = moved.warp(&r.phi)?;
            rep.num(&label_key("dice", label), dice(&warped, &target)?);
            if !warped.is_empty() {
                rep.num(&label_key("hd95", label), hausdorff95(&warped, &target)?);
            }
        }
    }
    for (k, v) in field_report(r).entries() {
        rep.set_raw(k, v);
    }
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mode {
    Deterministic,
    Stochastic { seed: u64 },
}

impl Mode {
    fn resolve(&self, latent_dim: usize) -> RegistrationMode {
        match *self {
            Mode::Deterministic => RegistrationMode::Deterministic,
            Mode::Stochastic { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                RegistrationMode::Stochastic {
                    noise: (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect(),
                }
            }
        }
    }
}

/// Registers one pair and writes outputs plus `metrics.txt` to `out`.
pub fn register(model: &Path, pair: &PairFiles, mode: &Mode, out: &Path) -> Result<Report> {
    let params = load_checkpoint(model)?;
    pair.moving.grid().check_same(pair.fixed.grid())?;
    let start = Instant::now();
    let r = register_pair(
        &pair.moving,
        &pair.fixed,
        &params,
        &mode.resolve(params.config().latent_dim),
    )?;
    let wall_ms = start.elapsed().as_millis();
    let mut rep = pair_metrics(pair, &r)?;
    rep.int("wall_ms", wall_ms);
    write_outputs(out, &r)?;
    rep.write(&out.join(METRICS_FILE))?;
    Ok(rep)
}

/// Exponentiates a velocity container; `steps` defaults to the scaling rule.
pub fn exp(velocity: &Path, steps: Option<u32>, out: &Path) -> Result<Report> {
    let v = container::load_one(velocity)?.to_field(FieldKind::Velocity)?;
    let n = match steps {
        Some(n) => n,
        None => choose_scaling_n(std::slice::from_ref(&v))?,
    };
    let phi = exponentiate(&v, n)?;
    let jac = jacobian_map(&phi);
    std::fs::create_dir_all(out)?;
    container::save(
        &out.join("displacement.bin"),
        &[Container::from_field(phi.displacement())],
    )?;
    container::save(&out.join("jacobian.bin"), &[jacobian_container(&phi)])?;
    let stats = field_stats(phi.displacement());
    let (lo, hi) = jac
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let mut rep = Report::new();
    rep.int("steps", n)
        .num("neg_jac_fraction", negative_jacobian_fraction(&phi))
        .num("jacobian_min", lo)
        .num("jacobian_max", hi)
        .num("mean_magnitude", stats.mean_magnitude)
        .num("mean_gradient", stats.mean_gradient_magnitude);
    rep.write(&out.join(REPORT_FILE))?;
    Ok(rep)
}

pub fn sample_dir_name(i: usize) -> String {
    format!("sample_{i:03}")
}

/// Draws `count` deformations conditioned on `conditioning`. Nothing is
/// written when `count` is zero.
pub fn sample(model: &Path, conditioning: &ScalarImage, count: usize, seed: u64, out: &Path) -> Result<Vec<Report>> {
    let params = load_checkpoint(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(count);
    for i in 0..count {
        let r = sample_deformation(conditioning, &params, &mut rng)?;
        let dir = out.join(sample_dir_name(i));
        write_outputs(&dir, &r)?;
        let rep = field_report(&r);
        rep.write(&dir.join(METRICS_FILE))?;
        reports.push(rep);
    }
    Ok(reports)
}

/// Where a transported code comes from.
#[derive(Clone, Debug)]
pub enum CodeSource {
    /// A container holding the code, or a latent archive with a `z` entry.
    File(PathBuf),
    /// Encode this pair first and use its posterior mean.
    Pair { moving: ScalarImage, fixed: ScalarImage },
}

pub fn read_code(path: &Path) -> Result<Vec<f64>> {
    let all = container::load(path)?;
    let c = match container::find(&all, "z") {
        Some(c) => c,
        None if all.len() == 1 => &all[0],
        None => return Err(Error::Format(format!("{} has no `z` code", path.display()))),
    };
    if c.shape.len() != 1 {
        return Err(Error::Format(format!(
            "code must be one-dimensional, got shape {:?}",
            c.shape
        )));
    }
    Ok(c.data())
}

pub fn transport(model: &Path, source: &CodeSource, target: &ScalarImage, out: &Path) -> Result<Report> {
    let params = load_checkpoint(model)?;
    let z = match source {
        CodeSource::File(p) => read_code(p)?,
        CodeSource::Pair { moving, fixed } => encode(fixed, moving, &params)?.0,
    };
    let r = transport_code(&z, target, &params)?;
    write_outputs(out, &r)?;
    let rep = field_report(&r);
    rep.write(&out.join(METRICS_FILE))?;
    Ok(rep)
}

/// Registers every manifest entry (optionally one split), aggregates the
/// metrics, and measures how well the codes separate the manifest classes.
///
/// Writes `report.txt` and, when there are at least two classes,
/// `projection.csv` with codes projected by a CCA fitted on all entries.
pub fn eval(model: &Path, manifest: &Path, split: Option<Split>, out: &Path) -> Result<Report> {
    let params = load_checkpoint(model)?;
    let root = manifest_dir(manifest);
    let entries: Vec<ManifestEntry> = dataset::read_manifest(manifest)?
        .into_iter()
        .filter(|e| split.is_none_or(|s| s == e.split))
        .collect();
    if entries.is_empty() {
        return Err(invalid("manifest", "no entries to evaluate"));
    }
    let mut cases = Vec::with_capacity(entries.len());
    let mut codes = Vec::with_capacity(entries.len());
    for e in &entries {
        let pair = dataset::load_pair(&root.join(&e.filename))?;
        let r = register_pair(&pair.moving, &pair.fixed, &params, &RegistrationMode::Deterministic)?;
        cases.push(pair_metrics(&pair, &r)?);
        codes.push(r.latent.mu);
    }

    let mut rep = Report::new();
    rep.int("count", entries.len() as u64);
    for key in metric_keys(&cases) {
        let values: Vec<f64> = cases.iter().filter_map(|c| c.get_f64(&key)).collect();
        let (mean, var) = mean_var(&values);
        rep.num(&format!("{key}_mean"), mean).num(&format!("{key}_var"), var);
    }

    std::fs::create_dir_all(out)?;
    let labels: Vec<usize> = entries.iter().map(|e| e.class).collect();
    let mut classes = labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() >= 2 && entries.len() > classes.len() {
        let c = params.config().latent_dim.min(classes.len() - 1);
        let model = cca_fit(&codes, &labels, c)?;
        let points = codes
            .iter()
            .map(|z| cca_project(&model, z))
            .collect::<Result<Vec<_>>>()?;
        write_projection(std::fs::File::create(out.join(PROJECTION_FILE))?, &labels, &points)?;
        rep.int("cca_components", c as u64);
        for (k, rho) in model.correlations().iter().enumerate() {
            rep.num(&format!("cca_correlation_{k}"), *rho);
        }
        if entries.len() >= CV_FOLDS {
            let cv = cross_validate(&codes, &labels, c, CV_FOLDS)?;
            rep.num("accuracy", cv.accuracy);
        }
    }
    rep.write(&out.join(REPORT_FILE))?;
    Ok(rep)
}

/// Keys in order of first appearance.
fn metric_keys(cases: &[Report]) -> Vec<String> {
    let mut keys: Vec<String> = Vec::new();
    for c in cases {
        for (k, _) in c.entries() {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
    }
    keys
}

/// Mean and population variance.
fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}
