//! What the latent code is good for once a model is trained: drawing new
//! deformations, moving a deformation onto another subject, and checking
//! whether codes cluster by deformation class.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::cvae_model::{complete, decode, LatentCode, ModelParams, RegistrationResult};
use crate::error::{invalid, shape, Error, Result};
use crate::grid_field::ScalarImage;

/// Ridge added to both covariance diagonals before whitening.
pub const CCA_RIDGE: f64 = 1e-6;

/// Draws `z ~ N(0, I)` from `rng` and decodes it conditioned on `m`.
pub fn sample_deformation(m: &ScalarImage, params: &ModelParams, rng: &mut impl Rng) -> Result<RegistrationResult> {
    let z: Vec<f64> = (0..params.config().latent_dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    decode_onto(z, m, params)
}

/// Decodes a code taken from one subject while conditioning on `target`.
///
/// The returned latent has `mu = z` and zero log-variance.
pub fn transport(z: &[f64], target: &ScalarImage, params: &ModelParams) -> Result<RegistrationResult> {
    if z.len() != params.config().latent_dim {
        return Err(shape(
            "transport",
            format!(
                "code has {} entries, model expects {}",
                z.len(),
                params.config().latent_dim
            ),
        ));
    }
    decode_onto(z.to_vec(), target, params)
}

fn decode_onto(z: Vec<f64>, m: &ScalarImage, params: &ModelParams) -> Result<RegistrationResult> {
    let velocity = decode(&z, m, params)?;
    let latent = LatentCode {
        mu: z.clone(),
        logvar: vec![0.0; z.len()],
        z,
    };
    complete(velocity, m, None, latent, params)
}

/// Discriminative CCA between codes and one-hot class indicators.
#[derive(Clone, Debug, PartialEq)]
pub struct CcaModel {
    mean: Vec<f64>,
    directions: Vec<Vec<f64>>,
    correlations: Vec<f64>,
    classes: Vec<usize>,
    centroids: Vec<Vec<f64>>,
}

impl CcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn components(&self) -> usize {
        self.directions.len()
    }

    /// Mean of the codes the model was fitted on.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Projection direction `k` in code space, strongest first.
    pub fn direction(&self, k: usize) -> &[f64] {
        &self.directions[k]
    }

    /// Canonical correlations, non-increasing.
    pub fn correlations(&self) -> &[f64] {
        &self.correlations
    }

    /// Sorted distinct class ids seen during fitting.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Projected class means, in the order of [`classes`](Self::classes).
    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(invalid("codes", "need at least one non-empty code"));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(shape("cca_fit", format!("codes of length {} and {}", d, r.len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent codes"));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn centered(mut x: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
    for (j, mu) in mean.iter().enumerate() {
        x.column_mut(j).add_scalar_mut(-mu);
    }
    (x, mean)
}

/// `C^{-1/2}` of a symmetric positive definite matrix.
fn inverse_sqrt(c: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(c);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::Degenerate(format!("{what} covariance is not positive definite")));
    }
    let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * scale * eig.eigenvectors.transpose())
}

/// Fits `components` canonical directions of `codes` against `labels`.
pub fn cca_fit(codes: &[Vec<f64>], labels: &[usize], components: usize) -> Result<CcaModel> {
    if codes.len() != labels.len() {
        return Err(shape(
            "cca_fit",
            format!("{} codes but {} labels", codes.len(), labels.len()),
        ));
    }
    let classes: Vec<usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let k = classes.len();
    if k < 2 {
        return Err(invalid("labels", "need at least two classes"));
    }
    if codes.len() <= k {
        return Err(invalid("codes", "need more samples than classes"));
    }
    let (x, mean) = centered(to_matrix(codes)?);
    let (n, d) = x.shape();
    if components == 0 || components > d.min(k - 1) {
        return Err(invalid(
            "components",
            format!(
                "must lie in 1..={} for {d}-dimensional codes and {k} classes",
                d.min(k - 1)
            ),
        ));
    }
    let column: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let onehot = DMatrix::from_fn(n, k, |i, j| if column[&labels[i]] == j { 1.0 } else { 0.0 });
    let (y, _) = centered(onehot);

    let denom = (n - 1) as f64;
    let mut cxx = x.transpose() * &x / denom;
    let mut cyy = y.transpose() * &y / denom;
    let cxy = x.transpose() * &y / denom;
    for i in 0..d {
        cxx[(i, i)] += CCA_RIDGE;
    }
    for i in 0..k {
        cyy[(i, i)] += CCA_RIDGE;
    }
    let wx = inverse_sqrt(cxx, "code")?;
    let cyy_inv = cyy
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("label covariance is singular".into()))?;
    let mut target = &wx * &cxy * cyy_inv * cxy.transpose() * &wx;
    target = (&target + target.transpose()) * 0.5;
    let eig = SymmetricEigen::new(target);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut directions = Vec::with_capacity(components);
    let mut correlations = Vec::with_capacity(components);
    for &j in order.iter().take(components) {
        let rho2 = eig.eigenvalues[j];
        if !rho2.is_finite() {
            return Err(Error::Degenerate("canonical eigenproblem did not converge".into()));
        }
        correlations.push(rho2.clamp(0.0, 1.0).sqrt());
        let mut a: Vec<f64> = (&wx * eig.eigenvectors.column(j)).iter().copied().collect();
        let lead = a
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            a.iter_mut().for_each(|v| *v = -*v);
        }
        directions.push(a);
    }
    let mut model = CcaModel {
        mean,
        directions,
        correlations,
        classes,
        centroids: Vec::new(),
    };
    let mut sums = vec![vec![0.0; components]; k];
    let mut counts = vec![0usize; k];
    for (z, l) in codes.iter().zip(labels) {
        let p = cca_project(&model, z)?;
        let c = column[l];
        counts[c] += 1;
        sums[c].iter_mut().zip(&p).for_each(|(s, v)| *s += v);
    }
    model.centroids = sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect();
    Ok(model)
}

/// Projects `z` onto the canonical directions after removing the fitted mean.
pub fn cca_project(model: &CcaModel, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != model.dim() {
        return Err(shape(
            "cca_project",
            format!("code of length {}, model expects {}", z.len(), model.dim()),
        ));
    }
    Ok(model
        .directions
        .iter()
        .map(|a| a.iter().zip(z).zip(&model.mean).map(|((w, v), m)| w * (v - m)).sum())
        .collect())
}

/// Index of the centroid nearest to `point` in Euclidean distance; ties go
/// to the lower index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> Option<usize> {
    let dist = |c: &Vec<f64>| c.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in centroids.iter().enumerate() {
        let dd = dist(c);
        if best.is_none_or(|(_, b)| dd < b) {
            best = Some((i, dd));
        }
    }
    best.map(|(i, _)| i)
}

/// Class id whose projected centroid is nearest to the projection of `z`.
pub fn classify_nearest_centroid(model: &CcaModel, z: &[f64]) -> Result<usize> {
    let p = cca_project(model, z)?;
    let i = nearest(&p, &model.centroids).ok_or_else(|| Error::Degenerate("model has no centroids".into()))?;
    Ok(model.classes[i])
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValidation {
    pub accuracy: f64,
    /// Accuracy of each fold, in fold order.
    pub fold_accuracy: Vec<f64>,
    /// Predicted class per input row.
    pub predictions: Vec<usize>,
}

/// k-fold accuracy of CCA plus nearest centroid. Row `i` belongs to fold
/// `i % folds`, and CCA is refitted on the other folds each time.
pub fn cross_validate(
    codes: &[Vec<f64>],
    labels: &[usize],
    components: usize,
    folds: usize,
) -> Result<CrossValidation> {
    if folds < 2 || folds > codes.len() {
        return Err(invalid("folds", format!("must lie in 2..={}", codes.len())));
    }
    if codes.len() != labels.len() {
        return Err(shape(
            "cross_validate",
            format!("{} codes but {} labels", codes.len(), labels.len()),
        ));
    }
    let mut predictions = vec![0; codes.len()];
    let mut fold_accuracy = Vec::with_capacity(folds);
    for fold in 0..folds {
        let (mut train_z, mut train_l) = (Vec::new(), Vec::new());
        for (i, (z, &l)) in codes.iter().zip(labels).enumerate() {
            if i % folds != fold {
                train_z.push(z.clone());
                train_l.push(l);
            }
        }
        let model = cca_fit(&train_z, &train_l, components)?;
        let (mut hits, mut total) = (0usize, 0usize);
        for i in (fold..codes.len()).step_by(folds) {
            predictions[i] = classify_nearest_centroid(&model, &codes[i])?;
            hits += usize::from(predictions[i] == labels[i]);
            total += 1;
        }
        fold_accuracy.push(hits as f64 / total as f64);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(CrossValidation {
        accuracy: hits as f64 / codes.len() as f64,
        fold_accuracy,
        predictions,
    })
}

/// Writes `label,cca0,cca1,...` rows for external plotting.
pub fn write_projection(mut w: impl Write, labels: &[usize], points: &[Vec<f64>]) -> Result<()> {
    if labels.len() != points.len() {
        return Err(shape(
            "write_projection",
            format!("{} labels but {} points", labels.len(), points.len()),
        ));
    }
    let c = points.first().map_or(0, Vec::len);
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..c).map(|k| format!("cca{k}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (l, p) in labels.iter().zip(points) {
        let cols: Vec<String> = p.iter().map(|v| format!("{v:.8e}")).collect();
        writeln!(w, "{l},{}", cols.join(","))?;
    }
    Ok(())
}
