//! Evaluation: unoriented angular error, RMSE and PGP aggregation, CND, and
//! the report files.

use crate::classical::{fit_jet, jet_normal, pca_normal};
use crate::dataset::{load_shape, write_normals, PointCloud, Variant};
use crate::error::{Error, Result};
use crate::model::{Model, PatchInput};
use crate::nn::ParamStore;
use crate::patch::{align_patch, extract_patch, unalign_normal};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// PGP thresholds in degrees.
pub const PGP_ALPHAS: [u32; 6] = [5, 10, 15, 20, 25, 30];

/// Unoriented angular error in degrees: arccos(clamp(|a . b|, 0, 1)).
pub fn angular_error_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).abs().clamp(0.0, 1.0).acos().to_degrees()
}

/// Root-mean-square of a non-empty error list.
pub fn rmse(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Validation("rmse of an empty error list".into()));
    }
    let mean_sq = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
    Ok(mean_sq.sqrt())
}

/// Proportion of errors strictly below `alpha` degrees.
pub fn pgp(errors: &[f64], alpha: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Validation("pgp of an empty error list".into()));
    }
    Ok(errors.iter().filter(|e| **e < alpha).count() as f64 / errors.len() as f64)
}

/// Index of the clean point nearest to `p`.
pub fn nearest_clean_index(clean: &PointCloud, p: &Vector3<f64>) -> usize {
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..clean.len() {
        let d = (clean.point(i) - p).norm_squared();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Angular error against the nearest clean-surface point's normal.
pub fn cnd_error(
    n_pred: &Vector3<f64>,
    noisy_point: &Vector3<f64>,
    clean: &PointCloud,
) -> Result<f64> {
    if clean.normals.is_none() {
        return Err(Error::Unsupported(
            "CND needs a clean reference cloud with normals".into(),
        ));
    }
    let idx = nearest_clean_index(clean, noisy_point);
    let n_ref = clean.normal(idx).expect("checked above");
    Ok(angular_error_deg(n_pred, &n_ref))
}

/// Prediction source used by evaluation and the predict/baseline commands.
pub enum Predictor {
    Network { model: Model, store: ParamStore },
    Pca { neighbors: usize },
    Jet { neighbors: usize, order: usize },
}

impl Predictor {
    pub fn name(&self) -> String {
        match self {
            Predictor::Network { model, .. } => format!(
                "network(depth={}, fusion={}, N={})",
                if model.cfg.mamba_enabled { model.cfg.depth } else { 0 },
                model.cfg.fusion,
                model.cfg.patch_size
            ),
            Predictor::Pca { neighbors } => format!("pca(k={neighbors})"),
            Predictor::Jet { neighbors, order } => format!("jet(k={neighbors}, n={order})"),
        }
    }

    /// World-frame unit normal at one query point.
    pub fn predict(&self, cloud: &PointCloud, query: usize) -> Result<Vector3<f64>> {
        match self {
            Predictor::Network { model, store } => {
                let raw = extract_patch(cloud, query, model.cfg.patch_size)?;
                let aligned = align_patch(&raw)?;
                let input = PatchInput::new(&aligned, &model.cfg, None)?;
                let (n_aligned, _) = model.predict_aligned(store, &input)?;
                unalign_normal(&aligned, &n_aligned)
            }
            Predictor::Pca { neighbors } => {
                let raw = extract_patch(cloud, query, *neighbors)?;
                pca_normal(&raw.coords)
            }
            Predictor::Jet { neighbors, order } => {
                let raw = extract_patch(cloud, query, *neighbors)?;
                let aligned = align_patch(&raw)?;
                let coeffs = fit_jet(&aligned.coords, *order)?;
                let n = jet_normal(&coeffs);
                unalign_normal(&aligned, &n)
            }
        }
    }
}

/// Evaluation options.
#[derive(Default)]
pub struct EvalOptions {
    /// Compute CND against clean counterparts found under this root.
    pub cnd_clean_root: Option<std::path::PathBuf>,
    /// Write `<shape>.normals` prediction files into this directory.
    pub write_predictions: Option<std::path::PathBuf>,
}

/// The metrics report. Serialization is deterministic (sorted maps, stable
/// field order), so identical inputs produce identical bytes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub per_shape_rmse: BTreeMap<String, f64>,
    pub per_variant_rmse: BTreeMap<Variant, f64>,
    /// Mean over the variant categories present (the six-category average).
    pub average_rmse: f64,
    /// (alpha degrees, fraction of points below alpha), pooled over shapes.
    pub pgp_curve: Vec<(u32, f64)>,
    pub cnd_mean: Option<f64>,
    pub points_evaluated: usize,
    /// How the average was formed; recorded for reproducibility.
    pub averaging: String,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let mut last = 0.0;
        for &(_, frac) in &self.pgp_curve {
            if !(0.0..=1.0).contains(&frac) {
                return Err(Error::Validation(format!("pgp fraction {frac} outside [0,1]")));
            }
            if frac + 1e-12 < last {
                return Err(Error::Validation("pgp curve must be non-decreasing".into()));
            }
            last = frac;
        }
        if self.average_rmse < 0.0 || self.per_shape_rmse.values().any(|v| *v < 0.0) {
            return Err(Error::Validation("rmse must be non-negative".into()));
        }
        Ok(())
    }

    /// Markdown table shaped like the six-category benchmark summary.
    pub fn rmse_table_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| Method | None | Low | Med. | High | Stripe | Grad. | Avg. |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        out.push_str(&format!("| {} |", self.method));
        for variant in Variant::ALL {
            match self.per_variant_rmse.get(&variant) {
                Some(v) => out.push_str(&format!(" {v:.2} |")),
                None => out.push_str(" - |"),
            }
        }
        out.push_str(&format!(" {:.2} |\n", self.average_rmse));
        out
    }

    /// Write report.json, pgp_curve.csv, and rmse_table.md.
    pub fn write_files(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Validation(format!("report serialization: {e}")))?;
        std::fs::write(out_dir.join("report.json"), json)?;
        let mut csv = String::from("alpha,fraction\n");
        for (alpha, frac) in &self.pgp_curve {
            csv.push_str(&format!("{alpha},{frac}\n"));
        }
        std::fs::write(out_dir.join("pgp_curve.csv"), csv)?;
        std::fs::write(out_dir.join("rmse_table.md"), self.rmse_table_markdown())?;
        Ok(())
    }
}

/// Evaluate a predictor over the named shapes. Per-shape RMSE is aggregated
/// to per-variant means; the overall average is the mean over the variant
/// categories present.
pub fn evaluate(
    predictor: &Predictor,
    data_root: &Path,
    shape_names: &[String],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if shape_names.is_empty() {
        return Err(Error::Dataset("no shapes to evaluate".into()));
    }
    let mut per_shape_rmse = BTreeMap::new();
    let mut variant_groups: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
    let mut pooled_errors: Vec<f64> = Vec::new();
    let mut cnd_errors: Vec<f64> = Vec::new();
    let mut points_evaluated = 0usize;

    for name in shape_names {
        let cloud = load_shape(data_root, name)?;
        if cloud.normals.is_none() {
            return Err(Error::Dataset(format!(
                "shape {name} has no ground-truth normals to evaluate against"
            )));
        }
        if cloud.eval_indices.is_none() {
            log::info!("shape {name}: no evaluation index subset; evaluating all points");
        }
        let indices = cloud.evaluation_indices();
        let clean = match &opts.cnd_clean_root {
            Some(root) => Some(load_shape(root, clean_reference(name))?),
            None => None,
        };
        let predictions: Vec<Result<Vector3<f64>>> = indices
            .par_iter()
            .map(|&q| predictor.predict(&cloud, q))
            .collect();
        let mut errors = Vec::with_capacity(indices.len());
        let mut preds = Vec::with_capacity(indices.len());
        for (&q, pred) in indices.iter().zip(predictions) {
            let n_pred = pred?;
            let n_gt = cloud.normal(q).expect("checked above");
            errors.push(angular_error_deg(&n_pred, &n_gt));
            if let Some(clean) = &clean {
                cnd_errors.push(cnd_error(&n_pred, &cloud.point(q), clean)?);
            }
            preds.push(n_pred);
        }
        if let Some(dir) = &opts.write_predictions {
            std::fs::create_dir_all(dir)?;
            write_normals(&cloud, &preds, &dir.join(format!("{name}.normals")))?;
        }
        let shape_rmse = rmse(&errors)?;
        per_shape_rmse.insert(name.clone(), shape_rmse);
        variant_groups.entry(cloud.variant).or_default().push(shape_rmse);
        points_evaluated += errors.len();
        pooled_errors.extend(errors);
    }

    let per_variant_rmse: BTreeMap<Variant, f64> = variant_groups
        .into_iter()
        .map(|(v, vals)| (v, vals.iter().sum::<f64>() / vals.len() as f64))
        .collect();
    let average_rmse =
        per_variant_rmse.values().sum::<f64>() / per_variant_rmse.len() as f64;
    let pgp_curve = PGP_ALPHAS
        .iter()
        .map(|&a| Ok((a, pgp(&pooled_errors, a as f64)?)))
        .collect::<Result<Vec<_>>>()?;
    let cnd_mean = if cnd_errors.is_empty() {
        None
    } else {
        Some(cnd_errors.iter().sum::<f64>() / cnd_errors.len() as f64)
    };
    let report = MetricsReport {
        method: predictor.name(),
        per_shape_rmse,
        per_variant_rmse,
        average_rmse,
        pgp_curve,
        cnd_mean,
        points_evaluated,
        averaging: "mean over variant categories".into(),
    };
    report.validate()?;
    Ok(report)
}

fn clean_reference(name: &str) -> &str {
    crate::dataset::clean_reference_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{quadric_graph, save_cloud, sphere, with_gaussian_noise};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    #[test]
    fn angular_error_reference_cases() {
        let z = Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(angular_error_deg(&z, &z), 0.0);
        assert_eq!(angular_error_deg(&z, &-z), 0.0);
        let x = Vector3::new(1.0, 0.0, 0.0);
        assert!((angular_error_deg(&z, &x) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_reference_cases() {
        assert_eq!(rmse(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[90.0]).unwrap(), 90.0);
        assert_eq!(rmse(&[3.0, 4.0]).unwrap(), 12.5f64.sqrt());
        assert!(rmse(&[]).is_err());
    }

    #[test]
    fn pgp_reference_cases() {
        assert_eq!(pgp(&[0.0, 0.0], 5.0).unwrap(), 1.0);
        assert_eq!(pgp(&[4.0, 6.0], 5.0).unwrap(), 0.5);
        assert!(pgp(&[], 5.0).is_err());
    }

    #[test]
    fn pgp_monotone_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let errors: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..90.0)).collect();
            let mut last = 0.0;
            for alpha in PGP_ALPHAS {
                let f = pgp(&errors, alpha as f64).unwrap();
                assert!(f >= last);
                last = f;
            }
        }
    }

    #[test]
    fn cnd_equals_plain_error_on_clean_cloud() {
        let cloud = sphere(200, 1.0);
        let pred = Vector3::new(0.0, 0.0, 1.0);
        for q in [0usize, 57, 199] {
            let plain = angular_error_deg(&pred, &cloud.normal(q).unwrap());
            let cnd = cnd_error(&pred, &cloud.point(q), &cloud).unwrap();
            assert!((plain - cnd).abs() < 1e-12);
        }
    }

    #[test]
    fn cnd_not_above_rmse_on_noisy_sphere() {
        // both metrics with the PCA baseline on a noisy sphere: the nearest
        // clean point's normal is at least as consistent with the estimated
        // plane as the displaced point's own label
        let clean = sphere(2000, 1.0);
        let noisy = with_gaussian_noise(&clean, 0.01, 3);
        let pred = Predictor::Pca { neighbors: 24 };
        let mut plain = Vec::new();
        let mut cnd = Vec::new();
        for q in (0..2000).step_by(40) {
            let n = pred.predict(&noisy, q).unwrap();
            plain.push(angular_error_deg(&n, &noisy.normal(q).unwrap()));
            cnd.push(cnd_error(&n, &noisy.point(q), &clean).unwrap());
        }
        let rmse_plain = rmse(&plain).unwrap();
        let rmse_cnd = rmse(&cnd).unwrap();
        assert!(
            rmse_cnd <= rmse_plain + 0.5,
            "cnd {rmse_cnd} should not exceed rmse {rmse_plain}"
        );
    }

    #[test]
    fn pca_baseline_on_synthetic_sphere() {
        let dir = TempDir::new().unwrap();
        let mut cloud = sphere(10_000, 1.0);
        cloud.eval_indices = Some((0..10_000).step_by(20).collect());
        save_cloud(dir.path(), &cloud).unwrap();
        let report = evaluate(
            &Predictor::Pca { neighbors: 32 },
            dir.path(),
            &["sphere".to_string()],
            &EvalOptions::default(),
        )
        .unwrap();
        assert!(report.average_rmse < 1.0, "sphere rmse {}", report.average_rmse);
        assert_eq!(report.points_evaluated, 500);
    }

    #[test]
    fn jet_baseline_on_clean_quadric() {
        let dir = TempDir::new().unwrap();
        let mut cloud = quadric_graph(100, [0.2, -0.1, 0.15], 1.0, 9);
        cloud.eval_indices = Some((0..cloud.len()).step_by(37).collect());
        save_cloud(dir.path(), &cloud).unwrap();
        let report = evaluate(
            &Predictor::Jet { neighbors: 40, order: 2 },
            dir.path(),
            &["quadric".to_string()],
            &EvalOptions::default(),
        )
        .unwrap();
        assert!(report.average_rmse < 0.1, "quadric rmse {}", report.average_rmse);
    }

    #[test]
    fn report_layout_and_determinism() {
        let dir = TempDir::new().unwrap();
        let cloud = sphere(500, 1.0);
        save_cloud(dir.path(), &cloud).unwrap();
        let pred = Predictor::Pca { neighbors: 16 };
        let names = vec!["sphere".to_string()];
        let r1 = evaluate(&pred, dir.path(), &names, &EvalOptions::default()).unwrap();
        let r2 = evaluate(&pred, dir.path(), &names, &EvalOptions::default()).unwrap();
        assert_eq!(
            serde_json::to_vec(&r1).unwrap(),
            serde_json::to_vec(&r2).unwrap(),
            "identical inputs must produce identical report bytes"
        );
        let table = r1.rmse_table_markdown();
        for col in ["None", "Low", "Med.", "High", "Stripe", "Grad.", "Avg."] {
            assert!(table.contains(col), "missing column {col}");
        }
        let out = dir.path().join("report");
        r1.write_files(&out).unwrap();
        assert!(out.join("report.json").is_file());
        assert!(out.join("pgp_curve.csv").is_file());
        assert!(out.join("rmse_table.md").is_file());
    }

    proptest! {
        #[test]
        fn pgp_monotone_property(errors in prop::collection::vec(0.0f64..90.0, 1..200)) {
            let mut last = 0.0;
            for alpha in PGP_ALPHAS {
                let f = pgp(&errors, alpha as f64).unwrap();
                prop_assert!(f >= last);
                prop_assert!((0.0..=1.0).contains(&f));
                last = f;
            }
        }
    }
}
