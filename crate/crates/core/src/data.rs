//! Real-data ingestion and the preprocessing/splitting pipeline: min-max
//! feature normalization fit on the training split, centering by -0.5,
//! target standardization, and de-standardization of predictions back to the
//! original scale.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::predict::PredictiveMoments;
use crate::{Error, Result};

/// A parsed numeric table: features in column order with the target split out.
#[derive(Clone, Debug)]
pub struct RawTable {
    pub feature_names: Vec<String>,
    pub features: DMatrix<f64>,
    pub target: DVector<f64>,
    pub target_name: String,
}

impl RawTable {
    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    fn take_rows(&self, rows: &[usize]) -> RawTable {
        let mut features = DMatrix::<f64>::zeros(rows.len(), self.features.ncols());
        let mut target = DVector::<f64>::zeros(rows.len());
        for (out, &i) in rows.iter().enumerate() {
            for d in 0..self.features.ncols() {
                features[(out, d)] = self.features[(i, d)];
            }
            target[out] = self.target[i];
        }
        RawTable {
            feature_names: self.feature_names.clone(),
            features,
            target,
            target_name: self.target_name.clone(),
        }
    }
}

/// Loads a strictly numeric CSV with a header row; the named target column is
/// split out and every other column becomes a feature, in file order.
pub fn load_csv(path: &Path, target_column: &str) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: missing header row: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers.is_empty() {
        return Err(Error::Data(format!("{}: empty header row", path.display())));
    }
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| {
            Error::Data(format!("{}: no column named '{target_column}'", path.display()))
        })?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} cells, header has {}",
                path.display(),
                line + 2,
                record.len(),
                headers.len()
            )));
        }
        let mut row = Vec::with_capacity(headers.len());
        for (col, cell) in record.iter().enumerate() {
            let trimmed = cell.trim();
            if trimmed.is_empty() {
                return Err(Error::Data(format!(
                    "{}: blank cell at row {}, column '{}'",
                    path.display(),
                    line + 2,
                    headers[col]
                )));
            }
            let value: f64 = trimmed.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: non-numeric cell '{trimmed}' at row {}, column '{}'",
                    path.display(),
                    line + 2,
                    headers[col]
                ))
            })?;
            row.push(value);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }

    let n = rows.len();
    let n_features = headers.len() - 1;
    let mut features = DMatrix::<f64>::zeros(n, n_features);
    let mut target = DVector::<f64>::zeros(n);
    let mut feature_names = Vec::with_capacity(n_features);
    for (col, name) in headers.iter().enumerate() {
        if col != target_idx {
            feature_names.push(name.clone());
        }
    }
    for (i, row) in rows.iter().enumerate() {
        let mut out = 0;
        for (col, &v) in row.iter().enumerate() {
            if col == target_idx {
                target[i] = v;
            } else {
                features[(i, out)] = v;
                out += 1;
            }
        }
    }
    Ok(RawTable { feature_names, features, target, target_name: target_column.to_owned() })
}

/// Train/test split specification.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { test_fraction: 0.10, seed: 0 }
    }
}

/// Seeded uniform shuffle followed by a fraction cut; disjoint and exhaustive.
pub fn split(raw: &RawTable, spec: &SplitSpec) -> Result<(RawTable, RawTable)> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(Error::Input(format!(
            "test_fraction must lie in (0,1), got {}",
            spec.test_fraction
        )));
    }
    let n = raw.n();
    if n < 2 {
        return Err(Error::Input("need at least 2 rows to split".into()));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    indices.shuffle(&mut rng);
    let n_test = ((n as f64 * spec.test_fraction).round() as usize).clamp(1, n - 1);
    let test = raw.take_rows(&indices[..n_test]);
    let train = raw.take_rows(&indices[n_test..]);
    Ok((train, test))
}

/// Feature and target statistics fitted on the training split only.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Preprocessor {
    pub feature_min: Vec<f64>,
    pub feature_max: Vec<f64>,
    pub mu_y: f64,
    pub sigma_y: f64,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

impl Preprocessor {
    /// Min-max to `[0,1]` (train statistics), then center by `-0.5`; constant
    /// training columns map to the midpoint 0.5 (0 after centering). Test
    /// rows may land outside `[-0.5, 0.5]` and are not clipped.
    pub fn transform_features(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.ncols() != self.feature_min.len() {
            return Err(Error::Input(format!(
                "{} feature columns, preprocessor was fitted on {}",
                features.ncols(),
                self.feature_min.len()
            )));
        }
        let mut out = DMatrix::<f64>::zeros(features.nrows(), features.ncols());
        for d in 0..features.ncols() {
            let (lo, hi) = (self.feature_min[d], self.feature_max[d]);
            let range = hi - lo;
            for i in 0..features.nrows() {
                let unit = if range > 0.0 { (features[(i, d)] - lo) / range } else { 0.5 };
                out[(i, d)] = unit - 0.5;
            }
        }
        Ok(out)
    }

    pub fn transform_target(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.mu_y) / self.sigma_y)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("preprocessor serialization failed: {e}")))?;
        std::fs::write(path, json.as_bytes())
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: invalid preprocessor: {e}", path.display())))
    }
}

/// A preprocessed split: centered features and standardized target.
#[derive(Clone, Debug)]
pub struct ProcessedSplit {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// Fits the preprocessor on the training rows and transforms both splits with
/// the training statistics only.
pub fn fit_transform(
    train: &RawTable,
    test: &RawTable,
) -> Result<(ProcessedSplit, ProcessedSplit, Preprocessor)> {
    if train.features.ncols() != test.features.ncols() {
        return Err(Error::Input("train and test have different feature counts".into()));
    }
    let d = train.features.ncols();
    let n = train.n();
    if n < 2 {
        return Err(Error::Input("need at least 2 training rows".into()));
    }
    let mut feature_min = vec![f64::INFINITY; d];
    let mut feature_max = vec![f64::NEG_INFINITY; d];
    for i in 0..n {
        for c in 0..d {
            let v = train.features[(i, c)];
            feature_min[c] = feature_min[c].min(v);
            feature_max[c] = feature_max[c].max(v);
        }
    }
    let mu_y = train.target.sum() / n as f64;
    let ss: f64 = train.target.iter().map(|v| (v - mu_y) * (v - mu_y)).sum();
    let sigma_y = (ss / (n as f64 - 1.0)).sqrt();
    if !(sigma_y > 0.0) {
        return Err(Error::Data("training target is constant (sigma_y = 0)".into()));
    }
    let pre = Preprocessor {
        feature_min,
        feature_max,
        mu_y,
        sigma_y,
        feature_names: train.feature_names.clone(),
        target_name: train.target_name.clone(),
    };
    let train_split = ProcessedSplit {
        x: pre.transform_features(&train.features)?,
        y: pre.transform_target(&train.target),
    };
    let test_split = ProcessedSplit {
        x: pre.transform_features(&test.features)?,
        y: pre.transform_target(&test.target),
    };
    Ok((train_split, test_split, pre))
}

/// Maps z-scale predictive moments back to the original target units:
/// `mu -> mu sigma_y + mu_y`, `var -> var sigma_y^2`.
pub fn destandardize(preds: &[PredictiveMoments], pre: &Preprocessor) -> Vec<PredictiveMoments> {
    preds
        .iter()
        .map(|p| PredictiveMoments {
            mu_star: p.mu_star * pre.sigma_y + pre.mu_y,
            var_star: p.var_star * pre.sigma_y * pre.sigma_y,
        })
        .collect()
}

/// Original-scale targets from a standardized vector.
pub fn destandardize_targets(y_z: &DVector<f64>, pre: &Preprocessor) -> DVector<f64> {
    y_z.map(|v| v * pre.sigma_y + pre.mu_y)
}

/// Original-scale nugget from the z-scale estimate: `s2 sigma_y^2`.
pub fn destandardize_nugget(sigma_eps2_z: f64, pre: &Preprocessor) -> f64 {
    sigma_eps2_z * pre.sigma_y * pre.sigma_y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predict::{compute_metrics, MetricScale};
    use approx::assert_relative_eq;
    use std::io::Write;

    fn write_csv(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn csv_round_trip() {
        let (_dir, path) = write_csv("a,b,y\n1.5,2.0,3.0\n-0.25,4.0,5.5\n0.0,1e-3,2.5e2\n");
        let t = load_csv(&path, "y").unwrap();
        assert_eq!(t.feature_names, vec!["a", "b"]);
        assert_eq!(t.features[(0, 0)], 1.5);
        assert_eq!(t.features[(2, 1)], 1e-3);
        assert_eq!(t.target[2], 250.0);
        assert_eq!(t.n(), 3);
    }

    #[test]
    fn csv_errors_name_the_cell() {
        let (_dir, path) = write_csv("a,y\n1.0,2.0\n,3.0\n");
        let err = load_csv(&path, "y").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3") && msg.contains("'a'"), "message was: {msg}");

        let (_dir2, path2) = write_csv("a,y\n1.0,2.0\nfoo,3.0\n");
        let err2 = load_csv(&path2, "y").unwrap_err();
        assert!(err2.to_string().contains("non-numeric"), "message was: {err2}");

        let (_dir3, path3) = write_csv("a,b\n1.0,2.0\n");
        assert!(load_csv(&path3, "y").is_err());
    }

    fn toy_table(n: usize) -> RawTable {
        RawTable {
            feature_names: vec!["a".into(), "b".into()],
            features: DMatrix::from_fn(n, 2, |i, j| (i * 2 + j) as f64),
            target: DVector::from_fn(n, |i, _| i as f64),
            target_name: "y".into(),
        }
    }

    #[test]
    fn split_examples() {
        let raw = toy_table(10);
        let spec = SplitSpec { test_fraction: 0.1, seed: 1 };
        let (train, test) = split(&raw, &spec).unwrap();
        assert_eq!((train.n(), test.n()), (9, 1));
        let (train2, test2) = split(&raw, &spec).unwrap();
        assert_eq!(train.target, train2.target);
        assert_eq!(test.target, test2.target);
        // different seeds give mostly different test sets
        let mut distinct = std::collections::HashSet::new();
        for seed in 0..20 {
            let (_, t) = split(&raw, &SplitSpec { test_fraction: 0.1, seed }).unwrap();
            distinct.insert(t.target[0] as i64);
        }
        assert!(distinct.len() >= 6, "only {} distinct test rows over 20 seeds", distinct.len());
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let raw = toy_table(23);
        let (train, test) = split(&raw, &SplitSpec { test_fraction: 0.3, seed: 4 }).unwrap();
        let mut seen: Vec<i64> = train
            .target
            .iter()
            .chain(test.target.iter())
            .map(|&v| v as i64)
            .collect();
        seen.sort_unstable();
        let expect: Vec<i64> = (0..23).collect();
        assert_eq!(seen, expect);
    }

    #[test]
    fn fit_transform_bounds_and_standardization() {
        let train = RawTable {
            feature_names: vec!["a".into(), "c".into()],
            features: DMatrix::from_row_slice(4, 2, &[0.0, 7.0, 2.0, 7.0, 4.0, 7.0, 1.0, 7.0]),
            target: DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]),
            target_name: "y".into(),
        };
        let test = RawTable {
            feature_names: train.feature_names.clone(),
            features: DMatrix::from_row_slice(1, 2, &[8.0, 7.0]),
            target: DVector::from_vec(vec![9.0]),
            target_name: "y".into(),
        };
        let (tr, te, pre) = fit_transform(&train, &test).unwrap();
        // train column min -> -0.5, max -> +0.5
        assert_relative_eq!(tr.x[(0, 0)], -0.5);
        assert_relative_eq!(tr.x[(2, 0)], 0.5);
        // constant column -> 0 after centering
        for i in 0..4 {
            assert_eq!(tr.x[(i, 1)], 0.0);
        }
        // out-of-range test value passes through the affine map unclipped
        assert_relative_eq!(te.x[(0, 0)], 8.0 / 4.0 - 0.5);
        // standardized target: mean 0, sample sd 1
        let m = tr.y.sum() / 4.0;
        let sd = (tr.y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 3.0).sqrt();
        assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
        // round trip through de-standardization
        let back = destandardize_targets(&tr.y, &pre);
        for (a, b) in back.iter().zip(train.target.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_target_is_rejected() {
        let train = RawTable {
            feature_names: vec!["a".into()],
            features: DMatrix::from_fn(3, 1, |i, _| i as f64),
            target: DVector::from_element(3, 2.0),
            target_name: "y".into(),
        };
        assert!(matches!(fit_transform(&train, &train.clone()), Err(Error::Data(_))));
    }

    #[test]
    fn no_leakage_from_test_extremes() {
        let raw = toy_table(12);
        let (train, test) = split(&raw, &SplitSpec { test_fraction: 0.25, seed: 0 }).unwrap();
        let (_, _, pre_clean) = fit_transform(&train, &test).unwrap();
        // refit with the test rows appended to training: statistics change
        // whenever the test split contains a column extreme
        let mut all_rows: Vec<usize> = (0..raw.n()).collect();
        let merged = raw.take_rows(&all_rows.drain(..).collect::<Vec<_>>());
        let (_, _, pre_leaky) = fit_transform(&merged, &test).unwrap();
        let clean_extremes: Vec<f64> = pre_clean
            .feature_min
            .iter()
            .chain(pre_clean.feature_max.iter())
            .cloned()
            .collect();
        let leaky_extremes: Vec<f64> = pre_leaky
            .feature_min
            .iter()
            .chain(pre_leaky.feature_max.iter())
            .cloned()
            .collect();
        assert_ne!(clean_extremes, leaky_extremes);
    }

    #[test]
    fn destandardize_identity_and_table_consistency() {
        let identity = Preprocessor {
            feature_min: vec![0.0],
            feature_max: vec![1.0],
            mu_y: 0.0,
            sigma_y: 1.0,
            feature_names: vec!["a".into()],
            target_name: "y".into(),
        };
        let preds = vec![PredictiveMoments { mu_star: 0.3, var_star: 0.58 }];
        assert_eq!(destandardize(&preds, &identity), preds);

        // reference consistency: 4.417e-4 x 34.231^2 ~ 0.51759 within 0.1%
        let sd = 34.231;
        let orig = destandardize_nugget(4.417e-4, &Preprocessor { sigma_y: sd, ..identity });
        assert!((orig - 0.51759).abs() / 0.51759 < 1e-3, "got {orig}");
    }

    #[test]
    fn affine_metric_consistency() {
        // MAE and RMSE on the original scale equal sigma_y times the z-scale
        // values; variances scale by sigma_y^2
        let pre = Preprocessor {
            feature_min: vec![0.0],
            feature_max: vec![1.0],
            mu_y: 11.0,
            sigma_y: 3.5,
            feature_names: vec!["a".into()],
            target_name: "y".into(),
        };
        let preds_z = vec![
            PredictiveMoments { mu_star: 0.2, var_star: 0.5 },
            PredictiveMoments { mu_star: -0.7, var_star: 0.9 },
            PredictiveMoments { mu_star: 1.4, var_star: 0.1 },
        ];
        let y_z = DVector::from_vec(vec![0.0, -0.5, 1.0]);
        let m_z = compute_metrics(&preds_z, &y_z, MetricScale::Standardized).unwrap();
        let preds_o = destandardize(&preds_z, &pre);
        let y_o = destandardize_targets(&y_z, &pre);
        let m_o = compute_metrics(&preds_o, &y_o, MetricScale::Original).unwrap();
        assert_relative_eq!(m_o.mae, m_z.mae * pre.sigma_y, max_relative = 1e-10);
        assert_relative_eq!(m_o.rmse, m_z.rmse * pre.sigma_y, max_relative = 1e-10);
    }
}
