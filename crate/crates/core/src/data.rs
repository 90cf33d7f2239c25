//! Multi-label LibSVM ingestion, feature reduction and the Hamming loss.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

/// Dense features with binary labels, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedDataset {
    name: String,
    rows: usize,
    num_features: usize,
    num_labels: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
}

impl SupervisedDataset {
    pub fn new(
        name: impl Into<String>,
        num_features: usize,
        num_labels: usize,
        features: Vec<f64>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if num_features == 0 || num_labels == 0 {
            return Err(CoreError::arg("feature and label widths must be positive"));
        }
        if !features.len().is_multiple_of(num_features) {
            return Err(CoreError::arg(format!(
                "{} feature values do not fill rows of width {num_features}",
                features.len()
            )));
        }
        let rows = features.len() / num_features;
        if rows == 0 {
            return Err(CoreError::arg("dataset has no rows"));
        }
        if labels.len() != rows * num_labels {
            return Err(CoreError::arg(format!(
                "{} label values for {rows} rows of width {num_labels}",
                labels.len()
            )));
        }
        if labels.iter().any(|&b| b > 1) {
            return Err(CoreError::arg("labels must be 0 or 1"));
        }
        Ok(Self {
            name: name.into(),
            rows,
            num_features,
            num_labels,
            features,
            labels,
        })
    }

    pub fn from_rows(
        name: impl Into<String>,
        features: &[Vec<f64>],
        labels: &[Vec<u8>],
    ) -> Result<Self> {
        let p = features.first().map_or(0, Vec::len);
        let q = labels.first().map_or(0, Vec::len);
        if features.len() != labels.len() {
            return Err(CoreError::arg("feature and label row counts differ"));
        }
        if features.iter().any(|r| r.len() != p) || labels.iter().any(|r| r.len() != q) {
            return Err(CoreError::arg("ragged rows"));
        }
        Self::new(name, p, q, features.concat(), labels.concat())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn labels(&self, i: usize) -> &[u8] {
        &self.labels[i * self.num_labels..(i + 1) * self.num_labels]
    }

    pub fn feature_data(&self) -> &[f64] {
        &self.features
    }

    /// The first `count` rows.
    pub fn head(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.rows {
            return Err(CoreError::arg(format!(
                "cannot take {count} of {} rows",
                self.rows
            )));
        }
        Self::new(
            self.name.clone(),
            self.num_features,
            self.num_labels,
            self.features[..count * self.num_features].to_vec(),
            self.labels[..count * self.num_labels].to_vec(),
        )
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.features.iter().map(|v| v * v).sum()
    }
}

/// Parsed file before densification; rows hold `(0-based column, value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    pub name: String,
    pub num_features: usize,
    pub num_labels: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub labels: Vec<Vec<usize>>,
}

impl SparseDataset {
    pub fn to_dense(&self) -> Result<SupervisedDataset> {
        let (p, q) = (self.num_features, self.num_labels);
        let mut features = vec![0.0; self.rows.len() * p];
        let mut labels = vec![0u8; self.rows.len() * q];
        for (i, (row, lbl)) in self.rows.iter().zip(&self.labels).enumerate() {
            for &(c, v) in row {
                features[i * p + c] = v;
            }
            for &l in lbl {
                labels[i * q + l] = 1;
            }
        }
        SupervisedDataset::new(self.name.clone(), p, q, features, labels)
    }
}

/// Optional fixed widths, so that a test file shares the training file's shape.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Dims {
    pub num_features: Option<usize>,
    pub num_labels: Option<usize>,
}

pub fn parse_multilabel_libsvm(path: impl AsRef<Path>) -> Result<SupervisedDataset> {
    parse_multilabel_libsvm_with(path, Dims::default())
}

pub fn parse_multilabel_libsvm_with(path: impl AsRef<Path>, dims: Dims) -> Result<SupervisedDataset> {
    read_sparse_libsvm(path, dims)?.to_dense()
}

pub fn read_sparse_libsvm(path: impl AsRef<Path>, dims: Dims) -> Result<SparseDataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CoreError::MissingDataset(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_sparse_str(&text, &name, dims)
}

/// Parses `lbl[,lbl...] idx:val ...` lines; blank lines and `#` comments are skipped.
pub fn parse_sparse_str(text: &str, name: &str, dims: Dims) -> Result<SparseDataset> {
    let err = |line: usize, message: String| CoreError::Parse {
        path: name.to_string(),
        line,
        message,
    };
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut max_feature = 0usize;
    let mut max_label: Option<usize> = None;
    for (k, raw) in text.lines().enumerate() {
        let lineno = k + 1;
        let line = raw.split('#').next().unwrap_or("").trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace().peekable();
        let mut lbl = Vec::new();
        // a line that starts with whitespace or a feature token has no labels
        let starts_blank = line.starts_with(char::is_whitespace);
        if !starts_blank {
            if let Some(first) = tokens.peek() {
                if !first.contains(':') {
                    let first = tokens.next().unwrap_or_default();
                    for part in first.split(',').filter(|s| !s.is_empty()) {
                        let l: usize = part
                            .parse()
                            .map_err(|_| err(lineno, format!("bad label `{part}`")))?;
                        lbl.push(l);
                    }
                }
            }
        }
        lbl.sort_unstable();
        lbl.dedup();
        if let Some(&m) = lbl.last() {
            max_label = Some(max_label.map_or(m, |c| c.max(m)));
        }
        let mut row = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(lineno, format!("expected idx:val, got `{tok}`")))?;
            let idx: i64 = idx
                .parse()
                .map_err(|_| err(lineno, format!("bad feature index `{idx}`")))?;
            if idx <= 0 {
                return Err(err(lineno, format!("feature index {idx} is not 1-based")));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| err(lineno, format!("bad feature value `{val}`")))?;
            if !val.is_finite() {
                return Err(err(lineno, format!("non-finite feature value `{val}`")));
            }
            let col = (idx - 1) as usize;
            max_feature = max_feature.max(col + 1);
            row.push((col, val));
        }
        row.sort_by_key(|&(c, _)| c);
        if row.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(err(lineno, "duplicate feature index".into()));
        }
        rows.push(row);
        labels.push(lbl);
    }
    if rows.is_empty() {
        return Err(err(0, "file has no examples".into()));
    }
    let inferred_labels = max_label.map_or(0, |m| m + 1);
    let num_features = match dims.num_features {
        Some(p) if p < max_feature => {
            return Err(err(0, format!("feature index {max_feature} exceeds width {p}")))
        }
        Some(p) => p,
        None => max_feature,
    };
    let num_labels = match dims.num_labels {
        Some(q) if q < inferred_labels => {
            return Err(err(0, format!("label {} exceeds width {q}", inferred_labels - 1)))
        }
        Some(q) => q,
        None => inferred_labels,
    };
    if num_features == 0 || num_labels == 0 {
        return Err(err(0, "no features or no labels present".into()));
    }
    Ok(SparseDataset {
        name: name.to_string(),
        num_features,
        num_labels,
        rows,
        labels,
    })
}

/// Writes nonzero features only; values use the shortest exact decimal form.
pub fn to_libsvm_string(data: &SupervisedDataset) -> String {
    let mut out = String::new();
    for i in 0..data.len() {
        let lbl: Vec<String> = data
            .labels(i)
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(l, _)| l.to_string())
            .collect();
        out.push_str(&lbl.join(","));
        for (c, &v) in data.features(i).iter().enumerate() {
            if v != 0.0 {
                let _ = write!(out, " {}:{v:?}", c + 1);
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_libsvm(data: &SupervisedDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_libsvm_string(data)).map_err(|e| CoreError::io(path, e))
}

/// Number of positions where the two label vectors differ.
pub fn hamming_loss(y: &[u8], y_star: &[u8]) -> Result<usize> {
    if y.len() != y_star.len() {
        return Err(CoreError::arg(format!(
            "label vectors of length {} and {}",
            y.len(),
            y_star.len()
        )));
    }
    Ok(hamming(y, y_star))
}

pub(crate) fn hamming(y: &[u8], y_star: &[u8]) -> usize {
    y.iter().zip(y_star).filter(|(a, b)| a != b).count()
}

/// Row-major feature matrix that can be multiplied from either side.
trait FeatureOperator {
    fn shape(&self) -> (usize, usize);
    /// X · M
    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64>;
    /// Xᵀ · M
    fn apply_t(&self, m: &DMatrix<f64>) -> DMatrix<f64>;
}

impl FeatureOperator for SupervisedDataset {
    fn shape(&self) -> (usize, usize) {
        (self.rows, self.num_features)
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows, m.ncols());
        for i in 0..self.rows {
            for (c, &x) in self.features(i).iter().enumerate() {
                if x != 0.0 {
                    for j in 0..m.ncols() {
                        out[(i, j)] += x * m[(c, j)];
                    }
                }
            }
        }
        out
    }

    fn apply_t(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.num_features, m.ncols());
        for i in 0..self.rows {
            for (c, &x) in self.features(i).iter().enumerate() {
                if x != 0.0 {
                    for j in 0..m.ncols() {
                        out[(c, j)] += x * m[(i, j)];
                    }
                }
            }
        }
        out
    }
}

impl FeatureOperator for SparseDataset {
    fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.num_features)
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows.len(), m.ncols());
        for (i, row) in self.rows.iter().enumerate() {
            for &(c, x) in row {
                for j in 0..m.ncols() {
                    out[(i, j)] += x * m[(c, j)];
                }
            }
        }
        out
    }

    fn apply_t(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.num_features, m.ncols());
        for (i, row) in self.rows.iter().enumerate() {
            for &(c, x) in row {
                for j in 0..m.ncols() {
                    out[(c, j)] += x * m[(i, j)];
                }
            }
        }
        out
    }
}

pub const SVD_POWER_ITERATIONS: usize = 10;
pub const SVD_OVERSAMPLING: usize = 10;
pub const SVD_SEED: u64 = 0x7376_6400;

/// Top right singular directions of a feature matrix (uncentered).
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    /// `p × k`, column-major as stored by nalgebra.
    components: DMatrix<f64>,
    singular_values: Vec<f64>,
}

impl TruncatedSvd {
    pub fn fit(data: &SupervisedDataset, k: usize, seed: u64) -> Result<Self> {
        fit_operator(data, k, seed)
    }

    pub fn fit_sparse(data: &SparseDataset, k: usize, seed: u64) -> Result<Self> {
        fit_operator(data, k, seed)
    }

    pub fn rank(&self) -> usize {
        self.components.ncols()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn transform(&self, data: &SupervisedDataset) -> Result<SupervisedDataset> {
        self.project(data, data.name(), data.num_labels(), |i| data.labels(i).to_vec())
    }

    pub fn transform_sparse(&self, data: &SparseDataset) -> Result<SupervisedDataset> {
        let q = data.num_labels;
        self.project(data, &data.name, q, |i| {
            let mut y = vec![0u8; q];
            for &l in &data.labels[i] {
                y[l] = 1;
            }
            y
        })
    }

    fn project<O: FeatureOperator>(
        &self,
        op: &O,
        name: &str,
        num_labels: usize,
        labels: impl Fn(usize) -> Vec<u8>,
    ) -> Result<SupervisedDataset> {
        let (n, p) = op.shape();
        if p != self.components.nrows() {
            return Err(CoreError::arg(format!(
                "projection fitted on {} features, data has {p}",
                self.components.nrows()
            )));
        }
        let z = op.apply(&self.components);
        let k = self.rank();
        let mut features = Vec::with_capacity(n * k);
        let mut lbl = Vec::with_capacity(n * num_labels);
        for i in 0..n {
            features.extend((0..k).map(|j| z[(i, j)]));
            lbl.extend(labels(i));
        }
        SupervisedDataset::new(name, k, num_labels, features, lbl)
    }

    /// Share of ‖X‖²_F captured by the projection onto the components.
    pub fn explained_variance_ratio(&self, data: &SupervisedDataset) -> f64 {
        let z = data.apply(&self.components);
        let total = data.frobenius_sq();
        if total == 0.0 {
            return 1.0;
        }
        z.iter().map(|v| v * v).sum::<f64>() / total
    }
}

fn orthonormal_basis(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

fn fit_operator<O: FeatureOperator>(op: &O, k: usize, seed: u64) -> Result<TruncatedSvd> {
    let (n, p) = op.shape();
    if k == 0 || k > p {
        return Err(CoreError::arg(format!("target dimension {k} outside 1..={p}")));
    }
    if k > n {
        return Err(CoreError::arg(format!(
            "target dimension {k} exceeds the {n} available rows"
        )));
    }
    let width = (k + SVD_OVERSAMPLING).min(p).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(p, width, |_, _| rng.gen_range(-1.0..1.0));
    let mut q = orthonormal_basis(op.apply(&omega));
    for _ in 0..SVD_POWER_ITERATIONS {
        let z = orthonormal_basis(op.apply_t(&q));
        q = orthonormal_basis(op.apply(&z));
    }
    // B = Qᵀ X, stored transposed as Xᵀ Q (p × width)
    let bt = op.apply_t(&q);
    let svd = bt.svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| CoreError::arg("singular value decomposition failed"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    order.truncate(k);
    let components = DMatrix::from_fn(p, k, |r, c| u[(r, order[c])]);
    let singular_values = order.iter().map(|&i| svd.singular_values[i]).collect();
    Ok(TruncatedSvd {
        components,
        singular_values,
    })
}

/// Projects onto the top-`k` right singular directions of the data itself.
pub fn truncated_svd_reduce(data: &SupervisedDataset, k: usize) -> Result<SupervisedDataset> {
    TruncatedSvd::fit(data, k, SVD_SEED)?.transform(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_line() {
        let d = parse_sparse_str("0,2 1:0.5 3:1.0\n", "t", Dims::default())
            .unwrap()
            .to_dense()
            .unwrap();
        assert_eq!(d.num_labels(), 3);
        assert_eq!(d.num_features(), 3);
        assert_eq!(d.labels(0), &[1, 0, 1]);
        assert_eq!(d.features(0), &[0.5, 0.0, 1.0]);
    }

    #[test]
    fn empty_label_set_is_allowed() {
        let d = parse_sparse_str("1 1:2\n 2:3\n", "t", Dims::default())
            .unwrap()
            .to_dense()
            .unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(1), &[0, 0]);
        assert_eq!(d.features(1), &[0.0, 3.0]);
        let d = parse_sparse_str("1 1:2\n2:3\n", "t", Dims::default()).unwrap();
        assert!(d.labels[1].is_empty());
    }

    #[test]
    fn zero_or_negative_index_reports_line() {
        for bad in ["0 1:1\n1 0:2\n", "0 1:1\n1 -3:2\n"] {
            match parse_sparse_str(bad, "f", Dims::default()) {
                Err(CoreError::Parse { line, .. }) => assert_eq!(line, 2),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn malformed_token_reports_line() {
        match parse_sparse_str("0 1:1\n\n1 2:x\n", "f", Dims::default()) {
            Err(CoreError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_sparse_str("0 1:1 oops\n", "f", Dims::default()).is_err());
        assert!(parse_sparse_str("a,b 1:1\n", "f", Dims::default()).is_err());
    }

    #[test]
    fn fixed_dims_pad_and_reject() {
        let dims = Dims {
            num_features: Some(5),
            num_labels: Some(4),
        };
        let d = parse_sparse_str("0 1:1\n", "t", dims).unwrap();
        assert_eq!((d.num_features, d.num_labels), (5, 4));
        let small = Dims {
            num_features: Some(1),
            num_labels: None,
        };
        assert!(parse_sparse_str("0 2:1\n", "t", small).is_err());
    }

    #[test]
    fn missing_file_is_reported() {
        assert!(matches!(
            parse_multilabel_libsvm("/nonexistent/scene_train"),
            Err(CoreError::MissingDataset(_))
        ));
    }

    #[test]
    fn hamming_examples() {
        let y_star = [1, 0, 1, 1, 0, 0];
        assert_eq!(hamming_loss(&y_star, &y_star).unwrap(), 0);
        let comp: Vec<u8> = y_star.iter().map(|b| 1 - b).collect();
        assert_eq!(hamming_loss(&comp, &y_star).unwrap(), 6);
        assert_eq!(hamming_loss(&[1, 1, 1], &[1, 0, 1]).unwrap(), 1);
        assert!(hamming_loss(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn rank_two_matrix_is_fully_explained() {
        // X = A·B with A: 30×2, B: 2×7
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..14).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x = vec![0.0; 30 * 7];
        for i in 0..30 {
            for j in 0..7 {
                x[i * 7 + j] = a[i * 2] * b[j] + a[i * 2 + 1] * b[7 + j];
            }
        }
        let d = SupervisedDataset::new("r2", 7, 1, x, vec![0; 30]).unwrap();
        let svd = TruncatedSvd::fit(&d, 2, 1).unwrap();
        assert!((svd.explained_variance_ratio(&d) - 1.0).abs() < 1e-8);
        let one = TruncatedSvd::fit(&d, 1, 1).unwrap();
        assert!(one.explained_variance_ratio(&d) < 1.0 - 1e-6);
    }

    #[test]
    fn full_rank_projection_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..40 * 6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let d = SupervisedDataset::new("f", 6, 2, x, vec![0; 80]).unwrap();
        let r = truncated_svd_reduce(&d, 6).unwrap();
        assert_eq!(r.num_features(), 6);
        assert_eq!(r.labels(3), d.labels(3));
        let rel = (r.frobenius_sq().sqrt() - d.frobenius_sq().sqrt()).abs() / d.frobenius_sq().sqrt();
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn reduce_rejects_oversized_target() {
        let d = SupervisedDataset::new("f", 2, 1, vec![1.0, 2.0, 3.0, 4.0], vec![0, 1]).unwrap();
        assert!(truncated_svd_reduce(&d, 3).is_err());
        assert!(truncated_svd_reduce(&d, 0).is_err());
    }

    #[test]
    fn sparse_and_dense_fits_agree() {
        let text = "0 1:1 3:2\n1 2:1.5\n0,1 1:-1 2:0.5 3:1\n 3:4\n1 1:2 2:2\n";
        let sparse = parse_sparse_str(text, "s", Dims::default()).unwrap();
        let dense = sparse.to_dense().unwrap();
        let a = TruncatedSvd::fit(&dense, 2, 3).unwrap().transform(&dense).unwrap();
        let b = TruncatedSvd::fit_sparse(&sparse, 2, 3)
            .unwrap()
            .transform_sparse(&sparse)
            .unwrap();
        for (u, v) in a.feature_data().iter().zip(b.feature_data()) {
            assert!((u - v).abs() < 1e-10);
        }
        assert_eq!(a.labels(2), &[1, 1]);
    }
}
