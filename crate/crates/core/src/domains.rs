//! Multi-domain data.
//!
//! Synthetic domains are Gaussian class-conditionals pushed through a
//! per-domain rotation (first two coordinates), scale and shift, so the
//! divergence between two domains has a closed form. CSV suites carry no
//! generative spec; their divergence falls back to a k-NN estimate.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::Batch;
use crate::rng::RngStream;
use crate::{Error, Result};

/// Generative parameters of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: String,
    /// Degrees, applied in the plane of the first two coordinates.
    pub rotation_deg: f64,
    pub shift: Vec<f64>,
    pub scale: f64,
    pub class_means: Vec<Vec<f64>>,
    pub class_cov_diag: Vec<Vec<f64>>,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("domain `{}`: {m}", self.domain_id)));
        let d = self.dim();
        if d < 2 {
            return bad(format!("feature dimension {d} is below 2"));
        }
        if self.class_means.len() < 2 {
            return bad("needs at least two classes".into());
        }
        if self.class_cov_diag.len() != self.class_means.len() {
            return bad("class_means and class_cov_diag disagree on class count".into());
        }
        if self
            .class_means
            .iter()
            .chain(&self.class_cov_diag)
            .any(|v| v.len() != d)
        {
            return bad(format!("class vectors must have dimension {d}"));
        }
        if self
            .class_cov_diag
            .iter()
            .flatten()
            .any(|&c| !(c > 0.0 && c.is_finite()))
        {
            return bad("covariance entries must be positive".into());
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad("scale must be positive".into());
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        Ok(())
    }

    /// `scale * R * class_means[k] + shift`.
    pub fn transformed_mean(&self, class: usize) -> Vec<f64> {
        let mut m = self.class_means[class].clone();
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (x, y) = (m[0], m[1]);
        m[0] = c * x - s * y;
        m[1] = s * x + c * y;
        m.iter_mut()
            .zip(&self.shift)
            .for_each(|(v, sh)| *v = self.scale * *v + sh);
        m
    }
}

/// Labeled samples from one domain. Row `i` of `features` has label `labels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub spec: Option<DomainSpec>,
}

impl DomainDataset {
    pub fn new(domain_id: impl Into<String>, features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let domain_id = domain_id.into();
        if labels.is_empty() {
            return Err(Error::Empty(format!("domain `{domain_id}` has no samples")));
        }
        if features.nrows() != labels.len() {
            return Err(Error::dim(
                format!("domain `{domain_id}` labels"),
                features.nrows(),
                labels.len(),
            ));
        }
        Ok(Self {
            domain_id,
            features,
            labels,
            spec: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn sample(&self, i: usize) -> (ArrayView1<'_, f64>, usize) {
        (self.features.row(i), self.labels[i])
    }

    /// Rows `indices`, in that order, as a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch::new(features, labels)
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.labels.clone())
    }

    /// Rows of a given class.
    pub fn class_rows(&self, class: usize) -> Array2<f64> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
        self.features.select(Axis(0), &idx)
    }
}

/// All domains of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSuite {
    pub datasets: Vec<DomainDataset>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl DomainSuite {
    pub fn new(datasets: Vec<DomainDataset>, num_classes: usize) -> Result<Self> {
        let first = datasets
            .first()
            .ok_or_else(|| Error::Empty("suite has no domains".into()))?;
        let feature_dim = first.dim();
        for d in &datasets {
            if d.dim() != feature_dim {
                return Err(Error::dim(
                    format!("domain `{}` features", d.domain_id),
                    feature_dim,
                    d.dim(),
                ));
            }
            if let Some(&y) = d.labels.iter().find(|&&y| y >= num_classes) {
                return Err(Error::IndexOutOfRange {
                    index: y,
                    len: num_classes,
                });
            }
        }
        if datasets.len() < 3 {
            log::warn!(
                "suite has {} domains; meta-split sampling needs at least 3 (two sources plus a target)",
                datasets.len()
            );
        }
        Ok(Self {
            datasets,
            feature_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }
}

/// Draws every domain of `specs`. Samples are ordered by class, then draw.
pub fn generate_synthetic_suite(specs: &[DomainSpec]) -> Result<DomainSuite> {
    let first = specs.first().ok_or_else(|| Error::Empty("no domain specs".into()))?;
    let (k, d) = (first.num_classes(), first.dim());
    let mut datasets = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        if spec.num_classes() != k || spec.dim() != d {
            return Err(Error::Structure(format!(
                "domain `{}` has {} classes in {} dimensions, expected {k} in {d}",
                spec.domain_id,
                spec.num_classes(),
                spec.dim()
            )));
        }
        datasets.push(generate_domain(spec));
    }
    DomainSuite::new(datasets, k)
}

fn generate_domain(spec: &DomainSpec) -> DomainDataset {
    let mut rng = RngStream::new(spec.seed, 0).rng();
    let (k, d, n) = (spec.num_classes(), spec.dim(), spec.samples_per_class);
    let mut features = Array2::zeros((k * n, d));
    let mut labels = Vec::with_capacity(k * n);
    for class in 0..k {
        let mean = spec.transformed_mean(class);
        let std: Vec<f64> = spec.class_cov_diag[class].iter().map(|c| c.sqrt()).collect();
        for i in 0..n {
            let mut row = features.row_mut(class * n + i);
            for j in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                row[j] = mean[j] + std[j] * z;
            }
            labels.push(class);
        }
    }
    DomainDataset {
        domain_id: spec.domain_id.clone(),
        features,
        labels,
        spec: Some(spec.clone()),
    }
}

/// Reads a suite from the `domain,label,f0,...` CSV layout. Domains appear
/// in order of first occurrence.
pub fn load_csv_suite(path: impl AsRef<Path>) -> Result<DomainSuite> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_suite(file)
}

pub fn read_csv_suite<R: std::io::Read>(reader: R) -> Result<DomainSuite> {
    let mut reader = std::io::BufReader::new(reader);
    check_csv_version(&mut reader)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(&e, 1))?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "domain" || cols[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with `domain,label` followed by feature columns".into(),
        });
    }
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("feature column {j} must be named `f{j}`, found `{c}`"),
            });
        }
    }
    let dim = cols.len() - 2;

    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    let mut num_classes = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(&e, 0))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", dim + 2, record.len()),
            });
        }
        let domain = record[0].trim().to_string();
        let label: usize = record[1].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("label `{}` is not a non-negative integer", &record[1]),
        })?;
        let slot = *index.entry(domain.clone()).or_insert_with(|| {
            order.push(domain);
            rows.push((Vec::new(), Vec::new()));
            order.len() - 1
        });
        for field in record.iter().skip(2) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("feature `{field}` is not a decimal number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("feature `{field}` is not finite"),
                });
            }
            rows[slot].0.push(v);
        }
        rows[slot].1.push(label);
        num_classes = num_classes.max(label + 1);
    }
    if order.is_empty() {
        return Err(Error::Empty("CSV suite has a header but no samples".into()));
    }
    let datasets = order
        .into_iter()
        .zip(rows)
        .map(|(id, (flat, labels))| {
            let features =
                Array2::from_shape_vec((labels.len(), dim), flat).map_err(|e| Error::Structure(e.to_string()))?;
            DomainDataset::new(id, features, labels)
        })
        .collect::<Result<Vec<_>>>()?;
    DomainSuite::new(datasets, num_classes.max(2))
}

/// Version written as a leading `# format_version=N` comment line of every
/// CSV artifact. Files without the line are read as the current version.
pub const CSV_FORMAT_VERSION: u32 = 1;

/// Checks an optional `# format_version=N` first line without consuming it.
pub(crate) fn check_csv_version<R: std::io::Read>(reader: &mut std::io::BufReader<R>) -> Result<()> {
    use std::io::BufRead;
    let buf = reader.fill_buf().map_err(|e| Error::io("csv input", e))?;
    let first = buf.split(|&b| b == b'\n').next().unwrap_or_default();
    let first = String::from_utf8_lossy(first);
    if let Some(v) = first.trim().strip_prefix("# format_version=") {
        match v.trim().parse::<u32>() {
            Ok(CSV_FORMAT_VERSION) => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("unsupported CSV format_version `{v}` (this build reads {CSV_FORMAT_VERSION})"),
                })
            }
        }
    }
    Ok(())
}

pub(crate) fn write_csv_version<W: std::io::Write>(writer: &mut W) -> Result<()> {
    writeln!(writer, "# format_version={CSV_FORMAT_VERSION}").map_err(|e| Error::io("csv output", e))
}

fn csv_error(e: &csv::Error, fallback_line: u64) -> Error {
    Error::Parse {
        line: e.position().map_or(fallback_line, |p| p.line()),
        message: e.to_string(),
    }
}

/// Writes `suite` in the CSV layout with 17 significant digits per feature,
/// after a version comment line.
pub fn write_csv_suite<W: std::io::Write>(suite: &DomainSuite, mut writer: W) -> Result<()> {
    write_csv_version(&mut writer)?;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["domain".to_string(), "label".to_string()];
    header.extend((0..suite.feature_dim).map(|j| format!("f{j}")));
    let csv_err = |e: csv::Error| Error::Parse {
        line: 0,
        message: e.to_string(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for d in &suite.datasets {
        for (row, label) in d.features.rows().into_iter().zip(&d.labels) {
            let mut rec = Vec::with_capacity(suite.feature_dim + 2);
            rec.push(d.domain_id.clone());
            rec.push(label.to_string());
            rec.extend(row.iter().map(|v| format!("{v:.16e}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(())
}

pub fn save_csv_suite(suite: &DomainSuite, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_suite(suite, std::io::BufWriter::new(file))
}

/// Splits off the target domain; sources keep their original order.
pub fn leave_one_domain_out(suite: &DomainSuite, target_index: usize) -> Result<(Vec<DomainDataset>, DomainDataset)> {
    if target_index >= suite.len() {
        return Err(Error::IndexOutOfRange {
            index: target_index,
            len: suite.len(),
        });
    }
    let sources = suite
        .datasets
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_index)
        .map(|(_, d)| d.clone())
        .collect();
    Ok((sources, suite.datasets[target_index].clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlReduction {
    #[default]
    MeanOverClasses,
    MaxOverClasses,
}

impl KlReduction {
    fn reduce(self, values: &[f64]) -> f64 {
        match self {
            KlReduction::MeanOverClasses => values.iter().sum::<f64>() / values.len() as f64,
            KlReduction::MaxOverClasses => values.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// KL(N(mu_a, diag var_a) || N(mu_b, diag var_b)).
pub fn gaussian_kl_diag(mean_a: &[f64], var_a: &[f64], mean_b: &[f64], var_b: &[f64]) -> f64 {
    let mut kl = 0.0;
    for j in 0..mean_a.len() {
        let diff = mean_b[j] - mean_a[j];
        kl += var_a[j] / var_b[j] + diff * diff / var_b[j] - 1.0 + (var_b[j] / var_a[j]).ln();
    }
    0.5 * kl
}

/// Closed-form KL between matched class-conditional Gaussians of two
/// synthetic domains, reduced over classes.
pub fn class_conditional_kl(a: &DomainSpec, b: &DomainSpec, reduction: KlReduction) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if a.num_classes() != b.num_classes() || a.dim() != b.dim() {
        return Err(Error::Structure(format!(
            "domains `{}` and `{}` differ in class count or dimension",
            a.domain_id, b.domain_id
        )));
    }
    let per_class: Vec<f64> = (0..a.num_classes())
        .map(|k| {
            gaussian_kl_diag(
                &a.transformed_mean(k),
                &a.class_cov_diag[k],
                &b.transformed_mean(k),
                &b.class_cov_diag[k],
            )
        })
        .collect();
    Ok(reduction.reduce(&per_class))
}

/// Closed-form divergence between two datasets; requires generative specs.
pub fn dataset_kl(a: &DomainDataset, b: &DomainDataset, reduction: KlReduction) -> Result<f64> {
    match (&a.spec, &b.spec) {
        (Some(sa), Some(sb)) => class_conditional_kl(sa, sb, reduction),
        _ => Err(Error::Unsupported(format!(
            "closed-form divergence needs generative specs for `{}` and `{}`; use the k-NN estimate for loaded data",
            a.domain_id, b.domain_id
        ))),
    }
}

/// k-nearest-neighbour KL estimate from samples (Wang, Kulkarni and Verdú):
/// `d/n * sum ln(nu_k(i) / rho_k(i)) + ln(m / (n - 1))`. Approximate; may
/// come out slightly negative for near-identical distributions.
pub fn knn_kl_divergence(p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>, k: usize) -> Result<f64> {
    let (n, m, d) = (p.nrows(), q.nrows(), p.ncols());
    if q.ncols() != d {
        return Err(Error::dim("k-NN KL sample dimension", d, q.ncols()));
    }
    if k == 0 || n <= k || m < k {
        return Err(Error::InvalidArgument(format!(
            "k-NN KL needs more than k={k} samples per side (have {n} and {m})"
        )));
    }
    let kth = |x: ArrayView1<'_, f64>, set: ArrayView2<'_, f64>, skip: Option<usize>| -> f64 {
        let mut dists: Vec<f64> = set
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != skip)
            .map(|(_, y)| x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        let (_, v, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
        v.sqrt()
    };
    let mut acc = 0.0;
    for (i, x) in p.rows().into_iter().enumerate() {
        let rho = kth(x, p, Some(i)).max(f64::MIN_POSITIVE);
        let nu = kth(x, q, None).max(f64::MIN_POSITIVE);
        acc += (nu / rho).ln();
    }
    Ok(d as f64 / n as f64 * acc + (m as f64 / (n as f64 - 1.0)).ln())
}

/// Class-conditional k-NN KL between two datasets, negative estimates clipped to 0.
pub fn class_conditional_knn_kl(
    a: &DomainDataset,
    b: &DomainDataset,
    num_classes: usize,
    k: usize,
    reduction: KlReduction,
) -> Result<f64> {
    let per_class = (0..num_classes)
        .map(|c| {
            let (pa, pb) = (a.class_rows(c), b.class_rows(c));
            knn_kl_divergence(pa.view(), pb.view(), k).map(|v| v.max(0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduction.reduce(&per_class))
}

/// Radius and polar angles (degrees) of the default class means.
pub const DEFAULT_CLASS_RADIUS: f64 = 3.0;
pub const DEFAULT_CLASS_ANGLES_DEG: [f64; 3] = [0.0, 50.0, 80.0];
pub const DEFAULT_CLASS_VARIANCE: f64 = 0.3;

/// Three class means on an arc of radius 3 at 0, 50 and 80 degrees. Classes
/// differ only in angle, so domain rotation moves a class towards its
/// neighbour's source position while radial scaling preserves labels.
pub fn default_class_means() -> Vec<Vec<f64>> {
    DEFAULT_CLASS_ANGLES_DEG
        .iter()
        .map(|a| {
            let t = a.to_radians();
            vec![DEFAULT_CLASS_RADIUS * t.cos(), DEFAULT_CLASS_RADIUS * t.sin()]
        })
        .collect()
}

/// Isotropic class covariance.
pub fn default_class_cov_diag() -> Vec<Vec<f64>> {
    vec![vec![DEFAULT_CLASS_VARIANCE; 2]; 3]
}

/// A rotated-domain suite: one 2-D, 3-class domain per angle, sharing class
/// geometry and differing only in rotation and seed.
pub fn rotated_suite_specs(angles_deg: &[f64], samples_per_class: usize, seed: u64) -> Vec<DomainSpec> {
    angles_deg
        .iter()
        .enumerate()
        .map(|(i, &angle)| DomainSpec {
            domain_id: format!("rot{angle}"),
            rotation_deg: angle,
            shift: vec![0.0, 0.0],
            scale: 1.0,
            class_means: default_class_means(),
            class_cov_diag: default_class_cov_diag(),
            samples_per_class,
            seed: crate::rng::splitmix64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9)),
        })
        .collect()
}
