use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::spec::{label_posterior, ScmSpec};
use crate::error::{Result, TcmError};
use crate::numerics::{Matrix, RngStream, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "s")]
    Source,
    #[serde(rename = "t")]
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "s",
            Domain::Target => "t",
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Domain {
    type Err = TcmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s" => Ok(Domain::Source),
            "t" => Ok(Domain::Target),
            other => Err(TcmError::Contract(format!("unknown domain tag `{other}`"))),
        }
    }
}

/// Ground truth kept for evaluation only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenColumns {
    pub y: Vec<usize>,
    pub u: Matrix,
    pub noise: Matrix,
}

/// One sample with its ground truth, for evaluation code.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub x: Vector,
    pub y: Option<usize>,
    pub domain: Domain,
    pub u_true: Option<Vector>,
}

/// Samples from one domain, stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec_hash: String,
    pub domain: Domain,
    pub seed: u64,
    x: Matrix,
    labels: Vec<Option<usize>>,
    hidden: Option<HiddenColumns>,
}

impl Dataset {
    pub fn from_parts(
        spec_hash: String,
        domain: Domain,
        seed: u64,
        x: Matrix,
        labels: Vec<Option<usize>>,
        hidden: Option<HiddenColumns>,
    ) -> Result<Self> {
        if labels.len() != x.rows() {
            return Err(TcmError::shape(
                "Dataset",
                format!("{} labels for {} rows", labels.len(), x.rows()),
            ));
        }
        if domain == Domain::Target && labels.iter().any(Option::is_some) {
            return Err(TcmError::Contract(
                "target labels must not be learner-visible".into(),
            ));
        }
        if let Some(h) = &hidden {
            if h.y.len() != x.rows() || h.u.rows() != x.rows() || h.noise.shape() != x.shape() {
                return Err(TcmError::shape(
                    "Dataset",
                    "hidden columns do not match the feature rows",
                ));
            }
        }
        if !x.is_finite() {
            return Err(TcmError::numeric("Dataset", "non-finite features"));
        }
        Ok(Dataset {
            spec_hash,
            domain,
            seed,
            x,
            labels,
            hidden,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.x
    }

    pub fn learner_labels_raw(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// Labels a learner may train on. Errors on target data.
    pub fn labels(&self) -> Result<Vec<usize>> {
        if self.domain == Domain::Target {
            return Err(TcmError::Contract(
                "target labels are evaluation-only".into(),
            ));
        }
        self.labels
            .iter()
            .map(|l| l.ok_or_else(|| TcmError::Contract("source sample without a label".into())))
            .collect()
    }

    pub fn hidden(&self) -> Result<&HiddenColumns> {
        self.hidden
            .as_ref()
            .ok_or_else(|| TcmError::Contract("dataset carries no evaluation-only columns".into()))
    }

    pub fn has_hidden(&self) -> bool {
        self.hidden.is_some()
    }

    /// Copy with all evaluation-only columns removed.
    pub fn learner_view(&self) -> Dataset {
        Dataset {
            hidden: None,
            ..self.clone()
        }
    }

    pub fn with_hidden(mut self, hidden: HiddenColumns) -> Result<Dataset> {
        if hidden.y.len() != self.len()
            || hidden.noise.shape() != self.x.shape()
            || hidden.u.rows() != self.len()
        {
            return Err(TcmError::shape(
                "Dataset::with_hidden",
                "hidden columns do not match the feature rows",
            ));
        }
        self.hidden = Some(hidden);
        Ok(self)
    }

    pub fn sample(&self, i: usize) -> LabeledSample {
        let hidden = self.hidden.as_ref();
        LabeledSample {
            x: self.x.row(i).to_vec(),
            y: self.labels[i].or_else(|| hidden.map(|h| h.y[i])),
            domain: self.domain,
            u_true: hidden.map(|h| h.u.row(i).to_vec()),
        }
    }
}

/// Draws `count` samples from one domain of `spec`.
pub fn sample_dataset(
    spec: &ScmSpec,
    domain: Domain,
    count: usize,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if count == 0 {
        return Err(TcmError::Contract("sample_dataset needs count > 0".into()));
    }
    spec.validate()?;
    let mean = spec.mean(domain);
    let mut x = Matrix::zeros(count, spec.n);
    let mut u = Matrix::zeros(count, spec.k);
    let mut noise = Matrix::zeros(count, spec.n);
    let mut y = Vec::with_capacity(count);
    for i in 0..count {
        let ui: Vec<f64> = mean
            .iter()
            .map(|m| m + spec.sigma_u * rng.standard_normal())
            .collect();
        let ei = rng.normal_vec(spec.n, spec.obs_noise);
        let xi: Vec<f64> = spec
            .generate_x(&ui)?
            .iter()
            .zip(&ei)
            .map(|(p, q)| p + q)
            .collect();
        let p = label_posterior(spec, &xi, &ui)?;
        y.push(rng.categorical(&p));
        x.row_mut(i).copy_from_slice(&xi);
        u.row_mut(i).copy_from_slice(&ui);
        noise.row_mut(i).copy_from_slice(&ei);
    }
    let labels = match domain {
        Domain::Source => y.iter().map(|&v| Some(v)).collect(),
        Domain::Target => vec![None; count],
    };
    Dataset::from_parts(
        spec.hash(),
        domain,
        rng.seed(),
        x,
        labels,
        Some(HiddenColumns { y, u, noise }),
    )
}

/// Read access to learner-facing data. Training code goes through this
/// trait so that access can be audited.
pub trait DataSource {
    fn domain(&self) -> Domain;
    fn features(&self) -> &Matrix;
    fn labels(&self) -> Result<Vec<usize>>;

    fn len(&self) -> usize {
        self.features().rows()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dim(&self) -> usize {
        self.features().cols()
    }
}

impl DataSource for Dataset {
    fn domain(&self) -> Domain {
        self.domain
    }

    fn features(&self) -> &Matrix {
        &self.x
    }

    fn labels(&self) -> Result<Vec<usize>> {
        Dataset::labels(self)
    }
}

/// Wraps a data source and counts the bytes handed out.
pub struct CountingSource<'a> {
    inner: &'a dyn DataSource,
    feature_bytes: Cell<usize>,
    label_reads: Cell<usize>,
}

impl<'a> CountingSource<'a> {
    pub fn new(inner: &'a dyn DataSource) -> Self {
        Self {
            inner,
            feature_bytes: Cell::new(0),
            label_reads: Cell::new(0),
        }
    }

    pub fn feature_bytes(&self) -> usize {
        self.feature_bytes.get()
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.get()
    }

    pub fn bytes_touched(&self) -> usize {
        self.feature_bytes.get() + self.label_reads.get() * std::mem::size_of::<usize>()
    }
}

impl DataSource for CountingSource<'_> {
    fn domain(&self) -> Domain {
        self.inner.domain()
    }

    fn features(&self) -> &Matrix {
        let m = self.inner.features();
        self.feature_bytes
            .set(self.feature_bytes.get() + std::mem::size_of_val(m.data()));
        m
    }

    fn labels(&self) -> Result<Vec<usize>> {
        let l = self.inner.labels()?;
        self.label_reads.set(self.label_reads.get() + l.len());
        Ok(l)
    }

    fn len(&self) -> usize {
        self.inner.len()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::ScmConfig;

    fn spec() -> ScmSpec {
        ScmSpec::generate(&ScmConfig::default(), &mut RngStream::new(11, 0)).unwrap()
    }

    #[test]
    fn noiseless_limit_hits_the_mean_image() {
        let mut s = spec();
        s.sigma_u = 1e-300;
        s.obs_noise = 0.0;
        s.mu_s = vec![0.7, -1.3, 0.4];
        let d = sample_dataset(&s, Domain::Source, 1, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(
            d.features().row(0),
            s.generate_x(&s.mu_s).unwrap().as_slice()
        );
    }

    #[test]
    fn factor_means_follow_the_prior() {
        let s = spec();
        let d = sample_dataset(&s, Domain::Source, 10_000, &mut RngStream::new(2, 0)).unwrap();
        let means = d.hidden().unwrap().u.col_means();
        for (m, mu) in means.iter().zip(&s.mu_s) {
            assert!((m - mu).abs() < 3.0 * s.sigma_u / 100.0, "{m} vs {mu}");
        }
    }

    #[test]
    fn deterministic_and_abduction_exact() {
        let s = spec();
        let a = sample_dataset(&s, Domain::Target, 200, &mut RngStream::new(9, 1)).unwrap();
        let b = sample_dataset(&s, Domain::Target, 200, &mut RngStream::new(9, 1)).unwrap();
        assert_eq!(a, b);
        let h = a.hidden().unwrap();
        for i in 0..a.len() {
            let clean: Vec<f64> = a
                .features()
                .row(i)
                .iter()
                .zip(h.noise.row(i))
                .map(|(x, e)| x - e)
                .collect();
            let u = s.abduct(&clean).unwrap();
            for (p, q) in u.iter().zip(h.u.row(i)) {
                assert!((p - q).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn target_labels_are_hidden_from_learners() {
        let s = spec();
        let t = sample_dataset(&s, Domain::Target, 10, &mut RngStream::new(1, 1)).unwrap();
        assert!(matches!(t.labels(), Err(TcmError::Contract(_))));
        assert!(t.learner_view().hidden().is_err());
        assert_eq!(t.sample(0).y, Some(t.hidden().unwrap().y[0]));
        let src = sample_dataset(&s, Domain::Source, 10, &mut RngStream::new(1, 2)).unwrap();
        assert_eq!(src.labels().unwrap(), src.hidden().unwrap().y);
    }

    #[test]
    fn counting_source_counts() {
        let s = spec();
        let d = sample_dataset(&s, Domain::Source, 5, &mut RngStream::new(1, 1)).unwrap();
        let c = CountingSource::new(&d);
        assert_eq!(c.bytes_touched(), 0);
        let _ = c.features();
        let _ = DataSource::labels(&c).unwrap();
        assert_eq!(c.feature_bytes(), 5 * 8 * 8);
        assert_eq!(c.label_reads(), 5);
    }
}
