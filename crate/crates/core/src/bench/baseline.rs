use serde::{Deserialize, Serialize};

use super::Predictor;
use crate::dcm::{train_dcms, DcmConfig, MechanismPair};
use crate::error::{Result, TcmError};
use crate::graddiff::{
    Activation, Init, MlpSpec, OptState, OptimizerKind, OutputActivation, ParamStore, Tape, Var,
};
use crate::numerics::{softmax, Matrix, RngStream};
use crate::proxy::{record_proxy_loss, PDISC_SOURCE, PDISC_TARGET};
use crate::scm::{DataSource, Domain};

pub const CLASSIFIER: &str = "clf";
const ADAPTER: &str = "adapter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Alignment weight of the domain-map baseline.
    pub alpha: f64,
    pub disc_optimizer: OptimizerKind,
    pub disc_hidden: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch_size: 64,
            optimizer: OptimizerKind::Adam {
                lr: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            alpha: 1.0,
            disc_optimizer: OptimizerKind::adam_default(),
            disc_hidden: 16,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TcmError::config(
                "bench.baseline.batch_size",
                "must be positive",
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(TcmError::config(
                "bench.baseline.alpha",
                "must be non-negative",
            ));
        }
        if self.disc_hidden == 0 {
            return Err(TcmError::config(
                "bench.baseline.disc_hidden",
                "must be positive",
            ));
        }
        crate::dcm::validate_optimizer("bench.baseline.optimizer", &self.optimizer)?;
        crate::dcm::validate_optimizer("bench.baseline.disc_optimizer", &self.disc_optimizer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    SourceOnly,
    DomainMap,
}

/// A linear-softmax classifier, optionally behind an affine adapter and a
/// learned mechanism pair (domain-map baseline).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub classifier: MlpSpec,
    pub adapter: Option<MlpSpec>,
    pub pdisc: Option<MlpSpec>,
    pub pair: Option<MechanismPair>,
    pub params: ParamStore,
}

impl BaselineModel {
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let feats = match &self.adapter {
            Some(a) => a.forward(&self.params, ADAPTER, x)?,
            None => x.clone(),
        };
        self.classifier.forward(&self.params, CLASSIFIER, &feats)
    }
}

impl Predictor for BaselineModel {
    fn name(&self) -> &str {
        match self.kind {
            BaselineKind::SourceOnly => "source-only",
            BaselineKind::DomainMap => "domain-map",
        }
    }

    fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = self.logits(x)?;
        for i in 0..out.rows() {
            let p = softmax(out.row(i));
            out.row_mut(i).copy_from_slice(&p);
        }
        Ok(out)
    }
}

fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits);
    let picked = tape.gather(ls, labels)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(y) => Err(TcmError::Contract(format!(
            "label {y} out of range for {classes} classes"
        ))),
        None => Ok(()),
    }
}

/// Linear softmax on raw source features, trained by cross-entropy from a
/// zero initialization. Never reads target data.
pub fn source_only_baseline(
    cfg: &BaselineConfig,
    classes: usize,
    source: &dyn DataSource,
    rng: &RngStream,
) -> Result<BaselineModel> {
    cfg.validate()?;
    if source.domain() != Domain::Source {
        return Err(TcmError::Contract(
            "source_only_baseline needs source data".into(),
        ));
    }
    let x = source.features();
    let y = source.labels()?;
    check_labels(&y, classes)?;
    let classifier = MlpSpec::affine(x.cols(), classes);
    let mut params = ParamStore::new();
    classifier.init(&mut params, CLASSIFIER, Init::Zero, &mut rng.split(0))?;
    let mut opt = OptState::new(cfg.optimizer);
    let mut batches = rng.split(1);
    for it in 0..cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batches.below(x.rows()))
            .collect();
        let labels: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x.select_rows(&idx));
        let logits = classifier.record(&params, CLASSIFIER, &mut tape, xv)?;
        let ce = cross_entropy(&mut tape, logits, &labels)?;
        if !tape.scalar(ce).is_finite() {
            return Err(TcmError::numeric(
                format!("source-only iteration {it}"),
                "non-finite cross-entropy",
            ));
        }
        let g = tape.backward(ce)?;
        opt.step(&mut params, &g)?;
    }
    Ok(BaselineModel {
        kind: BaselineKind::SourceOnly,
        classifier,
        adapter: None,
        pdisc: None,
        pair: None,
        params,
    })
}

/// One non-competitive mechanism pair, then an adapter and classifier
/// trained on mapped source samples with adversarial feature alignment.
/// Target labels are never read.
pub fn domain_map_baseline(
    cfg: &BaselineConfig,
    dcm: &DcmConfig,
    classes: usize,
    source: &dyn DataSource,
    target: &dyn DataSource,
    rng: &RngStream,
) -> Result<BaselineModel> {
    let dcm = DcmConfig {
        k_mechanisms: 1,
        ..dcm.clone()
    };
    let run = train_dcms(&dcm, source, target, &rng.split(2), &mut ())?;
    let pair = run.pairs.into_iter().next().expect("one pair");
    domain_map_with_pair(cfg, classes, pair, source, target, rng)
}

/// The classifier stage of the domain-map baseline for a given pair.
pub fn domain_map_with_pair(
    cfg: &BaselineConfig,
    classes: usize,
    pair: MechanismPair,
    source: &dyn DataSource,
    target: &dyn DataSource,
    rng: &RngStream,
) -> Result<BaselineModel> {
    cfg.validate()?;
    if source.domain() != Domain::Source || target.domain() != Domain::Target {
        return Err(TcmError::Contract(
            "domain_map_baseline needs a source and a target dataset".into(),
        ));
    }
    let xs = source.features();
    let ys = source.labels()?;
    check_labels(&ys, classes)?;
    let xt = target.features();
    let n = xs.cols();
    if xt.cols() != n || pair.dim() != n {
        return Err(TcmError::shape(
            "domain_map_baseline",
            "source, target and pair dimensions differ",
        ));
    }
    let mapped_s = pair.transport(xs, Domain::Source)?;
    let mapped_t = pair.transport(xt, Domain::Target)?;

    let adapter = MlpSpec::affine(n, n);
    let classifier = MlpSpec::affine(n, classes);
    let pdisc = MlpSpec::new(
        vec![n, cfg.disc_hidden, 1],
        Activation::LeakyRelu(0.2),
        OutputActivation::Sigmoid,
    )?;
    let mut params = ParamStore::new();
    adapter.init(
        &mut params,
        ADAPTER,
        Init::NearIdentity { jitter: 0.0 },
        &mut rng.split(3),
    )?;
    classifier.init(&mut params, CLASSIFIER, Init::Zero, &mut rng.split(4))?;
    pdisc.init(&mut params, PDISC_SOURCE, Init::Xavier, &mut rng.split(5))?;
    pdisc.init(&mut params, PDISC_TARGET, Init::Xavier, &mut rng.split(6))?;

    let mut opt = OptState::new(cfg.optimizer);
    let mut disc_opt = OptState::new(cfg.disc_optimizer);
    let mut batches = rng.split(7);
    let record =
        |params: &ParamStore, tape: &mut Tape, is: &[usize], it: &[usize]| -> Result<(Var, Var)> {
            let adapt = |m: Matrix, tape: &mut Tape| {
                let v = tape.constant(m);
                adapter.record(params, ADAPTER, tape, v)
            };
            let fs = adapt(xs.select_rows(is), tape)?;
            let fms = adapt(mapped_s.select_rows(is), tape)?;
            let ft = adapt(xt.select_rows(it), tape)?;
            let fmt = adapt(mapped_t.select_rows(it), tape)?;
            let lp = record_proxy_loss(tape, &pdisc, params, fs, &[fms], ft, &[fmt])?;
            Ok((fms, lp))
        };
    for it in 0..cfg.iterations {
        let is: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batches.below(xs.rows()))
            .collect();
        let itg: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batches.below(xt.rows()))
            .collect();
        let labels: Vec<usize> = is.iter().map(|&i| ys[i]).collect();

        let mut tape = Tape::new();
        let (fms, lp) = record(&params, &mut tape, &is, &itg)?;
        let logits = classifier.record(&params, CLASSIFIER, &mut tape, fms)?;
        let ce = cross_entropy(&mut tape, logits, &labels)?;
        let weighted = tape.scale(lp, cfg.alpha);
        let total = tape.add(ce, weighted)?;
        if !tape.scalar(total).is_finite() {
            return Err(TcmError::numeric(
                format!("domain-map iteration {it}"),
                "non-finite loss",
            ));
        }
        let g = tape.backward(total)?.retain_prefixes(&["adapter.", "clf."]);
        opt.step(&mut params, &g)?;

        let mut tape = Tape::new();
        let (_, lp) = record(&params, &mut tape, &is, &itg)?;
        let neg = tape.scale(lp, -1.0);
        let g = tape
            .backward(neg)?
            .retain_prefixes(&["pdisc_s.", "pdisc_t."]);
        disc_opt.step(&mut params, &g)?;
    }
    Ok(BaselineModel {
        kind: BaselineKind::DomainMap,
        classifier,
        adapter: Some(adapter),
        pdisc: Some(pdisc),
        pair: Some(pair),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{sample_dataset, Dataset, ScmConfig, ScmSpec};

    fn separable(rows: usize, rng: &mut RngStream) -> Dataset {
        let x = rng.normal_matrix(rows, 2, 1.0);
        let labels = (0..rows)
            .map(|i| Some(usize::from(x.get(i, 0) > 0.0)))
            .collect();
        Dataset::from_parts("toy".into(), Domain::Source, 0, x, labels, None).unwrap()
    }

    fn accuracy(model: &BaselineModel, data: &Dataset) -> f64 {
        let p = model.predict_proba(data.features()).unwrap();
        let y = data.labels().unwrap();
        (0..p.rows())
            .filter(|&i| crate::numerics::argmax(p.row(i)) == y[i])
            .count() as f64
            / p.rows() as f64
    }

    #[test]
    fn source_only_fits_a_separable_toy() {
        let data = separable(400, &mut RngStream::new(1, 0));
        let m = source_only_baseline(&BaselineConfig::default(), 2, &data, &RngStream::new(2, 0))
            .unwrap();
        assert!(accuracy(&m, &data) > 0.95);
    }

    #[test]
    fn zero_iterations_is_uniform() {
        let data = separable(50, &mut RngStream::new(1, 0));
        let cfg = BaselineConfig {
            iterations: 0,
            ..BaselineConfig::default()
        };
        let m = source_only_baseline(&cfg, 3, &data, &RngStream::new(2, 0)).unwrap();
        let p = m.predict_proba(data.features()).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn source_only_is_deterministic() {
        let data = separable(100, &mut RngStream::new(1, 0));
        let cfg = BaselineConfig {
            iterations: 50,
            ..BaselineConfig::default()
        };
        let a = source_only_baseline(&cfg, 2, &data, &RngStream::new(2, 0)).unwrap();
        let b = source_only_baseline(&cfg, 2, &data, &RngStream::new(2, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn domain_map_never_reads_target_labels() {
        let spec = ScmSpec::generate(&ScmConfig::default(), &mut RngStream::new(3, 0)).unwrap();
        let s = sample_dataset(&spec, Domain::Source, 200, &mut RngStream::new(3, 1)).unwrap();
        let t = sample_dataset(&spec, Domain::Target, 200, &mut RngStream::new(3, 2)).unwrap();
        let counted = crate::scm::CountingSource::new(&t);
        let dcm = DcmConfig {
            warmup: 5,
            iterations: 5,
            ..DcmConfig::default()
        };
        let cfg = BaselineConfig {
            iterations: 10,
            ..BaselineConfig::default()
        };
        domain_map_baseline(&cfg, &dcm, 3, &s, &counted, &RngStream::new(4, 0)).unwrap();
        assert_eq!(counted.label_reads(), 0);
        assert!(counted.feature_bytes() > 0);
    }
}
