use serde::{Deserialize, Serialize};

use crate::dcm::{DcmLogEntry, DcmMonitor};
use crate::error::{Result, TcmError};
use crate::numerics::{argmax, Matrix, RngStream};
use crate::scm::{oracle_batch, Dataset, Domain, OracleTable, ScmSpec};

/// Anything that maps raw target features to class probabilities.
pub trait Predictor: Sync {
    fn name(&self) -> &str;
    /// One probability row per input row.
    fn predict_proba(&self, x: &Matrix) -> Result<Matrix>;
}

/// Predicts with a precomputed oracle table; rows must match the data it
/// was computed on.
pub struct OraclePredictor<'a>(pub &'a OracleTable);

impl Predictor for OraclePredictor<'_> {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.0.probs.rows() {
            return Err(TcmError::shape(
                "oracle predictor",
                "rows differ from the oracle table",
            ));
        }
        Ok(self.0.probs.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    pub seed: u64,
    pub samples: usize,
    pub accuracy: f64,
    pub oracle_agreement: f64,
    pub tv_distance: f64,
    /// Rows are pairs, columns true factors.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub purity: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub win_counts: Option<Vec<u64>>,
    #[serde(default)]
    pub config: serde_json::Value,
    pub seconds: f64,
}

impl MetricsReport {
    /// Smallest and mean purity over pairs with at least one win.
    pub fn purity_summary(&self) -> Option<(f64, f64)> {
        let rows: Vec<f64> = self
            .purity
            .as_ref()?
            .iter()
            .filter(|r| r.iter().sum::<f64>() > 0.0)
            .map(|r| r.iter().copied().fold(0.0, f64::max))
            .collect();
        if rows.is_empty() {
            return None;
        }
        let min = rows.iter().copied().fold(f64::INFINITY, f64::min);
        Some((min, rows.iter().sum::<f64>() / rows.len() as f64))
    }
}

/// `0.5 Σ |p - q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Scores a predictor against hidden target labels and a precomputed
/// oracle table for the same rows.
pub fn evaluate_against(
    predictor: &dyn Predictor,
    target: &Dataset,
    oracle: &OracleTable,
) -> Result<MetricsReport> {
    let started = std::time::Instant::now();
    let hidden = target.hidden().map_err(|_| {
        TcmError::Contract("evaluation needs target data with hidden labels".into())
    })?;
    let rows = target.len();
    if oracle.probs.rows() != rows {
        return Err(TcmError::shape(
            "evaluate",
            format!("oracle has {} rows, data {rows}", oracle.probs.rows()),
        ));
    }
    let probs = predictor.predict_proba(target.features())?;
    if probs.shape() != oracle.probs.shape() {
        return Err(TcmError::shape(
            "evaluate",
            format!(
                "predictor gave {:?}, oracle {:?}",
                probs.shape(),
                oracle.probs.shape()
            ),
        ));
    }
    let (mut correct, mut agree, mut tv) = (0usize, 0usize, 0.0);
    for i in 0..rows {
        let pred = argmax(probs.row(i));
        correct += usize::from(pred == hidden.y[i]);
        agree += usize::from(pred == argmax(oracle.probs.row(i)));
        tv += tv_distance(probs.row(i), oracle.probs.row(i));
    }
    let denom = rows.max(1) as f64;
    Ok(MetricsReport {
        method: predictor.name().to_string(),
        k: None,
        seed: target.seed,
        samples: rows,
        accuracy: correct as f64 / denom,
        oracle_agreement: agree as f64 / denom,
        tv_distance: tv / denom,
        purity: None,
        win_counts: None,
        config: serde_json::Value::Null,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Oracle table for the target rows, then [`evaluate_against`].
pub fn evaluate(
    predictor: &dyn Predictor,
    spec: &ScmSpec,
    target: &Dataset,
    mc_samples: usize,
    rng: &RngStream,
) -> Result<MetricsReport> {
    if !target.has_hidden() {
        return Err(TcmError::Contract(
            "evaluation needs target data with hidden labels".into(),
        ));
    }
    let oracle = oracle_batch(
        spec,
        target.features(),
        Domain::Target,
        mc_samples,
        &mut rng.clone(),
    )?;
    evaluate_against(predictor, target, &oracle)
}

/// Credits each post-warmup batch win to the factor the winner moved most,
/// measured as `mean |A⁺ (M(x) - x)|` per factor.
#[derive(Clone, Debug)]
pub struct PurityMonitor<'a> {
    spec: &'a ScmSpec,
    pub counts: Vec<Vec<u64>>,
}

impl<'a> PurityMonitor<'a> {
    pub fn new(spec: &'a ScmSpec, pairs: usize) -> Self {
        Self {
            spec,
            counts: vec![vec![0; spec.k]; pairs],
        }
    }

    /// Row-normalized counts; rows of pairs without wins stay zero.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        purity_matrix(&self.counts)
    }
}

pub fn purity_matrix(counts: &[Vec<u64>]) -> Vec<Vec<f64>> {
    counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            row.iter()
                .map(|&c| {
                    if total == 0 {
                        0.0
                    } else {
                        c as f64 / total as f64
                    }
                })
                .collect()
        })
        .collect()
}

impl DcmMonitor for PurityMonitor<'_> {
    fn on_step(&mut self, entry: &DcmLogEntry, batch: &Matrix, mapped: &Matrix) -> Result<()> {
        if entry.warmup {
            return Ok(());
        }
        let du = mapped
            .sub(batch)?
            .matmul_t(self.spec.a_pinv())?
            .map(f64::abs)
            .col_means();
        let factor = argmax(&du);
        self.counts[entry.winner][factor] += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcm::MechanismPair;
    use crate::scm::{sample_dataset, true_mechanism, Direction, ScmConfig};

    struct Uniform(usize);

    impl Predictor for Uniform {
        fn name(&self) -> &str {
            "uniform"
        }
        fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
            Ok(Matrix::from_fn(x.rows(), self.0, |_, _| {
                1.0 / self.0 as f64
            }))
        }
    }

    /// Deterministic pseudo-random class per row.
    struct Hashed(usize);

    impl Predictor for Hashed {
        fn name(&self) -> &str {
            "hashed"
        }
        fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
            let mut rng = RngStream::new(99, 0);
            Ok(Matrix::from_fn(x.rows(), self.0, |_, _| rng.uniform()))
        }
    }

    fn world() -> (ScmSpec, Dataset) {
        let spec = ScmSpec::generate(&ScmConfig::default(), &mut RngStream::new(5, 0)).unwrap();
        let t = sample_dataset(&spec, Domain::Target, 600, &mut RngStream::new(5, 1)).unwrap();
        (spec, t)
    }

    #[test]
    fn oracle_agrees_with_itself() {
        let (spec, t) = world();
        let table = oracle_batch(
            &spec,
            t.features(),
            Domain::Target,
            2000,
            &mut RngStream::new(1, 0),
        )
        .unwrap();
        let r = evaluate_against(&OraclePredictor(&table), &t, &table).unwrap();
        assert_eq!(r.oracle_agreement, 1.0);
        assert_eq!(r.tv_distance, 0.0);
    }

    #[test]
    fn random_predictor_is_near_chance() {
        let (spec, t) = world();
        let r = evaluate(&Hashed(3), &spec, &t, 1000, &RngStream::new(1, 0)).unwrap();
        let se = (1.0 / 3.0 * 2.0 / 3.0 / 600.0f64).sqrt();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 4.0 * se, "{}", r.accuracy);
        for v in [r.accuracy, r.oracle_agreement, r.tv_distance] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn evaluate_is_pure() {
        let (spec, t) = world();
        let a = evaluate(&Uniform(3), &spec, &t, 1000, &RngStream::new(1, 0)).unwrap();
        let b = evaluate(&Uniform(3), &spec, &t, 1000, &RngStream::new(1, 0)).unwrap();
        assert_eq!(
            (a.accuracy, a.oracle_agreement, a.tv_distance),
            (b.accuracy, b.oracle_agreement, b.tv_distance)
        );
    }

    #[test]
    fn learner_view_is_rejected() {
        let (spec, t) = world();
        let r = evaluate(
            &Uniform(3),
            &spec,
            &t.learner_view(),
            1000,
            &RngStream::new(1, 0),
        );
        assert!(matches!(r, Err(TcmError::Contract(_))));
    }

    #[test]
    fn true_mechanisms_are_credited_to_their_factor() {
        let (spec, t) = world();
        let s = sample_dataset(&spec, Domain::Source, 64, &mut RngStream::new(5, 2)).unwrap();
        let mut mon = PurityMonitor::new(&spec, spec.k);
        for i in 0..spec.k {
            let fwd = true_mechanism(&spec, i, Direction::SourceToTarget).unwrap();
            let rev = true_mechanism(&spec, i, Direction::TargetToSource).unwrap();
            let pair = MechanismPair::from_affine(i, &fwd, &rev).unwrap();
            let mapped = pair.transport(s.features(), Domain::Source).unwrap();
            let entry = DcmLogEntry {
                iteration: 0,
                domain: Domain::Source,
                warmup: false,
                losses: vec![0.0; spec.k],
                adv: vec![],
                cyc: vec![],
                idt: vec![],
                winner: i,
                sample_wins: None,
                disc_loss: 0.0,
            };
            mon.on_step(&entry, s.features(), &mapped).unwrap();
        }
        let m = mon.matrix();
        for (i, row) in m.iter().enumerate() {
            assert_eq!(row[i], 1.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let _ = t;
    }
}
