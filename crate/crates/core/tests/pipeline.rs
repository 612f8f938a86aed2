use tcm_core::bench::{
    generate_world, root_stream, run_experiment, source_only_baseline, train_tcm, MetricsReport,
};
use tcm_core::dcm::{init_dcms, DcmConfig};
use tcm_core::numerics::{Matrix, RngStream};
use tcm_core::proxy::{vae_loss, ProxyConfig, ProxyModel, ENCODER};
use tcm_core::scm::{CountingSource, DataSource};
use tcm_core::ExperimentConfig;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scm.source_samples = 300;
    cfg.scm.target_samples = 200;
    cfg.dcm.warmup = 20;
    cfg.dcm.iterations = 60;
    cfg.proxy.iterations = 100;
    cfg.bench.oracle_samples = 2000;
    cfg.bench.baseline.iterations = 100;
    cfg
}

#[test]
fn kl_term_matches_monte_carlo() {
    let (n, draws) = (8, 100_000);
    let pairs = init_dcms(&DcmConfig::default(), n, &RngStream::new(0, 0))
        .unwrap()
        .0;
    let mut model =
        ProxyModel::new(&ProxyConfig::default(), n, 3, pairs, &RngStream::new(1, 0)).unwrap();
    // Move the posterior well away from the prior so 1% is a sharp check.
    let bias = format!("{ENCODER}.l1.b");
    let b = Matrix::from_vec(1, 6, vec![1.5, -1.0, 2.0, -0.7, 0.8, -1.2]).unwrap();
    model.params_mut().set(&bias, b).unwrap();
    let mut rng = RngStream::new(2, 0);
    for row in 0..4 {
        let x = rng.normal_matrix(1, n, 1.0 + row as f64);
        let closed = vae_loss(&model, &x, &Matrix::zeros(1, model.l)).unwrap().kl;
        let (mu, lv) = model.encode(&x).unwrap();
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..draws {
            // ln q(z) - ln p(z), averaged over the antithetic pair ±e.
            let mut log_ratio = 0.0;
            for j in 0..model.l {
                let (m, v) = (mu.get(0, j), lv.get(0, j));
                let e = rng.standard_normal();
                for s in [1.0, -1.0] {
                    let z = m + (0.5 * v).exp() * s * e;
                    log_ratio += 0.5 * (-0.5 * v - 0.5 * e * e + 0.5 * z * z);
                }
            }
            sum += log_ratio;
            sq += log_ratio * log_ratio;
        }
        let mean = sum / draws as f64;
        let se = ((sq / draws as f64 - mean * mean) / draws as f64).sqrt();
        let rel = (mean - closed).abs() / closed;
        assert!(
            3.0 * se < 0.01 * closed,
            "row {row}: check too noisy, se {se}"
        );
        assert!(rel < 0.01, "row {row}: closed {closed}, monte carlo {mean}");
    }
}

#[test]
fn training_never_reads_target_labels() {
    let cfg = small();
    let (_, source, target) = generate_world(&cfg, 0).unwrap();
    let learner = target.learner_view();
    assert!(!learner.has_hidden());
    let counted = CountingSource::new(&learner);
    let run = train_tcm(&cfg, None, &source, &counted, &root_stream(0)).unwrap();
    assert_eq!(counted.label_reads(), 0);
    assert!(counted.feature_bytes() > 0);
    assert_eq!(run.stage2.model.k(), cfg.dcm.k_mechanisms);

    // The source-only baseline takes no target argument at all; it must
    // also leave source labels as its only label reads.
    let counted_source = CountingSource::new(&source);
    source_only_baseline(
        &cfg.bench.baseline,
        cfg.scm.c,
        &counted_source,
        &RngStream::new(0, 6),
    )
    .unwrap();
    assert!(counted_source.label_reads() > 0);
    assert_eq!(counted_source.domain(), tcm_core::scm::Domain::Source);
}

fn without_time(mut r: MetricsReport) -> MetricsReport {
    r.seconds = 0.0;
    r
}

#[test]
fn experiment_is_deterministic() {
    let cfg = small();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    for (x, y) in a.reports().into_iter().zip(b.reports()) {
        assert_eq!(without_time(x.clone()), without_time(y.clone()));
    }
    assert_eq!(a.training.dcm.pairs, b.training.dcm.pairs);
    assert_eq!(a.training.stage2.model, b.training.stage2.model);

    let mut other = cfg.clone();
    other.seed = 1;
    let c = run_experiment(&other).unwrap();
    assert_ne!(a.training.stage2.model, c.training.stage2.model);
}
