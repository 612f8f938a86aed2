use proptest::prelude::*;

use tcm_core::dcm::{
    cyclegan_loss, discriminator_loss, init_dcms, select_winner, DcmConfig, LossWeights,
};
use tcm_core::numerics::{penrose_residual, pinv, Matrix, RngStream, DEFAULT_RCOND};
use tcm_core::proxy::{
    combine, heads_forward, proxy_weights, solve_h_y, LinearHeads, ProxyPrior, Weighting, ZMode,
};
use tcm_core::scm::Domain;
use tcm_core::ExperimentConfig;

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    RngStream::new(seed, 0).normal_matrix(rows, cols, 2.0)
}

fn heads(c: usize, n: usize, l: usize, seed: u64) -> LinearHeads {
    let mut r = RngStream::new(seed, 1);
    LinearHeads {
        w1: r.normal_matrix(c, l, 1.0),
        w2: r.normal_matrix(c, n, 1.0),
        b1: r.normal_vec(c, 1.0),
        w3: r.normal_matrix(n, l, 1.0),
        w4: r.normal_matrix(n, n, 1.0),
        b2: r.normal_vec(n, 1.0),
        sigma1_sq: 1.0,
        sigma2_sq: 1.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pinv_satisfies_penrose(rows in 1usize..10, cols in 1usize..10, seed in any::<u64>(),
                              deficient in any::<bool>()) {
        let mut a = matrix(rows, cols, seed);
        if deficient && cols > 1 {
            for i in 0..rows {
                let v = a.get(i, 0);
                a.set(i, cols - 1, 2.0 * v);
            }
        }
        let p = pinv(&a, DEFAULT_RCOND).unwrap();
        prop_assert_eq!(p.shape(), (cols, rows));
        prop_assert!(penrose_residual(&a, &p).unwrap() < 1e-8);
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), sigma_u in 0.05f64..2.0, iters in 1usize..5000,
                          latent in 1usize..8, uniform in any::<bool>(), mean_z in any::<bool>(),
                          lr in 1e-5f64..0.5) {
        let mut cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
        cfg.scm.sigma_u = sigma_u;
        cfg.dcm.iterations = iters;
        cfg.proxy.latent_dim = latent;
        cfg.proxy.weighting = if uniform { Weighting::Uniform } else { Weighting::Gaussian };
        cfg.proxy.z_mode = if mean_z { ZMode::Mean } else { ZMode::Sample };
        cfg.bench.baseline.optimizer = tcm_core::graddiff::OptimizerKind::SgdNesterov {
            lr,
            momentum: 0.9,
        };
        let text = cfg.to_json().unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn weights_are_a_distribution(k in 1usize..8, n in 1usize..6, var in 0.01f64..10.0,
                                  seed in any::<u64>(), uniform in any::<bool>()) {
        let mut r = RngStream::new(seed, 2);
        let prior = ProxyPrior { mean: r.normal_vec(n, 1.0), variance: var };
        let cands: Vec<Vec<f64>> = (0..k).map(|_| r.normal_vec(n, 5.0)).collect();
        let refs: Vec<&[f64]> = cands.iter().map(|c| c.as_slice()).collect();
        let mode = if uniform { Weighting::Uniform } else { Weighting::Gaussian };
        let w = proxy_weights(&prior, &refs, mode).unwrap();
        prop_assert_eq!(w.len(), k);
        prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn combined_logits_stay_in_the_hull(k in 1usize..6, c in 2usize..5, seed in any::<u64>()) {
        let mut r = RngStream::new(seed, 3);
        let hy: Vec<Vec<f64>> = (0..k).map(|_| r.normal_vec(c, 3.0)).collect();
        let raw: Vec<f64> = (0..k).map(|_| r.uniform() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let out = combine(&hy, &w).unwrap();
        for j in 0..c {
            let lo = hy.iter().map(|h| h[j]).fold(f64::INFINITY, f64::min);
            let hi = hy.iter().map(|h| h[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.logits[j] >= lo - 1e-12 && out.logits[j] <= hi + 1e-12);
        }
        prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    // h_y only sees (x, x̂); plugging in the regression mean recovers f_y
    // whichever domain the proxy came from.
    #[test]
    fn proxy_function_recovers_f_y(n in 3usize..8, c in 2usize..4, seed in any::<u64>()) {
        let l = 1 + (seed as usize % (n - 1));
        let h = heads(c, n, l, seed);
        prop_assume!(h.w3_min_singular().unwrap() > 1e-3);
        let mut r = RngStream::new(seed, 4);
        let (z, x) = (r.normal_vec(l, 1.0), r.normal_vec(n, 1.0));
        let (fy, fxhat) = heads_forward(&h, &z, &x).unwrap();
        let hy = solve_h_y(&h, &x, &fxhat).unwrap();
        let scale = fy.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in hy.iter().zip(&fy) {
            prop_assert!((a - b).abs() < 1e-8 * scale);
        }
    }

    #[test]
    fn winner_is_first_argmin(losses in prop::collection::vec(-3i32..3, 1..8)) {
        let l: Vec<f64> = losses.iter().map(|&v| v as f64).collect();
        let w = select_winner(&l);
        let min = l.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(l[w], min);
        prop_assert!(l[..w].iter().all(|&v| v > min));
    }

    // Relabelling the domains (swap each pair's directions and the two
    // discriminators) leaves every loss unchanged.
    #[test]
    fn losses_are_symmetric_under_domain_swap(k in 1usize..4, rows in 1usize..16,
                                              seed in any::<u64>()) {
        let cfg = DcmConfig { k_mechanisms: k, init_jitter: 0.3, ..DcmConfig::default() };
        let (pairs, disc) = init_dcms(&cfg, 4, &RngStream::new(seed, 5)).unwrap();
        let x = matrix(rows, 4, seed ^ 7);
        let w = cfg.weights();
        let swapped: Vec<_> = pairs.iter().map(|p| p.swapped().unwrap()).collect();
        let sdisc = disc.swapped().unwrap();
        for (p, q) in pairs.iter().zip(&swapped) {
            for d in [Domain::Source, Domain::Target] {
                let a = cyclegan_loss(p, &disc, &x, d, w).unwrap();
                let b = cyclegan_loss(q, &sdisc, &x, d.other(), w).unwrap();
                prop_assert!((a.total - b.total).abs() < 1e-12 * (1.0 + a.total.abs()));
            }
        }
        for d in [Domain::Source, Domain::Target] {
            let a = discriminator_loss(&disc, &pairs, &x, d).unwrap();
            let b = discriminator_loss(&sdisc, &swapped, &x, d.other()).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn cyclegan_total_decomposes(alpha_cyc in 0.0f64..20.0, alpha_idt in 0.0f64..10.0,
                                 seed in any::<u64>(), target in any::<bool>()) {
        let cfg = DcmConfig { k_mechanisms: 1, init_jitter: 0.3, ..DcmConfig::default() };
        let (pairs, disc) = init_dcms(&cfg, 5, &RngStream::new(seed, 6)).unwrap();
        let x = matrix(8, 5, seed);
        let d = if target { Domain::Target } else { Domain::Source };
        let w = LossWeights { cyc: alpha_cyc, idt: alpha_idt };
        let l = cyclegan_loss(&pairs[0], &disc, &x, d, w).unwrap();
        let recombined = l.adv + alpha_cyc * l.cyc + alpha_idt * l.idt;
        prop_assert!((l.total - recombined).abs() < 1e-10 * (1.0 + l.total.abs()));
        prop_assert!(l.cyc >= 0.0 && l.idt >= 0.0);
    }
}
