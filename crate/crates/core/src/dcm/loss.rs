use serde::{Deserialize, Serialize};

use super::pair::{DomainDiscriminators, MechanismPair, PROB_CLAMP};
use crate::error::{Result, TcmError};
use crate::graddiff::{MlpSpec, ParamStore, Tape, Var};
use crate::numerics::Matrix;
use crate::scm::{Direction, Domain};

/// `(α₁, α₂)` for the cycle and identity terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cyc: f64,
    pub idt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleGanLoss {
    pub total: f64,
    pub adv: f64,
    pub cyc: f64,
    pub idt: f64,
}

/// Tape handles for the CycleGAN terms of one pair on one batch.
#[derive(Clone, Copy, Debug)]
pub struct CycleGanVars {
    pub total: Var,
    pub adv: Var,
    pub cyc: Var,
    pub idt: Var,
    /// Per-sample totals, `rows x 1`.
    pub per_sample: Var,
    /// The batch mapped to the other domain.
    pub mapped: Var,
}

/// `ln(1 - clamp(p))`.
fn log_one_minus(tape: &mut Tape, p: Var) -> Var {
    let c = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let neg = tape.scale(c, -1.0);
    let q = tape.offset(neg, 1.0);
    tape.ln(q)
}

/// `ln(clamp(p))`.
fn log_clamped(tape: &mut Tape, p: Var) -> Var {
    let c = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    tape.ln(c)
}

/// Per-row mean absolute difference, `rows x 1`.
fn row_l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let abs = tape.abs(d);
    let s = tape.row_sum(abs);
    let n = tape.value(a).cols() as f64;
    Ok(tape.scale(s, 1.0 / n))
}

/// Records the CycleGAN loss of a pair on a batch from `domain`.
///
/// Source batch: `adv = ln(1 - D'_t(M(x)))`, `cyc = |M⁻¹(M(x)) - x|`,
/// `idt = |M⁻¹(x) - x|`; mirrored for target. L1 terms average over
/// coordinates and everything averages over the batch.
#[allow(clippy::too_many_arguments)]
pub fn record_cyclegan(
    tape: &mut Tape,
    mech: &MlpSpec,
    pair: &ParamStore,
    disc: &DomainDiscriminators,
    disc_params: &ParamStore,
    x: Var,
    domain: Domain,
    w: LossWeights,
) -> Result<CycleGanVars> {
    let there = MechanismPair::prefix(Direction::from_domain(domain));
    let back = MechanismPair::prefix(Direction::from_domain(domain.other()));
    let mapped = mech.record(pair, there, tape, x)?;
    let judged = disc.mlp.record(
        disc_params,
        DomainDiscriminators::prefix(domain.other()),
        tape,
        mapped,
    )?;
    let adv_rows = log_one_minus(tape, judged);
    let cycled = mech.record(pair, back, tape, mapped)?;
    let cyc_rows = row_l1(tape, cycled, x)?;
    let same = mech.record(pair, back, tape, x)?;
    let idt_rows = row_l1(tape, same, x)?;

    let c_scaled = tape.scale(cyc_rows, w.cyc);
    let i_scaled = tape.scale(idt_rows, w.idt);
    let partial = tape.add(adv_rows, c_scaled)?;
    let per_sample = tape.add(partial, i_scaled)?;

    let adv = tape.mean(adv_rows);
    let cyc = tape.mean(cyc_rows);
    let idt = tape.mean(idt_rows);
    let cyc_w = tape.scale(cyc, w.cyc);
    let idt_w = tape.scale(idt, w.idt);
    let sum = tape.add(adv, cyc_w)?;
    let total = tape.add(sum, idt_w)?;
    Ok(CycleGanVars {
        total,
        adv,
        cyc,
        idt,
        per_sample,
        mapped,
    })
}

fn check_finite(context: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TcmError::numeric(
            context.to_string(),
            format!("value is {value}"),
        ))
    }
}

/// Evaluates the CycleGAN loss and its components.
pub fn cyclegan_loss(
    pair: &MechanismPair,
    disc: &DomainDiscriminators,
    x: &Matrix,
    domain: Domain,
    w: LossWeights,
) -> Result<CycleGanLoss> {
    if x.cols() != pair.dim() {
        return Err(TcmError::shape(
            "cyclegan_loss",
            format!(
                "batch has {} columns, pair expects {}",
                x.cols(),
                pair.dim()
            ),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let v = record_cyclegan(
        &mut tape,
        &pair.mlp,
        &pair.params,
        disc,
        &disc.params,
        xv,
        domain,
        w,
    )?;
    Ok(CycleGanLoss {
        total: check_finite("cyclegan total", tape.scalar(v.total))?,
        adv: check_finite("cyclegan adversarial term", tape.scalar(v.adv))?,
        cyc: check_finite("cyclegan cycle term", tape.scalar(v.cyc))?,
        idt: check_finite("cyclegan identity term", tape.scalar(v.idt))?,
    })
}

/// Records `mean ln D'_dom(x) + (1/k) Σ_i mean ln(1 - D'_other(fake_i))`,
/// the quantity the discriminators maximize. `fakes` are the pair outputs
/// for `x`, treated as constants.
pub fn record_discriminator_loss(
    tape: &mut Tape,
    disc: &DomainDiscriminators,
    disc_params: &ParamStore,
    x: &Matrix,
    fakes: &[Matrix],
    domain: Domain,
) -> Result<Var> {
    if fakes.is_empty() {
        return Err(TcmError::Contract(
            "discriminator loss needs at least one pair".into(),
        ));
    }
    let xv = tape.constant(x.clone());
    let real = disc
        .mlp
        .record(disc_params, DomainDiscriminators::prefix(domain), tape, xv)?;
    let log_real = log_clamped(tape, real);
    let mut acc = tape.mean(log_real);
    let inv_k = 1.0 / fakes.len() as f64;
    for fake in fakes {
        let fv = tape.constant(fake.clone());
        let judged = disc.mlp.record(
            disc_params,
            DomainDiscriminators::prefix(domain.other()),
            tape,
            fv,
        )?;
        let lf = log_one_minus(tape, judged);
        let m = tape.mean(lf);
        let scaled = tape.scale(m, inv_k);
        acc = tape.add(acc, scaled)?;
    }
    Ok(acc)
}

pub fn discriminator_loss(
    disc: &DomainDiscriminators,
    pairs: &[MechanismPair],
    x: &Matrix,
    domain: Domain,
) -> Result<f64> {
    let fakes = pairs
        .iter()
        .map(|p| p.transport(x, domain))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let v = record_discriminator_loss(&mut tape, disc, &disc.params, x, &fakes, domain)?;
    check_finite("discriminator loss", tape.scalar(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcm::MechanismClass;
    use crate::graddiff::MlpSpec;
    use crate::numerics::RngStream;
    use crate::scm::AffineMap;

    const W: LossWeights = LossWeights {
        cyc: 10.0,
        idt: 5.0,
    };

    /// Discriminators whose output is the constant `p`.
    fn constant_disc(n: usize, p: f64) -> DomainDiscriminators {
        let mut d = DomainDiscriminators::new(n, 4, &mut RngStream::new(0, 0)).unwrap();
        let logit = (p / (1.0 - p)).ln();
        for prefix in ["disc_s", "disc_t"] {
            for l in 0..2 {
                let w = MlpSpec::weight_slot(prefix, l);
                let shape = d.params.get(&w).unwrap().shape();
                d.params.set(&w, Matrix::zeros(shape.0, shape.1)).unwrap();
            }
            d.params
                .set(&MlpSpec::bias_slot(prefix, 1), Matrix::row_vector(&[logit]))
                .unwrap();
        }
        d
    }

    fn batch(rows: usize, n: usize, seed: u64) -> Matrix {
        RngStream::new(seed, 9).normal_matrix(rows, n, 1.0)
    }

    #[test]
    fn identity_pair_has_no_cycle_or_identity_cost() {
        let id = AffineMap::identity(4);
        let pair = MechanismPair::from_affine(0, &id, &id).unwrap();
        let disc = constant_disc(4, 0.5);
        let l = cyclegan_loss(&pair, &disc, &batch(6, 4, 1), Domain::Source, W).unwrap();
        assert_eq!(l.cyc, 0.0);
        assert_eq!(l.idt, 0.0);
        assert!((l.adv - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn components_recombine() {
        let mut rng = RngStream::new(3, 0);
        let pair = MechanismPair::new(0, 8, MechanismClass::Affine, 0.3, &mut rng).unwrap();
        let disc = DomainDiscriminators::new(8, 16, &mut rng).unwrap();
        for domain in [Domain::Source, Domain::Target] {
            let l = cyclegan_loss(&pair, &disc, &batch(32, 8, 2), domain, W).unwrap();
            assert!((l.total - (l.adv + W.cyc * l.cyc + W.idt * l.idt)).abs() < 1e-12);
        }
    }

    #[test]
    fn discriminator_loss_cases() {
        let id = AffineMap::identity(3);
        let pair = MechanismPair::from_affine(0, &id, &id).unwrap();
        let half = constant_disc(3, 0.5);
        let l = discriminator_loss(
            &half,
            std::slice::from_ref(&pair),
            &batch(5, 3, 4),
            Domain::Source,
        )
        .unwrap();
        assert!((l - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!(discriminator_loss(&half, &[], &batch(5, 3, 4), Domain::Source).is_err());
    }

    #[test]
    fn discriminator_loss_expands_over_pairs() {
        let mut rng = RngStream::new(5, 0);
        let pairs: Vec<_> = (0..2)
            .map(|i| MechanismPair::new(i, 4, MechanismClass::Affine, 0.3, &mut rng).unwrap())
            .collect();
        let disc = DomainDiscriminators::new(4, 16, &mut rng).unwrap();
        let x = batch(10, 4, 6);
        let got = discriminator_loss(&disc, &pairs, &x, Domain::Target).unwrap();
        let mean_ln = |v: Vec<f64>, flip: bool| {
            v.iter()
                .map(|p| if flip { (1.0 - p).ln() } else { p.ln() })
                .sum::<f64>()
                / v.len() as f64
        };
        let mut expect = mean_ln(disc.prob(&x, Domain::Target).unwrap(), false);
        for p in &pairs {
            let fake = p.map(&x, Direction::TargetToSource).unwrap();
            expect += 0.5 * mean_ln(disc.prob(&fake, Domain::Source).unwrap(), true);
        }
        assert!((got - expect).abs() < 1e-12);
    }
}
