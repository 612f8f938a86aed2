use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{record_cyclegan, record_discriminator_loss, CycleGanLoss, LossWeights};
use super::pair::{DomainDiscriminators, MechanismClass, MechanismPair, FORWARD, REVERSE};
use crate::error::{Result, TcmError};
use crate::graddiff::{Gradients, OptState, OptimizerKind, Tape};
use crate::numerics::{Matrix, RngStream};
use crate::scm::{DataSource, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WinnerMode {
    /// One winner per batch, chosen on the batch-mean loss.
    Batch,
    /// One winner per sample; each pair steps on the samples it won.
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcmConfig {
    pub k_mechanisms: usize,
    pub warmup: usize,
    /// Competitive iterations after warmup.
    pub iterations: usize,
    pub batch_size: usize,
    pub alpha_cyc: f64,
    pub alpha_idt: f64,
    pub mechanism: MechanismClass,
    pub init_jitter: f64,
    pub optimizer: OptimizerKind,
    pub disc_optimizer: OptimizerKind,
    pub disc_hidden: usize,
    pub winner_mode: WinnerMode,
}

impl Default for DcmConfig {
    fn default() -> Self {
        Self {
            k_mechanisms: 3,
            warmup: 500,
            iterations: 2500,
            batch_size: 64,
            alpha_cyc: 10.0,
            alpha_idt: 5.0,
            mechanism: MechanismClass::Affine,
            init_jitter: 0.02,
            optimizer: OptimizerKind::adam_default(),
            disc_optimizer: OptimizerKind::adam_default(),
            disc_hidden: 16,
            winner_mode: WinnerMode::Batch,
        }
    }
}

pub(crate) fn validate_optimizer(key: &str, kind: &OptimizerKind) -> Result<()> {
    let ok = match *kind {
        OptimizerKind::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } => lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
        OptimizerKind::SgdNesterov { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
    };
    if ok && lr_finite(kind) {
        Ok(())
    } else {
        Err(TcmError::config(
            key,
            "learning rate must be positive and moment coefficients in [0, 1)",
        ))
    }
}

fn lr_finite(kind: &OptimizerKind) -> bool {
    match *kind {
        OptimizerKind::Adam { lr, .. } | OptimizerKind::SgdNesterov { lr, .. } => lr.is_finite(),
    }
}

impl DcmConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            cyc: self.alpha_cyc,
            idt: self.alpha_idt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_mechanisms == 0 {
            return Err(TcmError::config("dcm.k_mechanisms", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(TcmError::config("dcm.batch_size", "must be positive"));
        }
        if !(self.alpha_cyc >= 0.0 && self.alpha_cyc.is_finite()) {
            return Err(TcmError::config("dcm.alpha_cyc", "must be non-negative"));
        }
        if !(self.alpha_idt >= 0.0 && self.alpha_idt.is_finite()) {
            return Err(TcmError::config("dcm.alpha_idt", "must be non-negative"));
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return Err(TcmError::config("dcm.init_jitter", "must be non-negative"));
        }
        if let MechanismClass::Tanh { hidden: 0 } = self.mechanism {
            return Err(TcmError::config(
                "dcm.mechanism",
                "tanh mechanisms need a positive hidden width",
            ));
        }
        if self.disc_hidden == 0 {
            return Err(TcmError::config("dcm.disc_hidden", "must be positive"));
        }
        validate_optimizer("dcm.optimizer", &self.optimizer)?;
        validate_optimizer("dcm.disc_optimizer", &self.disc_optimizer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcmTrainerState {
    pub iteration: u64,
    pub warmup: u64,
    pub weights: LossWeights,
    pub winner_mode: WinnerMode,
    pub pair_opts: Vec<OptState>,
    pub disc_opt: OptState,
}

impl DcmTrainerState {
    pub fn new(cfg: &DcmConfig) -> Self {
        Self {
            iteration: 0,
            warmup: cfg.warmup as u64,
            weights: cfg.weights(),
            winner_mode: cfg.winner_mode,
            pair_opts: (0..cfg.k_mechanisms)
                .map(|_| OptState::new(cfg.optimizer))
                .collect(),
            disc_opt: OptState::new(cfg.disc_optimizer),
        }
    }

    pub fn in_warmup(&self) -> bool {
        self.iteration < self.warmup
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub losses: Vec<CycleGanLoss>,
    pub winner: usize,
    pub sample_wins: Option<Vec<usize>>,
    pub updated: Vec<usize>,
    pub disc_loss: f64,
    pub warmup: bool,
    /// The batch as transformed by the winner before its update.
    pub mapped_by_winner: Matrix,
}

/// Argmin with ties to the lowest index.
pub fn select_winner(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    best
}

struct PairEval {
    loss: CycleGanLoss,
    per_sample: Vec<f64>,
    grads: Gradients,
    mapped: Matrix,
}

fn eval_pair(
    pair: &MechanismPair,
    disc: &DomainDiscriminators,
    x: &Matrix,
    domain: Domain,
    w: LossWeights,
) -> Result<PairEval> {
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
    let loss = CycleGanLoss {
        total: tape.scalar(v.total),
        adv: tape.scalar(v.adv),
        cyc: tape.scalar(v.cyc),
        idt: tape.scalar(v.idt),
    };
    for (name, value) in [
        ("total", loss.total),
        ("adversarial", loss.adv),
        ("cycle", loss.cyc),
        ("identity", loss.idt),
    ] {
        if !value.is_finite() {
            return Err(TcmError::numeric(
                format!("pair {} {name} loss", pair.index),
                format!("value is {value}"),
            ));
        }
    }
    let grads = tape.backward(v.total)?.retain_prefixes(&[FORWARD, REVERSE]);
    Ok(PairEval {
        loss,
        per_sample: tape.value(v.per_sample).data().to_vec(),
        grads,
        mapped: tape.value(v.mapped).clone(),
    })
}

/// Gradient of the mean loss over the rows in `mask`.
fn masked_grads(
    pair: &MechanismPair,
    disc: &DomainDiscriminators,
    x: &Matrix,
    domain: Domain,
    w: LossWeights,
    mask: &[f64],
) -> Result<Gradients> {
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
    let m = tape.constant(Matrix::column(mask));
    let picked = tape.mul(v.per_sample, m)?;
    let s = tape.sum(picked);
    let count: f64 = mask.iter().sum();
    let loss = tape.scale(s, 1.0 / count);
    Ok(tape.backward(loss)?.retain_prefixes(&[FORWARD, REVERSE]))
}

/// One competitive update on a single-domain batch.
pub fn competitive_step(
    state: &mut DcmTrainerState,
    pairs: &mut [MechanismPair],
    disc: &mut DomainDiscriminators,
    batch: &Matrix,
    domain: Domain,
) -> Result<StepOutcome> {
    if batch.rows() == 0 {
        return Err(TcmError::Contract(
            "competitive_step on an empty batch".into(),
        ));
    }
    if pairs.is_empty() || pairs.len() != state.pair_opts.len() {
        return Err(TcmError::Contract(format!(
            "{} pairs for {} optimizer states",
            pairs.len(),
            state.pair_opts.len()
        )));
    }
    let it = state.iteration;
    let ctx = |e: TcmError| e.in_context(format!("iteration {it}"));
    let w = state.weights;
    let evals: Vec<PairEval> = {
        let disc_ref = &*disc;
        pairs
            .par_iter()
            .map(|p| eval_pair(p, disc_ref, batch, domain, w))
            .collect::<Result<Vec<_>>>()
            .map_err(ctx)?
    };
    let losses: Vec<CycleGanLoss> = evals.iter().map(|e| e.loss).collect();
    let totals: Vec<f64> = losses.iter().map(|l| l.total).collect();
    let warmup = state.in_warmup();

    let (winner, sample_wins, updated) = match state.winner_mode {
        WinnerMode::Batch => {
            let winner = select_winner(&totals);
            let updated = if warmup {
                (0..pairs.len()).collect()
            } else {
                vec![winner]
            };
            for &i in &updated {
                state.pair_opts[i]
                    .step(&mut pairs[i].params, &evals[i].grads)
                    .map_err(ctx)?;
            }
            (winner, None, updated)
        }
        WinnerMode::Sample => {
            let mut wins = vec![0usize; pairs.len()];
            let mut owner = vec![0usize; batch.rows()];
            for (r, o) in owner.iter_mut().enumerate() {
                let per: Vec<f64> = evals.iter().map(|e| e.per_sample[r]).collect();
                *o = select_winner(&per);
                wins[*o] += 1;
            }
            let winner = select_winner(&wins.iter().map(|&c| -(c as f64)).collect::<Vec<_>>());
            let mut updated = Vec::new();
            for i in 0..pairs.len() {
                if warmup {
                    state.pair_opts[i]
                        .step(&mut pairs[i].params, &evals[i].grads)
                        .map_err(ctx)?;
                    updated.push(i);
                } else if wins[i] > 0 {
                    let mask: Vec<f64> = owner
                        .iter()
                        .map(|&o| if o == i { 1.0 } else { 0.0 })
                        .collect();
                    let g = masked_grads(&pairs[i], disc, batch, domain, w, &mask).map_err(ctx)?;
                    state.pair_opts[i]
                        .step(&mut pairs[i].params, &g)
                        .map_err(ctx)?;
                    updated.push(i);
                }
            }
            (winner, Some(wins), updated)
        }
    };

    let counts: Vec<u64> = match &sample_wins {
        Some(w) => w.iter().map(|&c| c as u64).collect(),
        None => (0..pairs.len()).map(|i| u64::from(i == winner)).collect(),
    };
    for (p, c) in pairs.iter_mut().zip(counts) {
        match domain {
            Domain::Source => p.wins_source += c,
            Domain::Target => p.wins_target += c,
        }
    }
    pairs[winner].loss_sum += totals[winner];
    pairs[winner].loss_count += 1;

    let fakes: Vec<Matrix> = evals.iter().map(|e| e.mapped.clone()).collect();
    let mut tape = Tape::new();
    let ld = record_discriminator_loss(&mut tape, disc, &disc.params, batch, &fakes, domain)
        .map_err(ctx)?;
    let disc_loss = tape.scalar(ld);
    if !disc_loss.is_finite() {
        return Err(ctx(TcmError::numeric(
            "discriminator loss",
            format!("value is {disc_loss}"),
        )));
    }
    let neg = tape.scale(ld, -1.0);
    let g = tape.backward(neg).map_err(ctx)?;
    state.disc_opt.step(&mut disc.params, &g).map_err(ctx)?;

    state.iteration += 1;
    let mapped_by_winner = evals
        .into_iter()
        .nth(winner)
        .map(|e| e.mapped)
        .expect("winner index in range");
    Ok(StepOutcome {
        losses,
        winner,
        sample_wins,
        updated,
        disc_loss,
        warmup,
        mapped_by_winner,
    })
}

/// One line of the stage-1 training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcmLogEntry {
    pub iteration: u64,
    pub domain: Domain,
    pub warmup: bool,
    pub losses: Vec<f64>,
    pub adv: Vec<f64>,
    pub cyc: Vec<f64>,
    pub idt: Vec<f64>,
    pub winner: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sample_wins: Option<Vec<usize>>,
    pub disc_loss: f64,
}

/// Observes training without influencing it.
pub trait DcmMonitor {
    fn on_step(
        &mut self,
        entry: &DcmLogEntry,
        batch: &Matrix,
        mapped_by_winner: &Matrix,
    ) -> Result<()>;
}

impl DcmMonitor for () {
    fn on_step(&mut self, _: &DcmLogEntry, _: &Matrix, _: &Matrix) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcmRun {
    pub pairs: Vec<MechanismPair>,
    pub disc: DomainDiscriminators,
    pub state: DcmTrainerState,
    pub log: Vec<DcmLogEntry>,
}

impl DcmRun {
    /// Batch wins per pair counted after warmup.
    pub fn post_warmup_wins(&self) -> Vec<u64> {
        let mut wins = vec![0u64; self.pairs.len()];
        for e in self.log.iter().filter(|e| !e.warmup) {
            match &e.sample_wins {
                Some(w) => wins.iter_mut().zip(w).for_each(|(a, &b)| *a += b as u64),
                None => wins[e.winner] += 1,
            }
        }
        wins
    }
}

/// Initial pairs and discriminators for a run.
pub fn init_dcms(
    cfg: &DcmConfig,
    n: usize,
    rng: &RngStream,
) -> Result<(Vec<MechanismPair>, DomainDiscriminators)> {
    let pairs = (0..cfg.k_mechanisms)
        .map(|i| {
            MechanismPair::new(
                i,
                n,
                cfg.mechanism,
                cfg.init_jitter,
                &mut rng.split(100 + i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let disc = DomainDiscriminators::new(n, cfg.disc_hidden, &mut rng.split(99))?;
    Ok((pairs, disc))
}

fn draw_batch(data: &Matrix, size: usize, rng: &mut RngStream) -> Matrix {
    let idx: Vec<usize> = (0..size).map(|_| rng.below(data.rows())).collect();
    data.select_rows(&idx)
}

/// Warmup followed by competitive training, alternating source and target
/// batches.
pub fn train_dcms(
    cfg: &DcmConfig,
    source: &dyn DataSource,
    target: &dyn DataSource,
    rng: &RngStream,
    monitor: &mut dyn DcmMonitor,
) -> Result<DcmRun> {
    cfg.validate()?;
    if source.domain() != Domain::Source || target.domain() != Domain::Target {
        return Err(TcmError::Contract(
            "train_dcms needs a source and a target dataset".into(),
        ));
    }
    if source.dim() != target.dim() {
        return Err(TcmError::shape(
            "train_dcms",
            format!("source n = {}, target n = {}", source.dim(), target.dim()),
        ));
    }
    if source.is_empty() || target.is_empty() {
        return Err(TcmError::Contract(
            "train_dcms needs non-empty datasets".into(),
        ));
    }
    let (mut pairs, mut disc) = init_dcms(cfg, source.dim(), rng)?;
    let mut state = DcmTrainerState::new(cfg);
    let mut batches = rng.split(1);
    let total = cfg.warmup + cfg.iterations;
    let mut log = Vec::with_capacity(total);
    let (xs, xt) = (source.features(), target.features());
    for it in 0..total {
        let domain = if it % 2 == 0 {
            Domain::Source
        } else {
            Domain::Target
        };
        let data = if domain == Domain::Source { xs } else { xt };
        let batch = draw_batch(data, cfg.batch_size, &mut batches);
        let out = competitive_step(&mut state, &mut pairs, &mut disc, &batch, domain)?;
        let entry = DcmLogEntry {
            iteration: it as u64,
            domain,
            warmup: out.warmup,
            losses: out.losses.iter().map(|l| l.total).collect(),
            adv: out.losses.iter().map(|l| l.adv).collect(),
            cyc: out.losses.iter().map(|l| l.cyc).collect(),
            idt: out.losses.iter().map(|l| l.idt).collect(),
            winner: out.winner,
            sample_wins: out.sample_wins,
            disc_loss: out.disc_loss,
        };
        monitor.on_step(&entry, &batch, &out.mapped_by_winner)?;
        log.push(entry);
    }
    Ok(DcmRun {
        pairs,
        disc,
        state,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn winner_is_argmin_with_low_index_ties() {
        assert_eq!(select_winner(&[0.5, 0.3]), 1);
        assert_eq!(select_winner(&[0.3, 0.3, 0.1, 0.1]), 2);
        assert_eq!(select_winner(&[1.0]), 0);
    }

    fn setup(
        k: usize,
        warmup: usize,
    ) -> (
        DcmConfig,
        Vec<MechanismPair>,
        DomainDiscriminators,
        DcmTrainerState,
    ) {
        let cfg = DcmConfig {
            k_mechanisms: k,
            warmup,
            ..DcmConfig::default()
        };
        let (pairs, disc) = init_dcms(&cfg, 4, &RngStream::new(0, 0)).unwrap();
        let state = DcmTrainerState::new(&cfg);
        (cfg, pairs, disc, state)
    }

    #[test]
    fn post_warmup_only_the_winner_moves() {
        let (_, mut pairs, mut disc, mut state) = setup(3, 2);
        let mut rng = RngStream::new(1, 0);
        for step in 0..8 {
            let before = pairs.clone();
            let x = rng.normal_matrix(16, 4, 1.0);
            let domain = if step % 2 == 0 {
                Domain::Source
            } else {
                Domain::Target
            };
            let out = competitive_step(&mut state, &mut pairs, &mut disc, &x, domain).unwrap();
            let changed: Vec<usize> = (0..3)
                .filter(|&i| !before[i].params.same_values(&pairs[i].params))
                .collect();
            if step < 2 {
                assert_eq!(changed, vec![0, 1, 2]);
            } else {
                assert_eq!(changed, vec![out.winner]);
                assert_eq!(
                    out.winner,
                    select_winner(&out.losses.iter().map(|l| l.total).collect::<Vec<_>>())
                );
            }
        }
    }

    #[test]
    fn exact_tie_goes_to_lowest_index() {
        let (_, mut pairs, mut disc, mut state) = setup(2, 0);
        pairs[1].params = pairs[0].params.clone();
        let before = pairs.clone();
        let x = RngStream::new(3, 0).normal_matrix(8, 4, 1.0);
        let out = competitive_step(&mut state, &mut pairs, &mut disc, &x, Domain::Source).unwrap();
        assert_eq!(out.losses[0].total, out.losses[1].total);
        assert_eq!(out.winner, 0);
        assert!(pairs[1].params.same_values(&before[1].params));
        assert!(!pairs[0].params.same_values(&before[0].params));
    }

    #[test]
    fn empty_batch_rejected() {
        let (_, mut pairs, mut disc, mut state) = setup(2, 0);
        let err = competitive_step(
            &mut state,
            &mut pairs,
            &mut disc,
            &Matrix::zeros(0, 4),
            Domain::Source,
        );
        assert!(matches!(err, Err(TcmError::Contract(_))));
    }

    #[test]
    fn sample_mode_updates_every_sample_winner() {
        let (_, mut pairs, mut disc, mut state) = setup(3, 0);
        state.winner_mode = WinnerMode::Sample;
        let before = pairs.clone();
        let x = RngStream::new(4, 0).normal_matrix(32, 4, 1.0);
        let out = competitive_step(&mut state, &mut pairs, &mut disc, &x, Domain::Target).unwrap();
        let wins = out.sample_wins.unwrap();
        assert_eq!(wins.iter().sum::<usize>(), 32);
        for i in 0..3 {
            assert_eq!(wins[i] > 0, !before[i].params.same_values(&pairs[i].params));
        }
    }
}
