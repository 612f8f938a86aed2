use serde::{Deserialize, Serialize};

use crate::error::{Result, TcmError};
use crate::graddiff::{Activation, Init, MlpSpec, OutputActivation, ParamStore};
use crate::numerics::{Matrix, RngStream, Vector};
use crate::scm::{AffineMap, Direction, Domain, VectorMap};

pub const FORWARD: &str = "fwd";
pub const REVERSE: &str = "rev";
pub const DISC_SOURCE: &str = "disc_s";
pub const DISC_TARGET: &str = "disc_t";

/// Probabilities from discriminators are clamped into this band before logs.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismClass {
    Affine,
    Tanh { hidden: usize },
}

impl MechanismClass {
    pub fn mlp(self, n: usize) -> Result<MlpSpec> {
        match self {
            MechanismClass::Affine => Ok(MlpSpec::affine(n, n)),
            MechanismClass::Tanh { hidden } => MlpSpec::new(
                vec![n, hidden, n],
                Activation::Tanh,
                OutputActivation::Linear,
            ),
        }
    }
}

/// One learnable pair `(M, M⁻¹)`; `M` maps source to target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismPair {
    pub index: usize,
    pub mlp: MlpSpec,
    pub params: ParamStore,
    pub wins_source: u64,
    pub wins_target: u64,
    pub loss_sum: f64,
    pub loss_count: u64,
}

impl MechanismPair {
    pub fn new(
        index: usize,
        n: usize,
        class: MechanismClass,
        jitter: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mlp = class.mlp(n)?;
        let init = match class {
            MechanismClass::Affine => Init::NearIdentity { jitter },
            MechanismClass::Tanh { .. } => Init::Xavier,
        };
        let mut params = ParamStore::new();
        mlp.init(&mut params, FORWARD, init, rng)?;
        mlp.init(&mut params, REVERSE, init, rng)?;
        Ok(Self {
            index,
            mlp,
            params,
            wins_source: 0,
            wins_target: 0,
            loss_sum: 0.0,
            loss_count: 0,
        })
    }

    /// A pair holding the given affine maps (affine class only).
    pub fn from_affine(index: usize, forward: &AffineMap, reverse: &AffineMap) -> Result<Self> {
        let n = forward.offset.len();
        let mut params = ParamStore::new();
        for (prefix, map) in [(FORWARD, forward), (REVERSE, reverse)] {
            if map.matrix.shape() != (n, n) || map.offset.len() != n {
                return Err(TcmError::shape(
                    "MechanismPair::from_affine",
                    "maps must be n x n with n offsets",
                ));
            }
            params.register(MlpSpec::weight_slot(prefix, 0), map.matrix.clone())?;
            params.register(
                MlpSpec::bias_slot(prefix, 0),
                Matrix::row_vector(&map.offset),
            )?;
        }
        Ok(Self {
            index,
            mlp: MlpSpec::affine(n, n),
            params,
            wins_source: 0,
            wins_target: 0,
            loss_sum: 0.0,
            loss_count: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn prefix(direction: Direction) -> &'static str {
        match direction {
            Direction::SourceToTarget => FORWARD,
            Direction::TargetToSource => REVERSE,
        }
    }

    pub fn map(&self, x: &Matrix, direction: Direction) -> Result<Matrix> {
        self.mlp.forward(&self.params, Self::prefix(direction), x)
    }

    /// `M(x)` for source data, `M⁻¹(x)` for target data.
    pub fn transport(&self, x: &Matrix, from: Domain) -> Result<Matrix> {
        self.map(x, Direction::from_domain(from))
    }

    pub fn as_affine(&self, direction: Direction) -> Option<AffineMap> {
        if self.mlp.layers() != 1 {
            return None;
        }
        let prefix = Self::prefix(direction);
        let w = self.params.get(&MlpSpec::weight_slot(prefix, 0)).ok()?;
        let b = self.params.get(&MlpSpec::bias_slot(prefix, 0)).ok()?;
        Some(AffineMap {
            matrix: w.clone(),
            offset: b.data().to_vec(),
        })
    }

    pub fn wins(&self) -> u64 {
        self.wins_source + self.wins_target
    }

    /// The same pair with `M` and `M⁻¹` exchanged.
    pub fn swapped(&self) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, value) in self.params.iter() {
            let renamed = if let Some(rest) = name.strip_prefix(FORWARD) {
                format!("{REVERSE}{rest}")
            } else if let Some(rest) = name.strip_prefix(REVERSE) {
                format!("{FORWARD}{rest}")
            } else {
                name.to_string()
            };
            params.register(renamed, value.clone())?;
        }
        Ok(Self {
            params,
            wins_source: self.wins_target,
            wins_target: self.wins_source,
            ..self.clone()
        })
    }
}

/// A directional view of a pair, usable wherever a [`VectorMap`] is expected.
pub struct PairView<'a> {
    pub pair: &'a MechanismPair,
    pub direction: Direction,
}

impl VectorMap for PairView<'_> {
    fn map_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.pair.map(x, self.direction)
    }
}

/// `D'_s` and `D'_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDiscriminators {
    pub mlp: MlpSpec,
    pub params: ParamStore,
}

impl DomainDiscriminators {
    pub fn new(n: usize, hidden: usize, rng: &mut RngStream) -> Result<Self> {
        let mlp = MlpSpec::new(
            vec![n, hidden, 1],
            Activation::LeakyRelu(0.2),
            OutputActivation::Sigmoid,
        )?;
        let mut params = ParamStore::new();
        mlp.init(&mut params, DISC_SOURCE, Init::Xavier, rng)?;
        mlp.init(&mut params, DISC_TARGET, Init::Xavier, rng)?;
        Ok(Self { mlp, params })
    }

    pub fn prefix(domain: Domain) -> &'static str {
        match domain {
            Domain::Source => DISC_SOURCE,
            Domain::Target => DISC_TARGET,
        }
    }

    /// Clamped probability that each row is a real sample of `domain`.
    pub fn prob(&self, x: &Matrix, domain: Domain) -> Result<Vector> {
        let p = self.mlp.forward(&self.params, Self::prefix(domain), x)?;
        Ok(p.data()
            .iter()
            .map(|v| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
            .collect())
    }

    pub fn swapped(&self) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, value) in self.params.iter() {
            let renamed = if let Some(rest) = name.strip_prefix(DISC_SOURCE) {
                format!("{DISC_TARGET}{rest}")
            } else if let Some(rest) = name.strip_prefix(DISC_TARGET) {
                format!("{DISC_SOURCE}{rest}")
            } else {
                name.to_string()
            };
            params.register(renamed, value.clone())?;
        }
        Ok(Self {
            mlp: self.mlp.clone(),
            params,
        })
    }
}

/// Source `x` gives `[M_i(x)]`; target `x` gives `[M_i⁻¹(x)]`.
pub fn apply_dcms(pairs: &[MechanismPair], x: &[f64], domain: Domain) -> Result<Vec<Vector>> {
    let row = Matrix::row_vector(x);
    pairs
        .iter()
        .map(|p| Ok(p.transport(&row, domain)?.into_data()))
        .collect()
}

/// Batch form of [`apply_dcms`]: one matrix per pair.
pub fn apply_dcms_batch(
    pairs: &[MechanismPair],
    x: &Matrix,
    domain: Domain,
) -> Result<Vec<Matrix>> {
    pairs.iter().map(|p| p.transport(x, domain)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{sample_dataset, true_mechanism, ScmConfig, ScmSpec};

    #[test]
    fn identity_pairs_copy_the_input() {
        let id = AffineMap::identity(4);
        let pairs: Vec<_> = (0..3)
            .map(|i| MechanismPair::from_affine(i, &id, &id).unwrap())
            .collect();
        let x = [1.0, -2.0, 0.5, 3.0];
        let out = apply_dcms(&pairs, &x, Domain::Source).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|o| o == &x));
    }

    #[test]
    fn true_mechanism_pairs_shift_one_factor() {
        let mut spec = ScmSpec::generate(&ScmConfig::default(), &mut RngStream::new(2, 0)).unwrap();
        spec.obs_noise = 0.0;
        let pairs: Vec<_> = (0..spec.k)
            .map(|i| {
                let f = true_mechanism(&spec, i, Direction::SourceToTarget).unwrap();
                let r = true_mechanism(&spec, i, Direction::TargetToSource).unwrap();
                MechanismPair::from_affine(i, &f, &r).unwrap()
            })
            .collect();
        let d = sample_dataset(&spec, Domain::Source, 5, &mut RngStream::new(0, 0)).unwrap();
        let delta = spec.shift();
        for r in 0..d.len() {
            let x = d.features().row(r);
            let u = spec.abduct(x).unwrap();
            for (i, out) in apply_dcms(&pairs, x, Domain::Source)
                .unwrap()
                .iter()
                .enumerate()
            {
                let u2 = spec.abduct(out).unwrap();
                for j in 0..spec.k {
                    let expect = if j == i { delta[i] } else { 0.0 };
                    assert!((u2[j] - u[j] - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn discriminator_outputs_are_clamped_probabilities() {
        let d = DomainDiscriminators::new(3, 16, &mut RngStream::new(0, 0)).unwrap();
        let x = Matrix::from_rows(&[vec![1e6, -1e6, 1e6], vec![0.0, 0.0, 0.0]]).unwrap();
        for p in d.prob(&x, Domain::Source).unwrap() {
            assert!((PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p));
        }
    }

    #[test]
    fn swapping_twice_restores() {
        let p = MechanismPair::new(
            0,
            3,
            MechanismClass::Affine,
            0.02,
            &mut RngStream::new(1, 0),
        )
        .unwrap();
        assert_eq!(p.swapped().unwrap().swapped().unwrap(), p);
        let x = Matrix::row_vector(&[0.1, 0.2, 0.3]);
        assert_eq!(
            p.map(&x, Direction::SourceToTarget).unwrap(),
            p.swapped()
                .unwrap()
                .map(&x, Direction::TargetToSource)
                .unwrap()
        );
    }
}
