use serde::{Deserialize, Serialize};

use super::dataset::Domain;
use super::spec::ScmSpec;
use crate::error::{Result, TcmError};
use crate::numerics::{gauss_logpdf, Matrix, Vector};

/// Direction of a cross-domain map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
}

impl Direction {
    /// The direction that maps data observed in `domain` to the other one.
    pub fn from_domain(domain: Domain) -> Self {
        match domain {
            Domain::Source => Direction::SourceToTarget,
            Domain::Target => Direction::TargetToSource,
        }
    }
}

/// A batch map on observation vectors (rows of a matrix).
pub trait VectorMap {
    fn map_batch(&self, x: &Matrix) -> Result<Matrix>;
}

impl<F> VectorMap for F
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    fn map_batch(&self, x: &Matrix) -> Result<Matrix> {
        self(x)
    }
}

/// `x ↦ M x + o`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub matrix: Matrix,
    pub offset: Vector,
}

impl AffineMap {
    pub fn identity(n: usize) -> Self {
        Self {
            matrix: Matrix::identity(n),
            offset: vec![0.0; n],
        }
    }

    pub fn translation(offset: Vector) -> Self {
        Self {
            matrix: Matrix::identity(offset.len()),
            offset,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vector> {
        let mx = self.matrix.matvec(x)?;
        Ok(mx.iter().zip(&self.offset).map(|(p, q)| p + q).collect())
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &AffineMap) -> Result<AffineMap> {
        Ok(AffineMap {
            matrix: self.matrix.matmul(&inner.matrix)?,
            offset: self.apply(&inner.offset)?,
        })
    }
}

impl VectorMap for AffineMap {
    fn map_batch(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul_t(&self.matrix)?.add_row(&self.offset)
    }
}

/// The ground-truth disentangled mechanism for factor `i`:
/// abduct `u`, shift `u_i` by `±Δ_i`, regenerate. For an affine generator
/// this is the translation `x ↦ x ± A Δ_i e_i`.
pub fn true_mechanism(spec: &ScmSpec, i: usize, direction: Direction) -> Result<AffineMap> {
    if i >= spec.k {
        return Err(TcmError::Contract(format!(
            "factor index {i} out of range for k = {}",
            spec.k
        )));
    }
    let delta = spec.shift()[i];
    let sign = match direction {
        Direction::SourceToTarget => 1.0,
        Direction::TargetToSource => -1.0,
    };
    Ok(AffineMap::translation(
        spec.a.col(i).iter().map(|a| sign * delta * a).collect(),
    ))
}

/// The observation-space map `g ∘ M' ∘ g⁻¹` for a latent affine map
/// `M'(u) = R u + r`, leaving the component of `x` outside the column space
/// of `A` untouched.
pub fn lift_latent_map(spec: &ScmSpec, r_mat: &Matrix, r_off: &[f64]) -> Result<AffineMap> {
    if r_mat.shape() != (spec.k, spec.k) || r_off.len() != spec.k {
        return Err(TcmError::shape(
            "lift_latent_map",
            format!("latent map must be {0}x{0} plus {0}", spec.k),
        ));
    }
    let delta = r_mat.sub(&Matrix::identity(spec.k))?;
    let core = spec.a.matmul(&delta)?.matmul(spec.a_pinv())?;
    let matrix = Matrix::identity(spec.n).add(&core)?;
    let ar = spec.a.matvec(r_off)?;
    let cb = core.matvec(&spec.b)?;
    Ok(AffineMap {
        matrix,
        offset: ar.iter().zip(&cb).map(|(p, q)| p - q).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementScore {
    /// `max_{j != i} mean |Δu_j|`.
    pub off: f64,
    /// `mean |Δu_i|`.
    pub on: f64,
    /// `mean |Δu_j|` for every factor.
    pub per_factor: Vector,
}

/// Measures how much a map moves each latent factor on `probe`,
/// with `Δu = A⁺ (mech(x) - x)`.
pub fn disentanglement_score(
    spec: &ScmSpec,
    mech: &dyn VectorMap,
    i: usize,
    probe: &Matrix,
) -> Result<DisentanglementScore> {
    if probe.rows() == 0 {
        return Err(TcmError::Contract("disentanglement probe is empty".into()));
    }
    if i >= spec.k {
        return Err(TcmError::Contract(format!(
            "factor index {i} out of range for k = {}",
            spec.k
        )));
    }
    let per_factor = latent_displacement(spec, mech, probe)?;
    let off = per_factor
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);
    Ok(DisentanglementScore {
        off,
        on: per_factor[i],
        per_factor,
    })
}

/// `mean |A⁺ (mech(x) - x)|` per latent coordinate.
pub fn latent_displacement(spec: &ScmSpec, mech: &dyn VectorMap, probe: &Matrix) -> Result<Vector> {
    let moved = mech.map_batch(probe)?;
    let du = moved.sub(probe)?.matmul_t(spec.a_pinv())?;
    Ok(du.map(f64::abs).col_means())
}

/// Mean log-likelihood of each candidate `true_mechanism(j)` applied to
/// `source_probe`, scored in latent space under a population where only
/// factor `i` is shifted. The faithful candidate is `j = i`.
pub fn candidate_mismatch(spec: &ScmSpec, i: usize, source_probe: &Matrix) -> Result<Vec<f64>> {
    if i >= spec.k {
        return Err(TcmError::Contract(format!(
            "factor index {i} out of range for k = {}",
            spec.k
        )));
    }
    let mut shifted = spec.mu_s.clone();
    shifted[i] = spec.mu_t[i];
    let sigma2 = spec.sigma_u * spec.sigma_u;
    (0..spec.k)
        .map(|j| {
            let moved =
                true_mechanism(spec, j, Direction::SourceToTarget)?.map_batch(source_probe)?;
            let mut total = 0.0;
            for r in 0..moved.rows() {
                total += gauss_logpdf(&spec.abduct(moved.row(r))?, &shifted, sigma2)?;
            }
            Ok(total / moved.rows() as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::scm::{sample_dataset, ScmConfig};

    fn spec() -> ScmSpec {
        ScmSpec::generate(&ScmConfig::default(), &mut RngStream::new(21, 0)).unwrap()
    }

    #[test]
    fn zero_shift_gives_identity() {
        let mut s = spec();
        s.mu_t = s.mu_s.clone();
        let m = true_mechanism(&s, 1, Direction::SourceToTarget).unwrap();
        assert_eq!(m, AffineMap::identity(s.n));
    }

    #[test]
    fn unit_generator_shift() {
        let a = Matrix::identity(3);
        let s = ScmSpec::from_parts(
            a,
            vec![0.0; 3],
            Matrix::zeros(2, 3),
            Matrix::zeros(2, 3),
            vec![0.0; 3],
            vec![2.0, 0.0, 0.0],
            0.3,
            1.0,
            0.0,
        )
        .unwrap();
        let m = true_mechanism(&s, 0, Direction::SourceToTarget).unwrap();
        assert_eq!(m.apply(&[1.0, 1.0, 1.0]).unwrap(), vec![3.0, 1.0, 1.0]);
        assert!(true_mechanism(&s, 3, Direction::SourceToTarget).is_err());
    }

    #[test]
    fn forward_then_reverse_is_identity() {
        let s = spec();
        for i in 0..s.k {
            let f = true_mechanism(&s, i, Direction::SourceToTarget).unwrap();
            let r = true_mechanism(&s, i, Direction::TargetToSource).unwrap();
            let both = r.compose(&f).unwrap();
            assert!(both.matrix.max_abs_diff(&Matrix::identity(s.n)) < 1e-12);
            assert!(both.offset.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn scores_of_true_and_entangled_maps() {
        let s = spec();
        let probe = sample_dataset(&s, Domain::Source, 100, &mut RngStream::new(0, 0)).unwrap();
        let x = probe.features();
        let delta = s.shift();
        for i in 0..s.k {
            let sc = disentanglement_score(
                &s,
                &true_mechanism(&s, i, Direction::SourceToTarget).unwrap(),
                i,
                x,
            )
            .unwrap();
            assert!(sc.off < 1e-10);
            assert!((sc.on - delta[i].abs()).abs() < 1e-10);
        }
        let mut r = vec![0.0; 3];
        r[0] = 0.4;
        r[2] = 0.4;
        let ent = AffineMap::translation(s.a.matvec(&r).unwrap());
        let sc = disentanglement_score(&s, &ent, 0, x).unwrap();
        assert!((sc.off - 0.4).abs() < 1e-10);
    }

    #[test]
    fn lifted_maps_only_touch_their_coordinates() {
        let s = spec();
        let x = sample_dataset(&s, Domain::Source, 50, &mut RngStream::new(3, 0)).unwrap();
        let mut r = Matrix::identity(3);
        r.set(1, 0, 0.7);
        r.set(1, 1, 1.3);
        let m = lift_latent_map(&s, &r, &[0.0, 0.5, 0.0]).unwrap();
        let sc = disentanglement_score(&s, &m, 1, x.features()).unwrap();
        assert!(sc.off < 1e-10, "{sc:?}");
        assert!(sc.on > 0.1);
    }

    #[test]
    fn faithful_candidate_has_best_likelihood() {
        let s = spec();
        let x = sample_dataset(&s, Domain::Source, 500, &mut RngStream::new(8, 0)).unwrap();
        for i in 0..s.k {
            let ll = candidate_mismatch(&s, i, x.features()).unwrap();
            let best = crate::numerics::argmax(&ll);
            assert_eq!(best, i, "{ll:?}");
        }
    }
}
