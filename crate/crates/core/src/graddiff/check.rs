use super::params::{Gradients, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_slot: String,
    pub worst_index: usize,
    pub coords: usize,
}

/// Denominator floor for the relative error; gradients smaller than this are
/// compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

/// Compares analytic gradients to central differences on every coordinate.
pub fn finite_diff_check<F>(loss_fn: F, params: &ParamStore, eps: f64) -> Result<FdReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (_, grads) = loss_fn(params)?;
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_slot: String::new(),
        worst_index: 0,
        coords: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let base = params.get(&name)?.clone();
        for idx in 0..base.data().len() {
            let mut plus = base.clone();
            plus.data_mut()[idx] += eps;
            probe.set(&name, plus)?;
            let (fp, _) = loss_fn(&probe)?;
            let mut minus = base.clone();
            minus.data_mut()[idx] -= eps;
            probe.set(&name, minus)?;
            let (fm, _) = loss_fn(&probe)?;
            probe.set(&name, base.clone())?;

            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[idx]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            report.coords += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_slot = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graddiff::Tape;
    use crate::numerics::Matrix;

    #[test]
    fn quadratic_loss_is_exact() {
        let mut store = ParamStore::new();
        store
            .register(
                "a",
                Matrix::from_rows(&[vec![0.3, -1.1], vec![2.0, 0.4]]).unwrap(),
            )
            .unwrap();
        let loss = |s: &ParamStore| {
            let mut t = Tape::new();
            let a = t.param(s, "a")?;
            let sq = t.square(a);
            let total = t.sum(sq);
            let l = t.scale(total, 0.5);
            Ok((t.scalar(l), t.backward(l)?))
        };
        let r = finite_diff_check(loss, &store, 1e-5).unwrap();
        assert_eq!(r.coords, 4);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut store = ParamStore::new();
        store.register("a", Matrix::row_vector(&[1.0])).unwrap();
        let loss = |s: &ParamStore| {
            let mut t = Tape::new();
            let a = t.param(s, "a")?;
            let sq = t.square(a);
            let l = t.sum(sq);
            Ok((t.scalar(l), t.backward(l)?.scaled(0.5)))
        };
        assert!(finite_diff_check(loss, &store, 1e-5).unwrap().max_rel_err > 0.4);
    }
}
