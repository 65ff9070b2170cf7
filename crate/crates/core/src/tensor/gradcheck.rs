use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    /// Central-difference step.
    pub h: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Coordinates checked per parameter; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdReport {
    /// `(parameter name, max relative error over checked coordinates)`.
    pub per_param: Vec<(String, f64)>,
    pub coords_checked: usize,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compares tape gradients of the scalar `f` with central differences.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_diff_check<F, E>(
    store: &mut ParamStore,
    mut f: F,
    cfg: &FdConfig,
) -> Result<FdReport, E>
where
    F: FnMut(&mut Tape<'_>) -> Result<Var, E>,
    E: From<TensorError>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).item()?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut coords_checked = 0;
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for c in coords {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + cfg.h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig - cfg.h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[c]);
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max((a - numeric).abs() / denom);
            coords_checked += 1;
        }
        per_param.push((store.name(id).to_string(), worst));
    }
    Ok(FdReport {
        per_param,
        coords_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identity_map_has_zero_error() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.3)).unwrap();
        let report = finite_diff_check::<_, TensorError>(
            &mut store,
            |tape| tape.param(id),
            &FdConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-9, "{report:?}");
    }

    #[test]
    fn constant_function_both_zero() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::row(&[1.0, 2.0])).unwrap();
        let report = finite_diff_check::<_, TensorError>(
            &mut store,
            |tape| Ok(tape.constant(Tensor::scalar(4.0))),
            &FdConfig::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_error(), 0.0);
        assert_eq!(report.coords_checked, 2);
    }
}
