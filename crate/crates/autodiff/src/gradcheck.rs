//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::AutodiffError;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many randomly chosen entries per parameter tensor;
    /// `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged by absolute error instead.
    pub rel_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries_per_param: None,
            rel_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel_err() < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn evaluate<E>(
    f: &mut impl FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, E>,
    store: &ParamStore<f64>,
) -> Result<f64, E>
where
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    Ok(tape.item(loss)?)
}

/// Compares reverse-mode gradients of the scalar function `f` with central
/// differences, one parameter entry at a time.
///
/// `f` must be deterministic: any randomness inside it has to be replayed
/// from fixed noise. It is evaluated twice at the unperturbed point and a
/// mismatch is reported as [`AutodiffError::NonDeterministic`].
pub fn grad_check<E>(
    store: &ParamStore<f64>,
    opts: &GradCheckOptions,
    mut f: impl FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, E>,
) -> Result<GradCheckReport, E>
where
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let loss_var = f(&mut tape, store)?;
    let loss = tape.item(loss_var)?;
    let analytic = tape.backward(loss_var, store)?;
    drop(tape);

    let again = evaluate(&mut f, store)?;
    if again.to_bits() != loss.to_bits() {
        return Err(AutodiffError::NonDeterministic {
            first: loss,
            second: again,
        }
        .into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).len();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            entries_checked: entries.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
        };
        for i in entries {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = evaluate(&mut f, &work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = evaluate(&mut f, &work)?;
            work.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.get(id).data()[i];
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.max_rel_err = check
                .max_rel_err
                .max(relative_error(a, numeric, opts.rel_floor));
        }
        params.push(check);
    }
    Ok(GradCheckReport { loss, params })
}
