use super::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing a taped gradient against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub analytic: Matrix,
    /// `(row, col, finite_difference)` for every checked entry.
    pub numeric: Vec<(usize, usize, f64)>,
}

/// Denominator floor for the relative error; below it the comparison is absolute.
const REL_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval<'a, F>(f: &F, at: Matrix) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.var(at);
    let y = f(&mut tape, x)?;
    let v = tape
        .value(y)
        .item()
        .ok_or_else(|| Error::Input("grad_check target is not scalar".into()))?;
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Checks the taped gradient of the scalar function `f` at every entry of `at`.
///
/// The step for entry `x` is `eps·(1+|x|)`; returns the worst relative error.
pub fn grad_check<'a, F>(f: F, at: &Matrix, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, Var) -> Result<Var>,
{
    let entries: Vec<_> = (0..at.rows())
        .flat_map(|r| (0..at.cols()).map(move |c| (r, c)))
        .collect();
    Ok(grad_check_entries(f, at, eps, &entries)?.max_rel_err)
}

/// [`grad_check`] restricted to the listed `(row, col)` entries.
pub fn grad_check_entries<'a, F>(f: F, at: &Matrix, eps: f64, entries: &[(usize, usize)]) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'a>, Var) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Input(format!("eps must be positive, got {eps}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.var(at.clone());
        let y = f(&mut tape, x)?;
        if !tape.value(y).is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        tape.backward(y)?.wrt(x)
    };
    let mut max_rel_err = 0.0f64;
    let mut numeric = Vec::with_capacity(entries.len());
    for &(r, c) in entries {
        let x0 = at.get(r, c);
        let h = eps * (1.0 + x0.abs());
        let mut plus = at.clone();
        plus.set(r, c, x0 + h);
        let mut minus = at.clone();
        minus.set(r, c, x0 - h);
        let fd = (eval(&f, plus)? - eval(&f, minus)?) / (2.0 * h);
        max_rel_err = max_rel_err.max(rel_err(analytic.get(r, c), fd));
        numeric.push((r, c, fd));
    }
    Ok(GradCheck {
        max_rel_err,
        analytic,
        numeric,
    })
}
