use super::matrix::Matrix;
use super::tape::{ParamId, Tape, Var};
use crate::error::TensorError;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared on an absolute scale; the
/// central difference cannot resolve relative error much below it.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of `f` against central differences over every
/// entry of every parameter and returns the largest relative error.
///
/// `f` receives a fresh recording tape and one var per parameter (bound as
/// `ParamId(i)`), and must return a 1×1 loss.
pub fn gradient_check<F>(f: F, params: &[Matrix]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |ps: &[Matrix]| -> Result<f64, TensorError> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = ps
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(i), p))
            .collect();
        let out = f(&mut tape, &vars)?;
        let y = tape.scalar(out);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(TensorError::NonFinite("gradient_check objective"))
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(ParamId(i), p))
        .collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.scalar(loss).is_finite() {
        return Err(TensorError::NonFinite("gradient_check objective"));
    }
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (i, p) in params.iter().enumerate() {
        let zero = Matrix::zeros(p.rows(), p.cols());
        let analytic = grads.get(ParamId(i)).unwrap_or(&zero);
        for r in 0..p.rows() {
            for c in 0..p.cols() {
                let x = p.get(r, c);
                probe[i].set(r, c, x + FD_STEP)?;
                let up = eval(&probe)?;
                probe[i].set(r, c, x - FD_STEP)?;
                let down = eval(&probe)?;
                probe[i].set(r, c, x)?;
                let numeric = (up - down) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(analytic.get(r, c), numeric));
            }
        }
    }
    Ok(worst)
}
