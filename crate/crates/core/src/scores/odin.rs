use super::{mcp_score, ScoreBatch};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{argmax, check_input, Classifier};

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of `Σ_rows log S_ŷ(x; τ)` with respect to the input, where `ŷ`
/// is each row's predicted class.
pub fn log_max_softmax_gradient(clf: &Classifier, x: &Tensor, tau: f64) -> Result<Tensor> {
    let x = check_input(x, clf.input_dim())?;
    let tape = Tape::new();
    let params = clf.bind(&tape, false);
    let input = tape.param(x);
    let (logits, _) = clf.forward_on(&params, input, None)?;
    let values = logits.value();
    let (b, c) = (values.rows(), values.cols());
    let mut mask = vec![0.0; b * c];
    for (i, row) in values.row_iter().enumerate() {
        mask[i * c + argmax(row)] = 1.0;
    }
    let mask = tape.constant(Tensor::matrix(b, c, mask)?);
    let objective = logits.log_softmax_temp(tau)?.mul(&mask)?.sum()?;
    tape.backward(objective)?;
    let grad = input.grad().expect("input is a parameter");
    if !grad.all_finite() {
        return Err(Error::Scoring("input gradient is not finite".into()));
    }
    Ok(grad)
}

/// `x̃ = x − ε·sign(−∇ₓ log S_ŷ(x; τ))`, with `sign(0) = 0`.
pub fn odin_perturb(clf: &Classifier, x: &Tensor, epsilon: f64, tau: f64) -> Result<Tensor> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Parameter(format!(
            "epsilon must be >= 0, got {epsilon}"
        )));
    }
    if epsilon == 0.0 {
        return check_input(x, clf.input_dim());
    }
    let x = check_input(x, clf.input_dim())?;
    let grad = log_max_softmax_gradient(clf, &x, tau)?;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xi, &g)| xi - epsilon * sign(-g))
        .collect();
    Tensor::matrix(x.rows(), x.cols(), data)
}

/// Max softmax at temperature `tau_prime` of the perturbed input. The
/// perturbation itself uses the training temperature.
pub fn odin_score(
    clf: &Classifier,
    x: &Tensor,
    epsilon: f64,
    tau_prime: f64,
) -> Result<ScoreBatch> {
    let perturbed = odin_perturb(clf, x, epsilon, 1.0)?;
    mcp_score(clf, &perturbed, tau_prime)
}
