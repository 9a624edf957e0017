use super::{Graph, Primitive, Tensor, TensorError, Var};

/// Largest coordinate-wise relative error between the tape gradient and a
/// central difference of `f` at `input`.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    grad_check_with(f, input, h, None)
}

/// [`grad_check`] with the backward rule of `sign_flip` negated in the analytic pass.
pub fn grad_check_with<F>(
    f: F,
    input: &Tensor<f64>,
    h: f64,
    sign_flip: Option<Primitive>,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    grad_check_seeded(f, input, h, sign_flip, None)
}

/// [`grad_check_with`] on graphs in training mode when `training_seed` is
/// set. Every evaluation reseeds, so dropout masks agree across the analytic
/// and numeric passes.
pub fn grad_check_seeded<F>(
    f: F,
    input: &Tensor<f64>,
    h: f64,
    sign_flip: Option<Primitive>,
    training_seed: Option<u64>,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let fresh = || match training_seed {
        Some(seed) => Graph::training(seed),
        None => Graph::new(),
    };
    let mut g = fresh();
    g.inject_sign_flip(sign_flip);
    let x = g.param(input.clone());
    let loss = f(&mut g, x)?;
    g.backward(loss)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.len()]);

    let eval = |t: Tensor<f64>| -> Result<f64, TensorError> {
        let mut g = fresh();
        let x = g.constant(t);
        let loss = f(&mut g, x)?;
        Ok(g.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = input.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if err.is_nan() || err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
