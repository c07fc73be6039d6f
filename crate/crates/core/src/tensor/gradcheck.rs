use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Check at most this many coordinates, drawn uniformly with `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

fn coords(total: usize, opts: &GradCheckOptions) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = rand::seq::index::sample(&mut rng, total, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..total).collect(),
    }
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    t.item().ok_or(Error::NotScalar { len: t.len() })
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over the coordinates of
/// `x`, where `f` maps an input to a scalar and the numeric gradient uses
/// central differences.
pub fn grad_check<F>(f: F, x: &Tensor, opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.constant(x.clone())?;
    let out = f(&mut tape, input)?;
    tape.backward_detached(out)?;
    let analytic = tape.grad(input).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe)?;
        let out = f(&mut tape, v)?;
        scalar(&tape, out)
    };
    let mut worst = 0.0f64;
    for i in coords(x.len(), &opts) {
        let mut plus = x.clone();
        plus.data_mut()[i] += opts.h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= opts.h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * opts.h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`] but differentiates with respect to the parameters
/// `ids` of `params`. Existing gradients in `params` are cleared.
pub fn grad_check_params<F>(f: F, params: &mut ParamStore, ids: &[ParamId], opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    params.zero_grads();
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    tape.backward(out, params)?;

    let flat: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..params.value(id).len()).map(move |j| (id, j)))
        .collect();
    let mut worst = 0.0f64;
    for i in coords(flat.len(), &opts) {
        let (id, j) = flat[i];
        let analytic = params.grad(id).data()[j];
        let original = params.value(id).data()[j];
        let mut eval_at = |v: f64| -> Result<f64> {
            params.get_mut(id).value.data_mut()[j] = v;
            let mut tape = Tape::new();
            let out = f(&mut tape, params)?;
            scalar(&tape, out)
        };
        let plus = eval_at(original + opts.h);
        let minus = eval_at(original - opts.h);
        params.get_mut(id).value.data_mut()[j] = original;
        let numeric = (plus? - minus?) / (2.0 * opts.h);
        worst = worst.max(rel_err(analytic, numeric));
    }
    params.zero_grads();
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 3), |_, c, h, w| (c as f64 - 0.5) * (h as f64 + 0.3 * w as f64));
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn detects_wrong_backward() {
        let x = Tensor::full(Shape::vector(3), 0.5);
        let err = grad_check(
            |t, v| {
                let doubled = t.value(v).map(|a| 2.0 * a);
                let y = t.custom("bad_double", &[v], doubled, Box::new(|ins, _, g| vec![g.map(|v| 3.0 * v).reshape(ins[0].shape()).unwrap()]))?;
                t.sum(y)
            },
            &x,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!((err - 0.5).abs() < 1e-8);
    }
}
