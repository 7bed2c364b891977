//! Central finite-difference checks for tape programs in f64.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Input index and flat coordinate of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

/// Runs `program` on a fresh tape with `inputs` as parameters and returns the
/// scalar output value.
fn evaluate<F>(program: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = program(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::ShapeMismatch("program output must be a scalar".into()));
    }
    Ok(v.data()[0])
}

/// Reverse-mode gradients of `program` with respect to each input.
pub fn analytic_gradients<F>(program: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = program(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

/// Central differences `(f(x+h) - f(x-h)) / 2h` for every input coordinate.
pub fn numeric_gradients<F>(program: &F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = evaluate(program, &work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = evaluate(program, &work)?;
            work[i].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

impl GradCheckReport {
    /// Largest relative error over entries whose absolute gap exceeds `floor`.
    pub fn max_relative_error_above(&self, floor: f64) -> f64 {
        let mut worst = 0.0f64;
        for (a, n) in self.analytic.iter().zip(&self.numeric) {
            for (&x, &y) in a.iter().zip(n) {
                if (x - y).is_nan() || (x - y).abs() > floor {
                    worst = worst.max(relative_error(x, y));
                }
            }
        }
        worst
    }
}

/// Compares supplied gradients against numeric ones.
pub fn compare(analytic: Vec<Vec<f64>>, numeric: Vec<Vec<f64>>) -> GradCheckReport {
    let mut max = 0.0;
    let mut worst = (0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&x, &y)) in a.iter().zip(n).enumerate() {
            let e = relative_error(x, y);
            if e > max || e.is_nan() {
                max = e;
                worst = (i, j);
            }
        }
    }
    GradCheckReport {
        max_relative_error: max,
        worst,
        analytic,
        numeric,
    }
}

pub fn grad_check<F>(program: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&program, inputs)?;
    let numeric = numeric_gradients(&program, inputs, h)?;
    Ok(compare(analytic, numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn probe(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect()
    }

    #[test]
    fn linear_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [random(&[4, 3], &mut rng), random(&[3, 5], &mut rng), random(&[5], &mut rng)];
        let w = probe(20);
        let r = grad_check(
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                t.weighted_sum(y, &w)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{}", r.max_relative_error);
    }

    #[test]
    fn sign_flip_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [random(&[4, 3], &mut rng), random(&[3, 2], &mut rng)];
        let w = probe(8);
        let program = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.linear(v[0], v[1], None)?;
            t.weighted_sum(y, &w)
        };
        let mut analytic = analytic_gradients(&program, &inputs).unwrap();
        for g in analytic.iter_mut().flatten() {
            *g = -*g;
        }
        let numeric = numeric_gradients(&program, &inputs, DEFAULT_STEP).unwrap();
        assert!(compare(analytic, numeric).max_relative_error > 0.1);
    }
}
