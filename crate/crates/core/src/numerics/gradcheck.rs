use super::{Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates rejected by [`grad_check_screened`] because the stencil
    /// straddles a kink.
    pub skipped: usize,
    /// `(input index, flat coordinate, analytic, numeric)` at the worst error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Checks `f`'s gradient with respect to every input by central
/// differences with step `h`, in double precision.
///
/// With `sample = Some((n, rng))` only `n` coordinates drawn uniformly over
/// all inputs are checked; otherwise every coordinate is.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    sample: Option<(usize, &mut Rng)>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let coords: Vec<(usize, usize)> = match sample {
        None => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |c| (i, c)))
            .collect(),
        Some((n, rng)) => (0..n)
            .map(|_| {
                let mut flat = rng.below(total);
                let mut which = 0;
                while flat >= inputs[which].numel() {
                    flat -= inputs[which].numel();
                    which += 1;
                }
                (which, flat)
            })
            .collect(),
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0, worst: None };
    for (which, c) in coords {
        let orig = work[which].data()[c];
        work[which].data_mut()[c] = orig + h;
        let plus = evaluate(&f, &work)?;
        work[which].data_mut()[c] = orig - h;
        let minus = evaluate(&f, &work)?;
        work[which].data_mut()[c] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        report.record(which, c, analytic[which].data()[c], numeric);
    }
    Ok(report)
}

impl GradCheckReport {
    fn record(&mut self, which: usize, c: usize, a: f64, numeric: f64) {
        let err = relative_error(a, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((which, c, a, numeric));
        }
    }
}

/// Relative disagreement between the step-`h` and step-`h/2` central
/// differences above which a coordinate counts as non-smooth.
pub const KINK_TOLERANCE: f64 = 1e-4;

/// Like [`grad_check`] on `n` sampled coordinates, but for functions with
/// isolated kinks (L1 terms, clamps).
///
/// A coordinate whose central differences at `h` and `h/2` disagree by more
/// than [`KINK_TOLERANCE`] has a non-differentiable point inside its stencil;
/// it is counted in `skipped` and another one is drawn. The screen compares
/// two numeric estimates only, so it cannot mask a wrong analytic gradient.
/// Gives up after `4 n` draws.
pub fn grad_check_screened<F>(f: F, inputs: &[Tensor<f64>], h: f64, n: usize, rng: &mut Rng) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    drop(tape);

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0, worst: None };
    let diff = |work: &mut Vec<Tensor<f64>>, which: usize, c: usize, step: f64| -> Result<f64> {
        let orig = work[which].data()[c];
        work[which].data_mut()[c] = orig + step;
        let plus = evaluate(&f, work)?;
        work[which].data_mut()[c] = orig - step;
        let minus = evaluate(&f, work)?;
        work[which].data_mut()[c] = orig;
        Ok((plus - minus) / (2.0 * step))
    };
    for _ in 0..4 * n {
        if report.checked == n {
            break;
        }
        let mut flat = rng.below(total);
        let mut which = 0;
        while flat >= inputs[which].numel() {
            flat -= inputs[which].numel();
            which += 1;
        }
        let coarse = diff(&mut work, which, flat, h)?;
        let fine = diff(&mut work, which, flat, h / 2.0)?;
        if relative_error(coarse, fine) > KINK_TOLERANCE {
            report.skipped += 1;
            continue;
        }
        report.record(which, flat, analytic[which].data()[flat], coarse);
    }
    Ok(report)
}
