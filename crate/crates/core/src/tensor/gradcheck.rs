//! Central finite-difference oracle for analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar function of a list of parameter tensors with an analytic gradient.
pub trait Objective {
    fn loss(&mut self, params: &[Tensor<f64>]) -> Result<f64>;

    fn gradient(&mut self, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>;

    /// Loss with the [`Graph::kink_pattern`] of its evaluation, if known.
    fn loss_and_pattern(&mut self, params: &[Tensor<f64>]) -> Result<(f64, Option<u64>)> {
        Ok((self.loss(params)?, None))
    }
}

/// Objective defined by a closure that builds a scalar loss on a fresh tape
/// from parameter leaves.
pub struct GraphObjective<F> {
    build: F,
}

impl<F> GraphObjective<F>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    pub fn new(build: F) -> Self {
        GraphObjective { build }
    }

    fn eval(&mut self, params: &[Tensor<f64>], want_grad: bool) -> Result<(f64, u64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), want_grad)).collect();
        let loss = (self.build)(&mut g, &vars)?;
        let value = g.value(loss).item();
        if !want_grad {
            return Ok((value, g.kink_pattern(), Vec::new()));
        }
        g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        Ok((value, 0, grads))
    }
}

impl<F> Objective for GraphObjective<F>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    fn loss(&mut self, params: &[Tensor<f64>]) -> Result<f64> {
        Ok(self.eval(params, false)?.0)
    }

    fn gradient(&mut self, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        Ok(self.eval(params, true)?.2)
    }

    fn loss_and_pattern(&mut self, params: &[Tensor<f64>]) -> Result<(f64, Option<u64>)> {
        let (value, pattern, _) = self.eval(params, false)?;
        Ok((value, Some(pattern)))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_entries_per_tensor: Option<usize>,
    /// Times the step is divided by ten when `±step` changes the kink
    /// pattern of the objective, i.e. the difference straddles a ReLU or
    /// max-pool switch.
    pub max_refinements: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_entries_per_tensor: None,
            max_refinements: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub index: usize,
    pub entries: usize,
    /// `‖a−n‖ / max(‖a‖, ‖n‖, 1e-8)` over the checked entries.
    pub rel_error: f64,
    /// Worst `|a−n| / max(|a|, |n|, 1e-8)` over the checked entries.
    pub max_entry_rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// Entries evaluated with a reduced step to stay off a kink.
    pub refined: usize,
    /// Entries still straddling a kink at the smallest step.
    pub kinked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    /// Largest per-tensor relative error.
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn max_entry_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_entry_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn entries_checked(&self) -> usize {
        self.tensors.iter().map(|t| t.entries).sum()
    }

    pub fn entries_refined(&self) -> usize {
        self.tensors.iter().map(|t| t.refined).sum()
    }

    pub fn entries_kinked(&self) -> usize {
        self.tensors.iter().map(|t| t.kinked).sum()
    }
}

/// Relative error `|a−n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn sample_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|i| i * len / m + (len / m) / 2).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares the objective's analytic gradient with central differences
/// `(f(p+h) − f(p−h)) / 2h`, one entry at a time. When the objective
/// reports kink patterns, an entry whose `p ± h` lands on a different
/// linear piece than `p` is retried with `h / 10`.
pub fn finite_diff_check<O: Objective + ?Sized>(
    objective: &mut O,
    params: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::invalid("finite_diff_check", "step must be positive"));
    }
    let analytic = objective.gradient(params)?;
    let base_pattern = objective.loss_and_pattern(params)?.1;
    if analytic.len() != params.len() {
        return Err(Error::shape("finite_diff_check", "gradient count differs from parameter count"));
    }
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::shape(
                "finite_diff_check",
                format!("gradient {:?} vs parameter {:?}", grad.shape(), params[pi].shape()),
            ));
        }
        let idx = sample_indices(params[pi].numel(), opts.max_entries_per_tensor);
        let (mut diff2, mut a2, mut n2, mut worst) = (0.0, 0.0, 0.0, 0.0f64);
        let (mut refined, mut kinked) = (0, 0);
        for &e in &idx {
            let orig = work[pi].data()[e];
            let mut step = opts.step;
            let mut numeric;
            let mut attempt = 0;
            loop {
                work[pi].data_mut()[e] = orig + step;
                let (plus, p_plus) = objective.loss_and_pattern(&work)?;
                work[pi].data_mut()[e] = orig - step;
                let (minus, p_minus) = objective.loss_and_pattern(&work)?;
                work[pi].data_mut()[e] = orig;
                numeric = (plus - minus) / (2.0 * step);
                let smooth = base_pattern.is_none() || (p_plus == base_pattern && p_minus == base_pattern);
                if smooth {
                    break;
                }
                if attempt == opts.max_refinements {
                    kinked += 1;
                    break;
                }
                attempt += 1;
                step /= 10.0;
            }
            if attempt > 0 {
                refined += 1;
            }
            let a = grad.data()[e];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            worst = worst.max(relative_error(a, numeric));
        }
        let (an, nn) = (a2.sqrt(), n2.sqrt());
        tensors.push(TensorCheck {
            index: pi,
            entries: idx.len(),
            rel_error: diff2.sqrt() / an.max(nn).max(1e-8),
            max_entry_rel_error: worst,
            analytic_norm: an,
            numeric_norm: nn,
            refined,
            kinked,
        });
    }
    Ok(GradCheckReport { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear {
        coeffs: Vec<f64>,
        corrupt: bool,
    }

    impl Objective for Linear {
        fn loss(&mut self, p: &[Tensor<f64>]) -> Result<f64> {
            Ok(p[0].data().iter().zip(&self.coeffs).map(|(x, c)| x * c).sum())
        }

        fn gradient(&mut self, _p: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
            let scale = if self.corrupt { 1.1 } else { 1.0 };
            let g = self.coeffs.iter().map(|c| c * scale).collect();
            Ok(vec![Tensor::new([self.coeffs.len()], g)?])
        }
    }

    #[test]
    fn linear_function_is_exact() {
        let mut f = Linear {
            coeffs: vec![0.5, -2.0, 3.25, 1.0],
            corrupt: false,
        };
        let p = vec![Tensor::new([4], vec![0.1, 0.2, -0.3, 0.4]).unwrap()];
        let r = finite_diff_check(&mut f, &p, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error() < 1e-10, "{}", r.max_rel_error());
        assert!(r.max_entry_rel_error() < 1e-10);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut f = Linear {
            coeffs: vec![0.5, -2.0, 3.25, 1.0],
            corrupt: true,
        };
        let p = vec![Tensor::new([4], vec![0.1, 0.2, -0.3, 0.4]).unwrap()];
        let r = finite_diff_check(&mut f, &p, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error() > 1e-2);
    }

    #[test]
    fn sampling_is_even_and_bounded() {
        let idx = sample_indices(100, Some(10));
        assert_eq!(idx.len(), 10);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(*idx.last().unwrap() < 100);
        assert_eq!(sample_indices(5, Some(10)), vec![0, 1, 2, 3, 4]);
    }
}
