//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation half-width.
    pub eps: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, guarding exact zeros.
    pub floor: f64,
    /// Upper bound on perturbed entries per input; `None` checks all.
    pub max_entries: Option<usize>,
    /// Seed for the entry subset.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tol: 1e-4,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub input: usize,
    pub checked: usize,
    /// Entries whose perturbation crossed a non-smooth point.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_entry: Option<usize>,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|r| r.skipped).sum()
    }

    pub fn failures(&self) -> usize {
        self.inputs.iter().map(|r| r.failures).sum()
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0 && self.checked() > 0
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let s = g.shape(out);
    if !s.is_scalar() {
        return Err(Error::NotScalar(s.to_string()));
    }
    Ok((g, vars, out))
}

/// Compares the gradient of the scalar built by `f` with respect to each
/// input against `(f(x + eps) - f(x - eps)) / (2 eps)`, entry by entry.
///
/// Perturbations that change the graph's non-smooth signature are counted
/// as skipped instead of compared, since no derivative exists across them.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(&f, inputs)?;
    let base_signature = g.nonsmooth_signature();
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.data.len()])
        })
        .collect();
    drop(g);

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.data.len();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k as u64));
                let mut idx = sample(&mut rng, n, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut report = InputReport {
            input: k,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst_entry: None,
            failures: 0,
        };
        for i in entries {
            let x = input.data[i];
            work[k].data[i] = x + opts.eps;
            let (gp, _, op) = evaluate(&f, &work)?;
            work[k].data[i] = x - opts.eps;
            let (gm, _, om) = evaluate(&f, &work)?;
            work[k].data[i] = x;
            if gp.nonsmooth_signature() != base_signature
                || gm.nonsmooth_signature() != base_signature
            {
                report.skipped += 1;
                continue;
            }
            let numeric = (gp.item(op) - gm.item(om)) / (2.0 * opts.eps);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > opts.tol {
                report.failures += 1;
            }
            if rel > report.max_rel_error || report.worst_entry.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst_entry = Some(i);
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        inputs: reports,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Shape;
    use rand::Rng;

    fn random(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape, (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn five_op_graph_matches_finite_differences() {
        let s = Shape::new(1, 4, 5);
        let inputs = [random(s, 1, 0.2, 1.5), random(s, 2, -1.0, 1.0)];
        let report = grad_check(
            |g, v| {
                let prod = g.mul(v[0], v[1])?;
                let e = g.exp(prod)?;
                let l = g.log(v[0])?;
                let s = g.sub(e, l)?;
                let sig = g.sigmoid(s)?;
                Ok(g.mean(sig))
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked(), 40);
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let x = Tensor::new(Shape::new(1, 1, 2), vec![0.0004, 0.7]).unwrap();
        let report = grad_check(
            |g, v| {
                let a = g.abs(v[0])?;
                Ok(g.sum(a))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.inputs[0].skipped, 1);
        assert_eq!(report.inputs[0].checked, 1);
        assert!(report.passed());
    }

    #[test]
    fn wrong_gradient_is_reported() {
        // a deliberately inconsistent op: value uses x^2, tape says d/dx = 1
        let x = Tensor::new(Shape::new(1, 1, 1), vec![2.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let sq = g.square(v[0])?;
                let c = g.constant(g.value(sq).clone());
                let y = g.add_scalar(v[0], 0.0)?;
                let zero = g.sub(y, v[0])?;
                let z = g.add(zero, c)?;
                let lin = g.add(z, v[0])?;
                Ok(g.sum(lin))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }
}
