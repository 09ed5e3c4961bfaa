//! Central finite-difference checks of reverse-mode gradients (64-bit only).

use std::fmt;

use crate::autograd::{Graph, NodeId, OpKind};
use crate::error::Result;
use crate::params::{Bindings, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Magnitude below which errors are measured absolutely: the relative
    /// error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Corrupts one op's backward rule in the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst entry.
    pub worst: usize,
    pub non_finite: bool,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.params.iter().map(|p| p.name.len()).max().unwrap_or(4).max(9);
        writeln!(
            f,
            "{:<w$}  {:>7}  {:>12}  {:>12}  status",
            "parameter", "numel", "max_rel_err", "max_abs_err"
        )?;
        for p in &self.params {
            let status = if p.non_finite {
                "NON-FINITE"
            } else if p.passed {
                "ok"
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "{:<w$}  {:>7}  {:>12.3e}  {:>12.3e}  {status}",
                p.name, p.numel, p.max_rel_err, p.max_abs_err
            )?;
        }
        write!(
            f,
            "loss {:.6}  max rel err {:.3e}  tolerance {:.1e}  {}",
            self.loss,
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Relative error with an absolute floor in the denominator.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `model`'s reverse-mode gradients against central differences
/// for every scalar of every parameter in `params`.
///
/// `model` builds a scalar loss in the given graph, pulling parameters
/// through the bindings.
pub fn grad_check<F>(model: F, params: &ParamStore<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &mut Bindings<'_, f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    if let Some(kind) = opts.fault {
        g.inject_backward_fault(kind);
    }
    let mut bind = Bindings::new(params, true);
    let loss = model(&mut g, &mut bind)?;
    let loss_value = g.value(loss).item();
    let mut raw = g.backward(loss)?;
    let analytic = bind.collect(&mut raw);

    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let mut b = Bindings::new(p, false);
        let l = model(&mut g, &mut b)?;
        Ok(g.value(l).item())
    };

    let mut work = params.clone();
    let mut checks = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let zero;
        let an = match analytic.get(name) {
            Some(t) => t,
            None => {
                zero = crate::tensor::Tensor::zeros(tensor.shape());
                &zero
            }
        };
        let mut check = ParamCheck {
            name: name.to_string(),
            numel: tensor.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: 0,
            non_finite: false,
            passed: true,
        };
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            let slot = |w: &mut ParamStore<f64>, v: f64| {
                w.get_mut(name).expect("parameter exists").data_mut()[i] = v;
            };
            slot(&mut work, orig + opts.step);
            let up = eval(&work)?;
            slot(&mut work, orig - opts.step);
            let down = eval(&work)?;
            slot(&mut work, orig);
            let numeric = (up - down) / (2.0 * opts.step);
            let a = an.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                check.non_finite = true;
                check.max_rel_err = f64::NAN;
                check.worst = i;
                break;
            }
            let rel = relative_error(a, numeric, opts.floor);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst = i;
            }
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
        }
        check.passed = !check.non_finite && check.max_rel_err <= opts.tolerance;
        checks.push(check);
    }
    Ok(GradCheckReport {
        loss: loss_value,
        tolerance: opts.tolerance,
        params: checks,
    })
}
