use crate::diffcore::graph::{Graph, Var};
use crate::diffcore::params::ParameterSet;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so coordinates whose true
/// gradient is zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, e.g. `enc.0.kernel[17]` or `input0[3]`.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients against central finite differences on
/// every trainable parameter of `params` and every element of `inputs`.
///
/// `loss` rebuilds the scalar objective from scratch on each call; any
/// randomness inside it (dropout masks) must be reseeded identically so the
/// function being differentiated stays fixed.
pub fn grad_check<F>(
    params: &mut ParameterSet,
    inputs: &[Tensor],
    eps: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &mut ParameterSet, &[Var]) -> Result<Var>,
{
    let (param_grads, input_grads) = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let l = loss(&mut g, params, &vars)?;
        let grads = g.backward(l)?;
        let pg: Vec<Option<Tensor>> = (0..params.len())
            .map(|i| grads.for_param(params.id(), i).cloned())
            .collect();
        let ig: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (pg, ig)
    };

    let mut eval = |params: &mut ParameterSet, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let l = loss(&mut g, params, &vars)?;
        Ok(g.scalar(l))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let record = |report: &mut GradCheckReport, name: String, a: f64, n: f64| {
        let e = relative_error(a, n);
        report.coordinates += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e.max(report.max_rel_error);
            report.worst = name;
            report.analytic = a;
            report.numeric = n;
        }
    };

    for pi in 0..params.len() {
        if !params.get(pi).trainable {
            continue;
        }
        let n = params.get(pi).value.len();
        for j in 0..n {
            let orig = params.get(pi).value.data()[j];
            params.get_mut(pi).value.data_mut()[j] = orig + eps;
            let up = eval(params, inputs)?;
            params.get_mut(pi).value.data_mut()[j] = orig - eps;
            let down = eval(params, inputs)?;
            params.get_mut(pi).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = param_grads[pi].as_ref().map_or(0.0, |g| g.data()[j]);
            record(&mut report, format!("{}[{j}]", params.get(pi).name), analytic, numeric);
        }
    }

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data()[j];
            work[k].data_mut()[j] = orig + eps;
            let up = eval(params, &work)?;
            work[k].data_mut()[j] = orig - eps;
            let down = eval(params, &work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            record(&mut report, format!("input{k}[{j}]"), input_grads[k].data()[j], numeric);
        }
    }
    if report.coordinates == 0 {
        return Err(Error::Gradient("nothing to check".into()));
    }
    Ok(report)
}
