use crate::error::Result;

use super::{Graph, Parameter, Var};

/// Anything that owns a fixed, ordered set of named parameters.
pub trait Parameterized<T> {
    fn parameters(&self) -> Vec<&Parameter<T>>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>>;
}

/// A bare list of parameters, handy for checking single ops.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T>(pub Vec<Parameter<T>>);

impl<T> Parameterized<T> for ParamSet<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        self.0.iter().collect()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.0.iter_mut().collect()
    }
}

impl<T> std::ops::Index<usize> for ParamSet<T> {
    type Output = Parameter<T>;
    fn index(&self, i: usize) -> &Parameter<T> {
        &self.0[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat element index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub elements_checked: usize,
}

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, element by element over every parameter.
pub fn grad_check<M, F>(model: &mut M, h: f64, f: F) -> Result<GradCheckReport>
where
    M: Parameterized<f64>,
    F: Fn(&M, &Graph<f64>) -> Result<Var<f64>>,
{
    let graph = Graph::new();
    let loss = f(model, &graph)?;
    let analytic = if loss.tracked() {
        Some(graph.backward(&loss)?)
    } else {
        None
    };
    drop(loss);
    drop(graph);

    let eval = |m: &M| -> Result<f64> {
        let g = Graph::inference();
        f(m, &g)?.value().item()
    };

    let shapes: Vec<(String, usize)> = model
        .parameters()
        .iter()
        .map(|p| (p.name().to_string(), p.numel()))
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
    };
    for (pi, (name, len)) in shapes.iter().enumerate() {
        let grad = analytic.as_ref().and_then(|g| g.param(name)).cloned();
        for i in 0..*len {
            let original = model.parameters()[pi].value().data()[i];
            model.parameters_mut()[pi].value_mut().data_mut()[i] = original + h;
            let plus = eval(model)?;
            model.parameters_mut()[pi].value_mut().data_mut()[i] = original - h;
            let minus = eval(model)?;
            model.parameters_mut()[pi].value_mut().data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.as_ref().map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.elements_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
