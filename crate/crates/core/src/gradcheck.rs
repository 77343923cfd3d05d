//! Central finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::graph::{Bound, Graph, Var};
use crate::params::ParamSet;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation step `h`.
    pub step: f64,
    /// Coordinates sampled per parameter tensor (all of them if fewer exist).
    pub samples_per_param: usize,
    /// Only check parameters whose names start with one of these prefixes.
    pub include: Option<Vec<String>>,
    /// Multiplier applied to the analytic gradient before comparison. Only
    /// useful for fault injection; keep at 1.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            samples_per_param: 64,
            include: None,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub step: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(f: &F, params: &ParamSet<f64>) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Vec<Var>>,
{
    let mut g = Graph::new();
    let bound = g.bind(params, false);
    let losses = f(&mut g, &bound)?;
    Ok(losses.into_iter().map(|l| g.scalar_value(l)).collect())
}

/// Compare reverse-mode gradients of the scalar `f` against
/// `(f(θ+h) - f(θ-h)) / 2h` on a random subsample of coordinates.
///
/// `params` is perturbed in place and restored exactly afterwards.
pub fn grad_check<F>(
    f: F,
    params: &mut ParamSet<f64>,
    options: &GradCheckOptions,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut reports = grad_check_many(|g, b| Ok(vec![f(g, b)?]), params, options, rng)?;
    Ok(reports.remove(0))
}

/// [`grad_check`] for several scalars built on one graph. Each perturbed
/// forward pass is shared by all outputs; one report per output.
pub fn grad_check_many<F>(
    f: F,
    params: &mut ParamSet<f64>,
    options: &GradCheckOptions,
    rng: &mut Rng,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Vec<Var>>,
{
    let analytic = {
        let mut g = Graph::new();
        let bound = g.bind(params, true);
        let losses = f(&mut g, &bound)?;
        losses
            .into_iter()
            .map(|l| Ok(bound.collect(&g.backward(l)?)))
            .collect::<Result<Vec<_>>>()?
    };

    let names: Vec<String> = params
        .names()
        .filter(|n| {
            options
                .include
                .as_ref()
                .is_none_or(|inc| inc.iter().any(|p| n.starts_with(p.as_str())))
        })
        .map(str::to_string)
        .collect();

    let h = options.step;
    let mut reports = vec![
        GradCheckReport {
            step: h,
            ..Default::default()
        };
        analytic.len()
    ];
    for name in names {
        let len = params.require(&name)?.len();
        let coords: Vec<usize> = if len <= options.samples_per_param {
            (0..len).collect()
        } else {
            let mut perm = rng.shuffle(len);
            perm.truncate(options.samples_per_param);
            perm
        };
        let mut worst = vec![0f64; analytic.len()];
        for &i in &coords {
            let original = params.require(&name)?.data()[i];
            params.get_mut(&name).expect("present").data_mut()[i] = original + h;
            let plus = evaluate(&f, params);
            params.get_mut(&name).expect("present").data_mut()[i] = original - h;
            let minus = evaluate(&f, params);
            params.get_mut(&name).expect("present").data_mut()[i] = original;
            let (plus, minus) = (plus?, minus?);
            for (k, grads) in analytic.iter().enumerate() {
                let numeric = (plus[k] - minus[k]) / (2.0 * h);
                let a = grads.get(&name).map_or(0.0, |g| g.data()[i]) * options.analytic_scale;
                worst[k] = worst[k].max(relative_error(a, numeric));
            }
        }
        for (report, w) in reports.iter_mut().zip(worst) {
            report.coords_checked += coords.len();
            report.max_rel_error = report.max_rel_error.max(w);
            report.per_param.insert(name.clone(), w);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(name: &str, t: Tensor<f64>) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert(name, t).unwrap();
        p
    }

    #[test]
    fn quadratic_is_exact() {
        let mut params = single("theta", Tensor::scalar(3.0));
        let report = grad_check(
            |g, b| {
                let t = b.get("theta")?;
                g.mul(t, t)
            },
            &mut params,
            &GradCheckOptions::default(),
            &mut Rng::new(0),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
        assert_eq!(params.get("theta").unwrap().item(), 3.0);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut params = single("theta", Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let report = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &mut params,
            &GradCheckOptions::default(),
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn detects_corrupted_gradient() {
        let mut params = single("theta", Tensor::scalar(3.0));
        let opts = GradCheckOptions {
            analytic_scale: 1.5,
            ..Default::default()
        };
        let report = grad_check(
            |g, b| {
                let t = b.get("theta")?;
                g.mul(t, t)
            },
            &mut params,
            &opts,
            &mut Rng::new(0),
        )
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn subsamples_large_tensors() {
        let mut params = single("w", Tensor::full(vec![10, 20], 0.5));
        let report = grad_check(
            |g, b| {
                let w = b.get("w")?;
                let sq = g.mul(w, w)?;
                g.sum(sq)
            },
            &mut params,
            &GradCheckOptions::default(),
            &mut Rng::new(1),
        )
        .unwrap();
        assert_eq!(report.coords_checked, 64);
        assert!(report.max_rel_error < 1e-8);
    }
}
