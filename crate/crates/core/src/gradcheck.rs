//! Central finite-difference gradient verification.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Absolute differences at or below this are finite-difference roundoff
    /// and pass regardless of relative error.
    pub atol: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            atol: 1e-8,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub within_noise: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Largest `|analytic − numeric|` over every checked coordinate.
    pub max_abs_error: f64,
    pub worst: Option<CoordinateCheck>,
    pub failures: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
        self.failures.extend(other.failures);
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn coordinates(len: usize, opts: &GradCheckOptions, rng: &mut Stream) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    match opts.max_coords_per_input {
        Some(k) if k < len => {
            rng.shuffle(&mut all);
            all.truncate(k);
            all.sort_unstable();
            all
        }
        _ => all,
    }
}

/// Compares `analytic[i]` against central differences of `value` around
/// `inputs[i]`, coordinate by coordinate.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    analytic: &[Vec<f64>],
    mut value: F,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut rng = Stream::new(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for (i, grad) in analytic.iter().enumerate() {
        for idx in coordinates(inputs[i].len(), opts, &mut rng) {
            let orig = inputs[i].data()[idx];
            work[i].data_mut()[idx] = orig + opts.eps;
            let up = value(&work);
            work[i].data_mut()[idx] = orig - opts.eps;
            let down = value(&work);
            work[i].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let rel = relative_error(grad[idx], numeric);
            let within_noise = (grad[idx] - numeric).abs() <= opts.atol;
            let c = CoordinateCheck {
                input: i,
                index: idx,
                analytic: grad[idx],
                numeric,
                rel_error: rel,
                within_noise,
            };
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((grad[idx] - numeric).abs());
            if within_noise {
                continue;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(c.clone());
            }
            if rel >= opts.tol || !rel.is_finite() {
                report.failures.push(c);
            }
        }
    }
    report
}

/// Checks a graph-built scalar function of `inputs` against finite
/// differences of the same builder.
pub fn grad_check<F>(
    inputs: &[Tensor],
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();
    let mut err = None;
    let report = check_gradients(
        inputs,
        &analytic,
        |ts| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            match build(&mut g, &vars) {
                Ok(l) => g.data(l)[0],
                Err(e) => {
                    err = Some(e);
                    f64::NAN
                }
            }
        },
        opts,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Gradient check over every trainable parameter of `store`. The builder must
/// fetch parameters through [`Graph::param`].
pub fn grad_check_params<F>(
    store: &ParamStore,
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss)?;
    let grads: std::collections::HashMap<ParamId, Vec<f64>> = g.param_grads().into_iter().collect();

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (n, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| vec![0.0; store.tensor(*id).len()]);
        let sub_opts = GradCheckOptions {
            seed: crate::rng::derive_seed(opts.seed, &n.to_string()),
            ..opts.clone()
        };
        let mut err = None;
        let mut sub = check_gradients(
            std::slice::from_ref(store.tensor(*id)),
            std::slice::from_ref(&analytic),
            |ts| {
                work.get_mut(*id)
                    .tensor
                    .data_mut()
                    .copy_from_slice(ts[0].data());
                let mut g = Graph::new();
                match build(&mut g, &work) {
                    Ok(l) => g.data(l)[0],
                    Err(e) => {
                        err = Some(e);
                        f64::NAN
                    }
                }
            },
            &sub_opts,
        );
        work.get_mut(*id)
            .tensor
            .data_mut()
            .copy_from_slice(store.tensor(*id).data());
        if let Some(e) = err {
            return Err(e);
        }
        for f in sub.failures.iter_mut().chain(sub.worst.iter_mut()) {
            f.input = id.index();
        }
        report.merge(sub);
    }
    Ok(report)
}
