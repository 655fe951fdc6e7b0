//! Central-difference gradient checking. Everything here runs in f64; the
//! analytic side comes from [`Graph::backward`], the numeric side from two
//! forward evaluations per probed entry.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Graph, NodeId, Tensor};

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub per_parameter_errors: Vec<(String, f64)>,
    pub passed: bool,
}

impl GradCheckReport {
    fn failed(op_name: &str, reason: &str) -> Self {
        GradCheckReport {
            op_name: op_name.to_string(),
            max_rel_error: f64::INFINITY,
            per_parameter_errors: vec![(reason.to_string(), f64::INFINITY)],
            passed: false,
        }
    }
}

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Entries probed per parameter tensor; small tensors are probed fully.
    pub max_probes_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tol: 1e-3,
            max_probes_per_param: 16,
            seed: 0x5eed,
        }
    }
}

/// Compare analytic gradients of `build` against central differences.
///
/// `build` receives a fresh graph and one leaf per parameter (in order) and
/// must return a scalar loss node. It is called repeatedly and must be
/// deterministic.
pub fn grad_check<F>(
    op_name: &str,
    params: &[(String, Tensor<f64>)],
    build: F,
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let analytic = match analytic_grads(params, &build) {
        Ok(g) => g,
        Err(e) => return GradCheckReport::failed(op_name, &format!("build failed: {e}")),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel: f64 = 0.0;
    let mut ok = true;

    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    for pi in 0..params.len() {
        let numel = params[pi].1.numel();
        let probes: Vec<usize> = if numel <= cfg.max_probes_per_param {
            (0..numel).collect()
        } else {
            // Distinct probe indices; collisions are re-drawn.
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < cfg.max_probes_per_param {
                picked.insert(rng.gen_range(0..numel));
            }
            picked.into_iter().collect()
        };

        let mut param_max: f64 = 0.0;
        for idx in probes {
            let orig = work[pi].1.data()[idx];
            work[pi].1.data_mut()[idx] = orig + cfg.eps;
            let f_plus = eval_loss(&work, &build);
            work[pi].1.data_mut()[idx] = orig - cfg.eps;
            let f_minus = eval_loss(&work, &build);
            work[pi].1.data_mut()[idx] = orig;

            let (f_plus, f_minus) = match (f_plus, f_minus) {
                (Ok(a), Ok(b)) => (a, b),
                _ => {
                    ok = false;
                    param_max = f64::INFINITY;
                    break;
                }
            };
            let numeric = (f_plus - f_minus) / (2.0 * cfg.eps);
            let a = analytic[pi][idx];
            if !numeric.is_finite() || !a.is_finite() {
                ok = false;
                param_max = f64::INFINITY;
                break;
            }
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            param_max = param_max.max(rel);
        }
        max_rel = max_rel.max(param_max);
        per_param.push((params[pi].0.clone(), param_max));
    }

    GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        per_parameter_errors: per_param,
        passed: ok && max_rel <= cfg.tol,
    }
}

fn analytic_grads<F>(params: &[(String, Tensor<f64>)], build: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|(_, t)| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    Ok(ids
        .iter()
        .zip(params)
        .map(|(&id, (_, t))| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

fn eval_loss<F>(params: &[(String, Tensor<f64>)], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|(_, t)| g.leaf(t.clone().with_requires_grad(false)))
        .collect();
    let loss = build(&mut g, &ids)?;
    Ok(g.scalar_value(loss))
}

/// Uniform random tensor helper shared by the various check suites.
pub fn random_tensor(
    shape: super::Shape,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<f64> {
    let data: Vec<f64> = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("matching length")
}
