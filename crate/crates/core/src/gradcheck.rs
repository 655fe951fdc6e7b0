//! The standard finite-difference verification suite: every differentiable
//! op on several random shapes, the model blocks (squeeze-excitation,
//! adaptive concatenation, upscale), and the end-to-end loss with every
//! concatenation weight plus sampled conv weights probed.
//!
//! Everything runs in f64 inside a single-threaded rayon pool so the
//! reported wall time reflects one core.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{silog_loss, valid_mask, LossParams};
use crate::model::{build_model, FscnModel, ModelConfig, SkipMode};
use crate::tensor::check::{grad_check, random_tensor, GradCheckConfig, GradCheckReport};
use crate::tensor::{Graph, NodeId, Shape, Tensor};

/// Settings for the whole suite.
#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            eps: 1e-5,
            tol: 1e-3,
            seed: 0xfc5,
        }
    }
}

fn check_cfg(suite: &SuiteConfig, probes: usize) -> GradCheckConfig {
    GradCheckConfig {
        eps: suite.eps,
        tol: suite.tol,
        max_probes_per_param: probes,
        seed: suite.seed ^ 0x9e37,
    }
}

/// Sum the elementwise product with a fixed random tensor (deterministic
/// per seed). Distinct upstream gradients per element catch misrouted or
/// transposed gradients that a plain sum would miss.
fn weighted_sum(g: &mut Graph<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(g.shape(out), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum_all(prod))
}

/// Keep values away from a kink at 0 so central differences stay valid.
fn nudged(mut t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = margin * if *v < 0.0 { -1.0 } else { 1.0 };
        }
    }
    t
}

/// Run the complete suite. Each entry is one named check.
pub fn run_full_suite(cfg: &SuiteConfig) -> Vec<GradCheckReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("rayon pool");
    pool.install(|| run_suite_inner(cfg))
}

fn run_suite_inner(cfg: &SuiteConfig) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();

    reports.extend(op_checks(cfg, &mut rng));
    reports.extend(block_checks(cfg, &mut rng));
    reports.push(end_to_end_check(cfg, &mut rng));
    reports
}

pub fn all_passed(reports: &[GradCheckReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

/// One line per check: name, max relative error, PASS/FAIL.
pub fn format_report_table(reports: &[GradCheckReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<28} {:>14}  {}\n", "check", "max_rel_err", "result"));
    for r in reports {
        out.push_str(&format!(
            "{:<28} {:>14.3e}  {}\n",
            r.op_name,
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    out
}

fn op_checks(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    let probes = check_cfg(cfg, 12);

    // conv2d on three geometries: padded 3x3, strided 3x3, pointwise 1x1.
    let conv_cases = [
        ("conv2d(k3,s1,p1)", (1, 2, 5, 5), (3, 2, 3, 3), 1, 1),
        ("conv2d(k3,s2,p1)", (2, 3, 8, 6), (4, 3, 3, 3), 2, 1),
        ("conv2d(k1,s1,p0)", (1, 1, 4, 4), (2, 1, 1, 1), 1, 0),
    ];
    for (name, xs, ws, stride, pad) in conv_cases {
        let x = random_tensor(Shape::new(xs.0, xs.1, xs.2, xs.3), -1.0, 1.0, rng);
        let w = random_tensor(Shape::new(ws.0, ws.1, ws.2, ws.3), -0.8, 0.8, rng);
        let b = random_tensor(Shape::new(1, ws.0, 1, 1), -0.5, 0.5, rng);
        reports.push(grad_check(
            name,
            &[("x".into(), x), ("w".into(), w), ("b".into(), b)],
            move |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], stride, pad)?;
                weighted_sum(g, y, cfg.seed ^ 11)
            },
            &probes,
        ));
    }

    // Elementwise unary ops on three random shapes each.
    let shapes = [
        Shape::new(1, 1, 3, 4),
        Shape::new(2, 3, 2, 2),
        Shape::new(1, 4, 5, 1),
    ];
    for (si, &shape) in shapes.iter().enumerate() {
        let tag = |op: &str| format!("{op}#{si}");
        let margin = 50.0 * cfg.eps;

        let x = nudged(random_tensor(shape, -2.0, 2.0, rng), margin);
        reports.push(grad_check(
            &tag("relu"),
            &[("x".into(), x)],
            move |g, ids| {
                let y = g.relu(ids[0]);
                weighted_sum(g, y, cfg.seed ^ (si as u64 + 21))
            },
            &probes,
        ));

        let x = random_tensor(shape, -3.0, 3.0, rng);
        reports.push(grad_check(
            &tag("sigmoid"),
            &[("x".into(), x)],
            move |g, ids| {
                let y = g.sigmoid(ids[0]);
                weighted_sum(g, y, cfg.seed ^ (si as u64 + 22))
            },
            &probes,
        ));

        let x = random_tensor(shape, 0.2, 4.0, rng);
        reports.push(grad_check(
            &tag("ln"),
            &[("x".into(), x)],
            move |g, ids| {
                let y = g.ln(ids[0])?;
                weighted_sum(g, y, cfg.seed ^ (si as u64 + 23))
            },
            &probes,
        ));

        let x = random_tensor(shape, 0.1, 4.0, rng);
        reports.push(grad_check(
            &tag("sqrt_clamped"),
            &[("x".into(), x)],
            move |g, ids| {
                let y = g.sqrt_clamped(ids[0]);
                weighted_sum(g, y, cfg.seed ^ (si as u64 + 24))
            },
            &probes,
        ));

        let x = random_tensor(shape, -2.0, 2.0, rng);
        reports.push(grad_check(
            &tag("affine"),
            &[("x".into(), x)],
            move |g, ids| {
                let y = g.affine(ids[0], 2.5, -0.7);
                weighted_sum(g, y, cfg.seed ^ (si as u64 + 25))
            },
            &probes,
        ));

        // Binary ops.
        let a = random_tensor(shape, -2.0, 2.0, rng);
        let b = random_tensor(shape, -2.0, 2.0, rng);
        for (op_name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
            reports.push(grad_check(
                &tag(op_name),
                &[("a".into(), a.clone()), ("b".into(), b.clone())],
                move |g, ids| {
                    let y = match which {
                        0 => g.add(ids[0], ids[1])?,
                        1 => g.sub(ids[0], ids[1])?,
                        _ => g.mul(ids[0], ids[1])?,
                    };
                    weighted_sum(g, y, cfg.seed ^ (si as u64 + 26))
                },
                &probes,
            ));
        }

        // Masked reductions.
        let x = random_tensor(shape, -2.0, 2.0, rng);
        let mask: Arc<Vec<bool>> =
            Arc::new((0..shape.numel()).map(|_| rng.gen::<f64>() < 0.6).collect());
        let m2 = mask.clone();
        reports.push(grad_check(
            &tag("masked_sum"),
            &[("x".into(), x.clone())],
            move |g, ids| g.masked_sum(ids[0], m2.clone()),
            &probes,
        ));
        let m3 = mask.clone();
        reports.push(grad_check(
            &tag("mask_fill"),
            &[("x".into(), x.clone())],
            move |g, ids| {
                let y = g.mask_fill(ids[0], m3.clone(), 0.42)?;
                weighted_sum(g, y, cfg.seed ^ (si as u64 + 27))
            },
            &probes,
        ));
        reports.push(grad_check(
            &tag("sum_all"),
            &[("x".into(), x)],
            |g, ids| Ok(g.sum_all(ids[0])),
            &probes,
        ));
    }

    // Structured ops.
    for (si, (n, h, w)) in [(1usize, 4usize, 6usize), (2, 6, 4), (1, 8, 8)].iter().enumerate() {
        let tag = |op: &str| format!("{op}#{si}");
        let (n, h, w) = (*n, *h, *w);

        let parts = [
            random_tensor(Shape::new(n, 2, h, w), -1.0, 1.0, rng),
            random_tensor(Shape::new(n, 1, h, w), -1.0, 1.0, rng),
            random_tensor(Shape::new(n, 3, h, w), -1.0, 1.0, rng),
        ];
        reports.push(grad_check(
            &tag("concat_channels"),
            &[
                ("p0".into(), parts[0].clone()),
                ("p1".into(), parts[1].clone()),
                ("p2".into(), parts[2].clone()),
            ],
            move |g, ids| {
                let y = g.concat_channels(ids)?;
                weighted_sum(g, y, cfg.seed ^ (si as u64 + 31))
            },
            &probes,
        ));

        let x = random_tensor(Shape::new(n, 2, h, w), -1.0, 1.0, rng);
        reports.push(grad_check(
            &tag("resample_up"),
            &[("x".into(), x.clone())],
            move |g, ids| {
                let y = g.resample(ids[0], 2 * h + 3, 2 * w + 1)?;
                weighted_sum(g, y, cfg.seed ^ (si as u64 + 32))
            },
            &probes,
        ));
        reports.push(grad_check(
            &tag("resample_down"),
            &[("x".into(), x.clone())],
            move |g, ids| {
                let y = g.resample(ids[0], h / 2, w / 2)?;
                weighted_sum(g, y, cfg.seed ^ (si as u64 + 33))
            },
            &probes,
        ));
        reports.push(grad_check(
            &tag("global_avg_pool"),
            &[("x".into(), x.clone())],
            move |g, ids| {
                let y = g.global_avg_pool(ids[0]);
                weighted_sum(g, y, cfg.seed ^ (si as u64 + 34))
            },
            &probes,
        ));

        let gates = random_tensor(Shape::new(n, 2, 1, 1), -1.5, 1.5, rng);
        reports.push(grad_check(
            &tag("scale_channels"),
            &[("x".into(), x.clone()), ("gates".into(), gates)],
            move |g, ids| {
                let y = g.scale_channels(ids[0], ids[1])?;
                weighted_sum(g, y, cfg.seed ^ (si as u64 + 35))
            },
            &probes,
        ));

        let a = random_tensor(Shape::scalar(), -1.0, 1.0, rng);
        reports.push(grad_check(
            &tag("scalar_mul"),
            &[("x".into(), x), ("a".into(), a)],
            move |g, ids| {
                let y = g.scalar_mul(ids[0], ids[1])?;
                weighted_sum(g, y, cfg.seed ^ (si as u64 + 36))
            },
            &probes,
        ));
    }

    reports
}

fn tiny_block_model(seed: u64) -> FscnModel<f64> {
    let cfg = ModelConfig {
        skip_mode: SkipMode::FullSkip,
        base_channels: 2,
        channel_schedule: [2, 3, 4, 5, 6, 8],
        se_reduction: 4,
        input_h: 32,
        input_w: 32,
        ..ModelConfig::default()
    };
    build_model(&cfg, seed).expect("valid block-check config")
}

fn model_params(model: &FscnModel<f64>) -> Vec<(String, Tensor<f64>)> {
    model
        .params()
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.tensor.clone()))
        .collect()
}

fn block_checks(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    let probes = check_cfg(cfg, 6);
    let model = tiny_block_model(cfg.seed ^ 3);
    let n_params = model.params().len();
    let cs = model.config().channel_schedule;

    // Squeeze-excitation block at decoder level 1.
    {
        let concat_in: usize = cs[1..=4].iter().sum::<usize>() + cs[1];
        let x = random_tensor(Shape::new(1, concat_in, 4, 4), -1.0, 1.0, rng);
        let mut params = model_params(&model);
        params.push(("x".into(), x));
        let m = model.clone();
        reports.push(grad_check(
            "se_block",
            &params,
            move |g, ids| {
                let se = m.acm_states()[0].se_refs().expect("se enabled");
                let y = m.se_forward(g, &ids[..n_params], &se, ids[n_params])?;
                weighted_sum(g, y, cfg.seed ^ 41)
            },
            &probes,
        ));
    }

    // Adaptive concatenation block at decoder level 2.
    {
        let (h, w) = (4usize, 4usize);
        let mut params = model_params(&model);
        for i in 1..=4 {
            params.push((
                format!("skip{i}"),
                random_tensor(Shape::new(1, cs[i], h, w), -1.0, 1.0, rng),
            ));
        }
        params.push((
            "d".into(),
            random_tensor(Shape::new(1, cs[2], h, w), -1.0, 1.0, rng),
        ));
        let m = model.clone();
        reports.push(grad_check(
            "acm_block",
            &params,
            move |g, ids| {
                let skips = &ids[n_params..n_params + 4];
                let d = ids[n_params + 4];
                let y = m.acm_forward(g, &ids[..n_params], &m.acm_states()[1], skips, d)?;
                weighted_sum(g, y, cfg.seed ^ 42)
            },
            &probes,
        ));
    }

    // Upscale block from E5 resolution.
    {
        let x = random_tensor(Shape::new(1, cs[5], 2, 3), -1.0, 1.0, rng);
        let mut params = model_params(&model);
        params.push(("x".into(), x));
        let m = model.clone();
        reports.push(grad_check(
            "upscale_block",
            &params,
            move |g, ids| {
                let y = m.upscale_forward(g, &ids[..n_params], m.upscale_refs()[0], ids[n_params])?;
                weighted_sum(g, y, cfg.seed ^ 43)
            },
            &probes,
        ));
    }

    reports
}

/// Default-architecture model, random 2x3x32x64 batch, full loss. Every
/// concatenation weight is probed exhaustively, conv weights are sampled.
fn end_to_end_check(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> GradCheckReport {
    let mcfg = ModelConfig {
        input_h: 32,
        input_w: 64,
        ..ModelConfig::default()
    };
    let model: FscnModel<f64> = build_model(&mcfg, cfg.seed ^ 7).expect("default config");
    let n_params = model.params().len();

    let x = random_tensor(Shape::new(2, 3, 32, 64), 0.0, 1.0, rng);
    let mut gt = random_tensor(Shape::new(2, 1, 32, 64), 0.3, 9.5, rng);
    // Sprinkle invalid pixels so masking participates in the check.
    for (i, v) in gt.data_mut().iter_mut().enumerate() {
        if i % 53 == 0 {
            *v = 0.0;
        }
    }
    let mask = valid_mask(&gt, mcfg.max_depth_m).expect("valid pixels present");
    let loss_params = LossParams::default();

    let params = model_params(&model);
    let m = model.clone();
    let x2 = x.clone();
    grad_check(
        "fscn_end_to_end_loss",
        &params,
        move |g, ids| {
            let input = g.constant(x2.clone());
            let pred = m.forward(g, &ids[..n_params], input)?;
            silog_loss(g, pred, &gt, &mask, &loss_params)
        },
        &check_cfg(cfg, 2),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_check_analytic_example_sum_of_squares() {
        // f = sum(x^2), x = [3]: analytic gradient 6, central differences
        // agree to machine precision.
        let x = Tensor::from_vec(Shape::scalar(), vec![3.0]).unwrap();
        let report = grad_check(
            "sum_x_squared",
            &[("x".into(), x)],
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                Ok(g.sum_all(sq))
            },
            &GradCheckConfig::default(),
        );
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn grad_check_constant_function_has_zero_gradient() {
        let x = Tensor::from_vec(Shape::scalar(), vec![1.5]).unwrap();
        let report = grad_check(
            "constant",
            &[("x".into(), x)],
            |g, _ids| {
                let c = g.constant(Tensor::scalar(4.0));
                Ok(g.sum_all(c))
            },
            &GradCheckConfig::default(),
        );
        assert!(report.passed);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn grad_check_flags_nan_as_failure() {
        let x = Tensor::from_vec(Shape::scalar(), vec![1.0]).unwrap();
        let report = grad_check(
            "nan_producer",
            &[("x".into(), x)],
            |g, ids| {
                let nan = g.constant(Tensor::scalar(f64::NAN));
                let y = g.mul(ids[0], nan)?;
                Ok(g.sum_all(y))
            },
            &GradCheckConfig::default(),
        );
        assert!(!report.passed);
    }

    #[test]
    fn suite_table_formats_one_line_per_check() {
        let reports = vec![GradCheckReport {
            op_name: "demo".into(),
            max_rel_error: 1e-9,
            per_parameter_errors: vec![("x".into(), 1e-9)],
            passed: true,
        }];
        let table = format_report_table(&reports);
        assert!(table.contains("demo"));
        assert!(table.contains("PASS"));
    }
}
