//! Scale-invariant log-depth training loss and the standard evaluation
//! metrics, both over a validity mask (ground truth in (0, cap]).
//!
//! The loss over masked pixels i with d_i = ln(gt_i) - ln(pred_i) is
//!   alpha * sqrt(max(0, mean(d^2) - lambda * mean(d)^2))
//! computed with a single pixel count N for the whole batch. The max-guard
//! absorbs tiny negative rounding residues; its gradient at the clamp is 0.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FscnError, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

/// Pixels that participate in loss and metrics: ground truth strictly
/// positive and at most the range cap.
#[derive(Clone, Debug)]
pub struct ValidMask {
    flags: Arc<Vec<bool>>,
    count: usize,
    cap_m: f64,
}

impl ValidMask {
    pub fn flags(&self) -> &Arc<Vec<bool>> {
        &self.flags
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn cap_m(&self) -> f64 {
        self.cap_m
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.flags[i]
    }
}

/// Build the validity mask for a depth map. Errors when nothing is valid.
pub fn valid_mask<S: Scalar>(gt: &Tensor<S>, cap_m: f64) -> Result<ValidMask> {
    if !(cap_m > 0.0) {
        return Err(FscnError::InvalidArgument("depth cap must be > 0".into()));
    }
    let flags: Vec<bool> = gt
        .data()
        .iter()
        .map(|&v| {
            let v = v.as_f64();
            v > 0.0 && v <= cap_m
        })
        .collect();
    let count = flags.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(FscnError::EmptyMask { cap: cap_m });
    }
    Ok(ValidMask {
        flags: Arc::new(flags),
        count,
        cap_m,
    })
}

fn default_lambda() -> f64 {
    0.85
}
fn default_alpha() -> f64 {
    10.0
}

/// Variance weight and scale of the loss.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossParams {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            lambda: default_lambda(),
            alpha: default_alpha(),
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(FscnError::Config(format!(
                "loss lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(FscnError::Config(format!(
                "loss alpha must be > 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn check_loss_inputs<S: Scalar>(
    pred_shape: crate::tensor::Shape,
    pred_vals: &[S],
    gt: &Tensor<S>,
    mask: &ValidMask,
) -> Result<()> {
    if pred_shape != gt.shape() {
        return Err(FscnError::shape(
            "loss pred vs gt",
            gt.shape().to_string(),
            pred_shape.to_string(),
        ));
    }
    if mask.flags.len() != gt.numel() {
        return Err(FscnError::shape(
            "loss mask",
            format!("{} entries", gt.numel()),
            format!("{} entries", mask.flags.len()),
        ));
    }
    for (i, (&p, &m)) in pred_vals.iter().zip(mask.flags.iter()).enumerate() {
        if m && p <= S::zero() {
            return Err(FscnError::Domain {
                op: "silog_loss pred",
                value: p.as_f64(),
                index: i,
            });
        }
    }
    Ok(())
}

/// Differentiable loss node for a prediction already on the graph.
pub fn silog_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    gt: &Tensor<S>,
    mask: &ValidMask,
    params: &LossParams,
) -> Result<NodeId> {
    params.validate()?;
    check_loss_inputs(g.shape(pred), g.value(pred), gt, mask)?;

    let n = mask.count as f64;
    // ln(gt) where valid, 0 elsewhere; never touches invalid zeros.
    let ln_gt: Vec<S> = gt
        .data()
        .iter()
        .zip(mask.flags.iter())
        .map(|(&v, &m)| if m { v.ln() } else { S::zero() })
        .collect();
    let ln_gt = g.constant(Tensor::from_vec(gt.shape(), ln_gt)?);

    // Unmasked lanes are pinned to 1.0 so ln stays defined everywhere.
    let safe_pred = g.mask_fill(pred, mask.flags.clone(), 1.0)?;
    let ln_pred = g.ln(safe_pred)?;
    let d = g.sub(ln_gt, ln_pred)?;
    let sum_d = g.masked_sum(d, mask.flags.clone())?;
    let d_sq = g.mul(d, d)?;
    let sum_d_sq = g.masked_sum(d_sq, mask.flags.clone())?;

    let mean_sq = g.affine(sum_d_sq, 1.0 / n, 0.0);
    let sum_sq = g.mul(sum_d, sum_d)?;
    let penalty = g.affine(sum_sq, params.lambda / (n * n), 0.0);
    let inner = g.sub(mean_sq, penalty)?;
    let root = g.sqrt_clamped(inner);
    Ok(g.affine(root, params.alpha, 0.0))
}

/// Plain (non-differentiable) evaluation of the loss; returns
/// (inner, loss). Useful for identity checks and logging.
pub fn silog_value<S: Scalar>(
    pred: &Tensor<S>,
    gt: &Tensor<S>,
    mask: &ValidMask,
    params: &LossParams,
) -> Result<(f64, f64)> {
    params.validate()?;
    check_loss_inputs(pred.shape(), pred.data(), gt, mask)?;
    let n = mask.count as f64;
    let mut sum_d = 0.0;
    let mut sum_d_sq = 0.0;
    for ((&p, &t), &m) in pred.data().iter().zip(gt.data()).zip(mask.flags.iter()) {
        if !m {
            continue;
        }
        let d = t.as_f64().ln() - p.as_f64().ln();
        sum_d += d;
        sum_d_sq += d * d;
    }
    let inner = sum_d_sq / n - params.lambda * (sum_d / n) * (sum_d / n);
    let loss = params.alpha * inner.max(0.0).sqrt();
    Ok((inner, loss))
}

/// The seven evaluation metrics plus the pixel count they were computed on.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub log10: f64,
    pub log_rms: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 8] = [
        "abs_rel", "sq_rel", "rms", "log10", "log_rms", "d<1.25", "d<1.25^2", "d<1.25^3",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rms,
            self.log10,
            self.log_rms,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    /// Two-line aligned table: header row and value row.
    pub fn to_table(&self) -> String {
        let mut head = String::new();
        let mut row = String::new();
        for (name, v) in Self::COLUMNS.iter().zip(self.values()) {
            head.push_str(&format!("{name:>10}"));
            row.push_str(&format!("{v:>10.4}"));
        }
        head.push_str(&format!("{:>10}", "pixels"));
        row.push_str(&format!("{:>10}", self.n_pixels));
        format!("{head}\n{row}\n")
    }
}

/// Evaluate predictions against ground truth over the mask. Predictions are
/// clamped to [1e-3, cap] first.
pub fn eval_metrics<S: Scalar>(
    pred: &Tensor<S>,
    gt: &Tensor<S>,
    mask: &ValidMask,
) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() {
        return Err(FscnError::shape(
            "eval_metrics pred vs gt",
            gt.shape().to_string(),
            pred.shape().to_string(),
        ));
    }
    if mask.flags.len() != gt.numel() {
        return Err(FscnError::shape(
            "eval_metrics mask",
            format!("{} entries", gt.numel()),
            format!("{} entries", mask.flags.len()),
        ));
    }
    let mut s_abs = 0.0;
    let mut s_sq = 0.0;
    let mut s_err_sq = 0.0;
    let mut s_log10 = 0.0;
    let mut s_ln_sq = 0.0;
    let mut c = [0usize; 3];
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    for ((&p, &t), &m) in pred.data().iter().zip(gt.data()).zip(mask.flags.iter()) {
        if !m {
            continue;
        }
        let p = p.as_f64().clamp(1e-3, mask.cap_m);
        let t = t.as_f64();
        let err = p - t;
        s_abs += err.abs() / t;
        s_sq += err * err / t;
        s_err_sq += err * err;
        s_log10 += (p.log10() - t.log10()).abs();
        let ln_d = p.ln() - t.ln();
        s_ln_sq += ln_d * ln_d;
        let ratio = (t / p).max(p / t);
        for (ci, &th) in c.iter_mut().zip(&thresholds) {
            if ratio < th {
                *ci += 1;
            }
        }
    }
    let n = mask.count as f64;
    Ok(MetricsReport {
        abs_rel: s_abs / n,
        sq_rel: s_sq / n,
        rms: (s_err_sq / n).sqrt(),
        log10: s_log10 / n,
        log_rms: (s_ln_sq / n).sqrt(),
        delta1: c[0] as f64 / n,
        delta2: c[1] as f64 / n,
        delta3: c[2] as f64 / n,
        n_pixels: mask.count,
    })
}

/// Pixel-weighted mean of per-sample reports.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(FscnError::InvalidArgument(
            "aggregate: empty report list".into(),
        ));
    }
    let total: usize = reports.iter().map(|r| r.n_pixels).sum();
    let tw = total as f64;
    let wmean = |f: fn(&MetricsReport) -> f64| -> f64 {
        reports
            .iter()
            .map(|r| f(r) * r.n_pixels as f64)
            .sum::<f64>()
            / tw
    };
    Ok(MetricsReport {
        abs_rel: wmean(|r| r.abs_rel),
        sq_rel: wmean(|r| r.sq_rel),
        rms: wmean(|r| r.rms),
        log10: wmean(|r| r.log10),
        log_rms: wmean(|r| r.log_rms),
        delta1: wmean(|r| r.delta1),
        delta2: wmean(|r| r.delta2),
        delta3: wmean(|r| r.delta3),
        n_pixels: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn map(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, vals.len()), vals.to_vec()).unwrap()
    }

    #[test]
    fn valid_mask_applies_range_rule() {
        let gt = map(&[0.0, 5.0, 90.0]);
        let m = valid_mask(&gt, 80.0).unwrap();
        assert_eq!(**m.flags(), vec![false, true, false]);
        assert_eq!(m.count(), 1);

        let gt = map(&[1.0, 2.0, 3.0]);
        assert_eq!(valid_mask(&gt, 80.0).unwrap().count(), 3);

        let gt = map(&[0.0, 0.0]);
        assert!(matches!(
            valid_mask(&gt, 80.0),
            Err(FscnError::EmptyMask { .. })
        ));
    }

    #[test]
    fn loss_is_exactly_zero_for_perfect_prediction() {
        let gt = map(&[1.0, 2.5, 7.0, 0.0, 3.3]);
        let pred = map(&[1.0, 2.5, 7.0, 4.0, 3.3]);
        let mask = valid_mask(&gt, 10.0).unwrap();
        let (inner, loss) = silog_value(&pred, &gt, &mask, &LossParams::default()).unwrap();
        assert_eq!(inner, 0.0);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_is_scale_invariant_at_lambda_one() {
        let gt = map(&[1.0, 2.0, 3.0, 4.5, 0.25]);
        let params = LossParams {
            lambda: 1.0,
            alpha: 10.0,
        };
        let mask = valid_mask(&gt, 10.0).unwrap();
        for s in [0.5, 2.0, 10.0] {
            let pred = map(&gt.data().iter().map(|&v| v * s).collect::<Vec<_>>());
            let (inner, _) = silog_value(&pred, &gt, &mask, &params).unwrap();
            assert!(inner.abs() <= 1e-9, "s={s}: inner={inner}");
        }
    }

    #[test]
    fn loss_frozen_hand_example() {
        // gt = [e, e], pred = [1, 1]: d = [1, 1], inner = 1 - 0.85 = 0.15,
        // loss = 10 * sqrt(0.15).
        let e = std::f64::consts::E;
        let gt = map(&[e, e]);
        let pred = map(&[1.0, 1.0]);
        let mask = valid_mask(&gt, 10.0).unwrap();
        let (inner, loss) = silog_value(&pred, &gt, &mask, &LossParams::default()).unwrap();
        assert!((inner - 0.15).abs() < 1e-12);
        assert!((loss - 10.0 * 0.15f64.sqrt()).abs() < 1e-12);
        assert!((loss - 3.872983346207417).abs() < 1e-6);
    }

    #[test]
    fn graph_loss_matches_scalar_loss() {
        let gt = map(&[1.0, 2.0, 0.0, 4.0, 6.5, 9.9]);
        let pred_t = map(&[1.2, 1.9, 3.0, 4.4, 6.0, 9.0]);
        let mask = valid_mask(&gt, 10.0).unwrap();
        let params = LossParams::default();
        let (_, expect) = silog_value(&pred_t, &gt, &mask, &params).unwrap();
        let mut g = Graph::new();
        let pred = g.leaf(pred_t.clone());
        let loss = silog_loss(&mut g, pred, &gt, &mask, &params).unwrap();
        assert!((g.scalar_value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_non_positive_masked_pred() {
        let gt = map(&[1.0, 2.0]);
        let pred = map(&[1.0, -0.5]);
        let mask = valid_mask(&gt, 10.0).unwrap();
        let err = silog_value(&pred, &gt, &mask, &LossParams::default()).unwrap_err();
        assert!(matches!(err, FscnError::Domain { .. }));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use crate::tensor::check::{grad_check, GradCheckConfig};
        let gt = map(&[1.0, 2.0, 0.0, 4.0, 6.5, 2.2, 9.0, 0.5]);
        let mask = valid_mask(&gt, 10.0).unwrap();
        let params = LossParams::default();
        let pred = map(&[1.2, 1.9, 3.0, 4.4, 6.0, 2.0, 8.5, 0.7]);
        let report = grad_check(
            "silog_loss",
            &[("pred".into(), pred)],
            |g, ids| silog_loss(g, ids[0], &gt, &mask, &params),
            &GradCheckConfig {
                tol: 1e-4,
                ..GradCheckConfig::default()
            },
        );
        assert!(report.passed, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let gt_v = [1.0, 2.0, 0.0, 4.0, 6.5, 2.2];
        let pred_v = [1.2, 1.9, 3.0, 4.4, 6.0, 2.0];
        let perm = [3usize, 0, 5, 1, 4, 2];
        let gt_p: Vec<f64> = perm.iter().map(|&i| gt_v[i]).collect();
        let pred_p: Vec<f64> = perm.iter().map(|&i| pred_v[i]).collect();
        let params = LossParams::default();
        let m1 = valid_mask(&map(&gt_v), 10.0).unwrap();
        let m2 = valid_mask(&map(&gt_p), 10.0).unwrap();
        let (_, l1) = silog_value(&map(&pred_v), &map(&gt_v), &m1, &params).unwrap();
        let (_, l2) = silog_value(&map(&pred_p), &map(&gt_p), &m2, &params).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn metrics_perfect_prediction() {
        let gt = map(&[1.0, 2.0, 3.0]);
        let mask = valid_mask(&gt, 80.0).unwrap();
        let r = eval_metrics(&gt, &gt, &mask).unwrap();
        assert_eq!(r.abs_rel, 0.0);
        assert_eq!(r.sq_rel, 0.0);
        assert_eq!(r.rms, 0.0);
        assert_eq!(r.log10, 0.0);
        assert_eq!(r.log_rms, 0.0);
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
        assert_eq!(r.n_pixels, 3);
    }

    #[test]
    fn metrics_frozen_three_pixel_example() {
        let gt = map(&[1.0, 2.0, 4.0]);
        let pred = map(&[1.0, 2.0, 8.0]);
        let mask = valid_mask(&gt, 80.0).unwrap();
        let r = eval_metrics(&pred, &gt, &mask).unwrap();
        assert!((r.abs_rel - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.sq_rel - 4.0 / 3.0).abs() < 1e-12);
        assert!((r.rms - (16.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r.rms - 2.3094010767585034).abs() < 1e-6);
        assert!((r.log10 - 2.0f64.log10() / 3.0).abs() < 1e-12);
        assert!((r.log10 - 0.10034333188799373).abs() < 1e-6);
        assert!((r.log_rms - (2.0f64.ln().powi(2) / 3.0).sqrt()).abs() < 1e-12);
        assert!((r.delta1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.delta1, r.delta2);
        assert_eq!(r.delta2, r.delta3);
    }

    #[test]
    fn metrics_homogeneity_under_global_scaling() {
        let gt_v = [1.0, 2.0, 4.0, 0.7, 3.1];
        let pred_v = [1.1, 1.7, 4.4, 0.9, 2.6];
        let gt = map(&gt_v);
        let pred = map(&pred_v);
        let mask = valid_mask(&gt, 80.0).unwrap();
        let r = eval_metrics(&pred, &gt, &mask).unwrap();
        let gt10 = map(&gt_v.iter().map(|v| v * 10.0).collect::<Vec<_>>());
        let pred10 = map(&pred_v.iter().map(|v| v * 10.0).collect::<Vec<_>>());
        let mask10 = valid_mask(&gt10, 800.0).unwrap();
        let r10 = eval_metrics(&pred10, &gt10, &mask10).unwrap();
        assert!((r.abs_rel - r10.abs_rel).abs() < 1e-12);
        assert!((r.log10 - r10.log10).abs() < 1e-12);
        assert!((r.log_rms - r10.log_rms).abs() < 1e-12);
        assert!((r.delta1 - r10.delta1).abs() < 1e-12);
        assert!((r10.rms - 10.0 * r.rms).abs() < 1e-9);
        assert!((r10.sq_rel - 10.0 * r.sq_rel).abs() < 1e-9);
    }

    #[test]
    fn aggregate_examples() {
        let gt = map(&[1.0, 2.0, 3.0]);
        let mask = valid_mask(&gt, 80.0).unwrap();
        let r = eval_metrics(&gt, &gt, &mask).unwrap();
        let one = aggregate(&[r]).unwrap();
        assert_eq!(one, r);
        let two = aggregate(&[r, r]).unwrap();
        assert_eq!(two.abs_rel, r.abs_rel);
        assert_eq!(two.n_pixels, 6);

        // N=1 with abs_rel 0 and N=3 with abs_rel 1/3 average to 0.25.
        let a = MetricsReport {
            abs_rel: 0.0,
            sq_rel: 0.0,
            rms: 0.0,
            log10: 0.0,
            log_rms: 0.0,
            delta1: 1.0,
            delta2: 1.0,
            delta3: 1.0,
            n_pixels: 1,
        };
        let b = MetricsReport {
            abs_rel: 1.0 / 3.0,
            n_pixels: 3,
            ..a
        };
        let agg = aggregate(&[a, b]).unwrap();
        assert!((agg.abs_rel - 0.25).abs() < 1e-12);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn report_serializes_and_tabulates() {
        let gt = map(&[1.0, 2.0, 4.0]);
        let pred = map(&[1.0, 2.0, 8.0]);
        let mask = valid_mask(&gt, 80.0).unwrap();
        let r = eval_metrics(&pred, &gt, &mask).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(r, back);
        let table = r.to_table();
        assert!(table.contains("abs_rel"));
        assert_eq!(table.lines().count(), 2);
    }
}
