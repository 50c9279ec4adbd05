//! Hybrid objectness loss and its analytic gradients.
//!
//! ```text
//! total = λ_cls · mean_i CE(c_i, c_i*)
//!       + (1 - λ_cls) · mean_j LQF(q_j, q_j*)
//!       + λ_box · (1 / N_box) · Σ_i c_i* · s_i^β · L1(t_i, t_i*)
//! ```
//!
//! `i` runs over the sampled CLS anchors (which also carry the box targets),
//! `j` over the LQ positives. `N_box` is the number of positive CLS samples.
//! All gradients are taken with respect to raw head outputs: the CLS logit,
//! the pre-sigmoid LQ logit and the four box deltas.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxDeltas;

/// Clamp applied to sigmoid quality predictions before taking logs.
pub const QUALITY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityLossKind {
    Lqf,
    L1,
}

impl std::str::FromStr for QualityLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lqf" => Ok(QualityLossKind::Lqf),
            "l1" => Ok(QualityLossKind::L1),
            other => Err(Error::Config(format!("unknown quality loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_box: f64,
    pub gamma: f64,
    pub beta: f64,
    pub quality_loss: QualityLossKind,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 0.0,
            lambda_box: 10.0,
            gamma: 2.0,
            beta: 2.0,
            quality_loss: QualityLossKind::Lqf,
        }
    }
}

impl LossWeights {
    pub fn with_lambda_cls(self, lambda_cls: f64) -> Self {
        LossWeights { lambda_cls, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_cls) {
            return Err(Error::Config(format!(
                "lambda_cls must lie in [0, 1], got {}",
                self.lambda_cls
            )));
        }
        if !(self.lambda_box > 0.0) {
            return Err(Error::Config(format!(
                "lambda_box must be positive, got {}",
                self.lambda_box
            )));
        }
        if !(self.gamma >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "gamma ({}) and beta ({}) must be nonnegative",
                self.gamma, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxRegression {
    pub pred: BoxDeltas,
    pub target: BoxDeltas,
    /// Score of the matched label, 1 for ground truth.
    pub score: f64,
}

/// One sampled CLS/BOX anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsEntry {
    pub logit: f64,
    /// 1 for a positive match, 0 for background.
    pub target: f64,
    pub regression: Option<BoxRegression>,
}

/// One LQ positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqEntry {
    pub logit: f64,
    pub target: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadBatch {
    pub cls: Vec<ClsEntry>,
    pub lq: Vec<LqEntry>,
}

impl HeadBatch {
    pub fn num_box(&self) -> f64 {
        self.cls.iter().map(|e| e.target).sum()
    }
}

/// Partial derivatives of the total loss, aligned with [`HeadBatch`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadGradients {
    pub cls_logits: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
    pub lq_logits: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls_term: f64,
    pub lq_term: f64,
    pub box_term: f64,
    pub total: f64,
    pub gradients: HeadGradients,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, `softplus(z) - t·z`.
pub fn bce_with_logits(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

/// Sigmoid quality score with the log-safe clamp, and whether the clamp was
/// active (in which case the score has zero derivative).
pub fn quality_prob(logit: f64) -> (f64, bool) {
    let q = sigmoid(logit);
    let clamped = q.clamp(QUALITY_EPS, 1.0 - QUALITY_EPS);
    (clamped, clamped != q)
}

fn check_quality(q: f64, q_star: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::OutOfRange(format!(
            "quality prediction {q} is outside (0, 1)"
        )));
    }
    if !(0.0..=1.0).contains(&q_star) {
        return Err(Error::OutOfRange(format!(
            "quality target {q_star} is outside [0, 1]"
        )));
    }
    Ok(q.clamp(QUALITY_EPS, 1.0 - QUALITY_EPS))
}

fn bce_prob(q: f64, q_star: f64) -> f64 {
    -(q_star * q.ln() + (1.0 - q_star) * (1.0 - q).ln())
}

/// Localization quality focal loss: `|q* - q|^γ · BCE(q, q*)`.
pub fn lqf(q: f64, q_star: f64, gamma: f64) -> Result<f64> {
    let q = check_quality(q, q_star)?;
    Ok((q_star - q).abs().powf(gamma) * bce_prob(q, q_star))
}

/// d LQF / d q for an unclamped prediction.
fn lqf_dq(q: f64, q_star: f64, gamma: f64) -> f64 {
    let d = q - q_star;
    let weight = d.abs().powf(gamma);
    let focal = if d == 0.0 || gamma == 0.0 {
        0.0
    } else {
        gamma * d.abs().powf(gamma - 1.0) * d.signum() * bce_prob(q, q_star)
    };
    focal + weight * d / (q * (1.0 - q))
}

/// Sum of absolute coordinate differences.
pub fn l1(t: &BoxDeltas, t_star: &BoxDeltas) -> f64 {
    t.to_array()
        .iter()
        .zip(t_star.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// Weighted box regression: `s^β · L1(t, t*)`.
pub fn wbr(t: &BoxDeltas, t_star: &BoxDeltas, s: f64, beta: f64) -> f64 {
    s.powf(beta) * l1(t, t_star)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Evaluate the hybrid loss and its exact gradients.
pub fn thpn_loss(batch: &HeadBatch, w: &LossWeights) -> LossBreakdown {
    let lambda = w.lambda_cls;
    let n_cls = batch.cls.len().max(1) as f64;
    let n_lq = batch.lq.len().max(1) as f64;
    let n_box = batch.num_box().max(1.0);

    let mut cls_sum = 0.0;
    let mut box_sum = 0.0;
    let mut cls_grads = Vec::with_capacity(batch.cls.len());
    let mut delta_grads = Vec::with_capacity(batch.cls.len());
    for e in &batch.cls {
        cls_sum += bce_with_logits(e.logit, e.target);
        cls_grads.push(lambda / n_cls * (sigmoid(e.logit) - e.target));

        let mut g = [0.0; 4];
        if let Some(r) = &e.regression {
            let weight = e.target * r.score.powf(w.beta);
            box_sum += weight * l1(&r.pred, &r.target);
            let scale = w.lambda_box / n_box * weight;
            for (gk, (p, t)) in g
                .iter_mut()
                .zip(r.pred.to_array().into_iter().zip(r.target.to_array()))
            {
                *gk = scale * sign(p - t);
            }
        }
        delta_grads.push(g);
    }

    let mut lq_sum = 0.0;
    let mut lq_grads = Vec::with_capacity(batch.lq.len());
    for e in &batch.lq {
        let (q, clamped) = quality_prob(e.logit);
        let (loss, dq) = match w.quality_loss {
            QualityLossKind::Lqf => (
                (e.target - q).abs().powf(w.gamma) * bce_prob(q, e.target),
                lqf_dq(q, e.target, w.gamma),
            ),
            QualityLossKind::L1 => ((q - e.target).abs(), sign(q - e.target)),
        };
        lq_sum += loss;
        let dz = if clamped { 0.0 } else { dq * q * (1.0 - q) };
        lq_grads.push((1.0 - lambda) / n_lq * dz);
    }

    let cls_term = cls_sum / n_cls;
    let lq_term = lq_sum / n_lq;
    let box_term = box_sum / n_box;
    LossBreakdown {
        cls_term,
        lq_term,
        box_term,
        total: lambda * cls_term + (1.0 - lambda) * lq_term + w.lambda_box * box_term,
        gradients: HeadGradients {
            cls_logits: cls_grads,
            deltas: delta_grads,
            lq_logits: lq_grads,
        },
    }
}

/// Class-agnostic RPN / Faster R-CNN loss: BCE objectness plus gated L1.
pub fn rpn_loss(batch: &HeadBatch, lambda_box: f64) -> f64 {
    let n_cls = batch.cls.len().max(1) as f64;
    let n_reg = batch.num_box().max(1.0);
    let objectness: f64 = batch
        .cls
        .iter()
        .map(|e| bce_with_logits(e.logit, e.target))
        .sum();
    let regression: f64 = batch
        .cls
        .iter()
        .filter_map(|e| e.regression.map(|r| e.target * l1(&r.pred, &r.target)))
        .sum();
    objectness / n_cls + lambda_box * regression / n_reg
}

/// OLN loss: L1 on sigmoid quality scores plus L1 on positive box deltas.
pub fn oln_loss(batch: &HeadBatch, lambda_box: f64) -> f64 {
    let n_lq = batch.lq.len().max(1) as f64;
    let n_reg = batch.num_box().max(1.0);
    let quality: f64 = batch
        .lq
        .iter()
        .map(|e| (quality_prob(e.logit).0 - e.target).abs())
        .sum();
    let regression: f64 = batch
        .cls
        .iter()
        .filter(|e| e.target == 1.0)
        .filter_map(|e| e.regression.map(|r| l1(&r.pred, &r.target)))
        .sum();
    quality / n_lq + lambda_box * regression / n_reg
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error between the analytic gradients of [`thpn_loss`] and
/// central finite differences over every head output in `batch`.
pub fn thpn_grad_check(batch: &HeadBatch, w: &LossWeights, epsilon: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "finite-difference step {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let analytic = thpn_loss(batch, w).gradients;
    let mut probe = batch.clone();
    let mut worst = 0.0f64;
    let central = |probe: &mut HeadBatch, set: &dyn Fn(&mut HeadBatch, f64), x: f64| {
        set(probe, x + epsilon);
        let plus = thpn_loss(probe, w).total;
        set(probe, x - epsilon);
        let minus = thpn_loss(probe, w).total;
        set(probe, x);
        (plus - minus) / (2.0 * epsilon)
    };

    for i in 0..batch.cls.len() {
        let x = batch.cls[i].logit;
        let n = central(&mut probe, &|b, v| b.cls[i].logit = v, x);
        worst = worst.max(relative_error(analytic.cls_logits[i], n));
        if let Some(r) = batch.cls[i].regression {
            let pred = r.pred.to_array();
            for (k, &x) in pred.iter().enumerate() {
                let set = |b: &mut HeadBatch, v: f64| {
                    if let Some(reg) = b.cls[i].regression.as_mut() {
                        let mut p = reg.pred.to_array();
                        p[k] = v;
                        reg.pred = BoxDeltas::from_array(p);
                    }
                };
                let n = central(&mut probe, &set, x);
                worst = worst.max(relative_error(analytic.deltas[i][k], n));
            }
        }
    }
    for j in 0..batch.lq.len() {
        let x = batch.lq[j].logit;
        let n = central(&mut probe, &|b, v| b.lq[j].logit = v, x);
        worst = worst.max(relative_error(analytic.lq_logits[j], n));
    }
    Ok(worst)
}

/// Random batch for gradient and identity checks.
///
/// Logits are kept inside [-4, 4] so no quality score hits the clamp, and
/// box predictions are kept away from their targets so finite differences
/// never straddle an L1 kink.
pub fn random_head_batch(seed: u64, max_cls: usize, max_lq: usize) -> HeadBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cls = rng.random_range(0..=max_cls);
    let n_lq = rng.random_range(0..=max_lq);
    let offset = |rng: &mut ChaCha8Rng| {
        let mag = rng.random_range(0.01..1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    };
    let cls = (0..n_cls)
        .map(|_| {
            let positive = rng.random_bool(0.5);
            let regression = positive.then(|| {
                let target: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let pred: [f64; 4] = std::array::from_fn(|k| target[k] + offset(&mut rng));
                BoxRegression {
                    pred: BoxDeltas::from_array(pred),
                    target: BoxDeltas::from_array(target),
                    score: if rng.random_bool(0.3) {
                        1.0
                    } else {
                        rng.random_range(0.0..1.0)
                    },
                }
            });
            ClsEntry {
                logit: rng.random_range(-4.0..4.0),
                target: if positive { 1.0 } else { 0.0 },
                regression,
            }
        })
        .collect();
    let lq = (0..n_lq)
        .map(|_| LqEntry {
            logit: rng.random_range(-4.0..4.0),
            target: rng.random_range(0.0..1.0),
        })
        .collect();
    HeadBatch { cls, lq }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn lqf_examples() {
        assert_eq!(lqf(0.7, 0.7, 2.0).unwrap(), 0.0);
        // 0.25 * -ln 0.5
        assert_abs_diff_eq!(lqf(0.5, 1.0, 2.0).unwrap(), 0.173287, epsilon = 1e-6);
        for (q, qs) in [(0.2, 0.9), (0.6, 0.1), (0.33, 0.33)] {
            assert_abs_diff_eq!(
                lqf(q, qs, 0.0).unwrap(),
                bce_prob(q, qs),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn lqf_rejects_out_of_range() {
        assert!(lqf(1.5, 0.5, 2.0).is_err());
        assert!(lqf(-0.1, 0.5, 2.0).is_err());
        assert!(lqf(f64::NAN, 0.5, 2.0).is_err());
        assert!(lqf(0.5, 1.2, 2.0).is_err());
        // endpoints are clamped, not rejected
        assert!(lqf(1.0, 0.0, 2.0).unwrap().is_finite());
    }

    #[test]
    fn wbr_examples() {
        let t = BoxDeltas::new(0.1, -0.4, 0.3, 0.2);
        let ts = BoxDeltas::new(-0.2, 0.1, 0.0, 0.5);
        assert_eq!(wbr(&t, &ts, 1.0, 2.0), l1(&t, &ts));
        assert_eq!(wbr(&t, &ts, 0.0, 2.0), 0.0);
        let t = BoxDeltas::new(1.0, 1.0, 0.0, 0.0);
        let ts = BoxDeltas::default();
        assert_abs_diff_eq!(wbr(&t, &ts, 0.5, 2.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn hand_evaluated_single_sample() {
        let t = BoxDeltas::new(0.2, 0.1, -0.3, 0.0);
        let batch = HeadBatch {
            cls: vec![ClsEntry {
                logit: 0.0,
                target: 1.0,
                regression: Some(BoxRegression {
                    pred: t,
                    target: t,
                    score: 1.0,
                }),
            }],
            lq: vec![LqEntry {
                logit: 0.0,
                target: 1.0,
            }],
        };
        let w = LossWeights::default().with_lambda_cls(0.5);
        let out = thpn_loss(&batch, &w);
        let expected = 0.5 * -(0.5f64.ln()) + 0.5 * 0.25 * -(0.5f64.ln());
        assert_abs_diff_eq!(out.total, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(out.total, 0.433217, epsilon = 1e-6);
        assert_eq!(out.box_term, 0.0);
    }

    #[test]
    fn empty_batch_is_zero_not_nan() {
        let out = thpn_loss(&HeadBatch::default(), &LossWeights::default());
        assert_eq!(out.total, 0.0);
        let batch = HeadBatch {
            cls: vec![ClsEntry {
                logit: 1.0,
                target: 0.0,
                regression: None,
            }],
            lq: vec![],
        };
        let out = thpn_loss(&batch, &LossWeights::default());
        assert!(out.total.is_finite());
        assert_eq!(out.lq_term, 0.0);
        assert_eq!(out.box_term, 0.0);
    }

    #[test]
    fn box_term_is_gated_by_cls_target() {
        let reg = BoxRegression {
            pred: BoxDeltas::new(1.0, 0.0, 0.0, 0.0),
            target: BoxDeltas::default(),
            score: 1.0,
        };
        let batch = HeadBatch {
            cls: vec![ClsEntry {
                logit: 0.0,
                target: 0.0,
                regression: Some(reg),
            }],
            lq: vec![],
        };
        let out = thpn_loss(&batch, &LossWeights::default());
        assert_eq!(out.box_term, 0.0);
        assert_eq!(out.gradients.deltas[0], [0.0; 4]);
    }

    #[test]
    fn zero_gradient_at_targets() {
        let t = BoxDeltas::new(0.3, -0.2, 0.1, 0.4);
        let batch = HeadBatch {
            cls: vec![ClsEntry {
                logit: 0.7,
                target: 1.0,
                regression: Some(BoxRegression {
                    pred: t,
                    target: t,
                    score: 0.6,
                }),
            }],
            lq: [0.2, 0.5, 0.85]
                .iter()
                .map(|&q| LqEntry {
                    logit: logit(q),
                    target: q,
                })
                .collect(),
        };
        for kind in [QualityLossKind::Lqf, QualityLossKind::L1] {
            let w = LossWeights {
                quality_loss: kind,
                ..LossWeights::default().with_lambda_cls(0.0)
            };
            let g = thpn_loss(&batch, &w).gradients;
            for v in g.cls_logits.iter().chain(&g.lq_logits) {
                assert!(v.abs() <= 1e-8, "{v}");
            }
            assert!(g.deltas.iter().flatten().all(|v| v.abs() <= 1e-8));
        }
    }

    #[test]
    fn lambda_zero_kills_cls_gradient() {
        for seed in 0..20 {
            let batch = random_head_batch(seed, 12, 12);
            let w = LossWeights::default().with_lambda_cls(0.0);
            let g = thpn_loss(&batch, &w).gradients;
            assert!(g.cls_logits.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn grad_check_random_batches() {
        for seed in 0..100 {
            let batch = random_head_batch(seed, 10, 10);
            let w = LossWeights {
                lambda_cls: (seed % 5) as f64 / 4.0,
                gamma: (seed % 4) as f64,
                ..LossWeights::default()
            };
            let err = thpn_grad_check(&batch, &w, 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let batch = random_head_batch(1, 4, 4);
        let w = LossWeights::default();
        assert!(thpn_grad_check(&batch, &w, 1e-2).is_err());
        assert!(thpn_grad_check(&batch, &w, 1e-9).is_err());
    }

    #[test]
    fn affine_in_lambda() {
        for seed in 0..10 {
            let batch = random_head_batch(seed, 10, 10);
            let at = |l: f64| thpn_loss(&batch, &LossWeights::default().with_lambda_cls(l));
            let base = at(0.0);
            for l in [0.0, 0.25, 0.5, 1.0] {
                let out = at(l);
                let expected =
                    l * base.cls_term + (1.0 - l) * base.lq_term + 10.0 * base.box_term;
                assert_abs_diff_eq!(out.total, expected, epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn lqf_nonnegative_and_monotone(
            q_star in 0.0..1.0f64, a in 0.0..1.0f64, b in 0.0..1.0f64, gamma in 0.0..4.0f64
        ) {
            // move q toward q*: the loss must not increase
            let far = q_star + (1.0 - q_star) * a.max(b);
            let near = q_star + (1.0 - q_star) * a.min(b);
            let far = far.clamp(1e-3, 1.0 - 1e-3);
            let near = near.clamp(1e-3, 1.0 - 1e-3);
            let lf = lqf(far, q_star, gamma).unwrap();
            let ln = lqf(near, q_star, gamma).unwrap();
            prop_assert!(lf >= 0.0 && ln >= 0.0);
            if (near - q_star).abs() <= (far - q_star).abs() && (near >= q_star) == (far >= q_star) {
                prop_assert!(ln <= lf + 1e-12, "near {} far {} -> {} {}", near, far, ln, lf);
            }
        }

        #[test]
        fn wbr_monotone_in_score(s1 in 0.0..1.0f64, s2 in 0.0..1.0f64, beta in 0.0..4.0f64) {
            let t = BoxDeltas::new(0.5, -0.1, 0.2, 0.0);
            let ts = BoxDeltas::default();
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(wbr(&t, &ts, lo, beta) <= wbr(&t, &ts, hi, beta) + 1e-15);
        }
    }
}
