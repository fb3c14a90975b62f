//! Training objectives: location, classification, entropy, discriminator and
//! adversarial losses, plus the two composite objectives.
//!
//! Every loss comes with an analytic gradient with respect to its direct
//! input (offset values or probability entries); the training loop chains
//! those through the activation functions. Probabilities are clamped to
//! `[EPS, 1 - EPS]` before every logarithm, which also implements the
//! `0 * log 0 = 0` convention.
//!
//! Entropy is normalized by `1 / log 2` so a binary slot peaks at 1; all
//! other losses use natural logs. The discriminator and adversarial losses
//! are spatial sums over the domain map; the training loop optionally
//! divides them by the cell count so magnitudes stay resolution-independent.

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::geometry::OffsetMap;
use crate::matching::Matching;

/// Clamp floor applied to probabilities before logs.
pub const PROB_EPS: f64 = 1e-12;

/// Per-slot `(pos, neg)` probabilities of shape `(W, H, D, 2)`.
#[derive(Debug, Clone)]
pub struct ClassificationMap {
    pub probs: Array4<f64>,
}

impl ClassificationMap {
    /// Validates that every pair is non-negative and sums to 1 within 1e-6.
    pub fn new(probs: Array4<f64>) -> Result<Self> {
        if probs.dim().3 != 2 {
            return Err(Error::InvalidArgument(format!(
                "classification map last axis must have size 2, got {}",
                probs.dim().3
            )));
        }
        let (w, h, d, _) = probs.dim();
        for i in 0..w {
            for j in 0..h {
                for k in 0..d {
                    let p = probs[[i, j, k, 0]];
                    let q = probs[[i, j, k, 1]];
                    if p < 0.0 || q < 0.0 || (p + q - 1.0).abs() > 1e-6 {
                        return Err(Error::InvalidArgument(format!(
                            "probability pair ({p}, {q}) at ({i}, {j}, {k}) is not a distribution"
                        )));
                    }
                }
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(dim: (usize, usize, usize, usize)) -> Self {
        Self {
            probs: Array4::from_elem(dim, 0.5),
        }
    }
}

/// Per-slot entropies in `[0, 1]`, shape `(W, H, D)`.
#[derive(Debug, Clone)]
pub struct EntropyMap {
    pub values: Array3<f64>,
}

/// The four scalars balancing the main objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_loc: f64,
    pub lambda_cls: f64,
    pub lambda_ent: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_loc: 1.0,
            lambda_cls: 1.0,
            lambda_ent: 0.1,
            lambda_adv: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_loc", self.lambda_loc),
            ("lambda_cls", self.lambda_cls),
            ("lambda_ent", self.lambda_ent),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which domain a sample was drawn from; `z = 0` for source, `z = 1` for target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainLabel {
    Source,
    Target,
}

/// Discriminator output `(D_source, D_target)` per cell, shape `(W', H', 2)`,
/// with the true domain of the sample that produced it.
#[derive(Debug, Clone)]
pub struct DomainMap {
    pub probs: Array3<f64>,
    pub domain: DomainLabel,
}

impl DomainMap {
    pub fn num_cells(&self) -> usize {
        self.probs.dim().0 * self.probs.dim().1
    }
}

fn clamped_ln(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

/// Mean L2 distance in pixels between decoded predictions and decoded
/// targets over the matched set. Returns the loss and `|N|`; a zero match
/// count yields 0 with no gradient contribution.
pub fn location_loss(
    offsets: &OffsetMap,
    matching: &Matching,
    loc_targets: &[[f64; 2]],
    stride: usize,
) -> (f64, usize) {
    let (loss, _grad) = location_loss_impl(&offsets.values, matching, loc_targets, stride, false);
    (loss, matching.pairs.len())
}

/// Same as [`location_loss`] but also returns the gradient with respect to
/// every offset entry.
pub fn location_loss_grad(
    offsets: &OffsetMap,
    matching: &Matching,
    loc_targets: &[[f64; 2]],
    stride: usize,
) -> (f64, Array4<f64>) {
    let (loss, grad) = location_loss_impl(&offsets.values, matching, loc_targets, stride, true);
    (loss, grad.unwrap())
}

fn location_loss_impl(
    offsets: &Array4<f64>,
    matching: &Matching,
    loc_targets: &[[f64; 2]],
    stride: usize,
    want_grad: bool,
) -> (f64, Option<Array4<f64>>) {
    assert_eq!(
        matching.pairs.len(),
        loc_targets.len(),
        "one offset target per matched pair"
    );
    let mut grad = want_grad.then(|| Array4::zeros(offsets.dim()));
    let n = matching.pairs.len();
    if n == 0 {
        return (0.0, grad);
    }
    let (_, h, d, _) = offsets.dim();
    let s = stride as f64;
    let mut total = 0.0;
    for (&(slot, _), target) in matching.pairs.iter().zip(loc_targets) {
        let k = slot % d;
        let rest = slot / d;
        let j = rest % h;
        let i = rest / h;
        let dx = s * (offsets[[i, j, k, 0]] - target[0]);
        let dy = s * (offsets[[i, j, k, 1]] - target[1]);
        let dist = (dx * dx + dy * dy).sqrt();
        total += dist;
        if let Some(g) = grad.as_mut() {
            if dist > 0.0 {
                // d(dist)/d(offset) = s * (s * delta) / dist
                g[[i, j, k, 0]] += s * dx / (dist * n as f64);
                g[[i, j, k, 1]] += s * dy / (dist * n as f64);
            }
        }
    }
    (total / n as f64, grad)
}

/// Mean cross-entropy over the full proposal set M against one-hot targets.
pub fn classification_loss(cls_map: &ClassificationMap, cls_targets: &Array4<f64>) -> f64 {
    classification_loss_impl(&cls_map.probs, cls_targets, false).0
}

pub fn classification_loss_grad(
    cls_map: &ClassificationMap,
    cls_targets: &Array4<f64>,
) -> (f64, Array4<f64>) {
    let (loss, grad) = classification_loss_impl(&cls_map.probs, cls_targets, true);
    (loss, grad.unwrap())
}

fn classification_loss_impl(
    probs: &Array4<f64>,
    targets: &Array4<f64>,
    want_grad: bool,
) -> (f64, Option<Array4<f64>>) {
    assert_eq!(probs.dim(), targets.dim(), "shape mismatch");
    let (w, h, d, _) = probs.dim();
    let m = (w * h * d) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Array4::zeros(probs.dim()));
    for ((idx, &p), &t) in probs.indexed_iter().zip(targets.iter()) {
        total -= t * clamped_ln(p);
        if let Some(g) = grad.as_mut() {
            g[idx] = -t / p.clamp(PROB_EPS, 1.0 - PROB_EPS) / m;
        }
    }
    (total / m, grad)
}

/// Per-slot binary entropy, normalized to peak at 1 for a uniform pair.
pub fn entropy_map(cls_map: &ClassificationMap) -> EntropyMap {
    let (w, h, d, _) = cls_map.probs.dim();
    let inv_log2 = 1.0 / std::f64::consts::LN_2;
    let mut values = Array3::zeros((w, h, d));
    for ((i, j, k), v) in values.indexed_iter_mut() {
        let p = cls_map.probs[[i, j, k, 0]];
        let q = cls_map.probs[[i, j, k, 1]];
        *v = -inv_log2 * (p * clamped_ln(p) + q * clamped_ln(q));
    }
    EntropyMap { values }
}

/// Mean of the entropy map over all W x H x D slots.
pub fn entropy_loss(cls_map: &ClassificationMap) -> f64 {
    let map = entropy_map(cls_map);
    let n = map.values.len() as f64;
    map.values.sum() / n
}

/// Entropy loss with its gradient with respect to every probability entry.
pub fn entropy_loss_grad(cls_map: &ClassificationMap) -> (f64, Array4<f64>) {
    let inv_log2 = 1.0 / std::f64::consts::LN_2;
    let probs = &cls_map.probs;
    let (w, h, d, _) = probs.dim();
    let n = (w * h * d) as f64;
    let mut grad = Array4::zeros(probs.dim());
    for (idx, &p) in probs.indexed_iter() {
        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        grad[idx] = -inv_log2 * (pc.ln() + 1.0) / n;
    }
    (entropy_loss(cls_map), grad)
}

/// Spatial sum of the negative log-likelihood of the true domain.
pub fn discriminator_loss(domain_map: &DomainMap) -> f64 {
    discriminator_loss_impl(domain_map, false).0
}

pub fn discriminator_loss_grad(domain_map: &DomainMap) -> (f64, Array3<f64>) {
    let (loss, grad) = discriminator_loss_impl(domain_map, true);
    (loss, grad.unwrap())
}

fn discriminator_loss_impl(domain_map: &DomainMap, want_grad: bool) -> (f64, Option<Array3<f64>>) {
    let true_channel = match domain_map.domain {
        DomainLabel::Source => 0,
        DomainLabel::Target => 1,
    };
    let probs = &domain_map.probs;
    let (w, h, _) = probs.dim();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Array3::zeros(probs.dim()));
    for i in 0..w {
        for j in 0..h {
            let p = probs[[i, j, true_channel]];
            total -= clamped_ln(p);
            if let Some(g) = grad.as_mut() {
                g[[i, j, true_channel]] = -1.0 / p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            }
        }
    }
    (total, grad)
}

/// Spatial sum of `-log D_source` on a target-domain prediction map; drives
/// the main network to fool the discriminator. Defined only on target
/// samples.
pub fn adversarial_loss(domain_map: &DomainMap) -> Result<f64> {
    Ok(adversarial_loss_impl(domain_map, false)?.0)
}

pub fn adversarial_loss_grad(domain_map: &DomainMap) -> Result<(f64, Array3<f64>)> {
    let (loss, grad) = adversarial_loss_impl(domain_map, true)?;
    Ok((loss, grad.unwrap()))
}

fn adversarial_loss_impl(
    domain_map: &DomainMap,
    want_grad: bool,
) -> Result<(f64, Option<Array3<f64>>)> {
    if domain_map.domain != DomainLabel::Target {
        return Err(Error::ContractViolation(
            "adversarial loss is defined only on target-domain samples".into(),
        ));
    }
    let probs = &domain_map.probs;
    let (w, h, _) = probs.dim();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Array3::zeros(probs.dim()));
    for i in 0..w {
        for j in 0..h {
            let p = probs[[i, j, 0]];
            total -= clamped_ln(p);
            if let Some(g) = grad.as_mut() {
                g[[i, j, 0]] = -1.0 / p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            }
        }
    }
    Ok((total, grad))
}

/// Weighted sum of the five main-network loss components.
pub fn main_objective(
    loc: f64,
    cls: f64,
    ent_src: f64,
    ent_tgt: f64,
    adv: f64,
    w: &LossWeights,
) -> Result<f64> {
    for (name, v) in [
        ("loc", loc),
        ("cls", cls),
        ("ent_src", ent_src),
        ("ent_tgt", ent_tgt),
        ("adv", adv),
    ] {
        if !v.is_finite() {
            return Err(Error::TrainingDivergence {
                component: name.into(),
                value: v,
            });
        }
    }
    Ok(w.lambda_loc * loc
        + w.lambda_cls * cls
        + w.lambda_ent * (ent_src + ent_tgt)
        + w.lambda_adv * adv)
}

/// Sum of the discriminator losses over both domains.
pub fn discriminator_objective(dis_src: f64, dis_tgt: f64) -> f64 {
    dis_src + dis_tgt
}
