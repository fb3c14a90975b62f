//! The differentiable pieces: backbone, regression and classification heads,
//! and the fully convolutional domain discriminator.
//!
//! The backbone downscales by `stride` overall; 3x3/pad-1 convolutions give
//! an output of exactly `ceil(input / stride)` cells per axis, matching the
//! anchor grid for any input size. Offsets go through tanh so the `[-1, 1]`
//! range holds by construction; classification and domain outputs are
//! two-way softmaxes.
//!
//! Gradient flow is explicit: `MainNetwork::backward` only ever produces
//! main-network gradients, `Discriminator::backward_params` only
//! discriminator gradients, and `Discriminator::backward_input` propagates
//! to the concatenated prediction maps while leaving the discriminator
//! untouched. Freezing and detaching are therefore structural, not runtime
//! flags.

use ndarray::{Array3, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_anchor_grid, AnchorGrid, OffsetMap};
use crate::losses::{ClassificationMap, DomainLabel, DomainMap};
use crate::nn::{
    leaky_relu, leaky_relu_backward, relu, relu_backward, softmax2, softmax2_backward, tanh,
    tanh_backward, Conv2d, ConvGrads,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneVariant {
    Tiny,
    VggLike,
}

/// Architecture of the feature extractor and its heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Overall downscale factor; equals the product of stage strides.
    pub stride: usize,
    /// Feature depth at the backbone output.
    pub channels: usize,
    /// Number of conv stages; derived from variant and stride.
    #[serde(default)]
    pub depth: usize,
    /// Max points per stride-sized window (D).
    pub slots_per_cell: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let mut cfg = Self {
            variant: BackboneVariant::Tiny,
            stride: 8,
            channels: 64,
            depth: 0,
            slots_per_cell: 4,
        };
        cfg.depth = cfg.stage_plan().unwrap().len();
        cfg
    }
}

impl BackboneConfig {
    /// `(out_channels, stride)` per conv stage.
    pub fn stage_plan(&self) -> Result<Vec<(usize, usize)>> {
        if self.slots_per_cell == 0 || self.channels < 4 {
            return Err(Error::InvalidArgument(format!(
                "backbone needs slots_per_cell >= 1 and channels >= 4, got D={} c={}",
                self.slots_per_cell, self.channels
            )));
        }
        match self.variant {
            BackboneVariant::Tiny => {
                if !self.stride.is_power_of_two() || self.stride < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "tiny backbone stride must be a power of two >= 2, got {}",
                        self.stride
                    )));
                }
                let n_down = self.stride.trailing_zeros() as usize;
                let mut plan = Vec::with_capacity(n_down + 1);
                for stage in 0..n_down {
                    let shrink = 1usize << (n_down - 1 - stage).min(2);
                    plan.push(((self.channels / shrink).max(4), 2));
                }
                plan.push((self.channels, 1));
                Ok(plan)
            }
            BackboneVariant::VggLike => {
                if self.stride != 8 {
                    return Err(Error::InvalidArgument(format!(
                        "vgg-like backbone is fixed at stride 8, got {}",
                        self.stride
                    )));
                }
                let c = self.channels;
                Ok(vec![
                    ((c / 4).max(8), 2),
                    ((c / 4).max(8), 1),
                    ((c / 2).max(8), 2),
                    ((c / 2).max(8), 1),
                    (c, 2),
                    (c, 1),
                ])
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let plan = self.stage_plan()?;
        let product: usize = plan.iter().map(|&(_, s)| s).product();
        if product != self.stride {
            return Err(Error::InvalidArgument(format!(
                "stage strides multiply to {product}, config stride is {}",
                self.stride
            )));
        }
        if self.depth != 0 && self.depth != plan.len() {
            return Err(Error::InvalidArgument(format!(
                "depth {} does not match the {}-stage plan",
                self.depth,
                plan.len()
            )));
        }
        Ok(())
    }
}

/// Offset and classification maps produced by one forward pass.
#[derive(Debug, Clone)]
pub struct PredictionMaps {
    pub offsets: OffsetMap,
    pub cls: ClassificationMap,
}

/// Activations needed to run the backward pass for one input.
pub struct MainCache {
    /// `acts[0]` is the image; `acts[i + 1]` is stage i's post-ReLU output.
    acts: Vec<Array3<f64>>,
    /// Tanh outputs in channel layout `(2D, Hf, Wf)`.
    offset_vals: Array3<f64>,
    /// Softmax outputs in channel layout `(2D, Hf, Wf)`.
    cls_probs: Array3<f64>,
}

/// Gradients for every main-network parameter, in parameter order.
#[derive(Debug, Clone)]
pub struct MainGradients {
    pub stages: Vec<ConvGrads>,
    pub offset_head: ConvGrads,
    pub cls_head: ConvGrads,
}

impl MainGradients {
    pub fn zeros_like(net: &MainNetwork) -> Self {
        Self {
            stages: net.stages.iter().map(ConvGrads::zeros_like).collect(),
            offset_head: ConvGrads::zeros_like(&net.offset_head),
            cls_head: ConvGrads::zeros_like(&net.cls_head),
        }
    }

    pub fn add_assign(&mut self, other: &MainGradients) {
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            a.add_assign(b);
        }
        self.offset_head.add_assign(&other.offset_head);
        self.cls_head.add_assign(&other.cls_head);
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.stages {
            g.scale(factor);
        }
        self.offset_head.scale(factor);
        self.cls_head.scale(factor);
    }

    pub fn abs_sum(&self) -> f64 {
        self.stages.iter().map(ConvGrads::abs_sum).sum::<f64>()
            + self.offset_head.abs_sum()
            + self.cls_head.abs_sum()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.stages {
            out.push(g.dw.as_slice().unwrap());
            out.push(g.db.as_slice().unwrap());
        }
        for g in [&self.offset_head, &self.cls_head] {
            out.push(g.dw.as_slice().unwrap());
            out.push(g.db.as_slice().unwrap());
        }
        out
    }
}

fn conv_slices<'a>(convs: &[&'a Conv2d]) -> Vec<&'a [f64]> {
    let mut out = Vec::new();
    for c in convs {
        out.push(c.weight.as_slice().unwrap());
        out.push(c.bias.as_slice().unwrap());
    }
    out
}

fn conv_slices_mut<'a>(convs: impl Iterator<Item = &'a mut Conv2d>) -> Vec<&'a mut [f64]> {
    let mut out = Vec::new();
    for c in convs {
        let Conv2d { weight, bias, .. } = c;
        out.push(weight.as_slice_mut().unwrap());
        out.push(bias.as_slice_mut().unwrap());
    }
    out
}

/// Backbone plus the two 1x1 prediction heads.
pub struct MainNetwork {
    pub config: BackboneConfig,
    stages: Vec<Conv2d>,
    offset_head: Conv2d,
    cls_head: Conv2d,
}

impl MainNetwork {
    pub fn new(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let plan = config.stage_plan()?;
        let mut stages = Vec::with_capacity(plan.len());
        let mut in_c = 3;
        for &(out_c, stride) in &plan {
            stages.push(Conv2d::new_he(out_c, in_c, 3, stride, 1, rng));
            in_c = out_c;
        }
        let d = config.slots_per_cell;
        // Small head weights keep initial logits near zero: uniform
        // classification pairs and near-center offsets.
        let offset_head = Conv2d::new_scaled(2 * d, in_c, 1, 1, 0, 0.01, rng);
        let cls_head = Conv2d::new_scaled(2 * d, in_c, 1, 1, 0, 0.01, rng);
        let mut config = config;
        config.depth = plan.len();
        Ok(Self {
            config,
            stages,
            offset_head,
            cls_head,
        })
    }

    /// The anchor grid this network induces on an image of the given size.
    pub fn grid_for(&self, image_w: usize, image_h: usize) -> Result<AnchorGrid> {
        build_anchor_grid(
            image_w,
            image_h,
            self.config.stride,
            self.config.slots_per_cell,
        )
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<(PredictionMaps, MainCache)> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::InvalidArgument(format!(
                "expected an RGB image with 3 channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        let mut acts = Vec::with_capacity(self.stages.len() + 1);
        acts.push(image.clone());
        for conv in &self.stages {
            let pre = conv.forward(acts.last().unwrap());
            acts.push(relu(&pre));
        }
        let feat = acts.last().unwrap();
        let offset_vals = tanh(&self.offset_head.forward(feat));
        let cls_logits = self.cls_head.forward(feat);
        let cls_probs = pairwise_softmax(&cls_logits);

        let d = self.config.slots_per_cell;
        let offsets = OffsetMap {
            values: chw_to_map(&offset_vals, d),
        };
        let cls = ClassificationMap {
            probs: chw_to_map(&cls_probs, d),
        };
        Ok((
            PredictionMaps { offsets, cls },
            MainCache {
                acts,
                offset_vals,
                cls_probs,
            },
        ))
    }

    /// Forward without keeping activations; for evaluation.
    pub fn infer(&self, image: &Array3<f64>) -> Result<PredictionMaps> {
        self.forward(image).map(|(maps, _)| maps)
    }

    /// Backpropagates map-space gradients into parameter gradients.
    ///
    /// `d_offsets` is dL/d(offset values), `d_cls` is dL/d(probabilities),
    /// both in `(W, H, D, 2)` layout. Activation derivatives (tanh, softmax)
    /// are applied here.
    pub fn backward(
        &self,
        cache: &MainCache,
        d_offsets: &Array4<f64>,
        d_cls: &Array4<f64>,
    ) -> MainGradients {
        let d_off_chw = map_to_chw(d_offsets);
        let d_cls_chw = map_to_chw(d_cls);

        let d_off_logits = tanh_backward(&cache.offset_vals, &d_off_chw);
        let d_cls_logits = pairwise_softmax_backward(&cache.cls_probs, &d_cls_chw);

        let feat = cache.acts.last().unwrap();
        let (d_feat_off, dw_off, db_off) = self.offset_head.backward(feat, &d_off_logits);
        let (d_feat_cls, dw_cls, db_cls) = self.cls_head.backward(feat, &d_cls_logits);
        let mut d_act = d_feat_off + d_feat_cls;

        let mut stage_grads = vec![None; self.stages.len()];
        for (i, conv) in self.stages.iter().enumerate().rev() {
            let d_pre = relu_backward(&cache.acts[i + 1], &d_act);
            let (dx, dw, db) = conv.backward(&cache.acts[i], &d_pre);
            stage_grads[i] = Some(ConvGrads { dw, db });
            d_act = dx;
        }
        MainGradients {
            stages: stage_grads.into_iter().map(Option::unwrap).collect(),
            offset_head: ConvGrads {
                dw: dw_off,
                db: db_off,
            },
            cls_head: ConvGrads {
                dw: dw_cls,
                db: db_cls,
            },
        }
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.param_slices().iter().map(|s| s.len()).collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut refs: Vec<&Conv2d> = self.stages.iter().collect();
        refs.push(&self.offset_head);
        refs.push(&self.cls_head);
        conv_slices(&refs)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        conv_slices_mut(
            self.stages
                .iter_mut()
                .chain([&mut self.offset_head, &mut self.cls_head]),
        )
    }

    pub fn num_params(&self) -> usize {
        self.param_sizes().iter().sum()
    }
}

/// Softmax over channel pairs `(2k, 2k + 1)` at every spatial cell.
fn pairwise_softmax(logits: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = logits.dim();
    debug_assert_eq!(c % 2, 0);
    let mut out = Array3::zeros((c, h, w));
    for k in 0..c / 2 {
        for y in 0..h {
            for x in 0..w {
                let (p, q) = softmax2(logits[[2 * k, y, x]], logits[[2 * k + 1, y, x]]);
                out[[2 * k, y, x]] = p;
                out[[2 * k + 1, y, x]] = q;
            }
        }
    }
    out
}

fn pairwise_softmax_backward(probs: &Array3<f64>, d_probs: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = probs.dim();
    let mut out = Array3::zeros((c, h, w));
    for k in 0..c / 2 {
        for y in 0..h {
            for x in 0..w {
                let (da, db) = softmax2_backward(
                    probs[[2 * k, y, x]],
                    probs[[2 * k + 1, y, x]],
                    d_probs[[2 * k, y, x]],
                    d_probs[[2 * k + 1, y, x]],
                );
                out[[2 * k, y, x]] = da;
                out[[2 * k + 1, y, x]] = db;
            }
        }
    }
    out
}

/// Channel layout `(2D, Hf, Wf)` to map layout `(W, H, D, 2)`.
fn chw_to_map(chw: &Array3<f64>, d: usize) -> Array4<f64> {
    let (c, h, w) = chw.dim();
    debug_assert_eq!(c, 2 * d);
    Array4::from_shape_fn((w, h, d, 2), |(i, j, k, comp)| chw[[2 * k + comp, j, i]])
}

/// Map layout `(W, H, D, 2)` to channel layout `(2D, Hf, Wf)`.
fn map_to_chw(map: &Array4<f64>) -> Array3<f64> {
    let (w, h, d, _) = map.dim();
    Array3::from_shape_fn((2 * d, h, w), |(c, j, i)| map[[i, j, c / 2, c % 2]])
}

/// Channel-axis concatenation of the two prediction maps: offset channels
/// first, then classification channels, each flattened as `2k + component`.
pub fn concat_predictions(maps: &PredictionMaps) -> Array3<f64> {
    let (w, h, d, _) = maps.offsets.values.dim();
    let mut out = Array3::zeros((w, h, 4 * d));
    for i in 0..w {
        for j in 0..h {
            for k in 0..d {
                for c in 0..2 {
                    out[[i, j, 2 * k + c]] = maps.offsets.values[[i, j, k, c]];
                    out[[i, j, 2 * d + 2 * k + c]] = maps.cls.probs[[i, j, k, c]];
                }
            }
        }
    }
    out
}

/// Inverse of [`concat_predictions`]; also used to split gradients flowing
/// back from the discriminator input.
pub fn split_predictions(concat: &Array3<f64>, d: usize) -> (Array4<f64>, Array4<f64>) {
    let (w, h, c) = concat.dim();
    assert_eq!(c, 4 * d, "expected 4D = {} channels, got {c}", 4 * d);
    let mut offsets = Array4::zeros((w, h, d, 2));
    let mut cls = Array4::zeros((w, h, d, 2));
    for i in 0..w {
        for j in 0..h {
            for k in 0..d {
                for comp in 0..2 {
                    offsets[[i, j, k, comp]] = concat[[i, j, 2 * k + comp]];
                    cls[[i, j, k, comp]] = concat[[i, j, 2 * d + 2 * k + comp]];
                }
            }
        }
    }
    (offsets, cls)
}

/// Patch-level domain classifier: stride-2 convolutions with leaky ReLU and
/// a final two-way softmax per output cell.
pub struct Discriminator {
    pub in_channels: usize,
    convs: Vec<Conv2d>,
    slope: f64,
}

pub struct DiscCache {
    /// `acts[0]` is the input in channel layout; `acts[i + 1]` follows conv i.
    acts: Vec<Array3<f64>>,
    probs_chw: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct DiscGradients {
    pub convs: Vec<ConvGrads>,
}

impl DiscGradients {
    pub fn zeros_like(disc: &Discriminator) -> Self {
        Self {
            convs: disc.convs.iter().map(ConvGrads::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &DiscGradients) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.convs {
            g.scale(factor);
        }
    }

    pub fn abs_sum(&self) -> f64 {
        self.convs.iter().map(ConvGrads::abs_sum).sum()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.convs {
            out.push(g.dw.as_slice().unwrap());
            out.push(g.db.as_slice().unwrap());
        }
        out
    }
}

impl Discriminator {
    pub fn new(in_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::InvalidArgument(
                "discriminator needs at least one input channel".into(),
            ));
        }
        let plan = [(32, 2), (64, 2), (64, 2), (2, 2)];
        let mut convs = Vec::with_capacity(plan.len());
        let mut in_c = in_channels;
        for &(out_c, stride) in &plan {
            convs.push(Conv2d::new_he(out_c, in_c, 3, stride, 1, rng));
            in_c = out_c;
        }
        Ok(Self {
            in_channels,
            convs,
            slope: 0.2,
        })
    }

    /// Total downscale factor from input cells to output cells.
    pub fn downsample(&self) -> usize {
        self.convs.iter().map(|c| c.stride).product()
    }

    /// Runs the classifier on a concatenated prediction map in `(W, H, 4D)`
    /// layout and tags the output with the sample's true domain.
    pub fn forward(&self, concat: &Array3<f64>, domain: DomainLabel) -> Result<(DomainMap, DiscCache)> {
        let (w, h, c) = concat.dim();
        if c != self.in_channels {
            return Err(Error::InvalidArgument(format!(
                "discriminator expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let x = Array3::from_shape_fn((c, h, w), |(ci, y, xi)| concat[[xi, y, ci]]);
        let mut acts = Vec::with_capacity(self.convs.len() + 1);
        acts.push(x);
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            let pre = conv.forward(acts.last().unwrap());
            let post = if i == last {
                pre
            } else {
                leaky_relu(&pre, self.slope)
            };
            acts.push(post);
        }
        let logits = acts.last().unwrap();
        let probs_chw = pairwise_softmax(logits);
        let (_, oh, ow) = probs_chw.dim();
        let probs = Array3::from_shape_fn((ow, oh, 2), |(i, j, ch)| probs_chw[[ch, j, i]]);
        Ok((
            DomainMap { probs, domain },
            DiscCache { acts, probs_chw },
        ))
    }

    /// Parameter gradients given dL/d(domain probabilities) in `(W', H', 2)`
    /// layout. The input gradient is discarded: this is the update path where
    /// the main network's outputs are detached.
    pub fn backward_params(&self, cache: &DiscCache, d_probs: &Array3<f64>) -> DiscGradients {
        self.backward_impl(cache, d_probs, true).0.unwrap()
    }

    /// Gradient with respect to the concatenated input, in `(W, H, 4D)`
    /// layout, with discriminator parameters held fixed. This is the
    /// adversarial path into the main network.
    pub fn backward_input(&self, cache: &DiscCache, d_probs: &Array3<f64>) -> Array3<f64> {
        self.backward_impl(cache, d_probs, false).1
    }

    fn backward_impl(
        &self,
        cache: &DiscCache,
        d_probs: &Array3<f64>,
        want_params: bool,
    ) -> (Option<DiscGradients>, Array3<f64>) {
        let (wo, ho, _) = d_probs.dim();
        let d_probs_chw = Array3::from_shape_fn((2, ho, wo), |(c, j, i)| d_probs[[i, j, c]]);
        let mut d_act = pairwise_softmax_backward(&cache.probs_chw, &d_probs_chw);

        let last = self.convs.len() - 1;
        let mut grads = want_params.then(|| vec![None; self.convs.len()]);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            if i != last {
                d_act = leaky_relu_backward(&cache.acts[i + 1], &d_act, self.slope);
            }
            if let Some(gs) = grads.as_mut() {
                let (dx, dw, db) = conv.backward(&cache.acts[i], &d_act);
                gs[i] = Some(ConvGrads { dw, db });
                d_act = dx;
            } else {
                d_act = conv.backward_input(cache.acts[i].dim(), &d_act);
            }
        }
        let grads = grads.map(|gs| DiscGradients {
            convs: gs.into_iter().map(Option::unwrap).collect(),
        });
        // Back to (W, H, C) map layout.
        let (c, h, w) = d_act.dim();
        let d_input = Array3::from_shape_fn((w, h, c), |(i, j, ci)| d_act[[ci, j, i]]);
        (grads, d_input)
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.param_slices().iter().map(|s| s.len()).collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        conv_slices(&self.convs.iter().collect::<Vec<_>>())
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        conv_slices_mut(self.convs.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.param_sizes().iter().sum()
    }
}
