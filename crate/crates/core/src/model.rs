//! The multi-task part-aware network: a small convolutional backbone, K
//! main-task/auxiliary-task head pairs with optional hard parameter
//! sharing, an optional channel-attention gate, and per-task classifiers.
//!
//! At inference all auxiliary heads are dropped; the image representation
//! is the concatenation of the K main-task features (the auxiliary heads on
//! uniform strips for the baseline configuration).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_err, shape_err, Result};
use crate::prior::PartPrior;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub type ParamId = usize;

/// A named trainable (or state) tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Flat, construction-ordered parameter registry. Shared layers are
/// realized as shared indices, so an optimizer step touches each shared
/// buffer exactly once.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.params.push(Param {
            name: String::from(name),
            tensor,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }
}

/// Running statistics of one batch-normalization layer.
#[derive(Debug, Clone)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn: BnLayer,
    pub stride: usize,
}

/// Squeeze-excite gate over the pooled feature vector: linear down to
/// dim/r with BN+ReLU, linear back up with BN, sigmoid, multiply.
#[derive(Debug, Clone, Copy)]
pub struct CaBlock {
    pub squeeze_w: ParamId,
    pub squeeze_b: ParamId,
    pub bn_s: BnLayer,
    pub excite_w: ParamId,
    pub excite_b: ParamId,
    pub bn_e: BnLayer,
}

/// One head branch: 1x1 conv + BN + ReLU, global max pool, optional CA,
/// a second (1x1-equivalent) linear + BN + ReLU, and the classifier.
#[derive(Debug, Clone, Copy)]
pub struct HeadBranch {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub bn1: BnLayer,
    pub ca: Option<CaBlock>,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub bn2: BnLayer,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

/// Main-task / auxiliary-task pair for one part. Sharing flags alias the
/// two branches onto the same parameter ids; classifiers are never shared.
#[derive(Debug, Clone, Copy)]
pub struct HeadPair {
    pub mt: Option<HeadBranch>,
    pub at: Option<HeadBranch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Auxiliary heads on uniform strips only, for both training and
    /// inference (the PCB-like pipeline).
    Baseline,
    /// Main heads only; no part guidance at all.
    MtOnly,
    /// Both branches, no parameter sharing.
    NaiveMtl,
    /// Both branches with the configured sharing flags.
    Full,
}

impl Mode {
    pub fn has_mt(self) -> bool {
        !matches!(self, Mode::Baseline)
    }

    pub fn has_at(self) -> bool {
        !matches!(self, Mode::MtOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::MtOnly => "mt_only",
            Mode::NaiveMtl => "naive_mtl",
            Mode::Full => "full",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpnConfig {
    pub k: usize,
    pub feature_dim: usize,
    pub use_ca: bool,
    pub share_conv1: bool,
    pub share_conv2: bool,
    pub share_ca: bool,
    pub mode: Mode,
    pub num_classes: usize,
    pub ca_reduction: usize,
    pub backbone_widths: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub input_h: usize,
    pub input_w: usize,
}

impl MpnConfig {
    /// Paper-scale head dimensions on the desk backbone.
    pub fn new(num_classes: usize) -> Self {
        MpnConfig {
            k: 6,
            feature_dim: 512,
            use_ca: true,
            share_conv1: true,
            share_conv2: true,
            share_ca: true,
            mode: Mode::Full,
            num_classes,
            ca_reduction: 16,
            backbone_widths: vec![32, 64, 128, 256],
            backbone_strides: vec![2, 2, 1, 1],
            input_h: 96,
            input_w: 32,
        }
    }

    /// Tiny configuration for gradient checks and fast tests.
    pub fn micro(num_classes: usize) -> Self {
        MpnConfig {
            k: 2,
            feature_dim: 8,
            use_ca: true,
            share_conv1: true,
            share_conv2: true,
            share_ca: true,
            mode: Mode::Full,
            num_classes,
            ca_reduction: 4,
            backbone_widths: vec![4, 6],
            backbone_strides: vec![2, 2],
            input_h: 24,
            input_w: 8,
        }
    }

    pub fn stride_product(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn feat_h(&self) -> usize {
        self.input_h / self.stride_product()
    }

    pub fn feat_w(&self) -> usize {
        self.input_w / self.stride_product()
    }

    pub fn backbone_out_channels(&self) -> usize {
        *self.backbone_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.feature_dim == 0 || self.num_classes == 0 {
            return Err(invalid_err!("K, feature_dim, and num_classes must be positive"));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.len() != self.backbone_strides.len() {
            return Err(invalid_err!("backbone widths/strides must be non-empty and aligned"));
        }
        let sp = self.stride_product();
        if sp == 0 || self.input_h % sp != 0 || self.input_w % sp != 0 {
            return Err(invalid_err!(
                "input {}x{} not divisible by backbone stride product {}",
                self.input_h,
                self.input_w,
                sp
            ));
        }
        if self.feat_h() < self.k {
            return Err(invalid_err!(
                "feature height {} cannot carry {} parts",
                self.feat_h(),
                self.k
            ));
        }
        if matches!(self.mode, Mode::Baseline | Mode::MtOnly | Mode::NaiveMtl)
            && (self.share_conv1 || self.share_conv2 || self.share_ca)
        {
            return Err(invalid_err!(
                "sharing flags require mode=full; {} has at most one branch per part or forbids sharing",
                self.mode.as_str()
            ));
        }
        if self.use_ca && self.ca_reduction == 0 {
            return Err(invalid_err!("ca_reduction must be positive"));
        }
        Ok(())
    }
}

/// Map from parameter ids to tape leaves for one forward pass.
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn tape_id(&self, param: ParamId) -> TensorId {
        self.ids[param]
    }

    /// Copies tape gradients back into the parameter store (accumulating).
    pub fn harvest_grads(&self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        for (pid, &tid) in self.ids.iter().enumerate() {
            if !store.get(pid).tensor.requires_grad {
                continue;
            }
            if let Some(g) = tape.grad(tid) {
                let g = g.to_vec();
                store.get_mut(pid).tensor.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }
}

/// Which part layout feeds the auxiliary heads.
pub enum PartLayout<'a> {
    /// Uniform division of the feature map; consults no maps or priors.
    Uniform,
    /// One coarse prior per batch image.
    Priors(&'a [PartPrior]),
}

/// Everything the losses need from one forward pass.
pub struct ForwardOutputs {
    pub feature_maps: TensorId,
    pub mt_features: Vec<TensorId>,
    pub at_features: Vec<TensorId>,
    pub mt_logits: Vec<TensorId>,
    pub at_logits: Vec<TensorId>,
    /// Concatenated inference-branch features (MT, or AT for baseline).
    pub h: TensorId,
    /// Concatenated AT features when both branches are active.
    pub g: Option<TensorId>,
}

#[derive(Debug)]
pub struct MpnModel {
    pub cfg: MpnConfig,
    pub params: ParamStore,
    pub bn_states: Vec<BnRunning>,
    pub bn_names: Vec<String>,
    backbone: Vec<ConvBlock>,
    heads: Vec<HeadPair>,
}

struct Builder {
    store: ParamStore,
    bn_states: Vec<BnRunning>,
    bn_names: Vec<String>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| bound * (2.0 * self.rng.gen::<f64>() - 1.0))
            .collect();
        Tensor::new(shape, data).unwrap().with_grad()
    }

    /// Kaiming-style fan-in scaled uniform initialization.
    fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = crate::math::sqrt(6.0 / fan_in as f64);
        let t = self.uniform(shape, bound);
        self.store.push(name, t)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.push(name, Tensor::zeros(shape).with_grad())
    }

    fn bn(&mut self, name: &str, c: usize) -> BnLayer {
        let gamma = self
            .store
            .push(&format!("{name}.gamma"), Tensor::full(&[c], 1.0).with_grad());
        let beta = self.store.push(&format!("{name}.beta"), Tensor::zeros(&[c]).with_grad());
        let state = self.bn_states.len();
        self.bn_states.push(BnRunning {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        self.bn_names.push(String::from(name));
        BnLayer { gamma, beta, state }
    }

    fn conv_block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> ConvBlock {
        let weight = self.kaiming(&format!("{name}.conv.weight"), &[cout, cin, 3, 3], cin * 9);
        let bias = self.zeros(&format!("{name}.conv.bias"), &[cout]);
        let bn = self.bn(&format!("{name}.bn"), cout);
        ConvBlock {
            weight,
            bias,
            bn,
            stride,
        }
    }

    fn ca_block(&mut self, name: &str, dim: usize, reduction: usize) -> CaBlock {
        let hidden = (dim / reduction).max(1);
        let squeeze_w = self.kaiming(&format!("{name}.squeeze.weight"), &[hidden, dim], dim);
        let squeeze_b = self.zeros(&format!("{name}.squeeze.bias"), &[hidden]);
        let bn_s = self.bn(&format!("{name}.squeeze.bn"), hidden);
        let excite_w = self.kaiming(&format!("{name}.excite.weight"), &[dim, hidden], hidden);
        let excite_b = self.zeros(&format!("{name}.excite.bias"), &[dim]);
        let bn_e = self.bn(&format!("{name}.excite.bn"), dim);
        CaBlock {
            squeeze_w,
            squeeze_b,
            bn_s,
            excite_w,
            excite_b,
            bn_e,
        }
    }
}

/// Layers of one branch that can be aliased across the MT-AT pair.
struct SharedSlots {
    conv1: Option<(ParamId, ParamId, BnLayer)>,
    conv2: Option<(ParamId, ParamId, BnLayer)>,
    ca: Option<CaBlock>,
}

impl MpnModel {
    pub fn new(cfg: MpnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            bn_states: Vec::new(),
            bn_names: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut backbone = Vec::new();
        let mut cin = 3;
        for (i, (&w, &s)) in cfg
            .backbone_widths
            .iter()
            .zip(&cfg.backbone_strides)
            .enumerate()
        {
            backbone.push(b.conv_block(&format!("backbone.{i}"), cin, w, s));
            cin = w;
        }
        let c = cfg.backbone_out_channels();
        let d = cfg.feature_dim;
        let mut heads = Vec::new();
        for k in 0..cfg.k {
            let mut shared = SharedSlots {
                conv1: None,
                conv2: None,
                ca: None,
            };
            let both = cfg.mode.has_mt() && cfg.mode.has_at();
            if both && cfg.share_conv1 {
                let w = b.kaiming(&format!("head.{k}.conv1.weight"), &[d, c, 1, 1], c);
                let bias = b.zeros(&format!("head.{k}.conv1.bias"), &[d]);
                let bn = b.bn(&format!("head.{k}.conv1.bn"), d);
                shared.conv1 = Some((w, bias, bn));
            }
            if both && cfg.share_conv2 {
                let w = b.kaiming(&format!("head.{k}.conv2.weight"), &[d, d], d);
                let bias = b.zeros(&format!("head.{k}.conv2.bias"), &[d]);
                let bn = b.bn(&format!("head.{k}.conv2.bn"), d);
                shared.conv2 = Some((w, bias, bn));
            }
            if both && cfg.use_ca && cfg.share_ca {
                shared.ca = Some(b.ca_block(&format!("head.{k}.ca"), d, cfg.ca_reduction));
            }
            let make_branch = |b: &mut Builder, tag: &str| -> HeadBranch {
                let (conv1_w, conv1_b, bn1) = match shared.conv1 {
                    Some(t) => t,
                    None => {
                        let w = b.kaiming(&format!("head.{k}.{tag}.conv1.weight"), &[d, c, 1, 1], c);
                        let bias = b.zeros(&format!("head.{k}.{tag}.conv1.bias"), &[d]);
                        let bn = b.bn(&format!("head.{k}.{tag}.conv1.bn"), d);
                        (w, bias, bn)
                    }
                };
                let ca = if cfg.use_ca {
                    Some(match shared.ca {
                        Some(ca) => ca,
                        None => b.ca_block(&format!("head.{k}.{tag}.ca"), d, cfg.ca_reduction),
                    })
                } else {
                    None
                };
                let (conv2_w, conv2_b, bn2) = match shared.conv2 {
                    Some(t) => t,
                    None => {
                        let w = b.kaiming(&format!("head.{k}.{tag}.conv2.weight"), &[d, d], d);
                        let bias = b.zeros(&format!("head.{k}.{tag}.conv2.bias"), &[d]);
                        let bn = b.bn(&format!("head.{k}.{tag}.conv2.bn"), d);
                        (w, bias, bn)
                    }
                };
                let cls_w = b.kaiming(&format!("head.{k}.{tag}.cls.weight"), &[cfg.num_classes, d], d);
                let cls_b = b.zeros(&format!("head.{k}.{tag}.cls.bias"), &[cfg.num_classes]);
                HeadBranch {
                    conv1_w,
                    conv1_b,
                    bn1,
                    ca,
                    conv2_w,
                    conv2_b,
                    bn2,
                    cls_w,
                    cls_b,
                }
            };
            let mt = cfg.mode.has_mt().then(|| make_branch(&mut b, "mt"));
            let at = cfg.mode.has_at().then(|| make_branch(&mut b, "at"));
            heads.push(HeadPair { mt, at });
        }
        Ok(MpnModel {
            cfg,
            params: b.store,
            bn_states: b.bn_states,
            bn_names: b.bn_names,
            backbone,
            heads,
        })
    }

    pub fn heads(&self) -> &[HeadPair] {
        &self.heads
    }

    /// Creates one tape leaf per parameter for this pass.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            ids: self.params.iter().map(|p| tape.leaf(&p.tensor)).collect(),
        }
    }

    fn bn_forward(
        bn_states: &mut [BnRunning],
        tape: &mut Tape,
        binding: &Binding,
        layer: &BnLayer,
        x: TensorId,
        train: bool,
    ) -> Result<TensorId> {
        let state = &mut bn_states[layer.state];
        tape.batchnorm(
            x,
            binding.tape_id(layer.gamma),
            binding.tape_id(layer.beta),
            &mut state.mean,
            &mut state.var,
            BN_MOMENTUM,
            BN_EPS,
            train,
        )
    }

    /// Backbone feature maps F for a normalized image batch.
    pub fn forward_backbone(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        images: TensorId,
        train: bool,
    ) -> Result<TensorId> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.cfg.input_h || shape[3] != self.cfg.input_w {
            return Err(shape_err!(
                "backbone expects Nx3x{}x{} images, got {:?}",
                self.cfg.input_h,
                self.cfg.input_w,
                shape
            ));
        }
        let mut x = images;
        let blocks = self.backbone.clone();
        for block in &blocks {
            let conv = tape.conv2d(
                x,
                binding.tape_id(block.weight),
                binding.tape_id(block.bias),
                (block.stride, block.stride),
                (1, 1),
            )?;
            let normed = Self::bn_forward(&mut self.bn_states, tape, binding, &block.bn, conv, train)?;
            x = tape.relu(normed);
        }
        Ok(x)
    }

    /// Part-specific maps P_1..P_K: mask multiply, crop to the ROI rows and
    /// resize back, then slice uniform strips and resize each to full size.
    pub fn make_part_inputs(
        &self,
        tape: &mut Tape,
        f: TensorId,
        layout: &PartLayout,
    ) -> Result<Vec<TensorId>> {
        let shape = tape.shape(f).to_vec();
        let (n, _c, h, w) = crate::tensor::dims4(&shape)?;
        let aligned = match layout {
            PartLayout::Uniform => f,
            PartLayout::Priors(priors) => {
                if priors.len() != n {
                    return Err(invalid_err!("{} priors for a batch of {}", priors.len(), n));
                }
                let mut per_image = Vec::with_capacity(n);
                for (i, prior) in priors.iter().enumerate() {
                    if prior.mask.h != h || prior.mask.w != w {
                        return Err(shape_err!(
                            "prior mask {}x{} for {}x{} feature maps",
                            prior.mask.h,
                            prior.mask.w,
                            h,
                            w
                        ));
                    }
                    let mut x = tape.slice(f, 0, i, i + 1)?;
                    if prior.mask.data.iter().any(|&v| v == 0) {
                        let mask: Vec<f64> = prior.mask.data.iter().map(|&v| v as f64).collect();
                        x = tape.mul_mask_hw(x, &mask)?;
                    }
                    if prior.roi_top > 0 || prior.roi_bottom + 1 < h {
                        x = tape.slice(x, 2, prior.roi_top, prior.roi_bottom + 1)?;
                        x = tape.bilinear_resize(x, h, w)?;
                    }
                    per_image.push(x);
                }
                tape.concat(&per_image, 0)?
            }
        };
        let small = h / self.cfg.k;
        let extra = h % self.cfg.k;
        let mut parts = Vec::with_capacity(self.cfg.k);
        let mut at = 0;
        for k in 0..self.cfg.k {
            let size = if k < extra { small + 1 } else { small };
            let strip = tape.slice(aligned, 2, at, at + size)?;
            parts.push(tape.bilinear_resize(strip, h, w)?);
            at += size;
        }
        Ok(parts)
    }

    fn forward_ca(
        bn_states: &mut [BnRunning],
        tape: &mut Tape,
        binding: &Binding,
        ca: &CaBlock,
        x: TensorId,
        train: bool,
    ) -> Result<TensorId> {
        let squeezed = tape.linear(x, binding.tape_id(ca.squeeze_w), binding.tape_id(ca.squeeze_b))?;
        let sn = Self::bn_forward(bn_states, tape, binding, &ca.bn_s, squeezed, train)?;
        let sa = tape.relu(sn);
        let excited = tape.linear(sa, binding.tape_id(ca.excite_w), binding.tape_id(ca.excite_b))?;
        let en = Self::bn_forward(bn_states, tape, binding, &ca.bn_e, excited, train)?;
        let gate = tape.sigmoid(en);
        tape.mul(x, gate)
    }

    /// One head branch: returns (feature, logits), the feature being the
    /// output of the second conv stage.
    pub fn forward_head(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        k: usize,
        input: TensorId,
        main_task: bool,
        train: bool,
    ) -> Result<(TensorId, TensorId)> {
        let pair = self
            .heads
            .get(k)
            .ok_or_else(|| invalid_err!("head {} of {}", k, self.heads.len()))?;
        let branch = if main_task { pair.mt } else { pair.at };
        let branch = branch.ok_or_else(|| {
            invalid_err!(
                "{} branch disabled in mode {}",
                if main_task { "MT" } else { "AT" },
                self.cfg.mode.as_str()
            )
        })?;
        let conv = tape.conv2d(
            input,
            binding.tape_id(branch.conv1_w),
            binding.tape_id(branch.conv1_b),
            (1, 1),
            (0, 0),
        )?;
        let bn1 = Self::bn_forward(&mut self.bn_states, tape, binding, &branch.bn1, conv, train)?;
        let act1 = tape.relu(bn1);
        let pooled = tape.global_max_pool(act1)?;
        let gated = match branch.ca {
            Some(ca) => Self::forward_ca(&mut self.bn_states, tape, binding, &ca, pooled, train)?,
            None => pooled,
        };
        let lin = tape.linear(gated, binding.tape_id(branch.conv2_w), binding.tape_id(branch.conv2_b))?;
        let bn2 = Self::bn_forward(&mut self.bn_states, tape, binding, &branch.bn2, lin, train)?;
        let feature = tape.relu(bn2);
        let logits = tape.linear(feature, binding.tape_id(branch.cls_w), binding.tape_id(branch.cls_b))?;
        Ok((feature, logits))
    }

    /// Full forward pass. `layout` must be provided whenever the auxiliary
    /// branch is active.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        images: TensorId,
        layout: Option<&PartLayout>,
        train: bool,
    ) -> Result<ForwardOutputs> {
        let f = self.forward_backbone(tape, binding, images, train)?;
        let part_inputs = if self.cfg.mode.has_at() {
            let layout = layout.ok_or_else(|| invalid_err!("auxiliary branch needs a part layout"))?;
            self.make_part_inputs(tape, f, layout)?
        } else {
            Vec::new()
        };
        let mut out = ForwardOutputs {
            feature_maps: f,
            mt_features: Vec::new(),
            at_features: Vec::new(),
            mt_logits: Vec::new(),
            at_logits: Vec::new(),
            h: 0,
            g: None,
        };
        for k in 0..self.cfg.k {
            if self.cfg.mode.has_mt() {
                let (feat, logits) = self.forward_head(tape, binding, k, f, true, train)?;
                out.mt_features.push(feat);
                out.mt_logits.push(logits);
            }
            if self.cfg.mode.has_at() {
                let (feat, logits) = self.forward_head(tape, binding, k, part_inputs[k], false, train)?;
                out.at_features.push(feat);
                out.at_logits.push(logits);
            }
        }
        out.h = if self.cfg.mode.has_mt() {
            tape.concat(&out.mt_features, 1)?
        } else {
            tape.concat(&out.at_features, 1)?
        };
        if self.cfg.mode.has_mt() && self.cfg.mode.has_at() {
            out.g = Some(tape.concat(&out.at_features, 1)?);
        }
        Ok(out)
    }

    /// Inference-time representation h, one row per image. Never consults
    /// maps or priors; evaluation mode throughout.
    pub fn extract_embedding(&mut self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let img = tape.leaf(images);
        let h = match self.cfg.mode {
            Mode::Baseline => {
                let f = self.forward_backbone(&mut tape, &binding, img, false)?;
                let parts = self.make_part_inputs(&mut tape, f, &PartLayout::Uniform)?;
                let mut feats = Vec::with_capacity(self.cfg.k);
                for (k, &p) in parts.iter().enumerate() {
                    let (feat, _) = self.forward_head(&mut tape, &binding, k, p, false, false)?;
                    feats.push(feat);
                }
                tape.concat(&feats, 1)?
            }
            _ => {
                let f = self.forward_backbone(&mut tape, &binding, img, false)?;
                let mut feats = Vec::with_capacity(self.cfg.k);
                for k in 0..self.cfg.k {
                    let (feat, _) = self.forward_head(&mut tape, &binding, k, f, true, false)?;
                    feats.push(feat);
                }
                tape.concat(&feats, 1)?
            }
        };
        let (n, d) = crate::tensor::dims2(tape.shape(h))?;
        let data = tape.value(h);
        Ok((0..n).map(|i| data[i * d..(i + 1) * d].to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_images(n: usize, cfg: &MpnConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * 3 * cfg.input_h * cfg.input_w;
        Tensor::new(
            &[n, 3, cfg.input_h, cfg.input_w],
            (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn backbone_produces_contracted_map_size() {
        let cfg = MpnConfig::micro(3);
        let mut model = MpnModel::new(cfg.clone(), 1).unwrap();
        let imgs = micro_images(2, &cfg, 9);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let img = tape.leaf(&imgs);
        let f = model.forward_backbone(&mut tape, &binding, img, false).unwrap();
        assert_eq!(tape.shape(f), &[2, 6, 6, 2]);
    }

    #[test]
    fn zeroed_final_bn_gamma_zeroes_feature_maps() {
        let cfg = MpnConfig::micro(3);
        let mut model = MpnModel::new(cfg.clone(), 1).unwrap();
        let pid = model.params.find("backbone.1.bn.gamma").unwrap();
        model.params.get_mut(pid).tensor.data_mut().fill(0.0);
        let imgs = Tensor::zeros(&[1, 3, cfg.input_h, cfg.input_w]);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let img = tape.leaf(&imgs);
        let f = model.forward_backbone(&mut tape, &binding, img, false).unwrap();
        assert!(tape.value(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_batch_halves_match_single_run() {
        let cfg = MpnConfig::micro(4);
        let mut model = MpnModel::new(cfg.clone(), 3).unwrap();
        let two = micro_images(2, &cfg, 11);
        let four_data: Vec<f64> = two.data().iter().chain(two.data()).copied().collect();
        let four = Tensor::new(&[4, 3, cfg.input_h, cfg.input_w], four_data).unwrap();
        let e2 = model.extract_embedding(&two).unwrap();
        let e4 = model.extract_embedding(&four).unwrap();
        assert_eq!(e2[0], e4[0]);
        assert_eq!(e2[1], e4[1]);
    }

    #[test]
    fn sharing_aliases_parameter_ids() {
        let model = MpnModel::new(MpnConfig::micro(3), 5).unwrap();
        for pair in model.heads() {
            let (mt, at) = (pair.mt.unwrap(), pair.at.unwrap());
            assert_eq!(mt.conv1_w, at.conv1_w);
            assert_eq!(mt.conv2_w, at.conv2_w);
            assert_eq!(mt.bn1, at.bn1);
            assert!(mt.ca.unwrap().squeeze_w == at.ca.unwrap().squeeze_w);
            assert_ne!(mt.cls_w, at.cls_w);
        }
    }

    #[test]
    fn no_sharing_keeps_branches_apart() {
        let mut cfg = MpnConfig::micro(3);
        cfg.share_conv1 = false;
        cfg.share_conv2 = false;
        cfg.share_ca = false;
        let model = MpnModel::new(cfg, 5).unwrap();
        for pair in model.heads() {
            let (mt, at) = (pair.mt.unwrap(), pair.at.unwrap());
            assert_ne!(mt.conv1_w, at.conv1_w);
            assert_ne!(mt.conv2_w, at.conv2_w);
        }
    }

    #[test]
    fn psa_branches_agree_on_identical_inputs() {
        let cfg = MpnConfig::micro(3);
        let mut model = MpnModel::new(cfg.clone(), 7).unwrap();
        let imgs = micro_images(2, &cfg, 13);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let img = tape.leaf(&imgs);
        let f = model.forward_backbone(&mut tape, &binding, img, false).unwrap();
        let parts = model.make_part_inputs(&mut tape, f, &PartLayout::Uniform).unwrap();
        let (mt_feat, _) = model.forward_head(&mut tape, &binding, 0, parts[0], true, false).unwrap();
        let (at_feat, _) = model.forward_head(&mut tape, &binding, 0, parts[0], false, false).unwrap();
        assert_eq!(tape.value(mt_feat), tape.value(at_feat));
    }

    #[test]
    fn baseline_constructs_no_mt_heads() {
        let mut cfg = MpnConfig::micro(3);
        cfg.mode = Mode::Baseline;
        cfg.share_conv1 = false;
        cfg.share_conv2 = false;
        cfg.share_ca = false;
        cfg.use_ca = false;
        let model = MpnModel::new(cfg, 2).unwrap();
        assert!(model.heads().iter().all(|p| p.mt.is_none() && p.at.is_some()));
        assert!(model.params.iter().all(|p| !p.name.contains(".mt.")));
    }

    #[test]
    fn use_ca_false_removes_the_block() {
        let mut cfg = MpnConfig::micro(3);
        cfg.use_ca = false;
        cfg.share_ca = false;
        let model = MpnModel::new(cfg, 2).unwrap();
        assert!(model.params.iter().all(|p| !p.name.contains(".ca.")));
        assert!(model.heads().iter().all(|p| p.mt.unwrap().ca.is_none()));
    }

    #[test]
    fn identical_images_share_embeddings() {
        let cfg = MpnConfig::micro(4);
        let mut model = MpnModel::new(cfg.clone(), 3).unwrap();
        let one = micro_images(1, &cfg, 21);
        let dup: Vec<f64> = one.data().iter().chain(one.data()).copied().collect();
        let both = Tensor::new(&[2, 3, cfg.input_h, cfg.input_w], dup).unwrap();
        let e = model.extract_embedding(&both).unwrap();
        assert_eq!(e[0], e[1]);
    }
}
