//! Model assembly: stage descriptions, parameter storage, seeded
//! initialization, and the forward pass.
//!
//! A model is a flat, named parameter store plus a stage list. The forward
//! pass rebuilds the graph on a fresh tape every call, leafing trainable
//! parameters so gradients can be taken, and records each stage's output
//! feature map so saliency methods can target any stage by name.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::{
    self, Act, AttentionVars, BnState, BnUpdate, ConvUnit, EncoderLayerVars,
    EncoderStyle, FfnVars, IrbVars, MobileVitBlockVars, MobileVitV2BlockVars, Mode,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One stage of the backbone. Spatial stride-2 stages halve the resolution;
/// everything else preserves it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Convolution + batch norm + SiLU. Padding is `kernel / 2`.
    Conv { name: String, out: usize, kernel: usize, stride: usize },
    /// Channel-preserving inverted residual bottleneck.
    InvertedResidual { name: String, expansion: usize },
    /// Softmax-attention transformer block: local convs, patch tokens of
    /// width `patch^2 * token_channels`, `depth` encoder layers, fusion conv
    /// back to the input width.
    Vit { name: String, token_channels: usize, depth: usize, heads: usize, patch: usize, ffn_mult: usize },
    /// Linear-attention transformer block: inverted residual, patch tokens of
    /// width `patch^2 * C`, `depth` encoder layers projecting to `attn_dim`
    /// inside attention, 1x1 fusion plus residual.
    VitV2 { name: String, expansion: usize, attn_dim: usize, depth: usize, patch: usize, ffn_mult: usize },
}

impl Stage {
    pub fn name(&self) -> &str {
        match self {
            Stage::Conv { name, .. }
            | Stage::InvertedResidual { name, .. }
            | Stage::Vit { name, .. }
            | Stage::VitV2 { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Architecture tag, e.g. `xs_toy` or `v2_toy`.
    pub arch: String,
    pub num_classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub stages: Vec<Stage>,
    pub encoder_style: EncoderStyle,
    /// Fuse on `concat(input, global)` instead of the global features alone
    /// in softmax-attention blocks.
    pub fusion_concat_input: bool,
}

fn s(v: &str) -> String {
    v.to_string()
}

/// Small softmax-attention model for 3-channel images.
pub fn xs_toy(num_classes: usize, image_size: usize) -> ModelConfig {
    ModelConfig {
        arch: s("xs_toy"),
        num_classes,
        in_channels: 3,
        image_size,
        stages: vec![
            Stage::Conv { name: s("stem"), out: 16, kernel: 3, stride: 2 },
            Stage::InvertedResidual { name: s("irb1"), expansion: 2 },
            Stage::Conv { name: s("down1"), out: 32, kernel: 3, stride: 2 },
            Stage::Vit { name: s("vit1"), token_channels: 16, depth: 2, heads: 4, patch: 2, ffn_mult: 2 },
            Stage::Conv { name: s("down2"), out: 64, kernel: 3, stride: 2 },
            Stage::Vit { name: s("vit2"), token_channels: 16, depth: 2, heads: 4, patch: 2, ffn_mult: 2 },
        ],
        encoder_style: EncoderStyle::Single,
        fusion_concat_input: false,
    }
}

/// Small linear-attention model for 3-channel images.
pub fn v2_toy(num_classes: usize, image_size: usize) -> ModelConfig {
    ModelConfig {
        arch: s("v2_toy"),
        num_classes,
        in_channels: 3,
        image_size,
        stages: vec![
            Stage::Conv { name: s("stem"), out: 16, kernel: 3, stride: 2 },
            Stage::InvertedResidual { name: s("irb1"), expansion: 2 },
            Stage::Conv { name: s("down1"), out: 32, kernel: 3, stride: 2 },
            Stage::VitV2 { name: s("vit1"), expansion: 2, attn_dim: 48, depth: 2, patch: 2, ffn_mult: 2 },
            Stage::Conv { name: s("down2"), out: 64, kernel: 3, stride: 2 },
            Stage::VitV2 { name: s("vit2"), expansion: 2, attn_dim: 48, depth: 2, patch: 2, ffn_mult: 2 },
        ],
        encoder_style: EncoderStyle::Single,
        fusion_concat_input: false,
    }
}

/// Look up a preset by its architecture tag.
pub fn preset(arch: &str, num_classes: usize, image_size: usize) -> Result<ModelConfig> {
    match arch {
        "xs_toy" => Ok(xs_toy(num_classes, image_size)),
        "v2_toy" => Ok(v2_toy(num_classes, image_size)),
        other => Err(Error::Invalid(format!(
            "unknown architecture '{}', expected xs_toy or v2_toy",
            other
        ))),
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Tensor,
    pub trainable: bool,
}

/// Flat, name-keyed parameter and buffer storage. Iteration order is the
/// lexicographic name order, which keeps initialization, checkpoints, and
/// optimizer state aligned.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) {
        self.entries.insert(name.to_string(), ParamEntry { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter '{}'", name)))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    /// Replace a value, keeping the trainable flag. The shape must match.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter '{}'", name)))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!(
                    "'{}' has shape {:?}, refusing {:?}",
                    name,
                    entry.value.shape(),
                    value.shape()
                ),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Everything produced by one forward pass. The tape owns the graph; the
/// `Var` handles index into it.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    pub probs: Var,
    /// Mean cross-entropy, present when labels were supplied.
    pub loss: Option<Var>,
    /// Tape handle for every trainable parameter, keyed by name.
    pub param_vars: BTreeMap<String, Var>,
    /// Stage outputs in order, for saliency targets.
    pub activations: Vec<(String, Var)>,
    /// Batch statistics observed by batch-norm layers (train mode only).
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

struct StageShape {
    c: usize,
    h: usize,
    w: usize,
}

fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    (size + 2 * (kernel / 2) - kernel) / stride + 1
}

impl Model {
    /// Build a model with deterministic, seed-driven initialization:
    /// weights are uniform on `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases and
    /// norm shifts start at zero, norm scales at one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        validate(&config)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut init = Init { rng: &mut rng, params: &mut params };

        let mut cur = StageShape { c: config.in_channels, h: config.image_size, w: config.image_size };
        for stage in &config.stages {
            match stage {
                Stage::Conv { name, out, kernel, stride } => {
                    init.conv_bn(name, cur.c, *out, *kernel);
                    cur = StageShape {
                        c: *out,
                        h: conv_out(cur.h, *kernel, *stride),
                        w: conv_out(cur.w, *kernel, *stride),
                    };
                }
                Stage::InvertedResidual { name, expansion } => {
                    init.irb(name, cur.c, *expansion);
                }
                Stage::Vit { name, token_channels, depth, patch, ffn_mult, .. } => {
                    let d = patch * patch * token_channels;
                    init.conv_bn(&format!("{name}.local_spatial"), cur.c, cur.c, 3);
                    init.conv_bn(&format!("{name}.local_project"), cur.c, *token_channels, 1);
                    for l in 0..*depth {
                        init.encoder(&format!("{name}.enc{l}"), d, d, d * ffn_mult, config.encoder_style);
                    }
                    let fusion_in = if config.fusion_concat_input { cur.c + token_channels } else { *token_channels };
                    init.conv_bn(&format!("{name}.fusion"), fusion_in, cur.c, 3);
                }
                Stage::VitV2 { name, expansion, attn_dim, depth, patch, ffn_mult } => {
                    let d = patch * patch * cur.c;
                    init.irb(&format!("{name}.irb"), cur.c, *expansion);
                    for l in 0..*depth {
                        init.encoder(&format!("{name}.enc{l}"), d, *attn_dim, d * ffn_mult, config.encoder_style);
                    }
                    init.conv_bn(&format!("{name}.fusion"), cur.c, cur.c, 1);
                }
            }
        }
        init.linear("head", cur.c, config.num_classes);
        Ok(Model { config, params })
    }

    /// Total entry count vs. optimizer-visible count, in scalars. The total
    /// includes batch-norm running statistics; the trainable count does not.
    pub fn count_parameters(&self) -> (usize, usize) {
        let mut total = 0;
        let mut trainable = 0;
        for (_, e) in self.params.iter() {
            total += e.value.numel();
            if e.trainable {
                trainable += e.value.numel();
            }
        }
        (total, trainable)
    }

    /// Run the network on a `(B, C, H, W)` batch. With labels, also builds
    /// the mean cross-entropy loss node.
    pub fn forward(&self, images: &Tensor, labels: Option<&[usize]>, mode: Mode) -> Result<ForwardPass> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        self.forward_on(&mut tape, x, labels, mode).map(|parts| ForwardPass {
            tape,
            logits: parts.logits,
            probs: parts.probs,
            loss: parts.loss,
            param_vars: parts.param_vars,
            activations: parts.activations,
            bn_updates: parts.bn_updates,
        })
    }

    /// Eval-mode class probabilities as a plain `(B, K)` tensor.
    pub fn predict_probs(&self, images: &Tensor) -> Result<Tensor> {
        let pass = self.forward(images, None, Mode::Eval)?;
        Ok(pass.tape.value(pass.probs).clone())
    }

    /// Forward on a caller-owned tape with a caller-provided input handle.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        x: Var,
        labels: Option<&[usize]>,
        mode: Mode,
    ) -> Result<ForwardParts> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!(
                    "expected (B,{},H,W) input, got {:?}",
                    self.config.in_channels, xs
                ),
            ));
        }
        let mut ctx = Bind { model: self, tape, param_vars: BTreeMap::new() };
        let mut cur = x;
        let mut activations = Vec::new();
        let mut updates = Vec::new();

        for stage in &self.config.stages {
            cur = match stage {
                Stage::Conv { name, stride, kernel, .. } => {
                    let unit = ctx.conv_bn(name, *stride, kernel / 2, 1, Act::Silu)?;
                    nn::conv_unit(ctx.tape, cur, &unit, mode, &mut updates)?
                }
                Stage::InvertedResidual { name, .. } => {
                    let vars = ctx.irb(name)?;
                    nn::inverted_residual(ctx.tape, cur, &vars, mode, &mut updates)?
                }
                Stage::Vit { name, depth, heads, patch, .. } => {
                    let vars = MobileVitBlockVars {
                        local_spatial: ctx.conv_bn(&format!("{name}.local_spatial"), 1, 1, 1, Act::Silu)?,
                        local_project: ctx.conv_bn(&format!("{name}.local_project"), 1, 0, 1, Act::Silu)?,
                        encoders: (0..*depth)
                            .map(|l| ctx.encoder(&format!("{name}.enc{l}")))
                            .collect::<Result<Vec<_>>>()?,
                        fusion: ctx.conv_bn(&format!("{name}.fusion"), 1, 1, 1, Act::Silu)?,
                        patch: *patch,
                        heads: *heads,
                        style: self.config.encoder_style,
                        fusion_concat_input: self.config.fusion_concat_input,
                    };
                    nn::mobilevit_block(ctx.tape, cur, &vars, mode, &mut updates)?
                }
                Stage::VitV2 { name, depth, patch, .. } => {
                    let vars = MobileVitV2BlockVars {
                        irb: ctx.irb(&format!("{name}.irb"))?,
                        encoders: (0..*depth)
                            .map(|l| ctx.encoder(&format!("{name}.enc{l}")))
                            .collect::<Result<Vec<_>>>()?,
                        fusion: ctx.conv_bn(&format!("{name}.fusion"), 1, 0, 1, Act::Linear)?,
                        patch: *patch,
                        style: self.config.encoder_style,
                    };
                    nn::mobilevit_v2_block(ctx.tape, cur, &vars, mode, &mut updates)?
                }
            };
            activations.push((stage.name().to_string(), cur));
        }

        let pooled = nn::global_avg_pool(ctx.tape, cur)?;
        let w = ctx.leaf("head.weight")?;
        let b = ctx.leaf("head.bias")?;
        let wt = ctx.tape.permute(w, &[1, 0])?;
        let scores = ctx.tape.matmul(pooled, wt)?;
        let logits = ctx.tape.add(scores, b)?;
        let probs = ctx.tape.softmax(logits)?;
        let loss = match labels {
            Some(y) => Some(ctx.tape.sparse_cross_entropy(logits, y)?),
            None => None,
        };
        let param_vars = ctx.param_vars;
        Ok(ForwardParts { logits, probs, loss, param_vars, activations, bn_updates: updates })
    }

    /// Fold fresh batch statistics into the running estimates with momentum
    /// `BN_MOMENTUM`, matching the usual exponential moving average.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        let m = nn::BN_MOMENTUM;
        for u in updates {
            for (suffix, fresh) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let name = format!("{}.{}", u.key, suffix);
                let old = self.params.get(&name)?;
                let blended = Tensor::from_fn(old.shape(), |ix| {
                    (1.0 - m) * old.at(ix) + m * fresh.at(ix)
                });
                self.params.set(&name, blended)?;
            }
        }
        Ok(())
    }

    /// Names of the stage feature maps in forward order.
    pub fn stage_names(&self) -> Vec<String> {
        self.config.stages.iter().map(|s| s.name().to_string()).collect()
    }
}

pub struct ForwardParts {
    pub logits: Var,
    pub probs: Var,
    pub loss: Option<Var>,
    pub param_vars: BTreeMap<String, Var>,
    pub activations: Vec<(String, Var)>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Validates stage shapes before any parameter is allocated, so indivisible
/// configurations fail with the offending stage named.
fn validate(config: &ModelConfig) -> Result<()> {
    if config.num_classes < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 classes, got {}",
            config.num_classes
        )));
    }
    let mut cur = StageShape { c: config.in_channels, h: config.image_size, w: config.image_size };
    for stage in &config.stages {
        match stage {
            Stage::Conv { out, kernel, stride, .. } => {
                cur = StageShape {
                    c: *out,
                    h: conv_out(cur.h, *kernel, *stride),
                    w: conv_out(cur.w, *kernel, *stride),
                };
            }
            Stage::InvertedResidual { .. } => {}
            Stage::Vit { name, token_channels, heads, patch, .. } => {
                if cur.h % patch != 0 || cur.w % patch != 0 {
                    return Err(Error::Invalid(format!(
                        "stage '{}': spatial {}x{} not divisible by patch size {}",
                        name, cur.h, cur.w, patch
                    )));
                }
                let d = patch * patch * token_channels;
                if *heads == 0 || d % heads != 0 {
                    return Err(Error::Invalid(format!(
                        "stage '{}': token width {} not divisible by {} heads",
                        name, d, heads
                    )));
                }
            }
            Stage::VitV2 { name, patch, .. } => {
                if cur.h % patch != 0 || cur.w % patch != 0 {
                    return Err(Error::Invalid(format!(
                        "stage '{}': spatial {}x{} not divisible by patch size {}",
                        name, cur.h, cur.w, patch
                    )));
                }
            }
        }
        if cur.h == 0 || cur.w == 0 {
            return Err(Error::Invalid(format!(
                "stage '{}': spatial size collapsed to zero",
                stage.name()
            )));
        }
    }
    Ok(())
}

/// Parameter initialization walker. Draw order is the stage order, so a seed
/// pins every weight.
struct Init<'a> {
    rng: &'a mut ChaCha20Rng,
    params: &'a mut ParamStore,
}

impl Init<'_> {
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("init values are finite")
    }

    fn conv_bn(&mut self, prefix: &str, c_in: usize, c_out: usize, kernel: usize) {
        self.conv_bn_grouped(prefix, c_in, c_out, kernel, 1);
    }

    fn conv_bn_grouped(&mut self, prefix: &str, c_in: usize, c_out: usize, kernel: usize, groups: usize) {
        let w = self.uniform(&[c_out, c_in / groups, kernel, kernel], (c_in / groups) * kernel * kernel);
        self.params.insert(&format!("{prefix}.conv.weight"), w, true);
        self.params.insert(&format!("{prefix}.bn.gamma"), Tensor::ones(&[c_out]), true);
        self.params.insert(&format!("{prefix}.bn.beta"), Tensor::zeros(&[c_out]), true);
        self.params.insert(&format!("{prefix}.bn.running_mean"), Tensor::zeros(&[c_out]), false);
        self.params.insert(&format!("{prefix}.bn.running_var"), Tensor::ones(&[c_out]), false);
    }

    fn irb(&mut self, prefix: &str, c: usize, expansion: usize) {
        let mid = c * expansion;
        self.conv_bn(&format!("{prefix}.expand"), c, mid, 1);
        self.conv_bn_grouped(&format!("{prefix}.depthwise"), mid, mid, 3, mid);
        self.conv_bn(&format!("{prefix}.project"), mid, c, 1);
    }

    fn encoder(&mut self, prefix: &str, d_in: usize, d_attn: usize, hidden: usize, style: EncoderStyle) {
        self.params.insert(&format!("{prefix}.ln1.gamma"), Tensor::ones(&[d_in]), true);
        self.params.insert(&format!("{prefix}.ln1.beta"), Tensor::zeros(&[d_in]), true);
        if style == EncoderStyle::PreNorm {
            self.params.insert(&format!("{prefix}.ln2.gamma"), Tensor::ones(&[d_in]), true);
            self.params.insert(&format!("{prefix}.ln2.beta"), Tensor::zeros(&[d_in]), true);
        }
        for (name, rows, cols) in [
            ("attn.wq", d_in, d_attn),
            ("attn.wk", d_in, d_attn),
            ("attn.wv", d_in, d_attn),
            ("attn.wo", d_attn, d_in),
        ] {
            let w = self.uniform(&[rows, cols], rows);
            self.params.insert(&format!("{prefix}.{name}"), w, true);
        }
        let w1 = self.uniform(&[d_in, hidden], d_in);
        self.params.insert(&format!("{prefix}.ffn.w1"), w1, true);
        self.params.insert(&format!("{prefix}.ffn.b1"), Tensor::zeros(&[hidden]), true);
        let w2 = self.uniform(&[hidden, d_in], hidden);
        self.params.insert(&format!("{prefix}.ffn.w2"), w2, true);
        self.params.insert(&format!("{prefix}.ffn.b2"), Tensor::zeros(&[d_in]), true);
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        let w = self.uniform(&[d_out, d_in], d_in);
        self.params.insert(&format!("{prefix}.weight"), w, true);
        self.params.insert(&format!("{prefix}.bias"), Tensor::zeros(&[d_out]), true);
    }
}

/// Binds stored parameters onto a tape, leafing each trainable tensor once.
struct Bind<'a> {
    model: &'a Model,
    tape: &'a mut Tape,
    param_vars: BTreeMap<String, Var>,
}

impl Bind<'_> {
    fn leaf(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.param_vars.get(name) {
            return Ok(*v);
        }
        let t = self.model.params.get(name)?;
        let v = self.tape.leaf(t);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv_bn(&mut self, prefix: &str, stride: usize, padding: usize, groups: usize, act: Act) -> Result<ConvUnit> {
        let weight = self.leaf(&format!("{prefix}.conv.weight"))?;
        let gamma = self.leaf(&format!("{prefix}.bn.gamma"))?;
        let beta = self.leaf(&format!("{prefix}.bn.beta"))?;
        let mean = self.model.params.get(&format!("{prefix}.bn.running_mean"))?.clone();
        let var = self.model.params.get(&format!("{prefix}.bn.running_var"))?.clone();
        Ok(ConvUnit {
            weight,
            bias: None,
            stride,
            padding,
            groups,
            bn: Some(BnState { gamma, beta, mean, var, key: format!("{prefix}.bn") }),
            act,
        })
    }

    fn irb(&mut self, prefix: &str) -> Result<IrbVars> {
        let mid = self.model.params.get(&format!("{prefix}.expand.conv.weight"))?.shape()[0];
        Ok(IrbVars {
            expand: self.conv_bn(&format!("{prefix}.expand"), 1, 0, 1, Act::Silu)?,
            depthwise: self.conv_bn(&format!("{prefix}.depthwise"), 1, 1, mid, Act::Silu)?,
            project: self.conv_bn(&format!("{prefix}.project"), 1, 0, 1, Act::Linear)?,
        })
    }

    fn encoder(&mut self, prefix: &str) -> Result<EncoderLayerVars> {
        let ln2 = if self.model.config.encoder_style == EncoderStyle::PreNorm {
            Some((
                self.leaf(&format!("{prefix}.ln2.gamma"))?,
                self.leaf(&format!("{prefix}.ln2.beta"))?,
            ))
        } else {
            None
        };
        Ok(EncoderLayerVars {
            ln1_gamma: self.leaf(&format!("{prefix}.ln1.gamma"))?,
            ln1_beta: self.leaf(&format!("{prefix}.ln1.beta"))?,
            ln2,
            attn: AttentionVars {
                wq: self.leaf(&format!("{prefix}.attn.wq"))?,
                wk: self.leaf(&format!("{prefix}.attn.wk"))?,
                wv: self.leaf(&format!("{prefix}.attn.wv"))?,
                wo: self.leaf(&format!("{prefix}.attn.wo"))?,
            },
            ffn: FfnVars {
                w1: self.leaf(&format!("{prefix}.ffn.w1"))?,
                b1: self.leaf(&format!("{prefix}.ffn.b1"))?,
                w2: self.leaf(&format!("{prefix}.ffn.w2"))?,
                b2: self.leaf(&format!("{prefix}.ffn.b2"))?,
            },
        })
    }
}

/// A stripped-down two-stage config for fast tests.
pub fn micro_config(num_classes: usize, image_size: usize) -> ModelConfig {
    ModelConfig {
        arch: s("micro"),
        num_classes,
        in_channels: 2,
        image_size,
        stages: vec![
            Stage::Conv { name: s("stem"), out: 4, kernel: 3, stride: 1 },
            Stage::Vit { name: s("vit1"), token_channels: 2, depth: 1, heads: 2, patch: 2, ffn_mult: 2 },
        ],
        encoder_style: EncoderStyle::Single,
        fusion_concat_input: false,
    }
}
