//! CPNet network assembly.
//!
//! Six contracting blocks (`contr_B1..contr_B6`), a bridge, five expanding
//! blocks (`exp_B1..exp_B5`) and a 1x1 sigmoid head. Each block ends in a
//! summation shortcut: contracting blocks add a channel-duplicated copy of
//! their input to the convolution output, expanding blocks add back the
//! concatenated skip tensor.
//!
//! Channel plan for base width `w`: `3 -> w -> 2w -> 4w -> 8w -> 16w -> 32w`
//! along the contracting path. The expanding block fed by level `s` upsamples
//! to that level's width, concatenates the level's pre-pool output and keeps
//! twice that width through its convolutions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{maxpool2, BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, ForwardCtx, Mode, Module, Parameter};
use crate::rng::mix_seed;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const INPUT_CHANNELS: usize = 3;
pub const CONTRACT_BLOCKS: usize = 6;
pub const EXPAND_BLOCKS: usize = 5;
/// Inputs must be divisible by `2^5`: five poolings along the contracting path.
pub const SIZE_MULTIPLE: usize = 32;
pub const DEFAULT_DROPOUT: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output channels of `contr_B1`.
    pub base_width: usize,
    pub dropout_rate: f64,
    /// Seeds weight initialization and dropout masks.
    pub seed: u64,
    /// `false` builds the plain U-Net baseline with identical convolutions.
    pub summation_shortcuts: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            dropout_rate: DEFAULT_DROPOUT,
            seed: 0,
            summation_shortcuts: true,
        }
    }
}

impl ModelConfig {
    pub fn with_base_width(base_width: usize) -> Self {
        Self {
            base_width,
            ..Self::default()
        }
    }

    pub fn baseline(&self) -> Self {
        Self {
            summation_shortcuts: false,
            ..self.clone()
        }
    }

    /// Width of contracting level `k` (1-based).
    pub fn level_width(&self, k: usize) -> usize {
        self.base_width << (k - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::InvalidArgument("base_width must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// How the shortcut operand is matched to the convolution output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shortcut {
    /// Shortcut has half the channels and is concatenated with itself.
    Duplicate,
    /// Shortcut already has the output's channel count.
    Identity,
}

/// `BN(ReLU(h + s))` where `s` is the shortcut, duplicated along channels
/// when `kind` is [`Shortcut::Duplicate`].
pub fn summation_block<T: Scalar>(
    tape: &mut Tape<T>,
    shortcut: Var,
    h: Var,
    kind: Shortcut,
    bn: &BatchNorm2d<T>,
    ctx: &mut ForwardCtx<T>,
) -> Result<Var> {
    let (sn, sc, sh, sw) = tape.value(shortcut)?.dims4()?;
    let (hn, hc, hh, hw) = tape.value(h)?.dims4()?;
    if (sn, sh, sw) != (hn, hh, hw) {
        return Err(Error::shape(format!(
            "summation block: shortcut (N={sn}, H={sh}, W={sw}) vs output (N={hn}, H={hh}, W={hw})"
        )));
    }
    let s = match kind {
        Shortcut::Duplicate => {
            if hc != 2 * sc {
                return Err(Error::shape(format!(
                    "summation block: output has {hc} channels, duplicated shortcut gives {}",
                    2 * sc
                )));
            }
            tape.concat_channels(&[shortcut, shortcut])?
        }
        Shortcut::Identity => {
            if hc != sc {
                return Err(Error::shape(format!(
                    "summation block: output has {hc} channels, shortcut has {sc}"
                )));
            }
            shortcut
        }
    };
    let sum = tape.add(h, s)?;
    let act = tape.relu(sum)?;
    bn.forward(tape, act, ctx)
}

/// conv3x3 -> ReLU -> BN
#[derive(Clone, Debug)]
pub struct ConvUnit<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvUnit<T> {
    fn new(name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::same3x3(format!("{name}.conv"), c_in, c_out, rng),
            bn: BatchNorm2d::new(format!("{name}.bn"), c_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = tape.relu(y)?;
        self.bn.forward(tape, y, ctx)
    }
}

impl<T: Scalar> Module<T> for ConvUnit<T> {
    fn parameters(&self) -> Vec<(String, &Parameter<T>)> {
        let mut p = self.conv.parameters();
        p.extend(self.bn.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut p = self.conv.parameters_mut();
        p.extend(self.bn.parameters_mut());
        p
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.bn.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.bn.buffers_mut()
    }
}

#[derive(Clone, Debug)]
pub struct ContractBlock<T: Scalar> {
    pub name: String,
    pub unit1: ConvUnit<T>,
    pub unit2: ConvUnit<T>,
    /// 1x1 projection shortcut; only `contr_B1`, whose RGB input cannot be
    /// duplicated into the block width.
    pub projection: Option<Conv2d<T>>,
    pub sum_bn: Option<BatchNorm2d<T>>,
    pub dropout: Option<Dropout>,
    pub pool: bool,
}

impl<T: Scalar> ContractBlock<T> {
    /// Returns `(pre-pool output used as skip, block output)`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<(Var, Var)> {
        let a = self.unit1.forward(tape, x, ctx)?;
        let h = self.unit2.forward(tape, a, ctx)?;
        let mut out = match &self.sum_bn {
            Some(bn) => match &self.projection {
                Some(proj) => {
                    let s = proj.forward(tape, x)?;
                    summation_block(tape, s, h, Shortcut::Identity, bn, ctx)?
                }
                None => summation_block(tape, x, h, Shortcut::Duplicate, bn, ctx)?,
            },
            None => h,
        };
        if let Some(drop) = &self.dropout {
            out = drop.forward(tape, out, ctx)?;
        }
        let next = if self.pool { maxpool2(tape, out)? } else { out };
        Ok((out, next))
    }
}

impl<T: Scalar> Module<T> for ContractBlock<T> {
    fn parameters(&self) -> Vec<(String, &Parameter<T>)> {
        let mut p = self.unit1.parameters();
        p.extend(self.unit2.parameters());
        if let Some(proj) = &self.projection {
            p.extend(proj.parameters());
        }
        if let Some(bn) = &self.sum_bn {
            p.extend(bn.parameters());
        }
        p
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut p = self.unit1.parameters_mut();
        p.extend(self.unit2.parameters_mut());
        if let Some(proj) = &mut self.projection {
            p.extend(proj.parameters_mut());
        }
        if let Some(bn) = &mut self.sum_bn {
            p.extend(bn.parameters_mut());
        }
        p
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut b = self.unit1.buffers();
        b.extend(self.unit2.buffers());
        if let Some(bn) = &self.sum_bn {
            b.extend(bn.buffers());
        }
        b
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut b = self.unit1.buffers_mut();
        b.extend(self.unit2.buffers_mut());
        if let Some(bn) = &mut self.sum_bn {
            b.extend(bn.buffers_mut());
        }
        b
    }
}

#[derive(Clone, Debug)]
pub struct ExpandBlock<T: Scalar> {
    pub name: String,
    pub up: ConvTranspose2d<T>,
    pub unit1: ConvUnit<T>,
    pub unit2: ConvUnit<T>,
    pub sum_bn: Option<BatchNorm2d<T>>,
}

impl<T: Scalar> ExpandBlock<T> {
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, skip: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let up = self.up.forward(tape, x)?;
        let z = tape.concat_channels(&[skip, up])?;
        let a = self.unit1.forward(tape, z, ctx)?;
        let h = self.unit2.forward(tape, a, ctx)?;
        match &self.sum_bn {
            Some(bn) => summation_block(tape, z, h, Shortcut::Identity, bn, ctx),
            None => Ok(h),
        }
    }
}

impl<T: Scalar> Module<T> for ExpandBlock<T> {
    fn parameters(&self) -> Vec<(String, &Parameter<T>)> {
        let mut p = self.up.parameters();
        p.extend(self.unit1.parameters());
        p.extend(self.unit2.parameters());
        if let Some(bn) = &self.sum_bn {
            p.extend(bn.parameters());
        }
        p
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut p = self.up.parameters_mut();
        p.extend(self.unit1.parameters_mut());
        p.extend(self.unit2.parameters_mut());
        if let Some(bn) = &mut self.sum_bn {
            p.extend(bn.parameters_mut());
        }
        p
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut b = self.unit1.buffers();
        b.extend(self.unit2.buffers());
        if let Some(bn) = &self.sum_bn {
            b.extend(bn.buffers());
        }
        b
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut b = self.unit1.buffers_mut();
        b.extend(self.unit2.buffers_mut());
        if let Some(bn) = &mut self.sum_bn {
            b.extend(bn.buffers_mut());
        }
        b
    }
}

#[derive(Clone, Debug)]
pub struct CpnetModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub contract: Vec<ContractBlock<T>>,
    pub bridge: ConvUnit<T>,
    pub expand: Vec<ExpandBlock<T>>,
    pub head: Conv2d<T>,
    pub mode: Mode,
    /// Number of training-mode forwards run through [`CpnetModel::run`].
    pub step: u64,
}

impl<T: Scalar> CpnetModel<T> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0xC0DE]));
        let shortcuts = config.summation_shortcuts;
        let mut contract = Vec::with_capacity(CONTRACT_BLOCKS);
        let mut c_in = INPUT_CHANNELS;
        for k in 1..=CONTRACT_BLOCKS {
            let name = format!("contr_B{k}");
            let width = config.level_width(k);
            let unit1 = ConvUnit::new(&format!("{name}.unit1"), c_in, width, &mut rng);
            let unit2 = ConvUnit::new(&format!("{name}.unit2"), width, width, &mut rng);
            let projection = (shortcuts && k == 1)
                .then(|| Conv2d::new(format!("{name}.proj"), c_in, width, 1, 1, 0, &mut rng));
            let sum_bn = shortcuts.then(|| BatchNorm2d::new(format!("{name}.sum_bn"), width));
            let dropout = if k == CONTRACT_BLOCKS {
                Some(Dropout::new(
                    format!("{name}.dropout"),
                    config.dropout_rate,
                    mix_seed(&[config.seed, 0xD0]),
                )?)
            } else {
                None
            };
            contract.push(ContractBlock {
                name,
                unit1,
                unit2,
                projection,
                sum_bn,
                dropout,
                pool: k < CONTRACT_BLOCKS,
            });
            c_in = width;
        }
        let deepest = config.level_width(CONTRACT_BLOCKS);
        let bridge = ConvUnit::new("bridge", deepest, deepest, &mut rng);
        let mut expand = Vec::with_capacity(EXPAND_BLOCKS);
        let mut c_in = deepest;
        for j in 1..=EXPAND_BLOCKS {
            let name = format!("exp_B{j}");
            let skip_width = config.level_width(CONTRACT_BLOCKS - j);
            let width = 2 * skip_width;
            expand.push(ExpandBlock {
                up: ConvTranspose2d::upsample2x(format!("{name}.up"), c_in, skip_width, &mut rng),
                unit1: ConvUnit::new(&format!("{name}.unit1"), width, width, &mut rng),
                unit2: ConvUnit::new(&format!("{name}.unit2"), width, width, &mut rng),
                sum_bn: shortcuts.then(|| BatchNorm2d::new(format!("{name}.sum_bn"), width)),
                name,
            });
            c_in = width;
        }
        let head = Conv2d::new("head.conv", c_in, 1, 1, 1, 0, &mut rng);
        Ok(Self {
            config: config.clone(),
            contract,
            bridge,
            expand,
            head,
            mode: Mode::Train,
            step: 0,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn check_input(shape: &[usize]) -> Result<()> {
        let (c, h, w) = match shape {
            [_, c, h, w] => (*c, *h, *w),
            _ => return Err(Error::shape(format!("expected (N, 3, H, W) input, got {shape:?}"))),
        };
        if c != INPUT_CHANNELS {
            return Err(Error::shape(format!("expected 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::shape(format!(
                "spatial dims must be divisible by 32, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Forward pass returning per-pixel probabilities `(N, 1, H, W)`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        Self::check_input(tape.value(x)?.shape())?;
        let mut skips = Vec::with_capacity(CONTRACT_BLOCKS);
        let mut cur = x;
        for block in &self.contract {
            let (skip, next) = block.forward(tape, cur, ctx)?;
            skips.push(skip);
            cur = next;
        }
        cur = self.bridge.forward(tape, cur, ctx)?;
        for (j, block) in self.expand.iter().enumerate() {
            let skip = skips[CONTRACT_BLOCKS - 2 - j];
            cur = block.forward(tape, cur, skip, ctx)?;
        }
        let logits = self.head.forward(tape, cur)?;
        tape.sigmoid(logits)
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, ctx: &mut ForwardCtx<T>) {
        let stats = ctx.take_batch_stats();
        if stats.is_empty() {
            return;
        }
        let mut bns = self.batch_norms_mut();
        for (name, s) in &stats {
            if let Some(bn) = bns.iter_mut().find(|bn| &bn.name == name) {
                bn.apply_stats(s);
            }
        }
    }

    /// Forward in the model's current mode. In training mode running
    /// statistics are updated and the dropout step advances.
    pub fn run(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut ctx = ForwardCtx::new(self.mode, self.step);
        let y = self.forward(tape, x, &mut ctx)?;
        if self.mode == Mode::Train {
            self.update_running_stats(&mut ctx);
            self.step += 1;
        }
        Ok(y)
    }

    /// Eval-mode prediction without gradient tracking.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let mut ctx = ForwardCtx::eval();
        let y = self.forward(&mut tape, xv, &mut ctx)?;
        Ok(tape.value(y)?.clone())
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut out = Vec::new();
        for b in &mut self.contract {
            out.push(&mut b.unit1.bn);
            out.push(&mut b.unit2.bn);
            if let Some(bn) = &mut b.sum_bn {
                out.push(bn);
            }
        }
        out.push(&mut self.bridge.bn);
        for b in &mut self.expand {
            out.push(&mut b.unit1.bn);
            out.push(&mut b.unit2.bn);
            if let Some(bn) = &mut b.sum_bn {
                out.push(bn);
            }
        }
        out
    }

    /// Total trainable scalars (weights, biases, gamma, beta).
    pub fn count_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Copies gradients of the last backward pass into the parameters.
    pub fn collect_grads(&mut self, tape: &Tape<T>) {
        for (name, p) in self.parameters_mut() {
            p.grad = tape.param_grad(&name).cloned();
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.parameters_mut() {
            p.grad = None;
        }
    }

    /// Converts all parameters and buffers to another scalar type.
    pub fn cast<U: Scalar>(&self) -> CpnetModel<U> {
        let mut out = CpnetModel::<U>::build(&self.config).expect("config already validated");
        let src: Vec<(String, Tensor<U>)> = self
            .parameters()
            .into_iter()
            .map(|(n, p)| (n, p.value.cast()))
            .chain(self.buffers().into_iter().map(|(n, t)| (n, t.cast())))
            .collect();
        for ((_, dst), (_, v)) in out.parameters_mut().into_iter().zip(&src) {
            dst.value = v.clone();
        }
        let offset = self.parameters().len();
        for ((_, dst), (_, v)) in out.buffers_mut().into_iter().zip(&src[offset..]) {
            *dst = v.clone();
        }
        out.mode = self.mode;
        out.step = self.step;
        out
    }
}

impl<T: Scalar> Module<T> for CpnetModel<T> {
    fn parameters(&self) -> Vec<(String, &Parameter<T>)> {
        let mut p = Vec::new();
        for b in &self.contract {
            p.extend(b.parameters());
        }
        p.extend(self.bridge.parameters());
        for b in &self.expand {
            p.extend(b.parameters());
        }
        p.extend(self.head.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut p = Vec::new();
        for b in &mut self.contract {
            p.extend(b.parameters_mut());
        }
        p.extend(self.bridge.parameters_mut());
        for b in &mut self.expand {
            p.extend(b.parameters_mut());
        }
        p.extend(self.head.parameters_mut());
        p
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for b in &self.contract {
            out.extend(b.buffers());
        }
        out.extend(self.bridge.buffers());
        for b in &self.expand {
            out.extend(b.buffers());
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for b in &mut self.contract {
            out.extend(b.buffers_mut());
        }
        out.extend(self.bridge.buffers_mut());
        for b in &mut self.expand {
            out.extend(b.buffers_mut());
        }
        out
    }
}
