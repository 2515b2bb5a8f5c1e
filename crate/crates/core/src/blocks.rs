//! Backbone building blocks: plain conv, residual, depthwise-separable,
//! depthwise-separable + residual, and MBConv with squeeze-excitation.
//!
//! Blocks are built against a [`ParamStore`] (trainable weights) and a
//! [`StateStore`] (batch-norm running statistics) and replay themselves
//! onto a fresh [`Tape`] every forward pass.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockFamily {
    Plain,
    Residual,
    Dsc,
    DscResidual,
    MbconvSe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub family: BlockFamily,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_expansion")]
    pub expansion: f64,
    #[serde(default = "default_se_ratio")]
    pub se_ratio: f64,
}

fn default_kernel() -> usize {
    3
}
fn default_expansion() -> f64 {
    6.0
}
fn default_se_ratio() -> f64 {
    0.25
}

impl BlockSpec {
    pub fn new(family: BlockFamily, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        BlockSpec {
            family,
            in_channels,
            out_channels,
            stride,
            kernel: default_kernel(),
            expansion: default_expansion(),
            se_ratio: default_se_ratio(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::InvalidConfig(format!(
                "block stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.expansion < 1.0 {
            return Err(Error::InvalidConfig("expansion must be >= 1".into()));
        }
        if !(self.se_ratio > 0.0 && self.se_ratio <= 1.0) {
            return Err(Error::InvalidConfig("se_ratio must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Trainable parameters, addressed by index.
#[derive(Default)]
pub struct ParamStore {
    values: Vec<Tensor4>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4) -> usize {
        self.values.push(value);
        self.names.push(name.into());
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor4 {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor4 {
        &mut self.values[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn values(&self) -> &[Tensor4] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor4] {
        &mut self.values
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Non-trainable state (running mean/var per norm layer).
#[derive(Default)]
pub struct StateStore {
    values: Vec<Tensor4>,
    names: Vec<String>,
}

impl StateStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4) -> usize {
        self.values.push(value);
        self.names.push(name.into());
        self.values.len() - 1
    }

    pub fn get(&self, idx: usize) -> &Tensor4 {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor4 {
        &mut self.values[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Tensor4] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor4] {
        &mut self.values
    }
}

/// Everything a block needs to build itself.
pub struct Builder<'a> {
    pub params: &'a mut ParamStore,
    pub state: &'a mut StateStore,
    pub rng: &'a mut ChaCha8Rng,
    pub norm: bool,
}

impl<'a> Builder<'a> {
    pub(crate) fn he_tensor(&mut self, shape: (usize, usize, usize, usize), fan_in: usize) -> Tensor4 {
        let std = (2.0 / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        Array4::from_shape_fn(shape, |_| {
            // Box-Muller from two uniforms; rng consumption order is fixed.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    pub(crate) fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, stride: usize) -> ConvLayer {
        let w = self.he_tensor((k, k, cin, cout), k * k * cin);
        ConvLayer {
            w: self.params.add(format!("{name}.w"), w),
            stride,
        }
    }

    pub(crate) fn depthwise(&mut self, name: &str, k: usize, c: usize, stride: usize) -> DepthwiseLayer {
        let w = self.he_tensor((k, k, c, 1), k * k);
        DepthwiseLayer {
            w: self.params.add(format!("{name}.w"), w),
            stride,
        }
    }

    pub(crate) fn norm(&mut self, name: &str, c: usize) -> Option<NormLayer> {
        if !self.norm {
            return None;
        }
        let gamma = self.params.add(format!("{name}.gamma"), Array4::ones((1, 1, 1, c)));
        let beta = self.params.add(format!("{name}.beta"), Array4::zeros((1, 1, 1, c)));
        let mean = self.state.add(format!("{name}.running_mean"), Array4::zeros((1, 1, 1, c)));
        let var = self.state.add(format!("{name}.running_var"), Array4::ones((1, 1, 1, c)));
        Some(NormLayer {
            gamma,
            beta,
            running_mean: mean,
            running_var: var,
        })
    }

    pub fn dense(&mut self, name: &str, cin: usize, cout: usize) -> DenseLayer {
        let w = self.he_tensor((1, 1, cin, cout), cin);
        DenseLayer {
            w: self.params.add(format!("{name}.w"), w),
            b: self.params.add(format!("{name}.b"), Array4::zeros((1, 1, 1, cout))),
        }
    }
}

/// Forward-pass context: tape plus parameter/state access. `train` selects
/// batch statistics (and running-stat updates) in norm layers.
pub struct Ctx<'a> {
    pub tape: Tape,
    pub params: &'a ParamStore,
    pub state: StateRef<'a>,
    pub train: bool,
}

pub enum StateRef<'a> {
    Mut(&'a mut StateStore),
    Ref(&'a StateStore),
}

impl<'a> StateRef<'a> {
    fn get(&self, idx: usize) -> &Tensor4 {
        match self {
            StateRef::Mut(s) => s.get(idx),
            StateRef::Ref(s) => s.get(idx),
        }
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvLayer {
    w: usize,
    stride: usize,
}

impl ConvLayer {
    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let w = ctx.tape.param(self.w, ctx.params.get(self.w).clone());
        ctx.tape.conv2d(x, w, self.stride)
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthwiseLayer {
    w: usize,
    stride: usize,
}

impl DepthwiseLayer {
    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let w = ctx.tape.param(self.w, ctx.params.get(self.w).clone());
        ctx.tape.depthwise(x, w, self.stride)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormLayer {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

impl NormLayer {
    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let g = ctx.tape.param(self.gamma, ctx.params.get(self.gamma).clone());
        let b = ctx.tape.param(self.beta, ctx.params.get(self.beta).clone());
        if ctx.train {
            let (y, mean, var) = ctx.tape.batch_norm(x, g, b, BN_EPS, None);
            if let StateRef::Mut(state) = &mut ctx.state {
                let rm = state.get_mut(self.running_mean);
                for (r, m) in rm.iter_mut().zip(&mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                }
                let rv = state.get_mut(self.running_var);
                for (r, v) in rv.iter_mut().zip(&var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
                }
            }
            y
        } else {
            let mean: Vec<f64> = ctx.state.get(self.running_mean).iter().copied().collect();
            let var: Vec<f64> = ctx.state.get(self.running_var).iter().copied().collect();
            let (y, _, _) = ctx.tape.batch_norm(x, g, b, BN_EPS, Some((&mean, &var)));
            y
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    w: usize,
    b: usize,
}

impl DenseLayer {
    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let w = ctx.tape.param(self.w, ctx.params.get(self.w).clone());
        let b = ctx.tape.param(self.b, ctx.params.get(self.b).clone());
        ctx.tape.dense(x, w, b)
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }

    pub fn bias_index(&self) -> usize {
        self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Relu,
    Silu,
}

fn activate(ctx: &mut Ctx, x: NodeId, act: Activation) -> NodeId {
    match act {
        Activation::None => x,
        Activation::Relu => ctx.tape.relu(x),
        Activation::Silu => ctx.tape.silu(x),
    }
}

/// conv → norm → activation unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvUnit {
    pub(crate) conv: ConvLayer,
    pub(crate) norm: Option<NormLayer>,
    pub(crate) act: Activation,
}

impl ConvUnit {
    pub(crate) fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let mut y = self.conv.forward(ctx, x);
        if let Some(n) = &self.norm {
            y = n.forward(ctx, y);
        }
        activate(ctx, y, self.act)
    }
}

/// Depthwise k×k then pointwise 1×1, with norm + activation after the
/// pointwise combine. Conv parameter count is `k·k·c_in + c_in·c_out`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DscUnit {
    depthwise: DepthwiseLayer,
    pointwise: ConvLayer,
    norm: Option<NormLayer>,
    act: Activation,
}

impl DscUnit {
    fn build(b: &mut Builder, name: &str, k: usize, cin: usize, cout: usize, stride: usize, act: Activation) -> Self {
        DscUnit {
            depthwise: b.depthwise(&format!("{name}.dw"), k, cin, stride),
            pointwise: b.conv(&format!("{name}.pw"), 1, cin, cout, 1),
            norm: b.norm(&format!("{name}.norm"), cout),
            act,
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let y = self.depthwise.forward(ctx, x);
        let mut y = self.pointwise.forward(ctx, y);
        if let Some(n) = &self.norm {
            y = n.forward(ctx, y);
        }
        activate(ctx, y, self.act)
    }
}

/// Squeeze-and-excitation gate: GAP → reduce FC → activation → expand FC
/// → sigmoid → channelwise rescale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeGate {
    reduce: DenseLayer,
    expand: DenseLayer,
}

/// Reduced width for a squeeze-excite gate over `c` channels.
pub fn se_reduced_width(c: usize, se_ratio: f64) -> usize {
    ((c as f64 * se_ratio).round() as usize).max(1)
}

impl SeGate {
    pub fn build(b: &mut Builder, name: &str, c: usize, se_ratio: f64) -> Self {
        let reduced = se_reduced_width(c, se_ratio);
        SeGate {
            reduce: b.dense(&format!("{name}.reduce"), c, reduced),
            expand: b.dense(&format!("{name}.expand"), reduced, c),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let pooled = ctx.tape.global_avg_pool(x);
        let r = self.reduce.forward(ctx, pooled);
        let r = ctx.tape.relu(r);
        let e = self.expand.forward(ctx, r);
        let s = ctx.tape.sigmoid(e);
        ctx.tape.scale_channels(x, s)
    }

    pub fn expand_weight_index(&self) -> usize {
        self.expand.weight_index()
    }

    pub fn expand_bias_index(&self) -> usize {
        self.expand.bias_index()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Block {
    /// Two 3×3 conv units; downsampling via a leading 2×2 max pool.
    Plain {
        pool: bool,
        units: Vec<ConvUnit>,
    },
    /// conv → conv with additive shortcut (identity or 1×1 projection).
    Residual {
        unit1: ConvUnit,
        unit2: ConvUnit,
        shortcut: Option<ConvLayer>,
    },
    /// Single depthwise-separable unit.
    Dsc { unit: DscUnit },
    /// Two stacked DSC units with additive shortcut.
    DscResidual {
        unit1: DscUnit,
        unit2: DscUnit,
        shortcut: Option<ConvLayer>,
    },
    /// 1×1 expand → depthwise (stride) → SE → 1×1 project, residual when
    /// stride 1 and matching channels.
    MbConv {
        expand: Option<ConvUnit>,
        depthwise: DepthwiseLayer,
        dw_norm: Option<NormLayer>,
        se: SeGate,
        project: ConvUnit,
        residual: bool,
    },
}

impl Block {
    pub fn build(b: &mut Builder, name: &str, spec: &BlockSpec) -> Result<Block> {
        spec.validate()?;
        let k = spec.kernel;
        let (cin, cout, stride) = (spec.in_channels, spec.out_channels, spec.stride);
        let block = match spec.family {
            BlockFamily::Plain => {
                let u1 = ConvUnit {
                    conv: b.conv(&format!("{name}.conv1"), k, cin, cout, 1),
                    norm: b.norm(&format!("{name}.norm1"), cout),
                    act: Activation::Relu,
                };
                let u2 = ConvUnit {
                    conv: b.conv(&format!("{name}.conv2"), k, cout, cout, 1),
                    norm: b.norm(&format!("{name}.norm2"), cout),
                    act: Activation::Relu,
                };
                Block::Plain {
                    pool: stride == 2,
                    units: vec![u1, u2],
                }
            }
            BlockFamily::Residual => {
                let unit1 = ConvUnit {
                    conv: b.conv(&format!("{name}.conv1"), k, cin, cout, stride),
                    norm: b.norm(&format!("{name}.norm1"), cout),
                    act: Activation::Relu,
                };
                let unit2 = ConvUnit {
                    conv: b.conv(&format!("{name}.conv2"), k, cout, cout, 1),
                    norm: b.norm(&format!("{name}.norm2"), cout),
                    act: Activation::None,
                };
                let shortcut = if stride == 1 && cin == cout {
                    None
                } else {
                    Some(b.conv(&format!("{name}.shortcut"), 1, cin, cout, stride))
                };
                Block::Residual {
                    unit1,
                    unit2,
                    shortcut,
                }
            }
            BlockFamily::Dsc => Block::Dsc {
                unit: DscUnit::build(b, name, k, cin, cout, stride, Activation::Relu),
            },
            BlockFamily::DscResidual => {
                let unit1 = DscUnit::build(
                    b,
                    &format!("{name}.dsc1"),
                    k,
                    cin,
                    cout,
                    stride,
                    Activation::Relu,
                );
                let unit2 = DscUnit::build(
                    b,
                    &format!("{name}.dsc2"),
                    k,
                    cout,
                    cout,
                    1,
                    Activation::None,
                );
                let shortcut = if stride == 1 && cin == cout {
                    None
                } else {
                    Some(b.conv(&format!("{name}.shortcut"), 1, cin, cout, stride))
                };
                Block::DscResidual {
                    unit1,
                    unit2,
                    shortcut,
                }
            }
            BlockFamily::MbconvSe => {
                let width = (cin as f64 * spec.expansion).round() as usize;
                let expand = if width != cin {
                    Some(ConvUnit {
                        conv: b.conv(&format!("{name}.expand"), 1, cin, width, 1),
                        norm: b.norm(&format!("{name}.expand_norm"), width),
                        act: Activation::Silu,
                    })
                } else {
                    None
                };
                let depthwise = b.depthwise(&format!("{name}.dw"), k, width, stride);
                let dw_norm = b.norm(&format!("{name}.dw_norm"), width);
                let se = SeGate::build(b, &format!("{name}.se"), width, spec.se_ratio);
                let project = ConvUnit {
                    conv: b.conv(&format!("{name}.project"), 1, width, cout, 1),
                    norm: b.norm(&format!("{name}.project_norm"), cout),
                    act: Activation::None,
                };
                Block::MbConv {
                    expand,
                    depthwise,
                    dw_norm,
                    se,
                    project,
                    residual: stride == 1 && cin == cout,
                }
            }
        };
        Ok(block)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        match self {
            Block::Plain { pool, units } => {
                let mut y = x;
                if *pool {
                    y = ctx.tape.maxpool2(y)?;
                }
                for u in units {
                    y = u.forward(ctx, y);
                }
                Ok(y)
            }
            Block::Residual {
                unit1,
                unit2,
                shortcut,
            } => {
                let f = unit1.forward(ctx, x);
                let f = unit2.forward(ctx, f);
                let s = match shortcut {
                    Some(proj) => proj.forward(ctx, x),
                    None => x,
                };
                let y = ctx.tape.add(f, s);
                Ok(ctx.tape.relu(y))
            }
            Block::Dsc { unit } => Ok(unit.forward(ctx, x)),
            Block::DscResidual {
                unit1,
                unit2,
                shortcut,
            } => {
                let f = unit1.forward(ctx, x);
                let f = unit2.forward(ctx, f);
                let s = match shortcut {
                    Some(proj) => proj.forward(ctx, x),
                    None => x,
                };
                let y = ctx.tape.add(f, s);
                Ok(ctx.tape.relu(y))
            }
            Block::MbConv {
                expand,
                depthwise,
                dw_norm,
                se,
                project,
                residual,
            } => {
                let mut y = x;
                if let Some(e) = expand {
                    y = e.forward(ctx, y);
                }
                y = depthwise.forward(ctx, y);
                if let Some(n) = dw_norm {
                    y = n.forward(ctx, y);
                }
                y = ctx.tape.silu(y);
                y = se.forward(ctx, y);
                y = project.forward(ctx, y);
                if *residual {
                    y = ctx.tape.add(y, x);
                }
                Ok(y)
            }
        }
    }
}

/// Bias-free parameter count of a standard k×k convolution.
pub fn standard_conv_params(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout
}

/// Bias-free parameter count of a depthwise-separable convolution:
/// depthwise k×k per input channel plus pointwise 1×1 combine.
pub fn dsc_conv_params(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin + cin * cout
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;

    pub(crate) fn build_one(
        spec: &BlockSpec,
        norm: bool,
        seed: u64,
    ) -> (Block, ParamStore, StateStore) {
        let mut params = ParamStore::new();
        let mut state = StateStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: &mut params,
            state: &mut state,
            rng: &mut rng,
            norm,
        };
        let block = Block::build(&mut b, "blk", spec).unwrap();
        (block, params, state)
    }

    fn run(block: &Block, params: &ParamStore, state: &StateStore, x: Tensor4) -> Tensor4 {
        let mut ctx = Ctx {
            tape: Tape::new(),
            params,
            state: StateRef::Ref(state),
            train: false,
        };
        let xi = ctx.tape.input(x);
        let y = block.forward(&mut ctx, xi).unwrap();
        ctx.tape.value(y).clone()
    }

    #[test]
    fn residual_shape_stride1() {
        let spec = BlockSpec::new(BlockFamily::Residual, 16, 16, 1);
        let (block, params, state) = build_one(&spec, false, 7);
        let y = run(&block, &params, &state, Array4::zeros((2, 64, 64, 16)));
        assert_eq!(y.dim(), (2, 64, 64, 16));
    }

    #[test]
    fn residual_shape_stride2() {
        let spec = BlockSpec::new(BlockFamily::Residual, 16, 32, 2);
        let (block, params, state) = build_one(&spec, false, 7);
        let y = run(&block, &params, &state, Array4::zeros((2, 64, 64, 16)));
        assert_eq!(y.dim(), (2, 32, 32, 32));
    }

    #[test]
    fn residual_zero_weights_is_identity() {
        let spec = BlockSpec::new(BlockFamily::Residual, 4, 4, 1);
        let (block, mut params, state) = build_one(&spec, false, 7);
        for v in params.values_mut() {
            v.fill(0.0);
        }
        // relu(x + 0) = x for non-negative inputs
        let x = Array4::from_shape_fn((1, 4, 4, 4), |(_, h, w, c)| (h + w + c) as f64 * 0.1);
        let y = run(&block, &params, &state, x.clone());
        assert_eq!(y, x);
    }

    #[test]
    fn dsc_param_counts() {
        assert_eq!(dsc_conv_params(3, 16, 32), 656);
        assert_eq!(standard_conv_params(3, 16, 32), 4608);
        assert_eq!(dsc_conv_params(3, 3, 8), 51);
    }

    #[test]
    fn dsc_block_shape() {
        let spec = BlockSpec::new(BlockFamily::Dsc, 16, 32, 1);
        let (block, params, state) = build_one(&spec, false, 3);
        let y = run(&block, &params, &state, Array4::zeros((2, 32, 32, 16)));
        assert_eq!(y.dim(), (2, 32, 32, 32));
        // depthwise (3*3*16) + pointwise (16*32) weights, no norm
        assert_eq!(params.total_elements(), 656);
    }

    #[test]
    fn dsc_residual_stride2_shape_and_param_savings() {
        let spec = BlockSpec::new(BlockFamily::DscResidual, 32, 64, 2);
        let (block, params, state) = build_one(&spec, false, 3);
        let y = run(&block, &params, &state, Array4::zeros((2, 64, 64, 32)));
        assert_eq!(y.dim(), (2, 32, 32, 64));

        let res_spec = BlockSpec::new(BlockFamily::Residual, 32, 64, 2);
        let (_, res_params, _) = build_one(&res_spec, false, 3);
        assert!(params.total_elements() < res_params.total_elements());
    }

    #[test]
    fn dsc_residual_zero_weights_is_identity() {
        let spec = BlockSpec::new(BlockFamily::DscResidual, 4, 4, 1);
        let (block, mut params, state) = build_one(&spec, false, 7);
        for v in params.values_mut() {
            v.fill(0.0);
        }
        let x = Array4::from_shape_fn((1, 4, 4, 4), |(_, h, w, c)| (h * w + c) as f64 * 0.05);
        let y = run(&block, &params, &state, x.clone());
        assert_eq!(y, x);
    }

    #[test]
    fn se_reduced_width_rounding() {
        assert_eq!(se_reduced_width(8, 0.25), 2);
        assert_eq!(se_reduced_width(3, 0.25), 1);
        assert_eq!(se_reduced_width(1, 0.25), 1);
    }

    #[test]
    fn se_zero_expand_halves_input() {
        let mut params = ParamStore::new();
        let mut state = StateStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = Builder {
            params: &mut params,
            state: &mut state,
            rng: &mut rng,
            norm: false,
        };
        let se = SeGate::build(&mut b, "se", 8, 0.25);
        params.get_mut(se.expand_weight_index()).fill(0.0);
        params.get_mut(se.expand_bias_index()).fill(0.0);

        let x = Array4::from_shape_fn((1, 4, 4, 8), |(_, h, w, c)| (h + 2 * w + c) as f64 * 0.1);
        let mut ctx = Ctx {
            tape: Tape::new(),
            params: &params,
            state: StateRef::Ref(&state),
            train: false,
        };
        let xi = ctx.tape.input(x.clone());
        let y = se.forward(&mut ctx, xi);
        let expected = x.mapv(|v| v * 0.5);
        let diff = (ctx.tape.value(y) - &expected).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn se_zero_input_stays_zero() {
        let mut params = ParamStore::new();
        let mut state = StateStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut b = Builder {
            params: &mut params,
            state: &mut state,
            rng: &mut rng,
            norm: false,
        };
        let se = SeGate::build(&mut b, "se", 4, 0.5);
        let mut ctx = Ctx {
            tape: Tape::new(),
            params: &params,
            state: StateRef::Ref(&state),
            train: false,
        };
        let xi = ctx.tape.input(Array4::zeros((1, 3, 3, 4)));
        let y = se.forward(&mut ctx, xi);
        assert!(ctx.tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mbconv_expansion_width_and_shapes() {
        let spec = BlockSpec::new(BlockFamily::MbconvSe, 16, 24, 2);
        let (block, params, state) = build_one(&spec, false, 5);
        if let Block::MbConv { depthwise: _, .. } = &block {
            // expand weight is (1,1,16,96) for expansion 6
            assert_eq!(params.get(0).dim(), (1, 1, 16, 96));
        } else {
            panic!("expected mbconv");
        }
        let y = run(&block, &params, &state, Array4::zeros((2, 56, 56, 16)));
        assert_eq!(y.dim(), (2, 28, 28, 24));
    }

    #[test]
    fn mbconv_zero_projection_is_identity() {
        let spec = BlockSpec::new(BlockFamily::MbconvSe, 16, 16, 1);
        let (block, mut params, state) = build_one(&spec, false, 5);
        if let Block::MbConv { project, .. } = &block {
            params.get_mut(project.conv.weight_index()).fill(0.0);
        } else {
            panic!("expected mbconv");
        }
        let x = Array4::from_shape_fn((1, 8, 8, 16), |(_, h, w, c)| {
            ((h * 31 + w * 7 + c) % 13) as f64 * 0.07 - 0.3
        });
        let y = run(&block, &params, &state, x.clone());
        assert_eq!(y, x);
    }
}
