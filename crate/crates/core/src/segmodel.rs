//! Encoder-decoder segmentation network: OS-16 encoder, asymmetric
//! decoder with bilinear ×2 upsampling and selective skip concatenation,
//! single-channel sigmoid mask head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::blocks::{Activation, Builder, ConvUnit, Ctx, ParamStore, StateRef, StateStore};
use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::tensor::{shape_str, Tensor4};

fn default_input_size() -> (usize, usize, usize) {
    (512, 512, 3)
}

fn default_skip_strides() -> Vec<usize> {
    vec![4, 8]
}

fn default_decoder_widths() -> Vec<usize> {
    vec![128, 64, 48, 32]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegModelConfig {
    pub backbone: BackboneSpec,
    /// Encoder taps concatenated into the decoder; subset of {2, 4, 8}.
    /// Empty reproduces a skip-free decoder, {2,4,8} a U-Net-like one.
    #[serde(default = "default_skip_strides")]
    pub skip_strides: Vec<usize>,
    /// Decoder channel widths from the bottleneck up to full resolution.
    #[serde(default = "default_decoder_widths")]
    pub decoder_widths: Vec<usize>,
    #[serde(default = "default_input_size")]
    pub input_size: (usize, usize, usize),
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.output_stride != 16 {
            return Err(Error::InvalidConfig(format!(
                "segmentation encoder must have output_stride 16, got {}",
                self.backbone.output_stride
            )));
        }
        let stages = (self.backbone.output_stride as f64).log2() as usize;
        if self.decoder_widths.len() != stages {
            return Err(Error::InvalidConfig(format!(
                "decoder needs {stages} widths (log2 of output stride), got {}",
                self.decoder_widths.len()
            )));
        }
        for os in &self.skip_strides {
            if !matches!(os, 2 | 4 | 8) {
                return Err(Error::InvalidConfig(format!(
                    "skip stride {os} has no encoder tap (valid: 2, 4, 8)"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DecoderStage {
    /// Output stride this stage upsamples to.
    target_os: usize,
    skip: bool,
    unit: ConvUnit,
}

pub struct SegModel {
    pub config: SegModelConfig,
    backbone: Backbone,
    decoder: Vec<DecoderStage>,
    head: crate::blocks::ConvLayer,
    pub params: ParamStore,
    pub state: StateStore,
}

/// One forward pass: the tape, the sigmoid probability map node and the
/// encoder bottleneck spatial size.
pub struct SegForward {
    pub tape: Tape,
    pub prob: NodeId,
    pub bottleneck: (usize, usize),
}

impl SegModel {
    pub fn build(config: SegModelConfig, seed: u64) -> Result<SegModel> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut state = StateStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut builder = Builder {
            params: &mut params,
            state: &mut state,
            rng: &mut rng,
            norm: config.batch_norm,
        };

        let backbone = Backbone::build(&mut builder, "encoder", &config.backbone)?;

        // encoder tap channel widths by output stride
        let mut tap_channels = std::collections::BTreeMap::new();
        let mut os = config.backbone.stem.stride;
        tap_channels.insert(os, config.backbone.stem.out_channels);
        for stage in &config.backbone.stages {
            os *= stage.block.stride;
            tap_channels.insert(os, stage.block.out_channels);
        }

        let mut decoder = Vec::new();
        let mut channels = config.backbone.final_channels();
        let mut current_os = config.backbone.output_stride;
        for (i, &width) in config.decoder_widths.iter().enumerate() {
            current_os /= 2;
            let skip = config.skip_strides.contains(&current_os);
            let mut in_ch = channels;
            if skip {
                in_ch += tap_channels.get(&current_os).copied().ok_or_else(|| {
                    Error::InvalidConfig(format!("skip stride {current_os} has no encoder tap"))
                })?;
            }
            let unit = ConvUnit {
                conv: builder.conv(&format!("decoder.stage{i}.conv"), 3, in_ch, width, 1),
                norm: builder.norm(&format!("decoder.stage{i}.norm"), width),
                act: Activation::Relu,
            };
            decoder.push(DecoderStage {
                target_os: current_os,
                skip,
                unit,
            });
            channels = width;
        }

        let head = builder.conv("head", 1, channels, 1, 1);
        Ok(SegModel {
            config,
            backbone,
            decoder,
            head,
            params,
            state,
        })
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let (_, h, w, c) = x.dim();
        let os = self.config.backbone.output_stride;
        if h % os != 0 || w % os != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                format!("spatial dims divisible by {os}"),
                shape_str(x),
            ));
        }
        if c != self.config.backbone.stem.in_channels {
            return Err(Error::shape(
                format!("{} channels", self.config.backbone.stem.in_channels),
                shape_str(x),
            ));
        }
        Ok(())
    }

    fn forward_impl(&self, state: StateRef, train: bool, x: &Tensor4) -> Result<SegForward> {
        self.check_input(x)?;
        let mut ctx = Ctx {
            tape: Tape::new(),
            params: &self.params,
            state,
            train,
        };
        let input = ctx.tape.input(x.clone());
        let feats = self.backbone.forward(&mut ctx, input)?;
        let bdims = ctx.tape.value(feats.final_map).dim();
        let mut y = feats.final_map;
        for stage in &self.decoder {
            y = ctx.tape.upsample2(y);
            if stage.skip {
                let (skip_node, _) = feats.skips[&stage.target_os];
                y = ctx.tape.concat_channels(y, skip_node);
            }
            y = stage.unit.forward(&mut ctx, y);
        }
        let logits = self.head.forward(&mut ctx, y);
        let prob = ctx.tape.sigmoid(logits);
        Ok(SegForward {
            tape: ctx.tape,
            prob,
            bottleneck: (bdims.1, bdims.2),
        })
    }

    /// Training forward: batch statistics, running stats updated.
    pub fn forward_train(&mut self, x: &Tensor4) -> Result<SegForward> {
        let mut state = std::mem::take(&mut self.state);
        let result = self.forward_impl(StateRef::Mut(&mut state), true, x);
        self.state = state;
        result
    }

    /// Inference forward: running statistics, no mutation.
    pub fn forward_eval(&self, x: &Tensor4) -> Result<SegForward> {
        self.forward_impl(StateRef::Ref(&self.state), false, x)
    }

    /// Sigmoid probability map for one image batch.
    pub fn predict_prob(&self, image: &Tensor4) -> Result<Tensor4> {
        let fwd = self.forward_eval(image)?;
        Ok(fwd.tape.value(fwd.prob).clone())
    }

    /// Thresholded binary mask: 1 where sigmoid output ≥ threshold.
    pub fn predict_mask(&self, image: &Tensor4, threshold: f64) -> Result<Tensor4> {
        let prob = self.predict_prob(image)?;
        Ok(prob.mapv(|v| f64::from(v >= threshold)))
    }
}

/// Threshold a probability map into a binary mask.
pub fn threshold_mask(prob: &Tensor4, threshold: f64) -> Tensor4 {
    prob.mapv(|v| f64::from(v >= threshold))
}

/// Tiny config for tests and smoke training: minimal widths, no norm.
pub fn toy_seg_config(input: usize, family: &str, stem_width: usize) -> Result<SegModelConfig> {
    let backbone = crate::backbone::preset_backbone(family, 16, stem_width)?;
    Ok(SegModelConfig {
        backbone,
        skip_strides: vec![4, 8],
        decoder_widths: vec![stem_width * 2, stem_width, stem_width, stem_width],
        input_size: (input, input, 3),
        batch_norm: false,
    })
}
