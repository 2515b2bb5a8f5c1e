//! Backbone assembly: stem + stages of repeated blocks, with skip taps at
//! output strides 2, 4 and 8 and a registry of per-family presets.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Block, BlockFamily, BlockSpec, Builder, Ctx, ParamStore, StateStore};
use crate::error::{Error, Result};
use crate::graph::NodeId;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub block: BlockSpec,
    pub repeat: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub stem: BlockSpec,
    pub stages: Vec<StageSpec>,
    pub output_stride: usize,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        self.stem.validate()?;
        let mut stride_product = self.stem.stride;
        let mut width = self.stem.out_channels;
        let mut in_ch = self.stem.out_channels;
        for (i, stage) in self.stages.iter().enumerate() {
            stage.block.validate()?;
            if stage.repeat == 0 {
                return Err(Error::InvalidConfig(format!("stage {i} has repeat 0")));
            }
            if stage.block.in_channels != in_ch {
                return Err(Error::InvalidConfig(format!(
                    "stage {i} expects {} input channels, previous stage produces {in_ch}",
                    stage.block.in_channels
                )));
            }
            if stage.block.out_channels < width {
                return Err(Error::InvalidConfig(format!(
                    "channel widths must be non-decreasing, stage {i} narrows {} -> {}",
                    width, stage.block.out_channels
                )));
            }
            width = stage.block.out_channels;
            in_ch = stage.block.out_channels;
            stride_product *= stage.block.stride;
        }
        if stride_product != self.output_stride {
            return Err(Error::InvalidConfig(format!(
                "stride product {stride_product} does not match output_stride {}",
                self.output_stride
            )));
        }
        if self.output_stride != 16 && self.output_stride != 32 {
            return Err(Error::InvalidConfig(format!(
                "output_stride must be 16 or 32, got {}",
                self.output_stride
            )));
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        self.stages
            .last()
            .map(|s| s.block.out_channels)
            .unwrap_or(self.stem.out_channels)
    }
}

/// A built backbone. Parameters live in the owning model's stores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Backbone {
    stem: Block,
    stages: Vec<Vec<Block>>,
    spec: BackboneSpec,
}

/// Forward-pass features: the final map plus skip taps keyed by output
/// stride, each with its channel count.
pub struct BackboneFeatures {
    pub final_map: NodeId,
    pub skips: BTreeMap<usize, (NodeId, usize)>,
}

impl Backbone {
    pub fn build(b: &mut Builder, name: &str, spec: &BackboneSpec) -> Result<Backbone> {
        spec.validate()?;
        let stem = Block::build(b, &format!("{name}.stem"), &spec.stem)?;
        let mut stages = Vec::new();
        for (si, stage) in spec.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for ri in 0..stage.repeat {
                let mut bs = stage.block.clone();
                if ri > 0 {
                    bs.in_channels = bs.out_channels;
                    bs.stride = 1;
                }
                blocks.push(Block::build(b, &format!("{name}.stage{si}.block{ri}"), &bs)?);
            }
            stages.push(blocks);
        }
        Ok(Backbone {
            stem,
            stages,
            spec: spec.clone(),
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<BackboneFeatures> {
        let mut skips = BTreeMap::new();
        let mut os = self.spec.stem.stride;
        let mut y = self.stem.forward(ctx, x)?;
        if os < self.spec.output_stride && matches!(os, 2 | 4 | 8) {
            skips.insert(os, (y, self.spec.stem.out_channels));
        }
        for (stage, spec) in self.stages.iter().zip(&self.spec.stages) {
            for block in stage {
                y = block.forward(ctx, y)?;
            }
            os *= spec.block.stride;
            if os < self.spec.output_stride && matches!(os, 2 | 4 | 8) {
                skips.insert(os, (y, spec.block.out_channels));
            }
        }
        Ok(BackboneFeatures {
            final_map: y,
            skips,
        })
    }
}

/// Convenience: build a standalone backbone with its own stores.
pub fn build_backbone(
    spec: &BackboneSpec,
    norm: bool,
    seed: u64,
) -> Result<(Backbone, ParamStore, StateStore)> {
    use rand::SeedableRng;
    let mut params = ParamStore::new();
    let mut state = StateStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut builder = Builder {
        params: &mut params,
        state: &mut state,
        rng: &mut rng,
        norm,
    };
    let backbone = Backbone::build(&mut builder, "backbone", spec)?;
    Ok((backbone, params, state))
}

pub const PRESET_NAMES: [&str; 5] = ["unet", "resnet", "mobilenet", "xception", "efficientnet"];

/// Desk-scale preset: `stem_width` channels after the stem, doubling per
/// stage and capped at 8× the stem width.
pub fn preset_backbone(name: &str, output_stride: usize, stem_width: usize) -> Result<BackboneSpec> {
    let family = match name {
        "unet" => BlockFamily::Plain,
        "resnet" => BlockFamily::Residual,
        "mobilenet" => BlockFamily::Dsc,
        "xception" => BlockFamily::DscResidual,
        "efficientnet" => BlockFamily::MbconvSe,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown backbone preset '{other}', expected one of {PRESET_NAMES:?}"
            )))
        }
    };
    let n_stages = match output_stride {
        16 => 3,
        32 => 4,
        other => {
            return Err(Error::InvalidConfig(format!(
                "output_stride must be 16 or 32, got {other}"
            )))
        }
    };
    let cap = stem_width * 8;
    let mut stem = BlockSpec::new(family, 3, stem_width, 2);
    if family == BlockFamily::MbconvSe {
        // keep the stem cheap: no expansion on the first block
        stem.expansion = 1.0;
    }
    let mut stages = Vec::new();
    let mut in_ch = stem_width;
    for i in 0..n_stages {
        let out = (stem_width << (i + 1)).min(cap);
        stages.push(StageSpec {
            block: BlockSpec::new(family, in_ch, out, 2),
            repeat: 1,
        });
        in_ch = out;
    }
    Ok(BackboneSpec {
        stem,
        stages,
        output_stride,
    })
}
