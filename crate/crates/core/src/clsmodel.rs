//! 7-class lesion classifier: OS-32 backbone, global average pooling,
//! optional hidden layer, linear logits. Softmax and argmax live outside
//! the tape; training seeds the backward pass with `p - onehot` directly.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::blocks::{Builder, Ctx, DenseLayer, ParamStore, StateRef, StateStore};
use crate::dataio::LesionClass;
use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::tensor::{shape_str, Tensor4};

fn default_num_classes() -> usize {
    7
}

fn default_input_size() -> (usize, usize, usize) {
    (224, 224, 3)
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClsModelConfig {
    pub backbone: BackboneSpec,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_input_size")]
    pub input_size: (usize, usize, usize),
    /// Hidden layer width between pooling and logits; 0 means a direct
    /// linear head.
    #[serde(default)]
    pub head_width: usize,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
    /// Dropout probability on pooled features during training.
    #[serde(default)]
    pub dropout: f64,
}

impl ClsModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.output_stride != 32 {
            return Err(Error::InvalidConfig(format!(
                "classifier backbone must have output_stride 32, got {}",
                self.backbone.output_stride
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

pub struct ClsModel {
    pub config: ClsModelConfig,
    backbone: Backbone,
    hidden: Option<DenseLayer>,
    head: DenseLayer,
    pub params: ParamStore,
    pub state: StateStore,
}

/// One forward pass: tape, raw logits node and feature-map spatial size
/// before pooling.
pub struct ClsForward {
    pub tape: Tape,
    pub logits: NodeId,
    pub feature_map: (usize, usize),
}

/// Row-wise softmax over a (N,1,1,K) logits tensor.
pub fn softmax(logits: &Tensor4) -> Tensor4 {
    let (n, _, _, k) = logits.dim();
    let mut out = logits.clone();
    for ni in 0..n {
        let max = (0..k)
            .map(|c| logits[(ni, 0, 0, c)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..k {
            let e = (logits[(ni, 0, 0, c)] - max).exp();
            out[(ni, 0, 0, c)] = e;
            denom += e;
        }
        for c in 0..k {
            out[(ni, 0, 0, c)] /= denom;
        }
    }
    out
}

/// Argmax over class probabilities; ties resolve to the lowest index.
pub fn argmax_class(probs: &Tensor4, sample: usize) -> usize {
    let k = probs.dim().3;
    let mut best = 0;
    for c in 1..k {
        if probs[(sample, 0, 0, c)] > probs[(sample, 0, 0, best)] {
            best = c;
        }
    }
    best
}

impl ClsModel {
    pub fn build(config: ClsModelConfig, seed: u64) -> Result<ClsModel> {
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
        let backbone = Backbone::build(&mut builder, "backbone", &config.backbone)?;
        let feat = config.backbone.final_channels();
        let (hidden, head_in) = if config.head_width > 0 {
            (
                Some(builder.dense("hidden", feat, config.head_width)),
                config.head_width,
            )
        } else {
            (None, feat)
        };
        let head = builder.dense("head", head_in, config.num_classes);
        Ok(ClsModel {
            config,
            backbone,
            hidden,
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

    fn forward_impl(
        &self,
        state: StateRef,
        train: bool,
        x: &Tensor4,
        dropout_seed: u64,
    ) -> Result<ClsForward> {
        self.check_input(x)?;
        let mut ctx = Ctx {
            tape: Tape::new(),
            params: &self.params,
            state,
            train,
        };
        let input = ctx.tape.input(x.clone());
        let feats = self.backbone.forward(&mut ctx, input)?;
        let fdims = ctx.tape.value(feats.final_map).dim();
        let mut y = ctx.tape.global_avg_pool(feats.final_map);
        if train && self.config.dropout > 0.0 {
            let (n, _, _, c) = ctx.tape.value(y).dim();
            let p = self.config.dropout;
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            // inverted dropout: surviving channels scaled by 1/(1-p)
            let mask = Array4::from_shape_fn((n, 1, 1, c), |_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    1.0 / (1.0 - p)
                }
            });
            let mask = ctx.tape.input(mask);
            y = ctx.tape.scale_channels(y, mask);
        }
        if let Some(hidden) = &self.hidden {
            y = hidden.forward(&mut ctx, y);
            y = ctx.tape.relu(y);
        }
        let logits = self.head.forward(&mut ctx, y);
        Ok(ClsForward {
            tape: ctx.tape,
            logits,
            feature_map: (fdims.1, fdims.2),
        })
    }

    /// Training forward: batch statistics, running stats updated,
    /// dropout active (seeded).
    pub fn forward_train(&mut self, x: &Tensor4, dropout_seed: u64) -> Result<ClsForward> {
        let mut state = std::mem::take(&mut self.state);
        let result = self.forward_impl(StateRef::Mut(&mut state), true, x, dropout_seed);
        self.state = state;
        result
    }

    /// Inference forward: running statistics, no dropout.
    pub fn forward_eval(&self, x: &Tensor4) -> Result<ClsForward> {
        self.forward_impl(StateRef::Ref(&self.state), false, x, 0)
    }

    /// Class probabilities for a batch, shape (N,1,1,num_classes).
    pub fn predict_probs(&self, x: &Tensor4) -> Result<Tensor4> {
        let fwd = self.forward_eval(x)?;
        Ok(softmax(fwd.tape.value(fwd.logits)))
    }

    /// Predicted class per sample; ties resolve to the lowest index.
    pub fn predict_classes(&self, x: &Tensor4) -> Result<Vec<LesionClass>> {
        let probs = self.predict_probs(x)?;
        let n = probs.dim().0;
        (0..n)
            .map(|i| {
                LesionClass::from_index(argmax_class(&probs, i)).ok_or_else(|| {
                    Error::Other("class index outside the lesion taxonomy".into())
                })
            })
            .collect()
    }
}

/// Tiny config for tests and smoke training: minimal widths, no norm.
pub fn toy_cls_config(input: usize, family: &str, stem_width: usize) -> Result<ClsModelConfig> {
    let backbone = crate::backbone::preset_backbone(family, 32, stem_width)?;
    Ok(ClsModelConfig {
        backbone,
        num_classes: 7,
        input_size: (input, input, 3),
        head_width: 0,
        batch_norm: false,
        dropout: 0.0,
    })
}
