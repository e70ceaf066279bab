//! Tiny backbone plus the single-branch and multi-branch dense heads.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::msil::{msil_forward, Attention, MsilConfig, MsilParams};
use crate::nn::{Conv2d, DenseHead};
use crate::params::{Init, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// One trunk, one projection for class, box and center-ness together.
    SingleBranch,
    /// Independent classification and regression stacks.
    MultiBranch,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::SingleBranch => "single-branch",
            HeadKind::MultiBranch => "multi-branch",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single-branch" => Ok(HeadKind::SingleBranch),
            "multi-branch" => Ok(HeadKind::MultiBranch),
            _ => Err(format!(
                "unknown head kind {s:?} (expected single-branch or multi-branch)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Power of two; the backbone halves resolution log2(stride) times.
    pub stride: usize,
    pub backbone_width: usize,
    pub channels: usize,
    pub classes: usize,
    pub head: HeadKind,
    /// Only used by the multi-branch head.
    pub msil: Option<MsilConfig>,
    /// Initial foreground probability of the classifier.
    pub prior_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            stride: 4,
            backbone_width: 8,
            channels: 16,
            classes: 3,
            head: HeadKind::MultiBranch,
            msil: None,
            prior_prob: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !self.stride.is_power_of_two() {
            return bad(format!("stride {} is not a power of two", self.stride));
        }
        if self.in_channels == 0 || self.backbone_width == 0 || self.channels == 0 || self.classes == 0 {
            return bad("channel counts and classes must be positive".into());
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return bad(format!("prior probability {} not in (0, 1)", self.prior_prob));
        }
        if let Some(m) = &self.msil {
            if m.channels != self.channels {
                return bad(format!(
                    "msil channels {} != head channels {}",
                    m.channels, self.channels
                ));
            }
            m.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub stages: Vec<Conv2d>,
    pub out: Conv2d,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = cfg.in_channels;
        for i in 0..cfg.stride.trailing_zeros() {
            stages.push(Conv2d::new(
                store,
                &format!("backbone.stage{i}"),
                cin,
                cfg.backbone_width,
                3,
                Init::FanInUniform,
            )?);
            cin = cfg.backbone_width;
        }
        let out = Conv2d::new(store, "backbone.out", cin, cfg.channels, 3, Init::FanInUniform)?;
        Ok(Backbone { stages, out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for s in &self.stages {
            let c = s.forward(tape, store, h)?;
            let r = tape.relu(c);
            h = tape.avg_pool2(r)?;
        }
        let o = self.out.forward(tape, store, h)?;
        Ok(tape.relu(o))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingleBranchHead {
    pub c1: Conv2d,
    pub c2: Conv2d,
    /// Outputs `K` class logits, 4 box logits and 1 center-ness logit.
    pub projection: DenseHead,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiBranchHead {
    pub cls: [Conv2d; 2],
    pub reg: [Conv2d; 2],
    pub msil: Option<MsilParams>,
    pub cls_pred: Conv2d,
    pub box_pred: Conv2d,
    pub ctr_pred: Conv2d,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Head {
    Single(SingleBranchHead),
    Multi(MultiBranchHead),
}

/// Branch features around the interaction block, for heat maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchFeatures {
    pub cls_before: Var,
    pub reg_before: Var,
    pub cls_after: Var,
    pub reg_after: Var,
    pub attention: Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadOutput {
    pub class_logits: Var,
    /// Positive `(l, t, r, b)` distances in grid units.
    pub boxes: Var,
    pub centerness: Var,
    pub features: Option<BranchFeatures>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub head: Head,
}

fn prior_bias(p: f64) -> f64 {
    -((1.0 - p) / p).ln()
}

impl Model {
    pub fn new(store: &mut ParamStore, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, &config)?;
        let c = config.channels;
        let k = config.classes;
        let conv3 = |store: &mut ParamStore, name: &str, cout: usize| {
            Conv2d::new(store, &format!("head.{name}"), c, cout, 3, Init::FanInUniform)
        };
        let head = match config.head {
            HeadKind::SingleBranch => {
                let c1 = conv3(store, "c1", c)?;
                let c2 = conv3(store, "c2", c)?;
                let projection = DenseHead::new(store, "head.fc", c, k + 5)?;
                let b = store.tensor_mut(projection.linear.bias).data_mut();
                b[..k].fill(prior_bias(config.prior_prob));
                Head::Single(SingleBranchHead { c1, c2, projection })
            }
            HeadKind::MultiBranch => {
                let cls = [conv3(store, "cls1", c)?, conv3(store, "cls2", c)?];
                let reg = [conv3(store, "reg1", c)?, conv3(store, "reg2", c)?];
                let msil = match &config.msil {
                    Some(m) => MsilParams::new(store, "head.msil", m)?,
                    None => None,
                };
                let cls_pred = conv3(store, "cls_pred", k)?;
                store
                    .tensor_mut(cls_pred.bias)
                    .data_mut()
                    .fill(prior_bias(config.prior_prob));
                let box_pred = conv3(store, "box_pred", 4)?;
                let ctr_pred = conv3(store, "ctr_pred", 1)?;
                Head::Multi(MultiBranchHead {
                    cls,
                    reg,
                    msil,
                    cls_pred,
                    box_pred,
                    ctr_pred,
                })
            }
        };
        Ok(Model { config, backbone, head })
    }

    /// `images` is N×C×S×S with S divisible by the stride.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, images: Var) -> Result<HeadOutput> {
        let s = tape.shape(images);
        if s.c != self.config.in_channels
            || !s.h.is_multiple_of(self.config.stride)
            || !s.w.is_multiple_of(self.config.stride)
        {
            return Err(Error::InvalidShape {
                op: "model",
                msg: format!(
                    "input {s} incompatible with {} channels, stride {}",
                    self.config.in_channels, self.config.stride
                ),
            });
        }
        let f = self.backbone.forward(tape, store, images)?;
        self.forward_head(tape, store, f)
    }

    /// Runs the head alone on backbone features N×C×H×W.
    pub fn forward_head(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<HeadOutput> {
        let k = self.config.classes;
        let stack = |tape: &mut Tape, convs: &[Conv2d], x: Var| -> Result<Var> {
            let mut h = x;
            for c in convs {
                let y = c.forward(tape, store, h)?;
                h = tape.relu(y);
            }
            Ok(h)
        };
        match &self.head {
            Head::Single(h) => {
                let t = stack(tape, &[h.c1, h.c2], f)?;
                let out = h.projection.forward(tape, store, t)?;
                let class_logits = tape.slice_channels(out, 0, k)?;
                let raw = tape.slice_channels(out, k, 4)?;
                let boxes = tape.exp(raw);
                let centerness = tape.slice_channels(out, k + 4, 1)?;
                Ok(HeadOutput {
                    class_logits,
                    boxes,
                    centerness,
                    features: None,
                })
            }
            Head::Multi(h) => {
                let f_cls = stack(tape, &h.cls, f)?;
                let f_reg = stack(tape, &h.reg, f)?;
                let disabled = MsilConfig {
                    channels: self.config.channels,
                    apply_to_cls: false,
                    apply_to_reg: false,
                    ..MsilConfig::default()
                };
                let cfg = self.config.msil.unwrap_or(disabled);
                let m = msil_forward(tape, store, h.msil.as_ref(), &cfg, f_cls, f_reg)?;
                let class_logits = h.cls_pred.forward(tape, store, m.class_feat)?;
                let centerness = h.ctr_pred.forward(tape, store, m.class_feat)?;
                let raw = h.box_pred.forward(tape, store, m.box_feat)?;
                let boxes = tape.exp(raw);
                Ok(HeadOutput {
                    class_logits,
                    boxes,
                    centerness,
                    features: Some(BranchFeatures {
                        cls_before: f_cls,
                        reg_before: f_reg,
                        cls_after: m.class_feat,
                        reg_after: m.box_feat,
                        attention: m.attention,
                    }),
                })
            }
        }
    }

    /// Parameters registered under the interaction block.
    pub fn msil_param_count(&self, store: &ParamStore) -> usize {
        store.count_prefix("head.msil.")
    }
}
