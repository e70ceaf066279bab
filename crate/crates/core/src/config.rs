//! Run configuration: line-oriented `key = value` text with `#` comments and
//! dotted section keys.
//!
//! ```text
//! # baseline
//! name = fcos-msil
//! seed = 7
//! msil.apply_to_cls = true
//! loss.cls = focal
//! ```
//!
//! Every key is optional; unknown or repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::detector::data::GenParams;
use crate::detector::model::{HeadKind, ModelConfig};
use crate::detector::postprocess::DecodeParams;
use crate::error::{Error, Result};
use crate::losses::{AuxLoss, ClsLoss, LossSpec, RegLoss};
use crate::msil::MsilConfig;
use crate::optim::StepSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    /// Directory written by `write_dataset`; empty means generate from `seed`.
    pub path: String,
    pub train_images: usize,
    pub val_images: usize,
    pub classes: usize,
    pub image_size: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub head: HeadKind,
    pub channels: usize,
    pub backbone_width: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsilSection {
    pub enabled: bool,
    pub enable_alignment: bool,
    pub enable_separation: bool,
    pub apply_to_cls: bool,
    pub apply_to_reg: bool,
    pub share_encoder_stack: bool,
    pub cam_reduction: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSection {
    /// `focal` or `ce`.
    pub cls: String,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// `iou` or `giou`.
    pub reg: String,
    pub cls_weight: f64,
    pub centerness_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Linear warm-up length in steps; 0 disables it.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub out_dir: String,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub msil: MsilSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            seed: 0,
            epochs: 24,
            batch_size: 8,
            out_dir: "runs".into(),
            dataset: DatasetConfig {
                path: String::new(),
                train_images: 400,
                val_images: 100,
                classes: 3,
                image_size: 64,
                noise: 0.05,
            },
            model: ModelSection {
                head: HeadKind::MultiBranch,
                channels: 16,
                backbone_width: 8,
                stride: 4,
            },
            msil: MsilSection {
                enabled: true,
                enable_alignment: true,
                enable_separation: true,
                apply_to_cls: true,
                apply_to_reg: true,
                share_encoder_stack: true,
                cam_reduction: 4,
            },
            loss: LossSection {
                cls: "focal".into(),
                focal_alpha: 0.25,
                focal_gamma: 2.0,
                reg: "iou".into(),
                cls_weight: 1.0,
                centerness_weight: 1.0,
            },
            optim: OptimSection {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
                decay_epochs: vec![16, 22],
                decay_factor: 0.1,
                warmup_steps: 50,
                grad_clip: 10.0,
            },
            eval: EvalSection {
                score_thresh: 0.05,
                nms_iou: 0.6,
                max_detections: 100,
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{v:?} is not true or false")),
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    msg: format!("expected `key = value`, got {content:?}"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(key, value).map_err(|msg| Error::Config {
                line,
                msg: format!("{key}: {msg}"),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "name" => self.name = v.to_string(),
            "seed" => self.seed = parse_num(v)?,
            "epochs" => self.epochs = parse_num(v)?,
            "batch_size" => self.batch_size = parse_num(v)?,
            "out_dir" => self.out_dir = v.to_string(),
            "dataset.path" => self.dataset.path = v.to_string(),
            "dataset.train_images" => self.dataset.train_images = parse_num(v)?,
            "dataset.val_images" => self.dataset.val_images = parse_num(v)?,
            "dataset.classes" => self.dataset.classes = parse_num(v)?,
            "dataset.image_size" => self.dataset.image_size = parse_num(v)?,
            "dataset.noise" => self.dataset.noise = parse_num(v)?,
            "model.head" => self.model.head = v.parse()?,
            "model.channels" => self.model.channels = parse_num(v)?,
            "model.backbone_width" => self.model.backbone_width = parse_num(v)?,
            "model.stride" => self.model.stride = parse_num(v)?,
            "msil.enabled" => self.msil.enabled = parse_bool(v)?,
            "msil.enable_alignment" => self.msil.enable_alignment = parse_bool(v)?,
            "msil.enable_separation" => self.msil.enable_separation = parse_bool(v)?,
            "msil.apply_to_cls" => self.msil.apply_to_cls = parse_bool(v)?,
            "msil.apply_to_reg" => self.msil.apply_to_reg = parse_bool(v)?,
            "msil.share_encoder_stack" => self.msil.share_encoder_stack = parse_bool(v)?,
            "msil.cam_reduction" => self.msil.cam_reduction = parse_num(v)?,
            "loss.cls" => self.loss.cls = v.to_string(),
            "loss.focal_alpha" => self.loss.focal_alpha = parse_num(v)?,
            "loss.focal_gamma" => self.loss.focal_gamma = parse_num(v)?,
            "loss.reg" => self.loss.reg = v.to_string(),
            "loss.cls_weight" => self.loss.cls_weight = parse_num(v)?,
            "loss.centerness_weight" => self.loss.centerness_weight = parse_num(v)?,
            "optim.lr" => self.optim.lr = parse_num(v)?,
            "optim.momentum" => self.optim.momentum = parse_num(v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_num(v)?,
            "optim.decay_epochs" => self.optim.decay_epochs = parse_list(v)?,
            "optim.decay_factor" => self.optim.decay_factor = parse_num(v)?,
            "optim.warmup_steps" => self.optim.warmup_steps = parse_num(v)?,
            "optim.grad_clip" => self.optim.grad_clip = parse_num(v)?,
            "eval.score_thresh" => self.eval.score_thresh = parse_num(v)?,
            "eval.nms_iou" => self.eval.nms_iou = parse_num(v)?,
            "eval.max_detections" => self.eval.max_detections = parse_num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (d, m, s, l, o, e) = (
            &self.dataset,
            &self.model,
            &self.msil,
            &self.loss,
            &self.optim,
            &self.eval,
        );
        vec![
            ("name", self.name.clone()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("out_dir", self.out_dir.clone()),
            ("dataset.path", d.path.clone()),
            ("dataset.train_images", d.train_images.to_string()),
            ("dataset.val_images", d.val_images.to_string()),
            ("dataset.classes", d.classes.to_string()),
            ("dataset.image_size", d.image_size.to_string()),
            ("dataset.noise", d.noise.to_string()),
            ("model.head", m.head.as_str().to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.backbone_width", m.backbone_width.to_string()),
            ("model.stride", m.stride.to_string()),
            ("msil.enabled", s.enabled.to_string()),
            ("msil.enable_alignment", s.enable_alignment.to_string()),
            ("msil.enable_separation", s.enable_separation.to_string()),
            ("msil.apply_to_cls", s.apply_to_cls.to_string()),
            ("msil.apply_to_reg", s.apply_to_reg.to_string()),
            ("msil.share_encoder_stack", s.share_encoder_stack.to_string()),
            ("msil.cam_reduction", s.cam_reduction.to_string()),
            ("loss.cls", l.cls.clone()),
            ("loss.focal_alpha", l.focal_alpha.to_string()),
            ("loss.focal_gamma", l.focal_gamma.to_string()),
            ("loss.reg", l.reg.clone()),
            ("loss.cls_weight", l.cls_weight.to_string()),
            ("loss.centerness_weight", l.centerness_weight.to_string()),
            ("optim.lr", o.lr.to_string()),
            ("optim.momentum", o.momentum.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("optim.decay_epochs", fmt_list(&o.decay_epochs)),
            ("optim.decay_factor", o.decay_factor.to_string()),
            ("optim.warmup_steps", o.warmup_steps.to_string()),
            ("optim.grad_clip", o.grad_clip.to_string()),
            ("eval.score_thresh", e.score_thresh.to_string()),
            ("eval.nms_iou", e.nms_iou.to_string()),
            ("eval.max_detections", e.max_detections.to_string()),
        ]
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let field = |field: &str, msg: String| {
            Err(Error::ConfigField {
                field: field.to_string(),
                msg,
            })
        };
        let plain = |s: &str| !s.contains(['#', '\n', '\r']) && s.trim() == s;
        if self.name.is_empty() || !plain(&self.name) || self.name.contains(['/', '\\']) {
            return field("name", format!("{:?} must be a non-empty file name", self.name));
        }
        if !plain(&self.out_dir) {
            return field("out_dir", format!("{:?} has surrounding spaces or '#'", self.out_dir));
        }
        if !plain(&self.dataset.path) {
            return field(
                "dataset.path",
                format!("{:?} has surrounding spaces or '#'", self.dataset.path),
            );
        }
        if self.batch_size == 0 {
            return field("batch_size", "must be at least 1".into());
        }
        let d = &self.dataset;
        if d.train_images == 0 || d.val_images == 0 {
            return field(
                "dataset.train_images",
                "train and validation splits must be non-empty".into(),
            );
        }
        if !(2..=6).contains(&d.classes) {
            return field("dataset.classes", format!("{} not in 2..=6", d.classes));
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            return field("dataset.noise", format!("{} must be non-negative", d.noise));
        }
        if d.image_size < 16 {
            return field("dataset.image_size", format!("{} below 16", d.image_size));
        }
        let m = &self.model;
        if !m.stride.is_power_of_two() || !d.image_size.is_multiple_of(m.stride) {
            return field(
                "model.stride",
                format!("{} must be a power of two dividing the image size", m.stride),
            );
        }
        if m.channels == 0 || m.backbone_width == 0 {
            return field("model.channels", "widths must be positive".into());
        }
        if self.msil.cam_reduction == 0 || !m.channels.is_multiple_of(self.msil.cam_reduction) {
            return field(
                "msil.cam_reduction",
                format!("{} must divide model.channels", self.msil.cam_reduction),
            );
        }
        if self.msil.enabled && m.head == HeadKind::SingleBranch {
            return field(
                "msil.enabled",
                "the single-branch head has no branches to interact".into(),
            );
        }
        if !["focal", "ce"].contains(&self.loss.cls.as_str()) {
            return field("loss.cls", format!("{:?} is not focal or ce", self.loss.cls));
        }
        if !["iou", "giou"].contains(&self.loss.reg.as_str()) {
            return field("loss.reg", format!("{:?} is not iou or giou", self.loss.reg));
        }
        if !(0.0..=1.0).contains(&self.loss.focal_alpha) || !(self.loss.focal_gamma >= 0.0) {
            return field(
                "loss.focal_alpha",
                "alpha must be in [0, 1] and gamma non-negative".into(),
            );
        }
        if !(self.loss.cls_weight > 0.0 && self.loss.cls_weight.is_finite()) {
            return field("loss.cls_weight", format!("{} must be positive", self.loss.cls_weight));
        }
        if !(self.loss.centerness_weight >= 0.0 && self.loss.centerness_weight.is_finite()) {
            return field(
                "loss.centerness_weight",
                format!("{} must be non-negative", self.loss.centerness_weight),
            );
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return field("optim.lr", format!("{} must be non-negative", o.lr));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return field("optim.momentum", format!("{} not in [0, 1)", o.momentum));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return field("optim.weight_decay", format!("{} must be non-negative", o.weight_decay));
        }
        if !(o.decay_factor > 0.0 && o.decay_factor <= 1.0) {
            return field("optim.decay_factor", format!("{} not in (0, 1]", o.decay_factor));
        }
        if !(o.grad_clip >= 0.0 && o.grad_clip.is_finite()) {
            return field("optim.grad_clip", format!("{} must be non-negative", o.grad_clip));
        }
        let e = &self.eval;
        if !(0.0..1.0).contains(&e.score_thresh) {
            return field("eval.score_thresh", format!("{} not in [0, 1)", e.score_thresh));
        }
        if !(0.0..=1.0).contains(&e.nms_iou) {
            return field("eval.nms_iou", format!("{} not in [0, 1]", e.nms_iou));
        }
        if e.max_detections == 0 {
            return field("eval.max_detections", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn msil_config(&self) -> Option<MsilConfig> {
        let s = &self.msil;
        s.enabled.then_some(MsilConfig {
            channels: self.model.channels,
            enable_alignment: s.enable_alignment,
            enable_separation: s.enable_separation,
            apply_to_cls: s.apply_to_cls,
            apply_to_reg: s.apply_to_reg,
            share_encoder_stack: s.share_encoder_stack,
            cam_reduction: s.cam_reduction,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            stride: self.model.stride,
            backbone_width: self.model.backbone_width,
            channels: self.model.channels,
            classes: self.dataset.classes,
            head: self.model.head,
            msil: self.msil_config(),
            ..ModelConfig::default()
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        let l = &self.loss;
        LossSpec {
            cls: if l.cls == "ce" {
                ClsLoss::CrossEntropy
            } else {
                ClsLoss::Focal {
                    alpha: l.focal_alpha,
                    gamma: l.focal_gamma,
                }
            },
            reg: if l.reg == "giou" { RegLoss::Giou } else { RegLoss::Iou },
            aux: vec![(AuxLoss::CenternessBce, l.centerness_weight)],
            cls_weight: l.cls_weight,
        }
    }

    pub fn gen_params(&self) -> GenParams {
        GenParams {
            noise: self.dataset.noise,
            ..GenParams::new(
                self.dataset.train_images + self.dataset.val_images,
                self.dataset.classes,
                self.dataset.image_size,
            )
        }
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base_lr: self.optim.lr,
            milestones: self.optim.decay_epochs.clone(),
            factor: self.optim.decay_factor,
        }
    }

    pub fn decode_params(&self) -> DecodeParams {
        DecodeParams {
            stride: self.model.stride,
            score_thresh: self.eval.score_thresh,
            iou_thresh: self.eval.nms_iou,
            max_detections: self.eval.max_detections,
        }
    }
}
