use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::config::RunConfig;
use crate::detector::data::{generate_dataset, GenParams, Sample};
use crate::detector::model::Model;
use crate::detector::targets::assign_targets;
use crate::error::{Error, Result};
use crate::harness::{create_run_dir, write_file};
use crate::losses::{AuxLoss, ClsLoss, DenseTargets, LossSpec, RegLoss};
use crate::params::{fan_in_bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Finite-difference step of the fourth-order central stencil.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Entries checked per tensor; larger tensors are sampled.
    pub max_entries: usize,
    pub images: usize,
    /// Test fixture: perturbs the analytic gradient of this tensor.
    pub corrupt_group: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries: 32,
            images: 2,
            corrupt_group: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub numel: usize,
    /// Entries compared, summed over loss variants.
    pub checked: usize,
    /// Entries whose stencil crossed a ReLU, max-pool or clamp branch at every
    /// step size tried.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub variants: Vec<String>,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,numel,checked,skipped,max_rel_err,status\n");
        for g in &self.groups {
            let status = if g.pass { "PASS" } else { "FAIL" };
            let _ = writeln!(
                s,
                "{},{},{},{},{:e},{status}",
                g.name, g.numel, g.checked, g.skipped, g.max_rel_err
            );
        }
        s
    }
}

/// 32×32 images at stride 4 (an 8×8 grid), 8 channels, 2 classes, full
/// interaction block.
pub fn gradcheck_config() -> RunConfig {
    let mut cfg = RunConfig {
        name: "gradcheck".into(),
        ..RunConfig::default()
    };
    cfg.dataset.classes = 2;
    cfg.dataset.image_size = 32;
    cfg.model.channels = 8;
    cfg.model.backbone_width = 4;
    cfg.msil.cam_reduction = 2;
    cfg
}

/// Every classification and regression loss, each with center-ness.
fn loss_variants() -> Vec<(String, LossSpec)> {
    let aux = vec![(AuxLoss::CenternessBce, 1.0)];
    vec![
        (
            "focal+iou+centerness".into(),
            LossSpec {
                cls: ClsLoss::Focal {
                    alpha: 0.25,
                    gamma: 2.0,
                },
                reg: RegLoss::Iou,
                aux: aux.clone(),
                cls_weight: 1.0,
            },
        ),
        (
            "ce+giou+centerness".into(),
            LossSpec {
                cls: ClsLoss::CrossEntropy,
                reg: RegLoss::Giou,
                aux,
                cls_weight: 0.5,
            },
        ),
    ]
}

/// Replaces every parameter, decoders and biases included, with random
/// values so that no gradient path is trivially zero.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.params_mut() {
        let shape = p.tensor.shape();
        let bound = if p.name.ends_with(".bias") {
            0.1
        } else {
            fan_in_bound(shape)
        };
        p.tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-bound..bound));
    }
}

struct Problem<'a> {
    model: &'a Model,
    images: Tensor,
    targets: Vec<DenseTargets>,
}

impl Problem<'_> {
    fn loss(&self, store: &ParamStore, spec: &LossSpec) -> Result<(f64, u64, Tape)> {
        let mut tape = Tape::with_branch_tracking();
        let x = tape.constant(self.images.clone());
        let out = self.model.forward(&mut tape, store, x)?;
        let (loss, terms) = crate::losses::total_loss(
            &mut tape,
            out.class_logits,
            out.boxes,
            out.centerness,
            &self.targets,
            spec,
        )?;
        tape.backward(loss)?;
        Ok((terms.total, tape.branch_signature(), tape))
    }

    fn value(&self, store: &ParamStore, spec: &LossSpec) -> Result<(f64, u64)> {
        let mut tape = Tape::with_branch_tracking();
        let x = tape.constant(self.images.clone());
        let out = self.model.forward(&mut tape, store, x)?;
        let (_, terms) = crate::losses::total_loss(
            &mut tape,
            out.class_logits,
            out.boxes,
            out.centerness,
            &self.targets,
            spec,
        )?;
        Ok((terms.total, tape.branch_signature()))
    }
}

/// Compares backpropagated parameter gradients of the whole model plus loss
/// against central finite differences, for every loss variant. Each
/// parameter tensor is reported once with its worst error over variants.
pub fn run_gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    let grid = cfg.dataset.image_size / cfg.model.stride;
    if grid > 8 {
        return Err(Error::ConfigField {
            field: "dataset.image_size".into(),
            msg: format!("gradient check needs a grid of at most 8×8, got {grid}×{grid}"),
        });
    }
    let mut store = ParamStore::new(cfg.seed);
    let model = Model::new(&mut store, cfg.model_config())?;
    randomize(&mut store, cfg.seed ^ 0x5eed);
    let gen = GenParams {
        noise: cfg.dataset.noise,
        ..GenParams::new(opts.images.max(1), cfg.dataset.classes, cfg.dataset.image_size)
    };
    let samples: Vec<Sample> = generate_dataset(cfg.seed, &gen)?;
    let refs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let problem = Problem {
        model: &model,
        images: Tensor::stack(&refs)?,
        targets: samples
            .iter()
            .map(|s| assign_targets(&s.scene, cfg.model.stride))
            .collect::<Result<_>>()?,
    };
    let ids: Vec<_> = store.ids().collect();
    let mut groups: Vec<GroupReport> = ids
        .iter()
        .map(|&id| GroupReport {
            name: store.name(id).to_string(),
            numel: store.tensor(id).shape().numel(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            pass: true,
        })
        .collect();
    let variants = loss_variants();
    for (vi, (_, spec)) in variants.iter().enumerate() {
        let (_, base_sig, tape) = problem.loss(&store, spec)?;
        for (gi, &id) in ids.iter().enumerate() {
            let numel = groups[gi].numel;
            let mut analytic = tape.param_grad(id).map_or_else(|| vec![0.0; numel], <[f64]>::to_vec);
            if opts.corrupt_group.as_deref() == Some(groups[gi].name.as_str()) {
                analytic.iter_mut().for_each(|g| *g = *g * 1.01 + 1e-3);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((vi * 7919 + gi) as u64));
            let entries: Vec<usize> = if numel <= opts.max_entries {
                (0..numel).collect()
            } else {
                let mut e = sample(&mut rng, numel, opts.max_entries).into_vec();
                e.sort_unstable();
                e
            };
            for j in entries {
                let orig = store.tensor(id).data()[j];
                let mut at = |offset: f64| -> Result<(f64, u64)> {
                    store.tensor_mut(id).data_mut()[j] = orig + offset;
                    problem.value(&store, spec)
                };
                // fourth-order central stencil, shrinking the step when a
                // branch flips inside the stencil
                let mut numeric = None;
                for h in [opts.step, opts.step / 10.0, opts.step / 100.0] {
                    let points = [at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?];
                    if points.iter().all(|&(_, sig)| sig == base_sig) {
                        let [(p1, _), (m1, _), (p2, _), (m2, _)] = points;
                        numeric = Some((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
                        break;
                    }
                }
                store.tensor_mut(id).data_mut()[j] = orig;
                let g = &mut groups[gi];
                let Some(numeric) = numeric else {
                    g.skipped += 1;
                    continue;
                };
                let a = analytic[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
                g.checked += 1;
                g.max_rel_err = g.max_rel_err.max(rel);
            }
        }
    }
    for g in &mut groups {
        g.pass = g.max_rel_err <= opts.tolerance && g.checked > 0;
    }
    Ok(GradcheckReport {
        variants: variants.into_iter().map(|(n, _)| n).collect(),
        groups,
    })
}

/// Runs the check on `cfg` (use [`gradcheck_config`] for the default small
/// model) and writes `gradcheck.csv`. Fails with a numerical error if any
/// tensor exceeds the tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let report = run_gradcheck(cfg, opts)?;
    let dir = create_run_dir(Path::new(&cfg.out_dir), &cfg.name)?;
    write_file(&dir.join("config.snapshot"), cfg.serialize())?;
    write_file(&dir.join("gradcheck.csv"), report.to_csv())?;
    Ok(report)
}
