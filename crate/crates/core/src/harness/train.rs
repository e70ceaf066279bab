use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::detector::data::Sample;
use crate::detector::eval::{evaluate_ap, ApSummary, GroundTruth};
use crate::detector::model::Model;
use crate::detector::postprocess::{decode_and_nms, DecodeParams, Detection};
use crate::detector::targets::assign_targets;
use crate::error::{Error, Result};
use crate::harness::{create_run_dir, load_splits, write_file};
use crate::losses::{total_loss, DenseTargets, LossTerms};
use crate::optim::Sgd;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    /// One entry per optimizer step.
    pub losses: Vec<LossTerms>,
    pub metrics: ApSummary,
    pub run_dir: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn param_count(&self) -> usize {
        self.store.count()
    }
}

fn batch_images(samples: &[&Sample]) -> Result<Tensor> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack(&images)
}

fn clip_gradients(store: &mut ParamStore, max_norm: f64) {
    let norm = store
        .params()
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in store.params_mut() {
            let g: Vec<f64> = p
                .tensor
                .grad()
                .map(|g| g.iter().map(|v| v * (scale - 1.0)).collect())
                .unwrap_or_default();
            p.tensor.accumulate_grad(&g);
        }
    }
}

/// Trains from the seed-determined initialization; `epochs = 0` returns the
/// initialization untouched.
pub fn train_model(cfg: &RunConfig, train: &[Sample], val: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut store = ParamStore::new(cfg.seed);
    let model = Model::new(&mut store, cfg.model_config())?;
    let spec = cfg.loss_spec();
    let targets: Vec<DenseTargets> = train
        .iter()
        .map(|s| assign_targets(&s.scene, cfg.model.stride))
        .collect::<Result<_>>()?;
    let schedule = cfg.schedule();
    let mut sgd = Sgd::new(cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch_targets: Vec<DenseTargets> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let mut tape = Tape::new();
            let x = tape.constant(batch_images(&batch)?);
            let out = model.forward(&mut tape, &store, x)?;
            let (loss, terms) = total_loss(
                &mut tape,
                out.class_logits,
                out.boxes,
                out.centerness,
                &batch_targets,
                &spec,
            )?;
            if !terms.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            tape.backward(loss)?;
            store.zero_grad();
            tape.accumulate_param_grads(&mut store);
            if cfg.optim.grad_clip > 0.0 {
                clip_gradients(&mut store, cfg.optim.grad_clip);
            }
            let warmup = if cfg.optim.warmup_steps > 0 {
                ((step + 1) as f64 / cfg.optim.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            sgd.lr = schedule.lr_at(epoch) * warmup;
            sgd.step(&mut store)?;
            losses.push(terms);
            step += 1;
        }
    }
    let metrics = evaluate(&model, &store, val, &cfg.decode_params())?;
    Ok(TrainOutcome {
        model,
        store,
        losses,
        metrics,
        run_dir: None,
    })
}

/// Raw head maps for a batch: class logits, box distances, center-ness logits.
pub fn predict(model: &Model, store: &ParamStore, images: Tensor) -> Result<[Tensor; 3]> {
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let out = model.forward(&mut tape, store, x)?;
    Ok([out.class_logits, out.boxes, out.centerness].map(|v| tape.value(v).clone()))
}

/// Detections for every sample, in sample order.
pub fn detect(
    model: &Model,
    store: &ParamStore,
    samples: &[Sample],
    params: &DecodeParams,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let [cls, boxes, ctr] = predict(model, store, batch_images(&refs)?)?;
        out.extend(decode_and_nms(&cls, &boxes, &ctr, params)?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, store: &ParamStore, samples: &[Sample], params: &DecodeParams) -> Result<ApSummary> {
    let dets = detect(model, store, samples, params)?;
    let truth: Vec<Vec<GroundTruth>> = samples
        .iter()
        .map(|s| {
            s.scene
                .objects
                .iter()
                .map(|o| GroundTruth {
                    class: o.class,
                    bbox: o.bbox,
                })
                .collect()
        })
        .collect();
    Ok(evaluate_ap(&dets, &truth))
}

pub(crate) fn losses_csv(losses: &[LossTerms]) -> String {
    let mut s = String::from("step,L_total,L_cls,L_reg,L_aux,N_pos\n");
    for (i, t) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{},{}", t.total, t.cls, t.reg, t.aux, t.n_pos);
    }
    s
}

pub(crate) fn metrics_csv(outcome: &TrainOutcome) -> String {
    let m = &outcome.metrics;
    format!(
        "AP,AP50,AP75,params,msil_params,steps\n{},{},{},{},{},{}\n",
        m.ap,
        m.ap50,
        m.ap75,
        outcome.param_count(),
        outcome.model.msil_param_count(&outcome.store),
        outcome.losses.len()
    )
}

/// Writes the standard run artifacts into `dir`.
pub(crate) fn write_run(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    write_file(&dir.join("config.snapshot"), cfg.serialize())?;
    write_file(&dir.join("losses.csv"), losses_csv(&outcome.losses))?;
    write_file(&dir.join("metrics.csv"), metrics_csv(outcome))?;
    checkpoint::save(&outcome.store, &dir.join("checkpoint.bin"))
}

/// Trains per `cfg` and writes `config.snapshot`, `losses.csv`,
/// `metrics.csv` and `checkpoint.bin` into a new run directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, val) = load_splits(cfg)?;
    let dir = create_run_dir(Path::new(&cfg.out_dir), &cfg.name)?;
    let mut outcome = train_model(cfg, &train, &val)?;
    write_run(&dir, cfg, &outcome)?;
    outcome.run_dir = Some(dir);
    Ok(outcome)
}
