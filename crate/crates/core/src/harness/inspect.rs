use std::path::{Path, PathBuf};

use crate::autograd::Tape;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::detector::data::{read_dataset, Sample};
use crate::detector::model::Model;
use crate::detector::stats::{quadrant_stats, QuadrantStats};
use crate::error::{Error, Result};
use crate::harness::{create_run_dir, load_splits, write_file};
use crate::heatmap::{export_attention_heatmap, HeatMap};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Cls,
    Reg,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Cls => "cls",
            Branch::Reg => "reg",
        }
    }
}

/// Branch features before or after the interaction block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureStage {
    Before,
    After,
}

impl FeatureStage {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureStage::Before => "before",
            FeatureStage::After => "after",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapRequest {
    pub checkpoint: PathBuf,
    pub image_id: usize,
    pub branches: Vec<Branch>,
    pub stages: Vec<FeatureStage>,
}

/// Heat maps of one image's branch features under the given parameters,
/// keyed by `(branch, stage)`.
pub fn heatmaps(
    model: &Model,
    store: &ParamStore,
    sample: &Sample,
    branches: &[Branch],
    stages: &[FeatureStage],
) -> Result<Vec<(Branch, FeatureStage, HeatMap)>> {
    let mut tape = Tape::new();
    let x = tape.constant(sample.image.clone());
    let out = model.forward(&mut tape, store, x)?;
    let f = out
        .features
        .ok_or_else(|| Error::InvalidArgument("heat maps need the multi-branch head".into()))?;
    let mut maps = Vec::new();
    for &b in branches {
        for &s in stages {
            let v = match (b, s) {
                (Branch::Cls, FeatureStage::Before) => f.cls_before,
                (Branch::Cls, FeatureStage::After) => f.cls_after,
                (Branch::Reg, FeatureStage::Before) => f.reg_before,
                (Branch::Reg, FeatureStage::After) => f.reg_after,
            };
            maps.push((b, s, export_attention_heatmap(tape.value(v))?));
        }
    }
    Ok(maps)
}

/// Loads `req.checkpoint` into the model described by `cfg` and writes
/// `{image_id}_{branch}_{stage}.pgm` / `.csv` for each requested pair into a
/// new run directory.
pub fn cmd_heatmap(cfg: &RunConfig, req: &HeatmapRequest) -> Result<PathBuf> {
    cfg.validate()?;
    let mut store = ParamStore::new(cfg.seed);
    let model = Model::new(&mut store, cfg.model_config())?;
    let saved = checkpoint::load(&req.checkpoint)?;
    let copied = store.load_from(&saved).map_err(|e| Error::Format {
        what: "checkpoint",
        msg: format!("{}: {e}", req.checkpoint.display()),
    })?;
    if copied != store.len() || saved.len() != store.len() {
        return Err(Error::Format {
            what: "checkpoint",
            msg: format!(
                "{} holds {} tensors, {} of which match the {} configured",
                req.checkpoint.display(),
                saved.len(),
                copied,
                store.len()
            ),
        });
    }
    let (train, val) = load_splits(cfg)?;
    let sample = train
        .iter()
        .chain(&val)
        .find(|s| s.id == req.image_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no image with id {}", req.image_id)))?;
    let maps = heatmaps(&model, &store, sample, &req.branches, &req.stages)?;
    let dir = create_run_dir(Path::new(&cfg.out_dir), &format!("{}-heatmap", cfg.name))?;
    for (b, s, map) in maps {
        map.save(&dir, &format!("{}_{}_{}", req.image_id, b.as_str(), s.as_str()))?;
    }
    Ok(dir)
}

/// Quadrant counts of object centers, from a dataset directory or, without
/// one, from the configured dataset. Writes `centers.csv`.
pub fn cmd_centers(cfg: &RunConfig, dataset: Option<&Path>) -> Result<(PathBuf, QuadrantStats)> {
    cfg.validate()?;
    let samples = match dataset {
        Some(p) => read_dataset(p)?,
        None => {
            let (mut train, val) = load_splits(cfg)?;
            train.extend(val);
            train
        }
    };
    let stats = quadrant_stats(samples.iter().map(|s| &s.scene));
    let dir = create_run_dir(Path::new(&cfg.out_dir), &format!("{}-centers", cfg.name))?;
    write_file(&dir.join("centers.csv"), stats.to_csv())?;
    Ok((dir, stats))
}
