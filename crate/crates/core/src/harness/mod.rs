//! End-to-end commands: training, gradient checking, ablation sweeps, heat
//! maps and center statistics. Each command writes into a fresh run
//! directory and never touches earlier outputs.

mod ablate;
mod gradcheck;
mod inspect;
mod train;

pub use ablate::{ablation_variants, cmd_ablate, run_ablation, AblationRow, Variant};
pub use gradcheck::{cmd_gradcheck, gradcheck_config, run_gradcheck, GradcheckOptions, GradcheckReport, GroupReport};
pub use inspect::{cmd_centers, cmd_heatmap, heatmaps, Branch, FeatureStage, HeatmapRequest};
pub use train::{cmd_train, evaluate, predict, train_model, TrainOutcome};

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::config::RunConfig;
use crate::detector::data::{generate_dataset, read_dataset, Sample};
use crate::error::{Error, Result};

/// Creates `{out_dir}/{name}-{unix seconds}`, adding `-1`, `-2`, ... if that
/// directory already exists.
pub fn create_run_dir(out_dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let base = format!("{name}-{ts}");
    for attempt in 0.. {
        let dir = if attempt == 0 {
            out_dir.join(&base)
        } else {
            out_dir.join(format!("{base}-{attempt}"))
        };
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("unbounded loop")
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Training and validation splits: the first `train_images` samples and the
/// `val_images` after them, generated from the seed or read from disk.
pub fn load_splits(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let d = &cfg.dataset;
    let mut all = if d.path.is_empty() {
        generate_dataset(cfg.seed, &cfg.gen_params())?
    } else {
        let samples = read_dataset(Path::new(&d.path))?;
        if let Some(s) = samples.iter().find(|s| s.scene.size != d.image_size) {
            return Err(Error::ConfigField {
                field: "dataset.image_size".into(),
                msg: format!("image {} on disk is {}×{}", s.id, s.scene.size, s.scene.size),
            });
        }
        samples
    };
    let need = d.train_images + d.val_images;
    if all.len() < need {
        return Err(Error::ConfigField {
            field: "dataset.train_images".into(),
            msg: format!("dataset has {} images, splits need {need}", all.len()),
        });
    }
    all.truncate(need);
    let val = all.split_off(d.train_images);
    Ok((all, val))
}
