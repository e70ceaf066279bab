use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::detector::eval::ApSummary;
use crate::detector::model::HeadKind;
use crate::error::Result;
use crate::harness::train::{train_model, write_run};
use crate::harness::{create_run_dir, load_splits, write_file};

/// One row of the sweep: which branches are enhanced and which stages run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    /// `enhancement` (which branches) or `stage` (which block stages).
    pub group: &'static str,
    pub apply_to_cls: bool,
    pub apply_to_reg: bool,
    pub enable_alignment: bool,
    pub enable_separation: bool,
    /// Reference COCO AP of the corresponding full-scale configuration.
    pub reference_ap: f64,
}

const fn variant(name: &'static str, group: &'static str, flags: [bool; 4], reference_ap: f64) -> Variant {
    Variant {
        name,
        group,
        apply_to_cls: flags[0],
        apply_to_reg: flags[1],
        enable_alignment: flags[2],
        enable_separation: flags[3],
        reference_ap,
    }
}

/// The four branch-enhancement settings followed by the three stage
/// ablations, in report order.
pub fn ablation_variants() -> [Variant; 7] {
    [
        variant("enhance_none", "enhancement", [false, false, true, true], 41.2),
        variant("enhance_cls", "enhancement", [true, false, true, true], 41.9),
        variant("enhance_reg", "enhancement", [false, true, true, true], 40.9),
        variant("enhance_both", "enhancement", [true, true, true, true], 42.1),
        variant("without_alignment", "stage", [true, true, false, true], 41.7),
        variant("without_separation", "stage", [true, true, true, false], 41.9),
        variant("full", "stage", [true, true, true, true], 42.1),
    ]
}

impl Variant {
    /// `base` with the multi-branch head and this variant's block flags.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.name = format!("{}-{}", base.name, self.name);
        cfg.model.head = HeadKind::MultiBranch;
        cfg.msil.enabled = true;
        cfg.msil.apply_to_cls = self.apply_to_cls;
        cfg.msil.apply_to_reg = self.apply_to_reg;
        cfg.msil.enable_alignment = self.enable_alignment;
        cfg.msil.enable_separation = self.enable_separation;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: ApSummary,
    pub params: usize,
    pub msil_params: usize,
    pub steps: usize,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,group,AP,AP50,AP75,params,msil_params,reference_coco_ap\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.variant.name, r.variant.group, m.ap, m.ap50, m.ap75, r.params, r.msil_params, r.variant.reference_ap
        );
    }
    s
}

/// Trains every variant from the same seed and data. Variants with identical
/// effective configurations are trained once and share the result. When
/// `dir` is given each variant's artifacts go into a subdirectory of it.
pub fn run_ablation(base: &RunConfig, dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let (train, val) = load_splits(base)?;
    let mut done: Vec<(RunConfig, AblationRow)> = Vec::new();
    let mut rows = Vec::new();
    for v in ablation_variants() {
        let cfg = v.apply(base);
        let key = RunConfig {
            name: String::new(),
            ..cfg.clone()
        };
        if let Some((_, row)) = done.iter().find(|(k, _)| *k == key) {
            rows.push(AblationRow {
                variant: v,
                ..row.clone()
            });
            continue;
        }
        cfg.validate()?;
        let outcome = train_model(&cfg, &train, &val)?;
        if let Some(dir) = dir {
            let sub: PathBuf = dir.join(v.name);
            std::fs::create_dir(&sub).map_err(|e| crate::error::Error::io(&sub, e))?;
            write_run(&sub, &cfg, &outcome)?;
        }
        let row = AblationRow {
            variant: v,
            metrics: outcome.metrics,
            params: outcome.param_count(),
            msil_params: outcome.model.msil_param_count(&outcome.store),
            steps: outcome.losses.len(),
        };
        done.push((key, row.clone()));
        rows.push(row);
    }
    Ok(rows)
}

/// Runs the sweep into a new run directory and writes `ablation.csv`.
pub fn cmd_ablate(base: &RunConfig) -> Result<(PathBuf, Vec<AblationRow>)> {
    base.validate()?;
    let dir = create_run_dir(Path::new(&base.out_dir), &format!("{}-ablate", base.name))?;
    write_file(&dir.join("config.snapshot"), base.serialize())?;
    let rows = run_ablation(base, Some(&dir))?;
    write_file(&dir.join("ablation.csv"), ablation_csv(&rows))?;
    Ok((dir, rows))
}
