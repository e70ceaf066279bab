//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Runs without the libtest harness so the lines always print.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use msil_core::autograd::Tape;
use msil_core::boxes::BoxCorners;
use msil_core::checkpoint;
use msil_core::config::RunConfig;
use msil_core::detector::data::{generate_dataset, GenParams, ObjectSpec, SceneSpec};
use msil_core::detector::model::{HeadKind, Model, ModelConfig};
use msil_core::detector::postprocess::{nms, Detection};
use msil_core::detector::stats::quadrant_stats;
use msil_core::detector::targets::assign_targets;
use msil_core::harness::{self, GradcheckOptions};
use msil_core::heatmap::export_attention_heatmap;
use msil_core::losses::{
    dense_loss, focal_loss, giou_loss, iou_loss, ltrb_loss_with_grad, AuxLoss, ClsLoss, DenseTargets, LossSpec, RegLoss,
};
use msil_core::msil::{msil_forward, MsilConfig, MsilParams};
use msil_core::{ParamStore, Shape, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.params_mut() {
        p.tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-scale..scale))
}

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("msil-acceptance-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn small_model(msil: Option<MsilConfig>) -> ModelConfig {
    ModelConfig {
        channels: 8,
        backbone_width: 4,
        classes: 2,
        head: HeadKind::MultiBranch,
        msil: msil.map(|m| MsilConfig {
            channels: 8,
            cam_reduction: 2,
            ..m
        }),
        ..ModelConfig::default()
    }
}

fn c1_gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = harness::run_gradcheck(&harness::gradcheck_config(), &GradcheckOptions::default())
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let skipped: usize = report.groups.iter().map(|g| g.skipped).sum();
    let checked: usize = report.groups.iter().map(|g| g.checked).sum();
    check(
        report.pass(),
        format!(
            "failing groups: {:?}",
            report
                .groups
                .iter()
                .filter(|g| !g.pass)
                .map(|g| &g.name)
                .collect::<Vec<_>>()
        ),
    )?;
    check(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} parameter groups, {checked} entries ({skipped} skipped at kinks), losses [{}], max rel err {:.2e}, {:.1}s",
        report.groups.len(),
        report.variants.join("; "),
        report.max_rel_err(),
        elapsed.as_secs_f64()
    ))
}

fn c2_reduction_identity() -> Outcome {
    let off = MsilConfig {
        apply_to_cls: false,
        apply_to_reg: false,
        ..MsilConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100u64 {
        let mut s_plain = ParamStore::new(trial);
        let plain = Model::new(&mut s_plain, small_model(None)).map_err(|e| e.to_string())?;
        let mut s_off = ParamStore::new(trial);
        let reduced = Model::new(&mut s_off, small_model(Some(off))).map_err(|e| e.to_string())?;
        randomize(&mut s_plain, trial, 0.5);
        randomize(&mut s_off, trial, 0.5);
        let x = random_tensor(Shape::new(1, 1, 16, 16), &mut rng, 1.0);
        let a = harness::predict(&plain, &s_plain, x.clone()).map_err(|e| e.to_string())?;
        let b = harness::predict(&reduced, &s_off, x).map_err(|e| e.to_string())?;
        for (u, v) in a.iter().zip(&b) {
            let same = u.data().iter().zip(v.data()).all(|(p, q)| p.to_bits() == q.to_bits());
            check(same, format!("trial {trial}: outputs differ"))?;
        }
    }
    Ok("100 random inputs, class/box/center-ness maps bit-identical".into())
}

fn c3_attention_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut values = 0usize;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for trial in 0..1000u64 {
        let cfg = MsilConfig {
            channels: 8,
            cam_reduction: 2,
            enable_alignment: trial % 4 != 1,
            enable_separation: trial % 4 != 2,
            ..MsilConfig::default()
        };
        let mut store = ParamStore::new(trial);
        let params = MsilParams::new(&mut store, "msil", &cfg).map_err(|e| e.to_string())?;
        // wide parameter and input ranges push the gates toward saturation
        let scale = [0.3, 1.0, 3.0][trial as usize % 3];
        randomize(&mut store, trial ^ 0xa77, scale);
        let mut tape = Tape::new();
        let shape = Shape::new(1, 8, 5, 5);
        let f_cls = tape.constant(random_tensor(shape, &mut rng, 4.0 * scale));
        let f_reg = tape.constant(random_tensor(shape, &mut rng, 4.0 * scale));
        let out = msil_forward(&mut tape, &store, params.as_ref(), &cfg, f_cls, f_reg).map_err(|e| e.to_string())?;
        for (attn, orig, enh) in [
            (out.attention.cls, f_cls, out.class_feat),
            (out.attention.reg, f_reg, out.box_feat),
        ] {
            let a = attn.ok_or("missing attention map")?;
            for &v in tape.value(a).data() {
                check(v > 0.0 && v < 1.0, format!("trial {trial}: attention {v}"))?;
                lo = lo.min(v);
                hi = hi.max(v);
                values += 1;
            }
            for (e, o) in tape.value(enh).data().iter().zip(tape.value(orig).data()) {
                check(e.abs() <= o.abs(), format!("trial {trial}: |{e}| > |{o}|"))?;
            }
        }
    }
    Ok(format!(
        "1000 passes, {values} attention values, min {lo:.3e}, max 1 - {:.3e}, |enhanced| ≤ |original|",
        1.0 - hi
    ))
}

/// Gradient norm of a classification-side loss w.r.t. the regression trunk.
fn cls_grad_on_reg_trunk(msil: Option<MsilConfig>, seed: u64) -> Result<f64, String> {
    let mut store = ParamStore::new(seed);
    let model = Model::new(&mut store, small_model(msil)).map_err(|e| e.to_string())?;
    randomize(&mut store, seed, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(Shape::new(2, 1, 16, 16), &mut rng, 1.0));
    let out = model.forward(&mut tape, &store, x).map_err(|e| e.to_string())?;
    let probs = tape.sigmoid(out.class_logits);
    let loss = tape.sum(probs);
    tape.backward(loss).map_err(|e| e.to_string())?;
    let mut sq = 0.0;
    for name in [
        "head.reg1.weight",
        "head.reg1.bias",
        "head.reg2.weight",
        "head.reg2.bias",
    ] {
        let id = store.find(name).ok_or(format!("no {name}"))?;
        if let Some(g) = tape.param_grad(id) {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(sq.sqrt())
}

fn c4_cross_branch_coupling() -> Outcome {
    let on = MsilConfig {
        apply_to_cls: true,
        apply_to_reg: false,
        ..MsilConfig::default()
    };
    let mut min_on = f64::INFINITY;
    for seed in 0..10 {
        let g_on = cls_grad_on_reg_trunk(Some(on), seed)?;
        let g_full = cls_grad_on_reg_trunk(Some(MsilConfig::default()), seed)?;
        let g_off = cls_grad_on_reg_trunk(None, seed)?;
        check(
            g_on > 1e-12 && g_full > 1e-12,
            format!("seed {seed}: coupled norms {g_on:e}, {g_full:e}"),
        )?;
        check(g_off == 0.0, format!("seed {seed}: uncoupled norm {g_off:e}"))?;
        min_on = min_on.min(g_on).min(g_full);
    }
    Ok(format!(
        "10 random inputs: coupled ‖∂L_cls/∂θ_reg‖ ≥ {min_on:.3e}, without the block exactly 0"
    ))
}

fn c5_loss_oracles() -> Outcome {
    // independent arithmetic
    let focal_oracle = 0.25 * (1.0f64 - 0.9).powi(2) * -(0.9f64).ln();
    let focal = focal_loss(&[0.9], 1, 0.25, 2.0);
    check(
        (focal - focal_oracle).abs() <= 1e-9,
        format!("focal {focal} vs {focal_oracle}"),
    )?;
    check(
        format!("{focal:.3e}") == "2.634e-4",
        format!("focal rounds to {focal:.3e}"),
    )?;

    let a = BoxCorners::new(0.0, 0.0, 2.0, 2.0);
    let b = BoxCorners::new(1.0, 1.0, 3.0, 3.0);
    let (inter, union) = (1.0 * 1.0, 4.0 + 4.0 - 1.0);
    let iou = a.iou(&b);
    check((iou - inter / union).abs() <= 1e-12, format!("IoU {iou}"))?;
    check((iou - 1.0 / 7.0).abs() <= 1e-12, format!("IoU {iou} vs 1/7"))?;
    check((iou_loss(&a, &b) - 6.0 / 7.0).abs() <= 1e-12, "iou_loss vs 6/7")?;

    let c = BoxCorners::new(0.0, 0.0, 1.0, 1.0);
    let d = BoxCorners::new(2.0, 2.0, 3.0, 3.0);
    let (hull, union) = (3.0 * 3.0, 1.0 + 1.0);
    let giou_oracle = 1.0 - (0.0 - (hull - union) / hull);
    let gl = giou_loss(&c, &d);
    check(
        (gl - giou_oracle).abs() <= 1e-12 && (gl - 16.0 / 9.0).abs() <= 1e-12,
        format!("GIoU loss {gl}"),
    )?;

    // the same pair as (l, t, r, b) distances from the point (1.5, 1.5)
    let (v, _, _) = ltrb_loss_with_grad(RegLoss::Iou, [1.5, 1.5, 0.5, 0.5], [0.5, 0.5, 1.5, 1.5]);
    check((v - 6.0 / 7.0).abs() <= 1e-12, format!("ltrb iou loss {v}"))?;
    Ok(format!(
        "focal {focal:.6e} (Δ {:.1e}), IoU {iou:.15} = 1/7, GIoU loss {gl:.15} = 16/9",
        (focal - focal_oracle).abs()
    ))
}

fn c6_desk_training() -> Outcome {
    let base = RunConfig::default();
    let (train, val) = harness::load_splits(&base).map_err(|e| e.to_string())?;
    check(
        train.len() == 400 && val.len() == 100 && base.dataset.classes == 3 && base.dataset.image_size == 64,
        "dataset shape",
    )?;
    let start = Instant::now();
    let mut plain_cfg = base.clone();
    plain_cfg.msil.enabled = false;
    let plain = harness::train_model(&plain_cfg, &train, &val).map_err(|e| e.to_string())?;
    let t_plain = start.elapsed();
    let msil = harness::train_model(&base, &train, &val).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (p, m) = (plain.metrics, msil.metrics);
    let line = format!(
        "multi-branch AP50 {:.4} (AP {:.4}, {:.0}s); +interaction AP50 {:.4} (AP {:.4}, {:.0}s); ΔAP {:+.4}, ΔAP50 {:+.4} (not asserted)",
        p.ap50,
        p.ap,
        t_plain.as_secs_f64(),
        m.ap50,
        m.ap,
        (elapsed - t_plain).as_secs_f64(),
        m.ap - p.ap,
        m.ap50 - p.ap50
    );
    check(p.ap50 >= 0.80 && m.ap50 >= 0.80, line.clone())?;
    check(
        elapsed < Duration::from_secs(15 * 60),
        format!("{line}; total {elapsed:?}"),
    )?;
    Ok(line)
}

fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig {
        name: "acceptance".into(),
        epochs: 2,
        batch_size: 4,
        ..RunConfig::default()
    };
    cfg.dataset.train_images = 24;
    cfg.dataset.val_images = 8;
    cfg.dataset.image_size = 32;
    cfg.model.channels = 8;
    cfg.model.backbone_width = 4;
    cfg.msil.cam_reduction = 2;
    cfg.optim.warmup_steps = 5;
    cfg
}

fn c7_ablation_structure() -> Outcome {
    let cfg = small_run_config();
    let rows = harness::run_ablation(&cfg, None).map_err(|e| e.to_string())?;
    check(rows.len() == 7, format!("{} rows", rows.len()))?;
    let names: Vec<&str> = rows.iter().map(|r| r.variant.name).collect();
    let expected = harness::ablation_variants().map(|v| v.name);
    check(names == expected, format!("variants {names:?}"))?;
    check(
        rows.iter().all(|r| r.steps == 2 * 6),
        "a variant did not complete every step",
    )?;
    let mut plain_cfg = cfg.clone();
    plain_cfg.msil.enabled = false;
    let (train, val) = harness::load_splits(&plain_cfg).map_err(|e| e.to_string())?;
    let plain = harness::train_model(&plain_cfg, &train, &val).map_err(|e| e.to_string())?;
    let none = &rows[0];
    let same = |a: f64, b: f64| a.to_bits() == b.to_bits();
    check(
        same(none.metrics.ap, plain.metrics.ap)
            && same(none.metrics.ap50, plain.metrics.ap50)
            && same(none.metrics.ap75, plain.metrics.ap75),
        format!("{:?} vs {:?}", none.metrics, plain.metrics),
    )?;
    check(
        none.params == plain.param_count() && none.msil_params == 0,
        "parameter counts differ",
    )?;
    let both = &rows[3];
    check(
        none.msil_params < both.msil_params,
        "enhanced variant has no extra parameters",
    )?;
    Ok(format!(
        "7 variants [{}], enhance_none == plain multi-branch bit-for-bit (AP {:.4})",
        names.join(", "),
        plain.metrics.ap
    ))
}

fn random_scene(rng: &mut ChaCha8Rng, size: usize, classes: usize) -> SceneSpec {
    let n = rng.random_range(0..6usize);
    let objects = (0..n)
        .map(|_| {
            let w = rng.random_range(2.0..size as f64 / 2.0);
            let h = rng.random_range(2.0..size as f64 / 2.0);
            let x1 = (rng.random_range(0.0..size as f64 - w) * 2.0).round() / 2.0;
            let y1 = (rng.random_range(0.0..size as f64 - h) * 2.0).round() / 2.0;
            ObjectSpec {
                class: rng.random_range(1..=classes),
                bbox: BoxCorners::new(x1, y1, x1 + w.round(), y1 + h.round()),
                appearance_seed: 0,
            }
        })
        .collect();
    SceneSpec {
        size,
        objects,
        noise: 0.0,
    }
}

fn nms_oracle(cands: &[Detection], thr: f64) -> Vec<Detection> {
    let n = cands.len();
    let mut idx: Vec<usize> = (0..n).collect();
    // rank: higher score first, then lower location, then lower class
    for i in 0..n {
        for j in 0..n - 1 - i {
            let (a, b) = (&cands[idx[j]], &cands[idx[j + 1]]);
            let after = a.score < b.score
                || (a.score == b.score && (a.location > b.location || (a.location == b.location && a.class > b.class)));
            if after {
                idx.swap(j, j + 1);
            }
        }
    }
    let mut suppressed = vec![false; n];
    let mut out = Vec::new();
    for (r, &i) in idx.iter().enumerate() {
        if suppressed[r] {
            continue;
        }
        out.push(cands[i].clone());
        for (s, &j) in idx.iter().enumerate().skip(r + 1) {
            if cands[j].class == cands[i].class && cands[i].bbox.iou(&cands[j].bbox) > thr {
                suppressed[s] = true;
            }
        }
    }
    out
}

fn targets_oracle(scene: &SceneSpec, stride: usize) -> DenseTargets {
    let g = scene.size / stride;
    let mut t = DenseTargets::background(g, g);
    let s = stride as f64;
    for gy in 0..g {
        for gx in 0..g {
            let px = (gx * stride) as f64 + (stride / 2) as f64;
            let py = (gy * stride) as f64 + (stride / 2) as f64;
            let mut best: Option<usize> = None;
            for (k, o) in scene.objects.iter().enumerate() {
                let b = &o.bbox;
                let inside = px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2;
                let area = (b.x2 - b.x1) * (b.y2 - b.y1);
                if inside
                    && best.is_none_or(|j| {
                        let c = &scene.objects[j].bbox;
                        area < (c.x2 - c.x1) * (c.y2 - c.y1)
                    })
                {
                    best = Some(k);
                }
            }
            if let Some(k) = best {
                let o = &scene.objects[k];
                let (l, tt, r, bb) = (
                    (px - o.bbox.x1) / s,
                    (py - o.bbox.y1) / s,
                    (o.bbox.x2 - px) / s,
                    (o.bbox.y2 - py) / s,
                );
                let i = gy * g + gx;
                t.labels[i] = o.class;
                t.boxes[i] = [l, tt, r, bb];
                t.centerness[i] = ((l.min(r) / l.max(r)) * (tt.min(bb) / tt.max(bb))).sqrt();
            }
        }
    }
    t
}

/// Scalar per-location reimplementation of the total loss.
fn loss_oracle(cls: &Tensor, boxes: &Tensor, ctr: &Tensor, targets: &[DenseTargets], spec: &LossSpec) -> f64 {
    let clamp = |p: f64| p.clamp(1e-7, 1.0 - 1e-7);
    let s = cls.shape();
    let (mut lc, mut lr, mut la, mut npos) = (0.0, 0.0, 0.0, 0usize);
    for (n, t) in targets.iter().enumerate() {
        for y in 0..s.h {
            for x in 0..s.w {
                let label = t.labels[y * s.w + x];
                for k in 0..s.c {
                    let p = clamp(1.0 / (1.0 + (-cls.get(n, k, y, x)).exp()));
                    let pos = label == k + 1;
                    lc += match spec.cls {
                        ClsLoss::Focal { alpha, gamma } => {
                            if pos {
                                -alpha * (1.0 - p).powf(gamma) * p.ln()
                            } else {
                                -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
                            }
                        }
                        ClsLoss::CrossEntropy => {
                            if pos {
                                -p.ln()
                            } else {
                                -(1.0 - p).ln()
                            }
                        }
                    };
                }
                if label == 0 {
                    continue;
                }
                npos += 1;
                let pb = [0, 1, 2, 3].map(|j| boxes.get(n, j, y, x));
                let tb = t.boxes[y * s.w + x];
                // corner boxes around the origin
                let pc = BoxCorners::new(-pb[0], -pb[1], pb[2], pb[3]);
                let tc = BoxCorners::new(-tb[0], -tb[1], tb[2], tb[3]);
                let iw = (pc.x2.min(tc.x2) - pc.x1.max(tc.x1)).max(0.0);
                let ih = (pc.y2.min(tc.y2) - pc.y1.max(tc.y1)).max(0.0);
                let inter = iw * ih;
                let union = (pb[0] + pb[2]) * (pb[1] + pb[3]) + (tb[0] + tb[2]) * (tb[1] + tb[3]) - inter;
                let iou = inter / union;
                lr += match spec.reg {
                    RegLoss::Iou => 1.0 - iou,
                    RegLoss::Giou => {
                        let hull = (pc.x2.max(tc.x2) - pc.x1.min(tc.x1)) * (pc.y2.max(tc.y2) - pc.y1.min(tc.y1));
                        1.0 - (iou - (hull - union) / hull)
                    }
                };
                let u = t.centerness[y * s.w + x];
                let q = clamp(1.0 / (1.0 + (-ctr.get(n, 0, y, x)).exp()));
                let w: f64 = spec.aux.iter().map(|&(AuxLoss::CenternessBce, w)| w).sum();
                la += w * -(u * q.ln() + (1.0 - u) * (1.0 - q).ln());
            }
        }
    }
    let norm = npos.max(1) as f64;
    lr / norm + spec.cls_weight * lc / norm + la / norm
}

fn c8_brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_loss = 0.0f64;
    let mut survivors = 0;
    for inst in 0..50 {
        // NMS with tied scores and heavy overlap
        let n = rng.random_range(1..40usize);
        let cands: Vec<Detection> = (0..n)
            .map(|i| {
                let x = rng.random_range(0.0..20.0f64).round();
                let y = rng.random_range(0.0..20.0f64).round();
                Detection {
                    class: rng.random_range(1..=3),
                    score: (rng.random_range(0.05..1.0f64) * 8.0).round() / 8.0,
                    bbox: BoxCorners::new(
                        x,
                        y,
                        x + rng.random_range(2.0..12.0f64).round(),
                        y + rng.random_range(2.0..12.0f64).round(),
                    ),
                    centerness: None,
                    location: (i * 7919) % 97,
                }
            })
            .collect();
        let thr = [0.3, 0.5, 0.7][inst % 3];
        let got = nms(cands.clone(), thr);
        check(got == nms_oracle(&cands, thr), format!("instance {inst}: NMS differs"))?;
        let mut shuffled = cands.clone();
        shuffled.reverse();
        check(
            nms(shuffled, thr) == got,
            format!("instance {inst}: NMS order-dependent"),
        )?;
        survivors += got.len();

        // targets and quadrants
        let scenes: Vec<SceneSpec> = (0..4).map(|_| random_scene(&mut rng, 32, 3)).collect();
        for sc in &scenes {
            let t = assign_targets(sc, 4).map_err(|e| e.to_string())?;
            check(t == targets_oracle(sc, 4), format!("instance {inst}: targets differ"))?;
        }
        let stats = quadrant_stats(&scenes);
        let mut counts = std::collections::BTreeMap::<usize, [usize; 4]>::new();
        for sc in &scenes {
            let mid = sc.size as f64 / 2.0;
            for o in &sc.objects {
                let cx = (o.bbox.x1 + o.bbox.x2) / 2.0;
                let cy = (o.bbox.y1 + o.bbox.y2) / 2.0;
                let q = if cy <= mid {
                    if cx <= mid {
                        0
                    } else {
                        1
                    }
                } else if cx <= mid {
                    2
                } else {
                    3
                };
                counts.entry(o.class).or_default()[q] += 1;
            }
        }
        check(stats.per_class == counts, format!("instance {inst}: quadrants differ"))?;

        // total loss
        let targets: Vec<DenseTargets> = scenes[..2]
            .iter()
            .map(|s| assign_targets(s, 4).expect("stride divides"))
            .collect();
        let cls = random_tensor(Shape::new(2, 3, 8, 8), &mut rng, 4.0);
        let boxes = Tensor::from_fn(Shape::new(2, 4, 8, 8), |_, _, _, _| rng.random_range(0.1..5.0));
        let ctr = random_tensor(Shape::new(2, 1, 8, 8), &mut rng, 3.0);
        let spec = if inst % 2 == 0 {
            LossSpec::default()
        } else {
            LossSpec {
                cls: ClsLoss::CrossEntropy,
                reg: RegLoss::Giou,
                aux: vec![(AuxLoss::CenternessBce, 0.7)],
                cls_weight: 1.5,
            }
        };
        let got = dense_loss(&cls, &boxes, &ctr, &targets, &spec)
            .map_err(|e| e.to_string())?
            .terms
            .total;
        let want = loss_oracle(&cls, &boxes, &ctr, &targets, &spec);
        let rel = (got - want).abs() / want.abs().max(1.0);
        worst_loss = worst_loss.max(rel);
        check(rel <= 1e-12, format!("instance {inst}: loss {got} vs oracle {want}"))?;
    }
    Ok(format!(
        "50 instances: NMS ({survivors} survivors, permutation-invariant), targets, quadrants identical; total loss within {worst_loss:.1e} of scalar loop"
    ))
}

/// Minimal binary PGM reader: header tokens separated by whitespace, `#`
/// comments, a single whitespace byte before the raster.
fn read_p5(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("bad magic".into());
    }
    let w: usize = token()?.parse().map_err(|_| "bad width")?;
    let h: usize = token()?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token()?.parse().map_err(|_| "bad maxval")?;
    let raster = bytes.get(pos + 1..).ok_or("missing raster")?.to_vec();
    if raster.len() != w * h || maxval == 0 || maxval > 255 {
        return Err(format!("raster {} bytes for {w}×{h}, maxval {maxval}", raster.len()));
    }
    Ok((w, h, maxval, raster))
}

fn c9_formats() -> Outcome {
    // checkpoint
    let mut store = ParamStore::new(9);
    Model::new(&mut store, small_model(Some(MsilConfig::default()))).map_err(|e| e.to_string())?;
    randomize(&mut store, 9, 1e3);
    store
        .tensor_mut(store.find("head.cls_pred.bias").expect("exists"))
        .data_mut()[0] = -0.0;
    let dir = scratch_dir("formats");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("checkpoint.bin");
    checkpoint::save(&store, &path).map_err(|e| e.to_string())?;
    let back = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let bits = |s: &ParamStore| -> Vec<(String, Shape, Vec<u64>)> {
        s.params()
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    p.tensor.shape(),
                    p.tensor.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    };
    check(bits(&store) == bits(&back), "checkpoint round trip not bit-exact")?;
    check(
        checkpoint::encode(&back) == std::fs::read(&path).map_err(|e| e.to_string())?,
        "re-encoding differs",
    )?;

    // heat map through the reference reader
    let mut model_store = ParamStore::new(1);
    let model = Model::new(&mut model_store, small_model(Some(MsilConfig::default()))).map_err(|e| e.to_string())?;
    randomize(&mut model_store, 1, 0.5);
    let sample = generate_dataset(1, &GenParams::new(1, 2, 32))
        .map_err(|e| e.to_string())?
        .remove(0);
    let mut tape = Tape::new();
    let x = tape.constant(sample.image.clone());
    let out = model.forward(&mut tape, &model_store, x).map_err(|e| e.to_string())?;
    let feats = out.features.ok_or("no branch features")?;
    let map = export_attention_heatmap(tape.value(feats.cls_after)).map_err(|e| e.to_string())?;
    map.save(&dir, "0_cls_after").map_err(|e| e.to_string())?;
    let (w, h, maxval, raster) = read_p5(&std::fs::read(dir.join("0_cls_after.pgm")).map_err(|e| e.to_string())?)?;
    check((w, h) == (8, 8), format!("PGM {w}×{h}, grid 8×8"))?;
    let expected: Vec<u8> = map.values.iter().map(|v| (v * maxval as f64).round() as u8).collect();
    check(raster == expected, "PGM raster differs from map values")?;

    // config
    let mut cfg = RunConfig::default();
    cfg.seed = 12345;
    cfg.msil.apply_to_reg = false;
    cfg.optim.lr = 0.0123456789;
    cfg.optim.decay_epochs = vec![3, 7, 9];
    cfg.loss.reg = "giou".into();
    let once = RunConfig::parse(&cfg.serialize()).map_err(|e| e.to_string())?;
    let twice = RunConfig::parse(&once.serialize()).map_err(|e| e.to_string())?;
    check(once == cfg && twice == once, "config round trip changed a value")?;
    let _ = std::fs::remove_dir_all(&dir);
    Ok(format!(
        "checkpoint {} tensors bit-exact; PGM P5 {w}×{h} maxval {maxval} parses; config parse→serialize→parse identity",
        store.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", c1_gradient_suite),
        ("reduction identity", c2_reduction_identity),
        ("attention bounds", c3_attention_bounds),
        ("cross-branch coupling", c4_cross_branch_coupling),
        ("loss oracles", c5_loss_oracles),
        ("desk-scale training", c6_desk_training),
        ("ablation structure", c7_ablation_structure),
        ("brute-force equivalences", c8_brute_force),
        ("format conformance", c9_formats),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        match run() {
            Ok(detail) => println!(
                "PASS criterion {}: {name}: {detail} [{:.1}s]",
                i + 1,
                start.elapsed().as_secs_f64()
            ),
            Err(detail) => {
                failed += 1;
                println!(
                    "FAIL criterion {}: {name}: {detail} [{:.1}s]",
                    i + 1,
                    start.elapsed().as_secs_f64()
                );
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
