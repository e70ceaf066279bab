//! Multi-semantic interaction between the classification and regression
//! branches: alignment through a shared residual encoder, fusion by channel
//! concatenation, and per-branch separation gated by channel attention.
//!
//! ```text
//! align_x   = conv(enc2(F_x + enc(F_x)))             x in {cls, reg}
//! fusion    = fuse(concat(align_reg, align_cls))
//! attn_x    = sigmoid(dec_x(cam_x(fusion) * fusion))
//! out_x     = F_x * attn_x
//! cam(F)    = sigmoid(mlp(avg(F)) + mlp(max(F)))
//! ```

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ChannelMlp, Conv2d};
use crate::params::{Init, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsilConfig {
    pub channels: usize,
    pub enable_alignment: bool,
    pub enable_separation: bool,
    pub apply_to_cls: bool,
    pub apply_to_reg: bool,
    /// Share `enc2` and `conv` between branches (as `enc` always is).
    pub share_encoder_stack: bool,
    pub cam_reduction: usize,
}

impl Default for MsilConfig {
    fn default() -> Self {
        MsilConfig {
            channels: 16,
            enable_alignment: true,
            enable_separation: true,
            apply_to_cls: true,
            apply_to_reg: true,
            share_encoder_stack: true,
            cam_reduction: 4,
        }
    }
}

impl MsilConfig {
    /// False when neither branch is enhanced; the block is then the identity.
    pub fn is_active(&self) -> bool {
        self.apply_to_cls || self.apply_to_reg
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidArgument("msil channels must be positive".into()));
        }
        if self.cam_reduction == 0 || !self.channels.is_multiple_of(self.cam_reduction) {
            return Err(Error::InvalidArgument(format!(
                "msil channels {} not divisible by cam reduction {}",
                self.channels, self.cam_reduction
            )));
        }
        Ok(())
    }
}

/// Shared residual encoder plus the `enc2`/`conv` stack, indexed `[reg, cls]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub enc: Conv2d,
    pub enc2: [Conv2d; 2],
    pub conv: [Conv2d; 2],
}

/// Channel attention followed by a 1×1 decoder for one branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchGate {
    pub cam: ChannelMlp,
    pub decoder: Conv2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Separation {
    PerBranch {
        cls: Option<BranchGate>,
        reg: Option<BranchGate>,
    },
    /// One decoder, no channel attention, same gate for both branches.
    Shared { decoder: Conv2d },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsilParams {
    pub alignment: Option<Alignment>,
    pub fusion: Conv2d,
    pub separation: Separation,
}

impl MsilParams {
    /// Registers only the parameters the configuration actually uses; returns
    /// `None` for an inactive configuration.
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &MsilConfig) -> Result<Option<Self>> {
        cfg.validate()?;
        if !cfg.is_active() {
            return Ok(None);
        }
        let c = cfg.channels;
        let conv3 = |store: &mut ParamStore, name: &str| {
            Conv2d::new(store, &format!("{prefix}.{name}"), c, c, 3, Init::FanInUniform)
        };
        let alignment = if cfg.enable_alignment {
            let enc = conv3(store, "enc")?;
            let (enc2, conv) = if cfg.share_encoder_stack {
                let e = conv3(store, "enc2")?;
                let v = conv3(store, "conv")?;
                ([e, e], [v, v])
            } else {
                (
                    [conv3(store, "enc2_reg")?, conv3(store, "enc2_cls")?],
                    [conv3(store, "conv_reg")?, conv3(store, "conv_cls")?],
                )
            };
            Some(Alignment { enc, enc2, conv })
        } else {
            None
        };
        let fusion = Conv2d::new(store, &format!("{prefix}.fusion"), 2 * c, c, 1, Init::FanInUniform)?;
        let decoder = |store: &mut ParamStore, name: &str| {
            Conv2d::new(store, &format!("{prefix}.{name}"), c, c, 1, Init::Constant(0.0))
        };
        let separation = if cfg.enable_separation {
            let gate = |store: &mut ParamStore, branch: &str| -> Result<BranchGate> {
                Ok(BranchGate {
                    cam: ChannelMlp::new(store, &format!("{prefix}.cam_{branch}"), c, cfg.cam_reduction)?,
                    decoder: decoder(store, &format!("dec_{branch}"))?,
                })
            };
            Separation::PerBranch {
                cls: cfg.apply_to_cls.then(|| gate(store, "cls")).transpose()?,
                reg: cfg.apply_to_reg.then(|| gate(store, "reg")).transpose()?,
            }
        } else {
            Separation::Shared {
                decoder: decoder(store, "dec_shared")?,
            }
        };
        Ok(Some(MsilParams {
            alignment,
            fusion,
            separation,
        }))
    }
}

fn check_pair(tape: &Tape, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op: "msil branches",
            lhs: sa,
            rhs: sb,
        });
    }
    Ok(())
}

/// Returns `(reg_align, cls_align)`; the inputs unchanged without alignment.
pub fn semantic_align(
    tape: &mut Tape,
    store: &ParamStore,
    alignment: Option<&Alignment>,
    f_reg: Var,
    f_cls: Var,
) -> Result<(Var, Var)> {
    check_pair(tape, f_reg, f_cls)?;
    let Some(a) = alignment else {
        return Ok((f_reg, f_cls));
    };
    let mut out = [f_reg; 2];
    for (i, f) in [f_reg, f_cls].into_iter().enumerate() {
        let e = a.enc.forward(tape, store, f)?;
        let residual = tape.add(f, e)?;
        let e2 = a.enc2[i].forward(tape, store, residual)?;
        out[i] = a.conv[i].forward(tape, store, e2)?;
    }
    Ok((out[0], out[1]))
}

pub fn semantic_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    fusion: &Conv2d,
    reg_align: Var,
    cls_align: Var,
) -> Result<Var> {
    check_pair(tape, reg_align, cls_align)?;
    let cat = tape.concat_channels(reg_align, cls_align)?;
    fusion.forward(tape, store, cat)
}

/// Channel weights N×C×1×1 in (0, 1); the MLP is shared by both pooled paths.
pub fn cam(tape: &mut Tape, store: &ParamStore, f: Var, mlp: &ChannelMlp) -> Result<Var> {
    let avg = tape.global_avg_pool(f);
    let max = tape.global_max_pool(f);
    let a = mlp.forward(tape, store, avg)?;
    let m = mlp.forward(tape, store, max)?;
    let s = tape.add(a, m)?;
    Ok(tape.sigmoid(s))
}

fn gate(tape: &mut Tape, store: &ParamStore, fusion: Var, g: &BranchGate) -> Result<Var> {
    let weights = cam(tape, store, fusion, &g.cam)?;
    let reweighted = tape.mul(fusion, weights)?;
    let d = g.decoder.forward(tape, store, reweighted)?;
    Ok(tape.sigmoid(d))
}

/// Spatial attention maps produced by separation, where computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Attention {
    pub cls: Option<Var>,
    pub reg: Option<Var>,
}

/// Returns `(class_feat, box_feat, attention)`.
pub fn semantic_separate(
    tape: &mut Tape,
    store: &ParamStore,
    separation: &Separation,
    cfg: &MsilConfig,
    fusion: Var,
    f_cls: Var,
    f_reg: Var,
) -> Result<(Var, Var, Attention)> {
    check_pair(tape, f_cls, f_reg)?;
    check_pair(tape, fusion, f_cls)?;
    let attention = match separation {
        Separation::PerBranch { cls, reg } => Attention {
            cls: match (cfg.apply_to_cls, cls) {
                (true, Some(g)) => Some(gate(tape, store, fusion, g)?),
                (true, None) => return Err(Error::InvalidArgument("missing classification gate".into())),
                (false, _) => None,
            },
            reg: match (cfg.apply_to_reg, reg) {
                (true, Some(g)) => Some(gate(tape, store, fusion, g)?),
                (true, None) => return Err(Error::InvalidArgument("missing regression gate".into())),
                (false, _) => None,
            },
        },
        Separation::Shared { decoder } => {
            let shared = if cfg.is_active() {
                let d = decoder.forward(tape, store, fusion)?;
                Some(tape.sigmoid(d))
            } else {
                None
            };
            Attention {
                cls: shared.filter(|_| cfg.apply_to_cls),
                reg: shared.filter(|_| cfg.apply_to_reg),
            }
        }
    };
    let class_feat = match attention.cls {
        Some(a) => tape.mul(f_cls, a)?,
        None => f_cls,
    };
    let box_feat = match attention.reg {
        Some(a) => tape.mul(f_reg, a)?,
        None => f_reg,
    };
    Ok((class_feat, box_feat, attention))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsilOutput {
    pub class_feat: Var,
    pub box_feat: Var,
    pub attention: Attention,
}

/// Align, fuse and separate. Returns the inputs untouched when no branch is
/// enhanced.
pub fn msil_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: Option<&MsilParams>,
    cfg: &MsilConfig,
    f_cls: Var,
    f_reg: Var,
) -> Result<MsilOutput> {
    check_pair(tape, f_cls, f_reg)?;
    let c = tape.shape(f_cls).c;
    if c != cfg.channels {
        return Err(Error::InvalidShape {
            op: "msil",
            msg: format!("configured for {} channels, got {c}", cfg.channels),
        });
    }
    let Some(p) = params.filter(|_| cfg.is_active()) else {
        if cfg.is_active() {
            return Err(Error::InvalidArgument("active msil config without parameters".into()));
        }
        return Ok(MsilOutput {
            class_feat: f_cls,
            box_feat: f_reg,
            attention: Attention::default(),
        });
    };
    let alignment = if cfg.enable_alignment {
        Some(
            p.alignment
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("alignment enabled without parameters".into()))?,
        )
    } else {
        None
    };
    let (reg_align, cls_align) = semantic_align(tape, store, alignment, f_reg, f_cls)?;
    let fusion = semantic_fuse(tape, store, &p.fusion, reg_align, cls_align)?;
    let (class_feat, box_feat, attention) = semantic_separate(tape, store, &p.separation, cfg, fusion, f_cls, f_reg)?;
    Ok(MsilOutput {
        class_feat,
        box_feat,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use crate::tensor::{Shape, Tensor};
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const C: usize = 4;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-2.0..2.0))
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in store.params_mut() {
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }

    fn build(cfg: MsilConfig, seed: u64) -> (ParamStore, Option<MsilParams>) {
        let mut store = ParamStore::new(seed);
        let p = MsilParams::new(&mut store, "msil", &cfg).unwrap();
        randomize(&mut store, seed);
        (store, p)
    }

    fn cfg() -> MsilConfig {
        MsilConfig {
            channels: C,
            cam_reduction: 2,
            ..MsilConfig::default()
        }
    }

    // ---- scalar-loop oracles, independent of the tape ----

    fn oracle_conv(x: &Tensor, store: &ParamStore, conv: &Conv2d) -> Tensor {
        let w = store.tensor(conv.weight);
        let b = store.tensor(conv.bias);
        let s = x.shape();
        let k = conv.kernel as isize;
        let pad = k / 2;
        Tensor::from_fn(Shape::new(s.n, conv.out_channels, s.h, s.w), |n, co, y, xx| {
            let mut acc = b.data()[co];
            for ci in 0..s.c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = y as isize + ky - pad;
                        let ix = xx as isize + kx - pad;
                        if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                            acc += w.get(co, ci, ky as usize, kx as usize) * x.get(n, ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor::from_vec(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
        .unwrap()
    }

    fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(a.shape(), a.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    fn oracle_mlp(v: &[f64], store: &ParamStore, m: &ChannelMlp) -> Vec<f64> {
        let dense = |v: &[f64], conv: &Conv2d| -> Vec<f64> {
            let w = store.tensor(conv.weight);
            let b = store.tensor(conv.bias);
            (0..conv.out_channels)
                .map(|o| b.data()[o] + (0..conv.in_channels).map(|i| w.get(o, i, 0, 0) * v[i]).sum::<f64>())
                .collect()
        };
        let h: Vec<f64> = dense(v, &m.reduce).into_iter().map(|x| x.max(0.0)).collect();
        dense(&h, &m.expand)
    }

    fn oracle_cam(f: &Tensor, store: &ParamStore, m: &ChannelMlp) -> Vec<Vec<f64>> {
        let s = f.shape();
        (0..s.n)
            .map(|n| {
                let mut avg = vec![0.0; s.c];
                let mut max = vec![f64::NEG_INFINITY; s.c];
                for c in 0..s.c {
                    for y in 0..s.h {
                        for x in 0..s.w {
                            avg[c] += f.get(n, c, y, x);
                            max[c] = max[c].max(f.get(n, c, y, x));
                        }
                    }
                    avg[c] /= s.plane() as f64;
                }
                let a = oracle_mlp(&avg, store, m);
                let b = oracle_mlp(&max, store, m);
                a.iter().zip(&b).map(|(x, y)| sigmoid(x + y)).collect()
            })
            .collect()
    }

    fn oracle_align(f: &Tensor, store: &ParamStore, a: &Alignment, branch: usize) -> Tensor {
        let e = oracle_conv(f, store, &a.enc);
        let r = zip(f, &e, |x, y| x + y);
        oracle_conv(&oracle_conv(&r, store, &a.enc2[branch]), store, &a.conv[branch])
    }

    fn oracle_concat(a: &Tensor, b: &Tensor) -> Tensor {
        let s = a.shape();
        Tensor::from_fn(Shape::new(s.n, 2 * s.c, s.h, s.w), |n, c, y, x| {
            if c < s.c {
                a.get(n, c, y, x)
            } else {
                b.get(n, c - s.c, y, x)
            }
        })
    }

    fn oracle_gate(fusion: &Tensor, store: &ParamStore, g: &BranchGate) -> Tensor {
        let w = oracle_cam(fusion, store, &g.cam);
        let re = Tensor::from_fn(fusion.shape(), |n, c, y, x| fusion.get(n, c, y, x) * w[n][c]);
        map(&oracle_conv(&re, store, &g.decoder), sigmoid)
    }

    fn oracle_msil(f_cls: &Tensor, f_reg: &Tensor, store: &ParamStore, p: &MsilParams) -> (Tensor, Tensor) {
        let a = p.alignment.as_ref().unwrap();
        let reg_a = oracle_align(f_reg, store, a, 0);
        let cls_a = oracle_align(f_cls, store, a, 1);
        let fusion = oracle_conv(&oracle_concat(&reg_a, &cls_a), store, &p.fusion);
        let Separation::PerBranch {
            cls: Some(gc),
            reg: Some(gr),
        } = &p.separation
        else {
            panic!()
        };
        let ac = oracle_gate(&fusion, store, gc);
        let ar = oracle_gate(&fusion, store, gr);
        (zip(f_cls, &ac, |x, y| x * y), zip(f_reg, &ar, |x, y| x * y))
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn inputs(seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(2, C, 5, 6);
        (random(s, &mut rng), random(s, &mut rng))
    }

    // ---- alignment ----

    #[test]
    fn alignment_disabled_is_identity() {
        let (store, _) = build(cfg(), 1);
        let (fc, fr) = inputs(1);
        let mut tape = Tape::new();
        let (r, c) = (tape.constant(fr), tape.constant(fc));
        let (ra, ca) = semantic_align(&mut tape, &store, None, r, c).unwrap();
        assert_eq!((ra, ca), (r, c));
    }

    #[test]
    fn zero_encoder_leaves_residual_equal_to_input() {
        let (mut store, p) = build(cfg(), 2);
        let a = p.unwrap().alignment.unwrap();
        for id in a.enc.param_ids() {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (fc, fr) = inputs(2);
        let mut tape = Tape::new();
        let (r, c) = (tape.constant(fr.clone()), tape.constant(fc));
        let (ra, _) = semantic_align(&mut tape, &store, Some(&a), r, c).unwrap();
        let direct = oracle_conv(&oracle_conv(&fr, &store, &a.enc2[0]), &store, &a.conv[0]);
        assert!(max_diff(tape.value(ra), &direct) < 1e-12);
    }

    #[test]
    fn alignment_matches_composition_oracle() {
        for share in [true, false] {
            let (store, p) = build(
                MsilConfig {
                    share_encoder_stack: share,
                    ..cfg()
                },
                3,
            );
            let a = p.unwrap().alignment.unwrap();
            assert_eq!(a.enc2[0] == a.enc2[1], share);
            let (fc, fr) = inputs(3);
            let mut tape = Tape::new();
            let (r, c) = (tape.constant(fr.clone()), tape.constant(fc.clone()));
            let (ra, ca) = semantic_align(&mut tape, &store, Some(&a), r, c).unwrap();
            assert!(max_diff(tape.value(ra), &oracle_align(&fr, &store, &a, 0)) < 1e-12);
            assert!(max_diff(tape.value(ca), &oracle_align(&fc, &store, &a, 1)) < 1e-12);
        }
    }

    #[test]
    fn mismatched_branches_rejected() {
        let (store, p) = build(cfg(), 4);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(Shape::new(1, C, 4, 4)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, C, 4, 5)));
        assert!(semantic_align(&mut tape, &store, p.unwrap().alignment.as_ref(), a, b).is_err());
        assert!(semantic_fuse(&mut tape, &store, &p.unwrap().fusion, a, b).is_err());
    }

    // ---- fusion ----

    #[test]
    fn averaging_fusion_recovers_identical_inputs() {
        let (mut store, p) = build(cfg(), 5);
        let fusion = p.unwrap().fusion;
        let w = store.tensor_mut(fusion.weight).data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..C {
            w[o * 2 * C + o] = 0.5;
            w[o * 2 * C + C + o] = 0.5;
        }
        store
            .tensor_mut(fusion.bias)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let (x, _) = inputs(5);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let f = semantic_fuse(&mut tape, &store, &fusion, v, v).unwrap();
        assert_eq!(tape.value(f).data(), x.data());
    }

    #[test]
    fn zero_inputs_give_bias_only() {
        let (store, p) = build(cfg(), 6);
        let fusion = p.unwrap().fusion;
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(Shape::new(1, C, 3, 3)));
        let f = semantic_fuse(&mut tape, &store, &fusion, z, z).unwrap();
        let bias = store.tensor(fusion.bias).data();
        let out = tape.value(f);
        for c in 0..C {
            for i in 0..9 {
                assert_eq!(out.data()[c * 9 + i], bias[c]);
            }
        }
    }

    #[test]
    fn fusion_gradient_reaches_both_branches() {
        let (store, p) = build(cfg(), 7);
        let fusion = p.unwrap().fusion;
        let (a, b) = inputs(7);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let upstream = random(a.shape(), &mut rng);
        let eval = |a: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let (av, bv, u) = (
                tape.constant(a.clone()),
                tape.constant(b.clone()),
                tape.constant(upstream.clone()),
            );
            let f = semantic_fuse(&mut tape, &store, &fusion, av, bv).unwrap();
            let m = tape.mul(f, u).unwrap();
            let s = tape.sum(m);
            tape.value(s).item()
        };
        let h = 1e-5;
        let fd = |which: usize| -> f64 {
            (0..a.data().len())
                .map(|i| {
                    let (mut ap, mut am, mut bp, mut bm) = (a.clone(), a.clone(), b.clone(), b.clone());
                    if which == 0 {
                        ap.data_mut()[i] += h;
                        am.data_mut()[i] -= h;
                    } else {
                        bp.data_mut()[i] += h;
                        bm.data_mut()[i] -= h;
                    }
                    ((eval(&ap, &bp) - eval(&am, &bm)) / (2.0 * h)).abs()
                })
                .sum()
        };
        assert!(fd(0) > 1e-6);
        assert!(fd(1) > 1e-6);
        // and backward agrees in having both paths
        let mut tape = Tape::new();
        let av = tape.leaf(a.with_requires_grad(true));
        let bv = tape.leaf(b.with_requires_grad(true));
        let u = tape.constant(upstream);
        let f = semantic_fuse(&mut tape, &store, &fusion, av, bv).unwrap();
        let m = tape.mul(f, u).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert!(tape.grad(av).unwrap().iter().any(|&g| g != 0.0));
        assert!(tape.grad(bv).unwrap().iter().any(|&g| g != 0.0));
    }

    // ---- channel attention ----

    fn identity_mlp(store: &mut ParamStore) -> ChannelMlp {
        let m = ChannelMlp::new(store, "id", C, 1).unwrap();
        for conv in [m.reduce, m.expand] {
            let w = store.tensor_mut(conv.weight).data_mut();
            w.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..C {
                w[c * C + c] = 1.0;
            }
        }
        m
    }

    #[test]
    fn cam_on_constant_inputs() {
        let mut store = ParamStore::new(0);
        let m = identity_mlp(&mut store);
        for v in [0.0, 0.3, 1.7] {
            let mut tape = Tape::new();
            let f = tape.constant(Tensor::full(Shape::new(1, C, 3, 4), v));
            let w = cam(&mut tape, &store, f, &m).unwrap();
            for &x in tape.value(w).data() {
                assert_eq!(x, sigmoid(2.0 * v));
            }
        }
    }

    #[test]
    fn cam_matches_step_by_step_oracle() {
        let (store, p) = build(cfg(), 8);
        let Separation::PerBranch { cls: Some(g), .. } = p.unwrap().separation else {
            panic!()
        };
        let (f, _) = inputs(8);
        let mut tape = Tape::new();
        let v = tape.constant(f.clone());
        let w = cam(&mut tape, &store, v, &g.cam).unwrap();
        let oracle = oracle_cam(&f, &store, &g.cam);
        let got = tape.value(w);
        for (n, row) in oracle.iter().enumerate() {
            for (c, &o) in row.iter().enumerate() {
                assert!((got.get(n, c, 0, 0) - o).abs() < 1e-12);
            }
        }
    }

    // ---- separation and the full block ----

    #[test]
    fn separation_without_apply_flags_passes_inputs_through() {
        let (store, p) = build(cfg(), 9);
        let p = p.unwrap();
        let off = MsilConfig {
            apply_to_cls: false,
            apply_to_reg: false,
            ..cfg()
        };
        let (fc, fr) = inputs(9);
        let mut tape = Tape::new();
        let (c, r) = (tape.constant(fc), tape.constant(fr));
        let (cf, bf, att) = semantic_separate(&mut tape, &store, &p.separation, &off, c, c, r).unwrap();
        assert_eq!((cf, bf), (c, r));
        assert_eq!(att, Attention::default());
    }

    #[test]
    fn zero_initialized_decoders_halve_features() {
        let mut store = ParamStore::new(10);
        let p = MsilParams::new(&mut store, "msil", &cfg()).unwrap();
        let (fc, fr) = inputs(10);
        let mut tape = Tape::new();
        let (c, r) = (tape.constant(fc.clone()), tape.constant(fr.clone()));
        let out = msil_forward(&mut tape, &store, p.as_ref(), &cfg(), c, r).unwrap();
        assert!(tape.value(out.attention.cls.unwrap()).data().iter().all(|&a| a == 0.5));
        assert_eq!(tape.value(out.class_feat), &map(&fc, |x| 0.5 * x));
        assert_eq!(tape.value(out.box_feat), &map(&fr, |x| 0.5 * x));
    }

    #[test]
    fn full_block_matches_oracle_and_stagewise_composition() {
        let (store, p) = build(cfg(), 11);
        let p = p.unwrap();
        let (fc, fr) = inputs(11);
        let mut tape = Tape::new();
        let (c, r) = (tape.constant(fc.clone()), tape.constant(fr.clone()));
        let out = msil_forward(&mut tape, &store, Some(&p), &cfg(), c, r).unwrap();

        let (oc, or) = oracle_msil(&fc, &fr, &store, &p);
        assert!(max_diff(tape.value(out.class_feat), &oc) < 1e-12);
        assert!(max_diff(tape.value(out.box_feat), &or) < 1e-12);

        let mut t2 = Tape::new();
        let (c2, r2) = (t2.constant(fc), t2.constant(fr));
        let (ra, ca) = semantic_align(&mut t2, &store, p.alignment.as_ref(), r2, c2).unwrap();
        let fusion = semantic_fuse(&mut t2, &store, &p.fusion, ra, ca).unwrap();
        let (cf, bf, _) = semantic_separate(&mut t2, &store, &p.separation, &cfg(), fusion, c2, r2).unwrap();
        assert_eq!(tape.value(out.class_feat), t2.value(cf));
        assert_eq!(tape.value(out.box_feat), t2.value(bf));
    }

    #[test]
    fn inactive_config_is_bitwise_identity_and_has_no_parameters() {
        let off = MsilConfig {
            apply_to_cls: false,
            apply_to_reg: false,
            ..cfg()
        };
        let mut store = ParamStore::new(0);
        assert!(MsilParams::new(&mut store, "msil", &off).unwrap().is_none());
        assert_eq!(store.count(), 0);
        let (fc, fr) = inputs(12);
        let mut tape = Tape::new();
        let (c, r) = (tape.constant(fc), tape.constant(fr));
        let out = msil_forward(&mut tape, &store, None, &off, c, r).unwrap();
        assert_eq!((out.class_feat, out.box_feat), (c, r));
    }

    #[test]
    fn registered_parameters_follow_toggles() {
        let count = |cfg: MsilConfig| {
            let mut s = ParamStore::new(0);
            MsilParams::new(&mut s, "msil", &cfg).unwrap();
            s.params().iter().map(|p| p.name.clone()).collect::<Vec<_>>()
        };
        let cls_only = count(MsilConfig {
            apply_to_reg: false,
            ..cfg()
        });
        assert!(cls_only.iter().any(|n| n.contains("cam_cls")));
        assert!(!cls_only.iter().any(|n| n.contains("cam_reg") || n.contains("dec_reg")));
        let no_sep = count(MsilConfig {
            enable_separation: false,
            ..cfg()
        });
        assert!(!no_sep.iter().any(|n| n.contains("cam")));
        assert!(no_sep.iter().any(|n| n.contains("dec_shared")));
        let no_align = count(MsilConfig {
            enable_alignment: false,
            ..cfg()
        });
        assert!(!no_align.iter().any(|n| n.contains("enc")));
        let unshared = count(MsilConfig {
            share_encoder_stack: false,
            ..cfg()
        });
        assert!(unshared.iter().any(|n| n.contains("enc2_cls")));
    }

    #[test]
    fn without_separation_both_branches_share_one_gate() {
        let c = MsilConfig {
            enable_separation: false,
            ..cfg()
        };
        let (store, p) = build(c, 13);
        let (fc, fr) = inputs(13);
        let mut tape = Tape::new();
        let (cv, rv) = (tape.constant(fc), tape.constant(fr));
        let out = msil_forward(&mut tape, &store, p.as_ref(), &c, cv, rv).unwrap();
        assert_eq!(out.attention.cls, out.attention.reg);
        assert!(out.attention.cls.is_some());
    }

    #[test]
    fn perturbing_one_branch_gate_leaves_the_other_output_untouched() {
        let (store, p) = build(cfg(), 14);
        let p = p.unwrap();
        let Separation::PerBranch {
            cls: Some(gc),
            reg: Some(gr),
        } = p.separation
        else {
            panic!()
        };
        let (fc, fr) = inputs(14);
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let (c, r) = (tape.constant(fc.clone()), tape.constant(fr.clone()));
            let out = msil_forward(&mut tape, store, Some(&p), &cfg(), c, r).unwrap();
            (tape.value(out.class_feat).clone(), tape.value(out.box_feat).clone())
        };
        let (c0, b0) = run(&store);
        for (gate, cls_changes) in [(gc, true), (gr, false)] {
            let mut s = store.clone();
            for id in gate.cam.param_ids() {
                s.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.3);
            }
            let (c1, b1) = run(&s);
            if cls_changes {
                assert_ne!(c0, c1);
                assert_eq!(b0, b1);
            } else {
                assert_eq!(c0, c1);
                assert_ne!(b0, b1);
            }
        }
    }

    #[test]
    fn classification_output_depends_on_regression_input() {
        let c = MsilConfig {
            apply_to_reg: false,
            ..cfg()
        };
        let (store, p) = build(c, 15);
        let (fc, fr) = inputs(15);
        let mut tape = Tape::new();
        let cv = tape.constant(fc);
        let rv = tape.leaf(fr.with_requires_grad(true));
        let out = msil_forward(&mut tape, &store, p.as_ref(), &c, cv, rv).unwrap();
        let s = tape.sum(out.class_feat);
        tape.backward(s).unwrap();
        let norm: f64 = tape.grad(rv).unwrap().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm > 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn attention_bounded_and_never_amplifies(seed in any::<u64>(), share in any::<bool>(), sep in any::<bool>()) {
            let c = MsilConfig { share_encoder_stack: share, enable_separation: sep, ..cfg() };
            let (store, p) = build(c, seed);
            let (fc, fr) = inputs(seed);
            let mut tape = Tape::new();
            let (cv, rv) = (tape.constant(fc.clone()), tape.constant(fr.clone()));
            let out = msil_forward(&mut tape, &store, p.as_ref(), &c, cv, rv).unwrap();
            for a in [out.attention.cls, out.attention.reg].into_iter().flatten() {
                prop_assert!(tape.value(a).data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
            for (e, o) in tape.value(out.class_feat).data().iter().zip(fc.data()) {
                prop_assert!(e.abs() <= o.abs());
            }
            for (e, o) in tape.value(out.box_feat).data().iter().zip(fr.data()) {
                prop_assert!(e.abs() <= o.abs());
            }
        }
    }
}
