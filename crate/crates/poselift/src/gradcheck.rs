//! Central finite-difference verification of every analytic gradient path:
//! the individual layers and each composite training objective. Backs the
//! `gradcheck` CLI subcommand.
//!
//! Finite differences are only meaningful where the objective is smooth, so
//! each check inspects its forward tape and redraws (deterministically) any
//! configuration with a ReLU input near the kink or a train-mode batchnorm
//! feature with near-zero batch variance.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::lifter::{lift_clip_graph, LifterParams};
use crate::nn::{batchnorm_forward, fc_layer, lstm_step, sample_joint_mask, BnMode};
use crate::params::{BatchNorm, HasParams, Linear, LstmParams, ParamRegistry};
use crate::pipeline::{mixed_batch_loss_masked, LossWeights, NormalizedClip, NormalizedFrame, ParamSet};
use crate::pose::{Pose2D, Pose3D};
use crate::projector::{
    eval_bn, project_graph, projector_init_loss_masked, regress_graph, InitSample, ProjectorParams,
};
use crate::tensor::Tensor;

/// Relative-error bound every gradient entry must satisfy.
pub const REL_TOL: f64 = 1e-4;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Reject configurations whose ReLU inputs sit closer than this to the kink.
/// The bound covers the pre-activation drift an FD probe can cause through
/// the batchnorm gains admitted by [`BN_VAR_FLOOR`].
const RELU_MARGIN: f64 = 5e-3;
/// Reject configurations with a train-mode batch variance below this floor;
/// lower variance means per-layer normalization gains large enough to push
/// downstream ReLU inputs across their kinks during an FD probe.
const BN_VAR_FLOOR: f64 = 1e-2;
/// Redraw budget per seed before giving up.
const MAX_REDRAWS: u64 = 400;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub seeds: usize,
    pub entries: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

fn well_conditioned(g: &Graph) -> bool {
    g.relu_kink_margin() > RELU_MARGIN && g.min_train_bn_variance() > BN_VAR_FLOOR
}

fn add_delta(model: &mut dyn HasParams, name: &str, idx: usize, delta: f64) {
    model.visit_mut("", &mut |n, t, trainable| {
        if trainable && n == name {
            t.data_mut()[idx] += delta;
        }
    });
}

/// Compare an analytic gradient map against central differences of `eval`.
/// Returns (max relative error, entries checked).
pub fn check_gradients<M: HasParams>(
    model: &mut M,
    analytic: &BTreeMap<String, Tensor>,
    eval: &mut dyn FnMut(&mut M) -> Result<f64>,
) -> Result<(f64, usize)> {
    let names: Vec<(String, usize)> = {
        let mut v = Vec::new();
        model.visit("", &mut |n, t, trainable| {
            if trainable {
                v.push((n.to_string(), t.len()));
            }
        });
        v
    };
    let mut max_rel: f64 = 0.0;
    let mut entries = 0usize;
    for (name, len) in names {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        for idx in 0..len {
            add_delta(model, &name, idx, FD_STEP);
            let plus = eval(model)?;
            add_delta(model, &name, idx, -2.0 * FD_STEP);
            let minus = eval(model)?;
            add_delta(model, &name, idx, FD_STEP);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            entries += 1;
        }
    }
    Ok((max_rel, entries))
}

fn random_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Run one conditioned check: `body(seed)` yields `None` when the drawn
/// configuration is too close to a nonsmooth point, and the driver redraws
/// from a derived seed.
fn conditioned(
    seed: u64,
    body: &mut dyn FnMut(u64) -> Result<Option<(f64, usize)>>,
) -> Result<(f64, usize)> {
    for attempt in 0..MAX_REDRAWS {
        let derived = seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        if let Some(result) = body(derived)? {
            return Ok(result);
        }
    }
    Err(Error::InvalidArgument(format!(
        "no well-conditioned gradient-check configuration found from seed {seed}"
    )))
}

fn check_fc_relu_mse(seed: u64) -> Result<(f64, usize)> {
    conditioned(seed, &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut layer = Linear::xavier(4, 3, &mut rng);
        let x = Tensor::vector(random_vec(3, -1.0, 1.0, &mut rng));
        let target = Tensor::vector(random_vec(4, -1.0, 1.0, &mut rng));

        let build = |l: &Linear, g: &mut Graph, reg: &mut ParamRegistry| -> Result<crate::graph::Value> {
            let vars = l.bind(g, reg, "", true);
            let xv = g.leaf(x.clone());
            let z = fc_layer(g, xv, &vars)?;
            let h = g.relu(z);
            let tv = g.leaf(target.clone());
            g.mse(h, tv)
        };

        let analytic = {
            let mut g = Graph::new();
            let mut reg = ParamRegistry::new();
            let loss = build(&layer, &mut g, &mut reg)?;
            if !well_conditioned(&g) {
                return Ok(None);
            }
            reg.collect(&g, &g.backward(loss)?)
        };
        let mut eval = |l: &mut Linear| -> Result<f64> {
            let mut g = Graph::new();
            let mut reg = ParamRegistry::new();
            let loss = build(l, &mut g, &mut reg)?;
            Ok(g.value(loss).item())
        };
        check_gradients(&mut layer, &analytic, &mut eval).map(Some)
    })
}

fn check_lstm_step(seed: u64) -> Result<(f64, usize)> {
    conditioned(seed, &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut params = LstmParams::xavier(3, 4, &mut rng);
        let x = Tensor::vector(random_vec(3, -1.0, 1.0, &mut rng));
        let h0 = Tensor::vector(random_vec(4, -0.5, 0.5, &mut rng));
        let c0 = Tensor::vector(random_vec(4, -0.5, 0.5, &mut rng));
        let th = Tensor::vector(random_vec(4, -1.0, 1.0, &mut rng));
        let tc = Tensor::vector(random_vec(4, -1.0, 1.0, &mut rng));

        let build = |p: &LstmParams, g: &mut Graph, reg: &mut ParamRegistry| -> Result<crate::graph::Value> {
            let vars = p.bind(g, reg, "", true);
            let xv = g.leaf(x.clone());
            let hv = g.leaf(h0.clone());
            let cv = g.leaf(c0.clone());
            let (h, c) = lstm_step(g, xv, hv, cv, &vars)?;
            let thv = g.leaf(th.clone());
            let tcv = g.leaf(tc.clone());
            let lh = g.mse(h, thv)?;
            let lc = g.mse(c, tcv)?;
            g.add(lh, lc)
        };

        let analytic = {
            let mut g = Graph::new();
            let mut reg = ParamRegistry::new();
            let loss = build(&params, &mut g, &mut reg)?;
            reg.collect(&g, &g.backward(loss)?)
        };
        let mut eval = |p: &mut LstmParams| -> Result<f64> {
            let mut g = Graph::new();
            let mut reg = ParamRegistry::new();
            let loss = build(p, &mut g, &mut reg)?;
            Ok(g.value(loss).item())
        };
        check_gradients(&mut params, &analytic, &mut eval).map(Some)
    })
}

/// Linear -> batchnorm -> mse, covering the batchnorm input and affine
/// gradients in one composite.
struct LinearBn {
    linear: Linear,
    bn: BatchNorm,
}

impl HasParams for LinearBn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        self.linear.visit(&crate::params::join(prefix, "fc"), f);
        self.bn.visit(&crate::params::join(prefix, "bn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.linear.visit_mut(&crate::params::join(prefix, "fc"), f);
        self.bn.visit_mut(&crate::params::join(prefix, "bn"), f);
    }
}

fn check_linear_batchnorm(seed: u64, mode: BnMode) -> Result<(f64, usize)> {
    conditioned(seed, &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut model = LinearBn {
            linear: Linear::xavier(3, 2, &mut rng),
            bn: BatchNorm::new(3),
        };
        model.bn.gamma = Tensor::vector(random_vec(3, 0.5, 1.5, &mut rng));
        model.bn.beta = Tensor::vector(random_vec(3, -0.5, 0.5, &mut rng));
        model.bn.running_mean = Tensor::vector(random_vec(3, -0.3, 0.3, &mut rng));
        model.bn.running_var = Tensor::vector(random_vec(3, 0.5, 1.5, &mut rng));
        let x = Tensor::matrix(4, 2, random_vec(8, -1.0, 1.0, &mut rng))?;
        let target = Tensor::matrix(4, 3, random_vec(12, -1.0, 1.0, &mut rng))?;

        let build = |m: &mut LinearBn, g: &mut Graph, reg: &mut ParamRegistry| -> Result<crate::graph::Value> {
            let fc = m.linear.bind(g, reg, "fc", true);
            let bnv = m.bn.bind(g, reg, "bn", true);
            let xv = g.leaf(x.clone());
            let z = fc_layer(g, xv, &fc)?;
            let y = batchnorm_forward(g, z, &bnv, &mut m.bn, mode)?;
            let tv = g.leaf(target.clone());
            g.mse(y, tv)
        };

        let analytic = {
            let mut g = Graph::new();
            let mut reg = ParamRegistry::new();
            let mut scratch = LinearBn {
                linear: model.linear.clone(),
                bn: model.bn.clone(),
            };
            let loss = build(&mut scratch, &mut g, &mut reg)?;
            if !well_conditioned(&g) {
                return Ok(None);
            }
            reg.collect(&g, &g.backward(loss)?)
        };
        let mut eval = |m: &mut LinearBn| -> Result<f64> {
            let mut g = Graph::new();
            let mut reg = ParamRegistry::new();
            let loss = build(m, &mut g, &mut reg)?;
            Ok(g.value(loss).item())
        };
        check_gradients(&mut model, &analytic, &mut eval).map(Some)
    })
}

/// The 3D sequence loss over an unrolled clip (backprop through time).
fn check_lifter_sequence(seed: u64) -> Result<(f64, usize)> {
    conditioned(seed, &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (k, hidden, layers, t_len, batch) = (2, 4, 2, 3, 2);
        let mut params = LifterParams::xavier(k, hidden, layers, &mut rng);
        let frames: Vec<Tensor> = (0..t_len)
            .map(|_| Tensor::matrix(batch, 2 * k, random_vec(batch * 2 * k, 0.0, 1.0, &mut rng)).expect("shape"))
            .collect();
        let targets: Vec<Tensor> = (0..t_len)
            .map(|_| Tensor::matrix(batch, 3 * k, random_vec(batch * 3 * k, 0.0, 1.0, &mut rng)).expect("shape"))
            .collect();

        let build = |p: &LifterParams, g: &mut Graph, reg: &mut ParamRegistry| -> Result<crate::graph::Value> {
            let vars = p.bind(g, reg, "", true);
            let fv: Vec<_> = frames.iter().map(|f| g.leaf(f.clone())).collect();
            let outs = lift_clip_graph(g, &fv, &vars, Some(batch))?;
            let mut acc = None;
            for (o, t) in outs.iter().zip(&targets) {
                let tv = g.leaf(t.clone());
                let l = g.mse(*o, tv)?;
                acc = Some(match acc {
                    None => l,
                    Some(prev) => g.add(prev, l)?,
                });
            }
            Ok(acc.expect("nonempty"))
        };

        let analytic = {
            let mut g = Graph::new();
            let mut reg = ParamRegistry::new();
            let loss = build(&params, &mut g, &mut reg)?;
            if !well_conditioned(&g) {
                return Ok(None);
            }
            reg.collect(&g, &g.backward(loss)?)
        };
        let mut eval = |p: &mut LifterParams| -> Result<f64> {
            let mut g = Graph::new();
            let mut reg = ParamRegistry::new();
            let loss = build(p, &mut g, &mut reg)?;
            Ok(g.value(loss).item())
        };
        check_gradients(&mut params, &analytic, &mut eval).map(Some)
    })
}

/// The projector initialization objective with fixed dropout masks.
fn check_projector_init(seed: u64) -> Result<(f64, usize)> {
    conditioned(seed, &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (k, hidden) = (2, 4);
        let mut params = ProjectorParams::xavier(k, hidden, &mut rng);
        let batch: Vec<InitSample> = (0..6)
            .map(|_| InitSample {
                p3d: Pose3D::new(random_vec(3 * k, 0.0, 1.0, &mut rng)).expect("finite"),
                gt3d: Pose3D::new(random_vec(3 * k, 0.0, 1.0, &mut rng)).expect("finite"),
                gt2d: Pose2D::new(random_vec(2 * k, 0.0, 1.0, &mut rng)).expect("finite"),
            })
            .collect();
        let masks: Vec<Vec<bool>> = (0..6)
            .map(|_| sample_joint_mask(k, 0.3, &mut rng).expect("valid delta"))
            .collect();

        let analytic = {
            let mut g = Graph::new();
            let mut reg = ParamRegistry::new();
            let vars = params.bind(&mut g, &mut reg, "", true);
            let dropped: Vec<Tensor> = batch
                .iter()
                .zip(&masks)
                .map(|(smp, m)| {
                    Tensor::vector(crate::nn::apply_joint_mask(smp.p3d.as_slice(), 3, m).expect("mask"))
                })
                .collect();
            let x = g.leaf(Tensor::from_rows(&dropped)?);
            let y3 = g.leaf(Tensor::from_rows(&batch.iter().map(|s| s.gt3d.to_tensor()).collect::<Vec<_>>())?);
            let y2 = g.leaf(Tensor::from_rows(&batch.iter().map(|s| s.gt2d.to_tensor()).collect::<Vec<_>>())?);
            let mut bn_params = params.clone();
            let loss = {
                let mut bn = crate::projector::train_bn(&mut bn_params);
                crate::projector::init_loss_graph(&mut g, &vars, x, y3, y2, &mut bn)?
            };
            if !well_conditioned(&g) {
                return Ok(None);
            }
            reg.collect(&g, &g.backward(loss)?)
        };
        let mut eval = |p: &mut ProjectorParams| -> Result<f64> {
            projector_init_loss_masked(p, &batch, &masks, BnMode::Train)
        };
        check_gradients(&mut params, &analytic, &mut eval).map(Some)
    })
}

/// The per-frame refinement objective ‖p2d − Ψ_P(Ψ_C(p3d))‖₂² with frozen
/// batchnorm statistics.
fn check_refine_objective(seed: u64) -> Result<(f64, usize)> {
    conditioned(seed, &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (k, hidden) = (2, 4);
        let mut params = ProjectorParams::xavier(k, hidden, &mut rng);
        let p3d = Tensor::vector(random_vec(3 * k, 0.0, 1.0, &mut rng));
        let p2d = Tensor::vector(random_vec(2 * k, 0.0, 1.0, &mut rng));

        let build = |p: &ProjectorParams, g: &mut Graph, reg: &mut ParamRegistry| -> Result<crate::graph::Value> {
            let vars = p.bind(g, reg, "", true);
            let x = g.leaf(p3d.clone());
            let t = g.leaf(p2d.clone());
            let q = {
                let mut bn = eval_bn(p);
                let c = regress_graph(g, &vars, x, &mut bn)?;
                project_graph(g, &vars, c, &mut bn)?
            };
            g.mse(t, q)
        };

        let analytic = {
            let mut g = Graph::new();
            let mut reg = ParamRegistry::new();
            let loss = build(&params, &mut g, &mut reg)?;
            if !well_conditioned(&g) {
                return Ok(None);
            }
            reg.collect(&g, &g.backward(loss)?)
        };
        let mut eval = |p: &mut ProjectorParams| -> Result<f64> {
            let mut g = Graph::new();
            let mut reg = ParamRegistry::new();
            let loss = build(p, &mut g, &mut reg)?;
            Ok(g.value(loss).item())
        };
        check_gradients(&mut params, &analytic, &mut eval).map(Some)
    })
}

/// The stage-C mixed objective over a 3D clip: all three λ terms, dropout
/// masks fixed, gradients through lifter and projector at once.
fn check_mixed_loss(seed: u64) -> Result<(f64, usize)> {
    conditioned(seed, &mut |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (k, hidden, layers, n) = (2, 4, 2, 6);
        let mut model = ParamSet::xavier(k, hidden, layers, &mut rng);
        // Xavier-initialized LSTMs emit nearly identical frames, which
        // starves the projector batchnorm of variance; widen the readout so
        // the checked configuration has healthy activation spread
        for v in model.lifter.output.w.data_mut() {
            *v *= 10.0;
        }
        let clip = NormalizedClip {
            frames: (0..n)
                .map(|_| NormalizedFrame {
                    p2d: Pose2D::new(random_vec(2 * k, 0.0, 1.0, &mut rng)).expect("finite"),
                    gt3d: Some(Pose3D::new(random_vec(3 * k, 0.0, 1.0, &mut rng)).expect("finite")),
                })
                .collect(),
        };
        let masks: Vec<Vec<bool>> = (0..n)
            .map(|_| sample_joint_mask(k, 0.3, &mut rng).expect("valid delta"))
            .collect();
        let weights = LossWeights {
            lambda_3d: 1.0,
            lambda_init: 1.0,
            lambda_proj: 1.0,
        };

        // analytic gradients via an explicitly wired copy of the objective
        let analytic = {
            use crate::projector::train_bn;
            let mut g = Graph::new();
            let mut reg = ParamRegistry::new();
            let (lv, pv) = model.bind(&mut g, &mut reg, true, true);
            let frames: Vec<_> = clip
                .frames
                .iter()
                .map(|f| {
                    let row = Tensor::from_rows(std::slice::from_ref(&f.p2d.to_tensor())).expect("one row");
                    g.leaf(row)
                })
                .collect();
            let p3d_frames = lift_clip_graph(&mut g, &frames, &lv, Some(1))?;
            let p3d_stack = g.concat_rows(&p3d_frames)?;
            let p2d_stack = g.concat_rows(&frames)?;
            let gt_rows: Vec<Tensor> = clip
                .frames
                .iter()
                .map(|f| f.gt3d.as_ref().expect("3D clip").to_tensor())
                .collect();
            let gt3d = g.leaf(Tensor::from_rows(&gt_rows)?);
            let mask_rows: Vec<Tensor> = masks
                .iter()
                .map(|m| {
                    Tensor::vector(
                        m.iter()
                            .flat_map(|&keep| {
                                let v = if keep { 1.0 } else { 0.0 };
                                [v, v, v]
                            })
                            .collect(),
                    )
                })
                .collect();
            let mask = g.leaf(Tensor::from_rows(&mask_rows)?);
            let mut bn_params = model.projector.clone();
            let loss = {
                let mut bn = train_bn(&mut bn_params);
                let l3d = g.mse(p3d_stack, gt3d)?;
                let dropped = g.hadamard(p3d_stack, mask)?;
                let c_drop = regress_graph(&mut g, &pv, dropped, &mut bn)?;
                let li3 = g.mse(c_drop, gt3d)?;
                let q_drop = project_graph(&mut g, &pv, c_drop, &mut bn)?;
                let li2 = g.mse(q_drop, p2d_stack)?;
                let c_clean = regress_graph(&mut g, &pv, p3d_stack, &mut bn)?;
                let q_clean = project_graph(&mut g, &pv, c_clean, &mut bn)?;
                let lp = g.mse(q_clean, p2d_stack)?;
                let s1 = g.add(l3d, li3)?;
                let s2 = g.add(s1, li2)?;
                g.add(s2, lp)?
            };
            if !well_conditioned(&g) {
                return Ok(None);
            }
            reg.collect(&g, &g.backward(loss)?)
        };

        let mut eval = |m: &mut ParamSet| -> Result<f64> {
            mixed_batch_loss_masked(m, &clip, weights, Some(&masks), BnMode::Train)
        };
        check_gradients(&mut model, &analytic, &mut eval).map(Some)
    })
}

type CheckFn = fn(u64) -> Result<(f64, usize)>;

fn bn_train(seed: u64) -> Result<(f64, usize)> {
    check_linear_batchnorm(seed, BnMode::Train)
}

fn bn_eval(seed: u64) -> Result<(f64, usize)> {
    check_linear_batchnorm(seed, BnMode::Eval)
}

/// Run every check over `seeds` consecutive seeds starting at `base_seed`.
pub fn run_suite(base_seed: u64, seeds: usize) -> Result<Vec<CheckReport>> {
    let checks: [(&'static str, CheckFn); 8] = [
        ("fc_relu_mse", check_fc_relu_mse),
        ("lstm_step", check_lstm_step),
        ("linear_batchnorm_train", bn_train),
        ("linear_batchnorm_eval", bn_eval),
        ("lifter_sequence_loss", check_lifter_sequence),
        ("projector_init_loss", check_projector_init),
        ("refine_objective", check_refine_objective),
        ("mixed_batch_loss", check_mixed_loss),
    ];
    let mut reports = Vec::with_capacity(checks.len());
    for (name, fun) in checks {
        let mut max_rel: f64 = 0.0;
        let mut entries = 0usize;
        for s in 0..seeds {
            let (rel, n) = fun(base_seed.wrapping_add(s as u64))?;
            max_rel = max_rel.max(rel);
            entries += n;
        }
        reports.push(CheckReport {
            name,
            seeds,
            entries,
            max_rel_err: max_rel,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_gradient_path_matches_finite_differences() {
        for report in run_suite(1, 3).unwrap() {
            assert!(
                report.passed(),
                "{}: max rel err {} over {} entries",
                report.name,
                report.max_rel_err,
                report.entries
            );
        }
    }

    #[test]
    fn mixed_loss_oracle_agrees_with_pipeline_value() {
        // the analytic graph in check_mixed_loss re-wires the loss by hand;
        // make sure that wiring computes the same gradients as the pipeline
        let (rel, entries) = check_mixed_loss(42).unwrap();
        assert!(entries > 500);
        assert!(rel < REL_TOL, "rel {rel}");
    }
}
