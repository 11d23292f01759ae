//! The 3D-to-2D projector module: a two-layer regression head producing the
//! correctable 3D pose, and a four-layer projection head with an additive
//! identity skip producing the projected 2D pose. The projection is learned
//! purely from data; no explicit camera model is involved.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::nn::{apply_joint_mask, batchnorm_eval, batchnorm_forward, fc_layer, sample_joint_mask, BnMode};
use crate::params::{join, BatchNorm, BatchNormVars, HasParams, Linear, LinearVars, ParamRegistry};
use crate::pose::{Pose2D, Pose3D};
use crate::tensor::Tensor;

/// Which batchnorm layer a wiring callback is normalizing for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnSlot {
    RegressA,
    Project1,
    Project2,
}

/// Callback deciding how batchnorm runs during a projector forward pass
/// (train-mode with running updates, or frozen eval).
pub type BnFn<'a> = dyn FnMut(&mut Graph, Value, BnSlot, &BatchNormVars) -> Result<Value> + 'a;

/// Regression head (2 FC layers) and projection head (4 FC layers with one
/// additive identity skip around the middle two).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub fc_a: Linear,
    pub bn_a: BatchNorm,
    pub fc_b: Linear,
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
    pub fc3: Linear,
    pub fc4: Linear,
}

impl ProjectorParams {
    pub fn xavier(joints: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let (d3, d2) = (3 * joints, 2 * joints);
        Self {
            fc_a: Linear::xavier(hidden, d3, rng),
            bn_a: BatchNorm::new(hidden),
            fc_b: Linear::xavier(d3, hidden, rng),
            fc1: Linear::xavier(hidden, d3, rng),
            bn1: BatchNorm::new(hidden),
            fc2: Linear::xavier(hidden, hidden, rng),
            bn2: BatchNorm::new(hidden),
            fc3: Linear::xavier(hidden, hidden, rng),
            fc4: Linear::xavier(d2, hidden, rng),
        }
    }

    pub fn zeros(joints: usize, hidden: usize) -> Self {
        let (d3, d2) = (3 * joints, 2 * joints);
        Self {
            fc_a: Linear::zeros(hidden, d3),
            bn_a: BatchNorm::new(hidden),
            fc_b: Linear::zeros(d3, hidden),
            fc1: Linear::zeros(hidden, d3),
            bn1: BatchNorm::new(hidden),
            fc2: Linear::zeros(hidden, hidden),
            bn2: BatchNorm::new(hidden),
            fc3: Linear::zeros(hidden, hidden),
            fc4: Linear::zeros(d2, hidden),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.fc_a.in_dim() / 3
    }

    pub fn hidden(&self) -> usize {
        self.fc_a.out_dim()
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut ParamRegistry, prefix: &str, trainable: bool) -> ProjectorVars {
        ProjectorVars {
            fc_a: self.fc_a.bind(g, reg, &join(prefix, "fc_a"), trainable),
            bn_a: self.bn_a.bind(g, reg, &join(prefix, "bn_a"), trainable),
            fc_b: self.fc_b.bind(g, reg, &join(prefix, "fc_b"), trainable),
            fc1: self.fc1.bind(g, reg, &join(prefix, "fc1"), trainable),
            bn1: self.bn1.bind(g, reg, &join(prefix, "bn1"), trainable),
            fc2: self.fc2.bind(g, reg, &join(prefix, "fc2"), trainable),
            bn2: self.bn2.bind(g, reg, &join(prefix, "bn2"), trainable),
            fc3: self.fc3.bind(g, reg, &join(prefix, "fc3"), trainable),
            fc4: self.fc4.bind(g, reg, &join(prefix, "fc4"), trainable),
        }
    }
}

impl HasParams for ProjectorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        self.fc_a.visit(&join(prefix, "fc_a"), f);
        self.bn_a.visit(&join(prefix, "bn_a"), f);
        self.fc_b.visit(&join(prefix, "fc_b"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.fc3.visit(&join(prefix, "fc3"), f);
        self.fc4.visit(&join(prefix, "fc4"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.fc_a.visit_mut(&join(prefix, "fc_a"), f);
        self.bn_a.visit_mut(&join(prefix, "bn_a"), f);
        self.fc_b.visit_mut(&join(prefix, "fc_b"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.fc3.visit_mut(&join(prefix, "fc3"), f);
        self.fc4.visit_mut(&join(prefix, "fc4"), f);
    }
}

#[derive(Clone, Copy)]
pub struct ProjectorVars {
    pub fc_a: LinearVars,
    pub bn_a: BatchNormVars,
    pub fc_b: LinearVars,
    pub fc1: LinearVars,
    pub bn1: BatchNormVars,
    pub fc2: LinearVars,
    pub bn2: BatchNormVars,
    pub fc3: LinearVars,
    pub fc4: LinearVars,
}

/// Eval-mode batchnorm callback over shared immutable params.
pub fn eval_bn(params: &ProjectorParams) -> impl FnMut(&mut Graph, Value, BnSlot, &BatchNormVars) -> Result<Value> + '_ {
    move |g, x, slot, vars| {
        let bn = match slot {
            BnSlot::RegressA => &params.bn_a,
            BnSlot::Project1 => &params.bn1,
            BnSlot::Project2 => &params.bn2,
        };
        batchnorm_eval(g, x, vars, bn)
    }
}

/// Train-mode batchnorm callback: batch statistics, running buffers updated.
pub fn train_bn(params: &mut ProjectorParams) -> impl FnMut(&mut Graph, Value, BnSlot, &BatchNormVars) -> Result<Value> + '_ {
    move |g, x, slot, vars| {
        let bn = match slot {
            BnSlot::RegressA => &mut params.bn_a,
            BnSlot::Project1 => &mut params.bn1,
            BnSlot::Project2 => &mut params.bn2,
        };
        batchnorm_forward(g, x, vars, bn, BnMode::Train)
    }
}

/// Ψ_C wiring: `FC_b(ReLU(BN(FC_a(x))))`.
pub fn regress_graph(g: &mut Graph, vars: &ProjectorVars, x: Value, bn: &mut BnFn) -> Result<Value> {
    let z = fc_layer(g, x, &vars.fc_a)?;
    let n = bn(g, z, BnSlot::RegressA, &vars.bn_a)?;
    let h = g.relu(n);
    fc_layer(g, h, &vars.fc_b)
}

/// Ψ_P wiring: `h1 = ReLU(BN1(FC1(x)))`, residual `r = FC3(ReLU(BN2(FC2(h1))))`,
/// output `FC4(h1 + r)`. The identity path bypasses the middle two layers.
pub fn project_graph(g: &mut Graph, vars: &ProjectorVars, x: Value, bn: &mut BnFn) -> Result<Value> {
    let z1 = fc_layer(g, x, &vars.fc1)?;
    let n1 = bn(g, z1, BnSlot::Project1, &vars.bn1)?;
    let h1 = g.relu(n1);
    let z2 = fc_layer(g, h1, &vars.fc2)?;
    let n2 = bn(g, z2, BnSlot::Project2, &vars.bn2)?;
    let a2 = g.relu(n2);
    let r = fc_layer(g, a2, &vars.fc3)?;
    let h2 = g.add(h1, r)?;
    fc_layer(g, h2, &vars.fc4)
}

/// The two init-loss terms from already-inserted graph values:
/// `‖Ψ_C(x) − gt3d‖₂² + ‖Ψ_P(Ψ_C(x)) − gt2d‖₂²`.
pub fn init_loss_graph(
    g: &mut Graph,
    vars: &ProjectorVars,
    x: Value,
    gt3d: Value,
    gt2d: Value,
    bn: &mut BnFn,
) -> Result<Value> {
    let c = regress_graph(g, vars, x, bn)?;
    let l3 = g.mse(c, gt3d)?;
    let q = project_graph(g, vars, c, bn)?;
    let l2 = g.mse(q, gt2d)?;
    g.add(l3, l2)
}

impl ProjectorParams {
    fn check_input(&self, p3d: &Pose3D) -> Result<()> {
        if p3d.joint_count() != self.joint_count() {
            return Err(Error::ShapeMismatch {
                op: "projector",
                lhs: vec![p3d.as_slice().len()],
                rhs: vec![3 * self.joint_count()],
            });
        }
        Ok(())
    }

    /// Regress the correctable 3D pose, eval-mode batchnorm.
    pub fn regress_3d(&self, p3d: &Pose3D) -> Result<Pose3D> {
        self.check_input(p3d)?;
        let mut g = Graph::new();
        let mut reg = ParamRegistry::new();
        let vars = self.bind(&mut g, &mut reg, "", false);
        let x = g.leaf(p3d.to_tensor());
        let c = regress_graph(&mut g, &vars, x, &mut eval_bn(self))?;
        Pose3D::from_tensor(g.value(c))
    }

    /// Project a 3D pose into 2D, eval-mode batchnorm.
    pub fn project_2d(&self, p3d: &Pose3D) -> Result<Pose2D> {
        self.check_input(p3d)?;
        let mut g = Graph::new();
        let mut reg = ParamRegistry::new();
        let vars = self.bind(&mut g, &mut reg, "", false);
        let x = g.leaf(p3d.to_tensor());
        let q = project_graph(&mut g, &vars, x, &mut eval_bn(self))?;
        Pose2D::from_tensor(g.value(q))
    }
}

/// One training sample for the projector initialization objective.
#[derive(Debug, Clone)]
pub struct InitSample {
    pub p3d: Pose3D,
    pub gt3d: Pose3D,
    pub gt2d: Pose2D,
}

/// Initialization loss with explicit per-sample keep masks, so the value is
/// a deterministic function of the parameters (used by the gradient checker
/// and by [`projector_init_loss`]). Masks apply to copies of the input poses
/// only.
pub fn projector_init_loss_masked(
    params: &mut ProjectorParams,
    batch: &[InitSample],
    keep_masks: &[Vec<bool>],
    mode: BnMode,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty projector init batch".into()));
    }
    if batch.len() != keep_masks.len() {
        return Err(Error::ShapeMismatch {
            op: "projector_init_loss",
            lhs: vec![batch.len()],
            rhs: vec![keep_masks.len()],
        });
    }
    let mut dropped = Vec::with_capacity(batch.len());
    let mut gt3d = Vec::with_capacity(batch.len());
    let mut gt2d = Vec::with_capacity(batch.len());
    for (s, keep) in batch.iter().zip(keep_masks) {
        dropped.push(Tensor::vector(apply_joint_mask(s.p3d.as_slice(), 3, keep)?));
        gt3d.push(s.gt3d.to_tensor());
        gt2d.push(s.gt2d.to_tensor());
    }
    let mut g = Graph::new();
    let mut reg = ParamRegistry::new();
    let vars = params.bind(&mut g, &mut reg, "", false);
    let x = g.leaf(Tensor::from_rows(&dropped)?);
    let y3 = g.leaf(Tensor::from_rows(&gt3d)?);
    let y2 = g.leaf(Tensor::from_rows(&gt2d)?);
    let loss = match mode {
        BnMode::Train => init_loss_graph(&mut g, &vars, x, y3, y2, &mut train_bn(params))?,
        BnMode::Eval => {
            // borrow params immutably for the frozen path
            let params = &*params;
            init_loss_graph(&mut g, &vars, x, y3, y2, &mut eval_bn(params))?
        }
    };
    Ok(g.value(loss).item())
}

/// Joint initialization objective over a batch: dropout with probability
/// `delta` on the input poses, then the two-term loss of
/// [`init_loss_graph`] summed over the batch.
pub fn projector_init_loss(
    params: &mut ProjectorParams,
    batch: &[InitSample],
    delta: f64,
    rng: &mut ChaCha8Rng,
    mode: BnMode,
) -> Result<f64> {
    let masks = batch
        .iter()
        .map(|s| sample_joint_mask(s.p3d.joint_count(), delta, rng))
        .collect::<Result<Vec<_>>>()?;
    projector_init_loss_masked(params, batch, &masks, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_pose3d(k: usize, rng: &mut ChaCha8Rng) -> Pose3D {
        Pose3D::new((0..3 * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_output_layer_gives_zero_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut p = ProjectorParams::xavier(4, 8, &mut rng);
        p.fc_b = Linear::zeros(12, 8);
        let out = p.regress_3d(&random_pose3d(4, &mut rng)).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_bit_deterministic_and_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let p = ProjectorParams::xavier(4, 8, &mut rng);
        let x = random_pose3d(4, &mut rng);
        let before = p.checksum();
        let a = p.regress_3d(&x).unwrap();
        let b = p.regress_3d(&x).unwrap();
        let qa = p.project_2d(&x).unwrap();
        let qb = p.project_2d(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(qa, qb);
        assert_eq!(before, p.checksum());
    }

    #[test]
    fn regress_matches_layer_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let p = ProjectorParams::xavier(3, 6, &mut rng);
        let x = random_pose3d(3, &mut rng);
        let got = p.regress_3d(&x).unwrap();

        // oracle: run the layers one by one through raw graph primitives
        let mut g = Graph::new();
        let mut reg = ParamRegistry::new();
        let fa = p.fc_a.bind(&mut g, &mut reg, "a", false);
        let bna = p.bn_a.bind(&mut g, &mut reg, "bn", false);
        let fb = p.fc_b.bind(&mut g, &mut reg, "b", false);
        let xv = g.leaf(x.to_tensor());
        let z = fc_layer(&mut g, xv, &fa).unwrap();
        let n = batchnorm_eval(&mut g, z, &bna, &p.bn_a).unwrap();
        let h = g.relu(n);
        let y = fc_layer(&mut g, h, &fb).unwrap();
        assert_eq!(got.as_slice(), g.value(y).data());
    }

    #[test]
    fn zero_residual_branch_reduces_to_fc4_of_h1() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let mut p = ProjectorParams::xavier(3, 6, &mut rng);
        p.fc3 = Linear::zeros(6, 6);
        let x = random_pose3d(3, &mut rng);
        let got = p.project_2d(&x).unwrap();

        // oracle: h1 then FC4 directly, skipping the middle layers
        let mut g = Graph::new();
        let mut reg = ParamRegistry::new();
        let f1 = p.fc1.bind(&mut g, &mut reg, "f1", false);
        let bn1 = p.bn1.bind(&mut g, &mut reg, "bn1", false);
        let f4 = p.fc4.bind(&mut g, &mut reg, "f4", false);
        let xv = g.leaf(x.to_tensor());
        let z1 = fc_layer(&mut g, xv, &f1).unwrap();
        let n1 = batchnorm_eval(&mut g, z1, &bn1, &p.bn1).unwrap();
        let h1 = g.relu(n1);
        let y = fc_layer(&mut g, h1, &f4).unwrap();
        assert_eq!(got.as_slice(), g.value(y).data());
    }

    #[test]
    fn zero_fc4_weights_give_constant_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let mut p = ProjectorParams::xavier(3, 6, &mut rng);
        p.fc4 = Linear {
            w: Tensor::zeros(vec![6, 6]),
            b: Tensor::vector(vec![1.0, -2.0, 3.0, -4.0, 5.0, -6.0]),
        };
        let a = p.project_2d(&random_pose3d(3, &mut rng)).unwrap();
        let b = p.project_2d(&random_pose3d(3, &mut rng)).unwrap();
        assert_eq!(a.as_slice(), &[1.0, -2.0, 3.0, -4.0, 5.0, -6.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn project_matches_layer_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let p = ProjectorParams::xavier(3, 6, &mut rng);
        let x = random_pose3d(3, &mut rng);
        let got = p.project_2d(&x).unwrap();

        let mut g = Graph::new();
        let mut reg = ParamRegistry::new();
        let f1 = p.fc1.bind(&mut g, &mut reg, "f1", false);
        let b1 = p.bn1.bind(&mut g, &mut reg, "b1", false);
        let f2 = p.fc2.bind(&mut g, &mut reg, "f2", false);
        let b2 = p.bn2.bind(&mut g, &mut reg, "b2", false);
        let f3 = p.fc3.bind(&mut g, &mut reg, "f3", false);
        let f4 = p.fc4.bind(&mut g, &mut reg, "f4", false);
        let xv = g.leaf(x.to_tensor());
        let z1 = fc_layer(&mut g, xv, &f1).unwrap();
        let n1 = batchnorm_eval(&mut g, z1, &b1, &p.bn1).unwrap();
        let h1 = g.relu(n1);
        let z2 = fc_layer(&mut g, h1, &f2).unwrap();
        let n2 = batchnorm_eval(&mut g, z2, &b2, &p.bn2).unwrap();
        let a2 = g.relu(n2);
        let r = fc_layer(&mut g, a2, &f3).unwrap();
        let h2 = g.add(h1, r).unwrap();
        let y = fc_layer(&mut g, h2, &f4).unwrap();
        assert_eq!(got.as_slice(), g.value(y).data());
    }

    fn constant_projector(k: usize, hidden: usize, c3d: f64, c2d: f64) -> ProjectorParams {
        // all weights zero, output biases pinned: psi_c == c3d, psi_p == c2d
        let mut p = ProjectorParams::zeros(k, hidden);
        p.fc_b.b = Tensor::filled(vec![3 * k], c3d);
        p.fc4.b = Tensor::filled(vec![2 * k], c2d);
        p
    }

    #[test]
    fn perfect_networks_on_consistent_data_have_zero_loss() {
        let k = 3;
        let mut p = constant_projector(k, 5, 0.25, 0.75);
        let sample = InitSample {
            p3d: Pose3D::new(vec![0.1; 9]).unwrap(),
            gt3d: Pose3D::new(vec![0.25; 9]).unwrap(),
            gt2d: Pose2D::new(vec![0.75; 6]).unwrap(),
        };
        let batch = vec![sample.clone(), sample];
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let loss = projector_init_loss(&mut p, &batch, 0.3, &mut rng, BnMode::Train).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn single_frame_unfolds_to_two_mse_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let mut p = ProjectorParams::xavier(3, 6, &mut rng);
        let sample = InitSample {
            p3d: random_pose3d(3, &mut rng),
            gt3d: random_pose3d(3, &mut rng),
            gt2d: Pose2D::new((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        };
        let c = p.regress_3d(&sample.p3d).unwrap();
        let q = p.project_2d(&c).unwrap();
        let want: f64 = c
            .as_slice()
            .iter()
            .zip(sample.gt3d.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            + q.as_slice()
                .iter()
                .zip(sample.gt2d.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let got = projector_init_loss(&mut p, &[sample], 0.0, &mut rng2, BnMode::Eval).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_matches_per_frame_oracle_sum_in_eval_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut p = ProjectorParams::xavier(3, 6, &mut rng);
        let batch: Vec<InitSample> = (0..4)
            .map(|_| InitSample {
                p3d: random_pose3d(3, &mut rng),
                gt3d: random_pose3d(3, &mut rng),
                gt2d: Pose2D::new((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            })
            .collect();
        let mut want = 0.0;
        for s in &batch {
            let c = p.regress_3d(&s.p3d).unwrap();
            let q = p.project_2d(&c).unwrap();
            want += c
                .as_slice()
                .iter()
                .zip(s.gt3d.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            want += q
                .as_slice()
                .iter()
                .zip(s.gt2d.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        let got = projector_init_loss(&mut p, &batch, 0.0, &mut rng2, BnMode::Eval).unwrap();
        assert!((got - want).abs() < 1e-10, "got {got} want {want}");
    }

    #[test]
    fn train_mode_batch_loss_matches_stacked_forward_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let base = ProjectorParams::xavier(2, 4, &mut rng);
        let batch: Vec<InitSample> = (0..3)
            .map(|_| InitSample {
                p3d: random_pose3d(2, &mut rng),
                gt3d: random_pose3d(2, &mut rng),
                gt2d: Pose2D::new((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            })
            .collect();

        // oracle: one stacked forward through the graph primitives
        let mut oracle_params = base.clone();
        let mut g = Graph::new();
        let mut reg = ParamRegistry::new();
        let vars = oracle_params.bind(&mut g, &mut reg, "", false);
        let rows: Vec<Tensor> = batch.iter().map(|s| s.p3d.to_tensor()).collect();
        let x = g.leaf(Tensor::from_rows(&rows).unwrap());
        let c = {
            let mut bn = train_bn(&mut oracle_params);
            regress_graph(&mut g, &vars, x, &mut bn).unwrap()
        };
        let q = {
            let mut bn = train_bn(&mut oracle_params);
            project_graph(&mut g, &vars, c, &mut bn).unwrap()
        };
        let mut want = 0.0;
        for (i, s) in batch.iter().enumerate() {
            want += g
                .value(c)
                .row(i)
                .iter()
                .zip(s.gt3d.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            want += g
                .value(q)
                .row(i)
                .iter()
                .zip(s.gt2d.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }

        let mut test_params = base;
        let masks: Vec<Vec<bool>> = batch.iter().map(|_| vec![true; 2]).collect();
        let got = projector_init_loss_masked(&mut test_params, &batch, &masks, BnMode::Train).unwrap();
        assert!((got - want).abs() < 1e-10, "got {got} want {want}");
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut p = ProjectorParams::zeros(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(projector_init_loss(&mut p, &[], 0.0, &mut rng, BnMode::Eval).is_err());
    }

    #[test]
    fn dropout_does_not_mutate_stored_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let mut p = ProjectorParams::xavier(3, 6, &mut rng);
        let batch: Vec<InitSample> = (0..3)
            .map(|_| InitSample {
                p3d: random_pose3d(3, &mut rng),
                gt3d: random_pose3d(3, &mut rng),
                gt2d: Pose2D::new((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            })
            .collect();
        let before = batch.clone();
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        projector_init_loss(&mut p, &batch, 0.9, &mut rng2, BnMode::Train).unwrap();
        for (a, b) in batch.iter().zip(&before) {
            assert_eq!(a.p3d, b.p3d);
            assert_eq!(a.gt3d, b.gt3d);
            assert_eq!(a.gt2d, b.gt2d);
        }
    }
}
