//! Network building blocks on top of the tape: dense layers, the LSTM cell,
//! batch normalization and joint dropout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Value};
use crate::params::{BatchNorm, BatchNormVars, LinearVars, LstmVars};

/// Batchnorm epsilon inside the variance square root.
pub const BN_EPS: f64 = 1e-5;
/// Momentum of the running-statistics update: `r = (1 - m) * r + m * batch`.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// `y = W·x + b`, recorded on the tape. `x` may be a single vector or a
/// `[batch, n_in]` matrix.
pub fn fc_forward(g: &mut Graph, x: Value, w: Value, b: Value) -> Result<Value> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn fc_layer(g: &mut Graph, x: Value, l: &LinearVars) -> Result<Value> {
    fc_forward(g, x, l.w, l.b)
}

/// One LSTM cell update:
///
/// i = σ(W_i x + U_i h + b_i)    f = σ(W_f x + U_f h + b_f)
/// o = σ(W_o x + U_o h + b_o)    g = tanh(W_g x + U_g h + b_g)
/// c' = f ⊙ c + i ⊙ g            h' = o ⊙ tanh(c')
pub fn lstm_step(
    g: &mut Graph,
    x: Value,
    h_prev: Value,
    c_prev: Value,
    p: &LstmVars,
) -> Result<(Value, Value)> {
    let gate = |g: &mut Graph, w: Value, u: Value, b: Value| -> Result<Value> {
        let wx = g.matmul(x, w)?;
        let uh = g.matmul(h_prev, u)?;
        let s = g.add(wx, uh)?;
        g.add(s, b)
    };
    let pre_i = gate(g, p.w_i, p.u_i, p.b_i)?;
    let pre_f = gate(g, p.w_f, p.u_f, p.b_f)?;
    let pre_o = gate(g, p.w_o, p.u_o, p.b_o)?;
    let pre_g = gate(g, p.w_g, p.u_g, p.b_g)?;
    let i = g.sigmoid(pre_i);
    let f = g.sigmoid(pre_f);
    let o = g.sigmoid(pre_o);
    let cand = g.tanh(pre_g);
    let fc = g.hadamard(f, c_prev)?;
    let ig = g.hadamard(i, cand)?;
    let c = g.add(fc, ig)?;
    let tc = g.tanh(c);
    let h = g.hadamard(o, tc)?;
    Ok((h, c))
}

/// Batch normalization forward.
///
/// Train mode normalizes by batch statistics and folds them into the running
/// buffers with [`BN_MOMENTUM`]; eval mode is a pure affine map from the
/// frozen buffers and leaves `bn` untouched.
pub fn batchnorm_forward(
    g: &mut Graph,
    x: Value,
    vars: &BatchNormVars,
    bn: &mut BatchNorm,
    mode: BnMode,
) -> Result<Value> {
    match mode {
        BnMode::Train => {
            let (y, stats) = g.batchnorm_train(x, vars.gamma, vars.beta, BN_EPS)?;
            apply_running_update(bn, &stats);
            Ok(y)
        }
        BnMode::Eval => batchnorm_eval(g, x, vars, bn),
    }
}

/// Eval-mode batchnorm usable with a shared immutable layer.
pub fn batchnorm_eval(g: &mut Graph, x: Value, vars: &BatchNormVars, bn: &BatchNorm) -> Result<Value> {
    g.batchnorm_eval(x, vars.gamma, vars.beta, &bn.running_mean, &bn.running_var, BN_EPS)
}

pub fn apply_running_update(bn: &mut BatchNorm, stats: &BatchStats) {
    for (r, &b) in bn.running_mean.data_mut().iter_mut().zip(stats.mean.data()) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
    for (r, &b) in bn.running_var.data_mut().iter_mut().zip(stats.var.data()) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

/// Sample a per-joint keep mask: each joint independently drops (all of its
/// coordinates at once) with probability `delta`.
pub fn sample_joint_mask(joints: usize, delta: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability must be in [0, 1], got {delta}"
        )));
    }
    Ok((0..joints).map(|_| rng.gen::<f64>() >= delta).collect())
}

/// Zero whole joints of a flat pose vector according to a keep mask.
/// `dims` is 2 for 2D poses and 3 for 3D poses; survivors are not rescaled
/// (the mask simulates occlusion, not activation dropout).
pub fn apply_joint_mask(coords: &[f64], dims: usize, keep: &[bool]) -> Result<Vec<f64>> {
    if coords.len() != keep.len() * dims {
        return Err(Error::ShapeMismatch {
            op: "apply_joint_mask",
            lhs: vec![coords.len()],
            rhs: vec![keep.len() * dims],
        });
    }
    Ok(coords
        .iter()
        .enumerate()
        .map(|(i, &v)| if keep[i / dims] { v } else { 0.0 })
        .collect())
}

/// Joint dropout on a flat pose vector: samples a mask and applies it.
pub fn joint_dropout(coords: &[f64], dims: usize, delta: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let joints = coords.len() / dims;
    if joints * dims != coords.len() {
        return Err(Error::InvalidArgument(format!(
            "pose length {} is not a multiple of {dims}",
            coords.len()
        )));
    }
    let keep = sample_joint_mask(joints, delta, rng)?;
    apply_joint_mask(coords, dims, &keep)
}
