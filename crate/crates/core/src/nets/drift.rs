use serde::{Deserialize, Serialize};

use super::NetError;
use crate::ad::{AdError, Tape, Tensor, Var};

/// Pointwise nonlinearity. All variants are 1-Lipschitz.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub(crate) fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// `y = act(x·W + b)` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// The drift `f(h, t)` of a block: a small MLP.
///
/// With time conditioning the first layer sees `[h, t]`, so its weight matrix
/// has one extra input row, the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftNet {
    pub layers: Vec<DenseLayer>,
    pub time_conditioning: bool,
}

impl DriftNet {
    pub fn validate(&self) -> Result<(), NetError> {
        let Some(first) = self.layers.first() else {
            return Err(NetError::InvalidSpec("drift net has no layers".into()));
        };
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.shape().len() != 2 || l.bias.len() != l.weights.shape()[1] {
                return Err(NetError::InvalidSpec(format!(
                    "layer {i}: weights {:?} and bias {:?} disagree",
                    l.weights.shape(),
                    l.bias.shape()
                )));
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].weights.shape()[1] != pair[1].weights.shape()[0] {
                return Err(NetError::InvalidSpec(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].weights.shape()[1],
                    i + 1,
                    pair[1].weights.shape()[0]
                )));
            }
        }
        let out = self.layers.last().unwrap().weights.shape()[1];
        let input = first.weights.shape()[0] - usize::from(self.time_conditioning);
        if input != out {
            return Err(NetError::InvalidSpec(format!(
                "drift maps {input} state coordinates to {out}"
            )));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.shape()[1])
    }
}

/// Layer vars bound on a tape: `(weights, bias, activation)`.
pub(crate) type BoundLayer = (Var, Var, Activation);

pub(crate) fn dense(tape: &mut Tape, x: Var, w: Var, b: Var, act: Activation) -> Result<Var, AdError> {
    let z = tape.matmul(x, w)?;
    let z = tape.add_row(z, b)?;
    act.apply(tape, z)
}

/// Evaluates the drift MLP on a batch of states at time `t`.
pub(crate) fn drift_forward(
    tape: &mut Tape,
    layers: &[BoundLayer],
    time_conditioning: bool,
    h: Var,
    t: f64,
) -> Result<Var, AdError> {
    let mut x = h;
    if time_conditioning {
        let rows = tape.value(h).rows();
        let tcol = tape.constant(Tensor::full(&[rows, 1], t));
        x = tape.concat(h, tcol)?;
    }
    for &(w, b, act) in layers {
        x = dense(tape, x, w, b, act)?;
    }
    Ok(x)
}
