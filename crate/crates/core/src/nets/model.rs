use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::drift::{dense, drift_forward, BoundLayer};
use super::{Activation, DenseLayer, DriftNet, NetError};
use crate::ad::{Tape, Tensor, Var};
use crate::seed::{self, stream};
use crate::solvers::{ode_solve, sde_solve, SolveTrace, SolverConfig, SolverError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `h ← h + f(h)`.
    Residual,
    /// `dh/dt = f(h, t)` over `[0, T]`.
    Node,
    /// `dh = f(h, t) dt + (σ/√T) dB_t` over `[0, T]`.
    Nsde,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Required for `Node`/`Nsde`, absent for `Residual`.
    pub solver: Option<SolverConfig>,
}

/// Declarative classifier: linear stem, 1–3 blocks on the (optionally
/// augmented) state, linear head reading the full final state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub state_dim: usize,
    /// Extra zero-initialized state coordinates (ODE/SDE blocks only).
    pub augment_dim: usize,
    /// Hidden widths of every drift net.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Append `t` to drift inputs of ODE/SDE blocks.
    pub time_conditioning: bool,
    pub classes: usize,
    pub blocks: Vec<BlockSpec>,
    pub seed: u64,
}

impl ModelSpec {
    /// `n` identical blocks with the default drift shape (two tanh layers of 64).
    pub fn uniform(
        kind: BlockKind,
        n: usize,
        solver: Option<SolverConfig>,
        input_dim: usize,
        state_dim: usize,
        classes: usize,
        seed: u64,
    ) -> Self {
        let solver = if kind == BlockKind::Residual { None } else { solver };
        Self {
            input_dim,
            state_dim,
            augment_dim: 0,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            time_conditioning: kind != BlockKind::Residual,
            classes,
            blocks: vec![BlockSpec { kind, solver }; n],
            seed,
        }
    }

    /// Dimension of the evolving state, augmentation included.
    pub fn width(&self) -> usize {
        self.state_dim + self.augment_dim
    }

    fn layers_per_block(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn block_time_conditioned(&self, block: usize) -> bool {
        self.time_conditioning && self.blocks[block].kind != BlockKind::Residual
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidSpec(m));
        if self.input_dim == 0 || self.state_dim == 0 {
            return bad("input_dim and state_dim must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(1..=3).contains(&self.blocks.len()) {
            return bad(format!("block count must be 1..=3, got {}", self.blocks.len()));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            match (b.kind, &b.solver) {
                (BlockKind::Residual, None) => {
                    if self.augment_dim > 0 {
                        return bad(format!(
                            "block {i}: augment_dim is only allowed with Node/Nsde blocks"
                        ));
                    }
                }
                (BlockKind::Residual, Some(_)) => {
                    return bad(format!("block {i}: residual blocks take no solver"))
                }
                (_, None) => return bad(format!("block {i}: {:?} needs a solver", b.kind)),
                (kind, Some(cfg)) => {
                    cfg.validate()
                        .map_err(|e| NetError::InvalidSpec(format!("block {i}: {e}")))?;
                    let stochastic = cfg.method.is_stochastic();
                    if (kind == BlockKind::Nsde) != stochastic {
                        return bad(format!(
                            "block {i}: {kind:?} cannot use solver {:?}",
                            cfg.method
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.width();
        let mut out = vec![
            ("stem.weight".to_string(), vec![self.input_dim, self.state_dim]),
            ("stem.bias".to_string(), vec![self.state_dim]),
        ];
        for b in 0..self.blocks.len() {
            let mut fan_in = d + usize::from(self.block_time_conditioned(b));
            let widths = self.hidden.iter().copied().chain(std::iter::once(d));
            for (j, w) in widths.enumerate() {
                out.push((format!("block{b}.layer{j}.weight"), vec![fan_in, w]));
                out.push((format!("block{b}.layer{j}.bias"), vec![w]));
                fan_in = w;
            }
        }
        out.push(("head.weight".to_string(), vec![d, self.classes]));
        out.push(("head.bias".to_string(), vec![self.classes]));
        out
    }

    /// Indices (into the parameter list) owned by block `b`.
    pub fn block_range(&self, b: usize) -> Range<usize> {
        let per = 2 * self.layers_per_block();
        let start = 2 + b * per;
        start..start + per
    }

    pub fn head_range(&self) -> Range<usize> {
        let start = 2 + self.blocks.len() * 2 * self.layers_per_block();
        start..start + 2
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers_per_block() {
            Activation::Identity
        } else {
            self.activation
        }
    }
}

/// Total scalar parameter count implied by a spec.
pub fn param_count(spec: &ModelSpec) -> usize {
    spec.layout()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Learnable tensors in [`ModelSpec::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Parameters {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn check_against(&self, spec: &ModelSpec) -> Result<(), NetError> {
        let layout = spec.layout();
        if layout.len() != self.tensors.len() {
            return Err(NetError::ParamMismatch(format!(
                "spec expects {} tensors, got {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&self.tensors) {
            if t.shape() != shape.as_slice() {
                return Err(NetError::ParamMismatch(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Copy of block `b`'s drift network.
    pub fn drift_net(&self, spec: &ModelSpec, b: usize) -> DriftNet {
        let range = spec.block_range(b);
        let layers = self.tensors[range]
            .chunks(2)
            .enumerate()
            .map(|(j, wb)| DenseLayer {
                weights: wb[0].clone(),
                bias: wb[1].clone(),
                activation: spec.activation_of(j),
            })
            .collect();
        DriftNet {
            layers,
            time_conditioning: spec.block_time_conditioned(b),
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::squared_norm).sum()
    }
}

/// Which parameter tensors a training loop may update.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneMask {
    pub trainable: Vec<bool>,
}

impl FinetuneMask {
    pub fn all(n: usize) -> Self {
        Self {
            trainable: vec![true; n],
        }
    }
}

fn truncated_he(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break std * z;
            }
        })
        .collect()
}

fn init_tensor(seed: u64, index: usize, name: &str, shape: &[usize]) -> Tensor {
    if name.ends_with(".bias") {
        return Tensor::zeros(shape);
    }
    let mut rng = seed::rng(seed::derive_seed(seed, stream::INIT, index as u64));
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), truncated_he(&mut rng, shape[0], n)).expect("layout shapes are valid")
}

/// Fresh parameters: weights `N(0, 2/fan_in)` truncated at ±2 s.d., zero biases.
pub fn build_model(spec: &ModelSpec) -> Result<Parameters, NetError> {
    spec.validate()?;
    let (names, tensors) = spec
        .layout()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape))| {
            let t = init_tensor(spec.seed, i, &name, &shape);
            (name, t)
        })
        .unzip();
    Ok(Parameters { names, tensors })
}

/// Places parameters on a tape: trainable ones as leaves, the rest as constants.
pub fn bind(tape: &mut Tape, params: &Parameters, mask: Option<&FinetuneMask>) -> Vec<Var> {
    params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| match mask {
            Some(m) if !m.trainable[i] => tape.constant(t.clone()),
            _ => tape.leaf(t.clone()),
        })
        .collect()
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Final (augmented) state fed to the head.
    pub state: Var,
    pub traces: Vec<SolveTrace>,
}

/// Records a forward pass on `tape`. `noise` feeds every SDE block in order.
pub fn forward_on_tape(
    tape: &mut Tape,
    spec: &ModelSpec,
    vars: &[Var],
    x: &Tensor,
    noise: &mut ChaCha8Rng,
) -> Result<ForwardOutput, NetError> {
    if x.shape().len() != 2 || x.cols() != spec.input_dim {
        return Err(NetError::InvalidSpec(format!(
            "batch shape {:?} does not match input_dim {}",
            x.shape(),
            spec.input_dim
        )));
    }
    let rows = x.rows();
    let xv = tape.constant(x.clone());
    let mut h = dense(tape, xv, vars[0], vars[1], Activation::Identity)?;
    if spec.augment_dim > 0 {
        let pad = tape.constant(Tensor::zeros(&[rows, spec.augment_dim]));
        h = tape.concat(h, pad)?;
    }
    let mut traces = Vec::new();
    for (b, block) in spec.blocks.iter().enumerate() {
        let layers: Vec<BoundLayer> = vars[spec.block_range(b)]
            .chunks(2)
            .enumerate()
            .map(|(j, wb)| (wb[0], wb[1], spec.activation_of(j)))
            .collect();
        let tc = spec.block_time_conditioned(b);
        let drift = |tape: &mut Tape, h: Var, t: f64| drift_forward(tape, &layers, tc, h, t);
        let wrap = |source: SolverError| NetError::Solver { block: b, source };
        match block.kind {
            BlockKind::Residual => {
                let f = drift(tape, h, 0.0)?;
                h = tape.add(h, f)?;
                if !tape.value(h).is_finite() {
                    return Err(wrap(SolverError::Divergence { step: 1, time: 1.0 }));
                }
            }
            BlockKind::Node => {
                let cfg = block.solver.as_ref().expect("validated");
                let (out, trace) = ode_solve(tape, &drift, h, cfg).map_err(wrap)?;
                h = out;
                traces.push(trace);
            }
            BlockKind::Nsde => {
                let cfg = block.solver.as_ref().expect("validated");
                let sigma = cfg.sigma().map_err(wrap)?;
                let (out, trace) = sde_solve(tape, &drift, sigma, h, cfg, noise).map_err(wrap)?;
                h = out;
                traces.push(trace);
            }
        }
    }
    let head = spec.head_range();
    let logits = dense(tape, h, vars[head.start], vars[head.start + 1], Activation::Identity)?;
    Ok(ForwardOutput {
        logits,
        state: h,
        traces,
    })
}

/// Value-only forward pass: `(logits, final state)`.
pub fn forward(
    params: &Parameters,
    spec: &ModelSpec,
    x: &Tensor,
    noise: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor), NetError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let out = forward_on_tape(&mut tape, spec, &vars, x, noise)?;
    Ok((tape.value(out.logits).clone(), tape.value(out.state).clone()))
}

/// Logits only.
pub fn predict(
    params: &Parameters,
    spec: &ModelSpec,
    x: &Tensor,
    noise: &mut ChaCha8Rng,
) -> Result<Tensor, NetError> {
    forward(params, spec, x, noise).map(|(l, _)| l)
}

pub struct Replaced {
    pub spec: ModelSpec,
    pub params: Parameters,
    pub mask: FinetuneMask,
}

/// Swaps the last block for a freshly initialized SDE block.
///
/// Stem and earlier blocks are copied verbatim; the new block and the head are
/// initialized from `seed`. The mask marks the new block and head trainable,
/// or everything when `full_finetune` is set.
pub fn replace_final_block(
    spec: &ModelSpec,
    params: &Parameters,
    nsde: SolverConfig,
    seed: u64,
    full_finetune: bool,
) -> Result<Replaced, NetError> {
    spec.validate()?;
    params.check_against(spec)?;
    if !nsde.method.is_stochastic() {
        return Err(NetError::InvalidSpec(format!(
            "replacement block needs a stochastic solver, got {:?}",
            nsde.method
        )));
    }
    let last = spec.blocks.len() - 1;
    let mut new_spec = spec.clone();
    new_spec.blocks[last] = BlockSpec {
        kind: BlockKind::Nsde,
        solver: Some(nsde),
    };
    new_spec.seed = seed;
    new_spec.validate()?;
    let mut fresh = build_model(&new_spec)?;
    let keep = 0..spec.block_range(last).start;
    if new_spec.layout()[keep.clone()] != spec.layout()[keep.clone()] {
        return Err(NetError::ParamMismatch(
            "retained prefix changed shape after replacement".into(),
        ));
    }
    for i in keep.clone() {
        fresh.tensors[i] = params.tensors[i].clone();
    }
    let mut mask = FinetuneMask::all(fresh.len());
    if !full_finetune {
        for i in keep {
            mask.trainable[i] = false;
        }
    }
    Ok(Replaced {
        spec: new_spec,
        params: fresh,
        mask,
    })
}
