//! The BYOL objective and pretraining loop.
//!
//! The online network (encoder → projector → predictor) predicts the target
//! network's projection of the other view. Target outputs pass through a
//! stop-gradient, so only θ is trained by SGD; ξ follows θ by EMA.

use serde::{Deserialize, Serialize};

use crate::augment::{make_view_pair, AugmentationConfig};
use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{forward_component, init_params, Component, NetworkSpec, ParamSet, ParamVars, TrainState};
use crate::optim::sgd_step;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Norm floor for the normalization inside the loss.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Gradient-map prefix under which target parameters are registered.
pub const TARGET_PREFIX: &str = "target.";

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub tau: f64,
    pub seed: Option<u64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            batch_size: 64,
            eta: 0.5,
            tau: 0.99,
            seed: None,
        }
    }
}

impl PretrainConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("pretrain batch_size must be positive"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::validation(format!("pretrain eta {} must be > 0", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::validation(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEntry {
    pub step: u64,
    pub loss: f64,
}

/// Per-step training losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub entries: Vec<LossEntry>,
}

impl LossTrace {
    pub fn push(&mut self, step: u64, loss: f64) {
        self.entries.push(LossEntry { step, loss });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.loss)
    }

    /// `step,loss` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for e in &self.entries {
            out.push_str(&format!("{},{}\n", e.step, e.loss));
        }
        out
    }
}

/// Mean over rows of `2 − 2·cos(q, z′)`, i.e. the squared distance between
/// the L2-normalized vectors. The caller barriers `z_target`.
pub fn pair_loss_node(g: &mut Graph, q: Var, z_target: Var) -> Result<Var> {
    let (qs, zs) = (g.value(q).shape(), g.value(z_target).shape());
    if qs != zs || qs.len() != 2 {
        return Err(Error::Shape {
            op: "pair_loss",
            left: qs.to_vec(),
            right: zs.to_vec(),
        });
    }
    let qn = g.l2_normalize(q, NORMALIZE_EPS);
    let zn = g.l2_normalize(z_target, NORMALIZE_EPS);
    let prod = g.mul(qn, zn)?;
    let cos = g.sum_rows(prod);
    // Rounding can push |cos| a hair past 1.
    let cos = g.clamp(cos, -1.0, 1.0);
    let scaled = g.scale(cos, -2.0);
    let per_row = g.add_scalar(scaled, 2.0);
    Ok(g.mean(per_row))
}

pub fn pair_loss(q: &Tensor, z_target: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let q = g.constant(q.clone());
    let z = g.constant(z_target.clone());
    let loss = pair_loss_node(&mut g, q, z)?;
    g.value(loss).item()
}

fn online_prediction(g: &mut Graph, online: &ParamVars, x: Var) -> Result<Var> {
    let y = forward_component(g, online, Component::Encoder, x)?;
    let z = forward_component(g, online, Component::Projector, y)?;
    forward_component(g, online, Component::Predictor, z)
}

fn target_projection(g: &mut Graph, target: &ParamVars, x: Var) -> Result<Var> {
    let y = forward_component(g, target, Component::Encoder, x)?;
    let z = forward_component(g, target, Component::Projector, y)?;
    Ok(g.stop_gradient(z))
}

/// `L(v → online, v′ → target) + L(v′ → online, v → target)`.
pub fn symmetric_loss_node(
    g: &mut Graph,
    online: &ParamVars,
    target: &ParamVars,
    v: Var,
    v_prime: Var,
) -> Result<Var> {
    let (vs, vps) = (g.value(v).shape(), g.value(v_prime).shape());
    if vs != vps {
        return Err(Error::Shape {
            op: "symmetric_loss",
            left: vs.to_vec(),
            right: vps.to_vec(),
        });
    }
    let q = online_prediction(g, online, v)?;
    let z_prime = target_projection(g, target, v_prime)?;
    let forward = pair_loss_node(g, q, z_prime)?;

    let q_swapped = online_prediction(g, online, v_prime)?;
    let z = target_projection(g, target, v)?;
    let swapped = pair_loss_node(g, q_swapped, z)?;

    g.add(forward, swapped)
}

/// Symmetric loss and its gradients. Target tensors are registered as named
/// leaves under [`TARGET_PREFIX`] so the barrier, not their absence, is what
/// keeps them out of the gradient map.
pub fn symmetric_loss_with_grads(state: &TrainState, v: &Tensor, v_prime: &Tensor) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let online = ParamVars::trainable(&mut g, &state.online, "");
    let target = ParamVars::trainable(&mut g, &state.target, TARGET_PREFIX);
    let v = g.constant(v.flatten_rows());
    let v_prime = g.constant(v_prime.flatten_rows());
    let loss = symmetric_loss_node(&mut g, &online, &target, v, v_prime)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item()?, grads))
}

pub fn symmetric_loss(state: &TrainState, v: &Tensor, v_prime: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let online = ParamVars::frozen(&mut g, &state.online);
    let target = ParamVars::frozen(&mut g, &state.target);
    let v = g.constant(v.flatten_rows());
    let v_prime = g.constant(v_prime.flatten_rows());
    let loss = symmetric_loss_node(&mut g, &online, &target, v, v_prime)?;
    g.value(loss).item()
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    /// The gradient map the SGD update consumed.
    pub gradients: Gradients,
}

/// Two augmented views per image → symmetric loss → SGD on θ → EMA on ξ.
///
/// `x_batch` is `B×H×W×C`; image `i` draws its views from `rng.derive(i)`.
pub fn pretrain_step(
    state: &mut TrainState,
    x_batch: &Tensor,
    cfg: &AugmentationConfig,
    rng: &Rng,
) -> Result<StepOutput> {
    if x_batch.ndim() != 4 {
        return Err(Error::validation(format!(
            "pretrain batch must be B×H×W×C, got {:?}",
            x_batch.shape()
        )));
    }
    let image_shape = x_batch.shape()[1..].to_vec();
    let mut views = Vec::with_capacity(x_batch.rows());
    let mut views_prime = Vec::with_capacity(x_batch.rows());
    for i in 0..x_batch.rows() {
        let image = Tensor::new(image_shape.clone(), x_batch.row(i).to_vec())?;
        let (v, vp) = make_view_pair(&image, cfg, &rng.derive(i as u64))?;
        views.extend(v.into_data());
        views_prime.extend(vp.into_data());
    }
    let width = views.len() / x_batch.rows();
    let v = Tensor::new(vec![x_batch.rows(), width], views)?;
    let v_prime = Tensor::new(vec![x_batch.rows(), width], views_prime)?;

    let (loss, gradients) = symmetric_loss_with_grads(state, &v, &v_prime)?;
    sgd_step(&mut state.online, &gradients, state.eta)?;
    state.ema_update()?;
    state.step += 1;
    Ok(StepOutput { loss, gradients })
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub state: TrainState,
    pub trace: LossTrace,
}

impl Pretrained {
    pub fn online(&self) -> &ParamSet {
        &self.state.online
    }
}

/// Runs `epochs` passes over `images` (`N×H×W×C`) with a seeded shuffle per
/// epoch; a trailing partial batch is dropped.
pub fn pretrain(
    images: &Tensor,
    spec: &NetworkSpec,
    pcfg: &PretrainConfig,
    acfg: &AugmentationConfig,
) -> Result<Pretrained> {
    let seed = pcfg.seed();
    pcfg.validate()?;
    acfg.validate()?;
    spec.validate()?;
    if images.ndim() != 4 {
        return Err(Error::validation(format!(
            "pretraining images must be N×H×W×C, got {:?}",
            images.shape()
        )));
    }
    let n = images.rows();
    if n < pcfg.batch_size {
        return Err(Error::validation(format!(
            "{n} unlabeled images is fewer than batch size {}",
            pcfg.batch_size
        )));
    }
    let per_image = images.numel() / n;
    if per_image != spec.input_dim {
        return Err(Error::contract(format!(
            "images have {per_image} values each, network expects {}",
            spec.input_dim
        )));
    }

    let online = init_params(spec, seed)?;
    let mut state = TrainState::new(online, pcfg.tau, pcfg.eta)?;
    let mut trace = LossTrace::default();
    let root = Rng::new(seed);
    let shuffle = root.derive(SHUFFLE_STREAM);
    let augment = root.derive(AUGMENT_STREAM);
    for epoch in 0..pcfg.epochs {
        let order = shuffle.derive(epoch as u64).permutation(n);
        for batch in order.chunks_exact(pcfg.batch_size) {
            let x = images.select_rows(batch)?;
            let step_rng = augment.derive(state.step);
            let out = pretrain_step(&mut state, &x, acfg, &step_rng)?;
            trace.push(state.step - 1, out.loss);
        }
    }
    Ok(Pretrained { state, trace })
}
