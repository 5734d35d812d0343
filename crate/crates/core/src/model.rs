//! MLP components of the online and target networks: encoder, projector,
//! predictor and classification head, with initialization and the EMA
//! target update.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which width the classification head reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInput {
    /// The encoder output `y`.
    #[default]
    Representation,
    /// The projector output `z`.
    Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    /// Flattened `H·W·C`.
    pub input_dim: usize,
    pub encoder_dims: Vec<usize>,
    pub projector_dims: Vec<usize>,
    pub predictor_dims: Vec<usize>,
    pub num_classes: usize,
    pub head_input: HeadInput,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            input_dim: 256,
            encoder_dims: vec![128, 64],
            projector_dims: vec![64, 32],
            predictor_dims: vec![64, 32],
            num_classes: 4,
            head_input: HeadInput::Representation,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::validation("input_dim and num_classes must be positive"));
        }
        for (name, dims) in [
            ("encoder_dims", &self.encoder_dims),
            ("projector_dims", &self.projector_dims),
            ("predictor_dims", &self.predictor_dims),
        ] {
            if dims.is_empty() || dims.contains(&0) {
                return Err(Error::validation(format!(
                    "{name} must be a nonempty list of positive widths"
                )));
            }
        }
        if self.predictor_dims.last() != self.projector_dims.last() {
            return Err(Error::validation(format!(
                "predictor output width {:?} must equal projector output width {:?}",
                self.predictor_dims.last(),
                self.projector_dims.last()
            )));
        }
        Ok(())
    }

    pub fn representation_width(&self) -> usize {
        *self.encoder_dims.last().expect("validated spec")
    }

    pub fn latent_width(&self) -> usize {
        *self.projector_dims.last().expect("validated spec")
    }

    pub fn head_input_width(&self) -> usize {
        match self.head_input {
            HeadInput::Representation => self.representation_width(),
            HeadInput::Projection => self.latent_width(),
        }
    }

    /// Layer widths `(in, out)` of one component.
    pub fn layer_widths(&self, component: Component) -> Vec<(usize, usize)> {
        let (input, dims) = match component {
            Component::Encoder => (self.input_dim, self.encoder_dims.clone()),
            Component::Projector => (self.representation_width(), self.projector_dims.clone()),
            Component::Predictor => (self.latent_width(), self.predictor_dims.clone()),
            Component::Head => (self.head_input_width(), vec![self.num_classes]),
        };
        std::iter::once(input)
            .chain(dims.iter().copied())
            .zip(dims.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Encoder,
    Projector,
    Predictor,
    Head,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Encoder,
        Component::Projector,
        Component::Predictor,
        Component::Head,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Projector => "projector",
            Component::Predictor => "predictor",
            Component::Head => "head",
        }
    }

    pub fn of(name: &str) -> Option<Component> {
        let prefix = name.split('.').next()?;
        Component::ALL.into_iter().find(|c| c.prefix() == prefix)
    }

    /// Whether hidden layers use batch statistics. Only the pretraining
    /// heads do, so encoder outputs never depend on the rest of the batch.
    pub fn standardizes_hidden(self) -> bool {
        matches!(self, Component::Projector | Component::Predictor)
    }

    pub fn weight_name(self, layer: usize) -> String {
        format!("{}.{layer}.weight", self.prefix())
    }

    pub fn bias_name(self, layer: usize) -> String {
        format!("{}.{layer}.bias", self.prefix())
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Named trainable tensors, e.g. `encoder.0.weight` (`in×out`) and
/// `encoder.0.bias` (`[out]`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn has(&self, component: Component) -> bool {
        self.tensors.contains_key(&component.weight_name(0))
    }

    pub fn num_layers(&self, component: Component) -> usize {
        (0..)
            .take_while(|&i| self.tensors.contains_key(&component.weight_name(i)))
            .count()
    }

    /// Only the tensors of the given components.
    pub fn subset(&self, components: &[Component]) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(name, _)| Component::of(name).is_some_and(|c| components.contains(&c)))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn without(&self, component: Component) -> ParamSet {
        let keep: Vec<Component> = Component::ALL
            .into_iter()
            .filter(|&c| c != component)
            .collect();
        self.subset(&keep)
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Checks that every tensor of `self` has a same-shaped counterpart in `other`.
    pub fn check_congruent_with(&self, other: &ParamSet) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(Error::contract(format!(
                        "parameter {name}: shape {:?} vs {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                None => {
                    return Err(Error::contract(format!("parameter {name} missing from counterpart")))
                }
            }
        }
        Ok(())
    }

    /// Checks shapes against a spec for every component present.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        for c in Component::ALL {
            if !self.has(c) {
                continue;
            }
            let widths = spec.layer_widths(c);
            if self.num_layers(c) != widths.len() {
                return Err(Error::contract(format!(
                    "{c}: {} layers in parameters, {} in spec",
                    self.num_layers(c),
                    widths.len()
                )));
            }
            for (i, (fan_in, fan_out)) in widths.into_iter().enumerate() {
                let w = &self.tensors[&c.weight_name(i)];
                let b = self.get(&c.bias_name(i));
                if w.shape() != [fan_in, fan_out] || b.map(Tensor::shape) != Some(&[fan_out][..]) {
                    return Err(Error::contract(format!(
                        "{c} layer {i}: expected {fan_in}x{fan_out}, found weight {:?}",
                        w.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

fn init_component(spec: &NetworkSpec, component: Component, rng: &Rng, out: &mut ParamSet) {
    let widths = spec.layer_widths(component);
    let last = widths.len() - 1;
    for (i, (fan_in, fan_out)) in widths.into_iter().enumerate() {
        let mut layer_rng = rng.derive(((component as u64) << 32) | i as u64);
        // He scaling ahead of a ReLU, plain 1/fan_in on the linear output layer.
        let gain = if i < last { 2.0 } else { 1.0 };
        let std = (gain / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| std * layer_rng.normal()).collect();
        out.insert(
            component.weight_name(i),
            Tensor::new(vec![fan_in, fan_out], data).expect("positive widths"),
        );
        out.insert(component.bias_name(i), Tensor::zeros(&[fan_out]));
    }
}

/// Fresh online parameters: encoder, projector and predictor.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let rng = Rng::new(seed);
    let mut params = ParamSet::new();
    for c in [Component::Encoder, Component::Projector, Component::Predictor] {
        init_component(spec, c, &rng, &mut params);
    }
    Ok(params)
}

/// A freshly initialized classification head.
pub fn init_head(spec: &NetworkSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut params = ParamSet::new();
    init_component(spec, Component::Head, &Rng::new(seed), &mut params);
    Ok(params)
}

/// Graph handles for a [`ParamSet`], keyed by the parameter's own name.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Registers each tensor as a trainable leaf whose gradient key is
    /// `prefix` followed by the parameter name.
    pub fn trainable(g: &mut Graph, params: &ParamSet, prefix: &str) -> Self {
        ParamVars {
            vars: params
                .iter()
                .map(|(n, t)| (n.clone(), g.param(format!("{prefix}{n}"), t.clone())))
                .collect(),
        }
    }

    pub fn frozen(g: &mut Graph, params: &ParamSet) -> Self {
        ParamVars {
            vars: params
                .iter()
                .map(|(n, t)| (n.clone(), g.constant(t.clone())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn has(&self, component: Component) -> bool {
        self.vars.contains_key(&component.weight_name(0))
    }
}

/// Variance floor for hidden-layer batch standardization.
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Runs one MLP component: linear layers with ReLU between them and no
/// activation after the last. Projector and predictor hidden layers are
/// standardized with batch statistics before the ReLU.
pub fn forward_component(g: &mut Graph, vars: &ParamVars, component: Component, x: Var) -> Result<Var> {
    if !vars.has(component) {
        return Err(Error::contract(format!("parameter set has no {component} group")));
    }
    let mut h = x;
    let mut layer = 0;
    while let Some(w) = vars.get(&component.weight_name(layer)) {
        if layer > 0 {
            if component.standardizes_hidden() {
                h = g.standardize(h, BATCH_NORM_EPS);
            }
            h = g.relu(h);
        }
        let b = vars
            .get(&component.bias_name(layer))
            .ok_or_else(|| Error::contract(format!("missing {}", component.bias_name(layer))))?;
        let lin = g.matmul(h, w)?;
        h = g.add_row(lin, b)?;
        layer += 1;
    }
    Ok(h)
}

/// Classifier logits: encoder, then the projector if the set carries one,
/// then the head.
pub fn forward_classifier(g: &mut Graph, vars: &ParamVars, x: Var) -> Result<Var> {
    let mut h = forward_component(g, vars, Component::Encoder, x)?;
    if vars.has(Component::Projector) {
        h = forward_component(g, vars, Component::Projector, h)?;
    }
    forward_component(g, vars, Component::Head, h)
}

fn as_batch(x: &Tensor) -> Tensor {
    if x.ndim() == 2 {
        x.clone()
    } else {
        x.flatten_rows()
    }
}

fn run_component(params: &ParamSet, component: Component, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = ParamVars::frozen(&mut g, &params.subset(&[component]));
    let input = g.constant(as_batch(x));
    let out = forward_component(&mut g, &vars, component, input)?;
    Ok(g.value(out).clone())
}

/// `B×input_dim → B×d_y`; image batches are flattened first.
pub fn encode(params: &ParamSet, v: &Tensor) -> Result<Tensor> {
    run_component(params, Component::Encoder, v)
}

pub fn project(params: &ParamSet, y: &Tensor) -> Result<Tensor> {
    run_component(params, Component::Projector, y)
}

pub fn predict_latent(params: &ParamSet, z: &Tensor) -> Result<Tensor> {
    run_component(params, Component::Predictor, z)
}

/// Raw head logits for an input already at the head's width.
pub fn classify(params: &ParamSet, features: &Tensor) -> Result<Tensor> {
    run_component(params, Component::Head, features)
}

/// End-to-end logits from images or flattened inputs.
pub fn classifier_logits(params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = ParamVars::frozen(&mut g, params);
    let input = g.constant(as_batch(x));
    let out = forward_classifier(&mut g, &vars, input)?;
    Ok(g.value(out).clone())
}

/// Online parameters θ, target parameters ξ, EMA decay τ, learning rate η.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub online: ParamSet,
    pub target: ParamSet,
    pub tau: f64,
    pub eta: f64,
    pub step: u64,
}

impl TrainState {
    /// Target starts as an exact copy of the online encoder and projector.
    pub fn new(online: ParamSet, tau: f64, eta: f64) -> Result<Self> {
        let target = online.subset(&[Component::Encoder, Component::Projector]);
        let state = TrainState {
            online,
            target,
            tau,
            eta,
            step: 0,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::validation(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::validation(format!("eta {} must be finite and >= 0", self.eta)));
        }
        if self.target.has(Component::Predictor) {
            return Err(Error::contract("target network must not carry a predictor"));
        }
        self.target.check_congruent_with(&self.online)
    }

    /// `ξ ← τ·ξ + (1−τ)·θ` for every target tensor; θ is untouched.
    pub fn ema_update(&mut self) -> Result<()> {
        self.target.check_congruent_with(&self.online)?;
        let tau = self.tau;
        for (name, xi) in self.target.tensors.iter_mut() {
            let theta = &self.online.tensors[name];
            for (x, &t) in xi.data_mut().iter_mut().zip(theta.data()) {
                *x = tau * *x + (1.0 - tau) * t;
            }
        }
        Ok(())
    }
}
