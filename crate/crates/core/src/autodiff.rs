//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly, so node indices are already a
//! topological order and `backward` is a single reverse sweep. Named leaves
//! created with [`Graph::param`] are the only nodes reported in the gradient
//! map. [`Graph::stop_gradient`] is a barrier: its input never receives
//! gradient, and parameters reachable only through it get no entry at all.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

type Derivative = Box<dyn Fn(f64) -> f64>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Clamp { x: Var, low: f64, high: f64 },
    NormalizeRows { x: Var, eps: f64 },
    Standardize { x: Var, eps: f64 },
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, onehot: Tensor },
    StopGradient,
    Map { x: Var, derivative: Derivative },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "Leaf",
            Op::MatMul(..) => "MatMul",
            Op::AddRow(..) => "AddRow",
            Op::Add(..) => "Add",
            Op::Sub(..) => "Sub",
            Op::Mul(..) => "Mul",
            Op::Scale(..) => "Scale",
            Op::AddScalar(..) => "AddScalar",
            Op::Relu(..) => "Relu",
            Op::Clamp { .. } => "Clamp",
            Op::NormalizeRows { .. } => "NormalizeRows",
            Op::Standardize { .. } => "Standardize",
            Op::SumRows(..) => "SumRows",
            Op::Sum(..) => "Sum",
            Op::Mean(..) => "Mean",
            Op::CrossEntropy { .. } => "CrossEntropy",
            Op::StopGradient => "StopGradient",
            Op::Map { .. } => "Map",
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Set for trainable leaves; these are the keys of the gradient map.
    name: Option<String>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A trainable leaf whose gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a `[n]` bias to every row of a `B×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (rows, cols) = xv.as_matrix_dims();
        if xv.ndim() != 2 || bv.shape() != [cols] {
            return Err(Error::Shape {
                op: "add_row",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for r in 0..rows {
            for (o, b) in out.data_mut()[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(bv.data())
            {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    /// Clamps into `[low, high]`; gradient passes only where the input was in range.
    pub fn clamp(&mut self, x: Var, low: f64, high: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(low, high));
        self.push(out, Op::Clamp { x, low, high })
    }

    /// L2-normalizes every vector along the last axis (see [`tensor::l2_normalize`]).
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let out = tensor::l2_normalize(self.value(x), eps);
        self.push(out, Op::NormalizeRows { x, eps })
    }

    /// Standardizes every column of a `B×n` matrix with its batch mean and
    /// variance: `(x − μ) / sqrt(σ² + eps)`.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Var {
        let out = column_standardize(self.value(x), eps).0;
        self.push(out, Op::Standardize { x, eps })
    }

    /// Sums along the last axis: `B×n → [B]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.as_matrix_dims();
        let data = (0..rows)
            .map(|r| xv.data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        self.push(Tensor::vector(data), Op::SumRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / xv.numel() as f64);
        self.push(out, Op::Mean(x))
    }

    /// Mean softmax cross-entropy of `B×C` logits against a constant one-hot target.
    pub fn cross_entropy(&mut self, logits: Var, onehot: &Tensor) -> Result<Var> {
        let value = tensor::cross_entropy(self.value(logits), onehot)?;
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                onehot: onehot.clone(),
            },
        ))
    }

    /// Identity on the forward pass; blocks all gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient)
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        derivative: impl Fn(f64) -> f64 + 'static,
    ) -> Var {
        let out = self.value(x).map(f);
        self.push(
            out,
            Op::Map {
                x,
                derivative: Box::new(derivative),
            },
        )
    }

    /// Reverse sweep from a scalar `loss`, returning gradients of every named
    /// parameter reachable from it without crossing a stop-gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (parent, contribution) in self.local_backward(node, &g)? {
                accumulate(&mut grads[parent.0], contribution)?;
            }
            grads[idx] = Some(g);
        }

        let mut out = Gradients::new();
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Some(name), Some(g)) = (&node.name, g) {
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = match &node.op {
            Op::Leaf | Op::StopGradient => vec![],
            Op::MatMul(a, b) => {
                let da = tensor::matmul(g, &self.value(*b).transpose()?)?;
                let db = tensor::matmul(&self.value(*a).transpose()?, g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::AddRow(x, b) => {
                let cols = self.value(*b).numel();
                let mut db = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::vector(db))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.mul(self.value(*b))?),
                (*b, g.mul(self.value(*a))?),
            ],
            Op::Scale(x, c) => vec![(*x, g.scale(*c))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Relu(x) => {
                let mask = self.value(*x);
                vec![(*x, g.zip_map(mask, "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?)]
            }
            Op::Clamp { x, low, high } => {
                let xv = self.value(*x);
                let pass = |gv: f64, v: f64| if v >= *low && v <= *high { gv } else { 0.0 };
                vec![(*x, g.zip_map(xv, "clamp", pass)?)]
            }
            Op::NormalizeRows { x, eps } => {
                let xv = self.value(*x);
                let y = &node.value;
                let (rows, cols) = xv.as_matrix_dims();
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let xr = &xv.data()[span.clone()];
                    let yr = &y.data()[span.clone()];
                    let gr = &g.data()[span.clone()];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dr = &mut dx.data_mut()[span];
                    if norm >= *eps {
                        let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..cols {
                            dr[i] = (gr[i] - yr[i] * proj) / norm;
                        }
                    } else {
                        for i in 0..cols {
                            dr[i] = gr[i] / eps;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Standardize { x, eps } => {
                let xv = self.value(*x);
                let y = &node.value;
                let (rows, cols) = xv.as_matrix_dims();
                let inv_std = column_standardize(xv, *eps).1;
                let n = rows as f64;
                let mut dx = Tensor::zeros(xv.shape());
                for c in 0..cols {
                    let (mut mean_g, mut mean_gy) = (0.0, 0.0);
                    for r in 0..rows {
                        let i = r * cols + c;
                        mean_g += g.data()[i] / n;
                        mean_gy += g.data()[i] * y.data()[i] / n;
                    }
                    for r in 0..rows {
                        let i = r * cols + c;
                        dx.data_mut()[i] = inv_std[c] * (g.data()[i] - mean_g - y.data()[i] * mean_gy);
                    }
                }
                vec![(*x, dx)]
            }
            Op::SumRows(x) => {
                let xv = self.value(*x);
                let (rows, cols) = xv.as_matrix_dims();
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..rows {
                    let gr = g.data()[r];
                    dx.data_mut()[r * cols..(r + 1) * cols].fill(gr);
                }
                vec![(*x, dx)]
            }
            Op::Sum(x) => {
                let gv = g.item()?;
                vec![(*x, Tensor::filled(self.value(*x).shape(), gv))]
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.item()? / xv.numel() as f64;
                vec![(*x, Tensor::filled(xv.shape(), gv))]
            }
            Op::CrossEntropy { logits, onehot } => {
                let lv = self.value(*logits);
                let scale = g.item()? / lv.rows() as f64;
                let probs = tensor::softmax_rows(lv);
                vec![(*logits, probs.zip_map(onehot, "cross_entropy", |p, y| scale * (p - y))?)]
            }
            Op::Map { x, derivative } => {
                let xv = self.value(*x);
                vec![(*x, g.zip_map(xv, "map", |gv, xv| gv * derivative(xv))?)]
            }
        };
        Ok(out)
    }
}

/// Column-standardized copy of `x` and the per-column `1/sqrt(σ² + eps)`.
fn column_standardize(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (rows, cols) = x.as_matrix_dims();
    let n = rows as f64;
    let mut out = x.clone();
    let mut inv_std = vec![0.0; cols];
    for (c, inv) in inv_std.iter_mut().enumerate() {
        let mean = (0..rows).map(|r| x.data()[r * cols + c]).sum::<f64>() / n;
        let var = (0..rows).map(|r| (x.data()[r * cols + c] - mean).powi(2)).sum::<f64>() / n;
        *inv = 1.0 / (var + eps).sqrt();
        for r in 0..rows {
            out.data_mut()[r * cols + c] = (x.data()[r * cols + c] - mean) * *inv;
        }
    }
    (out, inv_std)
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) -> Result<()> {
    match slot {
        Some(existing) => *existing = existing.add(&contribution)?,
        None => *slot = Some(contribution),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![-1.0, 2.0]));
        let r = g.relu(x);
        let loss = g.sum(r);
        assert_eq!(g.backward(loss).unwrap()["x"].data(), &[0.0, 1.0]);
    }

    #[test]
    fn unused_parameter_is_absent() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0]));
        let _unused = g.param("unused", Tensor::vector(vec![5.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.contains_key("x"));
        assert!(!grads.contains_key("unused"));
    }

    #[test]
    fn stop_gradient_blocks_parameters_behind_it() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::vector(vec![1.0, 2.0]));
        let b = g.param("b", Tensor::vector(vec![3.0, 4.0]));
        let sb = g.stop_gradient(b);
        assert_eq!(g.value(sb), g.value(b));
        let prod = g.mul(a, sb).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["a"].data(), &[3.0, 4.0]);
        assert!(!grads.contains_key("b"));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x) + sum(3x) → grad 4
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, -1.0]));
        let s1 = g.sum(x);
        let x3 = g.scale(x, 3.0);
        let s2 = g.sum(x3);
        let loss = g.add(s1, s2).unwrap();
        assert_eq!(g.backward(loss).unwrap()["x"].data(), &[4.0, 4.0]);
    }

    #[test]
    fn normalize_below_eps_scales_by_eps() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![0.0, 0.0]));
        let n = g.l2_normalize(x, 0.5);
        assert_eq!(g.value(n).data(), &[0.0, 0.0]);
        let loss = g.sum(n);
        assert_eq!(g.backward(loss).unwrap()["x"].data(), &[2.0, 2.0]);
    }

    #[test]
    fn standardize_zero_mean_unit_variance() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0], vec![8.0, 5.0]]).unwrap());
        let y = g.standardize(x, 0.0);
        let v = g.value(y).data().to_vec();
        let col0 = [v[0], v[2], v[4]];
        assert!(col0.iter().sum::<f64>().abs() < 1e-12);
        assert!((col0.iter().map(|a| a * a).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        // A constant column has zero variance; eps > 0 keeps it finite.
        let y = g.standardize(x, 1e-5);
        assert_eq!(g.value(y).data()[1], 0.0);
    }

    #[test]
    fn add_row_rejects_wrong_bias_width() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add_row(x, b), Err(Error::Shape { .. })));
    }
}
