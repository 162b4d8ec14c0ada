//! Entailment classifier on top of a pair of sentence encodings.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::NumArray;

/// Width of each fully connected layer.
pub const DEFAULT_FC_DIM: usize = 512;
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment = 0,
    Neutral = 1,
    Contradiction = 2,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [NliLabel::Entailment, NliLabel::Neutral, NliLabel::Contradiction];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(Error::InvalidLabel(i))
    }

    pub fn name(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        }
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    None,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "none" => Ok(Activation::None),
            other => Err(Error::Config(format!("unknown activation `{other}` (expected tanh or none)"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Length of one sentence encoding; the head input is four times this.
    pub encoding_dim: usize,
    pub fc_dim: usize,
    pub activation: Activation,
}

impl HeadConfig {
    pub fn new(encoding_dim: usize) -> Self {
        Self {
            encoding_dim,
            fc_dim: DEFAULT_FC_DIM,
            activation: Activation::Tanh,
        }
    }

    pub fn feature_dim(&self) -> usize {
        4 * self.encoding_dim
    }
}

/// Two fully connected layers followed by the 3-way output layer. Weights
/// are stored `in × out` so a row of features multiplies from the left.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub config: HeadConfig,
    pub layer1_w: NumArray,
    pub layer1_b: NumArray,
    pub layer2_w: NumArray,
    pub layer2_b: NumArray,
    pub out_w: NumArray,
    pub out_b: NumArray,
}

const HEAD_NAMES: [&str; 6] = [
    "head.layer1.w",
    "head.layer1.b",
    "head.layer2.w",
    "head.layer2.b",
    "head.out.w",
    "head.out.b",
];

impl HeadParams {
    pub fn zeros(config: HeadConfig) -> Self {
        let [a, b, c, d, e, f] = Self::shapes(&config);
        Self {
            config,
            layer1_w: NumArray::zeros(&a),
            layer1_b: NumArray::zeros(&b),
            layer2_w: NumArray::zeros(&c),
            layer2_b: NumArray::zeros(&d),
            out_w: NumArray::zeros(&e),
            out_b: NumArray::zeros(&f),
        }
    }

    /// Weights uniform on `(−1/√fan_in, 1/√fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(config: HeadConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let f = config.feature_dim() as f64;
        let h = config.fc_dim as f64;
        p.layer1_w = NumArray::uniform(p.layer1_w.shape(), 1.0 / f.sqrt(), rng);
        p.layer2_w = NumArray::uniform(p.layer2_w.shape(), 1.0 / h.sqrt(), rng);
        p.out_w = NumArray::uniform(p.out_w.shape(), 1.0 / h.sqrt(), rng);
        p
    }

    fn shapes(config: &HeadConfig) -> [Vec<usize>; 6] {
        let (f, h) = (config.feature_dim(), config.fc_dim);
        [
            vec![f, h],
            vec![h],
            vec![h, h],
            vec![h],
            vec![h, NUM_CLASSES],
            vec![NUM_CLASSES],
        ]
    }

    pub fn expected_layout(config: &HeadConfig) -> Vec<(String, Vec<usize>)> {
        HEAD_NAMES
            .iter()
            .map(|s| s.to_string())
            .zip(Self::shapes(config))
            .collect()
    }

    pub fn array_names(&self) -> Vec<String> {
        HEAD_NAMES.iter().map(|s| s.to_string()).collect()
    }

    pub fn arrays(&self) -> Vec<&NumArray> {
        vec![
            &self.layer1_w,
            &self.layer1_b,
            &self.layer2_w,
            &self.layer2_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut NumArray> {
        vec![
            &mut self.layer1_w,
            &mut self.layer1_b,
            &mut self.layer2_w,
            &mut self.layer2_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn from_arrays(config: HeadConfig, arrays: Vec<NumArray>) -> Result<Self> {
        let mut p = Self::zeros(config);
        let slots = p.arrays_mut();
        if slots.len() != arrays.len() {
            return Err(Error::shape("HeadParams::from_arrays", &[slots.len()], &[arrays.len()]));
        }
        for (slot, arr) in slots.into_iter().zip(arrays) {
            if slot.shape() != arr.shape() {
                return Err(Error::shape("HeadParams::from_arrays", slot.shape(), arr.shape()));
            }
            *slot = arr;
        }
        Ok(p)
    }
}

/// Head parameters placed on a graph.
#[derive(Debug, Clone)]
pub struct HeadNodes {
    activation: Activation,
    feature_dim: usize,
    leaves: Vec<NodeId>,
}

impl HeadNodes {
    pub fn bind(g: &mut Graph, params: &HeadParams, trainable: bool) -> Result<Self> {
        let mut leaves = Vec::with_capacity(6);
        for a in params.arrays() {
            leaves.push(if trainable { g.param(a.clone())? } else { g.constant(a.clone())? });
        }
        Ok(Self {
            activation: params.config.activation,
            feature_dim: params.config.feature_dim(),
            leaves,
        })
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    fn act(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self.activation {
            Activation::Tanh => g.tanh(x),
            Activation::None => Ok(x),
        }
    }

    /// Logits for a `B × 4k` feature matrix (or a single feature vector).
    pub fn logits(&self, g: &mut Graph, features: NodeId) -> Result<NodeId> {
        let fv = g.value(features);
        if fv.cols() != self.feature_dim {
            return Err(Error::shape("head_logits", fv.shape(), &[self.feature_dim]));
        }
        let x = if fv.ndim() == 1 { g.vconcat(&[features])? } else { features };
        let l = &self.leaves;
        let z1 = g.matmul(x, l[0])?;
        let z1 = g.add_row_bias(z1, l[1])?;
        let a1 = self.act(g, z1)?;
        let z2 = g.matmul(a1, l[2])?;
        let z2 = g.add_row_bias(z2, l[3])?;
        let a2 = self.act(g, z2)?;
        let z3 = g.matmul(a2, l[4])?;
        g.add_row_bias(z3, l[5])
    }
}

/// `[u; v; |u − v|; u ⊙ v]` for vectors or row-aligned matrices.
pub fn build_features_node(g: &mut Graph, u: NodeId, v: NodeId) -> Result<NodeId> {
    if g.value(u).shape() != g.value(v).shape() {
        return Err(Error::shape("build_features", g.value(u).shape(), g.value(v).shape()));
    }
    let diff = g.sub(u, v)?;
    let dist = g.abs(diff)?;
    let prod = g.mul(u, v)?;
    g.concat(&[u, v, dist, prod])
}

pub fn build_features(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if u.len() != v.len() {
        return Err(Error::shape("build_features", &[u.len()], &[v.len()]));
    }
    let mut out = Vec::with_capacity(4 * u.len());
    out.extend_from_slice(u);
    out.extend_from_slice(v);
    out.extend(u.iter().zip(v).map(|(a, b)| (a - b).abs()));
    out.extend(u.iter().zip(v).map(|(a, b)| a * b));
    Ok(out)
}

pub fn head_logits(params: &HeadParams, features: &[f64]) -> Result<[f64; 3]> {
    let mut g = Graph::new();
    let nodes = HeadNodes::bind(&mut g, params, false)?;
    let f = g.constant(NumArray::vector(features.to_vec()))?;
    let z = nodes.logits(&mut g, f)?;
    let d = g.value(z).data();
    Ok([d[0], d[1], d[2]])
}

/// Argmax with ties going to the lowest class index.
pub fn predict(logits: &[f64]) -> NliLabel {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().take(NUM_CLASSES) {
        if z > logits[best] {
            best = i;
        }
    }
    NliLabel::ALL[best]
}
