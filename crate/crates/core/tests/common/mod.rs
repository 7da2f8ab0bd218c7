#![allow(dead_code)]

use ndarray::Array2;
use vntgt::positional::positional_encoding;
use vntgt::{GTModel, Graph, ModelConfig, NodeInputs};

pub struct Setup {
    pub graph: Graph,
    pub positions: Array2<f64>,
    pub gt: GTModel,
}

impl Setup {
    pub fn inputs(&self) -> NodeInputs<'_> {
        NodeInputs {
            features: self.graph.features(),
            positions: &self.positions,
        }
    }
}

pub fn tiny_config(input_dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        hidden: 16,
        layers: 2,
        heads: 2,
        pos_dim: 4,
        seed: 7,
    }
}

/// Randomly initialized, frozen tiny encoder over `graph`.
pub fn frozen(graph: Graph) -> Setup {
    let positions = positional_encoding(&graph.structure(), 4).unwrap();
    let mut gt = GTModel::new(tiny_config(graph.feature_dim())).unwrap();
    gt.freeze();
    Setup { graph, positions, gt }
}
