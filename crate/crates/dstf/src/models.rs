//! Stock architectures used by the experiment pipeline.

use crate::error::Result;
use crate::layers::{LayerSpec, Network};

/// 28x28 grayscale convnet: two conv/pool blocks into three dense layers.
/// Every ReLU participates in activation regularization.
pub fn lenet5() -> Result<Network> {
    Network::new(
        vec![1, 28, 28],
        vec![
            LayerSpec::conv2d(6, (5, 5), 1, 0),
            LayerSpec::relu(true),
            LayerSpec::maxpool2x2(),
            LayerSpec::conv2d(16, (5, 5), 1, 0),
            LayerSpec::relu(true),
            LayerSpec::maxpool2x2(),
            LayerSpec::flatten(),
            LayerSpec::dense(120),
            LayerSpec::relu(true),
            LayerSpec::dense(84),
            LayerSpec::relu(true),
            LayerSpec::dense(10),
            LayerSpec::softmax_xent(),
        ],
    )
}

/// Small dense net on 1x8x8 inputs, for fast synthetic-data tests.
pub fn mlp_toy(classes: usize) -> Result<Network> {
    Network::new(
        vec![1, 8, 8],
        vec![
            LayerSpec::flatten(),
            LayerSpec::dense(32),
            LayerSpec::relu(true),
            LayerSpec::dense(classes),
            LayerSpec::softmax_xent(),
        ],
    )
}

/// Small convnet on 1x8x8 inputs; exercises conv, pool, and dense paths.
pub fn cnn_toy(classes: usize) -> Result<Network> {
    Network::new(
        vec![1, 8, 8],
        vec![
            LayerSpec::conv2d(4, (3, 3), 1, 0),
            LayerSpec::relu(true),
            LayerSpec::maxpool2x2(),
            LayerSpec::flatten(),
            LayerSpec::dense(classes),
            LayerSpec::softmax_xent(),
        ],
    )
}

/// Looks up a model builder by name.
pub fn by_name(name: &str, classes: usize) -> Result<Network> {
    match name {
        "lenet5" => lenet5(),
        "mlp_toy" => mlp_toy(classes),
        "cnn_toy" => cnn_toy(classes),
        other => Err(crate::error::Error::Config(format!(
            "unknown model {other:?}; expected lenet5, mlp_toy, or cnn_toy"
        ))),
    }
}
