//! Network definition: a scaled-down VGG-style stack of 3x3 conv blocks
//! with 2x2 pooling, followed by three fully-connected layers (fc6, fcA,
//! fcB) and a sigmoid head giving one independent probability per
//! attribute class. Layers carry freeze flags so training can run in the
//! two-phase head-first/finetune protocol.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Pool,
    Affine {
        out_features: usize,
    },
    Relu,
    Sigmoid,
    Dropout {
        rate: f64,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub frozen: bool,
    /// Conv blocks are numbered 1..; the fully-connected head sits in the
    /// block after the last conv block.
    pub block_id: u32,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Affine { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    /// (channels, height, width) of a single input sample.
    pub input_size: (usize, usize, usize),
    pub num_classes: usize,
    /// Name of the conv layer where phase-2 finetuning starts.
    pub finetune_boundary: String,
}

/// Freeze policy for the transfer-style protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Only the fully-connected layers train.
    Phase1,
    /// The conv block holding the finetune boundary and everything after it
    /// train as well.
    Phase2,
    /// Everything trains.
    Full,
}

/// Builds the default topology: four conv blocks (16/16, 32/32, 64/64, 64
/// channels, 3x3 kernels, each followed by 2x2 pooling), then
/// fc6-256 / fcA-128 / fcB-num_classes with ReLU and dropout 0.5 between
/// the fully-connected layers, ending in a sigmoid over the classes.
pub fn build_tinydan(num_classes: usize, input_size: (usize, usize, usize)) -> Result<ModelConfig> {
    let (c, h, w) = input_size;
    if num_classes < 1 {
        return Err(Error::Config("num_classes must be >= 1".into()));
    }
    if c == 0 || h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Config(format!(
            "input size {h}x{w} must be positive and divisible by 16 (four 2x pools)"
        )));
    }

    let conv = |name: &str, out: usize, block: u32| LayerSpec {
        name: name.into(),
        kind: LayerKind::Conv {
            out_channels: out,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        frozen: false,
        block_id: block,
    };
    let relu = |name: &str, block: u32| LayerSpec {
        name: name.into(),
        kind: LayerKind::Relu,
        frozen: false,
        block_id: block,
    };
    let pool = |name: &str, block: u32| LayerSpec {
        name: name.into(),
        kind: LayerKind::Pool,
        frozen: false,
        block_id: block,
    };
    let affine = |name: &str, out: usize, block: u32| LayerSpec {
        name: name.into(),
        kind: LayerKind::Affine { out_features: out },
        frozen: false,
        block_id: block,
    };
    let dropout = |name: &str, block: u32| LayerSpec {
        name: name.into(),
        kind: LayerKind::Dropout { rate: 0.5 },
        frozen: false,
        block_id: block,
    };

    let mut layers = Vec::new();
    for (block, width, convs) in [(1u32, 16usize, 2usize), (2, 32, 2), (3, 64, 2), (4, 64, 1)] {
        for i in 1..=convs {
            layers.push(conv(&format!("conv{block}_{i}"), width, block));
            layers.push(relu(&format!("relu{block}_{i}"), block));
        }
        layers.push(pool(&format!("pool{block}"), block));
    }
    let head = 5;
    layers.push(LayerSpec {
        name: "flatten".into(),
        kind: LayerKind::Flatten,
        frozen: false,
        block_id: head,
    });
    layers.push(affine("fc6", 256, head));
    layers.push(relu("relu6", head));
    layers.push(dropout("drop6", head));
    layers.push(affine("fcA", 128, head));
    layers.push(relu("reluA", head));
    layers.push(dropout("dropA", head));
    layers.push(affine("fcB", num_classes, head));
    layers.push(LayerSpec {
        name: "sigmoid".into(),
        kind: LayerKind::Sigmoid,
        frozen: false,
        block_id: head,
    });

    let config = ModelConfig {
        layers,
        input_size,
        num_classes,
        finetune_boundary: "conv4_1".into(),
    };
    config.validate()?;
    Ok(config)
}

/// Shape of a layer's output given its input, or an error if they do not
/// compose.
fn layer_output_shape(kind: &LayerKind, input: &[usize]) -> Result<Vec<usize>> {
    match kind {
        LayerKind::Conv {
            out_channels,
            kernel,
            stride,
            padding,
        } => match input {
            [_, h, w] => {
                if *kernel > h + 2 * padding || *kernel > w + 2 * padding {
                    return Err(Error::Config(format!(
                        "conv kernel {kernel} larger than padded input {h}x{w}"
                    )));
                }
                let ho = (h + 2 * padding - kernel) / stride + 1;
                let wo = (w + 2 * padding - kernel) / stride + 1;
                Ok(vec![*out_channels, ho, wo])
            }
            other => Err(Error::Config(format!("conv input must be 3-d, got {other:?}"))),
        },
        LayerKind::Pool => match input {
            [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![*c, h / 2, w / 2]),
            other => Err(Error::Config(format!(
                "pool needs even spatial dims, got {other:?}"
            ))),
        },
        LayerKind::Affine { out_features } => match input {
            [_] => Ok(vec![*out_features]),
            other => Err(Error::Config(format!(
                "affine input must be flat, got {other:?}"
            ))),
        },
        LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Dropout { .. } => Ok(input.to_vec()),
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
    }
}

impl ModelConfig {
    /// Checks name uniqueness, shape composition, the sigmoid head and the
    /// finetune boundary. Runs at construction and after deserialization.
    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for layer in &self.layers {
            if !names.insert(layer.name.as_str()) {
                return Err(Error::Config(format!("duplicate layer name {}", layer.name)));
            }
        }
        let mut shape = vec![self.input_size.0, self.input_size.1, self.input_size.2];
        for layer in &self.layers {
            shape = layer_output_shape(&layer.kind, &shape)
                .map_err(|e| Error::Config(format!("layer {}: {e}", layer.name)))?;
        }
        match self.layers.last() {
            Some(last) if matches!(last.kind, LayerKind::Sigmoid) => {}
            _ => return Err(Error::Config("final layer must be a sigmoid".into())),
        }
        if shape != [self.num_classes] {
            return Err(Error::Config(format!(
                "network output {shape:?} does not match {} classes",
                self.num_classes
            )));
        }
        let boundary = self
            .layers
            .iter()
            .find(|l| l.name == self.finetune_boundary)
            .ok_or_else(|| {
                Error::Config(format!(
                    "finetune boundary {:?} names no layer",
                    self.finetune_boundary
                ))
            })?;
        if !matches!(boundary.kind, LayerKind::Conv { .. }) {
            return Err(Error::Config(format!(
                "finetune boundary {:?} must be a conv layer",
                self.finetune_boundary
            )));
        }
        Ok(())
    }

    /// Canonical (name, shape) list of every parameter tensor, in layer
    /// order: `<layer>.weight` then `<layer>.bias`.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = Vec::new();
        let mut shape = vec![self.input_size.0, self.input_size.1, self.input_size.2];
        for layer in &self.layers {
            match &layer.kind {
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    out.push((
                        format!("{}.weight", layer.name),
                        vec![*out_channels, shape[0], *kernel, *kernel],
                    ));
                    out.push((format!("{}.bias", layer.name), vec![*out_channels]));
                }
                LayerKind::Affine { out_features } => {
                    out.push((
                        format!("{}.weight", layer.name),
                        vec![*out_features, shape[0]],
                    ));
                    out.push((format!("{}.bias", layer.name), vec![*out_features]));
                }
                _ => {}
            }
            shape = layer_output_shape(&layer.kind, &shape)?;
        }
        Ok(out)
    }

    /// Freeze flag state for each parameter-bearing layer under `phase`.
    pub fn set_trainable(&mut self, phase: Phase) {
        let boundary_block = self
            .layers
            .iter()
            .find(|l| l.name == self.finetune_boundary)
            .map(|l| l.block_id)
            .unwrap_or(0);
        for layer in &mut self.layers {
            layer.frozen = match phase {
                Phase::Full => false,
                Phase::Phase1 => !matches!(layer.kind, LayerKind::Affine { .. }),
                Phase::Phase2 => {
                    layer.block_id < boundary_block
                        && !matches!(layer.kind, LayerKind::Affine { .. })
                }
            };
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn is_frozen(&self, layer_name: &str) -> bool {
        self.layer(layer_name).map(|l| l.frozen).unwrap_or(false)
    }
}

/// Named parameter tensors, iterated in deterministic (sorted) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<E: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<E>>,
}

impl<E: Scalar> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<E>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<T>()))
                .collect(),
        }
    }
}

/// Head init follows the transfer recipe exactly: affine weights are
/// Gaussian(0, 0.005) with every bias at 0.1. Conv layers (which would come
/// pretrained in the full-scale setting) use fan-in-scaled Gaussians with
/// zero bias so the stack trains from scratch.
pub fn initialize<E: Scalar, R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<ParamSet<E>> {
    let mut params = ParamSet::new();
    for (name, shape) in config.param_shapes()? {
        let numel: usize = shape.iter().product();
        let tensor = if name.ends_with(".bias") {
            let layer = name.trim_end_matches(".bias");
            let is_affine = matches!(
                config.layer(layer).map(|l| &l.kind),
                Some(LayerKind::Affine { .. })
            );
            let v = if is_affine { 0.1 } else { 0.0 };
            Tensor::full(shape, E::from_f64(v))
        } else {
            let layer = name.trim_end_matches(".weight");
            let std = match config.layer(layer).map(|l| &l.kind) {
                Some(LayerKind::Affine { .. }) => 0.005,
                Some(LayerKind::Conv { .. }) => {
                    let fan_in: usize = shape[1..].iter().product();
                    (2.0 / fan_in as f64).sqrt()
                }
                _ => unreachable!("parameter on a layer without parameters"),
            };
            let normal = Normal::new(0.0, std).expect("std is positive");
            let data: Vec<E> = (0..numel)
                .map(|_| E::from_f64(normal.sample(rng)))
                .collect();
            Tensor::new(shape, data)?
        };
        params.insert(name, tensor);
    }
    Ok(params)
}

/// Node trace of one forward pass: output node of every layer in order,
/// plus the graph ids of the parameter leaves.
pub struct ForwardTrace {
    pub input: NodeId,
    pub layer_nodes: Vec<(String, NodeId)>,
    pub param_nodes: Vec<(String, NodeId)>,
    pub logits: NodeId,
    pub scores: NodeId,
}

/// Runs the network on a `b x c x h x w` batch, recording every op on
/// `graph`. Parameter leaves get `requires_grad` from the layer freeze
/// flags, so backward never touches frozen branches.
pub fn forward_graph<E: Scalar, R: Rng>(
    config: &ModelConfig,
    params: &ParamSet<E>,
    graph: &mut Graph<E>,
    batch: Tensor<E>,
    training: bool,
    rng: &mut R,
) -> Result<ForwardTrace> {
    let (c, h, w) = config.input_size;
    if batch.shape().len() != 4 || batch.shape()[1..] != [c, h, w] {
        return Err(Error::Dimension(format!(
            "batch shape {:?} does not match model input {:?}",
            batch.shape(),
            (c, h, w)
        )));
    }
    let input = graph.leaf(batch);
    let mut cur = input;
    let mut layer_nodes = Vec::with_capacity(config.layers.len());
    let mut param_nodes = Vec::new();
    let mut logits = None;

    let fetch = |graph: &mut Graph<E>,
                     param_nodes: &mut Vec<(String, NodeId)>,
                     name: String,
                     frozen: bool|
     -> Result<NodeId> {
        let tensor = params
            .get(&name)
            .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {name}")))?
            .clone()
            .requires_grad(!frozen);
        let id = graph.leaf(tensor);
        param_nodes.push((name, id));
        Ok(id)
    };

    for layer in &config.layers {
        let prev = cur;
        cur = match &layer.kind {
            LayerKind::Conv {
                stride, padding, ..
            } => {
                let wid = fetch(
                    graph,
                    &mut param_nodes,
                    format!("{}.weight", layer.name),
                    layer.frozen,
                )?;
                let bid = fetch(
                    graph,
                    &mut param_nodes,
                    format!("{}.bias", layer.name),
                    layer.frozen,
                )?;
                graph.conv2d(prev, wid, bid, *stride, *padding)?
            }
            LayerKind::Pool => graph.maxpool2(prev)?,
            LayerKind::Relu => graph.relu(prev),
            LayerKind::Sigmoid => {
                logits = Some(prev);
                graph.sigmoid(prev)
            }
            LayerKind::Affine { .. } => {
                let wid = fetch(
                    graph,
                    &mut param_nodes,
                    format!("{}.weight", layer.name),
                    layer.frozen,
                )?;
                let bid = fetch(
                    graph,
                    &mut param_nodes,
                    format!("{}.bias", layer.name),
                    layer.frozen,
                )?;
                graph.affine(prev, wid, bid)?
            }
            LayerKind::Dropout { rate } => graph.dropout(prev, *rate, training, rng)?,
            LayerKind::Flatten => graph.flatten(prev)?,
        };
        layer_nodes.push((layer.name.clone(), cur));
    }

    let scores = cur;
    let logits = logits.ok_or_else(|| Error::Config("model has no sigmoid head".into()))?;
    Ok(ForwardTrace {
        input,
        layer_nodes,
        param_nodes,
        logits,
        scores,
    })
}

/// Convenience forward pass returning `(scores, logits)`, both `b x n`.
/// Scores are sigmoid probabilities; the raw logits feed the fused loss.
pub fn forward<E: Scalar, R: Rng>(
    config: &ModelConfig,
    params: &ParamSet<E>,
    batch: Tensor<E>,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let mut graph = Graph::new();
    let trace = forward_graph(config, params, &mut graph, batch, training, rng)?;
    Ok((
        graph.value(trace.scores).clone(),
        graph.value(trace.logits).clone(),
    ))
}
