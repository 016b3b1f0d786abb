//! Attribute-conditioned attention maps via probabilistic winner-take-all
//! backpropagation: a unit of excitation mass is injected at one class
//! logit (the sigmoid is bypassed) and propagated toward the pixels. At
//! each affine/conv layer a child unit receives
//! `parent_mass * (a_child * w+) / sum_children (a_child' * w+)` where `a`
//! are forward activations and `w+ = max(w, 0)`; ReLU and flatten pass
//! mass through, pooling routes it to the argmax position. Mass reaching a
//! parent with no positive path is dropped and reported, so
//! `map total + lost mass = 1` always holds.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::ImageBuf;
use crate::error::{Error, Result};
use crate::model::{forward_graph, LayerKind};
use crate::tensor::{Graph, NodeId, Op, Tensor};

/// Pseudo layer name selecting the raw input as the readout point.
pub const INPUT_LAYER: &str = "input";

#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub class_index: usize,
    pub layer: String,
    /// Input-resolution map, row-major, nonnegative.
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
    /// Fraction of the injected mass dropped at dead (no positive path)
    /// units.
    pub lost_mass: f64,
}

impl AttentionMap {
    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// (x, y) of the strongest location (first occurrence on ties).
    pub fn max_location(&self) -> (u32, u32) {
        let mut best = 0usize;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (
            (best % self.width as usize) as u32,
            (best / self.width as usize) as u32,
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionMeta {
    pub class: String,
    pub class_index: usize,
    pub layer: String,
    pub lost_mass_fraction: f64,
    pub total_mass: f64,
    pub max_location: [u32; 2],
}

/// Compute the attention map of `class_idx` for a single preprocessed
/// input (`3 x h x w`, already mean-subtracted), read out at
/// `target_layer` (a conv layer name, or `"input"`).
pub fn excitation_map(
    ckpt: &Checkpoint,
    input: &Tensor<f32>,
    class_idx: usize,
    target_layer: &str,
) -> Result<AttentionMap> {
    let config = &ckpt.config;
    if class_idx >= config.num_classes {
        return Err(Error::Parameter(format!(
            "class index {class_idx} out of range for {} classes",
            config.num_classes
        )));
    }
    if target_layer != INPUT_LAYER {
        match config.layer(target_layer) {
            Some(spec) if matches!(spec.kind, LayerKind::Conv { .. }) => {}
            Some(_) => {
                return Err(Error::Parameter(format!(
                    "target layer {target_layer:?} is not a conv layer"
                )))
            }
            None => {
                return Err(Error::Parameter(format!(
                    "unknown target layer {target_layer:?}"
                )))
            }
        }
    }
    let (c, h, w) = config.input_size;
    if input.shape() != [c, h, w] {
        return Err(Error::Dimension(format!(
            "input shape {:?} does not match model input {:?}",
            input.shape(),
            (c, h, w)
        )));
    }

    // eval-mode forward, saving all activations on the tape
    let batch = Tensor::new(vec![1, c, h, w], input.data().to_vec())?;
    let mut graph: Graph<f32> = Graph::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let trace = forward_graph(config, &ckpt.params, &mut graph, batch, false, &mut rng)?;

    let target_node = if target_layer == INPUT_LAYER {
        trace.input
    } else {
        trace
            .layer_nodes
            .iter()
            .find(|(name, _)| name == target_layer)
            .map(|(_, id)| *id)
            .expect("target layer validated above")
    };

    // inject one unit of mass at the chosen logit, then walk the data path
    let mut node = trace.logits;
    let mut mass = vec![0.0f64; graph.value(node).numel()];
    mass[class_idx] = 1.0;
    let mut lost = 0.0f64;

    while node != target_node {
        let (next, next_mass) = propagate_one(&graph, node, &mass, &mut lost)?;
        node = next;
        mass = next_mass;
    }

    // collapse channels to a spatial map at the readout layer
    let shape = graph.value(node).shape().to_vec();
    let (channels, mh, mw) = match shape.as_slice() {
        [1, c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::Dimension(format!(
                "readout node has non-spatial shape {other:?}"
            )))
        }
    };
    let mut spatial = vec![0.0f64; mh * mw];
    for ch in 0..channels {
        for i in 0..mh * mw {
            spatial[i] += mass[ch * mh * mw + i];
        }
    }

    // nearest-neighbour upsample to input resolution, rescaled so the
    // total mass is preserved exactly
    let total_pre: f64 = spatial.iter().sum();
    let mut values = vec![0.0f64; h * w];
    for y in 0..h {
        let sy = (y * mh) / h;
        for x in 0..w {
            let sx = (x * mw) / w;
            values[y * w + x] = spatial[sy * mw + sx];
        }
    }
    let total_post: f64 = values.iter().sum();
    if total_post > 0.0 {
        let k = total_pre / total_post;
        for v in values.iter_mut() {
            *v *= k;
        }
    }

    Ok(AttentionMap {
        class_index: class_idx,
        layer: target_layer.to_string(),
        width: w as u32,
        height: h as u32,
        values,
        lost_mass: lost,
    })
}

/// Move the mass at `node`'s output to the node feeding it, applying the
/// layer rule. Returns the feeding node and its mass.
fn propagate_one(
    graph: &Graph<f32>,
    node: NodeId,
    mass: &[f64],
    lost: &mut f64,
) -> Result<(NodeId, Vec<f64>)> {
    match graph.op(node) {
        Op::Relu { input } | Op::Dropout { input, .. } | Op::Flatten { input } => {
            Ok((*input, mass.to_vec()))
        }
        Op::MaxPool2 { input, argmax } => {
            let mut next = vec![0.0f64; graph.value(*input).numel()];
            for (o, &src) in argmax.iter().enumerate() {
                next[src as usize] += mass[o];
            }
            Ok((*input, next))
        }
        Op::Affine { input, weight, .. } => {
            let acts = graph.value(*input).data();
            let w = graph.value(*weight);
            let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
            let wd = w.data();
            let mut next = vec![0.0f64; acts.len()];
            for (j, &mj) in mass.iter().enumerate().take(d_out) {
                if mj <= 0.0 {
                    continue;
                }
                let row = &wd[j * d_in..(j + 1) * d_in];
                let mut z = 0.0f64;
                for i in 0..d_in {
                    z += contribution(acts[i], row[i]);
                }
                if z <= 0.0 {
                    *lost += mj;
                    continue;
                }
                for i in 0..d_in {
                    let c = contribution(acts[i], row[i]);
                    if c > 0.0 {
                        next[i] += mj * c / z;
                    }
                }
            }
            Ok((*input, next))
        }
        Op::Conv2d {
            input,
            kernels,
            stride,
            padding,
            ..
        } => {
            let x = graph.value(*input);
            let (c_in, h, w) = match x.shape() {
                [1, c, h, w] => (*c, *h, *w),
                [c, h, w] => (*c, *h, *w),
                other => {
                    return Err(Error::Dimension(format!(
                        "conv input shape {other:?} unsupported in attention"
                    )))
                }
            };
            let k = graph.value(*kernels);
            let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
            let out_shape = graph.value(node).shape();
            let (ho, wo) = (
                out_shape[out_shape.len() - 2],
                out_shape[out_shape.len() - 1],
            );
            let acts = x.data();
            let kd = k.data();
            let mut next = vec![0.0f64; acts.len()];
            for co in 0..c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mj = mass[(co * ho + oy) * wo + ox];
                        if mj <= 0.0 {
                            continue;
                        }
                        let mut z = 0.0f64;
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - *padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - *padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let a = acts[(ci * h + iy as usize) * w + ix as usize];
                                    let kv = kd[((co * c_in + ci) * kh + ky) * kw + kx];
                                    z += contribution(a, kv);
                                }
                            }
                        }
                        if z <= 0.0 {
                            *lost += mj;
                            continue;
                        }
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - *padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - *padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = (ci * h + iy as usize) * w + ix as usize;
                                    let kv = kd[((co * c_in + ci) * kh + ky) * kw + kx];
                                    let c = contribution(acts[idx], kv);
                                    if c > 0.0 {
                                        next[idx] += mj * c / z;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Ok((*input, next))
        }
        Op::Sigmoid { input } => Ok((*input, mass.to_vec())),
        Op::Leaf => Err(Error::Contract(
            "attention walk reached a leaf before the target layer".into(),
        )),
        Op::Sum { .. } | Op::WeightedBce { .. } => Err(Error::Contract(
            "attention walk crossed a loss node".into(),
        )),
    }
}

/// WTA contribution of one child: positive activation times positive
/// weight. Negative activations (possible only at the raw input) carry no
/// excitation.
fn contribution(activation: f32, weight: f32) -> f64 {
    let a = (activation as f64).max(0.0);
    let w = (weight as f64).max(0.0);
    a * w
}

#[derive(Debug, Clone)]
pub struct HeatmapFiles {
    pub overlay: PathBuf,
    pub grayscale: PathBuf,
}

/// Write the overlay (base blended toward a monochrome heat layer scaled
/// to the map maximum) and the pure grayscale map. A zero map leaves the
/// overlay equal to the base image.
pub fn export_heatmap(map: &AttentionMap, base: &ImageBuf, path: &Path) -> Result<HeatmapFiles> {
    if base.width() != map.width || base.height() != map.height {
        return Err(Error::Dimension(format!(
            "base image {}x{} does not match map {}x{}",
            base.width(),
            base.height(),
            map.width,
            map.height
        )));
    }
    let vmax = map.values.iter().cloned().fold(0.0f64, f64::max);
    let alpha = 0.6;
    let mut overlay = base.clone();
    if vmax > 0.0 {
        for y in 0..map.height {
            for x in 0..map.width {
                let v = map.values[(y * map.width + x) as usize] / vmax;
                let heat = 255.0 * v;
                let px = base.get(x, y);
                let blended = px.map(|b| {
                    ((1.0 - alpha) * b as f64 + alpha * heat + 0.5).floor().clamp(0.0, 255.0) as u8
                });
                overlay.set(x, y, blended);
            }
        }
    }

    let mut gray_data = Vec::with_capacity(map.values.len() * 3);
    for &v in &map.values {
        let g = if vmax > 0.0 {
            ((v / vmax) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        gray_data.extend_from_slice(&[g, g, g]);
    }
    let gray = ImageBuf::new(map.width, map.height, gray_data)?;

    let grayscale_path = sibling_with_suffix(path, "map")?;
    overlay.save(path)?;
    gray.save(&grayscale_path)?;
    Ok(HeatmapFiles {
        overlay: path.to_path_buf(),
        grayscale: grayscale_path,
    })
}

/// `out.png` -> `out.map.png` (keeps the extension).
pub fn sibling_with_suffix(path: &Path, suffix: &str) -> Result<PathBuf> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Parameter(format!("bad output path {}", path.display())))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("png");
    Ok(path.with_file_name(format!("{stem}.{suffix}.{ext}")))
}
