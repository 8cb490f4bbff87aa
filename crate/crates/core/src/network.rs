//! Small sequential classifiers built from stem convolutions and blocks.

use crate::block::{min_abs, BlockCache, BlockConfig, BnSetting, StraBlock};
use crate::error::{invalid, shape_err, Result};
use crate::mode_attention::ModeState;
use crate::ops::{BatchNorm, BatchStats, BnCache, Conv2d, ConvSpec, Linear};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum StageSpec {
    /// Convolution (padding `kernel / 2`), optional BN, ReLU.
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        bn: BnSetting,
    },
    /// `repeat` blocks; only the first uses `cfg.in_channels` and `cfg.stride`.
    Block { cfg: BlockConfig, repeat: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadPool {
    /// Global average pooling.
    Avg,
    /// Keep the spatial layout: the classifier sees `C * H * W` features.
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Input `(channels, height, width)`.
    pub input: (usize, usize, usize),
    pub stages: Vec<StageSpec>,
    pub pool: HeadPool,
    pub classes: usize,
}

/// One concrete layer after expanding repeats.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        input: (usize, usize, usize),
        out: usize,
        kernel: usize,
        stride: usize,
        bn: BnSetting,
    },
    Block { input: (usize, usize, usize), cfg: BlockConfig },
}

impl LayerSpec {
    pub fn output(&self) -> (usize, usize, usize) {
        match self {
            LayerSpec::Conv {
                input: (_, h, w),
                out,
                kernel,
                stride,
                ..
            } => {
                let p = kernel / 2;
                (*out, (h + 2 * p - kernel) / stride + 1, (w + 2 * p - kernel) / stride + 1)
            }
            LayerSpec::Block { input: (_, h, w), cfg } => {
                let (oh, ow) = cfg.output_hw(*h, *w);
                (cfg.out_channels, oh, ow)
            }
        }
    }
}

impl ArchConfig {
    /// Expand stages into layers, checking that widths chain.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        const OP: &str = "ArchConfig";
        let (c0, h0, w0) = self.input;
        if c0 == 0 || h0 == 0 || w0 == 0 || self.classes == 0 {
            return Err(invalid(OP, "input extents and class count must be positive"));
        }
        let mut cur = self.input;
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                StageSpec::Conv { out: oc, kernel, stride, bn } => {
                    if *oc == 0 || *kernel == 0 || *stride == 0 {
                        return Err(invalid(OP, format!("stage {i}: conv widths, kernel and stride must be positive")));
                    }
                    if *kernel > cur.1 + 2 * (kernel / 2) || *kernel > cur.2 + 2 * (kernel / 2) {
                        return Err(invalid(OP, format!("stage {i}: kernel larger than padded input")));
                    }
                    let l = LayerSpec::Conv {
                        input: cur,
                        out: *oc,
                        kernel: *kernel,
                        stride: *stride,
                        bn: *bn,
                    };
                    cur = l.output();
                    out.push(l);
                }
                StageSpec::Block { cfg, repeat } => {
                    if *repeat == 0 {
                        return Err(invalid(OP, format!("stage {i}: repeat must be positive")));
                    }
                    if cfg.in_channels != cur.0 {
                        return Err(shape_err(OP, "block input channels", cur.0, cfg.in_channels));
                    }
                    for r in 0..*repeat {
                        let cfg = if r == 0 {
                            *cfg
                        } else {
                            BlockConfig {
                                in_channels: cfg.out_channels,
                                stride: 1,
                                ..*cfg
                            }
                        };
                        cfg.validate()?;
                        let l = LayerSpec::Block { input: cur, cfg };
                        cur = l.output();
                        out.push(l);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Width of the classifier input.
    pub fn head_features(&self) -> Result<usize> {
        let (c, h, w) = self.layers()?.last().map(LayerSpec::output).unwrap_or(self.input);
        Ok(match self.pool {
            HeadPool::Avg => c,
            HeadPool::Flatten => c * h * w,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { conv: Conv2d, bn: Option<BatchNorm> },
    Block(StraBlock),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub layers: Vec<Layer>,
    pub head: Linear,
}

enum LayerCache {
    Conv {
        x: Tensor,
        bn: Option<BnCache>,
        out: Tensor,
        stats: Option<BatchStats>,
        relu_margin: f64,
    },
    Block(Box<BlockCache>),
}

pub struct ModelCache {
    layers: Vec<LayerCache>,
    feature_shape: Vec<usize>,
    pooled: Tensor,
    pub logits: Tensor,
}

impl ModelCache {
    /// Mode states of the blocks with mode attention, in network order.
    pub fn mode_states(&self) -> Vec<&ModeState> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerCache::Block(c) => c.mode_state.as_ref(),
                LayerCache::Conv { .. } => None,
            })
            .collect()
    }

    /// Smallest magnitude of any ReLU input in the forward pass.
    pub fn relu_margin(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| match l {
                LayerCache::Block(c) => c.relu_margin(),
                LayerCache::Conv { relu_margin, .. } => *relu_margin,
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Deterministic construction from an architecture description.
pub fn build_network(arch: &ArchConfig, rng: &mut Rng) -> Result<Model> {
    let mut layers = Vec::new();
    for spec in arch.layers()? {
        layers.push(match spec {
            LayerSpec::Conv {
                input,
                out,
                kernel,
                stride,
                bn,
            } => {
                let mode = bn.mode();
                Layer::Conv {
                    conv: Conv2d::init(input.0, out, ConvSpec::square(kernel, stride, 1), mode.is_none(), rng)?,
                    bn: mode.map(|m| BatchNorm::new(out).with_mode(m)),
                }
            }
            LayerSpec::Block { cfg, .. } => Layer::Block(StraBlock::init(cfg, rng)?),
        });
    }
    let head = Linear::init(arch.head_features()?, arch.classes, rng)?;
    Ok(Model {
        arch: arch.clone(),
        layers,
        head,
    })
}

impl Model {
    pub fn mode_block_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Block(b) if b.mode.is_some()))
            .count()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<ModelCache> {
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != self.arch.input {
            return Err(invalid(
                "Model::forward",
                format!("input {:?} does not match configured {:?}", (c, h, w), self.arch.input),
            ));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            match layer {
                Layer::Conv { conv, bn } => {
                    let pre = conv.forward(&cur)?;
                    let (pre, bc, stats) = match bn {
                        Some(bn) => {
                            let (y, c, s) = bn.forward_pure(&pre, train)?;
                            (y, Some(c), s)
                        }
                        None => (pre, None, None),
                    };
                    let out = pre.relu();
                    caches.push(LayerCache::Conv {
                        x: std::mem::replace(&mut cur, out.clone()),
                        bn: bc,
                        out,
                        stats,
                        relu_margin: min_abs(&pre),
                    });
                }
                Layer::Block(b) => {
                    let (out, c) = b.forward(&cur, train)?;
                    cur = out;
                    caches.push(LayerCache::Block(Box::new(c)));
                }
            }
        }
        let feature_shape = cur.shape().to_vec();
        let pooled = match self.arch.pool {
            HeadPool::Flatten => cur,
            HeadPool::Avg => {
                let (n, c, h, w) = cur.dims4()?;
                let plane = h * w;
                Tensor::new(
                    vec![n, c],
                    cur.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect(),
                )?
            }
        };
        let logits = self.head.forward(&pooled)?;
        Ok(ModelCache {
            layers: caches,
            feature_shape,
            pooled,
            logits,
        })
    }

    /// Gradients in [`Model::params`] order, plus the input gradient.
    ///
    /// `grad_masks` holds one optional extra mask gradient per mode-attention
    /// block (in network order); an empty slice means none.
    pub fn backward(&self, cache: &ModelCache, grad_logits: &Tensor, grad_masks: &[Option<Tensor>]) -> Result<(Vec<Tensor>, Tensor)> {
        const OP: &str = "Model::backward";
        let n_mode = self.mode_block_count();
        if !grad_masks.is_empty() && grad_masks.len() != n_mode {
            return Err(shape_err(OP, "mask gradient count", n_mode, grad_masks.len()));
        }
        let mut head_grads = Vec::new();
        let g_pooled = self.head.backward(&cache.pooled, grad_logits, &mut head_grads)?;
        let mut g = match self.arch.pool {
            HeadPool::Flatten => g_pooled.reshape(cache.feature_shape.clone())?,
            HeadPool::Avg => {
                let fs = &cache.feature_shape;
                let plane = fs[2] * fs[3];
                let inv = 1.0 / plane as f64;
                Tensor::new(
                    fs.clone(),
                    g_pooled.data().iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect(),
                )?
            }
        };
        let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut mode_idx = n_mode;
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            let (gx, grads) = match (layer, lc) {
                (Layer::Conv { conv, bn }, LayerCache::Conv { x, bn: bc, out, .. }) => {
                    let g_pre = out.zip_map(&g, |o, g| if o > 0.0 { g } else { 0.0 })?;
                    let mut bn_grads = Vec::new();
                    let g_conv = match (bn, bc) {
                        (Some(bn), Some(c)) => bn.backward(c, &g_pre, &mut bn_grads)?,
                        (None, None) => g_pre,
                        _ => return Err(invalid(OP, "cache does not match the layer")),
                    };
                    let mut grads = Vec::new();
                    let gx = conv.backward(x, &g_conv, &mut grads)?;
                    grads.extend(bn_grads);
                    (gx, grads)
                }
                (Layer::Block(b), LayerCache::Block(c)) => {
                    let gm = if b.mode.is_some() {
                        mode_idx -= 1;
                        grad_masks.get(mode_idx).and_then(|g| g.as_ref())
                    } else {
                        None
                    };
                    b.backward(&g, gm, c)?
                }
                _ => return Err(invalid(OP, "cache does not match the layer")),
            };
            g = gx;
            per_layer.push(grads);
        }
        let mut grads: Vec<Tensor> = per_layer.into_iter().rev().flatten().collect();
        grads.extend(head_grads);
        Ok((grads, g))
    }

    pub fn commit_stats(&mut self, cache: &ModelCache) {
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            match (layer, lc) {
                (Layer::Conv { bn: Some(bn), .. }, LayerCache::Conv { stats: Some(s), .. }) => bn.commit_stats(s),
                (Layer::Block(b), LayerCache::Block(c)) => b.commit_stats(c),
                _ => {}
            }
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut p = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { conv, bn } => {
                    p.extend(conv.params().into_iter().map(|(n, t)| (format!("layers.{i}.conv.{n}"), t)));
                    if let Some(bn) = bn {
                        p.extend(bn.params().into_iter().map(|(n, t)| (format!("layers.{i}.bn.{n}"), t)));
                    }
                }
                Layer::Block(b) => p.extend(b.params().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t))),
            }
        }
        p.extend(self.head.params().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { conv, bn } => {
                    p.extend(conv.params_mut());
                    if let Some(bn) = bn {
                        p.extend(bn.params_mut());
                    }
                }
                Layer::Block(b) => p.extend(b.params_mut()),
            }
        }
        p.extend(self.head.params_mut());
        p
    }

    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut p = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { bn: Some(bn), .. } => {
                    p.extend(bn.buffers().into_iter().map(|(n, t)| (format!("layers.{i}.bn.{n}"), t)))
                }
                Layer::Conv { bn: None, .. } => {}
                Layer::Block(b) => p.extend(b.buffers().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t))),
            }
        }
        p
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { bn: Some(bn), .. } => p.extend(bn.buffers_mut()),
                Layer::Conv { bn: None, .. } => {}
                Layer::Block(b) => p.extend(b.buffers_mut()),
            }
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_arch() -> ArchConfig {
        ArchConfig {
            input: (3, 8, 8),
            stages: vec![
                StageSpec::Conv {
                    out: 8,
                    kernel: 3,
                    stride: 2,
                    bn: BnSetting::Training,
                },
                StageSpec::Block {
                    cfg: BlockConfig::new(8, 2, 8, 4),
                    repeat: 1,
                },
            ],
            pool: HeadPool::Flatten,
            classes: 5,
        }
    }

    #[test]
    fn toy_net_produces_class_logits() {
        let model = build_network(&toy_arch(), &mut Rng::new(1)).unwrap();
        let x = Tensor::from_fn(vec![2, 3, 8, 8], |i| (i as f64 * 0.37).sin());
        let cache = model.forward(&x, true).unwrap();
        assert_eq!(cache.logits.shape(), &[2, 5]);
        assert_eq!(cache.mode_states().len(), 1);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_network(&toy_arch(), &mut Rng::new(9)).unwrap();
        let b = build_network(&toy_arch(), &mut Rng::new(9)).unwrap();
        let c = build_network(&toy_arch(), &mut Rng::new(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn broken_chaining_rejected() {
        let mut arch = toy_arch();
        arch.stages[1] = StageSpec::Block {
            cfg: BlockConfig::new(6, 2, 8, 4),
            repeat: 1,
        };
        assert!(build_network(&arch, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn repeats_chain_output_width() {
        let mut arch = toy_arch();
        arch.stages[1] = StageSpec::Block {
            cfg: BlockConfig::new(8, 2, 12, 2),
            repeat: 3,
        };
        arch.pool = HeadPool::Avg;
        let layers = arch.layers().unwrap();
        assert_eq!(layers.len(), 4);
        assert_eq!(layers[3].output(), (12, 4, 4));
        assert_eq!(arch.head_features().unwrap(), 12);
        let model = build_network(&arch, &mut Rng::new(1)).unwrap();
        let cache = model.forward(&Tensor::full(vec![2, 3, 8, 8], 0.5), true).unwrap();
        let (grads, gx) = model.backward(&cache, &Tensor::full(vec![2, 5], 0.1), &[]).unwrap();
        assert_eq!(grads.len(), model.params().len());
        assert_eq!(gx.shape(), &[2, 3, 8, 8]);
    }

    #[test]
    fn input_shape_checked() {
        let model = build_network(&toy_arch(), &mut Rng::new(1)).unwrap();
        assert!(model.forward(&Tensor::zeros(vec![1, 3, 6, 6]), true).is_err());
    }
}
