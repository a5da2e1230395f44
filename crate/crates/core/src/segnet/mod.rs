//! Shared-encoder segmentation network with a source head and a target head.
//!
//! Both heads read the same encoder storage while the model is
//! [`Sharing::Shared`]. [`SegModel::unshare_and_freeze_source`] duplicates the
//! encoder, gives the copy to the target head and freezes everything on the
//! source side.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::grid::{Grid, Real};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION,
};

/// Probabilities leaving the network are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Conv3×3 + relu blocks in the shared trunk; every block after the first halves the resolution.
    pub shared_blocks: usize,
    /// Conv3×3 + relu blocks in each head before the 1×1 output conv.
    pub head_blocks: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            shared_blocks: 3,
            head_blocks: 1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.shared_blocks == 0 || self.head_blocks == 0 {
            return Err(Error::Config(
                "shared_blocks and head_blocks must be at least 1".into(),
            ));
        }
        if self.shared_blocks > 8 {
            return Err(Error::Config("shared_blocks must be at most 8".into()));
        }
        Ok(())
    }

    /// Ratio between input resolution and logit resolution.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.shared_blocks - 1)
    }

    fn encoder_width(&self, block: usize) -> usize {
        self.base_channels << block
    }

    fn feature_width(&self) -> usize {
        self.encoder_width(self.shared_blocks - 1)
    }

    pub fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        let f = self.downsample_factor();
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(Error::shape(
                "forward",
                format!("image extent {height}×{width} must be a positive multiple of {f}"),
            ));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Source,
    Target,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    Shared,
    Unshared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Grid<T>,
    pub trainable: bool,
}

/// Indices of a conv layer's kernel and bias in [`SegModel::params`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
struct Conv {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct HeadLayers {
    blocks: Vec<Conv>,
    out: Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T> {
    config: NetConfig,
    sharing: Sharing,
    params: Vec<Param<T>>,
    source_encoder: Vec<Conv>,
    target_encoder: Vec<Conv>,
    source_head: HeadLayers,
    target_head: HeadLayers,
    iteration: u64,
    seed: u64,
}

/// Parameters of one model inserted into one graph as leaves.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    /// Binds parameters to existing nodes, one per parameter in model order.
    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        Self { ids }
    }

    pub fn id(&self, param: usize) -> NodeId {
        self.ids[param]
    }
}

struct Builder<'a, T> {
    params: Vec<Param<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Conv {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = c_out * c_in * k * k;
        let data: Vec<T> = (0..n)
            .map(|_| T::of(self.rng.gen_range(-bound..bound)))
            .collect();
        let weight = self.push(
            format!("{name}.weight"),
            Grid::new(&[c_out, c_in, k, k], data).expect("sized"),
        );
        let bias = self.push(format!("{name}.bias"), Grid::zeros(&[c_out]));
        Conv { weight, bias }
    }

    fn push(&mut self, name: String, value: Grid<T>) -> usize {
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        self.params.len() - 1
    }

    fn head(&mut self, prefix: &str, config: &NetConfig) -> HeadLayers {
        let width = config.feature_width();
        let blocks = (0..config.head_blocks)
            .map(|i| self.conv(&format!("{prefix}.{i}"), width, width, 3))
            .collect();
        let out = self.conv(&format!("{prefix}.out"), width, 1, 1);
        HeadLayers { blocks, out }
    }
}

impl<T: Real> SegModel<T> {
    /// He-uniform kernels and zero biases from a seeded generator; starts shared.
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
        };
        let mut c_in = config.in_channels;
        let encoder: Vec<Conv> = (0..config.shared_blocks)
            .map(|i| {
                let c_out = config.encoder_width(i);
                let conv = b.conv(&format!("encoder.{i}"), c_in, c_out, 3);
                c_in = c_out;
                conv
            })
            .collect();
        let source_head = b.head("source_head", &config);
        let target_head = b.head("target_head", &config);
        Ok(Self {
            params: b.params,
            sharing: Sharing::Shared,
            source_encoder: encoder.clone(),
            target_encoder: encoder,
            source_head,
            target_head,
            config,
            iteration: 0,
            seed,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn sharing(&self) -> Sharing {
        self.sharing
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn set_iteration(&mut self, iteration: u64) {
        self.iteration = iteration;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn encoder(&self, head: Head) -> &[Conv] {
        match head {
            Head::Source => &self.source_encoder,
            Head::Target => &self.target_encoder,
        }
    }

    fn head_layers(&self, head: Head) -> &HeadLayers {
        match head {
            Head::Source => &self.source_head,
            Head::Target => &self.target_head,
        }
    }

    /// Indices of every parameter read by a forward pass through `head`.
    pub fn params_of(&self, head: Head) -> Vec<usize> {
        let layers = self.head_layers(head);
        self.encoder(head)
            .iter()
            .chain(&layers.blocks)
            .chain(std::iter::once(&layers.out))
            .flat_map(|c| [c.weight, c.bias])
            .collect()
    }

    /// Indices of the encoder parameters read by both heads (empty once unshared).
    pub fn shared_params(&self) -> Vec<usize> {
        match self.sharing {
            Sharing::Shared => self
                .source_encoder
                .iter()
                .flat_map(|c| [c.weight, c.bias])
                .collect(),
            Sharing::Unshared => Vec::new(),
        }
    }

    /// Inserts every parameter as a leaf; trainable ones require a gradient.
    pub fn bind(&self, graph: &mut Graph<T>) -> Result<Bound> {
        let ids = self
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), p.trainable))
            .collect::<Result<_>>()?;
        Ok(Bound { ids })
    }

    fn bind_frozen(&self, graph: &mut Graph<T>) -> Result<Bound> {
        let ids = self
            .params
            .iter()
            .map(|p| graph.constant(p.value.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { ids })
    }

    fn conv_block(
        &self,
        graph: &mut Graph<T>,
        bound: &Bound,
        x: NodeId,
        conv: Conv,
        stride: usize,
        relu: bool,
    ) -> Result<NodeId> {
        let k = self.params[conv.weight].value.shape()[2];
        let y = graph.conv2d(x, bound.id(conv.weight), bound.id(conv.bias), stride, k / 2)?;
        if relu {
            graph.relu(y)
        } else {
            Ok(y)
        }
    }

    /// Foreground probabilities of shape `(B, 1, H, W)` for a `(B, C, H, W)` input node.
    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        bound: &Bound,
        head: Head,
        input: NodeId,
    ) -> Result<NodeId> {
        let x = graph.value(input);
        let [_, c, h, w] = x.dims4();
        if x.shape().len() != 4 || c != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!(
                    "expected (B, {}, H, W) input, got {:?}",
                    self.config.in_channels,
                    x.shape()
                ),
            ));
        }
        self.config.check_extent(h, w)?;
        if let Some((i, v)) = x
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::Contract(format!(
                "input value {v} at index {i} lies outside [0, 1]"
            )));
        }

        let mut h = input;
        for (i, &conv) in self.encoder(head).iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            h = self.conv_block(graph, bound, h, conv, stride, true)?;
        }
        let layers = self.head_layers(head);
        for &conv in &layers.blocks {
            h = self.conv_block(graph, bound, h, conv, 1, true)?;
        }
        let logits = self.conv_block(graph, bound, h, layers.out, 1, false)?;
        let up = graph.upsample_nearest(logits, self.config.downsample_factor())?;
        let p = graph.sigmoid(up)?;
        graph.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, head: Head, batch: &Grid<T>) -> Result<Grid<T>> {
        let mut graph = Graph::new();
        let bound = self.bind_frozen(&mut graph)?;
        let x = graph.constant(batch.clone())?;
        let p = self.forward(&mut graph, &bound, head, x)?;
        Ok(graph.value(p).clone())
    }

    /// Accumulated gradients of the bound parameters (`None` for frozen ones or
    /// parameters the backward pass never reached).
    pub fn gradients(&self, graph: &Graph<T>, bound: &Bound) -> Vec<Option<Grid<T>>> {
        bound
            .ids
            .iter()
            .map(|&id| graph.grad(id).cloned())
            .collect()
    }

    /// Splits the encoder into a frozen source copy and a trainable target copy.
    pub fn unshare_and_freeze_source(&mut self) -> Result<()> {
        if self.sharing != Sharing::Shared {
            return Err(Error::State("model is already unshared".into()));
        }
        let mut target = Vec::with_capacity(self.source_encoder.len());
        for (i, conv) in self.source_encoder.clone().into_iter().enumerate() {
            let mut copy = |idx: usize, suffix: &str| {
                let value = self.params[idx].value.clone();
                self.params[idx].name = format!("source_encoder.{i}.{suffix}");
                self.params.push(Param {
                    name: format!("target_encoder.{i}.{suffix}"),
                    value,
                    trainable: true,
                });
                self.params.len() - 1
            };
            let weight = copy(conv.weight, "weight");
            let bias = copy(conv.bias, "bias");
            target.push(Conv { weight, bias });
        }
        self.target_encoder = target;
        for idx in self.params_of(Head::Source) {
            self.params[idx].trainable = false;
        }
        self.sharing = Sharing::Unshared;
        Ok(())
    }

    /// Overwrites the target head with the source head, so that a model trained
    /// on source labels alone predicts identically through either head.
    pub fn copy_source_head_to_target(&mut self) -> Result<()> {
        let src = self.source_head.clone();
        let dst = self.target_head.clone();
        let pairs = src
            .blocks
            .iter()
            .zip(&dst.blocks)
            .chain(std::iter::once((&src.out, &dst.out)));
        for (s, d) in pairs {
            for (from, to) in [(s.weight, d.weight), (s.bias, d.bias)] {
                self.params[to].value = self.params[from].value.clone();
            }
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of the selected parameters.
    pub fn checksum(&self, indices: &[usize]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &i in indices {
            for v in self.params[i].value.data() {
                for byte in v.as_f64().to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn checksum_all(&self) -> u64 {
        self.checksum(&(0..self.params.len()).collect::<Vec<_>>())
    }

    pub fn cast<U: Real>(&self) -> SegModel<U> {
        SegModel {
            config: self.config.clone(),
            sharing: self.sharing,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            source_encoder: self.source_encoder.clone(),
            target_encoder: self.target_encoder.clone(),
            source_head: self.source_head.clone(),
            target_head: self.target_head.clone(),
            iteration: self.iteration,
            seed: self.seed,
        }
    }
}
