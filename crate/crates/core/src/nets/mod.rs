//! Generator and discriminator networks built from declarative specs.
//!
//! Generators are plain encoder-decoders: 4x4 stride-2 convolutions with
//! leaky ReLU (slope 0.2) going down, 4x4 stride-2 transposed convolutions
//! with ReLU coming up, `tanh` on the last layer, and 50% dropout in the
//! first three decoder blocks. A forked generator shares the encoder and
//! all but the last two decoder blocks between an image head and a
//! segmentation head. The discriminator is a patch discriminator over the
//! channel concatenation of the conditioning and candidate images.

mod checkpoint;
mod conv;
pub(crate) mod layers;
mod optim;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{read_container, write_container, Container};
pub use optim::{Adam, AdamConfig};
use layers::{Activation, BatchNorm, Block, Conv, ConvKind, Ctx, Initializer, INIT_STD};
pub use layers::RunningStats;

use crate::{Error, Result};

/// Cap on channel width relative to the base width.
const WIDTH_CAP: usize = 8;
/// Number of decoder blocks (from the output side) duplicated per head in
/// a forked generator.
const FORK_TAIL: usize = 2;
const DROPOUT_BLOCKS: usize = 3;
const RESIDUAL_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_heads: usize,
    pub out_channels_per_head: usize,
    pub resolution: usize,
    pub base_width: usize,
    /// Encoder/decoder blocks removed from the full-depth network.
    pub block_trim: usize,
    pub dropout_rate: f64,
    /// U-Net style skip connections; off for the plain encoder-decoder.
    #[serde(default)]
    pub skip_connections: bool,
    /// Output is `tanh(atanh(input) + decoder)`, so an untrained network
    /// starts close to the identity. Needs matching in/out channels.
    #[serde(default)]
    pub residual: bool,
}

impl GeneratorSpec {
    pub fn new(in_channels: usize, out_channels: usize, resolution: usize) -> Self {
        Self {
            in_channels,
            out_heads: 1,
            out_channels_per_head: out_channels,
            resolution,
            base_width: 64,
            block_trim: 0,
            dropout_rate: 0.5,
            skip_connections: false,
            residual: false,
        }
    }

    pub fn fork(in_channels: usize, resolution: usize) -> Self {
        Self {
            out_heads: 2,
            ..Self::new(in_channels, 3, resolution)
        }
    }

    pub fn with_base_width(mut self, w: usize) -> Self {
        self.base_width = w;
        self
    }

    pub fn with_skips(mut self, on: bool) -> Self {
        self.skip_connections = on;
        self
    }

    /// Number of encoder blocks (equal to the number of decoder blocks).
    pub fn depth(&self) -> usize {
        self.resolution.trailing_zeros() as usize - self.block_trim
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 64 || !r.is_power_of_two() {
            return Err(Error::Config(format!(
                "generator resolution must be a power of two >= 64, got {r}"
            )));
        }
        if self.block_trim > 2 {
            return Err(Error::Config(format!("block_trim {} exceeds 2", self.block_trim)));
        }
        if !(1..=2).contains(&self.out_heads) {
            return Err(Error::Config(format!("out_heads must be 1 or 2, got {}", self.out_heads)));
        }
        if self.in_channels == 0 || self.out_channels_per_head == 0 || self.base_width == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.residual && (self.out_heads != 1 || self.in_channels != self.out_channels_per_head) {
            return Err(Error::Config("a residual generator needs one head with as many outputs as inputs".into()));
        }
        if self.out_heads == 2 && self.depth() <= FORK_TAIL {
            return Err(Error::Config("forked generator needs more blocks than its per-head tail".into()));
        }
        Ok(())
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.depth())
            .map(|i| self.base_width * (1usize << i).min(WIDTH_CAP))
            .collect()
    }

    /// `(in, out)` channels of decoder block `j`, counted from the bottleneck.
    pub fn decoder_channels(&self, j: usize) -> (usize, usize) {
        let enc = self.encoder_widths();
        let depth = enc.len();
        let out = if j + 1 == depth {
            self.out_channels_per_head
        } else {
            enc[depth - 2 - j]
        };
        let input = if j == 0 {
            enc[depth - 1]
        } else {
            let prev = enc[depth - 1 - j];
            if self.skip_connections {
                prev * 2
            } else {
                prev
            }
        };
        (input, out)
    }

    /// Decoder blocks shared by every head.
    pub fn shared_decoder_blocks(&self) -> usize {
        if self.out_heads == 2 {
            self.depth() - FORK_TAIL
        } else {
            self.depth()
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of("generator", self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    /// Conditioning channels plus candidate channels.
    pub in_channels: usize,
    pub resolution: usize,
    /// Number of stride-2 layers.
    pub depth: usize,
    pub base_width: usize,
}

impl DiscriminatorSpec {
    pub fn new(in_channels: usize, resolution: usize) -> Self {
        Self {
            in_channels,
            resolution,
            depth: 3,
            base_width: 64,
        }
    }

    pub fn with_base_width(mut self, w: usize) -> Self {
        self.base_width = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::Config(format!("discriminator depth must be >= 3, got {}", self.depth)));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let side = self.resolution >> self.depth;
        if side < 3 || self.resolution % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "resolution {} too small for a depth-{} discriminator",
                self.resolution, self.depth
            )));
        }
        Ok(())
    }

    fn width(&self, i: usize) -> usize {
        self.base_width * (1usize << i).min(WIDTH_CAP)
    }

    /// Spatial extent of the score grid.
    pub fn patch_grid(&self) -> usize {
        (self.resolution >> self.depth) - 2
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of("discriminator", self)
    }
}

fn fingerprint_of<T: Serialize>(kind: &str, spec: &T) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(serde_json::to_vec(spec).expect("spec serializes"));
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Common surface of trainable networks.
pub trait Network {
    /// Trainable parameters, each listed once, in construction order.
    fn named_params(&self) -> Vec<(String, Var)>;
    fn running_stats(&self) -> &[RunningStats];
    fn running_stats_mut(&mut self) -> &mut Vec<RunningStats>;
    fn fingerprint(&self) -> String;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn vars(&self) -> Vec<Var> {
        self.named_params().into_iter().map(|(_, v)| v).collect()
    }

    /// Parameters and batch-norm statistics as named tensors.
    fn state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .named_params()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        for (i, s) in self.running_stats().iter().enumerate() {
            out.push((format!("stats{i}.mean"), s.mean.clone()));
            out.push((format!("stats{i}.var"), s.var.clone()));
        }
        out
    }

    /// Restores state written by [`Network::state`].
    fn load_state(&mut self, get: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        for (name, var) in self.named_params() {
            let t = get(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        let n = self.running_stats().len();
        for i in 0..n {
            let fetch = |k: &str| {
                get(&format!("stats{i}.{k}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor stats{i}.{k}")))
            };
            let (mean, var) = (fetch("mean")?, fetch("var")?);
            let slot = &mut self.running_stats_mut()[i];
            if mean.dims() != slot.mean.dims() || var.dims() != slot.var.dims() {
                return Err(Error::Checkpoint(format!("batch-norm statistics {i} have the wrong shape")));
            }
            slot.mean = mean.to_dtype(slot.mean.dtype())?;
            slot.var = var.to_dtype(slot.var.dtype())?;
        }
        Ok(())
    }
}

/// Dropout and batch-norm behavior of a forward pass.
pub enum Mode<'a> {
    /// Dropout off, batch norm on running statistics. Deterministic.
    Inference,
    /// Dropout drawn from `rng`, batch norm on batch statistics, running
    /// statistics updated.
    Training(&'a mut ChaCha8Rng),
}

fn check_input(x: &Tensor, channels: usize, resolution: usize, what: &str) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != channels || h != resolution || w != resolution {
        return Err(Error::Shape(format!(
            "{what} expects N x {channels} x {resolution} x {resolution}, got {:?}",
            x.dims()
        )));
    }
    Ok(())
}

/// Encoder-decoder generator with one or two output heads.
pub struct Generator {
    spec: GeneratorSpec,
    encoder: Vec<Block>,
    shared: Vec<Block>,
    heads: Vec<Vec<Block>>,
    stats: Vec<RunningStats>,
}

impl Generator {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// Parameters of the shared trunk (encoder and shared decoder blocks).
    pub fn shared_params(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            out.extend(b.named_params(&format!("enc{i}")));
        }
        for (j, b) in self.shared.iter().enumerate() {
            out.extend(b.named_params(&format!("dec{j}")));
        }
        out
    }

    /// Parameters owned by one output head of a forked generator.
    pub fn head_params(&self, head: usize) -> Vec<(String, Var)> {
        let Some(blocks) = self.heads.get(head) else {
            return Vec::new();
        };
        let first = self.shared.len();
        blocks
            .iter()
            .enumerate()
            .flat_map(|(k, b)| b.named_params(&format!("head{head}.dec{}", first + k)))
            .collect()
    }

    /// Runs the network; returns one tensor per head.
    pub fn forward(&mut self, x: &Tensor, mode: Mode<'_>) -> Result<Vec<Tensor>> {
        let (outs, updates) = match mode {
            Mode::Inference => self.run(x, Ctx::eval(&self.stats))?,
            Mode::Training(rng) => self.run(x, Ctx::train(&self.stats, rng))?,
        };
        for (slot, s) in updates {
            self.stats[slot] = s;
        }
        Ok(outs)
    }

    /// Inference-mode forward on a shared handle.
    pub fn infer(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.run(x, Ctx::eval(&self.stats))?.0)
    }

    fn run(&self, x: &Tensor, mut ctx: Ctx<'_>) -> Result<(Vec<Tensor>, Vec<(usize, RunningStats)>)> {
        check_input(x, self.spec.in_channels, self.spec.resolution, "generator")?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for b in &self.encoder {
            h = b.forward(&h, &mut ctx)?;
            skips.push(h.clone());
        }
        let depth = self.encoder.len();
        let join = |h: Tensor, j: usize| -> Result<Tensor> {
            if self.spec.skip_connections && j > 0 {
                Ok(Tensor::cat(&[&h, &skips[depth - 1 - j]], 1)?)
            } else {
                Ok(h)
            }
        };
        for (j, b) in self.shared.iter().enumerate() {
            h = b.forward(&join(h, j)?, &mut ctx)?;
        }
        let outs = if self.heads.is_empty() {
            vec![h]
        } else {
            let first = self.shared.len();
            let mut outs = Vec::with_capacity(self.heads.len());
            for blocks in &self.heads {
                let mut o = h.clone();
                for (k, b) in blocks.iter().enumerate() {
                    o = b.forward(&join(o, first + k)?, &mut ctx)?;
                }
                outs.push(o);
            }
            outs
        };
        let outs = if self.spec.residual {
            // atanh of the input, pulled slightly inside (-1, 1)
            let y = (x * (1.0 - RESIDUAL_MARGIN))?;
            let base = (((&y + 1.0)? / (y.neg()? + 1.0)?)?.log()? * 0.5)?;
            outs.into_iter().map(|o| Ok((o + &base)?.tanh()?)).collect::<Result<Vec<_>>>()?
        } else {
            outs
        };
        for o in &outs {
            let peak = o.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !(peak <= 1.0) {
                return Err(Error::Shape(format!("generator output escaped [-1, 1] (peak {peak})")));
            }
        }
        Ok((outs, ctx.updates))
    }
}

impl Network for Generator {
    fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = self.shared_params();
        for h in 0..self.heads.len() {
            out.extend(self.head_params(h));
        }
        out
    }

    fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    fn running_stats_mut(&mut self) -> &mut Vec<RunningStats> {
        &mut self.stats
    }

    fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }
}

fn decoder_block(
    spec: &GeneratorSpec,
    j: usize,
    init: &mut Initializer,
    stats: &mut Vec<RunningStats>,
) -> Result<Block> {
    let (c_in, c_out) = spec.decoder_channels(j);
    let last = j + 1 == spec.depth();
    // a residual generator starts as the identity map
    let std = if last && spec.residual { 0.0 } else { INIT_STD };
    Ok(Block {
        conv: Conv::with_std(init, c_in, c_out, ConvKind::Up, std)?,
        norm: if last { None } else { Some(BatchNorm::new(init, c_out, stats)?) },
        dropout: if j < DROPOUT_BLOCKS && !last { spec.dropout_rate } else { 0.0 },
        act: match (last, spec.residual) {
            (false, _) => Activation::Relu,
            (true, false) => Activation::Tanh,
            (true, true) => Activation::Identity,
        },
    })
}

fn build(spec: &GeneratorSpec, seed: u64, dtype: DType, device: &Device) -> Result<Generator> {
    spec.validate()?;
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed), dtype, device.clone());
    let mut stats = Vec::new();
    let widths = spec.encoder_widths();
    let depth = widths.len();
    let mut encoder = Vec::with_capacity(depth);
    let mut c_in = spec.in_channels;
    for (i, &w) in widths.iter().enumerate() {
        // no normalization on the first and the innermost encoder block
        let norm = i != 0 && i + 1 != depth;
        encoder.push(Block {
            conv: Conv::new(&mut init, c_in, w, ConvKind::Down)?,
            norm: if norm { Some(BatchNorm::new(&mut init, w, &mut stats)?) } else { None },
            dropout: 0.0,
            act: Activation::LeakyRelu(0.2),
        });
        c_in = w;
    }
    let n_shared = spec.shared_decoder_blocks();
    let shared = (0..n_shared)
        .map(|j| decoder_block(spec, j, &mut init, &mut stats))
        .collect::<Result<Vec<_>>>()?;
    let heads = if spec.out_heads == 2 {
        (0..2)
            .map(|_| {
                (n_shared..depth)
                    .map(|j| decoder_block(spec, j, &mut init, &mut stats))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(Generator {
        spec: *spec,
        encoder,
        shared,
        heads,
        stats,
    })
}

/// Single-head encoder-decoder (3-channel image or 6-channel stacked output).
pub fn build_generator(spec: &GeneratorSpec, seed: u64, dtype: DType, device: &Device) -> Result<Generator> {
    if spec.out_heads != 1 {
        return Err(Error::Config("use build_fork_generator for two heads".into()));
    }
    build(spec, seed, dtype, device)
}

/// Two-head generator: image head and segmentation head over a shared trunk.
pub fn build_fork_generator(spec: &GeneratorSpec, seed: u64, dtype: DType, device: &Device) -> Result<Generator> {
    if spec.out_heads != 2 {
        return Err(Error::Config(format!(
            "forked generator needs out_heads = 2, got {}",
            spec.out_heads
        )));
    }
    build(spec, seed, dtype, device)
}

/// Patch discriminator producing a grid of real/fake scores.
pub struct Discriminator {
    spec: DiscriminatorSpec,
    blocks: Vec<Block>,
    stats: Vec<RunningStats>,
}

pub fn build_discriminator(spec: &DiscriminatorSpec, seed: u64, dtype: DType, device: &Device) -> Result<Discriminator> {
    spec.validate()?;
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed), dtype, device.clone());
    let mut stats = Vec::new();
    let mut blocks = Vec::new();
    let mut c_in = spec.in_channels;
    for i in 0..=spec.depth {
        let w = spec.width(i);
        let kind = if i < spec.depth { ConvKind::Down } else { ConvKind::Flat };
        blocks.push(Block {
            conv: Conv::new(&mut init, c_in, w, kind)?,
            norm: if i == 0 { None } else { Some(BatchNorm::new(&mut init, w, &mut stats)?) },
            dropout: 0.0,
            act: Activation::LeakyRelu(0.2),
        });
        c_in = w;
    }
    blocks.push(Block {
        conv: Conv::new(&mut init, c_in, 1, ConvKind::Flat)?,
        norm: None,
        dropout: 0.0,
        act: Activation::Identity,
    });
    Ok(Discriminator {
        spec: *spec,
        blocks,
        stats,
    })
}

impl Discriminator {
    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Pre-sigmoid scores for the pair `(condition, candidate)`.
    pub fn logits(&mut self, condition: &Tensor, candidate: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
        let x = Tensor::cat(&[condition, candidate], 1)?;
        let (out, updates) = match mode {
            Mode::Inference => self.run(&x, Ctx::eval(&self.stats))?,
            Mode::Training(rng) => self.run(&x, Ctx::train(&self.stats, rng))?,
        };
        for (slot, s) in updates {
            self.stats[slot] = s;
        }
        Ok(out)
    }

    /// Scores in `(0, 1)`.
    pub fn scores(&mut self, condition: &Tensor, candidate: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
        Ok(candle_nn_sigmoid(&self.logits(condition, candidate, mode)?)?)
    }

    pub fn infer_scores(&self, condition: &Tensor, candidate: &Tensor) -> Result<Tensor> {
        let x = Tensor::cat(&[condition, candidate], 1)?;
        Ok(candle_nn_sigmoid(&self.run(&x, Ctx::eval(&self.stats))?.0)?)
    }

    fn run(&self, x: &Tensor, mut ctx: Ctx<'_>) -> Result<(Tensor, Vec<(usize, RunningStats)>)> {
        check_input(x, self.spec.in_channels, self.spec.resolution, "discriminator")?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, &mut ctx)?;
        }
        Ok((h, ctx.updates))
    }
}

fn candle_nn_sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    // 1 / (1 + exp(-x)), written with primitive ops so it stays differentiable
    (x.neg()?.exp()? + 1.0)?.recip()
}

impl Network for Discriminator {
    fn named_params(&self) -> Vec<(String, Var)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.named_params(&format!("layer{i}")))
            .collect()
    }

    fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    fn running_stats_mut(&mut self) -> &mut Vec<RunningStats> {
        &mut self.stats
    }

    fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }
}

/// One row of a network's layer table: `(kernel, c_in, c_out, batch_norm)`.
pub type LayerRow = (usize, usize, usize, bool);

/// Layer table of a generator spec, in the order the layers are applied
/// (duplicated head layers listed once per head).
pub fn generator_layer_table(spec: &GeneratorSpec) -> Vec<LayerRow> {
    let widths = spec.encoder_widths();
    let depth = widths.len();
    let mut rows = Vec::new();
    let mut c_in = spec.in_channels;
    for (i, &w) in widths.iter().enumerate() {
        rows.push((4, c_in, w, i != 0 && i + 1 != depth));
        c_in = w;
    }
    let dec = |j: usize| {
        let (a, b) = spec.decoder_channels(j);
        (4, a, b, j + 1 != depth)
    };
    rows.extend((0..spec.shared_decoder_blocks()).map(dec));
    if spec.out_heads == 2 {
        for _ in 0..2 {
            rows.extend((spec.shared_decoder_blocks()..depth).map(dec));
        }
    }
    rows
}

pub fn discriminator_layer_table(spec: &DiscriminatorSpec) -> Vec<LayerRow> {
    let mut rows = Vec::new();
    let mut c_in = spec.in_channels;
    for i in 0..=spec.depth {
        rows.push((4, c_in, spec.width(i), i != 0));
        c_in = spec.width(i);
    }
    rows.push((4, c_in, 1, false));
    rows
}
