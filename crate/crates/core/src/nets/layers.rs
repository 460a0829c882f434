//! Convolution, batch-norm and dropout building blocks on top of candle.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{conv2d, conv_transpose2d};
use crate::Result;

pub(crate) const INIT_STD: f64 = 0.02;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Draws initial values in construction order from one seeded stream.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng, dtype: DType, device: Device) -> Self {
        Self { rng, dtype, device }
    }

    pub fn normal(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(mean, std).expect("valid normal");
        let vals: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::from_vec(vals, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Var> {
        Ok(Var::zeros(shape, self.dtype, &self.device)?)
    }

    fn ones_tensor(&self, n: usize) -> Result<Tensor> {
        Ok(Tensor::ones(n, self.dtype, &self.device)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ConvKind {
    /// 4x4 stride-2 downsampling convolution.
    Down,
    /// 4x4 stride-2 upsampling (transposed) convolution.
    Up,
    /// 4x4 stride-1 convolution (patch discriminator head).
    Flat,
}

pub(crate) struct Conv {
    pub weight: Var,
    pub bias: Var,
    kind: ConvKind,
}

impl Conv {
    pub fn new(init: &mut Initializer, c_in: usize, c_out: usize, kind: ConvKind) -> Result<Self> {
        Self::with_std(init, c_in, c_out, kind, INIT_STD)
    }

    pub fn with_std(init: &mut Initializer, c_in: usize, c_out: usize, kind: ConvKind, std: f64) -> Result<Self> {
        let shape = match kind {
            ConvKind::Up => [c_in, c_out, 4, 4],
            _ => [c_out, c_in, 4, 4],
        };
        Ok(Self {
            weight: init.normal(&shape, 0.0, std)?,
            bias: init.zeros(&[c_out])?,
            kind,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.bias.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match self.kind {
            ConvKind::Down => conv2d(x, self.weight.as_tensor(), 2, 1)?,
            ConvKind::Flat => conv2d(x, self.weight.as_tensor(), 1, 1)?,
            ConvKind::Up => conv_transpose2d(x, self.weight.as_tensor(), 2, 1)?,
        };
        let b = self.bias.as_tensor().reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

pub(crate) struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    /// Index of this layer's entry in the owning network's running stats.
    pub slot: usize,
}

impl BatchNorm {
    pub fn new(init: &mut Initializer, channels: usize, stats: &mut Vec<RunningStats>) -> Result<Self> {
        let slot = stats.len();
        stats.push(RunningStats {
            mean: init.zeros(&[channels])?.as_tensor().clone(),
            var: init.ones_tensor(channels)?,
        });
        Ok(Self {
            gamma: init.normal(&[channels], 1.0, INIT_STD)?,
            beta: init.zeros(&[channels])?,
            slot,
        })
    }

    fn channels(&self) -> usize {
        self.gamma.dims()[0]
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx<'_>) -> Result<Tensor> {
        let c = self.channels();
        let (mean, var) = if ctx.training() {
            let (n, _, h, w) = x.dims4()?;
            let flat = x.transpose(0, 1)?.reshape((c, n * h * w))?;
            let mean = flat.mean_keepdim(D::Minus1)?;
            let centered = flat.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 {
                (var.detach() * (count / (count - 1.0)))?
            } else {
                var.detach()
            };
            let prev = &ctx.stats[self.slot];
            let new_mean = ((&prev.mean * (1.0 - BN_MOMENTUM))? + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
            let new_var = ((&prev.var * (1.0 - BN_MOMENTUM))? + (unbiased.flatten_all()? * BN_MOMENTUM)?)?;
            ctx.updates.push((
                self.slot,
                RunningStats {
                    mean: new_mean,
                    var: new_var,
                },
            ));
            (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
        } else {
            let s = &ctx.stats[self.slot];
            (s.mean.reshape((1, c, 1, 1))?, s.var.reshape((1, c, 1, 1))?)
        };
        let norm = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        let g = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let b = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(norm.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Activation {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match *self {
            Activation::LeakyRelu(slope) => x.maximum(&(x * slope)?)?,
            Activation::Relu => x.relu()?,
            Activation::Tanh => x.tanh()?,
            Activation::Identity => x.clone(),
        })
    }
}

/// Forward-pass context: training flag, dropout stream, and the batch-norm
/// statistics read (and, in training, produced) by the pass.
pub(crate) struct Ctx<'a> {
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub stats: &'a [RunningStats],
    pub updates: Vec<(usize, RunningStats)>,
}

impl<'a> Ctx<'a> {
    pub fn eval(stats: &'a [RunningStats]) -> Self {
        Self {
            rng: None,
            stats,
            updates: Vec::new(),
        }
    }

    pub fn train(stats: &'a [RunningStats], rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            rng: Some(rng),
            stats,
            updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x.clone());
        };
        if rate <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < keep { scale as f32 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

/// Convolution, optional batch norm, optional dropout, activation.
pub(crate) struct Block {
    pub conv: Conv,
    pub norm: Option<BatchNorm>,
    pub dropout: f64,
    pub act: Activation,
}

impl Block {
    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx<'_>) -> Result<Tensor> {
        let mut h = self.conv.forward(x)?;
        if let Some(bn) = &self.norm {
            h = bn.forward(&h, ctx)?;
        }
        if self.dropout > 0.0 {
            h = ctx.dropout(&h, self.dropout)?;
        }
        self.act.apply(&h)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut out = vec![
            (format!("{prefix}.conv.weight"), self.conv.weight.clone()),
            (format!("{prefix}.conv.bias"), self.conv.bias.clone()),
        ];
        if let Some(bn) = &self.norm {
            out.push((format!("{prefix}.bn.gamma"), bn.gamma.clone()));
            out.push((format!("{prefix}.bn.beta"), bn.beta.clone()));
        }
        out
    }
}
