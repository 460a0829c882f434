//! The networks of one method and their forward/training passes.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{Arch, TrainConfig};
use crate::losses::{
    adv_loss_d_logits, fork_objective, l1_loss, masked_objective, pix2pix_objective, realism_objective, seq_objective, Critic, LossReport, LossWeights,
    Objective,
};
use crate::nets::{
    build_discriminator, build_fork_generator, build_generator, Adam, AdamConfig, Discriminator, Generator, Mode,
    Network,
};
use crate::{Error, Image, Result};

/// One training batch: conditioning images and targets, `N x 3 x H x W`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub cond: Tensor,
    pub img: Tensor,
    pub seg: Option<Tensor>,
}

impl Batch {
    pub fn from_images(cond: &[Image], img: &[Image], seg: Option<&[Image]>, device: &Device) -> Result<Self> {
        let t = |xs: &[Image]| {
            let refs: Vec<&Image> = xs.iter().collect();
            Image::batch_to_tensor(&refs, DType::F32, device)
        };
        Ok(Self {
            cond: t(cond)?,
            img: t(img)?,
            seg: seg.map(t).transpose()?,
        })
    }

    fn seg(&self) -> Result<&Tensor> {
        self.seg
            .as_ref()
            .ok_or_else(|| Error::Config("this method needs segmentation targets".into()))
    }
}

/// Generator outputs for a batch.
pub struct Fakes {
    pub img: Tensor,
    pub seg: Option<Tensor>,
    /// Full generator output for the stacked-output method.
    stacked: Option<Tensor>,
}

/// Inference outputs for one image.
#[derive(Debug, Clone)]
pub struct Synthesized {
    pub image: Image,
    pub seg: Option<Image>,
}

/// Pixel term of a single-generator regional subtask.
#[derive(Clone)]
pub(crate) enum PixelTerm {
    Full,
    /// L1 to the target inside the mask (`1 x 1 x H x W`).
    Masked(Tensor),
    /// L1 to the input outside the mask.
    InputOutside(Tensor),
}

/// Generators, discriminators and their optimizers for one method.
pub struct Model {
    pub cfg: TrainConfig,
    pub arch: Arch,
    pub gens: Vec<Generator>,
    pub discs: Vec<Discriminator>,
    pub opt_g: Vec<Adam>,
    pub opt_d: Vec<Adam>,
    pub device: Device,
    pub(crate) pixel: PixelTerm,
}

fn adam(net: &dyn Network, cfg: &TrainConfig) -> Result<Adam> {
    Adam::new(
        net.named_params(),
        AdamConfig {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            ..Default::default()
        },
    )
}

/// SHA-256 over a network's parameters and batch-norm statistics.
pub fn param_digest(net: &dyn Network) -> String {
    let mut h = Sha256::new();
    for (name, t) in net.state() {
        h.update(name.as_bytes());
        let v: Vec<f32> = t
            .flatten_all()
            .and_then(|t| t.to_dtype(DType::F32))
            .and_then(|t| t.to_vec1())
            .unwrap_or_default();
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Model {
    /// Builds the networks of a pix2pix-family method. Network seeds are
    /// derived from the configured seed.
    pub fn new(cfg: &TrainConfig, device: &Device) -> Result<Self> {
        let arch = cfg.method.arch();
        let seed = |i: u64| super::derive_seed(cfg.seed, 0, 100 + i);
        let (gens, discs) = match arch {
            Arch::Pix2pix => (
                vec![build_generator(&cfg.generator_spec(3, 3), seed(0), DType::F32, device)?],
                vec![build_discriminator(&cfg.discriminator_spec(6), seed(1), DType::F32, device)?],
            ),
            Arch::So => (
                vec![build_generator(&cfg.generator_spec(3, 6), seed(0), DType::F32, device)?],
                vec![build_discriminator(&cfg.discriminator_spec(9), seed(1), DType::F32, device)?],
            ),
            Arch::Fork => {
                let spec = crate::nets::GeneratorSpec {
                    out_heads: 2,
                    ..cfg.generator_spec(3, 3)
                };
                (
                    vec![build_fork_generator(&spec, seed(0), DType::F32, device)?],
                    vec![build_discriminator(&cfg.discriminator_spec(6), seed(1), DType::F32, device)?],
                )
            }
            Arch::Seq => (
                vec![
                    build_generator(&cfg.generator_spec(3, 3), seed(0), DType::F32, device)?,
                    build_generator(&cfg.generator_spec(3, 3), seed(2), DType::F32, device)?,
                ],
                vec![
                    build_discriminator(&cfg.discriminator_spec(6), seed(1), DType::F32, device)?,
                    build_discriminator(&cfg.discriminator_spec(6), seed(3), DType::F32, device)?,
                ],
            ),
            Arch::Regions => {
                return Err(Error::Config(
                    "h-regions trains three subtask networks; use train_h_regions".into(),
                ))
            }
        };
        Self::from_parts(cfg, arch, gens, discs, device)
    }

    pub(crate) fn from_parts(
        cfg: &TrainConfig,
        arch: Arch,
        gens: Vec<Generator>,
        discs: Vec<Discriminator>,
        device: &Device,
    ) -> Result<Self> {
        let opt_g = gens.iter().map(|g| adam(g, cfg)).collect::<Result<_>>()?;
        let opt_d = discs.iter().map(|d| adam(d, cfg)).collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            arch,
            gens,
            discs,
            opt_g,
            opt_d,
            device: device.clone(),
            pixel: PixelTerm::Full,
        })
    }

    fn weights(&self) -> LossWeights {
        let mut w = self.cfg.weights;
        if self.arch == Arch::So {
            w.lambda1 *= self.cfg.so_adv_scale;
        }
        w
    }

    /// Generator forward pass. `rng` selects training mode.
    pub fn generate(&mut self, cond: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Fakes> {
        let mut rng = rng;
        let mut run = |g: &mut Generator, x: &Tensor| -> Result<Vec<Tensor>> {
            match rng.as_deref_mut() {
                Some(r) => g.forward(x, Mode::Training(r)),
                None => g.forward(x, Mode::Inference),
            }
        };
        let (g0, rest) = self.gens.split_first_mut().expect("at least one generator");
        let out = run(g0, cond)?;
        Ok(match self.arch {
            Arch::Pix2pix | Arch::Regions => Fakes {
                img: out[0].clone(),
                seg: None,
                stacked: None,
            },
            Arch::So => Fakes {
                img: out[0].narrow(1, 0, 3)?,
                seg: Some(out[0].narrow(1, 3, 3)?),
                stacked: Some(out[0].clone()),
            },
            Arch::Fork => Fakes {
                img: out[0].clone(),
                seg: Some(out[1].clone()),
                stacked: None,
            },
            Arch::Seq => {
                let seg = run(&mut rest[0], &out[0])?.remove(0);
                Fakes {
                    img: out[0].clone(),
                    seg: Some(seg),
                    stacked: None,
                }
            }
        })
    }

    /// `(condition, fake candidate, real condition, real candidate)` for
    /// each discriminator.
    fn critic_inputs(&self, batch: &Batch, fakes: &Fakes) -> Result<Vec<[Tensor; 4]>> {
        Ok(match self.arch {
            Arch::Pix2pix | Arch::Fork | Arch::Regions => vec![[
                batch.cond.clone(),
                fakes.img.clone(),
                batch.cond.clone(),
                batch.img.clone(),
            ]],
            Arch::So => vec![[
                batch.cond.clone(),
                fakes.stacked.clone().expect("stacked output"),
                batch.cond.clone(),
                Tensor::cat(&[&batch.img, batch.seg()?], 1)?,
            ]],
            Arch::Seq => vec![
                [batch.cond.clone(), fakes.img.clone(), batch.cond.clone(), batch.img.clone()],
                [
                    fakes.img.clone(),
                    fakes.seg.clone().expect("seq segmentation"),
                    batch.img.clone(),
                    batch.seg()?.clone(),
                ],
            ],
        })
    }

    /// One discriminator update on detached fakes; returns the summed loss.
    pub fn d_step(&mut self, batch: &Batch, fakes: &Fakes, rng: &mut ChaCha8Rng) -> Result<f64> {
        let inputs = self.critic_inputs(batch, fakes)?;
        let mut total: Option<Tensor> = None;
        for (d, [cf, xf, cr, xr]) in self.discs.iter_mut().zip(inputs) {
            let real = d.logits(&cr, &xr, Mode::Training(rng))?;
            let fake = d.logits(&cf.detach(), &xf.detach(), Mode::Training(rng))?;
            let l = adv_loss_d_logits(&real, &fake, self.cfg.smooth)?;
            total = Some(match total {
                Some(t) => (t + l)?,
                None => l,
            });
        }
        let total = total.expect("at least one discriminator");
        let value = total.to_scalar::<f32>()? as f64;
        let grads = total.backward()?;
        for opt in &mut self.opt_d {
            opt.step(&grads)?;
        }
        Ok(value)
    }

    /// Generator objective for the current fakes (not yet applied).
    pub fn g_objective(&mut self, batch: &Batch, fakes: &Fakes, rng: &mut ChaCha8Rng) -> Result<Objective> {
        let inputs = self.critic_inputs(batch, fakes)?;
        let mut logits = Vec::with_capacity(inputs.len());
        for (d, [cf, xf, _, _]) in self.discs.iter_mut().zip(inputs) {
            logits.push(d.logits(&cf, &xf, Mode::Training(rng))?);
        }
        let w = self.weights();
        match self.arch {
            Arch::Pix2pix => pix2pix_objective(Critic::Logits(&logits[0]), &fakes.img, &batch.img, &w),
            Arch::Regions => {
                let critic = Critic::Logits(&logits[0]);
                match &self.pixel {
                    PixelTerm::Full => pix2pix_objective(critic, &fakes.img, &batch.img, &w),
                    PixelTerm::Masked(m) => masked_objective(critic, &fakes.img, &batch.img, m, &w),
                    PixelTerm::InputOutside(m) => realism_objective(critic, &fakes.img, &batch.cond, m, &w),
                }
            }
            Arch::So | Arch::Fork => fork_objective(
                Critic::Logits(&logits[0]),
                &fakes.img,
                &batch.img,
                fakes.seg.as_ref().expect("segmentation output"),
                batch.seg()?,
                &w,
            ),
            Arch::Seq => {
                let s1 = pix2pix_objective(Critic::Logits(&logits[0]), &fakes.img, &batch.img, &w)?;
                let s2 = pix2pix_objective(
                    Critic::Logits(&logits[1]),
                    fakes.seg.as_ref().expect("seq segmentation"),
                    batch.seg()?,
                    &w,
                )?;
                seq_objective(s1, s2)
            }
        }
    }

    /// Back-propagates a generator objective and updates every generator.
    pub fn apply_g(&mut self, obj: &Objective) -> Result<()> {
        if !obj.report.total.is_finite() {
            return Err(Error::Diverged(format!(
                "generator loss is {} (adv_g {}, l1_img {}, l1_seg {})",
                obj.report.total, obj.report.adv_g, obj.report.l1_img, obj.report.l1_seg
            )));
        }
        let grads = obj.total.backward()?;
        for opt in &mut self.opt_g {
            opt.step(&grads)?;
        }
        Ok(())
    }

    /// One full training step: fakes once, a discriminator update on the
    /// detached fakes, then a generator update.
    pub fn train_step(&mut self, batch: &Batch, step_seed: u64) -> Result<LossReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let fakes = self.generate(&batch.cond, Some(&mut rng))?;
        let adv_d = self.d_step(batch, &fakes, &mut rng)?;
        if !adv_d.is_finite() {
            return Err(Error::Diverged(format!("discriminator loss is {adv_d}")));
        }
        let obj = self.g_objective(batch, &fakes, &mut rng)?;
        self.apply_g(&obj)?;
        Ok(LossReport { adv_d, ..obj.report })
    }

    /// Inference-mode L1 of the image (and segmentation) outputs.
    pub fn eval_l1(&mut self, batch: &Batch) -> Result<(f64, Option<f64>)> {
        let fakes = self.generate(&batch.cond, None)?;
        let img = l1_loss(&fakes.img, &batch.img, None)?.to_scalar::<f32>()? as f64;
        let seg = match (&fakes.seg, &batch.seg) {
            (Some(f), Some(t)) => Some(l1_loss(f, t, None)?.to_scalar::<f32>()? as f64),
            _ => None,
        };
        Ok((img, seg))
    }

    pub fn infer(&mut self, cond: &[Image]) -> Result<Vec<Synthesized>> {
        let refs: Vec<&Image> = cond.iter().collect();
        let x = Image::batch_to_tensor(&refs, DType::F32, &self.device)?;
        let fakes = self.generate(&x, None)?;
        let imgs = Image::batch_from_tensor(&fakes.img)?;
        let segs = match &fakes.seg {
            Some(s) => Image::batch_from_tensor(s)?.into_iter().map(Some).collect(),
            None => vec![None; imgs.len()],
        };
        Ok(imgs
            .into_iter()
            .zip(segs)
            .map(|(image, seg)| Synthesized { image, seg })
            .collect())
    }

    /// Network state and optimizer moments as named tensors.
    pub fn state(&self) -> Vec<(String, candle_core::Tensor)> {
        let mut out = Vec::new();
        for (i, g) in self.gens.iter().enumerate() {
            out.extend(g.state().into_iter().map(|(n, t)| (format!("g{i}.{n}"), t)));
            out.extend(self.opt_g[i].state(&format!("opt_g{i}")));
        }
        for (i, d) in self.discs.iter().enumerate() {
            out.extend(d.state().into_iter().map(|(n, t)| (format!("d{i}.{n}"), t)));
            out.extend(self.opt_d[i].state(&format!("opt_d{i}")));
        }
        out
    }

    pub fn fingerprints(&self) -> Vec<String> {
        self.gens
            .iter()
            .map(|g| g.fingerprint())
            .chain(self.discs.iter().map(|d| d.fingerprint()))
            .collect()
    }

    pub fn load_state(&mut self, step: usize, get: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        for i in 0..self.gens.len() {
            let p = format!("g{i}.");
            self.gens[i].load_state(&|n| get(&format!("{p}{n}")))?;
            self.opt_g[i].load_state(&format!("opt_g{i}"), step, get)?;
        }
        for i in 0..self.discs.len() {
            let p = format!("d{i}.");
            self.discs[i].load_state(&|n| get(&format!("{p}{n}")))?;
            self.opt_d[i].load_state(&format!("opt_d{i}"), step, get)?;
        }
        Ok(())
    }
}

/// Loads a checkpoint (file or run directory) and runs inference on
/// conditioning images already in the method's input view.
pub fn synthesize(path: &std::path::Path, cond: &[Image], device: &Device) -> Result<Vec<Synthesized>> {
    let ck = super::session::load_checkpoint(path, device)?;
    let mut model = ck.model;
    for img in cond {
        if img.height() != model.cfg.resolution || img.width() != model.cfg.resolution || img.channels() != 3 {
            return Err(Error::Shape(format!(
                "input is {:?}, the checkpoint expects 3 x {r} x {r}",
                img.dims(),
                r = model.cfg.resolution
            )));
        }
    }
    let mut out = Vec::with_capacity(cond.len());
    for chunk in cond.chunks(8) {
        out.extend(model.infer(chunk)?);
    }
    Ok(out)
}
