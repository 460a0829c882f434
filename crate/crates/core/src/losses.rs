//! Adversarial and pixel objectives.
//!
//! Every function works on candle tensors so the result can be
//! back-propagated. Discriminator outputs can be given either as scores in
//! `(0, 1)` or as pre-sigmoid logits; training uses logits because the
//! log-sigmoid form stays finite when the discriminator saturates.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Mask, Result};

/// Real-label target used for one-sided label smoothing.
pub const REAL_LABEL: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Adversarial weight.
    pub lambda1: f64,
    /// Pixel (L1) weight.
    pub lambda2: f64,
}

impl LossWeights {
    pub const PIX2PIX: LossWeights = LossWeights {
        lambda1: 1.0,
        lambda2: 100.0,
    };
    /// Weights of the band-constrained realism objective.
    pub const REALISM: LossWeights = LossWeights {
        lambda1: 5.0,
        lambda2: 2.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::PIX2PIX
    }
}

/// Scalar components of one training step, as logged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_d: f64,
    pub adv_g: f64,
    pub l1_img: f64,
    pub l1_seg: f64,
    /// Generator objective: `lambda1 * adv_g + lambda2 * (l1_img + l1_seg)`.
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,adv_d,adv_g,l1_img,l1_seg,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.adv_d, self.adv_g, self.l1_img, self.l1_seg, self.total
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<(usize, LossReport)> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Config(format!("malformed loss log row: {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let n = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok((
            f[0].parse().map_err(|_| bad())?,
            LossReport {
                adv_d: n(1)?,
                adv_g: n(2)?,
                l1_img: n(3)?,
                l1_seg: n(4)?,
                total: n(5)?,
            },
        ))
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.lambda1 * self.adv_g + w.lambda2 * (self.l1_img + self.l1_seg)
    }
}

/// A differentiable generator objective together with its logged parts.
pub struct Objective {
    pub total: Tensor,
    pub report: LossReport,
}

/// Discriminator output for a batch of candidates.
#[derive(Clone, Copy)]
pub enum Critic<'a> {
    Scores(&'a Tensor),
    Logits(&'a Tensor),
}

impl Critic<'_> {
    pub fn generator_loss(&self) -> Result<Tensor> {
        match self {
            Critic::Scores(s) => adv_loss_g(s),
            Critic::Logits(l) => adv_loss_g_logits(l),
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_scores(t: &Tensor, what: &str) -> Result<()> {
    if t.elem_count() == 0 {
        return Err(Error::LossInput(format!("{what} is empty")));
    }
    let lo = scalar(&t.flatten_all()?.min(0)?)?;
    let hi = scalar(&t.flatten_all()?.max(0)?)?;
    if !(lo > 0.0 && hi < 1.0) {
        return Err(Error::LossInput(format!(
            "{what} must lie strictly inside (0, 1), found range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

fn check_smooth(smooth: f64) -> Result<()> {
    if !(smooth > 0.0 && smooth <= 1.0) {
        return Err(Error::LossInput(format!("real label {smooth} outside (0, 1]")));
    }
    Ok(())
}

/// `-mean(t ln p + (1 - t) ln(1 - p))`, terms with zero weight dropped.
fn bce_scores(p: &Tensor, target: f64) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    if target > 0.0 {
        acc = Some((p.log()? * target)?);
    }
    if target < 1.0 {
        let t = ((p.neg()? + 1.0)?.log()? * (1.0 - target))?;
        acc = Some(match acc {
            Some(a) => (a + t)?,
            None => t,
        });
    }
    Ok(acc.expect("some term").mean_all()?.neg()?)
}

/// `log(1 + exp(x))`, stable for large |x|.
fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Binary cross-entropy on logits: `mean(softplus(x) - t x)`.
fn bce_logits(x: &Tensor, target: f64) -> Result<Tensor> {
    Ok((softplus(x)? - (x * target)?)?.mean_all()?)
}

/// Discriminator loss on scores: real scores against `smooth`, fake scores
/// against 0, each averaged over the patch grid and batch.
pub fn adv_loss_d(real_scores: &Tensor, fake_scores: &Tensor, smooth: f64) -> Result<Tensor> {
    check_smooth(smooth)?;
    check_scores(real_scores, "real scores")?;
    check_scores(fake_scores, "fake scores")?;
    Ok((bce_scores(real_scores, smooth)? + bce_scores(fake_scores, 0.0)?)?)
}

pub fn adv_loss_d_logits(real_logits: &Tensor, fake_logits: &Tensor, smooth: f64) -> Result<Tensor> {
    check_smooth(smooth)?;
    Ok((bce_logits(real_logits, smooth)? + bce_logits(fake_logits, 0.0)?)?)
}

/// Non-saturating generator loss `-mean ln D(fake)`.
pub fn adv_loss_g(fake_scores: &Tensor) -> Result<Tensor> {
    check_scores(fake_scores, "fake scores")?;
    bce_scores(fake_scores, 1.0)
}

pub fn adv_loss_g_logits(fake_logits: &Tensor) -> Result<Tensor> {
    bce_logits(fake_logits, 1.0)
}

/// Mask as an `N x 1 x H x W` 0/1 tensor.
pub fn mask_tensor(mask: &Mask, batch: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(mask
        .to_tensor(dtype, device)?
        .repeat((batch, 1, 1, 1))?)
}

/// Mean absolute difference. With a mask (`N x 1 x H x W` or
/// `1 x 1 x H x W`, entries 0 or 1), the mean runs over the mask support
/// across all channels.
pub fn l1_loss(x: &Tensor, y: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!("l1 inputs differ: {:?} vs {:?}", x.dims(), y.dims())));
    }
    let diff = (x - y)?.abs()?;
    let Some(m) = mask else {
        return Ok(diff.mean_all()?);
    };
    let (n, c, h, w) = x.dims4()?;
    let (mn, mc, mh, mw) = m.dims4()?;
    if mc != 1 || mh != h || mw != w || (mn != n && mn != 1) {
        return Err(Error::Shape(format!(
            "mask {:?} does not fit inputs {:?}",
            m.dims(),
            x.dims()
        )));
    }
    let m = m.to_dtype(x.dtype())?.broadcast_as((n, 1, h, w))?.contiguous()?;
    let support = scalar(&m.sum_all()?)?;
    if support <= 0.0 {
        return Err(Error::LossInput("mask support is empty".into()));
    }
    let s = diff.broadcast_mul(&m)?.sum_all()?;
    Ok((s / (support * c as f64))?)
}

fn objective(adv: Tensor, l1_img: Tensor, l1_seg: Option<Tensor>, w: &LossWeights) -> Result<Objective> {
    w.validate()?;
    let mut total = ((&adv * w.lambda1)? + (&l1_img * w.lambda2)?)?;
    let mut report = LossReport {
        adv_g: scalar(&adv)?,
        l1_img: scalar(&l1_img)?,
        ..Default::default()
    };
    if let Some(seg) = l1_seg {
        total = (total + (&seg * w.lambda2)?)?;
        report.l1_seg = scalar(&seg)?;
    }
    report.total = scalar(&total)?;
    Ok(Objective { total, report })
}

/// `lambda1 * adv_g + lambda2 * L1(fake, real)`.
pub fn pix2pix_objective(critic: Critic<'_>, fake: &Tensor, real: &Tensor, w: &LossWeights) -> Result<Objective> {
    objective(critic.generator_loss()?, l1_loss(fake, real, None)?, None, w)
}

/// Forked generator: the critic judges the image head only; both heads
/// carry an L1 term with weight `lambda2`.
pub fn fork_objective(
    critic: Critic<'_>,
    img: &Tensor,
    img_true: &Tensor,
    seg: &Tensor,
    seg_true: &Tensor,
    w: &LossWeights,
) -> Result<Objective> {
    objective(
        critic.generator_loss()?,
        l1_loss(img, img_true, None)?,
        Some(l1_loss(seg, seg_true, None)?),
        w,
    )
}

/// Sum of two full objectives. The second stage's pixel term is logged as
/// the segmentation L1.
pub fn seq_objective(stage1: Objective, stage2: Objective) -> Result<Objective> {
    let total = (stage1.total + stage2.total)?;
    let report = LossReport {
        adv_d: stage1.report.adv_d + stage2.report.adv_d,
        adv_g: stage1.report.adv_g + stage2.report.adv_g,
        l1_img: stage1.report.l1_img + stage1.report.l1_seg,
        l1_seg: stage2.report.l1_img + stage2.report.l1_seg,
        total: scalar(&total)?,
    };
    Ok(Objective { total, report })
}

/// Pixel term restricted to `mask` (the L1 of a regional subtask).
pub fn masked_objective(
    critic: Critic<'_>,
    out: &Tensor,
    target: &Tensor,
    mask: &Tensor,
    w: &LossWeights,
) -> Result<Objective> {
    objective(critic.generator_loss()?, l1_loss(out, target, Some(mask))?, None, w)
}

/// Realism refinement: adversarial term plus L1 to the composite outside
/// the seam bands. `band_mask` is 1 on band pixels.
pub fn realism_objective(
    critic: Critic<'_>,
    out: &Tensor,
    composite_in: &Tensor,
    band_mask: &Tensor,
    w: &LossWeights,
) -> Result<Objective> {
    let keep = (band_mask.neg()? + 1.0)?;
    masked_objective(critic, out, composite_in, &keep, w)
}
