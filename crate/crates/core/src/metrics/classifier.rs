//! Scene classifiers that feed the probability and activation based metrics.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActivationMatrix, ProbMatrix};
use crate::nets::layers::{Conv, ConvKind, Initializer};
use crate::nets::{read_container, write_container, Adam, AdamConfig, Network, RunningStats};
use crate::{Error, Image, Result};

/// Class probabilities and penultimate features for a set of images.
#[derive(Debug, Clone)]
pub struct ClassifierOutputs {
    pub probs: ProbMatrix,
    pub acts: ActivationMatrix,
}

pub trait Classifier {
    fn classes(&self) -> usize;
    /// Inference-mode outputs; must be deterministic.
    fn outputs(&self, images: &[Image]) -> Result<ClassifierOutputs>;
}

const INPUT: usize = 64;
const WIDTHS: [usize; 4] = [16, 32, 64, 64];
const CHUNK: usize = 32;
const KIND: &str = "scene-classifier";

/// Small convolutional scene classifier: four stride-2 convolutions with
/// leaky ReLU, global average pooling, and a linear layer. Inputs are
/// resized to 64x64.
pub struct SceneClassifier {
    convs: Vec<Conv>,
    fc_w: Var,
    fc_b: Var,
    classes: usize,
    device: Device,
    stats: Vec<RunningStats>,
}

impl SceneClassifier {
    pub fn new(classes: usize, seed: u64, device: &Device) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("a classifier needs at least 2 classes, got {classes}")));
        }
        let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed), DType::F32, device.clone());
        let mut convs = Vec::new();
        let mut c_in = 3;
        for &w in &WIDTHS {
            // He-style scale: the network has no normalization layers
            let std = (2.0 / (16 * c_in) as f64).sqrt();
            convs.push(Conv::with_std(&mut init, c_in, w, ConvKind::Down, std)?);
            c_in = w;
        }
        let fc_w = init.normal(&[classes, c_in], 0.0, (1.0 / c_in as f64).sqrt())?;
        let fc_b = init.zeros(&[classes])?;
        Ok(Self {
            convs,
            fc_w,
            fc_b,
            classes,
            device: device.clone(),
            stats: Vec::new(),
        })
    }

    fn input(&self, images: &[Image]) -> Result<Tensor> {
        let resized: Vec<Image> = images
            .iter()
            .map(|img| {
                if img.channels() != 3 {
                    return Err(Error::Shape(format!("classifier expects RGB, got {} channels", img.channels())));
                }
                Ok(img.resize_bilinear(INPUT, INPUT))
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Image> = resized.iter().collect();
        Image::batch_to_tensor(&refs, DType::F32, &self.device)
    }

    /// `(features, logits)`.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for c in &self.convs {
            let y = c.forward(&h)?;
            h = y.maximum(&(&y * 0.2)?)?;
        }
        let feats = h.mean(D::Minus1)?.mean(D::Minus1)?;
        let logits = feats.matmul(&self.fc_w.as_tensor().t()?)?.broadcast_add(self.fc_b.as_tensor())?;
        Ok((feats, logits))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": KIND,
            "classes": self.classes,
            "fingerprint": self.fingerprint(),
        });
        write_container(path, &self.state(), &meta)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let c = read_container(path, device)?;
        if c.meta.get("kind").and_then(|v| v.as_str()) != Some(KIND) {
            return Err(Error::Checkpoint(format!("{} is not a scene classifier", path.display())));
        }
        let classes = c
            .meta
            .get("classes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("classifier class count missing".into()))? as usize;
        let mut clf = Self::new(classes, 0, device)?;
        let expected = c.meta.get("fingerprint").and_then(|v| v.as_str()).unwrap_or_default();
        if expected != clf.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "classifier fingerprint {expected} does not match {}",
                clf.fingerprint()
            )));
        }
        clf.load_state(&|n| c.get(n))?;
        Ok(clf)
    }
}

fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let m = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

impl Classifier for SceneClassifier {
    fn classes(&self) -> usize {
        self.classes
    }

    fn outputs(&self, images: &[Image]) -> Result<ClassifierOutputs> {
        let (mut probs, mut acts) = (Vec::new(), Vec::new());
        for chunk in images.chunks(CHUNK) {
            let (feats, logits) = self.forward(&self.input(chunk)?)?;
            let p = log_softmax(&logits)?.exp()?;
            let rows = to_rows(&p)?;
            // renormalize in f64 so rows pass the sum check exactly
            probs.extend(rows.into_iter().map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect::<Vec<_>>()
            }));
            acts.extend(to_rows(&feats)?);
        }
        Ok(ClassifierOutputs {
            probs: ProbMatrix::new(probs)?,
            acts: ActivationMatrix::new(acts)?,
        })
    }
}

impl Network for SceneClassifier {
    fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), c.weight.clone()));
            out.push((format!("conv{i}.bias"), c.bias.clone()));
        }
        out.push(("fc.weight".into(), self.fc_w.clone()));
        out.push(("fc.bias".into(), self.fc_b.clone()));
        out
    }

    fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    fn running_stats_mut(&mut self) -> &mut Vec<RunningStats> {
        &mut self.stats
    }

    fn fingerprint(&self) -> String {
        format!("{KIND}-{}-{:?}", self.classes, WIDTHS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Trains a [`SceneClassifier`] with cross-entropy on labeled images.
/// Returns the classifier and the final-epoch training accuracy.
pub fn train_classifier(
    samples: &[(Image, usize)],
    classes: usize,
    cfg: &ClassifierTrainConfig,
    device: &Device,
) -> Result<(SceneClassifier, f64)> {
    if samples.is_empty() {
        return Err(Error::Config("no labeled images to train the classifier on".into()));
    }
    if let Some((_, l)) = samples.iter().find(|(_, l)| *l >= classes) {
        return Err(Error::Config(format!("label {l} out of range for {classes} classes")));
    }
    let clf = SceneClassifier::new(classes, cfg.seed, device)?;
    let mut opt = Adam::new(
        clf.named_params(),
        AdamConfig {
            lr: cfg.learning_rate,
            beta1: 0.9,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..samples.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..cfg.batch_size.min(order.len())).collect();
        let imgs: Vec<Image> = idx.iter().map(|&i| samples[i].0.clone()).collect();
        let x = clf.input(&imgs)?;
        let labels: Vec<u32> = idx.iter().map(|&i| samples[i].1 as u32).collect();
        let onehot = Tensor::new(labels.as_slice(), device)?.to_dtype(DType::U32)?;
        let (_, logits) = clf.forward(&x)?;
        let lp = log_softmax(&logits)?;
        let picked = lp.gather(&onehot.unsqueeze(1)?, 1)?;
        let loss = picked.mean_all()?.neg()?;
        opt.step(&loss.backward()?)?;
    }
    let images: Vec<Image> = samples.iter().map(|(i, _)| i.clone()).collect();
    let out = clf.outputs(&images)?;
    let hits = out
        .probs
        .rows()
        .iter()
        .zip(samples)
        .filter(|(r, (_, l))| r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i) == Some(*l))
        .count();
    Ok((clf, hits as f64 / samples.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataman::synth_scene;

    #[test]
    fn outputs_are_valid_and_deterministic() {
        let clf = SceneClassifier::new(8, 1, &Device::Cpu).unwrap();
        let imgs: Vec<Image> = (0..3).map(|s| synth_scene(s, 64).unwrap().ground).collect();
        let a = clf.outputs(&imgs).unwrap();
        let b = clf.outputs(&imgs).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.acts.dim(), 64);
        assert_eq!(a.probs.classes(), 8);
    }

    #[test]
    fn learns_a_separable_toy_task() {
        // class 0 dark, class 1 bright
        let samples: Vec<(Image, usize)> = (0..16)
            .map(|i| {
                let v = if i % 2 == 0 { -0.8 } else { 0.8 };
                (Image::filled(3, 32, 32, v + (i as f32) * 0.005), i % 2)
            })
            .collect();
        let cfg = ClassifierTrainConfig {
            steps: 60,
            batch_size: 8,
            ..Default::default()
        };
        let (_, acc) = train_classifier(&samples, 2, &cfg, &Device::Cpu).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clf.safetensors");
        let clf = SceneClassifier::new(5, 3, &Device::Cpu).unwrap();
        clf.save(&p).unwrap();
        let back = SceneClassifier::load(&p, &Device::Cpu).unwrap();
        let img = vec![synth_scene(0, 64).unwrap().ground];
        assert_eq!(clf.outputs(&img).unwrap().probs, back.outputs(&img).unwrap().probs);
    }
}
