//! Training configuration, methods and named presets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::losses::LossWeights;
use crate::nets::{DiscriminatorSpec, GeneratorSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    XPix2pix,
    XSo,
    XFork,
    XSeq,
    HPix2pix,
    HSo,
    HFork,
    HSeq,
    HRegions,
}

/// Network layout behind a method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Pix2pix,
    /// One generator with a stacked 6-channel output.
    So,
    Fork,
    Seq,
    Regions,
}

impl Arch {
    /// Trained against a segmentation target.
    pub fn needs_seg(&self) -> bool {
        matches!(self, Arch::So | Arch::Fork | Arch::Seq)
    }
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::XPix2pix,
        Method::XSo,
        Method::XFork,
        Method::XSeq,
        Method::HPix2pix,
        Method::HSo,
        Method::HFork,
        Method::HSeq,
        Method::HRegions,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::XPix2pix => "x-pix2pix",
            Method::XSo => "x-so",
            Method::XFork => "x-fork",
            Method::XSeq => "x-seq",
            Method::HPix2pix => "h-pix2pix",
            Method::HSo => "h-so",
            Method::HFork => "h-fork",
            Method::HSeq => "h-seq",
            Method::HRegions => "h-regions",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }

    /// Conditioning input is the homography-warped aerial image.
    pub fn uses_homography(&self) -> bool {
        matches!(
            self,
            Method::HPix2pix | Method::HSo | Method::HFork | Method::HSeq | Method::HRegions
        )
    }

    pub fn arch(&self) -> Arch {
        match self {
            Method::XPix2pix | Method::HPix2pix => Arch::Pix2pix,
            Method::XSo | Method::HSo => Arch::So,
            Method::XFork | Method::HFork => Arch::Fork,
            Method::XSeq | Method::HSeq => Arch::Seq,
            Method::HRegions => Arch::Regions,
        }
    }

    /// Produces a segmentation map next to the image.
    pub fn has_segmentation(&self) -> bool {
        self.arch().needs_seg()
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Aerial to ground.
    A2g,
    /// Ground to aerial.
    G2a,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionsConfig {
    pub inpaint_epochs: usize,
    pub car_epochs: usize,
    pub realism_epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inpaint_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub car_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub realism_steps: Option<usize>,
    pub realism_weights: LossWeights,
    /// Skip connections in the realism generator, which has to copy most
    /// of its input through.
    pub realism_skips: bool,
    /// Realism generator refines its input instead of redrawing it.
    pub realism_residual: bool,
    pub realism_learning_rate: f64,
    /// Seam band width; scaled from the frame size when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_width: Option<usize>,
}

impl Default for RegionsConfig {
    fn default() -> Self {
        Self {
            inpaint_epochs: 20,
            car_epochs: 1,
            realism_epochs: 5,
            inpaint_steps: None,
            car_steps: None,
            realism_steps: None,
            realism_weights: LossWeights::REALISM,
            realism_skips: true,
            realism_residual: true,
            realism_learning_rate: 2e-5,
            band_width: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub direction: Direction,
    pub epochs: usize,
    /// Fixed step budget; overrides `epochs` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Real-label target for the discriminator.
    pub smooth: f64,
    pub weights: LossWeights,
    /// Multiplier on the adversarial weight of the stacked-output methods.
    pub so_adv_scale: f64,
    pub seed: u64,
    pub resolution: usize,
    pub base_width: usize,
    pub disc_base_width: usize,
    pub block_trim: usize,
    pub skip_connections: bool,
    pub augment: bool,
    pub log_every: usize,
    pub regions: RegionsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::XPix2pix,
            direction: Direction::A2g,
            epochs: 35,
            steps: None,
            batch_size: 1,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            smooth: crate::losses::REAL_LABEL,
            weights: LossWeights::PIX2PIX,
            so_adv_scale: 1.0,
            seed: 0,
            resolution: 256,
            base_width: 64,
            disc_base_width: 64,
            block_trim: 0,
            skip_connections: false,
            augment: true,
            log_every: 1,
            regions: RegionsConfig::default(),
        }
    }
}

/// Named configurations for the desk-scale experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Eight samples at 64 px, no augmentation, 200 steps.
    Overfit8,
    Desk64,
    Desk256,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Preset> {
        match s {
            "overfit8" => Ok(Preset::Overfit8),
            "desk64" => Ok(Preset::Desk64),
            "desk256" => Ok(Preset::Desk256),
            _ => Err(Error::Config(format!(
                "unknown preset {s:?} (expected overfit8, desk64 or desk256)"
            ))),
        }
    }

    pub fn config(&self, method: Method) -> TrainConfig {
        let base = TrainConfig {
            method,
            ..Default::default()
        };
        match self {
            Preset::Overfit8 => TrainConfig {
                resolution: 64,
                epochs: 100,
                steps: Some(200),
                batch_size: 8,
                base_width: 32,
                disc_base_width: 32,
                augment: false,
                log_every: 10,
                // ten steps per subtask epoch
                regions: RegionsConfig {
                    inpaint_steps: Some(200),
                    car_steps: Some(10),
                    realism_steps: Some(50),
                    ..Default::default()
                },
                ..base
            },
            Preset::Desk64 => TrainConfig {
                resolution: 64,
                epochs: 100,
                steps: Some(600),
                batch_size: 8,
                base_width: 32,
                disc_base_width: 32,
                log_every: 20,
                ..base
            },
            Preset::Desk256 => TrainConfig {
                resolution: 256,
                epochs: 35,
                steps: Some(600),
                batch_size: 4,
                base_width: 16,
                disc_base_width: 16,
                log_every: 20,
                ..base
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.method.uses_homography() && self.direction != Direction::A2g {
            return bad(format!(
                "{} needs direction a2g: the homography input exists only aerial to ground",
                self.method
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, lr) in [
            ("learning_rate", self.learning_rate),
            ("regions.realism_learning_rate", self.regions.realism_learning_rate),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.smooth > 0.0 && self.smooth <= 1.0) {
            return bad(format!("smooth must be in (0, 1], got {}", self.smooth));
        }
        if !(self.so_adv_scale >= 0.0) {
            return bad(format!("so_adv_scale must be >= 0, got {}", self.so_adv_scale));
        }
        if self.steps == Some(0) || (self.steps.is_none() && self.epochs == 0) {
            return bad("training length must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        self.weights.validate()?;
        self.regions.realism_weights.validate()?;
        self.generator_spec(3, 3).validate()?;
        self.discriminator_spec(6).validate()?;
        Ok(())
    }

    pub fn generator_spec(&self, in_channels: usize, out_channels: usize) -> GeneratorSpec {
        GeneratorSpec {
            block_trim: self.block_trim,
            skip_connections: self.skip_connections,
            ..GeneratorSpec::new(in_channels, out_channels, self.resolution).with_base_width(self.base_width)
        }
    }

    pub fn discriminator_spec(&self, in_channels: usize) -> DiscriminatorSpec {
        DiscriminatorSpec::new(in_channels, self.resolution).with_base_width(self.disc_base_width)
    }

    /// Steps for `n` training samples.
    pub fn total_steps(&self, n: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * n.div_ceil(self.batch_size))
    }

    pub fn parse_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    /// Applies `key=value` (dotted keys reach nested tables). Values are
    /// read as TOML literals, falling back to plain strings.
    pub fn apply_override(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut doc;
        for (i, p) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override key {key:?} does not name a table")))?;
            if i + 1 == parts.len() {
                table.insert(p.to_string(), value.clone());
                break;
            }
            node = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        doc.try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override {key}: {}", e.message())))
    }

    /// Hash of everything that shapes the networks and data views.
    pub fn fingerprint(&self) -> String {
        let mut shape = self.clone();
        shape.epochs = 0;
        shape.steps = None;
        shape.log_every = 1;
        shape.regions.inpaint_epochs = 0;
        shape.regions.car_epochs = 0;
        shape.regions.realism_epochs = 0;
        shape.regions.inpaint_steps = None;
        shape.regions.car_steps = None;
        shape.regions.realism_steps = None;
        let digest = Sha256::digest(serde_json::to_vec(&shape).expect("config serializes"));
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
