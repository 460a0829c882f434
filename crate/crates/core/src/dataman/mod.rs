//! Paired aerial/ground datasets: manifest ingestion, preprocessing,
//! augmentation and the procedural scene generator.

mod manifest;
mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use manifest::{
    load_dataset, write_dataset, DatasetManifest, LoadedDataset, ManifestRecord, Preprocess,
    SkippedSample, Split,
};
pub use synth::{
    synth_correspondences, synth_dataset, synth_homography, synth_scene, Scene, SceneClass,
    SCENE_CLASSES,
};

use crate::image::Image;
use crate::{Error, Result};

/// Ordered class palette used to color segmentation maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaletteSpec {
    classes: Vec<(String, [u8; 3])>,
}

impl Default for PaletteSpec {
    fn default() -> Self {
        let classes = [
            ("road", [128, 64, 128]),
            ("sidewalk", [244, 35, 232]),
            ("building", [70, 70, 70]),
            ("vegetation", [107, 142, 35]),
            ("terrain", [152, 251, 152]),
            ("sky", [70, 130, 180]),
            ("car", [0, 0, 142]),
            ("void", [0, 0, 0]),
        ];
        Self {
            classes: classes
                .into_iter()
                .map(|(n, c)| (n.to_string(), c))
                .collect(),
        }
    }
}

impl PaletteSpec {
    pub fn new(classes: Vec<(String, [u8; 3])>) -> Result<Self> {
        for i in 0..classes.len() {
            for j in i + 1..classes.len() {
                if classes[i].1 == classes[j].1 {
                    return Err(Error::Config(format!(
                        "palette classes {:?} and {:?} share color {:?}",
                        classes[i].0, classes[j].0, classes[i].1
                    )));
                }
            }
        }
        Ok(Self { classes })
    }

    pub fn classes(&self) -> &[(String, [u8; 3])] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|(n, _)| n == name)
    }

    pub fn color(&self, index: usize) -> [u8; 3] {
        self.classes[index].1
    }

    /// Class color in the normalized `[-1, 1]` range.
    pub fn color_normalized(&self, index: usize) -> [f32; 3] {
        self.color(index).map(Image::from_u8)
    }

    pub fn contains_color(&self, rgb: [u8; 3]) -> bool {
        self.classes.iter().any(|(_, c)| *c == rgb)
    }

    /// True when every pixel of `seg` is a palette color.
    pub fn covers(&self, seg: &Image) -> bool {
        (0..seg.height()).all(|y| {
            (0..seg.width()).all(|x| self.contains_color(seg.rgb(y, x).map(Image::to_u8)))
        })
    }

    /// `palette.txt` format: one `name R G B` line per class.
    pub fn parse(text: &str) -> Result<Self> {
        let mut classes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::Config(format!(
                    "palette line {}: expected `name R G B`",
                    i + 1
                )));
            }
            let mut rgb = [0u8; 3];
            for (k, p) in parts[1..].iter().enumerate() {
                rgb[k] = p
                    .parse()
                    .map_err(|e| Error::Config(format!("palette line {}: {p:?}: {e}", i + 1)))?;
            }
            classes.push((parts[0].to_string(), rgb));
        }
        PaletteSpec::new(classes)
    }

    pub fn to_text(&self) -> String {
        self.classes
            .iter()
            .map(|(n, c)| format!("{n} {} {} {}\n", c[0], c[1], c[2]))
            .collect()
    }
}

/// One aligned aerial/ground pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub aerial: Image,
    pub ground: Image,
    pub ground_seg: Image,
    /// Aerial-view segmentation; needed when synthesizing toward the aerial
    /// view with a segmentation head.
    pub aerial_seg: Option<Image>,
    pub warped_aerial: Option<Image>,
    /// Scene category, when known; used to train the scene classifier.
    pub label: Option<usize>,
}

impl PairedSample {
    pub fn images(&self) -> impl Iterator<Item = &Image> {
        [Some(&self.aerial), Some(&self.ground), Some(&self.ground_seg)]
            .into_iter()
            .chain([self.aerial_seg.as_ref(), self.warped_aerial.as_ref()])
            .flatten()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.aerial.height(), self.aerial.width())
    }

    /// Checks shared dimensions and the `[-1, 1]` value range.
    pub fn validate(&self) -> Result<()> {
        for img in self.images() {
            self.aerial.ensure_same_shape(img, &format!("sample {}", self.id))?;
            if !img.in_unit_range() {
                return Err(Error::Shape(format!(
                    "sample {} has values outside [-1, 1]",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn validate_palette(&self, palette: &PaletteSpec) -> Result<()> {
        for seg in [Some(&self.ground_seg), self.aerial_seg.as_ref()].into_iter().flatten() {
            if !palette.covers(seg) {
                return Err(Error::Shape(format!(
                    "sample {} has segmentation colors outside the palette",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Centered `crop x crop` window resized to `out x out`.
pub fn center_crop_resize(img: &Image, crop: usize, out: usize) -> Result<Image> {
    if crop == 0 || crop > img.height() || crop > img.width() {
        return Err(Error::Shape(format!(
            "crop {crop} does not fit a {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let top = (img.height() - crop) / 2;
    let left = (img.width() - crop) / 2;
    Ok(img.crop(top, left, crop, crop)?.resize_bilinear(out, out))
}

/// Keeps the elements at indices `0, k, 2k, ...`.
pub fn subsample_every_kth<T: Clone>(items: &[T], k: usize) -> Result<Vec<T>> {
    if k < 1 {
        return Err(Error::Config("subsample stride must be at least 1".into()));
    }
    Ok(items.iter().step_by(k).cloned().collect())
}

/// Random jitter and horizontal flip settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Pixels added before the random crop back to the original size.
    pub jitter: usize,
    pub flip_prob: f64,
}

impl AugmentConfig {
    /// 30 px of jitter at 256 px, scaled with the frame size.
    pub fn for_size(size: usize) -> Self {
        Self {
            jitter: (30 * size + 128) / 256,
            flip_prob: 0.5,
        }
    }
}

/// Concrete parameters of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub jitter: usize,
    pub offset_y: usize,
    pub offset_x: usize,
    pub flip: bool,
}

impl AugmentParams {
    pub fn draw(cfg: &AugmentConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            jitter: cfg.jitter,
            offset_y: rng.random_range(0..=cfg.jitter),
            offset_x: rng.random_range(0..=cfg.jitter),
            flip: rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)),
        }
    }
}

fn jitter_image(img: &Image, p: &AugmentParams, label_map: bool) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    let mut out = if p.jitter == 0 {
        img.clone()
    } else {
        let big = if label_map {
            img.resize_nearest(h + p.jitter, w + p.jitter)
        } else {
            img.resize_bilinear(h + p.jitter, w + p.jitter)
        };
        big.crop(p.offset_y, p.offset_x, h, w)?
    };
    if p.flip {
        out = out.flip_horizontal();
    }
    Ok(out)
}

/// Applies one set of jitter/flip parameters to every image of the pair.
pub fn apply_augment(sample: &PairedSample, p: &AugmentParams) -> Result<PairedSample> {
    if p.offset_x > p.jitter || p.offset_y > p.jitter {
        return Err(Error::Config(format!("crop offset outside jitter range: {p:?}")));
    }
    Ok(PairedSample {
        id: sample.id.clone(),
        aerial: jitter_image(&sample.aerial, p, false)?,
        ground: jitter_image(&sample.ground, p, false)?,
        ground_seg: jitter_image(&sample.ground_seg, p, true)?,
        aerial_seg: sample
            .aerial_seg
            .as_ref()
            .map(|s| jitter_image(s, p, true))
            .transpose()?,
        warped_aerial: sample
            .warped_aerial
            .as_ref()
            .map(|s| jitter_image(s, p, false))
            .transpose()?,
        label: sample.label,
    })
}

/// Seeded random jitter and horizontal flip.
pub fn augment(sample: &PairedSample, seed: u64, cfg: &AugmentConfig) -> Result<PairedSample> {
    apply_augment(sample, &AugmentParams::draw(cfg, seed))
}
