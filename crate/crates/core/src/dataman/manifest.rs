use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{center_crop_resize, subsample_every_kth, PaletteSpec, PairedSample};
use crate::geometry::Homography;
use crate::image::Image;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Preprocessing directives applied at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    /// Output edge length of every image.
    #[serde(default = "default_resize")]
    pub resize: usize,
    /// Center crop applied to aerial images before resizing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<usize>,
    /// Keep only the leftmost quarter of ground images (panoramas).
    #[serde(default)]
    pub panorama_quarter: bool,
    /// Keep every k-th record of each split, in manifest order.
    #[serde(default = "default_stride")]
    pub subsample: usize,
}

fn default_resize() -> usize {
    256
}

fn default_stride() -> usize {
    1
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            resize: default_resize(),
            crop: None,
            panorama_quarter: false,
            subsample: default_stride(),
        }
    }
}

/// One pair on disk. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub aerial: String,
    pub ground: String,
    pub seg: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aerial_seg: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warped: Option<String>,
    /// Per-sample homography file overriding the dataset-wide one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default)]
    pub preprocess: Preprocess,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette: Option<String>,
    /// Dataset-wide aerial-to-ground homography file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<String>,
    #[serde(default, rename = "sample")]
    pub samples: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        DatasetManifest::parse(&std::fs::read_to_string(path)?)
    }

    /// Rejects ids that repeat, within or across splits.
    pub fn check_splits(&self) -> Result<()> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for r in &self.samples {
            if let Some(prev) = seen.insert(&r.id, r.split) {
                return Err(Error::Config(if prev == r.split {
                    format!("sample id {:?} appears twice", r.id)
                } else {
                    format!("sample id {:?} appears in both train and test", r.id)
                }));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedSample {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
    pub skipped: Vec<SkippedSample>,
    pub palette: PaletteSpec,
    pub homography: Option<Homography>,
    /// Per-sample homography overrides keyed by sample id.
    pub overrides: BTreeMap<String, Homography>,
    pub preprocess: Preprocess,
}

impl LoadedDataset {
    pub fn split(&self, split: Split) -> &[PairedSample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn homography_for(&self, id: &str) -> Option<&Homography> {
        self.overrides.get(id).or(self.homography.as_ref())
    }
}

/// Center-crops to a square (if needed) and resizes.
fn square_resize(img: &Image, out: usize, label_map: bool) -> Result<Image> {
    let side = img.height().min(img.width());
    let top = (img.height() - side) / 2;
    let left = (img.width() - side) / 2;
    let sq = if side == img.height() && side == img.width() {
        img.clone()
    } else {
        img.crop(top, left, side, side)?
    };
    Ok(if label_map {
        sq.resize_nearest(out, out)
    } else {
        sq.resize_bilinear(out, out)
    })
}

fn prep_aerial(img: &Image, p: &Preprocess, label_map: bool) -> Result<Image> {
    match p.crop {
        Some(crop) if label_map => {
            let side = crop;
            if side > img.height() || side > img.width() {
                return Err(Error::Shape(format!("crop {crop} larger than {}x{}", img.height(), img.width())));
            }
            let cropped = img.crop((img.height() - side) / 2, (img.width() - side) / 2, side, side)?;
            Ok(cropped.resize_nearest(p.resize, p.resize))
        }
        Some(crop) => center_crop_resize(img, crop, p.resize),
        None => square_resize(img, p.resize, label_map),
    }
}

fn prep_ground(img: &Image, p: &Preprocess, label_map: bool) -> Result<Image> {
    let img = if p.panorama_quarter {
        img.crop(0, 0, img.height(), (img.width() / 4).max(1))?
    } else {
        img.clone()
    };
    square_resize(&img, p.resize, label_map)
}

fn check_same_raw(a: &Image, b: &Image, what: &str) -> std::result::Result<(), String> {
    if a.height() == b.height() && a.width() == b.width() {
        Ok(())
    } else {
        Err(format!(
            "{what}: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ))
    }
}

fn load_record(root: &Path, r: &ManifestRecord, p: &Preprocess) -> Result<std::result::Result<PairedSample, String>> {
    let aerial = Image::load_png(&root.join(&r.aerial))?;
    let ground = Image::load_png(&root.join(&r.ground))?;
    let seg = Image::load_png(&root.join(&r.seg))?;
    let aerial_seg = r
        .aerial_seg
        .as_ref()
        .map(|f| Image::load_png(&root.join(f)))
        .transpose()?;
    let warped = r
        .warped
        .as_ref()
        .map(|f| Image::load_png(&root.join(f)))
        .transpose()?;

    let mut checks = vec![check_same_raw(&ground, &seg, "ground/seg size mismatch")];
    if let Some(s) = &aerial_seg {
        checks.push(check_same_raw(&aerial, s, "aerial/aerial_seg size mismatch"));
    }
    if let Some(w) = &warped {
        checks.push(check_same_raw(&ground, w, "ground/warped size mismatch"));
    }
    if let Some(Err(reason)) = checks.into_iter().find(|c| c.is_err()) {
        return Ok(Err(reason));
    }

    Ok(Ok(PairedSample {
        id: r.id.clone(),
        aerial: prep_aerial(&aerial, p, false)?,
        ground: prep_ground(&ground, p, false)?,
        ground_seg: prep_ground(&seg, p, true)?,
        aerial_seg: aerial_seg.map(|s| prep_aerial(&s, p, true)).transpose()?,
        warped_aerial: warped.map(|w| prep_ground(&w, p, false)).transpose()?,
        label: r.label,
    }))
}

/// Loads and preprocesses every pair referenced by the manifest at `path`.
///
/// A missing file aborts the load. Pairs whose images disagree in size are
/// skipped with a warning and listed in [`LoadedDataset::skipped`]. Each
/// split is returned sorted by id.
pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::load(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.check_splits()?;
    let p = &manifest.preprocess;
    if p.resize == 0 {
        return Err(Error::Config("resize must be positive".into()));
    }

    let mut referenced: Vec<PathBuf> = Vec::new();
    for r in &manifest.samples {
        referenced.extend([&r.aerial, &r.ground, &r.seg].map(|f| root.join(f)));
        for f in [&r.aerial_seg, &r.warped, &r.homography].into_iter().flatten() {
            referenced.push(root.join(f));
        }
    }
    referenced.extend(manifest.palette.iter().map(|f| root.join(f)));
    referenced.extend(manifest.homography.iter().map(|f| root.join(f)));
    if let Some(missing) = referenced.into_iter().find(|f| !f.exists()) {
        return Err(Error::MissingFile(missing));
    }

    let palette = match &manifest.palette {
        Some(f) => PaletteSpec::parse(&std::fs::read_to_string(root.join(f))?)?,
        None => PaletteSpec::default(),
    };
    let homography = manifest
        .homography
        .as_ref()
        .map(|f| Homography::load(&root.join(f)))
        .transpose()?;

    let mut out = LoadedDataset {
        train: Vec::new(),
        test: Vec::new(),
        skipped: Vec::new(),
        palette,
        homography,
        overrides: BTreeMap::new(),
        preprocess: p.clone(),
    };
    for split in [Split::Train, Split::Test] {
        let records: Vec<&ManifestRecord> = manifest.samples.iter().filter(|r| r.split == split).collect();
        for r in subsample_every_kth(&records, p.subsample)? {
            match load_record(&root, r, p)? {
                Ok(sample) => {
                    if let Some(f) = &r.homography {
                        out.overrides.insert(r.id.clone(), Homography::load(&root.join(f))?);
                    }
                    match split {
                        Split::Train => out.train.push(sample),
                        Split::Test => out.test.push(sample),
                    }
                }
                Err(reason) => {
                    log::warn!("skipping sample {}: {reason}", r.id);
                    out.skipped.push(SkippedSample {
                        id: r.id.clone(),
                        reason,
                    });
                }
            }
        }
    }
    out.train.sort_by(|a, b| a.id.cmp(&b.id));
    out.test.sort_by(|a, b| a.id.cmp(&b.id));
    if !out.skipped.is_empty() {
        log::warn!("{} sample(s) skipped", out.skipped.len());
    }
    Ok(out)
}

/// Writes samples as 8-bit PNGs plus `manifest.toml` and `palette.txt`
/// (and `homography.txt` when given). Returns the manifest path.
pub fn write_dataset(
    dir: &Path,
    samples: &[(PairedSample, Split)],
    palette: &PaletteSpec,
    homography: Option<&Homography>,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let size = samples.first().map_or(256, |(s, _)| s.aerial.height());
    let mut manifest = DatasetManifest {
        preprocess: Preprocess {
            resize: size,
            ..Preprocess::default()
        },
        palette: Some("palette.txt".into()),
        homography: homography.map(|_| "homography.txt".into()),
        samples: Vec::new(),
    };
    std::fs::write(dir.join("palette.txt"), palette.to_text())?;
    if let Some(h) = homography {
        h.save(&dir.join("homography.txt"))?;
    }
    for (s, split) in samples {
        let file = |sub: &str| format!("{sub}/{}.png", s.id);
        s.aerial.save_png(&dir.join(file("aerial")))?;
        s.ground.save_png(&dir.join(file("ground")))?;
        s.ground_seg.save_png(&dir.join(file("seg")))?;
        if let Some(a) = &s.aerial_seg {
            a.save_png(&dir.join(file("aerial_seg")))?;
        }
        if let Some(w) = &s.warped_aerial {
            w.save_png(&dir.join(file("warped")))?;
        }
        manifest.samples.push(ManifestRecord {
            id: s.id.clone(),
            aerial: file("aerial"),
            ground: file("ground"),
            seg: file("seg"),
            aerial_seg: s.aerial_seg.as_ref().map(|_| file("aerial_seg")),
            warped: s.warped_aerial.as_ref().map(|_| file("warped")),
            homography: None,
            label: s.label,
            split: *split,
        });
    }
    let path = dir.join("manifest.toml");
    std::fs::write(&path, manifest.to_text())?;
    Ok(path)
}
