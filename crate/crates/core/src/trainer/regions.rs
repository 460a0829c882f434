//! H-Regions: an inpainting network for the upper half, a car network for
//! the lower strip, compositing with the warped image, then a realism pass.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde_json::json;

use super::config::{Arch, Method, TrainConfig};
use super::derive_seed;
use super::model::{Model, PixelTerm};
use super::session::{load_checkpoint, run_to, write_resolved_config, Trainer};
use crate::dataman::PairedSample;
use crate::geometry::{composite_regions, make_region_masks, RegionLayout, RegionMaskSet};
use crate::losses::mask_tensor;
use crate::nets::{build_discriminator, build_generator, GeneratorSpec};
use crate::{Error, Image, Result};

pub const SUBTASKS: [&str; 3] = ["inpaint", "car", "realism"];
pub const SUBTASK_FILES: [&str; 3] = ["inpaint.safetensors", "car.safetensors", "realism.safetensors"];

/// Region masks for the configured resolution and band width.
pub fn region_masks(cfg: &TrainConfig) -> Result<RegionMaskSet> {
    let mut layout = RegionLayout::default_for(cfg.resolution);
    if let Some(b) = cfg.regions.band_width {
        layout.band_width = b;
    }
    make_region_masks(cfg.resolution, cfg.resolution, layout)
}

fn subtask_index(name: &str) -> Result<usize> {
    SUBTASKS
        .iter()
        .position(|s| *s == name)
        .ok_or_else(|| Error::Checkpoint(format!("unknown subtask {name:?}")))
}

/// Configuration a subtask network is trained with.
pub(crate) fn subtask_config(cfg: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let r = &cfg.regions;
    let mut c = cfg.clone();
    match subtask_index(name)? {
        0 => (c.epochs, c.steps) = (r.inpaint_epochs, r.inpaint_steps),
        1 => (c.epochs, c.steps) = (r.car_epochs, r.car_steps),
        _ => {
            (c.epochs, c.steps) = (r.realism_epochs, r.realism_steps);
            c.weights = r.realism_weights;
            c.skip_connections = r.realism_skips;
            c.learning_rate = r.realism_learning_rate;
        }
    }
    Ok(c)
}

/// Untrained network pair of a subtask; `cfg` is the subtask configuration.
pub(crate) fn build_subtask(cfg: &TrainConfig, name: &str, device: &Device) -> Result<Model> {
    if cfg.method != Method::HRegions {
        return Err(Error::Checkpoint(format!("subtask {name} under method {}", cfg.method)));
    }
    let k = subtask_index(name)? as u64;
    let spec = GeneratorSpec {
        residual: name == "realism" && cfg.regions.realism_residual,
        ..cfg.generator_spec(3, 3)
    };
    let g = build_generator(&spec, derive_seed(cfg.seed, k, 200), DType::F32, device)?;
    let d = build_discriminator(&cfg.discriminator_spec(6), derive_seed(cfg.seed, k, 201), DType::F32, device)?;
    Model::from_parts(cfg, Arch::Regions, vec![g], vec![d], device)
}

/// The three trained subtask networks.
pub struct RegionsModel {
    pub inpaint: Model,
    pub car: Model,
    pub realism: Model,
    pub masks: RegionMaskSet,
}

pub struct RegionsOutcome {
    pub model: RegionsModel,
    pub steps: [usize; 3],
    pub logs: [PathBuf; 3],
}

fn log_name(name: &str) -> String {
    format!("train_log_{name}.csv")
}

fn generate(model: &mut Model, inputs: &[Image]) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(8) {
        out.extend(model.infer(chunk)?.into_iter().map(|s| s.image));
    }
    Ok(out)
}

fn composites(inpaint: &mut Model, car: &mut Model, warped: &[Image], masks: &RegionMaskSet) -> Result<Vec<Image>> {
    let car_in: Vec<Image> = warped.iter().map(|w| w.masked(&masks.m2)).collect::<Result<_>>()?;
    let a = generate(inpaint, warped)?;
    let b = generate(car, &car_in)?;
    a.iter()
        .zip(&b)
        .zip(warped)
        .map(|((a, b), w)| composite_regions(a, b, w, masks))
        .collect()
}

fn warped_of(s: &PairedSample) -> Result<Image> {
    s.warped_aerial
        .clone()
        .ok_or_else(|| Error::Config(format!("h-regions needs the warped aerial image of sample {}", s.id)))
}

/// Trains the three subtasks in order on samples that carry warped aerial
/// images. Finished subtasks found in `out_dir` are resumed.
pub fn train_h_regions(
    cfg: &TrainConfig,
    samples: Vec<PairedSample>,
    out_dir: &Path,
    device: &Device,
) -> Result<RegionsOutcome> {
    if cfg.method != Method::HRegions {
        return Err(Error::Config(format!("train_h_regions called for {}", cfg.method)));
    }
    cfg.validate()?;
    write_resolved_config(out_dir, cfg)?;
    let masks = region_masks(cfg)?;
    let n = samples.len();
    let mask_t = |m: &crate::Mask| mask_tensor(m, 1, DType::F32, device);

    let mut steps = [0; 3];
    let logs = SUBTASKS.map(|s| out_dir.join(log_name(s)));
    let mut run = |k: usize, pixel: PixelTerm, samples: Vec<PairedSample>, view: super::session::ViewFn| {
        let name = SUBTASKS[k];
        let c = subtask_config(cfg, name)?;
        let mut model = build_subtask(&c, name, device)?;
        model.pixel = pixel;
        let trainer = Trainer::with_view(model, samples, view)?;
        log::info!("h-regions: training the {name} subtask");
        let out = run_to(
            trainer,
            c.total_steps(n),
            &out_dir.join(SUBTASK_FILES[k]),
            &logs[k],
            json!({ "subtask": name }),
        )?;
        steps[k] = out.steps;
        Ok::<_, Error>(out.model)
    };

    let mut inpaint = run(
        0,
        PixelTerm::Masked(mask_t(&masks.m1)?),
        samples.clone(),
        Box::new(|s| Ok((warped_of(s)?, s.ground.clone(), None))),
    )?;
    let m2 = masks.m2.clone();
    let mut car = run(
        1,
        PixelTerm::Masked(mask_t(&masks.m2)?),
        samples.clone(),
        Box::new(move |s| Ok((warped_of(s)?.masked(&m2)?, s.ground.masked(&m2)?, None))),
    )?;
    // the realism input is the composite, carried in the warped slot so
    // augmentation stays aligned with the ground image
    let warped: Vec<Image> = samples.iter().map(warped_of).collect::<Result<_>>()?;
    let comps = composites(&mut inpaint, &mut car, &warped, &masks)?;
    let stage3: Vec<PairedSample> = samples
        .into_iter()
        .zip(comps)
        .map(|(mut s, c)| {
            s.warped_aerial = Some(c);
            s
        })
        .collect();
    let realism = run(
        2,
        PixelTerm::InputOutside(mask_t(&masks.band)?),
        stage3,
        Box::new(|s| Ok((warped_of(s)?, s.ground.clone(), None))),
    )?;
    Ok(RegionsOutcome {
        model: RegionsModel {
            inpaint,
            car,
            realism,
            masks,
        },
        steps,
        logs,
    })
}

/// Loads the three subtask checkpoints from a run directory.
pub fn load_regions(dir: &Path, device: &Device) -> Result<RegionsModel> {
    let mut models = Vec::with_capacity(3);
    for (name, file) in SUBTASKS.iter().zip(SUBTASK_FILES) {
        let ck = load_checkpoint(&dir.join(file), device)?;
        if ck.meta["subtask"] != *name {
            return Err(Error::Checkpoint(format!("{file} does not hold the {name} subtask")));
        }
        models.push(ck.model);
    }
    let realism = models.pop().expect("three models");
    let car = models.pop().expect("three models");
    let inpaint = models.pop().expect("three models");
    let masks = region_masks(&realism.cfg)?;
    Ok(RegionsModel {
        inpaint,
        car,
        realism,
        masks,
    })
}

/// `(composite, refined)` for each warped aerial image.
pub fn synthesize_regions(model: &mut RegionsModel, warped: &[Image]) -> Result<Vec<(Image, Image)>> {
    let res = model.realism.cfg.resolution;
    if let Some(w) = warped.iter().find(|w| w.dims() != (3, res, res)) {
        return Err(Error::Shape(format!("input is {:?}, expected 3 x {res} x {res}", w.dims())));
    }
    let comps = composites(&mut model.inpaint, &mut model.car, warped, &model.masks)?;
    let refined = generate(&mut model.realism, &comps)?;
    Ok(comps.into_iter().zip(refined).collect())
}
