//! Data views, the step loop, logging and checkpoints.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Device;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::config::{Direction, Method, TrainConfig};
use super::derive_seed;
use super::model::{Batch, Model};
use crate::dataman::{augment, AugmentConfig, PairedSample};
use crate::geometry::{warp_image, Homography};
use crate::losses::LossReport;
use crate::nets::{read_container, write_container};
use crate::{Error, Image, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOG_FILE: &str = "train_log.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

// random stream ids
const STREAM_ORDER: u64 = 1;
const STREAM_STEP: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

/// `(condition, image target, segmentation target)` of a sample for a
/// method and direction.
pub fn views(sample: &PairedSample, method: Method, direction: Direction) -> Result<(Image, Image, Option<Image>)> {
    let missing = |what: &str| Error::Config(format!("sample {} has no {what}, which {method} needs", sample.id));
    match direction {
        Direction::A2g => {
            let cond = if method.uses_homography() {
                sample
                    .warped_aerial
                    .clone()
                    .ok_or_else(|| missing("homography-warped aerial image"))?
            } else {
                sample.aerial.clone()
            };
            Ok((cond, sample.ground.clone(), Some(sample.ground_seg.clone())))
        }
        Direction::G2a => {
            if method.uses_homography() {
                return Err(Error::Config(format!("{method} only runs aerial to ground")));
            }
            let seg = sample.aerial_seg.clone();
            if method.has_segmentation() && seg.is_none() {
                return Err(missing("aerial segmentation map"));
            }
            Ok((sample.ground.clone(), sample.aerial.clone(), seg))
        }
    }
}

/// Fills in the warped aerial image for homography methods. `homography`
/// returns the matrix for a sample id; existing warped images are kept.
pub fn prepare_samples(
    samples: &[PairedSample],
    method: Method,
    homography: &dyn Fn(&str) -> Option<Homography>,
) -> Result<Vec<PairedSample>> {
    samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if method.uses_homography() && s.warped_aerial.is_none() {
                let h = homography(&s.id).ok_or_else(|| {
                    Error::Config(format!(
                        "{method} needs a homography or a warped image for sample {}",
                        s.id
                    ))
                })?;
                let (h_px, w_px) = (s.ground.height(), s.ground.width());
                s.warped_aerial = Some(warp_image(&s.aerial, &h, h_px, w_px)?.0);
            }
            Ok(s)
        })
        .collect()
}

pub(crate) type ViewFn = Box<dyn Fn(&PairedSample) -> Result<(Image, Image, Option<Image>)>>;

/// Step loop over a fixed sample set.
pub struct Trainer {
    pub model: Model,
    pub step: usize,
    samples: Vec<PairedSample>,
    view: ViewFn,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, samples: Vec<PairedSample>, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg, device)?;
        let (method, direction) = (cfg.method, cfg.direction);
        Self::with_view(model, samples, Box::new(move |s| views(s, method, direction)))
    }

    pub(crate) fn with_view(model: Model, samples: Vec<PairedSample>, view: ViewFn) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        let res = model.cfg.resolution;
        for s in &samples {
            if s.size() != (res, res) {
                return Err(Error::Shape(format!(
                    "sample {} is {:?}, the configuration trains at {res} x {res}",
                    s.id,
                    s.size()
                )));
            }
        }
        Ok(Self {
            model,
            step: 0,
            samples,
            view,
        })
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.model.cfg
    }

    pub fn samples(&self) -> &[PairedSample] {
        &self.samples
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.cfg().batch_size)
    }

    /// Sample indices of a step's batch: a seeded shuffle per epoch cut
    /// into consecutive batches.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.samples.len();
        let spe = self.steps_per_epoch();
        let (epoch, k) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg().seed, epoch as u64, STREAM_ORDER));
        order.shuffle(&mut rng);
        let bs = self.cfg().batch_size;
        order[k * bs..((k + 1) * bs).min(n)].to_vec()
    }

    /// The augmented batch for `step`.
    pub fn batch(&self, step: usize) -> Result<Batch> {
        let cfg = self.cfg();
        let aug = AugmentConfig::for_size(cfg.resolution);
        let (mut cond, mut img, mut seg) = (Vec::new(), Vec::new(), Vec::new());
        for i in self.batch_indices(step) {
            let s = &self.samples[i];
            let s = if cfg.augment {
                let seed = derive_seed(cfg.seed ^ ((i as u64) << 32), step as u64, STREAM_AUGMENT);
                augment(s, seed, &aug)?
            } else {
                s.clone()
            };
            let (c, t, g) = (self.view)(&s)?;
            cond.push(c);
            img.push(t);
            seg.push(g);
        }
        let seg = if self.model.arch.needs_seg() {
            let seg: Option<Vec<Image>> = seg.into_iter().collect();
            Some(seg.ok_or_else(|| Error::Config("segmentation targets are missing".into()))?)
        } else {
            None
        };
        Batch::from_images(&cond, &img, seg.as_deref(), &self.model.device)
    }

    /// Runs one discriminator and one generator update.
    pub fn step(&mut self) -> Result<LossReport> {
        let batch = self.batch(self.step)?;
        let seed = derive_seed(self.cfg().seed, self.step as u64, STREAM_STEP);
        let report = self.model.train_step(&batch, seed).map_err(|e| match e {
            Error::Diverged(m) => Error::Diverged(format!("step {}: {m}", self.step + 1)),
            e => e,
        })?;
        self.step += 1;
        Ok(report)
    }
}

/// A model restored from disk with the number of steps it was trained.
pub struct Checkpoint {
    pub model: Model,
    pub step: usize,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, model: &Model, step: usize, extra: serde_json::Value) -> Result<()> {
    let mut meta = json!({
        "kind": "xview-model",
        "method": model.cfg.method.name(),
        "config": model.cfg.to_toml(),
        "fingerprint": model.cfg.fingerprint(),
        "networks": model.fingerprints(),
        "step": step,
    });
    if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), extra) {
        m.extend(extra);
    }
    write_container(path, &model.state(), &meta)
}

fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a checkpoint file, or `CHECKPOINT_FILE` inside a run directory.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let path = checkpoint_path(path);
    let c = read_container(&path, device)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if c.meta["kind"] != "xview-model" {
        return Err(bad("not a model checkpoint"));
    }
    let cfg = TrainConfig::parse_toml(c.meta["config"].as_str().ok_or_else(|| bad("no config"))?)?;
    if c.meta["fingerprint"] != cfg.fingerprint() {
        return Err(bad("configuration fingerprint does not match"));
    }
    let step = c.meta["step"].as_u64().ok_or_else(|| bad("no step count"))? as usize;
    let mut model = match c.meta["subtask"].as_str() {
        Some(name) => super::regions::build_subtask(&cfg, name, device)?,
        None => Model::new(&cfg, device)?,
    };
    if c.meta["networks"] != json!(model.fingerprints()) {
        return Err(bad("network layout does not match"));
    }
    model.load_state(step, &|n| c.get(n))?;
    Ok(Checkpoint {
        model,
        step,
        meta: c.meta,
    })
}

/// Rows of a training log.
pub fn read_log(path: &Path) -> Result<Vec<(usize, LossReport)>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LossReport::CSV_HEADER) {
        return Err(Error::Config(format!("{} is not a training log", path.display())));
    }
    lines.filter(|l| !l.trim().is_empty()).map(LossReport::parse_csv_row).collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub steps: usize,
    /// Losses of the last step run in this call, if any.
    pub last: Option<LossReport>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub resumed_from: Option<usize>,
}

pub(crate) fn write_resolved_config(out_dir: &Path, cfg: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

/// Runs `trainer` to `total` steps, logging to `log` and saving to `ckpt`.
/// A compatible checkpoint at `ckpt` is resumed.
pub(crate) fn run_to(
    mut trainer: Trainer,
    total: usize,
    ckpt: &Path,
    log: &Path,
    extra_meta: serde_json::Value,
) -> Result<TrainOutcome> {
    let mut resumed_from = None;
    let mut rows = Vec::new();
    if ckpt.exists() {
        let c = read_container(ckpt, &trainer.model.device)?;
        if c.meta["fingerprint"] == trainer.cfg().fingerprint() && c.meta["networks"] == json!(trainer.model.fingerprints()) {
            let step = c.meta["step"].as_u64().unwrap_or(0) as usize;
            trainer.model.load_state(step, &|n| c.get(n))?;
            trainer.step = step;
            resumed_from = Some(step);
            if log.exists() {
                rows = read_log(log)?.into_iter().filter(|(s, _)| *s <= step).collect();
            }
            log::info!("resuming {} from step {step}", ckpt.display());
        } else {
            log::warn!("{} belongs to a different configuration; starting over", ckpt.display());
        }
    }
    let mut f = std::fs::File::create(log)?;
    writeln!(f, "{}", LossReport::CSV_HEADER)?;
    for (s, r) in &rows {
        writeln!(f, "{}", r.csv_row(*s))?;
    }
    let every = trainer.cfg().log_every;
    let mut last = None;
    while trainer.step < total {
        let r = trainer.step()?;
        let s = trainer.step;
        if s % every == 0 || s == total || s == 1 {
            writeln!(f, "{}", r.csv_row(s))?;
            log::debug!("step {s}/{total}: {}", r.csv_row(s));
        }
        last = Some(r);
    }
    f.flush()?;
    save_checkpoint(ckpt, &trainer.model, trainer.step, extra_meta)?;
    Ok(TrainOutcome {
        steps: trainer.step,
        model: trainer.model,
        last,
        checkpoint: ckpt.to_path_buf(),
        log: log.to_path_buf(),
        resumed_from,
    })
}

/// Trains a pix2pix-family method on prepared samples and writes the
/// checkpoint, log and resolved configuration to `out_dir`.
pub fn train(cfg: &TrainConfig, samples: Vec<PairedSample>, out_dir: &Path, device: &Device) -> Result<TrainOutcome> {
    cfg.validate()?;
    write_resolved_config(out_dir, cfg)?;
    let total = cfg.total_steps(samples.len());
    let trainer = Trainer::new(cfg, samples, device)?;
    run_to(
        trainer,
        total,
        &out_dir.join(CHECKPOINT_FILE),
        &out_dir.join(LOG_FILE),
        json!({}),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataman::synth_dataset;
    use crate::nets::Network;
    use crate::trainer::{param_digest, Preset};

    fn samples(n: usize) -> Vec<PairedSample> {
        synth_dataset(n, 5, 64, 0.0).unwrap().into_iter().map(|(s, _)| s).collect()
    }

    fn tiny(method: Method) -> TrainConfig {
        TrainConfig {
            base_width: 8,
            disc_base_width: 8,
            batch_size: 2,
            steps: Some(3),
            ..Preset::Overfit8.config(method)
        }
    }

    fn prepared(method: Method, n: usize) -> Vec<PairedSample> {
        let h = crate::dataman::synth_homography(64);
        prepare_samples(&samples(n), method, &|_| Some(h.clone())).unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = tiny(Method::XFork);
        let run = || {
            let mut t = Trainer::new(&cfg, samples(4), &Device::Cpu).unwrap();
            let r: Vec<f64> = (0..2).map(|_| t.step().unwrap().total).collect();
            (r, param_digest(&t.model.gens[0]), param_digest(&t.model.discs[0]))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn updates_alternate() {
        use rand::SeedableRng;
        let cfg = tiny(Method::XPix2pix);
        let t = Trainer::new(&cfg, samples(2), &Device::Cpu).unwrap();
        let batch = t.batch(0).unwrap();
        let mut m = t.model;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (g0, d0) = (param_digest(&m.gens[0]), param_digest(&m.discs[0]));
        let fakes = m.generate(&batch.cond, Some(&mut rng)).unwrap();
        let g_after_forward = param_digest(&m.gens[0]);
        m.d_step(&batch, &fakes, &mut rng).unwrap();
        let (g1, d1) = (param_digest(&m.gens[0]), param_digest(&m.discs[0]));
        assert_eq!(g1, g_after_forward, "a discriminator step must not touch the generator");
        assert_ne!(d1, d0);
        assert_ne!(g_after_forward, g0, "training forward updates batch-norm statistics");
        let obj = m.g_objective(&batch, &fakes, &mut rng).unwrap();
        let d_before = m.discs[0].state();
        m.apply_g(&obj).unwrap();
        assert_ne!(param_digest(&m.gens[0]), g1);
        // parameters untouched; only discriminator batch statistics may move
        let d_after = m.discs[0].state();
        for ((n, a), (_, b)) in d_before.iter().zip(&d_after) {
            if !n.starts_with("stats") {
                let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
                assert_eq!(diff, 0.0, "{n} changed in a generator step");
            }
        }
    }

    #[test]
    fn directions_swap_roles() {
        let s = &samples(1)[0];
        let (c, t, g) = views(s, Method::XFork, Direction::A2g).unwrap();
        assert_eq!((c, t, g.unwrap()), (s.aerial.clone(), s.ground.clone(), s.ground_seg.clone()));
        let (c, t, g) = views(s, Method::XFork, Direction::G2a).unwrap();
        assert_eq!(
            (c, t, g.unwrap()),
            (s.ground.clone(), s.aerial.clone(), s.aerial_seg.clone().unwrap())
        );
        assert!(views(s, Method::HFork, Direction::A2g).is_err());
        let p = prepared(Method::HFork, 1);
        let (c, _, _) = views(&p[0], Method::HFork, Direction::A2g).unwrap();
        assert_eq!(Some(c), p[0].warped_aerial.clone());
    }

    #[test]
    fn g2a_trains() {
        let cfg = TrainConfig {
            direction: Direction::G2a,
            ..tiny(Method::XSeq)
        };
        let mut t = Trainer::new(&cfg, samples(2), &Device::Cpu).unwrap();
        assert!(t.step().unwrap().total.is_finite());
    }

    #[test]
    fn fork_logs_segmentation_l1_from_the_start() {
        let mut t = Trainer::new(&tiny(Method::XFork), samples(2), &Device::Cpu).unwrap();
        let r = t.step().unwrap();
        assert!(r.l1_seg > 0.0 && r.l1_img > 0.0);
    }

    #[test]
    fn stacked_output_and_homography_variants_run() {
        for m in [Method::XSo, Method::HSo, Method::HPix2pix, Method::HSeq] {
            let mut t = Trainer::new(&tiny(m), prepared(m, 2), &Device::Cpu).unwrap();
            let r = t.step().unwrap();
            assert!(r.total.is_finite(), "{m}");
            if m.has_segmentation() {
                assert!(r.l1_seg > 0.0, "{m}");
            }
        }
    }

    #[test]
    fn seq_gradient_reaches_the_first_generator() {
        use rand::SeedableRng;
        let t = Trainer::new(&tiny(Method::XSeq), samples(2), &Device::Cpu).unwrap();
        let batch = t.batch(0).unwrap();
        let mut m = t.model;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fakes = m.generate(&batch.cond, Some(&mut rng)).unwrap();
        // only the second stage's pixel term
        let seg_l1 = crate::losses::l1_loss(fakes.seg.as_ref().unwrap(), batch.seg.as_ref().unwrap(), None).unwrap();
        let grads = seg_l1.backward().unwrap();
        let reached = m.gens[0]
            .named_params()
            .iter()
            .filter_map(|(_, v)| grads.get(v))
            .map(|g| g.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap())
            .sum::<f32>();
        assert!(reached > 0.0);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let cfg = TrainConfig {
            batch_size: 3,
            ..tiny(Method::XPix2pix)
        };
        let t = Trainer::new(&cfg, samples(7), &Device::Cpu).unwrap();
        assert_eq!(t.steps_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_indices(s)).collect();
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        assert_ne!(t.batch_indices(0), t.batch_indices(3));
    }

    #[test]
    fn train_writes_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(Method::XPix2pix);
        let out = train(&cfg, samples(2), dir.path(), &Device::Cpu).unwrap();
        assert_eq!(out.steps, 3);
        assert!(dir.path().join(RESOLVED_CONFIG_FILE).exists());
        let log = read_log(&out.log).unwrap();
        assert_eq!(log.last().unwrap().0, 3);
        let digest = param_digest(&out.model.gens[0]);
        let back = load_checkpoint(dir.path(), &Device::Cpu).unwrap();
        assert_eq!(back.step, 3);
        assert_eq!(param_digest(&back.model.gens[0]), digest);

        // extending the budget continues from step 3
        let longer = TrainConfig { steps: Some(5), ..cfg.clone() };
        let out2 = train(&longer, samples(2), dir.path(), &Device::Cpu).unwrap();
        assert_eq!(out2.resumed_from, Some(3));
        let log = read_log(&out2.log).unwrap();
        assert_eq!(log.last().unwrap().0, 5);

        // and matches an uninterrupted run
        let fresh = tempfile::tempdir().unwrap();
        let straight = train(&longer, samples(2), fresh.path(), &Device::Cpu).unwrap();
        assert_eq!(param_digest(&straight.model.gens[0]), param_digest(&out2.model.gens[0]));
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let cfg = TrainConfig {
            resolution: 128,
            ..tiny(Method::XPix2pix)
        };
        assert!(matches!(Trainer::new(&cfg, samples(1), &Device::Cpu), Err(Error::Shape(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = samples(2);
        data[0].ground.data_mut()[0] = f32::NAN;
        let cfg = TrainConfig {
            batch_size: 2,
            ..tiny(Method::XPix2pix)
        };
        let mut t = Trainer::new(&cfg, data, &Device::Cpu).unwrap();
        assert!(matches!(t.step(), Err(Error::Diverged(_))));
    }
}
