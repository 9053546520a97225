//! Two-phase training driver: clDice/BCE blend, then topological fine-tuning.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentParams};
use super::checkpoint::{self, Model, Stamp};
use super::config::TrainConfig;
use super::data::Sample;
use super::predict::{predict, stack};
use crate::error::{Error, Result};
use crate::losses::{bce, training_loss};
use crate::metrics::{component_count, confusion, thin, Confusion};
use crate::optim::Adam;
use crate::tensor::{Tape, Var};
use crate::tiling::PatchGrid;
use crate::topology::topo_loss_items;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Main,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Main => "main",
            Phase::Finetune => "finetune",
        }
    }
}

/// Validation scores on whole held-out images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValScores {
    /// Dice over the pooled confusion of all validation images.
    pub dice: f64,
    /// Hard-skeleton clDice over pooled skeleton counts.
    pub cldice: f64,
    /// Mean absolute difference in 4-connected component counts.
    pub cc_error: f64,
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub val_cldice: f64,
    pub val_cc_error: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn scores(&self) -> ValScores {
        ValScores {
            dice: self.val_dice,
            cldice: self.val_cldice,
            cc_error: self.val_cc_error,
        }
    }
}

/// Training and validation material.
///
/// The split is by image: whole images are held out so that overlapping
/// training patches never leak into validation.
#[derive(Debug, Clone)]
pub struct Split {
    pub patches: Vec<Array2<f64>>,
    pub labels: Vec<Array2<bool>>,
    pub val: Vec<Sample>,
}

impl Split {
    pub fn new(samples: &[Sample], config: &TrainConfig) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Data(format!("need at least 2 images to hold one out, got {}", samples.len())));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ SPLIT_SALT));
        let n_val = ((samples.len() as f64 * config.val_fraction).round() as usize).clamp(1, samples.len() - 1);
        let (val_idx, train_idx) = order.split_at(n_val);
        let size = config.model.patch_size;
        let mut patches = Vec::new();
        let mut labels = Vec::new();
        for &i in train_idx {
            let s = &samples[i];
            if s.image.dim() != s.mask.dim() {
                return Err(Error::Data(format!("{}: image {:?} and mask {:?} differ", s.id, s.image.dim(), s.mask.dim())));
            }
            if s.image.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("{}: image contains non-finite pixels", s.id)));
            }
            let grid = PatchGrid::new(s.image.nrows(), s.image.ncols(), size, config.stride)?;
            patches.extend(grid.extract(s.image.view())?);
            let m = s.mask.mapv(|v| if v { 1.0 } else { 0.0 });
            labels.extend(grid.extract(m.view())?.into_iter().map(|p| p.mapv(|v| v >= 0.5)));
        }
        let mut val: Vec<Sample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
        val.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Self { patches, labels, val })
    }
}

// Keeps the split stream apart from the init and shuffle streams.
const SPLIT_SALT: u64 = 0x5eed_5917;

/// Scores a model on whole validation images.
pub fn validate(model: &Model, val: &[Sample]) -> Result<ValScores> {
    let mut pooled = Confusion::default();
    let (mut sp_in, mut sp_mass, mut sl_in, mut sl_mass) = (0usize, 0usize, 0usize, 0usize);
    let mut cc = 0.0;
    for s in val {
        let pred = predict(model, &s.image)?.mask;
        let fov = s.fov.as_ref().map(|f| f.view());
        let c = confusion(pred.view(), s.mask.view(), fov)?;
        pooled.tp += c.tp;
        pooled.tn += c.tn;
        pooled.fp += c.fp;
        pooled.fn_ += c.fn_;
        let (skp, skl) = (thin(&pred), thin(&s.mask));
        for ((&a, &b), (&p, &g)) in skp.iter().zip(&skl).zip(pred.iter().zip(&s.mask)) {
            sp_mass += usize::from(a);
            sp_in += usize::from(a && g);
            sl_mass += usize::from(b);
            sl_in += usize::from(b && p);
        }
        cc += (component_count(pred.view()) as f64 - component_count(s.mask.view()) as f64).abs();
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let (tprec, tsens) = (ratio(sp_in, sp_mass), ratio(sl_in, sl_mass));
    let cldice = if sp_mass + sl_mass == 0 {
        1.0
    } else if tprec + tsens == 0.0 {
        0.0
    } else {
        2.0 * tprec * tsens / (tprec + tsens)
    };
    Ok(ValScores {
        dice: pooled.dice(),
        cldice,
        cc_error: if val.is_empty() { 0.0 } else { cc / val.len() as f64 },
    })
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-on-validation model of the last phase that ran.
    pub model: Model,
    pub best: EpochRecord,
    /// Best record of the main phase, if it ran.
    pub main_best: Option<EpochRecord>,
    pub curve: Vec<EpochRecord>,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub curve_path: PathBuf,
}

pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const CURVE_CSV: &str = "curve.csv";

/// Runs the main phase for `epochs_main` epochs and then fine-tunes from its
/// best checkpoint for `epochs_finetune` epochs. Checkpoints and the curve go
/// to `out_dir`.
pub fn train(config: &TrainConfig, samples: &[Sample], out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let split = Split::new(samples, config)?;
    let model = Model::new(config.model.clone(), config.seed)?;
    let mut driver = Driver::new(config, out_dir)?;
    let main = driver.run(Phase::Main, model, &split)?;
    let main_best = main.1.clone();
    if config.epochs_finetune == 0 {
        return driver.finish(main, Some(main_best));
    }
    let tuned = driver.run(Phase::Finetune, main.0, &split)?;
    driver.finish(tuned, Some(main_best))
}

/// Fine-tunes an already trained model.
pub fn finetune(config: &TrainConfig, model: Model, samples: &[Sample], out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    if model.config() != &config.model {
        return Err(Error::Config("checkpoint architecture differs from the configured model".into()));
    }
    let split = Split::new(samples, config)?;
    let mut driver = Driver::new(config, out_dir)?;
    let tuned = driver.run(Phase::Finetune, model, &split)?;
    driver.finish(tuned, None)
}

struct Driver<'a> {
    config: &'a TrainConfig,
    out_dir: PathBuf,
    curve: Vec<EpochRecord>,
    last_good: Option<PathBuf>,
}

impl<'a> Driver<'a> {
    fn new(config: &'a TrainConfig, out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(Self {
            config,
            out_dir: out_dir.to_path_buf(),
            curve: Vec::new(),
            last_good: None,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn finish(self, (model, best): (Model, EpochRecord), main_best: Option<EpochRecord>) -> Result<TrainOutcome> {
        let curve_path = self.path(CURVE_CSV);
        write_curve(&curve_path, &self.curve)?;
        Ok(TrainOutcome {
            model,
            best,
            main_best,
            best_path: self.path(BEST_CKPT),
            last_path: self.path(LAST_CKPT),
            curve_path,
            curve: self.curve,
        })
    }

    /// Trains one phase and returns its best-on-validation model.
    ///
    /// The main phase ranks epochs by validation Dice; fine-tuning ranks by
    /// validation clDice, the quantity it is meant to protect. A phase with no
    /// epochs returns the input model scored as epoch 0.
    fn run(&mut self, phase: Phase, mut model: Model, split: &Split) -> Result<(Model, EpochRecord)> {
        let cfg = self.config;
        let epochs = match phase {
            Phase::Main => cfg.epochs_main,
            Phase::Finetune => cfg.epochs_finetune,
        };
        let start = Instant::now();
        let mut best: Option<(Model, EpochRecord)> = None;
        if epochs == 0 || split.patches.is_empty() {
            let s = validate(&model, &split.val)?;
            let rec = record(phase, 0, f64::NAN, s, start);
            self.curve.push(rec.clone());
            return Ok((model, rec));
        }
        let mut adam = Adam::new(cfg.adam());
        let aug = AugmentParams {
            sigma: cfg.noise_sigma,
            mode: cfg.noise_mode,
        };
        let phase_salt = match phase {
            Phase::Main => 0x6d61_696e,
            Phase::Finetune => 0x6674_756e,
        };
        for epoch in 1..=epochs {
            let t0 = Instant::now();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ phase_salt);
            rng.set_stream(epoch as u64);
            let mut order: Vec<usize> = (0..split.patches.len()).collect();
            order.shuffle(&mut rng);
            let (mut loss_sum, mut n_batches) = (0.0, 0usize);
            for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let mut xs = Vec::with_capacity(chunk.len());
                let mut ys = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let (x, y) = augment(&split.patches[i], &split.labels[i], rng.random(), aug);
                    xs.push(x);
                    ys.push(y.mapv(|v| if v { 1.0 } else { 0.0 }));
                }
                let items = match phase {
                    Phase::Main => Vec::new(),
                    Phase::Finetune => topo_subset(chunk.len(), cfg.topo_fraction, &mut rng),
                };
                let loss = self.step(phase, &mut model, &mut adam, &xs, &ys, &items)?;
                if !loss.is_finite() {
                    log::error!("{} epoch {epoch} step {step}: loss is {loss}", phase.as_str());
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        last_good: self.last_good.clone(),
                    });
                }
                loss_sum += loss;
                n_batches += 1;
            }
            let scores = validate(&model, &split.val)?;
            let rec = record(phase, epoch, loss_sum / n_batches as f64, scores, t0);
            log::info!(
                "{} epoch {epoch}: loss {:.4}, val dice {:.4}, cldice {:.4}, cc err {:.2} ({:.0}s)",
                phase.as_str(),
                rec.train_loss,
                rec.val_dice,
                rec.val_cldice,
                rec.val_cc_error,
                rec.seconds
            );
            self.curve.push(rec.clone());
            let stamp = Stamp {
                phase: phase.as_str().into(),
                epoch,
                val_dice: Some(scores.dice),
            };
            let last = self.path(LAST_CKPT);
            checkpoint::save(&last, &model, &stamp)?;
            self.last_good = Some(last);
            let better = match (&best, phase) {
                (None, _) => true,
                (Some((_, b)), Phase::Main) => scores.dice > b.val_dice,
                (Some((_, b)), Phase::Finetune) => scores.cldice > b.val_cldice,
            };
            if better {
                checkpoint::save(&self.path(BEST_CKPT), &model, &stamp)?;
                best = Some((model.clone(), rec.clone()));
            }
            if phase == Phase::Main && cfg.target_val_dice.is_some_and(|t| scores.dice >= t) {
                log::info!("target validation Dice reached after {epoch} epochs ({:.0}s)", start.elapsed().as_secs_f64());
                break;
            }
        }
        best.ok_or_else(|| Error::Internal("phase ran no epochs".into()))
    }

    fn step(
        &self,
        phase: Phase,
        model: &mut Model,
        adam: &mut Adam<f32>,
        xs: &[Array2<f64>],
        ys: &[Array2<f64>],
        items: &[usize],
    ) -> Result<f64> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(stack(&xs.iter().collect::<Vec<_>>()));
        let y = tape.constant(stack(&ys.iter().collect::<Vec<_>>()));
        let pred = model.net.forward(&mut tape, &model.store, x)?;
        let loss: Var = match phase {
            Phase::Main => training_loss(&mut tape, pred, y, &self.config.loss_weights())?,
            Phase::Finetune => {
                let t = topo_loss_items(&mut tape, pred, y, items)?;
                let b = bce(&mut tape, pred, y)?;
                tape.add(t, b)
            }
        };
        let value = tape.scalar(loss) as f64;
        if value.is_finite() {
            let grads = tape.backward(loss);
            adam.step(&mut model.store, &grads);
        }
        Ok(value)
    }
}

fn record(phase: Phase, epoch: usize, train_loss: f64, s: ValScores, t0: Instant) -> EpochRecord {
    EpochRecord {
        phase,
        epoch,
        train_loss,
        val_dice: s.dice,
        val_cldice: s.cldice,
        val_cc_error: s.cc_error,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// `ceil(fraction * n)` distinct batch items (at least one), sorted.
pub fn topo_subset(n: usize, fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

pub fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in curve {
        w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, LdcaSites};
    use crate::harness::synth::synth_generate;

    fn tiny() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            epochs_main: 1,
            epochs_finetune: 1,
            batch_size: 4,
            val_fraction: 0.25,
            stride: 16,
            model: BackboneConfig {
                depth: 2,
                base_width: 2,
                patch_size: 16,
                ldca_sites: LdcaSites::List(vec![[0, 1]]),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn samples(n: usize) -> Vec<Sample> {
        synth_generate(n, 32, 5)
            .unwrap()
            .into_iter()
            .map(|p| Sample {
                id: p.id,
                image: p.image,
                mask: p.mask,
                fov: None,
            })
            .collect()
    }

    #[test]
    fn split_holds_out_whole_images() {
        let data = samples(8);
        let s = Split::new(&data, &tiny()).unwrap();
        assert_eq!(s.val.len(), 2);
        // 32x32 with patch 16, stride 16: four patches per training image.
        assert_eq!(s.patches.len(), 6 * 4);
        assert_eq!(s.labels.len(), s.patches.len());
        let again = Split::new(&data, &tiny()).unwrap();
        assert_eq!(again.val.iter().map(|v| &v.id).collect::<Vec<_>>(), s.val.iter().map(|v| &v.id).collect::<Vec<_>>());
        assert!(Split::new(&data[..1], &tiny()).is_err());
    }

    #[test]
    fn topo_subset_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(topo_subset(4, 0.25, &mut rng).len(), 1);
        assert_eq!(topo_subset(1, 0.25, &mut rng), vec![0]);
        assert_eq!(topo_subset(8, 0.25, &mut rng).len(), 2);
        assert_eq!(topo_subset(5, 1.0, &mut rng), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn two_phase_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tiny(), &samples(4), dir.path()).unwrap();
        let phases: Vec<_> = out.curve.iter().map(|r| (r.phase, r.epoch)).collect();
        assert_eq!(phases, vec![(Phase::Main, 1), (Phase::Finetune, 1)]);
        assert!(out.best_path.exists() && out.last_path.exists());
        assert_eq!(read_curve(&out.curve_path).unwrap(), out.curve);
        let (_, manifest) = checkpoint::load(&out.best_path).unwrap();
        assert_eq!(manifest.phase, "finetune");
        assert!(out.curve.iter().all(|r| r.train_loss.is_finite() && (0.0..=1.0).contains(&r.val_dice)));
    }

    #[test]
    fn no_finetune_returns_main_phase_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs_finetune: 0,
            ..tiny()
        };
        let out = train(&cfg, &samples(4), dir.path()).unwrap();
        let (saved, manifest) = checkpoint::load(&out.best_path).unwrap();
        assert_eq!(manifest.phase, "main");
        for id in saved.store.ids() {
            assert_eq!(saved.store.value(id), out.model.store.value(id));
        }
        assert_eq!(out.main_best.as_ref(), Some(&out.best));
    }

    #[test]
    fn non_finite_input_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = samples(4);
        for s in &mut data {
            s.image[[3, 3]] = f64::NAN;
        }
        assert!(matches!(train(&tiny(), &data, dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn exploding_weights_abort_with_divergence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e37,
            epochs_main: 3,
            ..tiny()
        };
        match train(&cfg, &samples(4), dir.path()) {
            Err(Error::Diverged { epoch, last_good, .. }) => {
                assert_eq!(last_good.is_some(), epoch > 1);
                if let Some(p) = last_good {
                    checkpoint::load(&p).unwrap();
                }
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn finetune_rejects_other_architectures() {
        let dir = tempfile::tempdir().unwrap();
        let mut other = tiny().model;
        other.base_width = 4;
        let model = Model::new(other, 0).unwrap();
        assert!(matches!(finetune(&tiny(), model, &samples(4), dir.path()), Err(Error::Config(_))));
    }
}
