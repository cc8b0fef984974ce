//! Losses, affine augmentation, and the two training loops.
//!
//! Seed discipline: a run's master seed spawns four independent
//! ChaCha8 streams (0 init, 1 batch sampling, 2 augmentation,
//! 3 dropout), so every draw has a fixed position and runs reproduce
//! bit-identically at one thread.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::format_f64;
use crate::error::{CoreError, Result};
use crate::evalreport::mean_dice_present;
use crate::models::{
    assemble_channels, predict_labels, Architecture, Fcnn, FcnnSpec, InputMode, Model, UNet,
    UNetSpec,
};
use crate::nn::{Adam, Checkpoint, Element, Tape, Var};
use crate::seeding::sub_seed;
use crate::types::{Sample, SampleId, TissueClass};

/// Bounds for the augmentation draws. Angles are uniform in
/// (-bound, bound) degrees; a zero bound pins the angle to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub flip_probability: f64,
    pub rotation_deg: f64,
    pub shear_deg: f64,
}

impl Default for AugmentSpec {
    fn default() -> AugmentSpec {
        AugmentSpec {
            flip_probability: 0.5,
            rotation_deg: 5.0,
            shear_deg: 5.0,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(CoreError::config(format!(
                "flip probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        for (name, v) in [("rotation", self.rotation_deg), ("shear", self.shear_deg)] {
            if !(0.0..=5.0).contains(&v) {
                return Err(CoreError::config(format!(
                    "{name} bound {v} outside [0, 5] degrees"
                )));
            }
        }
        Ok(())
    }
}

/// Applies flip(rotate(shear(.))) about the image center to every
/// channel and the labels: bilinear for intensities, nearest for
/// labels. Out-of-bounds reads give 0 intensity and OtherTissue.
pub fn apply_affine(
    stack: &Array3<f32>,
    labels: &Array2<u8>,
    flip: bool,
    rotation_deg: f64,
    shear_deg: f64,
) -> (Array3<f32>, Array2<u8>) {
    let (channels, h, w) = stack.dim();
    debug_assert_eq!((h, w), labels.dim());
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let theta = rotation_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let shear_t = shear_deg.to_radians().tan();

    // Inverse map: undo flip, then rotation, then shear.
    let mut src = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let mut x = col as f64 - cx;
            let y = row as f64 - cy;
            if flip {
                x = -x;
            }
            let (rx, ry) = (x * cos_t + y * sin_t, -x * sin_t + y * cos_t);
            let sx = rx - shear_t * ry;
            src.push((sx + cx, ry + cy));
        }
    }

    let mut out = Array3::<f32>::zeros((channels, h, w));
    for ch in 0..channels {
        let plane = stack.index_axis(Axis(0), ch);
        let mut dest = out.index_axis_mut(Axis(0), ch);
        for row in 0..h {
            for col in 0..w {
                let (sx, sy) = src[row * w + col];
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let mut acc = 0.0f64;
                for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let yy = y0 + dy;
                        let xx = x0 + dx;
                        if yy >= 0.0 && yy < h as f64 && xx >= 0.0 && xx < w as f64 {
                            acc += wy * wx * plane[[yy as usize, xx as usize]] as f64;
                        }
                    }
                }
                dest[[row, col]] = acc as f32;
            }
        }
    }

    let fill = TissueClass::OtherTissue.code();
    let mut out_labels = Array2::<u8>::zeros((h, w));
    for row in 0..h {
        for col in 0..w {
            let (sx, sy) = src[row * w + col];
            let rx = sx.round();
            let ry = sy.round();
            out_labels[[row, col]] =
                if ry >= 0.0 && ry < h as f64 && rx >= 0.0 && rx < w as f64 {
                    labels[[ry as usize, rx as usize]]
                } else {
                    fill
                };
        }
    }
    (out, out_labels)
}

/// Draws flip, rotation, shear (in that order) and applies them.
pub fn augment(
    stack: &Array3<f32>,
    labels: &Array2<u8>,
    spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> (Array3<f32>, Array2<u8>) {
    let flip = rng.random::<f64>() < spec.flip_probability;
    let rot = draw_angle(rng, spec.rotation_deg);
    let shear = draw_angle(rng, spec.shear_deg);
    apply_affine(stack, labels, flip, rot, shear)
}

fn draw_angle(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..bound)
    } else {
        0.0
    }
}

/// (B, H, W) class codes to (B, K, H, W) one-hot.
pub fn one_hot<E: Element>(labels: &ArrayD<u8>, classes: usize) -> ArrayD<E> {
    let s = labels.shape();
    let (b, h, w) = (s[0], s[1], s[2]);
    let mut out = ArrayD::<E>::zeros(IxDyn(&[b, classes, h, w]));
    for bi in 0..b {
        for r in 0..h {
            for c in 0..w {
                out[[bi, labels[[bi, r, c]] as usize, r, c]] = E::one();
            }
        }
    }
    out
}

/// One-vs-rest +-1 targets for the margin loss: +1 at the true class.
pub fn margin_targets<E: Element>(labels: &[u8], classes: usize) -> ArrayD<E> {
    let mut out = ArrayD::<E>::zeros(IxDyn(&[labels.len(), classes]));
    out.fill(E::from_f64(-1.0));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l as usize]] = E::one();
    }
    out
}

/// Cross-entropy plus `dice_weight` times the soft Dice loss.
pub fn unet_loss<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    labels: &ArrayD<u8>,
    dice_weight: f64,
) -> Result<Var> {
    let ce = tape.cross_entropy(logits, labels)?;
    if dice_weight == 0.0 {
        return Ok(ce);
    }
    let classes = tape.value(logits).shape()[1];
    let probs = tape.softmax_channels(logits)?;
    let targets = one_hot::<E>(labels, classes);
    let dl = tape.soft_dice(probs, &targets)?;
    let weighted = tape.scale(dl, dice_weight);
    tape.add(ce, weighted)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub input_mode: InputMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    /// U-Net only; the FCNN never augments (per-pixel spectra carry no
    /// geometry to transform).
    pub augmentation: bool,
    pub augment: AugmentSpec,
    /// U-Net width knob; ignored by the FCNN.
    pub base_channels: usize,
    /// Weight of the soft Dice term next to cross-entropy (U-Net).
    pub dice_weight: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn unet(input_mode: InputMode) -> TrainConfig {
        TrainConfig {
            architecture: Architecture::UNet,
            input_mode,
            learning_rate: 1e-3,
            batch_size: 25,
            batches_per_epoch: 11,
            epochs: 1000,
            augmentation: true,
            augment: AugmentSpec::default(),
            base_channels: 16,
            dice_weight: 1.0,
            seed: 0,
        }
    }

    pub fn fcnn(input_mode: InputMode) -> TrainConfig {
        TrainConfig {
            architecture: Architecture::Fcnn,
            input_mode,
            learning_rate: 1e-4,
            batch_size: 1024,
            batches_per_epoch: 1000,
            epochs: 200,
            augmentation: false,
            augment: AugmentSpec::default(),
            base_channels: 16,
            dice_weight: 1.0,
            seed: 0,
        }
    }

    pub fn defaults(arch: Architecture, input_mode: InputMode) -> TrainConfig {
        match arch {
            Architecture::UNet => TrainConfig::unet(input_mode),
            Architecture::Fcnn => TrainConfig::fcnn(input_mode),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.architecture == Architecture::Fcnn && self.input_mode == InputMode::Us {
            return Err(CoreError::config(
                "fcnn cannot train on us input: a single intensity per pixel is not a spectrum",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CoreError::config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.epochs == 0 {
            return Err(CoreError::config(
                "batch_size, batches_per_epoch, and epochs must be positive",
            ));
        }
        if self.base_channels == 0 {
            return Err(CoreError::config("base_channels must be positive"));
        }
        if !(self.dice_weight.is_finite() && self.dice_weight >= 0.0) {
            return Err(CoreError::config(format!(
                "dice weight {} must be finite and non-negative",
                self.dice_weight
            )));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// U-Net: validation mean Dice. FCNN: validation pixel accuracy.
    /// `None` when there is no validation set.
    pub val_metric: Option<f64>,
}

/// Which samples fed one optimizer step. The FCNN draws pixels, so its
/// records list the distinct source images, sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub sample_ids: Vec<SampleId>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Epoch whose parameters are returned: argmax of the validation
    /// metric, or the final epoch when no validation set exists.
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub audit: Vec<BatchRecord>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        self.model.to_checkpoint(&[
            ("input_mode".to_string(), cfg.input_mode.name().to_string()),
            ("seed".to_string(), cfg.seed.to_string()),
            ("epoch".to_string(), self.best_epoch.to_string()),
        ])
    }
}

/// Writes the per-epoch log as `epoch,train_loss,val_metric` CSV.
pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::from("epoch,train_loss,val_metric\n");
    for e in log {
        let metric = e
            .val_metric
            .map(format_f64)
            .unwrap_or_else(|| "NA".to_string());
        text.push_str(&format!("{},{},{}\n", e.epoch, format_f64(e.train_loss), metric));
    }
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

/// Looks each id up in `samples`; every id must resolve.
pub fn resolve_ids<'a>(samples: &'a [Sample], ids: &[SampleId]) -> Result<Vec<&'a Sample>> {
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id.get(id.as_str()).copied().ok_or_else(|| {
                CoreError::invalid("split", format!("sample id '{id}' not in dataset"))
            })
        })
        .collect()
}

pub fn train(cfg: &TrainConfig, train: &[&Sample], val: &[&Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.architecture {
        Architecture::UNet => train_unet(cfg, train, val),
        Architecture::Fcnn => train_fcnn(cfg, train, val),
    }
}

fn check_uniform_dims(samples: &[&Sample]) -> Result<(usize, usize, usize)> {
    let first = samples[0];
    let dims = (first.pa.channels(), first.height(), first.width());
    for s in samples {
        if (s.pa.channels(), s.height(), s.width()) != dims {
            return Err(CoreError::invalid(
                "train",
                format!(
                    "sample '{}' has shape {}x{} with {} bands, expected {}x{} with {}",
                    s.id,
                    s.height(),
                    s.width(),
                    s.pa.channels(),
                    dims.1,
                    dims.2,
                    dims.0
                ),
            ));
        }
    }
    Ok(dims)
}

fn assemble3(sample: &Sample, mode: InputMode) -> Array3<f32> {
    let x: ArrayD<f32> = assemble_channels(sample, mode);
    x.into_dimensionality().expect("assembled stack is 3-d")
}

fn snapshot(params: &[crate::nn::Parameter<f32>]) -> Vec<ArrayD<f32>> {
    params.iter().map(|p| p.value.clone()).collect()
}

fn eval_mean_dice(model: &Model<f32>, samples: &[&Sample], mode: InputMode) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let pred = predict_labels(model, s, mode)?;
        sum += mean_dice_present(&s.labels, &pred)?;
    }
    Ok(sum / samples.len() as f64)
}

fn eval_pixel_accuracy(model: &Model<f32>, samples: &[&Sample], mode: InputMode) -> Result<f64> {
    let mut hits = 0u64;
    let mut total = 0u64;
    for s in samples {
        let pred = predict_labels(model, s, mode)?;
        hits += s
            .labels
            .values()
            .iter()
            .zip(pred.values().iter())
            .filter(|(a, b)| a == b)
            .count() as u64;
        total += (s.height() * s.width()) as u64;
    }
    Ok(hits as f64 / total as f64)
}

pub fn train_unet(cfg: &TrainConfig, train: &[&Sample], val: &[&Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.architecture != Architecture::UNet {
        return Err(CoreError::config("train_unet called with a non-unet config"));
    }
    if train.is_empty() {
        return Err(CoreError::invalid("train", "training split is empty"));
    }
    let (_, h, w) = check_uniform_dims(train)?;

    let mut spec = UNetSpec::new(InputMode::channels(cfg.input_mode, train[0].pa.channels()));
    spec.base_channels = cfg.base_channels;
    let div = 1usize << spec.depth;
    if h % div != 0 || w % div != 0 {
        return Err(CoreError::invalid(
            "train",
            format!("image size {h}x{w} not divisible by {div} (unet depth {})", spec.depth),
        ));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 0));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 2));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3));
    let mut net: UNet<f32> = UNet::new(spec, &mut init_rng)?;

    let inputs: Vec<Array3<f32>> = train.iter().map(|s| assemble3(s, cfg.input_mode)).collect();
    let labels: Vec<Array2<u8>> = train.iter().map(|s| s.labels.values().clone()).collect();

    let mut adam = Adam::new(cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut audit = Vec::with_capacity(cfg.epochs * cfg.batches_per_epoch);
    let mut best: Option<(f64, usize, Vec<ArrayD<f32>>)> = None;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for batch in 0..cfg.batches_per_epoch {
            let idxs: Vec<usize> = (0..cfg.batch_size)
                .map(|_| batch_rng.random_range(0..train.len()))
                .collect();
            audit.push(BatchRecord {
                epoch,
                batch,
                sample_ids: idxs.iter().map(|&i| train[i].id.clone()).collect(),
            });

            let c = inputs[0].dim().0;
            let mut x = Array4::<f32>::zeros((cfg.batch_size, c, h, w));
            let mut y = Array3::<u8>::zeros((cfg.batch_size, h, w));
            for (bi, &si) in idxs.iter().enumerate() {
                if cfg.augmentation {
                    let (img, lab) = augment(&inputs[si], &labels[si], &cfg.augment, &mut aug_rng);
                    x.index_axis_mut(Axis(0), bi).assign(&img);
                    y.index_axis_mut(Axis(0), bi).assign(&lab);
                } else {
                    x.index_axis_mut(Axis(0), bi).assign(&inputs[si]);
                    y.index_axis_mut(Axis(0), bi).assign(&labels[si]);
                }
            }

            let mut tape: Tape<f32> = Tape::new();
            let pv = net.load(&mut tape, true);
            let xv = tape.leaf(x.into_dyn(), false);
            let logits = net.forward_train(&mut tape, &pv, xv, &mut drop_rng)?;
            let loss = unet_loss(&mut tape, logits, &y.into_dyn(), cfg.dice_weight)?;
            tape.backward(loss)?;
            let grads: Vec<ArrayD<f32>> = pv
                .iter()
                .map(|v| tape.grad(*v).expect("trained parameter has a gradient").clone())
                .collect();
            adam.step(&mut net.params, &grads)?;
            loss_sum += tape.scalar(loss) as f64;
        }

        let train_loss = loss_sum / cfg.batches_per_epoch as f64;
        let val_metric = if val.is_empty() {
            None
        } else {
            Some(eval_mean_dice(&Model::UNet(net.clone()), val, cfg.input_mode)?)
        };
        log.push(EpochLog {
            epoch,
            train_loss,
            val_metric,
        });
        if let Some(m) = val_metric {
            if best.as_ref().is_none_or(|(bm, _, _)| m > *bm) {
                best = Some((m, epoch, snapshot(&net.params)));
            }
        }
    }

    let best_epoch = match best {
        Some((_, e, params)) => {
            for (p, v) in net.params.iter_mut().zip(params) {
                p.value = v;
            }
            e
        }
        None => cfg.epochs - 1,
    };
    Ok(TrainOutcome {
        model: Model::UNet(net),
        best_epoch,
        log,
        audit,
    })
}

pub fn train_fcnn(cfg: &TrainConfig, train: &[&Sample], val: &[&Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.architecture != Architecture::Fcnn {
        return Err(CoreError::config("train_fcnn called with a non-fcnn config"));
    }
    if cfg.input_mode == InputMode::Us {
        return Err(CoreError::config(
            "fcnn cannot train on us input: a single intensity per pixel is not a spectrum",
        ));
    }
    if train.is_empty() {
        return Err(CoreError::invalid("train", "training split is empty"));
    }

    let inputs: Vec<Array3<f32>> = train.iter().map(|s| assemble3(s, cfg.input_mode)).collect();
    let n_in = inputs[0].dim().0;
    for (s, x) in train.iter().zip(&inputs) {
        if x.dim().0 != n_in {
            return Err(CoreError::invalid(
                "train",
                format!("sample '{}' has {} input channels, expected {n_in}", s.id, x.dim().0),
            ));
        }
    }
    // Flat pixel population across images; images may differ in size.
    let mut offsets = Vec::with_capacity(train.len() + 1);
    offsets.push(0usize);
    for s in train {
        offsets.push(offsets.last().unwrap() + s.height() * s.width());
    }
    let total_pixels = *offsets.last().unwrap();

    let mut init_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 0));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3));
    let mut net: Fcnn<f32> = Fcnn::new(FcnnSpec::new(n_in), &mut init_rng)?;
    let classes = net.spec().n_out;

    let mut adam = Adam::new(cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut audit = Vec::with_capacity(cfg.epochs * cfg.batches_per_epoch);
    let mut best: Option<(f64, usize, Vec<ArrayD<f32>>)> = None;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for batch in 0..cfg.batches_per_epoch {
            let mut x = Array2::<f32>::zeros((cfg.batch_size, n_in));
            let mut y = Vec::with_capacity(cfg.batch_size);
            let mut images = Vec::new();
            for bi in 0..cfg.batch_size {
                let u = batch_rng.random_range(0..total_pixels);
                let img = offsets.partition_point(|&o| o <= u) - 1;
                let rem = u - offsets[img];
                let wd = train[img].width();
                let (r, c) = (rem / wd, rem % wd);
                for ch in 0..n_in {
                    x[[bi, ch]] = inputs[img][[ch, r, c]];
                }
                y.push(train[img].labels.values()[[r, c]]);
                images.push(img);
            }
            images.sort_unstable();
            images.dedup();
            audit.push(BatchRecord {
                epoch,
                batch,
                sample_ids: images.into_iter().map(|i| train[i].id.clone()).collect(),
            });

            let targets = margin_targets::<f32>(&y, classes);
            let mut tape: Tape<f32> = Tape::new();
            let pv = net.load(&mut tape, true);
            let xv = tape.leaf(x.into_dyn(), false);
            let logits = net.forward_train(&mut tape, &pv, xv, &mut drop_rng)?;
            let loss = tape.soft_margin(logits, &targets)?;
            tape.backward(loss)?;
            let grads: Vec<ArrayD<f32>> = pv
                .iter()
                .map(|v| tape.grad(*v).expect("trained parameter has a gradient").clone())
                .collect();
            adam.step(&mut net.params, &grads)?;
            loss_sum += tape.scalar(loss) as f64;
        }

        let train_loss = loss_sum / cfg.batches_per_epoch as f64;
        let val_metric = if val.is_empty() {
            None
        } else {
            Some(eval_pixel_accuracy(&Model::Fcnn(net.clone()), val, cfg.input_mode)?)
        };
        log.push(EpochLog {
            epoch,
            train_loss,
            val_metric,
        });
        if let Some(m) = val_metric {
            if best.as_ref().is_none_or(|(bm, _, _)| m > *bm) {
                best = Some((m, epoch, snapshot(&net.params)));
            }
        }
    }

    let best_epoch = match best {
        Some((_, e, params)) => {
            for (p, v) in net.params.iter_mut().zip(params) {
                p.value = v;
            }
            e
        }
        None => cfg.epochs - 1,
    };
    Ok(TrainOutcome {
        model: Model::Fcnn(net),
        best_epoch,
        log,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_label_map, PhantomConfig, SitePreset};
    use crate::types::{LabelMap, SampleMeta, Side, Site, SpectralCube, UsImage, WavelengthAxis};
    use ndarray::s;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_stack(seed: u64, c: usize, h: usize, w: usize) -> (Array3<f32>, Array2<u8>) {
        let mut r = rng(seed);
        let stack = Array3::from_shape_fn((c, h, w), |_| r.random_range(-1.0f32..1.0));
        let labels = Array2::from_shape_fn((h, w), |_| r.random_range(0u8..7));
        (stack, labels)
    }

    fn tiny_sample(seed: u64, wavelengths: usize, h: usize, w: usize, id: &str) -> Sample {
        let mut r = rng(seed);
        let axis = WavelengthAxis::new(wavelengths, 700.0, 950.0).unwrap();
        let pa = Array3::from_shape_fn((wavelengths, h, w), |_| r.random_range(0.0f32..1.0));
        let us = Array2::from_shape_fn((h, w), |_| r.random_range(0.0f32..2.0));
        let labels = Array2::from_shape_fn((h, w), |_| r.random_range(0u8..7));
        Sample::new(
            id.to_string(),
            SpectralCube::new(axis, pa).unwrap(),
            UsImage::new(us).unwrap(),
            LabelMap::new(labels).unwrap(),
            SampleMeta::new(1, Site::Forearm, Side::Left, 0).unwrap(),
        )
        .unwrap()
    }

    fn tiny_unet_config() -> TrainConfig {
        let mut cfg = TrainConfig::unet(InputMode::Paus);
        cfg.batch_size = 3;
        cfg.batches_per_epoch = 2;
        cfg.epochs = 2;
        cfg.base_channels = 2;
        cfg.seed = 9;
        cfg
    }

    #[test]
    fn identity_transform_is_exact() {
        let (stack, labels) = random_stack(1, 3, 9, 8);
        let (s2, l2) = apply_affine(&stack, &labels, false, 0.0, 0.0);
        assert_eq!(stack, s2);
        assert_eq!(labels, l2);
    }

    #[test]
    fn flip_mirrors_columns_and_is_involutive() {
        let (stack, labels) = random_stack(2, 2, 6, 7);
        let (s1, l1) = apply_affine(&stack, &labels, true, 0.0, 0.0);
        for ch in 0..2 {
            for r in 0..6 {
                for c in 0..7 {
                    assert_eq!(s1[[ch, r, c]], stack[[ch, r, 6 - c]]);
                }
            }
        }
        for r in 0..6 {
            for c in 0..7 {
                assert_eq!(l1[[r, c]], labels[[r, 6 - c]]);
            }
        }
        let (s2, l2) = apply_affine(&s1, &l1, true, 0.0, 0.0);
        assert_eq!(stack, s2);
        assert_eq!(labels, l2);
    }

    #[test]
    fn rotation_forth_and_back_disagrees_on_few_labels() {
        let cfg = PhantomConfig::default();
        let labels = generate_label_map(&cfg, &SitePreset::for_site(Site::Forearm), &mut rng(3))
            .unwrap();
        let stack = Array3::<f32>::zeros((1, 128, 128));
        let (_, fwd) = apply_affine(&stack, labels.values(), false, 5.0, 0.0);
        let (_, back) = apply_affine(&stack, &fwd, false, -5.0, 0.0);
        let disagree = labels
            .values()
            .iter()
            .zip(back.iter())
            .filter(|(a, b)| a != b)
            .count();
        let frac = disagree as f64 / (128.0 * 128.0);
        assert!(frac < 0.05, "disagreement fraction {frac}");
    }

    #[test]
    fn augmentation_preserves_label_alphabet() {
        let (stack, mut labels) = random_stack(4, 1, 16, 16);
        labels.mapv_inplace(|v| v % 3);
        let mut r = rng(5);
        for _ in 0..20 {
            let (_, out) = augment(&stack, &labels, &AugmentSpec::default(), &mut r);
            for &v in out.iter() {
                assert!(v < 3 || v == TissueClass::OtherTissue.code(), "code {v}");
            }
        }
    }

    #[test]
    fn shear_keeps_rows_fixed() {
        let (stack, labels) = random_stack(6, 1, 8, 8);
        let (_, out) = apply_affine(&stack, &labels, false, 0.0, 5.0);
        // The center row maps to itself under a pure shear.
        let mid = 3;
        for c in 0..8 {
            let any_src_row: Vec<u8> = (0..8).map(|r| labels[[r, c]]).collect();
            assert!(any_src_row.contains(&out[[mid, c]]) || out[[mid, c]] == 5);
        }
    }

    #[test]
    fn one_hot_and_margin_targets() {
        let labels =
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![0u8, 3, 6, 1]).unwrap();
        let oh: ArrayD<f64> = one_hot(&labels, 7);
        assert_eq!(oh.shape(), &[1, 7, 2, 2]);
        assert_eq!(oh[[0, 0, 0, 0]], 1.0);
        assert_eq!(oh[[0, 3, 0, 1]], 1.0);
        assert_eq!(oh[[0, 6, 1, 0]], 1.0);
        assert_eq!(oh.sum(), 4.0);

        let t: ArrayD<f64> = margin_targets(&[2, 0], 7);
        assert_eq!(t.shape(), &[2, 7]);
        assert_eq!(t[[0, 2]], 1.0);
        assert_eq!(t[[0, 0]], -1.0);
        assert_eq!(t.sum(), 2.0 * (1.0 - 6.0));
    }

    #[test]
    fn unet_loss_uniform_logits_equals_ln7_plus_dice() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(ArrayD::zeros(IxDyn(&[2, 7, 4, 4])), false);
        let labels = ArrayD::from_shape_fn(IxDyn(&[2, 4, 4]), |_| 3u8);
        let ce_only = unet_loss(&mut tape, logits, &labels, 0.0).unwrap();
        assert!((tape.scalar(ce_only) - (7.0f64).ln()).abs() < 1e-6);

        let full = unet_loss(&mut tape, logits, &labels, 1.0).unwrap();
        assert!(tape.scalar(full) > tape.scalar(ce_only));
    }

    #[test]
    fn unet_loss_gradients_pass_finite_differences() {
        let mut r = rng(8);
        let logits = ArrayD::from_shape_fn(IxDyn(&[1, 7, 2, 2]), |_| r.random_range(-1.0..1.0));
        let labels = ArrayD::from_shape_fn(IxDyn(&[1, 2, 2]), |_| r.random_range(0u8..7));
        let err = crate::nn::gradcheck::check_gradients(
            |tape, vars| unet_loss(tape, vars[0], &labels, 1.0),
            &[logits],
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn unet_draws_batches_per_epoch_times_batch_size(){
        let samples: Vec<Sample> = (0..3)
            .map(|i| tiny_sample(20 + i, 2, 16, 16, &format!("s{i}")))
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut cfg = tiny_unet_config();
        cfg.batch_size = 25;
        cfg.batches_per_epoch = 11;
        cfg.epochs = 1;
        let out = train_unet(&cfg, &refs, &[]).unwrap();
        assert_eq!(out.audit.len(), 11);
        let total: usize = out.audit.iter().map(|b| b.sample_ids.len()).sum();
        assert_eq!(total, 275);
        for rec in &out.audit {
            for id in &rec.sample_ids {
                assert!(refs.iter().any(|s| &s.id == id));
            }
        }
    }

    #[test]
    fn unet_training_is_reproducible() {
        let samples: Vec<Sample> = (0..3)
            .map(|i| tiny_sample(30 + i, 2, 16, 16, &format!("s{i}")))
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let val: Vec<&Sample> = vec![&samples[0]];
        let cfg = tiny_unet_config();
        let a = train_unet(&cfg, &refs, &val).unwrap();
        let b = train_unet(&cfg, &refs, &val).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.best_epoch, b.best_epoch);
        for (pa, pb) in a.model.params().iter().zip(b.model.params()) {
            assert_eq!(pa.value, pb.value, "parameter {}", pa.name);
        }
        assert_eq!(a.audit, b.audit);
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let cfg = tiny_unet_config();
        assert!(train_unet(&cfg, &[], &[]).is_err());
        let cfg = TrainConfig::fcnn(InputMode::Pa);
        assert!(train_fcnn(&cfg, &[], &[]).is_err());
    }

    #[test]
    fn fcnn_us_config_is_rejected() {
        let mut cfg = TrainConfig::fcnn(InputMode::Pa);
        cfg.input_mode = InputMode::Us;
        let sample = tiny_sample(40, 2, 8, 8, "s0");
        let err = train(&cfg, &[&sample], &[]).unwrap_err();
        assert!(matches!(err, CoreError::Config(_)));
    }

    #[test]
    fn fcnn_separable_spectra_reach_high_accuracy() {
        // Class c has a constant spectrum: 1 at band c, 0 elsewhere.
        let axis = WavelengthAxis::new(7, 700.0, 950.0).unwrap();
        let h = 14;
        let w = 14;
        let mut samples = Vec::new();
        for i in 0..2u64 {
            let labels = Array2::from_shape_fn((h, w), |(r, _)| ((r + i as usize) % 7) as u8);
            let pa = Array3::from_shape_fn((7, h, w), |(ch, r, c)| {
                if labels[[r, c]] as usize == ch {
                    1.0
                } else {
                    0.0
                }
            });
            let us = Array2::zeros((h, w));
            samples.push(
                Sample::new(
                    format!("sep{i}"),
                    SpectralCube::new(axis, pa).unwrap(),
                    UsImage::new(us).unwrap(),
                    LabelMap::new(labels).unwrap(),
                    SampleMeta::new(1 + i as u32, Site::Forearm, Side::Left, 0).unwrap(),
                )
                .unwrap(),
            );
        }
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut cfg = TrainConfig::fcnn(InputMode::Pa);
        cfg.epochs = 5;
        cfg.batch_size = 128;
        cfg.seed = 12;
        let out = train_fcnn(&cfg, &refs, &refs[..1]).unwrap();
        let acc = out.log.last().unwrap().val_metric.unwrap();
        assert!(acc > 0.99, "pixel accuracy {acc}");
    }

    #[test]
    fn fcnn_audit_lists_source_images_sorted() {
        let samples: Vec<Sample> = (0..3)
            .map(|i| tiny_sample(50 + i, 2, 8, 8, &format!("s{i}")))
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut cfg = TrainConfig::fcnn(InputMode::Pa);
        cfg.epochs = 1;
        cfg.batches_per_epoch = 3;
        cfg.batch_size = 32;
        let out = train_fcnn(&cfg, &refs, &[]).unwrap();
        assert_eq!(out.audit.len(), 3);
        for rec in &out.audit {
            let mut sorted = rec.sample_ids.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted, rec.sample_ids);
        }
    }

    #[test]
    fn checkpoint_records_run_facts() {
        let samples: Vec<Sample> = (0..2)
            .map(|i| tiny_sample(60 + i, 2, 16, 16, &format!("s{i}")))
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let cfg = tiny_unet_config();
        let out = train_unet(&cfg, &refs, &[]).unwrap();
        let cp = out.checkpoint(&cfg);
        assert_eq!(cp.header_value("architecture"), Some("unet"));
        assert_eq!(cp.header_value("input_mode"), Some("paus"));
        assert_eq!(cp.header_value("seed"), Some("9"));
        assert_eq!(cp.header_value("epoch"), Some("1"));
        let back = Model::from_checkpoint(&cp).unwrap();
        assert_eq!(back.in_channels(), 3);
    }

    #[test]
    fn training_log_writes_na_for_missing_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_training_log(
            &path,
            &[
                EpochLog {
                    epoch: 0,
                    train_loss: 1.5,
                    val_metric: None,
                },
                EpochLog {
                    epoch: 1,
                    train_loss: 0.75,
                    val_metric: Some(0.5),
                },
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,train_loss,val_metric\n0,1.5,NA\n1,0.75,0.5\n");
    }

    #[test]
    fn resolve_ids_finds_and_rejects() {
        let samples: Vec<Sample> = (0..2)
            .map(|i| tiny_sample(70 + i, 2, 8, 8, &format!("s{i}")))
            .collect();
        let found = resolve_ids(&samples, &["s1".to_string()]).unwrap();
        assert_eq!(found[0].id, "s1");
        assert!(resolve_ids(&samples, &["nope".to_string()]).is_err());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = TrainConfig::unet(InputMode::Pa);
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::unet(InputMode::Pa);
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::unet(InputMode::Pa);
        cfg.augment.rotation_deg = 9.0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::unet(InputMode::Paus).validate().is_ok());
        assert!(TrainConfig::fcnn(InputMode::Paus).validate().is_ok());
    }

    #[test]
    fn assembled_fcnn_batch_has_spectrum_rows() {
        // Spot-check the pixel gather: one known pixel lands in x.
        let sample = tiny_sample(80, 4, 8, 8, "s0");
        let stack = assemble3(&sample, InputMode::Pa);
        assert_eq!(stack.dim(), (4, 8, 8));
        let spec_at = stack.slice(s![.., 3, 5]);
        for ch in 0..4 {
            assert_eq!(spec_at[ch], sample.pa.values()[[ch, 3, 5]]);
        }
    }
}
