use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::generator::ContinuousGenerator;
use super::loss::{class_labels, mae, weighted_cross_entropy, Loss};
use super::model::{Head, Model, Tape};
use super::tensor::{Scalar, Tensor4};
use crate::distance_codec::SignedDistMap;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::image_io::{normalize, GrayImage, Patch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: Loss,
    /// Size of the augmented patch pool.
    pub augment_target_count: usize,
    /// Per-epoch probability that a pool slot is regenerated.
    pub refresh_prob: f64,
    /// Sliding-window stride used to cut training patches.
    pub patch_stride: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 100,
            batch_size: 8,
            loss: Loss::Mae,
            augment_target_count: 2048,
            refresh_prob: 0.25,
            patch_stride: 48,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.augment_target_count == 0 {
            return Err(Error::Config("augment_target_count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.refresh_prob) {
            return Err(Error::Config(format!("refresh_prob {} outside [0, 1]", self.refresh_prob)));
        }
        if self.patch_stride == 0 {
            return Err(Error::Config("patch_stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Supervision for one batch.
#[derive(Debug, Clone)]
pub enum Target<S> {
    /// Regression targets, one value per pixel.
    Map(Vec<S>),
    /// Class indices (0 cell, 1 gutta, 2 other) per pixel.
    Labels(Vec<u8>),
}

/// Batch loss and parameter gradients.
pub fn loss_and_grads<S: Scalar>(model: &Model<S>, x: &Tensor4<S>, target: &Target<S>, class_weights: [S; 3]) -> Result<(S, Vec<Vec<S>>)> {
    let mut tape = Tape::new();
    let out = model.forward_train(x, &mut tape)?;
    let (loss, d_out) = match (model.config().head, target) {
        (Head::Regression, Target::Map(t)) => mae(&out, t),
        (Head::Classification3, Target::Labels(l)) => weighted_cross_entropy(&out, l, class_weights),
        _ => return Err(Error::InvalidArgument("loss does not match the network head".into())),
    };
    Ok((loss, model.backward(tape, &d_out)))
}

/// Model, optimizer and recipe for single-precision training.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub config: TrainConfig,
    pub class_weights: [f32; 3],
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let expected = match config.loss {
            Loss::Mae => Head::Regression,
            Loss::WeightedCrossEntropy => Head::Classification3,
        };
        if model.config().head != expected {
            return Err(Error::Config(format!("{:?} loss needs a {expected:?} head", config.loss)));
        }
        let adam = Adam::new(config.lr, model.params());
        Ok(Trainer { model, adam, config, class_weights: [1.0; 3] })
    }

    /// Sets class weights from the pixel frequencies of the patches' targets.
    pub fn fit_class_weights(&mut self, patches: &[Patch]) {
        let labels: Vec<Vec<u8>> = patches.iter().filter_map(|p| p.target.as_ref()).map(class_labels).collect();
        self.class_weights = super::loss::class_weights(labels.iter().map(Vec::as_slice)).map(|w| w as f32);
    }

    fn batch_tensors(&self, batch: &[&Patch]) -> Result<(Tensor4<f32>, Target<f32>)> {
        let first = batch.first().ok_or_else(|| Error::Empty("batch has no patches".into()))?;
        let (w, h) = (first.image.width(), first.image.height());
        let mut x = Vec::with_capacity(batch.len() * w * h);
        let mut t = Vec::with_capacity(batch.len() * w * h);
        let mut labels = Vec::new();
        for p in batch {
            if p.image.width() != w || p.image.height() != h {
                return Err(Error::DimensionMismatch("patches in a batch differ in size".into()));
            }
            let target = p.target.as_ref().ok_or_else(|| Error::InvalidArgument("training patch without target".into()))?;
            x.extend_from_slice(p.image.pixels.as_slice());
            match self.config.loss {
                Loss::Mae => t.extend_from_slice(target.values()),
                Loss::WeightedCrossEntropy => labels.extend(class_labels(target)),
            }
        }
        let x = Tensor4::from_vec(batch.len(), 1, h, w, x)?;
        let target = match self.config.loss {
            Loss::Mae => Target::Map(t),
            Loss::WeightedCrossEntropy => Target::Labels(labels),
        };
        Ok((x, target))
    }

    /// One optimizer step on a batch; returns the batch loss.
    pub fn backward_and_step(&mut self, batch: &[&Patch]) -> Result<f32> {
        let (x, target) = self.batch_tensors(batch)?;
        let (loss, grads) = loss_and_grads(&self.model, &x, &target, self.class_weights)?;
        if !loss.is_finite() {
            let bad = grads.iter().zip(self.model.params()).filter(|(g, _)| g.iter().any(|v| !v.is_finite())).map(|(_, p)| p.name.as_str()).collect::<Vec<_>>();
            return Err(Error::NonFiniteLoss {
                step: self.adam.step + 1,
                detail: format!("loss {loss}; non-finite gradients in {bad:?}"),
            });
        }
        self.adam.update(self.model.params_mut(), &grads);
        Ok(loss)
    }

    /// One pass over the generator's pool; returns the per-step losses.
    pub fn train_epoch(&mut self, generator: &mut ContinuousGenerator) -> Result<Vec<f32>> {
        let batches = generator.next_epoch(self.config.batch_size);
        let mut losses = Vec::with_capacity(batches.len());
        for idx in batches {
            let batch: Vec<&Patch> = idx.iter().map(|&i| &generator.pool()[i]).collect();
            losses.push(self.backward_and_step(&batch)?);
        }
        Ok(losses)
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

/// Raw network output on a whole image: normalized, reflect-padded to the
/// input multiple, forwarded and cropped back.
fn infer_planes(model: &Model<f32>, image: &GrayImage) -> Result<Vec<Grid<f32>>> {
    let m = model.config().input_multiple();
    let (w, h) = (image.width(), image.height());
    if w < m || h < m {
        return Err(Error::InvalidArgument(format!("image {w}x{h} is smaller than {m} px on a side")));
    }
    let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
    let norm = normalize(image);
    let padded: Vec<f32> = (0..ph)
        .flat_map(|y| {
            let norm = &norm;
            (0..pw).map(move |x| *norm.pixels.get(reflect(x, w), reflect(y, h)))
        })
        .collect();
    let out = model.forward(&Tensor4::from_vec(1, 1, ph, pw, padded)?)?;
    Ok((0..out.channels())
        .map(|c| {
            let plane = out.plane(0, c);
            Grid::from_fn(w, h, |x, y| plane[y * pw + x])
        })
        .collect())
}

/// Predicted signed distance map of a whole image (regression head).
pub fn infer_full(model: &Model<f32>, image: &GrayImage) -> Result<SignedDistMap> {
    if model.config().head != Head::Regression {
        return Err(Error::InvalidArgument("infer_full needs a regression head".into()));
    }
    let mut planes = infer_planes(model, image)?;
    Ok(SignedDistMap::from_grid(planes.remove(0)))
}

/// Per-class probability planes of a whole image (classification head).
pub fn infer_probs(model: &Model<f32>, image: &GrayImage) -> Result<[Grid<f32>; 3]> {
    if model.config().head != Head::Classification3 {
        return Err(Error::InvalidArgument("infer_probs needs a classification head".into()));
    }
    let planes = infer_planes(model, image)?;
    planes.try_into().map_err(|_| Error::DimensionMismatch("expected three output planes".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::{Scale, PATCH_SIZE};
    use crate::unet::UNetConfig;

    fn patch(seed: u32) -> Patch {
        let img = Grid::from_fn(PATCH_SIZE, PATCH_SIZE, |x, y| ((x * 7 + y * 3 + seed as usize) % 13) as f32 / 13.0);
        let t = Grid::from_fn(PATCH_SIZE, PATCH_SIZE, |x, y| (x as f32 - 40.0).min(y as f32 - 30.0) / 10.0);
        Patch::new(GrayImage::new(img, Scale::default()), Some(SignedDistMap::from_grid(t))).unwrap()
    }

    fn small() -> UNetConfig {
        UNetConfig { levels: 3, base_channels: 2, seed: 1, ..Default::default() }
    }

    #[test]
    fn identical_steps_are_deterministic() {
        let cfg = TrainConfig { batch_size: 2, ..Default::default() };
        let mut a = Trainer::new(Model::build(&small()).unwrap(), cfg.clone()).unwrap();
        let mut b = Trainer::new(Model::build(&small()).unwrap(), cfg).unwrap();
        let (p0, p1) = (patch(0), patch(1));
        let la = a.backward_and_step(&[&p0, &p1]).unwrap();
        let lb = b.backward_and_step(&[&p0, &p1]).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn head_must_match_loss() {
        let cfg = TrainConfig { loss: Loss::WeightedCrossEntropy, ..Default::default() };
        assert!(Trainer::new(Model::build(&small()).unwrap(), cfg).is_err());
    }

    #[test]
    fn infer_crops_to_input() {
        let model = Model::<f32>::build(&UNetConfig { levels: 4, base_channels: 2, ..Default::default() }).unwrap();
        let img = GrayImage::new(Grid::from_fn(100, 90, |x, y| (x + y) as f32), Scale::default());
        let map = infer_full(&model, &img).unwrap();
        assert_eq!((map.width(), map.height()), (100, 90));
        let tiny = GrayImage::new(Grid::filled(7, 40, 1.0), Scale::default());
        assert!(infer_full(&model, &tiny).is_err());
        assert!(infer_probs(&model, &img).is_err());
    }
}
