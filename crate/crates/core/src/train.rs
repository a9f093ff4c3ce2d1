//! Stochastic-gradient training: cross-entropy loss, similarity-transform
//! data augmentation, and a deterministic epoch driver.
//!
//! Per-batch example gradients are computed concurrently when the
//! `parallel` feature is on, but the reduction and the parameter update
//! always run in example-index order, so results do not depend on the
//! worker count.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::net::Icnn;
use crate::tensor::{LabelMap, Tensor3};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub augment: bool,
    /// Evaluate on the validation split every this many epochs.
    pub eval_every: usize,
    /// Multiplicative learning-rate factor applied per epoch.
    pub lr_decay: f64,
    /// Stop when validation loss has not improved for this many evaluations.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 1,
            max_epochs: 50,
            seed: 0,
            augment: true,
            eval_every: 1,
            lr_decay: 1.0,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        Ok(())
    }
}

/// Ranges of the random similarity transform applied during training.
#[derive(Debug, Clone)]
pub struct AugmentSpec {
    /// Rotation bound in degrees, drawn from `[-max_rotation, max_rotation]`.
    pub max_rotation: f64,
    pub scale_range: (f64, f64),
    /// Shift bound in pixels, drawn independently per axis.
    pub max_shift: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { max_rotation: 15.0, scale_range: (0.9, 1.1), max_shift: 10.0 }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_rotation < 0.0 || self.max_shift < 0.0 {
            return Err(Error::Config("augment bounds must be non-negative".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(lo <= 1.0 && 1.0 <= hi) {
            return Err(Error::Config(format!("scale_range ({lo}, {hi}) must contain 1.0")));
        }
        Ok(())
    }
}

/// A rotation + isotropic scale about the image center, then a shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub theta_deg: f64,
    pub scale: f64,
    /// (row, col) shift in pixels.
    pub shift: (f64, f64),
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity { theta_deg: 0.0, scale: 1.0, shift: (0.0, 0.0) }
    }

    pub fn map_forward(&self, p: (f64, f64), center: (f64, f64)) -> (f64, f64) {
        let t = self.theta_deg.to_radians();
        let (vr, vc) = (p.0 - center.0, p.1 - center.1);
        (
            self.scale * (t.cos() * vr - t.sin() * vc) + center.0 + self.shift.0,
            self.scale * (t.sin() * vr + t.cos() * vc) + center.1 + self.shift.1,
        )
    }

    pub fn map_inverse(&self, p: (f64, f64), center: (f64, f64)) -> (f64, f64) {
        let t = self.theta_deg.to_radians();
        let (vr, vc) = (p.0 - center.0 - self.shift.0, p.1 - center.1 - self.shift.1);
        (
            (t.cos() * vr + t.sin() * vc) / self.scale + center.0,
            (-t.sin() * vr + t.cos() * vc) / self.scale + center.1,
        )
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Draw one transform uniformly within the spec's ranges.
pub fn sample_transform(spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Similarity {
    Similarity {
        theta_deg: uniform_in(rng, -spec.max_rotation, spec.max_rotation),
        scale: uniform_in(rng, spec.scale_range.0, spec.scale_range.1),
        shift: (
            uniform_in(rng, -spec.max_shift, spec.max_shift),
            uniform_in(rng, -spec.max_shift, spec.max_shift),
        ),
    }
}

fn bilinear(image: &Tensor3, r: f64, c: f64, ch: usize, fill: f64) -> f64 {
    let (h, w, _) = image.shape();
    if r < 0.0 || c < 0.0 || r > (h - 1) as f64 || c > (w - 1) as f64 {
        return fill;
    }
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let (r0, c0) = (r0 as usize, c0 as usize);
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let a = image.get(r0, c0, ch) * (1.0 - fr) * (1.0 - fc)
        + image.get(r0, c1, ch) * (1.0 - fr) * fc
        + image.get(r1, c0, ch) * fr * (1.0 - fc)
        + image.get(r1, c1, ch) * fr * fc;
    a
}

/// Warp image (bilinear) and labels (nearest) through one shared transform.
/// Out-of-frame pixels take the per-channel image mean and the background
/// label.
pub fn apply_similarity(
    image: &Tensor3,
    labels: &LabelMap,
    sim: &Similarity,
) -> Result<(Tensor3, LabelMap)> {
    let (h, w, c) = image.shape();
    if (labels.height(), labels.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "augment: labels {}x{} do not match image {h}x{w}",
            labels.height(),
            labels.width()
        )));
    }
    let center = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);

    let n = (h * w) as f64;
    let mut fills = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for r in 0..h {
            for col in 0..w {
                s += image.get(r, col, ch);
            }
        }
        fills[ch] = s / n;
    }

    let mut out_img = Tensor3::zeros(h, w, c);
    let mut out_lbl = LabelMap::background(h, w, labels.num_classes());
    for r in 0..h {
        for col in 0..w {
            let src = sim.map_inverse((r as f64, col as f64), center);
            for ch in 0..c {
                out_img.set(r, col, ch, bilinear(image, src.0, src.1, ch, fills[ch]));
            }
            let (nr, nc) = (src.0.round(), src.1.round());
            if nr >= 0.0 && nc >= 0.0 && nr <= (h - 1) as f64 && nc <= (w - 1) as f64 {
                out_lbl.set(r, col, labels.get(nr as usize, nc as usize));
            }
        }
    }
    Ok((out_img, out_lbl))
}

/// One shared random similarity transform applied to image and labels.
pub fn augment(
    image: &Tensor3,
    labels: &LabelMap,
    spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor3, LabelMap)> {
    let sim = sample_transform(spec, rng);
    apply_similarity(image, labels, &sim)
}

/// Mean negative log-probability of the true class, log argument floored
/// at 1e-12. `probs` must already be softmaxed.
pub fn cross_entropy_loss(probs: &Tensor3, target: &LabelMap) -> Result<f64> {
    let (h, w, l) = probs.shape();
    if (target.height(), target.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "loss: target {}x{} does not match probs {h}x{w}",
            target.height(),
            target.width()
        )));
    }
    if target.num_classes() as usize > l {
        return Err(Error::Data(format!(
            "loss: target class range {} exceeds {} probability channels",
            target.num_classes(),
            l
        )));
    }
    let mut total = 0.0;
    for r in 0..h {
        for col in 0..w {
            let p = probs.get(r, col, target.get(r, col) as usize);
            total -= p.max(crate::layers::PROB_FLOOR).ln();
        }
    }
    Ok(total / (h * w) as f64)
}

/// Seeded shuffle of `0..n`; the visit order of one epoch.
pub fn epoch_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(feature = "parallel")]
fn example_grads(
    net: &Icnn,
    params: &ParamSet,
    batch: &[(Tensor3, LabelMap)],
) -> Vec<Result<(f64, ParamSet)>> {
    use rayon::prelude::*;
    batch.par_iter().map(|(img, lbl)| net.loss_and_grads(params, img, lbl)).collect()
}

#[cfg(not(feature = "parallel"))]
fn example_grads(
    net: &Icnn,
    params: &ParamSet,
    batch: &[(Tensor3, LabelMap)],
) -> Vec<Result<(f64, ParamSet)>> {
    batch.iter().map(|(img, lbl)| net.loss_and_grads(params, img, lbl)).collect()
}

/// One pass over a seeded permutation of the dataset, updating `params`
/// in place with `params -= lr * grad / batch_len`. Returns the mean
/// example loss. Aborts with diagnostics on a non-finite loss.
pub fn sgd_epoch(
    net: &Icnn,
    params: &mut ParamSet,
    dataset: &[(Tensor3, LabelMap)],
    cfg: &TrainConfig,
    aug: &AugmentSpec,
    lr: f64,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("sgd_epoch: empty dataset".into()));
    }
    let order = epoch_permutation(dataset.len(), rng);
    let mut loss_sum = 0.0;
    for batch_ids in order.chunks(cfg.batch_size) {
        // augmentation consumes rng state sequentially, before any
        // parallel work, so the stream is identical for any worker count
        let mut batch: Vec<(Tensor3, LabelMap)> = Vec::with_capacity(batch_ids.len());
        for &i in batch_ids {
            let (img, lbl) = &dataset[i];
            if cfg.augment {
                batch.push(augment(img, lbl, aug, rng)?);
            } else {
                batch.push((img.clone(), lbl.clone()));
            }
        }

        let results = example_grads(net, params, &batch);
        let mut grad_sum: Option<ParamSet> = None;
        for (pos, res) in results.into_iter().enumerate() {
            let (loss, grads) = res?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at epoch {epoch}, example {}",
                    batch_ids[pos]
                )));
            }
            loss_sum += loss;
            match &mut grad_sum {
                Some(g) => g.add_scaled(&grads, 1.0),
                None => grad_sum = Some(grads),
            }
        }
        let grad_sum = grad_sum.expect("non-empty batch");
        params.add_scaled(&grad_sum, -lr / batch_ids.len() as f64);
    }
    if !params.all_finite() {
        return Err(Error::Numeric(format!("non-finite parameters after epoch {epoch}")));
    }
    Ok(loss_sum / dataset.len() as f64)
}

/// Mean cross-entropy over a dataset without augmentation.
pub fn dataset_loss(net: &Icnn, params: &ParamSet, dataset: &[(Tensor3, LabelMap)]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("dataset_loss: empty dataset".into()));
    }
    let mut total = 0.0;
    for (img, lbl) in dataset {
        let probs = net.forward_probs(params, img)?;
        total += cross_entropy_loss(&probs, lbl)?;
    }
    Ok(total / dataset.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    /// Mean train loss per epoch.
    pub train_losses: Vec<f64>,
    /// (epoch, loss) at each validation evaluation.
    pub val_losses: Vec<(usize, f64)>,
}

/// Run up to `max_epochs` epochs, stopping early when the validation loss
/// has not improved for `patience` evaluations.
pub fn train_loop(
    net: &Icnn,
    params: &mut ParamSet,
    train_set: &[(Tensor3, LabelMap)],
    val_set: Option<&[(Tensor3, LabelMap)]>,
    cfg: &TrainConfig,
    aug: &AugmentSpec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = TrainOutcome { epochs_run: 0, train_losses: Vec::new(), val_losses: Vec::new() };
    let mut lr = cfg.learning_rate;
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    for epoch in 0..cfg.max_epochs {
        let loss = sgd_epoch(net, params, train_set, cfg, aug, lr, epoch, &mut rng)?;
        out.train_losses.push(loss);
        out.epochs_run = epoch + 1;
        lr *= cfg.lr_decay;
        if let Some(val) = val_set {
            if (epoch + 1) % cfg.eval_every == 0 {
                let vl = dataset_loss(net, params, val)?;
                out.val_losses.push((epoch, vl));
                if vl < best_val - 1e-12 {
                    best_val = vl;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        break;
                    }
                }
            }
        }
    }
    Ok(out)
}
