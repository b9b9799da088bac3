//! Loss functions and the training loop.
//!
//! The reconstruction loss never asks for a pixel-perfect copy of the
//! input: in its default mode the target is a *different* illumination
//! variant of the same scene, so the only way to score well on every draw
//! is to reconstruct what the variants share and drop what they do not.
//! A triplet loss over latent codes and a KL term are layered on top for
//! the respective model variants, and every component is logged per step
//! so the total is always auditable as their exact sum.

use crate::dataset::{
    augment_pair, eligible_anchor_ids, sample_pair, sample_triplet_scenes, AugmentMode,
    AugmentSpec, LoadedDataset, TripletPolicy,
};
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::model::{
    batch_from_images, image_from_batch, kl_terms, ArchConfig, EncoderDecoder, Reconstructor,
    Variant,
};
use crate::nn::{Adam, AdamConfig};
use crate::seeds::derive_seed;
use crate::ssim::{recon_distance, recon_distance_with_grad, SsimConfig};
use ndarray::{s, Array2, Array4, ArrayView2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

/// How reconstruction targets are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Target is a different variant of the same scene; reproducing
    /// per-variant lighting is impossible by construction.
    Impossible,
    /// Target is the input itself, the classic autoencoder objective.
    Vanilla,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "impossible" => Ok(LossMode::Impossible),
            "vanilla" => Ok(LossMode::Vanilla),
            other => Err(Error::Config(format!(
                "unknown loss mode {other:?}, expected impossible or vanilla"
            ))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Impossible => "impossible",
            LossMode::Vanilla => "vanilla",
        })
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Scenes per optimization step; each contributes one sample (or one
    /// triplet) per epoch.
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Margin of the latent triplet hinge.
    pub triplet_margin: f64,
    /// Weight of the KL term in the VAE total.
    pub kl_weight: f64,
    pub master_seed: u64,
    pub loss_mode: LossMode,
    pub triplet_policy: TripletPolicy,
    /// Opt-in photometric augmentation. When set, each drawn sample is a
    /// single variant expanded into an input/target pair by `augment_pair`
    /// instead of a two-variant draw.
    pub augment: Option<AugmentSpec>,
    pub augment_mode: AugmentMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 60,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            triplet_margin: 1.0,
            kl_weight: 0.001,
            master_seed: 0,
            loss_mode: LossMode::Impossible,
            triplet_policy: TripletPolicy::Seat,
            augment: None,
            augment_mode: AugmentMode::Both,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.triplet_margin >= 0.0 && self.triplet_margin.is_finite()) {
            return Err(Error::Config(format!(
                "triplet_margin must be non-negative, got {}",
                self.triplet_margin
            )));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config(format!(
                "kl_weight must be non-negative, got {}",
                self.kl_weight
            )));
        }
        if let Some(spec) = &self.augment {
            spec.validate()?;
        }
        Ok(())
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }
}

/// Metadata document embedded in checkpoints produced from a training run.
pub fn checkpoint_metadata(config: &TrainConfig) -> Result<serde_json::Value> {
    Ok(serde_json::json!({ "train_config": serde_json::to_value(config)? }))
}

/// A batch of input/target image pairs, one per scene.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub inputs: Vec<ImageTensor>,
    pub targets: Vec<ImageTensor>,
}

impl PairBatch {
    pub fn new(inputs: Vec<ImageTensor>, targets: Vec<ImageTensor>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Contract("pair batch must not be empty".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::Contract(format!(
                "{} inputs vs {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let shape = inputs[0].shape();
        for img in inputs.iter().chain(targets.iter()) {
            if img.shape() != shape {
                return Err(Error::Contract(format!(
                    "mixed image shapes in batch: {:?} vs {shape:?}",
                    img.shape()
                )));
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Anchor, positive and negative pair batches of equal length.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub anchor: PairBatch,
    pub positive: PairBatch,
    pub negative: PairBatch,
}

impl TripletBatch {
    pub fn new(anchor: PairBatch, positive: PairBatch, negative: PairBatch) -> Result<Self> {
        if anchor.len() != positive.len() || anchor.len() != negative.len() {
            return Err(Error::Contract(format!(
                "triplet member counts differ: {} anchors, {} positives, {} negatives",
                anchor.len(),
                positive.len(),
                negative.len()
            )));
        }
        Ok(Self {
            anchor,
            positive,
            negative,
        })
    }

    pub fn len(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.is_empty()
    }
}

/// Either kind of batch a model variant can consume.
#[derive(Debug, Clone)]
pub enum LossBatch {
    Pairs(PairBatch),
    Triplets(TripletBatch),
}

/// Summed reconstruction distance `1 - SSIM` between the reconstruction of
/// each input and its target.
pub fn loss_recon_pair<M: Reconstructor>(
    model: &M,
    batch: &PairBatch,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let x = batch_from_images(&batch.inputs);
    let recon = model.reconstruct_batch(&x, rng)?;
    if recon.dim() != x.dim() {
        return Err(Error::Contract(format!(
            "reconstruction shape {:?} does not match input shape {:?}",
            recon.dim(),
            x.dim()
        )));
    }
    let config = SsimConfig::default();
    let mut total = 0.0;
    for i in 0..batch.len() {
        let r = image_from_batch(&recon, i);
        total += recon_distance(&r, &batch.targets[i], &config)?;
    }
    Ok(total)
}

fn check_triplet_codes(
    anchor: &Array2<f32>,
    positive: &Array2<f32>,
    negative: &Array2<f32>,
    margin: f64,
) -> Result<()> {
    if anchor.dim() != positive.dim() || anchor.dim() != negative.dim() {
        return Err(Error::Contract(format!(
            "latent code shapes differ: {:?}, {:?}, {:?}",
            anchor.dim(),
            positive.dim(),
            negative.dim()
        )));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Contract(format!("margin must be non-negative, got {margin}")));
    }
    Ok(())
}

/// Per-row hinge values `max(0, |a-p|^2 - |a-n|^2 + margin)`.
pub fn triplet_hinges(
    anchor: &Array2<f32>,
    positive: &Array2<f32>,
    negative: &Array2<f32>,
    margin: f64,
) -> Result<Vec<f64>> {
    check_triplet_codes(anchor, positive, negative, margin)?;
    let (b, d) = anchor.dim();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut d_ap = 0.0f64;
        let mut d_an = 0.0f64;
        for j in 0..d {
            let a = anchor[(i, j)] as f64;
            d_ap += (a - positive[(i, j)] as f64).powi(2);
            d_an += (a - negative[(i, j)] as f64).powi(2);
        }
        out.push((d_ap - d_an + margin).max(0.0));
    }
    Ok(out)
}

/// Triplet hinge loss summed over the batch. Zero exactly when every
/// anchor-negative distance beats its anchor-positive distance by the
/// margin.
pub fn loss_triplet(
    anchor: &Array2<f32>,
    positive: &Array2<f32>,
    negative: &Array2<f32>,
    margin: f64,
) -> Result<f64> {
    Ok(triplet_hinges(anchor, positive, negative, margin)?.iter().sum())
}

/// Hinge loss plus gradients w.r.t. the three code matrices. Rows whose
/// margin is already satisfied contribute exactly zero gradient.
pub(crate) fn triplet_grads(
    anchor: ArrayView2<f32>,
    positive: ArrayView2<f32>,
    negative: ArrayView2<f32>,
    margin: f64,
) -> (f64, Array2<f32>, Array2<f32>, Array2<f32>) {
    let (b, d) = anchor.dim();
    let mut da = Array2::<f32>::zeros((b, d));
    let mut dp = Array2::<f32>::zeros((b, d));
    let mut dn = Array2::<f32>::zeros((b, d));
    let mut total = 0.0f64;
    for i in 0..b {
        let mut d_ap = 0.0f64;
        let mut d_an = 0.0f64;
        for j in 0..d {
            let a = anchor[(i, j)] as f64;
            d_ap += (a - positive[(i, j)] as f64).powi(2);
            d_an += (a - negative[(i, j)] as f64).powi(2);
        }
        let hinge = d_ap - d_an + margin;
        if hinge > 0.0 {
            total += hinge;
            for j in 0..d {
                let (a, p, n) = (anchor[(i, j)], positive[(i, j)], negative[(i, j)]);
                da[(i, j)] = 2.0 * (n - p);
                dp[(i, j)] = 2.0 * (p - a);
                dn[(i, j)] = 2.0 * (a - n);
            }
        }
    }
    (total, da, dp, dn)
}

/// Reconstruction loss of a triplet batch: the pair loss applied to each of
/// the anchor, positive and negative pair batches, summed.
pub fn loss_recon_triplet<M: Reconstructor>(
    model: &M,
    batch: &TripletBatch,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    Ok(loss_recon_pair(model, &batch.anchor, rng)?
        + loss_recon_pair(model, &batch.positive, rng)?
        + loss_recon_pair(model, &batch.negative, rng)?)
}

/// One step's loss decomposition. `total` is assembled as
/// `recon + triplet + kl_weight * kl`, so the additivity is exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub recon: f64,
    pub triplet: f64,
    /// Raw KL divergence, before weighting.
    pub kl: f64,
    pub total: f64,
}

impl LossComponents {
    fn assemble(recon: f64, triplet: f64, kl: f64, kl_weight: f64) -> Self {
        Self {
            recon,
            triplet,
            kl,
            total: recon + triplet + kl_weight * kl,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.recon.is_finite()
            && self.triplet.is_finite()
            && self.kl.is_finite()
            && self.total.is_finite()
    }
}

/// Evaluates the full objective for the model's variant: reconstruction
/// plus triplet hinge for the triplet variant, reconstruction plus weighted
/// KL for the variational one, reconstruction alone otherwise.
pub fn total_loss(
    model: &EncoderDecoder,
    batch: &LossBatch,
    config: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<LossComponents> {
    config.validate()?;
    match (model.config.variant, batch) {
        (Variant::Tae, LossBatch::Triplets(t)) => {
            let recon = loss_recon_triplet(model, t, rng)?;
            let za = model.embed_batch(&batch_from_images(&t.anchor.inputs))?;
            let zp = model.embed_batch(&batch_from_images(&t.positive.inputs))?;
            let zn = model.embed_batch(&batch_from_images(&t.negative.inputs))?;
            let triplet = loss_triplet(&za, &zp, &zn, config.triplet_margin)?;
            Ok(LossComponents::assemble(recon, triplet, 0.0, config.kl_weight))
        }
        (Variant::Ae, LossBatch::Pairs(p)) => {
            let recon = loss_recon_pair(model, p, rng)?;
            Ok(LossComponents::assemble(recon, 0.0, 0.0, config.kl_weight))
        }
        (Variant::Vae, LossBatch::Pairs(p)) => {
            let x = batch_from_images(&p.inputs);
            let state = model.forward_train(&x, &mut &mut *rng)?;
            let ssim_cfg = SsimConfig::default();
            let mut recon = 0.0;
            for i in 0..p.len() {
                let r = image_from_batch(&state.recon, i);
                recon += recon_distance(&r, &p.targets[i], &ssim_cfg)?;
            }
            let mu = state.mu.as_ref().expect("VAE forward produces mu");
            let logvar = state.logvar.as_ref().expect("VAE forward produces logvar");
            let mut kl = 0.0;
            for i in 0..p.len() {
                kl += kl_terms(mu.row(i), logvar.row(i));
            }
            Ok(LossComponents::assemble(recon, 0.0, kl, config.kl_weight))
        }
        (Variant::Tae, LossBatch::Pairs(_)) => Err(Error::Contract(
            "the triplet model variant requires a triplet batch".into(),
        )),
        (Variant::Ae | Variant::Vae, LossBatch::Triplets(_)) => Err(Error::Contract(
            "non-triplet model variants require a pair batch".into(),
        )),
    }
}

/// Per-epoch loss sums and wall time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub recon: f64,
    pub triplet: f64,
    pub kl: f64,
    pub total: f64,
    pub wall_seconds: f64,
}

/// Loss decomposition of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    /// 1-based step number within the epoch.
    pub step: usize,
    pub recon: f64,
    pub triplet: f64,
    pub kl: f64,
    pub total: f64,
}

/// Everything a training run logged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainHistory {
    /// Writes the per-epoch log as CSV.
    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,recon,triplet,kl,total,wall_seconds\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.recon, r.triplet, r.kl, r.total, r.wall_seconds
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Writes the per-step log as CSV.
    pub fn write_step_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,step,recon,triplet,kl,total\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.step, r.recon, r.triplet, r.kl, r.total
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Draws one member's input/target images for a scene.
fn draw_member(
    data: &LoadedDataset,
    scene_idx: usize,
    mode: LossMode,
    augment: Option<(&AugmentSpec, AugmentMode)>,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, ImageTensor)> {
    let scene = &data.manifest.scenes[scene_idx];
    let imgs = &data.images[scene_idx];
    if let Some((spec, amode)) = augment {
        let j = rng.gen_range(0..imgs.len());
        return augment_pair(&imgs[j], spec, amode, rng);
    }
    match mode {
        LossMode::Impossible => {
            let p = sample_pair(scene, rng)?;
            Ok((imgs[p.input_variant].clone(), imgs[p.target_variant].clone()))
        }
        LossMode::Vanilla => {
            let j = rng.gen_range(0..imgs.len());
            Ok((imgs[j].clone(), imgs[j].clone()))
        }
    }
}

/// One optimization step over an assembled image batch. For the triplet
/// variant the batch is `[anchors, positives, negatives]` with `b` images
/// each and `triplet_b = Some(b)`. Skips the parameter update when any
/// loss component is non-finite and leaves the abort to the caller.
fn run_step(
    model: &mut EncoderDecoder,
    adam: &mut Adam,
    inputs: &[ImageTensor],
    targets: &[ImageTensor],
    triplet_b: Option<usize>,
    config: &TrainConfig,
    ssim_cfg: &SsimConfig,
    noise_rng: &mut ChaCha8Rng,
) -> Result<LossComponents> {
    let x = batch_from_images(inputs);
    let state = model.forward_train(&x, noise_rng)?;
    let n = inputs.len();

    let mut drecon = Array4::<f32>::zeros(state.recon.raw_dim());
    let mut recon_sum = 0.0f64;
    for i in 0..n {
        let r = image_from_batch(&state.recon, i);
        let (dist, g) = recon_distance_with_grad(&r, &targets[i], ssim_cfg)?;
        recon_sum += dist;
        let (h, w, c) = g.dim();
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    drecon[(i, ch, y, xx)] = g[(y, xx, ch)] as f32;
                }
            }
        }
    }

    let (triplet_sum, dz_extra) = match triplet_b {
        Some(b) => {
            let za = state.z.slice(s![0..b, ..]);
            let zp = state.z.slice(s![b..2 * b, ..]);
            let zn = state.z.slice(s![2 * b..3 * b, ..]);
            let (lt, da, dp, dn) = triplet_grads(za, zp, zn, config.triplet_margin);
            let mut dz = Array2::<f32>::zeros(state.z.raw_dim());
            dz.slice_mut(s![0..b, ..]).assign(&da);
            dz.slice_mut(s![b..2 * b, ..]).assign(&dp);
            dz.slice_mut(s![2 * b..3 * b, ..]).assign(&dn);
            (lt, Some(dz))
        }
        None => (0.0, None),
    };

    let (kl_sum, dmu_extra, dlogvar_extra) = match (&state.mu, &state.logvar) {
        (Some(mu), Some(logvar)) => {
            let mut kl = 0.0f64;
            for i in 0..n {
                kl += kl_terms(mu.row(i), logvar.row(i));
            }
            let w = config.kl_weight as f32;
            let dmu = mu.mapv(|m| w * m);
            let dlogvar = logvar.mapv(|lv| w * 0.5 * (lv.exp() - 1.0));
            (kl, Some(dmu), Some(dlogvar))
        }
        _ => (0.0, None, None),
    };

    let components =
        LossComponents::assemble(recon_sum, triplet_sum, kl_sum, config.kl_weight);
    if !components.is_finite() {
        return Ok(components);
    }

    let grads = model.backward(
        &state,
        &drecon,
        dz_extra.as_ref(),
        dmu_extra.as_ref(),
        dlogvar_extra.as_ref(),
    );
    adam.step(model.param_slices(), grads.slices());
    Ok(components)
}

/// Trains a model on an in-memory dataset.
///
/// Epochs iterate over scenes: every scene (for the triplet variant, every
/// policy-eligible scene) contributes exactly one freshly drawn sample per
/// epoch. Fully deterministic in the master seed; aborts with a numeric
/// failure when any loss component turns non-finite.
pub fn train(
    data: &LoadedDataset,
    arch: &ArchConfig,
    config: &TrainConfig,
) -> Result<(EncoderDecoder, TrainHistory)> {
    arch.validate()?;
    config.validate()?;
    let (h, w, c) = {
        if data.manifest.scenes.is_empty() {
            return Err(Error::Data("training dataset has no scenes".into()));
        }
        data.image_shape()
    };
    if (h, w, c) != (arch.input_height, arch.input_width, arch.input_channels) {
        return Err(Error::Contract(format!(
            "dataset images are {h}x{w}x{c}, architecture expects {}x{}x{}",
            arch.input_height, arch.input_width, arch.input_channels
        )));
    }

    let scene_pos: HashMap<u64, usize> = data
        .manifest
        .scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.scene_id, i))
        .collect();
    let anchors: Vec<usize> = match arch.variant {
        Variant::Tae => {
            let ids = eligible_anchor_ids(&data.manifest, config.triplet_policy);
            if ids.is_empty() {
                return Err(Error::Sampling(
                    "no scene is eligible as a triplet anchor under the configured policy".into(),
                ));
            }
            ids.iter().map(|id| scene_pos[id]).collect()
        }
        _ => (0..data.manifest.scenes.len()).collect(),
    };

    let mut model = EncoderDecoder::new(
        arch.clone(),
        derive_seed(config.master_seed, "model-init", 0),
    )?;
    let mut adam = Adam::new(config.adam_config());
    let ssim_cfg = SsimConfig::default();
    let augment = config.augment.as_ref().map(|spec| (spec, config.augment_mode));
    let mut history = TrainHistory::default();

    for epoch in 1..=config.epochs {
        let clock = Instant::now();
        let mut sample_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.master_seed, "sample", epoch as u64));
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.master_seed, "noise", epoch as u64));

        let mut order = anchors.clone();
        use rand::seq::SliceRandom;
        order.shuffle(&mut sample_rng);

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for (step0, chunk) in order.chunks(config.batch_size).enumerate() {
            let step = step0 + 1;
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            let triplet_b = match arch.variant {
                Variant::Tae => {
                    let mut members: Vec<Vec<(ImageTensor, ImageTensor)>> =
                        vec![Vec::new(), Vec::new(), Vec::new()];
                    for &idx in chunk {
                        let anchor_id = data.manifest.scenes[idx].scene_id;
                        let (a, p, ng) = sample_triplet_scenes(
                            &data.manifest,
                            anchor_id,
                            config.triplet_policy,
                            &mut sample_rng,
                        )?;
                        for (slot, id) in [a, p, ng].into_iter().enumerate() {
                            let pair = draw_member(
                                data,
                                scene_pos[&id],
                                config.loss_mode,
                                augment,
                                &mut sample_rng,
                            )?;
                            members[slot].push(pair);
                        }
                    }
                    for member in members {
                        for (input, target) in member {
                            inputs.push(input);
                            targets.push(target);
                        }
                    }
                    Some(chunk.len())
                }
                _ => {
                    for &idx in chunk {
                        let (input, target) =
                            draw_member(data, idx, config.loss_mode, augment, &mut sample_rng)?;
                        inputs.push(input);
                        targets.push(target);
                    }
                    None
                }
            };

            let components = run_step(
                &mut model,
                &mut adam,
                &inputs,
                &targets,
                triplet_b,
                config,
                &ssim_cfg,
                &mut noise_rng,
            )?;
            if !components.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: format!(
                        "recon {}, triplet {}, kl {}",
                        components.recon, components.triplet, components.kl
                    ),
                });
            }
            history.steps.push(StepRecord {
                epoch,
                step,
                recon: components.recon,
                triplet: components.triplet,
                kl: components.kl,
                total: components.total,
            });
            sums.0 += components.recon;
            sums.1 += components.triplet;
            sums.2 += components.kl;
            sums.3 += components.total;
        }

        history.epochs.push(EpochRecord {
            epoch,
            recon: sums.0,
            triplet: sums.1,
            kl: sums.2,
            total: sums.3,
            wall_seconds: clock.elapsed().as_secs_f64(),
        });
    }

    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AugmentOp, DatasetManifest, Label, SceneRecord, Split};
    use ndarray::Array3;
    use std::path::PathBuf;

    struct IdentityStub;

    impl Reconstructor for IdentityStub {
        fn reconstruct_batch(
            &self,
            x: &Array4<f32>,
            _rng: &mut dyn RngCore,
        ) -> Result<Array4<f32>> {
            Ok(x.clone())
        }
    }

    fn image_for(scene: usize, variant: usize, size: usize) -> ImageTensor {
        let data = Array3::from_shape_fn((size, size, 1), |(y, x, _)| {
            let texture = ((x * (scene + 2) + y * (2 * scene + 3)) % size) as f32 / size as f32;
            (texture * (0.7 + 0.1 * variant as f32) + 0.05 * variant as f32).clamp(0.0, 1.0)
        });
        ImageTensor::new(data).unwrap()
    }

    /// Four 16x16 scenes, two per label, with Hamming-distance-1 labels so
    /// every scene can anchor a seat-policy triplet.
    fn toy_dataset(variants: usize) -> LoadedDataset {
        let labels = [[1u8, 0, 0], [1, 0, 0], [2, 0, 0], [2, 0, 0]];
        let scenes: Vec<SceneRecord> = labels
            .iter()
            .enumerate()
            .map(|(k, l)| SceneRecord {
                scene_id: k as u64,
                label: Label::Seats(l.to_vec()),
                variants: (0..variants)
                    .map(|j| PathBuf::from(format!("memory://scene_{k}/variant_{j}")))
                    .collect(),
            })
            .collect();
        let images = (0..labels.len())
            .map(|k| (0..variants).map(|j| image_for(k, j, 16)).collect())
            .collect();
        LoadedDataset {
            manifest: DatasetManifest {
                root: PathBuf::from("memory://"),
                split: Split::Train,
                scenes,
                seat_count: 3,
                class_names: vec![],
            },
            images,
        }
    }

    fn toy_arch(variant: Variant) -> ArchConfig {
        ArchConfig {
            input_height: 16,
            input_width: 16,
            input_channels: 1,
            widths: vec![2, 4],
            latent_dim: 4,
            variant,
        }
    }

    fn toy_train_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            master_seed: 9,
            ..TrainConfig::default()
        }
    }

    fn codes(rows: &[&[f32]]) -> Array2<f32> {
        let d = rows[0].len();
        Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { learning_rate: f64::NAN, ..ok.clone() },
            TrainConfig { adam_beta1: 1.0, ..ok.clone() },
            TrainConfig { triplet_margin: -0.5, ..ok.clone() },
            TrainConfig { kl_weight: -1.0, ..ok.clone() },
            TrainConfig {
                augment: Some(AugmentSpec { ops: vec![AugmentOp::Flip] }),
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn loss_mode_parses_and_displays() {
        assert_eq!("impossible".parse::<LossMode>().unwrap(), LossMode::Impossible);
        assert_eq!("vanilla".parse::<LossMode>().unwrap(), LossMode::Vanilla);
        assert!("other".parse::<LossMode>().is_err());
        assert_eq!(LossMode::Vanilla.to_string(), "vanilla");
    }

    #[test]
    fn triplet_loss_matches_hand_arithmetic() {
        let a = codes(&[&[0.0, 0.0]]);
        let p = codes(&[&[0.5f32.sqrt(), 0.0]]);
        let far = codes(&[&[2.0f32.sqrt(), 0.0]]);
        assert!(loss_triplet(&a, &p, &far, 1.0).unwrap().abs() < 1e-6);

        let p2 = codes(&[&[1.0, 0.0]]);
        let n2 = codes(&[&[0.0, 1.2f32.sqrt()]]);
        assert!((loss_triplet(&a, &p2, &n2, 1.0).unwrap() - 0.8).abs() < 1e-6);

        let same = codes(&[&[0.3, -0.4]]);
        assert!((loss_triplet(&a, &same, &same, 1.0).unwrap() - 1.0).abs() < 1e-9);
        assert!((loss_triplet(&a, &same, &same, 0.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn triplet_loss_sums_over_the_batch() {
        let a = codes(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let p = codes(&[&[1.0, 0.0], &[1.0, 1.5]]);
        let n = codes(&[&[0.2, 0.1], &[0.0, 0.0]]);
        let batch = loss_triplet(&a, &p, &n, 1.0).unwrap();
        let mut singles = 0.0;
        for i in 0..2 {
            let row = |m: &Array2<f32>| codes(&[&[m[(i, 0)], m[(i, 1)]]]);
            singles += loss_triplet(&row(&a), &row(&p), &row(&n), 1.0).unwrap();
        }
        assert!((batch - singles).abs() < 1e-9);
    }

    #[test]
    fn satisfied_triplets_contribute_zero_gradient() {
        let a = codes(&[&[0.0, 0.0]]);
        let p = codes(&[&[0.1, 0.0]]);
        let n = codes(&[&[5.0, 0.0]]);
        let (loss, da, dp, dn) = triplet_grads(a.view(), p.view(), n.view(), 1.0);
        assert_eq!(loss, 0.0);
        assert!(da.iter().chain(dp.iter()).chain(dn.iter()).all(|&g| g == 0.0));
    }

    #[test]
    fn active_triplet_gradient_matches_finite_differences() {
        let a = codes(&[&[0.3, -0.2, 0.5]]);
        let p = codes(&[&[0.9, 0.1, -0.4]]);
        let n = codes(&[&[0.4, -0.1, 0.6]]);
        let (loss, da, dp, dn) = triplet_grads(a.view(), p.view(), n.view(), 1.0);
        assert!(loss > 0.0, "triplet must be active for this check");

        let h = 1e-3f32;
        let eval = |a: &Array2<f32>, p: &Array2<f32>, n: &Array2<f32>| {
            loss_triplet(a, p, n, 1.0).unwrap()
        };
        for (m, grad) in [(&a, &da), (&p, &dp), (&n, &dn)] {
            for j in 0..3 {
                let mut up = m.clone();
                let mut down = m.clone();
                up[(0, j)] += h;
                down[(0, j)] -= h;
                let (fu, fd) = match (std::ptr::eq(m, &a), std::ptr::eq(m, &p)) {
                    (true, _) => (eval(&up, &p, &n), eval(&down, &p, &n)),
                    (_, true) => (eval(&a, &up, &n), eval(&a, &down, &n)),
                    _ => (eval(&a, &p, &up), eval(&a, &p, &down)),
                };
                let fd_grad = (fu - fd) / (2.0 * h as f64);
                let an = grad[(0, j)] as f64;
                assert!(
                    (fd_grad - an).abs() < 1e-3,
                    "coordinate {j}: fd {fd_grad}, analytic {an}"
                );
            }
        }
    }

    #[test]
    fn identity_model_scores_zero_on_equal_pairs() {
        let imgs: Vec<ImageTensor> = (0..2).map(|k| image_for(k, 0, 16)).collect();
        let batch = PairBatch::new(imgs.clone(), imgs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = loss_recon_pair(&IdentityStub, &batch, &mut rng).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn pair_loss_is_additive_over_the_batch() {
        let model = EncoderDecoder::new(toy_arch(Variant::Ae), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs: Vec<(ImageTensor, ImageTensor)> = (0..2)
            .map(|k| (image_for(k, 0, 16), image_for(k, 1, 16)))
            .collect();
        let both = PairBatch::new(
            pairs.iter().map(|p| p.0.clone()).collect(),
            pairs.iter().map(|p| p.1.clone()).collect(),
        )
        .unwrap();
        let batch_loss = loss_recon_pair(&model, &both, &mut rng).unwrap();
        let mut single_sum = 0.0;
        for (input, target) in &pairs {
            let single = PairBatch::new(vec![input.clone()], vec![target.clone()]).unwrap();
            single_sum += loss_recon_pair(&model, &single, &mut rng).unwrap();
        }
        assert!(
            (batch_loss - single_sum).abs() < 1e-6,
            "batch {batch_loss} vs singles {single_sum}"
        );
    }

    #[test]
    fn triplet_recon_equals_sum_of_member_pair_losses() {
        let model = EncoderDecoder::new(toy_arch(Variant::Tae), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let member = |k: usize| {
            PairBatch::new(vec![image_for(k, 0, 16)], vec![image_for(k, 1, 16)]).unwrap()
        };
        let batch = TripletBatch::new(member(0), member(1), member(2)).unwrap();
        let triplet = loss_recon_triplet(&model, &batch, &mut rng).unwrap();
        let sum: f64 = (0..3)
            .map(|k| loss_recon_pair(&model, &member(k), &mut rng).unwrap())
            .sum();
        assert!((triplet - sum).abs() < 1e-9);

        let same = TripletBatch::new(member(1), member(1), member(1)).unwrap();
        let tripled = loss_recon_triplet(&model, &same, &mut rng).unwrap();
        let single = loss_recon_pair(&model, &member(1), &mut rng).unwrap();
        assert!((tripled - 3.0 * single).abs() < 1e-9);
    }

    #[test]
    fn total_loss_components_always_sum_exactly() {
        let config = toy_train_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let member = |k: usize| {
            PairBatch::new(vec![image_for(k, 0, 16)], vec![image_for(k, 1, 16)]).unwrap()
        };

        let tae = EncoderDecoder::new(toy_arch(Variant::Tae), 7).unwrap();
        let batch = LossBatch::Triplets(
            TripletBatch::new(member(0), member(1), member(2)).unwrap(),
        );
        let c = total_loss(&tae, &batch, &config, &mut rng).unwrap();
        assert!((c.total - (c.recon + c.triplet + config.kl_weight * c.kl)).abs() < 1e-12);

        let vae = EncoderDecoder::new(toy_arch(Variant::Vae), 7).unwrap();
        let pair_batch = LossBatch::Pairs(member(0));
        let c = total_loss(&vae, &pair_batch, &config, &mut rng).unwrap();
        assert!(c.kl > 0.0);
        assert!((c.total - (c.recon + c.triplet + config.kl_weight * c.kl)).abs() < 1e-12);

        let beta_zero = TrainConfig { kl_weight: 0.0, ..config.clone() };
        let c = total_loss(&vae, &pair_batch, &beta_zero, &mut rng).unwrap();
        assert_eq!(c.total, c.recon);
    }

    #[test]
    fn total_loss_tae_is_pure_reconstruction_when_margin_is_met() {
        // anchor and positive share identical inputs, so their distance is
        // zero; with margin zero the hinge vanishes unless the negative
        // coincides too
        let config = TrainConfig { triplet_margin: 0.0, ..toy_train_config() };
        let model = EncoderDecoder::new(toy_arch(Variant::Tae), 11).unwrap();
        let member = |k: usize| {
            PairBatch::new(vec![image_for(k, 0, 16)], vec![image_for(k, 1, 16)]).unwrap()
        };
        let batch = LossBatch::Triplets(
            TripletBatch::new(member(0), member(0), member(2)).unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = total_loss(&model, &batch, &config, &mut rng).unwrap();
        assert_eq!(c.triplet, 0.0);
        assert_eq!(c.total, c.recon);
    }

    #[test]
    fn total_loss_rejects_variant_batch_mismatch() {
        let config = toy_train_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let member = |k: usize| {
            PairBatch::new(vec![image_for(k, 0, 16)], vec![image_for(k, 1, 16)]).unwrap()
        };
        let tae = EncoderDecoder::new(toy_arch(Variant::Tae), 1).unwrap();
        let err = total_loss(&tae, &LossBatch::Pairs(member(0)), &config, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));

        let ae = EncoderDecoder::new(toy_arch(Variant::Ae), 1).unwrap();
        let triplets = LossBatch::Triplets(
            TripletBatch::new(member(0), member(1), member(2)).unwrap(),
        );
        let err = total_loss(&ae, &triplets, &config, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let data = toy_dataset(3);
        let arch = toy_arch(Variant::Ae);
        let config = toy_train_config();
        let (model_a, hist_a) = train(&data, &arch, &config).unwrap();
        let (model_b, hist_b) = train(&data, &arch, &config).unwrap();
        assert_eq!(hist_a.steps.len(), hist_b.steps.len());
        for (a, b) in hist_a.steps.iter().zip(hist_b.steps.iter()) {
            assert_eq!(a.recon, b.recon);
            assert_eq!(a.total, b.total);
        }
        assert_eq!(model_a.fingerprint(), model_b.fingerprint());
    }

    #[test]
    fn history_lengths_match_epochs_and_steps() {
        let data = toy_dataset(3);
        let config = TrainConfig { batch_size: 3, ..toy_train_config() };
        let (_, hist) = train(&data, &toy_arch(Variant::Ae), &config).unwrap();
        assert_eq!(hist.epochs.len(), 2);
        // 4 scenes at batch 3 => 2 steps per epoch
        assert_eq!(hist.steps.len(), 4);
        assert_eq!(hist.epochs[0].epoch, 1);
        assert_eq!(hist.steps.last().unwrap().epoch, 2);
        for e in &hist.epochs {
            let step_total: f64 = hist
                .steps
                .iter()
                .filter(|s| s.epoch == e.epoch)
                .map(|s| s.total)
                .sum();
            assert!((e.total - step_total).abs() < 1e-12);
        }
    }

    #[test]
    fn tae_training_runs_and_logs_exact_decomposition() {
        let data = toy_dataset(3);
        let config = toy_train_config();
        let (_, hist) = train(&data, &toy_arch(Variant::Tae), &config).unwrap();
        assert!(!hist.steps.is_empty());
        for s in &hist.steps {
            assert!(s.recon >= 0.0 && s.triplet >= 0.0);
            assert!((s.total - (s.recon + s.triplet + config.kl_weight * s.kl)).abs() < 1e-9);
        }
    }

    #[test]
    fn vanilla_mode_runs_where_impossible_mode_cannot() {
        let data = toy_dataset(1);
        let arch = toy_arch(Variant::Ae);
        let vanilla = TrainConfig {
            loss_mode: LossMode::Vanilla,
            epochs: 1,
            ..toy_train_config()
        };
        train(&data, &arch, &vanilla).unwrap();

        let impossible = TrainConfig { loss_mode: LossMode::Impossible, ..vanilla };
        let err = train(&data, &arch, &impossible).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn augmented_training_draws_pairs_from_single_variants() {
        let data = toy_dataset(1);
        let config = TrainConfig {
            epochs: 1,
            augment: Some(AugmentSpec {
                ops: vec![
                    AugmentOp::Gain { lo: 0.8, hi: 1.2 },
                    AugmentOp::Bias { lo: -0.1, hi: 0.1 },
                ],
            }),
            ..toy_train_config()
        };
        let (_, hist) = train(&data, &toy_arch(Variant::Ae), &config).unwrap();
        assert_eq!(hist.epochs.len(), 1);
        assert!(hist.steps.iter().all(|s| s.total.is_finite()));
    }

    #[test]
    fn exploding_vae_aborts_with_a_numeric_failure() {
        let data = toy_dataset(3);
        let config = TrainConfig {
            epochs: 8,
            learning_rate: 1e5,
            ..toy_train_config()
        };
        let err = train(&data, &toy_arch(Variant::Vae), &config).unwrap_err();
        match err {
            Error::NonFinite { epoch, step, detail } => {
                assert!(epoch >= 1 && step >= 1);
                assert!(detail.contains("kl"), "{detail}");
            }
            other => panic!("expected a numeric failure, got {other}"),
        }
    }

    #[test]
    fn epoch_csv_roundtrips_through_disk() {
        let data = toy_dataset(3);
        let (_, hist) = train(&data, &toy_arch(Variant::Ae), &toy_train_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        hist.write_epoch_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,recon,triplet,kl,total,wall_seconds");
        assert_eq!(lines.len(), 1 + hist.epochs.len());
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first[0], "1");
        let recon: f64 = first[1].parse().unwrap();
        assert!((recon - hist.epochs[0].recon).abs() < 1e-9);

        let steps_path = dir.path().join("steps.csv");
        hist.write_step_csv(&steps_path).unwrap();
        let text = std::fs::read_to_string(&steps_path).unwrap();
        assert!(text.starts_with("epoch,step,recon,triplet,kl,total\n"));
    }

    #[test]
    fn checkpoint_carries_training_metadata() {
        let config = toy_train_config();
        let model = EncoderDecoder::new(toy_arch(Variant::Ae), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model
            .save_checkpoint_with_meta(&path, Some(checkpoint_metadata(&config).unwrap()))
            .unwrap();
        let meta = crate::model::read_checkpoint_metadata(&path).unwrap().unwrap();
        assert_eq!(meta["train_config"]["loss_mode"], "impossible");
        assert_eq!(meta["train_config"]["batch_size"], 4);
        EncoderDecoder::load_checkpoint(&path).unwrap();
    }

    #[test]
    fn loss_decreases_on_a_small_run() {
        let data = toy_dataset(4);
        let config = TrainConfig {
            epochs: 8,
            learning_rate: 2e-3,
            master_seed: 5,
            ..toy_train_config()
        };
        let (_, hist) = train(&data, &toy_arch(Variant::Ae), &config).unwrap();
        let first = hist.epochs.first().unwrap().total;
        let last = hist.epochs.last().unwrap().total;
        assert!(last < first, "no progress: first {first}, last {last}");
    }
}
