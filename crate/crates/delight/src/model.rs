//! Convolutional encoder/decoder pair with three operating variants.
//!
//! The encoder is a ladder of 3x3 convolution + ReLU + 2x2 max-pool stages
//! followed by a dense head; the decoder mirrors it with nearest-neighbour
//! upsampling before each convolution and a sigmoid on the final layer so
//! every output pixel lands in `[0, 1]`.
//!
//! Variants share the architecture:
//! * `Ae`: plain deterministic autoencoder.
//! * `Vae`: the head emits `(mu, log sigma^2)` and the decoder consumes a
//!   reparameterized sample `z = mu + sigma * eps`.
//! * `Tae`: identical graph to `Ae`; the triplet term is added by the
//!   training loss, not the architecture.

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::nn::{
    maxpool2, maxpool2_backward, relu_backward_inplace, relu_inplace, sigmoid_inplace, upsample_nearest2,
    upsample_nearest2_backward, Conv2d, Conv2dGrad, Dense, DenseGrad,
};
use ndarray::{s, Array1, Array2, Array4, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Which loss family the model is trained under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ae,
    Vae,
    Tae,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Variant::Ae => "ae",
            Variant::Vae => "vae",
            Variant::Tae => "tae",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ae" => Ok(Variant::Ae),
            "vae" => Ok(Variant::Vae),
            "tae" => Ok(Variant::Tae),
            other => Err(Error::Config(format!(
                "unknown model variant {other:?}, expected ae, vae or tae"
            ))),
        }
    }
}

/// Architecture hyperparameters. `widths` lists the channel count of each
/// encoder stage; the decoder mirrors it in reverse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub widths: Vec<usize>,
    pub latent_dim: usize,
    pub variant: Variant,
}

impl ArchConfig {
    pub fn new(input: (usize, usize, usize), variant: Variant) -> Self {
        Self {
            input_height: input.0,
            input_width: input.1,
            input_channels: input.2,
            widths: vec![16, 32, 64, 128],
            latent_dim: 16,
            variant,
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("widths must list at least one stage".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be at least 1".into()));
        }
        let factor = 1usize << self.stages();
        if self.input_height % factor != 0 || self.input_width % factor != 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by 2^{} (one halving per stage)",
                self.input_height,
                self.input_width,
                self.stages()
            )));
        }
        if self.input_height / factor == 0 || self.input_width / factor == 0 {
            return Err(Error::Config(format!(
                "input {}x{} collapses to zero after {} halvings",
                self.input_height,
                self.input_width,
                self.stages()
            )));
        }
        Ok(())
    }

    /// Spatial size of the deepest feature map.
    fn bottleneck_hw(&self) -> (usize, usize) {
        let factor = 1usize << self.stages();
        (self.input_height / factor, self.input_width / factor)
    }

    fn bottleneck_flat(&self) -> usize {
        let (h, w) = self.bottleneck_hw();
        self.widths[self.stages() - 1] * h * w
    }

    /// Encoder head width: doubled for the VAE's `(mu, log sigma^2)` split.
    fn head_dim(&self) -> usize {
        match self.variant {
            Variant::Vae => 2 * self.latent_dim,
            _ => self.latent_dim,
        }
    }
}

/// Latent representation of one image.
#[derive(Debug, Clone)]
pub enum LatentCode {
    /// Deterministic code (AE and TAE variants).
    Plain { z: Array1<f32> },
    /// Gaussian posterior parameters plus the reparameterized sample.
    Gaussian {
        mu: Array1<f32>,
        logvar: Array1<f32>,
        z: Array1<f32>,
    },
}

impl LatentCode {
    /// The vector the decoder consumes.
    pub fn z(&self) -> &Array1<f32> {
        match self {
            LatentCode::Plain { z } | LatentCode::Gaussian { z, .. } => z,
        }
    }

    /// The deterministic vector used for retrieval: `z` for plain codes,
    /// `mu` for Gaussian ones.
    pub fn embedding(&self) -> &Array1<f32> {
        match self {
            LatentCode::Plain { z } => z,
            LatentCode::Gaussian { mu, .. } => mu,
        }
    }
}

/// Closed-form KL divergence of the code's posterior from the unit Gaussian.
///
/// Only Gaussian codes carry a posterior; plain codes are a contract error.
pub fn kl_divergence(code: &LatentCode) -> Result<f64> {
    match code {
        LatentCode::Plain { .. } => Err(Error::Contract(
            "kl_divergence requires a Gaussian latent code".into(),
        )),
        LatentCode::Gaussian { mu, logvar, .. } => {
            Ok(kl_terms(mu.view(), logvar.view()))
        }
    }
}

/// `0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1)` over every element.
pub(crate) fn kl_terms(mu: ArrayView1<f32>, logvar: ArrayView1<f32>) -> f64 {
    mu.iter()
        .zip(logvar.iter())
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + lv.exp() - lv - 1.0)
        })
        .sum()
}

/// Encoder-side activations cached for the backward pass.
#[derive(Debug, Clone)]
struct EncodeCache {
    /// Input to each stage's convolution; entry 0 is the batch itself.
    stage_inputs: Vec<Array4<f32>>,
    /// Pre-ReLU convolution outputs.
    preacts: Vec<Array4<f32>>,
    pool_args: Vec<Array4<u8>>,
    /// Flattened bottleneck, the dense head's input.
    flat: Array2<f32>,
}

/// Everything produced by one training forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct ForwardState {
    enc: EncodeCache,
    /// Dense head output: `[n, d]`, or `[n, 2d]` for the VAE.
    head: Array2<f32>,
    pub mu: Option<Array2<f32>>,
    pub logvar: Option<Array2<f32>>,
    eps: Option<Array2<f32>>,
    /// Decoder input, one row per image.
    pub z: Array2<f32>,
    dec_dense_preact: Array2<f32>,
    /// Input to each decoder stage's upsampling.
    dec_stage_inputs: Vec<Array4<f32>>,
    /// Pre-activation decoder convolution outputs.
    dec_preacts: Vec<Array4<f32>>,
    pub recon: Array4<f32>,
}

/// Parameter gradients, mirroring [`EncoderDecoder`]'s tensor layout.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    enc_convs: Vec<Conv2dGrad>,
    enc_head: DenseGrad,
    dec_dense: DenseGrad,
    dec_convs: Vec<Conv2dGrad>,
}

impl ModelGrads {
    /// Flat views in the same order as [`EncoderDecoder::param_slices`].
    pub fn slices(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for g in &self.enc_convs {
            out.push(g.weight.as_slice().expect("contiguous"));
            out.push(g.bias.as_slice().expect("contiguous"));
        }
        out.push(self.enc_head.weight.as_slice().expect("contiguous"));
        out.push(self.enc_head.bias.as_slice().expect("contiguous"));
        out.push(self.dec_dense.weight.as_slice().expect("contiguous"));
        out.push(self.dec_dense.bias.as_slice().expect("contiguous"));
        for g in &self.dec_convs {
            out.push(g.weight.as_slice().expect("contiguous"));
            out.push(g.bias.as_slice().expect("contiguous"));
        }
        out
    }
}

/// The full parameter set plus the architecture it instantiates.
#[derive(Debug, Clone)]
pub struct EncoderDecoder {
    pub config: ArchConfig,
    /// Seed the parameters were initialised from; recorded in checkpoints.
    pub seed: u64,
    enc_convs: Vec<Conv2d>,
    enc_head: Dense,
    dec_dense: Dense,
    dec_convs: Vec<Conv2d>,
}

impl EncoderDecoder {
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.stages();

        let mut enc_convs = Vec::with_capacity(s);
        let mut cin = config.input_channels;
        for &w in &config.widths {
            enc_convs.push(Conv2d::he_init(cin, w, 3, &mut rng));
            cin = w;
        }
        let enc_head = Dense::xavier_init(config.bottleneck_flat(), config.head_dim(), &mut rng);
        let dec_dense = Dense::he_init(config.latent_dim, config.bottleneck_flat(), &mut rng);

        let mut dec_convs = Vec::with_capacity(s);
        for j in 0..s {
            let from = config.widths[s - 1 - j];
            let (to, last) = if j + 1 == s {
                (config.input_channels, true)
            } else {
                (config.widths[s - 2 - j], false)
            };
            dec_convs.push(if last {
                Conv2d::xavier_init(from, to, 3, &mut rng)
            } else {
                Conv2d::he_init(from, to, 3, &mut rng)
            });
        }

        Ok(Self {
            config,
            seed,
            enc_convs,
            enc_head,
            dec_dense,
            dec_convs,
        })
    }

    /// Mutable flat views of every parameter tensor, in a fixed order that
    /// matches [`ModelGrads::slices`]; this is the optimizer's contract.
    pub fn param_slices(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for conv in &mut self.enc_convs {
            let Conv2d { weight, bias, .. } = conv;
            out.push(weight.as_slice_mut().expect("contiguous"));
            out.push(bias.as_slice_mut().expect("contiguous"));
        }
        let Dense { weight, bias } = &mut self.enc_head;
        out.push(weight.as_slice_mut().expect("contiguous"));
        out.push(bias.as_slice_mut().expect("contiguous"));
        let Dense { weight, bias } = &mut self.dec_dense;
        out.push(weight.as_slice_mut().expect("contiguous"));
        out.push(bias.as_slice_mut().expect("contiguous"));
        for conv in &mut self.dec_convs {
            let Conv2d { weight, bias, .. } = conv;
            out.push(weight.as_slice_mut().expect("contiguous"));
            out.push(bias.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        let conv = |c: &Conv2d| c.weight.len() + c.bias.len();
        let dense = |d: &Dense| d.weight.len() + d.bias.len();
        self.enc_convs.iter().map(conv).sum::<usize>()
            + self.dec_convs.iter().map(conv).sum::<usize>()
            + dense(&self.enc_head)
            + dense(&self.dec_dense)
    }

    fn check_batch_shape(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let cfg = &self.config;
        if (c, h, w) != (cfg.input_channels, cfg.input_height, cfg.input_width) {
            return Err(Error::Contract(format!(
                "input shape {c}x{h}x{w} does not match configured {}x{}x{}",
                cfg.input_channels, cfg.input_height, cfg.input_width
            )));
        }
        Ok(())
    }

    fn encode_cache(&self, x: &Array4<f32>) -> (Array2<f32>, EncodeCache) {
        let s = self.config.stages();
        let mut stage_inputs = Vec::with_capacity(s + 1);
        let mut preacts = Vec::with_capacity(s);
        let mut pool_args = Vec::with_capacity(s);
        stage_inputs.push(x.clone());
        for i in 0..s {
            let a = self.enc_convs[i].forward(&stage_inputs[i]);
            let mut r = a.clone();
            relu_inplace(&mut r);
            let (pooled, arg) = maxpool2(&r);
            preacts.push(a);
            pool_args.push(arg);
            stage_inputs.push(pooled);
        }
        let bottom = stage_inputs.last().expect("at least the input");
        let n = bottom.dim().0;
        let flat = bottom
            .to_shape((n, self.config.bottleneck_flat()))
            .expect("contiguous")
            .to_owned();
        let head = self.enc_head.forward(&flat);
        (
            head,
            EncodeCache {
                stage_inputs,
                preacts,
                pool_args,
                flat,
            },
        )
    }

    /// Deterministic per-image embeddings: the latent code for AE/TAE, the
    /// posterior mean for VAE. One row per batch image.
    pub fn embed_batch(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        self.check_batch_shape(x)?;
        let (head, _) = self.encode_cache(x);
        Ok(match self.config.variant {
            Variant::Vae => head.slice(s![.., ..self.config.latent_dim]).to_owned(),
            _ => head,
        })
    }

    /// Encodes one image. The VAE draws its reparameterization noise from
    /// `rng`; the other variants never touch it.
    pub fn encode<R: Rng>(&self, x: &ImageTensor, rng: &mut R) -> Result<LatentCode> {
        let batch = batch_from_images(std::slice::from_ref(x));
        self.check_batch_shape(&batch)?;
        let (head, _) = self.encode_cache(&batch);
        match self.config.variant {
            Variant::Vae => {
                let d = self.config.latent_dim;
                let mu = head.slice(s![0, ..d]).to_owned();
                let logvar = head.slice(s![0, d..]).to_owned();
                let eps: Array1<f32> = Array1::from_shape_fn(d, |_| {
                    rand_distr::StandardNormal.sample(rng)
                });
                let z = &mu + &(logvar.mapv(|lv| (0.5 * lv).exp()) * &eps);
                Ok(LatentCode::Gaussian { mu, logvar, z })
            }
            _ => Ok(LatentCode::Plain {
                z: head.index_axis(Axis(0), 0).to_owned(),
            }),
        }
    }

    fn decode_from_z(&self, z: &Array2<f32>) -> (Array2<f32>, Vec<Array4<f32>>, Vec<Array4<f32>>, Array4<f32>) {
        let s = self.config.stages();
        let n = z.dim().0;
        let (bh, bw) = self.config.bottleneck_hw();
        let cs = self.config.widths[s - 1];

        let g0 = self.dec_dense.forward(z);
        let mut r0 = g0.clone();
        r0.mapv_inplace(|v| v.max(0.0));
        let mut t = r0.into_shape_with_order((n, cs, bh, bw)).expect("contiguous");

        let mut stage_inputs = Vec::with_capacity(s);
        let mut preacts = Vec::with_capacity(s);
        for j in 0..s {
            stage_inputs.push(t.clone());
            let u = upsample_nearest2(&t);
            let mut a = self.dec_convs[j].forward(&u);
            if j + 1 == s {
                sigmoid_inplace(&mut a);
                preacts.push(Array4::zeros((0, 0, 0, 0)));
                t = a;
            } else {
                preacts.push(a.clone());
                relu_inplace(&mut a);
                t = a;
            }
        }
        (g0, stage_inputs, preacts, t)
    }

    /// Decodes one latent code to an image.
    pub fn decode(&self, code: &LatentCode) -> Result<ImageTensor> {
        let z = code.z();
        if z.len() != self.config.latent_dim {
            return Err(Error::Contract(format!(
                "latent length {} does not match configured {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let z2 = z.clone().insert_axis(Axis(0));
        let (_, _, _, recon) = self.decode_from_z(&z2);
        Ok(image_from_batch(&recon, 0))
    }

    /// Full forward pass over a batch, caching everything backward needs.
    pub fn forward_train<R: Rng>(&self, x: &Array4<f32>, rng: &mut R) -> Result<ForwardState> {
        self.check_batch_shape(x)?;
        let (head, enc) = self.encode_cache(x);
        let n = x.dim().0;
        let d = self.config.latent_dim;

        let (mu, logvar, eps, z) = match self.config.variant {
            Variant::Vae => {
                let mu = head.slice(s![.., ..d]).to_owned();
                let logvar = head.slice(s![.., d..]).to_owned();
                let eps: Array2<f32> =
                    Array2::from_shape_fn((n, d), |_| rand_distr::StandardNormal.sample(rng));
                let sigma = logvar.mapv(|lv| (0.5 * lv).exp());
                let z = &mu + &(&sigma * &eps);
                (Some(mu), Some(logvar), Some(eps), z)
            }
            _ => (None, None, None, head.clone()),
        };

        let (dec_dense_preact, dec_stage_inputs, dec_preacts, recon) = self.decode_from_z(&z);
        Ok(ForwardState {
            enc,
            head,
            mu,
            logvar,
            eps,
            z,
            dec_dense_preact,
            dec_stage_inputs,
            dec_preacts,
            recon,
        })
    }

    /// Backward pass. `drecon` is the loss gradient w.r.t. the
    /// reconstruction; `dz_extra`, `dmu_extra` and `dlogvar_extra` are
    /// additional loss gradients entering directly at the latent layer
    /// (triplet and KL terms).
    pub fn backward(
        &self,
        state: &ForwardState,
        drecon: &Array4<f32>,
        dz_extra: Option<&Array2<f32>>,
        dmu_extra: Option<&Array2<f32>>,
        dlogvar_extra: Option<&Array2<f32>>,
    ) -> ModelGrads {
        let s = self.config.stages();
        let n = state.z.dim().0;

        let mut da = drecon.clone();
        for (d, &y) in da.iter_mut().zip(state.recon.iter()) {
            *d *= y * (1.0 - y);
        }

        let mut dec_convs: Vec<Option<Conv2dGrad>> = (0..s).map(|_| None).collect();
        let mut dt: Array4<f32> = da;
        for j in (0..s).rev() {
            let u = upsample_nearest2(&state.dec_stage_inputs[j]);
            let (du, grad) = self.dec_convs[j].backward(&u, &dt);
            dec_convs[j] = Some(grad);
            dt = upsample_nearest2_backward(&du);
            if j > 0 {
                relu_backward_inplace(&mut dt, &state.dec_preacts[j - 1]);
            }
        }
        let mut dg0 = dt
            .to_shape((n, self.config.bottleneck_flat()))
            .expect("contiguous")
            .to_owned();
        for (d, &g) in dg0.iter_mut().zip(state.dec_dense_preact.iter()) {
            if g <= 0.0 {
                *d = 0.0;
            }
        }
        let (mut dz, dec_dense) = self.dec_dense.backward(&state.z, &dg0);
        if let Some(extra) = dz_extra {
            dz += extra;
        }

        let dhead = match self.config.variant {
            Variant::Vae => {
                let logvar = state.logvar.as_ref().expect("VAE forward caches logvar");
                let eps = state.eps.as_ref().expect("VAE forward caches eps");
                let mut dmu = dz.clone();
                if let Some(extra) = dmu_extra {
                    dmu += extra;
                }
                let mut dlogvar = &dz * eps * &logvar.mapv(|lv| 0.5 * (0.5 * lv).exp());
                if let Some(extra) = dlogvar_extra {
                    dlogvar += extra;
                }
                let mut dhead = Array2::<f32>::zeros(state.head.raw_dim());
                let d = self.config.latent_dim;
                dhead.slice_mut(s![.., ..d]).assign(&dmu);
                dhead.slice_mut(s![.., d..]).assign(&dlogvar);
                dhead
            }
            _ => dz,
        };

        let (dflat, enc_head) = self.enc_head.backward(&state.enc.flat, &dhead);
        let bottom_dim = state.enc.stage_inputs[s].dim();
        let mut dx = dflat
            .to_shape(bottom_dim)
            .expect("contiguous")
            .to_owned();

        let mut enc_convs: Vec<Option<Conv2dGrad>> = (0..s).map(|_| None).collect();
        for i in (0..s).rev() {
            let pre_pool = state.enc.preacts[i].dim();
            let mut dr = maxpool2_backward(&dx, &state.enc.pool_args[i], pre_pool.2, pre_pool.3);
            relu_backward_inplace(&mut dr, &state.enc.preacts[i]);
            let (dxi, grad) = self.enc_convs[i].backward(&state.enc.stage_inputs[i], &dr);
            enc_convs[i] = Some(grad);
            dx = dxi;
        }

        ModelGrads {
            enc_convs: enc_convs.into_iter().map(|g| g.expect("filled")).collect(),
            enc_head,
            dec_dense,
            dec_convs: dec_convs.into_iter().map(|g| g.expect("filled")).collect(),
        }
    }

    /// Content hash of the current weights; identifies which model built a
    /// derived artifact such as a latent index.
    pub fn fingerprint(&self) -> String {
        fingerprint_tensors(&self.tensor_table())
    }

    /// Serializes config, seed and all weights as versioned JSON with a
    /// content fingerprint.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.save_checkpoint_with_meta(path, None)
    }

    /// Like [`save_checkpoint`](Self::save_checkpoint), additionally
    /// embedding a free-form metadata document (training hyperparameters
    /// and the like).
    pub fn save_checkpoint_with_meta(
        &self,
        path: &Path,
        metadata: Option<serde_json::Value>,
    ) -> Result<()> {
        let tensors = self.tensor_table();
        let fingerprint = fingerprint_tensors(&tensors);
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            metadata,
            tensors,
            fingerprint,
        };
        let json = serde_json::to_string(&file)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, validating version, shapes, finiteness and the
    /// stored fingerprint.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text)?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint {} has format version {}, expected {}",
                path.display(),
                file.format_version,
                CHECKPOINT_VERSION
            )));
        }
        if fingerprint_tensors(&file.tensors) != file.fingerprint {
            return Err(Error::Data(format!(
                "checkpoint {} fingerprint mismatch: weights corrupted or edited",
                path.display()
            )));
        }
        let mut model = Self::new(file.config, file.seed)?;
        let expected = model.tensor_table();
        if expected.len() != file.tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint {} has {} tensors, architecture expects {}",
                path.display(),
                file.tensors.len(),
                expected.len()
            )));
        }
        for (have, want) in file.tensors.iter().zip(expected.iter()) {
            if have.name != want.name || have.shape != want.shape {
                return Err(Error::Data(format!(
                    "checkpoint tensor {} (shape {:?}) does not match expected {} (shape {:?})",
                    have.name, have.shape, want.name, want.shape
                )));
            }
            if have.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "checkpoint tensor {} contains non-finite values",
                    have.name
                )));
            }
        }
        for (slot, slice) in model.param_slices().into_iter().enumerate() {
            slice.copy_from_slice(&file.tensors[slot].data);
        }
        Ok(model)
    }

    fn tensor_table(&self) -> Vec<TensorData> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            out.push(TensorData {
                name,
                shape,
                data: data.to_vec(),
            });
        };
        for (i, c) in self.enc_convs.iter().enumerate() {
            push(
                format!("enc_conv{i}.weight"),
                c.weight.shape().to_vec(),
                c.weight.as_slice().expect("contiguous"),
            );
            push(format!("enc_conv{i}.bias"), vec![c.bias.len()], c.bias.as_slice().expect("contiguous"));
        }
        push(
            "enc_head.weight".into(),
            self.enc_head.weight.shape().to_vec(),
            self.enc_head.weight.as_slice().expect("contiguous"),
        );
        push("enc_head.bias".into(), vec![self.enc_head.bias.len()], self.enc_head.bias.as_slice().expect("contiguous"));
        push(
            "dec_dense.weight".into(),
            self.dec_dense.weight.shape().to_vec(),
            self.dec_dense.weight.as_slice().expect("contiguous"),
        );
        push("dec_dense.bias".into(), vec![self.dec_dense.bias.len()], self.dec_dense.bias.as_slice().expect("contiguous"));
        for (j, c) in self.dec_convs.iter().enumerate() {
            push(
                format!("dec_conv{j}.weight"),
                c.weight.shape().to_vec(),
                c.weight.as_slice().expect("contiguous"),
            );
            push(format!("dec_conv{j}.bias"), vec![c.bias.len()], c.bias.as_slice().expect("contiguous"));
        }
        out
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorData {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ArchConfig,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<serde_json::Value>,
    tensors: Vec<TensorData>,
    fingerprint: String,
}

/// Reads only the metadata document of a checkpoint, if any.
pub fn read_checkpoint_metadata(path: &Path) -> Result<Option<serde_json::Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    Ok(file.metadata)
}

fn fingerprint_tensors(tensors: &[TensorData]) -> String {
    let mut hasher = Sha256::new();
    for t in tensors {
        hasher.update(t.name.as_bytes());
        for &d in &t.shape {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in &t.data {
            hasher.update(v.to_le_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}

/// Stacks images into the `[n, c, h, w]` batch layout the network uses.
pub fn batch_from_images(images: &[ImageTensor]) -> Array4<f32> {
    assert!(!images.is_empty(), "batch must contain at least one image");
    let (h, w, c) = images[0].shape();
    let mut out = Array4::<f32>::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        let data = img.data();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(n, ch, y, x)] = data[(y, x, ch)];
                }
            }
        }
    }
    out
}

/// Extracts batch element `n` back into image layout, clamping to `[0, 1]`.
pub fn image_from_batch(batch: &Array4<f32>, n: usize) -> ImageTensor {
    let (_, c, h, w) = batch.dim();
    let arr = ndarray::Array3::from_shape_fn((h, w, c), |(y, x, ch)| batch[(n, ch, y, x)]);
    ImageTensor::from_clamped(arr)
}

/// Maps an input batch to a reconstruction batch.
///
/// The production implementation is [`EncoderDecoder`]. Loss and evaluation
/// code is written against this trait, so its contracts can also be
/// exercised with stub models (identity, constant output).
pub trait Reconstructor {
    fn reconstruct_batch(&self, x: &Array4<f32>, rng: &mut dyn rand::RngCore) -> Result<Array4<f32>>;
}

impl Reconstructor for EncoderDecoder {
    fn reconstruct_batch(&self, x: &Array4<f32>, mut rng: &mut dyn rand::RngCore) -> Result<Array4<f32>> {
        Ok(self.forward_train(x, &mut rng)?.recon)
    }
}

use rand_distr::Distribution;
