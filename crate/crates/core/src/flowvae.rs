//! Variational autoencoder over flow fields (and, for the state-action
//! baseline, over flat feature vectors). Retrieval uses posterior means only.

use std::path::Path;

use flowguide_numkit::{
    grad_check, AdamConfig, GradCheckConfig, GradCheckReport, Init, Layer, LayerParams, Optimizer, ParamBlock, Parameterized,
    Rng, Scalar, Sequential, Tensor,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::DatasetHandle;
use crate::error::{Error, Result};
use crate::flowfield::{FlowField, FlowSet};
use crate::hashing;
use crate::modelio::{read_file, Reader, Writer};

pub const VAE_MAGIC: &[u8; 4] = b"FVAE";
pub const LATENT_MAGIC: &[u8; 4] = b"LATn";

const CONV_C1: usize = 8;
const CONV_C2: usize = 16;

/// Row-major `N × dim` matrix of input or latent vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rows {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Rows {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_vecs(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut out = Self::new(dim);
        for r in rows {
            out.push(r)?;
        }
        Ok(out)
    }

    pub fn push(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Dimension(format!("row of length {} in a {}-wide table", row.len(), self.dim)));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn gather(&self, idx: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), self.dim], data).expect("gathered rows have the declared shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VaeArch {
    /// Two-channel `resolution × resolution` flow input, conv encoder, deconv decoder.
    Conv { resolution: usize },
    /// Flat input with one hidden layer on each side.
    Mlp { input_dim: usize, hidden: usize },
}

impl VaeArch {
    pub fn input_dim(&self) -> usize {
        match *self {
            VaeArch::Conv { resolution } => 2 * resolution * resolution,
            VaeArch::Mlp { input_dim, .. } => input_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            VaeArch::Conv { resolution } if resolution < 8 || resolution % 4 != 0 => Err(Error::Config(format!(
                "VAE flow resolution must be a multiple of 4 and at least 8, got {resolution}"
            ))),
            VaeArch::Mlp { input_dim, hidden } if input_dim == 0 || hidden == 0 => {
                Err(Error::Config("MLP VAE needs positive input and hidden sizes".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae<T: Scalar = f32> {
    pub arch: VaeArch,
    pub z: usize,
    /// Inputs are divided by this before encoding.
    pub norm: f32,
    pub beta: f32,
    encoder: Sequential<T>,
    mu: Sequential<T>,
    logvar: Sequential<T>,
    decoder: Sequential<T>,
}

/// The flow VAE used for retrieval.
pub type FlowVaeModel = Vae<f32>;

impl<T: Scalar> Vae<T> {
    pub fn new(arch: VaeArch, z: usize, norm: f32, beta: f32, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        if z == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        if !(beta >= 0.0) {
            return Err(Error::Config(format!("KL weight must be non-negative, got {beta}")));
        }
        let (encoder, feat, decoder) = match arch {
            VaeArch::Conv { resolution: r } => {
                let q = r / 4;
                let flat = CONV_C2 * q * q;
                let enc = Sequential::new("enc")
                    .push(Layer::Reshape(vec![2, r, r]))
                    .push(Layer::conv(2, CONV_C1, 4, 2, 1, Init::HeNormal, rng))
                    .push(Layer::Tanh)
                    .push(Layer::conv(CONV_C1, CONV_C2, 4, 2, 1, Init::HeNormal, rng))
                    .push(Layer::Tanh)
                    .push(Layer::Reshape(vec![flat]));
                let dec = Sequential::new("dec")
                    .push(Layer::linear(z, flat, Init::HeNormal, rng))
                    .push(Layer::Tanh)
                    .push(Layer::Reshape(vec![CONV_C2, q, q]))
                    .push(Layer::deconv(CONV_C2, CONV_C1, 4, 2, 1, Init::HeNormal, rng))
                    .push(Layer::Tanh)
                    .push(Layer::deconv(CONV_C1, 2, 4, 2, 1, Init::HeNormal, rng))
                    .push(Layer::Reshape(vec![2 * r * r]));
                (enc, flat, dec)
            }
            VaeArch::Mlp { input_dim, hidden } => {
                let enc = Sequential::new("enc")
                    .push(Layer::linear(input_dim, hidden, Init::HeNormal, rng))
                    .push(Layer::Tanh);
                let dec = Sequential::new("dec")
                    .push(Layer::linear(z, hidden, Init::HeNormal, rng))
                    .push(Layer::Tanh)
                    .push(Layer::linear(hidden, input_dim, Init::HeNormal, rng));
                (enc, hidden, dec)
            }
        };
        Ok(Self {
            arch,
            z,
            norm,
            beta,
            encoder,
            mu: Sequential::new("mu").push(Layer::linear(feat, z, Init::LecunNormal, rng)),
            logvar: Sequential::new("logvar").push(Layer::linear(feat, z, Init::Zeros, rng)),
            decoder,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn cast<U: Scalar>(&self) -> Vae<U> {
        Vae {
            arch: self.arch,
            z: self.z,
            norm: self.norm,
            beta: self.beta,
            encoder: self.encoder.cast(),
            mu: self.mu.cast(),
            logvar: self.logvar.cast(),
            decoder: self.decoder.cast(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.ndim() != 2 || x.dim(1) != self.input_dim() {
            return Err(Error::Dimension(format!(
                "VAE expects [B, {}] inputs, got {:?}",
                self.input_dim(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Posterior means `[B, Z]`.
    pub fn encode_mean(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let h = self.encoder.infer(x)?;
        Ok(self.mu.infer(&h)?)
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.decoder.infer(z)?)
    }

    /// Loss with latents `z = μ + exp(½·logvar)·eps`, without touching gradients.
    pub fn loss(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<VaeLoss> {
        self.check_input(x)?;
        let h = self.encoder.infer(x)?;
        let mu = self.mu.infer(&h)?;
        let lv = self.logvar.infer(&h)?;
        let z = reparameterize(&mu, &lv, eps)?;
        let xr = self.decoder.infer(&z)?;
        Ok(loss_parts(x, &xr, &mu, &lv, self.beta as f64).0)
    }

    /// Same loss as [`Vae::loss`]; also accumulates parameter gradients.
    pub fn loss_and_backward(&mut self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<VaeLoss> {
        self.check_input(x)?;
        let b = x.dim(0);
        let h = self.encoder.forward(x)?;
        let mu = self.mu.forward(&h)?;
        let lv = self.logvar.forward(&h)?;
        let z = reparameterize(&mu, &lv, eps)?;
        let xr = self.decoder.forward(&z)?;
        let (loss, grad_xr) = loss_parts(x, &xr, &mu, &lv, self.beta as f64);
        let grad_z = self.decoder.backward(&grad_xr)?;
        let kl_scale = T::of(self.beta as f64 / b as f64);
        let half = T::of(0.5);
        let mut gmu = grad_z.clone();
        let mut glv = grad_z;
        for i in 0..mu.len() {
            let m = mu.data()[i];
            let l = lv.data()[i];
            let e = eps.data()[i];
            gmu.data_mut()[i] = gmu.data()[i] + kl_scale * m;
            glv.data_mut()[i] = glv.data()[i] * e * half * (half * l).exp() + kl_scale * half * (l.exp() - T::one());
        }
        let mut gh = self.mu.backward(&gmu)?;
        gh.add_assign(&self.logvar.backward(&glv)?)?;
        self.encoder.backward(&gh)?;
        Ok(loss)
    }
}

fn reparameterize<T: Scalar>(mu: &Tensor<T>, lv: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if eps.shape() != mu.shape() {
        return Err(Error::Dimension(format!(
            "noise shape {:?} does not match latent shape {:?}",
            eps.shape(),
            mu.shape()
        )));
    }
    let half = T::of(0.5);
    let data = (0..mu.len())
        .map(|i| mu.data()[i] + (half * lv.data()[i]).exp() * eps.data()[i])
        .collect();
    Ok(Tensor::new(mu.shape().to_vec(), data)?)
}

// Batch-mean of per-item Euclidean reconstruction error plus β·KL, and the
// gradient of that loss with respect to the reconstruction.
fn loss_parts<T: Scalar>(x: &Tensor<T>, xr: &Tensor<T>, mu: &Tensor<T>, lv: &Tensor<T>, beta: f64) -> (VaeLoss, Tensor<T>) {
    let b = x.dim(0);
    let d = x.dim(1);
    let z = mu.dim(1);
    let mut grad = Tensor::zeros(x.shape());
    let mut recon = 0.0f64;
    let mut kl = 0.0f64;
    for i in 0..b {
        let xs = &x.data()[i * d..(i + 1) * d];
        let rs = &xr.data()[i * d..(i + 1) * d];
        let sq: f64 = xs.iter().zip(rs).map(|(a, r)| (*r - *a).to_f64_lossless().powi(2)).sum();
        let norm = sq.sqrt();
        recon += norm;
        if norm > 0.0 {
            let scale = T::of(1.0 / (norm * b as f64));
            let g = &mut grad.data_mut()[i * d..(i + 1) * d];
            for j in 0..d {
                g[j] = (rs[j] - xs[j]) * scale;
            }
        }
        for j in 0..z {
            let m = mu.data()[i * z + j].to_f64_lossless();
            let l = lv.data()[i * z + j].to_f64_lossless();
            kl += -0.5 * (1.0 + l - m * m - l.exp());
        }
    }
    recon /= b as f64;
    kl /= b as f64;
    (
        VaeLoss {
            total: recon + beta * kl,
            recon,
            kl,
        },
        grad,
    )
}

impl<T: Scalar> Parameterized<T> for Vae<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &LayerParams<T>)) {
        self.encoder.visit_params(f);
        self.mu.visit_params(f);
        self.logvar.visit_params(f);
        self.decoder.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut LayerParams<T>)) {
        self.encoder.visit_params_mut(f);
        self.mu.visit_params_mut(f);
        self.logvar.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide displacements by the source image diagonal.
    Diagonal,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: f32,
    pub resolution: usize,
    pub normalization: Normalization,
    pub latent_dim: usize,
    pub lr: f64,
    /// Fraction of items held out for reconstruction tracking.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 64,
            beta: 1e-4,
            resolution: 32,
            normalization: Normalization::Diagonal,
            latent_dim: 16,
            lr: 3e-3,
            holdout: 0.1,
            seed: 0,
        }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.latent_dim == 0 {
            return Err(Error::Config("VAE epochs, batch_size and latent_dim must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("VAE beta must be non-negative, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config("VAE holdout must lie in [0, 1)".into()));
        }
        VaeArch::Conv {
            resolution: self.resolution,
        }
        .validate()
    }

    pub fn flow_norm(&self, height: usize, width: usize) -> f32 {
        match self.normalization {
            Normalization::Diagonal => ((height * height + width * width) as f32).sqrt(),
            Normalization::None => 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeEpoch {
    pub epoch: usize,
    pub train: VaeLoss,
    /// Held-out reconstruction error with posterior means.
    pub heldout_recon: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainReport {
    pub train_items: usize,
    pub heldout_items: usize,
    /// Held-out reconstruction error before any update.
    pub initial_heldout_recon: f64,
    pub epochs: Vec<VaeEpoch>,
}

/// Mean reconstruction error of `rows[idx]` decoding from posterior means.
pub fn mean_recon(m: &Vae<f32>, rows: &Rows, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in idx.chunks(256) {
        let x = rows.gather(chunk);
        let z = m.encode_mean(&x)?;
        let zeros = Tensor::zeros(z.shape());
        let loss = m.loss(&x, &zeros)?;
        total += loss.recon * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Trains a VAE on already-normalized inputs.
pub fn train_vae_rows(rows: &Rows, arch: VaeArch, norm: f32, cfg: &VaeTrainConfig) -> Result<(Vae<f32>, VaeTrainReport)> {
    if rows.is_empty() {
        return Err(Error::Data("cannot train a VAE on an empty set".into()));
    }
    if rows.dim != arch.input_dim() {
        return Err(Error::Dimension(format!(
            "VAE input dim {} but rows have {}",
            arch.input_dim(),
            rows.dim
        )));
    }
    let mut rng = Rng::with_stream(cfg.seed, 0x7661_6500);
    let mut model = Vae::<f32>::new(arch, cfg.latent_dim, norm, cfg.beta, &mut rng)?;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    rng.shuffle(&mut order);
    let n_hold = if rows.len() > 1 {
        ((rows.len() as f64 * cfg.holdout).ceil() as usize).min(rows.len() - 1)
    } else {
        0
    };
    let heldout: Vec<usize> = order[..n_hold].to_vec();
    let mut train: Vec<usize> = order[n_hold..].to_vec();
    let mut opt = Optimizer::new(
        &model,
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let mut report = VaeTrainReport {
        train_items: train.len(),
        heldout_items: heldout.len(),
        initial_heldout_recon: mean_recon(&model, rows, &heldout)?,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut train);
        let mut acc = VaeLoss::default();
        for (bi, batch) in train.chunks(cfg.batch_size).enumerate() {
            let x = rows.gather(batch);
            let eps = Tensor::from_fn(&[batch.len(), cfg.latent_dim], |_| rng.normal_f32());
            model.zero_grads();
            let loss = model.loss_and_backward(&x, &eps)?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence(format!("VAE loss non-finite at epoch {epoch}, batch {bi}")));
            }
            opt.step(&mut model)?;
            let w = batch.len() as f64;
            acc.total += loss.total * w;
            acc.recon += loss.recon * w;
            acc.kl += loss.kl * w;
        }
        let n = train.len() as f64;
        let ep = VaeEpoch {
            epoch: epoch + 1,
            train: VaeLoss {
                total: acc.total / n,
                recon: acc.recon / n,
                kl: acc.kl / n,
            },
            heldout_recon: mean_recon(&model, rows, &heldout)?,
        };
        log::info!(
            "vae epoch {}: recon {:.5} kl {:.3} heldout {:.5}",
            ep.epoch,
            ep.train.recon,
            ep.train.kl,
            ep.heldout_recon
        );
        report.epochs.push(ep);
    }
    Ok((model, report))
}

/// Channel-first `[u; v]` at `resolution²`, bilinearly resampled and divided by `norm`.
pub fn prepare_flow(f: &FlowField, resolution: usize, norm: f32) -> Vec<f32> {
    let r = f.resample(resolution, resolution);
    r.u.iter().chain(&r.v).map(|x| x / norm).collect()
}

/// Trains the flow VAE on flow fields.
pub fn train_vae(flows: &[FlowField], cfg: &VaeTrainConfig) -> Result<(FlowVaeModel, VaeTrainReport)> {
    cfg.validate()?;
    let first = flows
        .first()
        .ok_or_else(|| Error::Data("cannot train a VAE on an empty flow set".into()))?;
    let norm = cfg.flow_norm(first.height, first.width);
    let rows = flow_rows(flows, cfg.resolution, norm)?;
    train_vae_rows(&rows, VaeArch::Conv { resolution: cfg.resolution }, norm, cfg)
}

pub fn flow_rows(flows: &[FlowField], resolution: usize, norm: f32) -> Result<Rows> {
    let mut rows = Rows::new(2 * resolution * resolution);
    rows.data.reserve(flows.len() * rows.dim);
    for f in flows {
        rows.push(&prepare_flow(f, resolution, norm))?;
    }
    Ok(rows)
}

/// Posterior mean of one flow field.
pub fn encode(m: &FlowVaeModel, f: &FlowField) -> Result<Vec<f32>> {
    let VaeArch::Conv { resolution } = m.arch else {
        return Err(Error::Config("encode needs a flow VAE".into()));
    };
    let x = prepare_flow(f, resolution, m.norm);
    let t = Tensor::new(vec![1, x.len()], x)?;
    Ok(m.encode_mean(&t)?.into_data())
}

/// Posterior means of every row, in row order.
pub fn encode_rows(m: &Vae<f32>, rows: &Rows) -> Result<Rows> {
    if rows.dim != m.input_dim() {
        return Err(Error::Dimension(format!(
            "VAE input dim {} but rows have {}",
            m.input_dim(),
            rows.dim
        )));
    }
    let idx: Vec<usize> = (0..rows.len()).collect();
    let parts: Vec<Result<Vec<f32>>> = idx
        .par_chunks(256)
        .map(|chunk| Ok(m.encode_mean(&rows.gather(chunk))?.into_data()))
        .collect();
    let mut out = Rows::new(m.z);
    for p in parts {
        out.data.extend(p?);
    }
    Ok(out)
}

/// Content hash of a serialized model.
pub fn model_hash(m: &Vae<f32>) -> String {
    hashing::sha256_hex(model_bytes(m).bytes())
}

fn model_bytes(m: &Vae<f32>) -> Writer {
    let (code, resolution, input_dim, hidden) = match m.arch {
        VaeArch::Conv { resolution } => (0, resolution, 2 * resolution * resolution, 0),
        VaeArch::Mlp { input_dim, hidden } => (1, 0, input_dim, hidden),
    };
    let mut w = Writer::new(VAE_MAGIC);
    w.u32(m.z)
        .u32(resolution)
        .f32(m.norm)
        .f32(m.beta)
        .u32(code)
        .u32(input_dim)
        .u32(hidden)
        .params(m);
    w
}

/// Header `{FVAE, Z, resolution, norm, β, arch code, input dim, hidden}` then parameter blobs.
pub fn write_vae(path: &Path, m: &Vae<f32>) -> Result<()> {
    model_bytes(m).save(path)
}

pub fn read_vae(path: &Path) -> Result<Vae<f32>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf, VAE_MAGIC)?;
    let z = r.u32()?;
    let resolution = r.u32()?;
    let norm = r.f32()?;
    let beta = r.f32()?;
    let code = r.u32()?;
    let input_dim = r.u32()?;
    let hidden = r.u32()?;
    let arch = match code {
        0 => VaeArch::Conv { resolution },
        1 => VaeArch::Mlp { input_dim, hidden },
        c => return Err(Error::format(path, format!("unknown VAE architecture code {c}"))),
    };
    let mut m = Vae::<f32>::new(arch, z, norm, beta, &mut Rng::new(0))
        .map_err(|e| Error::format(path, e.to_string()))?;
    r.params(&mut m)?;
    r.finish()?;
    Ok(m)
}

/// Latent vectors aligned with the frames of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub model_hash: u64,
    pub latents: Rows,
}

impl LatentTable {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn z(&self) -> usize {
        self.latents.dim
    }
}

/// Header `{LATn, count, Z, model hash}` then `count × Z` floats.
pub fn write_latents(path: &Path, t: &LatentTable) -> Result<()> {
    let mut w = Writer::new(LATENT_MAGIC);
    w.u32(t.len()).u32(t.z()).u64(t.model_hash).f32s(&t.latents.data);
    w.save(path)
}

pub fn read_latents(path: &Path) -> Result<LatentTable> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf, LATENT_MAGIC)?;
    let count = r.u32()?;
    let z = r.u32()?;
    let model_hash = r.u64()?;
    let data = r.f32s(count * z)?;
    r.finish()?;
    Ok(LatentTable {
        model_hash,
        latents: Rows { dim: z, data },
    })
}

fn hash_prefix(hex_hash: &str) -> u64 {
    u64::from_str_radix(&hex_hash[..16], 16).expect("sha256 hex")
}

/// Encodes every flow of a dataset's flow cache, in manifest order.
pub fn embed_dataset(m: &FlowVaeModel, d: &DatasetHandle, flows: &FlowSet) -> Result<LatentTable> {
    let VaeArch::Conv { resolution } = m.arch else {
        return Err(Error::Config("embed_dataset needs a flow VAE".into()));
    };
    let missing: Vec<&str> = d
        .manifest()
        .trajectories
        .iter()
        .filter(|e| !flows.trajectories.contains(&e.id) || !flows.path_for(&e.id).exists())
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("flow cache has no entries for: {}", missing.join(", "))));
    }
    let mut latents = Rows::new(m.z);
    for e in &d.manifest().trajectories {
        let cache = flows.load(&e.id)?;
        if cache.flows.len() != e.frames {
            return Err(Error::Data(format!(
                "flow cache for {} has {} fields for {} frames",
                e.id,
                cache.flows.len(),
                e.frames
            )));
        }
        let rows = flow_rows(&cache.flows, resolution, m.norm)?;
        latents.data.extend(encode_rows(m, &rows)?.data);
    }
    Ok(LatentTable {
        model_hash: hash_prefix(&model_hash(m)),
        latents,
    })
}

/// Latent table for in-memory prepared flow rows.
pub fn embed_rows(m: &FlowVaeModel, rows: &Rows) -> Result<LatentTable> {
    Ok(LatentTable {
        model_hash: hash_prefix(&model_hash(m)),
        latents: encode_rows(m, rows)?,
    })
}

/// Finite-difference check of the full VAE loss (reconstruction + β·KL) with
/// fixed reparameterization noise, evaluated in `f64`.
pub fn vae_grad_check(m: &Vae<f32>, x: &Tensor<f32>, eps: &Tensor<f32>, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let mut model = m.cast::<f64>();
    let x = x.cast::<f64>();
    let eps = eps.cast::<f64>();
    model.zero_grads();
    model.loss_and_backward(&x, &eps)?;
    let params = ParamBlock::params_of(&model);
    let analytic = ParamBlock::grads_of(&model);
    let mut probe = model.clone();
    Ok(grad_check(
        |blocks| {
            ParamBlock::load_into(blocks, &mut probe);
            probe.loss(&x, &eps).expect("shapes validated above").total
        },
        &params,
        &analytic,
        cfg,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shapes() {
        let m = Vae::<f32>::new(VaeArch::Conv { resolution: 8 }, 3, 1.0, 1e-4, &mut Rng::new(1)).unwrap();
        let x = Tensor::from_fn(&[2, 128], |i| (i as f32 * 0.1).sin());
        assert_eq!(m.encode_mean(&x).unwrap().shape(), &[2, 3]);
        assert_eq!(m.decode(&Tensor::zeros(&[2, 3])).unwrap().shape(), &[2, 128]);
        assert!(m.encode_mean(&Tensor::zeros(&[2, 100])).is_err());
    }

    #[test]
    fn bad_configs() {
        assert!(Vae::<f32>::new(VaeArch::Conv { resolution: 10 }, 3, 1.0, 0.0, &mut Rng::new(1)).is_err());
        assert!(Vae::<f32>::new(VaeArch::Conv { resolution: 8 }, 3, 1.0, -1.0, &mut Rng::new(1)).is_err());
        let cfg = VaeTrainConfig { beta: -1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(train_vae(&[], &VaeTrainConfig::default()).is_err());
    }

    #[test]
    fn kl_of_standard_normal_posterior_is_zero() {
        let x = Tensor::<f64>::zeros(&[1, 2]);
        let (l, _) = loss_parts(&x, &x, &Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 3]), 1.0);
        assert_eq!(l.kl, 0.0);
        assert_eq!(l.recon, 0.0);
    }
}
