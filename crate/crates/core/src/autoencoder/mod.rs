//! Autoencoders between pixels and the diffusion latent space.
//!
//! Mode P uses the frozen featurizer output as the latent. Mode R appends
//! the channels of a small trainable residual encoder. Both decode with the
//! same convolutional decoder.

mod decoder;
mod residual;
mod stats;

pub use decoder::{images_to_nchw, nchw_to_images, Conv, Decoder, DecoderConfig};
pub use residual::{ResidualEncoder, ResidualEncoderConfig};
pub use stats::{LatentStats, MIN_STD};

use std::path::Path;

use crate::error::{Error, Result};
use crate::featurizer::{patch_matrix, FeatureEncoder, Featurizer, FeaturizerConfig, LatentGrid};
use crate::image::ImageRGB;
use crate::nn::Session;
use crate::numerics::{io, Graph, ParamStore, Real, Rng, Tensor, Var};

pub const FEATURIZER_DIR: &str = "featurizer";
pub const RESIDUAL_DIR: &str = "residual";
pub const DECODER_DIR: &str = "decoder";
pub const STATS_DIR: &str = "stats";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AeMode {
    /// Frozen features only.
    Pure,
    /// Frozen features plus residual channels.
    Residual,
}

impl std::str::FromStr for AeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" | "p" | "pure" => Ok(Self::Pure),
            "R" | "r" | "residual" => Ok(Self::Residual),
            _ => Err(Error::invalid(
                "autoencoder",
                format!("unknown mode {s:?}, expected P or R"),
            )),
        }
    }
}

impl std::fmt::Display for AeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pure => "P",
            Self::Residual => "R",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeConfig {
    pub mode: AeMode,
    pub featurizer: FeaturizerConfig,
    pub residual: ResidualEncoderConfig,
    pub decoder_channels: Vec<usize>,
    /// Weight of the residual moment-matching penalty.
    pub lambda_dm: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            mode: AeMode::Residual,
            featurizer: FeaturizerConfig::default(),
            residual: ResidualEncoderConfig::default(),
            decoder_channels: DecoderConfig::default().channels,
            lambda_dm: 0.05,
        }
    }
}

impl AeConfig {
    pub fn extra_channels(&self) -> usize {
        match self.mode {
            AeMode::Pure => 0,
            AeMode::Residual => self.residual.extra_channels,
        }
    }

    pub fn z_channels(&self) -> usize {
        self.featurizer.d_f + self.extra_channels()
    }
}

/// Equally sized images with their precomputed frozen features.
#[derive(Clone, Debug)]
pub struct AeBatch {
    pub images: Vec<ImageRGB>,
    pub features: Vec<LatentGrid>,
}

impl AeBatch {
    pub fn new(images: Vec<ImageRGB>, featurizer: &impl FeatureEncoder) -> Result<Self> {
        let features = images
            .iter()
            .map(|img| featurizer.encode(img))
            .collect::<Result<_>>()?;
        Ok(Self { images, features })
    }

    fn grid(&self) -> Result<(usize, usize)> {
        let first = self
            .features
            .first()
            .ok_or_else(|| Error::invalid("autoencoder", "empty batch"))?;
        if self
            .features
            .iter()
            .any(|f| (f.rows, f.cols) != (first.rows, first.cols))
        {
            return Err(Error::invalid("autoencoder", "batch mixes grid sizes"));
        }
        Ok((first.rows, first.cols))
    }
}

/// `mean |recon - target| + lambda * sum_c (mean_c^2 + (var_c - 1)^2)`, the
/// penalty taken over residual channels with population batch moments.
pub fn reconstruction_loss<T: Real>(
    g: &mut Graph<T>,
    recon: Var,
    target: Var,
    residual: Option<Var>,
    lambda_dm: f64,
) -> Result<Var> {
    let d = g.sub(recon, target)?;
    let d = g.abs(d)?;
    let l1 = g.mean(d)?;
    match residual {
        Some(r) if lambda_dm != 0.0 => {
            let p = moment_penalty(g, r)?;
            let p = g.scale(p, T::lit(lambda_dm))?;
            g.add(l1, p)
        }
        _ => Ok(l1),
    }
}

/// `sum_c (mean_c^2 + (var_c - 1)^2)` over the columns of `r: [n, c]`.
pub fn moment_penalty<T: Real>(g: &mut Graph<T>, r: Var) -> Result<Var> {
    let (n, _) = g.value(r).dims2("moment_penalty")?;
    if n == 0 {
        return Err(Error::invalid(
            "autoencoder",
            "moment penalty over an empty batch",
        ));
    }
    let inv_n = T::lit(1.0 / n as f64);
    let sum = g.sum_rows(r)?;
    let mean = g.scale(sum, inv_n)?;
    let neg = g.scale(mean, -T::one())?;
    let centred = g.add_row(r, neg)?;
    let sq = g.square(centred)?;
    let var = g.sum_rows(sq)?;
    let var = g.scale(var, inv_n)?;
    let m2 = g.square(mean)?;
    let dv = g.add_scalar(var, -T::one())?;
    let dv2 = g.square(dv)?;
    let total = g.add(m2, dv2)?;
    g.sum(total)
}

/// Pixel-space autoencoder around a frozen featurizer.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub cfg: AeConfig,
    pub featurizer: Featurizer,
    /// Trainable weights, named `residual.*` and `decoder.*`.
    store: ParamStore<f32>,
    residual: Option<ResidualEncoder>,
    decoder: Decoder,
}

impl Autoencoder {
    pub fn new(cfg: &AeConfig, featurizer: Featurizer, rng: &mut Rng) -> Result<Self> {
        if featurizer.dim() != cfg.featurizer.d_f || featurizer.patch() != cfg.featurizer.patch {
            return Err(Error::invalid(
                "autoencoder",
                format!(
                    "featurizer gives {} channels at patch {}, config says {} at {}",
                    featurizer.dim(),
                    featurizer.patch(),
                    cfg.featurizer.d_f,
                    cfg.featurizer.patch
                ),
            ));
        }
        let patch = cfg.featurizer.patch;
        let mut store = ParamStore::new();
        let residual = match cfg.mode {
            AeMode::Pure => None,
            AeMode::Residual => Some(ResidualEncoder::new(
                &mut store,
                RESIDUAL_PREFIX,
                &cfg.residual,
                patch,
                rng,
            )?),
        };
        let dcfg = DecoderConfig {
            channels: cfg.decoder_channels.clone(),
            out_channels: 3,
            z_channels: cfg.z_channels(),
        };
        let decoder = Decoder::new(&mut store, DECODER_PREFIX, &dcfg, patch, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            featurizer,
            store,
            residual,
            decoder,
        })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn z_channels(&self) -> usize {
        self.cfg.z_channels()
    }

    /// Standardizes decoder inputs with statistics of the frozen features;
    /// residual channels are assumed unit Gaussian.
    pub fn fit_input_stats(&mut self, features: &[LatentGrid]) -> Result<()> {
        let stats = LatentStats::fit(features)?;
        let extra = self.cfg.extra_channels();
        let mean: Vec<f64> = stats
            .mean
            .iter()
            .copied()
            .chain(std::iter::repeat_n(0.0, extra))
            .collect();
        let std: Vec<f64> = stats
            .std
            .iter()
            .copied()
            .chain(std::iter::repeat_n(1.0, extra))
            .collect();
        self.decoder.set_input_stats(&mut self.store, &mean, &std)
    }

    /// Latent grid of one image: frozen features, plus residual channels in mode R.
    pub fn encode(&self, img: &ImageRGB, mode: AeMode) -> Result<LatentGrid> {
        let feats = self.featurizer.encode(img)?;
        match mode {
            AeMode::Pure => Ok(feats),
            AeMode::Residual => {
                let residual = self.residual.as_ref().ok_or_else(|| {
                    Error::invalid("autoencoder", "mode R requires residual encoder weights")
                })?;
                let mut g = Graph::new();
                let mut s = Session::new(&mut g, &self.store);
                let px =
                    s.g.constant(centred_patches(img, self.cfg.featurizer.patch)?)?;
                let r = residual.forward(&mut s, px, &[(feats.rows, feats.cols)])?;
                let extra = LatentGrid::new(
                    feats.rows,
                    feats.cols,
                    residual.cfg.extra_channels,
                    g.value(r).data().to_vec(),
                )?;
                feats.concat_channels(&extra)
            }
        }
    }

    /// Encodes in the mode the decoder was built for.
    pub fn encode_latent(&self, img: &ImageRGB) -> Result<LatentGrid> {
        self.encode(img, self.cfg.mode)
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<ImageRGB> {
        Ok(self.decode_batch(std::slice::from_ref(latent))?.remove(0))
    }

    /// Decodes equally sized latents in one pass.
    pub fn decode_batch(&self, latents: &[LatentGrid]) -> Result<Vec<ImageRGB>> {
        let first = latents
            .first()
            .ok_or_else(|| Error::invalid("autoencoder", "empty decode batch"))?;
        let (rows, cols) = (first.rows, first.cols);
        for l in latents {
            if l.d != self.z_channels() {
                return Err(Error::invalid(
                    "autoencoder",
                    format!(
                        "latent has {} channels, decoder expects {}",
                        l.d,
                        self.z_channels()
                    ),
                ));
            }
            if (l.rows, l.cols) != (rows, cols) {
                return Err(Error::invalid(
                    "autoencoder",
                    "decode batch mixes grid sizes",
                ));
            }
        }
        let z = Tensor::new(
            vec![latents.len() * rows * cols, self.z_channels()],
            latents
                .iter()
                .flat_map(|l| l.values().iter().copied())
                .collect(),
        )?;
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &self.store);
        let zv = s.g.constant(z)?;
        let out = self
            .decoder
            .forward(&mut s, zv, latents.len(), rows, cols)?;
        let mut images = nchw_to_images(g.value(out))?;
        images.iter_mut().for_each(ImageRGB::clamp01);
        Ok(images)
    }

    /// Decoder output `[b, 3, H, W]` and, in mode R, the residual channels
    /// `[b * tokens, extra]`.
    pub fn reconstruct(&self, s: &mut Session<f32>, batch: &AeBatch) -> Result<(Var, Option<Var>)> {
        let (rows, cols) = batch.grid()?;
        let b = batch.features.len();
        let n = b * rows * cols;
        let feats = Tensor::new(
            vec![n, self.cfg.featurizer.d_f],
            batch
                .features
                .iter()
                .flat_map(|f| f.values().iter().copied())
                .collect(),
        )?;
        let mut z = s.g.constant(feats)?;
        let mut r = None;
        if let Some(residual) = &self.residual {
            let patch = self.cfg.featurizer.patch;
            let mut px = Vec::with_capacity(n * 3 * patch * patch);
            for img in &batch.images {
                px.extend(centred_patches(img, patch)?.into_data());
            }
            let px = s.g.constant(Tensor::new(vec![n, 3 * patch * patch], px)?)?;
            let out = residual.forward(s, px, &vec![(rows, cols); b])?;
            z = s.g.concat_cols(&[z, out])?;
            r = Some(out);
        }
        let recon = self.decoder.forward(s, z, b, rows, cols)?;
        Ok((recon, r))
    }

    /// Training objective for one batch of equally sized images.
    pub fn ae_loss(&self, s: &mut Session<f32>, batch: &AeBatch) -> Result<Var> {
        let (recon, r) = self.reconstruct(s, batch)?;
        let target = s.g.constant(images_to_nchw(&batch.images)?)?;
        reconstruction_loss(s.g, recon, target, r, self.cfg.lambda_dm)
    }

    /// Writes `featurizer/`, `residual/` (mode R) and `decoder/` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.featurizer.save(&dir.join(FEATURIZER_DIR))?;
        if self.residual.is_some() {
            io::save_store(&dir.join(RESIDUAL_DIR), &self.store.subset(RESIDUAL_PREFIX))?;
        }
        io::save_store(&dir.join(DECODER_DIR), &self.store.subset(DECODER_PREFIX))
    }

    pub fn load(dir: &Path, cfg: &AeConfig) -> Result<Self> {
        let featurizer = Featurizer::load(&dir.join(FEATURIZER_DIR), &cfg.featurizer)?;
        let mut ae = Self::new(cfg, featurizer, &mut Rng::new(0))?;
        if ae.residual.is_some() {
            let path = dir.join(RESIDUAL_DIR);
            if !path.exists() {
                return Err(Error::invalid(
                    "autoencoder",
                    format!(
                        "mode R requires residual weights, {} is missing",
                        path.display()
                    ),
                ));
            }
            ae.store
                .load_subset(RESIDUAL_PREFIX, &io::load_store(&path)?)?;
        }
        ae.store
            .load_subset(DECODER_PREFIX, &io::load_store(&dir.join(DECODER_DIR))?)?;
        Ok(ae)
    }
}

const RESIDUAL_PREFIX: &str = "residual";
const DECODER_PREFIX: &str = "decoder";

fn centred_patches(img: &ImageRGB, patch: usize) -> Result<Tensor<f32>> {
    Ok(patch_matrix(img, patch)?.map(|v| v - 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::DctFeaturizer;

    fn ae(mode: AeMode) -> Autoencoder {
        let cfg = AeConfig {
            mode,
            ..Default::default()
        };
        let f = Featurizer::Dct(DctFeaturizer::new(16, 32).unwrap());
        Autoencoder::new(&cfg, f, &mut Rng::new(1)).unwrap()
    }

    fn image(seed: u64) -> ImageRGB {
        ImageRGB::new(32, 32, Rng::new(seed).uniform_vec(32 * 32 * 3, 0.0, 1.0)).unwrap()
    }

    #[test]
    fn latent_shapes_by_mode() {
        let p = ae(AeMode::Pure).encode(&image(0), AeMode::Pure).unwrap();
        assert_eq!((p.rows, p.cols, p.d), (2, 2, 32));
        let r = ae(AeMode::Residual)
            .encode(&image(0), AeMode::Residual)
            .unwrap();
        assert_eq!((r.rows, r.cols, r.d), (2, 2, 40));
    }

    #[test]
    fn residual_mode_keeps_frozen_channels_bit_identical() {
        let model = ae(AeMode::Residual);
        let img = image(2);
        let p = model.encode(&img, AeMode::Pure).unwrap();
        let r = model.encode(&img, AeMode::Residual).unwrap();
        assert_eq!(r.channels(0, 32).unwrap(), p);
    }

    #[test]
    fn residual_mode_needs_residual_weights() {
        let err = ae(AeMode::Pure)
            .encode(&image(0), AeMode::Residual)
            .unwrap_err();
        assert!(err.to_string().contains("mode R"), "{err}");
    }

    #[test]
    fn decode_shape_range_and_channel_check() {
        let model = ae(AeMode::Residual);
        let img = model.decode(&LatentGrid::zeros(2, 3, 40)).unwrap();
        assert_eq!((img.width(), img.height()), (48, 32));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(model.decode(&LatentGrid::zeros(2, 2, 32)).is_err());
    }

    #[test]
    fn l1_term_of_a_constant_offset() {
        let mut g = Graph::<f64>::new();
        let target =
            Tensor::<f64>::new(vec![1, 3, 2, 2], Rng::new(1).uniform_vec(12, 0.0, 0.8)).unwrap();
        let recon = g.constant(target.map(|v| v + 0.1)).unwrap();
        let t = g.constant(target).unwrap();
        let r = g
            .constant(Tensor::new(vec![2, 1], vec![5.0, -5.0]).unwrap())
            .unwrap();
        let loss = reconstruction_loss(&mut g, recon, t, Some(r), 0.0).unwrap();
        assert!((g.value(loss).item().unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn perfect_reconstruction_with_standard_residuals_is_free() {
        let mut g = Graph::<f64>::new();
        let target = Tensor::<f64>::new(vec![1, 3, 2, 2], vec![0.5; 12]).unwrap();
        let recon = g.constant(target.clone()).unwrap();
        let t = g.constant(target).unwrap();
        // columns with mean 0 and population variance 1
        let r = g
            .constant(Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap())
            .unwrap();
        let loss = reconstruction_loss(&mut g, recon, t, Some(r), 0.05).unwrap();
        assert!(g.value(loss).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn moment_penalty_matches_hand_arithmetic() {
        let r = [[0.5, 2.0], [1.5, -1.0], [-0.5, 0.5]];
        let recon = [0.2, 0.9, 0.4];
        let target = [0.0, 1.0, 0.5];
        // L1 = (0.2 + 0.1 + 0.1) / 3; channel 0: mean 0.5, var 2/3;
        // channel 1: mean 0.5, var 1.5
        let l1 = 0.4 / 3.0;
        let pen = (0.25 + (2.0f64 / 3.0 - 1.0).powi(2)) + (0.25 + 0.25);
        let want = l1 + 0.05 * pen;

        let mut g = Graph::<f64>::new();
        let rv = g
            .constant(Tensor::new(vec![3, 2], r.iter().flatten().copied().collect()).unwrap())
            .unwrap();
        let a = g
            .constant(Tensor::new(vec![3], recon.to_vec()).unwrap())
            .unwrap();
        let b = g
            .constant(Tensor::new(vec![3], target.to_vec()).unwrap())
            .unwrap();
        let loss = reconstruction_loss(&mut g, a, b, Some(rv), 0.05).unwrap();
        assert!((g.value(loss).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let model = ae(AeMode::Residual);
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        for sub in [FEATURIZER_DIR, RESIDUAL_DIR, DECODER_DIR] {
            assert!(dir.path().join(sub).join("manifest.txt").exists());
        }
        let back = Autoencoder::load(dir.path(), &model.cfg).unwrap();
        assert_eq!(back.store().digest(), model.store().digest());
        let img = image(3);
        assert_eq!(
            back.encode_latent(&img).unwrap(),
            model.encode_latent(&img).unwrap()
        );
    }

    #[test]
    fn empty_batch_is_rejected() {
        let model = ae(AeMode::Residual);
        let batch = AeBatch {
            images: vec![],
            features: vec![],
        };
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, model.store());
        assert!(model.ae_loss(&mut s, &batch).is_err());
    }
}
