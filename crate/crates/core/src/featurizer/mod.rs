//! Frozen patch featurizers: an image becomes a `(H/p) x (W/p) x d_f` grid of
//! feature tokens that downstream training never modifies.

mod dct;
mod learned;

pub use dct::DctFeaturizer;
pub use learned::{pretrain_ssl, LearnedFeaturizer, LearnedFeaturizerConfig, SslReport};

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::numerics::{io, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeaturizerKind {
    Deterministic,
    Learned,
}

impl std::str::FromStr for FeaturizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dct" | "deterministic" => Ok(Self::Deterministic),
            "learned" => Ok(Self::Learned),
            _ => Err(Error::invalid(
                "featurizer",
                format!("unknown featurizer kind {s:?}"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturizerConfig {
    /// Pixels per patch side.
    pub patch: usize,
    /// Feature channels. The reference backbone has 384; 32 is the desk-scale value.
    pub d_f: usize,
    pub kind: FeaturizerKind,
    /// Learned kind only: read features after this many blocks (`None` = final).
    pub layer: Option<usize>,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            d_f: 32,
            kind: FeaturizerKind::Deterministic,
            layer: None,
        }
    }
}

impl FeaturizerConfig {
    pub fn learned(&self) -> LearnedFeaturizerConfig {
        LearnedFeaturizerConfig {
            patch: self.patch,
            dim: self.d_f,
            layer: self.layer,
            ..Default::default()
        }
    }
}

/// Either featurizer behind one type.
#[derive(Clone, Debug)]
pub enum Featurizer {
    Dct(DctFeaturizer),
    Learned(LearnedFeaturizer),
}

const DCT_BASIS: &str = "dct.basis";

impl Featurizer {
    /// The deterministic featurizer for `cfg`; the learned one must come from
    /// [`pretrain_ssl`] or [`Featurizer::load`].
    pub fn deterministic(cfg: &FeaturizerConfig) -> Result<Self> {
        Ok(Self::Dct(DctFeaturizer::new(cfg.patch, cfg.d_f)?))
    }

    /// All weights as a frozen store (the DCT basis for the deterministic kind).
    pub fn weights(&self) -> Result<ParamStore<f32>> {
        match self {
            Self::Dct(f) => {
                let mut store = ParamStore::new();
                store.add(DCT_BASIS, f.basis().clone())?;
                store.set_frozen(true);
                Ok(store)
            }
            Self::Learned(f) => Ok(f.store().clone()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::save_store(dir, &self.weights()?)
    }

    pub fn load(dir: &Path, cfg: &FeaturizerConfig) -> Result<Self> {
        match cfg.kind {
            FeaturizerKind::Deterministic => {
                let f = DctFeaturizer::new(cfg.patch, cfg.d_f)?;
                let saved = io::load_store(dir)?;
                let id = saved.require(DCT_BASIS)?;
                if saved.value(id) != f.basis() {
                    return Err(Error::invalid(
                        "featurizer",
                        format!(
                            "{} holds a different DCT basis than patch {} / d_f {}",
                            dir.display(),
                            cfg.patch,
                            cfg.d_f
                        ),
                    ));
                }
                Ok(Self::Dct(f))
            }
            FeaturizerKind::Learned => {
                let f = LearnedFeaturizer::load(dir, &cfg.learned())?;
                if !f.is_frozen() {
                    return Err(Error::invalid(
                        "featurizer",
                        "stored learned featurizer is not frozen",
                    ));
                }
                Ok(Self::Learned(f))
            }
        }
    }
}

impl FeatureEncoder for Featurizer {
    fn patch(&self) -> usize {
        match self {
            Self::Dct(f) => f.patch(),
            Self::Learned(f) => f.patch(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Self::Dct(f) => f.dim(),
            Self::Learned(f) => f.dim(),
        }
    }

    fn encode(&self, img: &ImageRGB) -> Result<LatentGrid> {
        match self {
            Self::Dct(f) => f.encode(img),
            Self::Learned(f) => f.encode(img),
        }
    }
}

/// `rows x cols` grid of `d`-channel feature tokens, stored `[rows, cols, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub rows: usize,
    pub cols: usize,
    pub d: usize,
    pub data: Tensor<f32>,
}

impl LatentGrid {
    pub fn new(rows: usize, cols: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        Ok(Self {
            rows,
            cols,
            d,
            data: Tensor::new(vec![rows, cols, d], data)?,
        })
    }

    pub fn zeros(rows: usize, cols: usize, d: usize) -> Self {
        Self {
            rows,
            cols,
            d,
            data: Tensor::zeros(&[rows, cols, d]),
        }
    }

    pub fn from_tensor(t: Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [rows, cols, d] => Ok(Self {
                rows,
                cols,
                d,
                data: t,
            }),
            _ => Err(Error::shape(
                "latent",
                format!("expected [rows, cols, d], got {:?}", t.shape()),
            )),
        }
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn values(&self) -> &[f32] {
        self.data.data()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data.data()[i * self.d..(i + 1) * self.d]
    }

    /// Token matrix `[rows * cols, d]`.
    pub fn as_matrix(&self) -> Tensor<f32> {
        self.data
            .clone()
            .reshape(&[self.tokens(), self.d])
            .expect("same element count")
    }

    /// Channels `start..start + len` of every token.
    pub fn channels(&self, start: usize, len: usize) -> Result<LatentGrid> {
        if start + len > self.d {
            return Err(Error::shape(
                "latent",
                format!("channels {start}+{len} of {}", self.d),
            ));
        }
        let mut out = Vec::with_capacity(self.tokens() * len);
        for t in 0..self.tokens() {
            out.extend_from_slice(&self.token(t)[start..start + len]);
        }
        LatentGrid::new(self.rows, self.cols, len, out)
    }

    /// Channel-wise concatenation of two grids of equal extent.
    pub fn concat_channels(&self, other: &LatentGrid) -> Result<LatentGrid> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape(
                "latent",
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Vec::with_capacity(self.tokens() * (self.d + other.d));
        for t in 0..self.tokens() {
            out.extend_from_slice(self.token(t));
            out.extend_from_slice(other.token(t));
        }
        LatentGrid::new(self.rows, self.cols, self.d + other.d, out)
    }
}

/// Anything that turns an image into a feature grid.
pub trait FeatureEncoder: Sync {
    fn patch(&self) -> usize;
    fn dim(&self) -> usize;
    fn encode(&self, img: &ImageRGB) -> Result<LatentGrid>;
}

/// Grid extent for an image, or an error naming the side that does not divide.
pub fn grid_for(img: &ImageRGB, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 {
        return Err(Error::invalid("featurizer", "patch size must be positive"));
    }
    if !img.height().is_multiple_of(patch) || img.height() == 0 {
        return Err(Error::invalid(
            "featurizer",
            format!(
                "image height {} is not a positive multiple of patch {patch}",
                img.height()
            ),
        ));
    }
    if !img.width().is_multiple_of(patch) || img.width() == 0 {
        return Err(Error::invalid(
            "featurizer",
            format!(
                "image width {} is not a positive multiple of patch {patch}",
                img.width()
            ),
        ));
    }
    Ok((img.height() / patch, img.width() / patch))
}

/// All patches of an image as a `[rows * cols, 3 p^2]` matrix.
pub fn patch_matrix(img: &ImageRGB, patch: usize) -> Result<Tensor<f32>> {
    let (rows, cols) = grid_for(img, patch)?;
    let mut data = Vec::with_capacity(rows * cols * patch * patch * 3);
    for r in 0..rows {
        for c in 0..cols {
            data.extend(img.patch(r, c, patch));
        }
    }
    Tensor::new(vec![rows * cols, patch * patch * 3], data)
}
