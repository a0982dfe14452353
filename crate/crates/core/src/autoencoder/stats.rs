use std::path::Path;

use crate::error::{Error, Result};
use crate::featurizer::LatentGrid;
use crate::numerics::{io, ParamStore, Tensor};

/// Smallest per-channel standard deviation accepted by [`LatentStats::fit`].
pub const MIN_STD: f64 = 1e-6;

/// Per-channel mean and standard deviation of a latent corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    /// Population statistics over every token of every latent.
    pub fn fit(latents: &[LatentGrid]) -> Result<Self> {
        let first = latents.first().ok_or_else(|| {
            Error::invalid("autoencoder", "cannot fit statistics on an empty corpus")
        })?;
        let d = first.d;
        let mut sum = vec![0.0f64; d];
        let mut count = 0usize;
        for l in latents {
            if l.d != d {
                return Err(Error::shape(
                    "fit_latent_stats",
                    format!("{} vs {d} channels", l.d),
                ));
            }
            for tok in l.values().chunks(d) {
                sum.iter_mut().zip(tok).for_each(|(s, &v)| *s += v as f64);
            }
            count += l.tokens();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0f64; d];
        for l in latents {
            for tok in l.values().chunks(d) {
                sq.iter_mut()
                    .zip(tok.iter().zip(&mean))
                    .for_each(|(s, (&v, m))| *s += (v as f64 - m).powi(2));
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        let flat: Vec<usize> = (0..d).filter(|&c| std[c] <= MIN_STD).collect();
        if !flat.is_empty() {
            return Err(Error::invalid(
                "autoencoder",
                format!("zero-variance latent channels {flat:?}"),
            ));
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, l: &LatentGrid) -> Result<()> {
        if l.d != self.channels() {
            return Err(Error::shape(
                "latent_stats",
                format!("{} channels, stats have {}", l.d, self.channels()),
            ));
        }
        Ok(())
    }

    pub fn normalize(&self, l: &LatentGrid) -> Result<LatentGrid> {
        self.check(l)?;
        let d = l.d;
        let data = l
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - self.mean[i % d]) / self.std[i % d]) as f32)
            .collect();
        LatentGrid::new(l.rows, l.cols, d, data)
    }

    pub fn denormalize(&self, l: &LatentGrid) -> Result<LatentGrid> {
        self.check(l)?;
        let d = l.d;
        let data = l
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v as f64 * self.std[i % d] + self.mean[i % d]) as f32)
            .collect();
        LatentGrid::new(l.rows, l.cols, d, data)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut store = ParamStore::new();
        let d = self.channels();
        store.add(
            "mean",
            Tensor::new(vec![d], self.mean.iter().map(|&v| v as f32).collect())?,
        )?;
        store.add(
            "std",
            Tensor::new(vec![d], self.std.iter().map(|&v| v as f32).collect())?,
        )?;
        store.set_frozen(true);
        io::save_store(dir, &store)
    }

    /// Reads statistics saved by [`save`](Self::save) (values round-trip through `f32`).
    pub fn load(dir: &Path) -> Result<Self> {
        let store = io::load_store(dir)?;
        let get = |name: &str| -> Result<Vec<f64>> {
            Ok(store
                .value(store.require(name)?)
                .data()
                .iter()
                .map(|&v| v as f64)
                .collect())
        };
        let (mean, std) = (get("mean")?, get("std")?);
        if mean.len() != std.len() || std.iter().any(|&s| s <= MIN_STD) {
            return Err(Error::Format(format!(
                "{}: malformed latent statistics",
                dir.display()
            )));
        }
        Ok(Self { mean, std })
    }
}
