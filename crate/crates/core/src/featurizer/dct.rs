use std::f64::consts::PI;

use super::{patch_matrix, FeatureEncoder, LatentGrid};
use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::numerics::Tensor;

/// Projects every patch onto the lowest-frequency rows of the orthonormal
/// 2-D DCT-II basis, one basis row per (frequency, colour channel).
///
/// Frequencies are ordered by `u + v` (then by vertical frequency `u`), with
/// the three colour channels of each frequency adjacent, so the first three
/// rows are the per-channel DC terms.
#[derive(Clone, Debug, PartialEq)]
pub struct DctFeaturizer {
    patch: usize,
    d_f: usize,
    /// `[d_f, 3 p^2]`, rows orthonormal.
    basis: Tensor<f32>,
    /// Same basis transposed, `[3 p^2, d_f]`, ready for `patches x basis^T`.
    basis_t: Tensor<f32>,
}

/// `(u, v, channel)` triples in projection order.
pub fn frequency_order(patch: usize) -> Vec<(usize, usize, usize)> {
    let mut freqs: Vec<(usize, usize)> = (0..patch)
        .flat_map(|u| (0..patch).map(move |v| (u, v)))
        .collect();
    freqs.sort_by_key(|&(u, v)| (u + v, u));
    freqs
        .into_iter()
        .flat_map(|(u, v)| (0..3).map(move |c| (u, v, c)))
        .collect()
}

impl DctFeaturizer {
    pub fn new(patch: usize, d_f: usize) -> Result<Self> {
        let full = 3 * patch * patch;
        if patch == 0 || d_f == 0 || d_f > full {
            return Err(Error::invalid(
                "featurizer",
                format!("DCT features need 0 < d_f <= 3 * patch^2 = {full}, got d_f = {d_f}"),
            ));
        }
        let alpha = |k: usize| {
            if k == 0 {
                (1.0 / patch as f64).sqrt()
            } else {
                (2.0 / patch as f64).sqrt()
            }
        };
        let cosines: Vec<f64> = (0..patch)
            .flat_map(|k| {
                (0..patch).map(move |n| {
                    alpha(k) * (PI * (2 * n + 1) as f64 * k as f64 / (2 * patch) as f64).cos()
                })
            })
            .collect();
        let mut basis = vec![0.0f32; d_f * full];
        for (row, &(u, v, c)) in frequency_order(patch).iter().take(d_f).enumerate() {
            for y in 0..patch {
                for x in 0..patch {
                    let val = cosines[u * patch + y] * cosines[v * patch + x];
                    basis[row * full + (y * patch + x) * 3 + c] = val as f32;
                }
            }
        }
        let basis = Tensor::new(vec![d_f, full], basis)?;
        let basis_t = basis.transpose2()?;
        Ok(Self {
            patch,
            d_f,
            basis,
            basis_t,
        })
    }

    pub fn basis(&self) -> &Tensor<f32> {
        &self.basis
    }

    /// Inverse projection of a feature grid back to pixels (exact only when
    /// `d_f = 3 p^2`).
    pub fn reconstruct(&self, latent: &LatentGrid) -> Result<ImageRGB> {
        if latent.d != self.d_f {
            return Err(Error::shape(
                "featurizer",
                format!("{} channels, basis has {}", latent.d, self.d_f),
            ));
        }
        let p = self.patch;
        let pix = latent.as_matrix().matmul(&self.basis)?;
        let (w, h) = (latent.cols * p, latent.rows * p);
        let mut img = ImageRGB::filled(w, h, [0.0; 3]);
        for r in 0..latent.rows {
            for c in 0..latent.cols {
                let src = &pix.data()[(r * latent.cols + c) * 3 * p * p..][..3 * p * p];
                for y in 0..p {
                    for x in 0..p {
                        let i = (y * p + x) * 3;
                        img.set_pixel(c * p + x, r * p + y, [src[i], src[i + 1], src[i + 2]]);
                    }
                }
            }
        }
        Ok(img)
    }
}

impl FeatureEncoder for DctFeaturizer {
    fn patch(&self) -> usize {
        self.patch
    }

    fn dim(&self) -> usize {
        self.d_f
    }

    fn encode(&self, img: &ImageRGB) -> Result<LatentGrid> {
        let (rows, cols) = super::grid_for(img, self.patch)?;
        let feats = patch_matrix(img, self.patch)?.matmul(&self.basis_t)?;
        LatentGrid::new(rows, cols, self.d_f, feats.into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageRGB {
        let mut rng = Rng::new(seed);
        ImageRGB::new(w, h, rng.uniform_vec(w * h * 3, 0.0, 1.0)).unwrap()
    }

    #[test]
    fn grid_shape() {
        let f = DctFeaturizer::new(16, 32).unwrap();
        let g = f.encode(&random_image(32, 32, 1)).unwrap();
        assert_eq!((g.rows, g.cols, g.d), (2, 2, 32));
        let g = f.encode(&random_image(32, 48, 1)).unwrap();
        assert_eq!((g.rows, g.cols, g.d), (3, 2, 32));
    }

    #[test]
    fn constant_image_has_only_dc_terms() {
        let f = DctFeaturizer::new(16, 32).unwrap();
        let g = f
            .encode(&ImageRGB::filled(32, 32, [0.5, 0.2, 0.9]))
            .unwrap();
        for t in 0..g.tokens() {
            let tok = g.token(t);
            // DC of a constant patch = value * p
            assert!((tok[0] - 8.0).abs() < 1e-4);
            assert!((tok[1] - 3.2).abs() < 1e-4);
            assert!((tok[2] - 14.4).abs() < 1e-4);
            for &v in &tok[3..] {
                assert!(v.abs() < 1e-4, "{v}");
            }
        }
    }

    #[test]
    fn rows_are_orthonormal() {
        let f = DctFeaturizer::new(16, 32).unwrap();
        let b = f.basis().cast::<f64>();
        let gram = b.matmul(&b.transpose2().unwrap()).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram.data()[i * 32 + j] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn projection_never_grows_the_norm() {
        let img = random_image(16, 16, 4);
        let patch_norm: f64 = img
            .data()
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let partial = DctFeaturizer::new(16, 32).unwrap().encode(&img).unwrap();
        assert!(partial.data.norm() < patch_norm);
        let full = DctFeaturizer::new(16, 768).unwrap().encode(&img).unwrap();
        assert!((full.data.norm() - patch_norm).abs() / patch_norm < 1e-5);
    }

    #[test]
    fn full_basis_reconstructs_exactly() {
        let img = random_image(16, 32, 2);
        let f = DctFeaturizer::new(16, 768).unwrap();
        let back = f.reconstruct(&f.encode(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn oversized_feature_count_is_rejected() {
        assert!(DctFeaturizer::new(4, 49).is_err());
        assert!(DctFeaturizer::new(4, 48).is_ok());
    }
}
