//! Feature diagnostics: PCA colour maps of token grids, cross-resolution
//! cosine similarity and reconstruction PSNR.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::featurizer::{FeatureEncoder, LatentGrid};
use crate::image::ImageRGB;
use crate::parallel::{map_indexed, Exec};
use crate::pipeline::Resolution;

pub const SIMILARITY_FILE: &str = "similarity.csv";

fn invalid(msg: impl Into<String>) -> Error {
    Error::invalid("analysis", msg)
}

/// Principal axes of a token matrix, strongest first.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm components, one per row, sign fixed so the largest-magnitude
    /// entry is positive.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component (population normalisation).
    pub variances: Vec<f64>,
}

impl Pca {
    /// Fits the top `k` components of the `n x d` token matrix of `grid`.
    pub fn fit(grid: &LatentGrid, k: usize) -> Result<Self> {
        let (n, d) = (grid.tokens(), grid.d);
        if n < 3 {
            return Err(invalid(format!("PCA needs at least 3 tokens, got {n}")));
        }
        let mut mean = vec![0.0f64; d];
        for t in 0..n {
            for (m, &v) in mean.iter_mut().zip(grid.token(t)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for t in 0..n {
            let x: Vec<f64> = grid
                .token(t)
                .iter()
                .zip(&mean)
                .map(|(&v, m)| v as f64 - m)
                .collect();
            for i in 0..d {
                for j in i..d {
                    cov[(i, j)] += x[i] * x[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / n as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = Vec::new();
        let mut variances = Vec::new();
        for &i in order.iter().take(k.min(d)) {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            variances.push(eig.eigenvalues[i].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            variances,
        })
    }

    /// Coordinates of every token along each component, `[component][token]`.
    pub fn project(&self, grid: &LatentGrid) -> Vec<Vec<f64>> {
        self.components
            .iter()
            .map(|c| {
                (0..grid.tokens())
                    .map(|t| {
                        grid.token(t)
                            .iter()
                            .zip(&self.mean)
                            .zip(c)
                            .map(|((&v, m), w)| (v as f64 - m) * w)
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Relative range below which a projected channel counts as constant.
const FLAT_RANGE: f64 = 1e-6;

/// Top three principal components of the tokens, each min-max scaled to
/// `[0, 1]`, as an image with one pixel per token. Components without
/// variance (rank-deficient grids) render as 0.
pub fn pca_rgb(features: &LatentGrid) -> Result<ImageRGB> {
    let pca = Pca::fit(features, 3)?;
    let coords = pca.project(features);
    let ranges: Vec<(f64, f64)> = coords
        .iter()
        .map(|c| {
            c.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                })
        })
        .collect();
    let scale = ranges.iter().map(|(lo, hi)| hi - lo).fold(0.0f64, f64::max);
    let mut img = ImageRGB::filled(features.cols, features.rows, [0.0; 3]);
    for (ch, (c, &(lo, hi))) in coords.iter().zip(&ranges).enumerate() {
        if hi - lo <= FLAT_RANGE * scale || hi - lo == 0.0 {
            continue;
        }
        for (t, &v) in c.iter().enumerate() {
            let (y, x) = (t / features.cols, t % features.cols);
            let mut px = img.pixel(x, y);
            px[ch] = ((v - lo) / (hi - lo)) as f32;
            img.set_pixel(x, y, px);
        }
    }
    Ok(img)
}

/// Area-weighted average pooling of a grid to `rows x cols`. Reduces to plain
/// block averaging when the factors are integers.
pub fn pool_grid(grid: &LatentGrid, rows: usize, cols: usize) -> Result<LatentGrid> {
    if rows == 0 || cols == 0 || rows > grid.rows || cols > grid.cols {
        return Err(invalid(format!(
            "cannot pool a {}x{} grid to {rows}x{cols}",
            grid.rows, grid.cols
        )));
    }
    if (rows, cols) == (grid.rows, grid.cols) {
        return Ok(grid.clone());
    }
    // Overlap of source cell i with target cell o, both measured in target units.
    let weights = |src: usize, dst: usize| -> Vec<Vec<(usize, f64)>> {
        (0..dst)
            .map(|o| {
                let (lo, hi) = (
                    o as f64 * src as f64 / dst as f64,
                    (o + 1) as f64 * src as f64 / dst as f64,
                );
                (lo.floor() as usize..(hi.ceil() as usize).min(src))
                    .filter_map(|i| {
                        let w =
                            (hi.min(i as f64 + 1.0) - lo.max(i as f64)) * dst as f64 / src as f64;
                        (w > 0.0).then_some((i, w))
                    })
                    .collect()
            })
            .collect()
    };
    let (wr, wc) = (weights(grid.rows, rows), weights(grid.cols, cols));
    let d = grid.d;
    let mut out = vec![0.0f32; rows * cols * d];
    for (r, row_w) in wr.iter().enumerate() {
        for (c, col_w) in wc.iter().enumerate() {
            let mut acc = vec![0.0f64; d];
            for &(i, a) in row_w {
                for &(j, b) in col_w {
                    for (s, &v) in acc.iter_mut().zip(grid.token(i * grid.cols + j)) {
                        *s += a * b * v as f64;
                    }
                }
            }
            for (o, s) in out[(r * cols + c) * d..][..d].iter_mut().zip(acc) {
                *o = s as f32;
            }
        }
    }
    LatentGrid::new(rows, cols, d, out)
}

/// How two aligned grids are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CosineMode {
    /// Cosine of each token pair, averaged over tokens.
    #[default]
    PerToken,
    /// One cosine between the flattened grids.
    Flattened,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    match (aa > 0.0, bb > 0.0) {
        (false, false) => 1.0,
        (true, true) => (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0),
        _ => 0.0,
    }
}

/// Similarity of two feature grids after pooling both to their common
/// (smallest) extent.
pub fn grid_cosine(a: &LatentGrid, b: &LatentGrid, mode: CosineMode) -> Result<f64> {
    if a.d != b.d {
        return Err(invalid(format!("channel mismatch {} vs {}", a.d, b.d)));
    }
    let (rows, cols) = (a.rows.min(b.rows), a.cols.min(b.cols));
    let (a, b) = (pool_grid(a, rows, cols)?, pool_grid(b, rows, cols)?);
    Ok(match mode {
        CosineMode::Flattened => cosine(a.values(), b.values()),
        CosineMode::PerToken => {
            (0..a.tokens())
                .map(|t| cosine(a.token(t), b.token(t)))
                .sum::<f64>()
                / a.tokens() as f64
        }
    })
}

/// Pairwise mean cosine similarity of features across resolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    pub resolutions: Vec<Resolution>,
    /// Row-major `resolutions.len()` square matrix.
    pub matrix: Vec<Vec<f64>>,
    pub encoder_id: String,
}

impl SimilarityReport {
    pub fn get(&self, a: Resolution, b: Resolution) -> Option<f64> {
        let i = self.resolutions.iter().position(|&r| r == a)?;
        let j = self.resolutions.iter().position(|&r| r == b)?;
        Some(self.matrix[i][j])
    }

    /// `res_a,res_b,cosine` with every ordered pair.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("res_a,res_b,cosine\n");
        for (i, &(ha, wa)) in self.resolutions.iter().enumerate() {
            for (j, &(hb, wb)) in self.resolutions.iter().enumerate() {
                let _ = writeln!(out, "{ha}x{wa},{hb}x{wb},{:.6}", self.matrix[i][j]);
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn check_resolutions(resolutions: &[Resolution]) -> Result<()> {
    if resolutions.is_empty() {
        return Err(invalid("no resolutions to compare"));
    }
    if let Some((h, w)) = resolutions
        .iter()
        .find(|(h, w)| *h == 0 || *w == 0 || h % 16 != 0 || w % 16 != 0)
    {
        return Err(invalid(format!(
            "resolution {h}x{w} is not a positive multiple of 16"
        )));
    }
    Ok(())
}

/// Encodes `img` at every resolution and compares each pair of feature grids,
/// pooling the larger grid down to the smaller one. Averaged over `images`.
pub fn cross_res_cosine_mode(
    encoder: &impl FeatureEncoder,
    encoder_id: &str,
    images: &[ImageRGB],
    resolutions: &[Resolution],
    mode: CosineMode,
) -> Result<SimilarityReport> {
    check_resolutions(resolutions)?;
    if images.is_empty() {
        return Err(invalid("no images to compare"));
    }
    let n = resolutions.len();
    let per_image = map_indexed(
        Exec::current(),
        images.len(),
        |k| -> Result<Vec<Vec<f64>>> {
            let grids = resolutions
                .iter()
                .map(|&(h, w)| encoder.encode(&images[k].resize(w, h)))
                .collect::<Result<Vec<_>>>()?;
            let mut m = vec![vec![1.0f64; n]; n];
            for i in 0..n {
                for j in i + 1..n {
                    let c = grid_cosine(&grids[i], &grids[j], mode)?;
                    m[i][j] = c;
                    m[j][i] = c;
                }
            }
            Ok(m)
        },
    );
    let mut matrix = vec![vec![0.0f64; n]; n];
    for m in per_image {
        let m = m?;
        for i in 0..n {
            for j in 0..n {
                matrix[i][j] += m[i][j];
            }
        }
    }
    for (i, row) in matrix.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j {
                1.0
            } else {
                (*v / images.len() as f64).clamp(-1.0, 1.0)
            };
        }
    }
    Ok(SimilarityReport {
        resolutions: resolutions.to_vec(),
        matrix,
        encoder_id: encoder_id.to_string(),
    })
}

/// Per-token cosine similarity of `img`'s features across `resolutions`.
pub fn cross_res_cosine(
    encoder: &impl FeatureEncoder,
    encoder_id: &str,
    img: &ImageRGB,
    resolutions: &[Resolution],
) -> Result<SimilarityReport> {
    cross_res_cosine_mode(
        encoder,
        encoder_id,
        std::slice::from_ref(img),
        resolutions,
        CosineMode::PerToken,
    )
}

/// Returns the same unit feature for every patch, whatever the input.
#[derive(Clone, Copy, Debug)]
pub struct ConstantEncoder {
    pub patch: usize,
    pub dim: usize,
}

impl FeatureEncoder for ConstantEncoder {
    fn patch(&self) -> usize {
        self.patch
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, img: &ImageRGB) -> Result<LatentGrid> {
        let (rows, cols) = crate::featurizer::grid_for(img, self.patch)?;
        let v = 1.0 / (self.dim as f32).sqrt();
        LatentGrid::new(rows, cols, self.dim, vec![v; rows * cols * self.dim])
    }
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::shape(
            "analysis",
            format!(
                "psnr of {}x{} and {}x{}",
                a.width(),
                a.height(),
                b.width(),
                b.height()
            ),
        ));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data().len().max(1) as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// Mean PSNR of `decode(encode(img))` over `images`.
pub fn reconstruction_psnr(ae: &Autoencoder, images: &[ImageRGB]) -> Result<f64> {
    if images.is_empty() {
        return Err(invalid("no images to reconstruct"));
    }
    let scores = map_indexed(Exec::current(), images.len(), |k| -> Result<f64> {
        let mut rec = ae.decode(&ae.encode_latent(&images[k])?)?;
        rec.clamp01();
        psnr(&images[k], &rec)
    });
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
