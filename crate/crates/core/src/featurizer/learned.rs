use std::path::Path;
use std::sync::Arc;

use super::{grid_for, patch_matrix, FeatureEncoder, LatentGrid};
use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::nn::{init_param, Block, Init, Linear, Session};
use crate::numerics::{io, Adam, AdamConfig, Graph, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LearnedFeaturizerConfig {
    pub patch: usize,
    /// Output channels `d_f`.
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Largest grid side covered by the positional tables.
    pub max_grid: usize,
    /// Features are read after this many blocks; `None` means the final one.
    pub layer: Option<usize>,
    pub mask_ratio: f64,
    pub batch: usize,
    pub lr: f32,
}

impl Default for LearnedFeaturizerConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            dim: 32,
            blocks: 2,
            heads: 2,
            max_grid: 16,
            layer: None,
            mask_ratio: 0.5,
            batch: 8,
            lr: 1e-3,
        }
    }
}

/// Tiny ViT encoder: linear patch embedding, factored row/column positional
/// tables and a stack of pre-norm blocks. Only usable for featurization once
/// every weight is frozen.
#[derive(Clone, Debug)]
pub struct LearnedFeaturizer {
    pub cfg: LearnedFeaturizerConfig,
    store: ParamStore<f32>,
    embed: Linear,
    pos_row: ParamId,
    pos_col: ParamId,
    mask_token: ParamId,
    blocks: Vec<Block>,
    head: Linear,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SslReport {
    /// Masked-reconstruction loss before each update.
    pub losses: Vec<f32>,
}

impl LearnedFeaturizer {
    /// Fresh, trainable weights.
    pub fn init(cfg: &LearnedFeaturizerConfig, rng: &mut Rng) -> Result<Self> {
        if !cfg.dim.is_multiple_of(cfg.heads) {
            return Err(Error::invalid(
                "featurizer",
                format!("dim {} is not divisible by {} heads", cfg.dim, cfg.heads),
            ));
        }
        let layer = cfg.layer.unwrap_or(cfg.blocks);
        if layer > cfg.blocks {
            return Err(Error::invalid(
                "featurizer",
                format!("layer index {layer} exceeds {} blocks", cfg.blocks),
            ));
        }
        let px = 3 * cfg.patch * cfg.patch;
        let mut store = ParamStore::new();
        let embed = Linear::new(&mut store, "embed", px, cfg.dim, true, Init::Fan(1.0), rng)?;
        let pos_row = init_param(
            &mut store,
            "pos_row",
            &[cfg.max_grid, cfg.dim],
            1,
            Init::Normal(0.02),
            rng,
        )?;
        let pos_col = init_param(
            &mut store,
            "pos_col",
            &[cfg.max_grid, cfg.dim],
            1,
            Init::Normal(0.02),
            rng,
        )?;
        let mask_token = init_param(
            &mut store,
            "mask_token",
            &[1, cfg.dim],
            1,
            Init::Normal(0.02),
            rng,
        )?;
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(&mut store, &format!("block{i}"), cfg.dim, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut store, "head", cfg.dim, px, true, Init::Fan(1.0), rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            embed,
            pos_row,
            pos_col,
            mask_token,
            blocks,
            head,
        })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn freeze(&mut self) {
        self.store.set_frozen(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.store.all_frozen()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::save_store(dir, &self.store)
    }

    /// Loads weights written by [`save`](Self::save); frozen flags are kept.
    pub fn load(dir: &Path, cfg: &LearnedFeaturizerConfig) -> Result<Self> {
        let saved = io::load_store(dir)?;
        let mut f = Self::init(cfg, &mut Rng::new(0))?;
        f.store.load_values(&saved)?;
        for (_, p) in saved.iter() {
            let own = f.store.require(&p.name)?;
            f.store.get_mut(own).frozen = p.frozen;
        }
        if f.store.len() != saved.len() {
            return Err(Error::invalid(
                "featurizer",
                format!(
                    "{} holds {} tensors, expected {}",
                    dir.display(),
                    saved.len(),
                    f.store.len()
                ),
            ));
        }
        Ok(f)
    }

    /// Token features for several images packed into one sequence. `masks`
    /// marks tokens replaced by the mask token before the encoder runs.
    /// Returns the encoder output `[tokens, dim]`.
    fn forward(
        &self,
        s: &mut Session<f32>,
        grids: &[(usize, usize)],
        pixels: Var,
        masks: Option<&[bool]>,
        layers: usize,
    ) -> Result<Var> {
        let total: usize = grids.iter().map(|(r, c)| r * c).sum();
        let mut x = self.embed.forward(s, pixels)?;
        if let Some(masks) = masks {
            let m = s.p(self.mask_token)?;
            let both = s.g.concat_rows(&[x, m])?;
            let idx = (0..total)
                .map(|i| if masks[i] { total } else { i })
                .collect();
            x = s.g.gather_rows(both, Arc::new(idx))?;
        }
        let (mut rows_idx, mut cols_idx, mut segments) = (Vec::new(), Vec::new(), Vec::new());
        for &(rows, cols) in grids {
            if rows > self.cfg.max_grid || cols > self.cfg.max_grid {
                return Err(Error::invalid(
                    "featurizer",
                    format!(
                        "{rows}x{cols} grid exceeds positional table size {}",
                        self.cfg.max_grid
                    ),
                ));
            }
            segments.push((rows_idx.len(), rows * cols));
            for r in 0..rows {
                for c in 0..cols {
                    rows_idx.push(r);
                    cols_idx.push(c);
                }
            }
        }
        let pr = s.p(self.pos_row)?;
        let pr = s.g.gather_rows(pr, Arc::new(rows_idx))?;
        let pc = s.p(self.pos_col)?;
        let pc = s.g.gather_rows(pc, Arc::new(cols_idx))?;
        x = s.g.add(x, pr)?;
        x = s.g.add(x, pc)?;
        let layout = Arc::new(crate::numerics::AttnLayout {
            segments,
            heads: self.cfg.heads,
            kv_heads: self.cfg.heads,
            head_dim: self.cfg.dim / self.cfg.heads,
        });
        for block in &self.blocks[..layers] {
            x = block.forward(s, x, &layout, None)?;
        }
        Ok(x)
    }

    fn layers(&self) -> usize {
        self.cfg.layer.unwrap_or(self.cfg.blocks)
    }
}

fn centred_patches(img: &ImageRGB, patch: usize) -> Result<Tensor<f32>> {
    Ok(patch_matrix(img, patch)?.map(|v| v - 0.5))
}

impl FeatureEncoder for LearnedFeaturizer {
    fn patch(&self) -> usize {
        self.cfg.patch
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn encode(&self, img: &ImageRGB) -> Result<LatentGrid> {
        if !self.is_frozen() {
            return Err(Error::invalid(
                "featurizer",
                "learned featurizer weights must be frozen before use",
            ));
        }
        let (rows, cols) = grid_for(img, self.cfg.patch)?;
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &self.store);
        let px = s.g.constant(centred_patches(img, self.cfg.patch)?)?;
        let out = self.forward(&mut s, &[(rows, cols)], px, None, self.layers())?;
        LatentGrid::new(rows, cols, self.cfg.dim, g.value(out).data().to_vec())
    }
}

/// Masked-patch pretraining: a random subset of each image's tokens is
/// replaced by a learned mask token and the encoder plus a linear head must
/// reconstruct the hidden pixels. Returns frozen weights.
pub fn pretrain_ssl(
    corpus: &[ImageRGB],
    cfg: &LearnedFeaturizerConfig,
    steps: usize,
    rng: &Rng,
) -> Result<(LearnedFeaturizer, SslReport)> {
    if corpus.is_empty() {
        return Err(Error::invalid("featurizer", "pretraining corpus is empty"));
    }
    for img in corpus {
        grid_for(img, cfg.patch)?;
    }
    let mut model = LearnedFeaturizer::init(cfg, &mut rng.split(0))?;
    let mut opt = Adam::new(AdamConfig::adam(cfg.lr, (0.9, 0.999)));
    let mut report = SslReport::default();
    for step in 0..steps {
        let mut step_rng = rng.split(step as u64 + 1);
        let loss = ssl_step(&mut model, &mut opt, corpus, &mut step_rng).map_err(|e| {
            Error::invalid(
                "featurizer",
                format!("pretraining diverged at step {step}: {e}"),
            )
        })?;
        report.losses.push(loss);
    }
    model.freeze();
    Ok((model, report))
}

fn ssl_step(
    model: &mut LearnedFeaturizer,
    opt: &mut Adam,
    corpus: &[ImageRGB],
    rng: &mut Rng,
) -> Result<f32> {
    let cfg = model.cfg.clone();
    let mut grids = Vec::new();
    let mut patches = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..cfg.batch.max(1) {
        let img = &corpus[rng.below(corpus.len())];
        let (rows, cols) = grid_for(img, cfg.patch)?;
        let n = rows * cols;
        let hidden = ((n as f64 * cfg.mask_ratio).round() as usize).clamp(1, n);
        let mut m = vec![false; n];
        for &i in &rng.permutation(n)[..hidden] {
            m[i] = true;
        }
        masks.extend(m);
        grids.push((rows, cols));
        patches.push(centred_patches(img, cfg.patch)?);
    }
    let px = 3 * cfg.patch * cfg.patch;
    let total = masks.len();
    let pixels = Tensor::new(
        vec![total, px],
        patches.into_iter().flat_map(Tensor::into_data).collect(),
    )?;
    let masked: Vec<usize> = (0..total).filter(|&i| masks[i]).collect();

    let mut g = Graph::new();
    let loss = {
        let mut s = Session::new(&mut g, &model.store);
        let input = s.g.constant(pixels)?;
        let h = model.forward(&mut s, &grids, input, Some(&masks), cfg.blocks)?;
        let h = s.g.gather_rows(h, Arc::new(masked.clone()))?;
        let pred = model.head.forward(&mut s, h)?;
        let target = s.g.gather_rows(input, Arc::new(masked))?;
        let d = s.g.sub(pred, target)?;
        let d = s.g.square(d)?;
        s.g.mean(d)?
    };
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "masked reconstruction loss".into(),
        });
    }
    let grads = g.backward(loss)?;
    opt.step(&mut model.store, &grads);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> Vec<ImageRGB> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| {
                let col = [
                    rng.uniform() as f32,
                    rng.uniform() as f32,
                    rng.uniform() as f32,
                ];
                let (cx, cy) = (8.0 + 16.0 * rng.uniform(), 8.0 + 16.0 * rng.uniform());
                let mut img = ImageRGB::filled(32, 32, [0.1; 3]);
                for y in 0..32 {
                    for x in 0..32 {
                        if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) < 64.0 {
                            img.set_pixel(x, y, col);
                        }
                    }
                }
                img
            })
            .collect()
    }

    fn small_cfg() -> LearnedFeaturizerConfig {
        LearnedFeaturizerConfig {
            patch: 8,
            dim: 16,
            batch: 4,
            ..Default::default()
        }
    }

    #[test]
    fn unfrozen_weights_are_refused() {
        let f = LearnedFeaturizer::init(&small_cfg(), &mut Rng::new(1)).unwrap();
        let err = f
            .encode(&ImageRGB::filled(16, 16, [0.0; 3]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("frozen"), "{err}");
    }

    #[test]
    fn grid_shape_and_repeatability() {
        let cfg = LearnedFeaturizerConfig::default();
        let mut f = LearnedFeaturizer::init(&cfg, &mut Rng::new(1)).unwrap();
        f.freeze();
        let img = blobs(1, 3).remove(0).resize(32, 48);
        let a = f.encode(&img).unwrap();
        assert_eq!((a.rows, a.cols, a.d), (3, 2, 32));
        assert_eq!(a, f.encode(&img).unwrap());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = small_cfg();
        let rng = Rng::new(4);
        let (f, report) = pretrain_ssl(&blobs(4, 1), &cfg, 0, &rng).unwrap();
        assert!(report.losses.is_empty());
        let init = LearnedFeaturizer::init(&cfg, &mut rng.split(0)).unwrap();
        assert_eq!(f.store().digest(), init.store().digest());
        assert!(f.is_frozen());
    }

    #[test]
    fn pretraining_lowers_loss_and_is_deterministic() {
        let cfg = small_cfg();
        let corpus = blobs(32, 2);
        let (a, ra) = pretrain_ssl(&corpus, &cfg, 60, &Rng::new(5)).unwrap();
        let (b, _) = pretrain_ssl(&corpus, &cfg, 60, &Rng::new(5)).unwrap();
        assert_eq!(a.store().digest(), b.store().digest());
        let head: f32 = ra.losses[..5].iter().sum::<f32>() / 5.0;
        let tail: f32 = ra.losses[55..].iter().sum::<f32>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(pretrain_ssl(&[], &small_cfg(), 1, &Rng::new(0)).is_err());
    }

    #[test]
    fn patch_permutation_permutes_tokens_without_positions() {
        let cfg = small_cfg();
        let mut f = LearnedFeaturizer::init(&cfg, &mut Rng::new(7)).unwrap();
        for name in ["pos_row", "pos_col"] {
            let id = f.store().require(name).unwrap();
            let shape = f.store().value(id).shape().to_vec();
            f.store_mut().get_mut(id).value = Tensor::zeros(&shape);
        }
        f.freeze();
        let img = blobs(1, 9).remove(0);
        // swap the top-left and bottom-right 8x8 patches
        let mut swapped = img.clone();
        for y in 0..8 {
            for x in 0..8 {
                swapped.set_pixel(x, y, img.pixel(x + 24, y + 24));
                swapped.set_pixel(x + 24, y + 24, img.pixel(x, y));
            }
        }
        let a = f.encode(&img).unwrap();
        let b = f.encode(&swapped).unwrap();
        let last = a.tokens() - 1;
        for t in 0..a.tokens() {
            let src = if t == 0 {
                last
            } else if t == last {
                0
            } else {
                t
            };
            for (x, y) in a.token(src).iter().zip(b.token(t)) {
                assert!((x - y).abs() < 1e-5, "token {t}");
            }
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let cfg = small_cfg();
        let mut f = LearnedFeaturizer::init(&cfg, &mut Rng::new(3)).unwrap();
        f.freeze();
        let dir = tempfile::tempdir().unwrap();
        f.save(dir.path()).unwrap();
        let back = LearnedFeaturizer::load(dir.path(), &cfg).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.store().digest(), f.store().digest());
    }
}
