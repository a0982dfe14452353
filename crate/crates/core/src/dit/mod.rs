//! Single-stream diffusion transformer over a joint text + latent token
//! sequence, predicting the flow velocity of the latent tokens.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::featurizer::LatentGrid;
use crate::nn::{init_param, Init, Linear, Mlp, SelfAttention, Session};
use crate::numerics::{
    finite_diff_check, finite_diff_check_params, io, Graph, ParamId, ParamStore, Real, Rng, Tensor,
    Var,
};
use crate::rope::{axis_band, mrope_table};

#[derive(Clone, Debug, PartialEq)]
pub struct DiTConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    /// Latent patch size; only 1 is supported.
    pub patch: usize,
    pub time_embed_dim: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    /// Latent channels (`d_f` plus residual channels).
    pub z_channels: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            dim: 96,
            layers: 6,
            heads: 6,
            kv_heads: 2,
            patch: 1,
            time_embed_dim: 64,
            mlp_ratio: 4,
            vocab: 4096,
            z_channels: 40,
        }
    }
}

impl DiTConfig {
    /// The full-size shape (2304 wide, 26 layers, 24 heads over 8 KV heads,
    /// 392 latent channels). Only used for symbolic parameter counting.
    pub fn reference() -> Self {
        Self {
            dim: 2304,
            layers: 26,
            heads: 24,
            kv_heads: 8,
            patch: 1,
            time_embed_dim: 256,
            mlp_ratio: 4,
            vocab: 4096,
            z_channels: 392,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("dit", msg));
        if self.heads == 0 || self.kv_heads == 0 || !self.heads.is_multiple_of(self.kv_heads) {
            return bad(format!(
                "{} heads are not a multiple of {} kv heads",
                self.heads, self.kv_heads
            ));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if axis_band(self.head_dim()) == 0 {
            return bad(format!(
                "head dim {} leaves no rotary band per axis",
                self.head_dim()
            ));
        }
        if self.patch != 1 {
            return bad(format!("latent patch size must be 1, got {}", self.patch));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!(
                "time embedding dim {} must be even",
                self.time_embed_dim
            ));
        }
        if self.layers == 0 || self.z_channels == 0 || self.mlp_ratio == 0 {
            return bad("layers, latent channels and mlp ratio must be positive".into());
        }
        Ok(())
    }
}

/// Parameter count implied by `cfg`, computed without allocating anything.
pub fn param_count(cfg: &DiTConfig) -> u64 {
    let d = cfg.dim as u64;
    let kv = (cfg.kv_heads * cfg.head_dim()) as u64;
    let z = cfg.z_channels as u64;
    let hidden = d * cfg.mlp_ratio as u64;
    let linear = |i: u64, o: u64, bias: bool| i * o + if bias { o } else { 0 };
    let block = linear(d, d, false) * 2
        + linear(d, kv, false) * 2
        + linear(d, hidden, true)
        + linear(hidden, d, true)
        + linear(d, 6 * d, true);
    let stem = cfg.vocab as u64 * d
        + linear(z, d, true)
        + linear(cfg.time_embed_dim as u64, d, true)
        + linear(d, d, true);
    let head = linear(d, 2 * d, true) + linear(d, z, true);
    stem + cfg.layers as u64 * block + head
}

/// Positions and extents of one sample's joint sequence. Text tokens sit at
/// `(i, 0, 0)`, image tokens at `(text_len, r, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub text_len: usize,
    pub image_rows: usize,
    pub image_cols: usize,
    pub positions: Vec<[usize; 3]>,
}

impl TokenSequence {
    pub fn new(text_len: usize, image_rows: usize, image_cols: usize) -> Self {
        let mut positions: Vec<[usize; 3]> = (0..text_len).map(|i| [i, 0, 0]).collect();
        for r in 0..image_rows {
            for c in 0..image_cols {
                positions.push([text_len, r, c]);
            }
        }
        Self {
            text_len,
            image_rows,
            image_cols,
            positions,
        }
    }

    pub fn image_tokens(&self) -> usize {
        self.image_rows * self.image_cols
    }

    pub fn len(&self) -> usize {
        self.text_len + self.image_tokens()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One sample of a packed forward pass.
#[derive(Clone, Debug)]
pub struct DitInput<'a> {
    pub text: &'a [u32],
    pub seq: TokenSequence,
    pub t: f64,
}

impl<'a> DitInput<'a> {
    pub fn new(text: &'a [u32], rows: usize, cols: usize, t: f64) -> Self {
        Self {
            text,
            seq: TokenSequence::new(text.len(), rows, cols),
            t,
        }
    }
}

/// Sinusoidal embedding of `t` (scaled by 1000): cosines then sines.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
    let args: Vec<f64> = freqs.map(|f| 1000.0 * t * f).collect();
    args.iter()
        .map(|a| a.cos())
        .chain(args.iter().map(|a| a.sin()))
        .collect()
}

#[derive(Clone, Debug)]
struct DitBlock {
    attn: SelfAttention,
    mlp: Mlp,
    /// `SiLU(c) -> [shift1, scale1, gate1, shift2, scale2, gate2]`, zero-initialized.
    modulation: Linear,
}

#[derive(Clone, Debug)]
pub struct DiT {
    pub cfg: DiTConfig,
    store: ParamStore<f32>,
    text_embed: ParamId,
    latent_in: Linear,
    time_fc1: Linear,
    time_fc2: Linear,
    blocks: Vec<DitBlock>,
    final_mod: Linear,
    out: Linear,
}

impl DiT {
    pub fn new(cfg: &DiTConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut store = ParamStore::new();
        let st = &mut store;
        let text_embed = init_param(
            st,
            "text_embed",
            &[cfg.vocab, d],
            1,
            Init::Normal(0.02),
            rng,
        )?;
        let latent_in = Linear::new(
            st,
            "latent_in",
            cfg.z_channels,
            d,
            true,
            Init::Fan(1.0),
            rng,
        )?;
        let time_fc1 = Linear::new(
            st,
            "time.fc1",
            cfg.time_embed_dim,
            d,
            true,
            Init::Fan(1.0),
            rng,
        )?;
        let time_fc2 = Linear::new(st, "time.fc2", d, d, true, Init::Fan(1.0), rng)?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                let name = format!("block{i}");
                Ok(DitBlock {
                    attn: SelfAttention::new(
                        st,
                        &format!("{name}.attn"),
                        d,
                        cfg.heads,
                        cfg.kv_heads,
                        rng,
                    )?,
                    mlp: Mlp::new(st, &format!("{name}.mlp"), d, cfg.mlp_ratio * d, rng)?,
                    modulation: Linear::new(
                        st,
                        &format!("{name}.mod"),
                        d,
                        6 * d,
                        true,
                        Init::Zeros,
                        rng,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_mod = Linear::new(st, "final.mod", d, 2 * d, true, Init::Zeros, rng)?;
        let out = Linear::new(st, "final.out", d, cfg.z_channels, true, Init::Zeros, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            text_embed,
            latent_in,
            time_fc1,
            time_fc2,
            blocks,
            final_mod,
            out,
        })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// Learned text token table, `[vocab, dim]`.
    pub fn text_table(&self) -> &Tensor<f32> {
        self.store.value(self.text_embed)
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        io::save_store(dir, &self.store)
    }

    pub fn load(dir: &std::path::Path, cfg: &DiTConfig) -> Result<Self> {
        let mut model = Self::new(cfg, &mut Rng::new(0))?;
        let saved = io::load_store(dir)?;
        if saved.len() != model.store.len() {
            return Err(Error::invalid(
                "dit",
                format!(
                    "{} holds {} tensors, model has {}",
                    dir.display(),
                    saved.len(),
                    model.store.len()
                ),
            ));
        }
        model.store.load_values(&saved)?;
        Ok(model)
    }

    /// Velocity for the image tokens of every input, packed in order:
    /// `x` and the result are `[sum rows * cols, z_channels]`. Text token
    /// outputs are discarded.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var, inputs: &[DitInput]) -> Result<Var> {
        let cfg = &self.cfg;
        let d = cfg.dim;
        let image_total: usize = inputs.iter().map(|i| i.seq.image_tokens()).sum();
        if s.g.shape(x) != [image_total, cfg.z_channels] {
            return Err(Error::invalid(
                "dit",
                format!(
                    "latent tokens {:?} do not match {image_total} image tokens of {} channels",
                    s.g.shape(x),
                    cfg.z_channels
                ),
            ));
        }
        let mut temb = Vec::with_capacity(inputs.len() * cfg.time_embed_dim);
        let mut text_ids = Vec::new();
        for inp in inputs {
            if !(0.0..=1.0).contains(&inp.t) || inp.t.is_nan() {
                return Err(Error::invalid(
                    "dit",
                    format!("timestep {} is outside [0, 1]", inp.t),
                ));
            }
            if inp.seq.text_len != inp.text.len() || inp.seq.positions.len() != inp.seq.len() {
                return Err(Error::invalid(
                    "dit",
                    "token sequence does not match its text",
                ));
            }
            if let Some(&bad) = inp.text.iter().find(|&&id| id as usize >= cfg.vocab) {
                return Err(Error::invalid(
                    "dit",
                    format!("token id {bad} outside vocabulary of {}", cfg.vocab),
                ));
            }
            temb.extend(
                timestep_embedding(inp.t, cfg.time_embed_dim)
                    .into_iter()
                    .map(T::lit),
            );
            text_ids.extend(inp.text.iter().map(|&i| i as usize));
        }

        // conditioning vector per sample
        let temb =
            s.g.constant(Tensor::new(vec![inputs.len(), cfg.time_embed_dim], temb)?)?;
        let c = self.time_fc1.forward(s, temb)?;
        let c = s.g.silu(c)?;
        let c = self.time_fc2.forward(s, c)?;
        let c_act = s.g.silu(c)?;

        // assemble the joint sequence: per sample, text rows then image rows
        let img = self.latent_in.forward(s, x)?;
        let txt = if text_ids.is_empty() {
            None
        } else {
            let table = s.p(self.text_embed)?;
            Some(s.g.gather_rows(table, Arc::new(text_ids))?)
        };
        let text_total = inputs.iter().map(|i| i.text.len()).sum::<usize>();
        let mut order = Vec::with_capacity(text_total + image_total);
        let mut sample_of = Vec::with_capacity(order.capacity());
        let mut image_rows = Vec::with_capacity(image_total);
        let mut segments = Vec::with_capacity(inputs.len());
        let mut positions = Vec::with_capacity(order.capacity());
        let (mut t_off, mut i_off) = (0, 0);
        for (k, inp) in inputs.iter().enumerate() {
            segments.push((order.len(), inp.seq.len()));
            for j in 0..inp.seq.text_len {
                // text rows follow all image rows in the stacked source
                order.push(image_total + t_off + j);
                sample_of.push(k);
            }
            for j in 0..inp.seq.image_tokens() {
                image_rows.push(order.len());
                order.push(i_off + j);
                sample_of.push(k);
            }
            positions.extend_from_slice(&inp.seq.positions);
            t_off += inp.seq.text_len;
            i_off += inp.seq.image_tokens();
        }
        let stacked = match txt {
            Some(t) => s.g.concat_rows(&[img, t])?,
            None => img,
        };
        let mut h = s.g.gather_rows(stacked, Arc::new(order))?;

        let layout = Arc::new(crate::numerics::AttnLayout {
            segments,
            heads: cfg.heads,
            kv_heads: cfg.kv_heads,
            head_dim: cfg.head_dim(),
        });
        let table = Arc::new(mrope_table::<T>(&positions, cfg.head_dim())?);
        let sample_of = Arc::new(sample_of);

        for block in &self.blocks {
            let m = block.modulation.forward(s, c_act)?;
            let m = s.g.gather_rows(m, sample_of.clone())?;
            let chunk = |s: &mut Session<T>, i: usize| s.g.slice_cols(m, i * d, d);
            let (shift1, scale1, gate1) = (chunk(s, 0)?, chunk(s, 1)?, chunk(s, 2)?);
            let (shift2, scale2, gate2) = (chunk(s, 3)?, chunk(s, 4)?, chunk(s, 5)?);

            let a = modulate(s.g, h, shift1, scale1)?;
            let a = block.attn.forward(s, a, &layout, Some(&table))?;
            let a = s.g.mul(a, gate1)?;
            h = s.g.add(h, a)?;

            let f = modulate(s.g, h, shift2, scale2)?;
            let f = block.mlp.forward(s, f)?;
            let f = s.g.mul(f, gate2)?;
            h = s.g.add(h, f)?;
        }

        let h = s.g.gather_rows(h, Arc::new(image_rows))?;
        let m = self.final_mod.forward(s, c_act)?;
        let per_image: Vec<usize> = inputs
            .iter()
            .enumerate()
            .flat_map(|(k, inp)| std::iter::repeat_n(k, inp.seq.image_tokens()))
            .collect();
        let m = s.g.gather_rows(m, Arc::new(per_image))?;
        let shift = s.g.slice_cols(m, 0, d)?;
        let scale = s.g.slice_cols(m, d, d)?;
        let h = modulate(s.g, h, shift, scale)?;
        self.out.forward(s, h)
    }

    /// Velocities for a batch of latents (any mix of grid sizes).
    pub fn velocity_batch(
        &self,
        latents: &[LatentGrid],
        texts: &[&[u32]],
        ts: &[f64],
    ) -> Result<Vec<LatentGrid>> {
        if latents.len() != texts.len() || latents.len() != ts.len() {
            return Err(Error::invalid(
                "dit",
                "latents, captions and timesteps differ in count",
            ));
        }
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        for l in latents {
            if l.d != self.cfg.z_channels {
                return Err(Error::invalid(
                    "dit",
                    format!(
                        "latent has {} channels, model expects {}",
                        l.d, self.cfg.z_channels
                    ),
                ));
            }
        }
        let inputs: Vec<DitInput> = latents
            .iter()
            .zip(texts)
            .zip(ts)
            .map(|((l, text), &t)| DitInput::new(text, l.rows, l.cols, t))
            .collect();
        let total: usize = latents.iter().map(LatentGrid::tokens).sum();
        let x = Tensor::new(
            vec![total, self.cfg.z_channels],
            latents
                .iter()
                .flat_map(|l| l.values().iter().copied())
                .collect(),
        )?;
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &self.store);
        let xv = s.g.constant(x)?;
        let v = self.forward(&mut s, xv, &inputs)?;
        let out = g.value(v).data();
        let mut off = 0;
        latents
            .iter()
            .map(|l| {
                let n = l.tokens() * l.d;
                let grid = LatentGrid::new(l.rows, l.cols, l.d, out[off..off + n].to_vec());
                off += n;
                grid
            })
            .collect()
    }

    pub fn velocity(&self, latent: &LatentGrid, text: &[u32], t: f64) -> Result<LatentGrid> {
        Ok(self
            .velocity_batch(std::slice::from_ref(latent), &[text], &[t])?
            .remove(0))
    }
}

/// Worst relative finite-difference errors of a 1-layer, width-16 model with
/// randomized weights: `(input Jacobian, parameter gradient)`.
pub fn gradient_check(seed: u64) -> Result<(f64, f64)> {
    let cfg = DiTConfig {
        dim: 16,
        layers: 1,
        heads: 2,
        kv_heads: 1,
        time_embed_dim: 8,
        vocab: 20,
        z_channels: 3,
        ..Default::default()
    };
    let model = DiT::new(&cfg, &mut Rng::new(seed))?;
    let mut store = model.store().cast::<f64>();
    let mut rng = Rng::new(seed.wrapping_add(1));
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        // zero-initialized gates would otherwise hide most of the network
        store
            .get_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.3 * rng.normal());
    }
    let x = Tensor::<f64>::new(vec![4, 3], rng.normal_vec(12))?;
    let w = Tensor::<f64>::new(vec![4, 3], rng.normal_vec(12))?;
    let text = [2u32, 7, 7];
    let objective = |g: &mut Graph<f64>, store: &ParamStore<f64>, xv: Var| -> Result<Var> {
        let mut s = Session::new(g, store);
        let v = model.forward(&mut s, xv, &[DitInput::new(&text, 2, 2, 0.35)])?;
        let wv = s.g.constant(w.clone())?;
        let p = s.g.mul(v, wv)?;
        s.g.sum(p)
    };
    let input = finite_diff_check(|g, xv| objective(g, &store, xv), &x, 1e-5)?;
    let params = finite_diff_check_params(
        |g, st| {
            let xv = g.constant(x.clone())?;
            objective(g, st, xv)
        },
        &store,
        1e-5,
    )?;
    Ok((input, params))
}

/// `rms_norm(x) * (1 + scale) + shift`, all `[n, d]`.
fn modulate<T: Real>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.rms_norm(x, None, 1e-6)?;
    let s1 = g.add_scalar(scale, T::one())?;
    let y = g.mul(n, s1)?;
    g.add(y, shift)
}
