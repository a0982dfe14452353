use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::nn::{init_param, Init, Session};
use crate::numerics::{ParamId, ParamStore, Real, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Width after the input convolution, then after each 2x upsampling stage.
    pub channels: Vec<usize>,
    pub out_channels: usize,
    pub z_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 32, 32, 16, 16],
            out_channels: 3,
            z_channels: 32,
        }
    }
}

/// Same-padding square convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan = in_ch * kernel * kernel;
        Ok(Self {
            w: init_param(
                store,
                &format!("{name}.w"),
                &[out_ch, in_ch, kernel, kernel],
                fan,
                Init::Fan(1.0),
                rng,
            )?,
            b: init_param(
                store,
                &format!("{name}.b"),
                &[out_ch],
                fan,
                Init::Zeros,
                rng,
            )?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.p(self.w)?;
        let b = s.p(self.b)?;
        s.g.conv2d(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    up: Conv,
    refine: Conv,
}

/// Convolutional decoder: per-channel input standardization, a 3x3 input
/// convolution at grid resolution, then one `upsample -> conv -> SiLU ->
/// residual conv` stage per factor of two, and a sigmoid output convolution.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    /// Frozen `-mean` and `1 / std` of the latent channels.
    in_shift: ParamId,
    in_scale: ParamId,
    conv_in: Conv,
    stages: Vec<Stage>,
    conv_out: Conv,
}

impl Decoder {
    /// Registers parameters as `<name>.*`. `patch` fixes the number of stages.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &DecoderConfig,
        patch: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !patch.is_power_of_two() || patch < 2 {
            return Err(Error::invalid(
                "autoencoder",
                format!("patch {patch} is not a power of two"),
            ));
        }
        let n_stages = patch.trailing_zeros() as usize;
        if cfg.channels.len() != n_stages + 1 {
            return Err(Error::invalid(
                "autoencoder",
                format!(
                    "decoder needs {} channel widths ({n_stages} 2x stages for patch {patch}), got {:?}",
                    n_stages + 1,
                    cfg.channels
                ),
            ));
        }
        if cfg.channels.contains(&0) || cfg.z_channels == 0 || cfg.out_channels == 0 {
            return Err(Error::invalid(
                "autoencoder",
                "decoder widths must be positive",
            ));
        }
        let z = cfg.z_channels;
        let in_shift = store.add(format!("{name}.in_shift"), Tensor::zeros(&[z]))?;
        let in_scale = store.add(format!("{name}.in_scale"), Tensor::full(&[z], T::one()))?;
        store.get_mut(in_shift).frozen = true;
        store.get_mut(in_scale).frozen = true;
        let conv_in = Conv::new(
            store,
            &format!("{name}.conv_in"),
            z,
            cfg.channels[0],
            3,
            rng,
        )?;
        let stages = cfg
            .channels
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Ok(Stage {
                    up: Conv::new(store, &format!("{name}.stage{i}.up"), w[0], w[1], 3, rng)?,
                    refine: Conv::new(
                        store,
                        &format!("{name}.stage{i}.refine"),
                        w[1],
                        w[1],
                        3,
                        rng,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let last = *cfg.channels.last().expect("checked non-empty");
        let conv_out = Conv::new(
            store,
            &format!("{name}.conv_out"),
            last,
            cfg.out_channels,
            3,
            rng,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            in_shift,
            in_scale,
            conv_in,
            stages,
            conv_out,
        })
    }

    /// Sets the frozen input standardization.
    pub fn set_input_stats<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        mean: &[f64],
        std: &[f64],
    ) -> Result<()> {
        let z = self.cfg.z_channels;
        if mean.len() != z || std.len() != z {
            return Err(Error::shape(
                "set_input_stats",
                format!("{} / {} values for {z} channels", mean.len(), std.len()),
            ));
        }
        store.get_mut(self.in_shift).value =
            Tensor::new(vec![z], mean.iter().map(|&m| T::lit(-m)).collect())?;
        store.get_mut(self.in_scale).value =
            Tensor::new(vec![z], std.iter().map(|&s| T::lit(1.0 / s)).collect())?;
        Ok(())
    }

    /// `z` is token-major `[batch * rows * cols, z_channels]`; returns pixels
    /// `[batch, out_channels, rows * p, cols * p]` in `(0, 1)`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        z: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let zc = self.cfg.z_channels;
        if s.g.shape(z) != [batch * rows * cols, zc] {
            return Err(Error::invalid(
                "autoencoder",
                format!(
                    "decoder expects {zc} latent channels on a {rows}x{cols} grid, got {:?}",
                    s.g.shape(z)
                ),
            ));
        }
        let shift = s.p(self.in_shift)?;
        let scale = s.p(self.in_scale)?;
        let x = s.g.add_row(z, shift)?;
        let x = s.g.mul_row(x, scale)?;
        let x = s.g.reshape(x, &[batch, rows * cols, zc])?;
        let x = s.g.transpose_batched(x)?;
        let x = s.g.reshape(x, &[batch, zc, rows, cols])?;
        let x = self.conv_in.forward(s, x)?;
        let mut x = s.g.silu(x)?;
        for stage in &self.stages {
            let up = s.g.upsample2x(x)?;
            let h = stage.up.forward(s, up)?;
            let h = s.g.silu(h)?;
            let r = stage.refine.forward(s, h)?;
            let r = s.g.silu(r)?;
            x = s.g.add(h, r)?;
        }
        let out = self.conv_out.forward(s, x)?;
        s.g.sigmoid(out)
    }
}

/// Stacks equally sized images into `[batch, 3, h, w]`.
pub fn images_to_nchw(images: &[ImageRGB]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("autoencoder", "empty image batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::invalid(
                "autoencoder",
                format!(
                    "batch mixes {w}x{h} and {}x{} images",
                    img.width(),
                    img.height()
                ),
            ));
        }
        for c in 0..3 {
            data.extend(img.data().iter().skip(c).step_by(3));
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

pub fn nchw_to_images(t: &Tensor<f32>) -> Result<Vec<ImageRGB>> {
    let &[b, 3, h, w] = t.shape() else {
        return Err(Error::shape("nchw_to_images", format!("{:?}", t.shape())));
    };
    (0..b)
        .map(|i| {
            let plane = &t.data()[i * 3 * h * w..(i + 1) * 3 * h * w];
            let data = (0..h * w)
                .flat_map(|p| (0..3).map(move |c| plane[c * h * w + p]))
                .collect();
            ImageRGB::new(w, h, data)
        })
        .collect()
}
