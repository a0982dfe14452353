//! Forward and backward kernels for the fused tape operations.

use super::{tensor::softmax_in_place, Real};
use crate::parallel::{map_indexed, Exec};

/// Grouped-query attention over packed sequences.
///
/// Tokens of several independent sequences are stored back to back; each
/// `(start, len)` segment attends only within itself, bidirectionally.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub segments: Vec<(usize, usize)>,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttnLayout {
    pub fn tokens(&self) -> usize {
        self.segments.iter().map(|s| s.1).sum()
    }

    fn prob_offsets(&self) -> (Vec<usize>, usize) {
        let mut offs = Vec::with_capacity(self.segments.len());
        let mut acc = 0;
        for &(_, len) in &self.segments {
            offs.push(acc);
            acc += self.heads * len * len;
        }
        (offs, acc)
    }
}

/// Returns the attention output `[tokens, heads * head_dim]` and the softmax
/// probabilities, blocked per segment and head.
pub fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    layout: &AttnLayout,
) -> (Vec<T>, Vec<T>) {
    let (h, kvh, hd) = (layout.heads, layout.kv_heads, layout.head_dim);
    let group = h / kvh;
    let qw = h * hd;
    let kw = kvh * hd;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let n = layout.tokens();
    let (offs, total) = layout.prob_offsets();

    let blocks = map_indexed(Exec::current(), layout.segments.len(), |s| {
        let (start, len) = layout.segments[s];
        let mut out = vec![T::zero(); len * qw];
        let mut probs = vec![T::zero(); h * len * len];
        for head in 0..h {
            let g = head / group;
            let p = &mut probs[head * len * len..(head + 1) * len * len];
            for i in 0..len {
                let qi = &q[(start + i) * qw + head * hd..][..hd];
                let row = &mut p[i * len..(i + 1) * len];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[(start + j) * kw + g * hd..][..hd];
                    let mut dot = T::zero();
                    for d in 0..hd {
                        dot += qi[d] * kj[d];
                    }
                    *r = dot * scale;
                }
                softmax_in_place(row);
                let oi = &mut out[i * qw + head * hd..][..hd];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &v[(start + j) * kw + g * hd..][..hd];
                    for d in 0..hd {
                        oi[d] += pij * vj[d];
                    }
                }
            }
        }
        (out, probs)
    });

    let mut out = vec![T::zero(); n * qw];
    let mut probs = vec![T::zero(); total];
    for (s, (o, p)) in blocks.into_iter().enumerate() {
        let (start, len) = layout.segments[s];
        out[start * qw..(start + len) * qw].copy_from_slice(&o);
        probs[offs[s]..offs[s] + p.len()].copy_from_slice(&p);
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` of [`attention_forward`].
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    layout: &AttnLayout,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (h, kvh, hd) = (layout.heads, layout.kv_heads, layout.head_dim);
    let group = h / kvh;
    let qw = h * hd;
    let kw = kvh * hd;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let n = layout.tokens();
    let (offs, _) = layout.prob_offsets();

    let blocks = map_indexed(Exec::current(), layout.segments.len(), |s| {
        let (start, len) = layout.segments[s];
        let mut dq = vec![T::zero(); len * qw];
        let mut dk = vec![T::zero(); len * kw];
        let mut dv = vec![T::zero(); len * kw];
        let mut dp = vec![T::zero(); len];
        for head in 0..h {
            let g = head / group;
            let p = &probs[offs[s] + head * len * len..][..len * len];
            for i in 0..len {
                let doi = &dout[(start + i) * qw + head * hd..][..hd];
                let prow = &p[i * len..(i + 1) * len];
                // dV and dP
                for j in 0..len {
                    let vj = &v[(start + j) * kw + g * hd..][..hd];
                    let dvj = &mut dv[j * kw + g * hd..][..hd];
                    let mut dot = T::zero();
                    for d in 0..hd {
                        dvj[d] += prow[j] * doi[d];
                        dot += doi[d] * vj[d];
                    }
                    dp[j] = dot;
                }
                let mut inner = T::zero();
                for j in 0..len {
                    inner += prow[j] * dp[j];
                }
                let qi = &q[(start + i) * qw + head * hd..][..hd];
                for j in 0..len {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    let kj = &k[(start + j) * kw + g * hd..][..hd];
                    let dqi = &mut dq[i * qw + head * hd..][..hd];
                    for d in 0..hd {
                        dqi[d] += ds * kj[d];
                    }
                    let dkj = &mut dk[j * kw + g * hd..][..hd];
                    for d in 0..hd {
                        dkj[d] += ds * qi[d];
                    }
                }
            }
        }
        (dq, dk, dv)
    });

    let mut dq = vec![T::zero(); n * qw];
    let mut dk = vec![T::zero(); n * kw];
    let mut dv = vec![T::zero(); n * kw];
    for (s, (a, b, c)) in blocks.into_iter().enumerate() {
        let (start, len) = layout.segments[s];
        dq[start * qw..(start + len) * qw].copy_from_slice(&a);
        dk[start * kw..(start + len) * kw].copy_from_slice(&b);
        dv[start * kw..(start + len) * kw].copy_from_slice(&c);
    }
    (dq, dk, dv)
}

/// Per-token rotation angles for channel pairs `(2p, 2p + 1)` of every head.
/// Channels past `2 * pairs` pass through unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryTable<T = f32> {
    pub tokens: usize,
    pub pairs: usize,
    pub head_dim: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

impl<T: Real> RotaryTable<T> {
    /// Builds the table from `angles[token * pairs + p]`.
    pub fn from_angles(tokens: usize, pairs: usize, head_dim: usize, angles: &[f64]) -> Self {
        assert_eq!(angles.len(), tokens * pairs);
        assert!(2 * pairs <= head_dim);
        Self {
            tokens,
            pairs,
            head_dim,
            cos: angles.iter().map(|a| T::lit(a.cos())).collect(),
            sin: angles.iter().map(|a| T::lit(a.sin())).collect(),
        }
    }

    /// Rotates `x` (`[tokens, heads * head_dim]`) in place; `inverse` rotates by
    /// the negated angles, which is also the adjoint.
    pub fn apply(&self, x: &mut [T], inverse: bool) {
        let width = x.len() / self.tokens.max(1);
        let heads = width / self.head_dim;
        for t in 0..self.tokens {
            let c = &self.cos[t * self.pairs..(t + 1) * self.pairs];
            let s = &self.sin[t * self.pairs..(t + 1) * self.pairs];
            for h in 0..heads {
                let row = &mut x[t * width + h * self.head_dim..][..self.head_dim];
                for p in 0..self.pairs {
                    let (a, b) = (row[2 * p], row[2 * p + 1]);
                    let sn = if inverse { -s[p] } else { s[p] };
                    row[2 * p] = a * c[p] - b * sn;
                    row[2 * p + 1] = a * sn + b * c[p];
                }
            }
        }
    }
}

/// Geometry of a stride-1, same-padding 2-D convolution over `[B, C, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvShape {
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    fn cols_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let (h, w, k, p) = (self.height, self.width, self.kernel, self.pad());
        let hw = h * w;
        for c in 0..self.in_ch {
            let plane = &img[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let dst = &mut cols[r * hw..(r + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - p;
                        let drow = &mut dst[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                        for (x, d) in drow.iter_mut().enumerate() {
                            let sx = x as isize + kx as isize - p;
                            *d = if sx < 0 || sx >= w as isize {
                                T::zero()
                            } else {
                                srow[sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let (h, w, k, p) = (self.height, self.width, self.kernel, self.pad());
        let hw = h * w;
        for c in 0..self.in_ch {
            let plane = &mut img[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let src = &cols[r * hw..(r + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - p;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let sx = x as isize + kx as isize - p;
                            if sx >= 0 && sx < w as isize {
                                plane[sy as usize * w + sx as usize] += src[y * w + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, s: &ConvShape) -> Vec<T> {
    let hw = s.height * s.width;
    let in_sz = s.in_ch * hw;
    let out_sz = s.out_ch * hw;
    let blocks = map_indexed(Exec::current(), s.batch, |i| {
        let mut cols = vec![T::zero(); s.cols_rows() * hw];
        s.im2col(&x[i * in_sz..(i + 1) * in_sz], &mut cols);
        let mut out = vec![T::zero(); out_sz];
        if let Some(b) = b {
            for (o, &bias) in b.iter().enumerate() {
                out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = bias);
            }
        }
        T::gemm(
            s.out_ch,
            s.cols_rows(),
            hw,
            T::one(),
            w,
            false,
            &cols,
            false,
            T::one(),
            &mut out,
        );
        out
    });
    blocks.concat()
}

/// Gradients `(dx, dw, db)` of [`conv2d_forward`].
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    s: &ConvShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = s.height * s.width;
    let in_sz = s.in_ch * hw;
    let out_sz = s.out_ch * hw;
    let kk = s.cols_rows();
    let blocks = map_indexed(Exec::current(), s.batch, |i| {
        let mut cols = vec![T::zero(); kk * hw];
        s.im2col(&x[i * in_sz..(i + 1) * in_sz], &mut cols);
        let dy = &dout[i * out_sz..(i + 1) * out_sz];
        let mut dw = vec![T::zero(); s.out_ch * kk];
        T::gemm(
            s.out_ch,
            hw,
            kk,
            T::one(),
            dy,
            false,
            &cols,
            true,
            T::zero(),
            &mut dw,
        );
        let mut dcols = vec![T::zero(); kk * hw];
        T::gemm(
            kk,
            s.out_ch,
            hw,
            T::one(),
            w,
            true,
            dy,
            false,
            T::zero(),
            &mut dcols,
        );
        let mut dx = vec![T::zero(); in_sz];
        s.col2im(&dcols, &mut dx);
        let db: Vec<T> = dy.chunks(hw).map(|c| c.iter().copied().sum()).collect();
        (dx, dw, db)
    });
    let mut dx = Vec::with_capacity(s.batch * in_sz);
    let mut dw = vec![T::zero(); s.out_ch * kk];
    let mut db = vec![T::zero(); s.out_ch];
    for (a, b, c) in blocks {
        dx.extend_from_slice(&a);
        dw.iter_mut().zip(&b).for_each(|(acc, v)| *acc += *v);
        db.iter_mut().zip(&c).for_each(|(acc, v)| *acc += *v);
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_sum() {
        let s = ConvShape {
            batch: 2,
            in_ch: 2,
            out_ch: 3,
            height: 4,
            width: 5,
            kernel: 3,
        };
        let x: Vec<f64> = (0..2 * 2 * 20).map(|i| (i as f64 * 0.3).sin()).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| (i as f64 * 0.7).cos()).collect();
        let b = vec![0.1, -0.2, 0.3];
        let y = conv2d_forward(&x, &w, Some(&b), &s);
        for bi in 0..2 {
            for o in 0..3 {
                for yy in 0..4isize {
                    for xx in 0..5isize {
                        let mut acc = b[o];
                        for c in 0..2 {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                    if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                        acc += w[((o * 2 + c) * 3 + ky as usize) * 3 + kx as usize]
                                            * x[(bi * 2 + c) * 20 + sy as usize * 5 + sx as usize];
                                    }
                                }
                            }
                        }
                        let got = y[(bi * 3 + o) * 20 + yy as usize * 5 + xx as usize];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rotary_inverse_undoes_forward() {
        let angles: Vec<f64> = (0..6).map(|i| i as f64 * 0.4).collect();
        let table = RotaryTable::<f64>::from_angles(3, 2, 6, &angles);
        let x: Vec<f64> = (0..3 * 12).map(|i| i as f64 * 0.1 - 1.0).collect();
        let mut y = x.clone();
        table.apply(&mut y, false);
        table.apply(&mut y, true);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
