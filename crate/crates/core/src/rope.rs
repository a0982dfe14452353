//! Multi-axis rotary position embedding (M-RoPE).
//!
//! Each head's channels are split into three contiguous sub-bands, one per
//! position axis, each rotated with the standard rotary frequencies of its
//! own coordinate. Channels left over after the three bands pass through.

use crate::error::{Error, Result};
use crate::numerics::{Real, RotaryTable, Tensor};

pub const ROPE_BASE: f64 = 10_000.0;

/// Width of each axis band: `head_dim / 3` rounded down to an even number.
pub fn axis_band(head_dim: usize) -> usize {
    (head_dim / 3) & !1
}

/// Rotation table for tokens at the given `(axis0, row, col)` positions.
pub fn mrope_table<T: Real>(positions: &[[usize; 3]], head_dim: usize) -> Result<RotaryTable<T>> {
    let band = axis_band(head_dim);
    if band == 0 {
        return Err(Error::invalid(
            "dit",
            format!("head dim {head_dim} is too small for three rotary axes"),
        ));
    }
    let half = band / 2;
    let pairs = 3 * half;
    let freqs: Vec<f64> = (0..half)
        .map(|j| ROPE_BASE.powf(-2.0 * j as f64 / band as f64))
        .collect();
    let mut angles = Vec::with_capacity(positions.len() * pairs);
    for pos in positions {
        for &coord in pos {
            angles.extend(freqs.iter().map(|f| coord as f64 * f));
        }
    }
    Ok(RotaryTable::from_angles(
        positions.len(),
        pairs,
        head_dim,
        &angles,
    ))
}

/// Rotates `x` (`[tokens, heads * head_dim]`) by the M-RoPE angles of `positions`.
pub fn mrope_rotate<T: Real>(
    x: &Tensor<T>,
    positions: &[[usize; 3]],
    head_dim: usize,
) -> Result<Tensor<T>> {
    let (n, w) = x.dims2("mrope")?;
    if n != positions.len() || head_dim == 0 || w % head_dim != 0 {
        return Err(Error::shape(
            "mrope",
            format!(
                "{:?} with {} positions, head dim {head_dim}",
                x.shape(),
                positions.len()
            ),
        ));
    }
    let table = mrope_table::<T>(positions, head_dim)?;
    let mut out = x.clone();
    table.apply(out.data_mut(), false);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], Rng::new(seed).normal_vec(rows * cols)).unwrap()
    }

    #[test]
    fn band_widths() {
        assert_eq!(axis_band(16), 4);
        assert_eq!(axis_band(18), 6);
        assert_eq!(axis_band(96), 32);
        assert_eq!(axis_band(4), 0);
    }

    #[test]
    fn zero_positions_are_identity() {
        let x = random(3, 32, 1);
        let y = mrope_rotate(&x, &[[0; 3]; 3], 16).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rotation_preserves_norm() {
        let x = random(4, 32, 2);
        let pos = [[0, 1, 2], [5, 0, 0], [7, 3, 1], [2, 2, 2]];
        let y = mrope_rotate(&x, &pos, 16).unwrap();
        for t in 0..4 {
            let n0: f64 = x.data()[t * 32..(t + 1) * 32].iter().map(|v| v * v).sum();
            let n1: f64 = y.data()[t * 32..(t + 1) * 32].iter().map(|v| v * v).sum();
            assert!((n0.sqrt() - n1.sqrt()).abs() < 1e-5);
        }
    }

    #[test]
    fn leftover_channels_pass_through() {
        let x = random(2, 16, 3);
        let y = mrope_rotate(&x, &[[3, 4, 5], [1, 9, 2]], 16).unwrap();
        for t in 0..2 {
            assert_eq!(
                &x.data()[t * 16 + 12..t * 16 + 16],
                &y.data()[t * 16 + 12..t * 16 + 16]
            );
        }
    }

    #[test]
    fn logits_depend_only_on_position_offsets() {
        let hd = 18;
        let q = random(5, hd, 4);
        let k = random(5, hd, 5);
        let pos = [[0, 0, 0], [1, 0, 0], [2, 1, 3], [2, 0, 1], [2, 4, 4]];
        let shifted: Vec<[usize; 3]> = pos
            .iter()
            .map(|p| [p[0] + 7, p[1] + 3, p[2] + 11])
            .collect();
        let logits = |pos: &[[usize; 3]]| {
            let rq = mrope_rotate(&q, pos, hd).unwrap();
            let rk = mrope_rotate(&k, pos, hd).unwrap();
            rq.matmul(&rk.transpose2().unwrap()).unwrap()
        };
        let (a, b) = (logits(&pos), logits(&shifted));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }
}
