//! Bilinear resampling on square grids.
//!
//! Used by the tokenizer's residual pyramid, the model's next-scale input
//! construction, and dataset ingestion. Magnification uses the classic
//! 2-tap bilinear kernel; minification widens the triangle kernel to the
//! scale factor so coarse grids average their support instead of point
//! sampling it.

/// Per-output-index interpolation taps `(input_index, weight)`.
/// Weights along one axis sum to 1.
pub fn line_weights(out_size: usize, in_size: usize) -> Vec<Vec<(usize, f64)>> {
    assert!(out_size > 0 && in_size > 0);
    let scale = in_size as f64 / out_size as f64;
    let mut rows = Vec::with_capacity(out_size);
    if out_size >= in_size {
        for i in 0..out_size {
            let src = (i as f64 + 0.5) * scale - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(2);
            for (di, w) in [(0.0, 1.0 - frac), (1.0, frac)] {
                if w == 0.0 {
                    continue;
                }
                let idx = (i0 + di).clamp(0.0, in_size as f64 - 1.0) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some((_, acc)) => *acc += w,
                    None => taps.push((idx, w)),
                }
            }
            rows.push(taps);
        }
    } else {
        // triangle kernel of radius `scale`
        for i in 0..out_size {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - scale).ceil() as isize;
            let hi = (center + scale).floor() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in lo..=hi {
                let w = 1.0 - (j as f64 - center).abs() / scale;
                if w <= 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_size as isize - 1) as usize;
                total += w;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some((_, acc)) => *acc += w,
                    None => taps.push((idx, w)),
                }
            }
            for (_, w) in &mut taps {
                *w /= total;
            }
            taps.sort_by_key(|&(j, _)| j);
            rows.push(taps);
        }
    }
    rows
}

/// Dense `out_size^2 x in_size^2` matrix resampling a flattened square
/// grid; the separable product of [`line_weights`] along both axes.
pub fn resize_matrix(in_size: usize, out_size: usize) -> Vec<f64> {
    let w = line_weights(out_size, in_size);
    let (o2, i2) = (out_size * out_size, in_size * in_size);
    let mut m = vec![0.0f64; o2 * i2];
    for oy in 0..out_size {
        for ox in 0..out_size {
            let row = (oy * out_size + ox) * i2;
            for &(iy, wy) in &w[oy] {
                for &(ix, wx) in &w[ox] {
                    m[row + iy * in_size + ix] += wy * wx;
                }
            }
        }
    }
    m
}

/// Resamples an `in_size x in_size x channels` row-major HWC buffer.
pub fn resize_channels(data: &[f64], in_size: usize, out_size: usize, channels: usize) -> Vec<f64> {
    assert_eq!(data.len(), in_size * in_size * channels);
    if in_size == out_size {
        return data.to_vec();
    }
    let w = line_weights(out_size, in_size);
    // rows first: (in, in, c) -> (in, out, c)
    let mut tmp = vec![0.0f64; in_size * out_size * channels];
    for y in 0..in_size {
        for (x, taps) in w.iter().enumerate() {
            let dst = (y * out_size + x) * channels;
            for &(ix, wx) in taps {
                let src = (y * in_size + ix) * channels;
                for c in 0..channels {
                    tmp[dst + c] += wx * data[src + c];
                }
            }
        }
    }
    // then columns: (in, out, c) -> (out, out, c)
    let mut out = vec![0.0f64; out_size * out_size * channels];
    for (y, taps) in w.iter().enumerate() {
        for x in 0..out_size {
            let dst = (y * out_size + x) * channels;
            for &(iy, wy) in taps {
                let src = (iy * out_size + x) * channels;
                for c in 0..channels {
                    out[dst + c] += wy * tmp[src + c];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_sizes_match() {
        let w = line_weights(4, 4);
        for (i, taps) in w.iter().enumerate() {
            assert_eq!(taps.as_slice(), &[(i, 1.0)]);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        for (out, inp) in [(1usize, 16usize), (2, 16), (4, 2), (16, 4), (3, 7), (7, 3)] {
            for taps in line_weights(out, inp) {
                let s: f64 = taps.iter().map(|(_, w)| w).sum();
                assert!((s - 1.0).abs() < 1e-12, "{out}x{inp}: {s}");
            }
        }
    }

    #[test]
    fn constant_grid_is_preserved() {
        let data = vec![0.7f64; 16 * 16 * 3];
        for out in [1usize, 2, 4, 8, 16] {
            let r = resize_channels(&data, 16, out, 3);
            for v in r {
                assert!((v - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matrix_agrees_with_separable_path() {
        let in_size = 4;
        let out_size = 7;
        let data: Vec<f64> = (0..in_size * in_size).map(|i| (i as f64).sin()).collect();
        let m = resize_matrix(in_size, out_size);
        let by_matrix: Vec<f64> = (0..out_size * out_size)
            .map(|r| {
                (0..in_size * in_size)
                    .map(|c| m[r * in_size * in_size + c] * data[c])
                    .sum()
            })
            .collect();
        let by_separable = resize_channels(&data, in_size, out_size, 1);
        for (a, b) in by_matrix.iter().zip(&by_separable) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_to_one_averages_support() {
        // a tent-filtered 16 -> 1 reduction must look at every pixel
        let w = line_weights(1, 16);
        assert_eq!(w[0].len(), 16);
    }
}
