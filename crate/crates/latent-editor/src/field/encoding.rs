//! Sinusoidal positional encoding.

/// Encoded length for a 3-vector with `bands` frequency bands.
pub fn encoded_len(bands: usize) -> usize {
    3 + 6 * bands
}

/// Encode a 3-vector as `[p, sin(2^0 pi p), cos(2^0 pi p), ...,
/// sin(2^{L-1} pi p), cos(2^{L-1} pi p)]`, componentwise per band.
///
/// `bands = 0` returns the input unchanged.
pub fn positional_encode(p: [f64; 3], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(bands));
    positional_encode_into(p, bands, &mut out);
    out
}

pub fn positional_encode_into(p: [f64; 3], bands: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(&p);
    let mut freq = std::f64::consts::PI;
    for _ in 0..bands {
        for i in 0..3 {
            out.push((freq * p[i]).sin());
        }
        for i in 0..3 {
            out.push((freq * p[i]).cos());
        }
        freq *= 2.0;
    }
}

/// Accumulate `d(encoding)/d(p)^T * upstream` into `grad_p`.
pub fn positional_encode_backward(
    p: [f64; 3],
    bands: usize,
    upstream: &[f64],
    grad_p: &mut [f64; 3],
) {
    for i in 0..3 {
        grad_p[i] += upstream[i];
    }
    let mut freq = std::f64::consts::PI;
    let mut idx = 3;
    for _ in 0..bands {
        for i in 0..3 {
            grad_p[i] += upstream[idx + i] * freq * (freq * p[i]).cos();
        }
        for i in 0..3 {
            grad_p[i] -= upstream[idx + 3 + i] * freq * (freq * p[i]).sin();
        }
        idx += 6;
        freq *= 2.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_point_encodes_to_alternating_zeros_and_ones() {
        let got = positional_encode([0.0; 3], 2);
        let want = [
            0.0, 0.0, 0.0, // p
            0.0, 0.0, 0.0, 1.0, 1.0, 1.0, // band 0
            0.0, 0.0, 0.0, 1.0, 1.0, 1.0, // band 1
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn zero_bands_is_the_identity() {
        let p = [0.3, -0.7, 2.5];
        assert_eq!(positional_encode(p, 0), p.to_vec());
    }

    #[test]
    fn half_encodes_sin_to_exactly_one() {
        let got = positional_encode([0.5, 0.0, 0.0], 1);
        assert_eq!(got[3], 1.0); // sin(pi/2)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = [0.21, -0.37, 0.83];
        let bands = 4;
        let n = encoded_len(bands);
        let upstream: Vec<f64> = (0..n).map(|i| ((i * 37 + 5) % 11) as f64 / 7.0 - 0.6).collect();
        let mut grad = [0.0; 3];
        positional_encode_backward(p, bands, &upstream, &mut grad);

        let f = |q: [f64; 3]| -> f64 {
            positional_encode(q, bands)
                .iter()
                .zip(&upstream)
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        for i in 0..3 {
            let mut plus = p;
            let mut minus = p;
            plus[i] += h;
            minus[i] -= h;
            let fd = (f(plus) - f(minus)) / (2.0 * h);
            assert!((grad[i] - fd).abs() < 1e-7, "axis {i}: {} vs {fd}", grad[i]);
        }
    }
}
