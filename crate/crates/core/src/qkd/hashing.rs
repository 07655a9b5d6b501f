//! Key-length arithmetic and the Toeplitz universal-hash compressor used
//! for privacy amplification.

use rand::RngCore;

use super::bits::Bits;
use crate::rng::{fnv1a, seeded};

/// Binary entropy h2(x) = -x log2 x - (1-x) log2(1-x), zero at the ends.
pub fn binary_entropy(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

/// Secure final length after privacy amplification:
///
/// ```text
/// m = floor( n * (1 - h2(qber)) - leakage - 2 * log2(1 / epsilon) )
/// ```
///
/// clamped at zero. `paper_margin` additionally caps the result at
/// `n / 2`, the published margin of the reference experiment.
pub fn final_length(
    n: usize,
    qber: f64,
    leakage: u64,
    epsilon: f64,
    paper_margin: bool,
) -> usize {
    let m = n as f64 * (1.0 - binary_entropy(qber))
        - leakage as f64
        - 2.0 * (1.0 / epsilon).log2();
    let m = if m.is_finite() && m > 0.0 { m.floor() as usize } else { 0 };
    if paper_margin {
        m.min(n / 2)
    } else {
        m
    }
}

/// Compress `key` (n bits) to `out_len` bits with a binary Toeplitz
/// matrix T[i][j] = d[n - 1 + i - j], where the n + out_len - 1 diagonal
/// bits `d` are drawn from a ChaCha stream seeded with `seed`.
pub fn toeplitz_compress(key: &Bits, seed: u64, out_len: usize) -> Bits {
    let n = key.len();
    if out_len == 0 || n == 0 {
        return Bits::zeros(out_len.min(if n == 0 { 0 } else { out_len }));
    }
    let diag_bits = n + out_len - 1;
    let mut rng = seeded(seed);
    let mut diag: Vec<u64> = (0..diag_bits.div_ceil(64)).map(|_| rng.next_u64()).collect();
    diag.push(0); // pad so window extraction never branches

    // out[i] = XOR_j key[j] * d[n-1+i-j]  ==  parity(rev(key) & d[i .. i+n])
    let rev = key.reversed();
    let rev_words = rev.words();
    let mut out = Bits::zeros(out_len);
    for i in 0..out_len {
        let base = i / 64;
        let shift = (i % 64) as u32;
        let mut acc = 0u64;
        for (w, &kw) in rev_words.iter().enumerate() {
            let lo = diag[base + w];
            let window = if shift == 0 {
                lo
            } else {
                (lo >> shift) | (diag[base + w + 1] << (64 - shift))
            };
            acc ^= kw & window;
        }
        if acc.count_ones() & 1 == 1 {
            out.set(i, true);
        }
    }
    out
}

/// 64-bit polynomial hash over a key, exchanged to confirm that the two
/// final keys are identical. Collision probability 2^-64 per comparison.
pub fn key_hash(bits: &Bits) -> u64 {
    let mut bytes = bits.to_bytes();
    bytes.extend_from_slice(&(bits.len() as u64).to_le_bytes());
    fnv1a(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_reference_points() {
        assert_eq!(binary_entropy(0.0), 0.0);
        assert_eq!(binary_entropy(1.0), 0.0);
        assert!((binary_entropy(0.5) - 1.0).abs() < 1e-12);
        assert!((binary_entropy(0.0583) - 0.3206592601524698).abs() < 1e-12);
    }

    #[test]
    fn final_length_reference_points() {
        // qber = 0, no leakage, epsilon = 1: identity-length bound.
        assert_eq!(final_length(1000, 0.0, 0, 1.0, false), 1000);
        // The published post-reconciliation key: 4869 bits at 5.83%.
        assert_eq!(final_length(4869, 0.0583, 0, 1e-6, false), 3267);
        // With the published margin the cap at n/2 binds instead.
        assert_eq!(final_length(4869, 0.0583, 0, 1e-6, true), 2434);
        // Leakage drives the length to zero, never below.
        assert_eq!(final_length(100, 0.0583, 1000, 1e-6, false), 0);
    }

    #[test]
    fn final_length_monotone() {
        let base = final_length(8000, 0.05, 2000, 1e-6, false);
        assert!(final_length(8000, 0.06, 2000, 1e-6, false) <= base);
        assert!(final_length(8000, 0.05, 2500, 1e-6, false) <= base);
        assert!(final_length(8000, 0.05, 2000, 1e-9, false) <= base);
    }

    #[test]
    fn toeplitz_deterministic_and_length() {
        let key = Bits::from_bools((0..333).map(|i| i % 5 < 2));
        let a = toeplitz_compress(&key, 77, 120);
        let b = toeplitz_compress(&key, 77, 120);
        assert_eq!(a, b);
        assert_eq!(a.len(), 120);
        let c = toeplitz_compress(&key, 78, 120);
        assert_ne!(a, c);
    }

    #[test]
    fn toeplitz_is_linear_over_gf2() {
        let x = Bits::from_bools((0..200).map(|i| i % 3 == 0));
        let y = Bits::from_bools((0..200).map(|i| i % 7 < 3));
        let mut xy = x.clone();
        for i in 0..200 {
            if y.get(i) {
                xy.flip(i);
            }
        }
        let (hx, hy, hxy) = (
            toeplitz_compress(&x, 5, 64),
            toeplitz_compress(&y, 5, 64),
            toeplitz_compress(&xy, 5, 64),
        );
        for i in 0..64 {
            assert_eq!(hxy.get(i), hx.get(i) ^ hy.get(i));
        }
    }

    #[test]
    fn toeplitz_output_passes_monobit() {
        let key = Bits::from_bools((0..8192).map(|i| i % 11 < 4));
        let m = 4096usize;
        let out = toeplitz_compress(&key, 1234, m);
        let frac = out.ones() as f64 / m as f64;
        assert!(
            (frac - 0.5).abs() <= 3.0 / (2.0 * (m as f64).sqrt()),
            "ones fraction {frac}"
        );
    }

    #[test]
    fn key_hash_sensitive_to_every_bit() {
        let key = Bits::from_bools((0..100).map(|i| i % 2 == 0));
        let h = key_hash(&key);
        for i in [0usize, 50, 99] {
            let mut k = key.clone();
            k.flip(i);
            assert_ne!(key_hash(&k), h);
        }
        let longer = Bits::from_bools((0..101).map(|i| i % 2 == 0));
        assert_ne!(key_hash(&longer), h);
    }
}
