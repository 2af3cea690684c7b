//! Stable hashing and seeded randomness helpers.
//!
//! Everything that must be reproducible across runs and platforms (stub
//! embeddings, per-image synthesis draws, artifact stamps) goes through the
//! FNV-1a hash below rather than `std`'s randomized hasher.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a byte slice.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_extend(FNV_OFFSET, bytes)
}

/// Continue an FNV-1a hash with more bytes.
pub fn fnv1a_extend(state: u64, bytes: &[u8]) -> u64 {
    let mut h = state;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hash a sequence of labelled parts into one 64-bit value.
pub fn fnv1a_parts(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for part in parts {
        // Length-prefix each part so ("ab","c") != ("a","bc").
        h = fnv1a_extend(h, &(part.len() as u64).to_le_bytes());
        h = fnv1a_extend(h, part);
    }
    h
}

/// Deterministic RNG derived from a seed and a stream label.
///
/// Separate labels give independent streams, so consuming randomness in one
/// subsystem never perturbs another (e.g. detector vs adapter updates).
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mixed = fnv1a_parts(&[&seed.to_le_bytes(), label.as_bytes()]);
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&mixed.to_le_bytes());
    key[8..16].copy_from_slice(&seed.to_le_bytes());
    key[16..24].copy_from_slice(&fnv1a(label.as_bytes()).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Standard-normal draw via Box-Muller, fed from any RNG.
pub fn sample_gaussian(rng: &mut impl rand::Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// L2 norm of a slice.
pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Dot product of equal-length slices; caller checks lengths.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
