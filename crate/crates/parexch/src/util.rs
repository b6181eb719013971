//! Small shared helpers.

use crate::scalar::Scalar;

/// FNV-1a 64-bit hash. Used for cross-rank weight fingerprints; stable and
/// dependency-free.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Bitwise fingerprint of a scalar slice (little-endian encoding).
pub fn hash_values<T: Scalar>(values: &[T]) -> u64 {
    fnv1a64(&crate::scalar::encode(values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_known_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn hash_discriminates_bit_changes() {
        let a = [1.0f32, 2.0, 3.0];
        let mut b = a;
        b[2] = 3.0000002;
        assert_ne!(hash_values(&a), hash_values(&b));
        assert_eq!(hash_values(&a), hash_values(&[1.0f32, 2.0, 3.0]));
    }
}
