//! Morton (Z-order) keys for voxel coordinates.
//!
//! A Morton key interleaves the bits of the three coordinates so that
//! lexicographic key order equals depth-first octree traversal order. Bit
//! `3t` of the key holds bit `t` of `x`, bit `3t+1` holds bit `t` of `y` and
//! bit `3t+2` holds bit `t` of `z`; coordinates up to 21 bits each fit in a
//! single `u64`. Sorting voxels by Morton key is the canonical vertex order
//! used throughout the codec.

/// Maximum number of bits per coordinate representable in a `u64` key.
pub const MAX_BITS: u32 = 21;

/// Spreads the low 21 bits of `v` so that bit `t` moves to bit `3t`.
#[inline]
fn spread(v: u32) -> u64 {
    let mut x = u64::from(v) & 0x001f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    (x | (x << 2)) & 0x1249_2492_4924_9249
}

/// Inverse of [`spread`]: collects bits `0, 3, 6, ...` into a compact value.
#[inline]
fn compact(v: u64) -> u32 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x001f_ffff;
    x as u32
}

/// Interleaves `(x, y, z)` into a Morton key.
///
/// Coordinates must fit in [`MAX_BITS`] bits; higher bits are ignored by the
/// bit-spreading masks, so callers are expected to validate range beforehand
/// (grid coordinates are bounded by the octree depth, which is at most 21).
#[inline]
pub fn encode(x: u32, y: u32, z: u32) -> u64 {
    spread(x) | (spread(y) << 1) | (spread(z) << 2)
}

/// Recovers `(x, y, z)` from a Morton key.
#[inline]
pub fn decode(key: u64) -> (u32, u32, u32) {
    (compact(key), compact(key >> 1), compact(key >> 2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleaves_single_bits() {
        assert_eq!(encode(1, 0, 0), 0b001);
        assert_eq!(encode(0, 1, 0), 0b010);
        assert_eq!(encode(0, 0, 1), 0b100);
        assert_eq!(encode(1, 1, 1), 0b111);
        // Second bit plane lands three positions higher.
        assert_eq!(encode(2, 0, 0), 0b001_000);
        assert_eq!(encode(0, 0, 2), 0b100_000);
    }

    #[test]
    fn round_trips_extremes() {
        let max = (1u32 << MAX_BITS) - 1;
        for &(x, y, z) in &[(0, 0, 0), (max, 0, 0), (0, max, 0), (0, 0, max), (max, max, max)] {
            assert_eq!(decode(encode(x, y, z)), (x, y, z));
        }
        assert_eq!(encode(max, max, max), (1u64 << 63) - 1);
    }

    #[test]
    fn round_trips_pseudorandom_coordinates() {
        // Small multiplicative congruential generator; avoids pulling RNG
        // crates into the unit test for a pure bit-twiddling check.
        let mut state = 0x9e37_79b9_7f4a_7c15u64;
        for _ in 0..10_000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let x = (state >> 1) as u32 & 0x1f_ffff;
            let y = (state >> 22) as u32 & 0x1f_ffff;
            let z = (state >> 43) as u32 & 0x1f_ffff;
            assert_eq!(decode(encode(x, y, z)), (x, y, z));
        }
    }

    #[test]
    fn key_order_matches_octant_refinement() {
        // Within one octree level, keys sort by (z, y, x) of the leading bit
        // plane — i.e. child index x | y<<1 | z<<2 at each node.
        let a = encode(1, 0, 0); // child 1 of the root at depth 1
        let b = encode(0, 1, 0); // child 2
        let c = encode(0, 0, 1); // child 4
        assert!(a < b && b < c);
    }
}
