//! Binary address banks.
//!
//! The memory a sequence is written into gets a parallel bank of *physical
//! addresses*: consecutive b-bit binary codes starting at a random base, so
//! slot `j` is bound to address `(p_B + j) mod 2^b`.  Because the base is
//! resampled per training sequence, the model sees the whole address space
//! during training even though sequences are short — that is what makes
//! pointer arithmetic transfer to lengths never trained on.  The coupon
//! collector estimate below quantifies how quickly the space gets exposed.
//!
//! Bit order is most-significant-first and frozen: `encode_address(3, 4)` is
//! `[0,0,1,1]`.  Checkpoints depend on this never changing.

use std::error::Error;
use std::fmt;

use ndarray::Array2;
use rand::Rng;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AddressError {
    /// Address value does not fit in the configured bit width.
    OutOfRange { value: usize, bits: usize },
    /// Bit width outside the supported 1..=24 range.
    BadBitWidth { bits: usize },
    /// A decode input containing something other than 0 or 1.
    NonBinary { position: usize },
    /// Empty bank requested.
    EmptyBank,
}

impl fmt::Display for AddressError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AddressError::OutOfRange { value, bits } => {
                write!(f, "address {value} does not fit in {bits} bits")
            }
            AddressError::BadBitWidth { bits } => {
                write!(f, "unsupported bit width {bits} (supported: 1..=24)")
            }
            AddressError::NonBinary { position } => {
                write!(f, "non-binary digit at bit position {position}")
            }
            AddressError::EmptyBank => write!(f, "address bank must have at least one slot"),
        }
    }
}

impl Error for AddressError {}

fn check_bits(bits: usize) -> Result<(), AddressError> {
    // 24 bits = 16M addresses, far beyond any configuration here; the cap
    // keeps 2^bits comfortably inside usize on every platform.
    if bits == 0 || bits > 24 {
        return Err(AddressError::BadBitWidth { bits });
    }
    Ok(())
}

/// Number of distinct addresses at a bit width.
pub fn address_space(bits: usize) -> usize {
    1usize << bits
}

/// MSB-first binary encoding of `k` into `bits` digits.
pub fn encode_address(k: usize, bits: usize) -> Result<Vec<u8>, AddressError> {
    check_bits(bits)?;
    if k >= address_space(bits) {
        return Err(AddressError::OutOfRange { value: k, bits });
    }
    Ok((0..bits).map(|i| ((k >> (bits - 1 - i)) & 1) as u8).collect())
}

/// Inverse of [`encode_address`].
pub fn decode_address(digits: &[u8]) -> Result<usize, AddressError> {
    check_bits(digits.len())?;
    let mut k = 0usize;
    for (i, d) in digits.iter().enumerate() {
        match d {
            0 => k <<= 1,
            1 => k = (k << 1) | 1,
            _ => return Err(AddressError::NonBinary { position: i }),
        }
    }
    Ok(k)
}

/// Uniform draw from the whole address space.
pub fn sample_base_address(bits: usize, rng: &mut impl Rng) -> Result<usize, AddressError> {
    check_bits(bits)?;
    Ok(rng.gen_range(0..address_space(bits)))
}

/// Consecutive binary addresses bound one-to-one to memory slots.
#[derive(Debug, Clone, PartialEq)]
pub struct AddressBank {
    bits: usize,
    base: usize,
    /// `bits x len`, column `j` encodes `(base + j) mod 2^bits`.
    columns: Array2<u8>,
}

impl AddressBank {
    pub fn build(base: usize, len: usize, bits: usize) -> Result<Self, AddressError> {
        check_bits(bits)?;
        if len == 0 {
            return Err(AddressError::EmptyBank);
        }
        if base >= address_space(bits) {
            return Err(AddressError::OutOfRange { value: base, bits });
        }
        let mut columns = Array2::zeros((bits, len));
        for j in 0..len {
            let addr = (base + j) % address_space(bits);
            let code = encode_address(addr, bits)?;
            for (i, d) in code.iter().enumerate() {
                columns[(i, j)] = *d;
            }
        }
        Ok(AddressBank { bits, base, columns })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects zero-length banks
    }

    /// Decimal address bound to slot `j`.
    pub fn address_at(&self, j: usize) -> usize {
        (self.base + j) % address_space(self.bits)
    }

    /// Address of the last slot (`p_E`).
    pub fn end_address(&self) -> usize {
        self.address_at(self.len() - 1)
    }

    pub fn column(&self, j: usize) -> Vec<u8> {
        self.columns.column(j).to_vec()
    }

    /// The bank lifted to the engine's scalar type, one column per slot.
    pub fn to_matrix<T: Scalar>(&self) -> Array2<T> {
        self.columns.mapv(|d| T::from_f64(d as f64))
    }
}

/// Banks for a whole batch in stacked layout: `bits x (len * bases.len())`,
/// where column `j * n + i` encodes slot `j` of sequence `i` (address
/// `(bases[i] + j) mod 2^bits`).  Sequences in a batch may start anywhere.
pub fn stacked_banks<T: Scalar>(
    bases: &[usize],
    len: usize,
    bits: usize,
) -> Result<Array2<T>, AddressError> {
    check_bits(bits)?;
    if len == 0 || bases.is_empty() {
        return Err(AddressError::EmptyBank);
    }
    let n = bases.len();
    let mut out = Array2::zeros((bits, len * n));
    for (i, &base) in bases.iter().enumerate() {
        if base >= address_space(bits) {
            return Err(AddressError::OutOfRange { value: base, bits });
        }
        for j in 0..len {
            let code = encode_address((base + j) % address_space(bits), bits)?;
            for (r, d) in code.iter().enumerate() {
                out[(r, j * n + i)] = T::from_f64(*d as f64);
            }
        }
    }
    Ok(out)
}

// ── coverage diagnostic ─────────────────────────────────────────────────

/// Harmonic number `H(n)`.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

/// Expected number of length-`l` training sequences until every address in a
/// space of `l_max` has been exposed: the coupon collector bound `n * H(n)`
/// with `n = ceil(l_max / l)` segments.
pub fn expected_coverage_samples(l_max: usize, l: usize) -> f64 {
    assert!(l >= 1 && l_max >= l, "need l_max >= l >= 1");
    let n = l_max.div_ceil(l);
    n as f64 * harmonic(n)
}

/// One coverage experiment: draw uniform bases until every address has been
/// inside some window `[p, p+l)`, or give up after `max_draws`.  Returns the
/// number of draws needed, or `None` on giving up.
pub fn coverage_trial(
    bits: usize,
    l: usize,
    max_draws: usize,
    rng: &mut impl Rng,
) -> Result<Option<usize>, AddressError> {
    check_bits(bits)?;
    let space = address_space(bits);
    let mut seen = vec![false; space];
    let mut remaining = space;
    for draw in 1..=max_draws {
        let base = sample_base_address(bits, rng)?;
        for j in 0..l.min(space) {
            let a = (base + j) % space;
            if !seen[a] {
                seen[a] = true;
                remaining -= 1;
            }
        }
        if remaining == 0 {
            return Ok(Some(draw));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_zero_is_all_zeros() {
        assert_eq!(encode_address(0, 4).unwrap(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn encode_three_is_standard_binary_msb_first() {
        assert_eq!(encode_address(3, 4).unwrap(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn encode_rejects_value_outside_width() {
        assert!(matches!(
            encode_address(16, 4).unwrap_err(),
            AddressError::OutOfRange { value: 16, bits: 4 }
        ));
    }

    #[test]
    fn decode_inverts_encode_exhaustively_at_ten_bits() {
        for k in 0..1024 {
            let code = encode_address(k, 10).unwrap();
            assert_eq!(decode_address(&code).unwrap(), k);
        }
    }

    #[test]
    fn decode_rejects_non_binary_digits() {
        assert!(matches!(
            decode_address(&[0, 2, 1]).unwrap_err(),
            AddressError::NonBinary { position: 1 }
        ));
    }

    #[test]
    fn bank_holds_consecutive_addresses() {
        let bank = AddressBank::build(3, 3, 4).unwrap();
        let addrs: Vec<usize> = (0..3).map(|j| bank.address_at(j)).collect();
        assert_eq!(addrs, vec![3, 4, 5]);
        assert_eq!(bank.column(0), vec![0, 0, 1, 1]);
        assert_eq!(bank.end_address(), 5);
    }

    #[test]
    fn bank_wraps_modulo_the_address_space() {
        let bank = AddressBank::build(1022, 4, 10).unwrap();
        let addrs: Vec<usize> = (0..4).map(|j| bank.address_at(j)).collect();
        assert_eq!(addrs, vec![1022, 1023, 0, 1]);
    }

    #[test]
    fn stacked_banks_interleave_sequences_within_each_slot() {
        // Two sequences, bases 3 and 14, three slots, 4 bits.  Column
        // j*n + i must match sequence i's own bank column j.
        let stacked = stacked_banks::<f64>(&[3, 14], 3, 4).unwrap();
        assert_eq!(stacked.dim(), (4, 6));
        let solo: Vec<AddressBank> = [3usize, 14]
            .iter()
            .map(|&b| AddressBank::build(b, 3, 4).unwrap())
            .collect();
        for j in 0..3 {
            for (i, bank) in solo.iter().enumerate() {
                let want: Vec<f64> = bank.column(j).iter().map(|&d| d as f64).collect();
                let got: Vec<f64> = stacked.column(j * 2 + i).to_vec();
                assert_eq!(got, want, "slot {j} sequence {i}");
            }
        }
    }

    #[test]
    fn full_length_bank_is_a_bijection() {
        let bits = 5;
        let bank = AddressBank::build(0, address_space(bits), bits).unwrap();
        let mut seen = vec![false; address_space(bits)];
        for j in 0..bank.len() {
            let a = decode_address(&bank.column(j)).unwrap();
            assert!(!seen[a], "address {a} repeated");
            seen[a] = true;
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn consecutive_columns_differ_by_one_modulo_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let bits = rng.gen_range(2..=10);
            let len = rng.gen_range(1..=40);
            let base = sample_base_address(bits, &mut rng).unwrap();
            let bank = AddressBank::build(base, len, bits).unwrap();
            for j in 1..len {
                let prev = decode_address(&bank.column(j - 1)).unwrap();
                let here = decode_address(&bank.column(j)).unwrap();
                assert_eq!(here, (prev + 1) % address_space(bits));
            }
        }
    }

    #[test]
    fn columns_distinct_when_len_fits_the_space() {
        let bank = AddressBank::build(60, 64, 6).unwrap();
        for i in 0..bank.len() {
            for j in (i + 1)..bank.len() {
                assert_ne!(bank.column(i), bank.column(j), "columns {i} and {j}");
            }
        }
    }

    #[test]
    fn base_sampling_is_reproducible_and_in_range() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = sample_base_address(10, &mut a).unwrap();
            let y = sample_base_address(10, &mut b).unwrap();
            assert_eq!(x, y);
            assert!(x < 1024);
        }
    }

    #[test]
    fn base_sampling_frequencies_are_near_uniform() {
        // 10^6 draws over 1024 addresses: every bin within 5 sigma of the
        // binomial expectation.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000usize;
        let bins = 1024usize;
        let mut counts = vec![0u32; bins];
        for _ in 0..n {
            counts[sample_base_address(10, &mut rng).unwrap()] += 1;
        }
        let p = 1.0 / bins as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (a, c) in counts.iter().enumerate() {
            let dev = (*c as f64 - mean).abs();
            assert!(dev <= 5.0 * sigma, "address {a}: count {c} vs mean {mean:.1}");
        }
    }

    #[test]
    fn harmonic_three_gives_eleven_sixths() {
        assert!((harmonic(3) - 11.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn expected_samples_single_segment_is_one() {
        assert_eq!(expected_coverage_samples(10, 10), 1.0);
    }

    #[test]
    fn expected_samples_three_segments_is_five_point_five() {
        // n = 3 -> 3 * (1 + 1/2 + 1/3) = 5.5
        assert!((expected_coverage_samples(12, 4) - 5.5).abs() < 1e-12);
    }

    #[test]
    fn expected_samples_rounds_segments_up() {
        // l_max=10, l=4 -> n = 3, not 2.5
        assert!((expected_coverage_samples(10, 4) - 5.5).abs() < 1e-12);
    }

    #[test]
    fn coverage_trial_covers_the_space_within_the_bound() {
        // b=6, l=4: n=16 segments, 3*n*H(n) ~ 162 draws.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let budget = (3.0 * expected_coverage_samples(64, 4)).floor() as usize;
        let mut ok = 0;
        for _ in 0..20 {
            if coverage_trial(6, 4, budget, &mut rng).unwrap().is_some() {
                ok += 1;
            }
        }
        assert!(ok >= 18, "only {ok}/20 trials covered within {budget} draws");
    }
}
