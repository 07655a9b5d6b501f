//! Compact bit strings for key material.
//!
//! Bit `i` lives in word `i / 64` at position `i % 64`; byte and hex
//! renderings are LSB-first within each byte. Trailing bits of the last
//! word are kept zero.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bits {
    words: Vec<u64>,
    len: usize,
}

impl Bits {
    pub fn new() -> Self {
        Bits::default()
    }

    pub fn zeros(len: usize) -> Self {
        Bits { words: vec![0; len.div_ceil(64)], len }
    }

    pub fn from_bools(bools: impl IntoIterator<Item = bool>) -> Self {
        let mut bits = Bits::new();
        for b in bools {
            bits.push(b);
        }
        bits
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, bit: bool) {
        if self.len % 64 == 0 {
            self.words.push(0);
        }
        if bit {
            self.words[self.len / 64] |= 1u64 << (self.len % 64);
        }
        self.len += 1;
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, bit: bool) {
        assert!(i < self.len);
        let mask = 1u64 << (i % 64);
        if bit {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len);
        self.words[i / 64] ^= 1u64 << (i % 64);
    }

    pub fn flip_all(&mut self) {
        for w in &mut self.words {
            *w = !*w;
        }
        self.mask_tail();
    }

    pub fn ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// XOR-parity of the bits at the given positions.
    pub fn parity_at(&self, positions: impl IntoIterator<Item = usize>) -> bool {
        let mut p = false;
        for i in positions {
            p ^= self.get(i);
        }
        p
    }

    /// Number of positions where the two strings differ.
    pub fn count_diff(&self, other: &Bits) -> u64 {
        assert_eq!(self.len, other.len);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as u64)
            .sum()
    }

    /// A copy with the bits at `sorted_positions` removed; positions must
    /// be strictly increasing.
    pub fn remove_sorted(&self, sorted_positions: &[usize]) -> Bits {
        let mut out = Bits::new();
        let mut cut = sorted_positions.iter().peekable();
        for i in 0..self.len {
            if cut.peek() == Some(&&i) {
                cut.next();
                continue;
            }
            out.push(self.get(i));
        }
        out
    }

    /// Bit-reversed copy.
    pub fn reversed(&self) -> Bits {
        let mut out = Bits::zeros(self.len);
        for i in 0..self.len {
            if self.get(i) {
                out.set(self.len - 1 - i, true);
            }
        }
        out
    }

    fn mask_tail(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
        while self.words.len() > self.len.div_ceil(64) {
            self.words.pop();
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.len.div_ceil(8));
        for i in 0..self.len.div_ceil(8) {
            let word = self.words[i / 8];
            bytes.push((word >> ((i % 8) * 8)) as u8);
        }
        bytes
    }

    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(self.len.div_ceil(8) * 2);
        for b in self.to_bytes() {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    pub fn from_hex(hex: &str, len: usize) -> Result<Bits> {
        if hex.len() != len.div_ceil(8) * 2 {
            return Err(Error::Protocol(format!(
                "hex length {} does not encode {len} bits",
                hex.len()
            )));
        }
        let mut bits = Bits::zeros(len);
        for (i, chunk) in hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).map_err(|_| Error::Protocol("bad hex".into()))?;
            let byte =
                u8::from_str_radix(s, 16).map_err(|_| Error::Protocol("bad hex".into()))?;
            if i / 8 < bits.words.len() {
                bits.words[i / 8] |= (byte as u64) << ((i % 8) * 8);
            } else if byte != 0 {
                return Err(Error::Protocol("hex encodes bits beyond stated length".into()));
            }
        }
        let raw_ones: u64 = bits.words.iter().map(|w| w.count_ones() as u64).sum();
        bits.mask_tail();
        if bits.ones() != raw_ones {
            return Err(Error::Protocol("hex encodes bits beyond stated length".into()));
        }
        Ok(bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_get_flip() {
        let mut b = Bits::from_bools([true, false, true, true]);
        assert_eq!(b.len(), 4);
        assert!(b.get(0) && !b.get(1) && b.get(2) && b.get(3));
        b.flip(1);
        assert!(b.get(1));
        assert_eq!(b.ones(), 4);
        b.set(0, false);
        assert_eq!(b.ones(), 3);
    }

    #[test]
    fn hex_round_trip() {
        let b = Bits::from_bools((0..77).map(|i| i % 3 == 0));
        let hex = b.to_hex();
        let back = Bits::from_hex(&hex, 77).unwrap();
        assert_eq!(b, back);
        assert!(Bits::from_hex(&hex, 76).is_err());
    }

    #[test]
    fn remove_sorted_positions() {
        let b = Bits::from_bools([true, false, true, false, true]);
        let cut = b.remove_sorted(&[1, 4]);
        assert_eq!(cut.len(), 3);
        assert!(cut.get(0) && cut.get(1) && !cut.get(2));
    }

    #[test]
    fn parity_and_diff() {
        let a = Bits::from_bools([true, true, false, true]);
        let b = Bits::from_bools([true, false, false, true]);
        assert_eq!(a.count_diff(&b), 1);
        assert!(a.parity_at([0, 1, 2]));
        assert!(!a.parity_at([0, 3]));
    }

    #[test]
    fn flip_all_masks_tail() {
        let mut b = Bits::from_bools([true, false, true]);
        b.flip_all();
        assert_eq!(b.len(), 3);
        assert_eq!(b.ones(), 1);
        assert!(!b.get(0) && b.get(1) && !b.get(2));
        assert_eq!(b.words()[0] >> 3, 0);
    }

    #[test]
    fn reversed_round_trip() {
        let b = Bits::from_bools((0..130).map(|i| i % 7 == 2));
        assert_eq!(b.reversed().reversed(), b);
        assert_eq!(b.reversed().get(0), b.get(129));
    }
}
