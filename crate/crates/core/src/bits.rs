//! Bit-level packing shared by the delta streams, quantized-assignment
//! streams, and Huffman codecs. Bits fill each byte LSB-first.

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_bit(&mut self, bit: bool) {
        let idx = (self.bit_len % 8) as u8;
        if idx == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 1 << idx;
        }
        self.bit_len += 1;
    }

    /// Append the low `bits` bits of `value`, LSB first.
    pub fn push_bits(&mut self, value: u32, bits: u8) {
        debug_assert!(bits <= 32);
        debug_assert!(bits == 32 || value < (1u64 << bits) as u32);
        for i in 0..bits {
            self.push_bit((value >> i) & 1 == 1);
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bit_len
    }

    pub fn into_bytes(self) -> (Vec<u8>, u64) {
        (self.bytes, self.bit_len)
    }
}

#[derive(Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    bit_len: u64,
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8], bit_len: u64) -> Result<Self> {
        if bit_len > bytes.len() as u64 * 8 {
            return Err(Error::BadBitstream(format!(
                "declared {bit_len} bits but only {} bytes present",
                bytes.len()
            )));
        }
        Ok(Self { bytes, bit_len, pos: 0 })
    }

    pub fn read_bit(&mut self) -> Result<bool> {
        if self.pos >= self.bit_len {
            return Err(Error::BadBitstream("bitstream exhausted".into()));
        }
        let byte = self.bytes[(self.pos / 8) as usize];
        let bit = (byte >> (self.pos % 8)) & 1 == 1;
        self.pos += 1;
        Ok(bit)
    }

    pub fn read_bits(&mut self, bits: u8) -> Result<u32> {
        let mut value = 0u32;
        for i in 0..bits {
            if self.read_bit()? {
                value |= 1 << i;
            }
        }
        Ok(value)
    }

    pub fn remaining_bits(&self) -> u64 {
        self.bit_len - self.pos
    }
}
