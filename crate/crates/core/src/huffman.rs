//! Canonical Huffman codes over u32 symbols (quantization indices and
//! index deltas). Built by merging the two lowest-probability groups;
//! ties break on (count, smallest symbol) so tables are deterministic.

use crate::bits::{BitReader, BitWriter};
use crate::error::{Error, Result};
use std::collections::BinaryHeap;
use std::cmp::Reverse;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTable {
    /// (symbol, code length) sorted by symbol; enough to rebuild the
    /// canonical decoder.
    pub lengths: Vec<(u32, u8)>,
}

#[derive(Debug)]
struct CodeSet {
    /// symbol -> (code, len), canonical (codes assigned by (len, symbol))
    by_symbol: Vec<(u32, u32, u8)>,
    /// decode metadata per length 1..=max_len
    first_code: Vec<u32>,
    offsets: Vec<usize>,
    ordered_symbols: Vec<u32>,
    max_len: u8,
}

impl HuffmanTable {
    pub fn code_lengths(&self) -> &[(u32, u8)] {
        &self.lengths
    }

    pub fn max_len(&self) -> u8 {
        self.lengths.iter().map(|&(_, l)| l).max().unwrap_or(0)
    }

    /// Kraft sum numerator scaled by 2^max_len; equals 2^max_len exactly
    /// for a full tree.
    pub fn kraft_scaled(&self) -> u64 {
        let max = self.max_len();
        self.lengths
            .iter()
            .map(|&(_, l)| 1u64 << (max - l))
            .sum()
    }

    /// Total encoded bits for a histogram under this table.
    pub fn encoded_bits(&self, histogram: &[(u32, u64)]) -> Result<u64> {
        let mut total = 0u64;
        for &(symbol, count) in histogram {
            let len = self
                .lengths
                .iter()
                .find(|&&(s, _)| s == symbol)
                .map(|&(_, l)| l)
                .ok_or(Error::UnknownSymbol(symbol))?;
            total += count * len as u64;
        }
        Ok(total)
    }

    fn code_set(&self) -> CodeSet {
        let max_len = self.max_len();
        let mut ordered: Vec<(u8, u32)> =
            self.lengths.iter().map(|&(s, l)| (l, s)).collect();
        ordered.sort_unstable();

        let mut count_by_len = vec![0usize; max_len as usize + 1];
        for &(l, _) in &ordered {
            count_by_len[l as usize] += 1;
        }
        let mut first_code = vec![0u32; max_len as usize + 1];
        let mut code = 0u32;
        for len in 1..=max_len as usize {
            code = (code + count_by_len[len - 1] as u32) << 1;
            first_code[len] = code;
        }
        let mut offsets = vec![0usize; max_len as usize + 1];
        let mut acc = 0usize;
        for len in 1..=max_len as usize {
            offsets[len] = acc;
            acc += count_by_len[len];
        }
        let ordered_symbols: Vec<u32> = ordered.iter().map(|&(_, s)| s).collect();
        let mut by_symbol: Vec<(u32, u32, u8)> = Vec::with_capacity(ordered.len());
        let mut next = first_code.clone();
        for &(l, s) in &ordered {
            by_symbol.push((s, next[l as usize], l));
            next[l as usize] += 1;
        }
        by_symbol.sort_unstable_by_key(|&(s, _, _)| s);
        CodeSet {
            by_symbol,
            first_code,
            offsets,
            ordered_symbols,
            max_len,
        }
    }
}

/// Build the optimal prefix code for a histogram of (symbol, count) with
/// nonzero counts. A single-symbol alphabet gets a 1-bit code.
pub fn huffman_build(histogram: &[(u32, u64)]) -> Result<HuffmanTable> {
    let entries: Vec<(u32, u64)> = histogram
        .iter()
        .copied()
        .filter(|&(_, c)| c > 0)
        .collect();
    if entries.is_empty() {
        return Err(Error::EmptyHistogram);
    }
    if entries.len() == 1 {
        return Ok(HuffmanTable {
            lengths: vec![(entries[0].0, 1)],
        });
    }

    #[derive(Debug)]
    enum Node {
        Leaf(u32),
        Branch(Box<Node>, Box<Node>),
    }

    // heap keyed by (count, smallest symbol in the group) for determinism
    let mut heap: BinaryHeap<Reverse<(u64, u32, usize)>> = BinaryHeap::new();
    let mut nodes: Vec<Option<Node>> = Vec::new();
    for &(symbol, count) in &entries {
        nodes.push(Some(Node::Leaf(symbol)));
        heap.push(Reverse((count, symbol, nodes.len() - 1)));
    }
    while heap.len() > 1 {
        let Reverse((c1, s1, i1)) = heap.pop().unwrap();
        let Reverse((c2, s2, i2)) = heap.pop().unwrap();
        let left = nodes[i1].take().unwrap();
        let right = nodes[i2].take().unwrap();
        nodes.push(Some(Node::Branch(Box::new(left), Box::new(right))));
        heap.push(Reverse((c1 + c2, s1.min(s2), nodes.len() - 1)));
    }
    let Reverse((_, _, root)) = heap.pop().unwrap();
    let root = nodes[root].take().unwrap();

    let mut lengths: Vec<(u32, u8)> = Vec::with_capacity(entries.len());
    let mut stack = vec![(root, 0u8)];
    while let Some((node, depth)) = stack.pop() {
        match node {
            Node::Leaf(symbol) => lengths.push((symbol, depth.max(1))),
            Node::Branch(l, r) => {
                stack.push((*l, depth + 1));
                stack.push((*r, depth + 1));
            }
        }
    }
    lengths.sort_unstable();
    Ok(HuffmanTable { lengths })
}

/// Encode a symbol stream; returns the packed bytes and exact bit length.
pub fn huffman_encode(stream: &[u32], table: &HuffmanTable) -> Result<(Vec<u8>, u64)> {
    let codes = table.code_set();
    let mut writer = BitWriter::new();
    for &symbol in stream {
        let entry = codes
            .by_symbol
            .binary_search_by_key(&symbol, |&(s, _, _)| s)
            .map_err(|_| Error::UnknownSymbol(symbol))?;
        let (_, code, len) = codes.by_symbol[entry];
        // canonical codes compare numerically when read MSB-first
        for i in (0..len).rev() {
            writer.push_bit((code >> i) & 1 == 1);
        }
    }
    Ok(writer.into_bytes())
}

/// Decode exactly `count` symbols from a packed bitstream.
pub fn huffman_decode(
    bytes: &[u8],
    bit_len: u64,
    count: usize,
    table: &HuffmanTable,
) -> Result<Vec<u32>> {
    let codes = table.code_set();
    if codes.max_len == 0 && count > 0 {
        return Err(Error::BadBitstream("empty table".into()));
    }
    let mut reader = BitReader::new(bytes, bit_len)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut code = 0u32;
        let mut len = 0u8;
        loop {
            let bit = reader.read_bit().map_err(|_| {
                Error::BadBitstream("truncated mid-codeword".into())
            })?;
            code = (code << 1) | bit as u32;
            len += 1;
            if len > codes.max_len {
                return Err(Error::BadBitstream(format!(
                    "no codeword of length <= {}",
                    codes.max_len
                )));
            }
            let l = len as usize;
            let first = codes.first_code[l];
            let count_at_len = if l + 1 <= codes.max_len as usize {
                codes.offsets[l + 1] - codes.offsets[l]
            } else {
                codes.ordered_symbols.len() - codes.offsets[l]
            };
            if count_at_len > 0 && code >= first && (code - first) < count_at_len as u32 {
                out.push(codes.ordered_symbols[codes.offsets[l] + (code - first) as usize]);
                break;
            }
        }
    }
    Ok(out)
}

/// Histogram of a symbol stream, sorted by symbol.
pub fn histogram(stream: &[u32]) -> Vec<(u32, u64)> {
    let mut map = std::collections::BTreeMap::new();
    for &s in stream {
        *map.entry(s).or_insert(0u64) += 1;
    }
    map.into_iter().collect()
}
