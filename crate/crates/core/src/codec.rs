//! Systematic erasure codecs.
//!
//! Two implementations sit behind the [`Codec`] trait:
//!
//! * [`LinearCodec`]: random-linear coding over GF(256). Symbols `0..K` are the
//!   source symbols verbatim; every symbol `esi >= K` is a linear combination
//!   of all source symbols whose coefficients come from [`repair_coefficients`].
//!   Decoding is incremental Gaussian elimination, one row per arrival.
//! * [`IdealCodec`]: a bookkeeping stand-in that completes exactly at K
//!   distinct symbols and carries no payload bytes. The simulator uses it.
//!
//! # Coefficient derivation
//!
//! For repair symbol `esi` of block `block_id` with `K` source symbols, the
//! coefficient of source symbol `j` is the `j`-th output of a SplitMix64
//! stream, mapped into `1..=255`:
//!
//! ```text
//! state = (block_id * 0x9E3779B97F4A7C15) XOR esi          (wrapping u64)
//! for j in 0..K:
//!     state = state + 0x9E3779B97F4A7C15                   (wrapping)
//!     z = state
//!     z = (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9           (wrapping)
//!     z = (z XOR (z >> 27)) * 0x94D049BB133111EB           (wrapping)
//!     z = z XOR (z >> 31)
//!     coef[j] = 1 + (z mod 255)
//! ```
//!
//! Coefficients are never zero, so every repair symbol touches every source
//! symbol.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gf256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("block is empty")]
    EmptyBlock,
    #[error("symbol size must be at least one byte")]
    ZeroSymbolSize,
    #[error("malformed symbol: payload is {got} bytes, expected {expected}")]
    MalformedSymbol { got: usize, expected: usize },
    #[error("symbol belongs to block {got}, decoder is for block {expected}")]
    WrongBlock { got: u64, expected: u64 },
}

/// Decoding has not collected enough independent symbols yet.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("block not yet recoverable: rank {rank} of {k}")]
pub struct NotReady {
    pub rank: u32,
    pub k: u32,
}

/// Number of symbols needed to carry `len` bytes. Always at least one.
pub fn symbol_count(len: usize, symbol_size: usize) -> u32 {
    len.div_ceil(symbol_size).max(1) as u32
}

/// A block split into `K` zero-padded symbols.
#[derive(Clone)]
pub struct SourceBlock {
    block_id: u64,
    len: usize,
    symbol_size: usize,
    symbols: Vec<u8>,
}

impl SourceBlock {
    pub fn new(block_id: u64, data: Vec<u8>, symbol_size: usize) -> Result<Self, CodecError> {
        if data.is_empty() {
            return Err(CodecError::EmptyBlock);
        }
        if symbol_size == 0 {
            return Err(CodecError::ZeroSymbolSize);
        }
        let len = data.len();
        let k = symbol_count(len, symbol_size) as usize;
        let mut symbols = data;
        symbols.resize(k * symbol_size, 0);
        Ok(Self {
            block_id,
            len,
            symbol_size,
            symbols,
        })
    }

    pub fn block_id(&self) -> u64 {
        self.block_id
    }

    /// Original length in bytes, before padding.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn symbol_size(&self) -> usize {
        self.symbol_size
    }

    pub fn k(&self) -> u32 {
        (self.symbols.len() / self.symbol_size) as u32
    }

    pub fn symbol(&self, index: u32) -> &[u8] {
        let start = index as usize * self.symbol_size;
        &self.symbols[start..start + self.symbol_size]
    }

    pub fn data(&self) -> &[u8] {
        &self.symbols[..self.len]
    }
}

impl fmt::Debug for SourceBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SourceBlock")
            .field("block_id", &self.block_id)
            .field("len", &self.len)
            .field("symbol_size", &self.symbol_size)
            .field("k", &self.k())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSymbol {
    pub block_id: u64,
    pub esi: u32,
    pub payload: Vec<u8>,
}

/// Fill `out` with the repair coefficients for `(block_id, esi)`; one
/// coefficient per source symbol. See the module docs for the exact stream.
pub fn repair_coefficients(block_id: u64, esi: u32, out: &mut [u8]) {
    const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut state = block_id.wrapping_mul(GAMMA) ^ esi as u64;
    for c in out.iter_mut() {
        state = state.wrapping_add(GAMMA);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        *c = 1 + (z % 255) as u8;
    }
}

/// Produces encoded symbols for one block.
pub trait SymbolEncoder: Send {
    fn block_id(&self) -> u64;
    fn k(&self) -> u32;
    /// Payload for `esi`, appended to `out`.
    fn write_symbol(&self, esi: u32, out: &mut Vec<u8>);

    fn encode(&self, esi: u32) -> EncodedSymbol {
        let mut payload = Vec::new();
        self.write_symbol(esi, &mut payload);
        EncodedSymbol {
            block_id: self.block_id(),
            esi,
            payload,
        }
    }
}

/// What a symbol did to the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddOutcome {
    /// The same esi was already received.
    Duplicate,
    /// New esi, but in the span of what was already held.
    Dependent,
    /// Raised the rank by one.
    Innovative,
}

/// Accumulates symbols for one block until it can be recovered.
pub trait SymbolDecoder: Send {
    fn block_id(&self) -> u64;
    fn k(&self) -> u32;
    fn rank(&self) -> u32;
    /// Distinct esi values received so far.
    fn received(&self) -> u32;
    fn add(&mut self, esi: u32, payload: &[u8]) -> Result<AddOutcome, CodecError>;
    /// The original bytes once rank reaches K.
    fn try_finish(&mut self) -> Result<Vec<u8>, NotReady>;

    fn is_complete(&self) -> bool {
        self.rank() == self.k()
    }

    fn add_symbol(&mut self, sym: &EncodedSymbol) -> Result<AddOutcome, CodecError> {
        if sym.block_id != self.block_id() {
            return Err(CodecError::WrongBlock {
                got: sym.block_id,
                expected: self.block_id(),
            });
        }
        self.add(sym.esi, &sym.payload)
    }
}

/// Factory for per-block encoders and decoders.
pub trait Codec: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn encoder(&self, block: SourceBlock) -> Box<dyn SymbolEncoder>;
    fn decoder(&self, block_id: u64, block_len: usize, symbol_size: usize) -> Box<dyn SymbolDecoder>;
}

/// Codec selector for configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    #[default]
    Linear,
    Ideal,
}

impl CodecKind {
    pub fn build(self) -> Arc<dyn Codec> {
        match self {
            CodecKind::Linear => Arc::new(LinearCodec),
            CodecKind::Ideal => Arc::new(IdealCodec),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LinearCodec;

impl Codec for LinearCodec {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn encoder(&self, block: SourceBlock) -> Box<dyn SymbolEncoder> {
        Box::new(LinearEncoder { block })
    }

    fn decoder(&self, block_id: u64, block_len: usize, symbol_size: usize) -> Box<dyn SymbolDecoder> {
        Box::new(LinearDecoder::new(block_id, block_len, symbol_size))
    }
}

pub struct LinearEncoder {
    block: SourceBlock,
}

impl LinearEncoder {
    pub fn new(block: SourceBlock) -> Self {
        Self { block }
    }
}

impl SymbolEncoder for LinearEncoder {
    fn block_id(&self) -> u64 {
        self.block.block_id
    }

    fn k(&self) -> u32 {
        self.block.k()
    }

    fn write_symbol(&self, esi: u32, out: &mut Vec<u8>) {
        let k = self.block.k();
        let start = out.len();
        if esi < k {
            out.extend_from_slice(self.block.symbol(esi));
            return;
        }
        let mut coefs = vec![0u8; k as usize];
        repair_coefficients(self.block.block_id, esi, &mut coefs);
        out.resize(start + self.block.symbol_size, 0);
        let acc = &mut out[start..];
        for (j, c) in coefs.iter().enumerate() {
            gf256::mul_add_slice(acc, self.block.symbol(j as u32), *c);
        }
    }
}

struct PivotRow {
    /// `None` for a unit row (a systematic symbol that was stored untouched).
    coefs: Option<Box<[u8]>>,
    payload: Box<[u8]>,
}

/// Incremental Gaussian elimination over GF(256).
///
/// Pivot row `c` always has a 1 in column `c` and zeros in every column
/// below `c`, so a new row can be reduced in a single upward sweep.
pub struct LinearDecoder {
    block_id: u64,
    block_len: usize,
    symbol_size: usize,
    k: u32,
    rank: u32,
    seen: HashSet<u32>,
    pivots: Vec<Option<PivotRow>>,
    solved: bool,
}

impl LinearDecoder {
    pub fn new(block_id: u64, block_len: usize, symbol_size: usize) -> Self {
        let k = symbol_count(block_len, symbol_size.max(1));
        Self {
            block_id,
            block_len,
            symbol_size,
            k,
            rank: 0,
            seen: HashSet::new(),
            pivots: (0..k).map(|_| None).collect(),
            solved: false,
        }
    }

    fn reduce_and_insert(&mut self, mut coefs: Vec<u8>, mut payload: Vec<u8>) -> AddOutcome {
        let k = self.k as usize;
        let mut lead: Option<usize> = None;
        for c in 0..k {
            let f = coefs[c];
            if f == 0 {
                continue;
            }
            match &self.pivots[c] {
                Some(p) => {
                    match &p.coefs {
                        None => coefs[c] = 0,
                        Some(pc) => gf256::mul_add_slice(&mut coefs[c..], &pc[c..], f),
                    }
                    gf256::mul_add_slice(&mut payload, &p.payload, f);
                }
                None => {
                    if lead.is_none() {
                        lead = Some(c);
                    }
                }
            }
        }
        let Some(c) = lead else {
            return AddOutcome::Dependent;
        };
        let f = gf256::inv(coefs[c]).expect("lead coefficient is nonzero");
        gf256::scale_slice(&mut coefs[c..], f);
        gf256::scale_slice(&mut payload, f);
        self.pivots[c] = Some(PivotRow {
            coefs: Some(coefs.into_boxed_slice()),
            payload: payload.into_boxed_slice(),
        });
        self.rank += 1;
        AddOutcome::Innovative
    }

    /// Back-substitute from the top column down so every row becomes a unit row.
    fn solve(&mut self) {
        let k = self.k as usize;
        for c in (0..k).rev() {
            let Some(coefs) = self.pivots[c].as_mut().and_then(|p| p.coefs.take()) else {
                continue;
            };
            let (lower, upper) = self.pivots.split_at_mut(c + 1);
            let row = lower[c].as_mut().expect("rank is K");
            for (j, f) in coefs.iter().enumerate().skip(c + 1) {
                if *f != 0 {
                    let solved = upper[j - c - 1].as_ref().expect("rank is K");
                    gf256::mul_add_slice(&mut row.payload, &solved.payload, *f);
                }
            }
        }
        self.solved = true;
    }
}

impl SymbolDecoder for LinearDecoder {
    fn block_id(&self) -> u64 {
        self.block_id
    }

    fn k(&self) -> u32 {
        self.k
    }

    fn rank(&self) -> u32 {
        self.rank
    }

    fn received(&self) -> u32 {
        self.seen.len() as u32
    }

    fn add(&mut self, esi: u32, payload: &[u8]) -> Result<AddOutcome, CodecError> {
        if payload.len() != self.symbol_size {
            return Err(CodecError::MalformedSymbol {
                got: payload.len(),
                expected: self.symbol_size,
            });
        }
        if !self.seen.insert(esi) {
            return Ok(AddOutcome::Duplicate);
        }
        if self.rank == self.k {
            return Ok(AddOutcome::Dependent);
        }
        if esi < self.k && self.pivots[esi as usize].is_none() {
            self.pivots[esi as usize] = Some(PivotRow {
                coefs: None,
                payload: payload.into(),
            });
            self.rank += 1;
            return Ok(AddOutcome::Innovative);
        }
        let mut coefs = vec![0u8; self.k as usize];
        if esi < self.k {
            coefs[esi as usize] = 1;
        } else {
            repair_coefficients(self.block_id, esi, &mut coefs);
        }
        Ok(self.reduce_and_insert(coefs, payload.to_vec()))
    }

    fn try_finish(&mut self) -> Result<Vec<u8>, NotReady> {
        if self.rank < self.k {
            return Err(NotReady {
                rank: self.rank,
                k: self.k,
            });
        }
        if !self.solved {
            self.solve();
        }
        let mut out = Vec::with_capacity(self.k as usize * self.symbol_size);
        for p in self.pivots.iter().flatten() {
            out.extend_from_slice(&p.payload);
        }
        out.truncate(self.block_len);
        Ok(out)
    }
}

/// Completes exactly at K distinct symbols. Payloads are empty and the
/// recovered block is all zeros of the right length.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdealCodec;

impl IdealCodec {
    pub fn new_decoder(block_id: u64, k: u32) -> IdealDecoder {
        IdealDecoder {
            block_id,
            block_len: k as usize,
            k,
            seen: HashSet::new(),
        }
    }
}

impl Codec for IdealCodec {
    fn name(&self) -> &'static str {
        "ideal"
    }

    fn encoder(&self, block: SourceBlock) -> Box<dyn SymbolEncoder> {
        Box::new(IdealEncoder {
            block_id: block.block_id,
            k: block.k(),
        })
    }

    fn decoder(&self, block_id: u64, block_len: usize, symbol_size: usize) -> Box<dyn SymbolDecoder> {
        Box::new(IdealDecoder {
            block_id,
            block_len,
            k: symbol_count(block_len, symbol_size.max(1)),
            seen: HashSet::new(),
        })
    }
}

pub struct IdealEncoder {
    block_id: u64,
    k: u32,
}

impl SymbolEncoder for IdealEncoder {
    fn block_id(&self) -> u64 {
        self.block_id
    }

    fn k(&self) -> u32 {
        self.k
    }

    fn write_symbol(&self, _esi: u32, _out: &mut Vec<u8>) {}
}

pub struct IdealDecoder {
    block_id: u64,
    block_len: usize,
    k: u32,
    seen: HashSet<u32>,
}

impl SymbolDecoder for IdealDecoder {
    fn block_id(&self) -> u64 {
        self.block_id
    }

    fn k(&self) -> u32 {
        self.k
    }

    fn rank(&self) -> u32 {
        (self.seen.len() as u32).min(self.k)
    }

    fn received(&self) -> u32 {
        self.seen.len() as u32
    }

    fn add(&mut self, esi: u32, _payload: &[u8]) -> Result<AddOutcome, CodecError> {
        let before = self.rank();
        if !self.seen.insert(esi) {
            Ok(AddOutcome::Duplicate)
        } else if self.rank() > before {
            Ok(AddOutcome::Innovative)
        } else {
            Ok(AddOutcome::Dependent)
        }
    }

    fn try_finish(&mut self) -> Result<Vec<u8>, NotReady> {
        if self.rank() < self.k {
            return Err(NotReady {
                rank: self.rank(),
                k: self.k,
            });
        }
        Ok(vec![0; self.block_len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block(rng: &mut ChaCha8Rng, id: u64, len: usize, ssz: usize) -> SourceBlock {
        let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        SourceBlock::new(id, data, ssz).unwrap()
    }

    #[test]
    fn coefficient_stream_is_frozen() {
        // Reference values from an independent SplitMix64 script.
        let mut c = [0u8; 1];
        repair_coefficients(0, 1, &mut c);
        assert_eq!(c, [96]);
        repair_coefficients(7, 3, &mut c);
        assert_eq!(c, [59]);
        let mut c4 = [0u8; 4];
        repair_coefficients(0, 16, &mut c4);
        assert_eq!(c4, [111, 74, 149, 182]);
        let mut c6 = [0u8; 6];
        repair_coefficients(42, 100, &mut c6);
        assert_eq!(c6, [14, 80, 5, 113, 95, 105]);
    }

    #[test]
    fn systematic_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = random_block(&mut rng, 3, 40, 10);
        assert_eq!(block.k(), 4);
        let enc = LinearCodec.encoder(block.clone());
        assert_eq!(enc.encode(2).payload, block.symbol(2));
    }

    #[test]
    fn single_symbol_repair_is_scaled_copy() {
        let block = SourceBlock::new(0, vec![1, 2, 3, 250], 4).unwrap();
        let enc = LinearCodec.encoder(block);
        let expected: Vec<u8> = [1u8, 2, 3, 250].iter().map(|b| gf256::mul(96, *b)).collect();
        assert_eq!(enc.encode(1).payload, expected);
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = random_block(&mut rng, 9, 100, 16);
        let enc = LinearCodec.encoder(block);
        assert_eq!(enc.encode(77), enc.encode(77));
    }

    #[test]
    fn padding_and_length() {
        let block = SourceBlock::new(1, vec![9; 11], 4).unwrap();
        assert_eq!(block.k(), 3);
        assert_eq!(block.symbol(2), &[9, 9, 9, 0]);
        assert_eq!(SourceBlock::new(1, vec![], 4).unwrap_err(), CodecError::EmptyBlock);
        assert_eq!(SourceBlock::new(1, vec![1], 0).unwrap_err(), CodecError::ZeroSymbolSize);
    }

    #[test]
    fn decoder_rank_and_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = random_block(&mut rng, 5, 64, 8);
        let enc = LinearCodec.encoder(block);
        let mut dec = LinearCodec.decoder(5, 64, 8);
        assert_eq!(dec.add_symbol(&enc.encode(5)).unwrap(), AddOutcome::Innovative);
        assert_eq!(dec.rank(), 1);
        assert_eq!(dec.add_symbol(&enc.encode(5)).unwrap(), AddOutcome::Duplicate);
        assert_eq!(dec.rank(), 1);
        assert_eq!(dec.received(), 1);
    }

    #[test]
    fn malformed_and_foreign_symbols_rejected() {
        let mut dec = LinearCodec.decoder(5, 64, 8);
        assert_eq!(
            dec.add(0, &[0; 7]).unwrap_err(),
            CodecError::MalformedSymbol { got: 7, expected: 8 }
        );
        let sym = EncodedSymbol {
            block_id: 6,
            esi: 0,
            payload: vec![0; 8],
        };
        assert!(matches!(dec.add_symbol(&sym), Err(CodecError::WrongBlock { .. })));
        assert_eq!(dec.rank(), 0);
    }

    #[test]
    fn not_ready_until_rank_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = random_block(&mut rng, 0, 30, 10);
        let enc = LinearCodec.encoder(block.clone());
        let mut dec = LinearCodec.decoder(0, 30, 10);
        assert_eq!(dec.try_finish().unwrap_err(), NotReady { rank: 0, k: 3 });
        dec.add_symbol(&enc.encode(0)).unwrap();
        dec.add_symbol(&enc.encode(1)).unwrap();
        assert!(dec.try_finish().is_err());
        dec.add_symbol(&enc.encode(2)).unwrap();
        assert_eq!(dec.try_finish().unwrap(), block.data());
    }

    #[test]
    fn decode_from_repair_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = random_block(&mut rng, 11, 16 * 20 - 3, 20);
        assert_eq!(block.k(), 16);
        let enc = LinearCodec.encoder(block.clone());
        let mut dec = LinearCodec.decoder(11, block.len(), 20);
        for esi in 16..32 {
            dec.add_symbol(&enc.encode(esi)).unwrap();
        }
        assert_eq!(dec.rank(), 16);
        assert_eq!(dec.try_finish().unwrap(), block.data());
    }

    #[test]
    fn mixed_arrival_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..50 {
            let k = rng.gen_range(1..=40usize);
            let len = k * 12 - rng.gen_range(0..12);
            let block = random_block(&mut rng, trial, len, 12);
            let enc = LinearCodec.encoder(block.clone());
            let mut esis: Vec<u32> = (0..(3 * k as u32)).collect();
            esis.shuffle(&mut rng);
            let mut dec = LinearCodec.decoder(trial, len, 12);
            for esi in esis {
                dec.add_symbol(&enc.encode(esi)).unwrap();
                if dec.is_complete() {
                    break;
                }
            }
            assert_eq!(dec.try_finish().unwrap(), block.data());
            // Extra symbols after completion are harmless.
            assert_eq!(dec.add_symbol(&enc.encode(9999)).unwrap(), AddOutcome::Dependent);
            assert_eq!(dec.try_finish().unwrap(), block.data());
        }
    }

    #[test]
    fn random_esi_full_rank_rate() {
        // K=8, eight distinct random esi; expect full rank in >= 96% of trials.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 10_000;
        let mut full = 0;
        for t in 0..trials {
            let mut dec = LinearDecoder::new(t, 8, 1);
            // Payload content does not affect rank; a fixed byte will do.
            for esi in rand::seq::index::sample(&mut rng, 1024, 8).iter() {
                dec.add(esi as u32, &[0]).unwrap();
            }
            if dec.rank() == 8 {
                full += 1;
            }
        }
        let rate = full as f64 / trials as f64;
        assert!(rate >= 0.96, "full-rank rate {rate}");
    }

    #[test]
    fn ideal_codec_counts_distinct() {
        let mut dec = IdealCodec.decoder(0, 3, 1);
        for esi in [0, 7] {
            dec.add(esi, &[]).unwrap();
        }
        assert!(!dec.is_complete());
        dec.add(9, &[]).unwrap();
        assert!(dec.is_complete());
        assert_eq!(dec.try_finish().unwrap().len(), 3);

        let mut dec = IdealCodec.decoder(0, 3, 1);
        assert_eq!(dec.add(0, &[]).unwrap(), AddOutcome::Innovative);
        assert_eq!(dec.add(0, &[]).unwrap(), AddOutcome::Duplicate);
        dec.add(7, &[]).unwrap();
        assert!(!dec.is_complete());

        let mut dec = IdealCodec::new_decoder(1, 500);
        for esi in 0..499 {
            dec.add(esi * 3, &[]).unwrap();
        }
        assert!(!dec.is_complete());
        assert!(dec.try_finish().is_err());
    }
}
