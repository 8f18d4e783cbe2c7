//! Datagram layouts for data and feedback packets.
//!
//! All integers are big-endian. See `FORMAT.md` at the repository root for
//! byte diagrams and worked hex examples.
//!
//! ```text
//! data packet (30-byte header, then the symbol payload)
//!   0  magic            u16  0x4C51
//!   2  version          u8   1
//!   3  ptype            u8   0x01
//!   4  global_seq       u64
//!  12  block_id         u64
//!  20  esi              u32
//!  24  block_size_bytes u32
//!  28  symbol_size      u16
//!  30  payload ...
//!
//! feedback packet (22 bytes + 12 per entry)
//!   0  magic            u16  0x4C51
//!   2  version          u8   1
//!   3  ptype            u8   0x02
//!   4  highest_seq_seen u64  (u64::MAX when nothing has arrived)
//!  12  total_received   u64
//!  20  active_count     u16
//!  22  entries          active_count x (block_id u64, symbols_received u32)
//! ```

use thiserror::Error;

pub const MAGIC: u16 = 0x4C51;
pub const VERSION: u8 = 1;
pub const PTYPE_DATA: u8 = 0x01;
pub const PTYPE_FEEDBACK: u8 = 0x02;

/// Bytes of header in front of every symbol payload.
pub const DATA_HEADER_LEN: usize = 30;
pub const FEEDBACK_FIXED_LEN: usize = 22;
pub const FEEDBACK_ENTRY_LEN: usize = 12;

/// `highest_seq_seen` value meaning no data packet has arrived yet.
pub const NO_SEQ: u64 = u64::MAX;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("truncated packet: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unknown version {0}")]
    UnknownVersion(u8),
    #[error("packet type {got:#04x}, expected {expected:#04x}")]
    WrongType { got: u8, expected: u8 },
    #[error("invalid field: {0}")]
    InvalidField(&'static str),
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DataHeader {
    pub global_seq: u64,
    pub block_id: u64,
    pub esi: u32,
    pub block_size_bytes: u32,
    pub symbol_size: u16,
}

impl DataHeader {
    /// Source symbols in the block this header describes.
    pub fn k(&self) -> u32 {
        crate::codec::symbol_count(self.block_size_bytes as usize, self.symbol_size.max(1) as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeedbackEntry {
    pub block_id: u64,
    pub symbols_received: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct FeedbackPacket {
    /// `None` until the first data packet arrives.
    pub highest_seq_seen: Option<u64>,
    pub total_data_packets_received: u64,
    pub entries: Vec<FeedbackEntry>,
}

impl FeedbackPacket {
    pub fn encoded_len(&self) -> usize {
        FEEDBACK_FIXED_LEN + FEEDBACK_ENTRY_LEN * self.entries.len()
    }
}

/// Which packet type a datagram claims to be, without parsing the body.
pub fn peek_type(buf: &[u8]) -> Result<u8, ParseError> {
    prelude(buf, None)
}

fn prelude(buf: &[u8], expected: Option<u8>) -> Result<u8, ParseError> {
    if buf.len() < 4 {
        return Err(ParseError::Truncated { need: 4, have: buf.len() });
    }
    let magic = u16::from_be_bytes([buf[0], buf[1]]);
    if magic != MAGIC {
        return Err(ParseError::BadMagic(magic));
    }
    if buf[2] != VERSION {
        return Err(ParseError::UnknownVersion(buf[2]));
    }
    let ptype = buf[3];
    if let Some(expected) = expected {
        if ptype != expected {
            return Err(ParseError::WrongType { got: ptype, expected });
        }
    } else if ptype != PTYPE_DATA && ptype != PTYPE_FEEDBACK {
        return Err(ParseError::WrongType { got: ptype, expected: PTYPE_DATA });
    }
    Ok(ptype)
}

pub fn encode_data_packet(header: &DataHeader, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(DATA_HEADER_LEN + payload.len());
    write_data_packet(header, payload, &mut out);
    out
}

/// Appends the datagram to `out`.
pub fn write_data_packet(header: &DataHeader, payload: &[u8], out: &mut Vec<u8>) {
    out.extend_from_slice(&MAGIC.to_be_bytes());
    out.push(VERSION);
    out.push(PTYPE_DATA);
    out.extend_from_slice(&header.global_seq.to_be_bytes());
    out.extend_from_slice(&header.block_id.to_be_bytes());
    out.extend_from_slice(&header.esi.to_be_bytes());
    out.extend_from_slice(&header.block_size_bytes.to_be_bytes());
    out.extend_from_slice(&header.symbol_size.to_be_bytes());
    out.extend_from_slice(payload);
}

pub fn decode_data_packet(buf: &[u8]) -> Result<(DataHeader, &[u8]), ParseError> {
    prelude(buf, Some(PTYPE_DATA))?;
    if buf.len() < DATA_HEADER_LEN {
        return Err(ParseError::Truncated {
            need: DATA_HEADER_LEN,
            have: buf.len(),
        });
    }
    let header = DataHeader {
        global_seq: be_u64(&buf[4..12]),
        block_id: be_u64(&buf[12..20]),
        esi: be_u32(&buf[20..24]),
        block_size_bytes: be_u32(&buf[24..28]),
        symbol_size: u16::from_be_bytes([buf[28], buf[29]]),
    };
    if header.block_size_bytes == 0 {
        return Err(ParseError::InvalidField("block_size_bytes is zero"));
    }
    if header.symbol_size == 0 {
        return Err(ParseError::InvalidField("symbol_size is zero"));
    }
    Ok((header, &buf[DATA_HEADER_LEN..]))
}

pub fn encode_feedback(fb: &FeedbackPacket) -> Vec<u8> {
    let mut out = Vec::with_capacity(fb.encoded_len());
    out.extend_from_slice(&MAGIC.to_be_bytes());
    out.push(VERSION);
    out.push(PTYPE_FEEDBACK);
    out.extend_from_slice(&fb.highest_seq_seen.unwrap_or(NO_SEQ).to_be_bytes());
    out.extend_from_slice(&fb.total_data_packets_received.to_be_bytes());
    let count = u16::try_from(fb.entries.len()).expect("at most 65535 active blocks per feedback");
    out.extend_from_slice(&count.to_be_bytes());
    for e in &fb.entries {
        out.extend_from_slice(&e.block_id.to_be_bytes());
        out.extend_from_slice(&e.symbols_received.to_be_bytes());
    }
    out
}

pub fn decode_feedback(buf: &[u8]) -> Result<FeedbackPacket, ParseError> {
    prelude(buf, Some(PTYPE_FEEDBACK))?;
    if buf.len() < FEEDBACK_FIXED_LEN {
        return Err(ParseError::Truncated {
            need: FEEDBACK_FIXED_LEN,
            have: buf.len(),
        });
    }
    let highest = be_u64(&buf[4..12]);
    let total = be_u64(&buf[12..20]);
    let count = u16::from_be_bytes([buf[20], buf[21]]) as usize;
    let need = FEEDBACK_FIXED_LEN + count * FEEDBACK_ENTRY_LEN;
    if buf.len() < need {
        return Err(ParseError::Truncated { need, have: buf.len() });
    }
    if buf.len() > need {
        return Err(ParseError::TrailingBytes(buf.len() - need));
    }
    let highest_seq_seen = (highest != NO_SEQ).then_some(highest);
    match highest_seq_seen {
        None if total != 0 => {
            return Err(ParseError::InvalidField("packets received but no highest sequence"))
        }
        Some(h) if total > h + 1 => {
            return Err(ParseError::InvalidField("received count exceeds highest sequence + 1"))
        }
        _ => {}
    }
    let entries = buf[FEEDBACK_FIXED_LEN..]
        .chunks_exact(FEEDBACK_ENTRY_LEN)
        .map(|c| FeedbackEntry {
            block_id: be_u64(&c[0..8]),
            symbols_received: be_u32(&c[8..12]),
        })
        .collect();
    Ok(FeedbackPacket {
        highest_seq_seen,
        total_data_packets_received: total,
        entries,
    })
}

fn be_u64(b: &[u8]) -> u64 {
    u64::from_be_bytes(b.try_into().unwrap())
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes(b.try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_data_packet_layout() {
        let h = DataHeader {
            global_seq: 0,
            block_id: 0,
            esi: 0,
            block_size_bytes: 1,
            symbol_size: 1,
        };
        let bytes = encode_data_packet(&h, &[0xAB]);
        assert_eq!(bytes.len(), DATA_HEADER_LEN + 1);
        assert_eq!(&bytes[..4], &[0x4C, 0x51, 0x01, 0x01]);
        let (back, payload) = decode_data_packet(&bytes).unwrap();
        assert_eq!(back, h);
        assert_eq!(payload, &[0xAB]);
    }

    #[test]
    fn header_overhead_is_30_bytes() {
        let h = DataHeader {
            global_seq: 1,
            block_id: 2,
            esi: 3,
            block_size_bytes: 40_000,
            symbol_size: 1250,
        };
        assert_eq!(encode_data_packet(&h, &[0; 1250]).len(), 1250 + 30);
        assert_eq!(encode_data_packet(&h, &[]).len(), 30);
    }

    #[test]
    fn feedback_roundtrip_example() {
        let fb = FeedbackPacket {
            highest_seq_seen: Some(999),
            total_data_packets_received: 950,
            entries: vec![FeedbackEntry {
                block_id: 7,
                symbols_received: 312,
            }],
        };
        let bytes = encode_feedback(&fb);
        assert_eq!(bytes.len(), 34);
        assert_eq!(decode_feedback(&bytes).unwrap(), fb);
    }

    #[test]
    fn empty_feedback_uses_sentinel() {
        let fb = FeedbackPacket::default();
        let bytes = encode_feedback(&fb);
        assert_eq!(&bytes[4..12], &[0xFF; 8]);
        assert_eq!(decode_feedback(&bytes).unwrap(), fb);
    }

    #[test]
    fn distinct_parse_errors() {
        let h = DataHeader {
            global_seq: 5,
            block_id: 1,
            esi: 0,
            block_size_bytes: 10,
            symbol_size: 10,
        };
        let good = encode_data_packet(&h, &[1; 10]);

        let mut bad = good.clone();
        bad[0] = 0;
        assert!(matches!(decode_data_packet(&bad), Err(ParseError::BadMagic(_))));

        let mut bad = good.clone();
        bad[2] = 9;
        assert_eq!(decode_data_packet(&bad).unwrap_err(), ParseError::UnknownVersion(9));

        assert!(matches!(
            decode_data_packet(&good[..20]),
            Err(ParseError::Truncated { need: 30, have: 20 })
        ));
        assert!(matches!(decode_feedback(&good), Err(ParseError::WrongType { got: 1, expected: 2 })));

        let mut bad = good.clone();
        bad[27] = 0;
        bad[26] = 0;
        bad[25] = 0;
        bad[24] = 0;
        assert!(matches!(decode_data_packet(&bad), Err(ParseError::InvalidField(_))));

        let mut fb = encode_feedback(&FeedbackPacket::default());
        fb.push(0);
        assert_eq!(decode_feedback(&fb).unwrap_err(), ParseError::TrailingBytes(1));

        let fb = FeedbackPacket {
            highest_seq_seen: Some(3),
            total_data_packets_received: 5,
            entries: vec![],
        };
        assert!(matches!(decode_feedback(&encode_feedback(&fb)), Err(ParseError::InvalidField(_))));
    }

    #[test]
    fn fuzz_never_panics() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xF022);
        let cases: usize = std::env::var("LIQUID_FUZZ_CASES")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(1_000_000);
        let mut buf = Vec::with_capacity(2000);
        for i in 0..cases {
            let len = rng.gen_range(1..=2000);
            buf.clear();
            buf.extend((0..len).map(|_| rng.gen::<u8>()));
            // Bias a share of inputs towards valid preludes to reach the body parsers.
            if i % 2 == 0 && len >= 4 {
                buf[0] = 0x4C;
                buf[1] = 0x51;
                buf[2] = 1;
                buf[3] = if i % 4 == 0 { PTYPE_DATA } else { PTYPE_FEEDBACK };
            }
            if i % 8 == 2 && len >= FEEDBACK_FIXED_LEN {
                let n = ((len - FEEDBACK_FIXED_LEN) / FEEDBACK_ENTRY_LEN) as u16;
                buf[20..22].copy_from_slice(&n.to_be_bytes());
            }
            let _ = decode_data_packet(&buf);
            let _ = decode_feedback(&buf);
            let _ = peek_type(&buf);
        }
    }

    fn arb_header() -> impl Strategy<Value = DataHeader> {
        (any::<u64>(), any::<u64>(), any::<u32>(), 1..=u32::MAX, 1..=u16::MAX).prop_map(
            |(global_seq, block_id, esi, block_size_bytes, symbol_size)| DataHeader {
                global_seq,
                block_id,
                esi,
                block_size_bytes,
                symbol_size,
            },
        )
    }

    fn arb_feedback() -> impl Strategy<Value = FeedbackPacket> {
        (
            proptest::option::of(0..u64::MAX - 1),
            any::<u64>(),
            proptest::collection::vec((any::<u64>(), any::<u32>()), 0..40),
        )
            .prop_map(|(highest, total, entries)| FeedbackPacket {
                highest_seq_seen: highest,
                total_data_packets_received: highest.map_or(0, |h| total % (h + 2)),
                entries: entries
                    .into_iter()
                    .map(|(block_id, symbols_received)| FeedbackEntry {
                        block_id,
                        symbols_received,
                    })
                    .collect(),
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn data_roundtrip(h in arb_header(), payload in proptest::collection::vec(any::<u8>(), 0..64)) {
            let bytes = encode_data_packet(&h, &payload);
            let (h2, p2) = decode_data_packet(&bytes).unwrap();
            prop_assert_eq!(h2, h);
            prop_assert_eq!(p2, &payload[..]);
            prop_assert_eq!(encode_data_packet(&h2, p2), bytes);
        }

        #[test]
        fn feedback_roundtrip(fb in arb_feedback()) {
            let bytes = encode_feedback(&fb);
            prop_assert_eq!(bytes.len(), fb.encoded_len());
            let back = decode_feedback(&bytes).unwrap();
            prop_assert_eq!(encode_feedback(&back), bytes);
            prop_assert_eq!(back, fb);
        }
    }
}
