//! `.fmac` stream format: a 19-byte little-endian header followed by
//! fixed-width indices, frame-major and stage-minor, packed MSB first.

use thiserror::Error;

use crate::codes::CodeGrid;
use crate::config::CodecConfig;

pub const MAGIC: [u8; 4] = *b"FMAC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 19;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StreamError {
    #[error("not a FlowMAC stream")]
    BadMagic,
    #[error("unsupported stream version {0}")]
    Version(u8),
    #[error("stream header truncated: {0} bytes, need {HEADER_LEN}")]
    ShortHeader(usize),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload has {actual} bytes, expected {expected}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("index {index} at frame {frame}, stage {stage} does not fit in {bits} bits")]
    IndexRange {
        frame: usize,
        stage: usize,
        index: u32,
        bits: u8,
    },
    #[error("invalid header field: {0}")]
    Header(String),
    #[error("cannot keep {keep} stages of a {stages}-stage stream")]
    KeepStages { keep: usize, stages: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u8,
    pub sample_rate: u32,
    pub hop: u16,
    pub n_mels: u8,
    pub stages: u8,
    pub codebook_bits: u8,
    pub frame_count: u32,
    pub flags: u8,
}

impl StreamHeader {
    pub fn for_config(config: &CodecConfig, stages: usize, frames: usize) -> Result<Self, StreamError> {
        let field = |name: &str, v: usize, max: usize| {
            if v > max {
                Err(StreamError::Header(format!("{name} = {v} exceeds {max}")))
            } else {
                Ok(v)
            }
        };
        let h = StreamHeader {
            version: VERSION,
            sample_rate: config.audio.sample_rate,
            hop: field("hop", config.audio.hop, u16::MAX as usize)? as u16,
            n_mels: field("n_mels", config.audio.n_mels, u8::MAX as usize)? as u8,
            stages: field("stages", stages, u8::MAX as usize)? as u8,
            codebook_bits: config.rvq.codebook_bits() as u8,
            frame_count: field("frame_count", frames, u32::MAX as usize)? as u32,
            flags: 0,
        };
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<(), StreamError> {
        if self.stages == 0 {
            return Err(StreamError::Header("stages must be at least 1".into()));
        }
        if self.codebook_bits == 0 || self.codebook_bits > 32 {
            return Err(StreamError::Header(format!("codebook_bits = {}", self.codebook_bits)));
        }
        if self.bits_per_frame() > 64 {
            return Err(StreamError::Header(format!(
                "{} bits per frame exceeds 64",
                self.bits_per_frame()
            )));
        }
        if self.sample_rate == 0 || self.hop == 0 {
            return Err(StreamError::Header("sample_rate and hop must be positive".into()));
        }
        Ok(())
    }

    pub fn bits_per_frame(&self) -> usize {
        self.stages as usize * self.codebook_bits as usize
    }

    pub fn payload_bytes(&self) -> usize {
        (self.frame_count as usize * self.bits_per_frame()).div_ceil(8)
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frame_count as f64 / self.frame_rate()
    }

    /// Payload rate excluding the header: exact for the default config
    /// (8 x 8 x 24000 / 512 = 3000).
    pub fn bits_per_second(&self) -> f64 {
        self.bits_per_frame() as f64 * self.sample_rate as f64 / self.hop as f64
    }

    /// Fields that disagree with `config`, as `name: stream vs model` strings.
    /// A stream with fewer stages than the model is compatible.
    pub fn mismatches(&self, config: &CodecConfig) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, stream: u64, model: u64| {
            if stream != model {
                out.push(format!("{name}: stream {stream} vs model {model}"));
            }
        };
        check("sample_rate", self.sample_rate as u64, config.audio.sample_rate as u64);
        check("hop", self.hop as u64, config.audio.hop as u64);
        check("n_mels", self.n_mels as u64, config.audio.n_mels as u64);
        check("codebook_bits", self.codebook_bits as u64, config.rvq.codebook_bits() as u64);
        if self.stages as usize > config.rvq.stages {
            out.push(format!("stages: stream {} exceeds model {}", self.stages, config.rvq.stages));
        }
        out
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4] = self.version;
        b[5..9].copy_from_slice(&self.sample_rate.to_le_bytes());
        b[9..11].copy_from_slice(&self.hop.to_le_bytes());
        b[11] = self.n_mels;
        b[12] = self.stages;
        b[13] = self.codebook_bits;
        b[14..18].copy_from_slice(&self.frame_count.to_le_bytes());
        b[18] = self.flags;
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, StreamError> {
        if b.len() < 4 || b[0..4] != MAGIC {
            return Err(StreamError::BadMagic);
        }
        if b.len() < HEADER_LEN {
            return Err(StreamError::ShortHeader(b.len()));
        }
        if b[4] != VERSION {
            return Err(StreamError::Version(b[4]));
        }
        let h = StreamHeader {
            version: b[4],
            sample_rate: u32::from_le_bytes(b[5..9].try_into().unwrap()),
            hop: u16::from_le_bytes(b[9..11].try_into().unwrap()),
            n_mels: b[11],
            stages: b[12],
            codebook_bits: b[13],
            frame_count: u32::from_le_bytes(b[14..18].try_into().unwrap()),
            flags: b[18],
        };
        h.validate()?;
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedStream {
    pub header: StreamHeader,
    pub payload: Vec<u8>,
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    fill: u32,
}

impl BitWriter {
    fn new(capacity: usize) -> Self {
        BitWriter {
            bytes: Vec::with_capacity(capacity),
            acc: 0,
            fill: 0,
        }
    }

    fn put(&mut self, value: u32, bits: u32) {
        self.acc = (self.acc << bits) | value as u64;
        self.fill += bits;
        while self.fill >= 8 {
            self.fill -= 8;
            self.bytes.push((self.acc >> self.fill) as u8);
        }
        self.acc &= (1u64 << self.fill) - 1;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.fill > 0 {
            self.bytes.push((self.acc << (8 - self.fill)) as u8);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    fill: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader {
            bytes,
            pos: 0,
            acc: 0,
            fill: 0,
        }
    }

    /// Caller guarantees enough bytes remain.
    fn get(&mut self, bits: u32) -> u32 {
        while self.fill < bits {
            self.acc = (self.acc << 8) | self.bytes[self.pos] as u64;
            self.pos += 1;
            self.fill += 8;
        }
        self.fill -= bits;
        let v = (self.acc >> self.fill) & ((1u64 << bits) - 1);
        self.acc &= (1u64 << self.fill) - 1;
        v as u32
    }
}

fn pack_with_header(codes: &CodeGrid, header: StreamHeader) -> Result<EncodedStream, StreamError> {
    let bits = header.codebook_bits as u32;
    let limit = 1u64 << bits;
    let mut w = BitWriter::new(header.payload_bytes());
    for f in 0..codes.frames() {
        for (s, &index) in codes.frame(f).iter().enumerate() {
            if index as u64 >= limit {
                return Err(StreamError::IndexRange {
                    frame: f,
                    stage: s,
                    index,
                    bits: header.codebook_bits,
                });
            }
            w.put(index, bits);
        }
    }
    Ok(EncodedStream {
        header,
        payload: w.finish(),
    })
}

/// Packs `codes` under the structural constants of `config`.
pub fn pack(codes: &CodeGrid, config: &CodecConfig) -> Result<EncodedStream, StreamError> {
    let header = StreamHeader::for_config(config, codes.stages(), codes.frames())?;
    pack_with_header(codes, header)
}

pub fn unpack(stream: &EncodedStream) -> Result<CodeGrid, StreamError> {
    let h = &stream.header;
    let expected = h.payload_bytes();
    if stream.payload.len() < expected {
        return Err(StreamError::Truncated {
            expected,
            actual: stream.payload.len(),
        });
    }
    if stream.payload.len() > expected {
        return Err(StreamError::TrailingBytes {
            expected,
            actual: stream.payload.len(),
        });
    }
    let bits = h.codebook_bits as u32;
    let mut r = BitReader::new(&stream.payload);
    let n = h.frame_count as usize * h.stages as usize;
    let indices = (0..n).map(|_| r.get(bits)).collect();
    Ok(CodeGrid::new(h.frame_count as usize, h.stages as usize, indices).expect("validated header"))
}

/// Keeps the first `keep` stages of every frame. Pure bit manipulation.
pub fn truncate(stream: &EncodedStream, keep: usize) -> Result<EncodedStream, StreamError> {
    let stages = stream.header.stages as usize;
    if keep == 0 || keep > stages {
        return Err(StreamError::KeepStages { keep, stages });
    }
    if keep == stages {
        return Ok(stream.clone());
    }
    let codes = unpack(stream)?;
    let header = StreamHeader {
        stages: keep as u8,
        ..stream.header
    };
    pack_with_header(&codes.keep_stages(keep).expect("keep checked"), header)
}

impl EncodedStream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.header.to_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses a stream and checks that the payload length matches the header.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StreamError> {
        let header = StreamHeader::from_bytes(bytes)?;
        let payload = bytes[HEADER_LEN..].to_vec();
        let expected = header.payload_bytes();
        if payload.len() < expected {
            return Err(StreamError::Truncated {
                expected,
                actual: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(StreamError::TrailingBytes {
                expected,
                actual: payload.len(),
            });
        }
        Ok(EncodedStream { header, payload })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(frames: usize, stages: usize, f: impl Fn(usize) -> u32) -> CodeGrid {
        CodeGrid::new(frames, stages, (0..frames * stages).map(f).collect()).unwrap()
    }

    #[test]
    fn header_is_19_bytes_little_endian() {
        let cfg = CodecConfig::default();
        let h = StreamHeader::for_config(&cfg, 8, 0x0102_0304).unwrap();
        let b = h.to_bytes();
        assert_eq!(&b[0..4], b"FMAC");
        assert_eq!(b[4], 1);
        assert_eq!(&b[5..9], &24_000u32.to_le_bytes());
        assert_eq!(&b[9..11], &[0x00, 0x02]);
        assert_eq!((b[11], b[12], b[13]), (128, 8, 8));
        assert_eq!(&b[14..18], &[0x04, 0x03, 0x02, 0x01]);
        assert_eq!(StreamHeader::from_bytes(&b).unwrap(), h);
    }

    #[test]
    fn forty_seven_frames_take_376_bytes() {
        let s = pack(&grid(47, 8, |i| (i * 7 % 256) as u32), &CodecConfig::default()).unwrap();
        assert_eq!(s.payload.len(), 376);
        assert_eq!(s.header.bits_per_second(), 3000.0);
    }

    #[test]
    fn empty_grid_is_header_only() {
        let s = pack(&grid(0, 8, |_| 0), &CodecConfig::default()).unwrap();
        assert_eq!(s.to_bytes().len(), HEADER_LEN);
        assert_eq!(unpack(&s).unwrap().frames(), 0);
    }

    #[test]
    fn msb_first_packing() {
        let mut cfg = CodecConfig::default();
        cfg.rvq.codebook_size = 8;
        let s = pack(&grid(1, 2, |i| [0b101, 0b011][i]), &cfg).unwrap();
        assert_eq!(s.payload, vec![0b1010_1100]);
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let err = pack(&grid(2, 8, |i| if i == 11 { 256 } else { 0 }), &CodecConfig::default()).unwrap_err();
        assert_eq!(
            err,
            StreamError::IndexRange {
                frame: 1,
                stage: 3,
                index: 256,
                bits: 8
            }
        );
    }

    #[test]
    fn truncation_halves_payload() {
        let s = pack(&grid(100, 8, |i| (i % 256) as u32), &CodecConfig::default()).unwrap();
        assert_eq!(truncate(&s, 8).unwrap(), s);
        let t = truncate(&s, 4).unwrap();
        assert_eq!(t.payload.len() * 2, s.payload.len());
        assert_eq!(t.header.bits_per_second(), 1500.0);
        assert!(truncate(&s, 0).is_err());
        assert!(truncate(&s, 9).is_err());
    }

    #[test]
    fn bad_magic_and_short_payload() {
        let s = pack(&grid(10, 8, |i| i as u32), &CodecConfig::default()).unwrap();
        let mut bytes = s.to_bytes();
        let short = &bytes[..bytes.len() - 5];
        assert_eq!(
            EncodedStream::from_bytes(short).unwrap_err(),
            StreamError::Truncated {
                expected: 80,
                actual: 75
            }
        );
        bytes[0] = b'X';
        let err = EncodedStream::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "not a FlowMAC stream");
    }

    #[test]
    fn mismatches_list_fields() {
        let cfg = CodecConfig::default();
        let mut h = StreamHeader::for_config(&cfg, 4, 10).unwrap();
        assert!(h.mismatches(&cfg).is_empty());
        h.hop = 256;
        h.n_mels = 80;
        let m = h.mismatches(&cfg);
        assert_eq!(m.len(), 2);
        assert!(m[0].starts_with("hop") && m[1].starts_with("n_mels"));
    }
}
