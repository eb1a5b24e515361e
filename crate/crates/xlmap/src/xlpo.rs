//! Binary file formats for per-frame data.
//!
//! Two sibling formats share one layout and differ only in magic and payload
//! semantics:
//!
//! * `.xlpo` (magic `XLPO`): phone posterior sequences, rows sum to one.
//! * `.xlft` (magic `XLFT`): acoustic feature sequences, rows unconstrained.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes
//! version    u16            (currently 1)
//! lang_id    u32 length + that many bytes of UTF-8
//! utt_id     u32 length + that many bytes of UTF-8
//! frames     u32            (T, at least 1)
//! dim        u32            (d, at least 1)
//! data       T * d * f32    row-major
//! ```
//!
//! Posterior rows are checked against a loose stochasticity tolerance on
//! load. The tolerance comfortably covers f32 quantisation, so a sequence
//! round-trips through disk without any renormalisation and a second save
//! reproduces the file byte for byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use xlmap_core::corpus::{LangId, PosteriorSequence, SEQ_ROW_SUM_TOLERANCE};
use xlmap_core::numerics::Matrix;

use crate::error::{Error, Result};

pub const XLPO_MAGIC: [u8; 4] = *b"XLPO";
pub const XLFT_MAGIC: [u8; 4] = *b"XLFT";
pub const FORMAT_VERSION: u16 = 1;

/// Upper bound on the string fields, to reject garbage headers before
/// attempting a huge allocation.
const MAX_STRING_LEN: u32 = 4096;

/// Upper bound on T * d. A week of 100Hz frames at dimension 1000 fits.
const MAX_CELLS: u64 = 1 << 36;

/// A sequence of acoustic feature vectors for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub lang_id: LangId,
    pub utt_id: String,
    pub frames: Matrix,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode(magic: [u8; 4], lang_id: &str, utt_id: &str, frames: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + lang_id.len() + utt_id.len() + frames.data().len() * 4);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    write_string(&mut out, lang_id);
    write_string(&mut out, utt_id);
    out.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    for &v in frames.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Reader that tracks the path for error messages and fails with
/// [`Error::Truncated`] on short reads.
struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()?;
        if len > MAX_STRING_LEN {
            return Err(Error::malformed(
                self.path,
                format!("string field of {len} bytes exceeds the {MAX_STRING_LEN} byte limit"),
            ));
        }
        let bytes = self.take(len as usize)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::malformed(self.path, "string field is not valid UTF-8"))
    }
}

struct RawSequence {
    lang_id: String,
    utt_id: String,
    frames: Matrix,
}

fn decode(path: &Path, expected_magic: [u8; 4]) -> Result<RawSequence> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    let mut cur = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };

    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != expected_magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: expected_magic,
            found: magic,
        });
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let lang_id = cur.string()?;
    let utt_id = cur.string()?;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::malformed(path, "frame count and dimension must be positive"));
    }
    if (rows as u64) * (cols as u64) > MAX_CELLS {
        return Err(Error::malformed(path, "frame data exceeds the size limit"));
    }
    let cells = rows * cols;
    let mut data = Vec::with_capacity(cells);
    for _ in 0..cells {
        let raw: [u8; 4] = cur.take(4)?.try_into().unwrap();
        data.push(f32::from_le_bytes(raw) as f64);
    }
    if cur.pos != bytes.len() {
        return Err(Error::malformed(path, "trailing bytes after frame data"));
    }
    let frames = Matrix::from_vec(rows, cols, data)?;
    Ok(RawSequence {
        lang_id,
        utt_id,
        frames,
    })
}

/// Writes a posterior sequence to `path`, creating parent directories.
pub fn save_posteriors(path: impl AsRef<Path>, seq: &PosteriorSequence) -> Result<()> {
    write_file(
        path.as_ref(),
        &encode(XLPO_MAGIC, seq.lang_id().as_str(), seq.utt_id(), seq.frames()),
    )
}

/// Reads a posterior sequence, validating row stochasticity.
///
/// Values come back exactly as stored (f32 widened to f64), with no
/// renormalisation: the f32 quantisation perturbs row sums by well under
/// the sequence tolerance, and leaving the payload untouched keeps
/// save/load/save byte-idempotent.
pub fn load_posteriors(path: impl AsRef<Path>) -> Result<PosteriorSequence> {
    let path = path.as_ref();
    let raw = decode(path, XLPO_MAGIC)?;
    for r in 0..raw.frames.rows() {
        let sum: f64 = raw.frames.row(r).iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > SEQ_ROW_SUM_TOLERANCE {
            return Err(Error::FileRowNotStochastic {
                path: path.to_path_buf(),
                row: r,
                sum,
            });
        }
    }
    PosteriorSequence::new(LangId::new(raw.lang_id), raw.utt_id, raw.frames).map_err(Error::from)
}

/// Writes a feature sequence to `path`, creating parent directories.
pub fn save_features(path: impl AsRef<Path>, seq: &FeatureSequence) -> Result<()> {
    write_file(
        path.as_ref(),
        &encode(XLFT_MAGIC, seq.lang_id.as_str(), seq.utt_id.as_str(), &seq.frames),
    )
}

/// Reads a feature sequence.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let raw = decode(path.as_ref(), XLFT_MAGIC)?;
    Ok(FeatureSequence {
        lang_id: LangId::new(raw.lang_id),
        utt_id: raw.utt_id,
        frames: raw.frames,
    })
}
