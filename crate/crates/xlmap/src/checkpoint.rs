//! Mapping model checkpoints.
//!
//! Layout (magic `XLCK`, all integers little-endian):
//!
//! ```text
//! magic          4 bytes
//! version        u16                    (currently 1)
//! target_lang    u32 length + UTF-8
//! target_dim     u32
//! hidden_dim     u32
//! encoder_count  u32
//! encoders       count * (lang u32 length + UTF-8, input_dim u32)
//!                in ascending language order
//! params         f64 * N                canonical parameter order
//! crc32          u32                    over every preceding byte
//! ```
//!
//! Parameters are stored at full f64 precision, so a save/load round trip is
//! bit-exact and the model checksum survives it.

use std::fs;
use std::io::Write;
use std::path::Path;

use xlmap_core::corpus::{LangId, SourceDims, TokenInventory};
use xlmap_core::mesd::MesdModel;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"XLCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const MAX_STRING_LEN: u32 = 4096;
const MAX_DIM: u32 = 1 << 20;
const MAX_ENCODERS: u32 = 4096;

fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Writes `model` to `path`, creating parent directories.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &MesdModel) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_string(&mut out, model.target_lang().as_str());
    out.extend_from_slice(&(model.target_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(model.hidden_dim() as u32).to_le_bytes());
    let dims = model.source_dims();
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for (lang, dim) in dims.iter() {
        push_string(&mut out, lang.as_str());
        out.extend_from_slice(&(*dim as u32).to_le_bytes());
    }
    for slice in model.param_slices() {
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());

    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

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
            return Err(Error::malformed(self.path, "string field exceeds the size limit"));
        }
        let bytes = self.take(len as usize)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::malformed(self.path, "string field is not valid UTF-8"))
    }

    fn bounded_u32(&mut self, what: &str, min: u32, max: u32) -> Result<u32> {
        let v = self.u32()?;
        if v < min || v > max {
            return Err(Error::malformed(
                self.path,
                format!("{what} {v} outside [{min}, {max}]"),
            ));
        }
        Ok(v)
    }
}

/// Reads a checkpoint, verifying magic, version and the trailing checksum.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MesdModel> {
    let path = path.as_ref();
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
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    if bytes.len() < 10 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::CorruptCheckpoint {
            path: path.to_path_buf(),
        });
    }
    cur.bytes = body;

    let target_lang = cur.string()?;
    let target_dim = cur.bounded_u32("target dimension", 2, MAX_DIM)? as usize;
    let hidden_dim = cur.bounded_u32("hidden dimension", 1, MAX_DIM)? as usize;
    let encoder_count = cur.bounded_u32("encoder count", 1, MAX_ENCODERS)?;
    let mut dims = SourceDims::new();
    let mut prev: Option<String> = None;
    for _ in 0..encoder_count {
        let lang = cur.string()?;
        let dim = cur.bounded_u32("encoder input dimension", 2, MAX_DIM)? as usize;
        if prev.as_deref().is_some_and(|p| p >= lang.as_str()) {
            return Err(Error::malformed(
                path,
                "encoder languages are not strictly ascending",
            ));
        }
        prev = Some(lang.clone());
        dims.insert(LangId::new(lang), dim);
    }

    let mut model =
        MesdModel::with_zero_params(LangId::new(target_lang), target_dim, &dims, hidden_dim)?;
    for slice in model.param_slices_mut() {
        for v in slice.iter_mut() {
            let raw: [u8; 8] = cur.take(8)?.try_into().unwrap();
            *v = f64::from_le_bytes(raw);
        }
    }
    if cur.pos != body.len() {
        return Err(Error::malformed(path, "trailing bytes after parameters"));
    }
    Ok(model)
}

/// Loads a checkpoint and confirms it targets `inventory`'s language and
/// token count.
pub fn load_checkpoint_checked(
    path: impl AsRef<Path>,
    inventory: &TokenInventory,
) -> Result<MesdModel> {
    let model = load_checkpoint(path)?;
    if model.target_lang() != inventory.lang_id() || model.target_dim() != inventory.size() {
        return Err(Error::InventoryMismatch {
            ckpt_lang: model.target_lang().as_str().to_string(),
            ckpt_dim: model.target_dim(),
            inv_lang: inventory.lang_id().as_str().to_string(),
            inv_dim: inventory.size(),
        });
    }
    Ok(model)
}
