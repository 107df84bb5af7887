//! Movie file format.
//!
//! Little-endian layout, all offsets fixed:
//!
//! | offset | field                | type        |
//! |--------|----------------------|-------------|
//! | 0      | magic `"GCF1"`       | 4 bytes     |
//! | 4      | version (= 1)        | u16         |
//! | 6      | height H             | u32         |
//! | 10     | width W              | u32         |
//! | 14     | channels C           | u16         |
//! | 16     | frames T             | u32         |
//! | 20     | start unix seconds   | u64         |
//! | 28     | interval minutes     | u16         |
//! | 30     | payload              | T*H*W*C u8  |
//!
//! Payload order is t-major, then row, column, channel. Saving and
//! loading round-trips the raw bytes exactly; consumers normalize to
//! `[0, 1]` by dividing by 255 when they read values.
//!
//! External challenge data is not read directly: a converter hook is the
//! intended path. Anything that can produce this header plus a t-major
//! byte payload (for example a small HDF5 export script) yields a file
//! every command accepts. See the README for the recipe.

use std::path::Path;

use gridcast_core::data::MovieDataset;

pub const MOVIE_MAGIC: [u8; 4] = *b"GCF1";
pub const MOVIE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 30;

/// Format-level failures; every variant names the byte offset it was
/// detected at.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} at offset {offset}")]
    BadVersion { offset: usize, found: u16 },

    #[error("invalid {what} at offset {offset}")]
    InvalidField { what: &'static str, offset: usize },

    #[error("dimension overflow at offset {offset}: {t} * {h} * {w} * {c} bytes")]
    DimensionOverflow {
        offset: usize,
        t: u64,
        h: u64,
        w: u64,
        c: u64,
    },

    #[error("truncated at offset {offset}: need {expected} more bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: u64,
        found: u64,
    },

    #[error(transparent)]
    Core(#[from] gridcast_core::Error),
}

impl FormatError {
    fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        FormatError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FormatError>;

/// Serializes a dataset into the on-disk byte layout.
pub fn encode_movie(dataset: &MovieDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + dataset.raw().len());
    out.extend_from_slice(&MOVIE_MAGIC);
    out.extend_from_slice(&MOVIE_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.height() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.width() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.channels() as u16).to_le_bytes());
    out.extend_from_slice(&(dataset.n_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.start_unix_seconds() as u64).to_le_bytes());
    out.extend_from_slice(&dataset.interval_minutes().to_le_bytes());
    out.extend_from_slice(dataset.raw());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.offset + n {
            return Err(FormatError::Truncated {
                offset: self.offset,
                expected: n as u64,
                found: (self.bytes.len() - self.offset) as u64,
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses the byte layout back into a dataset.
pub fn decode_movie(bytes: &[u8], city_name: &str) -> Result<MovieDataset> {
    let mut r = Reader { bytes, offset: 0 };

    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MOVIE_MAGIC {
        return Err(FormatError::BadMagic {
            expected: MOVIE_MAGIC,
            found: magic,
        });
    }
    let version_offset = r.offset;
    let version = r.u16()?;
    if version != MOVIE_VERSION {
        return Err(FormatError::BadVersion {
            offset: version_offset,
            found: version,
        });
    }

    let h_offset = r.offset;
    let h = r.u32()? as u64;
    let w_offset = r.offset;
    let w = r.u32()? as u64;
    let c_offset = r.offset;
    let c = r.u16()? as u64;
    let t_offset = r.offset;
    let t = r.u32()? as u64;
    let start_offset = r.offset;
    let start = r.u64()?;
    let interval_offset = r.offset;
    let interval = r.u16()?;

    if h == 0 {
        return Err(FormatError::InvalidField { what: "height", offset: h_offset });
    }
    if w == 0 {
        return Err(FormatError::InvalidField { what: "width", offset: w_offset });
    }
    if c == 0 {
        return Err(FormatError::InvalidField { what: "channels", offset: c_offset });
    }
    if t == 0 {
        return Err(FormatError::InvalidField { what: "frame count", offset: t_offset });
    }
    if interval == 0 {
        return Err(FormatError::InvalidField {
            what: "interval minutes",
            offset: interval_offset,
        });
    }
    if start > i64::MAX as u64 {
        return Err(FormatError::InvalidField {
            what: "start timestamp",
            offset: start_offset,
        });
    }

    let payload_len = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .filter(|v| *v <= usize::MAX as u64)
        .ok_or(FormatError::DimensionOverflow {
            offset: t_offset,
            t,
            h,
            w,
            c,
        })?;

    let payload_offset = r.offset;
    let available = (bytes.len() - payload_offset) as u64;
    if available != payload_len {
        return Err(FormatError::Truncated {
            offset: payload_offset,
            expected: payload_len,
            found: available,
        });
    }
    let raw = r.take(payload_len as usize)?.to_vec();

    Ok(MovieDataset::new(
        city_name.to_string(),
        h as usize,
        w as usize,
        c as usize,
        start as i64,
        interval,
        raw,
    )?)
}

/// Writes a dataset to disk.
pub fn save_movie(dataset: &MovieDataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_movie(dataset))
        .map_err(|e| FormatError::io(format!("writing {}", path.display()), e))
}

/// Reads a dataset from disk; the city name is the file stem.
pub fn load_movie(path: &Path) -> Result<MovieDataset> {
    let bytes = std::fs::read(path)
        .map_err(|e| FormatError::io(format!("reading {}", path.display()), e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "city".to_string());
    decode_movie(&bytes, &name)
}
