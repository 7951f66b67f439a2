//! CDLV1 volume and mask files.
//!
//! ```text
//! CDLV1
//! dims nx ny nz
//! spacing sx sy sz
//! dtype f32le        (masks: u8)
//!
//! <payload, x fastest>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use cdl_core::volume::{BinaryMask, Dims, ImageVolume};

use crate::error::{Error, Result};

pub const MAGIC: &str = "CDLV1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32le",
            Dtype::U8 => "u8",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedVolume {
    pub volume: ImageVolume,
    /// Every intensity already lies in `[0, 1]`. Recorded only; nothing is rescaled.
    pub normalized: bool,
}

fn header(dims: Dims, spacing: [f64; 3], dtype: Dtype) -> String {
    format!(
        "{MAGIC}\ndims {} {} {}\nspacing {} {} {}\ndtype {}\n\n",
        dims.nx,
        dims.ny,
        dims.nz,
        spacing[0],
        spacing[1],
        spacing[2],
        dtype.name()
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Intensities are stored as `f32`.
pub fn save_volume(path: &Path, v: &ImageVolume) -> Result<()> {
    let mut bytes = header(v.dims(), v.spacing(), Dtype::F32).into_bytes();
    bytes.reserve(v.data().len() * 4);
    for &x in v.data() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn save_mask(path: &Path, m: &BinaryMask, spacing: [f64; 3]) -> Result<()> {
    let mut bytes = header(m.dims(), spacing, Dtype::U8).into_bytes();
    bytes.extend(m.bits().iter().map(|&b| b as u8));
    write_file(path, &bytes)
}

struct Parsed<'a> {
    dims: Dims,
    spacing: [f64; 3],
    dtype: Dtype,
    payload: &'a [u8],
}

fn parse<'a>(path: &Path, bytes: &'a [u8]) -> Result<Parsed<'a>> {
    let bad = |msg: String| Error::Header { path: path.to_path_buf(), msg };
    let end = bytes.windows(2).position(|w| w == b"\n\n").ok_or_else(|| bad("no blank line ends the header".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("expected magic {MAGIC}")));
    }
    let mut field = |key: &str| -> Result<Vec<String>> {
        let line = lines.next().ok_or_else(|| bad(format!("missing `{key}` line")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(bad(format!("expected `{key}`, got `{line}`")));
        }
        Ok(parts.map(str::to_owned).collect())
    };
    let triple = |vals: Vec<String>, key: &str| -> Result<[String; 3]> {
        <[String; 3]>::try_from(vals).map_err(|_| bad(format!("`{key}` needs three values")))
    };
    let d = triple(field("dims")?, "dims")?;
    let s = triple(field("spacing")?, "spacing")?;
    let t = field("dtype")?;
    let mut ints = [0usize; 3];
    for (slot, v) in ints.iter_mut().zip(&d) {
        *slot = v.parse().map_err(|_| bad(format!("bad dimension `{v}`")))?;
    }
    let mut spacing = [0.0f64; 3];
    for (slot, v) in spacing.iter_mut().zip(&s) {
        *slot = v.parse().map_err(|_| bad(format!("bad spacing `{v}`")))?;
    }
    if !spacing.iter().all(|x| x.is_finite() && *x > 0.0) {
        return Err(bad(format!("spacing must be positive, got {spacing:?}")));
    }
    let dims = Dims::new(ints[0], ints[1], ints[2]).map_err(|e| bad(e.to_string()))?;
    let dtype = match t.as_slice() {
        [x] if x == "f32le" => Dtype::F32,
        [x] if x == "u8" => Dtype::U8,
        _ => return Err(bad(format!("unsupported dtype {t:?}"))),
    };
    if let Some(extra) = lines.next() {
        return Err(bad(format!("unexpected header line `{extra}`")));
    }
    let payload = &bytes[end + 2..];
    let expected = dims.len() * dtype.width();
    if payload.len() < expected {
        return Err(Error::Truncated { path: path.to_path_buf(), expected, actual: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::TrailingBytes { path: path.to_path_buf(), extra: payload.len() - expected });
    }
    Ok(Parsed { dims, spacing, dtype, payload })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn expect_dtype(path: &Path, p: &Parsed, want: Dtype) -> Result<()> {
    if p.dtype != want {
        return Err(Error::Header {
            path: path.to_path_buf(),
            msg: format!("dtype {} where {} was expected", p.dtype.name(), want.name()),
        });
    }
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<LoadedVolume> {
    let bytes = read(path)?;
    let p = parse(path, &bytes)?;
    expect_dtype(path, &p, Dtype::F32)?;
    let mut data = Vec::with_capacity(p.dims.len());
    for (index, c) in p.payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(Error::NonFiniteValue { path: path.to_path_buf(), index });
        }
        data.push(v as f64);
    }
    let volume = ImageVolume::new(p.dims, p.spacing, data)?;
    let normalized = volume.is_normalized();
    Ok(LoadedVolume { volume, normalized })
}

pub fn load_mask(path: &Path) -> Result<(BinaryMask, [f64; 3])> {
    let bytes = read(path)?;
    let p = parse(path, &bytes)?;
    expect_dtype(path, &p, Dtype::U8)?;
    let mut bits = Vec::with_capacity(p.dims.len());
    for (index, &value) in p.payload.iter().enumerate() {
        match value {
            0 => bits.push(false),
            1 => bits.push(true),
            _ => return Err(Error::BadMaskValue { path: path.to_path_buf(), index, value }),
        }
    }
    Ok((BinaryMask::new(p.dims, bits)?, p.spacing))
}
