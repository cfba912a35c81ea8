//! Netpbm (P5/P6) image and PFM float-map reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}, found end of header")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| {
            self.pos = start;
            self.fail(format!("{what} is not ASCII"))
        })
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let start_guess = self.pos;
        let tok = self.token(what)?;
        tok.parse::<usize>().map_err(|_| {
            let mut c = Cursor {
                bytes: self.bytes,
                pos: start_guess,
                path: self.path,
            };
            c.skip_space_and_comments();
            c.fail(format!("{what} `{tok}` is not a nonnegative integer"))
        })
    }

    /// Consumes the single whitespace byte separating header and raster.
    fn single_space(&mut self) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.fail("expected whitespace before raster data")),
        }
    }
}

/// Decodes a binary 8-bit PGM (P5) or PPM (P6) into `[C,H,W]` values in `[0,1]`.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let channels = match cur.token("magic number")? {
        "P5" => 1,
        "P6" => 3,
        other => {
            cur.pos = 0;
            return Err(cur.fail(format!("unsupported magic `{other}`, expected P5 or P6")));
        }
    };
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        cur.pos = maxval_at;
        cur.skip_space_and_comments();
        return Err(cur.fail(format!("maxval {maxval} unsupported, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(cur.fail("image has a zero dimension"));
    }
    cur.single_space()?;
    let need = channels * w * h;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        cur.pos = bytes.len();
        return Err(cur.fail(format!("truncated raster: need {need} bytes, found {}", raster.len())));
    }
    let mut data = vec![0.0; need];
    // interleaved RGB to planar
    for (i, &b) in raster[..need].iter().enumerate() {
        let (pixel, c) = (i / channels, i % channels);
        data[c * w * h + pixel] = b as f64 / 255.0;
    }
    Tensor::new(&[channels, h, w], data)
}

/// Quantizes a value in `[0,1]` to 8 bits (clamping out-of-range input).
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[1,H,W]` or `[3,H,W]` tensor as P5 or P6.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::usage(format!("image must be [1|3, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for ch in 0..c {
            out.push(quantize(d[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_pnm(image)?).map_err(|e| Error::io(path, e))
}

/// Encodes a `[1,H,W]` map as a grayscale little-endian PFM (rows stored bottom to top).
pub fn encode_pfm(map: &Tensor) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::usage(format!("density map must be [1, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in map.data().chunks(w).rev() {
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a grayscale PFM of either byte order into `[1,H,W]`.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0, path };
    match cur.token("magic number")? {
        "Pf" => {}
        "PF" => {
            cur.pos = 0;
            return Err(cur.fail("three-channel PFM (PF) where a single-channel map (Pf) was expected"));
        }
        other => {
            cur.pos = 0;
            return Err(cur.fail(format!("unsupported magic `{other}`, expected Pf")));
        }
    }
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    cur.skip_space_and_comments();
    let scale_at = cur.pos;
    let scale_tok = cur.token("scale")?;
    let scale: f64 = scale_tok.parse().map_err(|_| {
        let mut c = Cursor {
            bytes,
            pos: scale_at,
            path,
        };
        c.skip_space_and_comments();
        c.fail(format!("scale `{scale_tok}` is not a number"))
    })?;
    if scale == 0.0 || !scale.is_finite() {
        cur.pos = scale_at;
        return Err(cur.fail("scale must be a nonzero number"));
    }
    if w == 0 || h == 0 {
        return Err(cur.fail("map has a zero dimension"));
    }
    cur.single_space()?;
    let need = 4 * w * h;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        cur.pos = bytes.len();
        return Err(cur.fail(format!("truncated raster: need {need} bytes, found {}", raster.len())));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; w * h];
    for (i, chunk) in raster[..need].chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row_from_bottom, col) = (i / w, i % w);
        data[(h - 1 - row_from_bottom) * w + col] = v as f64;
    }
    Tensor::new(&[1, h, w], data)
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

pub fn write_pfm(path: &Path, map: &Tensor) -> Result<()> {
    fs::write(path, encode_pfm(map)?).map_err(|e| Error::io(path, e))
}
