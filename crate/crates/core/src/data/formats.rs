use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::glyphs::{DigitSource, GlyphOrigin, GLYPH_SIZE};
use super::Sequences;
use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const STF1_MAGIC: &[u8; 4] = b"STF1";
const STF1_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(format!("{}: truncated at byte {} (need {n} more)", self.what, self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_le_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes_len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(format!("{}: payload size overflows", self.what)))?;
        let raw = self.take(bytes_len)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Reads an IDX image file (magic `0x00000803`, big-endian dims) of 28×28
/// images, scaling bytes to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<DigitSource> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, "idx");
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!("idx: bad magic {magic:#010x}")));
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    if rows != GLYPH_SIZE || cols != GLYPH_SIZE {
        return Err(Error::format(format!("idx: images are {rows}×{cols}, expected 28×28")));
    }
    let plane = rows * cols;
    let payload = r.take(count.checked_mul(plane).ok_or_else(|| Error::format("idx: count overflows"))?)?;
    r.finish()?;
    let glyphs = payload
        .chunks_exact(plane)
        .map(|img| img.iter().map(|&b| b as f32 / 255.0).collect())
        .collect();
    DigitSource::new(glyphs, GlyphOrigin::Idx)
}

/// Writes 28×28 byte images as an IDX image file.
pub fn write_idx_images(path: &Path, images: &[Vec<u8>]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * GLYPH_SIZE * GLYPH_SIZE);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(GLYPH_SIZE as u32).to_be_bytes());
    out.extend_from_slice(&(GLYPH_SIZE as u32).to_be_bytes());
    for (i, img) in images.iter().enumerate() {
        if img.len() != GLYPH_SIZE * GLYPH_SIZE {
            return Err(Error::Data(format!("image {i} is not 28×28")));
        }
        out.extend_from_slice(img);
    }
    fs::write(path, out)?;
    Ok(())
}

/// The 32-byte STF1 header for `[S, T, C, H, W]`.
pub fn stf1_header(dims: [usize; 5]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(32);
    out.extend_from_slice(STF1_MAGIC);
    out.extend_from_slice(&STF1_VERSION.to_le_bytes());
    out.extend_from_slice(&5u32.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::format(format!("stf1: dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

/// Writes `[S, T, C, H, W]` sequences in STF1 layout.
pub fn write_stf1(path: &Path, seqs: &Sequences) -> Result<()> {
    if let Some(i) = seqs.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sequence tensor element {i}")));
    }
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&stf1_header(seqs.dims())?)?;
    for v in seqs.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

fn parse_stf1_header(r: &mut Reader<'_>) -> Result<[usize; 5]> {
    if r.take(4)? != STF1_MAGIC {
        return Err(Error::format("stf1: bad magic"));
    }
    let version = r.u32_le()?;
    if version != STF1_VERSION {
        return Err(Error::format(format!("stf1: unsupported version {version}")));
    }
    let rank = r.u32_le()?;
    if rank != 5 {
        return Err(Error::format(format!("stf1: rank {rank}, expected 5")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32_le()? as usize;
    }
    Ok(dims)
}

/// Dims declared by an STF1 file, without reading the payload.
pub fn read_stf1_dims(path: &Path) -> Result<[usize; 5]> {
    let mut head = [0u8; 32];
    let mut f = fs::File::open(path)?;
    let n = f.read(&mut head)?;
    parse_stf1_header(&mut Reader::new(&head[..n], "stf1"))
}

/// Reads an STF1 file.
pub fn read_stf1(path: &Path) -> Result<Sequences> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, "stf1");
    let dims = parse_stf1_header(&mut r)?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(format!("stf1: dims {dims:?} overflow")))?;
    let data = r.f32_le_vec(n)?;
    r.finish()?;
    Sequences::new(dims, data).map_err(|e| Error::format(format!("stf1: {e}")))
}

/// Binary PGM (P5, maxval 255) of a `height × width` frame in `[0, 1]`.
pub fn pgm_bytes(frame: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    if frame.len() != height * width {
        return Err(Error::InvalidShape(format!(
            "frame has {} values, expected {height}×{width}",
            frame.len()
        )));
    }
    let mut out = format!("P5\n{width} {height} 255\n").into_bytes();
    out.extend(frame.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, frame: &[f32], height: usize, width: usize) -> Result<()> {
    fs::write(path, pgm_bytes(frame, height, width)?)?;
    Ok(())
}

/// Tiles equally sized frames into a grid (one `Vec` per row) separated by
/// `gap`-pixel mid-gray gutters. Returns `(pixels, height, width)`.
pub fn montage(rows: &[Vec<&[f32]>], height: usize, width: usize, gap: usize) -> Result<(Vec<f32>, usize, usize)> {
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.is_empty() || ncols == 0 {
        return Err(Error::InvalidShape("montage needs at least one frame".into()));
    }
    let mh = rows.len() * height + (rows.len() - 1) * gap;
    let mw = ncols * width + (ncols - 1) * gap;
    let mut out = vec![0.5f32; mh * mw];
    for (r, row) in rows.iter().enumerate() {
        for (c, frame) in row.iter().enumerate() {
            if frame.len() != height * width {
                return Err(Error::InvalidShape(format!("montage frame ({r}, {c}) has wrong size")));
            }
            let (oy, ox) = (r * (height + gap), c * (width + gap));
            for y in 0..height {
                let dst = (oy + y) * mw + ox;
                out[dst..dst + width].copy_from_slice(&frame[y * width..(y + 1) * width]);
            }
        }
    }
    Ok((out, mh, mw))
}
