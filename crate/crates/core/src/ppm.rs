//! Minimal PPM/PGM image I/O.
//!
//! Reads P2/P3 (ASCII) and P5/P6 (binary) at maxval up to 255; writes
//! binary P6. Pixels map between [0,1] floats and bytes with 0.0 -> 0 and
//! 1.0 -> 255, clamped, rounding to nearest with ties to even.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

/// Float [0,1] to byte: scale by 255, clamp, round half-to-even.
pub fn pixel_to_byte(v: f64) -> u8 {
    (v * 255.0).clamp(0.0, 255.0).round_ties_even() as u8
}

/// Writes `[3, h, w]` (color) or `[1, h, w]` (replicated to gray RGB) as
/// binary P6.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    if img.ndim() != 3 || (img.shape()[0] != 3 && img.shape()[0] != 1) {
        return Err(Error::InvalidArg(format!(
            "write_ppm expects [3,h,w] or [1,h,w], got {:?}",
            img.shape()
        )));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut bytes = Vec::with_capacity(3 * h * w + 32);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let src = if c == 3 { ch } else { 0 };
                bytes.push(pixel_to_byte(img.data()[src * h * w + y * w + x]));
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Parse("pnm header: expected a number".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::Parse("pnm header: invalid utf8".into()))?
            .parse()
            .map_err(|_| Error::Parse("pnm header: invalid number".into()))
    }
}

/// Reads a PPM (`[3,h,w]`) or PGM (`[1,h,w]`) file into [0,1] floats.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 2 {
        return Err(Error::Parse(format!("{}: not a pnm file", path.display())));
    }
    let magic = &bytes[..2];
    let (channels, ascii) = match magic {
        b"P2" => (1, true),
        b"P3" => (3, true),
        b"P5" => (1, false),
        b"P6" => (3, false),
        _ => {
            return Err(Error::Parse(format!(
                "{}: unsupported pnm magic {:?}",
                path.display(),
                String::from_utf8_lossy(magic)
            )))
        }
    };
    let mut scan = HeaderScanner {
        bytes: &bytes,
        pos: 2,
    };
    let w = scan.number()?;
    let h = scan.number()?;
    let maxval = scan.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!(
            "{}: unsupported maxval {maxval} (expected 1..=255)",
            path.display()
        )));
    }
    let count = channels * w * h;
    let mut interleaved = Vec::with_capacity(count);
    if ascii {
        for _ in 0..count {
            interleaved.push(scan.number()? as f64 / maxval as f64);
        }
    } else {
        // exactly one whitespace byte separates the header from the raster
        let data_start = scan.pos + 1;
        if bytes.len() < data_start + count {
            return Err(Error::Parse(format!(
                "{}: truncated raster ({} of {count} bytes)",
                path.display(),
                bytes.len().saturating_sub(data_start)
            )));
        }
        for &b in &bytes[data_start..data_start + count] {
            interleaved.push(b as f64 / maxval as f64);
        }
    }
    // interleaved rows -> planar channels
    let mut out = vec![0.0; count];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                out[c * h * w + y * w + x] = interleaved[(y * w + x) * channels + c];
            }
        }
    }
    Tensor::from_vec(vec![channels, h, w], out)
}

/// Tiles a batch `[n, c, h, w]` into one `[c, H, W]` grid image with a
/// one-pixel separator, `ceil(sqrt(n))` columns.
pub fn tile_grid(batch: &Tensor) -> Result<Tensor> {
    if batch.ndim() != 4 {
        return Err(Error::InvalidArg(format!(
            "tile_grid expects [n,c,h,w], got {:?}",
            batch.shape()
        )));
    }
    let (n, c, h, w) = (
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    );
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let gh = rows * h + rows.saturating_sub(1);
    let gw = cols * w + cols.saturating_sub(1);
    let mut out = vec![0.0; c * gh * gw];
    for i in 0..n {
        let (r, col) = (i / cols, i % cols);
        let (oy, ox) = (r * (h + 1), col * (w + 1));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[ch * gh * gw + (oy + y) * gw + ox + x] = batch.at4(i, ch, y, x);
                }
            }
        }
    }
    Tensor::from_vec(vec![c, gh, gw], out)
}

/// Rasterizes 2-D points `[n, 2]` in [0,1]^2 onto a white canvas.
pub fn scatter_plot(points: &Tensor, side: usize) -> Result<Tensor> {
    if points.ndim() != 2 || points.shape()[1] != 2 {
        return Err(Error::InvalidArg(format!(
            "scatter_plot expects [n,2], got {:?}",
            points.shape()
        )));
    }
    let mut out = vec![1.0; 3 * side * side];
    let n = points.shape()[0];
    for i in 0..n {
        let px = points.data()[i * 2].clamp(0.0, 1.0);
        let py = points.data()[i * 2 + 1].clamp(0.0, 1.0);
        let x = ((px * (side - 1) as f64).round()) as usize;
        // put the origin at the bottom-left
        let y = side - 1 - ((py * (side - 1) as f64).round()) as usize;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < side && (xx as usize) < side {
                    let idx = yy as usize * side + xx as usize;
                    out[idx] = 0.1; // red channel dark
                    out[side * side + idx] = 0.1;
                    // blue stays high: dots read as blue on white
                }
            }
        }
    }
    Tensor::from_vec(vec![3, side, side], out)
}
