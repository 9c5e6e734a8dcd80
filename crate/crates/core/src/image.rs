//! RGB raster images with binary PPM (P6) serialization.
//!
//! Pixels are stored channel-major (`[3, H, W]`, matching tensor layout) as
//! `f32` in [0, 1]. Out-of-bounds access for patch extraction uses mirror
//! reflection about the image edges (edge-inclusive fold: index −1 maps to 0,
//! −2 to 1, `n` to `n−1`, …), so border patches contain no constant fill.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    // Channel-major: data[(c·height + y)·width + x].
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    fn offset(&self, c: usize, x: usize, y: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        [
            self.data[self.offset(0, x, y)],
            self.data[self.offset(1, x, y)],
            self.data[self.offset(2, x, y)],
        ]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            let off = self.offset(c, x, y);
            self.data[off] = v;
        }
    }

    /// Folds an arbitrary coordinate into [0, n) by mirror reflection.
    #[inline]
    pub fn mirror_index(mut i: i64, n: usize) -> usize {
        let n = n as i64;
        debug_assert!(n > 0);
        // Each loop iteration shrinks |i|'s excursion; for coordinates within
        // a few image-widths it runs at most twice.
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    }

    /// Pixel access with mirror-reflected out-of-bounds coordinates.
    #[inline]
    pub fn get_mirrored(&self, x: i64, y: i64) -> [f32; 3] {
        let x = Self::mirror_index(x, self.width);
        let y = Self::mirror_index(y, self.height);
        self.get(x, y)
    }

    /// View as a `[3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[3, self.height, self.width], self.data.clone()).unwrap()
    }

    /// Builds an image from a `[3, H, W]` tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!(
                "image tensor must be [3, H, W], got {shape:?}"
            )));
        }
        Ok(RgbImage {
            width: shape[2],
            height: shape[1],
            data: t.as_slice().to_vec(),
        })
    }

    /// Writes binary PPM (P6, maxval 255). Values are clamped to [0, 1] and
    /// rounded to 8 bits.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut row = vec![0u8; 3 * self.width];
        for y in 0..self.height {
            for x in 0..self.width {
                let rgb = self.get(x, y);
                for c in 0..3 {
                    row[3 * x + c] = (rgb[c].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
            w.write_all(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads binary PPM (P6, maxval 255).
    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = PpmHeaderReader::new(&mut r, path);
        let magic = header.token()?;
        if magic != "P6" {
            return Err(Error::Data(format!(
                "{}: not a P6 PPM (magic '{magic}')",
                path.display()
            )));
        }
        let width = header.number()?;
        let height = header.number()?;
        let maxval = header.number()?;
        if maxval != 255 {
            return Err(Error::Data(format!(
                "{}: unsupported maxval {maxval}, expected 255",
                path.display()
            )));
        }
        if width == 0 || height == 0 || width * height > (1 << 30) {
            return Err(Error::Data(format!(
                "{}: implausible dimensions {width}x{height}",
                path.display()
            )));
        }
        // The header's final number is followed by exactly one whitespace
        // byte, already consumed by the tokenizer.
        let mut raw = vec![0u8; 3 * width * height];
        r.read_exact(&mut raw).map_err(|e| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::Data(format!("{}: truncated pixel data", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        let mut img = RgbImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let base = 3 * (y * width + x);
                img.set(
                    x,
                    y,
                    [
                        raw[base] as f32 / 255.0,
                        raw[base + 1] as f32 / 255.0,
                        raw[base + 2] as f32 / 255.0,
                    ],
                );
            }
        }
        Ok(img)
    }
}

/// Tokenizer for the PPM text header: skips whitespace and `#` comments,
/// stops after the single whitespace byte that terminates the last token.
struct PpmHeaderReader<'a, R: Read> {
    inner: &'a mut R,
    path: &'a Path,
}

impl<'a, R: Read> PpmHeaderReader<'a, R> {
    fn new(inner: &'a mut R, path: &'a Path) -> Self {
        PpmHeaderReader { inner, path }
    }

    fn byte(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.inner.read_exact(&mut b).map_err(|e| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::Data(format!("{}: truncated PPM header", self.path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Ok(b[0])
    }

    fn token(&mut self) -> Result<String> {
        let mut b = self.byte()?;
        loop {
            if b == b'#' {
                while b != b'\n' {
                    b = self.byte()?;
                }
            } else if b.is_ascii_whitespace() {
                b = self.byte()?;
            } else {
                break;
            }
        }
        let mut tok = Vec::new();
        while !b.is_ascii_whitespace() {
            tok.push(b);
            b = self.byte()?;
        }
        String::from_utf8(tok)
            .map_err(|_| Error::Data(format!("{}: bad PPM header", self.path.display())))
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        tok.parse().map_err(|_| {
            Error::Data(format!(
                "{}: expected number in PPM header, got '{tok}'",
                self.path.display()
            ))
        })
    }
}
