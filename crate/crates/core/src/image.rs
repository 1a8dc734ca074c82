//! Grayscale images, Netpbm (PGM/PPM) I/O, and bilinear resampling.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("pixel buffer has {got} bytes, expected {expected} for {width}x{height}")]
    SizeMismatch {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
    #[error("unsupported netpbm magic {0:?} (expected P5 or P6)")]
    UnsupportedMagic(String),
    #[error("malformed netpbm header: {0}")]
    BadHeader(String),
    #[error("netpbm payload truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// An 8-bit grayscale image stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        let expected = width * height;
        if pixels.len() != expected {
            return Err(ImageError::SizeMismatch {
                width,
                height,
                expected,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Converts interleaved 8-bit RGB to gray with luma weights 0.299/0.587/0.114.
    pub fn from_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Self, ImageError> {
        if rgb.len() != width * height * 3 {
            return Err(ImageError::SizeMismatch {
                width,
                height,
                expected: width * height * 3,
                got: rgb.len(),
            });
        }
        let pixels = rgb
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Extends the image to the right and bottom with a constant value.
    pub fn pad(&self, right: usize, bottom: usize, value: u8) -> Self {
        let w = self.width + right;
        let h = self.height + bottom;
        Self::from_fn(w, h, |x, y| {
            if x < self.width && y < self.height {
                self.get(x, y)
            } else {
                value
            }
        })
    }

    /// Fills a rectangle, clipped to the image.
    pub fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, value: u8) {
        for yy in y..(y + h).min(self.height) {
            for xx in x..(x + w).min(self.width) {
                self.set(xx, yy, value);
            }
        }
    }

    /// Draws a one-pixel rectangle outline, clipped to the image.
    pub fn draw_rect(&mut self, x: usize, y: usize, w: usize, h: usize, value: u8) {
        if w == 0 || h == 0 {
            return;
        }
        let x1 = (x + w - 1).min(self.width.saturating_sub(1));
        let y1 = (y + h - 1).min(self.height.saturating_sub(1));
        for xx in x..=x1 {
            self.set(xx, y, value);
            self.set(xx, y1, value);
        }
        for yy in y..=y1 {
            self.set(x, yy, value);
            self.set(x1, yy, value);
        }
    }

    /// Serializes as binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read_file(path: impl AsRef<std::path::Path>) -> Result<Self, ImageError> {
        let bytes = std::fs::read(path)?;
        decode_netpbm(&bytes)
    }

    pub fn write_pgm(&self, path: impl AsRef<std::path::Path>) -> Result<(), ImageError> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let v = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    v.round().clamp(0.0, 255.0) as u8
}

/// Decodes binary PGM (P5) or PPM (P6, converted to gray). 16-bit samples are not supported.
pub fn decode_netpbm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| ImageError::BadHeader("empty".into()))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(ImageError::UnsupportedMagic(other.to_string())),
    };
    let mut field = |name: &str| -> Result<usize, ImageError> {
        let tok = next_token(bytes, &mut pos)
            .ok_or_else(|| ImageError::BadHeader(format!("missing {name}")))?;
        tok.parse::<usize>()
            .map_err(|_| ImageError::BadHeader(format!("bad {name} {tok:?}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::BadHeader(format!("maxval {maxval} not in 1..=255")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * channels;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() < need {
        return Err(ImageError::Truncated {
            need,
            have: data.len(),
        });
    }
    let data = &data[..need];
    let rescale = |v: u8| -> u8 {
        if maxval == 255 {
            v
        } else {
            ((v as f64) * 255.0 / maxval as f64).round().min(255.0) as u8
        }
    };
    if channels == 1 {
        GrayImage::new(width, height, data.iter().map(|&v| rescale(v)).collect())
    } else {
        let rgb: Vec<u8> = data.iter().map(|&v| rescale(v)).collect();
        GrayImage::from_rgb(width, height, &rgb)
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Bilinear resample of a `src_w`×`src_h` f64 grid to `dst_w`×`dst_h`, using
/// pixel-center alignment with edge clamping.
pub fn resize_bilinear(src: &[f64], src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Vec<f64> {
    assert_eq!(src.len(), src_w * src_h);
    assert!(src_w > 0 && src_h > 0);
    let sx = src_w as f64 / dst_w as f64;
    let sy = src_h as f64 / dst_h as f64;
    let mut out = Vec::with_capacity(dst_w * dst_h);
    for dy in 0..dst_h {
        let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let ty = fy - y0 as f64;
        for dx in 0..dst_w {
            let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * src_w + x0] * (1.0 - tx) + src[y0 * src_w + x1] * tx;
            let bot = src[y1 * src_w + x0] * (1.0 - tx) + src[y1 * src_w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}
