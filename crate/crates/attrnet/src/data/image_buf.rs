//! 8-bit RGB image buffer with the raster operations the pipeline needs:
//! PPM (P6) and PNG round trips, cropping, horizontal flip, and bilinear
//! resampling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;

/// Interleaved RGB, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuf {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl ImageBuf {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Parameter("image must have positive size".into()));
        }
        if data.len() != (width * height * 3) as usize {
            return Err(Error::Parameter(format!(
                "image data length {} does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(ImageBuf {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity((width * height * 3) as usize);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        ImageBuf {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy out the half-open window [x0, x1) x [y0, y1).
    pub fn crop(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> Result<ImageBuf> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
            return Err(Error::Parameter(format!(
                "crop window ({x0},{y0},{x1},{y1}) invalid for {}x{} image",
                self.width, self.height
            )));
        }
        let (w, h) = (x1 - x0, y1 - y0);
        let mut data = Vec::with_capacity((w * h * 3) as usize);
        for y in y0..y1 {
            let row = ((y * self.width + x0) * 3) as usize;
            data.extend_from_slice(&self.data[row..row + (w * 3) as usize]);
        }
        ImageBuf::new(w, h, data)
    }

    /// Mirror left-right. Applying it twice is the identity, bit-exactly.
    pub fn flip_horizontal(&self) -> ImageBuf {
        let mut data = vec![0u8; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let src = ((y * self.width + x) * 3) as usize;
                let dst = ((y * self.width + (self.width - 1 - x)) * 3) as usize;
                data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        ImageBuf {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Bilinear resample with half-pixel-centre source coordinates.
    /// Constant images stay constant exactly.
    pub fn resize_bilinear(&self, new_w: u32, new_h: u32) -> Result<ImageBuf> {
        if new_w == 0 || new_h == 0 {
            return Err(Error::Parameter("resize target must be positive".into()));
        }
        if new_w == self.width && new_h == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / new_w as f64;
        let sy = self.height as f64 / new_h as f64;
        let mut data = Vec::with_capacity((new_w * new_h * 3) as usize);
        for dy in 0..new_h {
            let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as u32;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for dx in 0..new_w {
                let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as u32;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let p00 = self.get(x0, y0);
                let p10 = self.get(x1, y0);
                let p01 = self.get(x0, y1);
                let p11 = self.get(x1, y1);
                for c in 0..3 {
                    let top = p00[c] as f64 * (1.0 - wx) + p10[c] as f64 * wx;
                    let bot = p01[c] as f64 * (1.0 - wx) + p11[c] as f64 * wx;
                    let v = top * (1.0 - wy) + bot * wy;
                    data.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
                }
            }
        }
        ImageBuf::new(new_w, new_h, data)
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8], path: &Path) -> Result<ImageBuf> {
        let mut pos = 0usize;
        let mut token = || -> Result<Vec<u8>> {
            // skip whitespace and '#' comments
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::corrupt(path, "truncated PPM header"));
            }
            Ok(bytes[start..pos].to_vec())
        };

        if token()? != b"P6" {
            return Err(Error::corrupt(path, "not a binary P6 PPM"));
        }
        let parse = |t: Vec<u8>| -> Result<u32> {
            std::str::from_utf8(&t)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::corrupt(path, "bad PPM header number"))
        };
        let width = parse(token()?)?;
        let height = parse(token()?)?;
        let maxval = parse(token()?)?;
        if maxval != 255 {
            return Err(Error::corrupt(path, "PPM maxval must be 255"));
        }
        // exactly one whitespace byte separates header from pixel data
        pos += 1;
        let need = (width * height * 3) as usize;
        if pos + need > bytes.len() {
            return Err(Error::corrupt(path, "truncated PPM pixel data"));
        }
        ImageBuf::new(width, height, bytes[pos..pos + need].to_vec())
    }

    /// Load a PNG or binary PPM by extension.
    pub fn load(path: &Path) -> Result<ImageBuf> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "ppm" => {
                let bytes = fsutil::read_bytes(path)?;
                ImageBuf::from_ppm_bytes(&bytes, path)
            }
            "png" => {
                let img = image::open(path)
                    .map_err(|e| Error::Image {
                        path: path.to_path_buf(),
                        reason: e.to_string(),
                    })?
                    .into_rgb8();
                ImageBuf::new(img.width(), img.height(), img.into_raw())
            }
            other => Err(Error::Image {
                path: path.to_path_buf(),
                reason: format!("unsupported image extension {other:?} (use png or ppm)"),
            }),
        }
    }

    /// Save as PNG or binary PPM by extension (atomic write).
    pub fn save(&self, path: &Path) -> Result<()> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "ppm" => fsutil::atomic_write(path, &self.to_ppm_bytes()),
            "png" => {
                let img: image::RgbImage =
                    image::ImageBuffer::from_raw(self.width, self.height, self.data.clone())
                        .expect("buffer length matches dimensions");
                let mut bytes = Vec::new();
                img.write_to(
                    &mut std::io::Cursor::new(&mut bytes),
                    image::ImageFormat::Png,
                )
                .map_err(|e| Error::Image {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?;
                fsutil::atomic_write(path, &bytes)
            }
            other => Err(Error::Image {
                path: path.to_path_buf(),
                reason: format!("unsupported image extension {other:?} (use png or ppm)"),
            }),
        }
    }
}
