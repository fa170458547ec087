//! 8-bit grayscale images, binary masks, and metric depth maps, with binary
//! PGM I/O. Pixel (x, y) addresses column x, row y; row-major storage.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions {0}x{1} do not match buffer length {2}")]
    SizeMismatch(usize, usize, usize),
    #[error("pixel ({0}, {1}) outside {2}x{3} image")]
    OutOfBounds(usize, usize, usize, usize),
    #[error("not a binary PGM: {0}")]
    BadPgm(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Single-channel 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, data: vec![0; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::SizeMismatch(width, height, data.len()));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = value;
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    /// Bilinear sample at a real-valued position. The position must satisfy
    /// 0 <= x <= width-1 and 0 <= y <= height-1; returns None otherwise.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if !(0.0..=(self.width - 1) as f64).contains(&x)
            || !(0.0..=(self.height - 1) as f64).contains(&y)
        {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p00 = self.get(x0, y0) as f64;
        let p10 = self.get(x1, y0) as f64;
        let p01 = self.get(x0, y1) as f64;
        let p11 = self.get(x1, y1) as f64;
        Some(p00 * (1.0 - fx) * (1.0 - fy) + p10 * fx * (1.0 - fy) + p01 * (1.0 - fx) * fy + p11 * fx * fy)
    }

    /// Pixel intensities scaled to [0, 1], row-major.
    pub fn to_normalized(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), ImageError> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self, ImageError> {
        let bytes = fs::read(path)?;
        let (width, height, maxval, payload) = parse_pgm_header(&bytes)?;
        if maxval != 255 {
            return Err(ImageError::BadPgm(format!("expected maxval 255, got {maxval}")));
        }
        if payload.len() < width * height {
            return Err(ImageError::BadPgm("truncated pixel data".into()));
        }
        GrayImage::from_vec(width, height, payload[..width * height].to_vec())
    }
}

/// Per-pixel binary mask (e.g. the dynamic-region mask or a warp validity mask).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl RegionMask {
    pub fn new(width: usize, height: usize) -> Self {
        RegionMask { width, height, data: vec![false; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), ImageError> {
        let img = GrayImage::from_vec(
            self.width,
            self.height,
            self.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )?;
        img.write_pgm(path)
    }

    pub fn read_pgm(path: &Path) -> Result<Self, ImageError> {
        let img = GrayImage::read_pgm(path)?;
        Ok(RegionMask {
            width: img.width(),
            height: img.height(),
            data: img.as_bytes().iter().map(|&v| v > 127).collect(),
        })
    }
}

/// Per-pixel depth in meters; 0 marks "no surface".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        DepthMap { width, height, data: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// 16-bit binary PGM in millimeters, most significant byte first.
    pub fn write_pgm_millimeters(&self, path: &Path) -> Result<(), ImageError> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        write!(f, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.data.len() * 2);
        for &d in &self.data {
            let mm = (d * 1000.0).round().clamp(0.0, 65535.0) as u16;
            buf.extend_from_slice(&mm.to_be_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read_pgm_millimeters(path: &Path) -> Result<Self, ImageError> {
        let bytes = fs::read(path)?;
        let (width, height, maxval, payload) = parse_pgm_header(&bytes)?;
        if maxval != 65535 {
            return Err(ImageError::BadPgm(format!("expected maxval 65535, got {maxval}")));
        }
        if payload.len() < width * height * 2 {
            return Err(ImageError::BadPgm("truncated pixel data".into()));
        }
        let mut data = Vec::with_capacity(width * height);
        for px in payload[..width * height * 2].chunks_exact(2) {
            let mm = u16::from_be_bytes([px[0], px[1]]);
            data.push(mm as f64 / 1000.0);
        }
        Ok(DepthMap { width, height, data })
    }
}

fn parse_pgm_header(bytes: &[u8]) -> Result<(usize, usize, u32, &[u8]), ImageError> {
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String, ImageError> {
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
            return Err(ImageError::BadPgm("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(bytes)?;
    if magic != "P5" {
        return Err(ImageError::BadPgm(format!("bad magic {magic:?}")));
    }
    let width: usize =
        token(bytes)?.parse().map_err(|_| ImageError::BadPgm("bad width".into()))?;
    let height: usize =
        token(bytes)?.parse().map_err(|_| ImageError::BadPgm("bad height".into()))?;
    let maxval: u32 =
        token(bytes)?.parse().map_err(|_| ImageError::BadPgm("bad maxval".into()))?;
    // exactly one whitespace byte separates the header from the payload
    let payload = &bytes[pos + 1..];
    Ok((width, height, maxval, payload))
}

/// Reads any raster written by this module, returning the raw payload width.
pub fn read_pgm_dimensions(path: &Path) -> Result<(usize, usize), ImageError> {
    let bytes = fs::read(path)?;
    let (w, h, _, _) = parse_pgm_header(&bytes)?;
    Ok((w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_u8() {
        let dir = std::env::temp_dir().join("featrack_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.pgm");
        let img =
            GrayImage::from_vec(4, 3, (0u8..12).map(|v| v * 20).collect::<Vec<_>>()).unwrap();
        img.write_pgm(&path).unwrap();
        let back = GrayImage::read_pgm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn pgm_round_trip_depth() {
        let dir = std::env::temp_dir().join("featrack_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("depth.pgm");
        let mut d = DepthMap::new(3, 2);
        d.set(0, 0, 1.234);
        d.set(2, 1, 7.5);
        d.write_pgm_millimeters(&path).unwrap();
        let back = DepthMap::read_pgm_millimeters(&path).unwrap();
        assert!((back.get(0, 0) - 1.234).abs() < 1e-9);
        assert!((back.get(2, 1) - 7.5).abs() < 1e-9);
        assert_eq!(back.get(1, 1), 0.0);
    }

    #[test]
    fn bilinear_sampling() {
        let img = GrayImage::from_vec(2, 2, vec![0, 100, 100, 200]).unwrap();
        assert_eq!(img.sample_bilinear(0.0, 0.0), Some(0.0));
        assert_eq!(img.sample_bilinear(0.5, 0.5), Some(100.0));
        assert_eq!(img.sample_bilinear(1.0, 1.0), Some(200.0));
        assert_eq!(img.sample_bilinear(-0.1, 0.0), None);
        assert_eq!(img.sample_bilinear(0.0, 1.01), None);
    }
}
