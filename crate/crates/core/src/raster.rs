//! RGB image and depth buffers with PNG / PFM persistence.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<[f32; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![rgb; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        self.data[y * self.width + x] = rgb;
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn([f32; 3]) -> [f32; 3]) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Rounds every channel to the nearest of 256 levels.
    pub fn quantized(&self) -> Image {
        self.map(|p| p.map(|v| to_u8(v) as f32 / 255.0))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|p| p.map(to_u8)).collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("image buffer size".into()))?;
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
            .collect();
        Image::new(w as usize, h as usize, data)
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel distance along the camera ray to the first surface, with a
/// validity mask (false where the ray escaped the scene).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if depth.len() != width * height || valid.len() != depth.len() {
            return Err(Error::Shape(format!("depth buffers do not match {width}x{height}")));
        }
        if let Some(d) = depth.iter().zip(&valid).find(|(d, v)| **v && !(**d > 0.0)) {
            return Err(Error::InputDomain(format!("valid depth {} is not positive", d.0)));
        }
        Ok(Self {
            width,
            height,
            depth,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, d: f32) -> Self {
        Self {
            width,
            height,
            depth: vec![d; width * height],
            valid: vec![true; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.depth[i])
    }

    /// Little-endian single-channel PFM. Invalid pixels are stored as the
    /// negated depth so the mask survives the round trip.
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("Pf\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                let i = y * self.width + x;
                let v = if self.valid[i] { self.depth[i] } else { -self.depth[i] };
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_pfm(path: &Path) -> Result<DepthMap> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut header = Vec::new();
        let mut offset = 0;
        while header.len() < 3 {
            let end = bytes[offset..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format(path, "truncated PFM header"))?;
            header.push(String::from_utf8_lossy(&bytes[offset..offset + end]).trim().to_string());
            offset += end + 1;
        }
        if header[0] != "Pf" {
            return Err(Error::format(
                path,
                format!("expected grayscale PFM, found {:?}", header[0]),
            ));
        }
        let dims: Vec<usize> = header[1]
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::format(path, "bad PFM dimensions")))
            .collect::<Result<_>>()?;
        let [width, height] = dims[..] else {
            return Err(Error::format(path, "bad PFM dimensions"));
        };
        let scale: f32 = header[2].parse().map_err(|_| Error::format(path, "bad PFM scale"))?;
        if scale >= 0.0 {
            return Err(Error::format(path, "only little-endian PFM is supported"));
        }
        let body = &bytes[offset..];
        if body.len() != width * height * 4 {
            return Err(Error::format(path, "PFM payload size mismatch"));
        }
        let mut depth = vec![0.0; width * height];
        let mut valid = vec![false; width * height];
        for (k, chunk) in body.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            let (row, x) = (k / width, k % width);
            let i = (height - 1 - row) * width + x;
            depth[i] = v.abs();
            valid[i] = v > 0.0;
        }
        DepthMap::new(width, height, depth, valid)
    }
}
