//! Planar `[C, H, W]` images in `[0, 1]` and binary PGM/PPM I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Planar, channel-major.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Image> {
        if data.len() != channels * height * width || channels == 0 || height == 0 || width == 0 {
            return Err(Error::Contract(format!(
                "image data of length {} does not fit {channels}×{height}×{width}",
                data.len()
            )));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Image {
        Image { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let &[c, h, w] = t.shape() else {
            return Err(Error::Contract(format!("expected [C,H,W] tensor, got {:?}", t.shape())));
        };
        Image::new(c, h, w, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &[self.channels, self.height, self.width])
            .expect("image extents validated")
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Rectangular crop `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::Contract(format!(
                "crop {h}×{w} at ({y0},{x0}) outside {}×{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Image::new(self.channels, h, w, data)
    }

    /// Writes binary PGM (1 channel) or PPM (3 channels), 8 bits per sample.
    pub fn write_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(Error::Format(format!("PNM output needs 1 or 3 channels, got {c}"))),
        };
        let mut out = Vec::with_capacity(32 + self.data.len());
        write!(out, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        let plane = self.height * self.width;
        for i in 0..plane {
            for c in 0..self.channels {
                let v = self.data[c * plane + i].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
        }
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(bad(&format!("unsupported magic {other}"))),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("only 8-bit PNM is supported"));
        }
        let plane = width * height;
        let body = bytes.get(pos..pos + plane * channels).ok_or_else(|| bad("truncated pixel data"))?;
        let mut data = vec![0.0; plane * channels];
        for i in 0..plane {
            for c in 0..channels {
                data[c * plane + i] = body[i * channels + c] as f64 / maxval as f64;
            }
        }
        Image::new(channels, height, width, data)
    }
}

/// Reads `%06d.ppm` / `%06d.pgm` frames from `dir` in index order, stopping
/// at the first missing index.
pub fn read_frame_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut frames = Vec::new();
    loop {
        let i = frames.len();
        let ppm = dir.join(format!("{i:06}.ppm"));
        let pgm = dir.join(format!("{i:06}.pgm"));
        let path = if ppm.exists() {
            ppm
        } else if pgm.exists() {
            pgm
        } else {
            break;
        };
        frames.push(Image::read_pnm(path)?);
    }
    if frames.is_empty() {
        return Err(Error::Format(format!("no %06d.ppm/pgm frames in {}", dir.display())));
    }
    Ok(frames)
}

pub fn write_frame_dir(dir: impl AsRef<Path>, frames: &[Image]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        let ext = if f.channels == 1 { "pgm" } else { "ppm" };
        f.write_pnm(dir.join(format!("{i:06}.{ext}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_quantises_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i % 17) as f64 / 16.0).collect();
        let img = Image::new(3, 4, 5, data).unwrap();
        let p = dir.path().join("x.ppm");
        img.write_pnm(&p).unwrap();
        let back = Image::read_pnm(&p).unwrap();
        assert_eq!(back.shape(), [3, 4, 5]);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn frame_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Image> = (0..3).map(|i| Image::filled(1, 2, 2, i as f64 / 4.0)).collect();
        write_frame_dir(dir.path(), &frames).unwrap();
        assert_eq!(read_frame_dir(dir.path()).unwrap().len(), 3);
        assert!(read_frame_dir(dir.path().join("missing")).is_err());
    }

    #[test]
    fn crop_bounds() {
        let img = Image::filled(3, 8, 8, 0.5);
        assert_eq!(img.crop(4, 2, 4, 4).unwrap().shape(), [3, 4, 4]);
        assert!(img.crop(6, 0, 4, 4).is_err());
    }
}
