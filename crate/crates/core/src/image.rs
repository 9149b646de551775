//! Minimal in-memory image containers and 8-bit PNG I/O.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// 8-bit interleaved pixels, one or three channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl PixelBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::param(
                "channels",
                format!("expected 1 or 3 channels, got {channels}"),
            ));
        }
        if width == 0 || height == 0 {
            return Err(Error::param("dimensions", "image must be non-empty"));
        }
        if data.len() != width * height * channels {
            return Err(Error::param(
                "data",
                format!(
                    "{} bytes for a {width}x{height}x{channels} image",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }
}

/// Row-major single-channel real image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::param(
                "data",
                format!("{} values for a {width}x{height} image", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(x, self.height - 1 - y))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        let var = self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64;
        var.sqrt()
    }

    /// Quantizes unit-range values to 8-bit grayscale.
    pub fn to_pixels(&self) -> PixelBuffer {
        let data = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        PixelBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }
}

/// Luma conversion to the unit range: `(0.299 R + 0.587 G + 0.114 B) / 255`.
pub fn to_grayscale_unit(image: &PixelBuffer) -> Result<GrayImage> {
    let mut out = Vec::new();
    to_grayscale_into(image, &mut out)?;
    GrayImage::new(image.width, image.height, out)
}

pub(crate) fn to_grayscale_into(image: &PixelBuffer, out: &mut Vec<f64>) -> Result<()> {
    out.clear();
    match image.channels {
        1 => out.extend(image.data.iter().map(|&v| luma_gray(v))),
        3 => out.extend(image.data.chunks_exact(3).map(|p| luma_rgb(p[0], p[1], p[2]))),
        c => {
            return Err(Error::param(
                "channels",
                format!("expected 1 or 3 channels, got {c}"),
            ))
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn luma_gray(v: u8) -> f64 {
    v as f64 / 255.0
}

#[inline]
pub(crate) fn luma_rgb(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
}

/// Row-at-a-time PNG decoder yielding 1- or 3-channel 8-bit rows. Alpha is
/// dropped, palettes and low bit depths are expanded, 16-bit samples are
/// truncated to 8 bits.
pub struct PngRowReader {
    reader: png::Reader<BufReader<File>>,
    path: PathBuf,
    width: usize,
    height: usize,
    color: png::ColorType,
    rows_read: usize,
}

impl PngRowReader {
    pub fn open(path: &Path) -> Result<Self> {
        let err = |e: png::DecodingError| image_error(path, e);
        let file = File::open(path).map_err(|e| image_error(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::normalize_to_color8());
        let reader = decoder.read_info().map_err(err)?;
        if reader.info().interlaced {
            return Err(image_error(path, "interlaced PNG is not supported"));
        }
        let (color, _) = reader.output_color_type();
        let info = reader.info();
        Ok(Self {
            path: path.to_path_buf(),
            width: info.width as usize,
            height: info.height as usize,
            color,
            reader,
            rows_read: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        match self.color {
            png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
            _ => 3,
        }
    }

    /// Appends the next row, `width * channels()` bytes, to `out`.
    pub fn read_row(&mut self, out: &mut Vec<u8>) -> Result<()> {
        let color = self.color;
        let row = self
            .reader
            .next_row()
            .map_err(|e| image_error(&self.path, e))?
            .ok_or_else(|| {
                image_error(&self.path, format!("image ends after {} rows", self.rows_read))
            })?;
        let data = row.data();
        match color {
            png::ColorType::Grayscale | png::ColorType::Rgb => out.extend_from_slice(data),
            png::ColorType::GrayscaleAlpha => out.extend(data.chunks_exact(2).map(|p| p[0])),
            png::ColorType::Rgba => {
                out.extend(data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]))
            }
            png::ColorType::Indexed => {
                return Err(image_error(&self.path, "palette was not expanded"));
            }
        }
        self.rows_read += 1;
        Ok(())
    }
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn read_png(path: &Path) -> Result<PixelBuffer> {
    let mut rows = PngRowReader::open(path)?;
    let (w, h, c) = (rows.width(), rows.height(), rows.channels());
    let mut data = Vec::with_capacity(w * h * c);
    for _ in 0..h {
        rows.read_row(&mut data)?;
    }
    PixelBuffer::new(w, h, c, data)
}

pub fn encode_png(image: &PixelBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(if image.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let to_err = |e: png::EncodingError| Error::Invariant(format!("PNG encoding failed: {e}"));
        let mut writer = enc.write_header().map_err(to_err)?;
        writer.write_image_data(&image.data).map_err(to_err)?;
        writer.finish().map_err(to_err)?;
    }
    Ok(out)
}

/// Writes an 8-bit PNG through a temporary file.
pub fn write_png(path: &Path, image: &PixelBuffer) -> Result<()> {
    crate::write_atomic(path, &encode_png(image)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(p: [u8; 3]) -> f64 {
        to_grayscale_unit(&PixelBuffer::new(1, 1, 3, p.to_vec()).unwrap()).unwrap().data[0]
    }

    #[test]
    fn luma_spot_values() {
        assert_eq!(rgb([255, 255, 255]), 1.0);
        assert_eq!(rgb([0, 0, 0]), 0.0);
        assert!((rgb([255, 0, 0]) - 0.299).abs() < 1e-15);
    }

    #[test]
    fn single_channel_passes_through() {
        let g = to_grayscale_unit(&PixelBuffer::new(2, 1, 1, vec![0, 51]).unwrap()).unwrap();
        assert_eq!(g.data, vec![0.0, 0.2]);
    }

    #[test]
    fn rejects_other_channel_counts() {
        assert!(PixelBuffer::new(1, 1, 4, vec![0; 4]).is_err());
        let bad = PixelBuffer {
            width: 1,
            height: 1,
            channels: 2,
            data: vec![0, 0],
        };
        assert!(to_grayscale_unit(&bad).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for channels in [1, 3] {
            let data = (0..7 * 5 * channels).map(|i| (i * 37 % 256) as u8).collect();
            let img = PixelBuffer::new(7, 5, channels, data).unwrap();
            let path = dir.path().join(format!("c{channels}.png"));
            write_png(&path, &img).unwrap();
            assert_eq!(read_png(&path).unwrap(), img);
        }
    }

    #[test]
    fn png_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.png");
        std::fs::write(&path, b"not a png").unwrap();
        match read_png(&path) {
            Err(Error::Image { path: p, .. }) => assert_eq!(p, path),
            other => panic!("unexpected {other:?}"),
        }
    }
}
