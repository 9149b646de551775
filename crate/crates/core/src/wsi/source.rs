//! Row-band readers for slide images.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use tiff::decoder::{ChunkType, Decoder, DecodingResult};
use tiff::tags::{PlanarConfiguration, Tag};
use tiff::ColorType;

use crate::error::{Error, Result};
use crate::image::{luma_gray, luma_rgb, PixelBuffer, PngRowReader};

/// A slide readable as horizontal bands of unit-range luma.
pub trait TileSource {
    fn width(&self) -> usize;
    fn height(&self) -> usize;

    /// Replaces the contents of `band` with rows `y0..y0 + rows`, row-major
    /// and `width()` samples wide. Callers request bands in increasing,
    /// non-overlapping order.
    fn read_band(&mut self, y0: usize, rows: usize, band: &mut Vec<f32>) -> Result<()>;
}

fn check_band(src: &dyn TileSource, y0: usize, rows: usize, next: usize) -> Result<()> {
    if y0 < next {
        return Err(Error::param("band", format!("row {y0} was already consumed")));
    }
    if y0 + rows > src.height() {
        return Err(Error::param(
            "band",
            format!("rows {y0}..{} exceed image height {}", y0 + rows, src.height()),
        ));
    }
    Ok(())
}

/// Streams an 8-bit PNG one row at a time.
pub struct PngSource {
    rows: PngRowReader,
    next_row: usize,
    buf: Vec<u8>,
}

impl PngSource {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self {
            rows: PngRowReader::open(path)?,
            next_row: 0,
            buf: Vec::new(),
        })
    }
}

impl TileSource for PngSource {
    fn width(&self) -> usize {
        self.rows.width()
    }

    fn height(&self) -> usize {
        self.rows.height()
    }

    fn read_band(&mut self, y0: usize, rows: usize, band: &mut Vec<f32>) -> Result<()> {
        check_band(self, y0, rows, self.next_row)?;
        band.clear();
        let rgb = self.rows.channels() == 3;
        while self.next_row < y0 + rows {
            self.buf.clear();
            self.rows.read_row(&mut self.buf)?;
            if self.next_row >= y0 {
                if rgb {
                    band.extend(
                        self.buf
                            .chunks_exact(3)
                            .map(|p| luma_rgb(p[0], p[1], p[2]) as f32),
                    );
                } else {
                    band.extend(self.buf.iter().map(|&v| luma_gray(v) as f32));
                }
            }
            self.next_row += 1;
        }
        Ok(())
    }
}

/// Reads a stripped or tiled TIFF one chunk row at a time. Only the first
/// image of the file is used.
pub struct TiffSource {
    decoder: Decoder<BufReader<File>>,
    path: PathBuf,
    width: usize,
    height: usize,
    chunk: (usize, usize),
    tiled: bool,
    color: ColorType,
    cached_row: Option<usize>,
    cache: Vec<f32>,
    next_row: usize,
}

impl TiffSource {
    pub fn open(path: &Path) -> Result<Self> {
        let err = |e: &dyn std::fmt::Display| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let file = File::open(path).map_err(|e| err(&e))?;
        let mut decoder = Decoder::new(BufReader::new(file)).map_err(|e| err(&e))?;
        let (w, h) = decoder.dimensions().map_err(|e| err(&e))?;
        let color = decoder.colortype().map_err(|e| err(&e))?;
        match color {
            ColorType::Gray(8 | 16)
            | ColorType::GrayA(8 | 16)
            | ColorType::RGB(8 | 16)
            | ColorType::RGBA(8 | 16) => {}
            other => return Err(err(&format!("unsupported color type {other:?}"))),
        }
        let planar = decoder
            .find_tag_unsigned::<u16>(Tag::PlanarConfiguration)
            .map_err(|e| err(&e))?;
        if planar == Some(PlanarConfiguration::Planar.to_u16()) {
            return Err(err(&"planar TIFF is not supported"));
        }
        let (cw, ch) = decoder.chunk_dimensions();
        Ok(Self {
            tiled: decoder.get_chunk_type() == ChunkType::Tile,
            decoder,
            path: path.to_path_buf(),
            width: w as usize,
            height: h as usize,
            chunk: (cw as usize, ch as usize),
            color,
            cached_row: None,
            cache: Vec::new(),
            next_row: 0,
        })
    }

    fn error(&self, e: impl std::fmt::Display) -> Error {
        Error::Image {
            path: self.path.clone(),
            message: e.to_string(),
        }
    }

    fn load_chunk_row(&mut self, chunk_row: usize) -> Result<()> {
        let (cw, ch) = self.chunk;
        let rows = ch.min(self.height - chunk_row * ch);
        self.cache.clear();
        self.cache.resize(self.width * rows, 0.0);
        let across = if self.tiled { self.width.div_ceil(cw) } else { 1 };
        for tx in 0..across {
            let index = (chunk_row * across + tx) as u32;
            let (dw, dh) = self.decoder.chunk_data_dimensions(index);
            let (dw, dh) = (dw as usize, dh as usize);
            let data = self.decoder.read_chunk(index).map_err(|e| self.error(e))?;
            let luma = chunk_luma(&data, self.color).map_err(|e| self.error(e))?;
            if luma.len() < dw * dh || dh < rows {
                return Err(self.error(format!("chunk {index} is truncated")));
            }
            let x0 = tx * cw;
            for y in 0..rows {
                self.cache[y * self.width + x0..y * self.width + x0 + dw]
                    .copy_from_slice(&luma[y * dw..(y + 1) * dw]);
            }
        }
        self.cached_row = Some(chunk_row);
        Ok(())
    }
}

fn chunk_luma(data: &DecodingResult, color: ColorType) -> std::result::Result<Vec<f32>, String> {
    let (samples, rgb) = match color {
        ColorType::Gray(_) => (1, false),
        ColorType::GrayA(_) => (2, false),
        ColorType::RGB(_) => (3, true),
        ColorType::RGBA(_) => (4, true),
        other => return Err(format!("unsupported color type {other:?}")),
    };
    let convert = |px: &[f64], scale: f64| -> f32 {
        let v = if rgb {
            0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
        } else {
            px[0]
        };
        (v / scale) as f32
    };
    Ok(match data {
        DecodingResult::U8(v) => v
            .chunks_exact(samples)
            .map(|p| {
                if rgb {
                    luma_rgb(p[0], p[1], p[2]) as f32
                } else {
                    luma_gray(p[0]) as f32
                }
            })
            .collect(),
        DecodingResult::U16(v) => v
            .chunks_exact(samples)
            .map(|p| {
                let mut px = [0.0; 4];
                for (d, &s) in px.iter_mut().zip(p) {
                    *d = s as f64;
                }
                convert(&px, 65535.0)
            })
            .collect(),
        _ => return Err("unsupported sample format".into()),
    })
}

impl TileSource for TiffSource {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn read_band(&mut self, y0: usize, rows: usize, band: &mut Vec<f32>) -> Result<()> {
        check_band(self, y0, rows, self.next_row)?;
        band.clear();
        band.reserve(rows * self.width);
        let ch = self.chunk.1;
        for y in y0..y0 + rows {
            let cr = y / ch;
            if self.cached_row != Some(cr) {
                self.load_chunk_row(cr)?;
            }
            let r = y - cr * ch;
            band.extend_from_slice(&self.cache[r * self.width..(r + 1) * self.width]);
        }
        self.next_row = y0 + rows;
        Ok(())
    }
}

/// Procedural grayscale slide: an elliptical tissue region of multi-octave
/// value noise on a flat background, with sharpness varying smoothly across
/// the slide. Cheap enough to stand in for gigapixel inputs.
#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    next_row: usize,
}

const OCTAVES: usize = 6;
const BACKGROUND: u8 = 246;

impl SyntheticSlide {
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        Self {
            width,
            height,
            seed,
            next_row: 0,
        }
    }

    fn lattice(&self, octave: usize, ix: usize, iy: usize) -> f32 {
        let mut h = self.seed
            ^ (octave as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (ix as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ (iy as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
        (h >> 40) as f32 / (1u64 << 24) as f32 - 0.5
    }

    /// Writes row `y` as 8-bit gray into `out` (`width` bytes). `columns`
    /// holds the per-column focus term from [`Self::column_terms`].
    fn render_row(
        &self,
        y: usize,
        columns: &[f32],
        lattice_rows: &mut [Vec<f32>; OCTAVES],
        out: &mut [u8],
    ) {
        for (o, vals) in lattice_rows.iter_mut().enumerate() {
            let shift = o + 1;
            let cell = 1usize << shift;
            let gy = y >> shift;
            let t = smooth((y & (cell - 1)) as f32 / cell as f32);
            vals.clear();
            vals.extend((0..(self.width >> shift) + 2).map(|ix| {
                let a = self.lattice(o, ix, gy);
                a + (self.lattice(o, ix, gy + 1) - a) * t
            }));
        }
        let cy = (y as f32 + 0.5) / self.height as f32 - 0.5;
        let row_focus = (6.0 * cy).cos();
        let inv_w = 1.0 / self.width as f32;
        for (x, px) in out.iter_mut().enumerate() {
            let cx = (x as f32 + 0.5) * inv_w - 0.5;
            if (cx / 0.42).powi(2) + (cy / 0.40).powi(2) > 1.0 {
                *px = BACKGROUND;
                continue;
            }
            // Defocus in [0, 1], smooth over the slide.
            let d = 0.5 + 0.5 * columns[x] * row_focus;
            let fade = (-0.7 * d).exp();
            let step = 0.8 / fade;
            let mut weight = 0.55 * fade.powi(OCTAVES as i32 - 1);
            let mut v = 0.0;
            for (o, vals) in lattice_rows.iter().enumerate() {
                let shift = o + 1;
                let ix = x >> shift;
                let t = smooth((x & ((1 << shift) - 1)) as f32 / (1 << shift) as f32);
                v += weight * (vals[ix] + (vals[ix + 1] - vals[ix]) * t);
                weight *= step;
            }
            *px = ((0.55 + 0.6 * v).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }

    fn column_terms(&self) -> Vec<f32> {
        let phase = (self.seed % 628) as f32 / 100.0;
        let inv_w = 1.0 / self.width as f32;
        (0..self.width)
            .map(|x| (8.0 * ((x as f32 + 0.5) * inv_w - 0.5) + phase).sin())
            .collect()
    }

    fn scratch(&self) -> [Vec<f32>; OCTAVES] {
        std::array::from_fn(|_| Vec::new())
    }

    /// Renders a rectangle as a single-channel pixel buffer.
    pub fn region(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<PixelBuffer> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::param("region", "outside the slide"));
        }
        let mut lattice = self.scratch();
        let columns = self.column_terms();
        let mut row = vec![0u8; self.width];
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            self.render_row(y, &columns, &mut lattice, &mut row);
            data.extend_from_slice(&row[x0..x0 + width]);
        }
        PixelBuffer::new(width, height, 1, data)
    }
}

#[inline]
fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

impl TileSource for SyntheticSlide {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn read_band(&mut self, y0: usize, rows: usize, band: &mut Vec<f32>) -> Result<()> {
        check_band(self, y0, rows, self.next_row)?;
        band.clear();
        band.reserve(rows * self.width);
        let mut lattice = self.scratch();
        let columns = self.column_terms();
        let mut row = vec![0u8; self.width];
        for y in y0..y0 + rows {
            self.render_row(y, &columns, &mut lattice, &mut row);
            band.extend(row.iter().map(|&v| luma_gray(v) as f32));
        }
        self.next_row = y0 + rows;
        Ok(())
    }
}

/// An in-memory image as a source, mainly for tests and small inputs.
pub struct MemorySource {
    image: PixelBuffer,
    next_row: usize,
}

impl MemorySource {
    pub fn new(image: PixelBuffer) -> Self {
        Self { image, next_row: 0 }
    }
}

impl TileSource for MemorySource {
    fn width(&self) -> usize {
        self.image.width
    }

    fn height(&self) -> usize {
        self.image.height
    }

    fn read_band(&mut self, y0: usize, rows: usize, band: &mut Vec<f32>) -> Result<()> {
        check_band(self, y0, rows, self.next_row)?;
        let (w, c) = (self.image.width, self.image.channels);
        let bytes = &self.image.data[y0 * w * c..(y0 + rows) * w * c];
        band.clear();
        if c == 3 {
            band.extend(bytes.chunks_exact(3).map(|p| luma_rgb(p[0], p[1], p[2]) as f32));
        } else {
            band.extend(bytes.iter().map(|&v| luma_gray(v) as f32));
        }
        self.next_row = y0 + rows;
        Ok(())
    }
}

/// Opens a PNG or TIFF by extension.
pub fn open_image(path: &Path) -> Result<Box<dyn TileSource>> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(Box::new(PngSource::open(path)?)),
        "tif" | "tiff" => Ok(Box::new(TiffSource::open(path)?)),
        _ => Err(Error::Image {
            path: path.to_path_buf(),
            message: "expected a .png, .tif or .tiff file".into(),
        }),
    }
}
