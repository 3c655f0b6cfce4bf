//! 8-bit RGB rasters, PNG codec and bilinear resampling.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image, 3 bytes per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageRaster {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for ImageRaster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageRaster({}x{})", self.width, self.height)
    }
}

impl ImageRaster {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Precondition(format!(
                "raster dimensions {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Precondition(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                width * height * 3
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(
            width > 0 && height > 0,
            "raster dimensions must be positive"
        );
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self {
            width,
            height,
            pixels,
        }
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

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies `src` with its top-left corner at (`x`, `y`). The source must fit.
    pub fn paste(&mut self, src: &ImageRaster, x: usize, y: usize) {
        assert!(x + src.width <= self.width && y + src.height <= self.height);
        for row in 0..src.height {
            let dst = ((y + row) * self.width + x) * 3;
            let from = row * src.width * 3;
            self.pixels[dst..dst + src.width * 3]
                .copy_from_slice(&src.pixels[from..from + src.width * 3]);
        }
    }

    /// RGBA copy with opaque alpha, handy for canvas `ImageData`.
    pub fn to_rgba(&self) -> Vec<u8> {
        self.pixels
            .chunks_exact(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect()
    }
}

/// Bilinear resample with pixel-center alignment. Same-size input is copied unchanged.
pub fn resize_bilinear(src: &ImageRaster, width: usize, height: usize) -> ImageRaster {
    assert!(
        width > 0 && height > 0,
        "target dimensions must be positive"
    );
    if src.width == width && src.height == height {
        return src.clone();
    }
    let axis = |out: usize, len_in: usize, len_out: usize| {
        let s = ((out as f64 + 0.5) * len_in as f64 / len_out as f64 - 0.5)
            .clamp(0.0, (len_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, src.width, width)).collect();
    let mut pixels = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, src.height, height);
        for &(x0, x1, fx) in &xs {
            let p00 = src.pixel(x0, y0);
            let p10 = src.pixel(x1, y0);
            let p01 = src.pixel(x0, y1);
            let p11 = src.pixel(x1, y1);
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
                let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageRaster {
        width,
        height,
        pixels,
    }
}

/// Decodes PNG bytes to RGB; alpha is composited over opaque white.
pub fn decode_png(bytes: &[u8]) -> Result<ImageRaster> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Decode(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let over_white =
        |c: u8, a: u8| -> u8 { ((c as u32 * a as u32 + 255 * (255 - a as u32) + 127) / 255) as u8 };
    let pixels: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => data.to_vec(),
        png::ColorType::Rgba => data
            .chunks_exact(4)
            .flat_map(|p| {
                [
                    over_white(p[0], p[3]),
                    over_white(p[1], p[3]),
                    over_white(p[2], p[3]),
                ]
            })
            .collect(),
        png::ColorType::Grayscale => data.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => data
            .chunks_exact(2)
            .flat_map(|p| {
                let g = over_white(p[0], p[1]);
                [g, g, g]
            })
            .collect(),
        png::ColorType::Indexed => {
            return Err(Error::Decode("palette was not expanded".into()));
        }
    };
    ImageRaster::new(w, h, pixels).map_err(|e| Error::Decode(e.to_string()))
}

pub fn load_png(path: &Path) -> Result<ImageRaster> {
    let bytes = fs::read(path).map_err(|source| Error::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    decode_png(&bytes)
}

pub fn encode_png(raster: &ImageRaster) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, raster.width as u32, raster.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("in-memory PNG header");
        writer
            .write_image_data(&raster.pixels)
            .expect("in-memory PNG data");
    }
    out
}
