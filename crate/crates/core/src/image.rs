//! Linear RGB float images with 8-bit PPM (P6) and PNG storage.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed image header: {0}")]
    MalformedHeader(String),
    #[error("unsupported image format: {0}")]
    Unsupported(String),
    #[error("image dimensions {0}x{1} do not match data length {2}")]
    BadDimensions(usize, usize, usize),
}

/// Row-major RGB image, row 0 at the top, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = std::iter::repeat_n(rgb, width * height).flatten().collect();
        Self { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height * 3 {
            return Err(ImageError::BadDimensions(width, height, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Snaps every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| dequantize(quantize(v))).collect();
        Image { width: self.width, height: self.height, data }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        Self::from_data(width, height, bytes.iter().map(|&b| dequantize(b)).collect())
    }

    /// Writes P6 for `.ppm` paths and PNG otherwise.
    pub fn write(&self, path: &Path) -> Result<(), ImageError> {
        match extension(path).as_str() {
            "ppm" => write_ppm(path, self),
            "png" => write_png(path, self),
            other => Err(ImageError::Unsupported(other.to_string())),
        }
    }

    pub fn read(path: &Path) -> Result<Image, ImageError> {
        match extension(path).as_str() {
            "ppm" => read_ppm(path),
            "png" => read_png(path),
            other => Err(ImageError::Unsupported(other.to_string())),
        }
    }
}

pub fn quantize(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io { path: path.display().to_string(), source }
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_bytes());
    out
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<(), ImageError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode_ppm(image)).map_err(io_err(path))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, ImageError> {
    // header: magic, width, height, maxval, separated by whitespace, with
    // optional '#' comments; exactly one whitespace byte before the raster
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
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
            return Err(ImageError::MalformedHeader("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(ImageError::MalformedHeader(format!("bad magic {:?}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>().map_err(|_| ImageError::MalformedHeader(format!("bad number {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(ImageError::MalformedHeader(format!("maxval {maxval} unsupported")));
    }
    pos += 1;
    let n = w * h * 3;
    if bytes.len() < pos + n {
        return Err(ImageError::MalformedHeader(format!(
            "raster has {} bytes, expected {n}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Image::from_bytes(w, h, &bytes[pos..pos + n])
}

pub fn read_ppm(path: &Path) -> Result<Image, ImageError> {
    decode_ppm(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_png(path: &Path, image: &Image) -> Result<(), ImageError> {
    image::save_buffer(
        path,
        &image.to_bytes(),
        image.width as u32,
        image.height as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(source) => ImageError::Io { path: path.display().to_string(), source },
        other => ImageError::Unsupported(other.to_string()),
    })
}

pub fn read_png(path: &Path) -> Result<Image, ImageError> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => ImageError::Io { path: path.display().to_string(), source },
        other => ImageError::MalformedHeader(other.to_string()),
    })?;
    let rgb = img.to_rgb8();
    Image::from_bytes(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
}
