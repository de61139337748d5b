//! 8-bit RGB images: PPM (P6) codec, optional PNG decoding, bilinear resize.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{} bytes do not form a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbImage {
            width,
            height,
            pixels,
        }
    }
}

fn decode_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parse a binary PPM with maxval <= 255. `path` is only used in errors.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let mut pos = 0usize;
    let mut fields = [0usize; 3];
    if !bytes.starts_with(b"P6") {
        return Err(decode_err(path, "missing P6 magic"));
    }
    pos += 2;
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(decode_err(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(decode_err(path, format!("bad header byte at {pos}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| decode_err(path, "header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(decode_err(path, "missing whitespace after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(decode_err(path, "zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(decode_err(path, format!("unsupported maxval {maxval}")));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| decode_err(path, "image too large"))?;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(decode_err(
            path,
            format!("expected {need} pixel bytes, found {}", data.len()),
        ));
    }
    let mut pixels = data[..need].to_vec();
    if maxval != 255 {
        for p in &mut pixels {
            *p = ((*p as u32 * 255 + maxval as u32 / 2) / maxval as u32).min(255) as u8;
        }
    }
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let pixels: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(decode_err(path, "palette was not expanded")),
    };
    RgbImage::new(w, h, pixels).map_err(|e| decode_err(path, e.to_string()))
}

#[cfg(not(feature = "png"))]
fn decode_png(_bytes: &[u8], path: &Path) -> Result<RgbImage> {
    Err(decode_err(path, "PNG support not compiled in (enable the `png` feature)"))
}

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Decode PPM or PNG by content sniffing.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes, path)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes, path)
    } else {
        Err(decode_err(path, "unrecognized image format"))
    }
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

/// Bilinear resize with half-pixel centers and edge clamping. Output is f32
/// in the input's 0..255 scale.
pub fn resize_bilinear(img: &RgbImage, out_w: usize, out_h: usize) -> Vec<f32> {
    let sx = img.width as f32 / out_w as f32;
    let sy = img.height as f32 / out_h as f32;
    let taps = |o: usize, scale: f32, extent: usize| {
        let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(extent - 1);
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, src - i0 as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, img.width)).collect();
    let mut out = Vec::with_capacity(out_w * out_h * 3);
    let px = |x: usize, y: usize, c: usize| img.pixels[(y * img.width + x) * 3 + c] as f32;
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, sy, img.height);
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = px(x0, y0, c) + (px(x1, y0, c) - px(x0, y0, c)) * fx;
                let bot = px(x0, y1, c) + (px(x1, y1, c) - px(x0, y1, c)) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_and_comments() {
        let img = RgbImage::new(2, 1, vec![1, 2, 3, 250, 251, 252]).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(decode_ppm(&bytes, Path::new("x")).unwrap(), img);
        let mut commented = b"P6 # made by hand\n2 1\n255\n".to_vec();
        commented.extend_from_slice(&img.pixels);
        assert_eq!(decode_image(&commented, Path::new("x")).unwrap(), img);
    }

    #[test]
    fn corrupt_images_report_path() {
        let p = Path::new("broken.ppm");
        for bad in [&b"P5\n1 1\n255\n\0"[..], b"P6\n1 1\n255\n\0", b"P6\n1", b"GIF89a"] {
            match decode_image(bad, p) {
                Err(Error::Decode { path, .. }) => assert_eq!(path, p),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn small_maxval_is_rescaled() {
        let bytes = b"P6\n1 1\n15\n\x0f\x00\x07";
        let img = decode_ppm(bytes, Path::new("x")).unwrap();
        assert_eq!(img.pixels, vec![255, 0, 119]);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = RgbImage::new(3, 2, (0..18).map(|v| v * 10).collect()).unwrap();
        let out = resize_bilinear(&img, 3, 2);
        let want: Vec<f32> = img.pixels.iter().map(|&v| v as f32).collect();
        assert_eq!(out, want);
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let img = RgbImage::new(4, 1, vec![0, 0, 0, 100, 100, 100, 50, 50, 50, 150, 150, 150]).unwrap();
        let out = resize_bilinear(&img, 2, 1);
        assert_eq!(out, vec![50., 50., 50., 100., 100., 100.]);
    }
}
