//! Wire and disk formats for masks and images.

use std::io::Cursor;

use base64::Engine;
use vplab_core::image::{BinaryMask, ImageRgb};

use crate::error::ApiError;

/// Encodes a mask as a 1-bit greyscale PNG.
pub fn mask_to_png(mask: &BinaryMask) -> Vec<u8> {
    let (w, h) = (mask.width(), mask.height());
    let stride = w.div_ceil(8);
    let mut data = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                data[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(&data).expect("in-memory png body");
    }
    out
}

/// Decodes any greyscale or colour PNG; non-zero luma is foreground.
pub fn mask_from_png(bytes: &[u8]) -> Result<BinaryMask, ApiError> {
    let bad = |e: String| ApiError::bad_request(format!("mask is not a readable PNG: {e}"));
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let line = info.line_size;
    let bits = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| buf[y * line + x * channels] != 0)
        .collect();
    BinaryMask::new(h, w, bits).map_err(|e| ApiError::bad_request(e.to_string()))
}

pub fn mask_to_base64_png(mask: &BinaryMask) -> String {
    base64::engine::general_purpose::STANDARD.encode(mask_to_png(mask))
}

pub fn mask_from_base64_png(s: &str) -> Result<BinaryMask, ApiError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s.trim())
        .map_err(|e| ApiError::bad_request(format!("mask is not valid base64: {e}")))?;
    mask_from_png(&bytes)
}

/// Row-major run lengths, alternating background and foreground and
/// starting with background: `"3 5 2"` is 3 off, 5 on, 2 off.
pub fn mask_to_rle(mask: &BinaryMask) -> String {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    for &b in mask.bits() {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn mask_from_rle(s: &str, height: usize, width: usize) -> Result<BinaryMask, ApiError> {
    let mut bits = Vec::with_capacity(height * width);
    let mut value = false;
    for tok in s.split_whitespace() {
        let n: usize = tok.parse().map_err(|_| ApiError::bad_request(format!("bad run length `{tok}`")))?;
        bits.extend(std::iter::repeat_n(value, n));
        value = !value;
    }
    if bits.len() != height * width {
        return Err(ApiError::bad_request(format!("run lengths cover {} pixels, image has {}", bits.len(), height * width)));
    }
    BinaryMask::new(height, width, bits).map_err(|e| ApiError::bad_request(e.to_string()))
}

/// Side lengths accepted by the encoder: multiples of 8, at least 32.
pub fn working_size(height: usize, width: usize) -> (usize, usize) {
    let snap = |v: usize| (v / 8 * 8).max(32);
    (snap(height), snap(width))
}

/// Decodes an uploaded PNG or JPEG and resamples it to the working size.
/// Returns `None` when the bytes are not a supported format.
pub fn decode_upload(bytes: &[u8], id: &str) -> Result<Option<(ImageRgb, Vec<u8>)>, ApiError> {
    let format = match image::guess_format(bytes) {
        Ok(f @ (image::ImageFormat::Png | image::ImageFormat::Jpeg)) => f,
        _ => return Ok(None),
    };
    let decoded = match image::load_from_memory_with_format(bytes, format) {
        Ok(d) => d.to_rgb8(),
        Err(_) => return Ok(None),
    };
    let (h, w) = working_size(decoded.height() as usize, decoded.width() as usize);
    let rgb = if (h, w) == (decoded.height() as usize, decoded.width() as usize) {
        decoded
    } else {
        image::imageops::resize(&decoded, w as u32, h as u32, image::imageops::FilterType::Triangle)
    };
    let mut png_bytes = Vec::new();
    rgb.write_to(&mut Cursor::new(&mut png_bytes), image::ImageFormat::Png)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let img = rgb_to_image(&rgb, id)?;
    Ok(Some((img, png_bytes)))
}

fn rgb_to_image(rgb: &image::RgbImage, id: &str) -> Result<ImageRgb, ApiError> {
    let pixels = rgb.as_raw().iter().map(|v| f32::from(*v) / 255.0).collect();
    ImageRgb::new(id, rgb.height() as usize, rgb.width() as usize, pixels).map_err(|e| ApiError::bad_request(e.to_string()))
}

/// Reads an image stored by [`decode_upload`].
pub fn load_stored_image(bytes: &[u8], id: &str) -> Result<ImageRgb, ApiError> {
    let rgb = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ApiError::internal(format!("stored image `{id}` is unreadable: {e}")))?
        .to_rgb8();
    rgb_to_image(&rgb, id)
}

/// PNG bytes of a core image, for tests and tools.
pub fn image_to_png(img: &ImageRgb) -> Vec<u8> {
    let raw: Vec<u8> = img.pixels().iter().map(|v| (v * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer matches size");
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png).expect("in-memory png");
    out
}
