//! RGB image decoding/encoding (binary PPM and 8-bit PNG) and bilinear resizing.
//!
//! Images are `[3, h, w]` tensors with values in `[0, 1]`.

use std::io::{BufReader, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

fn ingest(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Decode a PPM (P6) or PNG file to `[3, h, w]`, values `byte / 255`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| ingest(path, 0, e.to_string()))?;
    decode_image(path, &bytes)
}

/// Decode and bilinearly resize to `h × w`.
pub fn load_image_resized(path: &Path, h: usize, w: usize) -> Result<Tensor<f32>> {
    let img = load_image(path)?;
    if img.shape()[1] == h && img.shape()[2] == w {
        return Ok(img);
    }
    resize_bilinear(&img, h, w)
}

/// Decode in-memory bytes; `path` is used only for error messages.
pub fn decode_image(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.starts_with(b"P6") {
        decode_ppm(path, bytes)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(path, bytes)
    } else {
        Err(ingest(path, 0, "unsupported format: expected binary PPM (P6) or PNG"))
    }
}

fn interleaved_to_planar(rgb: &[u8], h: usize, w: usize, stride: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        rgb[p * stride + c] as f32 / 255.0
    })
}

fn ppm_field(path: &Path, bytes: &[u8], pos: &mut usize, name: &str) -> Result<usize> {
    // skip whitespace and comments
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(ingest(path, start, format!("expected {name} in PPM header")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map_err(|_| ingest(path, start, format!("{name} out of range")))
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 2;
    let w = ppm_field(path, bytes, &mut pos, "width")?;
    let h = ppm_field(path, bytes, &mut pos, "height")?;
    let maxval_at = pos;
    let maxval = ppm_field(path, bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(ingest(path, maxval_at, format!("maxval {maxval} unsupported; only 255")));
    }
    if w == 0 || h == 0 {
        return Err(ingest(path, 3, format!("empty image {w}x{h}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ingest(path, pos, "expected single whitespace after maxval")),
    }
    let need = w.checked_mul(h).and_then(|v| v.checked_mul(3)).ok_or_else(|| ingest(path, 3, "image too large"))?;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(ingest(
            path,
            bytes.len(),
            format!("pixel data truncated: {} of {need} bytes", data.len()),
        ));
    }
    Ok(interleaved_to_planar(&data[..need], h, w, 3))
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    let err = |e: png::DecodingError| ingest(path, 0, format!("png: {e}"));
    let decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ingest(path, 16, "png dimensions overflow"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ingest(path, 24, format!("unsupported bit depth {:?}; only 8-bit", info.bit_depth)));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(ingest(path, 25, format!("unsupported colour type {other:?}; need RGB or RGBA"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let packed: Vec<u8> = if info.line_size == w * stride {
        buf[..h * w * stride].to_vec()
    } else {
        buf.chunks(info.line_size).take(h).flat_map(|row| row[..w * stride].to_vec()).collect()
    };
    Ok(interleaved_to_planar(&packed, h, w, stride))
}

fn to_bytes<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::dim("save_image", format!("expected [3, h, w], got {s:?}"))),
    };
    let d = img.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            let v = d[c * h * w + p].as_f64().clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok((h, w, out))
}

pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w, rgb) = to_bytes(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(rgb);
    Ok(out)
}

pub fn encode_png<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w, rgb) = to_bytes(img)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let io = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
        let mut writer = enc.write_header().map_err(io)?;
        writer.write_image_data(&rgb).map_err(io)?;
        writer.finish().map_err(io)?;
    }
    Ok(out)
}

/// Write `[3, h, w]` clamped to `[0, 1]`; format chosen by extension (`.png`, else PPM).
pub fn save_image<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png { encode_png(img)? } else { encode_ppm(img)? };
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Bilinear resize of the last two axes with half-pixel sample centres and
/// edge clamping. Works on `[c, h, w]` and `[n, c, h, w]`.
pub fn resize_bilinear<T: Scalar>(img: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() < 2 || oh == 0 || ow == 0 {
        return Err(Error::dim("resize", format!("cannot resize {s:?} to {oh}x{ow}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = img.numel() / (h * w).max(1);
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(oh, h), taps(ow, w));
    let d = img.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &d[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let at = |y: usize, x: usize| src[y * w + x].as_f64();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(T::from_f64(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out)
}
