//! Image file IO: 8-bit PNG (gray or RGB) and ASCII PGM/PPM.
//!
//! Pixels are quantised as `round(v × 255)` after clamping to `[0,1]`, and
//! decoded as `byte / 255` (or `value / maxval` for PNM).

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    decode_image(&bytes)
}

/// Decode from memory, sniffing the format from the leading bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P2") || bytes.starts_with(b"P3") {
        decode_pnm(bytes)
    } else if bytes.len() < PNG_MAGIC.len() && PNG_MAGIC.starts_with(bytes) && !bytes.is_empty() {
        Err(Error::TruncatedImage("PNG signature cut short".into()))
    } else {
        Err(Error::UnsupportedFormat(
            "expected PNG or ASCII PGM/PPM (P2/P3) data".into(),
        ))
    }
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "png" => encode_png(img)?,
        "ppm" | "pgm" | "pnm" => {
            let want = match ext.as_str() {
                "ppm" => Some(3),
                "pgm" => Some(1),
                _ => None,
            };
            if let Some(want) = want {
                if img.channels() != want {
                    return Err(Error::ChannelCount {
                        expected: want,
                        got: img.channels(),
                    });
                }
            }
            encode_pnm(img).into_bytes()
        }
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "cannot write `.{other}`; use .png, .ppm or .pgm"
            )))
        }
    };
    fs::write(path, bytes).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(if img.channels() == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::MalformedImage(e.to_string()))?;
        let data: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
        writer
            .write_image_data(&data)
            .map_err(|e| Error::MalformedImage(e.to_string()))?;
        writer
            .finish()
            .map_err(|e| Error::MalformedImage(e.to_string()))?;
    }
    Ok(out)
}

fn png_error(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::TruncatedImage(io.to_string())
        }
        other => Error::MalformedImage(other.to_string()),
    }
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(png_error)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::MalformedImage("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_error)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "{:?}-bit PNG; only 8-bit is supported",
            info.bit_depth
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let stride = info.line_size;
    let (src_ch, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedFormat("unexpanded palette PNG".into()))
        }
    };
    let mut data = Vec::with_capacity(h * w * keep);
    for r in 0..h {
        let row = &buf[r * stride..r * stride + w * src_ch];
        for px in row.chunks_exact(src_ch) {
            data.extend(px[..keep].iter().map(|&b| b as f64 / 255.0));
        }
    }
    Image::from_vec(h, w, keep, data)
}

pub fn encode_pnm(img: &Image) -> String {
    let magic = if img.channels() == 3 { "P3" } else { "P2" };
    let mut s = format!("{magic}\n{} {}\n255\n", img.width(), img.height());
    let per_row = img.width() * img.channels();
    for row in img.data().chunks(per_row) {
        let line: Vec<String> = row.iter().map(|&v| quantize(v).to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::MalformedImage("ASCII PNM contains non-UTF-8 bytes".into()))?;
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let channels = match tokens.next() {
        Some("P2") => 1,
        Some("P3") => 3,
        other => return Err(Error::UnsupportedFormat(format!("PNM magic {other:?}"))),
    };
    let mut header = |what: &str| -> Result<usize> {
        let tok = tokens
            .next()
            .ok_or_else(|| Error::TruncatedImage(format!("missing {what} in PNM header")))?;
        tok.parse::<usize>()
            .map_err(|_| Error::MalformedImage(format!("bad {what} `{tok}` in PNM header")))
    };
    let w = header("width")?;
    let h = header("height")?;
    let maxval = header("maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::ImageDimensions(format!("{w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!("PNM maxval {maxval}")));
    }
    let need = w * h * channels;
    let mut data = Vec::with_capacity(need);
    for tok in tokens.by_ref() {
        let v: usize = tok
            .parse()
            .map_err(|_| Error::MalformedImage(format!("bad sample `{tok}`")))?;
        if v > maxval {
            return Err(Error::MalformedImage(format!("sample {v} exceeds maxval {maxval}")));
        }
        data.push(v as f64 / maxval as f64);
        if data.len() > need {
            break;
        }
    }
    if data.len() < need {
        return Err(Error::TruncatedImage(format!(
            "expected {need} samples, found {}",
            data.len()
        )));
    }
    if data.len() > need {
        return Err(Error::ImageDimensions(format!(
            "more samples than {w}x{h}x{channels}"
        )));
    }
    Image::from_vec(h, w, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn png_round_trip_within_half_quantum() {
        let dir = tempfile::tempdir().unwrap();
        let img = Rng::new(1).uniform_image(13, 17, 3);
        let path = dir.path().join("a.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-15);
        let expected = img.map(|v| quantize(v) as f64 / 255.0);
        assert_eq!(back, expected);
    }

    #[test]
    fn pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Rng::new(2).uniform_image(4, 6, 3);
        let gray = Rng::new(3).uniform_image(5, 3, 1);
        save_image(&rgb, dir.path().join("a.ppm")).unwrap();
        save_image(&gray, dir.path().join("b.pgm")).unwrap();
        assert!(load_image(dir.path().join("a.ppm")).unwrap().max_abs_diff(&rgb) <= 1.0 / 510.0 + 1e-15);
        assert!(load_image(dir.path().join("b.pgm")).unwrap().max_abs_diff(&gray) <= 1.0 / 510.0 + 1e-15);
        assert!(matches!(
            save_image(&rgb, dir.path().join("c.pgm")),
            Err(Error::ChannelCount { .. })
        ));
    }

    #[test]
    fn one_pixel_white_png() {
        let bytes = encode_png(&Image::filled(1, 1, 3, 1.0)).unwrap();
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img, Image::from_vec(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap());
    }

    #[test]
    fn error_paths_are_distinct() {
        let good = encode_png(&Image::filled(4, 4, 3, 0.5)).unwrap();

        let mut corrupt = good.clone();
        corrupt[12..16].copy_from_slice(b"XXXX"); // IHDR chunk tag
        assert!(matches!(decode_image(&corrupt), Err(Error::MalformedImage(_))));

        let truncated = &good[..good.len() / 2];
        assert!(matches!(
            decode_image(truncated),
            Err(Error::TruncatedImage(_)) | Err(Error::MalformedImage(_))
        ));
        assert!(matches!(decode_image(&good[..20]), Err(Error::TruncatedImage(_))));

        assert!(matches!(decode_image(b"GIF89a"), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(decode_image(b"P3\n2 2\n255\n1 2 3"), Err(Error::TruncatedImage(_))));
        assert!(matches!(
            decode_image(b"P2\n1 1\n255\n1 2"),
            Err(Error::ImageDimensions(_))
        ));
        assert!(matches!(decode_image(b"P2\nx 1\n255\n"), Err(Error::MalformedImage(_))));
    }

    #[test]
    fn unknown_extension_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = save_image(&Image::zeros(2, 2, 3), dir.path().join("a.jpg")).unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)));
    }
}
