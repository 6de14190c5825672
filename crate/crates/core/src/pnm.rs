//! Binary PPM (P6) and PGM (P5) readers/writers, maxval 255.
//!
//! Byte `v` maps to the float `v / 255`; floats write as
//! `round(255 * clamp(v, 0, 1))`.

use crate::error::{Error, Result};
use crate::tensor::{Image, Scalar, Tensor, IMAGE_CHANNELS};
use std::io::Write;
use std::path::Path;

pub fn write_ppm<T: Scalar>(image: &Image<T>, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let bytes = ppm_bytes(image);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&display, e))?;
    Ok(())
}

pub fn ppm_bytes<T: Scalar>(image: &Image<T>) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.tensor().data().iter().map(|v| quantize(*v)));
    out
}

/// Write an arbitrary `[h, w, c]` tensor as PPM by clamping each value into
/// `[0, 1]` first. Lossy by design; display-only for network-domain data.
pub fn write_ppm_clamped<T: Scalar>(tensor: &Tensor<T>, path: &Path) -> Result<()> {
    let shape = tensor.shape();
    if shape.len() != 3 || shape[2] != IMAGE_CHANNELS {
        return Err(Error::invalid("tensor", format!("expected [h, w, 3], got {shape:?}")));
    }
    let display = path.display().to_string();
    let mut out = format!("P6\n{} {}\n255\n", shape[1], shape[0]).into_bytes();
    out.extend(tensor.data().iter().map(|v| quantize(*v)));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    f.write_all(&out).map_err(|e| Error::io(&display, e))?;
    Ok(())
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    ppm_from_bytes(&bytes).map_err(|e| match e {
        Error::BadFile { message, .. } => Error::bad_file(&display, message),
        other => other,
    })
}

pub fn ppm_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Image<T>> {
    let mut pos = 0usize;
    expect_magic(bytes, &mut pos, b"P6")?;
    let w = read_number(bytes, &mut pos)?;
    let h = read_number(bytes, &mut pos)?;
    let maxval = read_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::bad_file("<ppm>", format!("maxval {maxval} unsupported, want 255")));
    }
    skip_single_whitespace(bytes, &mut pos)?;
    let n = h * w * IMAGE_CHANNELS;
    if bytes.len() - pos != n {
        return Err(Error::bad_file(
            "<ppm>",
            format!("expected {n} raster bytes for {w}x{h}, got {}", bytes.len() - pos),
        ));
    }
    let data: Vec<T> = bytes[pos..].iter().map(|b| T::from_f64(*b as f64 / 255.0)).collect();
    Image::new(Tensor::from_vec(&[h, w, IMAGE_CHANNELS], data)?)
}

/// Write a `[h, w]` map as PGM, scaling values by `255 / scale` (pass the
/// map's maximum to normalize, or 1.0 for values already in `[0, 1]`).
pub fn write_pgm<T: Scalar>(map: &Tensor<T>, scale: f64, path: &Path) -> Result<()> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(Error::invalid("map", format!("expected [h, w], got {shape:?}")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("scale", "must be positive and finite"));
    }
    let display = path.display().to_string();
    let mut out = format!("P5\n{} {}\n255\n", shape[1], shape[0]).into_bytes();
    out.extend(map.data().iter().map(|v| quantize(T::from_f64(v.as_f64() / scale))));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    f.write_all(&out).map_err(|e| Error::io(&display, e))?;
    Ok(())
}

fn quantize<T: Scalar>(v: T) -> u8 {
    let clamped = v.as_f64().clamp(0.0, 1.0);
    (clamped * 255.0).round() as u8
}

fn expect_magic(bytes: &[u8], pos: &mut usize, magic: &[u8]) -> Result<()> {
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(Error::bad_file(
            "<ppm>",
            format!("bad magic, want {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    *pos = magic.len();
    Ok(())
}

/// Skip whitespace and `#` comments, then parse a decimal number.
fn read_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::bad_file("<ppm>", "expected a decimal number in header"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::bad_file("<ppm>", "malformed number in header"))
}

fn skip_single_whitespace(bytes: &[u8], pos: &mut usize) -> Result<()> {
    if *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
        Ok(())
    } else {
        Err(Error::bad_file("<ppm>", "missing whitespace before raster data"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image() -> Image<f32> {
        let mut t = Tensor::zeros(&[4, 6, 3]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((i * 5) % 256) as f32 / 255.0;
        }
        Image::new(t).unwrap()
    }

    #[test]
    fn ppm_round_trip_exact_on_grid_values() {
        // values of the form k/255 survive the byte quantization exactly
        let img = sample_image();
        let bytes = ppm_bytes(&img);
        let back: Image<f32> = ppm_from_bytes(&bytes).unwrap();
        assert_eq!(img.tensor().data(), back.tensor().data());
    }

    #[test]
    fn ppm_header_with_comments_parses() {
        let mut bytes = b"P6\n# a comment\n6 4\n# another\n255\n".to_vec();
        bytes.extend(std::iter::repeat(128u8).take(4 * 6 * 3));
        let img: Image<f32> = ppm_from_bytes(&bytes).unwrap();
        assert_eq!(img.height(), 4);
        assert_eq!(img.width(), 6);
    }

    #[test]
    fn ppm_rejects_bad_magic_and_truncation() {
        let img = sample_image();
        let bytes = ppm_bytes(&img);
        let mut bad = bytes.clone();
        bad[1] = b'5';
        assert!(ppm_from_bytes::<f32>(&bad).is_err());
        assert!(ppm_from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn ppm_rejects_wrong_maxval() {
        let bytes = b"P6\n2 2\n65535\n".to_vec();
        assert!(ppm_from_bytes::<f32>(&bytes).is_err());
    }

    #[test]
    fn pgm_quantizes_with_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let mut map = Tensor::<f32>::zeros(&[2, 2]);
        map.data_mut().copy_from_slice(&[0.0, 2.0, 4.0, 8.0]);
        write_pgm(&map, 8.0, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let raster = &bytes[bytes.len() - 4..];
        assert_eq!(raster, &[0, 64, 128, 255]);
    }
}
