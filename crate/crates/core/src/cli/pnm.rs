//! Binary PPM (P6) and PGM (P5) images with 8-bit samples. Values in
//! `[-1, 1]` map to bytes by `round((v + 1)·127.5)`, clamped to `0..=255`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

fn encode(magic: &str, image: &Tensor, channels: usize) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [c, h, w] if *c == channels => (*h, *w),
        other => {
            return Err(Error::Image(format!(
                "{magic} needs a [{channels}, H, W] image, got {other:?}"
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for c in 0..channels {
            out.push(to_byte(d[c * h * w + i]));
        }
    }
    Ok(out)
}

/// Parses the next whitespace-separated header token, skipping `#` comments.
fn token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Image(format!("truncated header at byte {start}")));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn decode(bytes: &[u8], magic: &str, channels: usize) -> Result<Tensor> {
    let mut pos = 0;
    let m = token(bytes, &mut pos)?;
    if m != magic {
        return Err(Error::Image(format!("expected {magic} file, found magic `{m}`")));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token(bytes, &mut pos)?;
        t.parse()
            .map_err(|_| Error::Image(format!("bad {what} `{t}` in {magic} header")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 {
        return Err(Error::Image(format!("only maxval 255 is supported, got {max}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * channels;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != need {
        return Err(Error::Image(format!(
            "{magic} raster has {} bytes, expected {need} for {w}x{h}",
            raster.len()
        )));
    }
    let mut data = vec![0.0; need];
    for i in 0..h * w {
        for c in 0..channels {
            data[c * h * w + i] = from_byte(raster[i * channels + c]);
        }
    }
    Ok(Tensor::new(vec![channels, h, w], data)?)
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    encode("P6", image, 3)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    decode(bytes, "P6", 3)
}

pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    encode("P5", map, 1)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    decode(bytes, "P5", 1)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(map)?).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
