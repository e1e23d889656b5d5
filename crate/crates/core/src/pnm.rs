//! Binary PPM (`P6`) and PGM (`P5`) codecs with maxval 255.

use crate::error::{Error, Result};

/// Decoded raster: width, height and `channels`-interleaved bytes.
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn header_tokens(bytes: &[u8], what: &'static str) -> Result<([usize; 3], usize)> {
    let mut pos = 2;
    let mut out = [0usize; 3];
    for slot in out.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format(what, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(what, "non-numeric header field"))?;
    }
    // Exactly one whitespace byte separates the header from the payload.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(what, "missing separator after header"));
    }
    Ok((out, pos + 1))
}

pub fn decode(
    bytes: &[u8],
    magic: &[u8; 2],
    channels: usize,
    what: &'static str,
) -> Result<Raster> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            what,
            format!("expected {} magic", String::from_utf8_lossy(magic)),
        ));
    }
    let ([width, height, maxval], start) = header_tokens(bytes, what)?;
    if maxval != 255 {
        return Err(Error::format(
            what,
            format!("maxval {maxval} unsupported (need 255)"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(what, "zero-sized raster"));
    }
    let n = width * height * channels;
    if bytes.len() < start + n {
        return Err(Error::format(what, "truncated payload"));
    }
    Ok(Raster {
        width,
        height,
        data: bytes[start..start + n].to_vec(),
    })
}

pub fn encode(magic: &[u8; 2], width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!(
        "{}\n{width} {height}\n255\n",
        String::from_utf8_lossy(magic)
    )
    .into_bytes();
    out.extend_from_slice(data);
    out
}
