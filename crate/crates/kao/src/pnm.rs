//! Binary netpbm images: P5 graymaps for one channel, P6 pixmaps for three.
//!
//! Values in `[-1, 1]` map linearly onto `0..=255` with rounding half away
//! from zero. Reading maps byte `b` back to `b / 255 · 2 − 1`, which
//! re-quantizes to `b` exactly, so re-written files are byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use kao_core::Grid;

use crate::error::{CliError, Result};

/// Byte for a value in `[-1, 1]`, and whether the value had to be clamped.
pub fn quantize(v: f32) -> (u8, bool) {
    if v.is_nan() {
        return (0, true);
    }
    let scaled = ((v as f64 + 1.0) * 127.5).round();
    let clamped = !(-1.0..=1.0).contains(&v);
    (scaled.clamp(0.0, 255.0) as u8, clamped)
}

pub fn dequantize(b: u8) -> f32 {
    (b as f64 / 255.0 * 2.0 - 1.0) as f32
}

/// Encodes a `[1, H, W]` or `[3, H, W]` grid. Returns the file bytes and the
/// number of clamped values.
pub fn encode(g: &Grid) -> Result<(Vec<u8>, usize)> {
    let (c, h, w) = g.chw()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(CliError::Data(format!("images have 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let mut clamped = 0;
    out.reserve(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let (b, hit) = quantize(g.at3(ch, y, x));
                clamped += hit as usize;
                out.push(b);
            }
        }
    }
    Ok((out, clamped))
}

fn header_tokens(bytes: &[u8]) -> Result<([usize; 3], &[u8], usize)> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(CliError::Data("truncated image header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CliError::Data("malformed image header".into()))?;
    }
    // Exactly one whitespace byte separates the header from the payload.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(CliError::Data("malformed image header".into()));
    }
    Ok((fields, &bytes[pos + 1..], pos + 1))
}

pub fn decode(bytes: &[u8]) -> Result<Grid> {
    let c = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(CliError::Data("not a binary P5/P6 image".into())),
    };
    let ([w, h, maxval], payload, _) = header_tokens(bytes)?;
    if maxval != 255 {
        return Err(CliError::Data(format!("only 8-bit images are supported, max value {maxval}")));
    }
    if w == 0 || h == 0 || payload.len() != c * h * w {
        return Err(CliError::Data(format!(
            "payload of {} bytes does not match {w}x{h}x{c}",
            payload.len()
        )));
    }
    let mut g = Grid::zeros(&[c, h, w]);
    for (i, &b) in payload.iter().enumerate() {
        let (p, ch) = (i / c, i % c);
        g.set3(ch, p / w, p % w, dequantize(b));
    }
    Ok(g)
}

/// Writes `bytes` to a temporary sibling, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Data(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Writes an image and returns how many values were clamped into range.
pub fn write_image(g: &Grid, path: &Path) -> Result<usize> {
    let (bytes, clamped) = encode(g)?;
    write_atomic(path, &bytes)?;
    Ok(clamped)
}

pub fn read_image(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Writes a 0/1 mask as a graymap with 0 black and 1 white.
pub fn write_mask(m: &Grid, path: &Path) -> Result<()> {
    write_image(&m.map(|v| 2.0 * v - 1.0), path).map(|_| ())
}

/// Reads a graymap whose pixels are all 0 or 255 as a 0/1 mask.
pub fn read_mask(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.get(..2) != Some(b"P5") {
        return Err(CliError::Data(format!("{}: masks must be P5 graymaps", path.display())));
    }
    let (_, payload, _) = header_tokens(&bytes)?;
    if let Some(b) = payload.iter().find(|&&b| b != 0 && b != 255) {
        return Err(CliError::Data(format!("{}: non-binary mask value {b}", path.display())));
    }
    Ok(decode(&bytes)?.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use kao_core::SeededRng;

    fn oracle_byte(v: f32) -> u8 {
        // Independent formulation: nearest of the 256 levels, ties upward.
        let t = (v.clamp(-1.0, 1.0) as f64 + 1.0) / 2.0 * 255.0;
        let floor = t.floor();
        if t - floor >= 0.5 {
            floor as u8 + (floor < 255.0) as u8
        } else {
            floor as u8
        }
    }

    #[test]
    fn endpoints() {
        let (lo, _) = encode(&Grid::full(&[1, 2, 3], -1.0)).unwrap();
        assert_eq!(&lo[..11], b"P5\n3 2\n255\n");
        assert!(lo[11..].iter().all(|&b| b == 0));
        let (hi, _) = encode(&Grid::full(&[3, 2, 2], 1.0)).unwrap();
        assert!(hi.starts_with(b"P6\n2 2\n255\n"));
        assert!(hi[11..].iter().all(|&b| b == 255) && hi.len() == 11 + 12);
    }

    #[test]
    fn matches_quantizer_oracle_and_round_trips() {
        let mut rng = SeededRng::new(3);
        let g = Grid::new(&[3, 5, 7], (0..105).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect()).unwrap();
        let (bytes, clamped) = encode(&g).unwrap();
        assert_eq!(clamped, 0);
        let back = decode(&bytes).unwrap();
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..7 {
                    let b = bytes[11 + (y * 7 + x) * 3 + c];
                    assert_eq!(b, oracle_byte(g.at3(c, y, x)));
                    assert_eq!(back.at3(c, y, x), dequantize(b));
                }
            }
        }
        assert_eq!(encode(&back).unwrap().0, bytes);
    }

    #[test]
    fn every_level_requantizes_exactly() {
        for b in 0..=255u8 {
            assert_eq!(quantize(dequantize(b)), (b, false));
        }
    }

    #[test]
    fn clamps_are_counted() {
        let g = Grid::new(&[1, 1, 4], vec![-2.0, 1.5, 0.0, f32::NAN]).unwrap();
        let (bytes, clamped) = encode(&g).unwrap();
        assert_eq!(clamped, 3);
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 128, 0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(encode(&Grid::zeros(&[2, 2, 2])).is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00\x00\x00").is_err());
        assert!(decode(b"P5\n2 2\n65535\n").is_err());
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        let g = decode(b"P5 # comment\n1 2\n255\n\x00\xff").unwrap();
        assert_eq!(g.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn masks_must_be_binary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let m = Grid::new(&[1, 1, 3], vec![0.0, 1.0, 1.0]).unwrap();
        write_mask(&m, &p).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
        write_atomic(&p, b"P5\n1 1\n255\n\x40").unwrap();
        assert!(read_mask(&p).is_err());
    }
}
