//! Binary PPM (P6) and PGM (P5) image files, 8-bit.

use std::fs;
use std::path::Path;

use mpn_core::image::{Grid, Image};

use crate::error::{contract_err, Error, Result};

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.rgb);
    write_file(path, &out)
}

pub fn write_pgm(path: &Path, grid: &Grid) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", grid.w, grid.h).into_bytes();
    out.extend_from_slice(&grid.data);
    write_file(path, &out)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space(&mut self) {
        while self.at < self.bytes.len() {
            match self.bytes[self.at] {
                b' ' | b'\t' | b'\r' | b'\n' => self.at += 1,
                b'#' => {
                    while self.at < self.bytes.len() && self.bytes[self.at] != b'\n' {
                        self.at += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_space();
        let start = self.at;
        while self.at < self.bytes.len() && !self.bytes[self.at].is_ascii_whitespace() {
            self.at += 1;
        }
        (self.at > start).then(|| &self.bytes[start..self.at])
    }

    fn number(&mut self) -> Option<usize> {
        std::str::from_utf8(self.token()?).ok()?.parse().ok()
    }
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let mut r = HeaderReader { bytes, at: 0 };
    let tag = r
        .token()
        .ok_or_else(|| contract_err!("{}: empty file", path.display()))?;
    if tag != magic.as_bytes() {
        return Err(contract_err!(
            "{}: expected {} magic, found {:?}",
            path.display(),
            magic,
            String::from_utf8_lossy(tag)
        ));
    }
    let w = r.number();
    let h = r.number();
    let maxval = r.number();
    let (Some(w), Some(h), Some(maxval)) = (w, h, maxval) else {
        return Err(contract_err!("{}: malformed header", path.display()));
    };
    if maxval != 255 {
        return Err(contract_err!("{}: only maxval 255 supported", path.display()));
    }
    // Exactly one whitespace byte separates header and raster.
    let data = &bytes[r.at + 1..];
    Ok((w, h, data))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, data) = parse_header(&bytes, "P6", path)?;
    if data.len() != w * h * 3 {
        return Err(contract_err!(
            "{}: raster of {} bytes for {}x{} rgb",
            path.display(),
            data.len(),
            w,
            h
        ));
    }
    Ok(Image {
        h,
        w,
        rgb: data.to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, data) = parse_header(&bytes, "P5", path)?;
    if data.len() != w * h {
        return Err(contract_err!(
            "{}: raster of {} bytes for {}x{} gray",
            path.display(),
            data.len(),
            w,
            h
        ));
    }
    Ok(Grid {
        h,
        w,
        data: data.to_vec(),
    })
}
