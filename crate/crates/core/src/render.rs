//! Grayscale rendering of spectrograms as binary PGM (P5) images.
//!
//! Time runs along x and the lowest mel band is the bottom image row.

use std::fmt::Write as _;

use ndarray::Array2;

/// Per-image min-max normalization to `[0, 1]`. A constant matrix maps to 0.5.
pub fn normalize(data: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Array2::from_elem(data.raw_dim(), 0.5);
    }
    data.mapv(|v| (v - lo) / (hi - lo))
}

/// Gray level for a normalized value.
pub fn gray(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// `F x T` matrix to a `T`-wide, `F`-high P5 image.
pub fn pgm(data: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = data.dim();
    let norm = normalize(data);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.reserve(rows * cols);
    for r in (0..rows).rev() {
        out.extend(norm.row(r).iter().map(|&v| gray(v)));
    }
    out
}

/// Parsed P5 header and pixels, mainly for read-back checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_pgm(bytes: &[u8]) -> Option<Pgm> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let width: usize = fields[1].parse().ok()?;
    let height: usize = fields[2].parse().ok()?;
    let pixels = bytes.get(pos..)?.to_vec();
    (pixels.len() == width * height).then_some(Pgm { width, height, pixels })
}

/// Long-format CSV over several named matrices: `name,mel,frame,value`.
pub fn combined_csv<'a>(items: impl IntoIterator<Item = (&'a str, &'a Array2<f64>)>) -> String {
    let mut out = String::from("name,mel,frame,value\n");
    for (name, data) in items {
        for ((mel, frame), v) in data.indexed_iter() {
            writeln!(out, "{name},{mel},{frame},{v}").expect("writing to a String");
        }
    }
    out
}
