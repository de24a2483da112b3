//! Binary and CSV serialization for spectrograms.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! mel:        "SPFMEL01" | F: u32 | T: u32 | F*T f64, row-major
//! compressed: "SPFCMP01" | F: u32 | T': u32 | method: u8 | m: u32 | T: u32 | F*T' f64, row-major
//! ```

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::features::MelSpectrogram;
use crate::simpf::{CompressedSpectrogram, CompressionSpec, Factor, Method, TimeFrequency};
use crate::{Error, Result};

pub const MEL_MAGIC: &[u8; 8] = b"SPFMEL01";
pub const COMPRESSED_MAGIC: &[u8; 8] = b"SPFCMP01";

/// Either kind of spectrogram that can live in a container file.
#[derive(Debug, Clone, PartialEq)]
pub enum Spectrogram {
    Mel(MelSpectrogram),
    Compressed(CompressedSpectrogram),
}

impl Spectrogram {
    pub fn data(&self) -> &Array2<f64> {
        match self {
            Spectrogram::Mel(m) => m.data(),
            Spectrogram::Compressed(c) => c.data(),
        }
    }
}

impl TimeFrequency for Spectrogram {
    fn matrix(&self) -> &Array2<f64> {
        self.data()
    }
}

impl From<MelSpectrogram> for Spectrogram {
    fn from(m: MelSpectrogram) -> Self {
        Spectrogram::Mel(m)
    }
}

impl From<CompressedSpectrogram> for Spectrogram {
    fn from(c: CompressedSpectrogram) -> Self {
        Spectrogram::Compressed(c)
    }
}

fn dim_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Shape(format!("{what} = {n} does not fit in u32")))
}

fn push_data(out: &mut Vec<u8>, data: &Array2<f64>) {
    // `iter` walks logical row-major order regardless of memory layout.
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(spec: &Spectrogram) -> Result<Vec<u8>> {
    let data = spec.data();
    let (rows, cols) = data.dim();
    let mut out = Vec::with_capacity(8 + 21 + rows * cols * 8);
    match spec {
        Spectrogram::Mel(_) => {
            out.extend_from_slice(MEL_MAGIC);
            out.extend_from_slice(&dim_u32(rows, "F")?.to_le_bytes());
            out.extend_from_slice(&dim_u32(cols, "T")?.to_le_bytes());
        }
        Spectrogram::Compressed(c) => {
            out.extend_from_slice(COMPRESSED_MAGIC);
            out.extend_from_slice(&dim_u32(rows, "F")?.to_le_bytes());
            out.extend_from_slice(&dim_u32(cols, "T'")?.to_le_bytes());
            out.push(c.spec().method.code());
            out.extend_from_slice(&u32::from(c.spec().factor).to_le_bytes());
            out.extend_from_slice(&dim_u32(c.original_frames(), "T")?.to_le_bytes());
        }
    }
    push_data(&mut out, data);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Container("unexpected end of data".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Container("dimensions overflow".into()))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Container("dimensions overflow".into()))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Container(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Spectrogram> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let out = if magic == MEL_MAGIC {
        let data = r.matrix(rows, cols)?;
        Spectrogram::Mel(MelSpectrogram::from_array(data).map_err(|e| Error::Container(e.to_string()))?)
    } else if magic == COMPRESSED_MAGIC {
        let code = r.u8()?;
        let method = Method::from_code(code)
            .ok_or_else(|| Error::Container(format!("unknown pooling method code {code}")))?;
        let factor = Factor::new(r.u32()?).map_err(|e| Error::Container(e.to_string()))?;
        let original = r.u32()? as usize;
        let data = r.matrix(rows, cols)?;
        Spectrogram::Compressed(
            CompressedSpectrogram::from_parts(data, CompressionSpec { method, factor }, original)
                .map_err(|e| Error::Container(e.to_string()))?,
        )
    } else {
        return Err(Error::Container("not a spectrogram container (bad magic)".into()));
    };
    if r.pos != bytes.len() {
        return Err(Error::Container(format!(
            "{} trailing bytes after spectrogram data",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn write(path: impl AsRef<Path>, spec: &Spectrogram) -> Result<()> {
    std::fs::write(path, encode(spec)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Spectrogram> {
    decode(&std::fs::read(path)?)
}

/// One line per mel band, comma-separated frames. Values use Rust's shortest
/// round-trip float formatting.
pub fn to_csv(data: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in data.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simpf::compress;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn mel_round_trip_is_lossless() {
        let mel = MelSpectrogram::from_rows(&[vec![1.5, -2.25, 1e-300], vec![0.1, 0.2, 0.3]]).unwrap();
        let back = decode(&encode(&mel.clone().into()).unwrap()).unwrap();
        assert_eq!(back, Spectrogram::Mel(mel));
    }

    #[test]
    fn compressed_round_trip_keeps_the_spec() {
        let x = array![[1.0, 3.0, 2.0, 4.0, 9.0], [0.0, 1.0, 2.0, 3.0, 4.0]];
        let c = compress(&x, "avgmax:2".parse().unwrap()).unwrap();
        let back = decode(&encode(&c.clone().into()).unwrap()).unwrap();
        match back {
            Spectrogram::Compressed(b) => {
                assert_eq!(b, c);
                assert_eq!(b.original_frames(), 5);
            }
            other => panic!("decoded as {other:?}"),
        }
    }

    #[test]
    fn header_layout() {
        let mel = MelSpectrogram::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let bytes = encode(&mel.into()).unwrap();
        assert_eq!(&bytes[..8], MEL_MAGIC);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 32);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mel = MelSpectrogram::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let bytes = encode(&mel.into()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Container(_))));
    }

    #[test]
    fn csv_export() {
        let x = array![[1.0, 2.5], [-3.0, 0.125]];
        assert_eq!(to_csv(&x), "1,2.5\n-3,0.125\n");
    }

    proptest! {
        #[test]
        fn arbitrary_matrices_round_trip(rows in 1usize..6, cols in 1usize..12, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1e6..1e6));
            let mel = MelSpectrogram::from_array(data).unwrap();
            let back = decode(&encode(&mel.clone().into()).unwrap()).unwrap();
            prop_assert_eq!(back, Spectrogram::Mel(mel));
        }
    }
}
