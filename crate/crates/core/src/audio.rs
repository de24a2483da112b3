//! WAV decoding into normalized mono clips, and fixed-duration framing.

use std::io::Cursor;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::{Error, Result};

/// A mono buffer of samples in `[-1, 1]` plus its sample rate in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    /// Builds a clip, rejecting empty buffers, a zero sample rate and samples
    /// that are non-finite or outside `[-1, 1]`.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InputTooShort("audio clip has no samples".into()));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::Config(format!(
                "sample {i} = {s} is not a finite value in [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

fn map_hound(err: hound::Error) -> Error {
    match err {
        // Decoding reads from memory, so any read failure means short data.
        hound::Error::IoError(e) => Error::Format(format!("truncated WAV data: {e}")),
        hound::Error::Unsupported => {
            Error::UnsupportedCodec("only PCM 16-bit and IEEE float 32-bit are decoded".into())
        }
        other => Error::Format(other.to_string()),
    }
}

const WAVE_FORMAT_PCM: u16 = 0x0001;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 0x0003;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Format tag of the first `fmt ` chunk, if the RIFF structure gets that far.
fn format_tag(bytes: &[u8]) -> Option<u16> {
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return None;
    }
    let mut pos = 12usize;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().ok()?) as usize;
        if id == b"fmt " {
            let tag = bytes.get(pos + 8..pos + 10)?;
            return Some(u16::from_le_bytes([tag[0], tag[1]]));
        }
        pos = pos.checked_add(8 + size + (size & 1))?;
    }
    None
}

/// Decodes a RIFF/WAVE byte stream into a mono clip.
///
/// Accepts PCM 16-bit and IEEE float 32-bit with one or two channels. Integer
/// samples are scaled by 1/32768; stereo is downmixed by averaging the two
/// channels of each frame.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if let Some(tag) = format_tag(bytes) {
        if !matches!(tag, WAVE_FORMAT_PCM | WAVE_FORMAT_IEEE_FLOAT | WAVE_FORMAT_EXTENSIBLE) {
            return Err(Error::UnsupportedCodec(format!("WAVE format tag {tag:#06x}")));
        }
    }
    let reader = WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels);
    if !(1..=2).contains(&channels) {
        return Err(Error::UnsupportedCodec(format!(
            "{channels} channels (only mono and stereo are decoded)"
        )));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (format, bits) => {
            return Err(Error::UnsupportedCodec(format!(
                "{bits}-bit {format:?} samples"
            )))
        }
    };
    if interleaved.iter().any(|s| !s.is_finite()) {
        return Err(Error::Format("non-finite float sample".into()));
    }
    let mono = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(2)
            .map(|frame| 0.5 * (frame[0] + frame[1]))
            .collect()
    };
    if mono.is_empty() {
        return Err(Error::Format("WAV data chunk holds no complete frames".into()));
    }
    AudioClip::new(mono, spec.sample_rate)
}

fn write_wav<F>(spec: WavSpec, n: usize, mut write: F) -> Vec<u8>
where
    F: FnMut(&mut WavWriter<&mut Cursor<Vec<u8>>>, usize) -> hound::Result<()>,
{
    let mut cursor = Cursor::new(Vec::new());
    {
        // Writing into memory cannot fail short of allocation failure.
        let mut writer = WavWriter::new(&mut cursor, spec).expect("in-memory WAV header");
        for i in 0..n {
            write(&mut writer, i).expect("in-memory WAV sample");
        }
        writer.finalize().expect("in-memory WAV finalize");
    }
    cursor.into_inner()
}

/// Quantizes a sample in `[-1, 1]` to 16-bit PCM, the inverse of the decoder's
/// 1/32768 scaling.
pub fn quantize_pcm16(sample: f32) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Encodes a mono clip as 16-bit PCM WAV.
pub fn encode_wav_pcm16(clip: &AudioClip) -> Vec<u8> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    write_wav(spec, clip.len(), |w, i| {
        w.write_sample(quantize_pcm16(clip.samples[i]))
    })
}

/// Encodes interleaved float frames (`channels` samples per frame) as 32-bit
/// float WAV.
pub fn encode_wav_f32(interleaved: &[f32], channels: u16, sample_rate: u32) -> Vec<u8> {
    let spec = WavSpec {
        channels,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    write_wav(spec, interleaved.len(), |w, i| w.write_sample(interleaved[i]))
}

/// Encodes interleaved 16-bit frames as PCM WAV.
pub fn encode_wav_i16(interleaved: &[i16], channels: u16, sample_rate: u32) -> Vec<u8> {
    let spec = WavSpec {
        channels,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    write_wav(spec, interleaved.len(), |w, i| w.write_sample(interleaved[i]))
}

/// Right-pads with silence or truncates from the end so the clip lasts exactly
/// `round(target_seconds * sample_rate)` samples.
pub fn pad_or_trim(clip: &AudioClip, target_seconds: f64) -> Result<AudioClip> {
    if !(target_seconds.is_finite() && target_seconds > 0.0) {
        return Err(Error::Config(format!(
            "target duration must be positive, got {target_seconds}"
        )));
    }
    let target = (target_seconds * f64::from(clip.sample_rate)).round() as usize;
    if target == 0 {
        return Err(Error::Config(format!(
            "{target_seconds} s at {} Hz rounds to zero samples",
            clip.sample_rate
        )));
    }
    let mut samples = clip.samples.clone();
    samples.resize(target, 0.0);
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    })
}
