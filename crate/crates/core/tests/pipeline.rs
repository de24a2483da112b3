use simpf::audio::{decode_wav, encode_wav_f32, encode_wav_pcm16, pad_or_trim, AudioClip};
use simpf::container::{self, Spectrogram};
use simpf::features::{log_mel, SpectrogramConfig};
use simpf::nn::{decode_checkpoint, encode_checkpoint, forward, TinyCnnModel};
use simpf::simpf::{compress, CompressionSpec, Method};

fn chirp(sample_rate: u32, seconds: f64) -> AudioClip {
    let n = (f64::from(sample_rate) * seconds) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / f64::from(sample_rate);
            (0.8 * (2.0 * std::f64::consts::PI * (200.0 * t + 900.0 * t * t)).sin()) as f32
        })
        .collect();
    AudioClip::new(samples, sample_rate).unwrap()
}

#[test]
fn wav_to_logits() {
    let clip = chirp(16_000, 1.0);
    let decoded = decode_wav(&encode_wav_pcm16(&clip)).unwrap();
    let mel = log_mel(&decoded, &SpectrogramConfig::default()).unwrap();
    assert_eq!((mel.n_mels(), mel.n_frames()), (64, 51));

    let model = TinyCnnModel::<f32>::init(4, 0);
    for method in Method::ALL {
        let c = compress(&mel, CompressionSpec::new(method, 2).unwrap()).unwrap();
        assert_eq!(c.data().dim(), (64, 25));
        let back = container::decode(&container::encode(&c.clone().into()).unwrap()).unwrap();
        assert_eq!(back, Spectrogram::Compressed(c.clone()));
        let logits = forward(&model, &back).unwrap();
        assert_eq!(logits.len(), 4);
        assert!(logits.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn float_and_pcm_inputs_agree() {
    let clip = chirp(22_050, 0.5);
    let pcm = decode_wav(&encode_wav_pcm16(&clip)).unwrap();
    let float = decode_wav(&encode_wav_f32(clip.samples(), 1, 22_050)).unwrap();
    let cfg = SpectrogramConfig::default();
    let a = log_mel(&pcm, &cfg).unwrap();
    let b = log_mel(&float, &cfg).unwrap();
    // Bands with real energy agree to within the 16-bit quantization noise.
    for (x, y) in a.data().iter().zip(b.data()) {
        if *y > -5.0 {
            assert!((x - y).abs() < 0.05, "{x} vs {y}");
        }
    }
}

#[test]
fn ten_seconds_at_44k1_padded_from_a_short_clip() {
    let short = chirp(44_100, 3.2);
    let clip = pad_or_trim(&short, 10.0).unwrap();
    assert_eq!(clip.len(), 441_000);
    let mel = log_mel(&clip, &SpectrogramConfig::default()).unwrap();
    assert_eq!((mel.n_mels(), mel.n_frames()), (64, 1379));
    let c = compress(&mel, CompressionSpec::new(Method::Uniform, 4).unwrap()).unwrap();
    assert_eq!(c.data().dim(), (64, 344));
}

#[test]
fn checkpoint_survives_a_file_round_trip() {
    let dir = std::env::temp_dir().join(format!("simpf-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    let model = TinyCnnModel::<f32>::init(4, 42);
    simpf::nn::save_checkpoint(&path, &model).unwrap();
    assert_eq!(simpf::nn::load_checkpoint(&path).unwrap(), model);
    assert_eq!(decode_checkpoint(&encode_checkpoint(&model)).unwrap(), model);
    std::fs::remove_dir_all(&dir).unwrap();
}
