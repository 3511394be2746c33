use cocktail::dsp::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn two_seconds_give_124_frames() {
    let s = stft_magnitude(&noise(16000, 1)).unwrap();
    assert_eq!(s.frames(), 124);
    assert_eq!(s.bins(), 128);
    assert_eq!(s.domain(), Domain::Linear);
}

#[test]
fn short_waveform_is_rejected() {
    assert!(stft_magnitude(&noise(100, 1)).is_err());
    assert!(stft_magnitude(&Waveform::zeros(0)).is_err());
}

#[test]
fn non_finite_samples_are_rejected() {
    assert!(Waveform::new(vec![0.0, f64::NAN]).is_err());
    assert!(Waveform::new(vec![f64::INFINITY]).is_err());
}

#[test]
fn unit_sine_at_1khz_peaks_at_bin_31() {
    let w = Waveform::new(
        (0..16000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / SAMPLE_RATE as f64).sin())
            .collect(),
    )
    .unwrap();
    let s = stft_magnitude(&w).unwrap();
    let energy: Vec<f64> = (0..BINS).map(|b| (0..s.frames()).map(|t| s.get(b, t)).sum()).collect();
    let peak = (0..BINS).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap();
    assert_eq!(peak, 31);
}

#[test]
fn compress_is_monotone_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..50.0)).collect();
    let b: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..50.0)).collect();
    let ca = compress(&Spectrogram::new(Domain::Linear, 1000usize.div_ceil(BINS), pad(&a)).unwrap()).unwrap();
    let cb = compress(&Spectrogram::new(Domain::Linear, ca.frames(), pad(&b)).unwrap()).unwrap();
    for i in 0..1000 {
        let (x, y) = (ca.data()[i], cb.data()[i]);
        assert!(x >= 0.0);
        assert_eq!(a[i] < b[i], x < y, "pair {i}");
        assert_eq!(a[i] == b[i], x == y, "pair {i}");
    }
}

fn pad(v: &[f64]) -> Vec<f64> {
    let frames = v.len().div_ceil(BINS);
    let mut out = v.to_vec();
    out.resize(frames * BINS, 0.0);
    out
}

#[test]
fn compress_examples() {
    let mut data = vec![0.0; BINS];
    data[1] = std::f64::consts::E - 1.0;
    let c = compress(&Spectrogram::new(Domain::Linear, 1, data).unwrap()).unwrap();
    assert_eq!(c.data()[0], 0.0);
    assert!((c.data()[1] - 1.0).abs() < 1e-15);
}

#[test]
fn spectrogram_rejects_negative_values() {
    assert!(Spectrogram::new(Domain::Linear, 1, vec![-1.0; BINS]).is_err());
    assert!(Spectrogram::new(Domain::Linear, 2, vec![0.0; BINS]).is_err());
}

#[test]
fn mix_is_commutative_and_exact() {
    for seed in 0..10 {
        let (a, b) = (noise(2000, seed), noise(2000, seed + 100));
        let ab = mix(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab, mix(&[b.clone(), a.clone()]).unwrap());
        for i in 0..2000 {
            assert_eq!(ab.samples()[i], a.samples()[i] + b.samples()[i]);
        }
    }
    assert!(mix(&[]).is_err());
}

#[test]
fn export_zero_is_black_and_max_is_white() {
    let dir = tempfile::tempdir().unwrap();
    let zero = Spectrogram::new(Domain::Compressed, 3, vec![0.0; 3 * BINS]).unwrap();
    let (pgm, _) = export_image(&zero, &dir.path().join("zero")).unwrap();
    let bytes = std::fs::read(pgm).unwrap();
    let header = b"P5\n3 128\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert!(bytes[header.len()..].iter().all(|&p| p == 0));
    assert_eq!(bytes.len(), header.len() + 3 * BINS);

    let mut data = vec![0.5; 3 * BINS];
    // lowest bin, frame 2: bottom row of the image
    data[2] = 2.0;
    let s = Spectrogram::new(Domain::Compressed, 3, data).unwrap();
    let (pgm, _) = export_image(&s, &dir.path().join("peak")).unwrap();
    let px = &std::fs::read(pgm).unwrap()[header.len()..];
    assert_eq!(px[127 * 3 + 2], 255);
    assert_eq!(px.iter().filter(|&&p| p == 255).count(), 1);
    assert!(px.iter().filter(|&&p| p != 255).all(|&p| p == 64));
}

#[test]
fn csv_round_trip_within_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let s = compress(&stft_magnitude(&noise(4000, 5)).unwrap()).unwrap();
    let (_, csv) = export_image(&s, &dir.path().join("x")).unwrap();
    let back = read_csv(&csv, Domain::Compressed).unwrap();
    assert_eq!(back.frames(), s.frames());
    for (a, b) in s.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn export_to_missing_directory_fails() {
    let s = Spectrogram::new(Domain::Compressed, 1, vec![0.0; BINS]).unwrap();
    assert!(export_image(&s, std::path::Path::new("/nonexistent/dir/x")).is_err());
}

#[test]
fn frame_count_sweep() {
    for len in 256..=32000usize {
        let expected = (len - 256) / 128 + 1;
        assert_eq!(frame_count(len), Some(expected), "len {len}");
    }
    assert_eq!(frame_count(255), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stft_frames_match_formula(len in 256usize..32000) {
        let s = stft_magnitude(&Waveform::zeros(len)).unwrap();
        prop_assert_eq!(s.frames(), (len - 256) / 128 + 1);
    }

    #[test]
    fn stft_is_positively_homogeneous(seed in any::<u64>(), alpha in 0.01f64..20.0) {
        let w = noise(1024, seed);
        let a = stft_magnitude(&w).unwrap();
        let b = stft_magnitude(&w.scaled(alpha)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((alpha * x - y).abs() <= 1e-10 * (1.0 + y.abs()));
        }
    }
}
