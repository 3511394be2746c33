//! Waveform to magnitude-spectrogram front-end.
//!
//! 8 kHz audio, 256-sample periodic Hann window, hop 128, 256-point FFT.
//! Of the 129 non-negative frequency bins the DC bin is dropped, leaving 128
//! rows. No padding: `T = (len - 256) / 128 + 1`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use cocktail_tensor::{Element, Tensor};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: usize = 8000;
pub const WINDOW: usize = 256;
pub const HOP: usize = 128;
pub const BINS: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform".into()));
        }
        Ok(Waveform { samples })
    }

    pub fn zeros(len: usize) -> Self {
        Waveform { samples: vec![0.0; len] }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * gain).collect(),
        }
    }

    pub fn from_pcm(pcm: &[i16]) -> Self {
        Waveform {
            samples: pcm.iter().map(|&s| s as f64 / 32768.0).collect(),
        }
    }

    /// 16-bit signed PCM with saturation.
    pub fn to_pcm(&self) -> Vec<i16> {
        self.samples
            .iter()
            .map(|s| (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Linear,
    Compressed,
}

/// Row-major `[bin][frame]` magnitudes; row 0 is the lowest analysed
/// frequency (31.25 Hz).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    domain: Domain,
    frames: usize,
    data: Vec<f64>,
}

impl Spectrogram {
    pub fn new(domain: Domain, frames: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || data.len() != BINS * frames {
            return Err(Error::invalid(format!(
                "spectrogram needs {BINS}x{frames} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("spectrogram values must be finite and non-negative"));
        }
        Ok(Spectrogram { domain, frames, data })
    }

    /// Interprets `t` (any shape with 128·T elements) as a compressed
    /// spectrogram with `frames` columns.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, frames: usize) -> Result<Self> {
        Self::new(Domain::Compressed, frames, t.to_f64_vec())
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn bins(&self) -> usize {
        BINS
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * self.frames + frame]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// `[1, 128, T]` tensor for the networks.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_f64(vec![1, BINS, self.frames], &self.data).expect("shape matches")
    }
}

pub fn frame_count(len: usize) -> Option<usize> {
    (len >= WINDOW).then(|| (len - WINDOW) / HOP + 1)
}

struct Analysis {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

fn analysis() -> &'static Analysis {
    static CELL: OnceLock<Analysis> = OnceLock::new();
    CELL.get_or_init(|| {
        let window = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
            .collect();
        Analysis {
            fft: FftPlanner::new().plan_fft_forward(WINDOW),
            window,
        }
    })
}

pub fn stft_magnitude(w: &Waveform) -> Result<Spectrogram> {
    let frames = frame_count(w.len())
        .ok_or_else(|| Error::invalid(format!("waveform of {} samples is shorter than one window", w.len())))?;
    let a = analysis();
    let mut data = vec![0.0; BINS * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
    let mut scratch = vec![Complex::new(0.0, 0.0); a.fft.get_inplace_scratch_len()];
    for t in 0..frames {
        let seg = &w.samples()[t * HOP..t * HOP + WINDOW];
        for ((b, &s), &h) in buf.iter_mut().zip(seg).zip(&a.window) {
            *b = Complex::new(s * h, 0.0);
        }
        a.fft.process_with_scratch(&mut buf, &mut scratch);
        for bin in 0..BINS {
            data[bin * frames + t] = buf[bin + 1].norm();
        }
    }
    Spectrogram::new(Domain::Linear, frames, data)
}

/// `X = log(1 + S)`.
pub fn compress(s: &Spectrogram) -> Result<Spectrogram> {
    if s.domain != Domain::Linear {
        return Err(Error::invalid("compress expects a linear-magnitude spectrogram"));
    }
    Ok(Spectrogram {
        domain: Domain::Compressed,
        frames: s.frames,
        data: s.data.iter().map(|v| v.ln_1p()).collect(),
    })
}

/// Samplewise sum at unit gain.
pub fn mix(waves: &[Waveform]) -> Result<Waveform> {
    let first = waves.first().ok_or_else(|| Error::invalid("mix of zero waveforms"))?;
    let mut out = first.samples.clone();
    for w in &waves[1..] {
        if w.len() != out.len() {
            return Err(Error::invalid(format!("mix length mismatch: {} vs {}", out.len(), w.len())));
        }
        for (o, s) in out.iter_mut().zip(&w.samples) {
            *o += s;
        }
    }
    Ok(Waveform { samples: out })
}

/// Writes `<stem>.pgm` (8-bit, low frequencies at the bottom, `[0, max]`
/// mapped linearly to `[0, 255]`) and `<stem>.csv` (raw values, one row per
/// bin from the lowest).
pub fn export_image(x: &Spectrogram, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let pgm = stem.with_extension("pgm");
    let csv = stem.with_extension("csv");
    let max = x.max();
    let mut bytes = format!("P5\n{} {}\n255\n", x.frames, BINS).into_bytes();
    for bin in (0..BINS).rev() {
        for t in 0..x.frames {
            let v = x.get(bin, t);
            let px = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
            bytes.push(px as u8);
        }
    }
    let mut f = std::fs::File::create(&pgm).map_err(|e| Error::file(&pgm, e))?;
    f.write_all(&bytes).map_err(|e| Error::file(&pgm, e))?;

    let mut text = String::new();
    for bin in 0..BINS {
        let row = &x.data[bin * x.frames..(bin + 1) * x.frames];
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                text.push(',');
            }
            write!(text, "{v}").unwrap();
        }
        text.push('\n');
    }
    std::fs::write(&csv, text).map_err(|e| Error::file(&csv, e))?;
    Ok((pgm, csv))
}

/// Parses a CSV written by [`export_image`].
pub fn read_csv(path: &Path, domain: Domain) -> Result<Spectrogram> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut data = Vec::new();
    let mut frames = None;
    for line in text.lines() {
        let row = line
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| Error::invalid(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        if *frames.get_or_insert(row.len()) != row.len() {
            return Err(Error::invalid(format!("{}: ragged rows", path.display())));
        }
        data.extend(row);
    }
    Spectrogram::new(domain, frames.unwrap_or(0), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, len: usize, amp: f64) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|n| amp * (2.0 * std::f64::consts::PI * freq * n as f64 / SAMPLE_RATE as f64).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn geometry() {
        let s = stft_magnitude(&Waveform::zeros(16000)).unwrap();
        assert_eq!((s.bins(), s.frames()), (128, 124));
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert!(stft_magnitude(&Waveform::zeros(255)).is_err());
        assert_eq!(frame_count(256), Some(1));
        assert_eq!(frame_count(383), Some(1));
        assert_eq!(frame_count(384), Some(2));
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let s = stft_magnitude(&sine(1000.0, 16000, 1.0)).unwrap();
        for t in 0..s.frames() {
            let peak = (0..BINS).max_by(|&a, &b| s.get(a, t).total_cmp(&s.get(b, t))).unwrap();
            assert_eq!(peak, 31);
        }
    }

    #[test]
    fn positive_scaling_is_linear() {
        let w = sine(440.0, 4000, 0.3);
        let a = stft_magnitude(&w).unwrap();
        let b = stft_magnitude(&w.scaled(2.5)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.5 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn compress_values_and_domain() {
        let s = Spectrogram::new(Domain::Linear, 1, (0..BINS).map(|i| i as f64 * 0.1).collect()).unwrap();
        let c = compress(&s).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
        assert_eq!(c.domain(), Domain::Compressed);
        assert!(compress(&c).is_err());
        let e = Spectrogram::new(Domain::Linear, 1, vec![std::f64::consts::E - 1.0; BINS]).unwrap();
        assert!((compress(&e).unwrap().get(5, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mix_basics() {
        let w = sine(300.0, 1000, 0.5);
        assert_eq!(mix(&[w.clone(), Waveform::zeros(1000)]).unwrap(), w);
        let neg = w.scaled(-1.0);
        assert!(mix(&[w.clone(), neg]).unwrap().samples().iter().all(|&v| v == 0.0));
        assert!(mix(&[w, Waveform::zeros(999)]).is_err());
    }

    #[test]
    fn pcm_round_trip_is_stable() {
        let w = sine(700.0, 512, 0.7);
        let q = Waveform::from_pcm(&w.to_pcm());
        assert_eq!(Waveform::from_pcm(&q.to_pcm()), q);
    }
}
