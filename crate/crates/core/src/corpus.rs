//! Deterministic synthetic multi-speaker corpus.
//!
//! Each speaker is a small source-filter model: a pulse train at a wandering
//! fundamental through three cascaded formant resonators, alternating with
//! filtered noise bursts and short pauses. All randomness for a segment is
//! derived from `(seed, speaker, segment)` alone.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{self, Spectrogram, Waveform, HOP, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Segment counts reported for the full-scale broadcast-news protocol.
pub const REFERENCE_COUNTS: SplitCounts = SplitCounts {
    train: 38424,
    validation: 4803,
    test: 4886,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_speakers: usize,
    pub segments_per_speaker: usize,
    pub ratios: [f64; 3],
    pub segment_samples: usize,
    pub scale: Scale,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 1,
            n_speakers: 8,
            segments_per_speaker: 400,
            ratios: [0.8, 0.1, 0.1],
            segment_samples: 2 * SAMPLE_RATE,
            scale: Scale::Desk,
        }
    }
}

impl CorpusConfig {
    pub fn full() -> Self {
        CorpusConfig {
            n_speakers: 20,
            segments_per_speaker: 2406,
            scale: Scale::Full,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::invalid("corpus needs at least 2 speakers"));
        }
        if self.segment_samples <= dsp::WINDOW {
            return Err(Error::invalid("segments must be longer than one analysis window"));
        }
        split_counts(self.segments_per_speaker, self.ratios).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentRef {
    pub speaker: usize,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub n_speakers: usize,
    pub segments_per_speaker: usize,
    pub counts: SplitCounts,
    /// Present for full-scale corpora.
    pub reference_counts: Option<SplitCounts>,
    pub train: Vec<SegmentRef>,
    pub validation: Vec<SegmentRef>,
    pub test: Vec<SegmentRef>,
}

impl SplitManifest {
    pub fn list(&self, split: Split) -> &[SegmentRef] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

fn split_counts(n: usize, ratios: [f64; 3]) -> Result<SplitCounts> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let train = (ratios[0] * n as f64).round() as usize;
    let validation = (ratios[1] * n as f64).round() as usize;
    let test = n.saturating_sub(train + validation);
    if train == 0 || validation == 0 || test == 0 || train + validation + test != n {
        return Err(Error::invalid(format!("ratios {ratios:?} leave an empty split of {n} segments")));
    }
    Ok(SplitCounts { train, validation, test })
}

/// Per speaker, segment ids are shuffled and cut by `ratios`. Lists are
/// ordered by rank then speaker so that iteration alternates speakers.
pub fn build_split(n_speakers: usize, segments_per_speaker: usize, ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    let per = split_counts(segments_per_speaker, ratios)?;
    let orders: Vec<Vec<usize>> = (0..n_speakers)
        .map(|s| {
            let mut ids: Vec<usize> = (0..segments_per_speaker).collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(key(seed, &[0x5911, s as u64])));
            ids
        })
        .collect();
    let take = |lo: usize, hi: usize| -> Vec<SegmentRef> {
        (lo..hi)
            .flat_map(|rank| {
                orders.iter().enumerate().map(move |(speaker, ids)| SegmentRef {
                    speaker,
                    segment: ids[rank],
                })
            })
            .collect()
    };
    let (a, b) = (per.train, per.train + per.validation);
    Ok(SplitManifest {
        seed,
        n_speakers,
        segments_per_speaker,
        counts: SplitCounts {
            train: per.train * n_speakers,
            validation: per.validation * n_speakers,
            test: per.test * n_speakers,
        },
        reference_counts: None,
        train: take(0, a),
        validation: take(a, b),
        test: take(b, segments_per_speaker),
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a tuple of integers into an RNG seed.
pub fn key(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |h, &p| splitmix(h ^ splitmix(p)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: usize,
    pub base_pitch: f64,
    /// Relative F0 excursion within a syllable.
    pub pitch_wander: f64,
    pub formants: [f64; 3],
    pub bandwidths: [f64; 3],
    /// Voiced span length range in seconds.
    pub voiced_span: (f64, f64),
    pub unvoiced_prob: f64,
    pub fricative_center: f64,
    pub seed: u64,
}

/// Probability of a pause before each syllable and its length range in
/// seconds; tuned so that about 6% of 16 ms frames fall below -30 dB.
const PAUSE_PROB: f64 = 0.22;
const PAUSE_SPAN: (f64, f64) = (0.035, 0.11);

pub fn speaker_profiles(n_speakers: usize, seed: u64) -> Vec<SpeakerProfile> {
    let mut slots: Vec<usize> = (0..n_speakers).collect();
    slots.shuffle(&mut ChaCha8Rng::seed_from_u64(key(seed, &[0x9175])));
    let step = if n_speakers > 1 {
        (190.0 / (n_speakers - 1) as f64).max(9.0)
    } else {
        0.0
    };
    (0..n_speakers)
        .map(|s| {
            let pseed = key(seed, &[0x5bea, s as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(pseed);
            let base_pitch = 100.0 + step * slots[s] as f64 + rng.gen_range(-0.5..0.5);
            SpeakerProfile {
                speaker_id: s,
                base_pitch,
                pitch_wander: rng.gen_range(0.04..0.12),
                formants: [
                    rng.gen_range(300.0..850.0),
                    rng.gen_range(950.0..2200.0),
                    rng.gen_range(2350.0..3300.0),
                ],
                bandwidths: [
                    rng.gen_range(60.0..110.0),
                    rng.gen_range(80.0..140.0),
                    rng.gen_range(100.0..180.0),
                ],
                voiced_span: (rng.gen_range(0.08..0.12), rng.gen_range(0.18..0.28)),
                unvoiced_prob: rng.gen_range(0.2..0.5),
                fricative_center: rng.gen_range(2400.0..3600.0),
                seed: pseed,
            }
        })
        .collect()
}

/// Two-pole resonator with unit gain at DC.
#[derive(Debug, Clone, Copy, Default)]
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tune(&mut self, freq: f64, bw: f64) {
        let t = 1.0 / SAMPLE_RATE as f64;
        let r = (-std::f64::consts::PI * bw * t).exp();
        self.c = -r * r;
        self.b = 2.0 * r * (2.0 * std::f64::consts::PI * freq * t).cos();
        self.a = 1.0 - self.b - self.c;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn secs(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> usize {
    (rng.gen_range(lo..hi) * SAMPLE_RATE as f64) as usize
}

/// Raised-cosine fade of `ramp` samples at both ends of a span.
fn envelope(i: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    let edge = i.min(len - 1 - i);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
    }
}

/// Voiced excitation at a fixed fundamental shaped by the speaker's formants,
/// without pauses or noise. Used to inspect harmonic structure.
pub fn synth_voiced(profile: &SpeakerProfile, f0: f64, len: usize) -> Waveform {
    let mut res = [Resonator::default(); 3];
    for (r, (&f, &bw)) in res.iter_mut().zip(profile.formants.iter().zip(&profile.bandwidths)) {
        r.tune(f, bw);
    }
    let mut phase = 0.0;
    let mut glottal = 0.0;
    let samples: Vec<f64> = (0..len)
        .map(|_| {
            phase += f0 / SAMPLE_RATE as f64;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            glottal = 0.6 * glottal + pulse;
            res.iter_mut().fold(glottal, |x, r| r.step(x))
        })
        .collect();
    normalize(samples)
}

fn normalize(mut samples: Vec<f64>) -> Waveform {
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    let w = Waveform::new(samples).expect("finite synthesis");
    Waveform::from_pcm(&w.to_pcm())
}

/// One segment of `len` samples, quantized to 16 bits.
pub fn synth_segment(profile: &SpeakerProfile, segment_id: usize, corpus_seed: u64, len: usize) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(key(corpus_seed, &[0x5e9, profile.speaker_id as u64, segment_id as u64]));
    let mut voiced = vec![0.0; len];
    let mut noise = vec![0.0; len];
    // formant track, piecewise constant per syllable
    let mut track: Vec<(usize, [f64; 3])> = Vec::new();
    let ramp = SAMPLE_RATE / 100;
    let mut pos = 0;
    let mut phase = 0.0;
    while pos < len {
        if pos > 0 && rng.gen_bool(PAUSE_PROB) {
            pos += secs(&mut rng, PAUSE_SPAN);
        }
        if pos < len && rng.gen_bool(profile.unvoiced_prob) {
            let n = secs(&mut rng, (0.025, 0.07)).min(len - pos);
            for i in 0..n {
                noise[pos + i] = rng.gen_range(-1.0..1.0) * envelope(i, n, ramp / 2);
            }
            pos += n;
        }
        if pos >= len {
            break;
        }
        let n = secs(&mut rng, profile.voiced_span).min(len - pos);
        let vowel = [
            profile.formants[0] * rng.gen_range(0.9..1.1),
            profile.formants[1] * rng.gen_range(0.92..1.08),
            profile.formants[2] * rng.gen_range(0.95..1.05),
        ];
        track.push((pos, vowel));
        let start = profile.base_pitch * (1.0 + profile.pitch_wander * rng.gen_range(-1.0..1.0));
        let end = profile.base_pitch * (1.0 + profile.pitch_wander * rng.gen_range(-1.0..1.0));
        let gain = rng.gen_range(0.7..1.0);
        for i in 0..n {
            let f0 = start + (end - start) * i as f64 / n as f64;
            phase += f0 / SAMPLE_RATE as f64;
            if phase >= 1.0 {
                phase -= 1.0;
                voiced[pos + i] = gain * envelope(i, n, ramp);
            }
        }
        pos += n;
    }

    let mut res = [Resonator::default(); 3];
    let mut fric = Resonator::default();
    fric.tune(profile.fricative_center, 500.0);
    let mut next = 0;
    let mut glottal = 0.0;
    let mut voiced_out = vec![0.0; len];
    let mut noise_out = vec![0.0; len];
    for i in 0..len {
        if next < track.len() && track[next].0 == i {
            for (k, r) in res.iter_mut().enumerate() {
                r.tune(track[next].1[k], profile.bandwidths[k]);
            }
            next += 1;
        }
        glottal = 0.6 * glottal + voiced[i];
        voiced_out[i] = res.iter_mut().fold(glottal, |x, r| r.step(x));
        noise_out[i] = fric.step(noise[i]);
    }
    let vpeak = voiced_out.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    let npeak = noise_out.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    let samples = voiced_out
        .iter()
        .zip(&noise_out)
        .map(|(v, n)| v / vpeak + 0.25 * n / npeak)
        .collect();
    normalize(samples)
}

/// Fraction of non-overlapping 16 ms frames whose RMS lies more than
/// `threshold_db` below the loudest frame.
pub fn measure_silence_fraction(w: &Waveform, threshold_db: f64) -> f64 {
    let rms: Vec<f64> = w
        .samples()
        .chunks_exact(HOP)
        .map(|f| (f.iter().map(|v| v * v).sum::<f64>() / HOP as f64).sqrt())
        .collect();
    if rms.is_empty() {
        return 1.0;
    }
    let peak = rms.iter().copied().fold(0.0, f64::max);
    let floor = peak * 10f64.powf(threshold_db / 20.0);
    let quiet = rms.iter().filter(|&&r| peak == 0.0 || r < floor).count();
    quiet as f64 / rms.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub corpus_hash: String,
    pub split: SplitManifest,
    pub profiles: Vec<SpeakerProfile>,
    pub silence_fraction: f64,
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub mixture: Spectrogram,
    /// Compressed reference spectrograms, first source first.
    pub references: Vec<Spectrogram>,
    /// Speaker of each reference.
    pub speakers: Vec<usize>,
    /// Indicator over all speakers.
    pub targets: Vec<f64>,
    pub segments: Vec<SegmentRef>,
}

/// A synthesized or loaded corpus held in memory as 16-bit PCM.
pub struct Corpus {
    manifest: CorpusManifest,
    pcm: Vec<Vec<i16>>,
    by_speaker: [Vec<Vec<SegmentRef>>; 3],
}

fn segment_file(r: SegmentRef) -> String {
    format!("spk{}_seg{}.pcm", r.speaker, r.segment)
}

fn corpus_hash(cfg: &CorpusConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

impl Corpus {
    pub fn synthesize(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let mut split = build_split(cfg.n_speakers, cfg.segments_per_speaker, cfg.ratios, cfg.seed)?;
        if cfg.scale == Scale::Full {
            split.reference_counts = Some(REFERENCE_COUNTS);
        }
        let profiles = speaker_profiles(cfg.n_speakers, cfg.seed);
        let total = cfg.n_speakers * cfg.segments_per_speaker;
        let waves: Vec<Waveform> = (0..total)
            .into_par_iter()
            .map(|i| {
                let (s, k) = (i / cfg.segments_per_speaker, i % cfg.segments_per_speaker);
                synth_segment(&profiles[s], k, cfg.seed, cfg.segment_samples)
            })
            .collect();
        let silence = waves.iter().map(|w| measure_silence_fraction(w, -30.0)).sum::<f64>() / total as f64;
        let pcm = waves.iter().map(Waveform::to_pcm).collect();
        let manifest = CorpusManifest {
            config: cfg.clone(),
            corpus_hash: corpus_hash(cfg),
            split,
            profiles,
            silence_fraction: silence,
        };
        Ok(Self::from_parts(manifest, pcm))
    }

    fn from_parts(manifest: CorpusManifest, pcm: Vec<Vec<i16>>) -> Self {
        let n = manifest.config.n_speakers;
        let group = |list: &[SegmentRef]| {
            let mut out = vec![Vec::new(); n];
            for r in list {
                out[r.speaker].push(*r);
            }
            out
        };
        let sp = &manifest.split;
        let by_speaker = [group(&sp.train), group(&sp.validation), group(&sp.test)];
        Corpus {
            manifest,
            pcm,
            by_speaker,
        }
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.manifest.config
    }

    pub fn split(&self, split: Split) -> &[SegmentRef] {
        self.manifest.split.list(split)
    }

    pub fn waveform(&self, r: SegmentRef) -> Waveform {
        Waveform::from_pcm(&self.pcm[r.speaker * self.config().segments_per_speaker + r.segment])
    }

    /// Writes `manifest.json` and one PCM file per segment. Refuses a
    /// non-empty directory unless `force`.
    pub fn write(&self, dir: &Path, force: bool) -> Result<()> {
        if dir.exists() && fs::read_dir(dir).map_err(|e| Error::file(dir, e))?.next().is_some() && !force {
            return Err(Error::Config(format!("{} is not empty (use --force)", dir.display())));
        }
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let per = self.config().segments_per_speaker;
        for (i, samples) in self.pcm.iter().enumerate() {
            let r = SegmentRef {
                speaker: i / per,
                segment: i % per,
            };
            let path = dir.join(segment_file(r));
            let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_le_bytes()).collect();
            fs::write(&path, bytes).map_err(|e| Error::file(&path, e))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::file(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::MissingPrerequisite(format!("corpus manifest {}: {e}", path.display())))?;
        let manifest: CorpusManifest = serde_json::from_str(&text)?;
        let cfg = &manifest.config;
        let found = corpus_hash(cfg);
        if found != manifest.corpus_hash {
            return Err(Error::HashMismatch {
                what: "corpus manifest",
                expected: manifest.corpus_hash.clone(),
                found,
            });
        }
        let mut pcm = Vec::with_capacity(cfg.n_speakers * cfg.segments_per_speaker);
        for speaker in 0..cfg.n_speakers {
            for segment in 0..cfg.segments_per_speaker {
                let path = dir.join(segment_file(SegmentRef { speaker, segment }));
                let bytes = fs::read(&path).map_err(|e| Error::file(&path, e))?;
                if bytes.len() != 2 * cfg.segment_samples {
                    return Err(Error::invalid(format!("{}: truncated segment", path.display())));
                }
                pcm.push(bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect());
            }
        }
        Ok(Self::from_parts(manifest, pcm))
    }

    /// Loads `dir` when given, otherwise synthesizes in memory. A loaded
    /// corpus must match `cfg`.
    pub fn open(cfg: &CorpusConfig, dir: Option<&PathBuf>) -> Result<Self> {
        match dir {
            None => Self::synthesize(cfg),
            Some(dir) => {
                let corpus = Self::load(dir)?;
                let (expected, found) = (corpus_hash(cfg), corpus.manifest.corpus_hash.clone());
                if expected != found {
                    return Err(Error::HashMismatch {
                        what: "corpus",
                        expected,
                        found,
                    });
                }
                Ok(corpus)
            }
        }
    }

    /// Mixture whose first source is `split[index]`; the remaining sources
    /// are segments of distinct other speakers from the same split, drawn
    /// from an RNG keyed by `(seed, split, index)`.
    pub fn make_mixture(&self, split: Split, index: usize, n_sources: usize, seed: u64) -> Result<MixtureSample> {
        let n_speakers = self.config().n_speakers;
        if n_sources == 0 || n_sources > n_speakers || n_sources > crate::objectives::MAX_SOURCES {
            return Err(Error::invalid(format!("{n_sources} sources from {n_speakers} speakers")));
        }
        let list = self.split(split);
        let first = *list
            .get(index)
            .ok_or_else(|| Error::invalid(format!("mixture index {index} out of range for {} segments", list.len())))?;
        let mut rng = ChaCha8Rng::seed_from_u64(key(seed, &[split as u64, index as u64, n_sources as u64]));
        let others: Vec<usize> = (0..n_speakers).filter(|&s| s != first.speaker).collect();
        let pool = &self.by_speaker[split as usize];
        let mut segments = vec![first];
        for &s in others.choose_multiple(&mut rng, n_sources - 1) {
            segments.push(*pool[s].choose(&mut rng).expect("every speaker appears in every split"));
        }
        let waves: Vec<Waveform> = segments.iter().map(|&r| self.waveform(r)).collect();
        let mixture = dsp::compress(&dsp::stft_magnitude(&dsp::mix(&waves)?)?)?;
        let references = waves
            .iter()
            .map(|w| dsp::compress(&dsp::stft_magnitude(w)?))
            .collect::<Result<Vec<_>>>()?;
        let mut targets = vec![0.0; n_speakers];
        for r in &segments {
            targets[r.speaker] = 1.0;
        }
        Ok(MixtureSample {
            mixture,
            references,
            speakers: segments.iter().map(|r| r.speaker).collect(),
            targets,
            segments,
        })
    }

    /// Accuracy of a nearest-centroid classifier over mean compressed spectra:
    /// centroids from the training split, scored on `eval`.
    pub fn nearest_centroid_accuracy(&self, eval: Split) -> Result<f64> {
        let feature = |r: SegmentRef| -> Result<Vec<f64>> {
            let s = dsp::compress(&dsp::stft_magnitude(&self.waveform(r))?)?;
            Ok((0..s.bins())
                .map(|b| (0..s.frames()).map(|t| s.get(b, t)).sum::<f64>() / s.frames() as f64)
                .collect())
        };
        let n = self.config().n_speakers;
        let mut centroids = vec![vec![0.0; dsp::BINS]; n];
        let mut counts = vec![0usize; n];
        for &r in self.split(Split::Train) {
            for (c, f) in centroids[r.speaker].iter_mut().zip(feature(r)?) {
                *c += f;
            }
            counts[r.speaker] += 1;
        }
        for (c, &k) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= k as f64);
        }
        let list = self.split(eval);
        let mut correct = 0;
        for &r in list {
            let f = feature(r)?;
            let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..n).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            correct += (best == r.speaker) as usize;
        }
        Ok(correct as f64 / list.len() as f64)
    }
}
