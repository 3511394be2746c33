use cocktail::classifier::*;
use cocktail::corpus::{Corpus, CorpusConfig, Split};
use cocktail::dsp::{Domain, Spectrogram, BINS};
use cocktail::layers::Ctx;
use cocktail::selfcheck::{Composite, CompositeCase};
use cocktail::train::{train_step, Models, Optimizers, Stage};
use cocktail::RunConfig;
use cocktail_tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spectrogram(frames: usize, seed: u64) -> Spectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Spectrogram::new(Domain::Compressed, frames, (0..BINS * frames).map(|_| rng.gen_range(0.0..3.0)).collect()).unwrap()
}

fn column_sums(p: &PredictionMatrix) -> Vec<f64> {
    (0..p.n_channels()).map(|c| p.values.iter().map(|row| row[c]).sum()).collect()
}

#[test]
fn chunk_counts_and_overlap() {
    assert_eq!(chunk_starts(124, 20, 1).unwrap().len(), 105);
    assert_eq!(chunk_starts(124, 20, 4).unwrap(), (0..=26).map(|k| 4 * k).collect::<Vec<_>>());
    assert!(chunk_starts(19, 20, 1).is_err());

    let x = spectrogram(24, 1);
    let whole = chunk(&x, 24, 1).unwrap();
    assert_eq!(whole.len(), 1);
    assert_eq!(whole[0], x);

    let parts = chunk(&x, 20, 1).unwrap();
    assert_eq!(parts.len(), 5);
    for pair in parts.windows(2) {
        for b in 0..BINS {
            for t in 0..19 {
                assert_eq!(pair[0].get(b, t + 1), pair[1].get(b, t));
            }
        }
    }
    assert!(chunk(&x, 25, 1).is_err());
}

#[test]
fn presets() {
    assert_eq!(ResNetPreset::Resnet10.depth(), 10);
    assert_eq!(ResNetPreset::Resnet34.depth(), 34);
    let desk = ClassifierConfig::desk(8);
    assert_eq!((desk.chunk_frames, desk.chunk_shift_frames), (20, 1));
    assert_eq!(desk.pooling, GlobalPool::Avg);
    let reference = ClassifierConfig::reference(20);
    assert_eq!((reference.rnn_hidden, reference.rnn_layers, reference.fc_hidden, reference.fc_layers), (200, 3, 800, 3));
    assert!(ClassifierConfig::desk(1).validate().is_err());
    assert!(ClassifierConfig { chunk_frames: 0, ..desk }.validate().is_err());
}

#[test]
fn convolutional_output_is_column_stochastic() {
    for pooling in [GlobalPool::Avg, GlobalPool::Max] {
        let cfg = ClassifierConfig { pooling, ..ClassifierConfig::desk(8) };
        let clf = Classifier::<f32>::new(&cfg, 2);
        let p = clf.predict(&[spectrogram(124, 3), spectrogram(124, 4)]).unwrap();
        assert_eq!((p.n_speakers(), p.n_channels()), (8, 2));
        for s in column_sums(&p) {
            assert!((s - 1.0).abs() < 1e-6, "{pooling:?}: {s}");
        }
        assert!(p.values.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn recurrent_output_is_column_stochastic() {
    let clf = Classifier::<f32>::new(&ClassifierConfig::desk(8).recurrent(), 5);
    let p = clf.predict(&[spectrogram(30, 6), spectrogram(30, 7), spectrogram(30, 8)]).unwrap();
    assert_eq!((p.n_speakers(), p.n_channels()), (8, 3));
    for s in column_sums(&p) {
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
    assert!(clf.predict(&[spectrogram(19, 1)]).is_err());
}

#[test]
fn dropping_one_chunk_moves_output_by_at_most_one_over_n() {
    let cfg = ClassifierConfig::desk(8).recurrent();
    let mut store = ParamStore::<f64>::new();
    let net = ClassifierNet::build(&cfg, &mut store, 9);
    let ClassifierNet::Recurrent(rnn) = &net else { panic!("recurrent variant expected") };
    let mut tape = Tape::new();
    let x = tape.constant(spectrogram(32, 10).to_tensor());
    let mut cx = Ctx::new(&mut tape, &store);
    let chunks = rnn.chunk_probabilities(&mut cx, x).unwrap();
    let out = net.classify(&mut cx, x).unwrap();
    let (k, s) = (tape.shape(chunks)[0], tape.shape(chunks)[1]);
    assert_eq!(k, 13);
    let probs = tape.value(chunks).data().to_vec();
    let out = tape.value(out).data().to_vec();
    for i in 0..s {
        let mean = (0..k).map(|j| probs[j * s + i]).sum::<f64>() / k as f64;
        assert!((mean - out[i]).abs() < 1e-12);
    }
    for drop in 0..k {
        let zeroed: Vec<f64> = (0..s)
            .map(|i| (0..k).filter(|&j| j != drop).map(|j| probs[j * s + i]).sum::<f64>() / k as f64)
            .collect();
        let change = zeroed.iter().zip(&out).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(change <= 1.0 / k as f64, "chunk {drop}: {change}");
    }
}

fn siamese(variant: ClassifierVariant, channels: &[Spectrogram]) -> Tensor<f32> {
    let cfg = ClassifierConfig { variant, ..ClassifierConfig::desk(8) };
    let clf = Classifier::<f32>::new(&cfg, 11);
    let data: Vec<f64> = channels.iter().flat_map(|c| c.data().to_vec()).collect();
    let frames = channels[0].frames();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_f64(vec![channels.len(), BINS, frames], &data).unwrap());
    let y = clf.siamese_apply(&mut tape, x).unwrap();
    tape.value(y).clone()
}

#[test]
fn siamese_apply_is_channel_equivariant_bitwise() {
    for variant in [ClassifierVariant::Convolutional, ClassifierVariant::Recurrent] {
        let ch: Vec<Spectrogram> = (0..3).map(|i| spectrogram(24, 20 + i)).collect();
        let base = siamese(variant, &ch);
        let permuted = siamese(variant, &[ch[2].clone(), ch[0].clone(), ch[1].clone()]);
        let row = |t: &Tensor<f32>, c: usize| t.data()[c * 8..(c + 1) * 8].to_vec();
        for (new, old) in [(0, 2), (1, 0), (2, 1)] {
            let (a, b) = (row(&permuted, new), row(&base, old));
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{variant:?}");
        }
        let dup = siamese(variant, &[ch[1].clone(), ch[1].clone()]);
        assert_eq!(row(&dup, 0), row(&dup, 1));
    }
}

#[test]
fn prediction_matrix_layout() {
    let t = Tensor::<f64>::from_f64(vec![2, 3], &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
    let p = PredictionMatrix::from_tensor(&t);
    assert_eq!(p.values, vec![vec![0.2, 0.6], vec![0.5, 0.1], vec![0.3, 0.3]]);
    assert_eq!(p.pooled(), vec![0.6, 0.5, 0.3]);
    assert_eq!(p.to_tensor::<f64>(), t);
}

#[test]
fn classifier_gradients_at_32_bit() {
    for kind in [Composite::ConvClassifier, Composite::RecurrentClassifier] {
        let (case, store) = CompositeCase::build(kind, 22);
        let report = case.check(&store, 10).unwrap();
        assert!(report.max_rel_err < 1e-3, "{}: {:?}", kind.name(), report.worst());
    }
}

#[test]
fn either_variant_trains_one_step() {
    let corpus = Corpus::synthesize(&CorpusConfig {
        n_speakers: 4,
        segments_per_speaker: 10,
        segment_samples: 256 + 127 * 32,
        ..Default::default()
    })
    .unwrap();
    let sample = corpus.make_mixture(Split::Train, 0, 2, 1).unwrap();
    for variant in [ClassifierVariant::Convolutional, ClassifierVariant::Recurrent] {
        let mut cfg = RunConfig::desk();
        cfg.corpus = corpus.config().clone();
        cfg.classifier = ClassifierConfig {
            variant,
            ..ClassifierConfig::desk(4)
        };
        let mut models = Models::<f32>::new(&cfg);
        let before = models.classifier.store.clone();
        let mut opt = Optimizers::for_stage(&cfg, Stage::PretrainClassifier, &mut models);
        let losses = train_step(&mut models, &mut opt, Stage::PretrainClassifier, &[sample.clone()], 20.0).unwrap();
        assert!(losses.cce.unwrap().is_finite());
        let changed = before
            .iter()
            .zip(models.classifier.store.iter())
            .any(|(a, b)| a.value != b.value);
        assert!(changed, "{variant:?}");
    }
}
