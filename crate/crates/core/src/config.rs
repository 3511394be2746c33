//! Run configuration: one JSON document covering corpus, models and
//! training. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use cocktail_tensor::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::extractor::ExtractorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub seed: u64,
    pub lr_pretrain: f64,
    pub lr_joint: f64,
    pub batch_size: usize,
    pub mixtures_per_epoch: usize,
    pub extractor_epochs: usize,
    pub classifier_epochs: usize,
    pub joint_epochs: usize,
    pub patience: usize,
    /// Weight of the reconstruction term in the joint loss. Defaults to 20
    /// for two sources and 300 for three or more.
    pub alpha: Option<f64>,
    /// Validation mixtures per evaluation; `None` uses every validation segment.
    pub val_mixtures: Option<usize>,
    pub checkpoint_dir: PathBuf,
    /// Corpus directory written by `gen-corpus`; synthesized in memory when unset.
    pub corpus_dir: Option<PathBuf>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            seed: 7,
            lr_pretrain: 1e-3,
            lr_joint: 1e-4,
            batch_size: 16,
            mixtures_per_epoch: 320,
            extractor_epochs: 2,
            classifier_epochs: 3,
            joint_epochs: 1,
            patience: 5,
            alpha: None,
            val_mixtures: Some(96),
            checkpoint_dir: PathBuf::from("runs/desk"),
            corpus_dir: None,
        }
    }
}

impl TrainerConfig {
    pub fn alpha_for(&self, n_sources: usize) -> f64 {
        self.alpha.unwrap_or(if n_sources <= 2 { 20.0 } else { 300.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub precision: DType,
    pub corpus: CorpusConfig,
    pub extractor: ExtractorConfig,
    pub classifier: ClassifierConfig,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn digest(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

impl RunConfig {
    /// Small models and an 8-speaker corpus sized for a single workstation.
    pub fn desk() -> Self {
        RunConfig {
            precision: DType::F32,
            corpus: CorpusConfig::default(),
            extractor: ExtractorConfig::desk(2),
            classifier: ClassifierConfig::desk(8),
            trainer: TrainerConfig::default(),
        }
    }

    /// Layer sizes of the full-scale system with a 20-speaker corpus.
    pub fn reference() -> Self {
        RunConfig {
            precision: DType::F32,
            corpus: CorpusConfig::full(),
            extractor: ExtractorConfig::reference(2),
            classifier: ClassifierConfig::reference(20),
            trainer: TrainerConfig::default(),
        }
    }

    pub fn n_sources(&self) -> usize {
        self.extractor.n_sources
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.corpus.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.extractor.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.classifier.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.classifier.n_speakers != self.corpus.n_speakers {
            return bad(format!(
                "classifier.n_speakers = {} but corpus has {} speakers",
                self.classifier.n_speakers, self.corpus.n_speakers
            ));
        }
        if self.n_sources() > self.corpus.n_speakers {
            return bad(format!("{} sources need at least as many speakers", self.n_sources()));
        }
        let t = &self.trainer;
        if t.batch_size == 0 || t.mixtures_per_epoch == 0 {
            return bad("batch_size and mixtures_per_epoch must be positive".into());
        }
        if t.extractor_epochs == 0 || t.classifier_epochs == 0 || t.joint_epochs == 0 {
            return bad("every stage needs at least one epoch".into());
        }
        if t.val_mixtures == Some(0) {
            return bad("val_mixtures must be positive".into());
        }
        if !(t.lr_pretrain > 0.0 && t.lr_joint > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if let Some(a) = t.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return bad(format!("alpha must be positive, got {a}"));
            }
        }
        Ok(())
    }

    /// Digest of the whole resolved config.
    pub fn hash(&self) -> String {
        digest(self)
    }

    /// Digest of everything that determines parameter shapes and meaning.
    pub fn model_hash(&self) -> String {
        digest(&(&self.extractor, &self.classifier))
    }

    pub fn corpus_hash(&self) -> String {
        digest(&self.corpus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = RunConfig::desk();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"trainer": {"learning_rate": 0.1}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"trainer": {"batch_size": 4}}"#).unwrap();
        assert_eq!(cfg.trainer.batch_size, 4);
        assert_eq!(cfg.extractor, RunConfig::desk().extractor);
    }

    #[test]
    fn model_hash_tracks_source_count() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.extractor = ExtractorConfig::desk(3);
        assert_ne!(a.model_hash(), b.model_hash());
        let mut c = a.clone();
        c.trainer.extractor_epochs += 1;
        assert_eq!(a.model_hash(), c.model_hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn alpha_defaults() {
        let t = TrainerConfig::default();
        assert_eq!(t.alpha_for(2), 20.0);
        assert_eq!(t.alpha_for(3), 300.0);
    }
}
