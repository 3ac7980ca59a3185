//! Run configuration: one JSON document covering every stage of the
//! workflow. Missing keys take defaults, unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::CorpusConfig;
use crate::error::{Error, Result};
use crate::inference::{BeamConfig, FinetuneConfig};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub sentinels: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { vocab_size: 512, sentinels: 8 }
    }
}

/// Downstream question-answering task sizes and optimizer budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub max_answer_len: usize,
    pub finetune: FinetuneConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { n_train: 2000, n_eval: 300, max_answer_len: 4, finetune: FinetuneConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_len: usize,
    /// Forced decoder prefix; empty for plain captioning.
    pub prompt: String,
    /// Beam search instead of greedy decoding when set.
    pub beam: Option<BeamConfig>,
    /// Cap on evaluated examples per split; `None` evaluates all.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_len: 16, prompt: String::new(), beam: None, limit: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed, copied into every stage by [`RunConfig::with_seed`].
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vqa: TaskConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::toy()
    }
}

impl RunConfig {
    /// The desk-scale configuration used by the acceptance runs. Training
    /// keeps the 8:1 pair-to-document mix at 24 + 3 per batch and uses a
    /// higher peak rate than the large-scale 5e-4, which is too slow for a
    /// 5k-step budget.
    pub fn toy() -> Self {
        RunConfig {
            seed: 0,
            corpus: CorpusConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig { peak_lr: 2e-3, pairs_per_batch: 24, docs_per_batch: 3, ..TrainConfig::default() },
            vqa: TaskConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.train.seed = seed;
        self.vqa.finetune.seed = seed;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Every problem found, one message per failing section.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.corpus.holdout_combos() {
            out.push(format!("corpus: {e}"));
        }
        if self.corpus.grid < 2 || !self.corpus.image_size.is_multiple_of(self.corpus.grid.max(1)) {
            out.push(format!(
                "corpus: image_size {} must be a multiple of grid {} (grid >= 2)",
                self.corpus.image_size, self.corpus.grid
            ));
        }
        if self.corpus.image_size != self.model.image_hw[0] || self.corpus.image_size != self.model.image_hw[1] {
            out.push(format!(
                "model: image_hw {:?} does not match corpus image_size {}",
                self.model.image_hw, self.corpus.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.corpus.noise_rate) {
            out.push(format!("corpus: noise_rate {} outside [0, 1]", self.corpus.noise_rate));
        }
        if self.tokenizer.vocab_size < 16 {
            out.push(format!("tokenizer: vocab_size {} below 16", self.tokenizer.vocab_size));
        }
        let mut model = self.model.clone();
        model.vocab = self.tokenizer.vocab_size.max(1);
        let mut check = |section: &str, r: Result<()>| {
            if let Err(e) = r {
                out.push(format!("{section}: {e}"));
            }
        };
        check("model", model.validate());
        check("train", self.train.validate());
        if self.corpus.n_pairs == 0 && self.train.pairs_per_batch > 0 {
            out.push("train: pairs_per_batch > 0 but the corpus has no pairs".into());
        }
        if self.corpus.n_docs == 0 && self.train.docs_per_batch > 0 {
            out.push("train: docs_per_batch > 0 but the corpus has no documents".into());
        }
        if self.vqa.finetune.batch == 0 {
            out.push("vqa: finetune batch must be positive".into());
        }
        if self.eval.beam.is_some_and(|b| b.width == 0) {
            out.push("eval: beam width must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}
