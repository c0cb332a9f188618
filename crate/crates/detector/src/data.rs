//! Turning forged instances into model-ready examples.

use std::collections::HashMap;
use std::sync::Mutex;

use incoforge_core::embedder::EmbeddingProvider;
use incoforge_core::forge::Instance;
use incoforge_core::similarity::l2_normalize;
use incoforge_core::{Mode, Sentence};

use crate::config::InputMode;
use crate::error::{DetectorError, Result};
use crate::model::ModelInput;
use crate::scalar::Scalar;
use crate::vocab::{build_token_input, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub id: String,
    pub task: Mode,
    pub input: ModelInput<T>,
    /// Sequence position read by the heads for each label.
    pub reps: Vec<usize>,
    pub labels: Vec<u8>,
    /// `(label index, unit-norm target embedding)` for corrupted positions.
    pub sm_targets: Vec<(usize, Vec<T>)>,
}

impl<T: Scalar> Example<T> {
    pub fn cast<U: Scalar>(&self) -> Example<U> {
        Example {
            id: self.id.clone(),
            task: self.task,
            input: self.input.cast(),
            reps: self.reps.clone(),
            labels: self.labels.clone(),
            sm_targets: self
                .sm_targets
                .iter()
                .map(|(k, v)| (*k, v.iter().map(|x| U::of(x.f64())).collect()))
                .collect(),
        }
    }

    pub fn with_labels(&self, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), self.labels.len());
        Self { labels, ..self.clone() }
    }
}

/// Embeds sentences (memoized by text) and lays out inputs for one mode.
pub struct Featurizer<'a> {
    pub mode: InputMode,
    pub provider: &'a EmbeddingProvider,
    pub vocab: Option<&'a Vocab>,
    pub max_positions: usize,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl<'a> Featurizer<'a> {
    pub fn sentence(provider: &'a EmbeddingProvider, max_positions: usize) -> Self {
        Self { mode: InputMode::Sentence, provider, vocab: None, max_positions, cache: Mutex::new(HashMap::new()) }
    }

    pub fn token(provider: &'a EmbeddingProvider, vocab: &'a Vocab, max_positions: usize) -> Self {
        Self { mode: InputMode::Token, provider, vocab: Some(vocab), max_positions, cache: Mutex::new(HashMap::new()) }
    }

    pub fn embed(&self, s: &Sentence) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.lock().expect("embedding cache").get(&s.text) {
            return Ok(v.clone());
        }
        let v = self.provider.embed(s)?.0;
        self.cache.lock().expect("embedding cache").insert(s.text.clone(), v.clone());
        Ok(v)
    }

    fn target(&self, sentences: &[&Sentence]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.provider.dim()];
        for s in sentences {
            for (a, x) in acc.iter_mut().zip(self.embed(s)?) {
                *a += x;
            }
        }
        l2_normalize(&mut acc)?;
        Ok(acc)
    }

    pub fn prepare<T: Scalar>(&self, inst: &Instance) -> Result<Example<T>> {
        let sentences = inst.sentences();
        let labels = inst.labels().to_vec();
        let n_labels = labels.len();
        let expected = match inst.mode() {
            Mode::Msd => sentences.len().saturating_sub(1),
            Mode::Dsd => sentences.len(),
        };
        if n_labels != expected || n_labels == 0 {
            return Err(DetectorError::Invalid(format!(
                "instance {} has {n_labels} labels for {} sentences",
                inst.id(),
                sentences.len()
            )));
        }
        let (input, reps) = match self.mode {
            InputMode::Sentence => {
                if sentences.len() > self.max_positions {
                    return Err(DetectorError::SequenceTooLong { len: sentences.len(), max: self.max_positions });
                }
                let mut data = Vec::with_capacity(sentences.len() * self.provider.dim());
                for s in sentences {
                    data.extend(self.embed(s)?.into_iter().map(T::of));
                }
                (ModelInput::Sentences { data, n: sentences.len() }, (0..n_labels).collect())
            }
            InputMode::Token => {
                let vocab = self.vocab.ok_or_else(|| DetectorError::Invalid("token mode needs a vocabulary".into()))?;
                let lay = build_token_input(sentences, vocab, self.max_positions)?;
                (ModelInput::Tokens(lay.ids), lay.seps[..n_labels].to_vec())
            }
        };
        let mut sm_targets = Vec::new();
        for (k, group) in inst.sm_targets() {
            if labels.get(k) == Some(&1) {
                sm_targets.push((k, self.target(&group)?.into_iter().map(T::of).collect()));
            }
        }
        Ok(Example { id: inst.id().to_string(), task: inst.mode(), input, reps, labels, sm_targets })
    }

    pub fn prepare_all<T: Scalar>(&self, instances: &[Instance]) -> Result<Vec<Example<T>>> {
        instances.iter().map(|i| self.prepare(i)).collect()
    }
}
