//! The trainable bundle: backbone weights, the optional text tower, and
//! the vocabulary that turns captions into token ids.
//!
//! A bundle saves as one checkpoint directory: `manifest.json` plus
//! `weights.bin` from the tensor store, and `vocab.json` whenever the
//! fusion mode consumes text. Loading rebuilds an identical bundle, so
//! evaluation never depends on the training process staying alive.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, init_model_params, ModelConfig, Segmentation};
use crate::data::{CaptionGrammar, Sample};
use crate::tensor::{load_checkpoint, save_checkpoint, Elem, ParameterStore, Tape, Tensor, Var};
use crate::text::{encode_text, init_text_params, tokenize, TextConfig, TokenSequence, Vocabulary};

use super::{HarnessError, Result};

/// Token capacity per caption. The grammar's longest sentence is seven
/// words, so twelve leaves padding room without wasted compute.
pub const CAPTION_SEQ_LEN: usize = 12;
/// Attention depth of the caption encoder.
pub const TEXT_BLOCKS: usize = 2;
/// Vocabulary sidecar written next to the checkpoint manifest.
const VOCAB_FILE: &str = "vocab.json";

/// Checkpoint-embedded description of the bundle layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleConfig {
    model: ModelConfig,
    text: Option<TextConfig>,
}

/// A complete model: segmentation backbone, caption tower when the
/// fusion mode needs one, and every parameter in a single store.
#[derive(Debug, Clone)]
pub struct Model<T: Elem> {
    pub config: ModelConfig,
    pub text: Option<TextConfig>,
    pub vocab: Option<Vocabulary>,
    pub store: ParameterStore<T>,
}

impl<T: Elem> Model<T> {
    /// Fresh bundle with every parameter drawn from `seed`. The
    /// vocabulary covers the full caption grammar, so token ids do not
    /// depend on which samples a dataset happens to contain.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_model_params(&config, &mut store, &mut rng)?;

        let (text, vocab) = if config.fusion.requires_text() {
            let grammar = CaptionGrammar;
            let corpus: Vec<String> = grammar
                .all_tuples()
                .iter()
                .map(|t| grammar.render(t))
                .collect();
            let vocab = Vocabulary::from_corpus(&corpus);
            let cfg = TextConfig {
                vocab_size: vocab.size(),
                seq_len: CAPTION_SEQ_LEN,
                dim: config.d_text,
                blocks: TEXT_BLOCKS,
            };
            init_text_params(&cfg, &mut store, &mut rng);
            (Some(cfg), Some(vocab))
        } else {
            (None, None)
        };

        Ok(Model {
            config,
            text,
            vocab,
            store,
        })
    }

    /// Tokenized caption batch, or `None` when the model has no text
    /// tower. Caption count must match the image batch downstream.
    fn token_batch(&self, captions: &[&str]) -> Result<Option<Vec<TokenSequence>>> {
        let (Some(cfg), Some(vocab)) = (&self.text, &self.vocab) else {
            return Ok(None);
        };
        let seqs = captions
            .iter()
            .map(|c| tokenize(c, vocab, cfg.seq_len))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Some(seqs))
    }

    /// Segmentation logits `[B, 2, H, W]` for an image batch already on
    /// the tape. Captions feed the text tower only when fusion wants it.
    pub fn logits(&self, tape: &mut Tape<T>, images: Var, captions: &[&str]) -> Result<Var> {
        let text = match self.token_batch(captions)? {
            Some(seqs) => Some(encode_text(
                tape,
                &self.store,
                &seqs,
                self.text.as_ref().expect("token batch implies text config"),
            )?),
            None => None,
        };
        let pyramid = backbone::encode(tape, &self.store, images, &self.config)?;
        Ok(backbone::decode(
            tape,
            &self.store,
            &pyramid,
            text,
            &self.config,
        )?)
    }

    /// Pooled caption embeddings `[B, D]` as a plain tensor, computed on
    /// a scratch tape. `None` when the model takes no text.
    pub fn pooled_text(&self, captions: &[&str]) -> Result<Option<Tensor<T>>> {
        let Some(seqs) = self.token_batch(captions)? else {
            return Ok(None);
        };
        let cfg = self.text.as_ref().expect("token batch implies text config");
        let mut tape = Tape::new();
        let pooled = encode_text(&mut tape, &self.store, &seqs, cfg)?;
        Ok(Some(tape.value(pooled).clone()))
    }

    /// Forward inference: probabilities and thresholded masks for a
    /// batch of images with their captions.
    pub fn segment(&self, images: &Tensor<T>, captions: &[&str]) -> Result<Segmentation<T>> {
        let text = self.pooled_text(captions)?;
        Ok(backbone::segment(
            &self.store,
            images,
            text.as_ref(),
            &self.config,
        )?)
    }

    /// Writes the checkpoint directory: tensor store, layout config, and
    /// the vocabulary sidecar when captions are in play.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let bundle = BundleConfig {
            model: self.config.clone(),
            text: self.text,
        };
        save_checkpoint(dir, &self.store, &serde_json::to_value(&bundle)?)?;
        if let Some(vocab) = &self.vocab {
            vocab.save(&dir.join(VOCAB_FILE))?;
        }
        Ok(())
    }

    /// Rebuilds a bundle from a checkpoint directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let (store, config) = load_checkpoint::<T>(dir)?;
        let bundle: BundleConfig = serde_json::from_value(config)?;
        let vocab = match &bundle.text {
            Some(_) => Some(Vocabulary::load(&dir.join(VOCAB_FILE))?),
            None => None,
        };
        if bundle.model.fusion.requires_text() != bundle.text.is_some() {
            return Err(HarnessError::Config(
                "checkpoint text tower does not match its fusion mode".into(),
            ));
        }
        Ok(Model {
            config: bundle.model,
            text: bundle.text,
            vocab,
            store,
        })
    }
}

/// Stacks image bytes into a `[B, 1, H, W]` tensor of unit-range gray
/// levels. Every sample must share the model's image size.
pub fn images_tensor<T: Elem>(samples: &[&Sample], image_size: usize) -> Result<Tensor<T>> {
    let b = samples.len();
    let mut data = Vec::with_capacity(b * image_size * image_size);
    for s in samples {
        if s.height != image_size || s.width != image_size {
            return Err(HarnessError::Config(format!(
                "sample {} is {}x{}, model wants {image_size}x{image_size}",
                s.sample_id, s.height, s.width
            )));
        }
        data.extend(s.image_f32().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(Tensor::from_vec(vec![b, 1, image_size, image_size], data)?)
}

/// Stacks lesion masks into a `[B, H, W]` tensor of exact zeros and
/// ones, the target layout the loss expects.
pub fn targets_tensor<T: Elem>(samples: &[&Sample], image_size: usize) -> Result<Tensor<T>> {
    let b = samples.len();
    let mut data = Vec::with_capacity(b * image_size * image_size);
    for s in samples {
        data.extend(s.mask_f32().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(Tensor::from_vec(vec![b, image_size, image_size], data)?)
}

#[cfg(test)]
mod tests {
    use tempfile::tempdir;

    use crate::backbone::SEG_CLASSES;
    use crate::data::{generate_dataset, GenerationConfig};
    use crate::fusion::FusionMode;

    use super::*;

    fn tiny_config(fusion: FusionMode) -> ModelConfig {
        let mut cfg = ModelConfig::tiny();
        cfg.fusion = fusion;
        cfg
    }

    fn tiny_dataset(size: usize) -> Vec<Sample> {
        let cfg = GenerationConfig {
            seed: 5,
            ambiguity: 0,
            image_size: size,
            train: 10,
            val: 4,
            test: 4,
            n_folds: 5,
        };
        generate_dataset(&cfg).unwrap()
    }

    #[test]
    fn init_registers_text_tower_only_when_fusion_wants_it() {
        let with_text = Model::<f32>::init(tiny_config(FusionMode::StageAdd), 3).unwrap();
        assert!(with_text.text.is_some());
        assert!(with_text.vocab.is_some());
        assert!(with_text.store.names().any(|n| n.starts_with("text.")));
        let tcfg = with_text.text.unwrap();
        assert_eq!(tcfg.dim, with_text.config.d_text);
        assert_eq!(tcfg.seq_len, CAPTION_SEQ_LEN);

        let plain = Model::<f32>::init(tiny_config(FusionMode::None), 3).unwrap();
        assert!(plain.text.is_none());
        assert!(plain.vocab.is_none());
        assert!(!plain.store.names().any(|n| n.starts_with("text.")));
    }

    #[test]
    fn vocabulary_covers_every_grammar_caption_without_unk() {
        let model = Model::<f32>::init(tiny_config(FusionMode::StageAdd), 3).unwrap();
        let vocab = model.vocab.as_ref().unwrap();
        let grammar = CaptionGrammar;
        for tuple in grammar.all_tuples() {
            let caption = grammar.render(&tuple);
            let seq = tokenize(&caption, vocab, CAPTION_SEQ_LEN).unwrap();
            assert!(
                seq.ids().iter().all(|&id| id != crate::text::UNK_ID),
                "caption `{caption}` hit UNK"
            );
        }
    }

    #[test]
    fn logits_match_model_geometry() {
        let model = Model::<f32>::init(tiny_config(FusionMode::StageAdd), 7).unwrap();
        let size = model.config.image_size;
        let samples = tiny_dataset(size);
        let refs: Vec<&Sample> = samples.iter().take(2).collect();
        let images = images_tensor::<f32>(&refs, size).unwrap();
        let captions: Vec<&str> = refs.iter().map(|s| s.caption.as_str()).collect();

        let mut tape = Tape::new();
        let img = tape.constant(images);
        let out = model.logits(&mut tape, img, &captions).unwrap();
        assert_eq!(tape.shape(out), &[2, SEG_CLASSES, size, size]);
    }

    #[test]
    fn checkpoint_round_trip_preserves_weights_and_predictions() {
        let model = Model::<f32>::init(tiny_config(FusionMode::StageAdd), 11).unwrap();
        let size = model.config.image_size;
        let samples = tiny_dataset(size);
        let refs: Vec<&Sample> = samples.iter().take(2).collect();
        let images = images_tensor::<f32>(&refs, size).unwrap();
        let captions: Vec<&str> = refs.iter().map(|s| s.caption.as_str()).collect();
        let before = model.segment(&images, &captions).unwrap();

        let dir = tempdir().unwrap();
        model.save(dir.path()).unwrap();
        assert!(dir.path().join("vocab.json").exists());
        let back = Model::<f32>::load(dir.path()).unwrap();

        assert_eq!(back.config, model.config);
        assert_eq!(back.text, model.text);
        assert_eq!(
            back.store.names().collect::<Vec<_>>(),
            model.store.names().collect::<Vec<_>>()
        );
        let after = back.segment(&images, &captions).unwrap();
        assert_eq!(
            before.probabilities.data(),
            after.probabilities.data(),
            "reloaded weights must reproduce the exact forward pass"
        );
    }

    #[test]
    fn checkpoint_without_text_has_no_vocab_sidecar() {
        let model = Model::<f32>::init(tiny_config(FusionMode::None), 11).unwrap();
        let dir = tempdir().unwrap();
        model.save(dir.path()).unwrap();
        assert!(!dir.path().join("vocab.json").exists());
        let back = Model::<f32>::load(dir.path()).unwrap();
        assert!(back.vocab.is_none());
    }

    #[test]
    fn batch_tensors_validate_sample_geometry() {
        let samples = tiny_dataset(32);
        let refs: Vec<&Sample> = samples.iter().take(2).collect();
        let images = images_tensor::<f32>(&refs, 32).unwrap();
        assert_eq!(images.shape(), &[2, 1, 32, 32]);
        assert!(images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        let targets = targets_tensor::<f32>(&refs, 32).unwrap();
        assert_eq!(targets.shape(), &[2, 32, 32]);
        assert!(targets.data().iter().all(|&v| v == 0.0 || v == 1.0));

        let err = images_tensor::<f32>(&refs, 64).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }
}
