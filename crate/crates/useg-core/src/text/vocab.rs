//! Word-level vocabulary and caption tokenizer.
//!
//! Captions come from a closed grammar, so tokens are whole lowercase
//! words. Ids are dense: PAD=0, UNK=1, then every corpus token in
//! lexicographic order. The same corpus therefore always produces the
//! same vocabulary.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::{Result, TextError};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token-to-id map with dense ids in `[0, size)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds the vocabulary from a caption corpus. Corpus order does not
    /// matter: tokens are deduplicated and assigned ids lexicographically
    /// after the two reserved slots.
    pub fn from_corpus<I, S>(corpus: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: BTreeSet<String> = corpus
            .into_iter()
            .flat_map(|caption| split_tokens(caption.as_ref()))
            .collect();
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(words);
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { ids, tokens }
    }

    /// Number of ids, reserved slots included.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Id for a token, or UNK when the token is out of vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Serializes as a JSON object `{token: id}` with sorted keys.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = serde_json::to_string_pretty(&self.ids)?;
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let ids: BTreeMap<String, usize> = serde_json::from_str(&body)?;
        let mut tokens = vec![String::new(); ids.len()];
        for (token, &id) in &ids {
            if id >= ids.len() {
                return Err(TextError::CorruptVocabulary(format!(
                    "id {id} out of range for {} tokens",
                    ids.len()
                )));
            }
            if !tokens[id].is_empty() {
                return Err(TextError::CorruptVocabulary(format!(
                    "duplicate id {id} for `{token}` and `{}`",
                    tokens[id]
                )));
            }
            tokens[id] = token.clone();
        }
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(TextError::CorruptVocabulary(format!(
                "reserved ids must be {PAD_TOKEN}=0 and {UNK_TOKEN}=1"
            )));
        }
        Ok(Vocabulary { ids, tokens })
    }
}

/// Lowercases and splits on everything that is not alphanumeric, so
/// punctuation separates tokens and never appears inside one.
pub fn split_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Fixed-length id sequence with a contiguous validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    mask: Vec<u8>,
}

impl TokenSequence {
    /// Validates the sequence invariants: equal lengths, mask is a prefix
    /// of 1s with at least one set bit, and every padded slot holds PAD.
    pub fn new(ids: Vec<usize>, mask: Vec<u8>) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(TextError::SequenceLength {
                expected: ids.len(),
                got: mask.len(),
            });
        }
        let real = mask.iter().take_while(|&&m| m == 1).count();
        if real == 0 {
            return Err(TextError::AllPadded);
        }
        if mask[real..].iter().any(|&m| m != 0) {
            return Err(TextError::CorruptVocabulary(
                "mask must be a prefix of 1s followed by 0s".into(),
            ));
        }
        if ids[real..].iter().any(|&id| id != PAD_ID) {
            return Err(TextError::CorruptVocabulary(
                "padded slots must hold the PAD id".into(),
            ));
        }
        Ok(TokenSequence { ids, mask })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    /// Total sequence length, padding included.
    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of real (unpadded) tokens.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Converts a caption to ids: lowercase, split on whitespace and
/// punctuation, map out-of-vocabulary words to UNK, then pad or truncate
/// to `seq_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, seq_len: usize) -> Result<TokenSequence> {
    assert!(seq_len > 0, "seq_len must be positive");
    let words = split_tokens(text);
    if words.is_empty() {
        return Err(TextError::EmptyText);
    }
    let real = words.len().min(seq_len);
    let mut ids: Vec<usize> = words[..real].iter().map(|w| vocab.id(w)).collect();
    let mut mask = vec![1u8; real];
    ids.resize(seq_len, PAD_ID);
    mask.resize(seq_len, 0);
    TokenSequence::new(ids, mask)
}

/// Joins the real tokens back into a space-separated string. Ids without
/// a vocabulary entry render as the UNK token.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    let words: Vec<&str> = seq
        .ids()
        .iter()
        .zip(seq.mask())
        .filter(|&(_, &m)| m == 1)
        .map(|(&id, _)| vocab.token(id).unwrap_or(UNK_TOKEN))
        .collect();
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use tempfile::tempdir;

    use crate::data::CaptionGrammar;

    use super::*;

    fn grammar_vocab() -> Vocabulary {
        let grammar = CaptionGrammar;
        let corpus: Vec<String> = grammar
            .all_tuples()
            .iter()
            .map(|t| grammar.render(t))
            .collect();
        Vocabulary::from_corpus(corpus)
    }

    #[test]
    fn corpus_vocabulary_is_dense_and_lexicographic() {
        let vocab = grammar_vocab();
        assert_eq!(vocab.token(PAD_ID), Some(PAD_TOKEN));
        assert_eq!(vocab.token(UNK_ID), Some(UNK_TOKEN));
        let mut prev = String::new();
        for id in 2..vocab.size() {
            let tok = vocab.token(id).unwrap().to_string();
            assert!(tok > prev, "ids not lexicographic at {id}");
            assert_eq!(vocab.id(&tok), id);
            prev = tok;
        }
        // 16 distinct grammar words plus the two reserved slots.
        assert_eq!(vocab.size(), 18);
    }

    #[test]
    fn known_caption_tokenizes_to_seven_ids() {
        let vocab = grammar_vocab();
        let seq = tokenize("small hypoattenuating nodule in the upper left", &vocab, 32).unwrap();
        let expect: Vec<usize> = [
            "small",
            "hypoattenuating",
            "nodule",
            "in",
            "the",
            "upper",
            "left",
        ]
        .iter()
        .map(|w| vocab.id(w))
        .collect();
        assert!(expect.iter().all(|&id| id != UNK_ID));
        assert_eq!(&seq.ids()[..7], expect.as_slice());
        assert!(seq.ids()[7..].iter().all(|&id| id == PAD_ID));
        assert_eq!(seq.real_len(), 7);
        assert_eq!(&seq.mask()[..7], &[1u8; 7]);
        assert!(seq.mask()[7..].iter().all(|&m| m == 0));
    }

    #[test]
    fn single_word_pads_the_tail() {
        let vocab = grammar_vocab();
        let seq = tokenize("mass", &vocab, 32).unwrap();
        assert_eq!(seq.ids()[0], vocab.id("mass"));
        assert!(seq.ids()[1..].iter().all(|&id| id == PAD_ID));
        assert_eq!(seq.mask()[0], 1);
        assert_eq!(seq.real_len(), 1);
    }

    #[test]
    fn out_of_vocabulary_maps_to_unk() {
        let vocab = grammar_vocab();
        let seq = tokenize("zzzzunknownzzzz", &vocab, 32).unwrap();
        assert_eq!(seq.ids()[0], UNK_ID);
        assert!(seq.ids()[1..].iter().all(|&id| id == PAD_ID));
        assert_eq!(seq.real_len(), 1);
    }

    #[test]
    fn whitespace_only_text_is_rejected() {
        let vocab = grammar_vocab();
        assert!(matches!(
            tokenize("  \t\n ", &vocab, 32),
            Err(TextError::EmptyText)
        ));
        assert!(matches!(
            tokenize("?!,.", &vocab, 32),
            Err(TextError::EmptyText)
        ));
    }

    #[test]
    fn punctuation_splits_like_whitespace() {
        let vocab = grammar_vocab();
        let plain = tokenize("large enhancing mass in the lower right", &vocab, 32).unwrap();
        let noisy = tokenize("Large, enhancing mass (in the lower-right)!", &vocab, 32).unwrap();
        assert_eq!(plain, noisy);
    }

    #[test]
    fn tokenize_truncates_to_seq_len() {
        let vocab = grammar_vocab();
        let seq = tokenize("small large mass nodule central", &vocab, 3).unwrap();
        assert_eq!(seq.seq_len(), 3);
        assert_eq!(seq.real_len(), 3);
        assert_eq!(seq.ids()[0], vocab.id("small"));
        assert_eq!(seq.ids()[2], vocab.id("mass"));
    }

    #[test]
    fn grammar_captions_never_truncate() {
        let grammar = CaptionGrammar;
        let max = grammar
            .all_tuples()
            .iter()
            .map(|t| split_tokens(&grammar.render(t)).len())
            .max()
            .unwrap();
        assert!(max <= 9, "longest grammar caption has {max} words");
        assert!(max <= 32);
    }

    #[test]
    fn retokenizing_detokenized_text_is_identity() {
        let grammar = CaptionGrammar;
        let vocab = grammar_vocab();
        for tuple in grammar.all_tuples() {
            let caption = grammar.render(&tuple);
            let seq = tokenize(&caption, &vocab, 32).unwrap();
            let round = tokenize(&detokenize(&seq, &vocab), &vocab, 32).unwrap();
            assert_eq!(seq, round, "round trip changed `{caption}`");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let vocab = grammar_vocab();
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(vocab, loaded);
        let body = std::fs::read_to_string(&path).unwrap();
        let keys: Vec<&str> = body
            .lines()
            .filter_map(|l| l.trim().strip_prefix('"'))
            .filter_map(|l| l.split('"').next())
            .collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted, "JSON keys must be sorted");
    }

    #[test]
    fn load_rejects_corrupt_vocabularies() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vocab.json");

        std::fs::write(&path, "{\"<pad>\": 0, \"<unk>\": 1, \"mass\": 5}\n").unwrap();
        assert!(matches!(
            Vocabulary::load(&path),
            Err(TextError::CorruptVocabulary(_))
        ));

        std::fs::write(&path, "{\"mass\": 0, \"nodule\": 1}\n").unwrap();
        assert!(matches!(
            Vocabulary::load(&path),
            Err(TextError::CorruptVocabulary(_))
        ));
    }

    #[test]
    fn token_sequence_rejects_invariant_violations() {
        assert!(matches!(
            TokenSequence::new(vec![2, 0], vec![0, 1]),
            Err(TextError::AllPadded)
        ));
        assert!(matches!(
            TokenSequence::new(vec![2, 0, 0], vec![1, 0, 1]),
            Err(TextError::CorruptVocabulary(_))
        ));
        assert!(matches!(
            TokenSequence::new(vec![2, 3], vec![1, 0]),
            Err(TextError::CorruptVocabulary(_))
        ));
        assert!(matches!(
            TokenSequence::new(vec![2], vec![1, 0]),
            Err(TextError::SequenceLength { .. })
        ));
    }
}
