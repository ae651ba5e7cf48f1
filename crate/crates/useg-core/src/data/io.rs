//! On-disk dataset layout and round-trip loading.
//!
//! A dataset directory holds `manifest.json` (counts, generation
//! parameters, and a SHA-256 per data file), `captions.jsonl` (one
//! record per sample), and 8-bit binary PGM images and masks keyed by
//! sample id. Loading verifies every checksum before trusting a byte,
//! so truncation and bit rot surface as named errors instead of bad
//! training data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::BinaryMask;

use super::grammar::CaptionGrammar;
use super::{DataError, GenerationConfig, Result, Sample, Split};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
const FORMAT_TAG: &str = "useg-dataset-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Dataset-level metadata. Desk-scale defaults are 200/50/50 samples;
/// the paper-scale reference counts this format would carry unchanged
/// are 15040/3760/1807.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub grammar_version: String,
    pub ambiguity: u8,
    pub image_size: usize,
    pub counts: SplitCounts,
    /// Relative path to lowercase hex SHA-256, for every data file.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CaptionRecord {
    sample_id: String,
    patient_id: String,
    caption: String,
    split: Split,
    fold: u8,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_pgm(w: usize, h: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// Strict binary-PGM parser for the files this module writes: single
/// whitespace separators, maxval 255.
fn decode_pgm(bytes: &[u8], file: &str) -> Result<(usize, usize, Vec<u8>)> {
    let err = |msg: &str| DataError::CorruptManifest(format!("{file}: {msg}"));
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, b)| b[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| err("truncated PGM header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| err("non-UTF8 header"))?;
    let mut lines = header.lines();
    if lines.next() != Some("P5") {
        return Err(err("not a binary PGM"));
    }
    let dims = lines.next().ok_or_else(|| err("missing dimensions"))?;
    let (ws, hs) = dims
        .split_once(' ')
        .ok_or_else(|| err("malformed dimensions"))?;
    let w: usize = ws.parse().map_err(|_| err("malformed width"))?;
    let h: usize = hs.parse().map_err(|_| err("malformed height"))?;
    if lines.next() != Some("255") {
        return Err(err("maxval must be 255"));
    }
    let data = &bytes[header_end + 1..];
    if data.len() != w * h {
        return Err(err("pixel payload does not match dimensions"));
    }
    Ok((w, h, data.to_vec()))
}

/// Write a dataset directory. Samples are ordered by id so repeated
/// writes of the same samples produce byte-identical trees.
pub fn write_dataset(
    samples: &[Sample],
    cfg: &GenerationConfig,
    dir: &Path,
) -> Result<DatasetManifest> {
    if samples.is_empty() {
        return Err(DataError::InvalidConfig(
            "cannot write an empty dataset".into(),
        ));
    }
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    fs::create_dir_all(dir.join(MASKS_DIR))?;

    let mut order: Vec<&Sample> = samples.iter().collect();
    order.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let mut files = BTreeMap::new();
    let mut captions = String::new();
    let mut counts = SplitCounts {
        train: 0,
        val: 0,
        test: 0,
    };
    for s in &order {
        match s.split {
            Split::Train => counts.train += 1,
            Split::Val => counts.val += 1,
            Split::Test => counts.test += 1,
        }
        let image = encode_pgm(s.width, s.height, &s.image);
        let mask_bytes: Vec<u8> = s
            .mask
            .bits()
            .iter()
            .map(|&b| if b { 255 } else { 0 })
            .collect();
        let mask = encode_pgm(s.mask.width(), s.mask.height(), &mask_bytes);
        let image_rel = format!("{IMAGES_DIR}/{}.pgm", s.sample_id);
        let mask_rel = format!("{MASKS_DIR}/{}.pgm", s.sample_id);
        files.insert(image_rel.clone(), sha256_hex(&image));
        files.insert(mask_rel.clone(), sha256_hex(&mask));
        fs::write(dir.join(&image_rel), image)?;
        fs::write(dir.join(&mask_rel), mask)?;
        let record = CaptionRecord {
            sample_id: s.sample_id.clone(),
            patient_id: s.patient_id.clone(),
            caption: s.caption.clone(),
            split: s.split,
            fold: s.fold,
        };
        captions.push_str(&serde_json::to_string(&record)?);
        captions.push('\n');
    }
    files.insert(CAPTIONS_FILE.to_string(), sha256_hex(captions.as_bytes()));
    fs::write(dir.join(CAPTIONS_FILE), captions)?;

    let manifest = DatasetManifest {
        format: FORMAT_TAG.to_string(),
        seed: cfg.seed,
        grammar_version: CaptionGrammar::VERSION.to_string(),
        ambiguity: cfg.ambiguity,
        image_size: cfg.image_size,
        counts,
        files,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

/// Load and fully verify a dataset directory: manifest format, checksum
/// of every listed file, caption/file agreement, and split counts.
/// Samples come back sorted by id.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Sample>, DatasetManifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_bytes =
        fs::read(&manifest_path).map_err(|_| DataError::MissingFile(MANIFEST_FILE.to_string()))?;
    let manifest: DatasetManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| DataError::CorruptManifest(e.to_string()))?;
    if manifest.format != FORMAT_TAG {
        return Err(DataError::CorruptManifest(format!(
            "format tag '{}' is not '{FORMAT_TAG}'",
            manifest.format
        )));
    }

    let mut contents: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    for (rel, want) in &manifest.files {
        let bytes = fs::read(dir.join(rel)).map_err(|_| DataError::MissingFile(rel.clone()))?;
        let got = sha256_hex(&bytes);
        if got != *want {
            return Err(DataError::ChecksumMismatch { file: rel.clone() });
        }
        contents.insert(rel, bytes);
    }
    let captions = contents
        .get(CAPTIONS_FILE)
        .ok_or_else(|| DataError::CorruptManifest("manifest does not list captions".into()))?;
    let captions = std::str::from_utf8(captions)
        .map_err(|_| DataError::CorruptManifest("captions are not UTF-8".into()))?;

    let mut samples = Vec::new();
    let mut counts = SplitCounts {
        train: 0,
        val: 0,
        test: 0,
    };
    for line in captions.lines() {
        let record: CaptionRecord = serde_json::from_str(line)
            .map_err(|e| DataError::CorruptManifest(format!("caption record: {e}")))?;
        match record.split {
            Split::Train => counts.train += 1,
            Split::Val => counts.val += 1,
            Split::Test => counts.test += 1,
        }
        let image_rel = format!("{IMAGES_DIR}/{}.pgm", record.sample_id);
        let mask_rel = format!("{MASKS_DIR}/{}.pgm", record.sample_id);
        let image_bytes = contents
            .get(image_rel.as_str())
            .ok_or_else(|| DataError::CorruptManifest(format!("{image_rel} not in manifest")))?;
        let mask_bytes = contents
            .get(mask_rel.as_str())
            .ok_or_else(|| DataError::CorruptManifest(format!("{mask_rel} not in manifest")))?;
        let (iw, ih, image) = decode_pgm(image_bytes, &image_rel)?;
        let (mw, mh, mask_gray) = decode_pgm(mask_bytes, &mask_rel)?;
        if iw != manifest.image_size || ih != manifest.image_size || mw != iw || mh != ih {
            return Err(DataError::CorruptManifest(format!(
                "{}: dimensions disagree with manifest image_size {}",
                record.sample_id, manifest.image_size
            )));
        }
        let mut mask = BinaryMask::new(mh, mw);
        for (i, &g) in mask_gray.iter().enumerate() {
            match g {
                0 => {}
                255 => mask.set(i / mw, i % mw, true),
                _ => {
                    return Err(DataError::CorruptManifest(format!(
                        "{mask_rel}: mask value {g} is neither 0 nor 255"
                    )))
                }
            }
        }
        samples.push(Sample {
            sample_id: record.sample_id,
            patient_id: record.patient_id,
            image,
            height: ih,
            width: iw,
            mask,
            caption: record.caption,
            split: record.split,
            fold: record.fold,
        });
    }
    if counts != manifest.counts {
        return Err(DataError::CorruptManifest(format!(
            "manifest counts {:?} disagree with captions {:?}",
            manifest.counts, counts
        )));
    }
    if manifest.files.len() != 1 + 2 * samples.len() {
        return Err(DataError::CorruptManifest(format!(
            "manifest lists {} files for {} samples",
            manifest.files.len(),
            samples.len()
        )));
    }
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok((samples, manifest))
}
