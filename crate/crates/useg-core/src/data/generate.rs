//! Scene synthesis: attribute-true elliptical blobs over smoothed noise.
//!
//! Attribute semantics are metric so a rule-based parser can re-derive
//! them from rendered geometry and intensity: size classes are separated
//! by a dead band between H/10 and H/6 of blob diameter, lesion kinds by
//! disjoint aspect-ratio bands, attenuation classes by disjoint
//! intensity bands around the 0.5 background mean, and locations by a
//! center box plus quadrants with a two-pixel clearance from every
//! decision boundary. Placement failures re-seed deterministically a
//! bounded number of times before erroring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metrics::BinaryMask;

use super::grammar::{
    Attenuation, AttributeTuple, CaptionGrammar, LesionKind, Location, SizeClass,
};
use super::{DataError, Result, Sample, Split, SAMPLES_PER_PATIENT};

/// Center/axis draws per blob before the scene is re-seeded.
const PLACE_ATTEMPTS: usize = 64;
/// Whole-scene re-seeds before giving up with `PlacementFailure`.
const RESEED_ROUNDS: u64 = 16;
/// Background coarse-grid cell edge in pixels.
const BG_CELL: usize = 8;
/// Per-pixel noise amplitude, small enough to keep every intensity band
/// on its own side of the classifier thresholds.
const NOISE: f64 = 0.02;

const BG_STREAM: u64 = 0x6261636b67726e64;
const SCENE_STREAM: u64 = 0x7363656e65313233;

#[derive(Debug, Clone, PartialEq)]
pub struct LesionSpec {
    /// (row, col) in pixel-center coordinates.
    pub center: (f64, f64),
    /// (major, minor), major first.
    pub semi_axes: (f64, f64),
    pub rotation: f64,
    /// Mean rendered intensity in [0, 1].
    pub intensity: f64,
    pub attrs: AttributeTuple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedBlob {
    pub spec: LesionSpec,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// Quantized gray levels, row-major.
    pub image: Vec<u8>,
    /// Target first, then distractors in placement order.
    pub blobs: Vec<RenderedBlob>,
    pub caption: String,
    /// How many deterministic re-seeds placement needed.
    pub reseed_rounds: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub seed: u64,
    /// Number of distractor blobs per scene, 0 to 2.
    pub ambiguity: u8,
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub n_folds: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            seed: 17,
            ambiguity: 2,
            image_size: 64,
            train: 200,
            val: 50,
            test: 50,
            n_folds: 5,
        }
    }
}

// ── attribute semantics ────────────────────────────────────────────

/// Blob diameter band for a size class; the gap between H/10 and H/6
/// keeps the classes separable by measurement.
pub fn diameter_range(size: SizeClass, h: usize) -> (f64, f64) {
    let hf = h as f64;
    match size {
        SizeClass::Small => ((0.06 * hf).max(3.0), hf / 10.0),
        SizeClass::Large => (hf / 6.0, 0.22 * hf),
    }
}

pub fn classify_size(semi_major: f64, h: usize) -> Option<SizeClass> {
    let d = 2.0 * semi_major;
    let hf = h as f64;
    if d <= hf / 10.0 {
        Some(SizeClass::Small)
    } else if d >= hf / 6.0 {
        Some(SizeClass::Large)
    } else {
        None
    }
}

/// Minor/major aspect band per lesion kind; bands are disjoint with
/// at least 0.05 clearance from the classifier cuts at 0.6 and 0.85.
pub fn aspect_range(kind: LesionKind) -> (f64, f64) {
    match kind {
        LesionKind::Nodule => (0.90, 1.0),
        LesionKind::LymphNode => (0.65, 0.80),
        LesionKind::Mass => (0.40, 0.55),
    }
}

pub fn classify_kind(semi_major: f64, semi_minor: f64) -> LesionKind {
    let aspect = semi_minor / semi_major;
    if aspect > 0.85 {
        LesionKind::Nodule
    } else if aspect >= 0.60 {
        LesionKind::LymphNode
    } else {
        LesionKind::Mass
    }
}

/// Mean-intensity band per attenuation class, all clear of the 0.5
/// background mean and of the classifier cuts at 0.45 and 0.83.
pub fn intensity_range(attenuation: Attenuation) -> (f64, f64) {
    match attenuation {
        Attenuation::Hypo => (0.15, 0.35),
        Attenuation::Hyper => (0.62, 0.80),
        Attenuation::Enhancing => (0.86, 0.98),
    }
}

pub fn classify_intensity(mean: f64) -> Attenuation {
    if mean < 0.45 {
        Attenuation::Hypo
    } else if mean < 0.83 {
        Attenuation::Hyper
    } else {
        Attenuation::Enhancing
    }
}

/// Location of a point: the H/8-halfwidth center box wins, otherwise the
/// quadrant by sign.
pub fn classify_location(r: f64, c: f64, h: usize, w: usize) -> Location {
    let (hc, wc) = (h as f64 / 2.0, w as f64 / 2.0);
    let (dr, dc) = (r - hc, c - wc);
    if dr.abs() <= h as f64 / 8.0 && dc.abs() <= w as f64 / 8.0 {
        Location::Center
    } else {
        match (dr < 0.0, dc < 0.0) {
            (true, true) => Location::UpperLeft,
            (true, false) => Location::UpperRight,
            (false, true) => Location::LowerLeft,
            (false, false) => Location::LowerRight,
        }
    }
}

/// Inclusive center-coordinate ranges that keep a blob with the given
/// fit margin inside its location region with two pixels of clearance
/// from every classification boundary. `None` when the region cannot
/// hold the blob.
fn location_cell(
    loc: Location,
    h: usize,
    w: usize,
    margin: usize,
) -> Option<(usize, usize, usize, usize)> {
    let (hc, wc) = (h / 2, w / 2);
    let (bh, bw) = (h / 8, w / 8);
    let low = |half: usize, box_half: usize| -> (usize, usize) { (margin, half - box_half - 2) };
    let high = |half: usize, box_half: usize, n: usize| -> (usize, usize) {
        (half + box_half + 2, n - 1 - margin)
    };
    let center = |half: usize, box_half: usize| -> (usize, usize) {
        ((half - box_half + 2).max(margin), half + box_half - 2)
    };
    let ((r0, r1), (c0, c1)) = match loc {
        Location::UpperLeft => (low(hc, bh), low(wc, bw)),
        Location::UpperRight => (low(hc, bh), high(wc, bw, w)),
        Location::LowerLeft => (high(hc, bh, h), low(wc, bw)),
        Location::LowerRight => (high(hc, bh, h), high(wc, bw, w)),
        Location::Center => (center(hc, bh), center(wc, bw)),
    };
    if r0 > r1 || c0 > c1 {
        return None;
    }
    Some((r0, r1, c0, c1))
}

// ── rasterization ──────────────────────────────────────────────────

pub fn ellipse_contains(spec: &LesionSpec, r: usize, c: usize) -> bool {
    let (dr, dc) = (r as f64 - spec.center.0, c as f64 - spec.center.1);
    let (cos, sin) = (spec.rotation.cos(), spec.rotation.sin());
    // Rotate into the ellipse frame; x along the major axis.
    let x = dr * cos + dc * sin;
    let y = -dr * sin + dc * cos;
    let (a, b) = spec.semi_axes;
    (x / a) * (x / a) + (y / b) * (y / b) <= 1.0
}

fn rasterize(spec: &LesionSpec, h: usize, w: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(h, w);
    let reach = spec.semi_axes.0.ceil() as isize + 1;
    let (r0, c0) = (spec.center.0 as isize, spec.center.1 as isize);
    for r in (r0 - reach).max(0)..=(r0 + reach).min(h as isize - 1) {
        for c in (c0 - reach).max(0)..=(c0 + reach).min(w as isize - 1) {
            if ellipse_contains(spec, r as usize, c as usize) {
                mask.set(r as usize, c as usize, true);
            }
        }
    }
    mask
}

// ── scene assembly ─────────────────────────────────────────────────

/// splitmix64-style finalizer keeping RNG streams independent.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Coarse smoothed background around mean 0.5, shared by every sample of
/// a patient.
fn background(h: usize, w: usize, patient_index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(patient_index, BG_STREAM));
    let (gh, gw) = (h / BG_CELL + 1, w / BG_CELL + 1);
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(0.35..0.65)).collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let gr = r / BG_CELL;
        let fr = (r % BG_CELL) as f64 / BG_CELL as f64;
        for c in 0..w {
            let gc = c / BG_CELL;
            let fc = (c % BG_CELL) as f64 / BG_CELL as f64;
            let top = grid[gr * gw + gc] * (1.0 - fc) + grid[gr * gw + gc + 1] * fc;
            let bot = grid[(gr + 1) * gw + gc] * (1.0 - fc) + grid[(gr + 1) * gw + gc + 1] * fc;
            out[r * w + c] = top * (1.0 - fr) + bot * fr;
        }
    }
    out
}

fn random_attrs(rng: &mut ChaCha8Rng) -> AttributeTuple {
    AttributeTuple {
        size: SizeClass::ALL[rng.gen_range(0..SizeClass::ALL.len())],
        attenuation: Attenuation::ALL[rng.gen_range(0..Attenuation::ALL.len())],
        kind: LesionKind::ALL[rng.gen_range(0..LesionKind::ALL.len())],
        location: Location::ALL[rng.gen_range(0..Location::ALL.len())],
    }
}

/// Flip `slots` distinct attribute slots to different values.
fn flip_attrs(rng: &mut ChaCha8Rng, base: &AttributeTuple, slots: usize) -> AttributeTuple {
    let mut out = *base;
    let mut picked = [false; 4];
    for _ in 0..slots {
        let slot = loop {
            let s = rng.gen_range(0..4);
            if !picked[s] {
                picked[s] = true;
                break s;
            }
        };
        match slot {
            0 => {
                out.size = *SizeClass::ALL
                    .iter()
                    .filter(|v| **v != base.size)
                    .nth(rng.gen_range(0..SizeClass::ALL.len() - 1))
                    .unwrap();
            }
            1 => {
                out.attenuation = *Attenuation::ALL
                    .iter()
                    .filter(|v| **v != base.attenuation)
                    .nth(rng.gen_range(0..Attenuation::ALL.len() - 1))
                    .unwrap();
            }
            2 => {
                out.kind = *LesionKind::ALL
                    .iter()
                    .filter(|v| **v != base.kind)
                    .nth(rng.gen_range(0..LesionKind::ALL.len() - 1))
                    .unwrap();
            }
            _ => {
                out.location = *Location::ALL
                    .iter()
                    .filter(|v| **v != base.location)
                    .nth(rng.gen_range(0..Location::ALL.len() - 1))
                    .unwrap();
            }
        }
    }
    out
}

/// Draw a spec for the attribute tuple and place it so its rasterization
/// keeps a one-pixel gap from occupied pixels. `occupied` is consumed as
/// a dilated occupancy grid.
fn place_blob(
    rng: &mut ChaCha8Rng,
    attrs: &AttributeTuple,
    h: usize,
    w: usize,
    occupied: &[bool],
) -> Option<(LesionSpec, BinaryMask)> {
    for _ in 0..PLACE_ATTEMPTS {
        let (dlo, dhi) = diameter_range(attrs.size, h);
        let a = rng.gen_range(dlo / 2.0..dhi / 2.0);
        let (alo, ahi) = aspect_range(attrs.kind);
        let b = a * rng.gen_range(alo..ahi);
        let intensity = {
            let (ilo, ihi) = intensity_range(attrs.attenuation);
            rng.gen_range(ilo..ihi)
        };
        let rotation = rng.gen_range(0.0..std::f64::consts::PI);
        let margin = a.ceil() as usize + 1;
        let Some((r0, r1, c0, c1)) = location_cell(attrs.location, h, w, margin) else {
            continue;
        };
        let r = rng.gen_range(r0..=r1);
        let c = rng.gen_range(c0..=c1);
        let spec = LesionSpec {
            center: (r as f64, c as f64),
            semi_axes: (a, b),
            rotation,
            intensity,
            attrs: *attrs,
        };
        let mask = rasterize(&spec, h, w);
        let clear = mask
            .bits()
            .iter()
            .enumerate()
            .all(|(i, &on)| !on || !occupied[i]);
        if clear && !mask.is_empty() {
            return Some((spec, mask));
        }
    }
    None
}

fn dilate_into(occupied: &mut [bool], mask: &BinaryMask, h: usize, w: usize) {
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                        occupied[nr as usize * w + nc as usize] = true;
                    }
                }
            }
        }
    }
}

fn try_scene(
    rng: &mut ChaCha8Rng,
    grammar: &CaptionGrammar,
    ambiguity: u8,
    h: usize,
    w: usize,
) -> Option<(Vec<RenderedBlob>, String)> {
    let target_attrs = random_attrs(rng);
    let mut attr_list = vec![target_attrs];
    for i in 0..ambiguity {
        // The first distractor is a one-slot flip so captions stay
        // necessary, not merely sufficient; later ones flip one or two.
        let slots = if i == 0 { 1 } else { rng.gen_range(1..=2) };
        attr_list.push(flip_attrs(rng, &target_attrs, slots));
    }
    let mut occupied = vec![false; h * w];
    let mut blobs = Vec::with_capacity(attr_list.len());
    for attrs in &attr_list {
        let (spec, mask) = place_blob(rng, attrs, h, w, &occupied)?;
        dilate_into(&mut occupied, &mask, h, w);
        blobs.push(RenderedBlob { spec, mask });
    }
    let caption = grammar.render(&target_attrs);
    Some((blobs, caption))
}

fn paint(
    blobs: &[RenderedBlob],
    h: usize,
    w: usize,
    patient_index: u64,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let mut img = background(h, w, patient_index);
    for v in img.iter_mut() {
        *v += rng.gen_range(-NOISE..NOISE);
    }
    for blob in blobs {
        for r in 0..h {
            for c in 0..w {
                if blob.mask.get(r, c) {
                    img[r * w + c] = blob.spec.intensity + rng.gen_range(-NOISE..NOISE);
                }
            }
        }
    }
    img.iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Mean rendered intensity of the image under a mask, the quantity the
/// attenuation classifier consumes.
pub fn mean_intensity(image: &[u8], mask: &BinaryMask) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &on) in mask.bits().iter().enumerate() {
        if on {
            sum += image[i] as f64 / 255.0;
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

pub fn generate_scene(
    seed: u64,
    grammar: &CaptionGrammar,
    ambiguity: u8,
    h: usize,
) -> Result<Scene> {
    if h == 0 || !h.is_multiple_of(32) {
        return Err(DataError::InvalidConfig(format!(
            "image size must be a positive multiple of 32, got {h}"
        )));
    }
    if ambiguity > 2 {
        return Err(DataError::InvalidConfig(format!(
            "ambiguity must be 0..=2, got {ambiguity}"
        )));
    }
    let w = h;
    let patient_index = seed / SAMPLES_PER_PATIENT as u64;
    for round in 0..RESEED_ROUNDS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, SCENE_STREAM ^ round));
        let Some((blobs, caption)) = try_scene(&mut rng, grammar, ambiguity, h, w) else {
            continue;
        };
        let image = paint(&blobs, h, w, patient_index, &mut rng);
        verify_scene(&blobs, &image, &caption, grammar, h, w)?;
        return Ok(Scene {
            height: h,
            width: w,
            image,
            blobs,
            caption,
            reseed_rounds: round,
        });
    }
    Err(DataError::PlacementFailure { seed })
}

/// Caption sufficiency, checked on every scene: re-derive each blob's
/// attributes from its spec geometry and rendered intensity; exactly the
/// target may match the caption.
fn verify_scene(
    blobs: &[RenderedBlob],
    image: &[u8],
    caption: &str,
    grammar: &CaptionGrammar,
    h: usize,
    w: usize,
) -> Result<()> {
    let wanted = grammar.parse(caption).ok_or_else(|| {
        DataError::GenerationInvariant(format!("caption '{caption}' does not parse"))
    })?;
    let mut matches = 0usize;
    for (i, blob) in blobs.iter().enumerate() {
        let derived = AttributeTuple {
            size: classify_size(blob.spec.semi_axes.0, h).ok_or_else(|| {
                DataError::GenerationInvariant("blob size in the dead band".into())
            })?,
            attenuation: classify_intensity(mean_intensity(image, &blob.mask)),
            kind: classify_kind(blob.spec.semi_axes.0, blob.spec.semi_axes.1),
            location: classify_location(blob.spec.center.0, blob.spec.center.1, h, w),
        };
        if derived != blob.spec.attrs {
            return Err(DataError::GenerationInvariant(format!(
                "blob {i} re-derives to {derived:?}, assigned {:?}",
                blob.spec.attrs
            )));
        }
        if derived == wanted {
            matches += 1;
            if i != 0 {
                return Err(DataError::GenerationInvariant(
                    "caption matches a distractor".into(),
                ));
            }
        }
    }
    if matches != 1 {
        return Err(DataError::GenerationInvariant(format!(
            "caption matched {matches} blobs"
        )));
    }
    Ok(())
}

pub fn generate_sample(
    seed: u64,
    grammar: &CaptionGrammar,
    ambiguity: u8,
    h: usize,
) -> Result<Sample> {
    let scene = generate_scene(seed, grammar, ambiguity, h)?;
    Ok(Sample {
        sample_id: format!("s{seed:08}"),
        patient_id: format!("p{:07}", seed / SAMPLES_PER_PATIENT as u64),
        image: scene.image,
        height: scene.height,
        width: scene.width,
        mask: scene.blobs[0].mask.clone(),
        caption: scene.caption,
        split: Split::Train,
        fold: 0,
    })
}

/// Build a full dataset: patients are consecutive seed groups, splits and
/// folds are assigned at patient granularity by hashed order, and each
/// split is filled to its exact sample count.
pub fn generate_dataset(cfg: &GenerationConfig) -> Result<Vec<Sample>> {
    if cfg.train == 0 {
        return Err(DataError::InvalidConfig(
            "train count must be positive".into(),
        ));
    }
    if cfg.ambiguity > 2 {
        return Err(DataError::InvalidConfig(format!(
            "ambiguity must be 0..=2, got {}",
            cfg.ambiguity
        )));
    }
    if cfg.image_size == 0 || !cfg.image_size.is_multiple_of(32) {
        return Err(DataError::InvalidConfig(format!(
            "image size must be a positive multiple of 32, got {}",
            cfg.image_size
        )));
    }
    let k = SAMPLES_PER_PATIENT;
    let counts = [cfg.train, cfg.val, cfg.test];
    let patients_per_split: Vec<usize> = counts.iter().map(|c| c.div_ceil(k)).collect();
    let total_patients: usize = patients_per_split.iter().sum();
    let grammar = CaptionGrammar;

    // Seeds are consecutive per patient so every patient shares one
    // background stream; the dataset seed offsets the whole range.
    let seed_base = cfg.seed.wrapping_shl(24);
    let first_patient = seed_base / k as u64;
    let patient_ids: Vec<String> = (0..total_patients)
        .map(|r| format!("p{:07}", first_patient + r as u64))
        .collect();
    let pt = total_patients as f64;
    let ratios = (
        patients_per_split[0] as f64 / pt,
        patients_per_split[1] as f64 / pt,
        patients_per_split[2] as f64 / pt,
    );
    let assignment = super::make_splits(&patient_ids, ratios, cfg.n_folds, cfg.seed)?;

    let mut filled = [0usize; 3];
    let mut samples = Vec::with_capacity(counts.iter().sum());
    for &rank in &assignment.hashed_order {
        let split = assignment.split[rank];
        let slot = split as usize;
        for j in 0..k {
            if filled[slot] >= counts[slot] {
                break;
            }
            let seed = seed_base + (rank * k + j) as u64;
            let mut sample = generate_sample(seed, &grammar, cfg.ambiguity, cfg.image_size)?;
            sample.split = split;
            sample.fold = assignment.fold[rank];
            debug_assert_eq!(sample.patient_id, patient_ids[rank]);
            samples.push(sample);
            filled[slot] += 1;
        }
    }
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(samples)
}
