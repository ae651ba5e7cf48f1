//! Whole-network assembly: encoder pyramid, fused decoder, and the
//! probability/mask segmentation entry point.

use rand::Rng;

use super::blocks::{
    channel_norm, downsample, init_stage_params, map_dims, patch_embed, to_map, to_tokens,
    vss_block, INIT_STD,
};
use super::{BackboneError, ModelConfig, Result};
use crate::fusion::{fuse_stage, init_fusion_params, FUSION_STAGES};
use crate::metrics::BinaryMask;
use crate::tensor::{init, Elem, ParameterStore, Tape, Tensor, Var};

/// Output channels of the head: background and lesion.
pub const SEG_CLASSES: usize = 2;
/// Index of the lesion channel in logits and probabilities.
pub const LESION_CHANNEL: usize = 1;
/// Probabilities strictly above this become lesion pixels; an exact tie
/// stays background.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Encoder features E_0..E_4 at resolutions H/2 down to H/32.
#[derive(Debug, Clone, Copy)]
pub struct EncoderPyramid {
    pub features: [Var; 5],
}

/// Dense per-pixel output of [`segment`].
#[derive(Debug, Clone)]
pub struct Segmentation<T: Elem> {
    /// Lesion probability per pixel, shape [B, H, W].
    pub probabilities: Tensor<T>,
    /// Thresholded lesion masks, one per batch element.
    pub masks: Vec<BinaryMask>,
}

/// Registers every backbone parameter (and, when the fusion mode uses
/// text, the fusion projections) in `store`. Consumes `rng` in a fixed
/// order, so one seed fixes the whole initialization.
pub fn init_model_params<T: Elem, R: Rng>(
    cfg: &ModelConfig,
    store: &mut ParameterStore<T>,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let w0 = cfg.widths[0];
    store.insert("stem.conv.w", init::kaiming(rng, &[w0, 1, 3, 3], 9));
    store.insert("stem.conv.b", Tensor::zeros(&[w0]));
    store.insert("stem.ln.gamma", Tensor::full(&[w0], T::one()));
    store.insert("stem.ln.beta", Tensor::zeros(&[w0]));

    for stage in 0..4 {
        let c = cfg.widths[stage];
        for block in 0..cfg.blocks[stage] {
            init_stage_params(
                &format!("enc.stage{stage}.block{block}"),
                c,
                cfg.state_dim,
                store,
                rng,
            );
        }
        let cout = cfg.widths[stage + 1];
        store.insert(
            &format!("enc.down{stage}.w"),
            init::kaiming(rng, &[cout, c, 3, 3], c * 9),
        );
        store.insert(&format!("enc.down{stage}.b"), Tensor::zeros(&[cout]));
    }

    let dw = cfg.decoder_widths();
    let mut cin = cfg.widths[4];
    for stage in 1..=FUSION_STAGES {
        let cout = dw[stage - 1];
        // Kernel-2 stride-2 transposed conv: each output pixel sees one
        // spatial tap, so fan-in is the input width alone.
        store.insert(
            &format!("dec.stage{stage}.up.w"),
            init::kaiming(rng, &[cin, cout, 2, 2], cin),
        );
        store.insert(&format!("dec.stage{stage}.up.b"), Tensor::zeros(&[cout]));
        if stage < FUSION_STAGES {
            let cat = cout + cfg.widths[4 - stage];
            store.insert(
                &format!("dec.stage{stage}.conv1.w"),
                init::kaiming(rng, &[cout, cat, 3, 3], cat * 9),
            );
            store.insert(&format!("dec.stage{stage}.conv1.b"), Tensor::zeros(&[cout]));
            store.insert(
                &format!("dec.stage{stage}.ln1.gamma"),
                Tensor::full(&[cout], T::one()),
            );
            store.insert(
                &format!("dec.stage{stage}.ln1.beta"),
                Tensor::zeros(&[cout]),
            );
            store.insert(
                &format!("dec.stage{stage}.conv2.w"),
                init::kaiming(rng, &[cout, cout, 3, 3], cout * 9),
            );
            store.insert(&format!("dec.stage{stage}.conv2.b"), Tensor::zeros(&[cout]));
            store.insert(
                &format!("dec.stage{stage}.ln2.gamma"),
                Tensor::full(&[cout], T::one()),
            );
            store.insert(
                &format!("dec.stage{stage}.ln2.beta"),
                Tensor::zeros(&[cout]),
            );
        }
        cin = cout;
    }
    store.insert(
        "dec.head.w",
        init::normal(rng, &[SEG_CLASSES, cin, 1, 1], 0.0, INIT_STD),
    );
    store.insert("dec.head.b", Tensor::zeros(&[SEG_CLASSES]));

    if cfg.fusion.requires_text() {
        init_fusion_params(&dw, cfg.d_text, store);
    }
    Ok(())
}

/// Runs the encoder: stem, then per stage a run of VSS blocks followed
/// by a stride-2 width-doubling downsample. E_4 is the plain bottleneck.
pub fn encode<T: Elem>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    images: Var,
    cfg: &ModelConfig,
) -> Result<EncoderPyramid> {
    cfg.validate()?;
    let s = tape.shape(images).to_vec();
    let h = cfg.image_size;
    if s.len() != 4 || s[0] == 0 || s[1] != 1 || s[2] != h || s[3] != h {
        return Err(BackboneError::ShapeMismatch(format!(
            "encoder expects [B, 1, {h}, {h}] images, got {s:?}"
        )));
    }

    let mut x = patch_embed(tape, store, images)?;
    let mut features = Vec::with_capacity(5);
    for stage in 0..4 {
        for block in 0..cfg.blocks[stage] {
            x = vss_block(tape, store, x, &format!("enc.stage{stage}.block{block}"))?;
        }
        features.push(x);
        x = downsample(tape, store, x, stage)?;
    }
    features.push(x);
    Ok(EncoderPyramid {
        features: features.try_into().expect("five pyramid levels"),
    })
}

/// Runs the decoder over the pyramid: stages 1..=4 upsample, concat the
/// matching skip, and refine with two conv+norm+SiLU blocks; stage 5 is
/// the last 2x upsample to full resolution. Each stage ends at its
/// fusion hook when the mode enables it; a 1x1 head maps to 2 logits.
pub fn decode<T: Elem>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    pyramid: &EncoderPyramid,
    text: Option<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    cfg.validate()?;
    if cfg.fusion.requires_text() {
        if text.is_none() {
            return Err(BackboneError::MissingText(cfg.fusion));
        }
    } else if text.is_some() {
        return Err(BackboneError::InvalidConfig(format!(
            "fusion mode `{}` takes no text embedding",
            cfg.fusion
        )));
    }
    let b = tape.shape(pyramid.features[0])[0];
    for (level, &f) in pyramid.features.iter().enumerate() {
        let side = cfg.image_size >> (level + 1);
        let want = [b, cfg.widths[level], side, side];
        let got = tape.shape(f);
        if got != want {
            return Err(BackboneError::ShapeMismatch(format!(
                "pyramid level {level} must be {want:?}, got {got:?}"
            )));
        }
    }

    let mut x = pyramid.features[4];
    for stage in 1..=FUSION_STAGES {
        let up_w = tape.param(&format!("dec.stage{stage}.up.w"), store)?;
        let up_b = tape.param(&format!("dec.stage{stage}.up.b"), store)?;
        x = tape.conv_transpose2d(x, up_w, Some(up_b), 2, 0)?;
        if stage < FUSION_STAGES {
            let skip = pyramid.features[4 - stage];
            x = tape.concat(&[x, skip], 1)?;
            for half in 1..=2 {
                let w = tape.param(&format!("dec.stage{stage}.conv{half}.w"), store)?;
                let cb = tape.param(&format!("dec.stage{stage}.conv{half}.b"), store)?;
                x = tape.conv2d(x, w, Some(cb), 1, 1)?;
                let d = map_dims(tape, x, "decoder stage")?;
                let t = to_tokens(tape, x, &d)?;
                let t = channel_norm(
                    tape,
                    store,
                    t,
                    &format!("dec.stage{stage}.ln{half}.gamma"),
                    &format!("dec.stage{stage}.ln{half}.beta"),
                )?;
                let t = tape.silu(t)?;
                x = to_map(tape, t, &d)?;
            }
        }
        if cfg.fusion.requires_text() && cfg.fusion.applies_at(stage) {
            let t = text.expect("presence checked against fusion mode");
            x = fuse_stage(tape, store, x, t, stage, cfg.fusion)?;
        }
    }
    let head_w = tape.param("dec.head.w", store)?;
    let head_b = tape.param("dec.head.b", store)?;
    Ok(tape.conv2d(x, head_w, Some(head_b), 1, 0)?)
}

/// Full forward pass to probabilities and masks. `text` is the pooled
/// caption embedding [B, d_text]; it is required exactly when the
/// config's fusion mode uses text.
pub fn segment<T: Elem>(
    store: &ParameterStore<T>,
    images: &Tensor<T>,
    text: Option<&Tensor<T>>,
    cfg: &ModelConfig,
) -> Result<Segmentation<T>> {
    let mut tape = Tape::new();
    let img = tape.constant(images.clone());
    let txt = text.map(|t| tape.constant(t.clone()));
    let pyramid = encode(&mut tape, store, img, cfg)?;
    let logits = decode(&mut tape, store, &pyramid, txt, cfg)?;
    let probs = tape.softmax(logits, 1)?;

    let pt = tape.value(probs);
    let s = pt.shape();
    let (b, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let mut fg: Vec<T> = Vec::with_capacity(b * plane);
    let mut masks = Vec::with_capacity(b);
    for bi in 0..b {
        let off = (bi * SEG_CLASSES + LESION_CHANNEL) * plane;
        let slice = &pt.data()[off..off + plane];
        fg.extend_from_slice(slice);
        let probs_f64: Vec<f64> = slice.iter().map(|&p| p.to_f64_lossy()).collect();
        masks.push(BinaryMask::from_probabilities(
            h,
            w,
            &probs_f64,
            MASK_THRESHOLD,
        ));
    }
    Ok(Segmentation {
        probabilities: Tensor::from_vec(vec![b, h, w], fg)?,
        masks,
    })
}
