//! Language fusion: project the pooled caption embedding to a decoder
//! stage's channel width and combine it with the stage's feature map.
//!
//! Projections are zero-initialized, so a freshly initialized fused
//! model computes exactly what the text-free model computes; training
//! has to earn any influence the caption gains.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Elem, ParameterStore, Tape, Tensor, Var};

/// Number of decoder stages carrying a fusion hook.
pub const FUSION_STAGES: usize = 5;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("fusion mode `none` has no fuse operation; caller must skip")]
    ModeNone,
    #[error("fusion mode {mode} does not apply at stage {stage}; caller must skip")]
    InactiveStage { mode: FusionMode, stage: usize },
    #[error("fusion stage {0} outside 1..={FUSION_STAGES}")]
    InvalidStage(usize),
    #[error("fusion shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

/// How the projected text vector combines with decoder features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Image-only model; text is ignored entirely.
    None,
    /// Broadcast-add the projection at every decoder stage.
    #[default]
    StageAdd,
    /// Multiply features by the sigmoid of the projection at every stage.
    StageGate,
    /// Broadcast-add at the final (full-resolution) stage only.
    Tail,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::None,
        FusionMode::StageAdd,
        FusionMode::StageGate,
        FusionMode::Tail,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::StageAdd => "stage_add",
            FusionMode::StageGate => "stage_gate",
            FusionMode::Tail => "tail",
        }
    }

    /// Whether this mode consumes a text embedding at all.
    pub fn requires_text(self) -> bool {
        self != FusionMode::None
    }

    /// Whether fuse_stage runs at `stage` (1-based).
    pub fn applies_at(self, stage: usize) -> bool {
        match self {
            FusionMode::None => false,
            FusionMode::StageAdd | FusionMode::StageGate => (1..=FUSION_STAGES).contains(&stage),
            FusionMode::Tail => stage == FUSION_STAGES,
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown fusion mode `{s}`"))
    }
}

fn stage_weight_name(stage: usize) -> String {
    format!("fusion.stage{stage}.w")
}

fn stage_bias_name(stage: usize) -> String {
    format!("fusion.stage{stage}.b")
}

/// Registers one zero projection (C_s x D_text) and bias (C_s) per
/// decoder stage. `stage_widths` lists C_1..C_5 in stage order.
pub fn init_fusion_params<T: Elem>(
    stage_widths: &[usize; FUSION_STAGES],
    d_text: usize,
    store: &mut ParameterStore<T>,
) {
    for (i, &c) in stage_widths.iter().enumerate() {
        let stage = i + 1;
        store.insert(&stage_weight_name(stage), Tensor::zeros(&[c, d_text]));
        store.insert(&stage_bias_name(stage), Tensor::zeros(&[c]));
    }
}

/// Fuses the pooled text embedding into one decoder stage's features.
///
/// `fmap` is [B, C_s, h, w], `text` is [B, D_text]; the result keeps the
/// feature shape. stage_add adds the projected vector at every spatial
/// position; stage_gate multiplies by its sigmoid; tail is stage_add
/// restricted to the last stage.
pub fn fuse_stage<T: Elem>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    fmap: Var,
    text: Var,
    stage: usize,
    mode: FusionMode,
) -> Result<Var> {
    if mode == FusionMode::None {
        return Err(FusionError::ModeNone);
    }
    if !(1..=FUSION_STAGES).contains(&stage) {
        return Err(FusionError::InvalidStage(stage));
    }
    if !mode.applies_at(stage) {
        return Err(FusionError::InactiveStage { mode, stage });
    }

    let fshape = tape.shape(fmap).to_vec();
    let tshape = tape.shape(text).to_vec();
    if fshape.len() != 4 {
        return Err(FusionError::ShapeMismatch(format!(
            "feature map must be [B, C, h, w], got {fshape:?}"
        )));
    }
    if tshape.len() != 2 {
        return Err(FusionError::ShapeMismatch(format!(
            "text embedding must be [B, D_text], got {tshape:?}"
        )));
    }
    if fshape[0] != tshape[0] {
        return Err(FusionError::ShapeMismatch(format!(
            "batch mismatch: features {} vs text {}",
            fshape[0], tshape[0]
        )));
    }

    let w = tape.param(&stage_weight_name(stage), store)?;
    let b = tape.param(&stage_bias_name(stage), store)?;
    let wshape = tape.shape(w).to_vec();
    if wshape[0] != fshape[1] || wshape[1] != tshape[1] {
        return Err(FusionError::ShapeMismatch(format!(
            "stage {stage} projection is {wshape:?}, needs [{}, {}]",
            fshape[1], tshape[1]
        )));
    }

    let wt = tape.permute(w, &[1, 0])?;
    let proj = tape.matmul(text, wt)?;
    let proj = tape.add(proj, b)?;
    let proj = tape.reshape(proj, &[fshape[0], fshape[1], 1, 1])?;

    let fused = match mode {
        FusionMode::StageAdd | FusionMode::Tail => tape.add(fmap, proj)?,
        FusionMode::StageGate => {
            let gate = tape.sigmoid(proj)?;
            tape.mul(fmap, gate)?
        }
        FusionMode::None => unreachable!("rejected above"),
    };
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::init;

    use super::*;

    const WIDTHS: [usize; FUSION_STAGES] = [8, 6, 5, 4, 3];
    const D_TEXT: usize = 4;

    fn zero_store() -> ParameterStore<f64> {
        let mut store = ParameterStore::new();
        init_fusion_params(&WIDTHS, D_TEXT, &mut store);
        store
    }

    fn random_store(seed: u64) -> ParameterStore<f64> {
        let mut store = zero_store();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for stage in 1..=FUSION_STAGES {
            let c = WIDTHS[stage - 1];
            *store.get_mut(&stage_weight_name(stage)).unwrap() =
                init::normal(&mut rng, &[c, D_TEXT], 0.0, 0.5);
            *store.get_mut(&stage_bias_name(stage)).unwrap() =
                init::normal(&mut rng, &[c], 0.0, 0.5);
        }
        store
    }

    fn random_inputs(seed: u64, c: usize) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fmap = init::normal(&mut rng, &[2, c, 3, 3], 0.0, 1.0);
        let text = init::normal(&mut rng, &[2, D_TEXT], 0.0, 1.0);
        (fmap, text)
    }

    #[test]
    fn mode_serde_and_parse_round_trip() {
        for mode in FusionMode::ALL {
            let json = serde_json::to_string(&mode).unwrap();
            assert_eq!(json, format!("\"{}\"", mode.as_str()));
            let back: FusionMode = serde_json::from_str(&json).unwrap();
            assert_eq!(back, mode);
            assert_eq!(mode.as_str().parse::<FusionMode>().unwrap(), mode);
        }
        assert!("cross_attention".parse::<FusionMode>().is_err());
        assert_eq!(FusionMode::default(), FusionMode::StageAdd);
    }

    #[test]
    fn zero_projection_stage_add_is_identity() {
        let store = zero_store();
        for stage in 1..=FUSION_STAGES {
            let (fmap, text) = random_inputs(stage as u64, WIDTHS[stage - 1]);
            let mut tape = Tape::new();
            let f = tape.constant(fmap.clone());
            let t = tape.constant(text);
            let out = fuse_stage(&mut tape, &store, f, t, stage, FusionMode::StageAdd).unwrap();
            assert_eq!(tape.value(out).data(), fmap.data(), "stage {stage}");
        }
    }

    #[test]
    fn additive_offset_is_constant_over_space() {
        let store = random_store(7);
        let stage = 2;
        let c = WIDTHS[stage - 1];
        let (fmap, text) = random_inputs(11, c);
        let mut tape = Tape::new();
        let f = tape.constant(fmap.clone());
        let t = tape.constant(text);
        let out = fuse_stage(&mut tape, &store, f, t, stage, FusionMode::StageAdd).unwrap();
        let fused = tape.value(out).data();
        for b in 0..2 {
            for ch in 0..c {
                let base = (b * c + ch) * 9;
                let first = fused[base] - fmap.data()[base];
                for px in 1..9 {
                    let d = fused[base + px] - fmap.data()[base + px];
                    assert!(
                        (d - first).abs() < 1e-12,
                        "offset varies over space at b={b} c={ch}"
                    );
                }
            }
        }
    }

    #[test]
    fn projection_example_evaluates_to_one_point_five() {
        let mut store: ParameterStore<f64> = ParameterStore::new();
        store.insert(
            "fusion.stage1.w",
            Tensor::from_vec(vec![1, 2], vec![1.0, -1.0]).unwrap(),
        );
        store.insert(
            "fusion.stage1.b",
            Tensor::from_vec(vec![1], vec![0.5]).unwrap(),
        );
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let t = tape.constant(Tensor::from_vec(vec![1, 2], vec![2.0, 1.0]).unwrap());
        let out = fuse_stage(&mut tape, &store, f, t, 1, FusionMode::StageAdd).unwrap();
        assert_eq!(tape.value(out).data(), &[1.5, 1.5, 1.5, 1.5]);
    }

    #[test]
    fn zero_projection_gate_halves_features() {
        let store = zero_store();
        let stage = 4;
        let (fmap, text) = random_inputs(13, WIDTHS[stage - 1]);
        let mut tape = Tape::new();
        let f = tape.constant(fmap.clone());
        let t = tape.constant(text);
        let out = fuse_stage(&mut tape, &store, f, t, stage, FusionMode::StageGate).unwrap();
        let expect: Vec<f64> = fmap.data().iter().map(|&x| x * 0.5).collect();
        assert_eq!(tape.value(out).data(), expect.as_slice());
    }

    #[test]
    fn tail_mode_runs_only_at_the_last_stage() {
        let store = random_store(17);
        let (fmap, text) = random_inputs(19, WIDTHS[FUSION_STAGES - 1]);
        let mut tape = Tape::new();
        let f = tape.constant(fmap.clone());
        let t = tape.constant(text.clone());
        let tail = fuse_stage(&mut tape, &store, f, t, FUSION_STAGES, FusionMode::Tail).unwrap();
        let add = fuse_stage(&mut tape, &store, f, t, FUSION_STAGES, FusionMode::StageAdd).unwrap();
        assert_eq!(tape.value(tail).data(), tape.value(add).data());

        for stage in 1..FUSION_STAGES {
            assert!(!FusionMode::Tail.applies_at(stage));
            let (fmap, text) = random_inputs(stage as u64, WIDTHS[stage - 1]);
            let mut tape = Tape::new();
            let f = tape.constant(fmap);
            let t = tape.constant(text);
            assert!(matches!(
                fuse_stage(&mut tape, &store, f, t, stage, FusionMode::Tail),
                Err(FusionError::InactiveStage { .. })
            ));
        }
    }

    #[test]
    fn invalid_calls_are_rejected() {
        let store = random_store(23);
        let (fmap, text) = random_inputs(29, WIDTHS[0]);
        let mut tape = Tape::new();
        let f = tape.constant(fmap);
        let t = tape.constant(text);
        assert!(matches!(
            fuse_stage(&mut tape, &store, f, t, 1, FusionMode::None),
            Err(FusionError::ModeNone)
        ));
        assert!(matches!(
            fuse_stage(&mut tape, &store, f, t, 0, FusionMode::StageAdd),
            Err(FusionError::InvalidStage(0))
        ));
        assert!(matches!(
            fuse_stage(&mut tape, &store, f, t, 6, FusionMode::StageAdd),
            Err(FusionError::InvalidStage(6))
        ));
        // Stage 2 expects 6 channels; the map has WIDTHS[0] = 8.
        assert!(matches!(
            fuse_stage(&mut tape, &store, f, t, 2, FusionMode::StageAdd),
            Err(FusionError::ShapeMismatch(_))
        ));

        let skinny = tape.constant(Tensor::zeros(&[2, D_TEXT - 1]));
        assert!(matches!(
            fuse_stage(&mut tape, &store, f, skinny, 1, FusionMode::StageAdd),
            Err(FusionError::ShapeMismatch(_))
        ));
        let lone = tape.constant(Tensor::zeros(&[1, D_TEXT]));
        assert!(matches!(
            fuse_stage(&mut tape, &store, f, lone, 1, FusionMode::StageAdd),
            Err(FusionError::ShapeMismatch(_))
        ));
        let flat = tape.constant(Tensor::zeros(&[2, 8, 3]));
        assert!(matches!(
            fuse_stage(&mut tape, &store, flat, t, 1, FusionMode::StageAdd),
            Err(FusionError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn batch_permutation_commutes_with_fusion() {
        let store = random_store(31);
        let stage = 3;
        let c = WIDTHS[stage - 1];
        let (fmap, text) = random_inputs(37, c);
        let plane = c * 9;

        let fuse = |fm: &Tensor<f64>, tx: &Tensor<f64>, mode: FusionMode| -> Vec<f64> {
            let mut tape = Tape::new();
            let f = tape.constant(fm.clone());
            let t = tape.constant(tx.clone());
            let out = fuse_stage(&mut tape, &store, f, t, stage, mode).unwrap();
            tape.value(out).data().to_vec()
        };

        let swap_batch = |data: &[f64], stride: usize| -> Vec<f64> {
            let mut out = data[stride..2 * stride].to_vec();
            out.extend_from_slice(&data[..stride]);
            out
        };

        for mode in [FusionMode::StageAdd, FusionMode::StageGate] {
            let direct = fuse(&fmap, &text, mode);
            let swapped_in = fuse(
                &Tensor::from_vec(vec![2, c, 3, 3], swap_batch(fmap.data(), plane)).unwrap(),
                &Tensor::from_vec(vec![2, D_TEXT], swap_batch(text.data(), D_TEXT)).unwrap(),
                mode,
            );
            assert_eq!(swapped_in, swap_batch(&direct, plane), "{mode}");
        }
    }

    #[test]
    fn finite_differences_match_for_weights_bias_and_text() {
        let stage = 5;
        let c = WIDTHS[stage - 1];
        let (fmap, mut text) = random_inputs(41, c);
        text.requires_grad = true;
        let mut fgrad = fmap.clone();
        fgrad.requires_grad = true;

        for mode in [FusionMode::StageAdd, FusionMode::StageGate] {
            let store = random_store(43);
            let loss_with = |s: &ParameterStore<f64>, tx: &Tensor<f64>| -> f64 {
                let mut tape = Tape::new();
                let f = tape.constant(fmap.clone());
                let t = tape.constant(tx.clone());
                let out = fuse_stage(&mut tape, s, f, t, stage, mode).unwrap();
                let loss = tape.mean_all(out).unwrap();
                tape.value(loss).data()[0]
            };

            let mut tape = Tape::new();
            let f = tape.leaf(fgrad.clone());
            let t = tape.leaf(text.clone());
            let out = fuse_stage(&mut tape, &store, f, t, stage, mode).unwrap();
            let loss = tape.mean_all(out).unwrap();
            let grads = tape.backward(loss).unwrap();

            let h = 1e-5;
            for name in [stage_weight_name(stage), stage_bias_name(stage)] {
                let analytic = grads.named(&name).unwrap().data().to_vec();
                assert!(
                    analytic.iter().any(|&g| g != 0.0),
                    "{mode}: zero grad {name}"
                );
                for (i, &a) in analytic.iter().enumerate() {
                    let mut probe = store.clone();
                    probe.get_mut(&name).unwrap().data_mut()[i] += h;
                    let up = loss_with(&probe, &text);
                    probe.get_mut(&name).unwrap().data_mut()[i] -= 2.0 * h;
                    let down = loss_with(&probe, &text);
                    let numeric = (up - down) / (2.0 * h);
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                    assert!(rel <= 1e-4, "{mode} {name}[{i}]: {a} vs {numeric}");
                }
            }

            let tg = grads.wrt(t).expect("text gradient");
            assert!(
                tg.data().iter().any(|&g| g != 0.0),
                "{mode}: zero text grad"
            );
            for i in 0..text.numel() {
                let mut probe = text.clone();
                probe.data_mut()[i] += h;
                let up = loss_with(&store, &probe);
                probe.data_mut()[i] -= 2.0 * h;
                let down = loss_with(&store, &probe);
                let numeric = (up - down) / (2.0 * h);
                let a = tg.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                assert!(rel <= 1e-4, "{mode} text[{i}]: {a} vs {numeric}");
            }
            assert!(grads.wrt(f).is_some(), "{mode}: feature gradient missing");
        }
    }
}
