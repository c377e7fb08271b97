//! Finite-difference audit of every loss term on a two-sample batch.

use super::{joint_loss, momentum_forward, LossFlags, TrainConfig, TrainState, TERM_NAMES};
use crate::autodiff::GradCheck;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::BatchInput;
use crate::nn::param_gradcheck;
use crate::synth::{apply_image_manip, apply_text_manip, gen_pool, gen_pristine, ManipKind, ManipSample, MixConfig};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Coordinates probed per parameter tensor.
const COORDS_PER_PARAM: usize = 6;

#[derive(Clone, Debug)]
pub struct TermCheck {
    pub term: &'static str,
    pub result: GradCheck,
}

impl TermCheck {
    pub fn passes(&self) -> bool {
        self.result.passes(GRADCHECK_TOLERANCE)
    }
}

/// One pristine pair and one pair with a face swap and a text swap, so that
/// every term has something to score.
pub fn gradcheck_batch(seed: u64) -> Result<Vec<ManipSample>> {
    let pristine = gen_pristine(seed)?;
    let fake = apply_image_manip(&gen_pristine(seed + 1)?, ManipKind::FaceSwap, seed + 2)?;
    let fake = apply_text_manip(&fake, ManipKind::TextSwap, seed + 3)?;
    Ok(vec![pristine, fake])
}

/// Checks each term alone and then the joint objective, on the tiny model
/// with queues primed by a few momentum batches.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<TermCheck>> {
    let samples = gradcheck_batch(seed)?;
    let refs: Vec<&ManipSample> = samples.iter().collect();
    let primer = gen_pool(seed ^ 0x5eed, 8, &MixConfig::default())?;
    let mut runs: Vec<(&'static str, LossFlags)> = (0..5)
        .map(|k| {
            let mut a = [false; 5];
            a[k] = true;
            (TERM_NAMES[k], LossFlags::from_array(a))
        })
        .collect();
    runs.push(("joint", LossFlags::ALL));

    let mut out = Vec::new();
    for (term, flags) in runs {
        let cfg = TrainConfig { seed, queue_size: 8, flags, ..TrainConfig::default() };
        let mut state = TrainState::new(&ModelConfig::tiny(), &cfg)?;
        for chunk in primer.chunks(4) {
            let r: Vec<&ManipSample> = chunk.iter().collect();
            let m = momentum_forward(&state.model, &state.momentum, &BatchInput::new(&r), false)?;
            let fl: Vec<bool> = chunk.iter().map(|s| s.y_bin).collect();
            state.image_queue.push(&m.v_proj, &fl)?;
            state.text_queue.push(&m.t_proj, &fl)?;
        }
        let mom = momentum_forward(&state.model, &state.momentum, &BatchInput::new(&refs), flags.tmg)?;
        let result = param_gradcheck(
            &state.online,
            |g| joint_loss(g, &state, &refs, &mom).map(|(l, _)| l),
            GRADCHECK_STEP,
            Some(COORDS_PER_PARAM),
        )?;
        out.push(TermCheck { term, result });
    }
    Ok(out)
}
