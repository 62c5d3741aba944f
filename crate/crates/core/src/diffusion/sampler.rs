use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ddim_step, timesteps, ToyModel};
use crate::adapter::load_conditions;
use crate::attention::{AttentionConfig, AttentionTrace, Conditioning, Mode};
use crate::error::{Error, Result};
use crate::numerics::{LatentGrid, Matrix};
use crate::par::{Exec, OpCounter, Policy};
use crate::tensorio::LayoutSpec;

/// Knobs that are not part of the layout spec.
#[derive(Debug, Clone, Default)]
pub struct SampleOptions {
    pub policy: Policy,
    /// Record softmax weights of every conditional pass.
    pub trace: bool,
    /// Overrides for the model's attention application range.
    pub apply_layers: Option<std::collections::BTreeSet<usize>>,
    pub apply_steps: Option<(usize, usize)>,
    pub zero_init_exterior: bool,
}

/// Output of one sampling run.
#[derive(Debug)]
pub struct GenerationResult {
    pub z0: LatentGrid,
    /// Identity codec: the image is the final latent.
    pub image: LatentGrid,
    /// `(t, t_prev)` per step.
    pub timesteps: Vec<(usize, usize)>,
    pub trace: Option<AttentionTrace>,
    /// Denoiser evaluations, two per step when guidance is on.
    pub evaluations: usize,
}

/// Seeded DDIM sampling of `spec` with default options.
pub fn sample(spec: &LayoutSpec, model: &ToyModel) -> Result<GenerationResult> {
    sample_with(spec, model, &SampleOptions::default(), None)
}

/// Seeded DDIM sampling with optional classifier-free guidance. The null-prompt
/// pass never uses the image stream.
pub fn sample_with(spec: &LayoutSpec, model: &ToyModel, opts: &SampleOptions, counter: Option<&OpCounter>) -> Result<GenerationResult> {
    let den = &model.denoiser;
    let (h, w, c) = (spec.grid.h, spec.grid.w, spec.grid.c);
    if c != den.channels {
        return Err(Error::shape("sample", format!("spec has {c} channels, model {}", den.channels)));
    }
    if spec.prompt.cols() != den.config.d_cond {
        return Err(Error::shape("sample", format!("prompt width {} vs d_cond {}", spec.prompt.cols(), den.config.d_cond)));
    }
    spec.prompt.ensure_finite("prompt")?;
    let steps = timesteps(model.schedule.len(), spec.steps)?;
    let subjects = load_conditions(spec, &model.adapter)?;
    let config = AttentionConfig {
        image_scale: spec.image_scale,
        apply_layers: opts.apply_layers.clone().or_else(|| den.config.apply_layers.clone()),
        apply_steps: opts.apply_steps.or(den.config.apply_steps),
        zero_init_exterior: opts.zero_init_exterior || den.config.zero_init_exterior,
        ..den.config.clone()
    };
    config.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut z = Matrix::from_vec(h * w, c, (0..h * w * c).map(|_| StandardNormal.sample(&mut rng)).collect())?;
    let trace = opts.trace.then(AttentionTrace::new);
    let cond = Conditioning { prompt: &spec.prompt, subjects: &subjects, mode: spec.mode };
    let uncond = Conditioning { prompt: &model.null_prompt, subjects: &[], mode: Mode::TextOnly };
    let mut evaluations = 0;
    for (step, &(t, t_prev)) in steps.iter().enumerate() {
        let mut exec = Exec { policy: opts.policy, counter, trace: trace.as_ref() };
        let eps_c = den.forward(&z, (h, w), t, step, &cond, &model.adapter, &config, exec)?;
        evaluations += 1;
        let eps = if spec.guidance > 0.0 {
            exec.trace = None;
            exec.counter = None;
            let eps_u = den.forward(&z, (h, w), t, step, &uncond, &model.adapter, &config, exec)?;
            evaluations += 1;
            let mut e = eps_u.clone();
            let mut delta = eps_c;
            delta.add_scaled_assign(&eps_u, -1.0)?;
            e.add_scaled_assign(&delta, spec.guidance)?;
            e
        } else {
            eps_c
        };
        z = ddim_step(&z, &eps, t, t_prev, &model.schedule)?;
        z.ensure_finite(&format!("latent after step {step} (t = {t})"))?;
    }
    let z0 = LatentGrid::new(h, w, z)?;
    Ok(GenerationResult { image: z0.clone(), z0, timesteps: steps, trace, evaluations })
}
