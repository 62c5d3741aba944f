use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{forward_diffuse, make_schedule, ModelGrads, PromptKind, ToyModel};
use crate::attention::{AttentionConfig, Conditioning, Mode};
use crate::error::{Error, Result};
use crate::layout::{GridRect, NormBox};
use crate::numerics::Matrix;
use crate::par::{self, Exec, Policy};

/// Synthetic single-subject canvases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub h: usize,
    pub w: usize,
    /// Blob side lengths are drawn uniformly from `blob_min..=blob_max` cells.
    pub blob_min: usize,
    pub blob_max: usize,
    /// Fraction of canvases with no subject at all.
    pub empty_fraction: f64,
    pub size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { h: 16, w: 16, blob_min: 13, blob_max: 16, empty_fraction: 0.1, size: 512 }
    }
}

/// Model shape and optimizer settings for [`train_toy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: DatasetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of replacing an example's conditions with the null prompt.
    pub cond_dropout: f64,
    pub layers: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_cond: usize,
    pub hidden: usize,
    pub scene_tokens: usize,
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub heldout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetConfig::default(),
            epochs: 60,
            batch_size: 16,
            lr: 0.2,
            seed: 0,
            cond_dropout: 0.0,
            layers: 2,
            heads: 2,
            d_head: 16,
            d_cond: 8,
            hidden: 64,
            scene_tokens: 4,
            t_total: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            heldout: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.h == 0 || d.w == 0 || d.size == 0 {
            return Err(Error::Invalid("dataset grid and size must be >= 1".into()));
        }
        if d.blob_min == 0 || d.blob_min > d.blob_max || d.blob_max > d.h.min(d.w) {
            return Err(Error::Invalid(format!("blob sides {}..={} do not fit a {}×{} canvas", d.blob_min, d.blob_max, d.h, d.w)));
        }
        for (name, p) in [("empty_fraction", d.empty_fraction), ("cond_dropout", self.cond_dropout)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.batch_size == 0 || self.heldout == 0 {
            return Err(Error::Invalid("batch_size and heldout must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig::new(self.layers, self.heads, self.d_head, self.d_cond)
    }
}

/// Six saturated RGB colors plus the gray (zero) background.
pub fn default_palette() -> Vec<(String, Vec<f64>)> {
    [
        ("red", [1.0, -1.0, -1.0]),
        ("green", [-1.0, 1.0, -1.0]),
        ("blue", [-1.0, -1.0, 1.0]),
        ("yellow", [1.0, 1.0, -1.0]),
        ("cyan", [-1.0, 1.0, 1.0]),
        ("magenta", [1.0, -1.0, 1.0]),
    ]
    .into_iter()
    .map(|(n, c)| (n.to_string(), c.to_vec()))
    .collect()
}

/// One synthetic training image.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    /// `h·w × C`
    pub image: Matrix,
    pub h: usize,
    pub w: usize,
    /// Palette index and blob rect, `None` for an empty canvas.
    pub subject: Option<(usize, GridRect)>,
}

/// Paints one canvas: background everywhere, optionally one blob.
pub fn generate_canvas(cfg: &DatasetConfig, colors: &[Vec<f64>], background: &[f64], rng: &mut impl Rng) -> Canvas {
    let c = background.len();
    let mut image = Matrix::zeros(cfg.h * cfg.w, c);
    for p in 0..cfg.h * cfg.w {
        image.row_mut(p).copy_from_slice(background);
    }
    let subject = if colors.is_empty() || rng.random::<f64>() < cfg.empty_fraction {
        None
    } else {
        let k = rng.random_range(0..colors.len());
        let bh = rng.random_range(cfg.blob_min..=cfg.blob_max);
        let bw = rng.random_range(cfg.blob_min..=cfg.blob_max);
        let y = rng.random_range(0..=cfg.h - bh);
        let x = rng.random_range(0..=cfg.w - bw);
        let rect = GridRect::new(y, y + bh, x, x + bw);
        for p in rect.pixel_indices(cfg.w) {
            image.row_mut(p).copy_from_slice(&colors[k]);
        }
        Some((k, rect))
    };
    Canvas { image, h: cfg.h, w: cfg.w, subject }
}

/// A subject reference inside a training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleSubject {
    /// Index into the model's subject table.
    pub index: usize,
    pub bbox: NormBox,
    pub priority: i64,
}

/// One `(z_0, t, ε, conditions)` tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub z0: Matrix,
    pub h: usize,
    pub w: usize,
    pub t: usize,
    pub eps: Matrix,
    pub prompt: PromptKind,
    pub subjects: Vec<ExampleSubject>,
    pub mode: Mode,
}

/// Draws `t` and `ε` for each canvas. Subjects condition through the
/// layout-free image stream over the full canvas.
pub fn make_batch(canvases: &[&Canvas], t_total: usize, cond_dropout: f64, rng: &mut impl Rng) -> Vec<TrainExample> {
    canvases
        .iter()
        .map(|cv| {
            let t = rng.random_range(1..=t_total);
            let n = cv.image.len();
            let eps = Matrix::from_vec(cv.image.rows(), cv.image.cols(), (0..n).map(|_| StandardNormal.sample(rng)).collect())
                .expect("shape");
            let dropped = cond_dropout > 0.0 && rng.random::<f64>() < cond_dropout;
            let (prompt, subjects, mode) = match cv.subject {
                _ if dropped => (PromptKind::Null, Vec::new(), Mode::TextOnly),
                Some((index, _)) => {
                    (PromptKind::Scene, vec![ExampleSubject { index, bbox: NormBox::FULL, priority: 0 }], Mode::GlobalSum)
                }
                None => (PromptKind::Scene, Vec::new(), Mode::TextOnly),
            };
            TrainExample { z0: cv.image.clone(), h: cv.h, w: cv.w, t, eps, prompt, subjects, mode }
        })
        .collect()
}

/// Mean squared noise-prediction error over the batch and its gradient with
/// respect to every trainable tensor of `model`.
pub fn rec_loss(model: &ToyModel, batch: &[TrainExample], policy: Policy) -> Result<(f64, ModelGrads)> {
    if batch.is_empty() {
        return Err(Error::Invalid("rec_loss needs a non-empty batch".into()));
    }
    let coords: usize = batch.iter().map(|e| e.eps.len()).sum();
    let scale = 2.0 / coords as f64;
    let den = &model.denoiser;
    let per_item = par::map_indexed(policy, batch.len(), |i| -> Result<(f64, ModelGrads)> {
        let ex = &batch[i];
        let picks: Vec<_> = ex.subjects.iter().map(|s| (s.index, s.bbox, s.priority)).collect();
        if picks.iter().any(|p| p.0 >= model.subjects.len()) {
            return Err(Error::Invalid("training example references an unknown subject".into()));
        }
        let subs = model.conditions(&picks);
        let cond = Conditioning { prompt: model.prompt(ex.prompt), subjects: &subs, mode: ex.mode };
        let z_t = forward_diffuse(&ex.z0, ex.t, &ex.eps, &model.schedule)?;
        let exec = Exec::sequential();
        let (pred, cache) = den.forward_cached(&z_t, (ex.h, ex.w), ex.t, 0, &cond, &model.adapter, &den.config, exec)?;
        let mut diff = pred;
        diff.add_scaled_assign(&ex.eps, -1.0)?;
        let sq: f64 = diff.as_slice().iter().map(|v| v * v).sum();
        let d_out = diff.scale(scale);
        let (g_den, g_adapter, d_prompt, d_subjects) = den.backward(&cache, &cond, &model.adapter, &d_out, Policy::Sequential)?;
        let mut g = model.zero_grads();
        g.denoiser = g_den;
        g.adapter = g_adapter;
        if ex.prompt == PromptKind::Scene {
            g.scene = d_prompt;
        }
        for (s, d) in ex.subjects.iter().zip(&d_subjects) {
            g.subjects[s.index].add_assign(d)?;
        }
        Ok((sq, g))
    });
    let mut total = model.zero_grads();
    let mut sq = 0.0;
    for item in per_item {
        let (s, g) = item?;
        sq += s;
        total.add_assign(&g)?;
    }
    let loss = sq / coords as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("rec_loss = {loss}")));
    }
    Ok((loss, total))
}

/// Loss trajectory and held-out comparison of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub heldout_initial: f64,
    pub heldout_final: f64,
    pub parameter_count: usize,
    pub steps: usize,
}

/// Trains a fresh seeded model with plain SGD and returns it with its report.
pub fn train_toy(cfg: &TrainConfig, policy: Policy) -> Result<(ToyModel, TrainReport)> {
    cfg.validate()?;
    let schedule = make_schedule(cfg.t_total, cfg.beta_start, cfg.beta_end)?;
    let palette = default_palette();
    let background = vec![0.0; 3];
    let mut model = ToyModel::init(cfg.attention_config(), 3, cfg.hidden, schedule, cfg.scene_tokens, &palette, background.clone(), cfg.seed)?;
    let colors: Vec<Vec<f64>> = palette.iter().map(|p| p.1.clone()).collect();

    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let canvases: Vec<Canvas> = (0..cfg.dataset.size).map(|_| generate_canvas(&cfg.dataset, &colors, &background, &mut data_rng)).collect();
    let mut held_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let held_canvases: Vec<Canvas> = (0..cfg.heldout).map(|_| generate_canvas(&cfg.dataset, &colors, &background, &mut held_rng)).collect();
    let heldout = make_batch(&held_canvases.iter().collect::<Vec<_>>(), cfg.t_total, 0.0, &mut held_rng);
    let heldout_initial = rec_loss(&model, &heldout, policy)?.0;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut order: Vec<usize> = (0..canvases.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let picked: Vec<&Canvas> = chunk.iter().map(|&i| &canvases[i]).collect();
            let batch = make_batch(&picked, cfg.t_total, cfg.cond_dropout, &mut rng);
            let (loss, grads) = rec_loss(&model, &batch, policy)
                .map_err(|e| Error::NonFinite(format!("training diverged at epoch {epoch}, step {steps}: {e}")))?;
            for (p, g) in model.trainable_mut().into_iter().zip(grads.matrices()) {
                p.add_scaled_assign(g, -cfg.lr)?;
            }
            sum += loss;
            batches += 1;
            steps += 1;
        }
        let mean = sum / batches as f64;
        log::info!("epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    let heldout_final = rec_loss(&model, &heldout, policy)?.0;
    let parameter_count = model.parameter_count();
    Ok((model, TrainReport { epoch_losses, heldout_initial, heldout_final, parameter_count, steps }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, FD_STEP};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            dataset: DatasetConfig { h: 4, w: 4, blob_min: 2, blob_max: 3, empty_fraction: 0.25, size: 8 },
            epochs: 2,
            batch_size: 4,
            lr: 0.1,
            seed: 5,
            cond_dropout: 0.0,
            layers: 2,
            heads: 2,
            d_head: 3,
            d_cond: 4,
            hidden: 5,
            scene_tokens: 2,
            t_total: 10,
            beta_start: 1e-3,
            beta_end: 0.2,
            heldout: 4,
        }
    }

    fn tiny_model(cfg: &TrainConfig) -> ToyModel {
        let schedule = make_schedule(cfg.t_total, cfg.beta_start, cfg.beta_end).unwrap();
        ToyModel::init(cfg.attention_config(), 3, cfg.hidden, schedule, cfg.scene_tokens, &default_palette()[..3], vec![0.0; 3], 11).unwrap()
    }

    #[test]
    fn canvas_generator_paints_exactly_its_rect() {
        let cfg = DatasetConfig { empty_fraction: 0.0, ..DatasetConfig::default() };
        let colors: Vec<Vec<f64>> = default_palette().into_iter().map(|p| p.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let cv = generate_canvas(&cfg, &colors, &[0.0; 3], &mut rng);
            let (k, rect) = cv.subject.unwrap();
            assert!(rect.h_e - rect.h_s >= 13 && rect.w_e - rect.w_s >= 13);
            for p in 0..256 {
                let expect: &[f64] = if rect.contains(p / 16, p % 16) { &colors[k] } else { &[0.0; 3] };
                assert_eq!(cv.image.row(p), expect);
            }
        }
    }

    #[test]
    fn perfect_denoiser_has_zero_loss_and_gradient() {
        let cfg = tiny_config();
        let mut m = tiny_model(&cfg);
        m.denoiser = m.denoiser.zeroed();
        let ex = TrainExample {
            z0: Matrix::zeros(16, 3),
            h: 4,
            w: 4,
            t: 3,
            eps: Matrix::filled(16, 3, 0.5),
            prompt: PromptKind::Scene,
            subjects: vec![],
            mode: Mode::TextOnly,
        };
        m.denoiser.unembed_b = Matrix::row_vector(&[0.5, 0.5, 0.5]);
        let (loss, g) = rec_loss(&m, std::slice::from_ref(&ex), Policy::Sequential).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));

        m.denoiser.unembed_b = Matrix::zeros(1, 3);
        let unit = TrainExample { eps: Matrix::filled(16, 3, 1.0), ..ex };
        assert_eq!(rec_loss(&m, &[unit], Policy::Sequential).unwrap().0, 1.0);
        assert!(rec_loss(&m, &[], Policy::Sequential).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_for_every_group() {
        let cfg = tiny_config();
        let model = tiny_model(&cfg);
        assert!(model.parameter_count() <= 5000);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let colors: Vec<Vec<f64>> = default_palette()[..3].iter().map(|p| p.1.clone()).collect();
        let canvases: Vec<Canvas> = (0..3).map(|_| generate_canvas(&cfg.dataset, &colors, &[0.0; 3], &mut rng)).collect();
        let mut batch = make_batch(&canvases.iter().collect::<Vec<_>>(), cfg.t_total, 0.0, &mut rng);
        // Exercise the layout-aware paths as well.
        batch[0].subjects = vec![
            ExampleSubject { index: 0, bbox: NormBox { x0: 0.0, y0: 0.0, x1: 0.75, y1: 0.5 }, priority: 2 },
            ExampleSubject { index: 2, bbox: NormBox { x0: 0.25, y0: 0.25, x1: 1.0, y1: 1.0 }, priority: 1 },
        ];
        batch[0].mode = Mode::Anyms;
        batch[1].subjects = batch[0].subjects.clone();
        batch[1].mode = Mode::MaskedSum;
        let (_, grads) = rec_loss(&model, &batch, Policy::Sequential).unwrap();
        let analytic = grads.flatten();

        let theta: Vec<f64> = model.trainable().iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        let numeric = finite_diff_grad(
            |x| {
                let mut m = model.clone();
                let mut off = 0;
                for p in m.trainable_mut() {
                    let n = p.len();
                    p.as_mut_slice().copy_from_slice(&x[off..off + n]);
                    off += n;
                }
                rec_loss(&m, &batch, Policy::Sequential).unwrap().0
            },
            &theta,
            FD_STEP,
        )
        .unwrap();
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig { epochs: 0, ..tiny_config() };
        let (m, report) = train_toy(&cfg, Policy::Sequential).unwrap();
        let init = ToyModel::init(
            cfg.attention_config(),
            3,
            cfg.hidden,
            make_schedule(cfg.t_total, cfg.beta_start, cfg.beta_end).unwrap(),
            cfg.scene_tokens,
            &default_palette(),
            vec![0.0; 3],
            cfg.seed,
        )
        .unwrap();
        assert_eq!(m, init);
        assert_eq!(report.heldout_initial, report.heldout_final);
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_across_policies() {
        let cfg = tiny_config();
        let (a, ra) = train_toy(&cfg, Policy::Sequential).unwrap();
        let (b, rb) = train_toy(&cfg, Policy::Parallel).unwrap();
        assert_eq!(a.to_container().unwrap().to_bytes().unwrap(), b.to_container().unwrap().to_bytes().unwrap());
        assert_eq!(ra, rb);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            TrainConfig { batch_size: 0, ..tiny_config() },
            TrainConfig { lr: 0.0, ..tiny_config() },
            TrainConfig { cond_dropout: 1.5, ..tiny_config() },
            TrainConfig { dataset: DatasetConfig { blob_max: 9, ..tiny_config().dataset }, ..tiny_config() },
        ];
        for cfg in bad {
            assert!(train_toy(&cfg, Policy::Sequential).is_err());
        }
    }
}
