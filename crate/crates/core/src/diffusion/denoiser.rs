use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Schedule;
use crate::adapter::{AdapterHead, AdapterWeights, SubjectCondition};
use crate::attention::{
    decoupled_block_backward, decoupled_block_cached, AttentionConfig, BlockCache, BlockSite, BlockWeights, Conditioning, HeadWeights,
};
use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, matmul_tn, matmul_with, Matrix};
use crate::par::{Exec, Policy};
use crate::tensorio::{Container, Tensor};

/// Pointwise two-layer MLP `tanh(h·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Noise predictor: patch embed, time embedding, `L` residual
/// (decoupled block, MLP) pairs, unembed.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub config: AttentionConfig,
    pub channels: usize,
    /// `C × d_model`
    pub patch_w: Matrix,
    pub patch_b: Matrix,
    /// `T × d_model`; row `t − 1` is added for timestep `t`.
    pub time: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub mlps: Vec<MlpWeights>,
    /// `d_model × C`
    pub unembed_w: Matrix,
    pub unembed_b: Matrix,
}

/// Which prompt a training example is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Scene,
    Null,
}

/// A palette subject: its id, embedding row and render color.
#[derive(Debug, Clone, PartialEq)]
pub struct PaletteEntry {
    pub id: String,
    /// `m_j × d_cond`
    pub embedding: Matrix,
    pub color: Vec<f64>,
}

/// Everything a generation or training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub denoiser: ToyDenoiser,
    pub adapter: AdapterWeights,
    pub schedule: Schedule,
    /// Learned scene prompt, `m_t × d_cond`.
    pub scene: Matrix,
    /// Fixed unconditional prompt.
    pub null_prompt: Matrix,
    pub subjects: Vec<PaletteEntry>,
    pub background: Vec<f64>,
}

/// Gradients of every trainable tensor of a [`ToyModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub denoiser: ToyDenoiser,
    pub adapter: AdapterWeights,
    pub scene: Matrix,
    pub subjects: Vec<Matrix>,
}

/// Intermediates of a forward pass.
#[derive(Debug, Clone)]
pub struct DenoiserCache {
    x: Matrix,
    /// Per layer: block input, block cache, MLP input, tanh activations.
    layers: Vec<(Matrix, BlockCache, Matrix, Matrix)>,
    last: Matrix,
    t: usize,
}

fn zeros_like(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

fn add_bias(m: &mut Matrix, b: &Matrix) -> Result<()> {
    m.add_row_broadcast(b.as_slice())
}

impl ToyDenoiser {
    /// Seeded initialization. Projections are `N(0, 1/fan_in)`; the time table
    /// starts from sinusoidal features.
    pub fn init(config: AttentionConfig, channels: usize, hidden: usize, t_total: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if channels == 0 || hidden == 0 || t_total == 0 || config.layers == 0 {
            return Err(Error::Invalid("channels, hidden, layers and T must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut dense = |r: usize, c: usize| {
            let n = Normal::new(0.0, (1.0 / r as f64).sqrt()).expect("positive sd");
            Matrix::from_vec(r, c, (0..r * c).map(|_| n.sample(&mut rng)).collect()).expect("shape")
        };
        let patch_w = dense(channels, d);
        let mut blocks = Vec::with_capacity(config.layers);
        let mut mlps = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let heads = (0..config.heads)
                .map(|_| HeadWeights {
                    wq: dense(d, config.d_head),
                    wk: dense(config.d_cond, config.d_head),
                    wv: dense(config.d_cond, config.d_head),
                })
                .collect();
            blocks.push(BlockWeights { heads, wo: dense(d, d).scale(0.5) });
            mlps.push(MlpWeights {
                w1: dense(d, hidden),
                b1: Matrix::zeros(1, hidden),
                w2: dense(hidden, d).scale(0.5),
                b2: Matrix::zeros(1, d),
            });
        }
        let unembed_w = dense(d, channels).scale(0.5);
        let mut time = Matrix::zeros(t_total, d);
        for t in 0..t_total {
            for i in 0..d {
                let freq = (t_total as f64).powf(-((i / 2 * 2) as f64) / d as f64);
                let v = if i % 2 == 0 { (t as f64 * freq).sin() } else { (t as f64 * freq).cos() };
                time.set(t, i, 0.5 * v);
            }
        }
        Ok(ToyDenoiser {
            config,
            channels,
            patch_w,
            patch_b: Matrix::zeros(1, d),
            time,
            blocks,
            mlps,
            unembed_w,
            unembed_b: Matrix::zeros(1, channels),
        })
    }

    pub fn hidden(&self) -> usize {
        self.mlps.first().map_or(0, |m| m.w1.cols())
    }

    pub fn t_total(&self) -> usize {
        self.time.rows()
    }

    /// Every tensor in a fixed order.
    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.patch_w, &self.patch_b, &self.time];
        for (b, m) in self.blocks.iter().zip(&self.mlps) {
            for h in &b.heads {
                v.extend([&h.wq, &h.wk, &h.wv]);
            }
            v.extend([&b.wo, &m.w1, &m.b1, &m.w2, &m.b2]);
        }
        v.extend([&self.unembed_w, &self.unembed_b]);
        v
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.patch_w, &mut self.patch_b, &mut self.time];
        for (b, m) in self.blocks.iter_mut().zip(&mut self.mlps) {
            for h in &mut b.heads {
                v.extend([&mut h.wq, &mut h.wk, &mut h.wv]);
            }
            v.extend([&mut b.wo, &mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2]);
        }
        v.extend([&mut self.unembed_w, &mut self.unembed_b]);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.matrices_mut().into_iter().for_each(|m| *m = zeros_like(m));
        z
    }

    pub fn ensure_finite(&self) -> Result<()> {
        self.matrices().iter().try_for_each(|m| m.ensure_finite("denoiser weights"))
    }

    fn check_call(&self, z_t: &Matrix, h: usize, w: usize, t: usize) -> Result<()> {
        if z_t.shape() != (h * w, self.channels) {
            return Err(Error::shape("denoiser", format!("z_t is {:?}, expected ({}, {})", z_t.shape(), h * w, self.channels)));
        }
        if t == 0 || t > self.t_total() {
            return Err(Error::Invalid(format!("timestep {t} outside 1..={}", self.t_total())));
        }
        Ok(())
    }

    /// ε̂ for `z_t` (`h·w × C`) at timestep `t`. `step` is the sampler step
    /// index used to decide whether the image stream is active.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        z_t: &Matrix,
        (h, w): (usize, usize),
        t: usize,
        step: usize,
        cond: &Conditioning<'_>,
        adapter: &AdapterWeights,
        config: &AttentionConfig,
        exec: Exec<'_>,
    ) -> Result<Matrix> {
        self.forward_cached(z_t, (h, w), t, step, cond, adapter, config, exec).map(|(out, _)| out)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_cached(
        &self,
        z_t: &Matrix,
        (h, w): (usize, usize),
        t: usize,
        step: usize,
        cond: &Conditioning<'_>,
        adapter: &AdapterWeights,
        config: &AttentionConfig,
        exec: Exec<'_>,
    ) -> Result<(Matrix, DenoiserCache)> {
        self.check_call(z_t, h, w, t)?;
        let p = exec.policy;
        let mut act = matmul_with(p, z_t, &self.patch_w)?;
        add_bias(&mut act, &self.patch_b)?;
        act.add_row_broadcast(self.time.row(t - 1))?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (layer, (block, mlp)) in self.blocks.iter().zip(&self.mlps).enumerate() {
            let site = BlockSite { layer, step, h, w };
            let (a, bc) = decoupled_block_cached(&act, cond, site, block, adapter, config, exec)?;
            let block_in = act.clone();
            act.add_assign(&a)?;
            let mut u = matmul_with(p, &act, &mlp.w1)?;
            add_bias(&mut u, &mlp.b1)?;
            u.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
            let mut m = matmul_with(p, &u, &mlp.w2)?;
            add_bias(&mut m, &mlp.b2)?;
            let mlp_in = act.clone();
            act.add_assign(&m)?;
            layers.push((block_in, bc, mlp_in, u));
        }
        let mut out = matmul_with(p, &act, &self.unembed_w)?;
        add_bias(&mut out, &self.unembed_b)?;
        out.ensure_finite("denoiser output")?;
        Ok((out, DenoiserCache { x: z_t.clone(), layers, last: act, t }))
    }

    /// Backpropagates `d_out` through a cached forward pass. Returns the
    /// denoiser gradients (same layout as `self`), adapter gradients, and the
    /// gradients of the prompt and of each subject embedding.
    pub fn backward(
        &self,
        cache: &DenoiserCache,
        cond: &Conditioning<'_>,
        adapter: &AdapterWeights,
        d_out: &Matrix,
        policy: Policy,
    ) -> Result<(ToyDenoiser, AdapterWeights, Matrix, Vec<Matrix>)> {
        let mut g = self.zeroed();
        let mut g_adapter = zeroed_adapter(adapter);
        let mut d_prompt = zeros_like(cond.prompt);
        let mut d_subjects: Vec<Matrix> = cond.subjects.iter().map(|s| zeros_like(&s.embedding)).collect();

        g.unembed_w = matmul_tn(&cache.last, d_out)?;
        g.unembed_b = d_out.column_sums();
        let mut d_act = matmul_nt(d_out, &self.unembed_w)?;

        for layer in (0..self.blocks.len()).rev() {
            let (block_in, bc, mlp_in, u) = &cache.layers[layer];
            let mlp = &self.mlps[layer];
            let gm = &mut g.mlps[layer];
            gm.w2 = matmul_tn(u, &d_act)?;
            gm.b2 = d_act.column_sums();
            let mut d_u = matmul_nt(&d_act, &mlp.w2)?;
            d_u.as_mut_slice().iter_mut().zip(u.as_slice()).for_each(|(d, &a)| *d *= 1.0 - a * a);
            gm.w1 = matmul_tn(mlp_in, &d_u)?;
            gm.b1 = d_u.column_sums();
            d_act.add_assign(&matmul_nt(&d_u, &mlp.w1)?)?;

            let bg = decoupled_block_backward(block_in, cond, &self.blocks[layer], adapter, layer, bc, &d_act, policy)?;
            d_act.add_assign(&bg.d_z)?;
            g.blocks[layer] = bg.block;
            if layer < g_adapter.layers.len() {
                g_adapter.layers[layer] = bg.adapter;
            }
            d_prompt.add_assign(&bg.d_prompt)?;
            for (acc, d) in d_subjects.iter_mut().zip(&bg.d_subjects) {
                acc.add_assign(d)?;
            }
        }

        g.patch_w = matmul_tn(&cache.x, &d_act)?;
        g.patch_b = d_act.column_sums();
        let sums = d_act.column_sums();
        g.time.row_mut(cache.t - 1).copy_from_slice(sums.as_slice());
        Ok((g, g_adapter, d_prompt, d_subjects))
    }

    pub fn write_to(&self, c: &mut Container) -> Result<()> {
        c.insert_matrix("denoiser.patch.w", &self.patch_w)?;
        c.insert_matrix("denoiser.patch.b", &self.patch_b)?;
        c.insert_matrix("denoiser.time", &self.time)?;
        for (l, (b, m)) in self.blocks.iter().zip(&self.mlps).enumerate() {
            for (h, hw) in b.heads.iter().enumerate() {
                c.insert_matrix(format!("denoiser.layer{l}.head{h}.wq"), &hw.wq)?;
                c.insert_matrix(format!("denoiser.layer{l}.head{h}.wk"), &hw.wk)?;
                c.insert_matrix(format!("denoiser.layer{l}.head{h}.wv"), &hw.wv)?;
            }
            c.insert_matrix(format!("denoiser.layer{l}.wo"), &b.wo)?;
            c.insert_matrix(format!("denoiser.layer{l}.mlp.w1"), &m.w1)?;
            c.insert_matrix(format!("denoiser.layer{l}.mlp.b1"), &m.b1)?;
            c.insert_matrix(format!("denoiser.layer{l}.mlp.w2"), &m.w2)?;
            c.insert_matrix(format!("denoiser.layer{l}.mlp.b2"), &m.b2)?;
        }
        c.insert_matrix("denoiser.unembed.w", &self.unembed_w)?;
        c.insert_matrix("denoiser.unembed.b", &self.unembed_b)?;
        Ok(())
    }

    /// Reads a denoiser back, inferring its shape from the stored tensors.
    pub fn read_from(c: &Container) -> Result<Self> {
        let layers = (0..).take_while(|l| c.contains(&format!("denoiser.layer{l}.wo"))).count();
        let heads = (0..).take_while(|h| c.contains(&format!("denoiser.layer0.head{h}.wq"))).count();
        if layers == 0 || heads == 0 {
            return Err(Error::MissingTensor("denoiser.layer0.head0.wq".into()));
        }
        let patch_w = c.matrix("denoiser.patch.w")?;
        let wk0 = c.matrix("denoiser.layer0.head0.wk")?;
        let config = AttentionConfig::new(layers, heads, wk0.cols(), wk0.rows());
        let mut blocks = Vec::with_capacity(layers);
        let mut mlps = Vec::with_capacity(layers);
        for l in 0..layers {
            let heads = (0..heads)
                .map(|h| {
                    Ok(HeadWeights {
                        wq: c.matrix(&format!("denoiser.layer{l}.head{h}.wq"))?,
                        wk: c.matrix(&format!("denoiser.layer{l}.head{h}.wk"))?,
                        wv: c.matrix(&format!("denoiser.layer{l}.head{h}.wv"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(BlockWeights { heads, wo: c.matrix(&format!("denoiser.layer{l}.wo"))? });
            mlps.push(MlpWeights {
                w1: c.matrix(&format!("denoiser.layer{l}.mlp.w1"))?,
                b1: c.matrix(&format!("denoiser.layer{l}.mlp.b1"))?,
                w2: c.matrix(&format!("denoiser.layer{l}.mlp.w2"))?,
                b2: c.matrix(&format!("denoiser.layer{l}.mlp.b2"))?,
            });
        }
        let d = ToyDenoiser {
            channels: patch_w.rows(),
            patch_w,
            patch_b: c.matrix("denoiser.patch.b")?,
            time: c.matrix("denoiser.time")?,
            blocks,
            mlps,
            unembed_w: c.matrix("denoiser.unembed.w")?,
            unembed_b: c.matrix("denoiser.unembed.b")?,
            config,
        };
        d.validate()?;
        Ok(d)
    }

    /// Checks every tensor shape against the config and finiteness.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let (d, c, hid) = (cfg.d_model, self.channels, self.hidden());
        let bad = |what: &str| Err(Error::shape("ToyDenoiser", what.to_string()));
        if self.patch_w.shape() != (c, d) || self.patch_b.shape() != (1, d) || self.time.cols() != d || self.time.rows() == 0 {
            return bad("patch/time shapes");
        }
        if self.unembed_w.shape() != (d, c) || self.unembed_b.shape() != (1, c) {
            return bad("unembed shapes");
        }
        if self.blocks.len() != cfg.layers || self.mlps.len() != cfg.layers {
            return bad("layer count");
        }
        for (b, m) in self.blocks.iter().zip(&self.mlps) {
            b.validate(cfg)?;
            if m.w1.shape() != (d, hid) || m.b1.shape() != (1, hid) || m.w2.shape() != (hid, d) || m.b2.shape() != (1, d) {
                return bad("MLP shapes");
            }
        }
        self.ensure_finite()
    }
}

fn zeroed_adapter(a: &AdapterWeights) -> AdapterWeights {
    AdapterWeights {
        layers: a
            .layers
            .iter()
            .map(|l| l.iter().map(|h| AdapterHead { wk: zeros_like(&h.wk), wv: zeros_like(&h.wv) }).collect())
            .collect(),
    }
}

fn adapter_matrices(a: &AdapterWeights) -> Vec<&Matrix> {
    a.layers.iter().flatten().flat_map(|h| [&h.wk, &h.wv]).collect()
}

fn adapter_matrices_mut(a: &mut AdapterWeights) -> Vec<&mut Matrix> {
    a.layers.iter_mut().flatten().flat_map(|h| [&mut h.wk, &mut h.wv]).collect()
}

impl ToyModel {
    /// Seeded model with `m_t`-token scene prompt and one-token subject embeddings.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        config: AttentionConfig,
        channels: usize,
        hidden: usize,
        schedule: Schedule,
        scene_tokens: usize,
        palette: &[(String, Vec<f64>)],
        background: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let denoiser = ToyDenoiser::init(config.clone(), channels, hidden, schedule.len(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ada9);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut normal = |r: usize, c: usize, sd: f64| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| sd * unit.sample(&mut rng)).collect()).expect("shape")
        };
        let dc = config.d_cond;
        let adapter = AdapterWeights {
            layers: (0..config.layers)
                .map(|_| {
                    (0..config.heads)
                        .map(|_| AdapterHead {
                            wk: normal(dc, config.d_head, (1.0 / dc as f64).sqrt()),
                            wv: normal(dc, config.d_head, (1.0 / dc as f64).sqrt()),
                        })
                        .collect()
                })
                .collect(),
        };
        let scene = normal(scene_tokens.max(1), dc, 1.0);
        let subjects = palette
            .iter()
            .map(|(id, color)| PaletteEntry { id: id.clone(), embedding: normal(1, dc, 1.0), color: color.clone() })
            .collect();
        Ok(ToyModel { denoiser, adapter, schedule, scene, null_prompt: Matrix::zeros(1, dc), subjects, background })
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }

    /// Trainable tensors in a fixed order; [`ModelGrads::matrices`] matches it.
    pub fn trainable(&self) -> Vec<&Matrix> {
        let mut v = self.denoiser.matrices();
        v.extend(adapter_matrices(&self.adapter));
        v.push(&self.scene);
        v.extend(self.subjects.iter().map(|s| &s.embedding));
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.denoiser.matrices_mut();
        v.extend(adapter_matrices_mut(&mut self.adapter));
        v.push(&mut self.scene);
        v.extend(self.subjects.iter_mut().map(|s| &mut s.embedding));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|m| m.len()).sum()
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            denoiser: self.denoiser.zeroed(),
            adapter: zeroed_adapter(&self.adapter),
            scene: zeros_like(&self.scene),
            subjects: self.subjects.iter().map(|s| zeros_like(&s.embedding)).collect(),
        }
    }

    /// Conditions for palette subjects `(index, box, priority)`.
    pub fn conditions(&self, picks: &[(usize, crate::layout::NormBox, i64)]) -> Vec<SubjectCondition> {
        picks
            .iter()
            .map(|&(i, bbox, priority)| SubjectCondition::new(self.subjects[i].id.clone(), self.subjects[i].embedding.clone(), bbox, priority))
            .collect()
    }

    pub fn prompt(&self, kind: PromptKind) -> &Matrix {
        match kind {
            PromptKind::Scene => &self.scene,
            PromptKind::Null => &self.null_prompt,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        self.denoiser.write_to(&mut c)?;
        self.adapter.write_to(&mut c)?;
        c.insert("schedule.betas", Tensor::f64(vec![self.schedule.len()], self.schedule.betas().to_vec())?)?;
        c.insert_matrix("prompt.scene", &self.scene)?;
        c.insert_matrix("prompt.null", &self.null_prompt)?;
        for s in &self.subjects {
            c.insert_matrix(format!("subject.{}", s.id), &s.embedding)?;
            c.insert(format!("palette.{}", s.id), Tensor::f64(vec![s.color.len()], s.color.clone())?)?;
        }
        c.insert("palette.background", Tensor::f64(vec![self.background.len()], self.background.clone())?)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let denoiser = ToyDenoiser::read_from(c)?;
        let adapter = AdapterWeights::read_from(c, denoiser.config.layers, denoiser.config.heads)?;
        let betas = c.get("schedule.betas").ok_or_else(|| Error::MissingTensor("schedule.betas".into()))?.to_f64();
        let schedule = Schedule::from_betas(betas)?;
        if schedule.len() != denoiser.t_total() {
            return Err(Error::shape("ToyModel", format!("schedule T {} vs time table {}", schedule.len(), denoiser.t_total())));
        }
        let scene = c.matrix("prompt.scene")?;
        let null_prompt = if c.contains("prompt.null") { c.matrix("prompt.null")? } else { Matrix::zeros(1, scene.cols()) };
        let mut subjects = Vec::new();
        for name in c.names().filter(|n| n.starts_with("subject.")) {
            let id = &name["subject.".len()..];
            let color = c.get(&format!("palette.{id}")).map(Tensor::to_f64).unwrap_or_default();
            subjects.push(PaletteEntry { id: id.to_string(), embedding: c.matrix(name)?, color });
        }
        let background = c.get("palette.background").map(Tensor::to_f64).unwrap_or_else(|| vec![0.0; denoiser.channels]);
        Ok(ToyModel { denoiser, adapter, schedule, scene, null_prompt, subjects, background })
    }
}

impl ModelGrads {
    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut v = self.denoiser.matrices();
        v.extend(adapter_matrices(&self.adapter));
        v.push(&self.scene);
        v.extend(self.subjects.iter());
        v
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.denoiser.matrices_mut();
        v.extend(adapter_matrices_mut(&mut self.adapter));
        v.push(&mut self.scene);
        v.extend(self.subjects.iter_mut());
        v
    }

    pub fn add_assign(&mut self, other: &ModelGrads) -> Result<()> {
        for (a, b) in self.matrices_mut().into_iter().zip(other.matrices()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    /// All gradient entries in [`ToyModel::trainable`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.matrices().iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }
}
