//! Dual-level decoupled cross-attention.
//!
//! A block runs two streams off the same per-head query `Q = Z·W_q`:
//!
//! * the text stream attends to the prompt tokens `c_t`;
//! * the image stream attends to each subject's adapter keys/values.
//!
//! Their per-head outputs are summed before the layer's output projection:
//! `Z_out = (Z_text + s·Z_image)·W_o`.
//!
//! How the image stream respects the layout is selected by [`Mode`]:
//!
//! | mode         | query rows per subject | merge                          | uncovered pixels |
//! |--------------|------------------------|--------------------------------|------------------|
//! | `anyms`      | the subject's rect     | write rows the subject owns    | `Q`              |
//! | `masked-sum` | whole grid             | add rows inside its raw box    | `0`              |
//! | `global-sum` | whole grid             | add every row                  | n/a              |
//! | `text-only`  | none                   | none                           | `0`              |

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::adapter::{subject_kv, AdapterHead, AdapterWeights, SubjectCondition};
use crate::error::{Error, Result};
use crate::layout::{build_region_assignment, masks_from_layout, RegionAssignment, SubjectBox, SubjectMask};
use crate::numerics::{attention_rows, matmul, matmul_nt, matmul_tn, matmul_with, AttentionOutput, Matrix};
use crate::par::{self, Exec};

/// Image-stream variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Crop each subject's query rows, attend, merge back by priority.
    Anyms,
    /// Full-grid attention per subject, masked by its box and summed.
    MaskedSum,
    /// Full-grid attention per subject, summed without any layout.
    GlobalSum,
    /// Image stream disabled.
    TextOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Anyms, Mode::MaskedSum, Mode::GlobalSum, Mode::TextOnly];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Anyms => "anyms",
            Mode::MaskedSum => "masked-sum",
            Mode::GlobalSum => "global-sum",
            Mode::TextOnly => "text-only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown mode `{s}`")))
    }
}

/// Shape and application settings shared by every block of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_cond: usize,
    pub image_scale: f64,
    /// Layers whose image stream is active; `None` means all.
    pub apply_layers: Option<BTreeSet<usize>>,
    /// Inclusive range of sampler step indices (0 = first denoising step) with
    /// an active image stream; `None` means all.
    pub apply_steps: Option<(usize, usize)>,
    /// Start uncovered `anyms` pixels at zero instead of `Q`.
    pub zero_init_exterior: bool,
}

impl AttentionConfig {
    pub fn new(layers: usize, heads: usize, d_head: usize, d_cond: usize) -> Self {
        AttentionConfig {
            layers,
            heads,
            d_model: heads * d_head,
            d_head,
            d_cond,
            image_scale: 1.0,
            apply_layers: None,
            apply_steps: None,
            zero_init_exterior: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_head == 0 || self.d_cond == 0 {
            return Err(Error::Invalid("heads, d_head and d_cond must be >= 1".into()));
        }
        if self.d_model != self.heads * self.d_head {
            return Err(Error::Invalid(format!(
                "d_model {} != heads {} × d_head {}",
                self.d_model, self.heads, self.d_head
            )));
        }
        if !(self.image_scale.is_finite() && self.image_scale >= 0.0) {
            return Err(Error::Invalid(format!("image_scale must be >= 0, got {}", self.image_scale)));
        }
        Ok(())
    }

    pub fn applies(&self, layer: usize, step: usize) -> bool {
        self.apply_layers.as_ref().is_none_or(|s| s.contains(&layer))
            && self.apply_steps.is_none_or(|(lo, hi)| (lo..=hi).contains(&step))
    }
}

/// Text-stream projections of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `d_model × d_head`
    pub wq: Matrix,
    /// `d_cond × d_head`
    pub wk: Matrix,
    /// `d_cond × d_head`
    pub wv: Matrix,
}

/// One cross-attention layer: per-head projections plus the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub heads: Vec<HeadWeights>,
    /// `d_model × d_model`
    pub wo: Matrix,
}

impl BlockWeights {
    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        let bad = |what: String| Err(Error::shape("BlockWeights", what));
        if self.heads.len() != cfg.heads {
            return bad(format!("{} heads, config says {}", self.heads.len(), cfg.heads));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if h.wq.shape() != (cfg.d_model, cfg.d_head)
                || h.wk.shape() != (cfg.d_cond, cfg.d_head)
                || h.wv.shape() != (cfg.d_cond, cfg.d_head)
            {
                return bad(format!("head {i} projection shapes"));
            }
        }
        if self.wo.shape() != (cfg.d_model, cfg.d_model) {
            return bad(format!("W_o is {:?}", self.wo.shape()));
        }
        Ok(())
    }
}

/// Where a block sits: layer index, sampler step and its attention grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSite {
    pub layer: usize,
    pub step: usize,
    pub h: usize,
    pub w: usize,
}

/// Conditioning shared by every block of one denoiser call.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    /// `m_t × d_cond`
    pub prompt: &'a Matrix,
    pub subjects: &'a [SubjectCondition],
    pub mode: Mode,
}

/// Which key set a recorded softmax belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Text,
    Subject(usize),
}

/// Softmax weights of one head attending to one key set.
#[derive(Debug, Clone)]
pub struct SoftmaxRecord {
    pub layer: usize,
    pub step: usize,
    pub head: usize,
    pub source: Source,
    /// `(row of probs, pixel)` for every row that reached the output.
    pub targets: Vec<(usize, usize)>,
    pub probs: Matrix,
}

/// Collects softmax weights from every traced block call.
#[derive(Debug, Default)]
pub struct AttentionTrace {
    records: Mutex<Vec<SoftmaxRecord>>,
}

impl AttentionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, r: SoftmaxRecord) {
        self.records.lock().expect("trace lock").push(r);
    }

    /// Records ordered by (step, layer, head, source).
    pub fn records(&self) -> Vec<SoftmaxRecord> {
        let mut v = self.records.lock().expect("trace lock").clone();
        v.sort_by_key(|r| (r.step, r.layer, r.head, r.source));
        v
    }

    pub fn is_empty(&self) -> bool {
        self.records.lock().expect("trace lock").is_empty()
    }

    /// Per (layer, step, subject): attention mass each pixel received from the
    /// subject's keys, averaged over heads. Pixels the subject did not write are 0.
    pub fn mass_maps(&self, pixels: usize) -> Vec<MassMap> {
        let records = self.records();
        let mut out: Vec<MassMap> = Vec::new();
        for r in records.iter() {
            let Source::Subject(j) = r.source else { continue };
            let heads = records
                .iter()
                .filter(|o| o.layer == r.layer && o.step == r.step && o.source == r.source)
                .count() as f64;
            let idx = match out.iter().position(|m| (m.layer, m.step, m.subject) == (r.layer, r.step, j)) {
                Some(i) => i,
                None => {
                    out.push(MassMap { layer: r.layer, step: r.step, subject: j, mass: vec![0.0; pixels] });
                    out.len() - 1
                }
            };
            for &(row, p) in &r.targets {
                out[idx].mass[p] += r.probs.row(row).iter().sum::<f64>() / heads;
            }
        }
        out.sort_by_key(|m| (m.step, m.layer, m.subject));
        out
    }
}

/// Head-averaged attention mass of one subject at one layer and step.
#[derive(Debug, Clone, PartialEq)]
pub struct MassMap {
    pub layer: usize,
    pub step: usize,
    pub subject: usize,
    pub mass: Vec<f64>,
}

/// Query rows and merge targets of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPlan {
    /// Pixels used as queries, `None` for the whole grid.
    pub rows: Option<Vec<usize>>,
    /// `(row of the attention output, pixel it is added to)`.
    pub targets: Vec<(usize, usize)>,
}

/// Full description of an image-stream merge on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlan {
    pub pixels: usize,
    pub subjects: Vec<SubjectPlan>,
    /// Pixels initialized to `Q`.
    pub query_init: Vec<usize>,
}

impl ImagePlan {
    /// Crop to each rect, write back only the rows the subject owns.
    pub fn crop_and_merge(assignment: &RegionAssignment, zero_init_exterior: bool) -> Self {
        let w = assignment.w;
        let winners = assignment.winners();
        let subjects = assignment
            .rects
            .iter()
            .enumerate()
            .map(|(j, rect)| {
                let rows = rect.pixel_indices(w);
                let targets = rows.iter().enumerate().filter(|(_, &p)| winners[p] == Some(j)).map(|(i, &p)| (i, p)).collect();
                SubjectPlan { rows: Some(rows), targets }
            })
            .collect();
        let query_init =
            if zero_init_exterior { Vec::new() } else { (0..winners.len()).filter(|&p| winners[p].is_none()).collect() };
        ImagePlan { pixels: winners.len(), subjects, query_init }
    }

    /// Full-grid attention per subject, kept only inside its raw mask.
    pub fn masked(masks: &[SubjectMask], pixels: usize) -> Self {
        let subjects = masks
            .iter()
            .map(|m| SubjectPlan {
                rows: None,
                targets: m.bits().iter().enumerate().filter(|(_, &b)| b).map(|(p, _)| (p, p)).collect(),
            })
            .collect();
        ImagePlan { pixels, subjects, query_init: Vec::new() }
    }

    /// Full-grid attention per subject, summed everywhere.
    pub fn global(n: usize, pixels: usize) -> Self {
        let all: Vec<(usize, usize)> = (0..pixels).map(|p| (p, p)).collect();
        ImagePlan {
            pixels,
            subjects: (0..n).map(|_| SubjectPlan { rows: None, targets: all.clone() }).collect(),
            query_init: Vec::new(),
        }
    }

    /// Plan for `mode` on the grid of `site`; `None` when the mode has no image stream.
    pub fn for_mode(mode: Mode, boxes: &[SubjectBox], h: usize, w: usize, zero_init_exterior: bool) -> Option<Self> {
        match mode {
            Mode::Anyms => Some(Self::crop_and_merge(&build_region_assignment(boxes, h, w), zero_init_exterior)),
            Mode::MaskedSum => Some(Self::masked(&masks_from_layout(boxes, h, w), h * w)),
            Mode::GlobalSum => Some(Self::global(boxes.len(), h * w)),
            Mode::TextOnly => None,
        }
    }
}

/// Intermediates of one head, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub q: Matrix,
    pub text_k: Matrix,
    pub text_v: Matrix,
    pub text: AttentionOutput,
    /// Per subject: `(K_j, V_j, attention over its query rows)`.
    pub subjects: Vec<(Matrix, Matrix, AttentionOutput)>,
}

/// Intermediates of one block call.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub heads: Vec<HeadCache>,
    pub plan: Option<ImagePlan>,
    pub image_scale: f64,
    /// `Z_text + s·Z_image`, before `W_o`.
    pub merged: Matrix,
}

fn check_input(z: &Matrix, site: &BlockSite, block: &BlockWeights) -> Result<()> {
    let d_model = block.wo.rows();
    if z.rows() != site.h * site.w || z.cols() != d_model {
        return Err(Error::shape(
            "cross-attention",
            format!("Z is {:?}, expected ({}, {d_model})", z.shape(), site.h * site.w),
        ));
    }
    Ok(())
}

fn text_head(z: &Matrix, prompt: &Matrix, site: &BlockSite, head: usize, block: &BlockWeights, exec: Exec<'_>) -> Result<HeadCache> {
    let hw = &block.heads[head];
    let q = matmul_with(exec.policy, z, &hw.wq)?;
    let text_k = matmul_with(exec.policy, prompt, &hw.wk)?;
    let text_v = matmul_with(exec.policy, prompt, &hw.wv)?;
    let text = attention_rows(&q, None, &text_k, &text_v, exec.counter)?;
    if let Some(trace) = exec.trace {
        trace.push(SoftmaxRecord {
            layer: site.layer,
            step: site.step,
            head,
            source: Source::Text,
            targets: (0..q.rows()).map(|p| (p, p)).collect(),
            probs: text.probs.clone(),
        });
    }
    Ok(HeadCache { q, text_k, text_v, text, subjects: Vec::new() })
}

/// Computes one head's image stream from its query, appending subject
/// intermediates to `cache`. Returns `Z_image` for the head.
fn image_head(
    cache: &mut HeadCache,
    subjects: &[SubjectCondition],
    plan: &ImagePlan,
    site: &BlockSite,
    head: usize,
    adapter: &AdapterWeights,
    exec: Exec<'_>,
) -> Result<Matrix> {
    let q = &cache.q;
    let per_subject = par::map_indexed(exec.policy, subjects.len(), |j| -> Result<_> {
        let (k, v) = subject_kv(&subjects[j].embedding, site.layer, head, adapter)?;
        let sp = &plan.subjects[j];
        let out = attention_rows(q, sp.rows.as_deref(), &k, &v, exec.counter)?;
        if let Some(trace) = exec.trace {
            trace.push(SoftmaxRecord {
                layer: site.layer,
                step: site.step,
                head,
                source: Source::Subject(j),
                targets: sp.targets.clone(),
                probs: out.probs.clone(),
            });
        }
        Ok((k, v, out))
    });
    let per_subject = per_subject.into_iter().collect::<Result<Vec<_>>>()?;

    let mut z_img = Matrix::zeros(plan.pixels, q.cols());
    for &p in &plan.query_init {
        z_img.row_mut(p).copy_from_slice(q.row(p));
    }
    // Fixed subject order keeps overlapping sums reproducible.
    for (sp, (_, _, out)) in plan.subjects.iter().zip(&per_subject) {
        for &(row, p) in &sp.targets {
            z_img.row_mut(p).iter_mut().zip(out.output.row(row)).for_each(|(a, b)| *a += b);
        }
    }
    cache.subjects = per_subject;
    Ok(z_img)
}

/// Per-head text attention, heads concatenated (before `W_o`).
pub fn text_cross_attention(z: &Matrix, prompt: &Matrix, site: BlockSite, block: &BlockWeights, exec: Exec<'_>) -> Result<Matrix> {
    check_input(z, &site, block)?;
    let heads = par::map_indexed(exec.policy, block.heads.len(), |h| text_head(z, prompt, &site, h, block, exec));
    let parts = heads.into_iter().map(|r| r.map(|c| c.text.output)).collect::<Result<Vec<_>>>()?;
    Matrix::hcat(&parts)
}

fn image_stream_with_plan(
    z: &Matrix,
    subjects: &[SubjectCondition],
    plan: &ImagePlan,
    site: BlockSite,
    block: &BlockWeights,
    adapter: &AdapterWeights,
    exec: Exec<'_>,
) -> Result<Matrix> {
    check_input(z, &site, block)?;
    if subjects.is_empty() {
        return Err(Error::Invalid("image stream needs at least one subject; route n = 0 to text-only".into()));
    }
    let heads = par::map_indexed(exec.policy, block.heads.len(), |h| -> Result<Matrix> {
        let hw = &block.heads[h];
        let q = matmul_with(exec.policy, z, &hw.wq)?;
        let mut cache = HeadCache {
            q,
            text_k: Matrix::zeros(0, 0),
            text_v: Matrix::zeros(0, 0),
            text: AttentionOutput { output: Matrix::zeros(0, 0), probs: Matrix::zeros(0, 0) },
            subjects: Vec::new(),
        };
        image_head(&mut cache, subjects, plan, &site, h, adapter, exec)
    });
    Matrix::hcat(&heads.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Crop-and-merge image stream: each subject attends only from the query rows
/// inside its rect; results land on the pixels it owns in `assignment`, and
/// pixels owned by nobody keep `Q`.
#[allow(clippy::too_many_arguments)]
pub fn local_image_cross_attention(
    z: &Matrix,
    subjects: &[SubjectCondition],
    assignment: &RegionAssignment,
    site: BlockSite,
    block: &BlockWeights,
    adapter: &AdapterWeights,
    config: &AttentionConfig,
    exec: Exec<'_>,
) -> Result<Matrix> {
    if assignment.rects.len() != subjects.len() || (assignment.h, assignment.w) != (site.h, site.w) {
        return Err(Error::shape("local_image_cross_attention", "assignment does not match subjects or grid"));
    }
    let plan = ImagePlan::crop_and_merge(assignment, config.zero_init_exterior);
    image_stream_with_plan(z, subjects, &plan, site, block, adapter, exec)
}

/// Ablation: full-grid attention per subject, multiplied by its raw box mask and summed.
pub fn masked_sum_image_cross_attention(
    z: &Matrix,
    subjects: &[SubjectCondition],
    masks: &[SubjectMask],
    site: BlockSite,
    block: &BlockWeights,
    adapter: &AdapterWeights,
    exec: Exec<'_>,
) -> Result<Matrix> {
    if masks.len() != subjects.len() {
        return Err(Error::shape("masked_sum_image_cross_attention", "one mask per subject"));
    }
    let plan = ImagePlan::masked(masks, site.h * site.w);
    image_stream_with_plan(z, subjects, &plan, site, block, adapter, exec)
}

/// Ablation: full-grid attention per subject, summed with no layout at all.
pub fn global_sum_image_cross_attention(
    z: &Matrix,
    subjects: &[SubjectCondition],
    site: BlockSite,
    block: &BlockWeights,
    adapter: &AdapterWeights,
    exec: Exec<'_>,
) -> Result<Matrix> {
    let plan = ImagePlan::global(subjects.len(), site.h * site.w);
    image_stream_with_plan(z, subjects, &plan, site, block, adapter, exec)
}

/// Whether the image term contributes for this call.
pub fn image_term_active(cond: &Conditioning<'_>, site: &BlockSite, config: &AttentionConfig) -> bool {
    cond.mode != Mode::TextOnly && !cond.subjects.is_empty() && config.applies(site.layer, site.step) && config.image_scale != 0.0
}

/// `(Z_text + s·Z_image)·W_o`. The image term is dropped for text-only mode, no
/// subjects, a zero scale, or a layer/step outside the configured application range.
pub fn decoupled_block(
    z: &Matrix,
    cond: &Conditioning<'_>,
    site: BlockSite,
    block: &BlockWeights,
    adapter: &AdapterWeights,
    config: &AttentionConfig,
    exec: Exec<'_>,
) -> Result<Matrix> {
    decoupled_block_cached(z, cond, site, block, adapter, config, exec).map(|(out, _)| out)
}

/// [`decoupled_block`] that also returns its intermediates.
pub fn decoupled_block_cached(
    z: &Matrix,
    cond: &Conditioning<'_>,
    site: BlockSite,
    block: &BlockWeights,
    adapter: &AdapterWeights,
    config: &AttentionConfig,
    exec: Exec<'_>,
) -> Result<(Matrix, BlockCache)> {
    check_input(z, &site, block)?;
    let plan = if image_term_active(cond, &site, config) {
        let boxes: Vec<SubjectBox> = cond.subjects.iter().map(SubjectCondition::subject_box).collect();
        ImagePlan::for_mode(cond.mode, &boxes, site.h, site.w, config.zero_init_exterior)
    } else {
        None
    };
    let heads = par::map_indexed(exec.policy, block.heads.len(), |h| -> Result<(HeadCache, Option<Matrix>)> {
        let mut cache = text_head(z, cond.prompt, &site, h, block, exec)?;
        let img = match &plan {
            Some(p) => Some(image_head(&mut cache, cond.subjects, p, &site, h, adapter, exec)?),
            None => None,
        };
        Ok((cache, img))
    });
    let heads = heads.into_iter().collect::<Result<Vec<_>>>()?;
    let mut merged = Matrix::zeros(z.rows(), config.d_model);
    let mut caches = Vec::with_capacity(heads.len());
    for (h, (cache, img)) in heads.into_iter().enumerate() {
        let mut part = cache.text.output.clone();
        if let Some(img) = img {
            part.add_scaled_assign(&img, config.image_scale)?;
        }
        merged.set_column_block(h * config.d_head, &part);
        caches.push(cache);
    }
    let out = matmul_with(exec.policy, &merged, &block.wo)?;
    Ok((out, BlockCache { heads: caches, plan, image_scale: config.image_scale, merged }))
}

/// Gradients of one block call.
#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub d_z: Matrix,
    pub block: BlockWeights,
    /// Adapter gradients for this layer, one per head.
    pub adapter: Vec<AdapterHead>,
    pub d_prompt: Matrix,
    /// One per subject, same shape as its embedding.
    pub d_subjects: Vec<Matrix>,
}

/// Gradients of `O = softmax(Q_R·Kᵀ/√d)·V` for the query rows `R` of `q`.
/// Returns `(dQ_R, dK, dV)` where `dQ_R` is row-aligned with `probs`.
fn attention_backward(q: &Matrix, rows: Option<&[usize]>, k: &Matrix, v: &Matrix, probs: &Matrix, d_out: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    let q_r = match rows {
        Some(r) => q.select_rows(r),
        None => q.clone(),
    };
    let inv_sqrt_d = 1.0 / (q.cols() as f64).sqrt();
    let d_v = matmul_tn(probs, d_out)?;
    let d_p = matmul_nt(d_out, v)?;
    let mut d_s = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = d_p.row(r);
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for (o, (&pi, &dpi)) in d_s.row_mut(r).iter_mut().zip(p.iter().zip(dp)) {
            *o = pi * (dpi - dot) * inv_sqrt_d;
        }
    }
    let d_q = matmul(&d_s, k)?;
    let d_k = matmul_tn(&d_s, &q_r)?;
    Ok((d_q, d_k, d_v))
}

/// Backpropagates `d_out` (gradient of the block output) through a cached call.
#[allow(clippy::too_many_arguments)]
pub fn decoupled_block_backward(
    z: &Matrix,
    cond: &Conditioning<'_>,
    block: &BlockWeights,
    adapter: &AdapterWeights,
    layer: usize,
    cache: &BlockCache,
    d_out: &Matrix,
    policy: par::Policy,
) -> Result<BlockGrads> {
    let d_head = block.heads.first().map_or(0, |h| h.wq.cols());
    let d_wo = matmul_tn(&cache.merged, d_out)?;
    let d_merged = matmul_nt(d_out, &block.wo)?;

    struct HeadGrads {
        d_z: Matrix,
        w: HeadWeights,
        a: Option<AdapterHead>,
        d_prompt: Matrix,
        d_subjects: Vec<Matrix>,
    }

    let heads = par::map_indexed(policy, block.heads.len(), |h| -> Result<HeadGrads> {
        let hw = &block.heads[h];
        let hc = &cache.heads[h];
        let d_m = d_merged.column_block(h * d_head, d_head);

        let (mut d_q, d_tk, d_tv) = attention_backward(&hc.q, None, &hc.text_k, &hc.text_v, &hc.text.probs, &d_m)?;
        let w_grads = |wk: &Matrix, wv: &Matrix, c: &Matrix, dk: &Matrix, dv: &Matrix| -> Result<(Matrix, Matrix, Matrix)> {
            let mut d_c = matmul_nt(dk, wk)?;
            d_c.add_assign(&matmul_nt(dv, wv)?)?;
            Ok((matmul_tn(c, dk)?, matmul_tn(c, dv)?, d_c))
        };
        let (d_wk, d_wv, d_prompt) = w_grads(&hw.wk, &hw.wv, cond.prompt, &d_tk, &d_tv)?;

        let mut adapter_grad = None;
        let mut d_subjects = Vec::new();
        if let Some(plan) = &cache.plan {
            let ah = adapter.head(layer, h)?;
            let d_img = d_m.scale(cache.image_scale);
            for &p in &plan.query_init {
                d_q.row_mut(p).iter_mut().zip(d_img.row(p)).for_each(|(a, b)| *a += b);
            }
            let mut d_ak = Matrix::zeros(ah.wk.rows(), ah.wk.cols());
            let mut d_av = Matrix::zeros(ah.wv.rows(), ah.wv.cols());
            for (j, (sp, (k, v, out))) in plan.subjects.iter().zip(&hc.subjects).enumerate() {
                let mut d_o = Matrix::zeros(out.output.rows(), out.output.cols());
                for &(row, p) in &sp.targets {
                    d_o.row_mut(row).iter_mut().zip(d_img.row(p)).for_each(|(a, b)| *a += b);
                }
                let (d_qr, d_k, d_v) = attention_backward(&hc.q, sp.rows.as_deref(), k, v, &out.probs, &d_o)?;
                for i in 0..d_qr.rows() {
                    let p = sp.rows.as_ref().map_or(i, |r| r[i]);
                    d_q.row_mut(p).iter_mut().zip(d_qr.row(i)).for_each(|(a, b)| *a += b);
                }
                let (gk, gv, d_c) = w_grads(&ah.wk, &ah.wv, &cond.subjects[j].embedding, &d_k, &d_v)?;
                d_ak.add_assign(&gk)?;
                d_av.add_assign(&gv)?;
                d_subjects.push(d_c);
            }
            adapter_grad = Some(AdapterHead { wk: d_ak, wv: d_av });
        }
        let d_wq = matmul_tn(z, &d_q)?;
        let d_z = matmul_nt(&d_q, &hw.wq)?;
        Ok(HeadGrads { d_z, w: HeadWeights { wq: d_wq, wk: d_wk, wv: d_wv }, a: adapter_grad, d_prompt, d_subjects })
    });

    let mut d_z = Matrix::zeros(z.rows(), z.cols());
    let mut d_prompt = Matrix::zeros(cond.prompt.rows(), cond.prompt.cols());
    let mut d_subjects: Vec<Matrix> = cond.subjects.iter().map(|s| Matrix::zeros(s.embedding.rows(), s.embedding.cols())).collect();
    let mut head_w = Vec::with_capacity(block.heads.len());
    let mut adapter_heads = Vec::with_capacity(block.heads.len());
    for (h, g) in heads.into_iter().enumerate() {
        let g = g?;
        d_z.add_assign(&g.d_z)?;
        d_prompt.add_assign(&g.d_prompt)?;
        for (acc, d) in d_subjects.iter_mut().zip(&g.d_subjects) {
            acc.add_assign(d)?;
        }
        head_w.push(g.w);
        adapter_heads.push(match g.a {
            Some(a) => a,
            None => {
                let ah = adapter.head(layer, h)?;
                AdapterHead { wk: Matrix::zeros(ah.wk.rows(), ah.wk.cols()), wv: Matrix::zeros(ah.wv.rows(), ah.wv.cols()) }
            }
        });
    }
    Ok(BlockGrads { d_z, block: BlockWeights { heads: head_w, wo: d_wo }, adapter: adapter_heads, d_prompt, d_subjects })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{GridRect, NormBox};
    use crate::numerics::{finite_diff_grad, scaled_dot_attention, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) struct Fixture {
        pub cfg: AttentionConfig,
        pub block: BlockWeights,
        pub adapter: AdapterWeights,
        pub z: Matrix,
        pub prompt: Matrix,
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn fixture(seed: u64, h: usize, w: usize, heads: usize, d_head: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_cond = 5;
        let cfg = AttentionConfig::new(1, heads, d_head, d_cond);
        let d_model = cfg.d_model;
        let block = BlockWeights {
            heads: (0..heads)
                .map(|_| HeadWeights {
                    wq: random(&mut rng, d_model, d_head),
                    wk: random(&mut rng, d_cond, d_head),
                    wv: random(&mut rng, d_cond, d_head),
                })
                .collect(),
            wo: random(&mut rng, d_model, d_model),
        };
        let adapter = AdapterWeights {
            layers: vec![(0..heads).map(|_| AdapterHead { wk: random(&mut rng, d_cond, d_head), wv: random(&mut rng, d_cond, d_head) }).collect()],
        };
        Fixture { z: random(&mut rng, h * w, d_model), prompt: random(&mut rng, 3, d_cond), cfg, block, adapter }
    }

    fn subject(seed: u64, bbox: NormBox, priority: i64, tokens: usize) -> SubjectCondition {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SubjectCondition::new(format!("s{seed}"), random(&mut rng, tokens, 5), bbox, priority)
    }

    fn site(h: usize, w: usize) -> BlockSite {
        BlockSite { layer: 0, step: 0, h, w }
    }

    fn nb(x0: f64, y0: f64, x1: f64, y1: f64) -> NormBox {
        NormBox { x0, y0, x1, y1 }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("bogus".parse::<Mode>().is_err());
    }

    #[test]
    fn single_prompt_token_gives_its_value_row() {
        let mut f = fixture(1, 3, 3, 2, 4);
        f.prompt = Matrix::row_vector(&[0.3, -0.2, 0.9, 0.1, -0.7]);
        let out = text_cross_attention(&f.z, &f.prompt, site(3, 3), &f.block, Exec::sequential()).unwrap();
        for h in 0..2 {
            let v = matmul(&f.prompt, &f.block.heads[h].wv).unwrap();
            for p in 0..9 {
                assert_eq!(&out.row(p)[h * 4..(h + 1) * 4], v.row(0));
            }
        }
    }

    #[test]
    fn zero_value_projection_gives_zero_text_output() {
        let mut f = fixture(2, 2, 2, 2, 3);
        for h in &mut f.block.heads {
            h.wv = Matrix::zeros(5, 3);
        }
        let out = text_cross_attention(&f.z, &f.prompt, site(2, 2), &f.block, Exec::sequential()).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn text_stream_matches_per_head_oracle() {
        let f = fixture(3, 2, 3, 2, 3);
        let out = text_cross_attention(&f.z, &f.prompt, site(2, 3), &f.block, Exec::sequential()).unwrap();
        for (h, hw) in f.block.heads.iter().enumerate() {
            let q = matmul(&f.z, &hw.wq).unwrap();
            let k = matmul(&f.prompt, &hw.wk).unwrap();
            let v = matmul(&f.prompt, &hw.wv).unwrap();
            let expect = scaled_dot_attention(&q, &k, &v).unwrap();
            assert!(out.column_block(h * 3, 3).max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn full_canvas_box_equals_plain_image_attention() {
        let f = fixture(4, 4, 4, 2, 3);
        let s = [subject(10, NormBox::FULL, 0, 2)];
        let a = build_region_assignment(&[s[0].subject_box()], 4, 4);
        let local = local_image_cross_attention(&f.z, &s, &a, site(4, 4), &f.block, &f.adapter, &f.cfg, Exec::sequential()).unwrap();
        let global = global_sum_image_cross_attention(&f.z, &s, site(4, 4), &f.block, &f.adapter, Exec::sequential()).unwrap();
        assert_eq!(local, global);
        let masks = masks_from_layout(&[s[0].subject_box()], 4, 4);
        let masked = masked_sum_image_cross_attention(&f.z, &s, &masks, site(4, 4), &f.block, &f.adapter, Exec::sequential()).unwrap();
        assert_eq!(masked, global);
    }

    #[test]
    fn fully_occluded_subject_contributes_nothing() {
        let f = fixture(5, 4, 4, 2, 3);
        let top = subject(11, nb(0.0, 0.0, 1.0, 1.0), 5, 1);
        let hidden = subject(12, nb(0.25, 0.25, 0.75, 0.75), 1, 2);
        let run = |subs: &[SubjectCondition]| {
            let boxes: Vec<_> = subs.iter().map(SubjectCondition::subject_box).collect();
            let a = build_region_assignment(&boxes, 4, 4);
            local_image_cross_attention(&f.z, subs, &a, site(4, 4), &f.block, &f.adapter, &f.cfg, Exec::sequential()).unwrap()
        };
        assert_eq!(run(&[top.clone(), hidden]), run(&[top]));
    }

    #[test]
    fn cropped_rows_match_oracle_and_exterior_keeps_query() {
        let f = fixture(6, 4, 4, 2, 3);
        let s = [subject(13, nb(0.0, 0.0, 0.5, 0.5), 0, 3)];
        let a = build_region_assignment(&[s[0].subject_box()], 4, 4);
        assert_eq!(a.rects[0], GridRect::new(0, 2, 0, 2));
        let out = local_image_cross_attention(&f.z, &s, &a, site(4, 4), &f.block, &f.adapter, &f.cfg, Exec::sequential()).unwrap();
        let inside = [0usize, 1, 4, 5];
        for (h, hw) in f.block.heads.iter().enumerate() {
            let q = matmul(&f.z, &hw.wq).unwrap();
            let ah = &f.adapter.layers[0][h];
            let k = matmul(&s[0].embedding, &ah.wk).unwrap();
            let v = matmul(&s[0].embedding, &ah.wv).unwrap();
            let cropped = scaled_dot_attention(&q.select_rows(&inside), &k, &v).unwrap();
            let got = out.column_block(h * 3, 3);
            assert!(got.select_rows(&inside).max_abs_diff(&cropped) < 1e-12);
            for p in (0..16).filter(|p| !inside.contains(p)) {
                assert_eq!(got.row(p), q.row(p));
            }
        }
    }

    #[test]
    fn zero_init_exterior_switch() {
        let mut f = fixture(7, 4, 4, 1, 4);
        f.cfg.zero_init_exterior = true;
        let s = [subject(14, nb(0.0, 0.0, 0.5, 0.5), 0, 1)];
        let a = build_region_assignment(&[s[0].subject_box()], 4, 4);
        let out = local_image_cross_attention(&f.z, &s, &a, site(4, 4), &f.block, &f.adapter, &f.cfg, Exec::sequential()).unwrap();
        assert!(out.row(15).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_sum_adds_overlapping_subjects() {
        let f = fixture(8, 4, 4, 2, 3);
        let s = [subject(15, nb(0.0, 0.0, 0.75, 0.75), 9, 2), subject(16, nb(0.25, 0.25, 1.0, 1.0), 0, 1)];
        let boxes: Vec<_> = s.iter().map(SubjectCondition::subject_box).collect();
        let masks = masks_from_layout(&boxes, 4, 4);
        let both = masked_sum_image_cross_attention(&f.z, &s, &masks, site(4, 4), &f.block, &f.adapter, Exec::sequential()).unwrap();
        let a = global_sum_image_cross_attention(&f.z, &s[..1], site(4, 4), &f.block, &f.adapter, Exec::sequential()).unwrap();
        let b = global_sum_image_cross_attention(&f.z, &s[1..], site(4, 4), &f.block, &f.adapter, Exec::sequential()).unwrap();
        let p = 5; // (1, 1) lies in both boxes
        for c in 0..6 {
            assert!((both.get(p, c) - (a.get(p, c) + b.get(p, c))).abs() < 1e-12);
        }
        assert!(both.row(3).iter().all(|&v| v == 0.0), "(0, 3) is outside both boxes");
    }

    #[test]
    fn global_sum_of_identical_subjects_doubles() {
        let f = fixture(9, 3, 3, 2, 3);
        let one = subject(17, nb(0.0, 0.0, 0.3, 0.3), 0, 2);
        let single = global_sum_image_cross_attention(&f.z, std::slice::from_ref(&one), site(3, 3), &f.block, &f.adapter, Exec::sequential()).unwrap();
        let double = global_sum_image_cross_attention(&f.z, &[one.clone(), one], site(3, 3), &f.block, &f.adapter, Exec::sequential()).unwrap();
        assert!(double.max_abs_diff(&single.scale(2.0)) < 1e-12);
    }

    #[test]
    fn global_sum_matches_loop_oracle() {
        let f = fixture(10, 3, 3, 2, 3);
        let subs: Vec<_> = (0..3).map(|i| subject(20 + i, NormBox::FULL, 0, 1 + i as usize)).collect();
        let out = global_sum_image_cross_attention(&f.z, &subs, site(3, 3), &f.block, &f.adapter, Exec::sequential()).unwrap();
        for (h, hw) in f.block.heads.iter().enumerate() {
            let q = matmul(&f.z, &hw.wq).unwrap();
            let mut expect = Matrix::zeros(9, 3);
            for s in &subs {
                let ah = &f.adapter.layers[0][h];
                let k = matmul(&s.embedding, &ah.wk).unwrap();
                let v = matmul(&s.embedding, &ah.wv).unwrap();
                expect.add_assign(&scaled_dot_attention(&q, &k, &v).unwrap()).unwrap();
            }
            assert!(out.column_block(h * 3, 3).max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn empty_subjects_rejected_by_image_streams() {
        let f = fixture(11, 2, 2, 1, 2);
        let a = build_region_assignment(&[], 2, 2);
        assert!(local_image_cross_attention(&f.z, &[], &a, site(2, 2), &f.block, &f.adapter, &f.cfg, Exec::sequential()).is_err());
        assert!(global_sum_image_cross_attention(&f.z, &[], site(2, 2), &f.block, &f.adapter, Exec::sequential()).is_err());
    }

    fn block(f: &Fixture, subs: &[SubjectCondition], mode: Mode, step: usize, cfg: &AttentionConfig) -> Matrix {
        let cond = Conditioning { prompt: &f.prompt, subjects: subs, mode };
        decoupled_block(&f.z, &cond, BlockSite { layer: 0, step, h: 4, w: 4 }, &f.block, &f.adapter, cfg, Exec::sequential()).unwrap()
    }

    #[test]
    fn text_only_block_is_text_stream_then_output_projection() {
        let f = fixture(12, 4, 4, 2, 3);
        let subs = [subject(30, nb(0.0, 0.0, 0.5, 1.0), 0, 1)];
        let text = text_cross_attention(&f.z, &f.prompt, site(4, 4), &f.block, Exec::sequential()).unwrap();
        let expect = matmul(&text, &f.block.wo).unwrap();
        assert_eq!(block(&f, &subs, Mode::TextOnly, 0, &f.cfg), expect);
        assert_eq!(block(&f, &[], Mode::Anyms, 0, &f.cfg), expect);
    }

    #[test]
    fn zero_scale_and_out_of_range_steps_disable_image_term() {
        let f = fixture(13, 4, 4, 2, 3);
        let subs = [subject(31, nb(0.0, 0.0, 0.5, 1.0), 0, 2)];
        let text_only = block(&f, &subs, Mode::TextOnly, 0, &f.cfg);
        let mut zero = f.cfg.clone();
        zero.image_scale = 0.0;
        let mut late = f.cfg.clone();
        late.apply_steps = Some((5, 9));
        let mut other_layer = f.cfg.clone();
        other_layer.apply_layers = Some([1].into_iter().collect());
        for mode in Mode::ALL {
            assert_eq!(block(&f, &subs, mode, 0, &zero), text_only);
            assert_eq!(block(&f, &subs, mode, 0, &late), text_only);
            assert_eq!(block(&f, &subs, mode, 0, &other_layer), text_only);
        }
        assert_ne!(block(&f, &subs, Mode::Anyms, 6, &late), text_only);
    }

    #[test]
    fn image_term_is_additive_through_output_projection() {
        let f = fixture(14, 4, 4, 2, 3);
        let subs = [subject(32, nb(0.0, 0.0, 0.5, 0.75), 1, 2), subject(33, nb(0.25, 0.5, 1.0, 1.0), 0, 1)];
        let mut cfg = f.cfg.clone();
        cfg.image_scale = 0.7;
        let text_only = block(&f, &subs, Mode::TextOnly, 0, &cfg);
        let boxes: Vec<_> = subs.iter().map(SubjectCondition::subject_box).collect();
        let img = local_image_cross_attention(
            &f.z, &subs, &build_region_assignment(&boxes, 4, 4), site(4, 4), &f.block, &f.adapter, &cfg, Exec::sequential(),
        )
        .unwrap();
        let mut expect = text_only;
        expect.add_assign(&matmul(&img.scale(0.7), &f.block.wo).unwrap()).unwrap();
        assert!(block(&f, &subs, Mode::Anyms, 0, &cfg).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn parallel_and_sequential_blocks_are_bit_identical() {
        let f = fixture(15, 6, 6, 2, 4);
        let subs: Vec<_> = (0..3).map(|i| subject(40 + i, nb(0.1 * i as f64, 0.0, 0.5 + 0.1 * i as f64, 0.8), i as i64, 2)).collect();
        for mode in Mode::ALL {
            let cond = Conditioning { prompt: &f.prompt, subjects: &subs, mode };
            let s = BlockSite { layer: 0, step: 0, h: 6, w: 6 };
            let a = decoupled_block(&f.z, &cond, s, &f.block, &f.adapter, &f.cfg, Exec::sequential()).unwrap();
            let b = decoupled_block(&f.z, &cond, s, &f.block, &f.adapter, &f.cfg, Exec::with_policy(par::Policy::Parallel)).unwrap();
            assert_eq!(a, b, "{mode}");
        }
    }

    #[test]
    fn trace_mass_maps_follow_ownership() {
        let f = fixture(16, 4, 4, 2, 3);
        let subs = [subject(50, nb(0.0, 0.0, 0.5, 0.5), 0, 2), subject(51, nb(0.5, 0.5, 1.0, 1.0), 0, 1)];
        let trace = AttentionTrace::new();
        let cond = Conditioning { prompt: &f.prompt, subjects: &subs, mode: Mode::Anyms };
        decoupled_block(&f.z, &cond, site(4, 4), &f.block, &f.adapter, &f.cfg, Exec::sequential().traced(&trace)).unwrap();
        let maps = trace.mass_maps(16);
        assert_eq!(maps.len(), 2);
        for (j, m) in maps.iter().enumerate() {
            let rect = subs[j].rect(4, 4);
            for p in 0..16 {
                let inside = rect.contains(p / 4, p % 4);
                assert!((m.mass[p] - if inside { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert_eq!(trace.records().len(), 2 * 3);
    }
    #[test]
    fn block_backward_matches_finite_differences() {
        let mut f = fixture(17, 4, 4, 2, 3);
        f.cfg.image_scale = 0.7;
        let subs = vec![subject(60, nb(0.0, 0.0, 0.75, 0.5), 1, 2), subject(61, nb(0.25, 0.25, 1.0, 1.0), 0, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let r = random(&mut rng, 16, 6);
        let s = site(4, 4);
        for mode in Mode::ALL {
            let loss = |z: &Matrix, prompt: &Matrix, subs: &[SubjectCondition], block: &BlockWeights, adapter: &AdapterWeights| {
                let cond = Conditioning { prompt, subjects: subs, mode };
                let out = decoupled_block(z, &cond, s, block, adapter, &f.cfg, Exec::sequential()).unwrap();
                out.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum::<f64>()
            };
            let cond = Conditioning { prompt: &f.prompt, subjects: &subs, mode };
            let (_, cache) = decoupled_block_cached(&f.z, &cond, s, &f.block, &f.adapter, &f.cfg, Exec::sequential()).unwrap();
            let g = decoupled_block_backward(&f.z, &cond, &f.block, &f.adapter, 0, &cache, &r, par::Policy::Sequential).unwrap();

            let check = |analytic: &Matrix, numeric: Vec<f64>, what: &str| {
                for (a, n) in analytic.as_slice().iter().zip(&numeric) {
                    assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{mode} {what}: {a} vs {n}");
                }
            };
            let with = |m: &Matrix, x: &[f64]| Matrix::from_vec(m.rows(), m.cols(), x.to_vec()).unwrap();
            check(&g.d_z, finite_diff_grad(|x| loss(&with(&f.z, x), &f.prompt, &subs, &f.block, &f.adapter), f.z.as_slice(), FD_STEP).unwrap(), "z");
            check(&g.d_prompt, finite_diff_grad(|x| loss(&f.z, &with(&f.prompt, x), &subs, &f.block, &f.adapter), f.prompt.as_slice(), FD_STEP).unwrap(), "prompt");
            for j in 0..subs.len() {
                let num = finite_diff_grad(
                    |x| {
                        let mut s2 = subs.clone();
                        s2[j].embedding = with(&subs[j].embedding, x);
                        loss(&f.z, &f.prompt, &s2, &f.block, &f.adapter)
                    },
                    subs[j].embedding.as_slice(),
                    FD_STEP,
                )
                .unwrap();
                check(&g.d_subjects[j], num, "subject");
            }
            check(&g.block.wo, finite_diff_grad(|x| {
                let mut b = f.block.clone();
                b.wo = with(&b.wo, x);
                loss(&f.z, &f.prompt, &subs, &b, &f.adapter)
            }, f.block.wo.as_slice(), FD_STEP).unwrap(), "wo");
            for h in 0..2 {
                for which in 0..3 {
                    let pick = |hw: &HeadWeights| [&hw.wq, &hw.wk, &hw.wv][which].clone();
                    let base = pick(&f.block.heads[h]);
                    let num = finite_diff_grad(|x| {
                        let mut b = f.block.clone();
                        let hw = &mut b.heads[h];
                        *[&mut hw.wq, &mut hw.wk, &mut hw.wv].into_iter().nth(which).unwrap() = with(&base, x);
                        loss(&f.z, &f.prompt, &subs, &b, &f.adapter)
                    }, base.as_slice(), FD_STEP).unwrap();
                    check(&pick(&g.block.heads[h]), num, "head weights");
                }
                for which in 0..2 {
                    let base = if which == 0 { f.adapter.layers[0][h].wk.clone() } else { f.adapter.layers[0][h].wv.clone() };
                    let num = finite_diff_grad(|x| {
                        let mut a = f.adapter.clone();
                        let ah = &mut a.layers[0][h];
                        *(if which == 0 { &mut ah.wk } else { &mut ah.wv }) = with(&base, x);
                        loss(&f.z, &f.prompt, &subs, &f.block, &a)
                    }, base.as_slice(), FD_STEP).unwrap();
                    let an = if which == 0 { &g.adapter[h].wk } else { &g.adapter[h].wv };
                    check(an, num, "adapter");
                }
            }
        }
    }
}
