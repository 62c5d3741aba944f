//! Layout-control scoring, attention heatmaps and analytic FLOP accounting.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, MassMap, Mode};
use crate::error::{Error, Result};
use crate::layout::{box_to_grid, iou, GridRect, SubjectBox};
use crate::numerics::{LatentGrid, Matrix};
use crate::diffusion::ToyModel;
use crate::tensorio::{write_image, Container, GridDims, LayoutSpec, SubjectSpec, Tensor};

/// Nearest-color pixel labels: `0` is background, `j + 1` is subject `j`,
/// `None` is farther than `threshold` from everything.
pub fn classify_pixels(image: &LatentGrid, signatures: &[Vec<f64>], background: &[f64], threshold: Option<f64>) -> Vec<Option<usize>> {
    let refs: Vec<&[f64]> = std::iter::once(background).chain(signatures.iter().map(Vec::as_slice)).collect();
    (0..image.pixels())
        .map(|p| {
            let px = image.values().row(p);
            let mut best = (f64::INFINITY, 0);
            for (k, r) in refs.iter().enumerate() {
                let d: f64 = px.iter().zip(r.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if d < best.0 {
                    best = (d, k);
                }
            }
            match threshold {
                Some(th) if best.0 > th => None,
                _ => Some(best.1),
            }
        })
        .collect()
}

/// Predicted rect per subject: the tight bounds of the largest 4-connected
/// component of its color; `None` when no pixel takes that color.
pub fn localize_subjects(image: &LatentGrid, signatures: &[Vec<f64>], background: &[f64], threshold: Option<f64>) -> Vec<Option<GridRect>> {
    let (h, w) = (image.h, image.w);
    let labels = classify_pixels(image, signatures, background, threshold);
    let mut seen = vec![false; h * w];
    let mut best: Vec<Option<(usize, GridRect)>> = vec![None; signatures.len()];
    for start in 0..h * w {
        let Some(label) = labels[start] else { continue };
        if label == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let (mut size, mut rect) = (0, GridRect::new(start / w, start / w + 1, start % w, start % w + 1));
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (y, x) = (p / w, p % w);
            rect = GridRect { h_s: rect.h_s.min(y), h_e: rect.h_e.max(y + 1), w_s: rect.w_s.min(x), w_e: rect.w_e.max(x + 1) };
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == Some(label) {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        let slot = &mut best[label - 1];
        // Raster order breaks size ties: the first component found stays.
        if slot.is_none_or(|(s, _)| size > s) {
            *slot = Some((size, rect));
        }
    }
    best.into_iter().map(|b| b.map(|(_, r)| r)).collect()
}

/// Builds a layout spec over palette subjects `picks` of `model`.
pub fn palette_spec(model: &ToyModel, picks: &[usize], boxes: &[SubjectBox], (h, w): (usize, usize), seed: u64, steps: usize, mode: Mode) -> LayoutSpec {
    LayoutSpec {
        grid: GridDims { h, w, c: model.denoiser.channels },
        prompt_name: "prompt.scene".into(),
        prompt: model.scene.clone(),
        subjects: picks
            .iter()
            .zip(boxes)
            .map(|(&i, b)| SubjectSpec {
                id: model.subjects[i].id.clone(),
                embedding_name: format!("subject.{}", model.subjects[i].id),
                embedding: model.subjects[i].embedding.clone(),
                bbox: b.bbox,
                priority: b.priority,
            })
            .collect(),
        seed,
        steps,
        mode,
        image_scale: 1.0,
        guidance: 0.0,
    }
}

/// Localizes every subject of `spec` in `image` using the model palette.
pub fn score_image(model: &ToyModel, spec: &LayoutSpec, image: &LatentGrid) -> Result<LayoutScore> {
    let colors = spec
        .subjects
        .iter()
        .map(|s| {
            let i = model.subject_index(&s.id).ok_or_else(|| Error::Invalid(format!("subject `{}` has no palette color", s.id)))?;
            let c = &model.subjects[i].color;
            if c.len() != image.channels() {
                return Err(Error::Invalid(format!("subject `{}` has no palette color", s.id)));
            }
            Ok(c.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let pred = localize_subjects(image, &colors, &model.background, None);
    let targets: Vec<GridRect> = spec.subjects.iter().map(|s| box_to_grid(&s.bbox, image.h, image.w)).collect();
    layout_miou(&pred, &targets)
}

/// Per-subject IoU against the target layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutScore {
    pub iou: Vec<f64>,
    pub miou: f64,
    pub detected: Vec<bool>,
}

pub fn layout_miou(predicted: &[Option<GridRect>], targets: &[GridRect]) -> Result<LayoutScore> {
    if predicted.len() != targets.len() {
        return Err(Error::Invalid(format!("{} predictions for {} targets", predicted.len(), targets.len())));
    }
    let scores: Vec<f64> = predicted.iter().zip(targets).map(|(p, t)| p.map_or(0.0, |p| iou(&p, t))).collect();
    let miou = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
    Ok(LayoutScore { miou, detected: predicted.iter().map(Option::is_some).collect(), iou: scores })
}

/// Image-stream cost of one subject, summed over heads and applied layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectFlops {
    /// `|B_j|` for crop-and-merge, `H·W` otherwise.
    pub query_rows: u64,
    pub tokens: u64,
    pub flops: u64,
    pub exps: u64,
}

/// Analytic attention cost of one denoiser call. FLOPs count two per
/// multiply-add over the `QKᵀ` and `A·V` products; exponentials are separate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub mode: Mode,
    pub grid_pixels: u64,
    pub d_head: u64,
    pub heads: u64,
    pub layers: u64,
    pub applied_layers: u64,
    pub text_tokens: u64,
    pub subjects: Vec<SubjectFlops>,
    pub image_flops: u64,
    pub image_exps: u64,
    pub text_flops: u64,
    pub text_exps: u64,
    pub total_flops: u64,
    pub total_exps: u64,
}

/// FLOPs of one call over `h × w` with the given layout. The image stream
/// counts only layers in `config.apply_layers` and vanishes for text-only
/// mode, no subjects, or a zero image scale.
pub fn flop_count(
    mode: Mode,
    boxes: &[SubjectBox],
    (h, w): (usize, usize),
    config: &AttentionConfig,
    subject_tokens: &[usize],
    text_tokens: usize,
) -> Result<FlopReport> {
    if subject_tokens.len() != boxes.len() {
        return Err(Error::Invalid(format!("{} token counts for {} boxes", subject_tokens.len(), boxes.len())));
    }
    let hw = (h * w) as u64;
    let d = config.d_head as u64;
    let heads = config.heads as u64;
    let applied = (0..config.layers).filter(|l| config.apply_layers.as_ref().is_none_or(|s| s.contains(l))).count() as u64;
    let image_on = mode != Mode::TextOnly && !boxes.is_empty() && config.image_scale != 0.0;
    let subjects: Vec<SubjectFlops> = if image_on {
        boxes
            .iter()
            .zip(subject_tokens)
            .map(|(b, &m)| {
                let rows = match mode {
                    Mode::Anyms => box_to_grid(&b.bbox, h, w).area() as u64,
                    _ => hw,
                };
                let m = m as u64;
                SubjectFlops { query_rows: rows, tokens: m, flops: 4 * rows * m * d * heads * applied, exps: rows * m * heads * applied }
            })
            .collect()
    } else {
        Vec::new()
    };
    let image_flops = subjects.iter().map(|s| s.flops).sum();
    let image_exps = subjects.iter().map(|s| s.exps).sum();
    let layers = config.layers as u64;
    let mt = text_tokens as u64;
    let text_flops = 4 * hw * mt * d * heads * layers;
    let text_exps = hw * mt * heads * layers;
    Ok(FlopReport {
        mode,
        grid_pixels: hw,
        d_head: d,
        heads,
        layers,
        applied_layers: applied,
        text_tokens: mt,
        subjects,
        image_flops,
        image_exps,
        text_flops,
        text_exps,
        total_flops: image_flops + text_flops,
        total_exps: image_exps + text_exps,
    })
}

/// Heatmap file name for one map.
pub fn heatmap_name(layer: usize, step: usize, subject: usize) -> String {
    format!("attn_L{layer}_t{step}_s{subject}.ppm")
}

/// Min-max normalized copy of `mass`; a constant map becomes all zeros.
pub fn normalize(mass: &[f64]) -> Vec<f64> {
    let lo = mass.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0.0; mass.len()];
    }
    mass.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Writes one grayscale PPM per map into `dir`. Normalized mass `v ∈ [0, 1]`
/// is written as the grid value `v` in every channel, so zero renders mid-gray.
pub fn attention_heatmap_dump(maps: &[MassMap], (h, w): (usize, usize), dir: &Path) -> Result<Vec<PathBuf>> {
    if maps.is_empty() {
        return Err(Error::Invalid("no attention trace to dump".into()));
    }
    std::fs::create_dir_all(dir)?;
    maps.iter()
        .map(|m| {
            if m.mass.len() != h * w {
                return Err(Error::shape("attention_heatmap_dump", format!("map has {} pixels, grid {h}×{w}", m.mass.len())));
            }
            let values: Vec<f64> = normalize(&m.mass).into_iter().flat_map(|v| [v, v, v]).collect();
            let grid = LatentGrid::new(h, w, Matrix::from_vec(h * w, 3, values)?)?;
            let path = dir.join(heatmap_name(m.layer, m.step, m.subject));
            write_image(&grid, &path)?;
            Ok(path)
        })
        .collect()
}

/// Stores mass maps as `attn.L{layer}.t{step}.s{subject}` tensors of shape `[h, w]`.
pub fn trace_to_container(maps: &[MassMap], (h, w): (usize, usize)) -> Result<Container> {
    let mut c = Container::new();
    for m in maps {
        c.insert(format!("attn.L{}.t{}.s{}", m.layer, m.step, m.subject), Tensor::f64(vec![h, w], m.mass.clone())?)?;
    }
    Ok(c)
}

/// Inverse of [`trace_to_container`]; returns the grid size and maps sorted by (step, layer, subject).
pub fn trace_from_container(c: &Container) -> Result<((usize, usize), Vec<MassMap>)> {
    let mut grid = None;
    let mut maps = Vec::new();
    for name in c.names() {
        let Some(rest) = name.strip_prefix("attn.L") else { continue };
        let parse = || -> Option<(usize, usize, usize)> {
            let (l, rest) = rest.split_once(".t")?;
            let (t, s) = rest.split_once(".s")?;
            Some((l.parse().ok()?, t.parse().ok()?, s.parse().ok()?))
        };
        let (layer, step, subject) = parse().ok_or_else(|| Error::Invalid(format!("malformed trace tensor name `{name}`")))?;
        let t = c.get(name).expect("listed name");
        let &[h, w] = t.shape() else {
            return Err(Error::shape("trace", format!("`{name}` is not rank 2")));
        };
        if *grid.get_or_insert((h, w)) != (h, w) {
            return Err(Error::shape("trace", "maps disagree on grid size"));
        }
        maps.push(MassMap { layer, step, subject, mass: t.to_f64() });
    }
    let grid = grid.ok_or_else(|| Error::Invalid("container holds no attention trace".into()))?;
    maps.sort_by_key(|m| (m.step, m.layer, m.subject));
    Ok((grid, maps))
}
