//! Command-line front end.
//!
//! Exit codes: `0` success, `1` I/O failure, `2` invalid input, `3` numeric
//! failure. Every successful run emits a JSON [`RunManifest`], to `--manifest`
//! when given and to stderr otherwise.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterHead, AdapterWeights, SubjectCondition};
use crate::attention::{
    local_image_cross_attention, masked_sum_image_cross_attention, AttentionConfig, BlockSite, BlockWeights, HeadWeights, Mode,
};
use crate::diffusion::{sample_with, train_toy, SampleOptions, ToyModel, TrainConfig};
use crate::error::{Error, Result};
use crate::layout::{box_to_grid, build_region_assignment, coverage_layout, masks_from_layout, GridRect, NormBox};
use crate::metrics::{attention_heatmap_dump, flop_count, layout_miou, score_image, trace_from_container, trace_to_container, FlopReport, LayoutScore};
use crate::numerics::Matrix;
use crate::par::{Exec, Policy};
use crate::tensorio::{parse_layout_spec, read_image, write_image, Container, LayoutSpec, Tensor};

#[derive(Debug, Parser)]
#[command(name = "layoutfuse", version, about = "Layout-guided decoupled cross-attention in a toy latent-diffusion sampler")]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample an image for a layout spec.
    Generate(GenerateArgs),
    /// Train the toy denoiser, adapter and embeddings on synthetic canvases.
    TrainToy(TrainArgs),
    /// Time crop-and-merge against masked-sum on random layouts.
    Bench(BenchArgs),
    /// Score predicted subject locations against a layout spec.
    EvalLayout(EvalArgs),
    /// Render heatmaps from a saved attention trace.
    InspectAttn(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_scale: Option<f64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Directory for per layer/step/subject heatmaps.
    #[arg(long)]
    pub dump_attn: Option<PathBuf>,
    /// Container path for the final latent.
    #[arg(long)]
    pub dump_latent: Option<PathBuf>,
    /// Container path for the attention trace, readable by `inspect-attn`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Where to write the loss curve and held-out losses as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    #[arg(long, default_value_t = 4)]
    pub subjects: usize,
    /// Total fraction of the grid covered by the (disjoint) boxes.
    #[arg(long, default_value_t = 0.25)]
    pub coverage: f64,
    #[arg(long, default_value_t = 20)]
    pub repeat: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tokens per subject embedding.
    #[arg(long, default_value_t = 4)]
    pub tokens: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub d_head: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// JSON array with one normalized `[x0, y0, x1, y1]` box or `null` per subject.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    pub pred: Option<PathBuf>,
    /// Generated PPM to localize subjects in.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep sampler steps divisible by this.
    #[arg(long, default_value_t = 1)]
    pub every: usize,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// Provenance record of one successful command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: Value,
    /// `path → sha256` of every input file.
    pub inputs: Vec<(String, String)>,
    /// `path → sha256` of every primary output file.
    pub outputs: Vec<(String, String)>,
    pub wall_clock_ms: u128,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn hashed(paths: &[&Path]) -> Result<Vec<(String, String)>> {
    paths.iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn emit_manifest(m: &RunManifest, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(m).expect("serializable");
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => eprintln!("{text}"),
    }
    Ok(())
}

fn policy(cli_sequential: bool) -> Policy {
    if cli_sequential {
        Policy::Sequential
    } else {
        Policy::Parallel
    }
}

fn read_text(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path)?)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let p = policy(cli.sequential);
    match &cli.command {
        Command::Generate(a) => run_generate(a, p),
        Command::TrainToy(a) => run_train_toy(a, p),
        Command::Bench(a) => run_bench(a, p).map(|_| ()),
        Command::EvalLayout(a) => run_eval_layout(a).map(|_| ()),
        Command::InspectAttn(a) => run_inspect_attn(a).map(|_| ()),
    }
}

/// Loads a spec and applies command-line overrides.
pub fn resolve_spec(text: &str, weights: &Container, a: &GenerateArgs) -> Result<LayoutSpec> {
    let mut spec = parse_layout_spec(text, weights)?;
    if let Some(m) = &a.mode {
        spec.mode = m.parse().map_err(|_| crate::error::SpecError::UnknownMode(m.clone()))?;
    }
    if let Some(s) = a.steps {
        if s == 0 {
            return Err(crate::error::SpecError::InvalidSteps(0).into());
        }
        spec.steps = s;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    for (field, v, slot) in [("image_scale", a.image_scale, &mut spec.image_scale), ("guidance", a.guidance, &mut spec.guidance)] {
        if let Some(v) = v {
            if !(v.is_finite() && v >= 0.0) {
                return Err(crate::error::SpecError::InvalidScale { field, value: v }.into());
            }
            *slot = v;
        }
    }
    Ok(spec)
}

pub fn run_generate(a: &GenerateArgs, policy: Policy) -> Result<()> {
    let start = Instant::now();
    let text = read_text(&a.spec)?;
    let weights = Container::read_file(&a.weights)?;
    let model = ToyModel::from_container(&weights)?;
    let spec = resolve_spec(&text, &weights, a)?;
    let want_trace = a.dump_attn.is_some() || a.trace.is_some();
    let opts = SampleOptions { policy, trace: want_trace, ..Default::default() };
    let result = sample_with(&spec, &model, &opts, None)?;
    write_image(&result.image, &a.out)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    let grid = (spec.grid.h, spec.grid.w);
    if let Some(p) = &a.dump_latent {
        let mut c = Container::new();
        c.insert("latent.z0", Tensor::f64(vec![grid.0, grid.1, spec.grid.c], result.z0.values().as_slice().to_vec())?)?;
        c.write_file(p)?;
        outputs.push(p);
    }
    let maps = result.trace.as_ref().map(|t| t.mass_maps(grid.0 * grid.1)).unwrap_or_default();
    if let Some(p) = &a.trace {
        trace_to_container(&maps, grid)?.write_file(p)?;
        outputs.push(p);
    }
    let mut heatmaps = 0;
    if let Some(dir) = &a.dump_attn {
        if !maps.is_empty() {
            heatmaps = attention_heatmap_dump(&maps, grid, dir)?.len();
        } else {
            std::fs::create_dir_all(dir)?;
        }
    }
    let manifest = RunManifest {
        command: "generate".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: Some(spec.seed),
        config: json!({
            "mode": spec.mode,
            "steps": spec.steps,
            "image_scale": spec.image_scale,
            "guidance": spec.guidance,
            "grid": spec.grid,
            "prompt": spec.prompt_name,
            "subjects": spec.subjects.iter().map(|s| json!({
                "id": s.id,
                "embedding": s.embedding_name,
                "box": [s.bbox.x0, s.bbox.y0, s.bbox.x1, s.bbox.y1],
                "priority": s.priority,
            })).collect::<Vec<_>>(),
            "evaluations": result.evaluations,
            "heatmaps": heatmaps,
        }),
        inputs: hashed(&[&a.spec, &a.weights])?,
        outputs: hashed(&outputs)?,
        wall_clock_ms: start.elapsed().as_millis(),
    };
    emit_manifest(&manifest, a.manifest.as_deref())
}

pub fn run_train_toy(a: &TrainArgs, policy: Policy) -> Result<()> {
    let start = Instant::now();
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| Error::Invalid(format!("training config: {e}")))?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let (model, report) = train_toy(&cfg, policy)?;
    model.to_container()?.write_file(&a.out)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(p) = &a.report {
        std::fs::write(p, serde_json::to_string_pretty(&report).expect("serializable") + "\n")?;
        outputs.push(p);
    }
    let inputs: Vec<&Path> = a.config.iter().map(PathBuf::as_path).collect();
    let manifest = RunManifest {
        command: "train-toy".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: Some(cfg.seed),
        config: json!({ "train": to_json(&cfg), "heldout_initial": report.heldout_initial, "heldout_final": report.heldout_final, "parameters": report.parameter_count }),
        inputs: hashed(&inputs)?,
        outputs: hashed(&outputs)?,
        wall_clock_ms: start.elapsed().as_millis(),
    };
    emit_manifest(&manifest, a.manifest.as_deref())
}

/// Timing and cost comparison printed by `bench`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub grid: usize,
    pub subjects: usize,
    pub requested_coverage: f64,
    pub actual_coverage: f64,
    pub repeat: usize,
    pub tokens: usize,
    pub anyms_median_ns: u64,
    pub masked_sum_median_ns: u64,
    pub timing_ratio: f64,
    pub flop_ratio: f64,
    pub anyms_flops: FlopReport,
    pub masked_sum_flops: FlopReport,
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Random single-layer weights for benchmarking the image stream.
pub fn random_block(rng: &mut ChaCha8Rng, cfg: &AttentionConfig) -> (BlockWeights, AdapterWeights) {
    let block = BlockWeights {
        heads: (0..cfg.heads)
            .map(|_| HeadWeights {
                wq: random_matrix(rng, cfg.d_model, cfg.d_head),
                wk: random_matrix(rng, cfg.d_cond, cfg.d_head),
                wv: random_matrix(rng, cfg.d_cond, cfg.d_head),
            })
            .collect(),
        wo: random_matrix(rng, cfg.d_model, cfg.d_model),
    };
    let adapter = AdapterWeights {
        layers: vec![(0..cfg.heads)
            .map(|_| AdapterHead { wk: random_matrix(rng, cfg.d_cond, cfg.d_head), wv: random_matrix(rng, cfg.d_cond, cfg.d_head) })
            .collect()],
    };
    (block, adapter)
}

pub fn run_bench(a: &BenchArgs, policy: Policy) -> Result<BenchReport> {
    let start = Instant::now();
    if !(a.coverage > 0.0 && a.coverage <= 1.0) {
        return Err(Error::Invalid(format!("coverage must be in (0, 1], got {}", a.coverage)));
    }
    if a.grid == 0 || a.subjects == 0 || a.subjects > a.grid || a.repeat == 0 || a.tokens == 0 || a.heads == 0 || a.d_head == 0 {
        return Err(Error::Invalid("grid, subjects (<= grid), repeat, tokens, heads and d-head must be >= 1".into()));
    }
    let n = a.grid;
    let mut cfg = AttentionConfig::new(1, a.heads, a.d_head, 8);
    cfg.d_model = a.heads * a.d_head;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (block, adapter) = random_block(&mut rng, &cfg);
    let exec = Exec::with_policy(policy);
    let site = BlockSite { layer: 0, step: 0, h: n, w: n };
    let (mut t_any, mut t_mask) = (Vec::with_capacity(a.repeat), Vec::with_capacity(a.repeat));
    let mut first = None;
    let mut covered = 0usize;
    for r in 0..a.repeat {
        let boxes = coverage_layout(&mut rng, a.subjects, n, n, a.coverage).map_err(Error::Invalid)?;
        covered += boxes.iter().map(|b| box_to_grid(&b.bbox, n, n).area()).sum::<usize>();
        let subs: Vec<SubjectCondition> = boxes
            .iter()
            .enumerate()
            .map(|(j, b)| SubjectCondition::new(format!("s{j}"), random_matrix(&mut rng, a.tokens, cfg.d_cond), b.bbox, b.priority))
            .collect();
        let z = random_matrix(&mut rng, n * n, cfg.d_model);
        let time_anyms = || -> Result<u64> {
            let t = Instant::now();
            let assignment = build_region_assignment(&boxes, n, n);
            std::hint::black_box(local_image_cross_attention(&z, &subs, &assignment, site, &block, &adapter, &cfg, exec)?);
            Ok(t.elapsed().as_nanos() as u64)
        };
        let time_masked = || -> Result<u64> {
            let t = Instant::now();
            let masks = masks_from_layout(&boxes, n, n);
            std::hint::black_box(masked_sum_image_cross_attention(&z, &subs, &masks, site, &block, &adapter, exec)?);
            Ok(t.elapsed().as_nanos() as u64)
        };
        // Alternate which variant runs first so cache warm-up does not favor one.
        if r % 2 == 0 {
            t_any.push(time_anyms()?);
            t_mask.push(time_masked()?);
        } else {
            t_mask.push(time_masked()?);
            t_any.push(time_anyms()?);
        }
        if first.is_none() {
            let toks = vec![a.tokens; boxes.len()];
            first = Some((
                flop_count(Mode::Anyms, &boxes, (n, n), &cfg, &toks, 0)?,
                flop_count(Mode::MaskedSum, &boxes, (n, n), &cfg, &toks, 0)?,
            ));
        }
    }
    let (af, mf) = first.expect("repeat >= 1");
    let (am, mm) = (median(t_any), median(t_mask));
    let report = BenchReport {
        grid: n,
        subjects: a.subjects,
        requested_coverage: a.coverage,
        actual_coverage: covered as f64 / (a.repeat * n * n) as f64,
        repeat: a.repeat,
        tokens: a.tokens,
        anyms_median_ns: am,
        masked_sum_median_ns: mm,
        timing_ratio: am as f64 / mm as f64,
        flop_ratio: af.image_flops as f64 / mf.image_flops as f64,
        anyms_flops: af,
        masked_sum_flops: mf,
    };
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report).expect("serializable")),
        Format::Table => {
            println!("{:<12} {:>14} {:>16}", "variant", "median_ns", "image_flops");
            println!("{:<12} {:>14} {:>16}", "anyms", report.anyms_median_ns, report.anyms_flops.image_flops);
            println!("{:<12} {:>14} {:>16}", "masked-sum", report.masked_sum_median_ns, report.masked_sum_flops.image_flops);
            println!("coverage {:.4}  timing ratio {:.4}  flop ratio {:.4}", report.actual_coverage, report.timing_ratio, report.flop_ratio);
        }
    }
    let manifest = RunManifest {
        command: "bench".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: Some(a.seed),
        config: json!({ "grid": a.grid, "subjects": a.subjects, "coverage": a.coverage, "repeat": a.repeat, "tokens": a.tokens,
                        "heads": a.heads, "d_head": a.d_head, "parallel": policy.is_parallel() }),
        inputs: Vec::new(),
        outputs: Vec::new(),
        wall_clock_ms: start.elapsed().as_millis(),
    };
    emit_manifest(&manifest, a.manifest.as_deref())?;
    Ok(report)
}

fn parse_predictions(text: &str, spec: &LayoutSpec) -> Result<Vec<Option<GridRect>>> {
    let raw: Vec<Option<Vec<f64>>> = serde_json::from_str(text).map_err(|e| Error::Invalid(format!("predictions: {e}")))?;
    if raw.len() != spec.subjects.len() {
        return Err(Error::Invalid(format!("{} predictions for {} subjects", raw.len(), spec.subjects.len())));
    }
    raw.into_iter()
        .zip(&spec.subjects)
        .map(|(b, s)| match b {
            None => Ok(None),
            Some(c) => Ok(Some(box_to_grid(&NormBox::from_slice(&s.id, &c)?, spec.grid.h, spec.grid.w))),
        })
        .collect()
}

pub fn run_eval_layout(a: &EvalArgs) -> Result<LayoutScore> {
    let start = Instant::now();
    let weights = Container::read_file(&a.weights)?;
    let spec = parse_layout_spec(&read_text(&a.spec)?, &weights)?;
    let mut inputs: Vec<&Path> = vec![&a.spec, &a.weights];
    let score = match (&a.pred, &a.image) {
        (Some(p), _) => {
            inputs.push(p);
            let pred = parse_predictions(&read_text(p)?, &spec)?;
            let targets: Vec<GridRect> = spec.subjects.iter().map(|s| box_to_grid(&s.bbox, spec.grid.h, spec.grid.w)).collect();
            layout_miou(&pred, &targets)?
        }
        (None, Some(img)) => {
            inputs.push(img);
            let model = ToyModel::from_container(&weights)?;
            let image = read_image(img)?;
            if (image.h, image.w) != (spec.grid.h, spec.grid.w) {
                return Err(Error::shape("eval-layout", format!("image is {}×{}, spec grid {}×{}", image.h, image.w, spec.grid.h, spec.grid.w)));
            }
            score_image(&model, &spec, &image)?
        }
        (None, None) => return Err(Error::Invalid("pass --pred or --image".into())),
    };
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&score).expect("serializable")),
        Format::Table => {
            for (s, (iou, det)) in spec.subjects.iter().zip(score.iou.iter().zip(&score.detected)) {
                println!("{:<16} iou {:.4} detected {}", s.id, iou, det);
            }
            println!("mIoU {:.4}", score.miou);
        }
    }
    let manifest = RunManifest {
        command: "eval-layout".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: None,
        config: json!({ "miou": score.miou }),
        inputs: hashed(&inputs)?,
        outputs: Vec::new(),
        wall_clock_ms: start.elapsed().as_millis(),
    };
    emit_manifest(&manifest, a.manifest.as_deref())?;
    Ok(score)
}

pub fn run_inspect_attn(a: &InspectArgs) -> Result<usize> {
    let start = Instant::now();
    if a.every == 0 {
        return Err(Error::Invalid("--every must be >= 1".into()));
    }
    let (grid, maps) = trace_from_container(&Container::read_file(&a.trace)?)?;
    let kept: Vec<_> = maps.into_iter().filter(|m| m.step % a.every == 0).collect();
    let files = attention_heatmap_dump(&kept, grid, &a.out)?;
    println!("{}", json!({ "files": files.len(), "dir": a.out.display().to_string() }));
    let manifest = RunManifest {
        command: "inspect-attn".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: None,
        config: json!({ "every": a.every, "grid": [grid.0, grid.1] }),
        inputs: hashed(&[&a.trace])?,
        outputs: hashed(&files.iter().map(PathBuf::as_path).collect::<Vec<_>>())?,
        wall_clock_ms: start.elapsed().as_millis(),
    };
    emit_manifest(&manifest, a.manifest.as_deref())?;
    Ok(files.len())
}
