//! Tensor container I/O, layout-spec parsing and PPM image emission.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! u64 N | N bytes UTF-8 JSON header | data section
//! ```
//!
//! The header maps each tensor name to `{"dtype","shape","offset"}`. Tensors are
//! stored row-major, back to back in name order, with no padding.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::attention::Mode;
use crate::error::{ContainerError, Error, Result, SpecError};
use crate::layout::{NormBox, SubjectBox};
use crate::numerics::{LatentGrid, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A named entry's payload: a shape plus values in their stored dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let t = Tensor { shape, data };
        if t.numel() != t.len() {
            return Err(ContainerError::ShapeMismatch { name: String::new(), expected: t.numel(), actual: t.len() }.into());
        }
        Ok(t)
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, TensorData::F64(data))
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, TensorData::F32(data))
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: TensorData::F64(vec![v]) }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Tensor { shape: vec![m.rows(), m.cols()], data: TensorData::F64(m.as_slice().to_vec()) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Rank-0 → 1×1, rank-1 `[n]` → 1×n, rank-2 → as is.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let (r, c) = match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => return Err(Error::shape("Tensor::to_matrix", format!("rank {} tensor", other.len()))),
        };
        Matrix::from_vec(r, c, self.to_f64())
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Header entries in document order, keeping duplicates so they can be rejected.
struct RawHeader(Vec<(String, HeaderEntry)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, HeaderEntry>()? {
                    out.push((k, v));
                }
                Ok(RawHeader(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Serializes named tensors. Data is laid out in name order.
pub fn write_container<'a, I>(entries: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut sorted: BTreeMap<&str, &Tensor> = BTreeMap::new();
    for (name, t) in entries {
        if sorted.insert(name, t).is_some() {
            return Err(ContainerError::DuplicateName(name.to_string()).into());
        }
        if t.numel() != t.len() {
            return Err(ContainerError::ShapeMismatch { name: name.to_string(), expected: t.numel(), actual: t.len() }.into());
        }
    }
    let mut header = BTreeMap::new();
    let mut data = Vec::new();
    for (name, t) in &sorted {
        header.insert(*name, HeaderEntry { dtype: t.dtype().name().into(), shape: t.shape.clone(), offset: data.len() as u64 });
        t.write_le(&mut data);
    }
    let json = serde_json::to_string(&header).map_err(|e| ContainerError::MalformedHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&data);
    Ok(out)
}

/// Parses and validates a container produced by [`write_container`].
pub fn read_container(bytes: &[u8]) -> Result<Container> {
    let available = bytes.len() as u64;
    if available < 8 {
        return Err(ContainerError::Truncated { needed: 8, available }.into());
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = 8u64.checked_add(n).ok_or_else(|| ContainerError::MalformedHeader("header length overflow".into()))?;
    if available < header_end {
        return Err(ContainerError::Truncated { needed: header_end, available }.into());
    }
    let header_bytes = &bytes[8..header_end as usize];
    let text = std::str::from_utf8(header_bytes).map_err(|e| ContainerError::MalformedHeader(e.to_string()))?;
    let RawHeader(raw) = serde_json::from_str(text).map_err(|e| ContainerError::MalformedHeader(e.to_string()))?;
    let data = &bytes[header_end as usize..];
    let data_len = data.len() as u64;

    let mut seen = HashSet::new();
    let mut spans = Vec::with_capacity(raw.len());
    for (name, e) in raw {
        if !seen.insert(name.clone()) {
            return Err(ContainerError::DuplicateName(name).into());
        }
        let dtype = match e.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            _ => return Err(ContainerError::UnknownDtype { name, dtype: e.dtype }.into()),
        };
        let numel = e
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ContainerError::MalformedHeader(format!("shape of `{name}` overflows")))?;
        let byte_len = (numel as u64)
            .checked_mul(dtype.size() as u64)
            .ok_or_else(|| ContainerError::MalformedHeader(format!("size of `{name}` overflows")))?;
        let end = e.offset.saturating_add(byte_len);
        if end > data_len {
            return Err(ContainerError::OutOfBounds { name, start: e.offset, end, len: data_len }.into());
        }
        spans.push((name, dtype, e.shape, e.offset, end));
    }
    spans.sort_by_key(|s| s.3);
    let mut cursor = 0u64;
    let mut entries = BTreeMap::new();
    for (name, dtype, shape, start, end) in spans {
        if start != cursor {
            return Err(ContainerError::Overlap { name, offset: start, expected: cursor }.into());
        }
        let raw = &data[start as usize..end as usize];
        let payload = match dtype {
            DType::F32 => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        entries.insert(name, Tensor { shape, data: payload });
        cursor = end;
    }
    if cursor != data_len {
        return Err(ContainerError::TrailingBytes(data_len - cursor).into());
    }
    Ok(Container { entries })
}

/// An in-memory set of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor, refusing to replace an existing name.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(ContainerError::DuplicateName(name).into());
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) -> Result<()> {
        self.insert(name, Tensor::from_matrix(m))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?.to_matrix()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Union of two containers; names present in both are an error.
    pub fn merged(&self, other: &Container) -> Result<Container> {
        let mut out = self.clone();
        for (k, v) in &other.entries {
            out.insert(k.clone(), v.clone())?;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        write_container(self.entries.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_container(bytes)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        read_container(&std::fs::read(path)?)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

/// Grid dimensions of a generation request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "C")]
    pub c: usize,
}

/// One subject of a resolved layout spec.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSpec {
    pub id: String,
    pub embedding_name: String,
    pub embedding: Matrix,
    pub bbox: NormBox,
    pub priority: i64,
}

/// A parsed layout spec with every referenced embedding attached.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutSpec {
    pub grid: GridDims,
    pub prompt_name: String,
    pub prompt: Matrix,
    pub subjects: Vec<SubjectSpec>,
    pub seed: u64,
    pub steps: usize,
    pub mode: Mode,
    pub image_scale: f64,
    pub guidance: f64,
}

impl LayoutSpec {
    pub fn boxes(&self) -> Vec<SubjectBox> {
        self.subjects.iter().map(|s| SubjectBox { bbox: s.bbox, priority: s.priority }).collect()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSubject {
    id: Option<String>,
    embedding: Option<String>,
    #[serde(rename = "box")]
    bbox: Option<Vec<f64>>,
    priority: Option<i64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    grid: Option<GridDims>,
    prompt: Option<String>,
    subjects: Option<Vec<RawSubject>>,
    seed: Option<u64>,
    steps: Option<i64>,
    mode: Option<String>,
    image_scale: Option<f64>,
    guidance: Option<f64>,
}

fn required<T>(v: Option<T>, field: &str) -> Result<T, SpecError> {
    v.ok_or_else(|| SpecError::MissingField(field.to_string()))
}

fn lookup(container: &Container, name: &str) -> Result<Matrix, SpecError> {
    container
        .get(name)
        .ok_or_else(|| SpecError::UnknownTensor(name.to_string()))?
        .to_matrix()
        .map_err(|_| SpecError::UnknownTensor(format!("{name} (not rank 0-2)")))
}

/// Parses a layout-spec document, resolving tensor names against `container`.
///
/// A subject without an `embedding` field refers to `subject.{id}`.
pub fn parse_layout_spec(text: &str, container: &Container) -> Result<LayoutSpec, SpecError> {
    let raw: RawSpec = serde_json::from_str(text).map_err(|e| SpecError::Json(e.to_string()))?;
    let grid = required(raw.grid, "grid")?;
    if grid.h == 0 || grid.w == 0 || grid.c == 0 {
        return Err(SpecError::InvalidGrid { h: grid.h, w: grid.w, c: grid.c });
    }
    let prompt_name = required(raw.prompt, "prompt")?;
    let raw_subjects = required(raw.subjects, "subjects")?;
    let seed = required(raw.seed, "seed")?;
    let steps = required(raw.steps, "steps")?;
    if steps < 1 {
        return Err(SpecError::InvalidSteps(steps));
    }
    let mode = match raw.mode {
        Some(m) => m.parse::<Mode>().map_err(|_| SpecError::UnknownMode(m))?,
        None => Mode::Anyms,
    };
    let image_scale = raw.image_scale.unwrap_or(1.0);
    if !(image_scale.is_finite() && image_scale >= 0.0) {
        return Err(SpecError::InvalidScale { field: "image_scale", value: image_scale });
    }
    let guidance = raw.guidance.unwrap_or(0.0);
    if !(guidance.is_finite() && guidance >= 0.0) {
        return Err(SpecError::InvalidScale { field: "guidance", value: guidance });
    }

    let mut ids = HashSet::new();
    let mut subjects = Vec::with_capacity(raw_subjects.len());
    for (i, s) in raw_subjects.into_iter().enumerate() {
        let id = required(s.id, &format!("subjects[{i}].id"))?;
        if !ids.insert(id.clone()) {
            return Err(SpecError::DuplicateSubject(id));
        }
        let coords = required(s.bbox, &format!("subjects[{i}].box"))?;
        let bbox = NormBox::from_slice(&id, &coords)?;
        let embedding_name = s.embedding.unwrap_or_else(|| format!("subject.{id}"));
        let embedding = lookup(container, &embedding_name)?;
        subjects.push(SubjectSpec { id, embedding_name, embedding, bbox, priority: s.priority.unwrap_or(0) });
    }
    let prompt = lookup(container, &prompt_name)?;
    Ok(LayoutSpec { grid, prompt_name, prompt, subjects, seed, steps: steps as usize, mode, image_scale, guidance })
}

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes a 3-channel grid in `[-1, 1]` as binary PPM (P6).
pub fn encode_ppm(grid: &LatentGrid) -> Result<Vec<u8>> {
    if grid.channels() != 3 {
        return Err(Error::shape("write_image", format!("need 3 channels, got {}", grid.channels())));
    }
    if grid.values().as_slice().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("write_image: NaN in grid".into()));
    }
    let mut out = format!("P6\n{} {}\n255\n", grid.w, grid.h).into_bytes();
    out.extend(grid.values().as_slice().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write_image(grid: &LatentGrid, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_ppm(grid)?)?;
    Ok(())
}

/// Decodes a P6 image with maxval 255, mapping bytes back onto `[-1, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<LatentGrid> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Invalid("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let bad = |what: &str| Error::Invalid(format!("PPM: {what}"));
    if fields[0] != "P6" {
        return Err(bad("expected P6 magic"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    if fields[3] != "255" {
        return Err(bad("only maxval 255 is supported"));
    }
    let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated pixel data"))?;
    let values = body.iter().map(|&b| f64::from(b) / 255.0 * 2.0 - 1.0).collect();
    LatentGrid::new(h, w, Matrix::from_vec(h * w, 3, values)?)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<LatentGrid> {
    decode_ppm(&std::fs::read(path)?)
}
