//! Subject feature provider.
//!
//! Each subject arrives as a context embedding `c_j` (rows are tokens). The
//! adapter projects it into per-layer, per-head keys and values with fixed
//! matrices; nothing here is tuned per subject combination.

use crate::error::{Error, Result};
use crate::layout::{box_to_grid, GridRect, NormBox, SubjectBox};
use crate::numerics::{matmul, Matrix};
use crate::tensorio::{Container, LayoutSpec};

/// One subject: its embedding, target box and overlap rank.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectCondition {
    pub id: String,
    /// `m_j × d_cond`
    pub embedding: Matrix,
    pub bbox: NormBox,
    pub priority: i64,
}

impl SubjectCondition {
    pub fn new(id: impl Into<String>, embedding: Matrix, bbox: NormBox, priority: i64) -> Self {
        SubjectCondition { id: id.into(), embedding, bbox, priority }
    }

    /// The box resolved on an `h × w` attention grid.
    pub fn rect(&self, h: usize, w: usize) -> GridRect {
        box_to_grid(&self.bbox, h, w)
    }

    pub fn subject_box(&self) -> SubjectBox {
        SubjectBox { bbox: self.bbox, priority: self.priority }
    }
}

/// Key/value projections for one head of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterHead {
    /// `d_cond × d_head`
    pub wk: Matrix,
    /// `d_cond × d_head`
    pub wv: Matrix,
}

/// Adapter projections indexed `[layer][head]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterWeights {
    pub layers: Vec<Vec<AdapterHead>>,
}

impl AdapterWeights {
    pub fn head(&self, layer: usize, head: usize) -> Result<&AdapterHead> {
        self.layers
            .get(layer)
            .and_then(|l| l.get(head))
            .ok_or_else(|| Error::Invalid(format!("adapter weights missing for layer {layer} head {head}")))
    }

    /// Embedding width the projections expect, if any weights are present.
    pub fn d_cond(&self) -> Option<usize> {
        self.layers.first().and_then(|l| l.first()).map(|h| h.wk.rows())
    }

    pub fn tensor_name(layer: usize, head: usize, which: &str) -> String {
        format!("adapter.layer{layer}.head{head}.{which}")
    }

    pub fn write_to(&self, c: &mut Container) -> Result<()> {
        for (l, heads) in self.layers.iter().enumerate() {
            for (h, w) in heads.iter().enumerate() {
                c.insert_matrix(Self::tensor_name(l, h, "wk"), &w.wk)?;
                c.insert_matrix(Self::tensor_name(l, h, "wv"), &w.wv)?;
            }
        }
        Ok(())
    }

    pub fn read_from(c: &Container, layers: usize, heads: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                (0..heads)
                    .map(|h| {
                        Ok(AdapterHead {
                            wk: c.matrix(&Self::tensor_name(l, h, "wk"))?,
                            wv: c.matrix(&Self::tensor_name(l, h, "wv"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdapterWeights { layers })
    }
}

/// `(K_j, V_j) = (c_j·W_k′, c_j·W_v′)` for one layer and head.
pub fn subject_kv(c_j: &Matrix, layer: usize, head: usize, weights: &AdapterWeights) -> Result<(Matrix, Matrix)> {
    let w = weights.head(layer, head)?;
    if c_j.cols() != w.wk.rows() || c_j.cols() != w.wv.rows() {
        return Err(Error::shape(
            "subject_kv",
            format!("embedding width {} vs adapter d_cond {}", c_j.cols(), w.wk.rows()),
        ));
    }
    Ok((matmul(c_j, &w.wk)?, matmul(c_j, &w.wv)?))
}

/// Subject conditions in spec order, checked against the adapter's `d_cond`.
pub fn load_conditions(spec: &LayoutSpec, weights: &AdapterWeights) -> Result<Vec<SubjectCondition>> {
    spec.subjects
        .iter()
        .map(|s| {
            if s.embedding.rows() == 0 {
                return Err(Error::Invalid(format!("subject `{}` has an empty embedding", s.id)));
            }
            if let Some(d) = weights.d_cond() {
                if s.embedding.cols() != d {
                    return Err(Error::shape(
                        "load_conditions",
                        format!("subject `{}` embedding width {} vs d_cond {d}", s.id, s.embedding.cols()),
                    ));
                }
            }
            s.embedding.ensure_finite(&format!("embedding of subject `{}`", s.id))?;
            Ok(SubjectCondition::new(s.id.clone(), s.embedding.clone(), s.bbox, s.priority))
        })
        .collect()
}
