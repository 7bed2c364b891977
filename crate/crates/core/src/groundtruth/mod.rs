//! Edge-label ground truth: ABC feature files and synthetic shapes.

mod synth;
mod yaml;

use std::fs;
use std::path::Path;

pub use synth::{synth_shape, synth_shape_with_points, ShapeKind, SynthShape, BAND_FACTOR};
pub use yaml::{parse_yaml, Yaml};

use crate::error::{Error, Result};
use crate::io::{format_labels, parse_labels};

/// Sorted, duplicate-free edge point indices over a cloud of `n` points.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EdgeLabelSet {
    n: usize,
    edge_indices: Vec<usize>,
}

impl EdgeLabelSet {
    /// Sorts and deduplicates `indices`; any index `>= n` is an error.
    pub fn new(n: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.last().filter(|&&i| i >= n) {
            return Err(Error::InconsistentPairing {
                index: bad,
                n_vertices: n,
            });
        }
        Ok(EdgeLabelSet {
            n,
            edge_indices: indices,
        })
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        EdgeLabelSet {
            n: mask.len(),
            edge_indices: (0..mask.len()).filter(|&i| mask[i]).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn indices(&self) -> &[usize] {
        &self.edge_indices
    }

    pub fn len(&self) -> usize {
        self.edge_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edge_indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.edge_indices.binary_search(&i).is_ok()
    }

    pub fn to_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.n];
        for &i in &self.edge_indices {
            m[i] = true;
        }
        m
    }

    pub fn to_sidecar(&self) -> String {
        format_labels(&self.edge_indices)
    }

    pub fn from_sidecar(src: &str, n: usize) -> Result<Self> {
        Ok(EdgeLabelSet {
            n,
            edge_indices: parse_labels(src, n)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_sidecar()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, n: usize) -> Result<Self> {
        let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_sidecar(&src, n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveType {
    Line,
    Circle,
    Ellipse,
    BSpline,
    Other,
}

impl CurveType {
    fn parse(s: Option<&str>) -> Self {
        match s.map(str::to_ascii_lowercase).as_deref() {
            Some("line") => CurveType::Line,
            Some("circle") => CurveType::Circle,
            Some("ellipse") => CurveType::Ellipse,
            Some("bspline") => CurveType::BSpline,
            _ => CurveType::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCurve {
    pub curve_type: CurveType,
    pub sharp: bool,
    pub vert_indices: Vec<usize>,
}

/// Reads the `curves` list of an ABC feature document. Curves without a `sharp`
/// flag count as not sharp.
pub fn parse_feature_curves(src: &str) -> Result<Vec<FeatureCurve>> {
    let doc = parse_yaml(src)?;
    let shape_err = |m: String| Error::Yaml {
        line: 0,
        column: 0,
        message: m,
    };
    let curves = match doc.get("curves") {
        Some(Yaml::Seq(c)) => c,
        Some(Yaml::Null) => return Ok(Vec::new()),
        Some(_) => return Err(shape_err("'curves' is not a list".into())),
        None => return Err(shape_err("document has no 'curves' list".into())),
    };
    curves
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            if !matches!(c, Yaml::Map(_)) {
                return Err(shape_err(format!("curve {ci} is not a mapping")));
            }
            let sharp = match c.get("sharp") {
                None | Some(Yaml::Null) => false,
                Some(Yaml::Bool(b)) => *b,
                Some(_) => return Err(shape_err(format!("curve {ci}: 'sharp' is not a boolean"))),
            };
            let vert_indices = match c.get("vert_indices") {
                None | Some(Yaml::Null) => Vec::new(),
                Some(Yaml::Seq(items)) => items
                    .iter()
                    .map(|v| match v.as_i64() {
                        Some(i) if i >= 0 => Ok(i as usize),
                        _ => Err(shape_err(format!(
                            "curve {ci}: vertex index {v:?} is not a nonnegative integer"
                        ))),
                    })
                    .collect::<Result<_>>()?,
                Some(_) => return Err(shape_err(format!("curve {ci}: 'vert_indices' is not a list"))),
            };
            Ok(FeatureCurve {
                curve_type: CurveType::parse(c.get("type").and_then(Yaml::as_str)),
                sharp,
                vert_indices,
            })
        })
        .collect()
}

/// Union of the vertex indices of all sharp curves.
pub fn abc_edge_labels(src: &str, n_vertices: usize) -> Result<EdgeLabelSet> {
    let indices = parse_feature_curves(src)?
        .into_iter()
        .filter(|c| c.sharp)
        .flat_map(|c| c.vert_indices)
        .collect();
    EdgeLabelSet::new(n_vertices, indices)
}

pub fn parse_abc_features(yaml_path: &Path, n_vertices: usize) -> Result<EdgeLabelSet> {
    let src = fs::read_to_string(yaml_path).map_err(|e| Error::io(yaml_path, e))?;
    abc_edge_labels(&src, n_vertices)
}
