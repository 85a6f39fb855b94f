//! Training signals, their shift geometry, and filter offset patterns.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CaolError, Result};

/// Layout of a flattened signal. Grid signals are stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Line { n: usize },
    Grid { h: usize, w: usize },
}

impl Geometry {
    pub fn len(&self) -> usize {
        match *self {
            Geometry::Line { n } => n,
            Geometry::Grid { h, w } => h * w,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Geometry::Line { n } => write!(f, "Line({n})"),
            Geometry::Grid { h, w } => write!(f, "Grid({h}x{w})"),
        }
    }
}

/// A real-valued training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    values: Vec<f64>,
    geometry: Geometry,
}

impl Signal {
    pub fn new(values: Vec<f64>, geometry: Geometry) -> Result<Self> {
        if let Geometry::Grid { h, w } = geometry {
            if h == 0 || w == 0 {
                return Err(CaolError::InvalidSignal(format!("grid {h}x{w} has an empty axis")));
            }
            if h.checked_mul(w).is_none() {
                return Err(CaolError::DimensionOverflow(format!("{h}x{w}")));
            }
        }
        if values.is_empty() {
            return Err(CaolError::InvalidSignal("signal has no samples".into()));
        }
        if values.len() != geometry.len() {
            return Err(CaolError::dims("signal", geometry.len(), values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CaolError::InvalidSignal(format!("value {i} is not finite")));
        }
        Ok(Signal { values, geometry })
    }

    pub fn line(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Signal::new(values, Geometry::Line { n })
    }

    pub fn grid(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        Signal::new(values, Geometry::Grid { h, w })
    }

    /// Unit impulse at position `at` of a length-`n` line signal.
    pub fn impulse(n: usize, at: usize) -> Result<Self> {
        if at >= n {
            return Err(CaolError::InvalidSignal(format!("impulse position {at} >= {n}")));
        }
        let mut values = vec![0.0; n];
        values[at] = 1.0;
        Signal::line(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Replaces the sample values while keeping the geometry.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Signal::new(values, self.geometry)
    }
}

/// A cyclic shift amount, one component per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Offset {
    Line(usize),
    Grid { dy: usize, dx: usize },
}

impl fmt::Display for Offset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Offset::Line(r) => write!(f, "{r}"),
            Offset::Grid { dy, dx } => write!(f, "({dy},{dx})"),
        }
    }
}

/// The ordered set of shifts that make up the support of a length-R filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffsetPattern {
    offsets: Vec<Offset>,
}

impl OffsetPattern {
    pub fn new(offsets: Vec<Offset>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(CaolError::InvalidPattern("pattern has no offsets".into()));
        }
        let line = matches!(offsets[0], Offset::Line(_));
        if offsets.iter().any(|o| matches!(o, Offset::Line(_)) != line) {
            return Err(CaolError::InvalidPattern("mixed line and grid offsets".into()));
        }
        let mut seen = HashSet::with_capacity(offsets.len());
        for o in &offsets {
            if !seen.insert(*o) {
                return Err(CaolError::InvalidPattern(format!("duplicate offset {o}")));
            }
        }
        Ok(OffsetPattern { offsets })
    }

    /// Canonical line pattern `0, 1, ..., r - 1`.
    pub fn line(r: usize) -> Result<Self> {
        OffsetPattern::new((0..r).map(Offset::Line).collect())
    }

    /// Row-major `h x w` window of grid offsets.
    pub fn window(h: usize, w: usize) -> Result<Self> {
        let offsets = (0..h)
            .flat_map(|dy| (0..w).map(move |dx| Offset::Grid { dy, dx }))
            .collect();
        OffsetPattern::new(offsets)
    }

    /// Square window of side `sqrt(r)`; fails when `r` is not a perfect square.
    pub fn square(r: usize) -> Result<Self> {
        let side = (r as f64).sqrt().round() as usize;
        if side * side != r {
            return Err(CaolError::InvalidPattern(format!("{r} is not a perfect square")));
        }
        OffsetPattern::window(side, side)
    }

    /// Canonical pattern of size `r` for signals with the given geometry.
    pub fn canonical(geometry: Geometry, r: usize) -> Result<Self> {
        match geometry {
            Geometry::Line { .. } => OffsetPattern::line(r),
            Geometry::Grid { .. } => OffsetPattern::square(r),
        }
    }

    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    /// Filter size R.
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Checks every offset is in range for `geometry` and that offsets stay distinct
    /// once reduced onto it.
    pub fn validate_for(&self, geometry: Geometry) -> Result<()> {
        for o in &self.offsets {
            let ok = match (*o, geometry) {
                (Offset::Line(r), Geometry::Line { n }) => r < n,
                (Offset::Grid { dy, dx }, Geometry::Grid { h, w }) => dy < h && dx < w,
                _ => false,
            };
            if !ok {
                return Err(CaolError::InvalidOffset {
                    offset: o.to_string(),
                    geometry: geometry.to_string(),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for OffsetPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, o) in self.offsets.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{o}")?;
        }
        write!(f, "]")
    }
}
