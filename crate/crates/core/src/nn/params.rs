//! Flat parameter vectors with a named segment layout.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegmentTag {
    /// Weight matrix or convolution kernel (prunable).
    Weight,
    Bias,
    /// Affine parameters of a normalization layer.
    Norm,
}

impl SegmentTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SegmentTag::Weight => "weight",
            SegmentTag::Bias => "bias",
            SegmentTag::Norm => "norm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "weight" => Some(SegmentTag::Weight),
            "bias" => Some(SegmentTag::Bias),
            "norm" => Some(SegmentTag::Norm),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub tag: SegmentTag,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, non-overlapping segments covering a flat vector.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment at the current end of the layout.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, tag: SegmentTag) {
        let seg = Segment {
            name: name.into(),
            offset: self.total,
            shape,
            tag,
        };
        self.total += seg.len();
        self.segments.push(seg);
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// A model's parameters as one flat vector plus its layout.
#[derive(Clone, Debug)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.same_layout(other) && self.values == other.values
    }
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::Layout(format!(
                "layout holds {} values, got {}",
                layout.total(),
                values.len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.total()];
        ParamVector { values, layout }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|s| &self.values[s.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.find(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Layout(format!(
                "{} vs {} parameters with different segments",
                self.len(),
                other.len()
            )))
        }
    }

    fn zip_map(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
        self.check_layout(other)?;
        Ok(ParamVector {
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
            layout: self.layout.clone(),
        })
    }

    /// `a·self + b·other`
    pub fn lincomb(&self, a: f64, other: &ParamVector, b: f64) -> Result<ParamVector> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_map(other, |x, y| x + y)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_map(other, |x, y| x - y)
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        ParamVector {
            values: self.values.iter().map(|v| v * c).collect(),
            layout: self.layout.clone(),
        }
    }

    /// `self += c · other`
    pub fn axpy(&mut self, c: f64, other: &ParamVector) -> Result<()> {
        self.check_layout(other)?;
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v += c * o;
        }
        Ok(())
    }

    /// Linear interpolation `t·self + (1−t)·other`.
    pub fn interpolate(&self, other: &ParamVector, t: f64) -> Result<ParamVector> {
        self.lincomb(t, other, 1.0 - t)
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_layout(other)?;
        Ok(kernels::dot(&self.values, &other.values))
    }

    pub fn norm(&self) -> f64 {
        kernels::norm2(&self.values)
    }

    pub fn distance(&self, other: &ParamVector) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Copies every segment whose name starts with `prefix` from `source`.
    /// Segments are matched by name and must agree in shape.
    pub fn transplant(&mut self, source: &ParamVector, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for seg in source.layout.segments().iter().filter(|s| s.name.starts_with(prefix)) {
            let dst = self.layout.find(&seg.name).ok_or_else(|| {
                Error::Layout(format!("segment {} missing in target", seg.name))
            })?;
            if dst.shape != seg.shape {
                return Err(Error::Layout(format!("segment {} changes shape", seg.name)));
            }
            let range = dst.range();
            self.values[range].copy_from_slice(&source.values[seg.range()]);
            copied += 1;
        }
        Ok(copied)
    }
}
