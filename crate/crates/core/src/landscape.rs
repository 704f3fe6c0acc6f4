//! Two-dimensional parameter planes, metric grids and linear paths.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::eval_outputs;
use crate::error::{Error, Result};
use crate::nn::{ModelState, ParamVector};
use crate::ops;
use crate::probe::{extract_features, linear_probe, ProbeConfig};
use crate::tensor::Tensor;

/// Batch size of the statistics calibration pass.
pub const CALIBRATION_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub name: String,
    pub coords: (f64, f64),
    pub checkpoint: ParamVector,
}

/// The affine plane `base + λ1·v1 + λ2·v2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub base: ParamVector,
    pub v1: ParamVector,
    pub v2: ParamVector,
    pub anchors: Vec<Anchor>,
    pub orthogonalized: bool,
}

impl Plane {
    fn from_three(base: &ParamVector, a: &ParamVector, b: &ParamVector, names: [&str; 3]) -> Result<Plane> {
        let v1 = a.sub(base)?;
        let v2 = b.sub(base)?;
        let anchor = |name: &str, coords, p: &ParamVector| Anchor {
            name: name.into(),
            coords,
            checkpoint: p.clone(),
        };
        Ok(Plane {
            anchors: vec![
                anchor(names[0], (0.0, 0.0), base),
                anchor(names[1], (1.0, 0.0), a),
                anchor(names[2], (0.0, 1.0), b),
            ],
            base: base.clone(),
            v1,
            v2,
            orthogonalized: false,
        })
    }

    pub fn point(&self, l1: f64, l2: f64) -> ParamVector {
        let mut p = self.base.clone();
        let (v1, v2) = (self.v1.values(), self.v2.values());
        for (i, x) in p.values_mut().iter_mut().enumerate() {
            *x += l1 * v1[i] + l2 * v2[i];
        }
        p
    }

    pub fn anchor(&self, name: &str) -> Option<&Anchor> {
        self.anchors.iter().find(|a| a.name == name)
    }

    /// Largest coordinate deviation between an anchor's point and its
    /// checkpoint.
    pub fn anchor_error(&self, name: &str) -> Option<f64> {
        let a = self.anchor(name)?;
        let p = self.point(a.coords.0, a.coords.1);
        Some(
            p.values()
                .iter()
                .zip(a.checkpoint.values())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        )
    }

    /// `|⟨v1, v2⟩| / (‖v1‖‖v2‖)`
    pub fn cosine(&self) -> f64 {
        let d = self.v1.dot(&self.v2).unwrap_or(f64::NAN);
        d.abs() / (self.v1.norm() * self.v2.norm())
    }

    /// Distance between two anchors measured in plane coordinates scaled
    /// by the basis norms (meaningful for orthogonal bases).
    pub fn plane_distance(&self, a: &str, b: &str) -> Option<f64> {
        let (a, b) = (self.anchor(a)?, self.anchor(b)?);
        let d1 = (a.coords.0 - b.coords.0) * self.v1.norm();
        let d2 = (a.coords.1 - b.coords.1) * self.v2.norm();
        Some((d1 * d1 + d2 * d2).sqrt())
    }

    /// Norm of the orthogonal projection of `θ_a − θ_b` onto the plane.
    pub fn projected_distance(&self, a: &str, b: &str) -> Result<f64> {
        let (pa, pb) = match (self.anchor(a), self.anchor(b)) {
            (Some(x), Some(y)) => (&x.checkpoint, &y.checkpoint),
            _ => return Err(Error::Contract(format!("unknown anchor {a} or {b}"))),
        };
        let d = pa.sub(pb)?;
        let (u1, u2) = orthonormal_pair(&self.v1, &self.v2)?;
        let (c1, c2) = (d.dot(&u1)?, d.dot(&u2)?);
        Ok((c1 * c1 + c2 * c2).sqrt())
    }
}

fn orthonormal_pair(v1: &ParamVector, v2: &ParamVector) -> Result<(ParamVector, ParamVector)> {
    let u2 = gram_schmidt(v1, v2)?;
    Ok((v1.scale(1.0 / v1.norm()), u2.scale(1.0 / u2.norm())))
}

fn gram_schmidt(v1: &ParamVector, v2: &ParamVector) -> Result<ParamVector> {
    let n1 = v1.dot(v1)?;
    if n1 == 0.0 {
        return Err(Error::Degenerate("first plane direction is zero".into()));
    }
    let u2 = v2.lincomb(1.0, v1, -v2.dot(v1)? / n1)?;
    if u2.norm() <= 1e-12 * v2.norm() || v2.norm() == 0.0 {
        return Err(Error::Degenerate("plane directions are collinear".into()));
    }
    Ok(u2)
}

/// Plane through the teacher spanned by the fresh draw and the student
/// trained from it: anchors `teacher (0,0)`, `fresh_init (1,0)`,
/// `trained_far (0,1)`.
pub fn non_local_view(theta_t: &ParamVector, s1_init: &ParamVector, s1_star: &ParamVector) -> Result<Plane> {
    Plane::from_three(theta_t, s1_init, s1_star, ["teacher", "fresh_init", "trained_far"])
}

/// Plane through the teacher spanned by the locally and non-locally
/// trained students: anchors `teacher`, `trained_local (1,0)`,
/// `trained_far (0,1)`.
pub fn shared_view(theta_t: &ParamVector, local_star: &ParamVector, far_star: &ParamVector) -> Result<Plane> {
    Plane::from_three(theta_t, local_star, far_star, ["teacher", "trained_local", "trained_far"])
}

/// Gram–Schmidt keeping `v1`: `u2 = v2 − (⟨v2,u1⟩/⟨u1,u1⟩)u1`. Anchors are
/// re-expressed as coordinates of their in-plane projections.
pub fn orthogonalize(plane: &Plane) -> Result<Plane> {
    let u1 = plane.v1.clone();
    let u2 = gram_schmidt(&plane.v1, &plane.v2)?;
    let (n1, n2) = (u1.dot(&u1)?, u2.dot(&u2)?);
    let mut anchors = Vec::with_capacity(plane.anchors.len());
    for a in &plane.anchors {
        let d = a.checkpoint.sub(&plane.base)?;
        anchors.push(Anchor {
            name: a.name.clone(),
            coords: (d.dot(&u1)? / n1, d.dot(&u2)? / n2),
            checkpoint: a.checkpoint.clone(),
        });
    }
    Ok(Plane {
        base: plane.base.clone(),
        v1: u1,
        v2: u2,
        anchors,
        orthogonalized: true,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    DistillKl,
    ProbeAccuracy,
    EncoderKl,
    ParamNorm,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::DistillKl => "distill_kl",
            Metric::ProbeAccuracy => "probe_accuracy",
            Metric::EncoderKl => "encoder_kl",
            Metric::ParamNorm => "param_norm",
        }
    }
}

/// Evenly spaced samples `lo + (hi − lo)·i/(n − 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn samples(&self) -> Vec<f64> {
        match self.n {
            0 => Vec::new(),
            1 => vec![self.lo],
            n => (0..n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64).collect(),
        }
    }
}

/// Everything needed to evaluate metrics at parameter points.
///
/// Models with batch normalization are evaluated after one calibration
/// pass over `inputs`; the teacher reference is calibrated the same way,
/// so the teacher point reproduces the reference exactly.
pub struct EvalContext<'a> {
    pub teacher: &'a ModelState,
    pub inputs: &'a Tensor,
    pub probe: Option<(&'a Dataset, &'a Dataset, ProbeConfig)>,
    pub temperature_t: f64,
    pub temperature_s: f64,
}

/// Model outputs and embeddings of the calibrated teacher.
pub struct Reference {
    outputs: Tensor,
    embeddings: Tensor,
}

impl<'a> EvalContext<'a> {
    pub fn new(teacher: &'a ModelState, inputs: &'a Tensor) -> Self {
        EvalContext {
            teacher,
            inputs,
            probe: None,
            temperature_t: 1.0,
            temperature_s: 1.0,
        }
    }

    /// The teacher's architecture carrying `params`, calibrated.
    pub fn state_at(&self, params: &ParamVector) -> Result<ModelState> {
        let mut s = self.teacher.clone();
        s.set_params(params.clone())?;
        s.recalibrate(self.inputs, CALIBRATION_BATCH)?;
        Ok(s)
    }

    pub fn reference(&self) -> Result<Reference> {
        let t = self.state_at(self.teacher.params())?;
        Ok(Reference {
            outputs: ops::softmax(&eval_outputs(&t, self.inputs)?, self.temperature_t)?,
            embeddings: ops::softmax(&embed_all(&t, self.inputs)?, 1.0)?,
        })
    }

    pub fn evaluate(&self, metric: Metric, params: &ParamVector, reference: &Reference) -> Result<f64> {
        if metric == Metric::ParamNorm {
            return Ok(params.norm());
        }
        let s = self.state_at(params)?;
        match metric {
            Metric::ParamNorm => unreachable!(),
            Metric::DistillKl => {
                let p = ops::softmax(&eval_outputs(&s, self.inputs)?, self.temperature_s)?;
                ops::mean_kl(&reference.outputs, &p)
            }
            Metric::EncoderKl => {
                let p = ops::softmax(&embed_all(&s, self.inputs)?, 1.0)?;
                ops::mean_kl(&reference.embeddings, &p)
            }
            Metric::ProbeAccuracy => {
                let (train, test, cfg) = self
                    .probe
                    .as_ref()
                    .ok_or_else(|| Error::Contract("probe_accuracy needs labelled probe data".into()))?;
                let (a, b) = (extract_features(&s, train)?, extract_features(&s, test)?);
                Ok(linear_probe(&a, &b, cfg, 0)?.test_accuracy)
            }
        }
    }
}

fn embed_all(state: &ModelState, inputs: &Tensor) -> Result<Tensor> {
    let n = inputs.dim(0);
    let mut data = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + 512).min(n);
        data.extend(state.encode_eval(&inputs.slice_outer(start, end))?.into_data());
        start = end;
    }
    Tensor::new([n, state.spec().embed_dim], data)
}

/// Metric values over a grid; `values[i][j]` is at `(axis1[i], axis2[j])`,
/// `None` where evaluation failed.
#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    pub metric: Metric,
    pub axis1: Vec<f64>,
    pub axis2: Vec<f64>,
    pub values: Vec<Vec<Option<f64>>>,
    pub failures: Vec<String>,
}

impl LandscapeGrid {
    /// Grid point with the smallest value, `(i, j, value)`.
    pub fn argmin(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = *v {
                    if best.is_none_or(|b| v < b.2) {
                        best = Some((i, j, v));
                    }
                }
            }
        }
        best
    }

    pub fn value_at(&self, l1: f64, l2: f64) -> Option<f64> {
        let i = self.axis1.iter().position(|&a| a == l1)?;
        let j = self.axis2.iter().position(|&a| a == l2)?;
        self.values[i][j]
    }

    /// `(λ1, λ2, value)` in row-major order.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, Option<f64>)> + '_ {
        self.axis1
            .iter()
            .enumerate()
            .flat_map(move |(i, &a)| self.axis2.iter().enumerate().map(move |(j, &b)| (a, b, self.values[i][j])))
    }
}

/// Evaluates `metric` at every grid point. Failures are recorded per
/// point; the grid always completes.
pub fn eval_grid(plane: &Plane, axis1: &Axis, axis2: &Axis, metric: Metric, ctx: &EvalContext) -> Result<LandscapeGrid> {
    let reference = ctx.reference()?;
    let (a1, a2) = (axis1.samples(), axis2.samples());
    let points: Vec<(usize, usize)> = (0..a1.len()).flat_map(|i| (0..a2.len()).map(move |j| (i, j))).collect();
    let results: Vec<Result<f64>> = points
        .par_iter()
        .map(|&(i, j)| {
            let v = ctx.evaluate(metric, &plane.point(a1[i], a2[j]), &reference)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("{} = {v}", metric.as_str())))
            }
        })
        .collect();
    let mut values = vec![vec![None; a2.len()]; a1.len()];
    let mut failures = Vec::new();
    for (&(i, j), r) in points.iter().zip(results) {
        match r {
            Ok(v) => values[i][j] = Some(v),
            Err(e) => failures.push(format!("({}, {}): {e}", a1[i], a2[j])),
        }
    }
    Ok(LandscapeGrid {
        metric,
        axis1: a1,
        axis2: a2,
        values,
        failures,
    })
}

/// One-sided slopes of `metric` along the first direction through the
/// base point: `((f(−δ) − f(0))/δ, (f(δ) − f(0))/δ)`.
pub fn slope_probe(plane: &Plane, delta: f64, metric: Metric, ctx: &EvalContext) -> Result<(f64, f64)> {
    let r = ctx.reference()?;
    let f0 = ctx.evaluate(metric, &plane.point(0.0, 0.0), &r)?;
    let fm = ctx.evaluate(metric, &plane.point(-delta, 0.0), &r)?;
    let fp = ctx.evaluate(metric, &plane.point(delta, 0.0), &r)?;
    Ok(((fm - f0) / delta, (fp - f0) / delta))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathCurve {
    pub gammas: Vec<f64>,
    pub values: Vec<f64>,
    pub barrier: f64,
}

/// Evaluates `error` along `θ(γ) = γθ_a + (1−γ)θ_b` at `num_points`
/// evenly spaced γ and returns the largest excess over the straight line
/// between the endpoint values.
pub fn path_barrier(
    theta_a: &ParamVector,
    theta_b: &ParamVector,
    num_points: usize,
    error: impl Fn(&ParamVector) -> Result<f64> + Sync,
) -> Result<PathCurve> {
    if num_points < 3 {
        return Err(Error::Domain(format!("path needs at least 3 points, got {num_points}")));
    }
    theta_a.check_layout(theta_b)?;
    let gammas = Axis {
        lo: 0.0,
        hi: 1.0,
        n: num_points,
    }
    .samples();
    let values = gammas
        .par_iter()
        .map(|&g| error(&theta_a.lincomb(g, theta_b, 1.0 - g)?))
        .collect::<Result<Vec<f64>>>()?;
    let (eb, ea) = (values[0], values[num_points - 1]);
    let barrier = gammas
        .iter()
        .zip(&values)
        .map(|(&g, &v)| v - ((1.0 - g) * eb + g * ea))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(PathCurve { gammas, values, barrier })
}
