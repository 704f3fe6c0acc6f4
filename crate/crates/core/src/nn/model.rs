use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Layout, ParamVector, SegmentTag};
use super::spec::{EncoderKind, ModelSpec, NormKind};
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Gradients, Graph, Var};
use crate::ops::NORM_EPS;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Standard deviation of the truncated-normal head initialization.
pub const HEAD_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean and (unbiased) variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn fresh(name: String, channels: usize) -> Self {
        RunningStats {
            name,
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Parameter layout of `spec`, in forward order.
pub fn param_layout(spec: &ModelSpec) -> Result<Layout> {
    spec.validate()?;
    let mut l = Layout::new();
    let norm = |l: &mut Layout, prefix: &str, c: usize| {
        if spec.norm != NormKind::Identity {
            l.push(format!("{prefix}.g"), vec![c], SegmentTag::Norm);
            l.push(format!("{prefix}.b"), vec![c], SegmentTag::Norm);
        }
    };
    match spec.encoder {
        EncoderKind::Mlp => {
            let mut d = spec.input_numel();
            for (i, &w) in spec.encoder_widths.iter().enumerate() {
                l.push(format!("enc.{i}.lin.w"), vec![d, w], SegmentTag::Weight);
                l.push(format!("enc.{i}.lin.b"), vec![w], SegmentTag::Bias);
                norm(&mut l, &format!("enc.{i}.norm"), w);
                d = w;
            }
            l.push("enc.out.w", vec![d, spec.embed_dim], SegmentTag::Weight);
            l.push("enc.out.b", vec![spec.embed_dim], SegmentTag::Bias);
        }
        EncoderKind::SmallCnn | EncoderKind::SmallCnnResidual => {
            let mut c = spec.input_shape[0];
            for (i, &w) in spec.encoder_widths.iter().enumerate() {
                l.push(format!("enc.{i}.conv.w"), vec![w, c, 3, 3], SegmentTag::Weight);
                l.push(format!("enc.{i}.conv.b"), vec![w], SegmentTag::Bias);
                norm(&mut l, &format!("enc.{i}.norm"), w);
                if spec.encoder == EncoderKind::SmallCnnResidual {
                    l.push(format!("enc.{i}.res.conv.w"), vec![w, w, 3, 3], SegmentTag::Weight);
                    l.push(format!("enc.{i}.res.conv.b"), vec![w], SegmentTag::Bias);
                    norm(&mut l, &format!("enc.{i}.res.norm"), w);
                }
                c = w;
            }
        }
    }
    match spec.classes {
        Some(k) => {
            l.push("cls.w", vec![spec.embed_dim, k], SegmentTag::Weight);
            l.push("cls.b", vec![k], SegmentTag::Bias);
        }
        None => {
            let p = &spec.projector;
            let mut d = spec.embed_dim;
            for (j, &h) in p.hidden_dims.iter().enumerate() {
                l.push(format!("proj.{j}.w"), vec![d, h], SegmentTag::Weight);
                l.push(format!("proj.{j}.b"), vec![h], SegmentTag::Bias);
                d = h;
            }
            if p.use_first_linear {
                l.push("proj.bottleneck.w", vec![d, p.bottleneck_dim], SegmentTag::Weight);
                l.push("proj.bottleneck.b", vec![p.bottleneck_dim], SegmentTag::Bias);
                d = p.bottleneck_dim;
            }
            l.push("proj.last.v", vec![d, p.out_dim], SegmentTag::Weight);
        }
    }
    Ok(l)
}

/// Closed-form number of trainable parameters of `spec`.
pub fn param_count(spec: &ModelSpec) -> usize {
    let n = if spec.norm == NormKind::Identity { 0 } else { 2 };
    let mut total = 0;
    match spec.encoder {
        EncoderKind::Mlp => {
            let mut d = spec.input_numel();
            for &w in &spec.encoder_widths {
                total += d * w + w + n * w;
                d = w;
            }
            total += d * spec.embed_dim + spec.embed_dim;
        }
        EncoderKind::SmallCnn | EncoderKind::SmallCnnResidual => {
            let res = spec.encoder == EncoderKind::SmallCnnResidual;
            let mut c = spec.input_shape.first().copied().unwrap_or(0);
            for &w in &spec.encoder_widths {
                total += 9 * c * w + w + n * w;
                if res {
                    total += 9 * w * w + w + n * w;
                }
                c = w;
            }
        }
    }
    match spec.classes {
        Some(k) => total += spec.embed_dim * k + k,
        None => {
            let p = &spec.projector;
            let mut d = spec.embed_dim;
            for &h in &p.hidden_dims {
                total += d * h + h;
                d = h;
            }
            if p.use_first_linear {
                total += d * p.bottleneck_dim + p.bottleneck_dim;
                d = p.bottleneck_dim;
            }
            total += d * p.out_dim;
        }
    }
    total
}

fn fresh_stats(spec: &ModelSpec) -> Vec<RunningStats> {
    if spec.norm != NormKind::Batch {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (i, &w) in spec.encoder_widths.iter().enumerate() {
        out.push(RunningStats::fresh(format!("enc.{i}.norm"), w));
        if spec.encoder == EncoderKind::SmallCnnResidual {
            out.push(RunningStats::fresh(format!("enc.{i}.res.norm"), w));
        }
    }
    out
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let n = Normal::new(0.0, std).expect("positive std");
    loop {
        let v: f64 = n.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Parameters, normalization statistics and mode of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    spec: Arc<ModelSpec>,
    params: ParamVector,
    stats: Vec<RunningStats>,
    mode: Mode,
}

/// Nodes of one forward pass recorded on a [`Graph`].
#[derive(Debug)]
pub struct Trace {
    pub embedding: Var,
    /// Head output; `None` when only the encoder was traced.
    pub output: Option<Var>,
    /// One leaf per layout segment, in layout order.
    pub params: Vec<Var>,
    /// Batch statistics seen by each batch-norm layer (train mode only).
    pub batch_stats: Vec<BatchStats>,
}

impl Trace {
    /// Collects parameter gradients into a vector with the model's layout.
    pub fn gradient(&self, grads: &Gradients, layout: &Arc<Layout>) -> Result<ParamVector> {
        let mut values = Vec::with_capacity(layout.total());
        for (seg, &v) in layout.segments().iter().zip(&self.params) {
            values.extend(grads.get_or_zeros(v, seg.len()));
        }
        ParamVector::new(layout.clone(), values)
    }
}

/// Deterministic initialization: Kaiming-normal encoder weights,
/// truncated-normal head weights, zero biases, unit norm scales.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
    let layout = Arc::new(param_layout(spec)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.total()];
    for seg in layout.segments() {
        let dst = &mut values[seg.range()];
        match seg.tag {
            SegmentTag::Bias => {}
            SegmentTag::Norm => {
                if seg.name.ends_with(".g") {
                    dst.fill(1.0);
                }
            }
            SegmentTag::Weight if seg.name.starts_with("enc.") => {
                let fan_in = if seg.shape.len() == 4 {
                    seg.shape[1..].iter().product::<usize>()
                } else {
                    seg.shape[0]
                };
                let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                dst.iter_mut().for_each(|v| *v = n.sample(&mut rng));
            }
            SegmentTag::Weight => {
                dst.iter_mut().for_each(|v| *v = trunc_normal(&mut rng, HEAD_STD));
            }
        }
    }
    Ok(ModelState {
        spec: Arc::new(spec.clone()),
        params: ParamVector::new(layout, values)?,
        stats: fresh_stats(spec),
        mode: Mode::Train,
    })
}

impl ModelState {
    /// Rebuilds a state from a flat parameter vector with fresh running
    /// statistics (mean 0, variance 1), in train mode.
    pub fn unflatten(spec: &ModelSpec, params: ParamVector) -> Result<Self> {
        Self::from_parts(spec, params, fresh_stats(spec))
    }

    pub fn from_parts(spec: &ModelSpec, params: ParamVector, stats: Vec<RunningStats>) -> Result<Self> {
        let layout = param_layout(spec)?;
        if params.len() != layout.total() {
            return Err(Error::Layout(format!(
                "spec needs {} parameters, vector has {}",
                layout.total(),
                params.len()
            )));
        }
        if **params.layout() != layout {
            return Err(Error::Layout("parameter segments do not match the model spec".into()));
        }
        let expected = fresh_stats(spec);
        let compatible = expected.len() == stats.len()
            && expected
                .iter()
                .zip(&stats)
                .all(|(e, s)| e.name == s.name && e.mean.len() == s.mean.len() && e.var.len() == s.var.len());
        if !compatible {
            return Err(Error::Layout("running statistics do not match the model spec".into()));
        }
        Ok(ModelState {
            spec: Arc::new(spec.clone()),
            params,
            stats,
            mode: Mode::Train,
        })
    }

    pub fn flatten(&self) -> ParamVector {
        self.params.clone()
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.params.layout()
    }

    /// Replaces the parameters; the layout must match.
    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn set_stats(&mut self, stats: Vec<RunningStats>) -> Result<()> {
        if stats.len() != self.stats.len()
            || stats.iter().zip(&self.stats).any(|(a, b)| a.name != b.name || a.mean.len() != b.mean.len())
        {
            return Err(Error::Layout("running statistics do not match the model".into()));
        }
        self.stats = stats;
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Whether outputs in train mode depend on the batch composition.
    pub fn has_batch_norm(&self) -> bool {
        !self.stats.is_empty()
    }

    /// Exponential update of running statistics with momentum 0.1.
    pub fn update_running_stats(&mut self, batch: &[BatchStats]) -> Result<()> {
        if batch.len() != self.stats.len() {
            return Err(Error::Contract(format!(
                "{} batch statistics for {} normalization layers",
                batch.len(),
                self.stats.len()
            )));
        }
        for (rs, bs) in self.stats.iter_mut().zip(batch) {
            for (r, b) in rs.mean.iter_mut().zip(&bs.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in rs.var.iter_mut().zip(&bs.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        Ok(())
    }

    /// Replaces running statistics with the average batch statistics over
    /// `inputs` split into consecutive batches. No-op without batch norm.
    pub fn recalibrate(&mut self, inputs: &Tensor, batch_size: usize) -> Result<()> {
        if !self.has_batch_norm() {
            return Ok(());
        }
        let n = inputs.dim(0);
        let bs = batch_size.max(2);
        let mut sums: Vec<(Vec<f64>, Vec<f64>)> =
            self.stats.iter().map(|s| (vec![0.0; s.mean.len()], vec![0.0; s.var.len()])).collect();
        let mut batches = 0usize;
        let mut start = 0;
        while start < n {
            let mut end = (start + bs).min(n);
            if n - end < 2 {
                end = n;
            }
            let mut g = Graph::new();
            let trace = self.trace_with(&mut g, &inputs.slice_outer(start, end), false, false, Mode::Train)?;
            for ((m, v), st) in sums.iter_mut().zip(&trace.batch_stats) {
                m.iter_mut().zip(&st.mean).for_each(|(a, b)| *a += b);
                v.iter_mut().zip(&st.var).for_each(|(a, b)| *a += b);
            }
            batches += 1;
            start = end;
        }
        if batches == 0 {
            return Err(Error::Domain("recalibration needs at least two inputs".into()));
        }
        for (rs, (m, v)) in self.stats.iter_mut().zip(sums) {
            rs.mean = m.into_iter().map(|x| x / batches as f64).collect();
            rs.var = v.into_iter().map(|x| x / batches as f64).collect();
        }
        Ok(())
    }

    /// Records the full forward pass on `g` using the state's mode.
    pub fn trace(&self, g: &mut Graph, input: &Tensor, grad: bool) -> Result<Trace> {
        self.trace_with(g, input, grad, true, self.mode)
    }

    /// Records only the encoder.
    pub fn trace_encoder(&self, g: &mut Graph, input: &Tensor, grad: bool) -> Result<Trace> {
        self.trace_with(g, input, grad, false, self.mode)
    }

    fn trace_with(&self, g: &mut Graph, input: &Tensor, grad: bool, head: bool, mode: Mode) -> Result<Trace> {
        let mut b = Builder::new(self, g, grad, mode);
        let x = b.input(input)?;
        let embedding = b.encoder(x)?;
        let output = if head { Some(b.head(embedding)?) } else { None };
        Ok(Trace {
            embedding,
            output,
            params: b.vars,
            batch_stats: b.stats,
        })
    }

    /// Full model output `h(g(x))`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = self.trace(&mut g, input, false)?;
        Ok(g.value(t.output.expect("head traced")).clone())
    }

    /// Full output in eval mode regardless of the state's mode.
    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = self.trace_with(&mut g, input, false, true, Mode::Eval)?;
        Ok(g.value(t.output.expect("head traced")).clone())
    }

    /// Embeddings in eval mode regardless of the state's mode.
    pub fn encode_eval(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = self.trace_with(&mut g, input, false, false, Mode::Eval)?;
        Ok(g.value(t.embedding).clone())
    }

    pub fn encoder_forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = self.trace_encoder(&mut g, input, false)?;
        Ok(g.value(t.embedding).clone())
    }

    /// Applies the head (projector or classifier) to embeddings.
    pub fn bottleneck_forward(&self, embedding: &Tensor) -> Result<Tensor> {
        if embedding.rank() != 2 || embedding.last_dim() != self.spec.embed_dim {
            return Err(Error::Shape(format!(
                "embedding {:?} for embed_dim {}",
                embedding.shape(),
                self.spec.embed_dim
            )));
        }
        let mut g = Graph::new();
        let mut b = Builder::new(self, &mut g, false, self.mode);
        let e = b.g.constant(embedding.clone());
        let out = b.head(e)?;
        Ok(g.value(out).clone())
    }
}

pub fn encoder_forward(state: &ModelState, batch: &Tensor) -> Result<Tensor> {
    state.encoder_forward(batch)
}

pub fn bottleneck_forward(state: &ModelState, embedding: &Tensor) -> Result<Tensor> {
    state.bottleneck_forward(embedding)
}

struct Builder<'a> {
    state: &'a ModelState,
    g: &'a mut Graph,
    vars: Vec<Var>,
    stats: Vec<BatchStats>,
    norm_index: usize,
    mode: Mode,
}

impl<'a> Builder<'a> {
    fn new(state: &'a ModelState, g: &'a mut Graph, grad: bool, mode: Mode) -> Self {
        let mut vars = Vec::with_capacity(state.layout().segments().len());
        for seg in state.layout().segments() {
            let t = Tensor::new(seg.shape.clone(), state.params.values()[seg.range()].to_vec())
                .expect("segment shape matches its length");
            vars.push(if grad { g.param(t) } else { g.constant(t) });
        }
        Builder {
            state,
            g,
            vars,
            stats: Vec::new(),
            norm_index: 0,
            mode,
        }
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.state
            .layout()
            .segments()
            .iter()
            .position(|s| s.name == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Layout(format!("missing segment {name}")))
    }

    fn spec(&self) -> &ModelSpec {
        &self.state.spec
    }

    fn input(&mut self, input: &Tensor) -> Result<Var> {
        let spec = self.spec();
        let per = spec.input_numel();
        let b = input.shape().first().copied().unwrap_or(0);
        let matches = input.rank() >= 2
            && (input.shape()[1..] == spec.input_shape[..] || (input.rank() == 2 && input.dim(1) == per));
        if b == 0 || !matches {
            return Err(Error::Shape(format!(
                "batch {:?} for input shape {:?}",
                input.shape(),
                spec.input_shape
            )));
        }
        let shape = match spec.encoder {
            EncoderKind::Mlp => vec![b, per],
            _ => [&[b][..], &spec.input_shape[..]].concat(),
        };
        let x = self.g.constant(input.clone());
        self.g.reshape(x, shape)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let kind = self.spec().norm;
        if kind == NormKind::Identity {
            return Ok(x);
        }
        let gamma = self.p(&format!("{prefix}.g"))?;
        let beta = self.p(&format!("{prefix}.b"))?;
        if kind == NormKind::Layer {
            return self.g.layer_norm(x, gamma, beta, BN_EPS);
        }
        let i = self.norm_index;
        self.norm_index += 1;
        match self.mode {
            Mode::Train => {
                let (y, st) = self.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.stats.push(st);
                Ok(y)
            }
            Mode::Eval => {
                let rs = &self.state.stats[i];
                self.g.batch_norm_eval(x, gamma, beta, &rs.mean, &rs.var, BN_EPS)
            }
        }
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.p(w)?, self.p(b)?);
        let y = self.g.matmul(x, w)?;
        self.g.add_bias(y, b)
    }

    fn conv(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (w, b) = (self.p(&format!("{prefix}.w"))?, self.p(&format!("{prefix}.b"))?);
        self.g.conv2d(x, w, Some(b), 1, 1)
    }

    fn encoder(&mut self, mut x: Var) -> Result<Var> {
        let widths = self.spec().encoder_widths.clone();
        match self.spec().encoder {
            EncoderKind::Mlp => {
                for i in 0..widths.len() {
                    let h = self.linear(x, &format!("enc.{i}.lin.w"), &format!("enc.{i}.lin.b"))?;
                    let h = self.norm(h, &format!("enc.{i}.norm"))?;
                    x = self.g.relu(h);
                }
                self.linear(x, "enc.out.w", "enc.out.b")
            }
            kind => {
                for i in 0..widths.len() {
                    let h = self.conv(x, &format!("enc.{i}.conv"))?;
                    let h = self.norm(h, &format!("enc.{i}.norm"))?;
                    let mut h = self.g.relu(h);
                    if kind == EncoderKind::SmallCnnResidual {
                        let r = self.conv(h, &format!("enc.{i}.res.conv"))?;
                        let r = self.norm(r, &format!("enc.{i}.res.norm"))?;
                        let s = self.g.add(h, r)?;
                        h = self.g.relu(s);
                    }
                    x = self.g.max_pool2(h)?;
                }
                self.g.global_avg_pool(x)
            }
        }
    }

    fn head(&mut self, e: Var) -> Result<Var> {
        if self.spec().classes.is_some() {
            return self.linear(e, "cls.w", "cls.b");
        }
        let p = self.spec().projector.clone();
        let mut x = e;
        for j in 0..p.hidden_dims.len() {
            let h = self.linear(x, &format!("proj.{j}.w"), &format!("proj.{j}.b"))?;
            x = if p.linear_hidden { h } else { self.g.gelu(h) };
        }
        if p.use_first_linear {
            x = self.linear(x, "proj.bottleneck.w", "proj.bottleneck.b")?;
        }
        if p.use_feature_norm {
            x = self.g.l2_normalize(x, NORM_EPS);
        }
        let mut v = self.p("proj.last.v")?;
        if p.use_weight_norm {
            v = self.g.normalize_columns(v, NORM_EPS)?;
        }
        self.g.matmul(x, v)
    }
}
