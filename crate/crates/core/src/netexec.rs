//! Deterministic forward evaluation of sequential dense/conv networks.
//!
//! Pruning is represented by a `kept_mask` on a layer's output units (masked
//! outputs are zeroed after the nonlinearity) plus replaced successor weights.
//! Tensors are never shrunk in memory; size accounting honours the masks.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::bundle::{
    conv_out, Bundle, BundleManifest, DType, DataRefs, LayerDescriptor, LayerKind, Nonlinearity, TensorRecord,
    FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix};
use crate::objective::Groups;

/// Batch of spatial feature maps, `[n, c, h, w]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Model(format!(
                "feature map data length {} does not match [{n}, {c}, {h}, {w}]",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    #[inline]
    pub fn idx(&self, i: usize, ch: usize, y: usize, x: usize) -> usize {
        ((i * self.c + ch) * self.h + y) * self.w + x
    }

    pub fn get(&self, i: usize, ch: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(i, ch, y, x)]
    }

    /// `[n, c·h·w]`, channel-major within a row.
    pub fn flatten(&self) -> Matrix {
        Matrix::new(self.n, self.c * self.h * self.w, self.data.clone()).expect("consistent shape")
    }
}

/// Input or intermediate activations of a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Flat(Matrix),
    Maps(FeatureMap),
}

impl Features {
    pub fn n(&self) -> usize {
        match self {
            Features::Flat(m) => m.rows(),
            Features::Maps(f) => f.n,
        }
    }

    pub fn shape(&self) -> InputShape {
        match self {
            Features::Flat(m) => InputShape::Flat(m.cols()),
            Features::Maps(f) => InputShape::Spatial(f.c, f.h, f.w),
        }
    }

    pub fn flatten(&self) -> Matrix {
        match self {
            Features::Flat(m) => m.clone(),
            Features::Maps(f) => f.flatten(),
        }
    }

    pub fn select_samples(&self, idx: &[usize]) -> Features {
        match self {
            Features::Flat(m) => Features::Flat(m.select_rows(idx)),
            Features::Maps(f) => {
                let per = f.c * f.h * f.w;
                let mut data = Vec::with_capacity(idx.len() * per);
                for &i in idx {
                    data.extend_from_slice(&f.data[i * per..(i + 1) * per]);
                }
                Features::Maps(FeatureMap {
                    n: idx.len(),
                    c: f.c,
                    h: f.h,
                    w: f.w,
                    data,
                })
            }
        }
    }
}

/// Per-sample shape of a layer's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InputShape {
    Flat(usize),
    Spatial(usize, usize, usize),
}

impl InputShape {
    pub fn flat_len(self) -> usize {
        match self {
            InputShape::Flat(d) => d,
            InputShape::Spatial(c, h, w) => c * h * w,
        }
    }

    /// Number of units a mask over this shape covers (features or channels).
    pub fn units(self) -> usize {
        match self {
            InputShape::Flat(d) => d,
            InputShape::Spatial(c, _, _) => c,
        }
    }
}

/// Conv filter bank `[out_c, in_c, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeight {
    pub out_c: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub data: Vec<f64>,
}

impl ConvWeight {
    pub fn new(out_c: usize, in_c: usize, kh: usize, kw: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != out_c * in_c * kh * kw {
            return Err(Error::Model(format!(
                "conv weight length {} does not match [{out_c}, {in_c}, {kh}, {kw}]",
                data.len()
            )));
        }
        Ok(Self {
            out_c,
            in_c,
            kh,
            kw,
            data,
        })
    }

    #[inline]
    pub fn get(&self, o: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((o * self.in_c + c) * self.kh + y) * self.kw + x]
    }

    /// `[in_c·kh·kw, out_c]`; row `c·kh·kw + y·kw + x` matches [`im2col`] columns.
    pub fn to_matrix(&self) -> Matrix {
        let g = self.kh * self.kw;
        let mut m = Matrix::zeros(self.in_c * g, self.out_c);
        for o in 0..self.out_c {
            for c in 0..self.in_c {
                for y in 0..self.kh {
                    for x in 0..self.kw {
                        m.set(c * g + y * self.kw + x, o, self.get(o, c, y, x));
                    }
                }
            }
        }
        m
    }

    /// Inverse of [`ConvWeight::to_matrix`].
    pub fn from_matrix(m: &Matrix, in_c: usize, kh: usize, kw: usize) -> Result<Self> {
        let g = kh * kw;
        if m.rows() != in_c * g {
            return Err(Error::DimensionMismatch {
                op: "conv weight from matrix",
                left: m.shape(),
                right: (in_c * g, m.cols()),
            });
        }
        let out_c = m.cols();
        let mut data = vec![0.0; out_c * in_c * g];
        for o in 0..out_c {
            for c in 0..in_c {
                for y in 0..kh {
                    for x in 0..kw {
                        data[((o * in_c + c) * kh + y) * kw + x] = m.get(c * g + y * kw + x, o);
                    }
                }
            }
        }
        Self::new(out_c, in_c, kh, kw, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    /// Weight `[n_in, n_out]`.
    Dense {
        weight: Matrix,
    },
    Conv2d {
        weight: ConvWeight,
        stride: usize,
        padding: usize,
    },
    MaxPool2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub op: LayerOp,
    pub bias: Option<Vec<f64>>,
    pub nonlinearity: Nonlinearity,
    pub prunable: bool,
    pub kept_mask: Option<Vec<bool>>,
}

impl LayerSpec {
    pub fn dense(name: impl Into<String>, weight: Matrix, bias: Option<Vec<f64>>, nonlinearity: Nonlinearity) -> Self {
        Self {
            name: name.into(),
            op: LayerOp::Dense { weight },
            bias,
            nonlinearity,
            prunable: false,
            kept_mask: None,
        }
    }

    pub fn conv(
        name: impl Into<String>,
        weight: ConvWeight,
        bias: Option<Vec<f64>>,
        stride: usize,
        padding: usize,
        nonlinearity: Nonlinearity,
    ) -> Self {
        Self {
            name: name.into(),
            op: LayerOp::Conv2d {
                weight,
                stride,
                padding,
            },
            bias,
            nonlinearity,
            prunable: false,
            kept_mask: None,
        }
    }

    pub fn max_pool(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            op: LayerOp::MaxPool2,
            bias: None,
            nonlinearity: Nonlinearity::None,
            prunable: false,
            kept_mask: None,
        }
    }

    pub fn prunable(mut self, yes: bool) -> Self {
        self.prunable = yes;
        self
    }

    pub fn kind(&self) -> LayerKind {
        match self.op {
            LayerOp::Dense { .. } => LayerKind::Dense,
            LayerOp::Conv2d { .. } => LayerKind::Conv2d,
            LayerOp::MaxPool2 => LayerKind::Maxpool2,
        }
    }

    pub fn is_weighted(&self) -> bool {
        !matches!(self.op, LayerOp::MaxPool2)
    }

    /// Output neurons or channels (0 for pooling).
    pub fn units(&self) -> usize {
        match &self.op {
            LayerOp::Dense { weight } => weight.cols(),
            LayerOp::Conv2d { weight, .. } => weight.out_c,
            LayerOp::MaxPool2 => 0,
        }
    }

    pub fn kept_count(&self) -> usize {
        match &self.kept_mask {
            Some(m) => m.iter().filter(|k| **k).count(),
            None => self.units(),
        }
    }

    /// Weight as the matrix multiplying this layer's (im2col'd) input.
    pub fn weight_matrix(&self) -> Option<Matrix> {
        match &self.op {
            LayerOp::Dense { weight } => Some(weight.clone()),
            LayerOp::Conv2d { weight, .. } => Some(weight.to_matrix()),
            LayerOp::MaxPool2 => None,
        }
    }

    fn output_shape(&self, input: InputShape) -> Result<InputShape> {
        let chain = |detail: String| Error::Model(format!("layer {:?}: {detail}", self.name));
        match (&self.op, input) {
            (LayerOp::Dense { weight }, s) => {
                if weight.rows() != s.flat_len() {
                    return Err(chain(format!(
                        "dense weight expects {} inputs, got {}",
                        weight.rows(),
                        s.flat_len()
                    )));
                }
                Ok(InputShape::Flat(weight.cols()))
            }
            (
                LayerOp::Conv2d {
                    weight,
                    stride,
                    padding,
                },
                InputShape::Spatial(c, h, w),
            ) => {
                if c != weight.in_c {
                    return Err(chain(format!("conv expects {} channels, got {c}", weight.in_c)));
                }
                let oh = conv_out(h, weight.kh, *stride, *padding).map_err(Error::Geometry)?;
                let ow = conv_out(w, weight.kw, *stride, *padding).map_err(Error::Geometry)?;
                Ok(InputShape::Spatial(weight.out_c, oh, ow))
            }
            (LayerOp::MaxPool2, InputShape::Spatial(c, h, w)) => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Geometry(format!(
                        "layer {:?}: maxpool2 needs even spatial dims, got {h}x{w}",
                        self.name
                    )));
                }
                Ok(InputShape::Spatial(c, h / 2, w / 2))
            }
            (_, InputShape::Flat(_)) => Err(chain("spatial layer after a flat feature map".into())),
        }
    }
}

/// Sequential network with a fixed per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub input_shape: InputShape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkModel {
    pub fn new(input_shape: InputShape, layers: Vec<LayerSpec>) -> Result<Self> {
        let model = Self { input_shape, layers };
        model.validate()?;
        Ok(model)
    }

    /// Shape chain, biases, masks, and prunability rules.
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(shape)?;
            if let Some(b) = &layer.bias {
                if b.len() != layer.units() {
                    return Err(Error::Model(format!(
                        "layer {:?}: bias length {} != {} units",
                        layer.name,
                        b.len(),
                        layer.units()
                    )));
                }
            }
            if let Some(m) = &layer.kept_mask {
                if m.len() != layer.units() || !layer.is_weighted() {
                    return Err(Error::Model(format!(
                        "layer {:?}: kept_mask length {} != {} units",
                        layer.name,
                        m.len(),
                        layer.units()
                    )));
                }
            }
            if layer.prunable && self.successor(i).is_none() {
                return Err(Error::Model(format!(
                    "layer {:?} is prunable but has no weighted successor",
                    layer.name
                )));
            }
        }
        Ok(())
    }

    /// Index of the next weighted layer after `i`.
    pub fn successor(&self, i: usize) -> Option<usize> {
        if !self.layers.get(i)?.is_weighted() {
            return None;
        }
        (i + 1..self.layers.len()).find(|&j| self.layers[j].is_weighted())
    }

    /// Index of the previous weighted layer before `i`.
    pub fn predecessor(&self, i: usize) -> Option<usize> {
        (0..i).rev().find(|&j| self.layers[j].is_weighted())
    }

    pub fn prunable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].prunable).collect()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Per-sample input shape of every layer.
    pub fn input_shapes(&self) -> Result<Vec<InputShape>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut shape = self.input_shape;
        for layer in &self.layers {
            out.push(shape);
            shape = layer.output_shape(shape)?;
        }
        Ok(out)
    }

    /// Replaces layer `i`'s weights from a matrix in [`LayerSpec::weight_matrix`] layout.
    pub fn set_weight_matrix(&mut self, i: usize, m: &Matrix) -> Result<()> {
        let layer = &mut self.layers[i];
        match &mut layer.op {
            LayerOp::Dense { weight } => {
                if weight.shape() != m.shape() {
                    return Err(Error::DimensionMismatch {
                        op: "replace dense weight",
                        left: weight.shape(),
                        right: m.shape(),
                    });
                }
                *weight = m.clone();
            }
            LayerOp::Conv2d { weight, .. } => {
                let new = ConvWeight::from_matrix(m, weight.in_c, weight.kh, weight.kw)?;
                if new.out_c != weight.out_c {
                    return Err(Error::DimensionMismatch {
                        op: "replace conv weight",
                        left: (weight.in_c * weight.kh * weight.kw, weight.out_c),
                        right: m.shape(),
                    });
                }
                *weight = new;
            }
            LayerOp::MaxPool2 => return Err(Error::Model(format!("layer {:?} has no weights", layer.name))),
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &Features) -> Result<Matrix> {
        Ok(self.run(inputs, false)?.0)
    }
}

pub fn dense_forward(input: &Matrix, layer: &LayerSpec) -> Result<Matrix> {
    let LayerOp::Dense { weight } = &layer.op else {
        return Err(Error::Model(format!("layer {:?} is not dense", layer.name)));
    };
    let mut out = matmul(input, weight)?;
    let cols = out.cols();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        if let Some(b) = &layer.bias {
            for (v, bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        activate(row, layer.nonlinearity);
        if let Some(mask) = &layer.kept_mask {
            for (j, v) in row.iter_mut().enumerate().take(cols) {
                if !mask[j] {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

fn activate(v: &mut [f64], nl: Nonlinearity) {
    if nl == Nonlinearity::Relu {
        for x in v.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
    }
}

/// Direct cross-correlation (no im2col), with bias, nonlinearity and mask.
pub fn conv2d_forward(input: &FeatureMap, layer: &LayerSpec) -> Result<FeatureMap> {
    let LayerOp::Conv2d {
        weight,
        stride,
        padding,
    } = &layer.op
    else {
        return Err(Error::Model(format!("layer {:?} is not conv2d", layer.name)));
    };
    if input.c != weight.in_c {
        return Err(Error::Model(format!(
            "layer {:?}: conv expects {} channels, got {}",
            layer.name, weight.in_c, input.c
        )));
    }
    let (s, p) = (*stride, *padding as isize);
    let oh = conv_out(input.h, weight.kh, s, *padding).map_err(Error::Geometry)?;
    let ow = conv_out(input.w, weight.kw, s, *padding).map_err(Error::Geometry)?;
    let mut out = FeatureMap::zeros(input.n, weight.out_c, oh, ow);
    for i in 0..input.n {
        for o in 0..weight.out_c {
            let masked = layer.kept_mask.as_ref().is_some_and(|m| !m[o]);
            let b = layer.bias.as_ref().map_or(0.0, |b| b[o]);
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = b;
                    for c in 0..input.c {
                        for ky in 0..weight.kh {
                            let iy = (y * s + ky) as isize - p;
                            if iy < 0 || iy >= input.h as isize {
                                continue;
                            }
                            for kx in 0..weight.kw {
                                let ix = (x * s + kx) as isize - p;
                                if ix < 0 || ix >= input.w as isize {
                                    continue;
                                }
                                acc += weight.get(o, c, ky, kx) * input.get(i, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    if layer.nonlinearity == Nonlinearity::Relu && acc < 0.0 {
                        acc = 0.0;
                    }
                    let at = out.idx(i, o, y, x);
                    out.data[at] = if masked { 0.0 } else { acc };
                }
            }
        }
    }
    Ok(out)
}

/// Patch matrix `[n·p, c·kh·kw]`: rows sample-major then patch row-major;
/// columns channel-major then `y·kw + x`. Padding is materialized as zeros.
pub fn im2col(input: &FeatureMap, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Matrix> {
    let oh = conv_out(input.h, kh, stride, pad).map_err(Error::Geometry)?;
    let ow = conv_out(input.w, kw, stride, pad).map_err(Error::Geometry)?;
    let g = kh * kw;
    let cols = input.c * g;
    let mut data = vec![0.0; input.n * oh * ow * cols];
    let p = pad as isize;
    for i in 0..input.n {
        for y in 0..oh {
            for x in 0..ow {
                let row = (i * oh + y) * ow + x;
                let base = row * cols;
                for c in 0..input.c {
                    for ky in 0..kh {
                        let iy = (y * stride + ky) as isize - p;
                        if iy < 0 || iy >= input.h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (x * stride + kx) as isize - p;
                            if ix < 0 || ix >= input.w as isize {
                                continue;
                            }
                            data[base + c * g + ky * kw + kx] = input.get(i, c, iy as usize, ix as usize);
                        }
                    }
                }
            }
        }
    }
    Matrix::new(input.n * oh * ow, cols, data)
}

pub fn max_pool2(input: &FeatureMap) -> Result<FeatureMap> {
    if !input.h.is_multiple_of(2) || !input.w.is_multiple_of(2) {
        return Err(Error::Geometry(format!(
            "maxpool2 needs even spatial dims, got {}x{}",
            input.h, input.w
        )));
    }
    let (oh, ow) = (input.h / 2, input.w / 2);
    let mut out = FeatureMap::zeros(input.n, input.c, oh, ow);
    for i in 0..input.n {
        for c in 0..input.c {
            for y in 0..oh {
                for x in 0..ow {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| input.get(i, c, 2 * y + dy, 2 * x + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let at = out.idx(i, c, y, x);
                    out.data[at] = m;
                }
            }
        }
    }
    Ok(out)
}

/// What a prunable layer feeds into its successor, arranged for selection.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    pub layer: usize,
    pub successor: usize,
    /// `A^ℓ`: `[n, n_ℓ]` (dense successor on flat input), `[n, c·h·w]` (dense
    /// successor after flatten), or `[n·p, c·kh·kw]` (conv successor).
    pub matrix: Matrix,
    /// One group per unit of the layer.
    pub groups: Groups,
}

/// Captures for every prunable layer, in layer order.
#[derive(Debug, Clone, Default)]
pub struct ActivationCapture {
    pub layers: Vec<LayerCapture>,
}

impl ActivationCapture {
    pub fn get(&self, layer: usize) -> Option<&LayerCapture> {
        self.layers.iter().find(|c| c.layer == layer)
    }
}

/// Forward pass that also captures every prunable layer's output as seen by
/// its successor.
pub fn forward_capture(model: &NetworkModel, inputs: &Features) -> Result<(Matrix, ActivationCapture)> {
    model.run(inputs, true)
}

fn successor_input(x: &Features, succ: &LayerSpec) -> Result<(Matrix, Groups)> {
    match (&succ.op, x) {
        (LayerOp::Dense { .. }, Features::Flat(m)) => Ok((m.clone(), Groups::singletons(m.cols()))),
        (LayerOp::Dense { .. }, Features::Maps(f)) => Ok((f.flatten(), Groups::blocks(f.c, f.h * f.w))),
        (
            LayerOp::Conv2d {
                weight,
                stride,
                padding,
            },
            Features::Maps(f),
        ) => Ok((
            im2col(f, weight.kh, weight.kw, *stride, *padding)?,
            Groups::blocks(f.c, weight.kh * weight.kw),
        )),
        _ => Err(Error::Model(format!("cannot feed layer {:?}", succ.name))),
    }
}

impl NetworkModel {
    fn run(&self, inputs: &Features, capture: bool) -> Result<(Matrix, ActivationCapture)> {
        if inputs.shape() != self.input_shape {
            return Err(Error::Model(format!(
                "input shape {:?} does not match model input {:?}",
                inputs.shape(),
                self.input_shape
            )));
        }
        let mut caps = ActivationCapture::default();
        let mut pending: Option<usize> = None;
        let mut x = inputs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.is_weighted() {
                if let Some(p) = pending.take() {
                    let (matrix, groups) = successor_input(&x, layer)?;
                    caps.layers.push(LayerCapture {
                        layer: p,
                        successor: i,
                        matrix,
                        groups,
                    });
                }
                if capture && layer.prunable {
                    pending = Some(i);
                }
            }
            x = match (&layer.op, x) {
                (LayerOp::Dense { .. }, feat) => Features::Flat(dense_forward(&feat.flatten(), layer)?),
                (LayerOp::Conv2d { .. }, Features::Maps(f)) => Features::Maps(conv2d_forward(&f, layer)?),
                (LayerOp::MaxPool2, Features::Maps(f)) => Features::Maps(max_pool2(&f)?),
                _ => return Err(Error::Model(format!("layer {:?} needs a spatial input", layer.name))),
            };
        }
        Ok((x.flatten(), caps))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

pub fn accuracy_from_logits(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            op: "logits vs labels",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = (0..logits.rows())
        .filter(|&i| argmax(logits.row(i)) == labels[i])
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate_accuracy(model: &NetworkModel, inputs: &Features, labels: &[usize]) -> Result<f64> {
    if inputs.n() != labels.len() {
        return Err(Error::DimensionMismatch {
            op: "inputs vs labels",
            left: (inputs.n(), 0),
            right: (labels.len(), 1),
        });
    }
    accuracy_from_logits(&model.forward(inputs)?, labels)
}

/// Kept input units of layer `i` (features for dense on flat input, channels otherwise).
fn kept_inputs(model: &NetworkModel, i: usize, shape: InputShape) -> usize {
    let layer = &model.layers[i];
    let pred_kept = model
        .predecessor(i)
        .map(|p| &model.layers[p])
        .and_then(|p| p.kept_mask.as_ref());
    let total = shape.units();
    let kept = pred_kept.map_or(total, |m| m.iter().filter(|k| **k).count());
    match (&layer.op, shape) {
        (LayerOp::Dense { .. }, InputShape::Spatial(_, h, w)) => kept * h * w,
        _ => kept,
    }
}

/// Parameters remaining after physically removing masked units.
pub fn count_params(model: &NetworkModel) -> Result<u64> {
    let shapes = model.input_shapes()?;
    let mut total = 0u64;
    for (i, layer) in model.layers.iter().enumerate() {
        let inp = kept_inputs(model, i, shapes[i]) as u64;
        let out = layer.kept_count() as u64;
        let bias = if layer.bias.is_some() { out } else { 0 };
        total += match &layer.op {
            LayerOp::Dense { .. } => inp * out + bias,
            LayerOp::Conv2d { weight, .. } => inp * out * (weight.kh * weight.kw) as u64 + bias,
            LayerOp::MaxPool2 => 0,
        };
    }
    Ok(total)
}

/// Floating-point operations per sample: twice the multiply-accumulates of
/// dense and conv layers.
pub fn count_flops(model: &NetworkModel) -> Result<u64> {
    let shapes = model.input_shapes()?;
    let mut macs = 0u64;
    for (i, layer) in model.layers.iter().enumerate() {
        let inp = kept_inputs(model, i, shapes[i]) as u64;
        let out = layer.kept_count() as u64;
        macs += match (&layer.op, layer.output_shape(shapes[i])?) {
            (LayerOp::Dense { .. }, _) => inp * out,
            (LayerOp::Conv2d { weight, .. }, InputShape::Spatial(_, oh, ow)) => {
                inp * out * (weight.kh * weight.kw * oh * ow) as u64
            }
            _ => 0,
        };
    }
    Ok(2 * macs)
}

/// Inputs, labels and the held-out verification split of a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Features,
    pub labels: Vec<usize>,
    /// Sample indices reserved for accuracy measurement.
    pub verification: Vec<usize>,
}

impl Dataset {
    /// Indices not in the verification split, ascending.
    pub fn pruning_pool(&self) -> Vec<usize> {
        let mut held = vec![false; self.inputs.n()];
        for &i in &self.verification {
            held[i] = true;
        }
        (0..self.inputs.n()).filter(|&i| !held[i]).collect()
    }

    pub fn verification_set(&self) -> (Features, Vec<usize>) {
        let labels = self.verification.iter().map(|&i| self.labels[i]).collect();
        (self.inputs.select_samples(&self.verification), labels)
    }
}

fn float_tensor(bundle: &Bundle, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let t = bundle.tensor(name)?;
    Ok((t.shape.clone(), t.to_f64()?))
}

fn index_tensor(bundle: &Bundle, name: &str) -> Result<Vec<usize>> {
    let t = bundle.tensor(name)?;
    t.to_i64()?
        .into_iter()
        .map(|v| usize::try_from(v).map_err(|_| Error::Model(format!("tensor {name:?} has negative entry {v}"))))
        .collect()
}

/// Builds the model (promoting to f64) and dataset from a validated bundle.
pub fn model_from_bundle(bundle: &Bundle) -> Result<(NetworkModel, Dataset)> {
    bundle.validate()?;
    let m = &bundle.manifest;
    let (ishape, idata) = float_tensor(bundle, &m.data.inputs)?;
    let inputs = match ishape.as_slice() {
        [n, d] => Features::Flat(Matrix::new(*n, *d, idata)?),
        [n, c, h, w] => Features::Maps(FeatureMap::new(*n, *c, *h, *w, idata)?),
        _ => unreachable!("validated input rank"),
    };
    let n = inputs.n();
    let labels = match &m.data.labels {
        Some(l) => index_tensor(bundle, l)?,
        None => vec![0; n],
    };
    let verification = match &m.data.verification {
        Some(v) => index_tensor(bundle, v)?,
        None => Vec::new(),
    };
    if let Some(bad) = verification.iter().find(|&&i| i >= n) {
        return Err(Error::Model(format!(
            "verification index {bad} out of range ({n} samples)"
        )));
    }

    let mut layers = Vec::with_capacity(m.model.len());
    for d in &m.model {
        let bias = match &d.bias {
            Some(b) => Some(float_tensor(bundle, b)?.1),
            None => None,
        };
        let op = match d.kind {
            LayerKind::Dense | LayerKind::Conv2d => {
                let wref = d.weight.as_ref().expect("validated weight ref");
                let (shape, data) = float_tensor(bundle, wref)?;
                if d.kind == LayerKind::Dense {
                    LayerOp::Dense {
                        weight: Matrix::new(shape[0], shape[1], data)?,
                    }
                } else {
                    LayerOp::Conv2d {
                        weight: ConvWeight::new(shape[0], shape[1], shape[2], shape[3], data)?,
                        stride: d.stride,
                        padding: d.padding,
                    }
                }
            }
            LayerKind::Maxpool2 => LayerOp::MaxPool2,
        };
        let kept_mask = match &d.kept_mask {
            Some(k) => Some(bundle.tensor(k)?.to_i64()?.into_iter().map(|v| v != 0).collect()),
            None => None,
        };
        layers.push(LayerSpec {
            name: d.name.clone(),
            op,
            bias,
            nonlinearity: d.nonlinearity,
            prunable: d.prunable,
            kept_mask,
        });
    }
    let model = NetworkModel::new(inputs.shape(), layers)?;
    Ok((
        model,
        Dataset {
            inputs,
            labels,
            verification,
        },
    ))
}

fn float_record(name: String, shape: Vec<usize>, data: &[f64], dtype: DType) -> TensorRecord {
    match dtype {
        DType::F32 => {
            let v: Vec<f32> = data.iter().map(|x| *x as f32).collect();
            TensorRecord::from_f32(name, shape, &v)
        }
        _ => TensorRecord::from_f64(name, shape, data),
    }
}

/// Serializes a model and dataset (optionally with captures) into a bundle.
/// Float tensors use `dtype` (`F32` or `F64`).
pub fn bundle_from_model(
    model: &NetworkModel,
    data: &Dataset,
    captures: Option<&ActivationCapture>,
    dtype: DType,
) -> Result<Bundle> {
    let mut tensors = BTreeMap::new();
    let mut put = |rec: TensorRecord| {
        tensors.insert(rec.name.clone(), rec);
    };
    let mut descriptors = Vec::with_capacity(model.layers.len());
    for (i, l) in model.layers.iter().enumerate() {
        let mut d = LayerDescriptor {
            name: l.name.clone(),
            kind: l.kind(),
            weight: None,
            bias: None,
            nonlinearity: l.nonlinearity,
            stride: 1,
            padding: 0,
            prunable: l.prunable,
            kept_mask: None,
            activation: None,
            patches: None,
        };
        match &l.op {
            LayerOp::Dense { weight } => {
                let name = format!("{}.weight", l.name);
                put(float_record(
                    name.clone(),
                    vec![weight.rows(), weight.cols()],
                    weight.data(),
                    dtype,
                ));
                d.weight = Some(name);
            }
            LayerOp::Conv2d {
                weight,
                stride,
                padding,
            } => {
                let name = format!("{}.weight", l.name);
                let shape = vec![weight.out_c, weight.in_c, weight.kh, weight.kw];
                put(float_record(name.clone(), shape, &weight.data, dtype));
                d.weight = Some(name);
                d.stride = *stride;
                d.padding = *padding;
            }
            LayerOp::MaxPool2 => {}
        }
        if let Some(b) = &l.bias {
            let name = format!("{}.bias", l.name);
            put(float_record(name.clone(), vec![b.len()], b, dtype));
            d.bias = Some(name);
        }
        if let Some(mask) = &l.kept_mask {
            let name = format!("{}.kept_mask", l.name);
            let v: Vec<i64> = mask.iter().map(|k| *k as i64).collect();
            put(TensorRecord::from_i64(name.clone(), vec![v.len()], &v));
            d.kept_mask = Some(name);
        }
        if let Some(cap) = captures.and_then(|c| c.get(i)) {
            let conv_successor = model.layers[cap.successor].kind() == LayerKind::Conv2d;
            let name = format!("{}.{}", l.name, if conv_successor { "patches" } else { "activation" });
            let m = &cap.matrix;
            put(float_record(name.clone(), vec![m.rows(), m.cols()], m.data(), dtype));
            if conv_successor {
                d.patches = Some(name);
            } else {
                d.activation = Some(name);
            }
        }
        descriptors.push(d);
    }
    let (shape, values): (Vec<usize>, &[f64]) = match &data.inputs {
        Features::Flat(m) => (vec![m.rows(), m.cols()], m.data()),
        Features::Maps(f) => (vec![f.n, f.c, f.h, f.w], &f.data),
    };
    put(float_record("inputs".into(), shape, values, dtype));
    let labels: Vec<i64> = data.labels.iter().map(|&v| v as i64).collect();
    put(TensorRecord::from_i64("labels", vec![labels.len()], &labels));
    let verification = if data.verification.is_empty() {
        None
    } else {
        let v: Vec<i64> = data.verification.iter().map(|&v| v as i64).collect();
        put(TensorRecord::from_i64("verification", vec![v.len()], &v));
        Some("verification".to_string())
    };
    let bundle = Bundle {
        manifest: BundleManifest {
            format_version: FORMAT_VERSION,
            model: descriptors,
            data: DataRefs {
                inputs: "inputs".into(),
                labels: Some("labels".into()),
                verification,
            },
        },
        tensors,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::test_util::{random_matrix, rng};
    use rand::Rng;

    fn random_map(seed: u64, n: usize, c: usize, h: usize, w: usize) -> FeatureMap {
        let mut r = rng(seed);
        let data = (0..n * c * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        FeatureMap::new(n, c, h, w, data).unwrap()
    }

    fn random_conv(seed: u64, out_c: usize, in_c: usize, k: usize) -> ConvWeight {
        let mut r = rng(seed);
        let data = (0..out_c * in_c * k * k).map(|_| r.random_range(-1.0..1.0)).collect();
        ConvWeight::new(out_c, in_c, k, k, data).unwrap()
    }

    #[test]
    fn dense_identity_and_hand_case() {
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]);
        let l = LayerSpec::dense("d", Matrix::identity(2), Some(vec![0.0, 0.0]), Nonlinearity::None);
        assert_eq!(dense_forward(&x, &l).unwrap(), x);
        let l = LayerSpec::dense(
            "d",
            Matrix::from_rows(&[vec![1.0], vec![1.0]]),
            Some(vec![0.0]),
            Nonlinearity::None,
        );
        let out = dense_forward(&Matrix::from_rows(&[vec![1.0, 2.0]]), &l).unwrap();
        assert_eq!(out.data(), &[3.0]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn dense_matches_loop_oracle() {
        let mut r = rng(1);
        let x = random_matrix(&mut r, 7, 5);
        let w = random_matrix(&mut r, 5, 4);
        let b: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut l = LayerSpec::dense("d", w.clone(), Some(b.clone()), Nonlinearity::Relu);
        l.kept_mask = Some(vec![true, false, true, true]);
        let out = dense_forward(&x, &l).unwrap();
        for i in 0..7 {
            for j in 0..4 {
                let mut s = b[j];
                for p in 0..5 {
                    s += x.get(i, p) * w.get(p, j);
                }
                let expect = if j == 1 { 0.0 } else { s.max(0.0) };
                assert!((out.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_hand_sum() {
        let input = FeatureMap::new(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        let l = LayerSpec::conv(
            "c",
            ConvWeight::new(1, 1, 2, 2, vec![1.0; 4]).unwrap(),
            None,
            1,
            0,
            Nonlinearity::None,
        );
        let out = conv2d_forward(&input, &l).unwrap();
        assert_eq!((out.h, out.w), (2, 2));
        assert_eq!(out.data, vec![4.0; 4]);
    }

    #[test]
    fn one_by_one_conv_is_channel_map() {
        let input = random_map(2, 2, 3, 4, 4);
        let w = random_conv(3, 2, 3, 1);
        let l = LayerSpec::conv("c", w.clone(), None, 1, 0, Nonlinearity::None);
        let out = conv2d_forward(&input, &l).unwrap();
        for i in 0..2 {
            for o in 0..2 {
                for y in 0..4 {
                    for x in 0..4 {
                        let s: f64 = (0..3).map(|c| w.get(o, c, 0, 0) * input.get(i, c, y, x)).sum();
                        assert!((out.get(i, o, y, x) - s).abs() < 1e-12);
                    }
                }
            }
        }
        let cols = im2col(&input, 1, 1, 1, 0).unwrap();
        assert_eq!(cols.shape(), (2 * 16, 3));
    }

    #[test]
    fn im2col_shape() {
        let input = random_map(4, 1, 1, 3, 3);
        assert_eq!(im2col(&input, 2, 2, 1, 0).unwrap().shape(), (4, 4));
        assert!(im2col(&input, 2, 2, 2, 0).is_err());
    }

    #[test]
    fn conv_equals_im2col_product() {
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let input = random_map(5, 2, 3, 5, 5);
            let w = random_conv(6, 4, 3, 3);
            let l = LayerSpec::conv("c", w.clone(), None, stride, pad, Nonlinearity::None);
            let out = conv2d_forward(&input, &l).unwrap();
            let prod = matmul(&im2col(&input, 3, 3, stride, pad).unwrap(), &w.to_matrix()).unwrap();
            let p = out.h * out.w;
            for i in 0..2 {
                for o in 0..4 {
                    for y in 0..out.h {
                        for x in 0..out.w {
                            let row = i * p + y * out.w + x;
                            assert!((prod.get(row, o) - out.get(i, o, y, x)).abs() < 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_weight_matrix_roundtrip() {
        let w = random_conv(7, 3, 2, 3);
        let back = ConvWeight::from_matrix(&w.to_matrix(), 2, 3, 3).unwrap();
        assert_eq!(back, w);
    }

    fn lenet_like(seed: u64) -> NetworkModel {
        let mut r = rng(seed);
        let layers = vec![
            LayerSpec::conv(
                "conv1",
                random_conv(seed, 4, 1, 3),
                Some(vec![0.1; 4]),
                1,
                0,
                Nonlinearity::Relu,
            )
            .prunable(true),
            LayerSpec::max_pool("pool1"),
            LayerSpec::conv(
                "conv2",
                random_conv(seed + 1, 8, 4, 3),
                Some(vec![0.0; 8]),
                1,
                0,
                Nonlinearity::Relu,
            )
            .prunable(true),
            LayerSpec::max_pool("pool2"),
            LayerSpec::dense(
                "fc1",
                random_matrix(&mut r, 32, 16),
                Some(vec![0.0; 16]),
                Nonlinearity::Relu,
            )
            .prunable(true),
            LayerSpec::dense(
                "fc2",
                random_matrix(&mut r, 16, 10),
                Some(vec![0.0; 10]),
                Nonlinearity::None,
            ),
        ];
        NetworkModel::new(InputShape::Spatial(1, 14, 14), layers).unwrap()
    }

    #[test]
    fn lenet_capture_shapes() {
        let model = lenet_like(1);
        let x = Features::Maps(random_map(2, 3, 1, 14, 14));
        let (logits, caps) = forward_capture(&model, &x).unwrap();
        assert_eq!(logits.shape(), (3, 10));
        assert_eq!(caps.layers.len(), 3);
        let c1 = caps.get(0).unwrap();
        // conv1 output 12x12 pooled to 6x6, conv2 kernel 3 → p = 4·4.
        assert_eq!(c1.matrix.shape(), (3 * 16, 4 * 9));
        assert_eq!((c1.successor, c1.groups.len()), (2, 4));
        let c2 = caps.get(2).unwrap();
        assert_eq!(c2.matrix.shape(), (3, 8 * 4));
        assert_eq!(c2.groups.members(1), &[4, 5, 6, 7]);
        let c3 = caps.get(4).unwrap();
        assert_eq!(c3.matrix.shape(), (3, 16));
        assert!(c3.groups.is_singletons());
    }

    #[test]
    fn masked_units_are_zero_downstream() {
        let mut model = lenet_like(2);
        model.layers[2].kept_mask = Some(vec![true, false, true, true, false, true, true, true]);
        model.layers[4].kept_mask = Some((0..16).map(|j| j % 3 != 0).collect());
        let x = Features::Maps(random_map(3, 2, 1, 14, 14));
        let (_, caps) = forward_capture(&model, &x).unwrap();
        let c2 = caps.get(2).unwrap();
        for i in 0..2 {
            for j in 4..8 {
                assert_eq!(c2.matrix.get(i, j), 0.0);
            }
            for j in 16..20 {
                assert_eq!(c2.matrix.get(i, j), 0.0);
            }
        }
        let c3 = caps.get(4).unwrap();
        for i in 0..2 {
            for j in (0..16).step_by(3) {
                assert_eq!(c3.matrix.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn accuracy_cases() {
        let logits = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(accuracy_from_logits(&logits, &[0, 2]).unwrap(), 1.0);
        assert_eq!(accuracy_from_logits(&logits, &[1, 0]).unwrap(), 0.0);
        assert!(accuracy_from_logits(&logits, &[0]).is_err());
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        let mut r = rng(4);
        let logits = random_matrix(&mut r, 50, 5);
        let labels: Vec<usize> = (0..50).map(|_| r.random_range(0..5)).collect();
        let mut hits = 0;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0;
            for j in 1..5 {
                if row[j] > row[best] {
                    best = j;
                }
            }
            hits += (best == label) as usize;
        }
        assert_eq!(accuracy_from_logits(&logits, &labels).unwrap(), hits as f64 / 50.0);
    }

    fn mlp(n0: usize, n1: usize, n2: usize) -> NetworkModel {
        let layers = vec![
            LayerSpec::dense("a", Matrix::zeros(n0, n1), Some(vec![0.0; n1]), Nonlinearity::Relu).prunable(true),
            LayerSpec::dense("b", Matrix::zeros(n1, n2), Some(vec![0.0; n2]), Nonlinearity::None),
        ];
        NetworkModel::new(InputShape::Flat(n0), layers).unwrap()
    }

    #[test]
    fn param_counts() {
        let single = NetworkModel::new(
            InputShape::Flat(4),
            vec![LayerSpec::dense(
                "d",
                Matrix::zeros(4, 3),
                Some(vec![0.0; 3]),
                Nonlinearity::None,
            )],
        )
        .unwrap();
        assert_eq!(count_params(&single).unwrap(), 15);
        let mut m = mlp(5, 4, 3);
        assert_eq!(count_params(&m).unwrap(), 5 * 4 + 4 + 4 * 3 + 3);
        m.layers[0].kept_mask = Some(vec![true, false, true, false]);
        assert_eq!(count_params(&m).unwrap(), 12 + 9);
        assert_eq!(count_flops(&m).unwrap(), 2 * (5 * 2 + 2 * 3));
    }

    #[test]
    fn pruning_scales_weight_params() {
        let mut model = lenet_like(3);
        let conv_weights = |m: &NetworkModel| -> (u64, u64) {
            let p = count_params(m).unwrap();
            let biases: u64 = m
                .layers
                .iter()
                .map(|l| l.bias.as_ref().map_or(0, |_| l.kept_count() as u64))
                .sum();
            (p, biases)
        };
        let (p0, b0) = conv_weights(&model);
        // conv2: 8 channels → keep 2; conv2 weights 4·9·8 → 4·9·2, fc1 rows 32 → 8.
        model.layers[2].kept_mask = Some((0..8).map(|c| c < 2).collect());
        let (p1, b1) = conv_weights(&model);
        let before = 4 * 9 * 8 + 32 * 16;
        let after = 4 * 9 * 2 + 8 * 16;
        assert_eq!((p0 - b0) - (p1 - b1), (before - after) as u64);
        assert_eq!(b0 - b1, 6);
    }

    #[test]
    fn bundle_roundtrip_preserves_model() {
        let mut model = lenet_like(5);
        model.layers[0].kept_mask = Some(vec![true, true, false, true]);
        let x = Features::Maps(random_map(8, 4, 1, 14, 14));
        let (_, caps) = forward_capture(&model, &x).unwrap();
        let data = Dataset {
            inputs: x,
            labels: vec![1, 2, 3, 4],
            verification: vec![3],
        };
        let b = bundle_from_model(&model, &data, Some(&caps), DType::F64).unwrap();
        assert_eq!(b.manifest.model[0].patches.as_deref(), Some("conv1.patches"));
        assert_eq!(b.manifest.model[4].activation.as_deref(), Some("fc1.activation"));
        let (m2, d2) = model_from_bundle(&b).unwrap();
        assert_eq!(m2, model);
        assert_eq!(d2, data);
        assert_eq!(d2.pruning_pool(), vec![0, 1, 2]);
    }
}
