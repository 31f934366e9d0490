//! The fixed convolutional classifier and its reverse-mode differentiation.
//!
//! The network is a stack of `conv3x3(same) -> relu -> maxpool2` blocks
//! followed by one dense layer producing logits. The standard architecture
//! uses two blocks with 8 and 16 channels; `Architecture::dense_only` drops
//! the blocks entirely, which gives a linear model useful for analytic checks.
//!
//! Inputs first pass a fixed per-channel standardization `(x - mean) / std`
//! whose statistics live alongside the weights but are never trained.
//!
//! Images are `[H, W, C]` row-major, batches `[B, H, W, C]`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PARAMS_MAGIC: &[u8; 8] = b"VIAPNET1";
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    /// Output channels of each conv block, in order.
    pub conv_channels: Vec<usize>,
}

impl Architecture {
    /// conv(C->8) -> relu -> pool -> conv(8->16) -> relu -> pool -> dense(K).
    pub fn standard(height: usize, width: usize, channels: usize, classes: usize) -> Self {
        Architecture {
            height,
            width,
            channels,
            classes,
            conv_channels: vec![8, 16],
        }
    }

    pub fn dense_only(height: usize, width: usize, channels: usize, classes: usize) -> Self {
        Architecture {
            height,
            width,
            channels,
            classes,
            conv_channels: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::invalid("input extents must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::invalid("conv blocks need at least one channel"));
        }
        let div = 1usize << self.conv_channels.len();
        if !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return Err(Error::invalid(format!(
                "input {}x{} not divisible by {div} for {} pooling stages",
                self.height,
                self.width,
                self.conv_channels.len()
            )));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Length of the flattened feature vector feeding the dense layer.
    pub fn feature_len(&self) -> usize {
        let n = self.conv_channels.len();
        let c = self.conv_channels.last().copied().unwrap_or(self.channels);
        (self.height >> n) * (self.width >> n) * c
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.channels;
        for (i, &cout) in self.conv_channels.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), vec![cout, KERNEL, KERNEL, cin]));
            out.push((format!("conv{}.bias", i + 1), vec![cout]));
            cin = cout;
        }
        out.push(("dense.weight".into(), vec![self.classes, self.feature_len()]));
        out.push(("dense.bias".into(), vec![self.classes]));
        out
    }

    fn descriptor(&self) -> Vec<f64> {
        let mut d = vec![
            self.height as f64,
            self.width as f64,
            self.channels as f64,
            self.classes as f64,
        ];
        d.extend(self.conv_channels.iter().map(|&c| c as f64));
        d
    }

    fn from_descriptor(d: &[f64]) -> Result<Self> {
        if d.len() < 4 || d.iter().any(|v| v.fract() != 0.0 || *v < 0.0 || *v > 1e9) {
            return Err(Error::Format {
                what: "model params",
                reason: "bad architecture descriptor".into(),
            });
        }
        let arch = Architecture {
            height: d[0] as usize,
            width: d[1] as usize,
            channels: d[2] as usize,
            classes: d[3] as usize,
            conv_channels: d[4..].iter().map(|&v| v as usize).collect(),
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// All weights of the classifier, stored in `Architecture::param_layout` order.
///
/// The same type carries parameter gradients, which keeps them congruent with
/// the weights field by field.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    tensors: Vec<Tensor>,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .param_layout()
            .iter()
            .map(|(_, shape)| Tensor::zeros(shape))
            .collect();
        Ok(ModelParams::with_identity_norm(arch, tensors))
    }

    fn with_identity_norm(arch: Architecture, tensors: Vec<Tensor>) -> Self {
        let c = arch.channels;
        ModelParams {
            arch,
            tensors,
            input_mean: vec![0.0; c],
            input_std: vec![1.0; c],
        }
    }

    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.param_layout();
        if layout.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((_, shape), t) in layout.iter().zip(&tensors) {
            t.ensure_shape(shape)?;
            t.ensure_finite("model parameters")?;
        }
        Ok(ModelParams::with_identity_norm(arch, tensors))
    }

    /// Replaces the per-channel input standardization.
    pub fn with_input_norm(mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let c = self.arch.channels;
        if mean.len() != c || std.len() != c {
            return Err(Error::ShapeMismatch {
                expected: vec![c],
                actual: vec![mean.len(), std.len()],
            });
        }
        if mean.iter().any(|v| !v.is_finite()) || std.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("input std must be positive and finite"));
        }
        self.input_mean = mean;
        self.input_std = std;
        Ok(self)
    }

    /// Per-channel `(mean, std)` applied to inputs before the first layer.
    pub fn input_norm(&self) -> (&[f64], &[f64]) {
        (&self.input_mean, &self.input_std)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> Vec<String> {
        self.arch.param_layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn num_weights(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    fn conv(&self, block: usize) -> (&[f64], &[f64]) {
        (self.tensors[2 * block].data(), self.tensors[2 * block + 1].data())
    }

    fn dense(&self) -> (&[f64], &[f64]) {
        let n = self.tensors.len();
        (self.tensors[n - 2].data(), self.tensors[n - 1].data())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.num_weights());
        out.extend_from_slice(PARAMS_MAGIC);
        let desc = self.arch.descriptor();
        write_record(&mut out, "arch", &[desc.len()], &desc);
        write_record(&mut out, "input.mean", &[self.input_mean.len()], &self.input_mean);
        write_record(&mut out, "input.std", &[self.input_std.len()], &self.input_std);
        for ((name, _), t) in self.arch.param_layout().iter().zip(&self.tensors) {
            write_record(&mut out, name, t.shape(), t.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = RecordReader::new(bytes, PARAMS_MAGIC, "model params")?;
        let (name, _, desc) = reader
            .next_record()?
            .ok_or_else(|| reader.fail("missing arch record"))?;
        if name != "arch" {
            return Err(reader.fail("first record must be 'arch'"));
        }
        let arch = Architecture::from_descriptor(&desc)?;
        let mut norm = Vec::with_capacity(2);
        for expected_name in ["input.mean", "input.std"] {
            let (name, shape, data) = reader
                .next_record()?
                .ok_or_else(|| reader.fail(format!("missing record {expected_name}")))?;
            if name != expected_name || shape != [arch.channels] {
                return Err(reader.fail(format!("expected {expected_name}, found {name} {shape:?}")));
            }
            norm.push(data);
        }
        let mut tensors = Vec::new();
        for (expected_name, expected_shape) in arch.param_layout() {
            let (name, shape, data) = reader
                .next_record()?
                .ok_or_else(|| reader.fail(format!("missing record {expected_name}")))?;
            if name != expected_name || shape != expected_shape {
                return Err(reader.fail(format!(
                    "expected {expected_name} {expected_shape:?}, found {name} {shape:?}"
                )));
            }
            tensors.push(Tensor::new(shape, data)?);
        }
        if reader.next_record()?.is_some() {
            return Err(reader.fail("trailing records"));
        }
        let std = norm.pop().unwrap();
        let mean = norm.pop().unwrap();
        ModelParams::from_tensors(arch, tensors)?.with_input_norm(mean, std)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelParams::from_bytes(&fs::read(path)?)
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Name, shape and values of one serialized tensor.
type Record = (String, Vec<usize>, Vec<f64>);

struct RecordReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> RecordReader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 8], what: &'static str) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != magic {
            return Err(Error::Format {
                what,
                reason: "bad magic".into(),
            });
        }
        Ok(RecordReader { bytes, pos: 8, what })
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail("truncated")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn next_record(&mut self) -> Result<Option<Record>> {
        if self.pos == self.bytes.len() {
            return Ok(None);
        }
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| self.fail("record name is not utf-8"))?
            .to_string();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.fail(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let e = self.u64()? as usize;
            count = count.checked_mul(e).ok_or_else(|| self.fail("extent overflow"))?;
            shape.push(e);
        }
        let payload = self.take(count.checked_mul(8).ok_or_else(|| self.fail("extent overflow"))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Some((name, shape, data)))
    }
}

/// Per-example input gradient and parameter gradients, each optional.
type ExampleGrads = (Option<Vec<f64>>, Option<Vec<Tensor>>);

/// Intermediates of one example's forward pass.
#[derive(Debug, Clone)]
struct ExampleTape {
    /// Input to each conv block.
    block_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each conv block (relu mask source).
    pre_acts: Vec<Vec<f64>>,
    /// For each pooled output element, the flat index of the winning input.
    pool_argmax: Vec<Vec<usize>>,
    features: Vec<f64>,
}

/// Recorded forward pass over one batch, consumed by `Graph::backward`.
#[derive(Debug, Clone)]
pub struct Graph {
    batch_shape: Vec<usize>,
    tapes: Vec<ExampleTape>,
    logits: Tensor,
}

/// Gradients produced by a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub input: Option<Tensor>,
    pub params: Option<ModelParams>,
}

fn check_batch(arch: &Architecture, batch: &Tensor) -> Result<usize> {
    let [h, w, c] = arch.image_shape();
    let shape = batch.shape();
    if shape.len() != 4 || shape[0] == 0 || shape[1..] != [h, w, c] {
        return Err(Error::ShapeMismatch {
            expected: vec![shape.first().copied().unwrap_or(1).max(1), h, w, c],
            actual: shape.to_vec(),
        });
    }
    batch.ensure_finite("forward input")?;
    Ok(shape[0])
}

/// Runs the classifier and records the intermediates needed for backward.
pub fn forward(params: &ModelParams, batch: &Tensor) -> Result<(Tensor, Graph)> {
    let arch = params.arch();
    let b = check_batch(arch, batch)?;
    let img = arch.image_len();
    let tapes: Vec<(ExampleTape, Vec<f64>)> = batch
        .data()
        .par_chunks(img)
        .map(|x| forward_example(params, x))
        .collect();
    let k = arch.classes;
    let mut logits = Vec::with_capacity(b * k);
    let mut out_tapes = Vec::with_capacity(b);
    for (tape, l) in tapes {
        logits.extend_from_slice(&l);
        out_tapes.push(tape);
    }
    let logits = Tensor::new(vec![b, k], logits)?;
    logits.ensure_finite("forward logits")?;
    Ok((
        logits.clone(),
        Graph {
            batch_shape: batch.shape().to_vec(),
            tapes: out_tapes,
            logits,
        },
    ))
}

/// Logits only, without keeping a graph.
pub fn logits(params: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    forward(params, batch).map(|(l, _)| l)
}

fn forward_example(params: &ModelParams, x: &[f64]) -> (ExampleTape, Vec<f64>) {
    let arch = params.arch();
    let (mut h, mut w, mut cin) = (arch.height, arch.width, arch.channels);
    let (mean, std) = params.input_norm();
    let mut cur: Vec<f64> = x
        .chunks(cin)
        .flat_map(|px| px.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s))
        .collect();
    let mut tape = ExampleTape {
        block_inputs: Vec::with_capacity(arch.conv_channels.len()),
        pre_acts: Vec::with_capacity(arch.conv_channels.len()),
        pool_argmax: Vec::with_capacity(arch.conv_channels.len()),
        features: Vec::new(),
    };
    for (block, &cout) in arch.conv_channels.iter().enumerate() {
        let (wt, bias) = params.conv(block);
        let mut z = vec![0.0; h * w * cout];
        conv_forward(&cur, h, w, cin, wt, bias, cout, &mut z);
        let (pooled, argmax) = relu_pool_forward(&z, h, w, cout);
        tape.block_inputs.push(std::mem::replace(&mut cur, pooled));
        tape.pre_acts.push(z);
        tape.pool_argmax.push(argmax);
        h /= 2;
        w /= 2;
        cin = cout;
    }
    let (dw, db) = params.dense();
    let f = cur.len();
    let logits = db
        .iter()
        .enumerate()
        .map(|(k, &bk)| bk + dot(&dw[k * f..(k + 1) * f], &cur))
        .collect();
    tape.features = cur;
    (tape, logits)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Iterates the in-bounds taps of a 3x3 same-padded kernel centred at (y, x).
fn taps(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..KERNEL).flat_map(move |ky| {
        (0..KERNEL).filter_map(move |kx| {
            let iy = (y + ky).checked_sub(1)?;
            let ix = (x + kx).checked_sub(1)?;
            (iy < h && ix < w).then_some((ky * KERNEL + kx, iy, ix))
        })
    })
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    out: &mut [f64],
) {
    let kk = KERNEL * KERNEL;
    for y in 0..h {
        for x in 0..w {
            let o_px = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            o_px.copy_from_slice(bias);
            for (tap, iy, ix) in taps(y, x, h, w) {
                let in_px = &input[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                for (o, acc) in o_px.iter_mut().enumerate() {
                    let base = (o * kk + tap) * cin;
                    *acc += dot(&weight[base..base + cin], in_px);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    cout: usize,
    dz: &[f64],
    dweight: Option<(&mut [f64], &mut [f64])>,
    dinput: Option<&mut [f64]>,
) {
    let kk = KERNEL * KERNEL;
    if let Some((dw, db)) = dweight {
        for y in 0..h {
            for x in 0..w {
                let g_px = &dz[(y * w + x) * cout..(y * w + x + 1) * cout];
                for (o, &g) in g_px.iter().enumerate() {
                    db[o] += g;
                }
                for (tap, iy, ix) in taps(y, x, h, w) {
                    let in_px = &input[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    for (o, &g) in g_px.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let base = (o * kk + tap) * cin;
                        for (d, &v) in dw[base..base + cin].iter_mut().zip(in_px) {
                            *d += g * v;
                        }
                    }
                }
            }
        }
    }
    if let Some(dx) = dinput {
        for y in 0..h {
            for x in 0..w {
                let g_px = &dz[(y * w + x) * cout..(y * w + x + 1) * cout];
                for (tap, iy, ix) in taps(y, x, h, w) {
                    let d_px = &mut dx[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    for (o, &g) in g_px.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let base = (o * kk + tap) * cin;
                        for (d, &wv) in d_px.iter_mut().zip(&weight[base..base + cin]) {
                            *d += g * wv;
                        }
                    }
                }
            }
        }
    }
}

/// relu followed by 2x2/stride-2 max pooling. Ties resolve to the first
/// element in (dy, dx) scan order.
fn relu_pool_forward(z: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                        let v = z[idx].max(0.0);
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = (y * ow + x) * c + ch;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    (out, arg)
}

impl Graph {
    pub fn batch_shape(&self) -> &[usize] {
        &self.batch_shape
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Propagates `dlogits` (shape `[B, K]`) back through the recorded pass.
    ///
    /// Parameter gradients are summed over examples in batch order, so the
    /// result does not depend on how the per-example work was scheduled.
    pub fn backward(
        &self,
        params: &ModelParams,
        dlogits: &Tensor,
        want_input: bool,
        want_params: bool,
    ) -> Result<Gradients> {
        let b = self.batch_shape[0];
        dlogits.ensure_shape(&[b, params.arch().classes])?;
        if params.arch().image_shape() != self.batch_shape[1..] {
            return Err(Error::ShapeMismatch {
                expected: self.batch_shape.clone(),
                actual: params.arch().image_shape().to_vec(),
            });
        }
        let k = params.arch().classes;
        let per_example: Vec<ExampleGrads> = self
            .tapes
            .par_iter()
            .enumerate()
            .map(|(i, tape)| {
                backward_example(
                    params,
                    tape,
                    &dlogits.data()[i * k..(i + 1) * k],
                    want_input,
                    want_params,
                )
            })
            .collect();

        let input = if want_input {
            let mut data = Vec::with_capacity(self.batch_shape.iter().product());
            for (dx, _) in &per_example {
                data.extend_from_slice(dx.as_ref().expect("input grad requested"));
            }
            let t = Tensor::new(self.batch_shape.clone(), data)?;
            t.ensure_finite("input gradient")?;
            Some(t)
        } else {
            None
        };
        let params_grad = if want_params {
            let mut acc = ModelParams::zeros(params.arch().clone())?;
            for (_, g) in &per_example {
                for (a, gi) in acc.tensors.iter_mut().zip(g.as_ref().expect("param grad requested")) {
                    for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                        *x += y;
                    }
                }
            }
            if !acc.is_finite() {
                return Err(Error::NonFinite("parameter gradient"));
            }
            Some(acc)
        } else {
            None
        };
        Ok(Gradients {
            input,
            params: params_grad,
        })
    }
}

fn backward_example(
    params: &ModelParams,
    tape: &ExampleTape,
    dlogits: &[f64],
    want_input: bool,
    want_params: bool,
) -> (Option<Vec<f64>>, Option<Vec<Tensor>>) {
    let arch = params.arch();
    let layout = arch.param_layout();
    let mut grads: Option<Vec<Tensor>> = want_params.then(|| layout.iter().map(|(_, s)| Tensor::zeros(s)).collect());

    let (dense_w, _) = params.dense();
    let f = tape.features.len();
    if let Some(g) = grads.as_mut() {
        let n = g.len();
        {
            let dw = g[n - 2].data_mut();
            for (kk, &gl) in dlogits.iter().enumerate() {
                for (d, &v) in dw[kk * f..(kk + 1) * f].iter_mut().zip(&tape.features) {
                    *d += gl * v;
                }
            }
        }
        g[n - 1].data_mut().copy_from_slice(dlogits);
    }
    let nblocks = arch.conv_channels.len();
    let need_features_grad = want_input || (want_params && nblocks > 0);
    if !need_features_grad {
        return (None, grads);
    }
    let mut dcur = vec![0.0; f];
    for (kk, &gl) in dlogits.iter().enumerate() {
        for (d, &wv) in dcur.iter_mut().zip(&dense_w[kk * f..(kk + 1) * f]) {
            *d += gl * wv;
        }
    }

    for block in (0..nblocks).rev() {
        let div = 1usize << block;
        let (h, w) = (arch.height / div, arch.width / div);
        let cin = if block == 0 {
            arch.channels
        } else {
            arch.conv_channels[block - 1]
        };
        let cout = arch.conv_channels[block];
        let z = &tape.pre_acts[block];
        // Unpool into the relu output, then apply the relu mask.
        let mut dz = vec![0.0; h * w * cout];
        for (&idx, &g) in tape.pool_argmax[block].iter().zip(&dcur) {
            if z[idx] > 0.0 {
                dz[idx] += g;
            }
        }
        let need_dx = block > 0 || want_input;
        let mut dx = need_dx.then(|| vec![0.0; h * w * cin]);
        let (wt, _) = params.conv(block);
        let dweight = grads.as_mut().map(|g| {
            let (left, right) = g.split_at_mut(2 * block + 1);
            (left[2 * block].data_mut(), right[0].data_mut())
        });
        conv_backward(
            &tape.block_inputs[block],
            h,
            w,
            cin,
            wt,
            cout,
            &dz,
            dweight,
            dx.as_deref_mut(),
        );
        match dx {
            Some(d) => dcur = d,
            None => break,
        }
    }
    if !want_input {
        return (None, grads);
    }
    let (_, std) = params.input_norm();
    for px in dcur.chunks_mut(arch.channels) {
        for (d, s) in px.iter_mut().zip(std) {
            *d /= s;
        }
    }
    (Some(dcur), grads)
}

/// Row-wise softmax of `[B, K]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// Per-example cross-entropy losses and `d(mean loss)/d(logits)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let probs = softmax(logits);
    let mut losses = Vec::with_capacity(b);
    let mut grad = probs.data().to_vec();
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        losses.push(lse - row[y]);
        grad[i * k + y] -= 1.0;
    }
    let inv_b = 1.0 / b as f64;
    for g in grad.iter_mut() {
        *g *= inv_b;
    }
    Ok((losses, Tensor::new(vec![b, k], grad)?))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the batch.
pub fn loss_and_input_grad(params: &ModelParams, batch: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (logits, graph) = forward(params, batch)?;
    let (losses, dlogits) = cross_entropy(&logits, labels)?;
    let g = graph.backward(params, &dlogits, true, false)?;
    Ok((mean(&losses), g.input.expect("requested")))
}

/// Mean softmax cross-entropy and its gradient w.r.t. every weight tensor.
pub fn loss_and_param_grad(params: &ModelParams, batch: &Tensor, labels: &[usize]) -> Result<(f64, ModelParams)> {
    let (logits, graph) = forward(params, batch)?;
    let (losses, dlogits) = cross_entropy(&logits, labels)?;
    let g = graph.backward(params, &dlogits, false, true)?;
    Ok((mean(&losses), g.params.expect("requested")))
}

/// Mean batch loss alone; the forward route used by finite-difference checks.
pub fn loss(params: &ModelParams, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = logits(params, batch)?;
    let (losses, _) = cross_entropy(&logits, labels)?;
    Ok(mean(&losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(arch: Architecture, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::zeros(arch).unwrap();
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        p
    }

    fn random_batch(b: usize, arch: &Architecture, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * arch.image_len();
        let [h, w, c] = arch.image_shape();
        Tensor::new(vec![b, h, w, c], (0..n).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let arch = Architecture::standard(8, 8, 3, 4);
        let p = ModelParams::zeros(arch.clone()).unwrap();
        let l = logits(&p, &random_batch(3, &arch, 1)).unwrap();
        assert!(l.data().iter().all(|&v| v == 0.0));
        assert!(softmax(&l).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn dense_only_hand_computed() {
        let arch = Architecture::dense_only(1, 1, 1, 2);
        let p = ModelParams::from_tensors(
            arch,
            vec![Tensor::new(vec![2, 1], vec![2.0, -1.0]).unwrap(), Tensor::zeros(&[2])],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap();
        assert_eq!(logits(&p, &x).unwrap().data(), &[1.0, -0.5]);
    }

    #[test]
    fn identical_images_identical_rows() {
        let arch = Architecture::standard(8, 8, 3, 4);
        let p = random_params(arch.clone(), 3);
        let one = random_batch(1, &arch, 4).row(0);
        let batch = Tensor::stack(&[&one, &one, &one]).unwrap();
        let l = logits(&p, &batch).unwrap();
        assert_eq!(l.row(0), l.row(1));
        assert_eq!(l.row(0), l.row(2));
    }

    #[test]
    fn uniform_logits_loss_is_ln2() {
        let arch = Architecture::dense_only(2, 2, 1, 2);
        let p = ModelParams::zeros(arch.clone()).unwrap();
        let batch = random_batch(2, &arch, 5);
        let (loss, _) = loss_and_input_grad(&p, &batch, &[1, 0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_and_label_errors() {
        let arch = Architecture::standard(8, 8, 3, 4);
        let p = ModelParams::zeros(arch.clone()).unwrap();
        let wrong = Tensor::zeros(&[1, 8, 4, 3]);
        assert!(matches!(forward(&p, &wrong), Err(Error::ShapeMismatch { .. })));
        let batch = random_batch(1, &arch, 1);
        assert!(matches!(
            loss_and_input_grad(&p, &batch, &[4]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
        let mut bad = batch.clone();
        bad.data_mut()[0] = f64::INFINITY;
        assert!(matches!(forward(&p, &bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn duplicated_image_halves_gradient() {
        let arch = Architecture::standard(8, 8, 3, 4);
        let p = random_params(arch.clone(), 7);
        let x = random_batch(1, &arch, 8);
        let (_, g1) = loss_and_input_grad(&p, &x, &[2]).unwrap();
        let xx = Tensor::stack(&[&x.row(0), &x.row(0)]).unwrap();
        let (_, g2) = loss_and_input_grad(&p, &xx, &[2, 2]).unwrap();
        for (a, b) in g2.row(0).data().iter().zip(g1.data()) {
            assert!((a - b / 2.0).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn param_grads_vanish_for_confident_correct_logits() {
        let arch = Architecture::dense_only(1, 1, 1, 2);
        let p = ModelParams::from_tensors(
            arch,
            vec![Tensor::zeros(&[2, 1]), Tensor::new(vec![2], vec![60.0, -60.0]).unwrap()],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 1, 1], vec![0.3]).unwrap();
        let (loss, g) = loss_and_param_grad(&p, &x, &[0]).unwrap();
        assert!(loss < 1e-40);
        for t in g.tensors() {
            assert!(t.max_abs() < 1e-40);
        }
    }

    #[test]
    fn grads_congruent_with_params() {
        let arch = Architecture::standard(8, 8, 3, 4);
        let p = random_params(arch.clone(), 9);
        let (_, g) = loss_and_param_grad(&p, &random_batch(2, &arch, 10), &[0, 3]).unwrap();
        assert_eq!(g.arch(), p.arch());
        for (a, b) in g.tensors().iter().zip(p.tensors()) {
            assert_eq!(a.shape(), b.shape());
        }
    }

    #[test]
    fn batch_loss_is_mean_of_example_losses() {
        let arch = Architecture::standard(8, 8, 3, 4);
        let p = random_params(arch.clone(), 11);
        let batch = random_batch(4, &arch, 12);
        let labels = [0, 1, 2, 3];
        let whole = loss(&p, &batch, &labels).unwrap();
        let parts: f64 = (0..4)
            .map(|i| {
                let x = Tensor::stack(&[&batch.row(i)]).unwrap();
                loss(&p, &x, &labels[i..i + 1]).unwrap()
            })
            .sum::<f64>()
            / 4.0;
        assert!((whole - parts).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_mismatched_dlogits() {
        let arch = Architecture::standard(8, 8, 3, 4);
        let p = random_params(arch.clone(), 1);
        let (_, graph) = forward(&p, &random_batch(2, &arch, 2)).unwrap();
        let bad = Tensor::zeros(&[3, 4]);
        assert!(graph.backward(&p, &bad, true, true).is_err());
    }

    #[test]
    fn params_file_roundtrip_bit_exact() {
        let p = random_params(Architecture::standard(8, 8, 3, 4), 13)
            .with_input_norm(vec![0.25, 0.5, 0.125], vec![0.3, 1.7, 0.9])
            .unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..8], PARAMS_MAGIC);
        let q = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(q.to_bytes(), bytes);
        assert_eq!(p, q);
        assert_eq!(q.input_norm(), (&[0.25, 0.5, 0.125][..], &[0.3, 1.7, 0.9][..]));
    }

    #[test]
    fn input_norm_validation() {
        let p = random_params(Architecture::standard(8, 8, 3, 4), 2);
        assert!(p.clone().with_input_norm(vec![0.0; 2], vec![1.0; 2]).is_err());
        assert!(p.clone().with_input_norm(vec![0.0; 3], vec![1.0, 0.0, 1.0]).is_err());
        assert!(p.with_input_norm(vec![f64::NAN, 0.0, 0.0], vec![1.0; 3]).is_err());
    }

    #[test]
    fn params_file_rejects_corruption() {
        let p = random_params(Architecture::standard(8, 8, 3, 4), 13);
        let mut bytes = p.to_bytes();
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(ModelParams::from_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::standard(30, 32, 3, 4).validate().is_err());
        assert!(Architecture::standard(32, 32, 3, 1).validate().is_err());
        assert!(Architecture::dense_only(3, 5, 1, 2).validate().is_ok());
        assert_eq!(Architecture::standard(32, 32, 3, 4).feature_len(), 8 * 8 * 16);
    }
}
