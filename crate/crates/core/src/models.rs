//! Encoder, decoder, classifier head and domain head.
//!
//! Presets fix the layer counts (9 conv / 8 upsampling stages for `clas`,
//! 12 / 11 for `apnea`, two dense layers per head). Kernel size 3 with
//! padding 1 is used throughout; stride-2 encoder layers and factor-2
//! decoder stages are spread evenly so the length trace lands exactly on
//! `latent_dim` at the configured input length.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::ops::conv_out_len;
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_LATENT_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Clas,
    Apnea,
    Custom,
}

impl Preset {
    pub fn default_input_len(self) -> usize {
        match self {
            Preset::Clas | Preset::Custom => 256,
            Preset::Apnea => 1024,
        }
    }

    fn encoder_channels(self) -> &'static [usize] {
        match self {
            Preset::Clas | Preset::Custom => &[8, 8, 16, 16, 32, 32, 16, 8, 1],
            Preset::Apnea => &[8, 8, 16, 16, 32, 32, 32, 32, 16, 16, 8, 1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Nearest-neighbour upsampling by `factor` followed by a stride-1 conv.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsampleStage {
    pub factor: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub preset: Preset,
    pub input_len: usize,
    pub latent_dim: usize,
    pub encoder: Vec<ConvLayer>,
    pub decoder: Vec<UpsampleStage>,
    /// Dense widths of the classifier head; the last is 1.
    pub classifier: Vec<usize>,
    /// Dense widths of the domain head; the last is the subject count.
    pub domain_head: Vec<usize>,
}

/// `count` positions spread evenly over `0..slots`.
fn spread(count: usize, slots: usize) -> Vec<usize> {
    (0..count).map(|i| i * slots / count).collect()
}

impl ModelSpec {
    /// Preset architecture for `input_len = latent_dim * 2^h`.
    pub fn preset(preset: Preset, input_len: usize, n_domains: usize) -> Result<Self> {
        let latent_dim = DEFAULT_LATENT_DIM;
        let channels = preset.encoder_channels();
        let n_enc = channels.len();
        let n_dec = n_enc - 1;
        if input_len % latent_dim != 0 || !(input_len / latent_dim).is_power_of_two() {
            return Err(invalid(
                "model preset",
                format!("input length {input_len} must be {latent_dim} times a power of two"),
            ));
        }
        let halvings = (input_len / latent_dim).trailing_zeros() as usize;
        if halvings > n_dec {
            return Err(invalid(
                "model preset",
                format!("input length {input_len} needs {halvings} halvings; preset allows {n_dec}"),
            ));
        }
        if n_domains == 0 {
            return Err(invalid("model preset", "domain head needs at least one subject"));
        }
        let strided = spread(halvings, n_enc);
        let encoder = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| ConvLayer {
                out_channels: c,
                kernel: 3,
                stride: if strided.contains(&i) { 2 } else { 1 },
                padding: 1,
            })
            .collect();
        let mut dec_channels: Vec<usize> = channels[..n_enc - 1].iter().rev().copied().collect();
        *dec_channels.last_mut().unwrap() = 1;
        let upsampled = spread(halvings, n_dec);
        let decoder = dec_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| UpsampleStage {
                factor: if upsampled.contains(&i) { 2 } else { 1 },
                out_channels: c,
                kernel: 3,
                padding: 1,
            })
            .collect();
        let spec = Self {
            preset,
            input_len,
            latent_dim,
            encoder,
            decoder,
            classifier: vec![16, 1],
            domain_head: vec![16, n_domains],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_domains(&self) -> usize {
        self.domain_head.last().copied().unwrap_or(0)
    }

    /// Returns a copy with the domain head resized to `n` subjects.
    pub fn with_domains(&self, n: usize) -> Self {
        let mut s = self.clone();
        if let Some(last) = s.domain_head.last_mut() {
            *last = n;
        }
        s
    }

    /// `(channels, length)` after each encoder layer.
    pub fn encoder_trace(&self) -> Vec<(usize, Option<usize>)> {
        let mut len = Some(self.input_len);
        self.encoder
            .iter()
            .map(|l| {
                len = len.and_then(|n| conv_out_len(n, l.kernel, l.stride, l.padding));
                (l.out_channels, len)
            })
            .collect()
    }

    fn latent_shape(&self) -> Option<(usize, usize)> {
        let (c, len) = *self.encoder_trace().last()?;
        Some((c, len?))
    }

    fn trace_string(&self) -> String {
        let mut s = format!("1x{}", self.input_len);
        for (c, len) in self.encoder_trace() {
            match len {
                Some(n) => s.push_str(&format!(" -> {c}x{n}")),
                None => s.push_str(" -> invalid"),
            }
        }
        s
    }

    /// Checks that the encoder closes onto `latent_dim` and the decoder
    /// returns to `1 x input_len`.
    pub fn validate(&self) -> Result<()> {
        let chain_err = || Error::ShapeChain {
            trace: self.trace_string(),
            latent_dim: self.latent_dim,
        };
        if self.encoder.is_empty() || self.input_len == 0 || self.latent_dim == 0 {
            return Err(chain_err());
        }
        if self
            .encoder
            .iter()
            .any(|l| l.out_channels == 0 || l.kernel == 0 || l.stride == 0)
        {
            return Err(invalid("model spec", "zero channel, kernel or stride in encoder"));
        }
        let (c, len) = self.latent_shape().ok_or_else(chain_err)?;
        if c * len != self.latent_dim {
            return Err(chain_err());
        }
        let (mut c, mut len) = (c, len);
        let mut trace = format!("{c}x{len}");
        for st in &self.decoder {
            if st.factor == 0 || st.out_channels == 0 || st.kernel == 0 {
                return Err(invalid("model spec", "zero factor, channel or kernel in decoder"));
            }
            len = conv_out_len(len * st.factor, st.kernel, 1, st.padding)
                .ok_or_else(|| invalid("model spec", format!("decoder trace {trace} breaks")))?;
            c = st.out_channels;
            trace.push_str(&format!(" -> {c}x{len}"));
        }
        if c != 1 || len != self.input_len {
            return Err(invalid(
                "model spec",
                format!("decoder trace {trace} does not return to 1x{}", self.input_len),
            ));
        }
        if self.classifier.last() != Some(&1) || self.classifier.contains(&0) {
            return Err(invalid("model spec", "classifier widths must be positive and end in 1"));
        }
        if self.domain_head.is_empty() || self.domain_head.contains(&0) {
            return Err(invalid("model spec", "domain head widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub kernels: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Parameter groups, in flat-order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
    Classifier,
    DomainHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub seed: u64,
    pub encoder: Vec<ConvParams>,
    pub decoder: Vec<ConvParams>,
    pub classifier: Vec<DenseParams>,
    pub domain_head: Vec<DenseParams>,
}

fn glorot(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-limit, limit)).collect()).unwrap()
}

fn dense_stack(rng: &mut Rng, input: usize, widths: &[usize]) -> Vec<DenseParams> {
    let mut fan_in = input;
    widths
        .iter()
        .map(|&w| {
            let p = DenseParams {
                weights: glorot(rng, &[w, fan_in], fan_in, w),
                bias: Tensor::zeros(&[w]),
            };
            fan_in = w;
            p
        })
        .collect()
}

/// Initializes parameters: Glorot-uniform weights, zero biases.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = Rng::with_stream(seed, stream::INIT);
    let mut c_in = 1;
    let encoder = spec
        .encoder
        .iter()
        .map(|l| {
            let p = ConvParams {
                kernels: glorot(
                    &mut rng,
                    &[l.out_channels, c_in, l.kernel],
                    c_in * l.kernel,
                    l.out_channels * l.kernel,
                ),
                bias: Tensor::zeros(&[l.out_channels]),
            };
            c_in = l.out_channels;
            p
        })
        .collect();
    let decoder = spec
        .decoder
        .iter()
        .map(|st| {
            let p = ConvParams {
                kernels: glorot(
                    &mut rng,
                    &[st.out_channels, c_in, st.kernel],
                    c_in * st.kernel,
                    st.out_channels * st.kernel,
                ),
                bias: Tensor::zeros(&[st.out_channels]),
            };
            c_in = st.out_channels;
            p
        })
        .collect();
    let classifier = dense_stack(&mut rng, spec.latent_dim, &spec.classifier);
    let domain_head = dense_stack(&mut rng, spec.latent_dim, &spec.domain_head);
    Ok(ModelParams {
        spec: spec.clone(),
        seed,
        encoder,
        decoder,
        classifier,
        domain_head,
    })
}

/// Graph handles for every parameter tensor of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    encoder: Vec<(Var, Var)>,
    decoder: Vec<(Var, Var)>,
    classifier: Vec<(Var, Var)>,
    domain_head: Vec<(Var, Var)>,
}

impl BoundParams {
    fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .chain(&self.classifier)
            .chain(&self.domain_head)
            .flat_map(|&(w, b)| [w, b])
    }

    /// Gradients in the flat parameter order of [`ModelParams::tensors`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.all().map(|v| grads.get(v).cloned()).collect()
    }
}

impl ModelParams {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let convs = self
            .encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|p| [&p.kernels, &p.bias]);
        let dense = self
            .classifier
            .iter()
            .chain(&self.domain_head)
            .flat_map(|p| [&p.weights, &p.bias]);
        convs.chain(dense).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let convs = self
            .encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|p| [&mut p.kernels, &mut p.bias]);
        let dense = self
            .classifier
            .iter_mut()
            .chain(self.domain_head.iter_mut())
            .flat_map(|p| [&mut p.weights, &mut p.bias]);
        convs.chain(dense).collect()
    }

    /// Which part each flat tensor belongs to.
    pub fn parts(&self) -> Vec<Part> {
        let mut v = Vec::new();
        v.extend(core::iter::repeat_n(Part::Encoder, 2 * self.encoder.len()));
        v.extend(core::iter::repeat_n(Part::Decoder, 2 * self.decoder.len()));
        v.extend(core::iter::repeat_n(Part::Classifier, 2 * self.classifier.len()));
        v.extend(core::iter::repeat_n(Part::DomainHead, 2 * self.domain_head.len()));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let conv = |g: &mut Graph, ps: &[ConvParams]| -> Vec<(Var, Var)> {
            ps.iter()
                .map(|p| (g.leaf(p.kernels.clone()), g.leaf(p.bias.clone())))
                .collect()
        };
        let dense = |g: &mut Graph, ps: &[DenseParams]| -> Vec<(Var, Var)> {
            ps.iter()
                .map(|p| (g.leaf(p.weights.clone()), g.leaf(p.bias.clone())))
                .collect()
        };
        BoundParams {
            encoder: conv(g, &self.encoder),
            decoder: conv(g, &self.decoder),
            classifier: dense(g, &self.classifier),
            domain_head: dense(g, &self.domain_head),
        }
    }

    fn check_series(&self, x: &Tensor) -> Result<()> {
        let len = x.shape().last().copied().unwrap_or(0);
        let ok = matches!(x.shape(), [1, _] | [_, 1, _]) && len == self.spec.input_len;
        if !ok {
            return Err(invalid(
                "encode",
                format!(
                    "expected [1, {0}] or [B, 1, {0}], got {1:?}",
                    self.spec.input_len,
                    x.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Forward-only encoding of `[1, L]` or `[B, 1, L]`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let xv = g.leaf(x.clone());
        let e = encode(&mut g, self, &b, xv)?;
        Ok(g.value(e).clone())
    }

    pub fn decode_tensor(&self, e: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let ev = g.leaf(e.clone());
        let x = decode(&mut g, self, &b, ev)?;
        Ok(g.value(x).clone())
    }

    pub fn classify_tensor(&self, e: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let ev = g.leaf(e.clone());
        let p = classify(&mut g, self, &b, ev)?;
        Ok(g.value(p).clone())
    }

    pub fn classify_domain_tensor(&self, e: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let ev = g.leaf(e.clone());
        let p = classify_domain(&mut g, self, &b, ev)?;
        Ok(g.value(p).clone())
    }
}

/// Latent codes: `[1, L] -> [latent_dim]`, `[B, 1, L] -> [B, latent_dim]`.
pub fn encode(g: &mut Graph, params: &ModelParams, bound: &BoundParams, x: Var) -> Result<Var> {
    params.check_series(g.value(x))?;
    let batched = g.value(x).rank() == 3;
    let batch = g.value(x).shape()[0];
    let mut h = x;
    let last = params.spec.encoder.len() - 1;
    for (i, (layer, &(w, b))) in params.spec.encoder.iter().zip(&bound.encoder).enumerate() {
        h = g.conv1d(h, w, b, layer.stride, layer.padding)?;
        if i < last {
            h = g.relu(h);
        }
    }
    let d = params.spec.latent_dim;
    if batched {
        g.reshape(h, &[batch, d])
    } else {
        g.reshape(h, &[d])
    }
}

/// Reconstruction: `[latent_dim] -> [1, L]`, `[B, latent_dim] -> [B, 1, L]`.
pub fn decode(g: &mut Graph, params: &ModelParams, bound: &BoundParams, e: Var) -> Result<Var> {
    let (c, len) = params.spec.latent_shape().expect("validated spec");
    let shape = g.value(e).shape().to_vec();
    let mut h = match *shape.as_slice() {
        [d] if d == params.spec.latent_dim => g.reshape(e, &[c, len])?,
        [b, d] if d == params.spec.latent_dim => g.reshape(e, &[b, c, len])?,
        _ => {
            return Err(invalid(
                "decode",
                format!("expected latent width {}, got {shape:?}", params.spec.latent_dim),
            ))
        }
    };
    let last = params.spec.decoder.len().saturating_sub(1);
    for (i, (st, &(w, b))) in params.spec.decoder.iter().zip(&bound.decoder).enumerate() {
        if st.factor > 1 {
            h = g.upsample_nearest(h, st.factor)?;
        }
        h = g.conv1d(h, w, b, 1, st.padding)?;
        if i < last {
            h = g.relu(h);
        }
    }
    Ok(h)
}

fn dense_head(g: &mut Graph, layers: &[(Var, Var)], latent_dim: usize, e: Var) -> Result<Var> {
    let w = *g.value(e).shape().last().unwrap_or(&0);
    if w != latent_dim || g.value(e).rank() > 2 {
        return Err(invalid(
            "dense head",
            format!("expected latent width {latent_dim}, got {:?}", g.value(e).shape()),
        ));
    }
    let mut h = e;
    for (i, &(wv, bv)) in layers.iter().enumerate() {
        h = g.dense(h, wv, bv)?;
        if i + 1 < layers.len() {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Probability of class 1: `[latent_dim] -> [1]`, `[B, latent_dim] -> [B]`.
pub fn classify(g: &mut Graph, params: &ModelParams, bound: &BoundParams, e: Var) -> Result<Var> {
    let logits = dense_head(g, &bound.classifier, params.spec.latent_dim, e)?;
    let n = g.value(logits).len();
    let flat = g.reshape(logits, &[n])?;
    Ok(g.sigmoid(flat))
}

/// Softmax over subjects. Callers place the gradient reversal before this.
pub fn classify_domain(g: &mut Graph, params: &ModelParams, bound: &BoundParams, e: Var) -> Result<Var> {
    let logits = dense_head(g, &bound.domain_head, params.spec.latent_dim, e)?;
    Ok(g.softmax(logits))
}
