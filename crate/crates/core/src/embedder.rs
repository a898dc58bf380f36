//! Image-embedding network.
//!
//! A small convolutional stack maps an RGB image to a feature map; per-channel
//! max pooling over that map (globally, or over sliding windows) followed by
//! L2 normalization yields the global descriptor and the local features.
//! Training minimizes a hinge ranking loss over (anchor, positive, negative)
//! image triplets, where the anchor is synthesized from the positive by
//! random augmentation, using an adaptive-moment gradient optimizer.
//!
//! The architecture family is fixed: a sequence of square valid convolutions,
//! each followed by ReLU, with a 2x2/stride-2 max pool between consecutive
//! convolutions (never after the last). A network is therefore fully
//! determined by its convolution kernel tensors plus the input resolution,
//! which is what the checkpoint format stores and what
//! [`EmbedderNet::from_conv_stack`] rebuilds.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};
use crate::img::resize_bilinear;
use crate::store::cosine_distance;
use crate::tensor::{
    conv2d, conv2d_backward, l2_normalize, l2_normalize_backward, maxpool, maxpool_backward,
    out_extent, relu, relu_backward, Tensor,
};

const CHECKPOINT_MAGIC: &[u8; 4] = b"EMB1";

/// Unit-norm global image descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor(Vec<f32>);

impl Descriptor {
    /// Wraps a vector, enforcing unit Euclidean norm within 1e-6.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("descriptor must be non-empty".into()));
        }
        let norm: f64 = values.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Contract("descriptor has non-finite values".into()));
        }
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "descriptor norm {norm} deviates from 1 by more than 1e-6"
            )));
        }
        Ok(Descriptor(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One max-pooled window of the final feature map: its L2-normalized channel
/// vector `f`, its center `(x, y)` reprojected into the network-input frame
/// (the `input_size` x `input_size` image the network actually consumes), and
/// the unit vector `v` pointing from `(x, y)` toward the image center. A
/// feature exactly at the center gets `v = (0, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeature {
    pub x: f32,
    pub y: f32,
    pub v: [f32; 2],
    pub f: Vec<f32>,
}

/// A training triplet: an augmented anchor image plus indices of the positive
/// (the anchor's source) and negative reference images, which are guaranteed
/// to belong to distinct products.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub anchor: Tensor,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug)]
enum Layer {
    Conv { kernels: Tensor, stride: usize },
    Relu,
    Pool { kernel: usize, stride: usize },
}

impl Layer {
    /// (kernel extent, stride) for receptive-field composition.
    fn geometry(&self) -> (usize, usize) {
        match self {
            Layer::Conv { kernels, stride } => (kernels.shape()[0], *stride),
            Layer::Relu => (1, 1),
            Layer::Pool { kernel, stride } => (*kernel, *stride),
        }
    }
}

/// Convolutional embedding network with a fixed conv/ReLU/pool interleave.
#[derive(Debug)]
pub struct EmbedderNet {
    input_size: usize,
    layers: Vec<Layer>,
}

fn init_kernel(extent: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Tensor {
    // Fan-in scaled uniform init keeps activation magnitudes stable across
    // depths, so untrained descriptors are well-conditioned.
    let fan_in = (extent * extent * cin) as f64;
    let limit = (6.0 / fan_in).sqrt() as f32;
    let n = extent * extent * cin * cout;
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(vec![extent, extent, cin, cout], data).expect("init shape is consistent")
}

impl EmbedderNet {
    /// Default three-convolution backbone producing `dim`-channel descriptors,
    /// with weights drawn from a seeded generator.
    pub fn new(input_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("descriptor dimension must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = [(5, 3, 16), (5, 16, 32), (3, 32, dim)];
        let kernels = specs
            .iter()
            .map(|&(k, cin, cout)| init_kernel(k, cin, cout, &mut rng))
            .collect();
        Self::from_conv_stack(input_size, kernels)
    }

    /// Builds a network from an ordered list of convolution kernel tensors
    /// (each `[K, K, Cin, Cout]`), inserting ReLU after every convolution and
    /// a 2x2/stride-2 max pool between consecutive convolutions.
    pub fn from_conv_stack(input_size: usize, kernels: Vec<Tensor>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::Dimension("network needs at least one convolution".into()));
        }
        let mut layers = Vec::new();
        let mut prev_out = None;
        let last = kernels.len() - 1;
        for (i, k) in kernels.into_iter().enumerate() {
            let shape = k.shape().to_vec();
            if shape.len() != 4 {
                return Err(Error::Dimension(format!(
                    "convolution kernel {i} must have rank 4, got {shape:?}"
                )));
            }
            if shape[0] != shape[1] {
                return Err(Error::Dimension(format!(
                    "convolution kernel {i} must be square, got {}x{}",
                    shape[0], shape[1]
                )));
            }
            if let Some(prev) = prev_out {
                if shape[2] != prev {
                    return Err(Error::Dimension(format!(
                        "convolution {i} expects {} input channels but the previous layer emits {prev}",
                        shape[2]
                    )));
                }
            }
            prev_out = Some(shape[3]);
            layers.push(Layer::Conv { kernels: k, stride: 1 });
            layers.push(Layer::Relu);
            if i != last {
                layers.push(Layer::Pool { kernel: 2, stride: 2 });
            }
        }
        let net = EmbedderNet { input_size, layers };
        let extent = net.feature_extent()?;
        if extent == 0 {
            return Err(Error::Dimension(format!(
                "input size {input_size} is too small for the layer stack"
            )));
        }
        Ok(net)
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// Channel count expected of input images (first convolution's Cin).
    pub fn in_channels(&self) -> usize {
        match &self.layers[0] {
            Layer::Conv { kernels, .. } => kernels.shape()[2],
            _ => unreachable!("layer stacks always start with a convolution"),
        }
    }

    /// Descriptor dimensionality (final convolution's channel count).
    pub fn descriptor_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv { kernels, .. } => Some(kernels.shape()[3]),
                _ => None,
            })
            .expect("layer stacks always contain a convolution")
    }

    /// Side length of the (square) final feature map.
    pub fn feature_extent(&self) -> Result<usize> {
        let mut extent = self.input_size;
        for layer in &self.layers {
            let (k, s) = layer.geometry();
            if k > extent {
                return Err(Error::Dimension(format!(
                    "layer window {k} exceeds current extent {extent}"
                )));
            }
            extent = out_extent(extent, k, s);
        }
        Ok(extent)
    }

    /// Ordered convolution kernel tensors.
    pub fn conv_kernels(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { kernels, .. } => Some(kernels),
                _ => None,
            })
            .collect()
    }

    fn conv_kernels_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv { kernels, .. } => Some(kernels),
                _ => None,
            })
            .collect()
    }

    /// Affine map `(scale, offset)` such that a (fractional) final-feature-map
    /// coordinate `u` sits at `scale * u + offset` in the network-input frame.
    /// Composed from each layer's stride and window center back to front.
    pub fn feature_projection(&self) -> (f64, f64) {
        let (mut a, mut b) = (1.0, 0.0);
        for layer in self.layers.iter().rev() {
            let (k, s) = layer.geometry();
            a *= s as f64;
            b = b * s as f64 + (k as f64 - 1.0) / 2.0;
        }
        (a, b)
    }

    /// Validates channel count and stretch-resizes to the network input
    /// resolution (a no-op clone when the image is already that size).
    fn prepare(&self, image: &Tensor) -> Result<Tensor> {
        let shape = image.shape();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "expected an [H, W, C] image, got shape {shape:?}"
            )));
        }
        if shape[2] != self.in_channels() {
            return Err(Error::Dimension(format!(
                "image has {} channels, network expects {}",
                shape[2],
                self.in_channels()
            )));
        }
        resize_bilinear(image, self.input_size, self.input_size)
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut cur = input.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv { kernels, stride } => conv2d(&cur, kernels, *stride)?,
                Layer::Relu => relu(&cur),
                Layer::Pool { kernel, stride } => maxpool(&cur, *kernel, *stride)?.output,
            };
        }
        Ok(cur)
    }

    fn forward_trace(&self, input: &Tensor) -> Result<Trace> {
        let mut cur = input.clone();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut argmax = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            inputs.push(cur.clone());
            match layer {
                Layer::Conv { kernels, stride } => {
                    cur = conv2d(&cur, kernels, *stride)?;
                    argmax.push(None);
                }
                Layer::Relu => {
                    cur = relu(&cur);
                    argmax.push(None);
                }
                Layer::Pool { kernel, stride } => {
                    let pooled = maxpool(&cur, *kernel, *stride)?;
                    cur = pooled.output;
                    argmax.push(Some(pooled.argmax));
                }
            }
        }
        Ok(Trace { inputs, argmax, output: cur })
    }

    /// Final feature map for an image (after resize), exposed so callers can
    /// cross-check pooled outputs against the raw map.
    pub fn feature_map(&self, image: &Tensor) -> Result<Tensor> {
        let input = self.prepare(image)?;
        self.forward(&input)
    }

    /// Global descriptor: per-channel max over the final feature map,
    /// L2-normalized.
    pub fn embed(&self, image: &Tensor) -> Result<Descriptor> {
        let input = self.prepare(image)?;
        let map = self.forward(&input)?;
        let mac = channel_max_global(&map);
        Descriptor::new(l2_normalize(&mac.values)?)
    }

    /// Local features: per-channel max over each `kernel`-sized window of the
    /// final feature map, slid with `stride`, each L2-normalized and tagged
    /// with its reprojected center position.
    pub fn local_features(
        &self,
        image: &Tensor,
        kernel: usize,
        stride: usize,
    ) -> Result<Vec<LocalFeature>> {
        let input = self.prepare(image)?;
        let map = self.forward(&input)?;
        self.locals_from_map(&map, kernel, stride)
    }

    /// Global descriptor and local features from a single forward pass.
    pub fn describe(
        &self,
        image: &Tensor,
        kernel: usize,
        stride: usize,
    ) -> Result<(Descriptor, Vec<LocalFeature>)> {
        let input = self.prepare(image)?;
        let map = self.forward(&input)?;
        let mac = channel_max_global(&map);
        let descriptor = Descriptor::new(l2_normalize(&mac.values)?)?;
        let locals = self.locals_from_map(&map, kernel, stride)?;
        Ok((descriptor, locals))
    }

    fn locals_from_map(&self, map: &Tensor, kernel: usize, stride: usize) -> Result<Vec<LocalFeature>> {
        let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        if kernel == 0 || stride == 0 {
            return Err(Error::Dimension("window and stride must be >= 1".into()));
        }
        if kernel > h || kernel > w {
            return Err(Error::Dimension(format!(
                "window {kernel} exceeds the {h}x{w} feature map"
            )));
        }
        let ny = out_extent(h, kernel, stride);
        let nx = out_extent(w, kernel, stride);
        let (a, b) = self.feature_projection();
        let center = (self.input_size as f64 - 1.0) / 2.0;
        let mut locals = Vec::with_capacity(ny * nx);
        for wy in 0..ny {
            for wx in 0..nx {
                let mut vals = vec![f32::NEG_INFINITY; c];
                for y in wy * stride..wy * stride + kernel {
                    for x in wx * stride..wx * stride + kernel {
                        for (ch, val) in vals.iter_mut().enumerate() {
                            let cand = map.at3(y, x, ch);
                            if cand > *val {
                                *val = cand;
                            }
                        }
                    }
                }
                // A window the rectifier silenced completely has no
                // direction to describe; emit no local feature for it.
                if vals.iter().all(|&v| v <= 0.0) {
                    continue;
                }
                let f = l2_normalize(&vals)?;
                let half = (kernel as f64 - 1.0) / 2.0;
                let x = a * (wx * stride) as f64 + a * half + b;
                let y = a * (wy * stride) as f64 + a * half + b;
                let (dx, dy) = (center - x, center - y);
                let norm = (dx * dx + dy * dy).sqrt();
                let v = if norm < 1e-9 {
                    [0.0, 0.0]
                } else {
                    [(dx / norm) as f32, (dy / norm) as f32]
                };
                locals.push(LocalFeature { x: x as f32, y: y as f32, v, f });
            }
        }
        Ok(locals)
    }

    /// Writes the convolution kernels to a binary checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Writer::new(BufWriter::new(file));
        w.magic(CHECKPOINT_MAGIC)?;
        for kernels in self.conv_kernels() {
            w.u32(kernels.shape().len() as u32)?;
            for &d in kernels.shape() {
                w.u32(d as u32)?;
            }
            w.f32_slice(kernels.data())?;
        }
        w.finish()
    }

    /// Reads a checkpoint written by [`save`](Self::save) and rebuilds the
    /// network for the given input resolution (which the file does not store).
    pub fn load(path: impl AsRef<Path>, input_size: usize) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(BufReader::new(file));
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let mut kernels = Vec::new();
        while let Some(rank) = r.maybe_u32("tensor rank")? {
            if rank != 4 {
                return Err(Error::Format {
                    offset: r.offset() - 4,
                    msg: format!("kernel tensors must have rank 4, got {rank}"),
                });
            }
            let mut dims = Vec::with_capacity(4);
            for _ in 0..4 {
                let d = r.u32("tensor dimension")?;
                if d == 0 || d > 65_536 {
                    return Err(Error::Format {
                        offset: r.offset() - 4,
                        msg: format!("implausible tensor dimension {d}"),
                    });
                }
                dims.push(d as usize);
            }
            let n: usize = dims.iter().product();
            let data = r.f32_vec(n, "tensor data")?;
            kernels.push(Tensor::new(dims, data).expect("dims were just validated"));
        }
        let offset = r.offset();
        Self::from_conv_stack(input_size, kernels).map_err(|e| Error::Format {
            offset,
            msg: format!("checkpoint does not describe a valid network: {e}"),
        })
    }
}

struct Trace {
    inputs: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
    output: Tensor,
}

struct ChannelMax {
    values: Vec<f32>,
    /// Flat data index of each channel's maximum (row-major scan, first wins).
    argmax: Vec<usize>,
}

fn channel_max_global(map: &Tensor) -> ChannelMax {
    let c = map.shape()[2];
    let mut values = vec![f32::NEG_INFINITY; c];
    let mut argmax = vec![0usize; c];
    for (i, &v) in map.data().iter().enumerate() {
        let ch = i % c;
        if v > values[ch] {
            values[ch] = v;
            argmax[ch] = i;
        }
    }
    ChannelMax { values, argmax }
}

/// Hinge ranking loss over three unit-norm descriptors:
/// `max(0, d(anchor, positive) - d(anchor, negative) + alpha)` with `d` the
/// cosine distance.
pub fn triplet_loss(
    anchor: &Descriptor,
    positive: &Descriptor,
    negative: &Descriptor,
    alpha: f64,
) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Validation(format!("margin must be >= 0, got {alpha}")));
    }
    let dp = cosine_distance(anchor, positive)?;
    let dn = cosine_distance(anchor, negative)?;
    Ok((dp - dn + alpha).max(0.0))
}

/// Runs the three images through the network, evaluates the triplet loss, and
/// returns it along with its gradient w.r.t. every convolution kernel (one
/// tensor per convolution, in network order; all zeros when the hinge is
/// inactive).
pub fn triplet_loss_with_grad(
    net: &EmbedderNet,
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    alpha: f64,
) -> Result<(f64, Vec<Tensor>)> {
    if !(alpha >= 0.0) {
        return Err(Error::Validation(format!("margin must be >= 0, got {alpha}")));
    }
    let mut grads: Vec<Tensor> = net
        .conv_kernels()
        .iter()
        .map(|k| Tensor::zeros(k.shape().to_vec()))
        .collect();

    let mut branches = Vec::with_capacity(3);
    for image in [anchor, positive, negative] {
        let input = net.prepare(image)?;
        let trace = net.forward_trace(&input)?;
        let mac = channel_max_global(&trace.output);
        let desc = l2_normalize(&mac.values)?;
        branches.push((trace, mac, desc));
    }
    let (a, p, n) = (&branches[0].2, &branches[1].2, &branches[2].2);
    let dot = |x: &[f32], y: &[f32]| -> f64 {
        x.iter().zip(y).map(|(&u, &v)| u as f64 * v as f64).sum()
    };
    let loss = ((1.0 - dot(a, p)) - (1.0 - dot(a, n)) + alpha).max(0.0);
    if loss <= 0.0 {
        return Ok((loss, grads));
    }

    // With unit descriptors the active hinge is a*n - a*p + alpha, so the
    // descriptor-space gradients are n - p, -a, and a respectively.
    let ga: Vec<f32> = n.iter().zip(p).map(|(&ni, &pi)| ni - pi).collect();
    let gp: Vec<f32> = a.iter().map(|&ai| -ai).collect();
    let gn: Vec<f32> = a.to_vec();

    for ((trace, mac, _), gdesc) in branches.iter().zip([ga, gp, gn]) {
        backprop_branch(net, trace, mac, &gdesc, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Propagates a descriptor-space gradient through normalization, the global
/// channel max, and the layer stack, accumulating into `grads`.
fn backprop_branch(
    net: &EmbedderNet,
    trace: &Trace,
    mac: &ChannelMax,
    grad_desc: &[f32],
    grads: &mut [Tensor],
) -> Result<()> {
    let gmac = l2_normalize_backward(grad_desc, &mac.values)?;
    let mut gmap = Tensor::zeros(trace.output.shape().to_vec());
    for (ch, &idx) in mac.argmax.iter().enumerate() {
        gmap.data_mut()[idx] += gmac[ch];
    }

    let mut cur = gmap;
    let mut slot = grads.len();
    for (i, layer) in net.layers.iter().enumerate().rev() {
        match layer {
            Layer::Conv { kernels, stride } => {
                slot -= 1;
                let (gin, gk) = conv2d_backward(&cur, &trace.inputs[i], kernels, *stride)?;
                let dst = grads[slot].data_mut();
                for (d, s) in dst.iter_mut().zip(gk.data()) {
                    *d += s;
                }
                cur = gin;
            }
            Layer::Relu => {
                cur = relu_backward(&cur, &trace.inputs[i])?;
            }
            Layer::Pool { .. } => {
                let argmax = trace.argmax[i].as_ref().expect("pool layers record argmax");
                cur = maxpool_backward(&cur, argmax, trace.inputs[i].shape())?;
            }
        }
    }
    Ok(())
}

/// Samples a training triplet: positive and negative reference images of two
/// distinct, uniformly drawn products, plus an augmented copy of the positive
/// as the anchor.
pub fn make_triplet(
    images: &[(String, Tensor)],
    rng: &mut impl Rng,
    aug: &AugmentConfig,
) -> Result<Triplet> {
    if images.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "triplet sampling needs at least 2 products, got {}",
            images.len()
        )));
    }
    let positive = rng.random_range(0..images.len());
    let mut negative = rng.random_range(0..images.len() - 1);
    if negative >= positive {
        negative += 1;
    }
    let anchor = augment(&images[positive].1, rng, aug)?;
    Ok(Triplet { anchor, positive, negative })
}

/// Training hyperparameters. JSON-serializable; omitted keys take defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Ranking-loss margin.
    pub alpha: f64,
    /// Learning rate.
    pub lr: f64,
    /// Number of optimizer steps.
    pub steps: usize,
    /// Triplets per step.
    pub batch: usize,
    /// Seed for triplet sampling and augmentation.
    pub seed: u64,
    /// Network input resolution (images are stretch-resized to this square).
    pub input_size: usize,
    /// Descriptor dimensionality for newly initialized networks.
    pub dim: usize,
    /// Anchor-synthesis augmentation parameters.
    pub aug: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            lr: 1e-6,
            steps: 10_000,
            batch: 24,
            seed: 0,
            input_size: 64,
            dim: 32,
            aug: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.input_size == 0 {
            return Err(Error::Config("input_size must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment gradient optimizer with bias correction.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(sizes: &[usize], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn step(&mut self, weights: &mut [&mut Tensor], grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((w, g), (m, v)) in weights
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = w.data_mut();
            for i in 0..data.len() {
                let gi = g.data()[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = (data[i] as f64 - self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

/// Trains the network in place on uniquely-labeled reference images, one
/// triplet batch per step. Returns the mean batch loss per step.
pub fn train(
    net: &mut EmbedderNet,
    images: &[(String, Tensor)],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if images.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "training needs at least 2 products, got {}",
            images.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (id, _) in images {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateProduct(id.clone()));
        }
    }

    let sizes: Vec<usize> = net.conv_kernels().iter().map(|k| k.len()).collect();
    let mut opt = Adam::new(&sizes, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let mut batch_grads: Vec<Tensor> = net
            .conv_kernels()
            .iter()
            .map(|k| Tensor::zeros(k.shape().to_vec()))
            .collect();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let t = make_triplet(images, &mut rng, &cfg.aug)?;
            let (loss, grads) = triplet_loss_with_grad(
                net,
                &t.anchor,
                &images[t.positive].1,
                &images[t.negative].1,
                cfg.alpha,
            )?;
            batch_loss += loss;
            for (acc, g) in batch_grads.iter_mut().zip(&grads) {
                let dst = acc.data_mut();
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
        let mean_loss = batch_loss / cfg.batch as f64;
        if !mean_loss.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        let scale = 1.0 / cfg.batch as f32;
        for g in &mut batch_grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        opt.step(&mut net.conv_kernels_mut(), &batch_grads);
        for k in net.conv_kernels() {
            if k.assert_finite("weights").is_err() {
                return Err(Error::TrainingDiverged { step });
            }
        }
        log.push(mean_loss);
    }
    Ok(log)
}
