//! Classifier network definitions: layer specs, dropout masking, parameter
//! flattening, forward passes, loss-graph construction for gradients, and
//! the radial-feature wrapper that makes a model exactly rotation invariant.

use crate::diffgraph::{Graph, GraphBuilder, GraphError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("input has length {actual}, spec expects {expected}")]
    InputDim { expected: usize, actual: usize },
    #[error("parameter vector has length {actual}, spec implies {expected}")]
    ParamLen { expected: usize, actual: usize },
    #[error("dropout mask does not match spec hidden sizes")]
    MaskShape,
    #[error("graph error: {0}")]
    Graph(#[from] GraphError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Raw coordinates feed the first layer.
    Raw,
    /// The input is replaced by the single feature ||x||_2, making the
    /// network constant on spheres around the origin.
    Radial,
}

/// Architecture description shared by every parameter vector and ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub feature_mode: FeatureMode,
}

impl NetworkSpec {
    pub fn new(
        input_dim: usize,
        hidden_sizes: Vec<usize>,
        activation: Activation,
        num_classes: usize,
        dropout_rate: f64,
        feature_mode: FeatureMode,
    ) -> Result<Self, NetError> {
        if input_dim == 0 {
            return Err(NetError::InvalidSpec("input_dim must be positive".into()));
        }
        if num_classes < 2 {
            return Err(NetError::InvalidSpec("num_classes must be >= 2".into()));
        }
        if hidden_sizes.iter().any(|&h| h == 0) {
            return Err(NetError::InvalidSpec("hidden sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(NetError::InvalidSpec(format!(
                "dropout_rate must be in [0,1), got {dropout_rate}"
            )));
        }
        Ok(NetworkSpec {
            input_dim,
            hidden_sizes,
            activation,
            num_classes,
            dropout_rate,
            feature_mode,
        })
    }

    /// Width seen by the first affine layer.
    pub fn effective_input_dim(&self) -> usize {
        match self.feature_mode {
            FeatureMode::Raw => self.input_dim,
            FeatureMode::Radial => 1,
        }
    }

    /// Layer widths from the (effective) input to the logits.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 2);
        dims.push(self.effective_input_dim());
        dims.extend_from_slice(&self.hidden_sizes);
        dims.push(self.num_classes);
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Flat view of all weights and biases of one network realisation.
/// Layout: for each layer, a row-major weight matrix followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub spec: NetworkSpec,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(spec: NetworkSpec, values: Vec<f64>) -> Result<Self, NetError> {
        let expected = spec.param_count();
        if values.len() != expected {
            return Err(NetError::ParamLen {
                expected,
                actual: values.len(),
            });
        }
        Ok(ParamVector { spec, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Per-layer `(weights, bias)` slices in layer order.
    pub fn layers(&self) -> Vec<(&[f64], &[f64])> {
        let dims = self.spec.layer_dims();
        let mut out = Vec::with_capacity(dims.len() - 1);
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let wlen = fan_in * fan_out;
            out.push((
                &self.values[offset..offset + wlen],
                &self.values[offset + wlen..offset + wlen + fan_out],
            ));
            offset += wlen + fan_out;
        }
        out
    }
}

/// Fixed keep/drop pattern over hidden units; a dropout ensemble member is
/// the shared parameters viewed through one of these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMask {
    pub keep: Vec<Vec<bool>>,
    pub seed: u64,
}

impl DropoutMask {
    pub fn sample(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = spec
            .hidden_sizes
            .iter()
            .map(|&h| {
                (0..h)
                    .map(|_| rand::Rng::random::<f64>(&mut rng) >= spec.dropout_rate)
                    .collect()
            })
            .collect();
        DropoutMask { keep, seed }
    }

    fn matches(&self, spec: &NetworkSpec) -> bool {
        self.keep.len() == spec.hidden_sizes.len()
            && self
                .keep
                .iter()
                .zip(&spec.hidden_sizes)
                .all(|(k, &h)| k.len() == h)
    }
}

/// Zero-mean Gaussian weights with per-layer scale `1/sqrt(fan_in)`; biases
/// start at zero. Deterministic for a fixed seed.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = spec.layer_dims();
    let mut values = Vec::with_capacity(spec.param_count());
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            let z: f64 = StandardNormal.sample(&mut rng);
            values.push(scale * z);
        }
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector {
        spec: spec.clone(),
        values,
    }
}

fn activate(act: Activation, v: f64) -> f64 {
    match act {
        Activation::Relu => v.max(0.0),
        Activation::Sine => v.sin(),
    }
}

fn radial_feature(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Logits for a single input, optionally through a fixed dropout mask with
/// inverted scaling (surviving activations scaled by `1/keep_rate`).
pub fn forward_logits(
    params: &ParamVector,
    x: &[f64],
    mask: Option<&DropoutMask>,
) -> Result<Vec<f64>, NetError> {
    let spec = &params.spec;
    if x.len() != spec.input_dim {
        return Err(NetError::InputDim {
            expected: spec.input_dim,
            actual: x.len(),
        });
    }
    if let Some(m) = mask {
        if !m.matches(spec) {
            return Err(NetError::MaskShape);
        }
    }
    let feat;
    let mut h: Vec<f64> = match spec.feature_mode {
        FeatureMode::Raw => x.to_vec(),
        FeatureMode::Radial => {
            feat = [radial_feature(x)];
            feat.to_vec()
        }
    };
    let layers = params.layers();
    let last = layers.len() - 1;
    let inv_keep = 1.0 / (1.0 - spec.dropout_rate);
    for (l, (w, b)) in layers.iter().enumerate() {
        let fan_in = h.len();
        let fan_out = b.len();
        let mut out = vec![0.0; fan_out];
        for i in 0..fan_out {
            let mut acc = b[i];
            for (j, &hj) in h.iter().enumerate().take(fan_in) {
                acc += w[i * fan_in + j] * hj;
            }
            out[i] = acc;
        }
        if l < last {
            for v in &mut out {
                *v = activate(spec.activation, *v);
            }
            if let Some(m) = mask {
                for (v, &keep) in out.iter_mut().zip(&m.keep[l]) {
                    *v = if keep { *v * inv_keep } else { 0.0 };
                }
            }
        }
        h = out;
    }
    Ok(h)
}

/// Batched logits: `xs` is `input_dim x n`, output is `num_classes x n`.
pub fn forward_logits_batch(
    params: &ParamVector,
    xs: &Tensor,
    mask: Option<&DropoutMask>,
) -> Result<Tensor, NetError> {
    let spec = &params.spec;
    if xs.rows() != spec.input_dim {
        return Err(NetError::InputDim {
            expected: spec.input_dim,
            actual: xs.rows(),
        });
    }
    let n = xs.cols();
    let mut logits = Vec::with_capacity(spec.num_classes * n);
    // Column-wise reuse of the single-input path keeps one forward
    // implementation; n is small at desk scale.
    let mut col = vec![0.0; spec.input_dim];
    for j in 0..n {
        for i in 0..spec.input_dim {
            col[i] = xs.values()[i * n + j];
        }
        let l = forward_logits(params, &col, mask)?;
        logits.extend(l);
    }
    // transpose from n x K to K x n
    let k = spec.num_classes;
    let mut out = vec![0.0; k * n];
    for j in 0..n {
        for i in 0..k {
            out[i * n + j] = logits[j * k + i];
        }
    }
    Ok(Tensor::matrix(k, n, out).expect("logit tensor"))
}

/// Max-subtraction stabilised softmax.
pub fn predict_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// Names of the graph inputs holding each layer's weights and biases.
pub fn param_input_names(spec: &NetworkSpec) -> Vec<String> {
    let layers = spec.layer_dims().len() - 1;
    let mut names = Vec::with_capacity(2 * layers);
    for l in 0..layers {
        names.push(format!("w{l}"));
        names.push(format!("b{l}"));
    }
    names
}

/// Binds a flat parameter vector to the per-layer graph inputs.
pub fn bind_params(params: &ParamVector) -> HashMap<String, Tensor> {
    let dims = params.spec.layer_dims();
    let mut binding = HashMap::new();
    for (l, ((w, b), d)) in params.layers().iter().zip(dims.windows(2)).enumerate() {
        binding.insert(
            format!("w{l}"),
            Tensor::matrix(d[1], d[0], w.to_vec()).expect("weight tensor"),
        );
        binding.insert(format!("b{l}"), Tensor::vector(b));
    }
    binding
}

/// Concatenates per-layer gradients back into flat parameter order.
pub fn grad_flat(
    graph: &Graph,
    binding: &HashMap<String, Tensor>,
    spec: &NetworkSpec,
) -> Result<Vec<f64>, NetError> {
    let mut flat = Vec::with_capacity(spec.param_count());
    let layers = spec.layer_dims().len() - 1;
    for l in 0..layers {
        flat.extend(graph.grad(binding, &format!("w{l}"))?.values());
        flat.extend(graph.grad(binding, &format!("b{l}"))?.values());
    }
    Ok(flat)
}

fn mask_const(
    g: &mut GraphBuilder,
    keep: &[bool],
    inv_keep: f64,
    cols: usize,
    rank1: bool,
) -> crate::diffgraph::NodeId {
    let rows = keep.len();
    let mut vals = vec![0.0; rows * cols];
    for (i, &k) in keep.iter().enumerate() {
        if k {
            for j in 0..cols {
                vals[i * cols + j] = inv_keep;
            }
        }
    }
    let t = if rank1 && cols == 1 && rows > 0 {
        Tensor::vector(&vals)
    } else {
        Tensor::matrix(rows, cols, vals).expect("mask tensor")
    };
    g.constant(t)
}

/// Cross-entropy loss graph over a data batch, differentiable with respect
/// to the per-layer parameter inputs (`w0`, `b0`, ...). The data enters as
/// constants; the returned loss is the summed cross-entropy over the batch.
pub fn loss_graph_wrt_params(
    spec: &NetworkSpec,
    xs: &Tensor,
    labels: &[usize],
    mask: Option<&DropoutMask>,
) -> Result<Graph, NetError> {
    if let Some(m) = mask {
        if !m.matches(spec) {
            return Err(NetError::MaskShape);
        }
    }
    let n = xs.cols();
    let dims = spec.layer_dims();
    let mut g = GraphBuilder::new();
    let x = g.constant(xs.clone());
    let mut h = match spec.feature_mode {
        FeatureMode::Raw => x,
        FeatureMode::Radial => g.l2_norm(x),
    };
    let inv_keep = 1.0 / (1.0 - spec.dropout_rate);
    let layers = dims.len() - 1;
    for l in 0..layers {
        let w = g.input(&format!("w{l}"), &[dims[l + 1], dims[l]])?;
        let b = g.input(&format!("b{l}"), &[dims[l + 1]])?;
        h = g.affine(w, h, b)?;
        if l < layers - 1 {
            h = match spec.activation {
                Activation::Relu => g.relu(h),
                Activation::Sine => g.sine(h),
            };
            if let Some(m) = mask {
                let mc = mask_const(&mut g, &m.keep[l], inv_keep, n, false);
                h = g.mul(h, mc)?;
            }
        }
    }
    let loss = g.softmax_xent(h, labels)?;
    Ok(g.finish(loss))
}

/// Loss graph for input-gradient attacks: cross-entropy of the *mean*
/// predictive distribution of the given members, differentiable with
/// respect to the single input `x`. Parameters enter as constants.
pub fn mean_prob_loss_graph(
    members: &[(&ParamVector, Option<&DropoutMask>)],
    label: usize,
) -> Result<Graph, NetError> {
    assert!(!members.is_empty());
    let spec = &members[0].0.spec;
    let dims = spec.layer_dims();
    let k = spec.num_classes;
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[spec.input_dim])?;
    let inv_keep = 1.0 / (1.0 - spec.dropout_rate);
    let mut mean: Option<crate::diffgraph::NodeId> = None;
    for (params, mask) in members {
        if let Some(m) = mask {
            if !m.matches(spec) {
                return Err(NetError::MaskShape);
            }
        }
        let mut h = match spec.feature_mode {
            FeatureMode::Raw => x,
            FeatureMode::Radial => g.l2_norm(x),
        };
        let layers = params.layers();
        let last = layers.len() - 1;
        for (l, (wv, bv)) in layers.iter().enumerate() {
            let w = g.constant(Tensor::matrix(dims[l + 1], dims[l], wv.to_vec()).expect("w"));
            let b = g.constant(Tensor::vector(bv));
            h = g.affine(w, h, b)?;
            if l < last {
                h = match spec.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Sine => g.sine(h),
                };
                if let Some(m) = mask {
                    let mc = mask_const(&mut g, &m.keep[l], inv_keep, 1, true);
                    h = g.mul(h, mc)?;
                }
            }
        }
        let probs = g.softmax(h);
        mean = Some(match mean {
            None => probs,
            Some(acc) => g.add(acc, probs)?,
        });
    }
    let total = mean.expect("at least one member");
    let scale = g.constant(Tensor::vector(&vec![1.0 / members.len() as f64; k]));
    let mean = g.mul(total, scale)?;
    // pick out the label probability and guard the log against underflow
    let mut onehot = vec![0.0; k];
    onehot[label] = 1.0;
    let oh = g.constant(Tensor::vector(&onehot));
    let picked = g.mul(mean, oh)?;
    let p = g.sum(picked);
    let eps = g.constant(Tensor::scalar(1e-12));
    let p = g.add(p, eps)?;
    let lp = g.log(p);
    let neg = g.constant(Tensor::scalar(-1.0));
    let loss = g.mul(lp, neg)?;
    Ok(g.finish(loss))
}

const CKPT_MAGIC: &[u8; 4] = b"UQAD";
const CKPT_VERSION: u32 = 1;

pub(crate) fn write_spec<W: Write>(w: &mut W, spec: &NetworkSpec) -> std::io::Result<()> {
    w.write_all(&(spec.input_dim as u32).to_le_bytes())?;
    w.write_all(&(spec.hidden_sizes.len() as u32).to_le_bytes())?;
    for &h in &spec.hidden_sizes {
        w.write_all(&(h as u32).to_le_bytes())?;
    }
    w.write_all(&[match spec.activation {
        Activation::Relu => 0u8,
        Activation::Sine => 1u8,
    }])?;
    w.write_all(&(spec.num_classes as u32).to_le_bytes())?;
    w.write_all(&spec.dropout_rate.to_le_bytes())?;
    w.write_all(&[match spec.feature_mode {
        FeatureMode::Raw => 0u8,
        FeatureMode::Radial => 1u8,
    }])?;
    Ok(())
}

pub(crate) fn read_spec<R: Read>(r: &mut R) -> Result<NetworkSpec, NetError> {
    let input_dim = read_u32(r)? as usize;
    let nh = read_u32(r)? as usize;
    let mut hidden_sizes = Vec::with_capacity(nh);
    for _ in 0..nh {
        hidden_sizes.push(read_u32(r)? as usize);
    }
    let activation = match read_u8(r)? {
        0 => Activation::Relu,
        1 => Activation::Sine,
        v => return Err(NetError::Checkpoint(format!("bad activation tag {v}"))),
    };
    let num_classes = read_u32(r)? as usize;
    let dropout_rate = read_f64(r)?;
    let feature_mode = match read_u8(r)? {
        0 => FeatureMode::Raw,
        1 => FeatureMode::Radial,
        v => return Err(NetError::Checkpoint(format!("bad feature mode tag {v}"))),
    };
    NetworkSpec::new(
        input_dim,
        hidden_sizes,
        activation,
        num_classes,
        dropout_rate,
        feature_mode,
    )
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32, NetError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u8<R: Read>(r: &mut R) -> Result<u8, NetError> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64, NetError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64, NetError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Writes a parameter checkpoint: magic "UQAD", version, spec, f64 values.
pub fn save_params(path: &Path, params: &ParamVector) -> Result<(), NetError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    write_spec(&mut w, &params.spec)?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamVector, NetError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(NetError::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(NetError::Checkpoint(format!("unsupported version {version}")));
    }
    let spec = read_spec(&mut r)?;
    let mut values = Vec::with_capacity(spec.param_count());
    for _ in 0..spec.param_count() {
        values.push(read_f64(&mut r)?);
    }
    ParamVector::new(spec, values)
}
