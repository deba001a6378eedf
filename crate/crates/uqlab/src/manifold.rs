//! Synthetic data with analytically known input density.
//!
//! A 2D latent Gaussian mixture (one blob set per class) is pushed through
//! a fixed smooth decoder into R^D, giving a dataset whose ground-truth
//! density p(x) = ∫ p(x|z) p(z) dz can be evaluated two independent ways:
//! importance sampling from the latent prior, and trapezoidal quadrature
//! over a latent grid (feasible because the latent space is 2D). The module
//! also provides the equally spaced latent grid probe dataset and the
//! concentric-spheres dataset used for the rotation-invariance study.

use crate::diffgraph::Tensor;
use crate::inference::LabeledData;
use crate::netmodel::{
    self, init_params, Activation, FeatureMode, NetworkSpec, ParamVector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("quadrature grid must cover at least 6 sigma beyond every component mean")]
    GridBounds,
    #[error("quadrature resolution {0} is below the minimum of 200 per axis")]
    ResolutionTooLow(usize),
    #[error("importance-sampling estimate underflowed; raise the sample count")]
    Underflow,
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One isotropic Gaussian blob in latent space, owned by a class.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub mean: [f64; 2],
    pub weight: f64,
    pub class: usize,
}

/// Latent prior: p(z) = sum_c p(c) sum_j w_cj N(z; mu_cj, sigma_z^2 I).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMixture {
    pub components: Vec<MixtureComponent>,
    pub sigma_z: f64,
    pub class_priors: Vec<f64>,
}

impl LatentMixture {
    pub fn new(
        components: Vec<MixtureComponent>,
        sigma_z: f64,
        class_priors: Vec<f64>,
    ) -> Result<Self, ManifoldError> {
        if sigma_z <= 0.0 {
            return Err(ManifoldError::InvalidMixture("sigma_z must be > 0".into()));
        }
        if components.is_empty() {
            return Err(ManifoldError::InvalidMixture("no components".into()));
        }
        let prior_sum: f64 = class_priors.iter().sum();
        if (prior_sum - 1.0).abs() > 1e-9 || class_priors.iter().any(|&p| p < 0.0) {
            return Err(ManifoldError::InvalidMixture(
                "class priors must be a distribution".into(),
            ));
        }
        for (c, _) in class_priors.iter().enumerate() {
            let s: f64 = components
                .iter()
                .filter(|k| k.class == c)
                .map(|k| k.weight)
                .sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(ManifoldError::InvalidMixture(format!(
                    "component weights for class {c} sum to {s}, expected 1"
                )));
            }
        }
        if components.iter().any(|k| k.class >= class_priors.len()) {
            return Err(ManifoldError::InvalidMixture(
                "component class out of range".into(),
            ));
        }
        Ok(LatentMixture {
            components,
            sigma_z,
            class_priors,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_priors.len()
    }

    /// Three classes of five blobs each: class centres on a radius-2 circle,
    /// blobs on a radius-0.8 ring around each centre, sigma_z 0.35.
    pub fn default_config() -> Self {
        let mut components = Vec::new();
        for c in 0..3usize {
            let phi = std::f64::consts::TAU * c as f64 / 3.0;
            let (cx, cy) = (2.0 * phi.cos(), 2.0 * phi.sin());
            for j in 0..5usize {
                let th = std::f64::consts::TAU * j as f64 / 5.0 + 0.3 * c as f64;
                components.push(MixtureComponent {
                    mean: [cx + 0.8 * th.cos(), cy + 0.8 * th.sin()],
                    weight: 0.2,
                    class: c,
                });
            }
        }
        LatentMixture::new(components, 0.35, vec![1.0 / 3.0; 3]).expect("default mixture")
    }

    /// Axis-aligned bounds covering every component mean plus `k_sigma`
    /// standard deviations.
    pub fn envelope(&self, k_sigma: f64) -> ([f64; 2], [f64; 2]) {
        let pad = k_sigma * self.sigma_z;
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for comp in &self.components {
            for d in 0..2 {
                lo[d] = lo[d].min(comp.mean[d] - pad);
                hi[d] = hi[d].max(comp.mean[d] + pad);
            }
        }
        (lo, hi)
    }
}

/// Log density of the latent prior at `z`.
pub fn latent_log_density(mix: &LatentMixture, z: [f64; 2]) -> f64 {
    let var = mix.sigma_z * mix.sigma_z;
    let log_norm = -(std::f64::consts::TAU * var).ln(); // log(1 / (2 pi sigma^2))
    let mut terms = Vec::with_capacity(mix.components.len());
    for comp in &mix.components {
        let dx = z[0] - comp.mean[0];
        let dy = z[1] - comp.mean[1];
        let log_w = (mix.class_priors[comp.class] * comp.weight).ln();
        terms.push(log_w + log_norm - (dx * dx + dy * dy) / (2.0 * var));
    }
    log_sum_exp(&terms)
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Draw (class, z) from the latent prior.
pub fn sample_latent(mix: &LatentMixture, rng: &mut ChaCha8Rng) -> (usize, [f64; 2]) {
    let mut u: f64 = rng.random();
    let mut class = mix.num_classes() - 1;
    for (c, &p) in mix.class_priors.iter().enumerate() {
        if u < p {
            class = c;
            break;
        }
        u -= p;
    }
    let mut v: f64 = rng.random();
    let in_class: Vec<&MixtureComponent> =
        mix.components.iter().filter(|k| k.class == class).collect();
    let mut comp = *in_class.last().expect("class has components");
    for k in &in_class {
        if v < k.weight {
            comp = k;
            break;
        }
        v -= k.weight;
    }
    let n1: f64 = StandardNormal.sample(rng);
    let n2: f64 = StandardNormal.sample(rng);
    (
        class,
        [
            comp.mean[0] + mix.sigma_z * n1,
            comp.mean[1] + mix.sigma_z * n2,
        ],
    )
}

/// Fixed smooth map from the 2D latent space into R^D with Gaussian
/// observation noise: p(x|z) = N(decode(z), sigma_x^2 I). Parameters are
/// frozen at construction from the seed; `gain` scales the weights and so
/// controls how strongly the manifold is stretched.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSpec {
    params: ParamVector,
    pub sigma_x: f64,
    pub output_dim: usize,
}

impl DecoderSpec {
    pub fn new(output_dim: usize, sigma_x: f64, gain: f64, seed: u64) -> Self {
        assert!(sigma_x > 0.0, "sigma_x must be positive");
        assert!(output_dim >= 2, "decoder needs output dimension >= 2");
        let spec = NetworkSpec::new(
            2,
            vec![16, 16],
            Activation::Sine,
            output_dim,
            0.0,
            FeatureMode::Raw,
        )
        .expect("decoder spec");
        let mut params = init_params(&spec, seed);
        for v in params.values_mut() {
            *v *= gain;
        }
        // init_params leaves biases at zero; give the decoder generic
        // offsets so the map has no special symmetry about the origin
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x6269_6173));
        let dims = spec.layer_dims();
        let mut offset = 0;
        for w in dims.windows(2) {
            offset += w[0] * w[1];
            for i in 0..w[1] {
                let z: f64 = StandardNormal.sample(&mut rng);
                params.values_mut()[offset + i] = 0.5 * z;
            }
            offset += w[1];
        }
        DecoderSpec {
            params,
            sigma_x,
            output_dim,
        }
    }

    /// Defaults used across the experiments: D = 32, sigma_x = 0.05.
    pub fn default_config(seed: u64) -> Self {
        DecoderSpec::new(32, 0.05, 0.5, seed)
    }

    pub fn decode(&self, z: [f64; 2]) -> Vec<f64> {
        netmodel::forward_logits(&self.params, &z, None).expect("decoder forward")
    }

    /// log p(x|z) under the isotropic observation noise.
    pub fn log_likelihood(&self, x: &[f64], z: [f64; 2]) -> f64 {
        self.log_likelihood_decoded(x, &self.decode(z))
    }

    fn log_likelihood_decoded(&self, x: &[f64], mean: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), mean.len());
        let var = self.sigma_x * self.sigma_x;
        let d = x.len() as f64;
        let sq: f64 = x
            .iter()
            .zip(mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        -0.5 * d * (std::f64::consts::TAU * var).ln() - sq / (2.0 * var)
    }
}

/// Training-style dataset with ground-truth log densities per point.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldDataset {
    pub latents: Vec<[f64; 2]>,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub gt_log_density: Vec<f64>,
    pub num_classes: usize,
    pub seed: u64,
}

impl ManifoldDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn to_labeled(&self) -> LabeledData {
        LabeledData::new(self.inputs.clone(), self.labels.clone())
    }

    pub fn subset(&self, indices: &[usize]) -> ManifoldDataset {
        ManifoldDataset {
            latents: indices.iter().map(|&i| self.latents[i]).collect(),
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            gt_log_density: indices.iter().map(|&i| self.gt_log_density[i]).collect(),
            num_classes: self.num_classes,
            seed: self.seed,
        }
    }
}

/// Precomputed latent lattice for quadrature: decoded means and log prior
/// density per cell, so each density query is one sweep over the grid.
pub struct QuadratureGrid {
    log_prior_plus_weight: Vec<f64>,
    decoded: Vec<Vec<f64>>,
}

impl QuadratureGrid {
    pub fn new(
        mix: &LatentMixture,
        dec: &DecoderSpec,
        lo: [f64; 2],
        hi: [f64; 2],
        resolution: usize,
    ) -> Result<Self, ManifoldError> {
        if resolution < 200 {
            return Err(ManifoldError::ResolutionTooLow(resolution));
        }
        let pad = 6.0 * mix.sigma_z;
        for comp in &mix.components {
            for d in 0..2 {
                if comp.mean[d] - pad < lo[d] || comp.mean[d] + pad > hi[d] {
                    return Err(ManifoldError::GridBounds);
                }
            }
        }
        let hx = (hi[0] - lo[0]) / (resolution - 1) as f64;
        let hy = (hi[1] - lo[1]) / (resolution - 1) as f64;
        let mut log_prior_plus_weight = Vec::with_capacity(resolution * resolution);
        let mut decoded = Vec::with_capacity(resolution * resolution);
        for i in 0..resolution {
            let zx = lo[0] + hx * i as f64;
            let wx = if i == 0 || i == resolution - 1 { 0.5 } else { 1.0 };
            for j in 0..resolution {
                let zy = lo[1] + hy * j as f64;
                let wy = if j == 0 || j == resolution - 1 { 0.5 } else { 1.0 };
                let z = [zx, zy];
                let log_cell = latent_log_density(mix, z) + (wx * wy * hx * hy).ln();
                log_prior_plus_weight.push(log_cell);
                decoded.push(dec.decode(z));
            }
        }
        Ok(QuadratureGrid {
            log_prior_plus_weight,
            decoded,
        })
    }

    /// log p(x) by trapezoidal quadrature over the cached lattice.
    pub fn log_density(&self, dec: &DecoderSpec, x: &[f64]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(self.decoded.len());
        for (mean, &lp) in self.decoded.iter().zip(&self.log_prior_plus_weight) {
            let t = lp + dec.log_likelihood_decoded(x, mean);
            best = best.max(t);
            terms.push(t);
        }
        if !best.is_finite() {
            return f64::NEG_INFINITY;
        }
        best + terms.iter().map(|t| (t - best).exp()).sum::<f64>().ln()
    }
}

/// Convenience wrapper matching the documented quadrature operation.
pub fn image_log_density_quadrature(
    x: &[f64],
    mix: &LatentMixture,
    dec: &DecoderSpec,
    lo: [f64; 2],
    hi: [f64; 2],
    resolution: usize,
) -> Result<f64, ManifoldError> {
    Ok(QuadratureGrid::new(mix, dec, lo, hi, resolution)?.log_density(dec, x))
}

/// log p(x) by importance sampling with the latent prior as proposal:
/// log((1/T) sum_t p(x | z_t)), z_t ~ p(z), in log space.
pub fn image_log_density_is(
    x: &[f64],
    mix: &LatentMixture,
    dec: &DecoderSpec,
    num_samples: usize,
    seed: u64,
) -> Result<f64, ManifoldError> {
    assert!(num_samples >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut terms = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let (_, z) = sample_latent(mix, &mut rng);
        terms.push(dec.log_likelihood(x, z));
    }
    let estimate = log_sum_exp(&terms) - (num_samples as f64).ln();
    if estimate.is_finite() {
        Ok(estimate)
    } else {
        Err(ManifoldError::Underflow)
    }
}

/// Draw `n` labelled points: c ~ p(c), z ~ p(z|c), x = decode(z) + noise.
/// Ground-truth log densities are filled from the quadrature oracle over
/// the 7-sigma envelope at the given resolution.
pub fn sample_dataset(
    mix: &LatentMixture,
    dec: &DecoderSpec,
    n: usize,
    seed: u64,
    quad_resolution: usize,
) -> Result<ManifoldDataset, ManifoldError> {
    assert!(n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut latents = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (c, z) = sample_latent(mix, &mut rng);
        let mut x = dec.decode(z);
        for v in &mut x {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += dec.sigma_x * e;
        }
        latents.push(z);
        inputs.push(x);
        labels.push(c);
    }
    let (lo, hi) = mix.envelope(7.0);
    let grid = QuadratureGrid::new(mix, dec, lo, hi, quad_resolution)?;
    let gt_log_density = inputs.iter().map(|x| grid.log_density(dec, x)).collect();
    Ok(ManifoldDataset {
        latents,
        inputs,
        labels,
        gt_log_density,
        num_classes: mix.num_classes(),
        seed,
    })
}

/// Equally spaced latent lattice, decoded without observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDataset {
    pub latents: Vec<[f64; 2]>,
    pub inputs: Vec<Vec<f64>>,
}

pub fn make_grid(
    dec: &DecoderSpec,
    lo: [f64; 2],
    hi: [f64; 2],
    resolution: usize,
) -> GridDataset {
    assert!(resolution >= 2, "grid needs at least 2 points per axis");
    let hx = (hi[0] - lo[0]) / (resolution - 1) as f64;
    let hy = (hi[1] - lo[1]) / (resolution - 1) as f64;
    let mut latents = Vec::with_capacity(resolution * resolution);
    let mut inputs = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            let z = [lo[0] + hx * i as f64, lo[1] + hy * j as f64];
            latents.push(z);
            inputs.push(dec.decode(z));
        }
    }
    GridDataset { latents, inputs }
}

/// Two concentric spheres in R^d; inner sphere labelled 1, outer 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SpheresDataset {
    pub dimension: usize,
    pub r_inner: f64,
    pub r_outer: f64,
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl SpheresDataset {
    pub fn to_labeled(&self) -> LabeledData {
        LabeledData::new(self.points.clone(), self.labels.clone())
    }
}

pub fn make_spheres(
    d: usize,
    r_inner: f64,
    r_outer: f64,
    n_per_sphere: usize,
    seed: u64,
) -> SpheresDataset {
    assert!(d >= 2, "spheres need dimension >= 2");
    assert!(
        r_inner > 0.0 && r_outer > 0.0 && r_inner != r_outer,
        "radii must be positive and distinct"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(2 * n_per_sphere);
    let mut labels = Vec::with_capacity(2 * n_per_sphere);
    for (radius, label) in [(r_inner, 1usize), (r_outer, 0usize)] {
        for _ in 0..n_per_sphere {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            for a in &mut v {
                *a *= radius / norm;
            }
            points.push(v);
            labels.push(label);
        }
    }
    SpheresDataset {
        dimension: d,
        r_inner,
        r_outer,
        points,
        labels,
    }
}

const DATA_MAGIC: &[u8; 4] = b"MMAN";
const DATA_VERSION: u32 = 1;

pub fn save_dataset(path: &Path, ds: &ManifoldDataset) -> Result<(), ManifoldError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let n = ds.len();
    let d = ds.inputs.first().map_or(0, Vec::len);
    w.write_all(DATA_MAGIC)?;
    w.write_all(&DATA_VERSION.to_le_bytes())?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    w.write_all(&2u32.to_le_bytes())?;
    w.write_all(&(ds.num_classes as u32).to_le_bytes())?;
    for z in &ds.latents {
        w.write_all(&z[0].to_le_bytes())?;
        w.write_all(&z[1].to_le_bytes())?;
    }
    for x in &ds.inputs {
        for v in x {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for &l in &ds.labels {
        w.write_all(&[l as u8])?;
    }
    for &g in &ds.gt_log_density {
        w.write_all(&g.to_le_bytes())?;
    }
    w.write_all(&ds.seed.to_le_bytes())?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<ManifoldDataset, ManifoldError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATA_MAGIC {
        return Err(ManifoldError::Format("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != DATA_VERSION {
        return Err(ManifoldError::Format(format!("unsupported version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let latent_dim = read_u32(&mut r)? as usize;
    if latent_dim != 2 {
        return Err(ManifoldError::Format(format!(
            "latent dimension {latent_dim} unsupported"
        )));
    }
    let num_classes = read_u32(&mut r)? as usize;
    let mut latents = Vec::with_capacity(n);
    for _ in 0..n {
        latents.push([read_f64(&mut r)?, read_f64(&mut r)?]);
    }
    let mut inputs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = Vec::with_capacity(d);
        for _ in 0..d {
            x.push(read_f64(&mut r)?);
        }
        inputs.push(x);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        labels.push(b[0] as usize);
    }
    let mut gt_log_density = Vec::with_capacity(n);
    for _ in 0..n {
        gt_log_density.push(read_f64(&mut r)?);
    }
    let seed = {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        u64::from_le_bytes(b)
    };
    Ok(ManifoldDataset {
        latents,
        inputs,
        labels,
        gt_log_density,
        num_classes,
        seed,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ManifoldError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, ManifoldError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Columns-are-points tensor of a point list (used by attack code).
pub fn points_tensor(points: &[Vec<f64>]) -> Tensor {
    let d = points[0].len();
    let n = points.len();
    let mut vals = vec![0.0; d * n];
    for (j, p) in points.iter().enumerate() {
        for (i, &v) in p.iter().enumerate() {
            vals[i * n + j] = v;
        }
    }
    Tensor::matrix(d, n, vals).expect("points tensor")
}
