//! Posterior construction: HMC sampling (the near-idealised reference),
//! MC-dropout and deep ensembles, and plain MAP/SGD training.
//!
//! All three posterior flavours produce a [`PosteriorEnsemble`] whose
//! members behave as deterministic functions — a dropout member is the
//! shared parameters viewed through one fixed mask — so the downstream
//! model average is computed identically regardless of inference kind.

use crate::diffgraph::Tensor;
use crate::netmodel::{
    self, bind_params, init_params, loss_graph_wrt_params, DropoutMask, NetError, NetworkSpec,
    ParamVector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelRange { label: usize, num_classes: usize },
    #[error("input point {index} has length {actual}, spec expects {expected}")]
    PointDim {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite loss at epoch {epoch} (step {step}); try a smaller learning rate")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A classification dataset: one input point per entry, labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<usize>) -> Self {
        assert_eq!(points.len(), labels.len(), "points/labels length mismatch");
        LabeledData { points, labels }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Check dimensions and label range against a spec.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<(), InferenceError> {
        for (i, p) in self.points.iter().enumerate() {
            if p.len() != spec.input_dim {
                return Err(InferenceError::PointDim {
                    index: i,
                    expected: spec.input_dim,
                    actual: p.len(),
                });
            }
        }
        for &l in &self.labels {
            if l >= spec.num_classes {
                return Err(InferenceError::LabelRange {
                    label: l,
                    num_classes: spec.num_classes,
                });
            }
        }
        Ok(())
    }

    /// Columns-are-points tensor for the given subset of indices.
    pub fn batch_tensor(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.points[indices[0]].len();
        let n = indices.len();
        let mut vals = vec![0.0; d * n];
        for (j, &idx) in indices.iter().enumerate() {
            for (i, &v) in self.points[idx].iter().enumerate() {
                vals[i * n + j] = v;
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::matrix(d, n, vals).expect("batch tensor"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledData {
        LabeledData {
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub num_samples: usize,
    pub burn_in: usize,
    pub thinning: usize,
    /// Gaussian prior precision lambda; U includes (lambda/2)·||w||^2.
    pub prior_precision: f64,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            step_size: 0.05,
            leapfrog_steps: 20,
            num_samples: 300,
            burn_in: 500,
            thinning: 3,
            prior_precision: 1.0,
            seed: 0,
        }
    }
}

impl HmcConfig {
    fn validate(&self) -> Result<(), InferenceError> {
        if self.step_size <= 0.0 {
            return Err(InferenceError::InvalidConfig("step_size must be > 0".into()));
        }
        if self.leapfrog_steps == 0 {
            return Err(InferenceError::InvalidConfig(
                "leapfrog_steps must be >= 1".into(),
            ));
        }
        if self.num_samples == 0 {
            return Err(InferenceError::InvalidConfig("num_samples must be >= 1".into()));
        }
        if self.thinning == 0 {
            return Err(InferenceError::InvalidConfig("thinning must be >= 1".into()));
        }
        if self.prior_precision <= 0.0 {
            return Err(InferenceError::InvalidConfig(
                "prior_precision must be > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemberKind {
    Hmc,
    DropoutMask,
    Independent,
}

/// One realisation of the model: parameters plus an optional fixed dropout
/// mask through which every forward pass of this member is routed.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub params: ParamVector,
    pub mask: Option<DropoutMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble {
    pub spec: NetworkSpec,
    pub kind: MemberKind,
    pub members: Vec<Member>,
    pub weights: Vec<f64>,
}

impl PosteriorEnsemble {
    pub fn uniform(spec: NetworkSpec, kind: MemberKind, members: Vec<Member>) -> Self {
        assert!(!members.is_empty(), "ensemble needs at least one member");
        let w = 1.0 / members.len() as f64;
        let weights = vec![w; members.len()];
        PosteriorEnsemble {
            spec,
            kind,
            members,
            weights,
        }
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }
}

/// Per-member class probabilities and their weighted average for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub member_probs: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub mean_probs: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn from_members(member_probs: Vec<Vec<f64>>, weights: Vec<f64>) -> Self {
        assert_eq!(member_probs.len(), weights.len());
        assert!(!member_probs.is_empty());
        let k = member_probs[0].len();
        let mut mean = vec![0.0; k];
        for (row, &w) in member_probs.iter().zip(&weights) {
            for (m, &p) in mean.iter_mut().zip(row) {
                *m += w * p;
            }
        }
        PredictiveDistribution {
            member_probs,
            weights,
            mean_probs: mean,
        }
    }
}

/// Diagnostics from one HMC run.
#[derive(Debug, Clone, PartialEq)]
pub struct HmcReport {
    /// Metropolis acceptance rate over post-burn-in iterations.
    pub acceptance_rate: f64,
    /// Leapfrog trajectories rejected because a gradient went non-finite.
    pub divergences: usize,
    pub warnings: Vec<String>,
}

/// SGD on cross-entropy plus an L2 penalty `(weight_decay/2)·||w||^2`.
/// With `dropout_rate > 0` a fresh mask is sampled per minibatch, i.e.
/// training is dropout-active. Deterministic for a fixed config.
pub fn train_map(
    spec: &NetworkSpec,
    data: &LabeledData,
    cfg: &TrainConfig,
) -> Result<ParamVector, InferenceError> {
    if data.is_empty() {
        return Err(InferenceError::EmptyDataset);
    }
    data.validate(spec)?;
    if cfg.batch_size == 0 {
        return Err(InferenceError::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut params = init_params(spec, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5347_445f)); // shuffle stream
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (xs, labels) = data.batch_tensor(chunk);
            let mask = if spec.dropout_rate > 0.0 {
                Some(DropoutMask::sample(spec, rng.random()))
            } else {
                None
            };
            let graph = loss_graph_wrt_params(spec, &xs, &labels, mask.as_ref())?;
            let binding = bind_params(&params);
            let (loss, grads) = graph
                .eval_with_grads(&binding)
                .map_err(|_| InferenceError::NonFiniteLoss { epoch, step })?;
            if !loss.is_finite() {
                return Err(InferenceError::NonFiniteLoss { epoch, step });
            }
            let flat = flatten_grads(&grads, spec);
            let scale = cfg.learning_rate / chunk.len() as f64;
            let wd = cfg.learning_rate * cfg.weight_decay;
            for (w, g) in params.values_mut().iter_mut().zip(&flat) {
                *w -= scale * g + wd * *w;
            }
        }
    }
    Ok(params)
}

fn flatten_grads(
    grads: &std::collections::HashMap<String, Tensor>,
    spec: &NetworkSpec,
) -> Vec<f64> {
    let mut flat = Vec::with_capacity(spec.param_count());
    for name in netmodel::param_input_names(spec) {
        flat.extend(grads[&name].values());
    }
    flat
}

/// Fisher-Yates shuffle driven by the given generator.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Leapfrog integration of `H(q, p) = U(q) + ||p||^2 / 2`.
///
/// `grad_u` returns `None` when the gradient is non-finite; the trajectory
/// is then flagged divergent by returning `None`, which HMC auto-rejects.
pub fn leapfrog(
    position: &[f64],
    momentum: &[f64],
    step_size: f64,
    steps: usize,
    mut grad_u: impl FnMut(&[f64]) -> Option<Vec<f64>>,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut q = position.to_vec();
    let mut p = momentum.to_vec();
    if steps == 0 {
        return Some((q, p));
    }
    let mut g = grad_u(&q)?;
    for (pi, gi) in p.iter_mut().zip(&g) {
        *pi -= 0.5 * step_size * gi;
    }
    for s in 0..steps {
        for (qi, pi) in q.iter_mut().zip(&p) {
            *qi += step_size * pi;
        }
        g = grad_u(&q)?;
        let factor = if s + 1 == steps { 0.5 } else { 1.0 };
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi -= factor * step_size * gi;
        }
    }
    if q.iter().chain(p.iter()).all(|v| v.is_finite()) {
        Some((q, p))
    } else {
        None
    }
}

/// HMC over an arbitrary potential. `u_and_grad` returns the potential and
/// its gradient, or `None` if either is non-finite at the query point.
/// Returns the kept draws and a diagnostics report.
pub fn hmc_core(
    init: Vec<f64>,
    cfg: &HmcConfig,
    mut u_and_grad: impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
) -> Result<(Vec<Vec<f64>>, HmcReport), InferenceError> {
    cfg.validate()?;
    let dim = init.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut q = init;
    let mut u_q = match u_and_grad(&q) {
        Some((u, _)) => u,
        None => {
            return Err(InferenceError::InvalidConfig(
                "potential non-finite at the initial position".into(),
            ))
        }
    };
    let total = cfg.burn_in + cfg.num_samples * cfg.thinning;
    let mut draws = Vec::with_capacity(cfg.num_samples);
    let mut accepted_post = 0usize;
    let mut proposals_post = 0usize;
    let mut divergences = 0usize;
    for iter in 0..total {
        let p0: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let k0: f64 = 0.5 * p0.iter().map(|v| v * v).sum::<f64>();
        let h_old = u_q + k0;
        let proposal = leapfrog(&q, &p0, cfg.step_size, cfg.leapfrog_steps, |x| {
            u_and_grad(x).map(|(_, g)| g)
        });
        let post_burn = iter >= cfg.burn_in;
        if post_burn {
            proposals_post += 1;
        }
        // Metropolis accept with probability min(1, exp(H_old - H_new)).
        let accept = match &proposal {
            None => {
                divergences += 1;
                false
            }
            Some((q_new, p_new)) => match u_and_grad(q_new) {
                None => {
                    divergences += 1;
                    false
                }
                Some((u_new, _)) => {
                    let k_new: f64 = 0.5 * p_new.iter().map(|v| v * v).sum::<f64>();
                    let h_new = u_new + k_new;
                    let log_alpha = h_old - h_new;
                    let take = log_alpha >= 0.0 || rng.random::<f64>() < log_alpha.exp();
                    if take {
                        q = q_new.clone();
                        u_q = u_new;
                    }
                    take
                }
            },
        };
        if post_burn {
            if accept {
                accepted_post += 1;
            }
            let k = iter - cfg.burn_in;
            if (k + 1) % cfg.thinning == 0 && draws.len() < cfg.num_samples {
                draws.push(q.clone());
            }
        }
    }
    let acceptance_rate = if proposals_post > 0 {
        accepted_post as f64 / proposals_post as f64
    } else {
        0.0
    };
    let mut warnings = Vec::new();
    if acceptance_rate < 0.1 {
        warnings.push(format!(
            "post-burn-in acceptance rate {acceptance_rate:.3} is below 0.1; \
             consider a smaller step_size"
        ));
    }
    Ok((
        draws,
        HmcReport {
            acceptance_rate,
            divergences,
            warnings,
        },
    ))
}

/// HMC posterior over network weights with potential
/// `U(w) = NLL(data; w) + (lambda/2)·||w||^2`, full-batch gradients.
/// An empty dataset leaves only the Gaussian prior.
pub fn hmc_sample(
    spec: &NetworkSpec,
    data: &LabeledData,
    cfg: &HmcConfig,
) -> Result<(PosteriorEnsemble, HmcReport), InferenceError> {
    data.validate(spec)?;
    let lambda = cfg.prior_precision;
    let graph = if data.is_empty() {
        None
    } else {
        let all: Vec<usize> = (0..data.len()).collect();
        let (xs, labels) = data.batch_tensor(&all);
        Some(loss_graph_wrt_params(spec, &xs, &labels, None)?)
    };
    let init = init_params(spec, cfg.seed).values().to_vec();
    let spec_owned = spec.clone();
    let u_and_grad = |w: &[f64]| -> Option<(f64, Vec<f64>)> {
        let prior: f64 = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
        let params = ParamVector::new(spec_owned.clone(), w.to_vec()).ok()?;
        match &graph {
            None => {
                let grad: Vec<f64> = w.iter().map(|v| lambda * v).collect();
                Some((prior, grad))
            }
            Some(g) => {
                let binding = bind_params(&params);
                let (loss, grads) = g.eval_with_grads(&binding).ok()?;
                if !loss.is_finite() {
                    return None;
                }
                let mut flat = flatten_grads(&grads, &spec_owned);
                for (gi, wi) in flat.iter_mut().zip(w) {
                    *gi += lambda * wi;
                }
                Some((loss + prior, flat))
            }
        }
    };
    let (draws, report) = hmc_core(init, cfg, u_and_grad)?;
    let members = draws
        .into_iter()
        .map(|w| Member {
            params: ParamVector::new(spec.clone(), w).expect("draw length"),
            mask: None,
        })
        .collect();
    Ok((
        PosteriorEnsemble::uniform(spec.clone(), MemberKind::Hmc, members),
        report,
    ))
}

/// M fixed-mask realisations of one trained parameter vector.
pub fn mc_dropout_ensemble(params: &ParamVector, num_passes: usize, seed: u64) -> PosteriorEnsemble {
    assert!(num_passes >= 1, "need at least one dropout pass");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members = (0..num_passes)
        .map(|_| Member {
            params: params.clone(),
            mask: Some(DropoutMask::sample(&params.spec, rng.random())),
        })
        .collect();
    PosteriorEnsemble::uniform(params.spec.clone(), MemberKind::DropoutMask, members)
}

/// Independently initialised and trained members with seeds
/// `base_seed..base_seed + num_members`. When the spec has dropout, each
/// trained member contributes `dropout_passes` fixed-mask realisations so
/// prediction averages over masks as well as initialisations.
pub fn deep_ensemble(
    spec: &NetworkSpec,
    data: &LabeledData,
    cfg: &TrainConfig,
    num_members: usize,
    dropout_passes: usize,
    base_seed: u64,
) -> Result<PosteriorEnsemble, InferenceError> {
    assert!(num_members >= 1, "need at least one ensemble member");
    let mut mask_rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(0x6d61_736b));
    let mut members = Vec::new();
    for m in 0..num_members {
        let member_cfg = TrainConfig {
            seed: base_seed + m as u64,
            ..cfg.clone()
        };
        let params = train_map(spec, data, &member_cfg)?;
        if spec.dropout_rate > 0.0 {
            for _ in 0..dropout_passes.max(1) {
                members.push(Member {
                    params: params.clone(),
                    mask: Some(DropoutMask::sample(spec, mask_rng.random())),
                });
            }
        } else {
            members.push(Member { params, mask: None });
        }
    }
    Ok(PosteriorEnsemble::uniform(
        spec.clone(),
        MemberKind::Independent,
        members,
    ))
}

/// Bayesian model average at one input point.
pub fn predictive(
    ensemble: &PosteriorEnsemble,
    x: &[f64],
) -> Result<PredictiveDistribution, NetError> {
    let mut member_probs = Vec::with_capacity(ensemble.num_members());
    for member in &ensemble.members {
        let logits = netmodel::forward_logits(&member.params, x, member.mask.as_ref())?;
        member_probs.push(netmodel::predict_probs(&logits));
    }
    Ok(PredictiveDistribution::from_members(
        member_probs,
        ensemble.weights.clone(),
    ))
}

const ENS_MAGIC: &[u8; 4] = b"UQAD";
const ENS_VERSION: u32 = 2; // version 1 is the single-parameter checkpoint

/// Ensemble checkpoint: "UQAD", version 2, spec, kind tag, member count,
/// then per member its weight, optional mask, and parameter values.
pub fn save_ensemble(path: &Path, ensemble: &PosteriorEnsemble) -> Result<(), InferenceError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(ENS_MAGIC)?;
    w.write_all(&ENS_VERSION.to_le_bytes())?;
    netmodel::write_spec(&mut w, &ensemble.spec)?;
    w.write_all(&[match ensemble.kind {
        MemberKind::Hmc => 0u8,
        MemberKind::DropoutMask => 1u8,
        MemberKind::Independent => 2u8,
    }])?;
    w.write_all(&(ensemble.num_members() as u32).to_le_bytes())?;
    for (member, weight) in ensemble.members.iter().zip(&ensemble.weights) {
        w.write_all(&weight.to_le_bytes())?;
        match &member.mask {
            None => w.write_all(&[0u8])?,
            Some(mask) => {
                w.write_all(&[1u8])?;
                w.write_all(&mask.seed.to_le_bytes())?;
                for layer in &mask.keep {
                    for &keep in layer {
                        w.write_all(&[u8::from(keep)])?;
                    }
                }
            }
        }
        for v in member.params.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_ensemble(path: &Path) -> Result<PosteriorEnsemble, InferenceError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ENS_MAGIC {
        return Err(InferenceError::Checkpoint("bad magic bytes".into()));
    }
    let version = netmodel::read_u32(&mut r)?;
    if version != ENS_VERSION {
        return Err(InferenceError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let spec = netmodel::read_spec(&mut r)?;
    let kind = match netmodel::read_u8(&mut r)? {
        0 => MemberKind::Hmc,
        1 => MemberKind::DropoutMask,
        2 => MemberKind::Independent,
        v => return Err(InferenceError::Checkpoint(format!("bad kind tag {v}"))),
    };
    let count = netmodel::read_u32(&mut r)? as usize;
    if count == 0 {
        return Err(InferenceError::Checkpoint("ensemble has no members".into()));
    }
    let mut members = Vec::with_capacity(count);
    let mut weights = Vec::with_capacity(count);
    for _ in 0..count {
        weights.push(netmodel::read_f64(&mut r)?);
        let mask = match netmodel::read_u8(&mut r)? {
            0 => None,
            1 => {
                let seed = netmodel::read_u64(&mut r)?;
                let mut keep = Vec::with_capacity(spec.hidden_sizes.len());
                for &h in &spec.hidden_sizes {
                    let mut layer = Vec::with_capacity(h);
                    for _ in 0..h {
                        layer.push(netmodel::read_u8(&mut r)? != 0);
                    }
                    keep.push(layer);
                }
                Some(DropoutMask { keep, seed })
            }
            v => return Err(InferenceError::Checkpoint(format!("bad mask tag {v}"))),
        };
        let mut values = Vec::with_capacity(spec.param_count());
        for _ in 0..spec.param_count() {
            values.push(netmodel::read_f64(&mut r)?);
        }
        members.push(Member {
            params: ParamVector::new(spec.clone(), values)?,
            mask,
        });
    }
    Ok(PosteriorEnsemble {
        spec,
        kind,
        members,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{Activation, FeatureMode};

    fn spec2(hidden: &[usize], dropout: f64) -> NetworkSpec {
        NetworkSpec::new(
            2,
            hidden.to_vec(),
            Activation::Relu,
            2,
            dropout,
            FeatureMode::Raw,
        )
        .unwrap()
    }

    fn separable_data() -> LabeledData {
        LabeledData::new(
            vec![vec![-1.0, 0.2], vec![1.0, -0.2]],
            vec![0, 1],
        )
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let s = spec2(&[4], 0.0);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 10,
            ..TrainConfig::default()
        };
        let trained = train_map(&s, &separable_data(), &cfg).unwrap();
        assert_eq!(trained.values(), init_params(&s, cfg.seed).values());
    }

    #[test]
    fn separable_points_reach_perfect_accuracy() {
        let s = spec2(&[], 0.0);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            epochs: 500,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let data = separable_data();
        let trained = train_map(&s, &data, &cfg).unwrap();
        for (x, &label) in data.points.iter().zip(&data.labels) {
            let probs =
                netmodel::predict_probs(&netmodel::forward_logits(&trained, x, None).unwrap());
            let argmax = if probs[1] > probs[0] { 1 } else { 0 };
            assert_eq!(argmax, label);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let s = spec2(&[5], 0.3);
        let cfg = TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        };
        let data = separable_data();
        let a = train_map(&s, &data, &cfg).unwrap();
        let b = train_map(&s, &data, &cfg).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn empty_dataset_is_rejected_for_training() {
        let s = spec2(&[4], 0.0);
        let empty = LabeledData::new(vec![], vec![]);
        assert!(matches!(
            train_map(&s, &empty, &TrainConfig::default()),
            Err(InferenceError::EmptyDataset)
        ));
    }

    #[test]
    fn leapfrog_zero_steps_is_identity() {
        let (q, p) = leapfrog(&[1.0, 2.0], &[0.5, -0.5], 0.1, 0, |_| Some(vec![0.0, 0.0]))
            .unwrap();
        assert_eq!(q, vec![1.0, 2.0]);
        assert_eq!(p, vec![0.5, -0.5]);
    }

    #[test]
    fn leapfrog_harmonic_matches_fine_step_oracle() {
        // U(q) = q^2/2 from (1, 0): exact flow is a rotation, q(t) = cos t.
        let grad = |q: &[f64]| Some(vec![q[0]]);
        let (q_coarse, p_coarse) = leapfrog(&[1.0], &[0.0], 0.1, 10, grad).unwrap();
        // fine-step integrator as the oracle for t = 1
        let (q_fine, p_fine) = leapfrog(&[1.0], &[0.0], 1e-5, 100_000, grad).unwrap();
        assert!((q_fine[0] - 1f64.cos()).abs() < 1e-8);
        assert!((p_fine[0] + 1f64.sin()).abs() < 1e-8);
        // coarse error is O(step^2) with a modest constant
        assert!((q_coarse[0] - q_fine[0]).abs() < 1e-2);
        assert!((p_coarse[0] - p_fine[0]).abs() < 1e-2);
    }

    #[test]
    fn leapfrog_is_time_reversible() {
        let grad = |q: &[f64]| Some(vec![q[0] + 0.3 * q[0].powi(3), q[1].sin()]);
        let q0 = [0.8, -0.4];
        let p0 = [0.2, 0.9];
        let (q1, p1) = leapfrog(&q0, &p0, 0.05, 40, grad).unwrap();
        let neg: Vec<f64> = p1.iter().map(|v| -v).collect();
        let (q2, p2) = leapfrog(&q1, &neg, 0.05, 40, grad).unwrap();
        for (a, b) in q2.iter().zip(&q0) {
            assert!((a - b).abs() <= 1e-9);
        }
        for (a, b) in p2.iter().zip(&p0) {
            assert!((a + b).abs() <= 1e-9);
        }
    }

    #[test]
    fn leapfrog_energy_error_scales_quadratically() {
        // fixed trajectory length T = 1; Hamiltonian error vs step size
        let u = |q: &[f64]| 0.5 * q[0] * q[0] + 0.1 * q[0].powi(4);
        let grad = |q: &[f64]| Some(vec![q[0] + 0.4 * q[0].powi(3)]);
        let h0 = u(&[1.2]) + 0.5 * 0.3f64.powi(2);
        let mut logs = Vec::new();
        for &steps in &[5usize, 10, 20, 40, 80] {
            let h = 1.0 / steps as f64;
            let (q, p) = leapfrog(&[1.2], &[0.3], h, steps, grad).unwrap();
            let err = (u(&q) + 0.5 * p[0] * p[0] - h0).abs();
            logs.push((h.ln(), err.ln()));
        }
        // least-squares slope on the log-log points
        let n = logs.len() as f64;
        let sx: f64 = logs.iter().map(|(x, _)| x).sum();
        let sy: f64 = logs.iter().map(|(_, y)| y).sum();
        let sxx: f64 = logs.iter().map(|(x, _)| x * x).sum();
        let sxy: f64 = logs.iter().map(|(x, y)| x * y).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!((slope - 2.0).abs() <= 0.2, "slope {slope}");
    }

    #[test]
    fn divergent_gradient_rejects_trajectory() {
        let grad = |q: &[f64]| {
            if q[0].abs() > 2.0 {
                None
            } else {
                Some(vec![-10.0 * q[0].signum()])
            }
        };
        assert!(leapfrog(&[1.0], &[5.0], 0.5, 10, grad).is_none());
    }

    /// Closed-form posterior for Bayesian linear regression used as the
    /// HMC oracle: precision lambda*I + X^T X / sigma^2.
    fn conjugate_problem() -> (Vec<[f64; 2]>, Vec<f64>, f64, [f64; 2], [[f64; 2]; 2]) {
        let xs = vec![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let ys = vec![0.9, 2.1, 3.05];
        let sigma2 = 0.01;
        // precision = I + X^T X / sigma^2 = [[201, 100], [100, 201]]
        let prec = [[201.0, 100.0], [100.0, 201.0]];
        let det = prec[0][0] * prec[1][1] - prec[0][1] * prec[1][0];
        let cov = [
            [prec[1][1] / det, -prec[0][1] / det],
            [-prec[1][0] / det, prec[0][0] / det],
        ];
        // X^T y / sigma^2
        let b = [
            (xs[0][0] * ys[0] + xs[1][0] * ys[1] + xs[2][0] * ys[2]) / sigma2,
            (xs[0][1] * ys[0] + xs[1][1] * ys[1] + xs[2][1] * ys[2]) / sigma2,
        ];
        let mean = [
            cov[0][0] * b[0] + cov[0][1] * b[1],
            cov[1][0] * b[0] + cov[1][1] * b[1],
        ];
        (xs, ys, sigma2, mean, cov)
    }

    fn conjugate_potential(
        xs: Vec<[f64; 2]>,
        ys: Vec<f64>,
        sigma2: f64,
    ) -> impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)> {
        move |w: &[f64]| {
            let mut u = 0.5 * (w[0] * w[0] + w[1] * w[1]);
            let mut g = vec![w[0], w[1]];
            for (x, &y) in xs.iter().zip(&ys) {
                let r = w[0] * x[0] + w[1] * x[1] - y;
                u += 0.5 * r * r / sigma2;
                g[0] += r * x[0] / sigma2;
                g[1] += r * x[1] / sigma2;
            }
            Some((u, g))
        }
    }

    #[test]
    fn hmc_matches_conjugate_posterior_moments() {
        let (xs, ys, sigma2, mean, cov) = conjugate_problem();
        let cfg = HmcConfig::default();
        let (draws, report) =
            hmc_core(vec![0.0, 0.0], &cfg, conjugate_potential(xs, ys, sigma2)).unwrap();
        assert_eq!(draws.len(), cfg.num_samples);
        assert!(
            report.acceptance_rate > 0.6 && report.acceptance_rate <= 1.0,
            "acceptance {}",
            report.acceptance_rate
        );
        let n = draws.len() as f64;
        for d in 0..2 {
            let m: f64 = draws.iter().map(|w| w[d]).sum::<f64>() / n;
            let se = (cov[d][d] / n).sqrt();
            assert!(
                (m - mean[d]).abs() < 3.0 * se,
                "dim {d}: sample mean {m} vs {} (se {se})",
                mean[d]
            );
            let v: f64 = draws.iter().map(|w| (w[d] - m).powi(2)).sum::<f64>() / (n - 1.0);
            // variance of a sample variance ~ 2 sigma^4 / n
            let se_v = cov[d][d] * (2.0 / n).sqrt();
            assert!(
                (v - cov[d][d]).abs() < 3.0 * se_v,
                "dim {d}: sample var {v} vs {}",
                cov[d][d]
            );
        }
    }

    #[test]
    fn hmc_zero_step_limit_accepts_everything() {
        let (xs, ys, sigma2, _, _) = conjugate_problem();
        let cfg = HmcConfig {
            step_size: 1e-6,
            leapfrog_steps: 5,
            num_samples: 1000,
            burn_in: 0,
            thinning: 1,
            ..HmcConfig::default()
        };
        let (_, report) =
            hmc_core(vec![0.0, 0.0], &cfg, conjugate_potential(xs, ys, sigma2)).unwrap();
        assert!(report.acceptance_rate >= 0.999, "{}", report.acceptance_rate);
    }

    #[test]
    fn hmc_on_empty_dataset_samples_the_prior() {
        let s = spec2(&[2], 0.0);
        let cfg = HmcConfig {
            step_size: 0.2,
            leapfrog_steps: 20,
            num_samples: 400,
            burn_in: 200,
            thinning: 2,
            prior_precision: 1.0,
            seed: 3,
        };
        let empty = LabeledData::new(vec![], vec![]);
        let (ensemble, report) = hmc_sample(&s, &empty, &cfg).unwrap();
        assert_eq!(ensemble.num_members(), 400);
        assert!(report.acceptance_rate > 0.6);
        let dim = s.param_count();
        let n = ensemble.num_members() as f64;
        for d in 0..dim {
            let m: f64 = ensemble
                .members
                .iter()
                .map(|mem| mem.params.values()[d])
                .sum::<f64>()
                / n;
            // prior is standard normal; allow 3 MC standard errors
            assert!(m.abs() < 3.0 / n.sqrt() + 0.05, "coordinate {d} mean {m}");
        }
    }

    #[test]
    fn hmc_is_deterministic() {
        let s = spec2(&[3], 0.0);
        let data = separable_data();
        let cfg = HmcConfig {
            num_samples: 10,
            burn_in: 20,
            ..HmcConfig::default()
        };
        let (a, ra) = hmc_sample(&s, &data, &cfg).unwrap();
        let (b, rb) = hmc_sample(&s, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn dropout_ensemble_rate_zero_members_predict_identically() {
        let s = spec2(&[4], 0.0);
        let params = init_params(&s, 7);
        let ens = mc_dropout_ensemble(&params, 8, 1);
        let pd = predictive(&ens, &[0.4, -0.3]).unwrap();
        for row in &pd.member_probs {
            assert_eq!(row, &pd.member_probs[0]);
        }
        let mi = crate::uncertainty::mutual_information(&pd).mutual_information;
        assert!(mi.abs() < 1e-15);
    }

    #[test]
    fn dropout_ensemble_is_seed_deterministic() {
        let s = spec2(&[6], 0.4);
        let params = init_params(&s, 7);
        assert_eq!(
            mc_dropout_ensemble(&params, 5, 9),
            mc_dropout_ensemble(&params, 5, 9)
        );
        assert_ne!(
            mc_dropout_ensemble(&params, 5, 9),
            mc_dropout_ensemble(&params, 5, 10)
        );
    }

    #[test]
    fn deep_ensemble_members_differ_and_single_matches_map() {
        let s = spec2(&[4], 0.0);
        let data = separable_data();
        let cfg = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        let ens = deep_ensemble(&s, &data, &cfg, 3, 1, 11).unwrap();
        assert_eq!(ens.num_members(), 3);
        assert_ne!(
            ens.members[0].params.values(),
            ens.members[1].params.values()
        );
        let single = deep_ensemble(&s, &data, &cfg, 1, 1, 11).unwrap();
        let map_cfg = TrainConfig { seed: 11, ..cfg };
        let map = train_map(&s, &data, &map_cfg).unwrap();
        assert_eq!(single.members[0].params.values(), map.values());
        assert!(single.members[0].mask.is_none());
    }

    #[test]
    fn predictive_mean_is_weighted_average() {
        let s = spec2(&[3], 0.0);
        let members = vec![
            Member {
                params: init_params(&s, 0),
                mask: None,
            },
            Member {
                params: init_params(&s, 1),
                mask: None,
            },
        ];
        let ens = PosteriorEnsemble::uniform(s, MemberKind::Independent, members);
        let pd = predictive(&ens, &[0.2, 0.8]).unwrap();
        for k in 0..2 {
            let avg = 0.5 * (pd.member_probs[0][k] + pd.member_probs[1][k]);
            assert!((pd.mean_probs[k] - avg).abs() < 1e-12);
        }
        for row in pd.member_probs.iter().chain(std::iter::once(&pd.mean_probs)) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_checkpoint_roundtrip() {
        let s = spec2(&[4], 0.5);
        let params = init_params(&s, 3);
        let ens = mc_dropout_ensemble(&params, 4, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ensemble.uqad");
        save_ensemble(&path, &ens).unwrap();
        let back = load_ensemble(&path).unwrap();
        assert_eq!(ens, back);
    }
}
