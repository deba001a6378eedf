//! Adversarial example crafting against posterior ensembles.
//!
//! Gradient attacks (single-step FGM and iterative momentum MIM) maximise
//! the cross-entropy of the ensemble-mean prediction with respect to the
//! input; the gradient can be routed through a fixed member, a freshly
//! drawn posterior member per query, or the full ensemble mean. A matched
//! noise control, a gradient-free latent-grid search for uncertainty
//! holes, and a sphere-constrained variant complete the set.

use crate::diffgraph::Tensor;
use crate::inference::{predictive, Member, PosteriorEnsemble};
use crate::manifold::GridDataset;
use crate::netmodel::{mean_prob_loss_graph, NetError};
use crate::uncertainty::mutual_information;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("input is not on a sphere: ||x|| = {0}")]
    NotOnSphere(f64),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Inf,
    L2,
}

/// Which member(s) supply the attack gradient. Prediction quality is
/// always judged against the full ensemble; this only affects the signal
/// the attacker sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientSource {
    FixedMember(usize),
    /// A member redrawn uniformly per gradient query, as when every query
    /// to a Bayesian model answers with a fresh posterior realisation.
    FreshPosteriorSample,
    EnsembleMean,
}

/// Per-coordinate clipping box, typically the empirical range of the
/// training inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRange {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ClipRange {
    pub fn from_points(points: &[Vec<f64>]) -> Self {
        let d = points[0].len();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for p in points {
            for i in 0..d {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        ClipRange { lo, hi }
    }

    fn apply(&self, x: &mut [f64]) {
        for (v, (&l, &h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(l, h);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Maximum perturbation; infinity-norm unless `norm` says otherwise.
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    /// Momentum decay mu for the iterative attack.
    pub momentum: f64,
    pub norm: NormKind,
    pub gradient_source: GradientSource,
    pub clip: Option<ClipRange>,
    pub seed: u64,
}

impl AttackConfig {
    /// Iterative defaults: mu = 1, alpha = epsilon / iterations, 10 steps.
    pub fn mim_default(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            step_size: epsilon / 10.0,
            iterations: 10,
            momentum: 1.0,
            norm: NormKind::Inf,
            gradient_source: GradientSource::EnsembleMean,
            clip: None,
            seed: 0,
        }
    }
}

/// Full record of one attack run, one entry per step including step 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackTrajectory {
    pub inputs: Vec<Vec<f64>>,
    pub mean_probs: Vec<Vec<f64>>,
    pub mutual_information: Vec<f64>,
    pub perturbation_norm: Vec<f64>,
    pub gt_log_density: Option<Vec<f64>>,
    pub success: bool,
    pub original_label: usize,
    pub final_label: usize,
}

impl AttackTrajectory {
    pub fn final_input(&self) -> &[f64] {
        self.inputs.last().expect("trajectory has steps")
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Gradient of `-log(mean prob of label)` at x through the chosen source.
fn attack_gradient(
    ensemble: &PosteriorEnsemble,
    x: &[f64],
    label: usize,
    source: GradientSource,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, AttackError> {
    let members: Vec<(&_, Option<&_>)> = match source {
        GradientSource::FixedMember(i) => {
            let m: &Member = ensemble.members.get(i).ok_or_else(|| {
                AttackError::InvalidConfig(format!("fixed member {i} out of range"))
            })?;
            vec![(&m.params, m.mask.as_ref())]
        }
        GradientSource::FreshPosteriorSample => {
            let i = rng.random_range(0..ensemble.num_members());
            let m = &ensemble.members[i];
            vec![(&m.params, m.mask.as_ref())]
        }
        GradientSource::EnsembleMean => ensemble
            .members
            .iter()
            .map(|m| (&m.params, m.mask.as_ref()))
            .collect(),
    };
    let graph = mean_prob_loss_graph(&members, label)?;
    let mut binding = HashMap::new();
    binding.insert("x".to_string(), Tensor::vector(x));
    let grad = graph
        .grad(&binding, "x")
        .map_err(NetError::from)?;
    Ok(grad.values().to_vec())
}

fn record_step(
    ensemble: &PosteriorEnsemble,
    traj: &mut AttackTrajectory,
    x0: &[f64],
    x: &[f64],
) -> Result<(), AttackError> {
    let pd = predictive(ensemble, x)?;
    traj.mutual_information
        .push(mutual_information(&pd).mutual_information);
    traj.mean_probs.push(pd.mean_probs);
    traj.perturbation_norm.push(linf(x0, x));
    traj.inputs.push(x.to_vec());
    Ok(())
}

fn finish_trajectory(mut traj: AttackTrajectory, target: Option<usize>) -> AttackTrajectory {
    let clean = argmax(&traj.mean_probs[0]);
    let fin = argmax(traj.mean_probs.last().expect("steps"));
    traj.original_label = clean;
    traj.final_label = fin;
    traj.success = match target {
        Some(t) => fin == t,
        None => fin != clean,
    };
    traj
}

fn empty_trajectory() -> AttackTrajectory {
    AttackTrajectory {
        inputs: Vec::new(),
        mean_probs: Vec::new(),
        mutual_information: Vec::new(),
        perturbation_norm: Vec::new(),
        gt_log_density: None,
        success: false,
        original_label: 0,
        final_label: 0,
    }
}

/// Single-step fast gradient method. Untargeted: ascend the loss of the
/// true label; targeted: descend the loss of the target label.
pub fn fgm(
    ensemble: &PosteriorEnsemble,
    x: &[f64],
    label: usize,
    cfg: &AttackConfig,
    target: Option<usize>,
) -> Result<AttackTrajectory, AttackError> {
    if cfg.epsilon < 0.0 {
        return Err(AttackError::InvalidConfig("epsilon must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut traj = empty_trajectory();
    record_step(ensemble, &mut traj, x, x)?;
    let loss_label = target.unwrap_or(label);
    let g = attack_gradient(ensemble, x, loss_label, cfg.gradient_source, &mut rng)?;
    let sign = if target.is_some() { -1.0 } else { 1.0 };
    let mut x1: Vec<f64> = match cfg.norm {
        NormKind::Inf => x
            .iter()
            .zip(&g)
            .map(|(&v, &gi)| v + sign * cfg.epsilon * gi.signum() * f64::from(gi != 0.0))
            .collect(),
        NormKind::L2 => {
            let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                x.iter()
                    .zip(&g)
                    .map(|(&v, &gi)| v + sign * cfg.epsilon * gi / norm)
                    .collect()
            } else {
                x.to_vec()
            }
        }
    };
    if let Some(clip) = &cfg.clip {
        clip.apply(&mut x1);
    }
    project_ball(&mut x1, x, cfg.epsilon, cfg.norm);
    record_step(ensemble, &mut traj, x, &x1)?;
    Ok(finish_trajectory(traj, target))
}

fn project_ball(x: &mut [f64], x0: &[f64], epsilon: f64, norm: NormKind) {
    match norm {
        NormKind::Inf => {
            for (v, &o) in x.iter_mut().zip(x0) {
                *v = v.clamp(o - epsilon, o + epsilon);
            }
        }
        NormKind::L2 => {
            let d: f64 = x
                .iter()
                .zip(x0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d > epsilon && d > 0.0 {
                let s = epsilon / d;
                for (v, &o) in x.iter_mut().zip(x0) {
                    *v = o + (*v - o) * s;
                }
            }
        }
    }
}

/// Iterative momentum attack: g <- mu g + grad / ||grad||_1, then a signed
/// step projected back into the epsilon-ball and the clip box each round.
pub fn mim(
    ensemble: &PosteriorEnsemble,
    x: &[f64],
    label: usize,
    cfg: &AttackConfig,
) -> Result<AttackTrajectory, AttackError> {
    if cfg.iterations == 0 {
        return Err(AttackError::InvalidConfig("iterations must be >= 1".into()));
    }
    if cfg.step_size <= 0.0 {
        return Err(AttackError::InvalidConfig("step_size must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut traj = empty_trajectory();
    record_step(ensemble, &mut traj, x, x)?;
    let mut g = vec![0.0; x.len()];
    let mut xt = x.to_vec();
    for _ in 0..cfg.iterations {
        let grad = attack_gradient(ensemble, &xt, label, cfg.gradient_source, &mut rng)?;
        let l1: f64 = grad.iter().map(|v| v.abs()).sum();
        for (gi, &di) in g.iter_mut().zip(&grad) {
            *gi = cfg.momentum * *gi + if l1 > 0.0 { di / l1 } else { 0.0 };
        }
        for (v, &gi) in xt.iter_mut().zip(&g) {
            *v += cfg.step_size * gi.signum() * f64::from(gi != 0.0);
        }
        if let Some(clip) = &cfg.clip {
            clip.apply(&mut xt);
        }
        project_ball(&mut xt, x, cfg.epsilon, cfg.norm);
        record_step(ensemble, &mut traj, x, &xt)?;
    }
    Ok(finish_trajectory(traj, None))
}

/// Matched-magnitude control: uniform noise in [-epsilon, epsilon] per
/// coordinate, clipped to the same box as the attacks.
pub fn noise_control(x: &[f64], cfg: &AttackConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out: Vec<f64> = x
        .iter()
        .map(|&v| v + rng.random_range(-1.0..=1.0) * cfg.epsilon)
        .collect();
    if let Some(clip) = &cfg.clip {
        clip.apply(&mut out);
    }
    project_ball(&mut out, x, cfg.epsilon, NormKind::Inf);
    out
}

/// A decoded grid point that the model is confident about while its
/// epistemic uncertainty is low — a candidate "garbage" input.
#[derive(Debug, Clone, PartialEq)]
pub struct HoleCandidate {
    pub latent: [f64; 2],
    pub input: Vec<f64>,
    pub confidence: f64,
    pub predicted_class: usize,
    pub mutual_information: f64,
    /// Latent-space L2 distance to the nearest training latent.
    pub distance_to_train: f64,
}

/// Gradient-free attack: query the model's uncertainty on every decoded
/// grid point, keep points with MI at or below the threshold, and return
/// the `top_k` farthest (in latent space) from the training latents.
pub fn latent_hole_attack(
    ensemble: &PosteriorEnsemble,
    grid: &GridDataset,
    train_latents: &[[f64; 2]],
    mi_threshold: f64,
    top_k: usize,
) -> Result<Vec<HoleCandidate>, AttackError> {
    assert!(!grid.latents.is_empty(), "grid must be nonempty");
    assert!(mi_threshold >= 0.0, "mi_threshold must be >= 0");
    let mut candidates = Vec::new();
    for (z, x) in grid.latents.iter().zip(&grid.inputs) {
        let pd = predictive(ensemble, x)?;
        let mi = mutual_information(&pd).mutual_information;
        if mi > mi_threshold {
            continue;
        }
        let cls = argmax(&pd.mean_probs);
        let distance = train_latents
            .iter()
            .map(|t| ((z[0] - t[0]).powi(2) + (z[1] - t[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        candidates.push(HoleCandidate {
            latent: *z,
            input: x.clone(),
            confidence: pd.mean_probs[cls],
            predicted_class: cls,
            mutual_information: mi,
            distance_to_train: distance,
        });
    }
    candidates.sort_by(|a, b| {
        b.distance_to_train
            .partial_cmp(&a.distance_to_train)
            .expect("finite distances")
    });
    candidates.truncate(top_k);
    Ok(candidates)
}

/// Iterative attack constrained to the sphere the input lives on: each
/// normalised-gradient step is followed by renormalisation to the original
/// radius, so the epsilon budget plays no role here — the constraint set
/// is the sphere itself.
pub fn sphere_projected_attack(
    ensemble: &PosteriorEnsemble,
    x: &[f64],
    label: usize,
    cfg: &AttackConfig,
) -> Result<AttackTrajectory, AttackError> {
    let radius: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if radius <= 0.0 {
        return Err(AttackError::NotOnSphere(radius));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut traj = empty_trajectory();
    record_step(ensemble, &mut traj, x, x)?;
    let mut xt = x.to_vec();
    for _ in 0..cfg.iterations {
        let grad = attack_gradient(ensemble, &xt, label, cfg.gradient_source, &mut rng)?;
        let norm: f64 = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (v, &gi) in xt.iter_mut().zip(&grad) {
                *v += cfg.step_size * gi / norm;
            }
        }
        let r: f64 = xt.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut xt {
            *v *= radius / r;
        }
        record_step(ensemble, &mut traj, x, &xt)?;
    }
    Ok(finish_trajectory(traj, None))
}

/// Trajectory CSV: one row per step, a leading trajectory index so several
/// runs share one file. `gt_log_density` stays empty when unavailable.
pub fn write_trajectories_csv<W: Write>(
    out: &mut W,
    trajectories: &[AttackTrajectory],
) -> std::io::Result<()> {
    writeln!(
        out,
        "trajectory,step,linf_norm,pred_class,pred_prob,mi,gt_log_density"
    )?;
    for (t, traj) in trajectories.iter().enumerate() {
        for s in 0..traj.inputs.len() {
            let probs = &traj.mean_probs[s];
            let cls = argmax(probs);
            let density = traj
                .gt_log_density
                .as_ref()
                .map(|d| format!("{:.12}", d[s]))
                .unwrap_or_default();
            writeln!(
                out,
                "{t},{s},{:.12},{cls},{:.12},{:.12},{density}",
                traj.perturbation_norm[s], probs[cls], traj.mutual_information[s]
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{MemberKind, PosteriorEnsemble};
    use crate::manifold::DecoderSpec;
    use crate::netmodel::{
        init_params, Activation, FeatureMode, NetworkSpec, ParamVector,
    };

    fn linear_spec(d: usize) -> NetworkSpec {
        NetworkSpec::new(d, vec![], Activation::Relu, 2, 0.0, FeatureMode::Raw).unwrap()
    }

    /// Linear two-class model: logits = (w.x, 0).
    fn linear_ensemble(w: &[f64]) -> PosteriorEnsemble {
        let spec = linear_spec(w.len());
        let mut values = w.to_vec();
        values.extend(vec![0.0; w.len() + 2]); // zero second row and biases
        let params = ParamVector::new(spec.clone(), values).unwrap();
        PosteriorEnsemble::uniform(
            spec,
            MemberKind::Independent,
            vec![Member { params, mask: None }],
        )
    }

    fn random_ensemble(d: usize, members: usize, seed: u64) -> PosteriorEnsemble {
        let spec = NetworkSpec::new(
            d,
            vec![6],
            Activation::Sine,
            2,
            0.0,
            FeatureMode::Raw,
        )
        .unwrap();
        let members = (0..members)
            .map(|m| Member {
                params: init_params(&spec, seed + m as u64),
                mask: None,
            })
            .collect();
        PosteriorEnsemble::uniform(spec, MemberKind::Independent, members)
    }

    #[test]
    fn fgm_zero_epsilon_leaves_input_unchanged() {
        let ens = random_ensemble(3, 2, 0);
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::mim_default(0.0)
        };
        let x = [0.3, -0.4, 0.9];
        let traj = fgm(&ens, &x, 0, &cfg, None).unwrap();
        assert_eq!(traj.final_input(), &x);
        assert_eq!(traj.perturbation_norm, vec![0.0, 0.0]);
    }

    #[test]
    fn fgm_moves_by_epsilon_times_gradient_sign() {
        // logits (w.x, 0) with w = (1, -2, 0); for true label 1 the loss
        // -log p1 grows with w.x, so its input gradient is p0 * w and the
        // untargeted step is +eps * sign(w) where w is nonzero.
        let ens = linear_ensemble(&[1.0, -2.0, 0.0]);
        let cfg = AttackConfig::mim_default(0.1);
        let x = [0.2, 0.1, -0.5];
        let traj = fgm(&ens, &x, 1, &cfg, None).unwrap();
        let expect = [0.3, 0.0, -0.5];
        for (a, e) in traj.final_input().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        // targeted towards class 1 descends the same loss: opposite signs
        let traj = fgm(&ens, &x, 0, &cfg, Some(1)).unwrap();
        let expect = [0.1, 0.2, -0.5];
        for (a, e) in traj.final_input().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn mim_single_iteration_matches_fgm_with_alpha_budget() {
        let ens = random_ensemble(4, 3, 5);
        let x = [0.5, -0.2, 0.8, 0.1];
        let mim_cfg = AttackConfig {
            iterations: 1,
            step_size: 0.07,
            epsilon: 0.07,
            ..AttackConfig::mim_default(0.07)
        };
        let fgm_cfg = AttackConfig {
            epsilon: 0.07,
            ..mim_cfg.clone()
        };
        let a = mim(&ens, &x, 0, &mim_cfg).unwrap();
        let b = fgm(&ens, &x, 0, &fgm_cfg, None).unwrap();
        assert_eq!(a.final_input(), b.final_input());
    }

    #[test]
    fn mim_respects_epsilon_ball_every_step() {
        for seed in 0..100 {
            let ens = random_ensemble(3, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cfg = AttackConfig {
                seed,
                step_size: 0.05,
                ..AttackConfig::mim_default(0.1)
            };
            let traj = mim(&ens, &x, 0, &cfg).unwrap();
            for norm in &traj.perturbation_norm {
                assert!(*norm <= cfg.epsilon + 1e-12, "norm {norm}");
            }
            assert_eq!(traj.inputs[0], x);
        }
    }

    #[test]
    fn clip_box_is_respected() {
        let ens = linear_ensemble(&[5.0, -5.0]);
        let clip = ClipRange {
            lo: vec![0.0, 0.0],
            hi: vec![0.25, 0.25],
        };
        let cfg = AttackConfig {
            clip: Some(clip.clone()),
            ..AttackConfig::mim_default(0.5)
        };
        let x = [0.2, 0.05];
        let traj = mim(&ens, &x, 1, &cfg).unwrap();
        for step in &traj.inputs {
            for (v, (&l, &h)) in step.iter().zip(clip.lo.iter().zip(&clip.hi)) {
                assert!(*v >= l - 1e-12 && *v <= h + 1e-12);
            }
        }
    }

    #[test]
    fn ensemble_mean_on_singleton_equals_fixed_member() {
        let ens = random_ensemble(3, 1, 9);
        let x = [0.1, 0.7, -0.3];
        let a = fgm(
            &ens,
            &x,
            0,
            &AttackConfig {
                gradient_source: GradientSource::EnsembleMean,
                ..AttackConfig::mim_default(0.1)
            },
            None,
        )
        .unwrap();
        let b = fgm(
            &ens,
            &x,
            0,
            &AttackConfig {
                gradient_source: GradientSource::FixedMember(0),
                ..AttackConfig::mim_default(0.1)
            },
            None,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fresh_sample_attack_is_seed_deterministic() {
        let ens = random_ensemble(3, 8, 2);
        let x = [0.4, 0.2, -0.6];
        let cfg = AttackConfig {
            gradient_source: GradientSource::FreshPosteriorSample,
            seed: 5,
            ..AttackConfig::mim_default(0.2)
        };
        let a = mim(&ens, &x, 0, &cfg).unwrap();
        let b = mim(&ens, &x, 0, &cfg).unwrap();
        assert_eq!(a, b);
        let c = mim(
            &ens,
            &x,
            0,
            &AttackConfig { seed: 6, ..cfg },
        )
        .unwrap();
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn noise_control_contract() {
        let cfg = AttackConfig::mim_default(0.0);
        let x = [0.3, -0.9, 0.1];
        assert_eq!(noise_control(&x, &cfg), x.to_vec());
        for seed in 0..200 {
            let cfg = AttackConfig {
                seed,
                ..AttackConfig::mim_default(0.15)
            };
            let y = noise_control(&x, &cfg);
            assert!(linf(&x, &y) <= 0.15 + 1e-12);
        }
    }

    #[test]
    fn latent_hole_degenerate_filter_returns_farthest_point() {
        let ens = random_ensemble(32, 2, 0);
        let dec = DecoderSpec::default_config(0);
        let grid = crate::manifold::make_grid(&dec, [-3.0, -3.0], [3.0, 3.0], 5);
        let train = [[0.0f64, 0.0]];
        let out =
            latent_hole_attack(&ens, &grid, &train, f64::INFINITY, 1).unwrap();
        assert_eq!(out.len(), 1);
        // corners are the farthest lattice points from the origin
        let d = out[0].distance_to_train;
        assert!((d - (18.0f64).sqrt()).abs() < 1e-12, "distance {d}");
    }

    #[test]
    fn sphere_attack_stays_on_the_sphere() {
        let ens = random_ensemble(4, 2, 3);
        let x = {
            let v = [0.5, -0.5, 0.5, 0.5];
            let r: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.map(|a| a * 1.3 / r)
        };
        let cfg = AttackConfig {
            epsilon: f64::INFINITY,
            step_size: 0.1,
            iterations: 20,
            ..AttackConfig::mim_default(1.0)
        };
        let traj = sphere_projected_attack(&ens, &x, 0, &cfg).unwrap();
        for step in &traj.inputs {
            let r: f64 = step.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((r - 1.3).abs() <= 1e-9, "radius {r}");
        }
    }

    #[test]
    fn radial_model_never_flips_on_sphere() {
        let spec = NetworkSpec::new(
            4,
            vec![6],
            Activation::Sine,
            2,
            0.0,
            FeatureMode::Radial,
        )
        .unwrap();
        let ens = PosteriorEnsemble::uniform(
            spec.clone(),
            MemberKind::Independent,
            vec![Member {
                params: init_params(&spec, 1),
                mask: None,
            }],
        );
        let cfg = AttackConfig {
            epsilon: f64::INFINITY,
            step_size: 0.2,
            iterations: 15,
            ..AttackConfig::mim_default(1.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut x: Vec<f64> = (0..4)
                .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
                .collect();
            let r: f64 = x.iter().map(|a: &f64| a * a).sum::<f64>().sqrt();
            for v in &mut x {
                *v /= r;
            }
            let traj = sphere_projected_attack(&ens, &x, 0, &cfg).unwrap();
            assert!(!traj.success, "radial model flipped on-sphere");
        }
    }

    #[test]
    fn trajectory_csv_shape() {
        let ens = random_ensemble(3, 2, 0);
        let x = [0.2, -0.1, 0.4];
        let cfg = AttackConfig::mim_default(0.1);
        let mut traj = mim(&ens, &x, 0, &cfg).unwrap();
        traj.gt_log_density = Some(vec![-1.0; traj.inputs.len()]);
        let mut buf = Vec::new();
        write_trajectories_csv(&mut buf, &[traj.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "trajectory,step,linf_norm,pred_class,pred_prob,mi,gt_log_density"
        );
        assert_eq!(lines.len(), 1 + traj.inputs.len());
        assert!(lines[1].starts_with("0,0,0.000000000000,"));
    }
}
