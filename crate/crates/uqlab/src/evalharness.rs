//! Metrics, theory audits, and the experiment runners that assemble the
//! study's figures and tables at desk scale.
//!
//! The audits operationalise the theory: `estimate_delta_ball` probes how
//! far a confident prediction extends around a training point, and
//! `idealised_audit` measures how much of the space outside those balls
//! carries epistemic uncertainty above the `H(eps)` threshold — the
//! sufficient condition under which gradient attacks should fail.

use crate::attacks::{
    self, latent_hole_attack, mim, noise_control, sphere_projected_attack,
    write_trajectories_csv, AttackConfig, AttackError, AttackTrajectory, ClipRange, GradientSource,
};
use crate::config::RunConfig;
use crate::inference::{
    deep_ensemble, hmc_sample, mc_dropout_ensemble, predictive, train_map, HmcConfig,
    InferenceError, PosteriorEnsemble, TrainConfig,
};
use crate::manifold::{
    make_grid, make_spheres, sample_dataset, DecoderSpec, GridDataset, LatentMixture,
    ManifoldDataset, ManifoldError, QuadratureGrid,
};
use crate::netmodel::{forward_logits, Activation, FeatureMode, NetError, NetworkSpec};
use crate::uncertainty::{entropy, high_confidence_threshold, mutual_information};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown experiment '{name}'; valid names: {valid}")]
    UnknownExperiment { name: String, valid: String },
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("detection needs both classes present")]
    SingleClass,
    #[error("rank correlation undefined: zero rank variance")]
    DegenerateRanks,
    #[error("input lengths differ or are zero")]
    BadLengths,
    #[error("point is not high-confidence (max mean prob {0} <= 1 - epsilon)")]
    NotHighConfidence(f64),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fraction of trajectories whose attack goal was reached.
pub fn success_rate(trajectories: &[AttackTrajectory]) -> f64 {
    assert!(!trajectories.is_empty(), "need at least one trajectory");
    trajectories.iter().filter(|t| t.success).count() as f64 / trajectories.len() as f64
}

/// ROC sweep over a score threshold: higher score means "flagged".
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    /// (false positive rate, true positive rate), monotone in both axes.
    pub roc: Vec<(f64, f64)>,
    pub auc: f64,
}

/// AUC with half credit for ties (rank statistic form), plus the ROC curve.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<DetectionResult, EvalError> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(EvalError::BadLengths);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let auc = (rank_sum - pos as f64 * (pos as f64 + 1.0) / 2.0) / (pos as f64 * neg as f64);

    // threshold sweep, descending score
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut roc = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(DetectionResult {
        scores: scores.to_vec(),
        labels: labels.to_vec(),
        roc,
        auc,
    })
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(EvalError::BadLengths);
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::DegenerateRanks);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Aggregates over a set of density-annotated attack trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityReport {
    pub per_step_mean: Vec<f64>,
    pub per_step_median: Vec<f64>,
    /// Spearman(step, log density) per trajectory; `None` when degenerate
    /// (constant density), reported as excluded.
    pub per_trajectory_rho: Vec<Option<f64>>,
    pub median_rho: Option<f64>,
    pub excluded: usize,
    /// Fraction of trajectories whose final log density is below the
    /// initial one.
    pub fraction_final_below_initial: f64,
}

pub fn density_trajectory_report(trajectories: &[AttackTrajectory]) -> DensityReport {
    assert!(!trajectories.is_empty());
    let steps = trajectories[0].inputs.len();
    let mut per_step_mean = Vec::with_capacity(steps);
    let mut per_step_median = Vec::with_capacity(steps);
    for s in 0..steps {
        let mut col: Vec<f64> = trajectories
            .iter()
            .filter_map(|t| t.gt_log_density.as_ref().map(|d| d[s]))
            .collect();
        col.sort_by(|a, b| a.partial_cmp(b).expect("finite densities"));
        per_step_mean.push(col.iter().sum::<f64>() / col.len() as f64);
        per_step_median.push(col[col.len() / 2]);
    }
    let mut per_trajectory_rho = Vec::with_capacity(trajectories.len());
    let mut below = 0usize;
    for t in trajectories {
        let d = t.gt_log_density.as_ref().expect("densities present");
        let steps_axis: Vec<f64> = (0..d.len()).map(|i| i as f64).collect();
        per_trajectory_rho.push(spearman(&steps_axis, d).ok());
        if d.last() < d.first() {
            below += 1;
        }
    }
    let mut valid: Vec<f64> = per_trajectory_rho.iter().flatten().copied().collect();
    valid.sort_by(|a, b| a.partial_cmp(b).expect("finite rho"));
    let median_rho = if valid.is_empty() {
        None
    } else {
        Some(valid[valid.len() / 2])
    };
    DensityReport {
        per_step_mean,
        per_step_median,
        excluded: trajectories.len() - valid.len(),
        per_trajectory_rho,
        median_rho,
        fraction_final_below_initial: below as f64 / trajectories.len() as f64,
    }
}

/// Probabilistically certified radius of confident prediction around a
/// training input.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaBallEstimate {
    pub center: Vec<f64>,
    pub delta: f64,
    pub probes: usize,
    pub epsilon: f64,
}

/// Largest schedule radius at which every probe direction keeps the same
/// argmax with max mean probability above `1 - epsilon`. The probe
/// directions are drawn once and reused across radii, so loosening
/// epsilon can only grow the certified radius.
pub fn estimate_delta_ball(
    ensemble: &PosteriorEnsemble,
    x: &[f64],
    epsilon: f64,
    probes: usize,
    radius_schedule: &[f64],
    seed: u64,
) -> Result<DeltaBallEstimate, EvalError> {
    let pd = predictive(ensemble, x)?;
    let clean_class = argmax(&pd.mean_probs);
    let clean_conf = pd.mean_probs[clean_class];
    if clean_conf <= 1.0 - epsilon {
        return Err(EvalError::NotHighConfidence(clean_conf));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = (0..probes)
        .map(|_| {
            let mut v: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            for a in &mut v {
                *a /= n;
            }
            v
        })
        .collect();
    let mut delta = 0.0f64;
    for &r in radius_schedule {
        if r < 0.0 {
            continue;
        }
        let mut all_pass = true;
        if r > 0.0 {
            for dir in &dirs {
                let probe: Vec<f64> = x.iter().zip(dir).map(|(&a, &d)| a + r * d).collect();
                let pd = predictive(ensemble, &probe)?;
                let cls = argmax(&pd.mean_probs);
                if cls != clean_class || pd.mean_probs[cls] <= 1.0 - epsilon {
                    all_pass = false;
                    break;
                }
            }
        }
        if all_pass {
            delta = delta.max(r);
        }
    }
    Ok(DeltaBallEstimate {
        center: x.to_vec(),
        delta,
        probes,
        epsilon,
    })
}

/// Outcome of checking the off-ball uncertainty condition on probe points.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealisedAudit {
    pub epsilon: f64,
    pub h_eps: f64,
    pub num_inside: usize,
    pub num_outside: usize,
    /// Fraction of outside-all-balls points whose MI exceeds `H(epsilon)`.
    pub outside_high_mi_fraction: f64,
    /// Per probe point: (inside any ball, mutual information).
    pub per_point: Vec<(bool, f64)>,
}

pub fn idealised_audit(
    ensemble: &PosteriorEnsemble,
    probe_inputs: &[Vec<f64>],
    balls: &[DeltaBallEstimate],
    epsilon: f64,
) -> Result<IdealisedAudit, EvalError> {
    let h_eps = high_confidence_threshold(epsilon).expect("epsilon in range");
    let mut per_point = Vec::with_capacity(probe_inputs.len());
    let mut num_inside = 0;
    let mut num_outside = 0;
    let mut outside_high = 0;
    for x in probe_inputs {
        let inside = balls.iter().any(|b| {
            b.delta > 0.0 && {
                let d: f64 = x
                    .iter()
                    .zip(&b.center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt();
                d <= b.delta
            }
        });
        let mi = mutual_information(&predictive(ensemble, x)?).mutual_information;
        if inside {
            num_inside += 1;
        } else {
            num_outside += 1;
            if mi > h_eps {
                outside_high += 1;
            }
        }
        per_point.push((inside, mi));
    }
    let outside_high_mi_fraction = if num_outside > 0 {
        outside_high as f64 / num_outside as f64
    } else {
        0.0
    };
    Ok(IdealisedAudit {
        epsilon,
        h_eps,
        num_inside,
        num_outside,
        outside_high_mi_fraction,
        per_point,
    })
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

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

// ---------------------------------------------------------------------
// Experiment runners
// ---------------------------------------------------------------------

pub const EXPERIMENT_NAMES: [&str; 10] = [
    "fig2_density_vs_step",
    "fig5_mi_vs_density",
    "table1_hmc_vs_det",
    "fig7_9_holes",
    "table3_latent_attack",
    "table4_ensemble_defence",
    "table2_auc_analog",
    "spheres_invariance",
    "lemma1_audit",
    "appendixA_invariance",
];

/// Summary emitted by an experiment, also written to disk as key=value.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub name: String,
    pub summary: Vec<(String, String)>,
    pub files: Vec<PathBuf>,
}

impl ExperimentReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| v.parse().ok())
    }
}

/// Everything the manifold experiments share: data, decoder, density
/// oracle, probe grid, and the clip box attacks operate inside.
pub struct Lab {
    pub cfg: RunConfig,
    pub mix: LatentMixture,
    pub dec: DecoderSpec,
    pub train: ManifoldDataset,
    pub test: ManifoldDataset,
    pub grid: GridDataset,
    pub quad: QuadratureGrid,
    pub clip: ClipRange,
}

impl Lab {
    pub fn build(cfg: &RunConfig) -> Result<Self, EvalError> {
        let mix = LatentMixture::default_config();
        let dec = DecoderSpec::new(
            cfg.data_input_dim,
            cfg.data_sigma_x,
            cfg.data_gain,
            cfg.data_decoder_seed,
        );
        let data = sample_dataset(
            &mix,
            &dec,
            cfg.data_n,
            cfg.sub_seed("data"),
            cfg.data_quad_resolution,
        )?;
        let n_train = cfg.data_n * 2 / 3;
        let train = data.subset(&(0..n_train).collect::<Vec<_>>());
        let test = data.subset(&(n_train..cfg.data_n).collect::<Vec<_>>());
        let (lo, hi) = mix.envelope(cfg.grid_pad_sigma);
        let grid = make_grid(&dec, lo, hi, cfg.grid_resolution);
        let (qlo, qhi) = mix.envelope(7.0);
        let quad = QuadratureGrid::new(&mix, &dec, qlo, qhi, cfg.data_quad_resolution)?;
        let clip = ClipRange::from_points(&train.inputs);
        Ok(Lab {
            cfg: cfg.clone(),
            mix,
            dec,
            train,
            test,
            grid,
            quad,
            clip,
        })
    }

    fn spec(&self, dropout: f64, feature_mode: FeatureMode) -> NetworkSpec {
        let activation = match self.cfg.model_activation.as_str() {
            "sine" => Activation::Sine,
            _ => Activation::Relu,
        };
        NetworkSpec::new(
            self.cfg.data_input_dim,
            self.cfg.model_hidden.clone(),
            activation,
            self.mix.num_classes(),
            dropout,
            feature_mode,
        )
        .expect("model spec")
    }

    fn train_cfg(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.cfg.train_learning_rate,
            epochs: self.cfg.train_epochs,
            batch_size: self.cfg.train_batch_size,
            weight_decay: self.cfg.train_weight_decay,
            seed,
        }
    }

    fn hmc_cfg(&self, seed: u64) -> HmcConfig {
        HmcConfig {
            step_size: self.cfg.hmc_step_size,
            leapfrog_steps: self.cfg.hmc_leapfrog_steps,
            num_samples: self.cfg.hmc_num_samples,
            burn_in: self.cfg.hmc_burn_in,
            thinning: self.cfg.hmc_thinning,
            prior_precision: self.cfg.hmc_prior_precision,
            seed,
        }
    }

    /// Deterministic (single-member) MAP model.
    pub fn map_model(&self, seed: u64) -> Result<PosteriorEnsemble, EvalError> {
        let spec = self.spec(0.0, FeatureMode::Raw);
        let params = train_map(&spec, &self.train.to_labeled(), &self.train_cfg(seed))?;
        Ok(PosteriorEnsemble::uniform(
            spec,
            crate::inference::MemberKind::Independent,
            vec![crate::inference::Member { params, mask: None }],
        ))
    }

    /// Single dropout model: dropout-active training, then fixed-mask
    /// passes as ensemble members.
    pub fn dropout_model(&self, seed: u64) -> Result<PosteriorEnsemble, EvalError> {
        let spec = self.spec(self.cfg.dropout_rate, FeatureMode::Raw);
        let params = train_map(&spec, &self.train.to_labeled(), &self.train_cfg(seed))?;
        Ok(mc_dropout_ensemble(
            &params,
            self.cfg.dropout_passes,
            seed.wrapping_add(1),
        ))
    }

    /// Deep ensemble of dropout models.
    pub fn ensemble_model(&self, seed: u64) -> Result<PosteriorEnsemble, EvalError> {
        let spec = self.spec(self.cfg.dropout_rate, FeatureMode::Raw);
        Ok(deep_ensemble(
            &spec,
            &self.train.to_labeled(),
            &self.train_cfg(seed),
            self.cfg.ensemble_members,
            self.cfg.ensemble_dropout_passes,
            seed,
        )?)
    }

    /// HMC posterior over a training subset (full-batch gradients keep
    /// this the slowest model, so the subset size is a config knob).
    pub fn hmc_model(&self, seed: u64) -> Result<PosteriorEnsemble, EvalError> {
        let spec = self.spec(0.0, FeatureMode::Raw);
        let n = self.cfg.hmc_train_subset.min(self.train.len());
        let subset = self.train.subset(&(0..n).collect::<Vec<_>>());
        let (ensemble, _report) = hmc_sample(&spec, &subset.to_labeled(), &self.hmc_cfg(seed))?;
        Ok(ensemble)
    }

    pub fn hmc_train_points(&self) -> ManifoldDataset {
        let n = self.cfg.hmc_train_subset.min(self.train.len());
        self.train.subset(&(0..n).collect::<Vec<_>>())
    }

    fn attack_inputs(&self) -> Vec<usize> {
        (0..self.cfg.attack_num_inputs.min(self.test.len())).collect()
    }

    fn mim_cfg(&self, epsilon: f64, source: GradientSource, seed: u64) -> AttackConfig {
        AttackConfig {
            epsilon,
            step_size: epsilon / self.cfg.attack_iterations as f64,
            iterations: self.cfg.attack_iterations,
            momentum: self.cfg.attack_momentum,
            norm: attacks::NormKind::Inf,
            gradient_source: source,
            clip: Some(self.clip.clone()),
            seed,
        }
    }
}

fn write_summary(
    path: &Path,
    cfg: &RunConfig,
    name: &str,
    summary: &[(String, String)],
) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# experiment = {name}")?;
    writeln!(f, "# master_seed = {}", cfg.seed)?;
    writeln!(f, "# config_hash = {:016x}", cfg.config_hash())?;
    writeln!(f, "# entropy_unit = nats")?;
    writeln!(
        f,
        "# caveat = desk-scale synthetic analog; comparisons are directional, \
         not numeric reproductions"
    )?;
    for (k, v) in summary {
        writeln!(f, "{k} = {v}")?;
    }
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v:.12}")
}

/// Runs one named experiment end to end, writing CSVs and a summary under
/// `cfg.out_dir`. Deterministic: identical config gives identical bytes.
pub fn run_experiment(name: &str, cfg: &RunConfig) -> Result<ExperimentReport, EvalError> {
    if !EXPERIMENT_NAMES.contains(&name) {
        return Err(EvalError::UnknownExperiment {
            name: name.to_string(),
            valid: EXPERIMENT_NAMES.join(", "),
        });
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    let mut summary: Vec<(String, String)> = Vec::new();
    let mut files: Vec<PathBuf> = Vec::new();

    match name {
        "fig2_density_vs_step" => {
            let lab = Lab::build(cfg)?;
            let model = lab.map_model(cfg.sub_seed("fig2/map"))?;
            let mut trajectories = Vec::new();
            for (i, &idx) in lab.attack_inputs().iter().enumerate() {
                // iterated FGM: momentum-free signed steps
                let mut acfg = lab.mim_cfg(
                    cfg.attack_epsilon_large,
                    GradientSource::EnsembleMean,
                    cfg.sub_seed(&format!("fig2/attack{i}")),
                );
                acfg.momentum = 0.0;
                let mut traj = mim(&model, &lab.test.inputs[idx], lab.test.labels[idx], &acfg)?;
                traj.gt_log_density = Some(
                    traj.inputs
                        .iter()
                        .map(|x| lab.quad.log_density(&lab.dec, x))
                        .collect(),
                );
                trajectories.push(traj);
            }
            let report = density_trajectory_report(&trajectories);
            let csv = out_dir.join("fig2_density_vs_step.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&csv)?);
            write_trajectories_csv(&mut f, &trajectories)?;
            files.push(csv);
            summary.push(("num_trajectories".into(), trajectories.len().to_string()));
            summary.push((
                "median_spearman_step_density".into(),
                fmt(report.median_rho.unwrap_or(f64::NAN)),
            ));
            summary.push((
                "fraction_final_below_initial".into(),
                fmt(report.fraction_final_below_initial),
            ));
            summary.push(("excluded_degenerate".into(), report.excluded.to_string()));
            summary.push(("attack_success_rate".into(), fmt(success_rate(&trajectories))));
            summary.push((
                "initial_mean_log_density".into(),
                fmt(report.per_step_mean[0]),
            ));
            summary.push((
                "final_mean_log_density".into(),
                fmt(*report.per_step_mean.last().unwrap()),
            ));
        }
        "fig5_mi_vs_density" => {
            let lab = Lab::build(cfg)?;
            let hmc = lab.hmc_model(cfg.sub_seed("fig5/hmc"))?;
            let csv = out_dir.join("fig5_mi_vs_density.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&csv)?);
            writeln!(f, "z0,z1,mi,gt_log_density")?;
            let mut mis = Vec::new();
            let mut densities = Vec::new();
            for (z, x) in lab.grid.latents.iter().zip(&lab.grid.inputs) {
                let mi = mutual_information(&predictive(&hmc, x)?).mutual_information;
                let d = lab.quad.log_density(&lab.dec, x);
                writeln!(f, "{:.12},{:.12},{},{}", z[0], z[1], fmt(mi), fmt(d))?;
                mis.push(mi);
                densities.push(d);
            }
            drop(f);
            files.push(csv);
            let rho = spearman(&mis, &densities)?;
            summary.push(("num_grid_points".into(), mis.len().to_string()));
            summary.push(("spearman_mi_density".into(), fmt(rho)));
        }
        "table1_hmc_vs_det" => {
            let lab = Lab::build(cfg)?;
            let csv = out_dir.join("table1_hmc_vs_det.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&csv)?);
            writeln!(
                f,
                "rep,det_adv_success,det_adv_entropy,det_noise_success,det_noise_entropy,\
                 hmc_adv_success,hmc_adv_entropy,hmc_noise_success,hmc_noise_entropy"
            )?;
            let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 8];
            for rep in 0..cfg.eval_repetitions {
                let det = lab.map_model(cfg.sub_seed(&format!("table1/map{rep}")))?;
                let hmc = lab.hmc_model(cfg.sub_seed(&format!("table1/hmc{rep}")))?;
                let det_stats = attack_and_noise_stats(
                    &lab,
                    &det,
                    GradientSource::EnsembleMean,
                    cfg.attack_epsilon_large,
                    &format!("table1/det{rep}"),
                )?;
                let hmc_stats = attack_and_noise_stats(
                    &lab,
                    &hmc,
                    GradientSource::FreshPosteriorSample,
                    cfg.attack_epsilon_large,
                    &format!("table1/adv{rep}"),
                )?;
                let row = [
                    det_stats.0, det_stats.1, det_stats.2, det_stats.3, hmc_stats.0,
                    hmc_stats.1, hmc_stats.2, hmc_stats.3,
                ];
                write!(f, "{rep}")?;
                for (c, v) in row.iter().enumerate() {
                    write!(f, ",{}", fmt(*v))?;
                    cols[c].push(*v);
                }
                writeln!(f)?;
            }
            drop(f);
            files.push(csv);
            let labels = [
                "det_adv_success",
                "det_adv_entropy",
                "det_noise_success",
                "det_noise_entropy",
                "hmc_adv_success",
                "hmc_adv_entropy",
                "hmc_noise_success",
                "hmc_noise_entropy",
            ];
            for (label, col) in labels.iter().zip(&cols) {
                summary.push((format!("{label}_mean"), fmt(mean(col))));
                summary.push((format!("{label}_std"), fmt(std_dev(col))));
            }
            let det_gap = mean(&cols[0]) - mean(&cols[2]);
            let hmc_gap = mean(&cols[4]) - mean(&cols[6]);
            summary.push(("det_adv_noise_gap".into(), fmt(det_gap)));
            summary.push(("hmc_adv_noise_gap".into(), fmt(hmc_gap)));
        }
        "fig7_9_holes" => {
            let lab = Lab::build(cfg)?;
            let hmc = lab.hmc_model(cfg.sub_seed("holes/hmc"))?;
            let dropout = lab.dropout_model(cfg.sub_seed("holes/dropout"))?;
            let balls = certified_balls(&lab, &hmc, "holes/delta")?;
            let h_eps = high_confidence_threshold(cfg.eval_epsilon).expect("epsilon");
            let csv = out_dir.join("fig7_9_holes.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&csv)?);
            writeln!(f, "z0,z1,inside_dball,mi_hmc,mi_dropout,h_eps")?;
            let mut far_hmc_high = 0usize;
            let mut far_dropout_high = 0usize;
            let mut far_total = 0usize;
            let mut witness = 0usize;
            for (z, x) in lab.grid.latents.iter().zip(&lab.grid.inputs) {
                let inside = balls.iter().any(|b| {
                    b.delta > 0.0
                        && x.iter()
                            .zip(&b.center)
                            .map(|(a, c)| (a - c) * (a - c))
                            .sum::<f64>()
                            .sqrt()
                            <= b.delta
                });
                let mi_h = mutual_information(&predictive(&hmc, x)?).mutual_information;
                let mi_d = mutual_information(&predictive(&dropout, x)?).mutual_information;
                writeln!(
                    f,
                    "{:.12},{:.12},{},{},{},{}",
                    z[0],
                    z[1],
                    u8::from(inside),
                    fmt(mi_h),
                    fmt(mi_d),
                    fmt(h_eps)
                )?;
                if !inside {
                    far_total += 1;
                    if mi_h > h_eps {
                        far_hmc_high += 1;
                    }
                    if mi_d > h_eps {
                        far_dropout_high += 1;
                    }
                    if mi_d < 0.05 && mi_h > h_eps {
                        witness += 1;
                    }
                }
            }
            drop(f);
            files.push(csv);
            let ft = far_total.max(1) as f64;
            summary.push(("far_region_points".into(), far_total.to_string()));
            summary.push((
                "hmc_far_high_mi_fraction".into(),
                fmt(far_hmc_high as f64 / ft),
            ));
            summary.push((
                "dropout_far_high_mi_fraction".into(),
                fmt(far_dropout_high as f64 / ft),
            ));
            summary.push(("hole_witness_points".into(), witness.to_string()));
        }
        "table3_latent_attack" => {
            let lab = Lab::build(cfg)?;
            let csv = out_dir.join("table3_latent_attack.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&csv)?);
            writeln!(f, "rep,model,candidates,garbage_found,best_confidence")?;
            let mut dropout_counts = Vec::new();
            let mut ensemble_counts = Vec::new();
            for rep in 0..cfg.eval_repetitions {
                let dropout = lab.dropout_model(cfg.sub_seed(&format!("table3/dropout{rep}")))?;
                let ens = lab.ensemble_model(cfg.sub_seed(&format!("table3/ens{rep}")))?;
                for (label, model, counts) in [
                    ("dropout", &dropout, &mut dropout_counts),
                    ("ensemble", &ens, &mut ensemble_counts),
                ] {
                    let found = latent_hole_attack(
                        model,
                        &lab.grid,
                        &lab.train.latents,
                        cfg.hole_mi_threshold,
                        cfg.hole_top_k,
                    )?;
                    let garbage: Vec<_> = found
                        .iter()
                        .filter(|c| {
                            c.confidence > cfg.confidence_bar
                                && c.distance_to_train >= cfg.hole_min_distance
                        })
                        .collect();
                    let best = garbage
                        .iter()
                        .map(|c| c.confidence)
                        .fold(f64::NAN, f64::max);
                    writeln!(
                        f,
                        "{rep},{label},{},{},{}",
                        found.len(),
                        garbage.len(),
                        if best.is_nan() { String::new() } else { fmt(best) }
                    )?;
                    counts.push(garbage.len() as f64);
                }
            }
            drop(f);
            files.push(csv);
            summary.push((
                "dropout_garbage_mean".into(),
                fmt(mean(&dropout_counts)),
            ));
            summary.push((
                "ensemble_garbage_mean".into(),
                fmt(mean(&ensemble_counts)),
            ));
        }
        "table4_ensemble_defence" => {
            let lab = Lab::build(cfg)?;
            let csv = out_dir.join("table4_ensemble_defence.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&csv)?);
            writeln!(f, "rep,dropout_success,ensemble_success")?;
            let mut single = Vec::new();
            let mut ensembled = Vec::new();
            for rep in 0..cfg.eval_repetitions {
                let dropout = lab.dropout_model(cfg.sub_seed(&format!("table4/dropout{rep}")))?;
                let ens = lab.ensemble_model(cfg.sub_seed(&format!("table4/ens{rep}")))?;
                // transfer setting: the attacker differentiates through one
                // member; the ensemble's remaining members must be fooled too
                let src = GradientSource::FixedMember(0);
                let s_d =
                    mim_success(&lab, &dropout, cfg.attack_epsilon, src, &format!("table4/d{rep}"))?;
                let s_e =
                    mim_success(&lab, &ens, cfg.attack_epsilon, src, &format!("table4/e{rep}"))?;
                writeln!(f, "{rep},{},{}", fmt(s_d), fmt(s_e))?;
                single.push(s_d);
                ensembled.push(s_e);
            }
            drop(f);
            files.push(csv);
            summary.push(("dropout_success_mean".into(), fmt(mean(&single))));
            summary.push(("dropout_success_std".into(), fmt(std_dev(&single))));
            summary.push(("ensemble_success_mean".into(), fmt(mean(&ensembled))));
            summary.push(("ensemble_success_std".into(), fmt(std_dev(&ensembled))));
        }
        "table2_auc_analog" => {
            let lab = Lab::build(cfg)?;
            let csv = out_dir.join("table2_auc_analog.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&csv)?);
            writeln!(f, "rep,method,score,label")?;
            let mut auc_single = Vec::new();
            let mut auc_ens = Vec::new();
            for rep in 0..cfg.eval_repetitions {
                let dropout = lab.dropout_model(cfg.sub_seed(&format!("table2/dropout{rep}")))?;
                let ens = lab.ensemble_model(cfg.sub_seed(&format!("table2/ens{rep}")))?;
                for (label, model, aucs) in [
                    ("dropout", &dropout, &mut auc_single),
                    ("ensemble", &ens, &mut auc_ens),
                ] {
                    let (scores, truth) =
                        detection_scores(&lab, model, cfg.attack_epsilon, &format!("table2/{label}{rep}"))?;
                    for (s, &t) in scores.iter().zip(&truth) {
                        writeln!(f, "{rep},{label},{},{}", fmt(*s), u8::from(t))?;
                    }
                    aucs.push(roc_auc(&scores, &truth)?.auc);
                }
            }
            drop(f);
            files.push(csv);
            summary.push(("dropout_auc_mean".into(), fmt(mean(&auc_single))));
            summary.push(("dropout_auc_std".into(), fmt(std_dev(&auc_single))));
            summary.push(("ensemble_auc_mean".into(), fmt(mean(&auc_ens))));
            summary.push(("ensemble_auc_std".into(), fmt(std_dev(&auc_ens))));
            summary.push((
                "auc_gap".into(),
                fmt(mean(&auc_ens) - mean(&auc_single)),
            ));
        }
        "spheres_invariance" => {
            let (report_summary, csv) = spheres_experiment(cfg, &out_dir, false)?;
            summary = report_summary;
            files.push(csv);
        }
        "lemma1_audit" => {
            let lab = Lab::build(cfg)?;
            let hmc = lab.hmc_model(cfg.sub_seed("lemma1/hmc"))?;
            let train = lab.hmc_train_points();
            let csv = out_dir.join("lemma1_audit.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&csv)?);
            writeln!(f, "index,confident,delta")?;
            let mut confident = 0usize;
            let mut with_ball = 0usize;
            for (i, x) in train.inputs.iter().enumerate() {
                match estimate_delta_ball(
                    &hmc,
                    x,
                    cfg.eval_epsilon,
                    cfg.delta_probes,
                    &cfg.delta_radii,
                    cfg.sub_seed(&format!("lemma1/probe{i}")),
                ) {
                    Ok(est) => {
                        confident += 1;
                        if est.delta > 0.0 {
                            with_ball += 1;
                        }
                        writeln!(f, "{i},1,{}", fmt(est.delta))?;
                    }
                    Err(EvalError::NotHighConfidence(_)) => {
                        writeln!(f, "{i},0,")?;
                    }
                    Err(e) => return Err(e),
                }
            }
            drop(f);
            files.push(csv);
            let frac = if confident > 0 {
                with_ball as f64 / confident as f64
            } else {
                0.0
            };
            summary.push(("train_points".into(), train.len().to_string()));
            summary.push(("confident_points".into(), confident.to_string()));
            summary.push(("fraction_with_positive_delta".into(), fmt(frac)));
        }
        "appendixA_invariance" => {
            let (report_summary, csv) = spheres_experiment(cfg, &out_dir, true)?;
            summary = report_summary;
            files.push(csv);
        }
        _ => unreachable!("name validated above"),
    }

    let summary_path = out_dir.join(format!("{name}_summary.txt"));
    write_summary(&summary_path, cfg, name, &summary)?;
    files.push(summary_path);
    Ok(ExperimentReport {
        name: name.to_string(),
        summary,
        files,
    })
}

/// (adv success, adv entropy, noise success, noise entropy) over the
/// attack input set against one model.
fn attack_and_noise_stats(
    lab: &Lab,
    model: &PosteriorEnsemble,
    source: GradientSource,
    epsilon: f64,
    tag: &str,
) -> Result<(f64, f64, f64, f64), EvalError> {
    let mut trajectories = Vec::new();
    let mut adv_entropies = Vec::new();
    let mut noise_flips = 0usize;
    let mut noise_entropies = Vec::new();
    let indices = lab.attack_inputs();
    for (i, &idx) in indices.iter().enumerate() {
        let x = &lab.test.inputs[idx];
        let acfg = lab.mim_cfg(epsilon, source, lab.cfg.sub_seed(&format!("{tag}/a{i}")));
        let traj = mim(model, x, lab.test.labels[idx], &acfg)?;
        adv_entropies.push(entropy(traj.mean_probs.last().expect("steps")));
        let clean_class = traj.original_label;
        trajectories.push(traj);
        let ncfg = AttackConfig {
            seed: lab.cfg.sub_seed(&format!("{tag}/n{i}")),
            ..acfg
        };
        let noisy = noise_control(x, &ncfg);
        let pd = predictive(model, &noisy)?;
        noise_entropies.push(entropy(&pd.mean_probs));
        if argmax(&pd.mean_probs) != clean_class {
            noise_flips += 1;
        }
    }
    Ok((
        success_rate(&trajectories),
        mean(&adv_entropies),
        noise_flips as f64 / indices.len() as f64,
        mean(&noise_entropies),
    ))
}

fn mim_success(
    lab: &Lab,
    model: &PosteriorEnsemble,
    epsilon: f64,
    source: GradientSource,
    tag: &str,
) -> Result<f64, EvalError> {
    let mut trajectories = Vec::new();
    for (i, &idx) in lab.attack_inputs().iter().enumerate() {
        let acfg = lab.mim_cfg(epsilon, source, lab.cfg.sub_seed(&format!("{tag}/a{i}")));
        trajectories.push(mim(
            model,
            &lab.test.inputs[idx],
            lab.test.labels[idx],
            &acfg,
        )?);
    }
    Ok(success_rate(&trajectories))
}

/// MI detection scores on clean inputs (label false) and MIM outputs
/// (label true) — the "all produced by an attack" ground-truth variant.
fn detection_scores(
    lab: &Lab,
    model: &PosteriorEnsemble,
    epsilon: f64,
    tag: &str,
) -> Result<(Vec<f64>, Vec<bool>), EvalError> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, &idx) in lab.attack_inputs().iter().enumerate() {
        let x = &lab.test.inputs[idx];
        let pd = predictive(model, x)?;
        scores.push(mutual_information(&pd).mutual_information);
        labels.push(false);
        let acfg = lab.mim_cfg(
            epsilon,
            GradientSource::EnsembleMean,
            lab.cfg.sub_seed(&format!("{tag}/a{i}")),
        );
        let traj = mim(model, x, lab.test.labels[idx], &acfg)?;
        scores.push(*traj.mutual_information.last().expect("steps"));
        labels.push(true);
    }
    Ok((scores, labels))
}

fn certified_balls(
    lab: &Lab,
    ensemble: &PosteriorEnsemble,
    tag: &str,
) -> Result<Vec<DeltaBallEstimate>, EvalError> {
    let train = lab.hmc_train_points();
    let mut balls = Vec::new();
    for (i, x) in train.inputs.iter().enumerate() {
        match estimate_delta_ball(
            ensemble,
            x,
            lab.cfg.eval_epsilon,
            lab.cfg.delta_probes,
            &lab.cfg.delta_radii,
            lab.cfg.sub_seed(&format!("{tag}/{i}")),
        ) {
            Ok(est) => balls.push(est),
            Err(EvalError::NotHighConfidence(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(balls)
}

/// Shared implementation of the two spheres experiments. With
/// `invariance_only` the attack phase is skipped and only the rotation
/// test is emitted.
fn spheres_experiment(
    cfg: &RunConfig,
    out_dir: &Path,
    invariance_only: bool,
) -> Result<(Vec<(String, String)>, PathBuf), EvalError> {
    let d = cfg.spheres_dim;
    let data = make_spheres(
        d,
        cfg.spheres_r_inner,
        cfg.spheres_r_outer,
        cfg.spheres_n_per_sphere,
        cfg.sub_seed("spheres/data"),
    );
    let activation = match cfg.model_activation.as_str() {
        "sine" => Activation::Sine,
        _ => Activation::Relu,
    };
    let radial_spec = NetworkSpec::new(
        d,
        cfg.model_hidden.clone(),
        activation,
        2,
        0.0,
        FeatureMode::Radial,
    )
    .expect("radial spec");
    let plain_spec = NetworkSpec::new(
        d,
        cfg.model_hidden.clone(),
        activation,
        2,
        0.0,
        FeatureMode::Raw,
    )
    .expect("plain spec");
    let tcfg = TrainConfig {
        learning_rate: cfg.train_learning_rate,
        epochs: cfg.train_epochs,
        batch_size: cfg.train_batch_size,
        weight_decay: cfg.train_weight_decay,
        seed: cfg.sub_seed("spheres/train"),
    };
    let labeled = data.to_labeled();
    let radial = train_map(&radial_spec, &labeled, &tcfg)?;
    let radial_ens = PosteriorEnsemble::uniform(
        radial_spec,
        crate::inference::MemberKind::Independent,
        vec![crate::inference::Member {
            params: radial.clone(),
            mask: None,
        }],
    );

    let mut summary: Vec<(String, String)> = Vec::new();

    // exact rotation-invariance test for the radial model
    let mut rot_rng = ChaCha8Rng::seed_from_u64(cfg.sub_seed("spheres/rotations"));
    let mut max_dev = 0.0f64;
    let name = if invariance_only {
        "appendixA_invariance"
    } else {
        "spheres_invariance"
    };
    let csv = out_dir.join(format!("{name}.csv"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv)?);
    if invariance_only {
        writeln!(f, "rotation,max_logit_deviation")?;
    }
    for r in 0..cfg.spheres_rotations {
        let q = random_orthogonal(d, &mut rot_rng);
        let x = &data.points[r % data.points.len()];
        let rx = mat_vec(&q, x);
        let a = forward_logits(&radial, x, None)?;
        let b = forward_logits(&radial, &rx, None)?;
        let dev = a
            .iter()
            .zip(&b)
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        max_dev = max_dev.max(dev);
        if invariance_only {
            writeln!(f, "{r},{dev:.3e}")?;
        }
    }
    summary.push(("rotations".into(), cfg.spheres_rotations.to_string()));
    summary.push(("max_logit_deviation".into(), format!("{max_dev:.3e}")));

    if !invariance_only {
        let plain = train_map(&plain_spec, &labeled, &tcfg)?;
        let plain_ens = PosteriorEnsemble::uniform(
            plain_spec,
            crate::inference::MemberKind::Independent,
            vec![crate::inference::Member {
                params: plain,
                mask: None,
            }],
        );
        writeln!(f, "trial,model,success")?;
        let acfg = AttackConfig {
            epsilon: f64::INFINITY,
            step_size: 0.1,
            iterations: cfg.attack_iterations,
            momentum: 0.0,
            norm: attacks::NormKind::L2,
            gradient_source: GradientSource::EnsembleMean,
            clip: None,
            seed: 0,
        };
        let mut radial_successes = 0usize;
        let mut plain_successes = 0usize;
        for t in 0..cfg.spheres_trials {
            let idx = t % data.points.len();
            let x = &data.points[idx];
            let label = data.labels[idx];
            for (label_str, model, counter) in [
                ("radial", &radial_ens, &mut radial_successes),
                ("plain", &plain_ens, &mut plain_successes),
            ] {
                let acfg = AttackConfig {
                    seed: cfg.sub_seed(&format!("spheres/{label_str}{t}")),
                    ..acfg.clone()
                };
                let traj = sphere_projected_attack(model, x, label, &acfg)?;
                writeln!(f, "{t},{label_str},{}", u8::from(traj.success))?;
                if traj.success {
                    *counter += 1;
                }
            }
        }
        let trials = cfg.spheres_trials as f64;
        summary.push(("trials".into(), cfg.spheres_trials.to_string()));
        summary.push((
            "radial_on_sphere_success".into(),
            fmt(radial_successes as f64 / trials),
        ));
        summary.push((
            "plain_on_sphere_success".into(),
            fmt(plain_successes as f64 / trials),
        ));
        // training accuracy context for both models
        let acc = |ens: &PosteriorEnsemble| -> Result<f64, EvalError> {
            let mut hits = 0usize;
            for (x, &l) in data.points.iter().zip(&data.labels) {
                if argmax(&predictive(ens, x)?.mean_probs) == l {
                    hits += 1;
                }
            }
            Ok(hits as f64 / data.points.len() as f64)
        };
        summary.push(("radial_train_accuracy".into(), fmt(acc(&radial_ens)?)));
        summary.push(("plain_train_accuracy".into(), fmt(acc(&plain_ens)?)));
    }
    drop(f);
    Ok((summary, csv))
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for a in &mut v {
                *a /= norm;
            }
            q.push(v);
        }
    }
    q
}

fn mat_vec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}
