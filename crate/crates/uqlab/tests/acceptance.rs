//! End-to-end acceptance gate. Each test prints one PASS/FAIL line with
//! its pinned tolerances; the suite doubles as the quantitative release
//! checklist. Criteria on experiment outputs use the default desk-scale
//! config, so the numbers here are deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use uqlab::config::RunConfig;
use uqlab::evalharness::run_experiment;
use uqlab::inference::{hmc_core, HmcConfig};
use uqlab::manifold::{image_log_density_is, sample_dataset, DecoderSpec, LatentMixture};
use uqlab::netmodel::{
    bind_params, init_params, loss_graph_wrt_params, param_input_names, Activation, DropoutMask,
    FeatureMode, NetworkSpec,
};

/// Smallest hidden-layer pre-activation magnitude over the batch,
/// mirroring the loss-graph forward pass (dropout scaling included).
fn min_preactivation(
    spec: &NetworkSpec,
    params: &uqlab::netmodel::ParamVector,
    mask: Option<&DropoutMask>,
    raw: &[f64],
    input_dim: usize,
    batch: usize,
) -> f64 {
    let layers = params.layers();
    let mut closest = f64::INFINITY;
    let inv_keep = 1.0 / (1.0 - spec.dropout_rate);
    for col in 0..batch {
        let mut h: Vec<f64> = (0..input_dim).map(|i| raw[i * batch + col]).collect();
        for (l, (w, b)) in layers.iter().enumerate() {
            let out = b.len();
            let inp = h.len();
            let mut z = vec![0.0; out];
            for o in 0..out {
                z[o] = b[o] + (0..inp).map(|i| w[o * inp + i] * h[i]).sum::<f64>();
            }
            if l + 1 == layers.len() {
                break;
            }
            for &v in &z {
                closest = closest.min(v.abs());
            }
            h = z
                .iter()
                .enumerate()
                .map(|(o, &v)| {
                    let a = match spec.activation {
                        Activation::Relu => v.max(0.0),
                        Activation::Sine => v.sin(),
                    };
                    match mask {
                        Some(m) => {
                            if m.keep[l][o] {
                                a * inv_keep
                            } else {
                                0.0
                            }
                        }
                        None => a,
                    }
                })
                .collect();
        }
    }
    closest
}

fn verdict(id: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {id}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{id} failed: {detail}");
}

fn tmp_config(tag: &str) -> (RunConfig, tempfile::TempDir) {
    let dir = tempfile::Builder::new()
        .prefix(&format!("uqlab-{tag}-"))
        .tempdir()
        .expect("tempdir");
    let mut cfg = RunConfig::default();
    cfg.out_dir = dir.path().to_string_lossy().into_owned();
    (cfg, dir)
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let input_dim = rng.random_range(2..6);
        let depth = rng.random_range(0..3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(3..8)).collect();
        let activation = if rng.random::<bool>() {
            Activation::Relu
        } else {
            Activation::Sine
        };
        let classes = rng.random_range(2..5);
        let use_mask = rng.random::<bool>() && depth > 0;
        let spec = NetworkSpec::new(
            input_dim,
            hidden,
            activation,
            classes,
            if use_mask { 0.3 } else { 0.0 },
            FeatureMode::Raw,
        )
        .unwrap();
        let batch = rng.random_range(1..5);
        // finite differences are meaningless at a relu kink, so redraw
        // data until every pre-activation clears the step size comfortably
        let mask = use_mask.then(|| DropoutMask::sample(&spec, case as u64));
        let params = init_params(&spec, 1000 + case as u64);
        let (xs, labels) = loop {
            let raw: Vec<f64> = (0..input_dim * batch)
                .map(|_| rng.random_range(-1.5..1.5))
                .collect();
            if min_preactivation(&spec, &params, mask.as_ref(), &raw, input_dim, batch) > 1e-3 {
                let xs = uqlab::diffgraph::Tensor::new(vec![input_dim, batch], raw).unwrap();
                let labels: Vec<usize> =
                    (0..batch).map(|_| rng.random_range(0..classes)).collect();
                break (xs, labels);
            }
        };
        let graph = loss_graph_wrt_params(&spec, &xs, &labels, mask.as_ref()).unwrap();
        let bound = bind_params(&params);
        for name in param_input_names(&spec) {
            let err = graph.finite_diff_check(&bound, &name, 1e-5).unwrap();
            worst = worst.max(err);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "01 gradient-correctness",
        worst <= 1e-4 && elapsed < 10.0,
        &format!("worst relative error {worst:.3e} (tol 1e-4), {elapsed:.1}s (limit 10s)"),
    );
}

#[test]
fn criterion_02_hmc_recovers_conjugate_gaussian() {
    let start = Instant::now();
    // posterior precision [[201,100],[100,201]], mean (0.3, -0.2)
    let a = [[201.0, 100.0], [100.0, 201.0]];
    let m = [0.3, -0.2];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let cov = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let cfg = HmcConfig::default();
    let (draws, report) = hmc_core(vec![0.0, 0.0], &cfg, |q| {
        let d = [q[0] - m[0], q[1] - m[1]];
        let u = 0.5 * (d[0] * (a[0][0] * d[0] + a[0][1] * d[1]) + d[1] * (a[1][0] * d[0] + a[1][1] * d[1]));
        let g = vec![a[0][0] * d[0] + a[0][1] * d[1], a[1][0] * d[0] + a[1][1] * d[1]];
        Some((u, g))
    })
    .unwrap();
    let n = draws.len() as f64;
    let mut mean = [0.0f64; 2];
    for q in &draws {
        mean[0] += q[0] / n;
        mean[1] += q[1] / n;
    }
    let mut scov = [[0.0f64; 2]; 2];
    for q in &draws {
        let d = [q[0] - mean[0], q[1] - mean[1]];
        for i in 0..2 {
            for j in 0..2 {
                scov[i][j] += d[i] * d[j] / (n - 1.0);
            }
        }
    }
    let mut ok = true;
    let mut worst_sigma = 0.0f64;
    for i in 0..2 {
        let se = (cov[i][i] / n).sqrt();
        let z = (mean[i] - m[i]).abs() / se;
        worst_sigma = worst_sigma.max(z);
        ok &= z <= 3.0;
        for j in 0..2 {
            let se = ((cov[i][i] * cov[j][j] + cov[i][j] * cov[i][j]) / n).sqrt();
            let z = (scov[i][j] - cov[i][j]).abs() / se;
            worst_sigma = worst_sigma.max(z);
            ok &= z <= 3.0;
        }
    }
    let acc_ok = report.acceptance_rate >= 0.6 && report.acceptance_rate <= 0.95;
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "02 hmc-conjugate-sanity",
        ok && acc_ok && elapsed < 60.0,
        &format!(
            "worst moment deviation {worst_sigma:.2} MC standard errors (tol 3), \
             acceptance {:.3} (range [0.6, 0.95]), {elapsed:.1}s (limit 60s)",
            report.acceptance_rate
        ),
    );
}

#[test]
fn criterion_03_importance_sampling_matches_quadrature() {
    let start = Instant::now();
    let mix = LatentMixture::default_config();
    let cfg = RunConfig::default();
    let dec = DecoderSpec::new(
        cfg.data_input_dim,
        cfg.data_sigma_x,
        cfg.data_gain,
        cfg.data_decoder_seed,
    );
    let ds = sample_dataset(&mix, &dec, 50, 71, cfg.data_quad_resolution).unwrap();
    let mut rel_errors: Vec<f64> = ds
        .inputs
        .iter()
        .zip(&ds.gt_log_density)
        .enumerate()
        .map(|(i, (x, &quad))| {
            let is = image_log_density_is(x, &mix, &dec, 10_000, 500 + i as u64).unwrap();
            ((is - quad).exp() - 1.0).abs()
        })
        .collect();
    rel_errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = rel_errors[rel_errors.len() / 2];
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "03 density-estimator",
        median <= 0.05 && elapsed < 60.0,
        &format!(
            "median relative density error {median:.4} over 50 points at T=1e4 \
             (tol 0.05), {elapsed:.1}s (limit 60s)"
        ),
    );
}

#[test]
fn criterion_04_attacks_walk_off_the_manifold() {
    let (cfg, _dir) = tmp_config("fig2");
    let r = run_experiment("fig2_density_vs_step", &cfg).unwrap();
    let rho = r.get("median_spearman_step_density").unwrap();
    let frac = r.get("fraction_final_below_initial").unwrap();
    verdict(
        "04 density-vs-step",
        rho < -0.5 && frac >= 0.9,
        &format!(
            "median per-trajectory Spearman {rho:.3} (require < -0.5), \
             final below initial in {frac:.2} of trajectories (require >= 0.9)"
        ),
    );
}

#[test]
fn criterion_05_mi_tracks_density() {
    let (cfg, _dir) = tmp_config("fig5");
    let r = run_experiment("fig5_mi_vs_density", &cfg).unwrap();
    let rho = r.get("spearman_mi_density").unwrap();
    verdict(
        "05 mi-vs-density",
        rho <= -0.4,
        &format!("Spearman(HMC MI, gt log density) = {rho:.3} over the grid (require <= -0.4)"),
    );
}

#[test]
fn criterion_06_hmc_shrinks_the_adversarial_gap() {
    let (cfg, _dir) = tmp_config("table1");
    let r = run_experiment("table1_hmc_vs_det", &cfg).unwrap();
    let det_success = r.get("det_adv_success_mean").unwrap();
    let det_gap = r.get("det_adv_noise_gap").unwrap();
    let hmc_gap = r.get("hmc_adv_noise_gap").unwrap();
    let det_ent = r.get("det_adv_entropy_mean").unwrap();
    let hmc_ent = r.get("hmc_adv_entropy_mean").unwrap();
    verdict(
        "06 table1-direction",
        det_success >= 0.5 && hmc_gap < det_gap && hmc_ent > det_ent,
        &format!(
            "det success {det_success:.3} (require >= 0.5); adv-noise gap hmc {hmc_gap:.3} \
             < det {det_gap:.3}; perturbed entropy hmc {hmc_ent:.3} > det {det_ent:.3} (nats)"
        ),
    );
}

#[test]
fn criterion_07_dropout_has_holes_hmc_does_not() {
    let (cfg, _dir) = tmp_config("holes");
    let r = run_experiment("fig7_9_holes", &cfg).unwrap();
    let hmc = r.get("hmc_far_high_mi_fraction").unwrap();
    let dropout = r.get("dropout_far_high_mi_fraction").unwrap();
    let witnesses = r.get("hole_witness_points").unwrap();
    verdict(
        "07 uncertainty-holes",
        hmc > dropout && witnesses >= 1.0,
        &format!(
            "far-region fraction with MI > H(0.1): hmc {hmc:.3} > dropout {dropout:.3}; \
             {witnesses} witness point(s) with dropout MI < 0.05 while hmc MI > H(0.1) (require >= 1)"
        ),
    );
}

#[test]
fn criterion_08_ensembles_blunt_the_attacks() {
    let (cfg, _dir) = tmp_config("tables");
    let holes = run_experiment("table3_latent_attack", &cfg).unwrap();
    let defence = run_experiment("table4_ensemble_defence", &cfg).unwrap();
    let auc = run_experiment("table2_auc_analog", &cfg).unwrap();
    let d_garbage = holes.get("dropout_garbage_mean").unwrap();
    let e_garbage = holes.get("ensemble_garbage_mean").unwrap();
    let d_success = defence.get("dropout_success_mean").unwrap();
    let e_success = defence.get("ensemble_success_mean").unwrap();
    let gap = auc.get("auc_gap").unwrap();
    verdict(
        "08 ensemble-directions",
        d_garbage >= 1.0 && e_garbage < d_garbage && e_success < d_success && gap >= 0.05,
        &format!(
            "garbage candidates ensemble {e_garbage:.1} < dropout {d_garbage:.1} (dropout >= 1); \
             MIM success ensemble {e_success:.3} < dropout {d_success:.3}; \
             detection AUC gap {gap:.3} (require >= 0.05)"
        ),
    );
}

#[test]
fn criterion_09_radial_model_defeats_sphere_attacks() {
    let (cfg, _dir) = tmp_config("spheres");
    let r = run_experiment("spheres_invariance", &cfg).unwrap();
    let radial = r.get("radial_on_sphere_success").unwrap();
    let plain = r.get("plain_on_sphere_success").unwrap();
    let dev = r.get("max_logit_deviation").unwrap();
    verdict(
        "09 spheres-invariance",
        radial == 0.0 && plain > 0.0 && dev <= 1e-9,
        &format!(
            "sphere attack success radial {radial} (require exactly 0) vs plain {plain:.3} \
             (require > 0) over 500 trials; max logit deviation {dev:.2e} over 1000 rotations \
             (tol 1e-9)"
        ),
    );
}

#[test]
fn criterion_10_confident_train_points_are_certified() {
    let (cfg, _dir) = tmp_config("lemma1");
    let r = run_experiment("lemma1_audit", &cfg).unwrap();
    let frac = r.get("fraction_with_positive_delta").unwrap();
    let confident = r.get("confident_points").unwrap();
    verdict(
        "10 lemma1-audit",
        frac >= 0.95,
        &format!(
            "{frac:.3} of {confident} high-confidence training points certified with \
             delta > 0 at 100 probes per radius (require >= 0.95)"
        ),
    );
}

#[test]
fn criterion_11_runs_are_byte_deterministic() {
    let (cfg_a, dir_a) = tmp_config("det-a");
    let (cfg_b, dir_b) = tmp_config("det-b");
    let mut identical = true;
    let mut checked = 0usize;
    for name in ["fig2_density_vs_step", "spheres_invariance"] {
        run_experiment(name, &cfg_a).unwrap();
        run_experiment(name, &cfg_b).unwrap();
        let csv = format!("{name}.csv");
        let a = std::fs::read(dir_a.path().join(&csv)).unwrap();
        let b = std::fs::read(dir_b.path().join(&csv)).unwrap();
        identical &= a == b;
        checked += 1;
    }
    verdict(
        "11 determinism",
        identical,
        &format!("{checked} experiment CSVs byte-identical across repeated runs"),
    );
}
