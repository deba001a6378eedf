//! Command-line entry point: dataset generation, training, attacks, and
//! the named end-to-end experiments, all driven by one flat config.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use uqlab::attacks::{
    fgm, latent_hole_attack, mim, noise_control, sphere_projected_attack, write_trajectories_csv,
    AttackConfig, ClipRange, GradientSource, NormKind,
};
use uqlab::config::{parse_config, RunConfig};
use uqlab::evalharness::{run_experiment, EXPERIMENT_NAMES};
use uqlab::inference::{
    deep_ensemble, hmc_sample, mc_dropout_ensemble, predictive, save_ensemble, train_map,
    HmcConfig, Member, MemberKind, PosteriorEnsemble, TrainConfig,
};
use uqlab::manifold::{
    load_dataset, make_grid, sample_dataset, save_dataset, DecoderSpec, LatentMixture,
    ManifoldDataset,
};
use uqlab::netmodel::{Activation, FeatureMode, NetworkSpec};
use uqlab::uncertainty::entropy;

#[derive(Parser)]
#[command(
    name = "uqlab",
    version,
    about = "Desk-scale lab for Bayesian-network uncertainty and adversarial robustness"
)]
struct Cli {
    /// Path to a `key = value` config file ('#' comments allowed)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, e.g. --set hmc.step_size=0.005 (repeatable, wins
    /// over the file)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a labelled manifold dataset and write it to disk
    GenData {
        /// Number of points (defaults to data.n from the config)
        #[arg(long)]
        n: Option<usize>,
        /// Master seed override
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model family on a stored dataset and save the ensemble
    Train {
        #[arg(long, value_enum)]
        method: TrainMethod,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack a stored ensemble on a stored dataset, writing a CSV report
    Attack {
        #[arg(long, value_enum)]
        method: AttackMethod,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the summary of a previously completed experiment
    Eval {
        #[arg(long)]
        report: String,
    },
    /// Run one named experiment end to end (or `all`)
    Run {
        #[arg(long)]
        experiment: String,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum TrainMethod {
    Map,
    Dropout,
    Hmc,
    Ensemble,
}

#[derive(Copy, Clone, ValueEnum)]
enum AttackMethod {
    Fgm,
    Mim,
    Noise,
    LatentHole,
    Sphere,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful outcomes; anything else is a
            // usage error
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut overrides = Vec::new();
    for item in &cli.set {
        match item.split_once('=') {
            Some((k, v)) => overrides.push((k.trim().to_string(), v.trim().to_string())),
            None => {
                eprintln!("usage error: --set expects KEY=VALUE, got '{item}'");
                return ExitCode::from(1);
            }
        }
    }
    let cfg = match parse_config(cli.config.as_deref(), &overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("usage error: {e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.command, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command, mut cfg: RunConfig) -> Result<(), Box<dyn std::error::Error>> {
    match command {
        Command::GenData { n, seed, out } => {
            if let Some(n) = n {
                cfg.data_n = n;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let mix = LatentMixture::default_config();
            let dec = decoder(&cfg);
            let ds = sample_dataset(
                &mix,
                &dec,
                cfg.data_n,
                cfg.sub_seed("data"),
                cfg.data_quad_resolution,
            )?;
            save_dataset(&out, &ds)?;
            println!("wrote {} points to {}", ds.len(), out.display());
        }
        Command::Train { method, data, out } => {
            require_file(&data, "dataset")?;
            let ds = load_dataset(&data)?;
            let ensemble = train_command(method, &ds, &cfg)?;
            save_ensemble(&out, &ensemble)?;
            println!(
                "trained {} member(s), saved to {}",
                ensemble.members.len(),
                out.display()
            );
        }
        Command::Attack {
            method,
            model,
            data,
            out,
        } => {
            require_file(&model, "model checkpoint")?;
            require_file(&data, "dataset")?;
            let ensemble = uqlab::inference::load_ensemble(&model)?;
            let ds = load_dataset(&data)?;
            attack_command(method, &ensemble, &ds, &cfg, &out)?;
            println!("wrote attack report to {}", out.display());
        }
        Command::Eval { report } => {
            if !EXPERIMENT_NAMES.contains(&report.as_str()) {
                return Err(format!(
                    "unknown report '{report}'; valid names: {}",
                    EXPERIMENT_NAMES.join(", ")
                )
                .into());
            }
            let path = Path::new(&cfg.out_dir).join(format!("{report}_summary.txt"));
            require_file(&path, "experiment summary (run the experiment first)")?;
            print!("{}", std::fs::read_to_string(&path)?);
        }
        Command::Run { experiment } => {
            let names: Vec<&str> = if experiment == "all" {
                EXPERIMENT_NAMES.to_vec()
            } else {
                vec![experiment.as_str()]
            };
            for name in names {
                let report = run_experiment(name, &cfg)?;
                println!("[{name}]");
                for (k, v) in &report.summary {
                    println!("  {k} = {v}");
                }
            }
        }
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<(), Box<dyn std::error::Error>> {
    if path.is_file() {
        Ok(())
    } else {
        Err(format!("missing {what}: {}", path.display()).into())
    }
}

fn decoder(cfg: &RunConfig) -> DecoderSpec {
    DecoderSpec::new(
        cfg.data_input_dim,
        cfg.data_sigma_x,
        cfg.data_gain,
        cfg.data_decoder_seed,
    )
}

fn model_spec(cfg: &RunConfig, num_classes: usize, dropout: f64) -> NetworkSpec {
    let activation = match cfg.model_activation.as_str() {
        "sine" => Activation::Sine,
        _ => Activation::Relu,
    };
    NetworkSpec::new(
        cfg.data_input_dim,
        cfg.model_hidden.clone(),
        activation,
        num_classes,
        dropout,
        FeatureMode::Raw,
    )
    .expect("model spec from config")
}

fn train_cfg(cfg: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: cfg.train_learning_rate,
        epochs: cfg.train_epochs,
        batch_size: cfg.train_batch_size,
        weight_decay: cfg.train_weight_decay,
        seed,
    }
}

fn train_command(
    method: TrainMethod,
    ds: &ManifoldDataset,
    cfg: &RunConfig,
) -> Result<PosteriorEnsemble, Box<dyn std::error::Error>> {
    let labeled = ds.to_labeled();
    let seed = cfg.sub_seed("train");
    Ok(match method {
        TrainMethod::Map => {
            let spec = model_spec(cfg, ds.num_classes, 0.0);
            let params = train_map(&spec, &labeled, &train_cfg(cfg, seed))?;
            PosteriorEnsemble::uniform(
                spec,
                MemberKind::Independent,
                vec![Member { params, mask: None }],
            )
        }
        TrainMethod::Dropout => {
            let spec = model_spec(cfg, ds.num_classes, cfg.dropout_rate);
            let params = train_map(&spec, &labeled, &train_cfg(cfg, seed))?;
            mc_dropout_ensemble(&params, cfg.dropout_passes, seed.wrapping_add(1))
        }
        TrainMethod::Hmc => {
            let spec = model_spec(cfg, ds.num_classes, 0.0);
            let n = cfg.hmc_train_subset.min(ds.len());
            let subset = ds.subset(&(0..n).collect::<Vec<_>>());
            let hmc = HmcConfig {
                step_size: cfg.hmc_step_size,
                leapfrog_steps: cfg.hmc_leapfrog_steps,
                num_samples: cfg.hmc_num_samples,
                burn_in: cfg.hmc_burn_in,
                thinning: cfg.hmc_thinning,
                prior_precision: cfg.hmc_prior_precision,
                seed,
            };
            let (ensemble, report) = hmc_sample(&spec, &subset.to_labeled(), &hmc)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "hmc acceptance rate {:.3}, {} divergence(s)",
                report.acceptance_rate, report.divergences
            );
            ensemble
        }
        TrainMethod::Ensemble => {
            let spec = model_spec(cfg, ds.num_classes, cfg.dropout_rate);
            deep_ensemble(
                &spec,
                &labeled,
                &train_cfg(cfg, seed),
                cfg.ensemble_members,
                cfg.ensemble_dropout_passes,
                seed,
            )?
        }
    })
}

fn attack_command(
    method: AttackMethod,
    ensemble: &PosteriorEnsemble,
    ds: &ManifoldDataset,
    cfg: &RunConfig,
    out: &Path,
) -> Result<(), Box<dyn std::error::Error>> {
    let num = cfg.attack_num_inputs.min(ds.len());
    let clip = ClipRange::from_points(&ds.inputs);
    let base = AttackConfig {
        epsilon: cfg.attack_epsilon,
        step_size: cfg.attack_epsilon / cfg.attack_iterations as f64,
        iterations: cfg.attack_iterations,
        momentum: cfg.attack_momentum,
        norm: NormKind::Inf,
        gradient_source: GradientSource::EnsembleMean,
        clip: Some(clip),
        seed: 0,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(out)?);
    use std::io::Write;
    match method {
        AttackMethod::Fgm | AttackMethod::Mim | AttackMethod::Sphere => {
            let mut trajectories = Vec::with_capacity(num);
            for i in 0..num {
                let acfg = AttackConfig {
                    seed: cfg.sub_seed(&format!("attack/{i}")),
                    ..base.clone()
                };
                let traj = match method {
                    AttackMethod::Fgm => fgm(ensemble, &ds.inputs[i], ds.labels[i], &acfg, None)?,
                    AttackMethod::Mim => mim(ensemble, &ds.inputs[i], ds.labels[i], &acfg)?,
                    AttackMethod::Sphere => {
                        let acfg = AttackConfig {
                            norm: NormKind::L2,
                            clip: None,
                            step_size: 0.1,
                            ..acfg
                        };
                        sphere_projected_attack(ensemble, &ds.inputs[i], ds.labels[i], &acfg)?
                    }
                    _ => unreachable!(),
                };
                trajectories.push(traj);
            }
            write_trajectories_csv(&mut file, &trajectories)?;
            let rate = uqlab::evalharness::success_rate(&trajectories);
            println!("attack success rate {rate:.3} over {num} input(s)");
        }
        AttackMethod::Noise => {
            writeln!(file, "index,flipped,entropy")?;
            let mut flips = 0usize;
            for i in 0..num {
                let acfg = AttackConfig {
                    seed: cfg.sub_seed(&format!("attack/{i}")),
                    ..base.clone()
                };
                let clean = predictive(ensemble, &ds.inputs[i])?;
                let noisy = predictive(ensemble, &noise_control(&ds.inputs[i], &acfg))?;
                let flipped = argmax(&clean.mean_probs) != argmax(&noisy.mean_probs);
                flips += usize::from(flipped);
                writeln!(
                    file,
                    "{i},{},{:.12}",
                    u8::from(flipped),
                    entropy(&noisy.mean_probs)
                )?;
            }
            println!("noise flip rate {:.3} over {num} input(s)", flips as f64 / num as f64);
        }
        AttackMethod::LatentHole => {
            let mix = LatentMixture::default_config();
            let dec = decoder(cfg);
            let (lo, hi) = mix.envelope(cfg.grid_pad_sigma);
            let grid = make_grid(&dec, lo, hi, cfg.grid_resolution);
            let holes = latent_hole_attack(
                ensemble,
                &grid,
                &ds.latents,
                cfg.hole_mi_threshold,
                cfg.hole_top_k,
            )?;
            writeln!(file, "z0,z1,confidence,predicted_class,mi,distance_to_train")?;
            for h in &holes {
                writeln!(
                    file,
                    "{:.12},{:.12},{:.12},{},{:.12},{:.12}",
                    h.latent[0],
                    h.latent[1],
                    h.confidence,
                    h.predicted_class,
                    h.mutual_information,
                    h.distance_to_train
                )?;
            }
            println!("found {} hole candidate(s)", holes.len());
        }
    }
    Ok(())
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
