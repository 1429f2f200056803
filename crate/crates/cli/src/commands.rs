//! The six experiment commands. Each one reads a flat config, runs the
//! corresponding library pipeline, writes its artifacts under the output
//! directory, and finishes with a JSON run manifest.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use bnngp::bnn::{self, Activation, BnnSpec};
use bnngp::data::{self, Preprocessor, RawTable, SplitSpec};
use bnngp::kernel::{self, HyperParams, KernelShape};
use bnngp::lowrank::{self, AnchorStrategy};
use bnngp::predict::{self, MetricScale, PredictiveMoments};
use bnngp::simulate::{self, VecchiaConfig};
use bnngp::train::{self, GradientMode, PriorConfig, TrainConfig};
use bnngp::{Error, Result};

use crate::config::{Config, MetricsBothScales, RunManifest};

pub struct CommandContext {
    pub config: Config,
    pub out_dir: PathBuf,
    pub threads: usize,
}

impl CommandContext {
    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, self.config.effective(), self.threads)
    }

    fn finish(&self, mut manifest: RunManifest, result: Result<()>) -> Result<()> {
        // the manifest snapshots the effective config even on controlled failure
        manifest.config = self.config.effective();
        if let Err(e) = &result {
            manifest.status = "error".to_owned();
            manifest.error = Some(e.to_string());
        }
        manifest.write(&self.out_dir.join("manifest.json"))?;
        result
    }
}

fn check_input_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Data(format!("input file not found: {}", path.display())));
    }
    Ok(())
}

fn parse_anchor_strategy(raw: &str) -> Result<AnchorStrategy> {
    match raw {
        "first" => Ok(AnchorStrategy::First),
        "kmeanspp" => Ok(AnchorStrategy::KMeansPp),
        other => Err(Error::Input(format!("anchors must be 'first' or 'kmeanspp', got '{other}'"))),
    }
}

fn parse_gradient_mode(raw: &str) -> Result<GradientMode> {
    match raw {
        "analytic" => Ok(GradientMode::Analytic),
        "finite_difference" => Ok(GradientMode::FiniteDifference),
        other => Err(Error::Input(format!(
            "gradient_mode must be 'analytic' or 'finite_difference', got '{other}'"
        ))),
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

const SIMULATE_KEYS: &[&str] = &[
    "scenario", "design", "dim", "n", "scale", "eta", "seed", "n_init", "n_neighbors", "name",
];

pub fn cmd_simulate(ctx: &CommandContext) -> Result<()> {
    ctx.config.check_keys(SIMULATE_KEYS)?;
    let mut manifest = ctx.manifest("simulate");
    let result = run_simulate(ctx, &mut manifest);
    ctx.finish(manifest, result)
}

fn run_simulate(ctx: &CommandContext, manifest: &mut RunManifest) -> Result<()> {
    let cfg = &ctx.config;
    let spec = if cfg.has("scenario") {
        simulate::scenario_table(&cfg.require_str("scenario")?)?
    } else {
        let design = match cfg.get_str("design", "uniform").as_str() {
            "uniform" => simulate::DesignKind::Uniform,
            "stratified" => simulate::DesignKind::Stratified,
            other => {
                return Err(Error::Input(format!(
                    "design must be 'uniform' or 'stratified', got '{other}'"
                )))
            }
        };
        simulate::ScenarioSpec {
            name: cfg.get_str("name", "custom"),
            design,
            dim: cfg.get_usize("dim", 0)?,
            n: cfg.get_usize("n", 0)?,
        }
    };
    let scale = cfg.get_f64("scale", 1.0)?;
    let eta = cfg.get_f64("eta", 0.04)?;
    let seed = cfg.get_u64("seed", 0)?;
    let vc = VecchiaConfig {
        n_init: cfg.get_usize("n_init", 500)?,
        n_neighbors: cfg.get_usize("n_neighbors", 500)?,
        seed,
    };
    manifest.seeds.insert("seed".into(), seed);

    let t0 = Instant::now();
    let ds = simulate::make_scenario(&spec, scale, eta, seed, &vc)?;
    manifest.wall_clock_seconds.insert("simulate".into(), t0.elapsed().as_secs_f64());

    let stem = cfg.get_str("name", &spec.name.to_lowercase());
    let csv_path = ctx.out_dir.join(format!("{stem}.csv"));
    let json_path = ctx.out_dir.join(format!("{stem}.json"));
    let t0 = Instant::now();
    simulate::save_scenario(&ds, &csv_path, &json_path)?;
    manifest.wall_clock_seconds.insert("write".into(), t0.elapsed().as_secs_f64());
    manifest.artifacts.push(csv_path.display().to_string());
    manifest.artifacts.push(json_path.display().to_string());
    manifest.theta_init = Some(ds.theta_true.into());
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

const FIT_KEYS: &[&str] = &[
    "data", "input_kind", "target", "test_fraction", "split_seed", "seed", "rank", "anchors",
    "anchor_seed", "epochs", "learning_rate", "nugget_learning_rate", "gradient_mode", "eta",
    "adam_beta1", "adam_beta2", "adam_eps", "fd_rel_step",
    "prior_noise_shape", "prior_noise_scale", "prior_hidden_bias_shape", "prior_hidden_bias_scale",
    "prior_input_weight_shape", "prior_input_weight_scale", "prior_output_bias_shape",
    "prior_output_bias_scale", "prior_output_weight_shape", "prior_output_weight_scale",
    "prior_alpha_a", "prior_alpha_b", "prior_w_a", "prior_w_b",
    "init_sigma_eps2", "init_sigma_a2", "init_sigma_u2", "init_sigma_b2", "init_sigma_v2",
    "init_alpha", "init_w",
];

pub fn cmd_fit(ctx: &CommandContext) -> Result<()> {
    ctx.config.check_keys(FIT_KEYS)?;
    let mut manifest = ctx.manifest("fit");
    let result = run_fit(ctx, &mut manifest).map(|_| ());
    ctx.finish(manifest, result)
}

struct LoadedData {
    x_train: DMatrix<f64>,
    y_train: DVector<f64>,
    x_test: DMatrix<f64>,
    y_test: DVector<f64>,
    preprocessor: Preprocessor,
}

fn identity_preprocessor(dim: usize) -> Preprocessor {
    Preprocessor {
        feature_min: vec![0.0; dim],
        feature_max: vec![1.0; dim],
        mu_y: 0.0,
        sigma_y: 1.0,
        feature_names: (1..=dim).map(|d| format!("x_{d}")).collect(),
        target_name: "y".into(),
    }
}

fn load_and_split(cfg: &Config, manifest: &mut RunManifest) -> Result<LoadedData> {
    let data_path = PathBuf::from(cfg.require_str("data")?);
    check_input_exists(&data_path)?;
    let input_kind = cfg.get_str("input_kind", "csv");
    let test_fraction = cfg.get_f64("test_fraction", 0.10)?;
    let base_seed = cfg.get_u64("seed", 0)?;
    let split_seed = cfg.get_u64("split_seed", base_seed)?;
    manifest.seeds.insert("split_seed".into(), split_seed);
    let spec = SplitSpec { test_fraction, seed: split_seed };

    match input_kind.as_str() {
        "scenario" => {
            // already centered, model units: identity preprocessing
            let (x, _f, y) = simulate::load_scenario_csv(&data_path)?;
            let raw = RawTable {
                feature_names: (1..=x.ncols()).map(|d| format!("x_{d}")).collect(),
                features: x,
                target: y,
                target_name: "y".into(),
            };
            let (train, test) = data::split(&raw, &spec)?;
            Ok(LoadedData {
                preprocessor: identity_preprocessor(train.features.ncols()),
                x_train: train.features,
                y_train: train.target,
                x_test: test.features,
                y_test: test.target,
            })
        }
        "csv" => {
            let target = cfg.get_str("target", "y");
            let raw = data::load_csv(&data_path, &target)?;
            let (train, test) = data::split(&raw, &spec)?;
            let (tr, te, pre) = data::fit_transform(&train, &test)?;
            Ok(LoadedData {
                x_train: tr.x,
                y_train: tr.y,
                x_test: te.x,
                y_test: te.y,
                preprocessor: pre,
            })
        }
        other => Err(Error::Input(format!(
            "input_kind must be 'scenario' or 'csv', got '{other}'"
        ))),
    }
}

fn priors_from_config(cfg: &Config) -> Result<PriorConfig> {
    let defaults = PriorConfig::default();
    let ig = |shape_key: &str, scale_key: &str, d: bnngp::train::InvGammaPrior| -> Result<_> {
        Ok(bnngp::train::InvGammaPrior {
            shape: cfg.get_f64(shape_key, d.shape)?,
            scale: cfg.get_f64(scale_key, d.scale)?,
        })
    };
    Ok(PriorConfig {
        noise: ig("prior_noise_shape", "prior_noise_scale", defaults.noise)?,
        hidden_bias: ig("prior_hidden_bias_shape", "prior_hidden_bias_scale", defaults.hidden_bias)?,
        input_weight: ig(
            "prior_input_weight_shape",
            "prior_input_weight_scale",
            defaults.input_weight,
        )?,
        output_bias: ig("prior_output_bias_shape", "prior_output_bias_scale", defaults.output_bias)?,
        output_weight: ig(
            "prior_output_weight_shape",
            "prior_output_weight_scale",
            defaults.output_weight,
        )?,
        alpha: bnngp::train::BetaPrior {
            a: cfg.get_f64("prior_alpha_a", defaults.alpha.a)?,
            b: cfg.get_f64("prior_alpha_b", defaults.alpha.b)?,
        },
        w: bnngp::train::BetaPrior {
            a: cfg.get_f64("prior_w_a", defaults.w.a)?,
            b: cfg.get_f64("prior_w_b", defaults.w.b)?,
        },
    })
}

fn theta0_from_config(cfg: &Config, x_train: &DMatrix<f64>, eta: f64) -> Result<HyperParams> {
    let mut theta = train::default_init(x_train, eta)?;
    theta.sigma_eps2 = cfg.get_f64("init_sigma_eps2", theta.sigma_eps2)?;
    theta.sigma_a2 = cfg.get_f64("init_sigma_a2", theta.sigma_a2)?;
    theta.sigma_u2 = cfg.get_f64("init_sigma_u2", theta.sigma_u2)?;
    theta.sigma_b2 = cfg.get_f64("init_sigma_b2", theta.sigma_b2)?;
    theta.sigma_v2 = cfg.get_f64("init_sigma_v2", theta.sigma_v2)?;
    theta.alpha = cfg.get_f64("init_alpha", theta.alpha)?;
    theta.w = cfg.get_f64("init_w", theta.w)?;
    theta.validate_interior()?;
    Ok(theta)
}

fn train_config_from(cfg: &Config, rank: usize) -> Result<TrainConfig> {
    let base_seed = cfg.get_u64("seed", 0)?;
    let mut config = TrainConfig::new(rank);
    config.epochs = cfg.get_usize("epochs", 50)?.max(1);
    config.learning_rate = cfg.get_f64("learning_rate", 1e-3)?;
    config.nugget_learning_rate = cfg.get_f64("nugget_learning_rate", 1e-3)?;
    config.anchor_strategy = parse_anchor_strategy(&cfg.get_str("anchors", "first"))?;
    config.anchor_seed = cfg.get_u64("anchor_seed", base_seed)?;
    config.gradient_mode = parse_gradient_mode(&cfg.get_str("gradient_mode", "analytic"))?;
    config.adam_beta1 = cfg.get_f64("adam_beta1", 0.9)?;
    config.adam_beta2 = cfg.get_f64("adam_beta2", 0.999)?;
    config.adam_eps = cfg.get_f64("adam_eps", 1e-8)?;
    config.fd_rel_step = cfg.get_f64("fd_rel_step", 1e-5)?;
    config.validate()?;
    Ok(config)
}

fn evaluate_both_scales(
    preds_z: &[PredictiveMoments],
    y_test_z: &DVector<f64>,
    pre: &Preprocessor,
    sigma_eps2_z: f64,
) -> Result<MetricsBothScales> {
    let standardized = predict::compute_metrics(preds_z, y_test_z, MetricScale::Standardized)?;
    let preds_o = data::destandardize(preds_z, pre);
    let y_o = data::destandardize_targets(y_test_z, pre);
    let original = predict::compute_metrics(&preds_o, &y_o, MetricScale::Original)?;
    Ok(MetricsBothScales {
        standardized,
        original,
        sigma_eps2_standardized: sigma_eps2_z,
        sigma_eps2_original: data::destandardize_nugget(sigma_eps2_z, pre),
        sd_y_train: pre.sigma_y,
    })
}

fn run_fit(ctx: &CommandContext, manifest: &mut RunManifest) -> Result<MetricsBothScales> {
    let cfg = &ctx.config;
    let t0 = Instant::now();
    let loaded = load_and_split(cfg, manifest)?;
    manifest.wall_clock_seconds.insert("load".into(), t0.elapsed().as_secs_f64());

    let n_train = loaded.x_train.nrows();
    let rank = cfg.get_usize("rank", n_train.min(500))?;
    let eta = cfg.get_f64("eta", 0.04)?;
    let epochs = cfg.get_usize("epochs", 50)?;
    let theta0 = theta0_from_config(cfg, &loaded.x_train, eta)?;
    let priors = priors_from_config(cfg)?;
    let config = train_config_from(cfg, rank)?;
    manifest.seeds.insert("anchor_seed".into(), config.anchor_seed);
    manifest.theta_init = Some(theta0.into());

    let t0 = Instant::now();
    let (theta_hat, trajectory, anchors) = if epochs == 0 {
        // zero-epoch run: echo the initialization
        (theta0, Vec::new(), train::select_anchors(&loaded.x_train, &config)?)
    } else {
        let fit = train::fit(&loaded.y_train, &loaded.x_train, &theta0, &priors, &config)?;
        (fit.theta_hat, fit.loss_trajectory, fit.anchors)
    };
    manifest.wall_clock_seconds.insert("fit".into(), t0.elapsed().as_secs_f64());
    manifest.theta_hat = Some(theta_hat.into());
    manifest.loss_trajectory = Some(trajectory);

    let t0 = Instant::now();
    let factor = lowrank::nystrom_factorize(&loaded.x_train, &theta_hat, &anchors)?;
    let predictor = predict::Predictor::new(&loaded.x_train, &loaded.y_train, &theta_hat, &factor)?;
    let preds = predictor.predict_all(&loaded.x_test)?;
    let metrics =
        evaluate_both_scales(&preds, &loaded.y_test, &loaded.preprocessor, theta_hat.sigma_eps2)?;
    manifest.wall_clock_seconds.insert("predict".into(), t0.elapsed().as_secs_f64());
    manifest.metrics = Some(metrics.clone());

    let pre_path = ctx.out_dir.join("preprocessor.json");
    loaded.preprocessor.save_json(&pre_path)?;
    manifest.artifacts.push(pre_path.display().to_string());
    let preds_path = ctx.out_dir.join("predictions.csv");
    write_predictions_csv(&preds_path, &preds, &loaded.y_test)?;
    manifest.artifacts.push(preds_path.display().to_string());
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

const EVAL_KEYS: &[&str] = &["predictions", "mu_y", "sigma_y", "preprocessor", "sigma_eps2"];

pub fn cmd_eval(ctx: &CommandContext) -> Result<()> {
    ctx.config.check_keys(EVAL_KEYS)?;
    let mut manifest = ctx.manifest("eval");
    let result = run_eval(ctx, &mut manifest);
    ctx.finish(manifest, result)
}

fn run_eval(ctx: &CommandContext, manifest: &mut RunManifest) -> Result<()> {
    let cfg = &ctx.config;
    let path = PathBuf::from(cfg.require_str("predictions")?);
    check_input_exists(&path)?;
    let pre = if cfg.has("preprocessor") {
        let pre_path = PathBuf::from(cfg.require_str("preprocessor")?);
        check_input_exists(&pre_path)?;
        Preprocessor::load_json(&pre_path)?
    } else {
        Preprocessor {
            mu_y: cfg.get_f64("mu_y", 0.0)?,
            sigma_y: cfg.get_f64("sigma_y", 1.0)?,
            ..identity_preprocessor(1)
        }
    };
    let sigma_eps2_z = cfg.get_f64("sigma_eps2", 0.0)?;

    let t0 = Instant::now();
    let table = data::load_csv(&path, "y")?;
    let mu_idx = table
        .feature_names
        .iter()
        .position(|h| h == "mu")
        .ok_or_else(|| Error::Data(format!("{}: no 'mu' column", path.display())))?;
    let var_idx = table
        .feature_names
        .iter()
        .position(|h| h == "var")
        .ok_or_else(|| Error::Data(format!("{}: no 'var' column", path.display())))?;
    let preds: Vec<PredictiveMoments> = (0..table.n())
        .map(|i| PredictiveMoments {
            mu_star: table.features[(i, mu_idx)],
            var_star: table.features[(i, var_idx)],
        })
        .collect();
    let metrics = evaluate_both_scales(&preds, &table.target, &pre, sigma_eps2_z)?;
    manifest.wall_clock_seconds.insert("eval".into(), t0.elapsed().as_secs_f64());

    let out = ctx.out_dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::Data(format!("metrics serialization failed: {e}")))?;
    std::fs::write(&out, json + "\n")
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", out.display())))?;
    manifest.artifacts.push(out.display().to_string());
    manifest.metrics = Some(metrics);
    Ok(())
}

// ---------------------------------------------------------------------------
// kernel-probe
// ---------------------------------------------------------------------------

const KERNEL_PROBE_KEYS: &[&str] = &["grid_points", "grid_bound"];

pub fn cmd_kernel_probe(ctx: &CommandContext) -> Result<()> {
    ctx.config.check_keys(KERNEL_PROBE_KEYS)?;
    let mut manifest = ctx.manifest("kernel-probe");
    let result = run_kernel_probe(ctx, &mut manifest);
    ctx.finish(manifest, result)
}

fn run_kernel_probe(ctx: &CommandContext, manifest: &mut RunManifest) -> Result<()> {
    let cfg = &ctx.config;
    let points = cfg.get_usize("grid_points", 401)?;
    let bound = cfg.get_f64("grid_bound", 0.999)?;
    if points < 100 || !(bound > 0.0 && bound < 1.0) {
        return Err(Error::Input("grid_points must be >= 100 and grid_bound in (0,1)".into()));
    }
    let grid: Vec<f64> = (0..points)
        .map(|i| -bound + 2.0 * bound * (i as f64) / ((points - 1) as f64))
        .collect();

    let pairs = [
        ("tanh", "sigmoid", KernelShape::Tanh, KernelShape::Sigmoid),
        ("relu", "leaky_relu_0.1", KernelShape::Relu, KernelShape::LeakyRelu { alpha: 0.1 }),
        ("relu", "leaky_relu_0.3", KernelShape::Relu, KernelShape::LeakyRelu { alpha: 0.3 }),
    ];
    let t0 = Instant::now();
    let out = ctx.out_dir.join("kernel_probe.csv");
    let mut file = std::fs::File::create(&out)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", out.display())))?;
    writeln!(file, "kernel_a,kernel_b,correlation,self_a,self_b")
        .map_err(|e| Error::Data(e.to_string()))?;
    for (name_a, name_b, a, b) in pairs {
        let corr = kernel::shape_correlation(a, b, &grid)?;
        let self_a = kernel::shape_correlation(a, a, &grid)?;
        let self_b = kernel::shape_correlation(b, b, &grid)?;
        writeln!(file, "{name_a},{name_b},{corr},{self_a},{self_b}")
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    manifest.wall_clock_seconds.insert("probe".into(), t0.elapsed().as_secs_f64());
    manifest.artifacts.push(out.display().to_string());
    Ok(())
}

// ---------------------------------------------------------------------------
// oracle-check
// ---------------------------------------------------------------------------

const ORACLE_KEYS: &[&str] =
    &["widths", "n_samples", "probes", "probe_dim", "seed", "activation", "alpha", "mix_w"];

pub fn cmd_oracle_check(ctx: &CommandContext) -> Result<()> {
    ctx.config.check_keys(ORACLE_KEYS)?;
    let mut manifest = ctx.manifest("oracle-check");
    let result = run_oracle_check(ctx, &mut manifest);
    ctx.finish(manifest, result)
}

fn run_oracle_check(ctx: &CommandContext, manifest: &mut RunManifest) -> Result<()> {
    let cfg = &ctx.config;
    let widths = cfg.get_usize_list("widths", "1,100,1000,10000")?;
    let n_samples = cfg.get_usize("n_samples", 4000)?;
    let probes = cfg.get_usize("probes", 5)?;
    let probe_dim = cfg.get_usize("probe_dim", 3)?;
    let seed = cfg.get_u64("seed", 7)?;
    manifest.seeds.insert("seed".into(), seed);
    let alpha = cfg.get_f64("alpha", 0.3)?;
    let (activations, weights, label) = match cfg.get_str("activation", "relu").as_str() {
        "relu" => (vec![Activation::Relu], vec![1.0], "relu".to_owned()),
        "tanh" => (vec![Activation::Tanh], vec![1.0], "tanh".to_owned()),
        "sigmoid" => (vec![Activation::Sigmoid], vec![1.0], "sigmoid".to_owned()),
        "leaky_relu" => (vec![Activation::LeakyRelu(alpha)], vec![1.0], format!("leaky_{alpha}")),
        "mix" => {
            let w = cfg.get_f64("mix_w", 0.5)?;
            (
                vec![Activation::Tanh, Activation::LeakyRelu(alpha)],
                vec![w, 1.0 - w],
                format!("mix_{w}_{alpha}"),
            )
        }
        other => return Err(Error::Input(format!("unknown activation '{other}'"))),
    };

    // fixed probe set derived from the seed
    let design = simulate::DesignSpec::uniform(probes, probe_dim, seed);
    let x_probe = simulate::center(&simulate::generate_design(&design)?);

    let spec = BnnSpec {
        hidden_width: 1,
        activations,
        weights,
        theta: HyperParams::unit(),
        n_samples,
        seed,
    };
    let t0 = Instant::now();
    let probe_id = format!("{label}_d{probe_dim}_p{probes}");
    let rows = bnn::width_convergence_report(&spec, &widths, &x_probe, &probe_id)?;
    manifest.wall_clock_seconds.insert("oracle".into(), t0.elapsed().as_secs_f64());

    let out = ctx.out_dir.join("oracle_check.csv");
    bnn::write_convergence_csv(&out, &rows)?;
    manifest.artifacts.push(out.display().to_string());
    Ok(())
}

// ---------------------------------------------------------------------------
// rank-sweep
// ---------------------------------------------------------------------------

const RANK_SWEEP_KEYS: &[&str] = &[
    "data", "input_kind", "target", "test_fraction", "split_seed", "seed", "ranks", "budgets",
    "repeats", "anchors", "anchor_seed", "epochs", "learning_rate", "nugget_learning_rate",
    "gradient_mode", "eta",
];

pub fn cmd_rank_sweep(ctx: &CommandContext) -> Result<()> {
    ctx.config.check_keys(RANK_SWEEP_KEYS)?;
    let mut manifest = ctx.manifest("rank-sweep");
    let result = run_rank_sweep(ctx, &mut manifest);
    ctx.finish(manifest, result)
}

fn run_rank_sweep(ctx: &CommandContext, manifest: &mut RunManifest) -> Result<()> {
    let cfg = &ctx.config;
    let loaded = load_and_split(cfg, manifest)?;
    let ranks = cfg.get_usize_list("ranks", "50,100,200")?;
    let budgets = cfg.get_f64_list("budgets", "1,10,60")?;
    let repeats = cfg.get_usize("repeats", 1)?.max(1);
    let eta = cfg.get_f64("eta", 0.04)?;
    let theta0 = train::default_init(&loaded.x_train, eta)?;
    let priors = PriorConfig::default();

    struct SweepRow {
        rank: usize,
        wall_time: f64,
        metrics: MetricsBothScales,
    }
    let mut rows: Vec<SweepRow> = Vec::new();
    for &rank in &ranks {
        if rank > loaded.x_train.nrows() {
            return Err(Error::Input(format!(
                "rank {rank} exceeds the {} training rows",
                loaded.x_train.nrows()
            )));
        }
        let config = train_config_from(cfg, rank)?;
        let mut times = Vec::with_capacity(repeats);
        let mut last: Option<MetricsBothScales> = None;
        for _ in 0..repeats {
            let t0 = Instant::now();
            let fit = train::fit(&loaded.y_train, &loaded.x_train, &theta0, &priors, &config)?;
            let factor = lowrank::nystrom_factorize(&loaded.x_train, &fit.theta_hat, &fit.anchors)?;
            let predictor =
                predict::Predictor::new(&loaded.x_train, &loaded.y_train, &fit.theta_hat, &factor)?;
            let preds = predictor.predict_all(&loaded.x_test)?;
            times.push(t0.elapsed().as_secs_f64());
            last = Some(evaluate_both_scales(
                &preds,
                &loaded.y_test,
                &loaded.preprocessor,
                fit.theta_hat.sigma_eps2,
            )?);
        }
        times.sort_by(f64::total_cmp);
        let median = times[times.len() / 2];
        rows.push(SweepRow { rank, wall_time: median, metrics: last.expect("repeats >= 1") });
    }

    let sweep_path = ctx.out_dir.join("rank_sweep.csv");
    let mut file = std::fs::File::create(&sweep_path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", sweep_path.display())))?;
    writeln!(file, "r,wall_time_s,mae,rmse,mese,sdese")
        .map_err(|e| Error::Data(e.to_string()))?;
    for row in &rows {
        let m = &row.metrics.original;
        writeln!(
            file,
            "{},{},{},{},{},{}",
            row.rank, row.wall_time, m.mae, m.rmse, m.mese, m.sdese
        )
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    manifest.artifacts.push(sweep_path.display().to_string());

    // budget table: r_max(T) is the largest rank fitting the budget,
    // r_best(T) the feasible rank with the lowest test RMSE
    let budget_path = ctx.out_dir.join("budget_table.csv");
    let mut file = std::fs::File::create(&budget_path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", budget_path.display())))?;
    writeln!(file, "budget_s,r_max,time_r_max,rmse_r_max,r_best,rmse_r_best")
        .map_err(|e| Error::Data(e.to_string()))?;
    for &budget in &budgets {
        let feasible: Vec<&SweepRow> = rows.iter().filter(|r| r.wall_time <= budget).collect();
        if feasible.is_empty() {
            writeln!(file, "{budget},,,,,").map_err(|e| Error::Data(e.to_string()))?;
            continue;
        }
        let r_max = feasible.iter().max_by_key(|r| r.rank).expect("nonempty");
        let r_best = feasible
            .iter()
            .min_by(|a, b| a.metrics.original.rmse.total_cmp(&b.metrics.original.rmse))
            .expect("nonempty");
        writeln!(
            file,
            "{budget},{},{},{},{},{}",
            r_max.rank,
            r_max.wall_time,
            r_max.metrics.original.rmse,
            r_best.rank,
            r_best.metrics.original.rmse
        )
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    manifest.artifacts.push(budget_path.display().to_string());
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn write_predictions_csv(
    path: &Path,
    preds: &[PredictiveMoments],
    y: &DVector<f64>,
) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    writeln!(file, "mu,var,y").map_err(|e| Error::Data(e.to_string()))?;
    for (p, yv) in preds.iter().zip(y.iter()) {
        writeln!(file, "{},{},{}", p.mu_star, p.var_star, yv).map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(())
}

/// Maps library errors onto the documented process exit codes.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Input(_) | Error::Parameter(_) => 2,
        Error::Data(_) => 3,
        Error::Numeric(_) => 4,
    }
}

pub fn error_class(err: &Error) -> &'static str {
    match err {
        Error::Input(_) | Error::Parameter(_) => "config",
        Error::Data(_) => "data",
        Error::Numeric(_) => "numeric",
    }
}
