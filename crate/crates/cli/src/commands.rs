use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use shnn::adjoint::grad_check;
use shnn::data::{
    generate_dataset, Dataset, DatasetManifest, DEFAULT_DT, DEFAULT_NOISE, DEFAULT_N_STEPS,
    FULL_N_TRAIN, FULL_N_VAL, SMOKE_N_TRAIN, SMOKE_N_VAL,
};
use shnn::integrators::{
    check_symplectic_tableau, integrate, tableau_by_name, GuessSource, Method, PrkTableau,
};
use shnn::model::{init_params, Arch, Checkpoint, Model};
use shnn::profile::{run_profile, write_profile_csv, ProfileConfig};
use shnn::systems::{SystemRef, SystemSpec};
use shnn::train::{
    energy_drift, evaluate_ood, initial_params, read_metrics_csv, report_csv, report_markdown,
    saturation_epoch, train, write_metrics_csv, GradMode, GridSpec, Shooting, TableRow,
    TrainConfig, SMOKE_N_STEPS,
};
use shnn::{Hamiltonian, HamiltonianField, PhasePoint};

use crate::config::{
    overlay, DatasetSettings, EvalSettings, FileConfig, GradCheckSettings, IntegrateSettings,
    RunConfig, DEFAULT_OUT_DIR,
};
use crate::{
    CheckTableauArgs, Cli, Command, EvalArgs, GenDataArgs, GradCheckArgs, GradModeArg, GuessArg,
    IntegrateArgs, ProfileArgs, SystemArgs, TrainArgs,
};

/// A result outside numerical tolerance; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct NumericalFailure(pub String);

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.downcast_ref::<NumericalFailure>().is_some()
            || c.downcast_ref::<shnn::Error>()
                .is_some_and(|e| e.is_numerical())
    });
    if numerical {
        2
    } else {
        1
    }
}

/// The error chain joined by `: `, skipping causes already spelled out by
/// the message above them.
pub fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

struct Ctx {
    file: FileConfig,
    seed: Option<u64>,
    out_dir: PathBuf,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn system(&self, args: &SystemArgs) -> Result<Option<SystemRef>> {
        let mut sys = match &args.system {
            Some(name) => Some(SystemRef::named(name)),
            None => self.file.system.clone(),
        };
        if let Some(alpha) = args.alpha {
            match &mut sys {
                Some(s) => {
                    s.params.insert("alpha".into(), alpha);
                }
                None => bail!("--alpha needs --system"),
            }
        }
        Ok(sys)
    }

    fn data_dir(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone()
            .or_else(|| self.file.data.clone())
            .unwrap_or_else(|| self.out_dir.clone())
    }

    fn checkpoint_path(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone()
            .or_else(|| self.file.checkpoint.clone())
            .unwrap_or_else(|| self.out("checkpoint.json"))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    if let Some(threads) = cli.threads.or(file.threads) {
        shnn::configure_threads(threads)?;
    }
    let ctx = Ctx {
        seed: cli.seed.or(file.seed),
        out_dir: cli
            .out_dir
            .clone()
            .or_else(|| file.out_dir.clone())
            .unwrap_or_else(|| DEFAULT_OUT_DIR.into()),
        file,
    };
    match &cli.command {
        Command::CheckTableau(args) => return check_tableau(args),
        _ => fs::create_dir_all(&ctx.out_dir)
            .with_context(|| format!("creating {}", ctx.out_dir.display()))?,
    }
    match cli.command {
        Command::GenData(args) => gen_data(&ctx, &args),
        Command::Train(args) => train_cmd(&ctx, &args),
        Command::Eval(args) => eval_cmd(&ctx, &args),
        Command::Integrate(args) => integrate_cmd(&ctx, &args),
        Command::Profile(args) => profile_cmd(&ctx, &args),
        Command::GradCheck(args) => grad_check_cmd(&ctx, &args),
        Command::CheckTableau(_) => unreachable!(),
    }
}

fn guess(arg: GuessArg) -> GuessSource {
    match arg {
        GuessArg::Predictor => GuessSource::Predictor,
        GuessArg::Observation => GuessSource::Observation,
        GuessArg::PreviousState => GuessSource::PreviousState,
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

/// A point inside the domain, a quarter of the way from its center to the
/// upper corner.
fn default_state(spec: &SystemSpec) -> PhasePoint {
    PhasePoint::from_coords(
        spec.domain
            .iter()
            .map(|&(lo, hi)| 0.5 * (lo + hi) + 0.125 * (hi - lo))
            .collect(),
    )
}

fn state_from(values: Option<&[f64]>, spec: &SystemSpec) -> Result<PhasePoint> {
    match values {
        Some(v) => {
            let y = PhasePoint::from_flat(v)?;
            if y.dim() != 2 * spec.half_dim() {
                bail!(
                    "initial state has {} coordinates, system `{}` needs {}",
                    y.dim(),
                    spec.name,
                    2 * spec.half_dim()
                );
            }
            Ok(y)
        }
        None => Ok(default_state(spec)),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn gen_data(ctx: &Ctx, args: &GenDataArgs) -> Result<()> {
    let system = ctx
        .system(&args.system)?
        .ok_or_else(|| anyhow!("gen-data needs --system (or `system` in the config file)"))?;
    let spec = system.build()?;
    let base = if args.smoke {
        DatasetSettings {
            n_train: SMOKE_N_TRAIN,
            n_val: SMOKE_N_VAL,
            n_steps: SMOKE_N_STEPS,
            dt: DEFAULT_DT,
            noise_coeff: DEFAULT_NOISE,
        }
    } else {
        DatasetSettings {
            n_train: FULL_N_TRAIN,
            n_val: FULL_N_VAL,
            n_steps: DEFAULT_N_STEPS,
            dt: DEFAULT_DT,
            noise_coeff: DEFAULT_NOISE,
        }
    };
    let mut s = overlay(base, ctx.file.dataset.as_ref(), "dataset")?;
    s.n_train = args.n_train.unwrap_or(s.n_train);
    s.n_val = args.n_val.unwrap_or(s.n_val);
    s.n_steps = args.n_steps.unwrap_or(s.n_steps);
    s.dt = args.dt.unwrap_or(s.dt);
    s.noise_coeff = args.noise.unwrap_or(s.noise_coeff);

    let mut manifest = DatasetManifest::new(&spec, s.n_train, s.n_val, ctx.seed.unwrap_or(0));
    manifest.n_steps = s.n_steps;
    manifest.dt = s.dt;
    manifest.noise_coeff = s.noise_coeff;
    let start = Instant::now();
    let dataset = generate_dataset(&spec, manifest)?;
    dataset.save(&ctx.out_dir)?;
    if args.csv {
        dataset.write_csv(create(&ctx.out("dataset.csv"))?)?;
    }
    RunConfig {
        command: "gen-data",
        seed: Some(dataset.manifest.seed),
        system: Some(&system),
        data: None,
        checkpoint: None,
        out_dir: &ctx.out_dir,
        settings: &s,
    }
    .save()?;
    println!(
        "{}: {} train + {} val trajectories, {} steps of {} ({:.1}s) -> {}",
        spec.name,
        s.n_train,
        s.n_val,
        s.n_steps,
        s.dt,
        start.elapsed().as_secs_f64(),
        ctx.out_dir.display()
    );
    Ok(())
}

fn train_cmd(ctx: &Ctx, args: &TrainArgs) -> Result<()> {
    let data_dir = ctx.data_dir(&args.data);
    let base = if args.smoke {
        TrainConfig::smoke()
    } else {
        TrainConfig::default()
    };
    let mut cfg = overlay(base, ctx.file.train.as_ref(), "train")?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    cfg.epochs = args.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    if args.batches_per_epoch.is_some() {
        cfg.batches_per_epoch = args.batches_per_epoch;
    }
    cfg.tau = args.tau.unwrap_or(cfg.tau);
    cfg.stride = args.stride.unwrap_or(cfg.stride);
    cfg.lr0 = args.lr.unwrap_or(cfg.lr0);
    if let Some(mode) = args.grad_mode {
        cfg.grad_mode = match mode {
            GradModeArg::Adjoint => GradMode::Adjoint,
            GradModeArg::Backprop => GradMode::Backprop,
        };
    }
    if let Some(g) = args.guess {
        cfg.fpi.guess = guess(g);
    }
    cfg.fpi.tol = args.fpi_tol.unwrap_or(cfg.fpi.tol);
    cfg.fpi.max_iters = args.fpi_iters.unwrap_or(cfg.fpi.max_iters);
    if let Some(segment_len) = args.segment_len {
        cfg.shooting = Shooting::Multiple { segment_len };
    }
    if let Some(hidden) = &args.hidden {
        cfg.hidden = hidden.clone();
    }
    cfg.validate()?;
    let dataset = load_dataset(&data_dir)?;
    RunConfig {
        command: "train",
        seed: Some(cfg.seed),
        system: Some(&dataset.manifest.system),
        data: Some(&data_dir),
        checkpoint: None,
        out_dir: &ctx.out_dir,
        settings: &cfg,
    }
    .save()?;

    let theta = initial_params(&dataset, &cfg)?;
    println!(
        "training on {} ({} params, h = {})",
        dataset.manifest.system.name,
        theta.len(),
        cfg.stride as f64 * dataset.manifest.dt
    );
    println!(
        "{:>5} {:>12} {:>12} {:>10} {:>9}",
        "epoch", "train", "val", "lr", "time_s"
    );
    let outcome = train(&dataset, theta, &cfg, &mut |m| {
        println!(
            "{:>5} {:>12.4e} {:>12.4e} {:>10.2e} {:>9.1}",
            m.epoch, m.train_loss, m.val_loss, m.lr, m.wall_time_s
        );
    })?;
    let ckpt = ctx.out("checkpoint.json");
    Checkpoint::from_params(outcome.theta, cfg.seed).save(&ckpt)?;
    write_metrics_csv(&outcome.metrics, create(&ctx.out("metrics.csv"))?)?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn eval_cmd(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let ckpt_path = ctx.checkpoint_path(&args.checkpoint);
    let mut system = ctx.system(&args.system)?;
    if system.is_none() {
        let dir = ctx.data_dir(&args.data);
        if dir.join("manifest.json").exists() || args.data.is_some() || ctx.file.data.is_some() {
            system = Some(load_manifest_system(&dir)?);
        }
    }
    let checkpoint = if args.oracle {
        let sys = system
            .clone()
            .ok_or_else(|| anyhow!("--oracle needs a system"))?;
        Checkpoint::oracle(&sys)?
    } else {
        Checkpoint::load(&ckpt_path)
            .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?
    };
    let system = system
        .or_else(|| checkpoint.header.oracle.clone())
        .ok_or_else(|| {
            anyhow!("eval needs --system, --data or a dataset in the output directory")
        })?;
    let spec = system.build()?;
    if checkpoint.model.half_dim() != spec.half_dim() {
        bail!(
            "checkpoint has d = {}, system `{}` has d = {}",
            checkpoint.model.half_dim(),
            spec.name,
            spec.half_dim()
        );
    }

    let mut s = overlay(EvalSettings::default(), ctx.file.eval.as_ref(), "eval")?;
    s.grid_n = args.grid_n.unwrap_or(s.grid_n);
    if args.base.is_some() {
        s.base = args.base.clone();
    }
    s.drift_steps = args.drift_steps.unwrap_or(s.drift_steps);
    s.drift_h = args.drift_h.unwrap_or(s.drift_h);

    let mut grid = GridSpec::for_system(&spec, s.grid_n);
    if let Some(base) = &s.base {
        grid.base = base.clone();
    }
    let (mut report, points) = evaluate_ood(&checkpoint.model, &spec, &grid)?;
    let y0 = state_from(s.drift_y0.as_deref(), &spec)?;
    report.energy_drift = Some(energy_drift(
        &checkpoint.model,
        &y0,
        s.drift_h,
        s.drift_steps,
        &s.fpi,
    )?);

    fs::write(ctx.out("eval.json"), serde_json::to_string_pretty(&report)?)
        .context("writing eval.json")?;
    let mut w = csv::Writer::from_writer(create(&ctx.out("grid.csv"))?);
    for p in &points {
        w.serialize(p)?;
    }
    w.flush()?;

    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| ckpt_path.with_file_name("metrics.csv"));
    if !args.oracle && metrics_path.exists() {
        let metrics = read_metrics_csv(
            File::open(&metrics_path).with_context(|| format!("{}", metrics_path.display()))?,
        )?;
        let at = saturation_epoch(&metrics).unwrap_or_else(|| metrics.len().saturating_sub(1));
        let runtime_s = metrics
            .iter()
            .find(|m| m.epoch == at)
            .or(metrics.last())
            .map_or(0.0, |m| m.wall_time_s);
        let rows = [TableRow {
            system: spec.name.clone(),
            h_l1_mean: report.h_l1_mean,
            h_l1_raw_mean: report.h_l1_raw_mean,
            runtime_s,
        }];
        fs::write(ctx.out("report.csv"), report_csv(&rows)?).context("writing report.csv")?;
        fs::write(ctx.out("report.md"), report_markdown(&rows)).context("writing report.md")?;
    }
    RunConfig {
        command: "eval",
        seed: None,
        system: Some(&system),
        data: None,
        checkpoint: (!args.oracle).then_some(ckpt_path.as_path()),
        out_dir: &ctx.out_dir,
        settings: &s,
    }
    .save()?;
    println!(
        "{}: H L1 {:.4e} (max {:.4e}, unaligned {:.4e}), dynamics L2 {:.4e}, drift {:.3e}",
        spec.name,
        report.h_l1_mean,
        report.h_l1_max,
        report.h_l1_raw_mean,
        report.dyn_l2_mean,
        report.energy_drift.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn load_manifest_system(dir: &Path) -> Result<SystemRef> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(manifest.system)
}

fn integrate_cmd(ctx: &Ctx, args: &IntegrateArgs) -> Result<()> {
    let system = ctx.system(&args.system)?;
    let ckpt_path = args
        .checkpoint
        .clone()
        .or_else(|| ctx.file.checkpoint.clone());
    let (model, spec) = match (&ckpt_path, &system) {
        (Some(path), sys) => {
            let ckpt = Checkpoint::load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let spec = match sys {
                Some(s) => Some(s.build()?),
                None => ckpt.header.oracle.as_ref().map(|s| s.build()).transpose()?,
            };
            (ckpt.model, spec)
        }
        (None, Some(sys)) => {
            let spec = sys.build()?;
            (Model::Oracle(spec.clone()), Some(spec))
        }
        (None, None) => bail!("integrate needs --system or --checkpoint"),
    };

    let mut s = overlay(
        IntegrateSettings::default(),
        ctx.file.integrate.as_ref(),
        "integrate",
    )?;
    if let Some(m) = &args.method {
        s.method = m.clone();
    }
    s.h = args.h.unwrap_or(s.h);
    s.steps = args.steps.unwrap_or(s.steps);
    if args.y0.is_some() {
        s.y0 = args.y0.clone();
    }
    s.fpi.tol = args.fpi_tol.unwrap_or(s.fpi.tol);
    if let Some(g) = args.guess {
        s.fpi.guess = guess(g);
    }
    s.fpi.validate()?;
    if !(s.h > 0.0 && s.h.is_finite()) {
        bail!("step size must be positive, got {}", s.h);
    }
    let method = Method::from_name(&s.method)?;
    let y0 = match (&s.y0, &spec) {
        (Some(v), _) => {
            let y = PhasePoint::from_flat(v)?;
            if y.half_dim() != model.half_dim() {
                bail!(
                    "initial state has {} coordinates, model needs {}",
                    y.dim(),
                    2 * model.half_dim()
                );
            }
            y
        }
        (None, Some(spec)) => default_state(spec),
        (None, None) => bail!("--y0 is required when the system is unknown"),
    };
    if s.fpi.guess == GuessSource::Observation {
        bail!("integrate has no observations; use predictor or previous_state");
    }

    let run = integrate(
        &HamiltonianField(&model),
        &y0,
        s.h,
        s.steps,
        &method,
        &s.fpi,
        None,
    )?;
    run.trajectory
        .write_csv(create(&ctx.out("trajectory.csv"))?)?;
    let e0 = model.energy(&y0);
    let drift = run
        .trajectory
        .points
        .iter()
        .fold(0.0f64, |m, p| m.max((model.energy(p) - e0).abs()));
    if !drift.is_finite() {
        return Err(NumericalFailure("energy became non-finite along the rollout".into()).into());
    }
    RunConfig {
        command: "integrate",
        seed: None,
        system: system.as_ref(),
        data: None,
        checkpoint: ckpt_path.as_deref(),
        out_dir: &ctx.out_dir,
        settings: &s,
    }
    .save()?;
    let unconverged = run.unconverged_steps();
    println!(
        "{} steps of {} with {}: max |H - H0| = {:.3e}, unconverged steps {}",
        s.steps,
        s.h,
        method.name(),
        drift,
        unconverged
    );
    Ok(())
}

fn profile_cmd(ctx: &Ctx, args: &ProfileArgs) -> Result<()> {
    let data_dir = ctx.data_dir(&args.data);
    let dataset = load_dataset(&data_dir)?;
    if dataset.manifest.system.name != "coupled_ho" {
        eprintln!(
            "note: profiling on `{}`; reference measurements use coupled_ho",
            dataset.manifest.system.name
        );
    }
    let mut cfg = overlay(
        ProfileConfig::default(),
        ctx.file.profile.as_ref(),
        "profile",
    )?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = &args.steps {
        cfg.steps = steps.clone();
    }
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    if args.stride.is_some() {
        cfg.stride = args.stride;
    }
    cfg.fpi.max_iters = args.fpi_iters.unwrap_or(cfg.fpi.max_iters);
    RunConfig {
        command: "profile",
        seed: Some(cfg.seed),
        system: Some(&dataset.manifest.system),
        data: Some(&data_dir),
        checkpoint: None,
        out_dir: &ctx.out_dir,
        settings: &cfg,
    }
    .save()?;
    let records = run_profile(&dataset, &cfg)?;
    write_profile_csv(&records, create(&ctx.out("profile.csv"))?)?;
    println!(
        "{:>9} {:>6} {:>14} {:>10}",
        "mode", "steps", "peak_bytes", "seconds"
    );
    for r in &records {
        let mode = match r.grad_mode {
            GradMode::Adjoint => "adjoint",
            GradMode::Backprop => "backprop",
        };
        println!(
            "{:>9} {:>6} {:>14} {:>10.3}",
            mode, r.n_steps, r.peak_bytes, r.wall_seconds
        );
    }
    Ok(())
}

fn check_tableau(args: &CheckTableauArgs) -> Result<()> {
    let tableau = match (&args.source.name, &args.source.file) {
        (Some(name), _) => tableau_by_name(name)?,
        (None, Some(path)) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let t: PrkTableau = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            t
        }
        (None, None) => bail!("check-tableau needs --name or --file"),
    };
    let report = check_symplectic_tableau(&tableau)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("tableau    {} ({} stages)", tableau.name, tableau.stages());
        println!("weights    {:.3e}", report.weights);
        println!("coupling   {:.3e}", report.coupling);
        println!("nodes      {:.3e}", report.nodes);
        println!(
            "symplectic {}",
            if report.symplectic { "yes" } else { "no" }
        );
    }
    Ok(())
}

fn grad_check_cmd(ctx: &Ctx, args: &GradCheckArgs) -> Result<()> {
    let system = ctx
        .system(&args.system)?
        .unwrap_or_else(|| SystemRef::named("double_well"));
    let spec = system.build()?;
    let mut s = overlay(
        GradCheckSettings::default(),
        ctx.file.grad_check.as_ref(),
        "grad_check",
    )?;
    if let Some(seed) = ctx.seed {
        s.seed = seed;
    }
    if let Some(hidden) = &args.hidden {
        s.hidden = hidden.clone();
    }
    s.tau = args.tau.unwrap_or(s.tau);
    s.h = args.h.unwrap_or(s.h);
    s.eps = args.eps.unwrap_or(s.eps);
    s.tol = args.tol.unwrap_or(s.tol);
    if s.tau == 0 {
        bail!("tau must be >= 1");
    }

    // One noisy observed trajectory, simulated at the check's step size.
    let mut manifest = DatasetManifest::new(&spec, 1, 1, s.seed);
    manifest.n_steps = s.tau;
    manifest.dt = s.h;
    manifest.noise_coeff = s.noise_coeff;
    let data = generate_dataset(&spec, manifest)?;
    let obs: Vec<PhasePoint> = (0..=s.tau).map(|k| data.observation(0, k)).collect();

    let arch = Arch::with_hidden(spec.half_dim(), &s.hidden)?;
    let theta = init_params(arch.widths(), s.seed)?;
    let rows = grad_check(&theta, &obs, s.h, &s.fpi, s.eps)?;
    let mut w = csv::Writer::from_writer(create(&ctx.out("grad_check.csv"))?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    RunConfig {
        command: "grad-check",
        seed: Some(s.seed),
        system: Some(&system),
        data: None,
        checkpoint: None,
        out_dir: &ctx.out_dir,
        settings: &s,
    }
    .save()?;
    let worst = rows.iter().fold(0.0f64, |m, r| m.max(r.rel_error));
    println!(
        "{} parameters, tau = {}, h = {}: max relative error {:.3e} (tol {:.1e})",
        rows.len(),
        s.tau,
        s.h,
        worst,
        s.tol
    );
    if worst.is_nan() || worst > s.tol {
        return Err(NumericalFailure(format!(
            "gradient check failed: relative error {worst:.3e} exceeds {:.1e}",
            s.tol
        ))
        .into());
    }
    Ok(())
}
