use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ndarray::{s, Axis};

use ddl::analysis::{
    deepfool_all, fooling_rate, layer_mi_profile, mi_csv, noise_robustness_curve, robustness_csv,
    shared_perturbation, BudgetMode, CurveRow, Perturbations,
};
use ddl::asymptotics::{curve_csv, curve_point, AsymptoticProblem};
use ddl::autodiff::{finite_difference_check, ParamRef};
use ddl::datasets::{load_cifar10, load_mnist_dir, synthetic_image_classes, LabeledImageSet, Split};
use ddl::network::{forward, reconstruct, NormMode};
use ddl::rng::derive_seed;
use ddl::trainer::{
    evaluate, init_model, load_checkpoint, metrics_csv, run_training, save_checkpoint,
    TrainState,
};

use crate::config::{BudgetChoice, DataKind, RunConfig, CONFIG_ECHO};
use crate::output::{encode_pnm, RunDir};
use crate::{Cli, CliError, Command, SplitArg};

const DEFAULT_OUT: &str = "ddl-out";
const CHECKPOINT: &str = "checkpoint.ddl";

type CmdResult = std::result::Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Loads the config (or defaults), applies flag overrides, and validates.
fn resolve_config(cli: &Cli) -> std::result::Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    if cfg.out.is_none() {
        cfg.out = Some(PathBuf::from(DEFAULT_OUT));
    }
    if let Command::Train(t) = &cli.command {
        if let Some(e) = t.epochs {
            cfg.train.epochs = e;
        }
    }
    Ok(cfg)
}

fn require_file(p: &Path) -> std::result::Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{} does not exist", p.display())))
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Reconstruct(_) => "reconstruct",
        Command::Attack(_) => "attack",
        Command::Mi(_) => "mi",
        Command::Asymptotics(_) => "asymptotics",
        Command::CheckGrad(_) => "check-grad",
    }
}

pub fn dispatch(cli: &Cli) -> CmdResult {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Runtime(e.into()))?;
    }
    let cfg = resolve_config(cli)?;
    // asymptotics does not touch data or models
    if matches!(cli.command, Command::Asymptotics(_)) {
        if cfg.seed.is_none() {
            return Err(usage("field `seed` is required (set it in the config or pass --seed)"));
        }
    } else {
        cfg.validate().map_err(|e| usage(format!("{e:#}")))?;
    }
    match &cli.command {
        Command::Eval(a) => require_file(&a.checkpoint)?,
        Command::Reconstruct(a) => require_file(&a.checkpoint)?,
        Command::Attack(a) => require_file(&a.checkpoint)?,
        Command::Mi(a) => a.checkpoint.iter().try_for_each(|p| require_file(p))?,
        Command::Train(a) => {
            if let Some(p) = &a.resume {
                require_file(p)?
            }
        }
        _ => {}
    }

    let mut dir = RunDir::create(cfg.out.as_deref().expect("resolved"))?;
    // the echo omits the output location so reruns elsewhere match byte for byte
    let echo = RunConfig { out: None, ..cfg.clone() };
    dir.write(CONFIG_ECHO, echo.to_toml().as_bytes())?;
    match &cli.command {
        Command::Train(a) => train(&cfg, a.resume.as_deref(), &mut dir)?,
        Command::Eval(a) => eval(&cfg, &a.checkpoint, a.split, &mut dir)?,
        Command::Reconstruct(a) => reconstruct_cmd(&cfg, &a.checkpoint, a.count, &mut dir)?,
        Command::Attack(a) => attack(&cfg, &a.checkpoint, &mut dir)?,
        Command::Mi(a) => mi(&cfg, &a.checkpoint, &mut dir)?,
        Command::Asymptotics(a) => asymptotics(&cfg, a, &mut dir)?,
        Command::CheckGrad(a) => return check_grad(&cfg, a, dir, cli),
    }
    let args: Vec<String> = std::env::args().skip(1).collect();
    dir.finish(command_name(&cli.command), cfg.seed(), CONFIG_ECHO, &args)?;
    Ok(())
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<LabeledImageSet> {
    let set = match cfg.data.kind {
        DataKind::Synthetic => {
            let syn = &cfg.data.synthetic;
            let all = synthetic_image_classes(&syn.spec())?;
            let idx: Vec<usize> = match split {
                Split::Train => (0..syn.n).collect(),
                Split::Test => (syn.n..syn.n + syn.test_n).collect(),
            };
            all.subset(&idx)?
        }
        DataKind::Mnist => load_mnist_dir(&cfg.data_dir().expect("validated"), split)?,
        DataKind::Cifar10 => {
            let dir = cfg.data_dir().expect("validated");
            let files: Vec<PathBuf> = match split {
                Split::Train => (1..=5)
                    .map(|i| dir.join(format!("data_batch_{i}.bin")))
                    .filter(|p| p.is_file())
                    .collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            };
            load_cifar10(&files)?
        }
    };
    let limit = match split {
        Split::Train => cfg.data.train_subset,
        Split::Test => cfg.data.test_subset,
    };
    Ok(match limit {
        Some(n) if n < set.len() => set.head(n)?,
        _ => set,
    })
}

fn head(set: &LabeledImageSet, n: usize) -> Result<LabeledImageSet> {
    Ok(if n < set.len() { set.head(n)? } else { set.clone() })
}

fn train(cfg: &RunConfig, resume: Option<&Path>, dir: &mut RunDir) -> Result<()> {
    let seed = cfg.seed();
    let train_set = load_split(cfg, Split::Train)?;
    let test_set = load_split(cfg, Split::Test)?;
    let mut state = match resume {
        Some(p) => load_checkpoint(p)?,
        None => TrainState::new(init_model(&cfg.skeleton()?, derive_seed(seed, 1))?, seed),
    };
    let tc = cfg.train_config();
    let mi_every = cfg.train.mi_every;
    let mi_images = head(&train_set, cfg.mi.samples)?.images;
    let mut mi_rows = Vec::new();
    let record_mi = |state: &TrainState, rows: &mut Vec<_>| -> Result<()> {
        for (r, e) in layer_mi_profile(&state.model, &mi_images, cfg.mi.k)?.into_iter().enumerate() {
            rows.push((r + 1, state.epoch, e));
        }
        Ok(())
    };
    if mi_every > 0 {
        record_mi(&state, &mut mi_rows)?;
    }
    let mut log = Vec::new();
    let one = ddl::trainer::TrainConfig { epochs: 1, ..tc.clone() };
    for _ in 0..tc.epochs {
        let m = run_training(&mut state, &train_set, Some(&test_set), &one, &mut |m| {
            eprintln!("epoch {} loss {:.6} test_acc {:.4}", m.epoch, m.train_loss, m.test_acc);
            Ok(())
        })?;
        log.extend(m);
        if mi_every > 0 && state.epoch % mi_every as u64 == 0 {
            record_mi(&state, &mut mi_rows)?;
        }
    }
    dir.write("metrics.csv", metrics_csv(&log).as_bytes())?;
    if mi_every > 0 {
        dir.write("mi.csv", mi_csv(&mi_rows).as_bytes())?;
    }
    save_checkpoint(&dir.path(CHECKPOINT), &state)?;
    dir.register(CHECKPOINT);
    Ok(())
}

fn eval(cfg: &RunConfig, ckpt: &Path, split: SplitArg, dir: &mut RunDir) -> Result<()> {
    let state = load_checkpoint(ckpt)?;
    let (name, split) = match split {
        SplitArg::Train => ("train", Split::Train),
        SplitArg::Test => ("test", Split::Test),
    };
    let set = load_split(cfg, split)?;
    let acc = evaluate(&state.model, &set)?;
    println!("{name} accuracy {acc:.6} on {} images", set.len());
    dir.write("eval.csv", format!("split,n,accuracy\n{name},{},{acc:.6}\n", set.len()).as_bytes())?;
    Ok(())
}

fn reconstruct_cmd(cfg: &RunConfig, ckpt: &Path, count: usize, dir: &mut RunDir) -> Result<()> {
    let state = load_checkpoint(ckpt)?;
    let set = head(&load_split(cfg, Split::Test)?, count)?;
    let (_, cache) = forward(&state.model, set.images.view(), &NormMode::Running)?;
    let recon = reconstruct(&state.model, &cache)?;
    let mut csv = String::from("index,mse\n");
    for (i, r) in recon.iter().enumerate() {
        let orig = set.images.index_axis(Axis(0), i).to_owned();
        let ext = if orig.dim().0 == 3 { "ppm" } else { "pgm" };
        dir.write(&format!("orig_{i:03}.{ext}"), &encode_pnm(&orig)?)?;
        dir.write(&format!("recon_{i:03}.{ext}"), &encode_pnm(r)?)?;
        let mse = (&orig - r).mapv(|v| v * v).mean().unwrap_or(0.0);
        let _ = writeln!(csv, "{i},{mse:.10e}");
    }
    dir.write("reconstruct.csv", csv.as_bytes())?;
    Ok(())
}

fn attack(cfg: &RunConfig, ckpt: &Path, dir: &mut RunDir) -> Result<()> {
    let state = load_checkpoint(ckpt)?;
    let model = &state.model;
    let a = &cfg.attack;
    let set = head(&load_split(cfg, Split::Test)?, a.samples)?;
    let mode = match a.budget {
        BudgetChoice::Clip => BudgetMode::Clip,
        BudgetChoice::Exact => BudgetMode::Exact,
    };
    let per = deepfool_all(model, &set, a.max_iter, a.overshoot)?;
    let shared = shared_perturbation(&per)?;
    let per = Perturbations::PerImage(per);
    let shared = Perturbations::Shared(shared);
    let mut per_rows = Vec::new();
    let mut shared_rows = Vec::new();
    for &rho in &a.rhos {
        for (src, rows, m) in [(&per, &mut per_rows, mode), (&shared, &mut shared_rows, BudgetMode::Exact)] {
            let r = fooling_rate(model, &set, src, rho, m)?;
            rows.push(CurveRow {
                rho,
                fooling_rate: r.fooling_rate,
                mean_norm: r.mean_perturbation_norm,
            });
        }
    }
    dir.write("attack.csv", robustness_csv(&per_rows).as_bytes())?;
    dir.write("attack_shared.csv", robustness_csv(&shared_rows).as_bytes())?;
    let noise = noise_robustness_curve(model, &set, &a.rhos, a.trials, derive_seed(cfg.seed(), 0xA77))?;
    dir.write("noise.csv", robustness_csv(&noise).as_bytes())?;
    for r in &per_rows {
        println!("rho {} deepfool fooling rate {:.4}", r.rho, r.fooling_rate);
    }
    Ok(())
}

fn mi(cfg: &RunConfig, ckpts: &[PathBuf], dir: &mut RunDir) -> Result<()> {
    let set = head(&load_split(cfg, Split::Test)?, cfg.mi.samples)?;
    let mut rows = Vec::new();
    for p in ckpts {
        let state = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
        for (r, e) in layer_mi_profile(&state.model, &set.images, cfg.mi.k)?.into_iter().enumerate() {
            rows.push((r + 1, state.epoch, e));
        }
    }
    let csv = mi_csv(&rows);
    print!("{csv}");
    dir.write("mi.csv", csv.as_bytes())?;
    Ok(())
}

fn asymptotics(cfg: &RunConfig, a: &crate::AsymptoticsArgs, dir: &mut RunDir) -> Result<()> {
    let mut points = Vec::new();
    for &gamma in &a.gamma {
        for &sigma2 in &a.sigma2 {
            for &lambda in &a.lambda {
                for &k in &a.k {
                    let prob = AsymptoticProblem::new(gamma, sigma2, lambda, k)?;
                    points.push(curve_point(&prob, a.n, a.trials, cfg.seed())?);
                }
            }
        }
    }
    let csv = curve_csv(&points);
    print!("{csv}");
    dir.write("asymptotics.csv", csv.as_bytes())?;
    Ok(())
}

fn check_grad(cfg: &RunConfig, a: &crate::CheckGradArgs, mut dir: RunDir, cli: &Cli) -> CmdResult {
    let seed = cfg.seed();
    let model = init_model(&cfg.skeleton()?, derive_seed(seed, 1))?;
    let set = load_split(cfg, Split::Train)?;
    let n = a.images.min(set.len());
    let images = set.images.slice(s![..n, .., .., ..]);
    let report = finite_difference_check(&model, images, &set.labels[..n], a.h)
        .map_err(|e| usage(format!("{e}")))?;
    let mut csv = String::from("param,analytic,numeric,rel_error\n");
    for e in &report.entries {
        let name = match e.param {
            ParamRef::Dictionary(r, i, j) => format!("D{}[{i};{j}]", r + 1),
            ParamRef::Classifier(i, j) => format!("W[{i};{j}]"),
        };
        let _ = writeln!(csv, "{name},{:.12e},{:.12e},{:.6e}", e.analytic, e.numeric, e.rel_error);
    }
    dir.write("check_grad.csv", csv.as_bytes())?;
    println!(
        "compared {} skipped {} (fraction {:.4}) max_rel_error {:.3e} mean_rel_error {:.3e}",
        report.entries.len(),
        report.skipped.len(),
        report.skip_fraction,
        report.max_rel_error,
        report.mean_rel_error
    );
    let args: Vec<String> = std::env::args().skip(1).collect();
    dir.finish(command_name(&cli.command), seed, CONFIG_ECHO, &args)?;
    if report.max_rel_error > a.threshold {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error,
            a.threshold
        )));
    }
    Ok(())
}
