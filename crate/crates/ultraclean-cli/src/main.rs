//! Batch command-line front end for the cleansing pipeline.
//!
//! Subcommands: poison, train, run, eval, denoise, freqview, sweep-beta.
//! Every command is deterministic under a fixed --seed; one global seed fans
//! out to per-phase seeds (data, test, poison, model, shuffle, attacker) so
//! phases can be reproduced in isolation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{AttackName, DataSource, PlacementKind, RunConfig, TriggerKind};
use ultraclean::attacks::{
    build_poisoned_dataset, AttackBudget, AttackSpec, Placement, PoisonAmount, PoisonPlan,
    SigSpec, TestTrigger, TriggerSpec,
};
use ultraclean::cleanse::{
    compute_asr, remove_top, run_ultraclean, score_dataset, write_score_csv, AttackContext,
    CleanseConfig,
};
use ultraclean::dataio::{
    export_ppm, generate_synthetic, import_cifar10, load_dataset, save_dataset, LabeledDataset,
    PoisonMask,
};
use ultraclean::denoise::{dft_log_magnitude, median_denoise, nlm_denoise, MedianParams, NlmParams};
use ultraclean::error::{Error, Result};
use ultraclean::model::{self, evaluate, load_params, save_params, ModelParams, TrainConfig};

#[derive(Parser)]
#[command(name = "ultraclean", version, about = "Backdoor-poisoning dataset cleansing pipeline")]
struct Cli {
    /// Cap on worker threads (0 = all cores); results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a poisoned dataset and its ground-truth mask.
    Poison {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Attacker model checkpoint (required for lcbd/trojan/htbd).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train a classifier on a dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Input dataset (UCDS); defaults to the configured source.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Full pipeline: poison, pre-clean train, score, remove, retrain, report.
    Run {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Evaluate a checkpoint: accuracy, and ASR when a trigger is configured.
    Eval {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Model checkpoint to evaluate.
        #[arg(long)]
        model: PathBuf,
        /// Dataset to evaluate on (UCDS); defaults to the configured test set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Apply a denoising filter to a dataset (or export one denoised image).
    Denoise {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Input dataset (UCDS).
        #[arg(long)]
        data: PathBuf,
        /// nlm or median.
        #[arg(long, default_value = "median")]
        filter: String,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
        /// Export only this sample index as a PPM instead.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Export the centered log-magnitude spectrum of one sample as a PPM.
    Freqview {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Input dataset (UCDS).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        /// Output PPM path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score once, then sweep removal thresholds and report BDR/ASR/accuracy.
    SweepBeta {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Comma-separated removal thresholds.
        #[arg(long, default_value = "0,0.1,0.2,0.3")]
        betas: String,
    },
}

/// Flags mirroring the RunConfig keys; each one overrides the config file.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// synthetic|ucds|cifar10
    #[arg(long)]
    dataset_source: Option<String>,
    #[arg(long)]
    dataset_path: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    test_path: Option<PathBuf>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// none|badnets|blended|trojan|sig|lcbd|htbd
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    /// checkerboard|solid|noise|ppm
    #[arg(long)]
    trigger: Option<String>,
    #[arg(long)]
    trigger_size: Option<usize>,
    #[arg(long)]
    trigger_value: Option<f64>,
    #[arg(long)]
    trigger_seed: Option<u64>,
    #[arg(long)]
    trigger_ppm: Option<PathBuf>,
    /// tl|tr|bl|br
    #[arg(long)]
    placement: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sig_delta: Option<f64>,
    #[arg(long)]
    sig_freq: Option<usize>,
    #[arg(long)]
    sig_test_delta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// linf|l2
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    transparency: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// whole|class
    #[arg(long)]
    scope: Option<String>,
    /// both|median-only|mean-only
    #[arg(long)]
    score_mode: Option<String>,
    #[arg(long)]
    nlm_patch: Option<usize>,
    #[arg(long)]
    nlm_search: Option<usize>,
    #[arg(long)]
    nlm_sigma: Option<f64>,
    #[arg(long)]
    nlm_h: Option<f64>,
    #[arg(long)]
    median_radius: Option<usize>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                cfg.apply(key, &v)?;
            }
            Ok(())
        };
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("out.dir", self.out_dir.as_ref().map(|p| p.display().to_string()))?;
        set("dataset.source", self.dataset_source.clone())?;
        set("dataset.path", self.dataset_path.as_ref().map(|p| p.display().to_string()))?;
        set("dataset.classes", self.classes.map(|v| v.to_string()))?;
        set("dataset.per_class", self.per_class.map(|v| v.to_string()))?;
        set("dataset.size", self.size.map(|v| v.to_string()))?;
        set("test.path", self.test_path.as_ref().map(|p| p.display().to_string()))?;
        set("test.per_class", self.test_per_class.map(|v| v.to_string()))?;
        set("attack.name", self.attack.clone())?;
        set("attack.target", self.target.map(|v| v.to_string()))?;
        set("attack.fraction", self.fraction.map(|v| v.to_string()))?;
        set("attack.count", self.count.map(|v| v.to_string()))?;
        set("attack.trigger", self.trigger.clone())?;
        set("attack.trigger_size", self.trigger_size.map(|v| v.to_string()))?;
        set("attack.trigger_value", self.trigger_value.map(|v| v.to_string()))?;
        set("attack.trigger_seed", self.trigger_seed.map(|v| v.to_string()))?;
        set("attack.trigger_ppm", self.trigger_ppm.as_ref().map(|p| p.display().to_string()))?;
        set("attack.placement", self.placement.clone())?;
        set("attack.alpha", self.alpha.map(|v| v.to_string()))?;
        set("attack.sig_delta", self.sig_delta.map(|v| v.to_string()))?;
        set("attack.sig_freq", self.sig_freq.map(|v| v.to_string()))?;
        set("attack.sig_test_delta", self.sig_test_delta.map(|v| v.to_string()))?;
        set("attack.epsilon", self.epsilon.map(|v| v.to_string()))?;
        set("attack.norm", self.norm.clone())?;
        set("attack.steps", self.steps.map(|v| v.to_string()))?;
        set("attack.step_size", self.step_size.map(|v| v.to_string()))?;
        set("attack.transparency", self.transparency.map(|v| v.to_string()))?;
        set("train.epochs", self.epochs.map(|v| v.to_string()))?;
        set("train.lr", self.lr.map(|v| v.to_string()))?;
        set("train.momentum", self.momentum.map(|v| v.to_string()))?;
        set("train.weight_decay", self.weight_decay.map(|v| v.to_string()))?;
        set("train.batch_size", self.batch_size.map(|v| v.to_string()))?;
        set("cleanse.beta", self.beta.map(|v| v.to_string()))?;
        set("cleanse.scope", self.scope.clone())?;
        set("cleanse.score_mode", self.score_mode.clone())?;
        set("cleanse.nlm_patch", self.nlm_patch.map(|v| v.to_string()))?;
        set("cleanse.nlm_search", self.nlm_search.map(|v| v.to_string()))?;
        set("cleanse.nlm_sigma", self.nlm_sigma.map(|v| v.to_string()))?;
        set("cleanse.nlm_h", self.nlm_h.map(|v| v.to_string()))?;
        set("cleanse.median_radius", self.median_radius.map(|v| v.to_string()))?;
        cfg.finish()?;
        Ok(cfg)
    }
}

fn main() {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Thread count caps workers only; outputs are bitwise independent.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(if e.is_usage() { 2 } else { 1 });
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Poison { flags, model } => cmd_poison(&flags.resolve()?, model),
        Command::Train { flags, data } => cmd_train(&flags.resolve()?, data),
        Command::Run { flags } => cmd_run(&flags.resolve()?),
        Command::Eval { flags, model, data } => cmd_eval(&flags.resolve()?, &model, data),
        Command::Denoise { flags, data, filter, out, index } => {
            cmd_denoise(&flags.resolve()?, &data, &filter, &out, index)
        }
        Command::Freqview { flags, data, index, out } => {
            cmd_freqview(&flags.resolve()?, &data, index, &out)
        }
        Command::SweepBeta { flags, betas } => cmd_sweep_beta(&flags.resolve()?, &betas),
    }
}

// ---------------------------------------------------------------------------
// Config -> domain objects
// ---------------------------------------------------------------------------

fn load_train_data(cfg: &RunConfig) -> Result<(LabeledDataset, Option<PoisonMask>)> {
    match cfg.dataset_source {
        DataSource::Synthetic => {
            let ds = generate_synthetic(cfg.seed_data(), cfg.per_class, cfg.classes, cfg.size)?;
            Ok((ds, None))
        }
        DataSource::Ucds => load_dataset(cfg.dataset_path.as_ref().unwrap()),
        DataSource::Cifar10 => {
            Ok((import_cifar10(cfg.dataset_path.as_ref().unwrap())?, None))
        }
    }
}

fn load_test_data(cfg: &RunConfig, train: &LabeledDataset) -> Result<LabeledDataset> {
    match &cfg.test_path {
        Some(path) => Ok(load_dataset(path)?.0),
        None => match cfg.dataset_source {
            DataSource::Synthetic => generate_synthetic(
                cfg.seed_test(),
                cfg.test_per_class,
                train.num_classes,
                cfg.size,
            ),
            _ => Err(Error::Config(
                "test.path is required for non-synthetic datasets".into(),
            )),
        },
    }
}

fn placement(kind: PlacementKind) -> Placement {
    match kind {
        PlacementKind::TopLeft => Placement::TopLeft,
        PlacementKind::TopRight => Placement::TopRight,
        PlacementKind::BottomLeft => Placement::BottomLeft,
        PlacementKind::BottomRight => Placement::BottomRight,
    }
}

fn make_trigger(cfg: &RunConfig) -> Result<TriggerSpec> {
    let place = placement(cfg.placement);
    Ok(match cfg.trigger {
        TriggerKind::Checkerboard => TriggerSpec::checkerboard(cfg.trigger_size, place),
        TriggerKind::Solid => {
            TriggerSpec::solid_square(cfg.trigger_size, cfg.trigger_value as f32, place)
        }
        TriggerKind::Noise => TriggerSpec::noise_pattern(cfg.trigger_size, cfg.trigger_seed, place),
        TriggerKind::Ppm => {
            let path = cfg.trigger_ppm.as_ref().ok_or_else(|| {
                Error::Config("attack.trigger_ppm is required for trigger=ppm".into())
            })?;
            TriggerSpec::from_ppm(path, place)?
        }
    })
}

fn attack_budget(cfg: &RunConfig, default_steps: usize, default_step: f64) -> AttackBudget {
    AttackBudget {
        epsilon: cfg.epsilon,
        norm: cfg.norm,
        steps: cfg.steps.unwrap_or(default_steps),
        step_size: cfg.step_size.unwrap_or(default_step),
    }
}

fn make_attack_spec(cfg: &RunConfig) -> Result<Option<AttackSpec>> {
    let spec = match cfg.attack {
        AttackName::None => return Ok(None),
        AttackName::BadNets => AttackSpec::BadNets { trigger: make_trigger(cfg)? },
        AttackName::Blended => {
            // Whole-image blend trigger: a seeded noise image.
            let pattern =
                TriggerSpec::noise_pattern(cfg.size, cfg.trigger_seed, Placement::TopLeft).pattern;
            AttackSpec::Blended { trigger: pattern, alpha: cfg.alpha }
        }
        AttackName::Trojan => AttackSpec::Trojan {
            trigger: make_trigger(cfg)?,
            transparency: cfg.transparency,
            steps: cfg.steps.unwrap_or(100),
            step_size: cfg.step_size.unwrap_or(0.1),
        },
        AttackName::Sig => AttackSpec::Sig(SigSpec::new(cfg.sig_delta, cfg.sig_freq)?),
        AttackName::Lcbd => AttackSpec::Lcbd {
            budget: attack_budget(cfg, 40, cfg.epsilon / 40.0 * 2.5),
            trigger: make_trigger(cfg)?,
        },
        AttackName::Htbd => AttackSpec::Htbd {
            trigger: make_trigger(cfg)?,
            budget: attack_budget(cfg, 200, 1.0),
        },
    };
    Ok(Some(spec))
}

fn needs_attacker_model(attack: AttackName) -> bool {
    matches!(attack, AttackName::Lcbd | AttackName::Trojan | AttackName::Htbd)
}

fn make_test_trigger(cfg: &RunConfig, attacker: Option<&ModelParams>) -> Result<Option<TestTrigger>> {
    let trigger = match cfg.attack {
        AttackName::None => return Ok(None),
        AttackName::BadNets | AttackName::Lcbd | AttackName::Htbd => {
            TestTrigger::Patch(make_trigger(cfg)?)
        }
        AttackName::Blended => {
            let pattern =
                TriggerSpec::noise_pattern(cfg.size, cfg.trigger_seed, Placement::TopLeft).pattern;
            TestTrigger::Blend { trigger: pattern, alpha: cfg.alpha }
        }
        AttackName::Sig => TestTrigger::Sig(SigSpec::new(cfg.sig_test_delta, cfg.sig_freq)?),
        AttackName::Trojan => {
            let attacker = attacker
                .ok_or_else(|| Error::Usage("trojan ASR needs the attacker model".into()))?;
            TestTrigger::Trojan {
                spec: make_trigger(cfg)?,
                transparency: cfg.transparency,
                steps: cfg.steps.unwrap_or(100),
                step_size: cfg.step_size.unwrap_or(0.1),
                attacker: Box::new(attacker.clone()),
            }
        }
    };
    Ok(Some(trigger))
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        rng_seed: cfg.seed_shuffle(),
    }
}

fn cleanse_config(cfg: &RunConfig) -> Result<CleanseConfig> {
    Ok(CleanseConfig {
        beta: cfg.beta,
        scope: cfg.scope,
        nlm: NlmParams::new(cfg.nlm_patch, cfg.nlm_search, cfg.nlm_sigma, cfg.nlm_h)?,
        median: MedianParams::new(cfg.median_radius)?,
        score_mode: cfg.score_mode,
    })
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("out.dir (--out-dir) is required".into()))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Poisons the configured dataset, training an attacker model on the clean
/// data when the attack needs one and no checkpoint was supplied.
fn poison_dataset(
    cfg: &RunConfig,
    clean: &LabeledDataset,
    attacker: Option<ModelParams>,
) -> Result<(LabeledDataset, PoisonMask, Option<ModelParams>)> {
    let spec = make_attack_spec(cfg)?
        .ok_or_else(|| Error::Config("attack.name must not be none here".into()))?;
    let attacker = if needs_attacker_model(cfg.attack) {
        Some(match attacker {
            Some(m) => m,
            None => {
                let shape = clean.sample_shape().unwrap();
                let fresh = model::init(shape, clean.num_classes, cfg.seed_attacker())?;
                let (trained, _) = model::train(&fresh, clean, &train_config(cfg))?;
                trained
            }
        })
    } else {
        None
    };
    let plan = PoisonPlan {
        attack: spec,
        target_class: cfg.target,
        amount: match cfg.count {
            Some(k) => PoisonAmount::Count(k),
            None => PoisonAmount::Fraction(cfg.fraction),
        },
        rng_seed: cfg.seed_poison(),
    };
    let (poisoned, mask) = build_poisoned_dataset(clean, &plan, attacker.as_ref())?;
    Ok((poisoned, mask, attacker))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_poison(cfg: &RunConfig, model_path: Option<PathBuf>) -> Result<()> {
    if cfg.attack == AttackName::None {
        return Err(Error::Config("poison requires attack.name != none".into()));
    }
    if needs_attacker_model(cfg.attack) && model_path.is_none() {
        return Err(Error::Usage(format!(
            "--model is required for the {} attack",
            cfg.attack
        )));
    }
    let dir = out_dir(cfg)?;
    let (clean, _) = load_train_data(cfg)?;
    let attacker = model_path.map(load_params).transpose()?;
    let (poisoned, mask, _) = poison_dataset(cfg, &clean, attacker)?;
    let path = dir.join("poisoned.ucds");
    save_dataset(&poisoned, Some(&mask), &path)?;
    println!(
        "poisoned {} samples (attack {}, target class {}) -> {}",
        mask.flagged_count(),
        mask.attack_name,
        mask.target_class,
        path.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: Option<PathBuf>) -> Result<()> {
    let dir = out_dir(cfg)?;
    let ds = match data {
        Some(path) => load_dataset(path)?.0,
        None => load_train_data(cfg)?.0,
    };
    let shape = ds
        .sample_shape()
        .ok_or_else(|| Error::Usage("cannot train on an empty dataset".into()))?;
    let fresh = model::init(shape, ds.num_classes, cfg.seed_model())?;
    let (trained, stats) = model::train(&fresh, &ds, &train_config(cfg))?;
    let path = dir.join("model.ucmp");
    save_params(&trained, &path)?;
    println!(
        "trained {} epochs on {} samples; final train accuracy {:.6} -> {}",
        cfg.epochs,
        ds.len(),
        stats.final_train_accuracy,
        path.display()
    );
    Ok(())
}

fn cmd_run(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let (base, base_mask) = load_train_data(cfg)?;
    let (train_ds, mask, attacker) = if cfg.attack == AttackName::None {
        (base, base_mask, None)
    } else {
        let (poisoned, mask, attacker) = poison_dataset(cfg, &base, None)?;
        (poisoned, Some(mask), attacker)
    };
    let test_ds = load_test_data(cfg, &train_ds)?;
    let test_trigger = make_test_trigger(cfg, attacker.as_ref())?;
    let attack_ctx = test_trigger
        .map(|t| AttackContext { test_trigger: t, target_class: cfg.target });

    let mut result = run_ultraclean(
        &train_ds,
        mask.as_ref(),
        &test_ds,
        attack_ctx.as_ref(),
        &train_config(cfg),
        &cleanse_config(cfg)?,
        cfg.seed_model(),
    )?;

    let csv_path = dir.join("scores.csv");
    write_score_csv(&result.records, &train_ds, mask.as_ref(), &csv_path)?;
    result.report.score_table = Some("scores.csv".to_string());
    result.report.write_to(dir.join("report.txt"))?;
    save_dataset(&result.sanitized, result.sanitized_mask.as_ref(), dir.join("sanitized.ucds"))?;
    save_params(&result.pre_model, dir.join("model_preclean.ucmp"))?;
    save_params(&result.post_model, dir.join("model_postclean.ucmp"))?;

    print!("{}", result.report.to_key_values());
    println!("artifacts -> {}", dir.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, model_path: &PathBuf, data: Option<PathBuf>) -> Result<()> {
    let params = load_params(model_path)?;
    let ds = match data {
        Some(path) => load_dataset(path)?.0,
        None => {
            let (train_ds, _) = load_train_data(cfg)?;
            load_test_data(cfg, &train_ds)?
        }
    };
    let accuracy = evaluate(&params, &ds)?;
    println!("accuracy={accuracy:.6}");
    // For trojan, the evaluated checkpoint doubles as the attacker model.
    if let Some(trigger) = make_test_trigger(cfg, Some(&params))? {
        let asr = compute_asr(&params, &ds, &trigger, cfg.target)?;
        println!("asr={asr:.6}");
    }
    Ok(())
}

fn cmd_denoise(
    cfg: &RunConfig,
    data: &PathBuf,
    filter: &str,
    out: &PathBuf,
    index: Option<usize>,
) -> Result<()> {
    let (ds, mask) = load_dataset(data)?;
    let nlm = NlmParams::new(cfg.nlm_patch, cfg.nlm_search, cfg.nlm_sigma, cfg.nlm_h)?;
    let median = MedianParams::new(cfg.median_radius)?;
    let apply = |img: &ultraclean::dataio::Image| -> Result<ultraclean::dataio::Image> {
        match filter {
            "nlm" => Ok(nlm_denoise(img, &nlm)),
            "median" => Ok(median_denoise(img, &median)),
            other => Err(Error::Config(format!("unknown filter {other:?}, expected nlm|median"))),
        }
    };
    if let Some(i) = index {
        if i >= ds.len() {
            return Err(Error::Config(format!("index {i} outside dataset of {}", ds.len())));
        }
        let denoised = apply(&ds.images[i])?;
        export_ppm(&denoised, out)?;
        println!("denoised sample {i} ({filter}) -> {}", out.display());
        return Ok(());
    }
    use rayon::prelude::*;
    let images = ds
        .images
        .par_iter()
        .map(|img| apply(img))
        .collect::<Result<Vec<_>>>()?;
    let denoised = LabeledDataset::new(images, ds.labels.clone(), ds.num_classes)?;
    save_dataset(&denoised, mask.as_ref(), out)?;
    println!("denoised {} samples ({filter}) -> {}", denoised.len(), out.display());
    Ok(())
}

fn cmd_freqview(_cfg: &RunConfig, data: &PathBuf, index: usize, out: &PathBuf) -> Result<()> {
    let (ds, _) = load_dataset(data)?;
    if index >= ds.len() {
        return Err(Error::Config(format!("index {index} outside dataset of {}", ds.len())));
    }
    let view = dft_log_magnitude(&ds.images[index]);
    export_ppm(&view, out)?;
    println!("frequency view of sample {index} -> {}", out.display());
    Ok(())
}

fn cmd_sweep_beta(cfg: &RunConfig, betas: &str) -> Result<()> {
    let dir = out_dir(cfg)?;
    let betas: Vec<f64> = betas
        .split(',')
        .map(|s| {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid beta {s:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("beta {v} outside [0,1]")));
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;

    let (base, base_mask) = load_train_data(cfg)?;
    let (train_ds, mask, attacker) = if cfg.attack == AttackName::None {
        (base, base_mask, None)
    } else {
        let (poisoned, mask, attacker) = poison_dataset(cfg, &base, None)?;
        (poisoned, Some(mask), attacker)
    };
    let test_ds = load_test_data(cfg, &train_ds)?;
    let test_trigger = make_test_trigger(cfg, attacker.as_ref())?;

    // Pre-clean training and scoring happen once; each beta re-ranks.
    let shape = train_ds.sample_shape().unwrap();
    let tcfg = train_config(cfg);
    let fresh = model::init(shape, train_ds.num_classes, cfg.seed_model())?;
    let (pre_model, _) = model::train(&fresh, &train_ds, &tcfg)?;
    let mut ccfg = cleanse_config(cfg)?;
    let records = score_dataset(&train_ds, &pre_model, &ccfg)?;

    let mut csv = String::from("beta,bdr,asr,acc\n");
    for &beta in &betas {
        ccfg.beta = beta;
        let (sanitized, _, removed) = remove_top(&train_ds, mask.as_ref(), &records, &ccfg)?;
        let bdr = match &mask {
            Some(m) if m.flagged_count() > 0 => {
                Some(ultraclean::cleanse::compute_bdr(&removed, m)?)
            }
            _ => None,
        };
        let fresh = model::init(shape, train_ds.num_classes, cfg.seed_model())?;
        let (post_model, _) = model::train(&fresh, &sanitized, &tcfg)?;
        let acc = evaluate(&post_model, &test_ds)?;
        let asr = match &test_trigger {
            Some(t) => Some(compute_asr(&post_model, &test_ds, t, cfg.target)?),
            None => None,
        };
        let bdr_s = bdr.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
        let asr_s = asr.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
        println!("beta={beta:.2} bdr={bdr_s} asr={asr_s} acc={acc:.6}");
        csv.push_str(&format!("{beta},{bdr_s},{asr_s},{acc:.6}\n"));
    }
    let path = dir.join("sweep.csv");
    std::fs::write(&path, csv)?;
    println!("sweep -> {}", path.display());
    Ok(())
}
