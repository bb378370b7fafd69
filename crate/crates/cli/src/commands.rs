use std::fmt::Write as _;
use std::path::Path;

use vik_core::complexity::{
    count_mixer_flops, count_model_flops, instrumented_mixer_flops, instrumented_model_flops, linearity_probe, parse_resolutions,
    probe_mixer,
};
use vik_core::grad::{check_backbone, BackboneCheck, GradCheckOptions, GradScope, LAYER_SCOPES};
use vik_core::mixer::MixerConfig;
use vik_core::training::train::{predict, thread_pool, threads_from_env};
use vik_core::training::{load_checkpoint, train_loop, DataSource, LoadOptions, Split, TrainOptions};
use vik_core::{BackboneConfig, Error};

use crate::{Context, EvalArgs, Failure, FlopsArgs, GradcheckArgs, SplitArg, TrainArgs};

pub fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e)).during("cli")
}

pub fn train(a: &TrainArgs) -> Result<u8, Failure> {
    let mut cfg = BackboneConfig::load(&a.config).during("backbone")?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let source = DataSource::parse(&a.data, cfg.seed, a.per_class).during("cli")?;
    let train = source.load(Split::Train, cfg.num_classes, cfg.resolution[0]).during("data")?;
    let val = source.load(Split::Val, cfg.num_classes, cfg.resolution[0]).during("data")?;
    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: cfg.seed,
        augment: source.augments(),
        threads: threads_from_env(),
        out_dir: Some(a.out.clone()),
        ..TrainOptions::default()
    };
    let out = train_loop(&cfg, &train, Some(&val), &opts).during("training")?;
    let last = out.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs ({} steps): train_loss {:.6}, train_acc {:.6}, val_acc {:.6}",
        last.epoch,
        last.step,
        last.train_loss,
        last.train_acc,
        last.val_acc.unwrap_or(f64::NAN)
    );
    println!("wrote {}", a.out.join("metrics.csv").display());
    Ok(0)
}

pub fn eval(a: &EvalArgs) -> Result<u8, Failure> {
    let expected = a.config.as_ref().map(BackboneConfig::load).transpose().during("backbone")?;
    let opts = LoadOptions { expected, allow_mismatch: a.allow_config_mismatch };
    let ck = load_checkpoint(&a.checkpoint, &opts).during("checkpoint")?;
    let cfg = ck.config();
    let seed = a.seed.unwrap_or(cfg.seed);
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let source = DataSource::parse(&a.data, seed, a.per_class).during("cli")?;
    let data = source.load(split, cfg.num_classes, cfg.resolution[0]).during("data")?;
    let pool = thread_pool(threads_from_env()).during("training")?;
    let pred = predict(&ck.model, &data, &pool).during("training")?;
    let correct = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    println!("split,items,correct,top1");
    println!("{split},{},{correct},{:.6}", data.len(), correct as f64 / data.len() as f64);
    Ok(0)
}

fn parse_scope(words: &[String]) -> Result<GradScope, Failure> {
    let usage = || {
        let kinds: Vec<&str> = LAYER_SCOPES.iter().map(|(k, _)| *k).collect();
        Error::Usage(format!("--scope takes 'all' or 'layer NAME' (NAME one of {})", kinds.join(", ")))
    };
    match words {
        [w] if w == "all" => Ok(GradScope::All),
        [w, name] if w == "layer" => Ok(GradScope::Layer(name.clone())),
        _ => Err(usage()).during("cli"),
    }
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<u8, Failure> {
    let cfg = BackboneConfig::load(&a.config).during("backbone")?;
    let scope = parse_scope(&a.scope)?;
    let opts = GradCheckOptions { eps_scale: a.eps, ..GradCheckOptions::default() };
    let check = BackboneCheck {
        scope,
        seed: a.seed,
        inject_fault: a.inject_fault.clone(),
        ..BackboneCheck::default()
    };
    let report = check_backbone(&cfg, &check, &opts).during("grad")?;
    println!("{report}");
    if report.passed() {
        return Ok(0);
    }
    let bad: Vec<&str> = report.failures().map(|g| g.name.as_str()).collect();
    eprintln!("vik: grad: {} group(s) above threshold: {}", bad.len(), bad.join(", "));
    Ok(1)
}

fn instrumented_csv(cfg: &BackboneConfig, probe: &MixerConfig, sides: &[usize]) -> Result<String, Failure> {
    let mut s = String::from("subject,analytic,instrumented,equal\n");
    for &side in sides {
        let m = MixerConfig { height: side, width: side, ..*probe };
        let analytic = count_mixer_flops(&m).total();
        let counted = instrumented_mixer_flops(&m, cfg.seed).during("complexity")?;
        let _ = writeln!(s, "mixer@{side}x{side},{analytic},{counted},{}", analytic == counted);
    }
    let analytic = count_model_flops(cfg).during("complexity")?.total();
    let counted = instrumented_model_flops(cfg).during("complexity")?;
    let [h, w] = cfg.resolution;
    let _ = writeln!(s, "model@{h}x{w},{analytic},{counted},{}", analytic == counted);
    Ok(s)
}

pub fn flops(a: &FlopsArgs) -> Result<u8, Failure> {
    let cfg = BackboneConfig::load(&a.config).during("backbone")?;
    let sides = parse_resolutions(&a.resolutions).during("complexity")?;
    let report = count_model_flops(&cfg).during("complexity")?;
    let probe = probe_mixer(&cfg);
    let table = linearity_probe(&probe, &sides).during("complexity")?;
    let [h, w] = cfg.resolution;
    println!("{report}");
    println!();
    println!("# {} at {h}x{w}", cfg.name);
    let flops_csv = report.to_csv();
    print!("{flops_csv}");
    println!();
    println!(
        "# stage-1 mixer ({} channels, patch {}) on square token grids; exactly linear: {}",
        probe.channels,
        probe.patch,
        table.is_exactly_linear()
    );
    let lin_csv = table.to_csv(a.attention_reference);
    print!("{lin_csv}");
    let inst_csv = if a.instrumented {
        let s = instrumented_csv(&cfg, &probe, &sides)?;
        println!();
        print!("{s}");
        Some(s)
    } else {
        None
    };
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).during("cli")?;
        write_file(&dir.join("flops.csv"), &flops_csv)?;
        write_file(&dir.join("linearity.csv"), &lin_csv)?;
        if let Some(s) = inst_csv {
            write_file(&dir.join("instrumented.csv"), &s)?;
        }
    }
    Ok(0)
}
