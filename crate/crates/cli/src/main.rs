//! `avcc`: dataset generation, training, evaluation, dataset corruption,
//! single-sample inference and the gradient-check suite.
//!
//! Every configuration key is also a flag (`--base-channels 8`,
//! `--cc-v`); flags win over `--config FILE`, which wins over the
//! defaults. `AVCC_SEED` sits between the file and the flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use avcc_core::audio::{compute_lms, Waveform};
use avcc_core::ccm::DensityMap;
use avcc_core::groundtruth::Degradation;
use avcc_core::harness::config::SEED_ENV;
use avcc_core::harness::data::{fit_image, read_ppm};
use avcc_core::harness::gradcheck::{run_suite, toy_check_config};
use avcc_core::harness::{
    corrupt_dataset, evaluate, gen_dataset, load_model, occlusion_sweep, predict, train, Checkpoint, Config,
    Dataset, SynthConfig,
};
use avcc_core::model::Flags;
use avcc_core::nn::ParamKind;
use avcc_core::{Error, Result};

const DEFAULT_SWEEP: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// One flag per configuration key; boolean switches take an optional value.
fn config_args(cmd: Command) -> Command {
    let switches = Flags::default();
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("key=value configuration file"),
    );
    Config::KEYS.iter().fold(cmd, |cmd, &key| {
        let arg = Arg::new(key).long(flag_name(key)).value_name("VALUE");
        let arg = if switches.get(key).is_some() {
            arg.num_args(0..=1).default_missing_value("true").value_name("BOOL")
        } else {
            arg
        };
        cmd.arg(arg.help_heading("Configuration"))
    })
}

fn resolve(m: &ArgMatches, base: Config) -> Result<Config> {
    let overrides: Vec<(String, String)> = Config::KEYS
        .iter()
        .filter_map(|&k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    let env = std::env::var(SEED_ENV).ok();
    base.resolve_onto(m.get_one::<PathBuf>("config").map(PathBuf::as_path), env.as_deref(), &overrides)
}

fn cli() -> Command {
    let path = |name: &'static str, help: &'static str| {
        Arg::new(name)
            .long(name)
            .value_name("PATH")
            .value_parser(value_parser!(PathBuf))
            .help(help)
    };
    let seed = Arg::new("seed").long("seed").value_name("N").value_parser(value_parser!(u64));
    Command::new("avcc")
        .about("Audio-visual crowd counting")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("gen-data")
                .about("Render a synthetic dataset")
                .arg(path("out", "output directory").required(true))
                .arg(Arg::new("n").long("n").value_name("N").required(true).value_parser(value_parser!(usize)))
                .arg(Arg::new("count-min").long("count-min").default_value("5").value_parser(value_parser!(usize)))
                .arg(Arg::new("count-max").long("count-max").default_value("50").value_parser(value_parser!(usize)))
                .arg(Arg::new("width").long("width").default_value("64").value_parser(value_parser!(usize)))
                .arg(Arg::new("height").long("height").default_value("36").value_parser(value_parser!(usize)))
                .arg(seed.clone().help("generation seed (default AVCC_SEED, then 0)")),
        )
        .subcommand(config_args(Command::new("train").about("Train a model; writes metrics.log and checkpoint.avcc")))
        .subcommand(config_args(
            Command::new("eval")
                .about("Evaluate a checkpoint on a dataset")
                .arg(path("checkpoint", "checkpoint file").required(true))
                .arg(Arg::new("degrade").long("degrade").value_name("SPEC").help("noise:S, illum:R:B, occlude:OR or lowres:WxH"))
                .arg(
                    Arg::new("or-sweep")
                        .long("or-sweep")
                        .value_name("RATES")
                        .num_args(0..=1)
                        .default_missing_value("")
                        .conflicts_with("degrade")
                        .help("occlusion sweep over comma-separated rates (default 0,0.25,0.5,0.75,1)"),
                )
                .arg(path("report", "also write the report to this file")),
        ))
        .subcommand(
            Command::new("corrupt")
                .about("Write a degraded copy of a dataset")
                .arg(path("data", "dataset directory").required(true))
                .arg(Arg::new("degrade").long("degrade").value_name("SPEC").required(true))
                .arg(path("out", "output directory (default: a sibling of --data named after the spec)"))
                .arg(seed.clone().help("degradation seed (default AVCC_SEED, then 0)")),
        )
        .subcommand(config_args(
            Command::new("infer")
                .about("Count one image; writes density.pgm, density.dmp, pir.txt and pce.txt")
                .arg(path("checkpoint", "checkpoint file").required(true))
                .arg(path("image", "P6 image").required(true))
                .arg(path("audio", "16 kHz WAV clip (audio-visual models)"))
                .arg(path("dump", "directory for the outputs (default: current directory)"))
                .arg(
                    Arg::new("zero-head")
                        .long("zero-head")
                        .action(ArgAction::SetTrue)
                        .help("zero every parameter of the visual head before running"),
                ),
        ))
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference gradient check of the ops and the toy model")
                .arg(seed.help("check seed (default AVCC_SEED, then 0)")),
        )
}

fn seed_arg(m: &ArgMatches) -> Result<u64> {
    if let Some(&s) = m.get_one::<u64>("seed") {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn data_dir(cfg: &Config) -> Result<&Path> {
    cfg.data.as_deref().ok_or_else(|| Error::Usage("a dataset is required (--data DIR)".into()))
}

fn load_data(cfg: &Config) -> Result<Dataset> {
    let m = cfg.model();
    let (w, h) = m.geometry.size();
    Dataset::load(data_dir(cfg)?, w, h, &m.grid(), m.uses_audio())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_gen_data(m: &ArgMatches) -> Result<()> {
    let cfg = SynthConfig {
        n: m.get_one::<usize>("n").copied().unwrap_or(0),
        count_min: m.get_one::<usize>("count-min").copied().unwrap_or(5),
        count_max: m.get_one::<usize>("count-max").copied().unwrap_or(50),
        width: m.get_one::<usize>("width").copied().unwrap_or(64),
        height: m.get_one::<usize>("height").copied().unwrap_or(36),
        seed: seed_arg(m)?,
    };
    let out = m.get_one::<PathBuf>("out").expect("required");
    gen_dataset(&cfg, out)?;
    println!("wrote {} scenes to {}", cfg.n, out.display());
    Ok(())
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m, Config::default())?;
    let out = train(&cfg)?;
    print!("{}", out.header);
    for e in &out.metrics {
        println!("{}", e.log_line());
    }
    println!("# checkpoint {}", out.checkpoint.display());
    Ok(())
}

/// The stored training config, overlaid with the file, environment and
/// flags; architecture overrides must still match the stored weights.
fn checkpoint_config(m: &ArgMatches) -> Result<(Checkpoint, Config)> {
    let ck = Checkpoint::load(m.get_one::<PathBuf>("checkpoint").expect("required"))?;
    let stored = Config::from_text(&ck.config)?;
    let cfg = resolve(m, stored)?;
    Ok((ck, cfg))
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let (ck, cfg) = checkpoint_config(m)?;
    let (_, model, store) = load_model(&ck, Some(&cfg))?;
    let data = load_data(&cfg)?;
    let text = if let Some(rates) = m.get_one::<String>("or-sweep") {
        let rates: Vec<f64> = if rates.trim().is_empty() {
            DEFAULT_SWEEP.to_vec()
        } else {
            rates
                .split(',')
                .map(|r| r.trim().parse().map_err(|_| Error::Usage(format!("bad occlusion rate {r:?}"))))
                .collect::<Result<_>>()?
        };
        let reports = occlusion_sweep(&model, &store, &data, &rates, cfg.seed, cfg.threads)?;
        let mut s = format!("# occlusion sweep samples={}\n# or mae rmse\n", data.len());
        for (rate, r) in rates.iter().zip(&reports) {
            s += &format!("{rate} {:.6} {:.6}\n", r.mae, r.rmse);
        }
        s
    } else {
        let spec = m.get_one::<String>("degrade").map(|s| s.parse::<Degradation>()).transpose()?;
        evaluate(&model, &store, &data, spec.as_ref(), cfg.seed, cfg.threads)?.to_text()
    };
    print!("{text}");
    if let Some(path) = m.get_one::<PathBuf>("report") {
        write(path, &text)?;
    }
    Ok(())
}

fn sibling(data: &Path, spec: &Degradation) -> PathBuf {
    let tag: String = spec
        .to_string()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect();
    let name = data.file_name().map_or_else(|| "data".into(), |n| n.to_string_lossy().into_owned());
    data.with_file_name(format!("{name}_{tag}"))
}

fn cmd_corrupt(m: &ArgMatches) -> Result<()> {
    let data = m.get_one::<PathBuf>("data").expect("required");
    let spec: Degradation = m.get_one::<String>("degrade").expect("required").parse()?;
    let out = m.get_one::<PathBuf>("out").cloned().unwrap_or_else(|| sibling(data, &spec));
    let n = corrupt_dataset(data, &out, &spec, seed_arg(m)?)?;
    println!("wrote {n} samples ({spec}) to {}", out.display());
    Ok(())
}

fn dump_vector(path: &Path, values: &[f64]) -> Result<()> {
    let text: String = values.iter().map(|v| format!("{v:.9}\n")).collect();
    write(path, &text)
}

fn cmd_infer(m: &ArgMatches) -> Result<()> {
    let (ck, cfg) = checkpoint_config(m)?;
    let (_, model, mut store) = load_model(&ck, Some(&cfg))?;
    if m.get_flag("zero-head") {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let e = store.entry(id);
            if e.kind == ParamKind::Param && e.name.starts_with("vfe.head") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
    }
    let (w, h) = cfg.model().geometry.size();
    let image = fit_image(&read_ppm(m.get_one::<PathBuf>("image").expect("required"))?, w, h)?.0;
    let lms = match (cfg.model().uses_audio(), m.get_one::<PathBuf>("audio")) {
        (true, Some(p)) => Some(compute_lms(&Waveform::read_wav(p)?)?),
        (true, None) => return Err(Error::Usage("this model needs --audio".into())),
        (false, _) => None,
    };
    let lms_refs = lms.as_ref().map(|l| vec![l]);
    let p = predict(&model, &store, &[&image], lms_refs.as_deref())?.remove(0);
    let dir = m.get_one::<PathBuf>("dump").cloned().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let map = DensityMap::from_tensor(&p.density)?;
    map.write_pgm(&dir.join("density.pgm"))?;
    map.write_dmp(&dir.join("density.dmp"))?;
    if let Some(pir) = &p.pir {
        dump_vector(&dir.join("pir.txt"), pir)?;
    }
    if let Some(pce) = &p.pce {
        dump_vector(&dir.join("pce.txt"), pce)?;
    }
    println!("count {:.6}", p.count);
    Ok(())
}

fn cmd_gradcheck(m: &ArgMatches) -> Result<bool> {
    let checks = run_suite(&toy_check_config(), seed_arg(m)?)?;
    println!("# module checked max_rel_err");
    for c in &checks {
        println!(
            "{} {} {:.3e} {}",
            c.module,
            c.checked,
            c.max_rel_err,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    Ok(checks.iter().all(|c| c.passed()))
}

fn run(m: &ArgMatches) -> Result<bool> {
    match m.subcommand() {
        Some(("gen-data", s)) => cmd_gen_data(s).map(|()| true),
        Some(("train", s)) => cmd_train(s).map(|()| true),
        Some(("eval", s)) => cmd_eval(s).map(|()| true),
        Some(("corrupt", s)) => cmd_corrupt(s).map(|()| true),
        Some(("infer", s)) => cmd_infer(s).map(|()| true),
        Some(("gradcheck", s)) => cmd_gradcheck(s),
        _ => unreachable!("subcommand required"),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
