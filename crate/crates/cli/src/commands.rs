use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use triflow::config::RunConfig;
use triflow::flowio::{colorize_flow, read_flo, read_frame, write_flo, write_png, write_ppm};
use triflow::infer::predict_windowed;
use triflow::selftest::{gradient_suite, oracle_suite, CheckOutcome};
use triflow::synthdata::{read_dataset, write_dataset, SyntheticSequence};
use triflow::trainer::{ablate, evaluate, Checkpoint, Trainer};

use crate::{Command, ConfigArgs, Failure, ImageFormat};

type Result<T> = std::result::Result<T, Failure>;

pub(crate) fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { cfg, out, held_out } => gen_data(&cfg, &out, held_out),
        Command::Train { cfg, out, data } => train(&cfg, &out, data.as_deref()),
        Command::Eval { cfg, ckpt, data, iters, reversed, json } => {
            eval(&cfg, &ckpt, data.as_deref(), iters, reversed, json)
        }
        Command::Infer { ckpt, frames, out, iters } => infer(&ckpt, &frames, &out, iters),
        Command::Viz { inputs, out, format, max } => viz(&inputs, &out, format, max),
        Command::Ablate { cfg, out } => ablation(&cfg, out.as_deref()),
        Command::Selftest { seeds } => selftest(seeds),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure(format!("{}: {e}", path.display()))
}

fn effective(args: &ConfigArgs) -> Result<RunConfig> {
    let cfg = args.resolve()?;
    eprint!("{}", cfg.to_text(&[]));
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn gen_data(args: &ConfigArgs, out: &Path, held_out: bool) -> Result<()> {
    let cfg = effective(args)?;
    let d = &cfg.data;
    let (count, seed) = if held_out { (d.eval_count, d.held_out_seed()) } else { (d.count, d.seed) };
    write_dataset(out, &d.scenes, count, seed)?;
    println!("wrote {count} sequences to {}", out.display());
    Ok(())
}

fn training_data(cfg: &RunConfig, dir: Option<&Path>) -> Result<Vec<SyntheticSequence>> {
    Ok(match dir {
        Some(dir) => read_dataset(dir)?,
        None => cfg.data.train_set()?,
    })
}

fn train(args: &ConfigArgs, out: &Path, data: Option<&Path>) -> Result<()> {
    let cfg = effective(args)?;
    let seqs = training_data(&cfg, data)?;
    create_dir(out)?;
    let config_path = out.join("config.txt");
    fs::write(&config_path, cfg.to_text(&[])).map_err(|e| io_err(&config_path, e))?;
    let log_path = out.join("train.log");
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut write_err = None;
    let mut trainer = Trainer::new(cfg.train.clone())?;
    trainer.run(&seqs, |s| {
        let line = s.line();
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&log_path, e));
    }
    let ckpt_path = out.join("checkpoint.bin");
    trainer.checkpoint().save(&ckpt_path)?;
    println!("checkpoint={}", ckpt_path.display());
    Ok(())
}

fn eval(
    args: &ConfigArgs,
    ckpt: &Path,
    data: Option<&Path>,
    iters: Option<usize>,
    reversed: bool,
    json: bool,
) -> Result<()> {
    let cfg = effective(args)?;
    let ckpt = Checkpoint::load(ckpt)?;
    let net = ckpt.model()?;
    let seqs = match data {
        Some(dir) => read_dataset(dir)?,
        None => cfg.data.held_out_set()?,
    };
    let iters = iters.unwrap_or(ckpt.config.iters);
    let report = evaluate(&net, &seqs, iters, reversed)?;
    if json {
        println!("{}", report.to_json());
    } else {
        println!("{}", report.to_key_value());
    }
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn infer(ckpt: &Path, frames_dir: &Path, out: &Path, iters: Option<usize>) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let net = ckpt.model()?;
    let paths = png_files(frames_dir)?;
    if paths.len() < 3 {
        return Err(Failure(format!("{}: need at least 3 PNG frames, found {}", frames_dir.display(), paths.len())));
    }
    let frames = paths.iter().map(read_frame).collect::<triflow::Result<Vec<_>>>()?;
    let units = ckpt.config.clip_frames - 2;
    let flows = predict_windowed(&net, &frames, units, iters.unwrap_or(ckpt.config.iters))?;
    create_dir(out)?;
    for cf in flows {
        let name = stem(&paths[cf.frame]);
        let fwd = out.join(format!("{name}_fwd.flo"));
        let bwd = out.join(format!("{name}_bwd.flo"));
        write_flo(&fwd, &cf.next)?;
        write_flo(&bwd, &cf.prev)?;
        println!("frame={name} fwd={} bwd={}", fwd.display(), bwd.display());
    }
    Ok(())
}

fn flow_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| io_err(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "flo"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    Ok(files)
}

fn viz(inputs: &[PathBuf], out: &Path, format: ImageFormat, max: Option<f32>) -> Result<()> {
    if let Some(m) = max {
        if !(m.is_finite() && m > 0.0) {
            return Err(Failure(format!("--max: expected a positive magnitude, got `{m}`")));
        }
    }
    let files = flow_files(inputs)?;
    create_dir(out)?;
    for file in files {
        let img = colorize_flow(&read_flo(&file)?, max)?;
        let target = match format {
            ImageFormat::Png => out.join(format!("{}.png", stem(&file))),
            ImageFormat::Ppm => out.join(format!("{}.ppm", stem(&file))),
        };
        match format {
            ImageFormat::Png => write_png(&target, &img)?,
            ImageFormat::Ppm => write_ppm(&target, &img)?,
        }
        println!("{}", target.display());
    }
    Ok(())
}

fn ablation(args: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let cfg = effective(args)?;
    let train_set = cfg.data.train_set()?;
    let held_out = cfg.data.held_out_set()?;
    let table = ablate(&cfg.train, &train_set, &held_out, |name, s| println!("variant={name} {}", s.line()))?;
    let text = table.render();
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, &text).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn report(group: &str, outcomes: &[CheckOutcome]) -> usize {
    for o in outcomes {
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {group}/{} checked={} failures={} max_err={:.3e}", o.name, o.checked, o.failures, o.max_err);
    }
    outcomes.iter().filter(|o| !o.passed).count()
}

fn selftest(seeds: u64) -> Result<()> {
    if seeds == 0 {
        return Err(Failure("--seeds: must be at least 1".into()));
    }
    let start = Instant::now();
    let seeds: Vec<u64> = (1..=seeds).collect();
    let gradients = gradient_suite(&seeds)?;
    let oracles = oracle_suite()?;
    let failed = report("gradient", &gradients) + report("oracle", &oracles);
    let total = gradients.len() + oracles.len();
    println!("{} of {total} checks passed in {:.1}s", total - failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure(format!("{failed} of {total} self-test checks failed")));
    }
    Ok(())
}
