use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rand::RngCore;
use rayon::prelude::*;

use nvtwin::config::Config;
use nvtwin::controller::{reorient_until, run_campaign, scan_array, FabricationPlan};
use nvtwin::emission::{
    analyzer_angles, classify_with, fit_pattern, pattern, EmissionConfig, EmissionModel, PolarizationPattern,
};
use nvtwin::geometry::{class_by_id, lab_vector, NvAxis, SurfaceCut};
use nvtwin::hal::{execute_script, replay, Bench, MockBench, Recorder};
use nvtwin::nalgebra::Vector3;
use nvtwin::photonics::{
    background_correct, fit_g2, histogram_coincidences, sample_counts, simulate_photon_stream_with,
    synthesize_confocal_image, CorrelationMode, Emitter, HbtHistogram, Region,
};
use nvtwin::rng::{rng_for, Stream};

use crate::output::write_atomic;
use crate::{exit, Command, Common, ModelArg};

/// An error paired with the exit status it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

type Outcome = Result<u8, Failure>;

fn fail(code: u8, error: impl Into<anyhow::Error>) -> Failure {
    Failure { code, error: error.into() }
}

fn input(error: impl Into<anyhow::Error>) -> Failure {
    fail(exit::INPUT, error)
}

/// Exit status for a library error.
fn code_of(e: &nvtwin::Error) -> u8 {
    match e {
        nvtwin::Error::Bench(_) => exit::COMMAND,
        _ => exit::INPUT,
    }
}

fn lib(e: nvtwin::Error) -> Failure {
    let code = code_of(&e);
    fail(code, e)
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(input)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    write_atomic(path, bytes).map_err(|e| fail(exit::COMMAND, e))
}

fn load_config(common: &Common) -> Result<Config, Failure> {
    let text = match &common.config {
        Some(p) => read(p)?,
        None => String::new(),
    };
    let cfg = Config::from_toml(&text, &common.overrides).map_err(input)?;
    Ok(cfg)
}

fn require_seed(common: &Common, cfg: &Config) -> Result<u64, Failure> {
    common
        .seed
        .or(cfg.seed)
        .or(cfg.plan.as_ref().map(|p| p.seed))
        .ok_or_else(|| input(anyhow!("a seed is required: pass --seed or set `seed` in the config")))
}

fn surface(s: &str) -> Result<SurfaceCut, Failure> {
    s.parse().map_err(lib)
}

fn emission(model: ModelArg) -> EmissionConfig {
    match model {
        ModelArg::Projection => EmissionConfig::default(),
        ModelArg::HighNa => EmissionConfig { model: EmissionModel::HighNaNumeric, ..EmissionConfig::default() },
    }
}

fn parse_floats(s: &str, n: usize, what: &str) -> Result<Vec<f64>, Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| input(anyhow!("{what} '{s}' is not a comma-separated list of numbers")))?;
    if v.len() != n || v.iter().any(|x| !x.is_finite()) {
        return Err(input(anyhow!("{what} '{s}' needs {n} finite numbers")));
    }
    Ok(v)
}

pub fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Campaign { common, out, strict, pixel } => campaign(&common, &out, strict, pixel),
        Command::Pattern { surface: s, axis, class, angles, model, budget, seed, out } => {
            cmd_pattern(&s, axis.as_deref(), class, angles, model, budget, seed, out.as_deref())
        }
        Command::Classify { surface: s, input: path, offset, model, min_margin } => {
            classify(&s, &path, offset, model, min_margin)
        }
        Command::G2 { common, input: path, rho, start_stop, out } => {
            g2(&common, path.as_deref(), rho, start_stop, out.as_deref())
        }
        Command::Image { emitters, grid, pitch, brightness, sigma, pixel, region, background, out } => image(
            emitters.as_deref(),
            grid.as_deref(),
            pitch,
            brightness,
            sigma,
            pixel,
            region.as_deref(),
            background,
            &out,
        ),
        Command::Script { common, input: path, surface: s, log } => script(&common, &path, &s, &log),
        Command::Replay { log } => cmd_replay(&log),
        Command::Stats { common, trials, jobs, out } => stats(&common, trials, jobs, &out),
    }
}

fn campaign(common: &Common, out: &Path, strict: bool, pixel: f64) -> Outcome {
    let cfg = load_config(common)?;
    let mut plan = cfg.plan.clone().ok_or_else(|| input(anyhow!("configuration has no [plan] section")))?;
    if let Some(s) = common.seed {
        plan.seed = s;
    }
    let bench = MockBench::new(plan.surface, cfg.kinetics.clone(), cfg.emission.clone(), plan.seed).map_err(lib)?;
    let mut rec = Recorder::new(bench);
    let report = run_campaign(&plan, &mut rec, &cfg.controller, &cfg.emission).map_err(lib)?;
    let img = scan_array(&mut rec, &plan, pixel).map_err(lib)?;

    write(&out.join("campaign.jsonl"), rec.to_jsonl().as_bytes())?;
    write(&out.join("summary.csv"), report.summary_csv().as_bytes())?;
    write(&out.join("image.csv"), img.to_csv().as_bytes())?;
    write(&out.join("image.pgm"), &img.to_pgm16())?;

    let s = &report.summary;
    let floor = cfg.kinetics.background;
    let maxima = img.local_maxima(floor + 0.1 * (img.max() - floor)).len();
    println!("sites: {}", s.sites);
    println!("successes: {}", s.successes);
    println!("failures: {}", s.failures);
    println!("reseeds: {}", s.reseeds);
    println!("cycle_histogram: {:?}", s.cycle_histogram);
    println!("initial_classes: {:?}", s.initial_classes);
    println!("image_maxima: {maxima}");
    if strict && s.failures > 0 {
        return Err(fail(exit::STRICT, anyhow!("{} of {} sites failed", s.failures, s.sites)));
    }
    Ok(exit::OK)
}

fn axis_vector(surface: SurfaceCut, axis: Option<&str>, class: Option<u8>) -> Result<Vector3<f64>, Failure> {
    match (axis, class) {
        (Some(a), _) if a.contains(',') => {
            let v = parse_floats(a, 3, "axis")?;
            let v = Vector3::new(v[0], v[1], v[2]);
            if v.norm() == 0.0 {
                return Err(input(anyhow!("axis vector must be non-zero")));
            }
            Ok(v.normalize())
        }
        (Some(a), _) => Ok(lab_vector(surface, a.parse::<NvAxis>().map_err(lib)?)),
        (None, Some(id)) => {
            let c = class_by_id(surface, id).ok_or_else(|| input(anyhow!("no class {id} on the {surface} surface")))?;
            Ok(lab_vector(surface, c.members[0]))
        }
        (None, None) => Err(input(anyhow!("give --axis or --class"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_pattern(
    s: &str,
    axis: Option<&str>,
    class: Option<u8>,
    n: usize,
    model: ModelArg,
    budget: Option<f64>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Outcome {
    let surface = surface(s)?;
    let v = axis_vector(surface, axis, class)?;
    let cfg = emission(model);
    let exact = pattern(&v, &analyzer_angles(n), &cfg).map_err(lib)?.normalized();
    let p = match budget {
        None => exact,
        Some(b) => {
            let seed = seed.ok_or_else(|| input(anyhow!("--budget needs --seed")))?;
            let mut rng = rng_for(seed, Stream::Counter, [0; 3]);
            let counts: Vec<u64> = exact
                .intensities
                .iter()
                .map(|&i| sample_counts(b * i, 1.0, &mut rng))
                .collect::<Result<_, _>>()
                .map_err(lib)?;
            PolarizationPattern::from_counts(exact.angles.clone(), &counts).map_err(lib)?
        }
    };
    emit(out, p.to_csv().as_bytes())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Outcome {
    match out {
        Some(p) => write(p, bytes)?,
        None => print!("{}", String::from_utf8_lossy(bytes)),
    }
    Ok(exit::OK)
}

/// Best template further than this (in σ) means no class explains the pattern.
const MAX_CLASS_DISTANCE: f64 = 5.0;

fn classify(s: &str, path: &Path, offset: f64, model: ModelArg, min_margin: f64) -> Outcome {
    let surface = surface(s)?;
    let p = PolarizationPattern::from_csv(&read(path)?).map_err(input)?;
    let fit = fit_pattern(&p).map_err(input)?;
    let mut text = String::new();
    let _ = writeln!(text, "visibility: {:.6}", fit.visibility);
    let _ = writeln!(text, "visibility_sigma: {:.6}", fit.sigma_visibility);
    let _ = writeln!(text, "azimuth_rad: {:.6}", fit.azimuth);
    let reliable = match classify_with(&fit, surface, offset, &emission(model)) {
        Ok(c) => {
            let members: Vec<&str> = c.class.members.iter().map(|a| a.label()).collect();
            let _ = writeln!(text, "class: {}", c.class.id);
            let _ = writeln!(text, "members: {}", members.join(" "));
            let _ = writeln!(text, "distance: {:.4}", c.distance);
            let _ = writeln!(text, "margin: {:.4}", c.margin);
            !c.tie && c.margin >= min_margin && c.distance <= MAX_CLASS_DISTANCE
        }
        Err(e) => {
            let _ = writeln!(text, "class: none ({e})");
            false
        }
    };
    let _ = writeln!(text, "reliable: {reliable}");
    print!("{text}");
    Ok(if reliable { exit::OK } else { exit::WARNING })
}

fn g2(common: &Common, path: Option<&Path>, rho: Option<f64>, start_stop: bool, out: Option<&Path>) -> Outcome {
    let (h, rho) = match path {
        Some(p) => (HbtHistogram::from_csv(&read(p)?).map_err(input)?, rho.unwrap_or(1.0)),
        None => {
            let cfg = load_config(common)?;
            let seed = require_seed(common, &cfg)?;
            let mut g = cfg.g2.clone();
            if start_stop {
                g.mode = CorrelationMode::StartStop;
            }
            let spec = g.stream();
            let stream =
                simulate_photon_stream_with(&spec, &mut rng_for(seed, Stream::Emitter, [0; 3])).map_err(lib)?;
            let h = histogram_coincidences(
                &stream,
                &mut rng_for(seed, Stream::Splitter, [0; 3]),
                g.bin_width_ns,
                g.max_delay_ns,
                g.mode,
            )
            .map_err(lib)?;
            (h, rho.unwrap_or(spec.signal_fraction()))
        }
    };
    let fit = fit_g2(&h).map_err(input)?;
    let corrected = background_correct(fit.g2_zero, rho).map_err(input)?;
    println!("g2_raw_0: {:.4}", fit.g2_zero);
    println!("rho: {rho:.4}");
    println!("g2_corrected_0: {corrected:.4}");
    println!("a: {:.4}", fit.params.a);
    println!("tau1_ns: {:.4}", fit.params.tau1_ns);
    println!("tau2_ns: {:.4}", fit.params.tau2_ns);
    println!("reduced_chi2: {:.4}", fit.reduced_chi2);
    println!("converged: {}", fit.converged);
    if let Some(o) = out {
        write(o, h.to_csv().as_bytes())?;
    }
    if !fit.converged {
        eprintln!("warning: fit did not converge after {} iterations", fit.iterations);
        return Ok(exit::WARNING);
    }
    Ok(exit::OK)
}

fn read_emitters(path: &Path) -> Result<Vec<Emitter>, Failure> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.is_empty() || l.starts_with('#') || (i == 0 && l.chars().next().is_some_and(|c| c.is_alphabetic())) {
            continue;
        }
        let v = parse_floats(l, 3, &format!("line {}", i + 1))?;
        out.push(Emitter { x: v[0], y: v[1], brightness: v[2] });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn image(
    emitters: Option<&Path>,
    grid: Option<&str>,
    pitch: f64,
    brightness: f64,
    sigma: f64,
    pixel: f64,
    region: Option<&str>,
    background: f64,
    out: &Path,
) -> Outcome {
    let ems = match (emitters, grid) {
        (Some(p), _) => read_emitters(p)?,
        (None, Some(g)) => {
            let (r, c) = g
                .split_once(['x', 'X'])
                .and_then(|(r, c)| Some((r.trim().parse::<u32>().ok()?, c.trim().parse::<u32>().ok()?)))
                .ok_or_else(|| input(anyhow!("grid '{g}' is not ROWSxCOLS")))?;
            (0..r)
                .flat_map(|i| (0..c).map(move |j| Emitter { x: i as f64 * pitch, y: j as f64 * pitch, brightness }))
                .collect()
        }
        (None, None) => return Err(input(anyhow!("give --emitters or --grid"))),
    };
    let region = match region {
        Some(r) => {
            let v = parse_floats(r, 4, "region")?;
            Region::new(v[0], v[1], v[2], v[3])
        }
        None => {
            if ems.is_empty() {
                return Err(input(anyhow!("no emitters and no --region")));
            }
            let m = 0.5 * pitch;
            let fold = |f: fn(f64, f64) -> f64, init: f64, g: fn(&Emitter) -> f64| ems.iter().map(g).fold(init, f);
            Region::new(
                fold(f64::min, f64::MAX, |e| e.x) - m,
                fold(f64::min, f64::MAX, |e| e.y) - m,
                fold(f64::max, f64::MIN, |e| e.x) + m,
                fold(f64::max, f64::MIN, |e| e.y) + m,
            )
        }
    };
    let img = synthesize_confocal_image(&ems, sigma, region, pixel, background).map_err(input)?;
    let stem = out.as_os_str().to_owned();
    let with = |ext: &str| {
        let mut s = stem.clone();
        s.push(ext);
        PathBuf::from(s)
    };
    write(&with(".csv"), img.to_csv().as_bytes())?;
    write(&with(".pgm"), &img.to_pgm16())?;
    let maxima = img.local_maxima(background + 0.1 * (img.max() - background)).len();
    println!("pixels: {}x{}", img.width, img.height);
    println!("local_maxima: {maxima}");
    Ok(exit::OK)
}

fn script(common: &Common, path: &Path, s: &str, log: &Path) -> Outcome {
    let cfg = load_config(common)?;
    let seed = require_seed(common, &cfg)?;
    let text = read(path)?;
    let bench = MockBench::new(surface(s)?, cfg.kinetics.clone(), cfg.emission.clone(), seed).map_err(lib)?;
    let mut rec = Recorder::new(bench);
    let result = execute_script(&mut rec, &text);
    if let Err(e @ nvtwin::Error::Parse { .. }) = result {
        return Err(input(e));
    }
    write(log, rec.to_jsonl().as_bytes())?;
    let records = result.map_err(lib)?;
    println!("commands: {}", records.len());
    println!("elapsed_s: {:.6}", rec.inner().now());
    Ok(exit::OK)
}

fn cmd_replay(log: &Path) -> Outcome {
    let report = replay(&read(log)?).map_err(input)?;
    match &report.divergence {
        None => {
            println!("records: {}", report.records);
            println!("commands: {}", report.commands);
            println!("divergences: 0");
            Ok(exit::OK)
        }
        Some(d) => {
            println!("divergence at line {}", d.line);
            println!("logged:   {}", d.logged);
            println!("replayed: {}", d.replayed);
            Err(fail(exit::DIVERGENCE, anyhow!("log diverges from replay at line {}", d.line)))
        }
    }
}

fn stats(common: &Common, trials: u32, jobs: usize, out: &Path) -> Outcome {
    let cfg = load_config(common)?;
    let base = cfg.plan.clone().ok_or_else(|| input(anyhow!("configuration has no [plan] section")))?;
    let seed = common.seed.unwrap_or(base.seed);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| fail(exit::COMMAND, e))?;
    let rows: Vec<Result<String, nvtwin::Error>> = pool.install(|| {
        (0..trials)
            .into_par_iter()
            .map(|i| {
                let trial_seed = rng_for(seed, Stream::Trial, [i as i64, 0, 0]).next_u64();
                let plan = FabricationPlan { rows: 1, cols: 1, seed: trial_seed, ..base.clone() };
                let mut bench = MockBench::new(plan.surface, cfg.kinetics.clone(), cfg.emission.clone(), trial_seed)?;
                let log = reorient_until(&mut bench, [0, 0], &plan, &cfg.controller, &cfg.emission)?;
                let opt = |v: Option<String>| v.unwrap_or_default();
                Ok(format!(
                    "{i},{},{},{},{},{},{:.3}",
                    log.outcome().label(),
                    opt(log.cycles().map(|c| c.to_string())),
                    log.reseeds(),
                    opt(log.initial_class().map(|c| c.to_string())),
                    opt(log.final_class().map(|c| c.to_string())),
                    bench.now(),
                ))
            })
            .collect()
    });
    let mut csv = String::from("trial,outcome,cycles,reseeds,initial_class,final_class,elapsed_s\n");
    let (mut ok, mut sum) = (0u32, 0u64);
    for r in rows {
        let line = r.map_err(lib)?;
        let f: Vec<&str> = line.split(',').collect();
        if f[1] == "success" {
            ok += 1;
            sum += f[2].parse::<u64>().unwrap_or(0);
        }
        csv.push_str(&line);
        csv.push('\n');
    }
    write(out, csv.as_bytes())?;
    println!("trials: {trials}");
    println!("successes: {ok}");
    if ok > 0 {
        println!("mean_cycles: {:.4}", sum as f64 / ok as f64);
    }
    Ok(exit::OK)
}
