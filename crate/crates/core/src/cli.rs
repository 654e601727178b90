//! Command-line entry point. Every verb is a pure function of the config
//! and its input files; outputs carry no timestamps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::attack::{run_attack, AttackConfig, AttackOutcome, AttackStatus, Method};
use crate::camera::{grid_angles, Pose};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    build_synthetic_protocol, calibrate_eer, evaluate, report_table, rotation_grid_report, EvalReport, Protocol,
};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::renderer::render;
use crate::scene::{load_scene, save_scene, Scene};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_INVALID_INPUT: u8 = 2;
pub const EXIT_ABORT: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "splatmask", version, about = "Adversarial color masking of Gaussian head scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed; overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic scene.
    Synth,
    /// Render one view or a viewpoint grid to PPM.
    Render {
        /// Scene file; defaults to the configured scene.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// "pitch,yaw" in radians.
        #[arg(long, allow_hyphen_values = true)]
        view: Option<String>,
        /// "RxC" grid over the evaluation grid range.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Run the configured attack once per epsilon.
    Mask,
    /// Build the synthetic protocol, mask every identity and score it.
    Eval,
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Calibrate the verification threshold on the synthetic protocol.
    Calibrate,
}

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_)
        | Error::Parse { .. }
        | Error::Version { .. }
        | Error::Validation { .. }
        | Error::Scene(_)
        | Error::Config(_) => EXIT_INVALID_INPUT,
        Error::View { source, .. } => exit_code(source),
        Error::Render { .. } | Error::Numeric(_) | Error::Io(_) => EXIT_ABORT,
    }
}

/// Parses "pitch,yaw".
pub fn parse_view(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let parse = |p: &str| {
        p.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::invalid(format!("bad --view `{s}`, expected \"pitch,yaw\"")))
    };
    match parts.as_slice() {
        [p, y] => Ok((parse(p)?, parse(y)?)),
        _ => Err(Error::invalid(format!("bad --view `{s}`, expected \"pitch,yaw\""))),
    }
}

/// Parses "RxC".
pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::invalid(format!("bad --grid `{s}`, expected \"RxC\""));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let r: usize = r.trim().parse().map_err(|_| bad())?;
    let c: usize = c.trim().parse().map_err(|_| bad())?;
    if r == 0 || c == 0 {
        return Err(bad());
    }
    Ok((r, c))
}

/// Outcome of a verb: an exit code plus what was printed.
pub struct Outcome {
    pub code: u8,
    pub stdout: String,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Outcome { code: EXIT_OK, stdout }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    let go = || match &cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Render { scene, view, grid } => cmd_render(&cfg, scene.as_deref(), view.as_deref(), grid.as_deref()),
        Command::Mask => cmd_mask(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Gradcheck { corrupt_backward } => cmd_gradcheck(&cfg, *corrupt_backward),
        Command::Calibrate => cmd_calibrate(&cfg),
    };
    match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(go),
        None => go(),
    }
}

fn eps_tag(eps: f64) -> String {
    format!("eps{eps}")
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<Outcome> {
    let scene = cfg.scene()?;
    prepare_out(&cfg.output_dir)?;
    let path = cfg.output_dir.join("scene.txt");
    save_scene(&scene, &path)?;
    let mut s = String::new();
    writeln!(s, "wrote {}", path.display()).unwrap();
    writeln!(s, "primitives = {}", scene.len()).unwrap();
    for (region, n) in scene.region_histogram() {
        writeln!(s, "{} = {n}", region.name()).unwrap();
    }
    Ok(Outcome::ok(s))
}

pub fn cmd_render(cfg: &RunConfig, scene: Option<&Path>, view: Option<&str>, grid: Option<&str>) -> Result<Outcome> {
    let scene = match scene {
        Some(p) => load_scene(p)?,
        None => cfg.scene()?,
    };
    prepare_out(&cfg.output_dir)?;
    let mut s = String::new();
    let mut emit = |name: String, pitch: f64, yaw: f64, dist: &crate::camera::ViewpointDistribution| -> Result<()> {
        let v = crate::camera::rotate_view(&dist.base_view, pitch, yaw);
        let (img, _) = render(&scene, &v, &Pose::identity(), &cfg.render)?;
        let path = cfg.output_dir.join(name);
        write_file(&path, img.to_ppm())?;
        writeln!(s, "{}", path.display()).unwrap();
        Ok(())
    };
    match (view, grid) {
        (Some(_), Some(_)) => return Err(Error::invalid("--view and --grid are exclusive")),
        (_, Some(g)) => {
            let (rows, cols) = parse_grid(g)?;
            let dist = cfg.camera.distribution_with(cfg.eval.grid_range)?;
            for (n, a) in grid_angles(&dist, rows, cols)?.into_iter().enumerate() {
                emit(format!("render_r{}_c{}.ppm", n / cols, n % cols), a.pitch, a.yaw, &dist)?;
            }
        }
        (v, None) => {
            let (pitch, yaw) = v.map(parse_view).transpose()?.unwrap_or((0.0, 0.0));
            emit("render.ppm".into(), pitch, yaw, &cfg.camera.distribution()?)?;
        }
    }
    Ok(Outcome::ok(s))
}

/// Attack config for `eps`. A DDN run without an explicit success
/// threshold gets the EER threshold calibrated for the attack embedder on
/// the configured protocol.
pub fn resolved_attack_config(cfg: &RunConfig, eps: f64) -> Result<AttackConfig> {
    let mut c = cfg.attack_config(eps)?;
    if c.method == Method::Ddn && c.ddn.success_threshold.is_none() {
        let protocol = build_synthetic_protocol(&cfg.protocol(), &cfg.embedder(0)?, &cfg.render)?;
        c.ddn.success_threshold = Some(calibrate_eer(&protocol.pairs)?.tau);
    }
    Ok(c)
}

pub fn cmd_mask(cfg: &RunConfig) -> Result<Outcome> {
    let scene = cfg.scene()?;
    let embedder = cfg.embedder(0)?;
    prepare_out(&cfg.output_dir)?;
    let mut s = String::new();
    let mut summary = format!("config_hash = {}\n", cfg.hash());
    let mut code = EXIT_OK;
    for &eps in &cfg.attack.epsilons {
        let out = run_attack(&scene, &embedder, &resolved_attack_config(cfg, eps)?)?;
        let tag = eps_tag(eps);
        out.trace.write_jsonl(cfg.output_dir.join(format!("trace_{tag}.jsonl")))?;
        let status = match &out.trace.status {
            AttackStatus::Completed => "completed".to_string(),
            AttackStatus::NoSuccess => "no_success".to_string(),
            AttackStatus::Aborted(m) => format!("aborted ({m})"),
        };
        let line = format!(
            "eps={eps} final_s_bar={:.6} final_norm={:.6} iterations={} status={status}",
            out.trace.final_s_bar,
            out.trace.final_norm,
            out.trace.records.len()
        );
        for w in &out.trace.warnings {
            writeln!(s, "warning: {w}").unwrap();
        }
        writeln!(s, "{line}").unwrap();
        writeln!(summary, "{line}").unwrap();
        if matches!(out.trace.status, AttackStatus::Aborted(_)) {
            code = EXIT_ABORT;
            break;
        }
        save_scene(&out.scene, cfg.output_dir.join(format!("masked_{tag}.txt")))?;
    }
    write_file(&cfg.output_dir.join("summary.txt"), summary)?;
    Ok(Outcome { code, stdout: s })
}

/// Masks every protocol identity at `eps` with the attack embedder. The
/// attack for identity `i` is seeded with `seed + i` and samples the
/// protocol's viewpoint range.
pub fn mask_protocol(cfg: &RunConfig, protocol: &Protocol, eps: f64) -> Result<Vec<AttackOutcome>> {
    let embedder = cfg.embedder(0)?;
    let mut base = resolved_attack_config(cfg, eps)?;
    base.viewpoint_dist = protocol.dist.clone();
    protocol
        .scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut c = base.clone();
            c.seed = cfg.seed.wrapping_add(i as u64);
            let out = run_attack(scene, &embedder, &c)?;
            if let AttackStatus::Aborted(m) = &out.trace.status {
                return Err(Error::Numeric(format!("identity {}: {m}", protocol.ids[i])));
            }
            Ok(out)
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Outcome> {
    let embedder = cfg.eval_embedder()?;
    let protocol = build_synthetic_protocol(&cfg.protocol(), &embedder, &cfg.render)?;
    let cal = calibrate_eer(&protocol.pairs)?;
    prepare_out(&cfg.output_dir)?;
    protocol.gallery.write(cfg.output_dir.join("gallery.bin"))?;
    let score = |label: &str, scenes: &[Scene]| -> Result<EvalReport> {
        evaluate(label, &protocol, scenes, &embedder, cal.tau, &cfg.eval.ks, &cfg.eval.ssim, &cfg.render)
    };
    let mut reports = vec![score("avatar", &protocol.scenes)?];
    let grid_dist = cfg.camera.distribution_with(cfg.eval.grid_range)?;
    let gi = cfg.eval.grid_identity;
    let refs: Vec<_> = protocol
        .gallery
        .references(&protocol.ids[gi])?
        .into_iter()
        .cloned()
        .collect();
    let [rows, cols] = cfg.eval.grid;
    let mut grid_lines = String::new();
    for &eps in &cfg.attack.epsilons {
        let masked: Vec<Scene> = mask_protocol(cfg, &protocol, eps)?.into_iter().map(|o| o.scene).collect();
        let tag = eps_tag(eps);
        reports.push(score(&tag, &masked)?);
        let rot = rotation_grid_report(
            &masked[gi],
            &protocol.scenes[gi],
            &embedder,
            &refs,
            &grid_dist,
            rows,
            cols,
            cal.tau,
            &cfg.render,
        )?;
        write_file(&cfg.output_dir.join(format!("rotation_{tag}.txt")), rot.to_text())?;
        write_file(&cfg.output_dir.join(format!("rotation_{tag}.csv")), rot.to_csv())?;
        writeln!(
            grid_lines,
            "{tag}: no_match_cells = {}/{}  original_match_cells = {}/{}",
            rot.no_match_count(),
            rot.cells.len(),
            rot.original_match_count(),
            rot.cells.len()
        )
        .unwrap();
    }
    let table = report_table(&reports);
    let mut text = String::new();
    writeln!(text, "config_hash = {}", cfg.hash()).unwrap();
    writeln!(text, "cross_system = {}", cfg.eval.cross_system).unwrap();
    writeln!(text, "tau_eer = {:.6}", cal.tau).unwrap();
    writeln!(text, "eer = {:.6}", cal.eer).unwrap();
    writeln!(text, "positives = {}", protocol.pairs.positives.len()).unwrap();
    writeln!(text, "negatives = {}", protocol.pairs.negatives.len()).unwrap();
    for r in &reports {
        writeln!(text).unwrap();
        text.push_str(&r.to_text());
        write_file(&cfg.output_dir.join(format!("ranks_{}.csv", r.label)), r.ranks_csv())?;
    }
    writeln!(text).unwrap();
    text.push_str(&table);
    writeln!(text).unwrap();
    text.push_str(&grid_lines);
    write_file(&cfg.output_dir.join("report.txt"), &text)?;
    Ok(Outcome::ok(format!("{table}{grid_lines}")))
}

pub fn cmd_gradcheck(cfg: &RunConfig, corrupt_backward: bool) -> Result<Outcome> {
    let opts = GradcheckOptions {
        seed: cfg.seed,
        corrupt_backward,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&opts, &cfg.embedder(0)?)?;
    let code = if report.passed() { EXIT_OK } else { EXIT_CHECK_FAILED };
    Ok(Outcome {
        code,
        stdout: report.to_text(),
    })
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<Outcome> {
    let protocol = build_synthetic_protocol(&cfg.protocol(), &cfg.eval_embedder()?, &cfg.render)?;
    let cal = calibrate_eer(&protocol.pairs)?;
    let mut text = String::new();
    writeln!(text, "config_hash = {}", cfg.hash()).unwrap();
    writeln!(text, "tau = {:.9}", cal.tau).unwrap();
    writeln!(text, "eer = {:.9}", cal.eer).unwrap();
    writeln!(text, "positives = {}", protocol.pairs.positives.len()).unwrap();
    writeln!(text, "negatives = {}", protocol.pairs.negatives.len()).unwrap();
    prepare_out(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("calibration.txt"), &text)?;
    Ok(Outcome::ok(text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_parsing() {
        assert_eq!(parse_view("0.1,-0.2").unwrap(), (0.1, -0.2));
        assert!(parse_view("0.1").is_err());
        assert!(parse_view("a,b").is_err());
        assert_eq!(parse_grid("5x5").unwrap(), (5, 5));
        assert_eq!(parse_grid("2X3").unwrap(), (2, 3));
        assert!(parse_grid("0x5").is_err());
        assert!(parse_grid("5").is_err());
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::invalid("x")), EXIT_INVALID_INPUT);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_INVALID_INPUT);
        assert_eq!(exit_code(&Error::Numeric("x".into())), EXIT_ABORT);
        assert_eq!(exit_code(&Error::Numeric("x".into()).in_view(2)), EXIT_ABORT);
    }

    #[test]
    fn cli_shape() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["splatmask", "render", "--view", "-0.1,0.2", "--seed", "4"]).unwrap();
        assert_eq!(cli.seed, Some(4));
        assert!(matches!(cli.command, Command::Render { view: Some(_), .. }));
    }
}
