use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use hmarl::channel::GridSpec;
use hmarl::geometry::Vec3;
use hmarl::harness::{self, Checkpoint, Method, RunConfig};

#[derive(Parser)]
#[command(name = "hmarl", version, about = "Train and evaluate hierarchical focal-point controllers for tiled mmWave reflectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method and write the curve, checkpoints and config echo.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Deterministic deployment episode of a trained checkpoint; writes eval_rssi.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// run configuration; defaults to config_echo.json next to the checkpoint
        #[arg(long)]
        config: Option<PathBuf>,
        /// output CSV; defaults to eval_rssi.csv next to the checkpoint
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Error-matched localization-noise sweep over the configured sigma list.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Control-space dimensions for K users, L segments of Nr x Nc tiles.
    Dims {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        l: usize,
        #[arg(long)]
        nr: usize,
        #[arg(long)]
        nc: usize,
    },
    /// RSSI map over the room with every segment focused at a point.
    Coverage {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// focal point "x,y,z", once per segment; defaults to the focal init mean
        #[arg(long, value_parser = parse_vec3)]
        focal: Vec<Vec3>,
        #[arg(long, default_value_t = 40)]
        nx: usize,
        #[arg(long, default_value_t = 40)]
        ny: usize,
    },
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
        _ => Err(format!("expected x,y,z, got {s:?}")),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        // an unreadable file is a configuration problem too
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            hmarl::Error::Io(io) => hmarl::Error::Config(format!("{}: {io}", p.display())).into(),
            e => anyhow::Error::new(e).context(format!("loading {}", p.display())),
        }),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, method, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir).join(cfg.method.tag()));
            let run = harness::run_method(&cfg, Some(&out))?;
            println!(
                "{}: {} episodes, final-100 mean reward {:.3}; results in {}",
                cfg.method,
                run.curve.len(),
                run.final_mean_reward(100),
                out.display()
            );
        }
        Command::Eval { checkpoint, sigma, seed, config, out } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let dir = checkpoint.parent().unwrap_or(Path::new("."));
            let config = config.unwrap_or_else(|| dir.join("config_echo.json"));
            let cfg = load_config(Some(&config))?;
            let report = harness::evaluate(&ck, &cfg, sigma, seed)?;
            let out = out.unwrap_or_else(|| dir.join("eval_rssi.csv"));
            report.write_csv(&out)?;
            println!("mean RSSI {:.2} dBm (std {:.2}); wrote {}", report.mean_dbm, report.std_dbm, out.display());
        }
        Command::Sweep { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir).join("sweep"));
            std::fs::create_dir_all(&out)?;
            let points = harness::sweep(&cfg, &cfg.sigma_sweep, Some(&out))?;
            for p in points {
                println!("sigma {:<5} mean RSSI {:.2} dBm (std {:.2})", p.sigma, p.mean_dbm, p.std_dbm);
            }
        }
        Command::Dims { k, l, nr, nc } => {
            let (tile, focal) = harness::dimensionality_report(k, l, nr, nc)?;
            println!("D_tile={tile} D_focal={focal}");
        }
        Command::Coverage { config, out, focal, nx, ny } => {
            let cfg = load_config(config.as_deref())?;
            let scene = cfg.scene.build()?;
            let focals = if focal.is_empty() { vec![cfg.env.focal_init_mean; scene.segments.len()] } else { focal };
            let grid = GridSpec::over_region(&scene.region, nx, ny, scene.user_height);
            harness::export_coverage_map(&scene, &focals, &grid, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<hmarl::Error>() {
        Some(e) if e.is_numeric() => 3,
        Some(e) if e.is_config() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
