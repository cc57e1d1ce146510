//! Command-line front end: compile models, assemble and disassemble
//! programs, run and verify containers, and sweep sense-amplifier
//! variation.
//!
//! Exit codes: 0 success, 1 usage or I/O, 2 validation or compile error,
//! 3 runtime simulation error, 4 comparison mismatch.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use pscnn::cim::{mc, VariationParams};
use pscnn::compare::{run_and_compare, CompareError};
use pscnn::compiler::map_model;
use pscnn::container::{read_container, write_container};
use pscnn::controller::{EnergyCosts, StatsDoc, System};
use pscnn::isa::{assemble, disassemble, program_from_bytes, program_to_bytes};
use pscnn::model::load_model_file;
use pscnn::oracle::RefTensor;

const EXIT_USAGE: i32 = 1;
const EXIT_VALIDATION: i32 = 2;
const EXIT_RUNTIME: i32 = 3;
const EXIT_MISMATCH: i32 = 4;

#[derive(Parser)]
#[command(
    name = "pscnn",
    about = "Compute-in-memory processor simulator and binary 1-D CNN compiler",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a model description into an executable container.
    Compile {
        /// Model description file (TOML).
        model: PathBuf,
        /// Output container path.
        #[arg(short, long)]
        output: PathBuf,
        /// Weight sidecar (packed sign bits); overrides the model file's
        /// [weights] table.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Assemble instruction text into a program binary.
    Asm {
        source: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Disassemble a program binary back to text.
    Disasm {
        program: PathBuf,
        /// Output path; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Execute a container (or a raw program binary) and report counters.
    Run {
        container: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Where to write the stats document; stdout when omitted.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Energy cost table (JSON); enables the modeled-energy field.
        #[arg(long)]
        cost_table: Option<PathBuf>,
    },
    /// Run a container and verify every layer against the brute-force
    /// reference implementation.
    Compare {
        container: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Monte Carlo sense-amplifier variation sweep: decision error rates
    /// for ternary vs binary weight mapping.
    Margin {
        /// Which mapping's rate to report.
        #[arg(long, default_value = "both", value_parser = ["both", "twm", "bwm"])]
        mode: String,
        /// Comma-separated offset sigmas, in unit cell currents.
        #[arg(long, value_delimiter = ',', required = true)]
        sigma_grid: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        /// Active wordlines per trial.
        #[arg(long, default_value_t = 64)]
        rows: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the JSON table; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Input feature map: packed bits, position-major then channel,
    /// MSB-first per byte. All-zero input when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Generate a pseudo-random input from this seed instead of a file.
    #[arg(long, conflicts_with = "input")]
    random_input: Option<u64>,
    /// Clock frequency for throughput/latency derivation.
    #[arg(long, default_value_t = 10_000_000.0)]
    freq_hz: f64,
    /// Sense-amplifier offset sigma in unit cell currents.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Noise seed; falls back to PSCNN_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Execute the separate-pooling program variant.
    #[arg(long)]
    unfused: bool,
}

struct CliError {
    code: i32,
    error: anyhow::Error,
}

fn fail(code: i32) -> impl FnOnce(anyhow::Error) -> CliError {
    move |error| CliError { code, error }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {:#}", e.error);
        std::process::exit(e.code);
    }
}

fn seed_or_env(seed: Option<u64>) -> u64 {
    seed.or_else(|| {
        std::env::var("PSCNN_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(0)
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(fail(EXIT_USAGE))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(fail(EXIT_USAGE))
}

/// Unpacks an input-bits file into a feature tensor.
fn input_tensor(bytes: &[u8], len: usize, channels: usize) -> Result<RefTensor, anyhow::Error> {
    let bits = len * channels;
    if bytes.len() != bits.div_ceil(8) {
        return Err(anyhow!(
            "input file holds {} bytes; a {}x{} feature map needs {}",
            bytes.len(),
            len,
            channels,
            bits.div_ceil(8)
        ));
    }
    let mut t = RefTensor::zeros(len, channels);
    for i in 0..bits {
        if bytes[i / 8] & (0x80 >> (i % 8)) != 0 {
            t.set(i / channels, i % channels, 1);
        }
    }
    Ok(t)
}

fn resolve_input(run: &RunArgs, len: usize, channels: usize) -> Result<RefTensor, CliError> {
    if let Some(path) = &run.input {
        let bytes = read_file(path)?;
        input_tensor(&bytes, len, channels).map_err(fail(EXIT_USAGE))
    } else if let Some(seed) = run.random_input {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ok(RefTensor::random(len, channels, &mut rng))
    } else {
        Ok(RefTensor::zeros(len, channels))
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Compile {
            model,
            output,
            weights,
        } => {
            let (validated, w) = load_model_file(&model, weights.as_deref())
                .map_err(|e| anyhow!(e))
                .map_err(fail(EXIT_VALIDATION))?;
            let mapped = map_model(&validated, &w)
                .map_err(|e| anyhow!(e))
                .map_err(fail(EXIT_VALIDATION))?;
            let mut bytes = Vec::new();
            write_container(&mut bytes, &mapped)
                .map_err(|e| anyhow!(e))
                .map_err(fail(EXIT_USAGE))?;
            write_file(&output, &bytes)?;
            eprintln!(
                "compiled: {} macro-resident rows, {} weight-SRAM rows, {} replacement(s){}",
                mapped.stats.resident_rows,
                mapped.stats.wsram_rows,
                mapped.stats.wrep_count,
                match &mapped.unfused_error {
                    Some(e) => format!("; no unfused variant ({e})"),
                    None => String::new(),
                }
            );
            Ok(())
        }
        Command::Asm { source, output } => {
            let text = String::from_utf8_lossy(&read_file(&source)?).into_owned();
            let asm = assemble(&text)
                .map_err(|e| anyhow!(e))
                .map_err(fail(EXIT_VALIDATION))?;
            for w in &asm.warnings {
                eprintln!("warning: {w}");
            }
            write_file(&output, &program_to_bytes(&asm.words))
        }
        Command::Disasm { program, output } => {
            let words = program_from_bytes(&read_file(&program)?)
                .map_err(|e| anyhow!(e))
                .map_err(fail(EXIT_VALIDATION))?;
            let text = disassemble(&words)
                .map_err(|e| anyhow!(e))
                .map_err(fail(EXIT_VALIDATION))?;
            match output {
                Some(path) => write_file(&path, text.as_bytes()),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Run {
            container,
            run,
            stats,
            cost_table,
        } => {
            let var = VariationParams {
                sigma_sa: run.sigma,
                seed: seed_or_env(run.seed),
            };
            let costs: Option<EnergyCosts> = match &cost_table {
                Some(path) => Some(
                    serde_json::from_slice(&read_file(path)?)
                        .with_context(|| format!("cost table {}", path.display()))
                        .map_err(fail(EXIT_VALIDATION))?,
                ),
                None => None,
            };
            let bytes = read_file(&container)?;
            let (sim_stats, variant_name) = match read_container(bytes.as_slice()) {
                Ok(mapped) => {
                    let mut sys = System::from_mapped(&mapped, run.unfused)
                        .map_err(|e| anyhow!(e))
                        .map_err(fail(EXIT_RUNTIME))?;
                    sys.set_variation(var);
                    let input =
                        resolve_input(&run, mapped.model.input_len, mapped.model.input_channels)?;
                    sys.load_input(&input.to_words())
                        .map_err(|e| anyhow!(e))
                        .map_err(fail(EXIT_RUNTIME))?;
                    let s = sys
                        .run()
                        .map_err(|e| anyhow!(e))
                        .map_err(fail(EXIT_RUNTIME))?;
                    (s, if run.unfused { "unfused" } else { "fused" })
                }
                // Not a container: treat the file as a raw program binary.
                Err(_) => {
                    let words = program_from_bytes(&bytes)
                        .map_err(|e| anyhow!("neither a container nor a program binary: {e}"))
                        .map_err(fail(EXIT_VALIDATION))?;
                    let mut sys = System::new_raw(words, var);
                    let s = sys
                        .run()
                        .map_err(|e| anyhow!(e))
                        .map_err(fail(EXIT_RUNTIME))?;
                    (s, "raw")
                }
            };
            let doc = StatsDoc::new(sim_stats, run.freq_hz, var, variant_name, costs.as_ref());
            let json = serde_json::to_string_pretty(&doc).unwrap();
            match stats {
                Some(path) => write_file(&path, json.as_bytes())?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Compare { container, run } => {
            let mapped = read_container(read_file(&container)?.as_slice())
                .map_err(|e| anyhow!(e))
                .map_err(fail(EXIT_VALIDATION))?;
            let var = VariationParams {
                sigma_sa: run.sigma,
                seed: seed_or_env(run.seed),
            };
            let input = resolve_input(&run, mapped.model.input_len, mapped.model.input_channels)?;
            match run_and_compare(&mapped, run.unfused, &input, var) {
                Ok(stats) => {
                    eprintln!(
                        "compare: all layers match the reference bit-for-bit ({} cycles, {} MACs)",
                        stats.cycles, stats.macs
                    );
                    Ok(())
                }
                Err(
                    e @ (CompareError::Mismatch { .. }
                    | CompareError::LengthMismatch { .. }
                    | CompareError::MacCount { .. }),
                ) => Err(fail(EXIT_MISMATCH)(anyhow!(e))),
                Err(CompareError::Sim(e)) => Err(fail(EXIT_RUNTIME)(anyhow!(e))),
                Err(CompareError::Compile(e)) => Err(fail(EXIT_VALIDATION)(anyhow!(e))),
            }
        }
        Command::Margin {
            mode,
            sigma_grid,
            trials,
            rows,
            seed,
            output,
        } => {
            let cfg = mc::MarginMcConfig {
                active_rows: rows,
                trials,
                seed: seed_or_env(seed),
            };
            let rates = mc::monte_carlo_error_rate(&cfg, &sigma_grid);
            let table: Vec<serde_json::Value> = rates
                .iter()
                .map(|r| {
                    let mut row = serde_json::Map::new();
                    row.insert("sigma".into(), r.sigma.into());
                    if mode != "bwm" {
                        row.insert("twm_rate".into(), r.twm_rate.into());
                    }
                    if mode != "twm" {
                        row.insert("bwm_rate".into(), r.bwm_rate.into());
                    }
                    serde_json::Value::Object(row)
                })
                .collect();
            let json = serde_json::to_string_pretty(&table).unwrap();
            match output {
                Some(path) => write_file(&path, json.as_bytes()),
                None => {
                    println!("{json}");
                    Ok(())
                }
            }
        }
    }
}
