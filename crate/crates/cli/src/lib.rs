//! Command-line front end: simulation runs, benchmark tables, key
//! generation and transcript verification.

pub mod config;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use secagg_core::codec::{format_registry, from_hex, parse_registry, to_hex};
use secagg_core::ed25519_dalek::VerifyingKey;
use secagg_core::enclave::verify_transcript;
use secagg_core::group::{format_pk_registry, gen_keypair, GroupParams};
use secagg_core::protocol::Mode;
use secagg_core::sim::{
    audit_keys, bench_bytes, bench_counts, metrics_csv, run_sim, CountCase, SimError,
};
use thiserror::Error;

pub use config::{emit_config, load_config, parse_config, ConfigError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "secagg",
    version,
    about = "Dropout-tolerant secure aggregation simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a simulation described by a config file.
    Sim(SimArgs),
    /// Print operation-count and message-size tables.
    Bench(BenchArgs),
    /// Check a stored transcript against the enclave and client keys.
    Verify(VerifyArgs),
    /// Write the key registries and enclave key for a config.
    Keygen(KeygenArgs),
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long, env = "SECAGG_CONFIG")]
    pub config: PathBuf,
    #[arg(long, env = "SECAGG_OUT_METRICS")]
    pub out_metrics: Option<PathBuf>,
    /// Requires an attested run.
    #[arg(long, env = "SECAGG_OUT_TRANSCRIPT")]
    pub out_transcript: Option<PathBuf>,
    #[arg(long, env = "SECAGG_MODE")]
    pub mode: Option<Mode>,
    #[arg(long, env = "SECAGG_DROPOUT_RATE")]
    pub dropout_rate: Option<f64>,
    #[arg(long, env = "SECAGG_ATTESTED")]
    pub attested: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model dimension for the message-size table.
    #[arg(long, default_value_t = 21_840)]
    pub dim: usize,
    /// Model dimension for the count table.
    #[arg(long, default_value_t = 100)]
    pub count_dim: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [5usize, 10, 20])]
    pub clients: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2])]
    pub dropouts: Vec<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub transcript: PathBuf,
    /// File holding the enclave verification key in hex.
    #[arg(long)]
    pub vk: PathBuf,
    /// `client_id, hex` lines of client verification keys.
    #[arg(long)]
    pub registry: PathBuf,
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    #[arg(long, env = "SECAGG_CONFIG")]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("transcript rejected at record {index}: {reason}")]
    Rejected { index: usize, reason: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Rejected { .. }
            | CliError::Sim(SimError::Protocol(_) | SimError::Enclave(_)) => EXIT_VERIFY_FAILED,
            CliError::Sim(SimError::Config(_))
            | CliError::Config(_)
            | CliError::Usage(_)
            | CliError::Io { .. } => EXIT_USAGE,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Sim(args) => sim(args, out),
        Command::Bench(args) => bench(args, out),
        Command::Verify(args) => verify(args, out),
        Command::Keygen(args) => keygen(args, out),
    }
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments<'_>) {
    // Stdout going away mid-run is not worth failing over.
    let _ = writeln!(out, "{line}");
}

fn sim(args: SimArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(rate) = args.dropout_rate {
        cfg.dropout_rate = rate;
    }
    cfg.attested |= args.attested;
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(ConfigError::Invalid(problems).into());
    }
    if args.out_transcript.is_some() && !cfg.attested {
        return Err(CliError::Usage(
            "--out-transcript needs an attested run (--attested)".into(),
        ));
    }

    let report = run_sim(&cfg)?;
    if let Some(path) = &args.out_metrics {
        write_file(path, &metrics_csv(&report.metrics))?;
    }
    if let (Some(path), Some(t)) = (&args.out_transcript, &report.transcript) {
        write_file(path, &t.to_jsonl())?;
    }
    for r in &report.rounds {
        let err = r
            .max_abs_error
            .map(|e| format!(" max_abs_error={e:e} bound={:e}", r.error_bound))
            .unwrap_or_default();
        say(
            out,
            format_args!(
                "round {}: selected={} responders={} dropouts={}{err}",
                r.plan.round,
                r.plan.selected.len(),
                r.outcome.responders.len(),
                r.outcome.dropouts.len()
            ),
        );
    }
    let model: Vec<String> = report.final_model.iter().map(|v| format!("{v}")).collect();
    say(out, format_args!("final model: [{}]", model.join(", ")));
    Ok(())
}

fn bench(args: BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cases = Vec::new();
    for &n in &args.clients {
        for &d in &args.dropouts {
            if d < n {
                cases.push(CountCase {
                    n,
                    d,
                    m: args.count_dim,
                    group_size: args.group_size,
                });
            }
        }
    }
    say(
        out,
        format_args!("n,d,m,group_size,client_mask_hashes,client_recovery_hashes,server_additions"),
    );
    for row in bench_counts(&cases)? {
        let c = row.case;
        let span = |f: fn(&secagg_core::sim::ClientCounts) -> u64| {
            let lo = row.clients.iter().map(f).min().unwrap_or(0);
            let hi = row.clients.iter().map(f).max().unwrap_or(0);
            if lo == hi {
                lo.to_string()
            } else {
                format!("{lo}-{hi}")
            }
        };
        say(
            out,
            format_args!(
                "{},{},{},{},{},{},{}",
                c.n,
                c.d,
                c.m,
                c.group_size.map_or("-".to_string(), |g| g.to_string()),
                span(|x| x.mask_hashes),
                span(|x| x.recovery_hashes),
                row.server_additions
            ),
        );
    }
    say(out, format_args!(""));
    say(
        out,
        format_args!("mode,m,payload_bytes,wire_bytes,payload_mb"),
    );
    for row in bench_bytes(args.dim)? {
        let name = match row.mode {
            Mode::Scaling => "scaling",
            Mode::Quant8 => "quant8",
            Mode::Quant16 => "quant16",
        };
        say(
            out,
            format_args!(
                "{name},{},{},{},{:.3}",
                args.dim,
                row.payload_bytes,
                row.wire_bytes,
                row.payload_bytes as f64 / (1024.0 * 1024.0)
            ),
        );
    }
    Ok(())
}

fn parse_vk(bytes: &[u8], what: &str) -> Result<VerifyingKey, CliError> {
    let arr: [u8; 32] = bytes
        .try_into()
        .map_err(|_| CliError::Usage(format!("{what}: verification key must be 32 bytes")))?;
    VerifyingKey::from_bytes(&arr).map_err(|e| CliError::Usage(format!("{what}: {e}")))
}

fn verify(args: VerifyArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let vk_hex = read_file(&args.vk)?;
    let vk_bytes = from_hex(vk_hex.trim())
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.vk.display())))?;
    let vk = parse_vk(&vk_bytes, &args.vk.display().to_string())?;
    let registry = read_file(&args.registry)?;
    let entries = parse_registry(&registry)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.registry.display())))?;
    let mut keys = BTreeMap::new();
    for (id, bytes) in entries {
        keys.insert(id, parse_vk(&bytes, &format!("client {id}"))?);
    }
    let text = std::fs::read(&args.transcript).map_err(io_err(&args.transcript))?;
    let report = verify_transcript(&text, &vk, &keys);
    match report.failure {
        None => {
            say(out, format_args!("accepted: {} records", report.verified));
            Ok(())
        }
        Some((index, reason)) => Err(CliError::Rejected { index, reason }),
    }
}

fn keygen(args: KeygenArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    std::fs::create_dir_all(&args.out_dir).map_err(io_err(&args.out_dir))?;
    let params = GroupParams::variant(cfg.group);
    let mut dh = Vec::new();
    for id in 1..=cfg.clients {
        let keys = gen_keypair(&params, id, cfg.seed.as_bytes())
            .map_err(|e| CliError::Usage(format!("client {id}: {e}")))?;
        dh.push((id, keys.public_key().clone()));
    }
    let (vk, clients) = audit_keys(&cfg);
    let signing: Vec<(u64, [u8; 32])> = clients.iter().map(|(id, k)| (*id, k.to_bytes())).collect();

    let files = [
        ("enclave.vk", format!("{}\n", to_hex(vk.as_bytes()))),
        (
            "signing.registry",
            format_registry(signing.iter().map(|(id, k)| (*id, k.as_slice()))),
        ),
        (
            "dh.registry",
            format_pk_registry(&params, dh.iter().map(|(id, pk)| (*id, pk))),
        ),
    ];
    for (name, contents) in files {
        let path = args.out_dir.join(name);
        write_file(&path, &contents)?;
        say(out, format_args!("wrote {}", path.display()));
    }
    Ok(())
}
