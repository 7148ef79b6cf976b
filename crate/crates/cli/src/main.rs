//! `pmsr`: key generation, proposal signing, policy checks and simulator runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use pmsr_core::proposal::{
    decode_signed, encode_signed, from_authoring_text, sign_proposal, signing_key_from_seed,
    to_authoring_text, verify_proposal,
};
use pmsr_core::sim::ScenarioKind;
use pmsr_core::{ComputationProposal, Decision, PrivacyPolicy, ScenarioConfig, ScenarioReport};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exit code for any error that is not a decision or an outcome.
const EXIT_ERROR: u8 = 4;
const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "pmsr", version, about = "Private map / secure reduce toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an Ed25519 key pair as `<out>.key` and `<out>.pub` (hex).
    Keygen {
        #[arg(long)]
        out: PathBuf,
        /// Derive the key from this seed instead of the OS generator.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validate a TOML proposal and write the signed binary form.
    Propose {
        proposal: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify a signed proposal and print its fields in TOML form.
    Inspect { signed: PathBuf },
    /// Evaluate a policy file against a proposal (TOML or signed binary).
    /// Exit code 0 on Accept, 1 on Reject, 3 on NeedsApproval.
    PolicyCheck {
        policy: PathBuf,
        proposal: PathBuf,
        /// Proposer identity matched by `require_proposer_suffix` rules.
        #[arg(long)]
        identity: Option<String>,
    },
    /// Run a simulated scenario and write its report files.
    /// Exit code 0 if anything was released, 2 if every computation aborted.
    Sim {
        scenario: ScenarioKind,
        /// Base configuration as JSON; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_light: Option<u32>,
        #[arg(long)]
        n_heavy: Option<u32>,
        /// Minimum number of participants.
        #[arg(long)]
        threshold: Option<u32>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, env = "PMSR_SEED")]
        seed: Option<u64>,
        /// Output directory; defaults to `report-<scenario>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a stored report: summary line then the per-computation table.
    Report {
        /// `report.json` or the directory holding it.
        path: PathBuf,
        /// Print the full JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_ERROR)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Keygen { out, seed } => keygen(&out, seed),
        Command::Propose { proposal, key, out } => propose(&proposal, &key, &out),
        Command::Inspect { signed } => inspect(&signed),
        Command::PolicyCheck {
            policy,
            proposal,
            identity,
        } => policy_check(&policy, &proposal, identity.as_deref()),
        Command::Sim {
            scenario,
            config,
            n_light,
            n_heavy,
            threshold,
            dropout,
            epsilon,
            seed,
            out,
        } => {
            let mut cfg = match &config {
                Some(path) => {
                    let cfg: ScenarioConfig = serde_json::from_str(&read_text(path)?)
                        .with_context(|| format!("parsing {}", path.display()))?;
                    if cfg.name != scenario {
                        bail!("config is for scenario {}, not {scenario}", cfg.name);
                    }
                    cfg
                }
                None => ScenarioConfig::for_kind(scenario, DEFAULT_SEED),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(v) = n_light {
                cfg.n_light = v;
            }
            if let Some(v) = n_heavy {
                cfg.n_heavy = v;
            }
            if let Some(v) = threshold {
                cfg.min_participants = v;
            }
            if let Some(v) = dropout {
                cfg.dropout_rate = v;
            }
            if let Some(v) = epsilon {
                cfg.epsilon = Some(v);
            }
            let out = out.unwrap_or_else(|| PathBuf::from(format!("report-{scenario}")));
            sim(&cfg, &out)
        }
        Command::Report { path, json } => report(&path, json),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temporary file in {}", dir.display()))?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn keygen(out: &Path, seed: Option<u64>) -> Result<u8> {
    let mut secret = [0u8; 32];
    match seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s).fill_bytes(&mut secret),
        None => rand::rngs::OsRng.fill_bytes(&mut secret),
    }
    let public = signing_key_from_seed(&secret).verifying_key().to_bytes();
    write_atomic(
        &with_suffix(out, ".key"),
        format!("{}\n", hex::encode(secret)).as_bytes(),
    )?;
    write_atomic(
        &with_suffix(out, ".pub"),
        format!("{}\n", hex::encode(public)).as_bytes(),
    )?;
    println!("{}", hex::encode(public));
    Ok(0)
}

fn read_secret(path: &Path) -> Result<[u8; 32]> {
    let bytes = hex::decode(read_text(path)?.trim())
        .with_context(|| format!("{} is not hex", path.display()))?;
    bytes
        .try_into()
        .map_err(|_| anyhow!("{} must hold a 32-byte key", path.display()))
}

fn propose(proposal: &Path, key: &Path, out: &Path) -> Result<u8> {
    let p = from_authoring_text(&read_text(proposal)?)
        .with_context(|| format!("in {}", proposal.display()))?;
    let key = signing_key_from_seed(&read_secret(key)?);
    if key.verifying_key().to_bytes() != p.proposer {
        bail!("field `proposer` does not match the signing key");
    }
    let id = p.id;
    let signed = sign_proposal(p, &key)?;
    write_atomic(out, &encode_signed(&signed)?)?;
    println!("signed proposal {id} written to {}", out.display());
    Ok(0)
}

fn inspect(path: &Path) -> Result<u8> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let signed = decode_signed(&bytes)?;
    let valid = verify_proposal(&signed);
    eprintln!("signature: {}", if valid { "valid" } else { "INVALID" });
    print!("{}", to_authoring_text(&signed.proposal)?);
    Ok(if valid { 0 } else { 1 })
}

/// Accepts either the signed binary form or the TOML authoring form.
fn load_proposal(path: &Path) -> Result<ComputationProposal> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(b"PMSR") {
        let signed = decode_signed(&bytes)?;
        if !verify_proposal(&signed) {
            bail!("signature on {} does not verify", path.display());
        }
        return Ok(signed.proposal);
    }
    let text = String::from_utf8(bytes).context("proposal is neither signed binary nor UTF-8")?;
    from_authoring_text(&text).with_context(|| format!("in {}", path.display()))
}

fn policy_check(policy: &Path, proposal: &Path, identity: Option<&str>) -> Result<u8> {
    let policy = PrivacyPolicy::parse(&read_text(policy)?)
        .with_context(|| format!("in {}", policy.display()))?;
    let p = load_proposal(proposal)?;
    let decision = policy.evaluate(&p, &policy.ledger(), identity);
    let code = match &decision {
        Decision::Accept => {
            println!("Accept");
            0
        }
        Decision::Reject(rule) => {
            println!("Reject({rule})");
            1
        }
        Decision::NeedsApproval => {
            println!("NeedsApproval");
            3
        }
    };
    Ok(code)
}

fn sim(cfg: &ScenarioConfig, out: &Path) -> Result<u8> {
    cfg.validate()?;
    let report = pmsr_core::run_scenario(cfg)?;
    for (name, contents) in report.files()? {
        write_atomic(&out.join(name), contents.as_bytes())?;
    }
    println!("{}", report.summary_line());
    Ok(if report.released() > 0 { 0 } else { 2 })
}

fn report(path: &Path, json: bool) -> Result<u8> {
    let file = if path.is_dir() {
        path.join("report.json")
    } else {
        path.to_path_buf()
    };
    let report = ScenarioReport::from_json(&read_text(&file)?)
        .with_context(|| format!("in {}", file.display()))?;
    if json {
        print!("{}", report.to_json()?);
    } else {
        println!("{}", report.summary_line());
        print!("{}", report.computations_csv()?);
    }
    Ok(0)
}
