use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oneaudit_core::assorter::Assertion;
use oneaudit_core::election::{verify_accounting, CardRecord};
use oneaudit_core::engine::{replay, AuditSession, MethodConfig, SessionInputs};
use oneaudit_core::error::{AuditError, Result};
use oneaudit_core::io::{self as audit_io, ElectionBundle, DATA_DIR_ENV};
use oneaudit_core::one::build_one_layout;
use oneaudit_core::risk::{AlphaConfig, Eta};
use oneaudit_core::sim::{self, GridCondition, GridConfig, Method, Scenario, Transform};
use oneaudit_core::{fixtures, risk::MeasuredRisk};
use serde_json::json;

const SESSION_FILE: &str = "session.jsonl";

#[derive(Parser)]
#[command(
    name = "oneaudit",
    version,
    about = "Risk-limiting audits with ONE CVRs"
)]
struct Cli {
    /// Directory holding contest.json, manifest.csv, subtotals.csv and cvrs.jsonl.
    #[arg(long, global = true, env = DATA_DIR_ENV, default_value = "data")]
    data_dir: PathBuf,

    /// Session transcript; defaults to session.jsonl in the data directory.
    #[arg(long, global = true)]
    session: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct AlphaArgs {
    /// Starting estimate as a fraction of the assorter's upper bound.
    #[arg(long, default_value_t = 0.99)]
    eta0: f64,
    /// Shrinkage weight; "inf" keeps the estimate fixed at eta0.
    #[arg(long, default_value = "500")]
    d: String,
    #[arg(long, default_value_t = 0.5)]
    c: f64,
    /// Shift overstatements so the smallest possible one is zero.
    #[arg(long)]
    translate: bool,
}

impl AlphaArgs {
    fn config(&self) -> Result<MethodConfig> {
        let d = match self.d.as_str() {
            "inf" | "infinity" => None,
            raw => Some(
                raw.parse::<f64>()
                    .map_err(|_| AuditError::invalid("d", format!("not a number: {raw}")))?,
            ),
        };
        Ok(MethodConfig {
            alpha: AlphaConfig::ShrinkTrunc {
                eta0: Eta::FractionOfUpper(self.eta0),
                d,
                c: self.c,
            },
            translate: self.translate,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the two-candidate example election into the data directory.
    Example {
        #[arg(long, default_value_t = 900)]
        major: u64,
        #[arg(long, default_value_t = 100)]
        minor: u64,
    },
    /// Reconcile card counts and tallies; exit 1 if they do not agree.
    Verify,
    /// Print the ONE CVR layout for every assertion.
    BuildOne,
    /// Estimate how many cards the audit will need.
    Plan {
        #[arg(long, default_value_t = 0.0)]
        error_rate: f64,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        alpha: AlphaArgs,
    },
    /// Start a session transcript.
    Open {
        #[arg(long)]
        seed: String,
        #[command(flatten)]
        alpha: AlphaArgs,
        /// Replace an existing transcript.
        #[arg(long)]
        force: bool,
    },
    /// Draw the next cards and print where to find them.
    Draw {
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    /// Record the hand interpretation of a drawn card.
    Record {
        #[arg(long)]
        ordinal: u64,
        /// Candidate name, or NO_VOTE for a card without a valid vote.
        #[arg(long, conflicts_with = "mvr_json")]
        mvr: Option<String>,
        /// A full card record as JSON.
        #[arg(long)]
        mvr_json: Option<String>,
    },
    /// Show measured risk per assertion.
    Risk {
        #[arg(long)]
        json: bool,
    },
    /// Rebuild a session from a transcript and check every line.
    Replay { transcript: Option<PathBuf> },
    /// Monte Carlo sample sizes for one method on a scenario.
    Simulate {
        /// alice-bob:MAJOR:MINOR or polarized:BATCHES:SIZE:WINNER_BATCHES:PURITY
        #[arg(long, default_value = "alice-bob:900:100")]
        scenario: String,
        /// one-clca, clca, bpa or blca
        #[arg(long, default_value = "one-clca")]
        method: String,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Flip votes until the reported winner really loses.
        #[arg(long)]
        wrong_outcome: bool,
        #[command(flatten)]
        alpha_args: AlphaArgs,
    },
    /// Distribution of the Kalamazoo pilot's measured risk over sample orders.
    Kalamazoo {
        #[arg(long, default_value_t = 10_000)]
        permutations: usize,
        #[arg(long, default_value_t = 0.99)]
        eta: f64,
        #[arg(long, default_value_t = 6)]
        seed: u64,
    },
    /// Sample-size grid comparing ALPHA on raw and ONE-transformed values.
    Grid {
        #[arg(long, value_delimiter = ',', default_value = "0.505,0.51,0.52,0.55")]
        theta: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,0.75")]
        blank: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        n: u64,
        #[arg(long, value_delimiter = ',', default_value = "0.505,0.51,0.52,0.55")]
        eta: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "10,100")]
        d: Vec<f64>,
        #[arg(long, default_value_t = 0.5)]
        c: f64,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Print geometric-mean scores instead of the table.
        #[arg(long)]
        score: bool,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

/// A transcript file held under an advisory lock for the whole command.
struct LockedSession {
    file: File,
    session: AuditSession,
}

impl LockedSession {
    fn load(path: &Path) -> Result<Self> {
        let mut file = match OpenOptions::new().read(true).write(true).open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(AuditError::WrongState {
                    status: "SETUP".into(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        lock(&file, path)?;
        let mut text = String::new();
        file.read_to_string(&mut text)?;
        let session = replay(&text)?;
        Ok(LockedSession { file, session })
    }

    fn save(&mut self) -> Result<()> {
        self.file.seek(SeekFrom::Start(0))?;
        self.file.set_len(0)?;
        self.file
            .write_all(self.session.transcript().render().as_bytes())?;
        self.file.sync_all()?;
        Ok(())
    }
}

fn lock(file: &File, path: &Path) -> Result<()> {
    file.try_lock()
        .map_err(|_| AuditError::Io(format!("{} is locked by another process", path.display())))
}

fn print_json(v: &impl serde::Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("serializable output")
    );
}

fn parse_scenario(raw: &str) -> Result<Scenario> {
    let bad = || AuditError::invalid("scenario", raw.to_owned());
    let mut parts = raw.split(':');
    let kind = parts.next().unwrap_or_default();
    let nums: Vec<u64> = parts
        .map(|p| p.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let s = match (kind, nums.as_slice()) {
        ("alice-bob", []) => Scenario::alice_bob(900, 100),
        ("alice-bob", [major, minor]) => Scenario::alice_bob(*major, *minor),
        ("polarized", [b, size, w, purity]) => Scenario::polarized(*b, *size, *w, *purity),
        _ => return Err(bad()),
    };
    s.validate()?;
    Ok(s)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let session_path = cli
        .session
        .clone()
        .unwrap_or_else(|| cli.data_dir.join(SESSION_FILE));
    let bundle = || audit_io::load_bundle(&cli.data_dir);
    match cli.command {
        Command::Example { major, minor } => {
            let b: ElectionBundle = fixtures::alice_bob(major, minor).into();
            audit_io::write_bundle(&cli.data_dir, &b)?;
            println!("{}", cli.data_dir.display());
        }
        Command::Verify => {
            let b = bundle()?;
            let report = verify_accounting(&b.results, &b.manifest, &b.contest);
            print_json(&json!({
                "result": if report.passed() { "PASS" } else { "FAIL" },
                "report": report,
            }));
            if !report.passed() {
                if let Some(first) = report.findings.first() {
                    eprintln!("{}", json!(first.to_json()));
                }
                return Ok(ExitCode::from(1));
            }
        }
        Command::BuildOne => {
            let b = bundle()?;
            let layouts = Assertion::for_contest(&b.contest, &b.results)?
                .iter()
                .map(|a| build_one_layout(a, &b.results, &b.manifest))
                .collect::<Result<Vec<_>>>()?;
            print_json(&layouts);
        }
        Command::Plan {
            error_rate,
            reps,
            seed,
            alpha,
        } => {
            let b = bundle()?;
            let session = AuditSession::open(SessionInputs {
                contest: b.contest,
                manifest: b.manifest,
                results: b.results,
                seed: String::new(),
                method: alpha.config()?,
            })?;
            print_json(&session.plan_sample_size(error_rate, reps, seed)?);
        }
        Command::Open { seed, alpha, force } => {
            let b = bundle()?;
            let session = AuditSession::open(SessionInputs {
                contest: b.contest,
                manifest: b.manifest,
                results: b.results,
                seed,
                method: alpha.config()?,
            })?;
            let mut opts = OpenOptions::new();
            opts.write(true);
            if force {
                opts.create(true);
            } else {
                opts.create_new(true);
            }
            let mut file = opts
                .open(&session_path)
                .map_err(|e| AuditError::Io(format!("{}: {e}", session_path.display())))?;
            lock(&file, &session_path)?;
            file.set_len(0)?;
            file.write_all(session.transcript().render().as_bytes())?;
            print_json(&session.summary());
        }
        Command::Draw { count } => {
            let mut ls = LockedSession::load(&session_path)?;
            let mut drawn = Vec::new();
            let mut failure = None;
            for _ in 0..count {
                match ls.session.draw_next() {
                    Ok(d) => drawn.push(d),
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            ls.save()?;
            for d in &drawn {
                println!("{}", serde_json::to_string(d).expect("serializable"));
            }
            if let Some(e) = failure {
                return Err(e);
            }
        }
        Command::Record {
            ordinal,
            mvr,
            mvr_json,
        } => {
            let mut ls = LockedSession::load(&session_path)?;
            let record = match (mvr, mvr_json) {
                (_, Some(raw)) => serde_json::from_str::<CardRecord>(&raw)
                    .map_err(|e| AuditError::invalid("mvr", e.to_string()))?,
                (Some(vote), None) => {
                    let contest = &ls.session.inputs.contest.id;
                    let vote = (vote != "NO_VOTE").then_some(vote.as_str());
                    // an undrawn ordinal gets an empty record and the engine
                    // reports why it cannot be recorded
                    match ls.session.draws.get(&ordinal) {
                        Some(d) => d.interpretation(contest, vote),
                        None => CardRecord::new(""),
                    }
                }
                (None, None) => return Err(AuditError::invalid("mvr", "give --mvr or --mvr-json")),
            };
            let updates = ls.session.record_mvr(ordinal, record)?;
            ls.save()?;
            print_json(&json!({"status": ls.session.status, "updates": updates}));
        }
        Command::Risk { json } => {
            let ls = LockedSession::load(&session_path)?;
            let summary = ls.session.summary();
            if json {
                print_json(&summary);
            } else {
                println!(
                    "status {}  draws {}  recorded {}",
                    summary.status.as_str(),
                    summary.draws,
                    summary.recorded
                );
                println!(
                    "{:<24} {:>8} {:>14} {:>6}  passed",
                    "assertion", "samples", "risk", "limit"
                );
                for a in &ls.session.assertions {
                    println!(
                        "{:<24} {:>8} {:>14.6e} {:>6} {}",
                        a.assertion.id,
                        a.risk.draws,
                        a.risk.measured_risk(),
                        a.risk_limit,
                        a.passed
                    );
                }
            }
        }
        Command::Replay { transcript } => {
            let path = transcript.unwrap_or(session_path);
            let text = fs::read_to_string(&path)
                .map_err(|e| AuditError::Io(format!("{}: {e}", path.display())))?;
            let session = replay(&text)?;
            print_json(&json!({
                "result": "IDENTICAL",
                "events": session.transcript().len(),
                "summary": session.summary(),
            }));
        }
        Command::Simulate {
            scenario,
            method,
            reps,
            alpha,
            seed,
            wrong_outcome,
            alpha_args,
        } => {
            let mut s = parse_scenario(&scenario)?;
            if wrong_outcome {
                s = s.with_wrong_outcome();
            }
            let method = Method::parse(&method)?;
            let cfg = alpha_args.config()?;
            print_json(&sim::run_expected_sample_size(
                &s, method, &cfg.alpha, alpha, reps, seed,
            )?);
        }
        Command::Kalamazoo {
            permutations,
            eta,
            seed,
        } => print_json(&sim::run_kalamazoo(permutations, eta, seed)?),
        Command::Grid {
            theta,
            blank,
            n,
            eta,
            d,
            c,
            reps,
            alpha,
            seed,
            score,
        } => {
            let conditions: Vec<GridCondition> = theta
                .iter()
                .flat_map(|&theta| {
                    blank
                        .iter()
                        .map(move |&blank| GridCondition { theta, blank, n })
                })
                .collect();
            let configs: Vec<GridConfig> = [Transform::Raw, Transform::OneAudit]
                .into_iter()
                .flat_map(|transform| {
                    let d = d.clone();
                    eta.iter().flat_map(move |&eta| {
                        d.clone().into_iter().map(move |d| GridConfig {
                            transform,
                            eta,
                            d: Some(d),
                            c,
                        })
                    })
                })
                .collect();
            let table = sim::run_grid(&conditions, &configs, alpha, reps, seed)?;
            if score {
                print_json(&sim::score_geometric_mean(&table)?);
            } else {
                print!("{}", table.to_csv());
            }
        }
        Command::Serve { port, host } => {
            let addr = SocketAddr::new(host, port);
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("listening on http://{addr}");
            rt.block_on(oneaudit_service::serve(addr))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", json!(e.to_json()));
            ExitCode::from(1)
        }
    }
}
