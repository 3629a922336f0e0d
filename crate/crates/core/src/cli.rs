//! The `branchflow` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::app::{self, App};
use crate::config::Config;
use crate::costmodel::CostScenario;
use crate::gateway::{Hook, DELIVERY_HEADER, EVENT_HEADER};
use crate::scenario::{Fixture, Scenario};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

const REMOTE_WAIT: Duration = Duration::from_secs(120);

#[derive(Debug, Parser)]
#[command(name = "branchflow", version, about = "Per-branch build, deploy and test environments driven by webhooks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Start the webhook gateway, engine and status API.
    Serve {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Deliver a recorded webhook fixture to a running server.
    Inject {
        fixture: PathBuf,
        #[command(flatten)]
        remote: Remote,
        /// Return as soon as the hook answers instead of waiting for the
        /// engine to go idle.
        #[arg(long)]
        no_wait: bool,
    },
    /// List live environments on a running server.
    Envs {
        #[command(flatten)]
        remote: Remote,
    },
    /// Tear down a ref's environment through the cleanup pipeline.
    StopEnv {
        /// Branch name, or pull request number with --pr.
        #[arg(value_name = "REF")]
        name: String,
        #[arg(long)]
        pr: bool,
        #[command(flatten)]
        remote: Remote,
    },
    /// Print the monthly cost estimate for a scenario file.
    EstimateCost {
        scenario: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run a scripted simulator scenario in-process and print the final state.
    Replay {
        scenario: PathBuf,
        /// Keep workspaces here instead of a temporary directory.
        #[arg(long)]
        storage: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Remote {
    /// Config file of the running server; supplies address and token.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Base URL of the server, e.g. http://127.0.0.1:8080.
    #[arg(long)]
    server: Option<String>,
    #[arg(long)]
    token: Option<String>,
}

struct Target {
    base: String,
    token: Option<String>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_FAILURE,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl Remote {
    fn resolve(&self) -> Result<Target, CliError> {
        let cfg = match &self.config {
            Some(p) => Some(Config::load(p).map_err(|e| CliError::Usage(e.to_string()))?),
            None => None,
        };
        let base = match (&self.server, &cfg) {
            (Some(s), _) => s.clone(),
            (None, Some(c)) => format!("http://{}", c.bind.addr()),
            (None, None) => return Err(CliError::Usage("pass --config or --server".into())),
        };
        let token = self.token.clone().or_else(|| cfg.map(|c| c.hook_token));
        Ok(Target { base: base.trim_end_matches('/').to_owned(), token })
    }
}

impl Target {
    fn token(&self) -> Result<&str, CliError> {
        self.token.as_deref().ok_or_else(|| CliError::Usage("hook token unknown: pass --config or --token".into()))
    }

    async fn post_hook(
        &self,
        client: &reqwest::Client,
        hook: Hook,
        event: Option<&str>,
        delivery: Option<&str>,
        body: Vec<u8>,
    ) -> Result<(u16, Value), CliError> {
        let mut req = client
            .post(format!("{}{}", self.base, hook.path()))
            .query(&[("token", self.token()?)])
            .header("content-type", "application/json")
            .body(body);
        if let Some(e) = event {
            req = req.header(EVENT_HEADER, e);
        }
        if let Some(d) = delivery {
            req = req.header(DELIVERY_HEADER, d);
        }
        let resp = req.send().await.map_err(runtime)?;
        let status = resp.status().as_u16();
        let body = resp.json().await.unwrap_or(Value::Null);
        Ok((status, body))
    }

    async fn get(&self, client: &reqwest::Client, path: &str) -> Result<(u16, Value), CliError> {
        let resp = client.get(format!("{}{path}", self.base)).send().await.map_err(runtime)?;
        let status = resp.status().as_u16();
        Ok((status, resp.json().await.unwrap_or(Value::Null)))
    }

    async fn wait_idle(&self, client: &reqwest::Client) -> Result<(), CliError> {
        let start = Instant::now();
        loop {
            let (_, health) = self.get(client, "/healthz").await?;
            if health["idle"] == Value::Bool(true) {
                return Ok(());
            }
            if start.elapsed() > REMOTE_WAIT {
                return Err(CliError::Runtime("server did not go idle in time".into()));
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (CliError::Usage(msg) | CliError::Runtime(msg)) = &e;
            eprintln!("branchflow: {msg}");
            e.code()
        }
    }
}

fn rt() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime)
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Serve { config } => serve(&config),
        Command::Inject { fixture, remote, no_wait } => inject(&fixture, &remote, no_wait),
        Command::Envs { remote } => envs(&remote),
        Command::StopEnv { name, pr, remote } => stop_env(&name, pr, &remote),
        Command::EstimateCost { scenario, json } => estimate_cost(&scenario, json),
        Command::Replay { scenario, storage } => replay(&scenario, storage.as_deref()),
    }
}

fn serve(config: &Path) -> Result<(), CliError> {
    let cfg = Config::load(config).map_err(|e| CliError::Usage(e.to_string()))?;
    let _ = tracing_subscriber::fmt().with_writer(std::io::stderr).try_init();
    rt()?.block_on(async {
        let app = App::build(&cfg).map_err(runtime)?;
        let listener = app::bind(&cfg).await.map_err(runtime)?;
        let addr = listener.local_addr().map_err(runtime)?;
        println!("listening on http://{addr}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        let result = app.serve(listener, shutdown).await.map_err(runtime);
        app.shutdown();
        result
    })
}

fn inject(path: &Path, remote: &Remote, no_wait: bool) -> Result<(), CliError> {
    let fixture = Fixture::load(path).map_err(|e| CliError::Usage(e.to_string()))?;
    let target = remote.resolve()?;
    rt()?.block_on(async {
        let client = reqwest::Client::new();
        let (status, body) = target
            .post_hook(&client, fixture.hook, fixture.event.as_deref(), fixture.delivery.as_deref(), fixture.body())
            .await?;
        println!("{status} {body}");
        if !matches!(status, 200 | 202) {
            return Err(CliError::Runtime(format!("hook answered {status}")));
        }
        if !no_wait {
            target.wait_idle(&client).await?;
        }
        Ok(())
    })
}

fn envs(remote: &Remote) -> Result<(), CliError> {
    let target = remote.resolve()?;
    rt()?.block_on(async {
        let (status, body) = target.get(&reqwest::Client::new(), "/environments").await?;
        if status != 200 {
            return Err(CliError::Runtime(format!("status API answered {status}")));
        }
        let list = body.as_array().cloned().unwrap_or_default();
        if list.is_empty() {
            println!("no live environments");
        }
        for e in list {
            println!(
                "{}\thttp://{}:{}\t{}\t{}",
                e["ref"]["name"].as_str().unwrap_or("?"),
                e["endpoint"]["host"].as_str().unwrap_or("?"),
                e["endpoint"]["port"],
                e["task_id"].as_str().unwrap_or("?"),
                e["created_by_run"].as_str().unwrap_or("?"),
            );
        }
        Ok(())
    })
}

fn stop_env(name: &str, pr: bool, remote: &Remote) -> Result<(), CliError> {
    if name.is_empty() {
        return Err(CliError::Usage("ref name must not be empty".into()));
    }
    let (event, payload) = if pr {
        let number: u64 = name.parse().map_err(|_| CliError::Usage(format!("`{name}` is not a PR number")))?;
        ("pull_request", json!({ "action": "closed", "number": number }))
    } else {
        ("delete", json!({ "ref": name, "ref_type": "branch" }))
    };
    let target = remote.resolve()?;
    let delivery = format!("stop-env-{}", uuid::Uuid::new_v4());
    rt()?.block_on(async {
        let client = reqwest::Client::new();
        let (status, body) = target
            .post_hook(&client, Hook::Lifecycle, Some(event), Some(&delivery), serde_json::to_vec(&payload).unwrap())
            .await?;
        if status != 200 {
            return Err(CliError::Runtime(format!("hook answered {status}: {body}")));
        }
        let start = Instant::now();
        loop {
            let (status, record) = target.get(&client, &format!("/cleanups/{delivery}")).await?;
            if status == 200 {
                println!("{} stopped", record["stopped_count"]);
                return Ok(());
            }
            if start.elapsed() > REMOTE_WAIT {
                return Err(CliError::Runtime("cleanup did not finish in time".into()));
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    })
}

fn estimate_cost(path: &Path, as_json: bool) -> Result<(), CliError> {
    let scenario = CostScenario::load(path).map_err(|e| CliError::Usage(e.to_string()))?;
    let est = scenario.estimate().map_err(|e| CliError::Usage(e.to_string()))?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&est).expect("estimate serializes"));
        return Ok(());
    }
    if !scenario.description.is_empty() {
        println!("{}", scenario.description);
    }
    for (k, v) in &est.breakdown {
        println!("{k:<14}{v:>12.2}");
    }
    println!("{:<14}{:>12.2} USD/month", "total", est.total);
    Ok(())
}

fn replay(path: &Path, storage: Option<&Path>) -> Result<(), CliError> {
    let scenario = Scenario::load(path).map_err(|e| CliError::Usage(e.to_string()))?;
    let tmp = tempfile::tempdir().map_err(runtime)?;
    let root = storage.unwrap_or(tmp.path()).to_owned();
    let result = rt()?.block_on(scenario.replay(&root)).map_err(runtime)?;
    println!("{}", serde_json::to_string_pretty(&result).expect("result serializes"));
    if result.mismatches.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("scenario expectations not met: {}", result.mismatches.join("; "))))
    }
}
