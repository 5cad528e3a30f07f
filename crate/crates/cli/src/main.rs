use std::collections::HashMap;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rosproxy::config::{self, ProxyArgs};
use rosproxy::proxy::{EXIT_CONFIG, EXIT_RUNTIME};
use rosproxy_sim::{Mode, Scenario, ScenarioOptions};
use tracing_subscriber::EnvFilter;

/// Transparent ROS 1 proxy between an isolated network segment and an
/// external ROS master.
///
/// Without a subcommand the proxy runs with the given flags.
#[derive(Debug, Parser)]
#[command(name = "rosproxy", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    proxy: ProxyArgs,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Run the proxy until SIGINT or SIGTERM.
    Run(ProxyArgs),
    /// In-process end-to-end scenarios.
    Harness {
        #[command(subcommand)]
        command: HarnessCommand,
    },
}

#[derive(Debug, Subcommand)]
enum HarnessCommand {
    /// Run one scenario and print a key=value report.
    Run {
        /// fig1, fig1_listener_first, fig1_inbound, service_call or stale_node
        scenario: Scenario,
        /// Nodes talk to the master directly.
        #[arg(long, conflicts_with = "proxied")]
        direct: bool,
        /// Internal nodes go through the proxy (default).
        #[arg(long)]
        proxied: bool,
    },
    /// List scenario names.
    List,
}

fn init_logging(default_level: &str) {
    let filter =
        EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(u8::try_from(code).unwrap_or(1))
}

fn run_proxy(args: &ProxyArgs) -> ExitCode {
    let env: HashMap<String, String> = std::env::vars().collect();
    let config = match config::from_sources(&env, args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("rosproxy: {e}");
            return exit(EXIT_CONFIG);
        }
    };
    init_logging(&config.log_level.to_string().to_lowercase());
    match runtime() {
        Ok(rt) => exit(rt.block_on(rosproxy::run(config))),
        Err(e) => {
            eprintln!("rosproxy: cannot start runtime: {e}");
            exit(EXIT_RUNTIME)
        }
    }
}

fn run_scenario(scenario: Scenario, mode: Mode) -> ExitCode {
    init_logging("warn");
    let rt = match runtime() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("rosproxy: cannot start runtime: {e}");
            return exit(EXIT_RUNTIME);
        }
    };
    let report = rt.block_on(rosproxy_sim::scenario::run(
        scenario,
        mode,
        &ScenarioOptions::default(),
    ));
    print!("{}", report.render());
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        None => run_proxy(&cli.proxy),
        Some(Command::Run(args)) => run_proxy(&args),
        Some(Command::Harness { command }) => match command {
            HarnessCommand::Run {
                scenario, direct, ..
            } => run_scenario(scenario, if direct { Mode::Direct } else { Mode::Proxied }),
            HarnessCommand::List => {
                for s in Scenario::ALL {
                    println!("{s}");
                }
                ExitCode::SUCCESS
            }
        },
    }
}
