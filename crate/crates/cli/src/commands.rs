use std::fs;
use std::io::IsTerminal;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use parlor_core::backend::{EndpointBackend, EndpointConfig};
use parlor_core::batch::{run_batch, BatchError, BatchSpec, RunStatus, SUMMARY_JSONL, SURVEY_CSV};
use parlor_core::config::{parse_config, validate_cross_refs, ConfigError, ExperimentConfig, ValidationOptions};
use parlor_core::engine::{run_session, RunOptions};
use parlor_core::human::{ConsoleInput, HumanInput};
use parlor_core::participants::PersonFactory;
use parlor_core::transcript::{load_transcript_file, JsonlSink};
use parlor_gateway::AppState;

use crate::{render, CliError, Format};

pub const RUN_TRANSCRIPT: &str = "run.events.jsonl";

type CliResult = Result<(), CliError>;

fn describe(err: &ConfigError) -> String {
    let violations = err.violations();
    if violations.len() <= 1 {
        return err.to_string();
    }
    violations
        .iter()
        .map(|v| format!("{}: {}", v.path, v.message))
        .collect::<Vec<_>>()
        .join("\n")
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(CliError::User)?;
    parse_config(&text).map_err(|e| CliError::User(anyhow!("{}: {}", path.display(), describe(&e))))
}

pub fn validate(path: &Path) -> CliResult {
    let config = load_config(path)?;
    println!(
        "{}: ok ({} persons, host {}, end {})",
        path.display(),
        config.persons.len(),
        config.host.class,
        config.end.class
    );
    Ok(())
}

pub fn run(path: &Path, seed: Option<u64>, out: &Path, golden: bool) -> CliResult {
    let mut config = load_config(path)?;
    if seed.is_some() {
        config.seed = seed;
    }
    let options = ValidationOptions {
        human_input_available: std::io::stdin().is_terminal(),
    };
    validate_cross_refs(&config, &options).map_err(|v| {
        CliError::User(anyhow!(
            "{}",
            v.iter()
                .map(|v| format!("{}: {}", v.path, v.message))
                .collect::<Vec<_>>()
                .join("\n")
        ))
    })?;
    let human_input = (!config.human_slots().is_empty()).then(|| Arc::new(ConsoleInput::stdio()) as Arc<dyn HumanInput>);
    let factory = PersonFactory {
        endpoint: Some(EndpointBackend::new(EndpointConfig::from_env())),
        human_input,
        request_log: None,
    };
    let persons = factory.build_all(&config).map_err(|e| CliError::User(e.into()))?;
    fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(CliError::User)?;
    let file = out.join(RUN_TRANSCRIPT);
    let mut sink = JsonlSink::create(&file)
        .with_context(|| format!("cannot create {}", file.display()))
        .map_err(CliError::Runtime)?;
    let result = run_session(
        &config,
        persons,
        &mut sink,
        RunOptions {
            run_id: None,
            golden,
        },
    )
    .map_err(|e| CliError::Runtime(e.into()))?;
    println!(
        "{}: {} messages in {} turns, ended by {} ({} ms)",
        file.display(),
        result.history.len(),
        result.turn_count,
        result.end_reason,
        result.elapsed_ms
    );
    Ok(())
}

pub fn batch(path: &Path, runs: u64, seed: Option<u64>, parallel: usize, out: &Path, golden: bool) -> CliResult {
    let config = load_config(path)?;
    let spec = BatchSpec {
        runs,
        base_seed: seed,
        parallelism: parallel,
        out_dir: out.to_path_buf(),
        golden,
    };
    let factory = PersonFactory {
        endpoint: Some(EndpointBackend::new(EndpointConfig::from_env())),
        ..PersonFactory::default()
    };
    let summary = run_batch(&config, &factory, &spec).map_err(|e| match e {
        BatchError::Invalid(_) => CliError::User(e.into()),
        BatchError::Output { .. } => CliError::Runtime(e.into()),
    })?;
    for run in &summary.runs {
        match &run.status {
            RunStatus::Completed {
                end_reason, messages, ..
            } => println!("run {}: seed {} {} messages, ended by {}", run.index, run.seed, messages, end_reason),
            RunStatus::Failed(e) => println!("run {}: seed {} FAILED: {e}", run.index, run.seed),
        }
    }
    println!(
        "{} runs, {} failed; wrote {} and {}",
        summary.runs.len(),
        summary.failed(),
        out.join(SURVEY_CSV).display(),
        out.join(SUMMARY_JSONL).display()
    );
    if summary.failed() > 0 {
        return Err(CliError::Runtime(anyhow!("{} of {} runs failed", summary.failed(), summary.runs.len())));
    }
    Ok(())
}

pub fn serve(addr: &str, data_dir: &Path) -> CliResult {
    let state = AppState::new(data_dir, Some(EndpointBackend::new(EndpointConfig::from_env())))
        .with_context(|| format!("cannot use data directory {}", data_dir.display()))
        .map_err(CliError::User)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.into()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("cannot listen on {addr}"))
            .map_err(CliError::User)?;
        eprintln!("listening on http://{}", listener.local_addr().map_err(|e| CliError::Runtime(e.into()))?);
        parlor_gateway::serve(listener, state)
            .await
            .map_err(|e| CliError::Runtime(e.into()))
    })
}

pub fn replay(path: &Path, format: Format) -> CliResult {
    let view = load_transcript_file(path, None)
        .with_context(|| format!("cannot load {}", path.display()))
        .map_err(CliError::User)?;
    let text = match format {
        Format::Text => render::text(&view),
        Format::Table => render::table(&view),
    };
    print!("{text}");
    Ok(())
}
