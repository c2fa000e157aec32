use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use cuelens_core::affect::{evaluate, train_with_history, AffectError, ClassifierModel, LabeledDataset};
use cuelens_core::journal::{parse_journal, Record, SessionJournal, MAGIC};
use cuelens_core::metrics::session_summary;
use cuelens_core::pipeline::{replay, Pipeline, PipelineConfig};
use cuelens_core::synth::{make_training_set, ExpressionTemplates, Scenario, ScriptedExpression, ScriptedSpeech};
use cuelens_core::vision::ReferenceFaceModel;
use cuelens_core::{ExpressionLabel, GameTrial, LandmarkFrame, SessionMeta, SpeechActivitySpan};
use cuelens_link::client::{stream_frames, LinkClient, StreamOptions, StreamOutcome};
use cuelens_link::clock::SystemClock;
use cuelens_link::session::{run_link_session, EndReason, LinkReport, LinkSessionConfig};
use cuelens_link::transport::{MemoryTransport, TcpTransport, Transport};
use cuelens_review::{ReviewConfig, ReviewService};
use serde_json::{json, Value};

use crate::config::{Config, LinkTransport};
use crate::CliError;

const HANDSHAKE_WAIT: Duration = Duration::from_secs(5);

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn path_value(path: Option<&Path>) -> Value {
    path.map_or(Value::Null, |p| Value::String(p.display().to_string()))
}

/// The configured classifier, or one trained on the synthetic set.
pub fn load_model(config: &Config, seed: Option<u64>) -> Result<ClassifierModel, CliError> {
    if let Some(path) = &config.affect.model {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read model {}: {e}", path.display())))?;
        return ClassifierModel::from_json(&text)
            .map_err(|e| CliError::Config(format!("invalid model {}: {e}", path.display())));
    }
    let mut params = config.affect.hyperparams;
    if let Some(s) = seed {
        params.seed = s;
    }
    eprintln!(
        "no affect.model configured; training on {} synthetic examples per class (seed {})",
        config.affect.synth_per_class, params.seed
    );
    let data = make_training_set(
        config.affect.synth_per_class,
        config.affect.synth_noise_sigma,
        params.seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    train_with_history(&data, &params)
        .map(|(m, _)| m)
        .map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn face_model(config: &Config) -> Result<ReferenceFaceModel, CliError> {
    match &config.vision.face_model {
        None => Ok(ReferenceFaceModel::builtin()),
        Some(path) => ReferenceFaceModel::load(path)
            .map_err(|e| CliError::Config(format!("invalid face model {}: {e}", path.display()))),
    }
}

fn pipeline_config(config: &Config) -> PipelineConfig {
    PipelineConfig {
        events: config.events.clone(),
        calibration_frames: config.vision.calibration_frames,
    }
}

fn build_pipeline(config: &Config, model: &ClassifierModel) -> Result<Pipeline, CliError> {
    Pipeline::new(model.clone(), face_model(config)?, &pipeline_config(config))
        .map_err(|e| CliError::Config(e.to_string()))
}

/// Raw inputs of one session: what a device would have recorded.
struct SessionInput {
    meta: SessionMeta,
    frames: Vec<LandmarkFrame>,
    speech: Vec<SpeechActivitySpan>,
    trials: Vec<GameTrial>,
}

fn read_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| input_err(path, e))?;
    let mut scenario = Scenario::from_json(&text).map_err(|e| input_err(path, e))?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    Ok(scenario)
}

fn generate(scenario: &Scenario) -> Result<SessionInput, CliError> {
    let s = scenario
        .generate(&ExpressionTemplates::builtin())
        .map_err(|e| CliError::Input(e.to_string()))?;
    Ok(SessionInput {
        meta: s.meta,
        frames: s.frames,
        speech: s.speech,
        trials: s.game_trials,
    })
}

/// A journal (recognized by its magic) or a scenario JSON document.
fn read_session_input(path: &Path, seed: Option<u64>) -> Result<SessionInput, CliError> {
    let bytes = std::fs::read(path).map_err(|e| input_err(path, e))?;
    if !bytes.starts_with(&MAGIC) {
        return generate(&read_scenario(path, seed)?);
    }
    let journal = parse_journal(&bytes).map_err(|e| input_err(path, e))?;
    Ok(SessionInput {
        meta: journal.meta().clone(),
        frames: journal.frames().cloned().collect(),
        speech: journal.speech_spans().cloned().collect(),
        trials: journal.game_trials().cloned().collect(),
    })
}

fn raw_journal(input: &SessionInput) -> Result<SessionJournal, CliError> {
    let mut records = vec![Record::SessionMeta(input.meta.clone())];
    records.extend(input.frames.iter().cloned().map(Record::Landmarks));
    let mut speech = input.speech.clone();
    speech.sort_by_key(|s| (s.start, s.end));
    records.extend(speech.into_iter().map(Record::SpeechSpan));
    records.extend(input.trials.iter().cloned().map(Record::GameTrial));
    SessionJournal::from_records(records).map_err(|e| CliError::Input(e.to_string()))
}

fn journal_bytes(journal: &SessionJournal) -> Result<Vec<u8>, CliError> {
    journal.to_bytes().map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn run(config: &Config, input: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<Value, CliError> {
    let session = read_session_input(input, seed)?;
    let model = load_model(config, seed)?;
    let mut pipeline = build_pipeline(config, &model)?;
    let frames = session.frames.len();
    let journal = replay(
        &mut pipeline,
        session.meta,
        session.frames,
        &session.speech,
        &session.trials,
    )
    .map_err(|e| input_err(input, e))?;
    if let Some(out) = out {
        write_output(out, &journal_bytes(&journal)?)?;
    }
    let metrics = session_summary(&journal).map_err(|e| input_err(input, e))?;
    let issued = journal.cues().filter(|c| !c.suppressed).count();
    Ok(json!({
        "session_id": journal.meta().id,
        "frames": frames,
        "events": journal.events().count(),
        "cues_issued": issued,
        "cues_suppressed": journal.cues().count() - issued,
        "journal": path_value(out),
        "metrics": metrics,
    }))
}

fn read_dataset(path: &Path) -> Result<LabeledDataset, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| input_err(path, e))?;
    let data: LabeledDataset = serde_json::from_str(&text).map_err(|e| input_err(path, e))?;
    if data.is_empty() {
        return Err(input_err(path, AffectError::EmptyDataset));
    }
    Ok(data)
}

pub fn train(config: &Config, input: Option<&Path>, out: Option<&Path>, seed: Option<u64>) -> Result<Value, CliError> {
    let mut params = config.affect.hyperparams;
    if let Some(s) = seed {
        params.seed = s;
    }
    let data = match input {
        Some(path) => read_dataset(path)?,
        None => make_training_set(
            config.affect.synth_per_class,
            config.affect.synth_noise_sigma,
            params.seed,
        )
        .map_err(|e| CliError::Config(e.to_string()))?,
    };
    let (model, history) = train_with_history(&data, &params).map_err(|e| CliError::Input(e.to_string()))?;
    let eval = evaluate(&model, &data).map_err(|e| CliError::Input(e.to_string()))?;
    if let Some(out) = out {
        write_output(out, model.to_json().as_bytes())?;
    }
    Ok(json!({
        "provenance": data.provenance,
        "examples": data.len(),
        "hyperparams": params,
        "final_loss": history.last().copied(),
        "training_evaluation": eval,
        "model": path_value(out),
    }))
}

pub fn eval(config: &Config, input: &Path, model: Option<&Path>, seed: Option<u64>) -> Result<Value, CliError> {
    let data = read_dataset(input)?;
    let model = match model {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| input_err(path, e))?;
            ClassifierModel::from_json(&text).map_err(|e| input_err(path, e))?
        }
        None => load_model(config, seed)?,
    };
    let eval = evaluate(&model, &data).map_err(|e| input_err(input, e))?;
    Ok(json!({
        "provenance": data.provenance,
        "evaluation": eval,
    }))
}

pub fn synth(
    config: &Config,
    scenario: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    per_class: Option<usize>,
    sigma: Option<f64>,
) -> Result<Value, CliError> {
    if let Some(path) = scenario {
        let scenario = read_scenario(path, seed)?;
        let truth = scenario.ground_truth();
        let input = generate(&scenario)?;
        let frames = input.frames.len();
        write_output(out, &journal_bytes(&raw_journal(&input)?)?)?;
        return Ok(json!({
            "session_id": input.meta.id,
            "frames": frames,
            "ground_truth": truth,
            "journal": out.display().to_string(),
        }));
    }
    let per_class = per_class.unwrap_or(config.affect.synth_per_class);
    let sigma = sigma.unwrap_or(config.affect.synth_noise_sigma);
    let seed = seed.unwrap_or(config.affect.hyperparams.seed);
    let data = make_training_set(per_class, sigma, seed).map_err(|e| CliError::Input(e.to_string()))?;
    let text = serde_json::to_string(&data).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_output(out, text.as_bytes())?;
    Ok(json!({
        "provenance": data.provenance,
        "examples": data.len(),
        "dataset": out.display().to_string(),
    }))
}

pub fn metrics(
    config: &Config,
    input: Option<&Path>,
    data_dir: Option<&Path>,
    subject: Option<&str>,
) -> Result<Value, CliError> {
    match (input, subject) {
        (Some(path), None) => {
            let bytes = std::fs::read(path).map_err(|e| input_err(path, e))?;
            let journal = parse_journal(&bytes).map_err(|e| input_err(path, e))?;
            let m = session_summary(&journal).map_err(|e| input_err(path, e))?;
            serde_json::to_value(m).map_err(|e| CliError::Runtime(e.to_string()))
        }
        (None, Some(subject)) => {
            let dir = data_dir.unwrap_or(&config.storage.data_dir);
            let service = ReviewService::new(ReviewConfig::new(dir));
            let view = service.progress(subject).map_err(|e| CliError::Input(e.to_string()))?;
            serde_json::to_value(view).map_err(|e| CliError::Runtime(e.to_string()))
        }
        _ => Err(CliError::Usage(
            "metrics needs exactly one of --input or --subject".into(),
        )),
    }
}

pub fn serve(
    config: &Config,
    data_dir: Option<PathBuf>,
    bind: Option<String>,
    port: Option<u16>,
) -> Result<(), CliError> {
    let data_dir = data_dir.unwrap_or_else(|| config.storage.data_dir.clone());
    if !data_dir.is_dir() {
        return Err(CliError::Input(format!(
            "data directory {} is not readable",
            data_dir.display()
        )));
    }
    let addr = format!(
        "{}:{}",
        bind.unwrap_or_else(|| config.service.bind.clone()),
        port.unwrap_or(config.service.port)
    );
    let mut review = ReviewConfig::new(&data_dir);
    review.highlight_pad = config.service.highlight_pad_ms * 1_000;
    review.max_track_points = config.service.max_track_points;
    let service = Arc::new(ReviewService::new(review));

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        crate::emit(&json!({ "listening": local.to_string(), "data_dir": data_dir.display().to_string() }))?;
        eprintln!("serving {} on http://{local}/api/v1", data_dir.display());
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        cuelens_review::http::serve(listener, service, shutdown)
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}

/// Built-in link-demo scenario: 20 s with two scripted expressions.
pub fn demo_scenario(seed: u64) -> Scenario {
    let mut s = Scenario::neutral(20_000);
    s.session_id = "link-demo".into();
    s.noise_sigma = 0.001;
    s.seed = seed;
    for (label, start_ms) in [(ExpressionLabel::Happiness, 3_000), (ExpressionLabel::Surprise, 11_000)] {
        s.script.push(ScriptedExpression {
            label,
            start_ms,
            end_ms: start_ms + 3_000,
            intensity: 1.0,
        });
    }
    s.speech_spans.push(ScriptedSpeech {
        speaker_id: "caregiver".into(),
        start_ms: 1_000,
        end_ms: 6_000,
    });
    s
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[u64], p: f64) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank - 1])
}

fn latency_summary(values: &[u64]) -> Value {
    json!({
        "count": values.len(),
        "p50": percentile(values, 50.0),
        "p95": percentile(values, 95.0),
        "max": values.iter().max(),
    })
}

fn end_reason_name(r: EndReason) -> &'static str {
    match r {
        EndReason::SessionEnd => "session_end",
        EndReason::HeartbeatTimeout => "heartbeat_timeout",
        EndReason::TransportClosed => "transport_closed",
    }
}

pub struct LinkDemoArgs<'a> {
    pub scenario: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub seed: Option<u64>,
    pub drop_after_secs: Option<f64>,
    pub bind: Option<String>,
    pub port: Option<u16>,
    pub no_pace: bool,
}

fn drive_client<T: Transport>(
    transport: T,
    meta: SessionMeta,
    frames: Vec<LandmarkFrame>,
    clock: &SystemClock,
    options: &StreamOptions,
) -> (LinkClient<T>, Result<StreamOutcome, CliError>) {
    let mut client = LinkClient::new(transport);
    if let Err(e) = client.hello(meta, HANDSHAKE_WAIT) {
        return (client, Err(CliError::Runtime(format!("handshake failed: {e}"))));
    }
    let outcome = stream_frames(&mut client, frames, clock, options)
        .map_err(|e| CliError::Runtime(format!("streaming failed: {e}")));
    (client, outcome)
}

pub fn link_demo(config: &Config, args: LinkDemoArgs<'_>) -> Result<Value, CliError> {
    let scenario = match args.scenario {
        Some(path) => read_scenario(path, args.seed)?,
        None => demo_scenario(args.seed.unwrap_or(0)),
    };
    if let Some(d) = args.drop_after_secs {
        if !(d >= 0.0 && d.is_finite()) {
            return Err(CliError::Usage(
                "--drop-after must be a non-negative number of seconds".into(),
            ));
        }
    }
    let input = generate(&scenario)?;
    let model = load_model(config, args.seed)?;
    let server_pipeline = build_pipeline(config, &model)?;
    let mut offline_pipeline = build_pipeline(config, &model)?;

    let frame_interval = Duration::from_secs_f64(1.0 / scenario.frame_rate_hz);
    let options = StreamOptions {
        pace: (!args.no_pace).then_some(frame_interval),
        drop_after: args.drop_after_secs.map(|s| {
            input
                .frames
                .iter()
                .take_while(|f| (f.timestamp as f64) < s * 1e6)
                .count()
        }),
    };
    let session_config = LinkSessionConfig {
        heartbeat_timeout: Duration::from_millis(config.link.heartbeat_timeout_ms),
        ..LinkSessionConfig::default()
    };
    let clock = SystemClock::new();
    let use_tcp = args.port.is_some() || args.bind.is_some() || config.link.transport == LinkTransport::Tcp;
    eprintln!(
        "streaming {} frames over {} transport{}",
        input.frames.len(),
        if use_tcp { "tcp" } else { "memory" },
        if args.no_pace {
            ""
        } else {
            " at the scenario frame rate"
        }
    );

    let server = |transport: Box<dyn FnOnce() -> std::io::Result<Box<dyn Transport>> + Send>| {
        let mut pipeline = server_pipeline;
        let session_config = session_config.clone();
        thread::spawn(move || -> Result<LinkReport, CliError> {
            let mut t = transport().map_err(|e| CliError::Runtime(e.to_string()))?;
            run_link_session(&mut t, &mut pipeline, &clock, &session_config)
                .map_err(|e| CliError::Runtime(e.to_string()))
        })
    };

    let (outcome, report) = if use_tcp {
        let addr = format!(
            "{}:{}",
            args.bind.unwrap_or_else(|| config.link.host.clone()),
            args.port.unwrap_or(config.link.port)
        );
        let listener = TcpListener::bind(&addr).map_err(|e| CliError::Runtime(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        let handle = server(Box::new(move || {
            let (stream, _) = listener.accept()?;
            Ok(Box::new(TcpTransport::new(stream)?) as Box<dyn Transport>)
        }));
        let transport = TcpTransport::connect(local).map_err(|e| CliError::Runtime(e.to_string()))?;
        // the client stays connected until the server is done, so a dropped
        // stream ends by heartbeat timeout rather than by disconnect
        let (_client, outcome) = drive_client(transport, input.meta.clone(), input.frames, &clock, &options);
        (outcome, join(handle)?)
    } else {
        let (client_end, server_end) = MemoryTransport::pair();
        let handle = server(Box::new(move || Ok(Box::new(server_end) as Box<dyn Transport>)));
        let (_client, outcome) = drive_client(client_end, input.meta.clone(), input.frames, &clock, &options);
        (outcome, join(handle)?)
    };
    let outcome = outcome?;

    let sent_at: BTreeMap<u32, u64> = outcome.sent.iter().copied().collect();
    let end_to_end: Vec<u64> = report
        .timings
        .iter()
        .filter_map(|t| sent_at.get(&t.seq).map(|s| t.decided_us.saturating_sub(*s)))
        .collect();
    let server_side: Vec<u64> = report.timings.iter().map(|t| t.latency_us()).collect();

    let journal = &report.journal;
    let offline = replay(
        &mut offline_pipeline,
        journal.meta().clone(),
        journal.frames().cloned(),
        &[],
        &[],
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let matches_offline = offline.records() == journal.records();
    if let Some(out) = args.out {
        write_output(out, &journal_bytes(journal)?)?;
    }
    Ok(json!({
        "session_id": journal.meta().id,
        "end_reason": end_reason_name(report.end_reason),
        "frames_sent": outcome.sent.len(),
        "frames_journaled": journal.frames().count(),
        "events": journal.events().count(),
        "cues_received": outcome.cues.len(),
        "decode_errors": report.decode_errors.len(),
        "errors_sent": report.errors_sent.len(),
        "latency_us": latency_summary(&end_to_end),
        "server_latency_us": latency_summary(&server_side),
        "matches_offline_replay": matches_offline,
        "journal": path_value(args.out),
    }))
}

fn join(handle: thread::JoinHandle<Result<LinkReport, CliError>>) -> Result<LinkReport, CliError> {
    handle
        .join()
        .map_err(|_| CliError::Runtime("link server thread panicked".into()))?
}
