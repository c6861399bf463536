//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use parlor_core::backend::{EndpointBackend, EndpointConfig, RequestLog, RequestPurpose, RetryPolicy};
use parlor_core::batch::{run_batch, run_file_name, BatchSpec, SURVEY_CSV};
use parlor_core::engine::{run_session, EndReason, RunOptions};
use parlor_core::host::HostState;
use parlor_core::model::PersonId;
use parlor_core::participants::{PersonFactory, SkipReason};
use parlor_core::rng::SplitMix64;
use parlor_core::testkit::{config_from, num_msgs_config, scripted_async_person, scripted_person, StubServer};
use parlor_core::transcript::{events_to_string, load_transcript, read_events, EventKind, EventRecord, MemorySink};
use parlor_core::SessionResult;
use serde_json::{json, Map, Value};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn roster(n: usize) -> Vec<PersonId> {
    (0..n).map(|i| PersonId::new(format!("P{i}"))).collect()
}

fn run_doc(doc: &Value, factory: &PersonFactory) -> Result<(SessionResult, Vec<EventRecord>), String> {
    let config = parlor_core::config::parse_config_value(doc).map_err(|e| e.to_string())?;
    let persons = factory.build_all(&config).map_err(|e| e.to_string())?;
    let mut sink = MemorySink::default();
    let result = run_session(&config, persons, &mut sink, RunOptions::golden()).map_err(|e| e.to_string())?;
    Ok((result, sink.events))
}

fn golden_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    let mut slowest = Duration::ZERO;
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        let start = Instant::now();
        let status = Command::new(env!("CARGO_BIN_EXE_parlor"))
            .args(["run", fixture("three_scripted.json").to_str().unwrap(), "--golden", "--out"])
            .arg(&out)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        slowest = slowest.max(start.elapsed());
        ensure!(status.success(), "run exited with {status}");
        files.push(fs::read(out.join("run.events.jsonl")).map_err(|e| e.to_string())?);
    }
    ensure!(files[0] == files[1], "transcripts differ");
    let view = load_transcript(files[0].as_slice(), None).map_err(|e| e.to_string())?;
    ensure!(view.history.len() == 20, "expected 20 messages, got {}", view.history.len());
    ensure!(slowest < Duration::from_secs(1), "run took {slowest:?}");
    Ok(format!("{} identical bytes, slowest run {:?}", files[0].len(), slowest))
}

fn round_robin_law() -> Outcome {
    let start_time = Instant::now();
    let mut cases = 0;
    for n in 1..=10usize {
        for start in 0..n {
            let mut host = HostState::round_robin(roster(n), start).map_err(|e| e.to_string())?;
            let picks: Vec<usize> = (0..5 * n).map(|_| host.next_speaker()).collect();
            ensure!(picks[0] == start, "n={n} start={start}: first pick {}", picks[0]);
            for w in 0..=(picks.len() - n) {
                let window: BTreeSet<usize> = picks[w..w + n].iter().copied().collect();
                ensure!(window.len() == n, "n={n} start={start}: window at {w} repeats a person");
            }
            cases += 1;
        }
    }
    let took = start_time.elapsed();
    ensure!(took < Duration::from_secs(1), "took {took:?}");
    Ok(format!("all {cases} (n, start) pairs, every window of n, {took:?}"))
}

fn random_uniformity() -> Outcome {
    let start_time = Instant::now();
    let draw = || -> Result<Vec<usize>, String> {
        let mut host = HostState::random(roster(4), 42).map_err(|e| e.to_string())?;
        Ok((0..100_000).map(|_| host.next_speaker()).collect())
    };
    let a = draw()?;
    let mut counts = [0usize; 4];
    for &i in &a {
        counts[i] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / 100_000.0).collect();
    for (i, f) in freqs.iter().enumerate() {
        ensure!((f - 0.25).abs() <= 0.01, "index {i} frequency {f}");
    }
    ensure!(draw()? == a, "same seed gave a different sequence");
    let took = start_time.elapsed();
    ensure!(took < Duration::from_secs(5), "took {took:?}");
    Ok(format!("frequencies {freqs:?}, repeat identical, {took:?}"))
}

fn termination_exactness() -> Outcome {
    let n = 3;
    let mut checked = 0;
    for m in [1u64, 5, 20] {
        for skippers in [0, 1, n - 1] {
            let persons = (0..n)
                .map(|i| {
                    let name = format!("P{i}");
                    if i < skippers {
                        scripted_async_person(&name, &["unused"], json!({"policy": "never"}))
                    } else {
                        scripted_person(&name, &["I have something to add."])
                    }
                })
                .collect();
            let (result, events) = run_doc(&num_msgs_config(persons, m, 1), &PersonFactory::scripted_only())?;
            let messages = events.iter().filter(|e| e.kind == EventKind::Message).count() as u64;
            ensure!(
                result.history.len() as u64 == m && messages == m,
                "m={m} skippers={skippers}: {} messages",
                result.history.len()
            );
            ensure!(result.end_reason == EndReason::NumMsgs, "m={m} skippers={skippers}: ended by {}", result.end_reason);
            checked += 1;
        }
    }
    Ok(format!("{checked} sessions ended with exactly m messages"))
}

fn random_script(rng: &mut SplitMix64, pool: &[&str], len: usize) -> Vec<usize> {
    (0..len).map(|_| (rng.next_u64() % pool.len() as u64) as usize).collect()
}

fn async_contracts() -> Outcome {
    const TURNS: usize = 1000;
    let yes = ["YES", "yes.", "Yes, I will."];
    let no = ["NO", "no", "No thanks.", "perhaps later"];
    let pool: Vec<&str> = yes.iter().chain(no.iter()).copied().collect();
    let mut rng = SplitMix64::new(2024);
    let mut report = Vec::new();

    for class in ["decide_then_generate", "generate_then_decide"] {
        let picks = random_script(&mut rng, &pool, TURNS);
        let yes_count = picks.iter().filter(|&&i| i < yes.len()).count();
        let scheduler: Vec<&str> = picks.iter().map(|&i| pool[i]).collect();
        let person = json!({
            "class": class,
            "name": "Juliet",
            "background_story": "You're an undecisive person",
            "generation_model_name": "generator",
            "scheduling_model_name": "scheduler",
            "backend": "scripted",
            "script": ["Here is my view."],
            "scheduler_script": scheduler,
        });
        let mut doc = num_msgs_config(vec![person], 1, 0);
        doc["endType"] = json!({"class": "turn_cap", "max_turns": TURNS});
        let log = RequestLog::new();
        let factory = PersonFactory {
            request_log: Some(log.clone()),
            ..PersonFactory::default()
        };
        let (result, _) = run_doc(&doc, &factory)?;
        let generator_calls = log.entries().iter().filter(|e| e.request.purpose == RequestPurpose::Turn).count();
        let expected = if class == "decide_then_generate" { yes_count } else { TURNS };
        ensure!(result.turn_count == TURNS as u64, "{class}: {} turns", result.turn_count);
        ensure!(generator_calls == expected, "{class}: {generator_calls} generator calls, expected {expected}");
        ensure!(result.history.len() == yes_count, "{class}: {} messages for {yes_count} YES", result.history.len());
        report.push(format!("{class} {generator_calls} generator calls"));
    }

    let outputs = ["<pass>", "  <pass>\n", "<pass>.", "I <pass> on this", "<PASS>", "Let me add something."];
    let picks = random_script(&mut rng, &outputs, TURNS);
    let expected_skips: BTreeSet<u64> = picks.iter().enumerate().filter(|(_, &i)| i < 2).map(|(t, _)| t as u64).collect();
    let person = json!({
        "class": "fine_tuned_async",
        "name": "Katya",
        "background_story": "You are very kind.",
        "model_name": "tuned",
        "backend": "scripted",
        "script": picks.iter().map(|&i| outputs[i]).collect::<Vec<_>>(),
    });
    let mut doc = num_msgs_config(vec![person], 1, 0);
    doc["endType"] = json!({"class": "turn_cap", "max_turns": TURNS});
    let (result, _) = run_doc(&doc, &PersonFactory::scripted_only())?;
    let skipped: BTreeSet<u64> = result
        .skips
        .iter()
        .filter(|s| s.reason == SkipReason::PassToken)
        .map(|s| s.turn)
        .collect();
    ensure!(skipped == expected_skips, "pass-token skips differ from the turns emitting the token");
    ensure!(result.skips.len() == expected_skips.len(), "extra skips recorded");
    report.push(format!("{} pass-token skips of {TURNS}", skipped.len()));
    Ok(report.join(", "))
}

fn survey_isolation() -> Outcome {
    let question = "On a scale from 0 to 10, how much do you support social welfare?";
    let persons = ["Amanda", "Joseph", "Jennifer", "Robert"]
        .iter()
        .map(|n| {
            let mut p = scripted_person(n, &[&format!("{n} shares a thought.")]);
            p["survey_script"] = json!(["6"]);
            p
        })
        .collect();
    let mut doc = num_msgs_config(persons, 8, 4);
    doc["survey"] = json!({
        "questions": [{"id": "stance", "prompt": question, "kind": "integer_scale", "min": 0, "max": 10}],
        "phases": ["pre", "every_cycle", "post"]
    });
    let log = RequestLog::new();
    let factory = PersonFactory {
        request_log: Some(log.clone()),
        ..PersonFactory::default()
    };
    let (_, events) = run_doc(&doc, &factory)?;
    let turn_prompts: Vec<String> = log
        .entries()
        .iter()
        .filter(|e| e.request.purpose != RequestPurpose::Survey)
        .map(|e| e.request.full_text())
        .collect();
    let leaks = turn_prompts.iter().filter(|p| p.contains(question)).count();
    ensure!(!turn_prompts.is_empty(), "no conversation prompts captured");
    ensure!(leaks == 0, "{leaks} conversation prompts contain the question");
    let answers: Vec<&EventRecord> = events.iter().filter(|e| e.kind == EventKind::SurveyAnswer).collect();
    let phases: BTreeSet<&str> = answers.iter().filter_map(|a| a.payload["phase"].as_str()).collect();
    ensure!(answers.len() == 4 * phases.len(), "{} answers for {} phases", answers.len(), phases.len());
    ensure!(phases.len() == 4, "phases fired: {phases:?}");
    Ok(format!(
        "0 leaks in {} turn prompts; {} answers = 4 persons x {} phases {:?}",
        turn_prompts.len(),
        answers.len(),
        phases.len(),
        phases
    ))
}

fn panel_reconstruction() -> Outcome {
    let start_time = Instant::now();
    let threshold = 4;
    let persons = vec![
        scripted_async_person("Amanda", &["I have a point.", "And another."], json!({"policy": "always"})),
        scripted_async_person("Joseph", &["Briefly, yes."], json!({"policy": "every_nth", "every": 4})),
        scripted_async_person("Jennifer", &["I agree."], json!({"policy": "every_nth", "every": 4})),
        scripted_async_person(
            "Robert",
            &["I have waited long enough to say this."],
            json!({"policy": "after_silence", "silence_threshold": threshold}),
        ),
    ];
    let mut doc = num_msgs_config(persons, 1, 11);
    doc["endType"] = json!({"class": "time_limit"});
    doc["clock"] = json!({"mode": "virtual", "tick_ms": 30_000, "limit_ms": 600_000});

    let (result, events) = run_doc(&doc, &PersonFactory::scripted_only())?;
    let (_, again) = run_doc(&doc, &PersonFactory::scripted_only())?;
    ensure!(events_to_string(&events) == events_to_string(&again), "not deterministic");
    ensure!(result.end_reason == EndReason::TimeLimit, "ended by {}", result.end_reason);
    ensure!(result.elapsed_ms == 600_000, "elapsed {} ms", result.elapsed_ms);

    let mut skips: BTreeMap<&str, usize> = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == EventKind::Skip) {
        *skips.entry(e.payload["person"].as_str().unwrap_or("")).or_default() += 1;
    }
    let reserved = skips.get("Joseph").copied().unwrap_or(0) + skips.get("Jennifer").copied().unwrap_or(0);
    ensure!(skips.get("Amanda").is_none(), "always-speak person skipped");
    ensure!(
        skips.get("Joseph") >= Some(&3) && skips.get("Jennifer") >= Some(&3),
        "reserved persons rarely skipped: {skips:?}"
    );
    ensure!(
        reserved > skips.get("Robert").copied().unwrap_or(0),
        "silence not attributed to reserved persons: {skips:?}"
    );

    // Unused turns before a turn = turns granted minus messages posted.
    let robert_turns: Vec<&EventRecord> = events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::Message | EventKind::Skip) && e.payload["person"] == "Robert")
        .collect();
    let first = robert_turns
        .iter()
        .position(|e| e.kind == EventKind::Message)
        .ok_or("threshold person never spoke")?;
    let first_msg = robert_turns[first];
    let turn = first_msg.payload["turn"].as_u64().unwrap_or(0);
    let msg_seq = first_msg.payload["msg_seq"].as_u64().unwrap_or(0);
    ensure!(turn - msg_seq >= threshold, "spoke after only {} unused turns", turn - msg_seq);
    for e in &robert_turns[..first] {
        let t = e.payload["turn"].as_u64().unwrap_or(0);
        let posted = events
            .iter()
            .filter(|m| m.kind == EventKind::Message && m.payload["turn"].as_u64() < Some(t))
            .count() as u64;
        ensure!(t - posted < threshold, "stayed silent at turn {t} past the trigger");
    }
    let took = start_time.elapsed();
    ensure!(took < Duration::from_secs(1), "took {took:?}");
    Ok(format!(
        "time_limit at 600000 ms after {} turns; skips {skips:?}; Robert first speaks at turn {turn} after {} unused turns; {took:?}",
        result.turn_count,
        turn - msg_seq
    ))
}

fn endpoint_conformance() -> Outcome {
    let endpoint = |stub: &StubServer| {
        EndpointBackend::new(EndpointConfig {
            base_url: stub.base_url(),
            api_key: None,
            timeout: Duration::from_secs(5),
            retry: RetryPolicy {
                max_retries: 1,
                initial_backoff: Duration::from_millis(5),
            },
        })
    };
    let person = |name: &str| {
        json!({"class": "person_openai_completion", "name": name, "background_story": "Curious.", "model_name": "stub-model"})
    };
    let scenario = "You're discussing social welfare";

    let stub = StubServer::start(["Alpha speaks.", "Beta answers.", "Alpha again."]);
    let factory = PersonFactory {
        endpoint: Some(endpoint(&stub)),
        ..PersonFactory::default()
    };
    run_doc(&num_msgs_config(vec![person("Alpha"), person("Beta")], 3, 0), &factory)?;
    let requests = stub.requests();
    ensure!(requests.len() == 3, "{} requests", requests.len());
    let messages = requests[2].body["messages"].as_array().cloned().unwrap_or_default();
    ensure!(
        messages.first().and_then(|m| m["content"].as_str()).is_some_and(|s| s.contains(scenario)),
        "system text lacks the scenario"
    );
    let turns: Vec<&str> = messages[1..].iter().filter_map(|m| m["content"].as_str()).collect();
    ensure!(turns == ["Alpha: Alpha speaks.", "Beta: Beta answers."], "history turns {turns:?}");

    let stub = StubServer::start(["Recovered."]);
    stub.fail_next(&[500]);
    let factory = PersonFactory {
        endpoint: Some(endpoint(&stub)),
        ..PersonFactory::default()
    };
    let (result, _) = run_doc(&num_msgs_config(vec![person("Alpha")], 1, 0), &factory)?;
    ensure!(stub.requests().len() == 2, "one 500 led to {} requests", stub.requests().len());
    ensure!(result.history.len() == 1 && result.skips.is_empty(), "retry did not recover");

    let stub = StubServer::start(["Still going."]);
    stub.fail_next(&[500, 500]);
    let factory = PersonFactory {
        endpoint: Some(endpoint(&stub)),
        ..PersonFactory::default()
    };
    let (result, _) = run_doc(&num_msgs_config(vec![person("Alpha"), person("Beta")], 2, 0), &factory)?;
    let first_skip = result.skips.first().ok_or("no skip recorded")?;
    ensure!(first_skip.reason == SkipReason::Timeout && first_skip.turn == 0, "skip {first_skip:?}");
    ensure!(result.history.len() == 2, "session did not continue");
    Ok("scenario in system text, history in order, 1 retry on one 500, skipped(timeout) after two".into())
}

fn batch_equivalence() -> Outcome {
    let mut a = scripted_person("Ann", &["Ann speaks."]);
    a["survey_script"] = json!(["3"]);
    let mut b = scripted_person("Ben", &["Ben speaks."]);
    b["survey_script"] = json!(["8"]);
    let mut c = scripted_person("Cid", &["Cid speaks."]);
    c["survey_script"] = json!(["I'd say 4."]);
    let mut doc = num_msgs_config(vec![a, b, c], 6, 99);
    doc["host"] = json!({"class": "Random Host"});
    doc["survey"] = json!({
        "questions": [{"id": "stance", "prompt": "Rate your support from 0 to 10.", "kind": "integer_scale", "min": 0, "max": 10}],
        "phases": ["pre", "post"]
    });
    let config = config_from(&doc);
    let (runs, persons, questions, phases) = (8u64, 3, 1, 2);
    let p1 = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p4 = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = |dir: &Path, parallelism| BatchSpec {
        runs,
        base_seed: Some(77),
        parallelism,
        out_dir: dir.to_path_buf(),
        golden: true,
    };
    let s1 = run_batch(&config, &PersonFactory::scripted_only(), &spec(p1.path(), 1)).map_err(|e| e.to_string())?;
    run_batch(&config, &PersonFactory::scripted_only(), &spec(p4.path(), 4)).map_err(|e| e.to_string())?;
    for i in 0..runs {
        let x = fs::read(p1.path().join(run_file_name(i))).map_err(|e| e.to_string())?;
        let y = fs::read(p4.path().join(run_file_name(i))).map_err(|e| e.to_string())?;
        ensure!(x == y, "run {i} differs between parallelism 1 and 4");
    }
    let rows = fs::read_to_string(p1.path().join(SURVEY_CSV)).map_err(|e| e.to_string())?.lines().count() - 1;
    let expected_rows = runs as usize * persons * questions * phases;
    ensure!(rows == expected_rows, "{rows} CSV rows, expected {expected_rows}");
    // Values per run are 3, 8, 4: mean 5, sample stddev over 24 values
    // sqrt(8 * ((3-5)^2 + (8-5)^2 + (4-5)^2) / 23) = sqrt(112 / 23).
    let overall = s1
        .aggregates
        .iter()
        .find(|a| a.phase == "post" && a.person.is_none())
        .ok_or("no overall aggregate")?;
    let sd = overall.stddev.ok_or("no stddev")?;
    ensure!((overall.mean - 5.0).abs() < 1e-9, "mean {}", overall.mean);
    ensure!((sd - 2.206709137469482).abs() < 1e-9, "stddev {sd}");
    Ok(format!("{runs} runs identical at P=1 and P=4; {rows} CSV rows; mean {} stddev {sd}", overall.mean))
}

fn random_events(rng: &mut SplitMix64, count: usize) -> Vec<EventRecord> {
    let words = ["hola", "naïve", "日本語", "a \"quote\"", "tab\tand\nnewline", "emoji 🎲", "", "<pass>"];
    let mut at = 0u64;
    (0..count)
        .map(|seq| {
            let kind = match seq {
                0 => EventKind::SessionStart,
                s if s == count - 1 => EventKind::SessionEnd,
                _ => [EventKind::Message, EventKind::Skip, EventKind::SurveyAnswer, EventKind::SuppressedDraft]
                    [(rng.next_u64() % 4) as usize],
            };
            at += rng.next_u64() % 1000;
            let mut payload = Map::new();
            for k in 0..(rng.next_u64() % 5) {
                let v = match rng.next_u64() % 4 {
                    0 => json!(words[(rng.next_u64() % words.len() as u64) as usize]),
                    1 => json!(rng.next_u64()),
                    2 => json!(rng.next_u64() % 2 == 0),
                    _ => json!([rng.next_u64() % 100, {"nested": words[k as usize % words.len()]}]),
                };
                payload.insert(format!("{}{k}", words[(rng.next_u64() % 3) as usize]), v);
            }
            EventRecord {
                seq: seq as u64,
                kind,
                at_ms: at,
                payload,
                run_id: "00000000-0000-0000-0000-000000000000".into(),
            }
        })
        .collect()
}

fn transcript_round_trip() -> Outcome {
    let mut rng = SplitMix64::new(10);
    let events = random_events(&mut rng, 1000);
    let text = events_to_string(&events);
    let loaded = read_events(text.as_bytes()).map_err(|e| e.to_string())?;
    ensure!(loaded == events, "loaded events differ");
    ensure!(events_to_string(&loaded) == text, "reserialized bytes differ");

    let mut tampered = events.clone();
    tampered[500].seq = 501;
    let detected = read_events(events_to_string(&tampered).as_bytes()).is_err();
    let mut dropped = events.clone();
    dropped.remove(321);
    let gap_detected = read_events(events_to_string(&dropped).as_bytes()).is_err();
    ensure!(detected && gap_detected, "tampered seq not detected");
    Ok(format!("1000 events, {} bytes identical; duplicate and missing seq rejected", text.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("golden determinism", golden_determinism),
        ("round-robin law", round_robin_law),
        ("random-host uniformity", random_uniformity),
        ("termination exactness", termination_exactness),
        ("async decision contracts", async_contracts),
        ("survey isolation", survey_isolation),
        ("time-limited panel reconstruction", panel_reconstruction),
        ("endpoint backend conformance", endpoint_conformance),
        ("batch equivalence", batch_equivalence),
        ("transcript round-trip", transcript_round_trip),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
