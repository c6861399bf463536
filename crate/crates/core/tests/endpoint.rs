use std::time::Duration;

use parlor_core::backend::{Backend, BackendError, BackendRequest, EndpointBackend, EndpointConfig, RetryPolicy, Sampling};
use parlor_core::backend::{PromptTurn, RequestPurpose};
use parlor_core::engine::{run_session, RunOptions};
use parlor_core::participants::{PersonFactory, SkipReason};
use parlor_core::testkit::{config_from, num_msgs_config, StubServer};
use serde_json::{json, Value};

fn endpoint_for(stub: &StubServer) -> EndpointBackend {
    EndpointBackend::new(EndpointConfig {
        base_url: stub.base_url(),
        api_key: None,
        timeout: Duration::from_secs(5),
        retry: RetryPolicy {
            max_retries: 1,
            initial_backoff: Duration::from_millis(5),
        },
    })
}

fn endpoint_person(name: &str) -> Value {
    json!({
        "class": "person_openai_completion",
        "name": name,
        "background_story": format!("{name} is curious."),
        "model_name": "stub-model",
    })
}

fn request(text: &str) -> BackendRequest {
    BackendRequest {
        purpose: RequestPurpose::Turn,
        model_id: "m".into(),
        system_text: "system".into(),
        turns: vec![PromptTurn::instruction(text)],
        sampling: Sampling::default(),
    }
}

#[test]
fn request_body_carries_scenario_and_history_in_order() {
    let stub = StubServer::start(["First reply", "Second reply", "Third reply"]);
    let config = config_from(&num_msgs_config(vec![endpoint_person("Katya"), endpoint_person("Victor")], 3, 1));
    let factory = PersonFactory {
        endpoint: Some(endpoint_for(&stub)),
        ..PersonFactory::default()
    };
    let mut sink = parlor_core::MemorySink::default();
    let result = run_session(&config, factory.build_all(&config).unwrap(), &mut sink, RunOptions::golden()).unwrap();
    assert_eq!(result.history.len(), 3);

    let requests = stub.requests();
    assert_eq!(requests.len(), 3);
    assert!(requests.iter().all(|r| r.path == "/v1/chat/completions"));
    let third = &requests[2].body;
    assert_eq!(third["model"], json!("stub-model"));
    let messages = third["messages"].as_array().unwrap();
    assert_eq!(messages[0]["role"], json!("system"));
    assert!(messages[0]["content"].as_str().unwrap().contains("You're discussing social welfare"));
    let user: Vec<&str> = messages[1..].iter().map(|m| m["content"].as_str().unwrap()).collect();
    assert_eq!(user[0], "Katya: First reply");
    assert_eq!(user[1], "Victor: Second reply");
    assert_eq!(user.len(), 2);
    assert!(messages[0]["content"].as_str().unwrap().ends_with("Reply as Katya."));
}

#[test]
fn one_server_error_is_retried_once() {
    let stub = StubServer::start(["ok"]);
    stub.fail_next(&[500]);
    let backend = endpoint_for(&stub);
    let resp = backend.complete(&request("hi")).unwrap();
    assert_eq!(resp.text, "ok");
    assert_eq!(stub.requests().len(), 2);
}

#[test]
fn two_server_errors_exhaust_the_retry() {
    let stub = StubServer::start(["ok"]);
    stub.fail_next(&[500, 500]);
    let err = endpoint_for(&stub).complete(&request("hi")).unwrap_err();
    assert!(matches!(err, BackendError::Exhausted { attempts: 2, .. }), "{err:?}");
    assert_eq!(stub.requests().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = StubServer::start(["ok"]);
    stub.fail_next(&[400]);
    let err = endpoint_for(&stub).complete(&request("hi")).unwrap_err();
    assert_eq!(err, BackendError::Status(400));
    assert_eq!(stub.requests().len(), 1);
}

#[test]
fn exhausted_retries_skip_the_turn_and_the_session_continues() {
    let stub = StubServer::start(["Still here."]);
    stub.fail_next(&[500, 500]);
    let config = config_from(&num_msgs_config(vec![endpoint_person("Katya"), endpoint_person("Victor")], 2, 1));
    let factory = PersonFactory {
        endpoint: Some(endpoint_for(&stub)),
        ..PersonFactory::default()
    };
    let mut sink = parlor_core::MemorySink::default();
    let result = run_session(&config, factory.build_all(&config).unwrap(), &mut sink, RunOptions::golden()).unwrap();
    assert_eq!(result.history.len(), 2);
    assert_eq!(result.skips.len(), 1);
    assert_eq!(result.skips[0].reason, SkipReason::Timeout);
    assert_eq!(result.skips[0].person.as_str(), "Katya");
    assert_eq!(result.history.messages()[0].sender.as_str(), "Victor");
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let stub = StubServer::start(["ok"]);
    let url = stub.base_url();
    drop(stub);
    std::thread::sleep(Duration::from_millis(50));
    let backend = EndpointBackend::new(EndpointConfig {
        base_url: url,
        timeout: Duration::from_secs(2),
        retry: RetryPolicy {
            max_retries: 0,
            initial_backoff: Duration::ZERO,
        },
        ..EndpointConfig::default()
    });
    assert!(backend.complete(&request("hi")).is_err());
}
