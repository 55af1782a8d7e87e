use std::sync::{Arc, Mutex};
use std::thread;

use revsearch_core::error::{PolicyError, ScorerError};
use revsearch_core::policy::{CallContext, CallKind, ChatModel, ChatRequest, OpenAiChatClient, Policy, PolicyConfig, RetryPolicy, TokenLedger};
use revsearch_core::reward::external_rm_score;
use revsearch_core::{CodeSample, Task, TestCase, TokenUsage};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    url: String,
    auth: Option<String>,
    body: Value,
}

/// Serves the given (status, body) replies in order, one per request.
fn stub(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", server.server_addr().to_ip().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in replies {
            let mut req = server.recv().unwrap();
            let mut text = String::new();
            req.as_reader().read_to_string(&mut text).unwrap();
            let auth = req
                .headers()
                .iter()
                .find(|h| h.field.equiv("Authorization"))
                .map(|h| h.value.to_string());
            log.lock().unwrap().push(Seen {
                url: req.url().to_string(),
                auth,
                body: serde_json::from_str(&text).unwrap_or(Value::Null),
            });
            let resp = tiny_http::Response::from_string(body).with_status_code(status);
            req.respond(resp).unwrap();
        }
    });
    (addr, seen, handle)
}

fn completion(text: &str, usage: Option<(u64, u64)>) -> String {
    let mut v = json!({"choices": [{"message": {"role": "assistant", "content": text}}]});
    if let Some((p, c)) = usage {
        v["usage"] = json!({"prompt_tokens": p, "completion_tokens": c, "total_tokens": p + c});
    }
    v.to_string()
}

fn client(endpoint: &str, retries: u32) -> OpenAiChatClient {
    OpenAiChatClient::new(PolicyConfig {
        endpoint: format!("{endpoint}/v1"),
        model_name: "stub-model".into(),
        api_key: Some("sk-test".into()),
        retry_policy: RetryPolicy {
            max_retries: retries,
            backoff_ms: 1,
        },
        ..PolicyConfig::default()
    })
    .unwrap()
}

fn request(prompt: &str) -> ChatRequest {
    ChatRequest {
        kind: CallKind::DirectDraft,
        prompt: prompt.into(),
        sample_index: 0,
        seed: 0,
    }
}

#[test]
fn reported_usage_is_taken_verbatim() {
    let (addr, seen, h) = stub(vec![(200, completion("hi there", Some((12, 3))))]);
    let out = client(&addr, 0).complete(&request("say hi")).unwrap();
    h.join().unwrap();
    assert_eq!(out.text, "hi there");
    assert_eq!(out.token_usage, TokenUsage::new(12, 3));
    assert!(!out.estimated);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].url, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(seen[0].body["model"], "stub-model");
    assert_eq!(seen[0].body["messages"][0]["content"], "say hi");
}

#[test]
fn missing_usage_is_estimated() {
    let (addr, _, h) = stub(vec![(200, completion("abcdefgh", None))]);
    let out = client(&addr, 0).complete(&request("1234")).unwrap();
    h.join().unwrap();
    assert!(out.estimated);
    assert_eq!(out.token_usage, TokenUsage::new(1, 2));
}

#[test]
fn server_errors_are_retried() {
    let (addr, seen, h) = stub(vec![
        (503, "busy".into()),
        (429, "slow down".into()),
        (200, completion("ok", Some((1, 1)))),
    ]);
    let out = client(&addr, 3).complete(&request("p")).unwrap();
    h.join().unwrap();
    assert_eq!(out.text, "ok");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn exhausted_retries_are_unavailable() {
    let (addr, seen, h) = stub(vec![(500, "a".into()), (500, "b".into())]);
    let err = client(&addr, 1).complete(&request("p")).unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, PolicyError::Unavailable(ref m) if m.contains("2 attempts")), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let (addr, seen, h) = stub(vec![(400, "bad request".into())]);
    let err = client(&addr, 3).complete(&request("p")).unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, PolicyError::Unavailable(ref m) if m.contains("400")), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_completion_is_unavailable() {
    let (addr, _, h) = stub(vec![(200, "{\"choices\": []}".into())]);
    assert!(client(&addr, 0).complete(&request("p")).is_err());
    h.join().unwrap();
}

#[test]
fn policy_books_usage_through_the_client() {
    let reply = "```python\nprint(input())\n```";
    let (addr, _, h) = stub(vec![(200, completion(reply, Some((40, 10))))]);
    let policy = Policy::new(Arc::new(client(&addr, 0)));
    let ledger = TokenLedger::new();
    let task = Task {
        id: "echo".into(),
        statement: "Echo the input.".into(),
        public_tests: vec![TestCase::new("a\n", "a\n")],
        private_tests: vec![],
    };
    let code = policy.draft_direct(&task, &CallContext::new(&ledger, 0)).unwrap();
    h.join().unwrap();
    assert_eq!(code.code, "print(input())");
    assert_eq!(ledger.total(), 50);
    assert_eq!(ledger.calls(), 1);
}

fn rm_task() -> Task {
    Task {
        id: "t".into(),
        statement: "Do it.".into(),
        public_tests: vec![TestCase::new("", "")],
        private_tests: vec![],
    }
}

#[test]
fn external_rm_returns_score() {
    let (addr, seen, h) = stub(vec![(200, json!({"score": 0.75}).to_string())]);
    let s = external_rm_score(&rm_task(), &CodeSample::draft("print(1)"), &addr).unwrap();
    h.join().unwrap();
    assert_eq!(s, 0.75);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].url, "/score");
    assert_eq!(seen[0].body, json!({"statement": "Do it.", "code": "print(1)"}));
}

#[test]
fn external_rm_shape_and_transport_errors() {
    let (addr, _, h) = stub(vec![
        (200, json!({"value": 1}).to_string()),
        (200, "not json".into()),
        (500, "down".into()),
    ]);
    let code = CodeSample::draft("x");
    assert!(matches!(external_rm_score(&rm_task(), &code, &addr), Err(ScorerError::Shape(_))));
    assert!(matches!(external_rm_score(&rm_task(), &code, &addr), Err(ScorerError::Shape(_))));
    assert!(matches!(external_rm_score(&rm_task(), &code, &addr), Err(ScorerError::Transport(_))));
    h.join().unwrap();
    assert!(matches!(
        external_rm_score(&rm_task(), &code, "http://127.0.0.1:9"),
        Err(ScorerError::Transport(_))
    ));
}
