use std::net::SocketAddr;
use std::time::{Duration, Instant};

use brlhf_core::acquisition::DuelQuery;
use brlhf_core::api::{AnswerAccepted, Health, SessionStarted, Status};
use brlhf_core::harness::{AuditEntry, RunResult, SweepSummary, TerminalStatus};
use brlhf_core::oracle::Preference;
use brlhf_core::reward::{PreferenceRecord, Source};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

async fn start() -> String {
    let addr = brlhf_service::spawn(SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    format!("http://{addr}")
}

fn pbo_config(budget: usize) -> Value {
    json!({
        "method": "pbo",
        "problem": {"name": "rosenbrock", "dim": 2},
        "acquisition": {"pool_size": 8, "mc_samples": 64},
        "budget": budget,
        "seed": 11,
        "oracle": {"human_timeout_secs": 30.0}
    })
}

async fn wait_for_duel(http: &Client, base: &str, after: u64) -> DuelQuery {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let resp = http.get(format!("{base}/duel/next")).send().await.unwrap();
        if resp.status() == StatusCode::OK {
            let duel: DuelQuery = resp.json().await.unwrap();
            if duel.id > after {
                return duel;
            }
        } else {
            assert_eq!(resp.status(), StatusCode::NO_CONTENT);
        }
        assert!(Instant::now() < deadline, "no duel was issued");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

async fn dataset(http: &Client, base: &str) -> Vec<PreferenceRecord> {
    http.get(format!("{base}/dataset")).send().await.unwrap().json().await.unwrap()
}

async fn wait_for_records(http: &Client, base: &str, n: usize) -> Vec<PreferenceRecord> {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let data = dataset(http, base).await;
        if data.len() >= n {
            return data;
        }
        assert!(Instant::now() < deadline, "answer was never recorded");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

async fn post_answer(http: &Client, base: &str, body: Value) -> reqwest::Response {
    http.post(format!("{base}/duel/answer")).json(&body).send().await.unwrap()
}

#[tokio::test]
async fn health_reports_engine() {
    let base = start().await;
    let h: Health = reqwest::get(format!("{base}/health")).await.unwrap().json().await.unwrap();
    assert_eq!(h.status, "ok");
    assert!(h.engine.starts_with("brlhf-core"));
}

#[tokio::test]
async fn no_duel_before_a_session() {
    let base = start().await;
    let http = Client::new();
    let resp = http.get(format!("{base}/duel/next")).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::NO_CONTENT);
    let st: Status = http.get(format!("{base}/status")).send().await.unwrap().json().await.unwrap();
    assert!(!st.running);
    assert_eq!(st.queries, 0);
    let resp = post_answer(&http, &base, json!({"duel_id": 1, "winner": "first"})).await;
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn answered_duel_is_recorded_once() {
    let base = start().await;
    let http = Client::new();
    let resp = http.post(format!("{base}/session")).json(&pbo_config(3)).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    let started: SessionStarted = resp.json().await.unwrap();
    assert_eq!((started.budget, started.seed), (3, 11));

    let again = http.post(format!("{base}/session")).json(&pbo_config(3)).send().await.unwrap();
    assert_eq!(again.status(), StatusCode::CONFLICT);

    let duel = wait_for_duel(&http, &base, 0).await;
    let st: Status = http.get(format!("{base}/status")).send().await.unwrap().json().await.unwrap();
    assert!(st.running);
    assert_eq!(st.pending_duel, Some(duel.id));

    let resp = post_answer(&http, &base, json!({"duel_id": duel.id, "winner": "second"})).await;
    assert_eq!(resp.status(), StatusCode::OK);
    let accepted: AnswerAccepted = resp.json().await.unwrap();
    assert_eq!((accepted.duel_id, accepted.winner), (duel.id, Preference::Second));

    let data = wait_for_records(&http, &base, 1).await;
    assert_eq!(data.len(), 1);
    assert_eq!(data[0].source, Source::Human);
    assert_eq!(data[0].winner, duel.second);
    assert_eq!(data[0].loser, duel.first);

    let dup = post_answer(&http, &base, json!({"duel_id": duel.id, "winner": "first"})).await;
    assert_eq!(dup.status(), StatusCode::CONFLICT);
    let unknown = post_answer(&http, &base, json!({"duel_id": duel.id + 1000, "winner": "first"})).await;
    assert_eq!(unknown.status(), StatusCode::NOT_FOUND);
    let malformed = post_answer(&http, &base, json!({"duel_id": duel.id, "winner": "neither"})).await;
    assert_eq!(malformed.status(), StatusCode::BAD_REQUEST);
    let garbage = http.post(format!("{base}/duel/answer")).body("{not json").send().await.unwrap();
    assert_eq!(garbage.status(), StatusCode::BAD_REQUEST);
    assert_eq!(dataset(&http, &base).await, data);

    let mut last = duel.id;
    for _ in 1..3 {
        let d = wait_for_duel(&http, &base, last).await;
        let resp = post_answer(&http, &base, json!({"duel_id": d.id, "winner": "first"})).await;
        assert_eq!(resp.status(), StatusCode::OK);
        last = d.id;
    }
    let deadline = Instant::now() + Duration::from_secs(60);
    let st = loop {
        let st: Status = http.get(format!("{base}/status")).send().await.unwrap().json().await.unwrap();
        if !st.running {
            break st;
        }
        assert!(Instant::now() < deadline, "session never finished");
        tokio::time::sleep(Duration::from_millis(20)).await;
    };
    assert_eq!(st.terminal, Some(TerminalStatus::Budget));
    assert_eq!(st.queries, 3);
    assert_eq!(st.rows.len(), 3);
    let audit: Vec<AuditEntry> = http.get(format!("{base}/audit")).send().await.unwrap().json().await.unwrap();
    assert_eq!(audit.len(), 3);
    assert_eq!(audit[0].answer, Preference::Second);
    assert!(audit.iter().all(|e| e.record.source == Source::Human));

    let next = http.post(format!("{base}/session")).json(&pbo_config(1)).send().await.unwrap();
    assert_eq!(next.status(), StatusCode::CREATED);
}

#[tokio::test]
async fn batch_run_returns_trajectory() {
    let base = start().await;
    let http = Client::new();
    let mut cfg = pbo_config(4);
    cfg["oracle"] = json!({"mode": "deterministic"});
    let resp = http.post(format!("{base}/runs")).json(&cfg).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let result: RunResult = resp.json().await.unwrap();
    assert_eq!(result.rows.len(), 4);
    assert_eq!(result.status, TerminalStatus::Budget);
    assert_eq!(result.audit.len(), 4);
}

#[tokio::test]
async fn bad_configs_are_client_errors() {
    let base = start().await;
    let http = Client::new();
    let missing_seed = json!({"problem": {"name": "rosenbrock", "dim": 2}});
    let resp = http.post(format!("{base}/runs")).json(&missing_seed).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let body: Value = resp.json().await.unwrap();
    assert!(body["error"].as_str().unwrap().contains("seed"));

    let mut bad_alpha = pbo_config(2);
    bad_alpha["acquisition"]["alpha"] = json!(1.5);
    let resp = http.post(format!("{base}/runs")).json(&bad_alpha).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);

    let mut human = pbo_config(2);
    human["oracle"]["mode"] = json!("human");
    let resp = http.post(format!("{base}/runs")).json(&human).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);

    let resp = http.post(format!("{base}/sweeps")).body("[]").send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn sweep_summarizes_each_alpha() {
    let base = start().await;
    let http = Client::new();
    let mut cfg = pbo_config(3);
    cfg["oracle"] = json!({"mode": "deterministic"});
    let req = json!({"base": cfg, "alphas": [0.0, 1.0], "seeds": [1, 2], "target": 1e9});
    let resp = http.post(format!("{base}/sweeps")).json(&req).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let summary: SweepSummary = resp.json().await.unwrap();
    assert_eq!(summary.rows.len(), 2);
    assert!(summary.rows.iter().all(|r| r.runs == 2 && r.censored == 0 && r.median == 1));
}
