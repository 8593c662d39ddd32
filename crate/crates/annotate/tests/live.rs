//! Three scripted annotators working through the pool over real HTTP,
//! followed by a restart that replays the judgment log.

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use memeforge_annotate::{router, AppState, ServeConfig};
use memeforge_core::metrics::fleiss_kappa;
use serde_json::{json, Value};

const ANNOTATORS: [&str; 3] = ["ada", "ben", "cleo"];

/// Deterministic answers with some disagreement.
fn answer(who: usize, task: u64) -> (bool, &'static str) {
    let correct = !(task * 7 + who as u64 * 3).is_multiple_of(5);
    let templated = ["yes", "yes", "no", "unsure"][((task + who as u64 * (task % 3)) % 4) as usize];
    (correct, templated)
}

async fn start(config: &ServeConfig) -> (String, tokio::task::JoinHandle<()>) {
    let app = Arc::new(AppState::load(config).unwrap());
    let listener = tokio::net::TcpListener::bind(config.addr).await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let handle = tokio::spawn(async move {
        axum::serve(listener, router(app)).await.unwrap();
    });
    (base, handle)
}

/// Judges tasks until the pool is exhausted. Returns each task as served
/// together with the answer given.
async fn run_client(base: String, who: usize) -> Vec<(Value, bool, &'static str)> {
    let client = reqwest::Client::new();
    let name = ANNOTATORS[who];
    let mut seen = Vec::new();
    loop {
        let next: Value = client
            .get(format!("{base}/api/tasks/next?annotator={name}"))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        if next["done"].as_bool().unwrap() {
            break;
        }
        let task = next["task"].clone();
        let id = task["task_id"].as_u64().unwrap();
        assert!(
            seen.iter().all(|(t, _, _): &(Value, bool, &str)| t["task_id"] != id),
            "task {id} served twice"
        );
        let (correct, templated) = answer(who, id);
        let mut body = json!({"task_id": id, "annotator": name, "is_templated": templated});
        if task["templated"].as_bool().unwrap() {
            body["verdict"] = json!(if correct { "correct" } else { "incorrect" });
        }
        let resp = client
            .post(format!("{base}/api/judgments"))
            .json(&body)
            .send()
            .await
            .unwrap();
        assert!(resp.status().is_success(), "{}", resp.text().await.unwrap());
        seen.push((task, correct, templated));
        tokio::task::yield_now().await;
    }
    seen
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn three_clients_then_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::fixture(dir.path());
    let (base, server) = start(&config).await;

    let handles: Vec<_> = (0..3).map(|w| tokio::spawn(run_client(base.clone(), w))).collect();
    let mut answers = Vec::new();
    for h in handles {
        answers.push(h.await.unwrap());
    }
    assert!(answers.iter().all(|a| a.len() == 30));

    let client = reqwest::Client::new();
    let agreement: Value = client
        .get(format!("{base}/api/agreement"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let export_before = client
        .get(format!("{base}/api/export"))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();

    // direct computation from the clients' own records
    let mut verdict_rows: BTreeMap<u64, [u64; 2]> = BTreeMap::new();
    let mut templated_rows: BTreeMap<u64, [u64; 3]> = BTreeMap::new();
    let mut votes: BTreeMap<u64, (Value, usize, usize)> = BTreeMap::new();
    let mut image_votes: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for client_answers in &answers {
        for (task, correct, templated) in client_answers {
            let id = task["task_id"].as_u64().unwrap();
            if task["templated"].as_bool().unwrap() {
                verdict_rows.entry(id).or_default()[if *correct { 0 } else { 1 }] += 1;
                let e = votes.entry(id).or_insert((task.clone(), 0, 0));
                if *correct {
                    e.1 += 1;
                } else {
                    e.2 += 1;
                }
            }
            let k = match *templated {
                "yes" => 0,
                "no" => 1,
                _ => 2,
            };
            templated_rows.entry(id).or_default()[k] += 1;
            let iv = image_votes
                .entry(task["image_id"].as_str().unwrap().to_owned())
                .or_default();
            match *templated {
                "yes" => iv.0 += 1,
                "no" => iv.1 += 1,
                _ => {}
            }
        }
    }
    let vt: Vec<Vec<u64>> = verdict_rows.values().map(|r| r.to_vec()).collect();
    let tt: Vec<Vec<u64>> = templated_rows.values().map(|r| r.to_vec()).collect();
    let kv = agreement["fleiss_kappa_verdicts"].as_f64().unwrap();
    let kt = agreement["fleiss_kappa_templated"].as_f64().unwrap();
    assert!((kv - fleiss_kappa(&vt).unwrap()).abs() <= 1e-9);
    assert!((kt - fleiss_kappa(&tt).unwrap()).abs() <= 1e-9);
    assert_eq!(agreement["n_complete_items"].as_u64().unwrap() as usize, vt.len());

    let export: Value = serde_json::from_str(&export_before).unwrap();
    let mut expected_verdicts: Vec<(String, String, String, bool)> = votes
        .values()
        .map(|(t, yes, no)| {
            (
                t["image_id"].as_str().unwrap().to_owned(),
                t["method"].as_str().unwrap().to_owned(),
                t["predicted"].as_str().unwrap().to_owned(),
                yes > no,
            )
        })
        .collect();
    expected_verdicts.sort();
    let got_verdicts: Vec<(String, String, String, bool)> = export["verdicts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| {
            (
                v["image_id"].as_str().unwrap().to_owned(),
                v["method"].as_str().unwrap().to_owned(),
                v["predicted"].as_str().unwrap().to_owned(),
                v["correct"].as_bool().unwrap(),
            )
        })
        .collect();
    assert_eq!(got_verdicts, expected_verdicts);
    for t in export["truth"].as_array().unwrap() {
        let (yes, no) = image_votes[t["id"].as_str().unwrap()];
        assert_eq!(t["is_templated"].as_bool().unwrap(), yes > no);
        let confirmed: std::collections::BTreeSet<&str> = expected_verdicts
            .iter()
            .filter(|v| v.0 == t["id"].as_str().unwrap() && v.3)
            .map(|v| v.2.as_str())
            .collect();
        let want = if yes > no { confirmed.first().copied() } else { None };
        assert_eq!(t["template"].as_str(), want);
    }

    // restart from the log
    server.abort();
    let _ = server.await;
    let (base, server) = start(&config).await;
    let export_after = client
        .get(format!("{base}/api/export"))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    assert_eq!(export_after, export_before);
    for name in ANNOTATORS {
        let next: Value = client
            .get(format!("{base}/api/tasks/next?annotator={name}"))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(next["done"], true);
        assert_eq!(next["judged"], 30);
    }
    let replayed = AppState::load(&config).unwrap().snapshot();
    assert_eq!(replayed.judgments().count(), 90);
    server.abort();
}
