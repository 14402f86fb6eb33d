//! Small guest programs for exercising the runtime. The `program` key of the
//! config selects one:
//!
//! - `counter`: counts watch events on `namespace`, logs the count, writes it
//!   to `dest` and sleeps briefly every third event;
//! - `two-task`: two tasks sleeping 200 ms and 10 ms, each logging on resume;
//! - `finish`: logs and returns without host calls;
//! - `panic`: traps immediately;
//! - `panic-on-event`: watches `namespace` and traps on the first event;
//! - `echo-config`: logs its config and returns.

use guest_sdk::client::apply;
use guest_sdk::{delay, log, spawn, watch_testresources};
use serde::Deserialize;

#[derive(Deserialize)]
struct Config {
    program: String,
    #[serde(default = "default_namespace")]
    namespace: String,
    #[serde(default = "default_dest")]
    dest: String,
}

fn default_namespace() -> String {
    "ns-1".into()
}

fn default_dest() -> String {
    "ns-2".into()
}

pub async fn entry(config: Vec<u8>) {
    let cfg: Config = serde_json::from_slice(&config).expect("config must name a program");
    match cfg.program.as_str() {
        "counter" => counter(cfg).await,
        "two-task" => {
            spawn(async {
                delay(200).await;
                log("resumed slow");
            });
            spawn(async {
                delay(10).await;
                log("resumed fast");
            });
        }
        "finish" => log("done"),
        "panic" => panic!("requested panic"),
        "panic-on-event" => {
            let mut w = watch_testresources(&cfg.namespace, 0);
            if w.next().await.is_some() {
                panic!("event received");
            }
        }
        "echo-config" => log(&String::from_utf8_lossy(&config)),
        other => panic!("unknown program {other:?}"),
    }
}

async fn counter(cfg: Config) {
    let mut counter: u64 = 0;
    // Grows with every event so the snapshot has more than a few bytes of state.
    let mut history: Vec<u64> = Vec::new();
    let mut w = watch_testresources(&cfg.namespace, 0);
    while let Some(ev) = w.next().await {
        counter += 1;
        let nonce = ev.map(|e| e.object.spec.nonce).unwrap_or(0);
        history.push(nonce);
        let checksum = history.iter().fold(0u64, |acc, n| acc.rotate_left(7) ^ n);
        log(&format!("counter={counter} nonce={nonce} checksum={checksum:x}"));
        if counter % 3 == 0 {
            delay(1).await;
        }
        if let Err(e) = apply(&cfg.dest, "count", counter).await {
            log(&format!("apply failed: {e}"));
        }
    }
}

guest_sdk::operator_main!(entry);
