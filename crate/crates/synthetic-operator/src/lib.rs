//! Guest controller for the chain benchmark: watches `source`, writes `dest`.

use guest_sdk::{synthetic_reconcile, ReconcileContext};

pub async fn entry(config: Vec<u8>) {
    let ctx = match ReconcileContext::from_json(&config) {
        Ok(ctx) => ctx,
        Err(e) => panic!("invalid config: {e}"),
    };
    synthetic_reconcile(ctx).await
}

guest_sdk::operator_main!(entry);
