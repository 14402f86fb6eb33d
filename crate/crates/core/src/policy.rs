use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnloadMode {
    Never,
    EveryTurn,
    IdleTimeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnloadPolicy {
    pub mode: UnloadMode,
    #[serde(with = "millis", default = "default_timeout", rename = "idle_timeout_ms")]
    pub idle_timeout: Duration,
}

fn default_timeout() -> Duration {
    DEFAULT_IDLE_TIMEOUT
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

impl Default for UnloadPolicy {
    fn default() -> Self {
        UnloadPolicy::never()
    }
}

impl UnloadPolicy {
    pub fn never() -> Self {
        UnloadPolicy { mode: UnloadMode::Never, idle_timeout: DEFAULT_IDLE_TIMEOUT }
    }

    pub fn every_turn() -> Self {
        UnloadPolicy { mode: UnloadMode::EveryTurn, idle_timeout: DEFAULT_IDLE_TIMEOUT }
    }

    pub fn idle_timeout(timeout: Duration) -> Self {
        UnloadPolicy { mode: UnloadMode::IdleTimeout, idle_timeout: timeout }
    }
}

/// Kind of outstanding host operation behind an async id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Request,
    Watch,
    Timer,
}

impl OpKind {
    /// Streams produce many completions under one id.
    pub fn is_stream(self) -> bool {
        self == OpKind::Watch
    }
}

/// What the unload decision looks at.
#[derive(Debug, Clone, Copy)]
pub struct IdleState {
    pub last_completion_at: Instant,
    /// Some pending operation is a plain request, so a reply is imminent.
    pub awaiting_reply: bool,
}

impl IdleState {
    pub fn from_pending<'a>(last_completion_at: Instant, pending: impl IntoIterator<Item = &'a OpKind>) -> Self {
        IdleState { last_completion_at, awaiting_reply: pending.into_iter().any(|k| *k == OpKind::Request) }
    }
}

/// Whether a loaded, quiescent instance should be swapped out now.
pub fn should_unload(state: &IdleState, policy: &UnloadPolicy, now: Instant) -> bool {
    match policy.mode {
        UnloadMode::Never => false,
        UnloadMode::EveryTurn => true,
        UnloadMode::IdleTimeout => {
            !state.awaiting_reply && now.saturating_duration_since(state.last_completion_at) >= policy.idle_timeout
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decisions() {
        let now = Instant::now();
        let idle = now - Duration::from_secs(61);
        let watch_only = IdleState::from_pending(idle, &[OpKind::Watch]);
        let with_request = IdleState::from_pending(idle, &[OpKind::Watch, OpKind::Request]);
        let policy = UnloadPolicy::idle_timeout(Duration::from_secs(60));
        assert!(should_unload(&watch_only, &policy, now));
        assert!(!should_unload(&with_request, &policy, now));
        let fresh = IdleState::from_pending(now - Duration::from_secs(59), &[OpKind::Watch, OpKind::Timer]);
        assert!(!should_unload(&fresh, &policy, now));
        for s in [watch_only, with_request, fresh] {
            assert!(!should_unload(&s, &UnloadPolicy::never(), now));
            assert!(should_unload(&s, &UnloadPolicy::every_turn(), now));
        }
    }

    #[test]
    fn policy_json() {
        let p: UnloadPolicy = serde_json::from_str(r#"{"mode":"idle-timeout","idle_timeout_ms":1500}"#).unwrap();
        assert_eq!(p, UnloadPolicy::idle_timeout(Duration::from_millis(1500)));
        let p: UnloadPolicy = serde_json::from_str(r#"{"mode":"every-turn"}"#).unwrap();
        assert_eq!(p.idle_timeout, DEFAULT_IDLE_TIMEOUT);
    }
}
