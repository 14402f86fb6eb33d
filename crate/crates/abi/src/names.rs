//! Symbol names shared by the host runtime and guest modules.

/// Import module under which the host functions live.
pub const HOST_MODULE: &str = "wasm_operator";

/// `kube_request(ptr: i32, len: i32) -> i64`: submit an encoded request envelope.
pub const IMPORT_KUBE_REQUEST: &str = "kube_request";
/// `delay(millis: i64) -> i64`: start a timer.
pub const IMPORT_DELAY: &str = "delay";
/// `log(ptr: i32, len: i32)`: emit one UTF-8 diagnostic line.
pub const IMPORT_LOG: &str = "log";

/// `start()`: begin the reconciliation program.
pub const EXPORT_START: &str = "start";
/// `allocate(len: i32) -> i32`: guest-owned buffer for host-written payloads.
pub const EXPORT_ALLOCATE: &str = "allocate";
/// `wakeup(async_id: i64, ptr: i32, len: i32)`: deliver one completion.
pub const EXPORT_WAKEUP: &str = "wakeup";
/// `config(ptr: i32, len: i32)`: optional, called once before `start` with the
/// instance's JSON configuration blob.
pub const EXPORT_CONFIG: &str = "config";

/// WASI preview1 module name.
pub const WASI_MODULE: &str = "wasi_snapshot_preview1";

/// The WASI preview1 functions the host provides. Anything else imported from
/// the WASI module is rejected at validation time.
pub const WASI_SUPPORTED: &[&str] = &[
    "fd_write",
    "proc_exit",
    "random_get",
    "clock_time_get",
    "environ_sizes_get",
    "environ_get",
    "args_sizes_get",
    "args_get",
    "sched_yield",
];
