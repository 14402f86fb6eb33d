//! Guest programs compiled into the host binary and driven by the same
//! executor the wasm guests use. No engine, no isolation, no unloading.

use std::cell::RefCell;
use std::future::Future;
use std::panic::{self, AssertUnwindSafe};
use std::pin::Pin;
use std::rc::Rc;

use wasm_operator_abi::Envelope;
use guest_sdk::{synthetic_reconcile, Executor, Host, ReconcileContext};

use crate::host::HostCall;

pub type NativeFuture = Pin<Box<dyn Future<Output = ()>>>;

/// Entry point of a native guest: receives the config blob, returns its main task.
pub type NativeProgram = fn(Vec<u8>) -> NativeFuture;

/// The synthetic propagation controller as a native program.
pub fn synthetic_program(config: Vec<u8>) -> NativeFuture {
    let ctx = ReconcileContext::from_json(&config).expect("invalid synthetic operator config");
    Box::pin(synthetic_reconcile(ctx))
}

#[derive(Default)]
struct Outbox {
    next_id: u64,
    calls: Vec<HostCall>,
    logs: Vec<String>,
}

struct NativeHost(Rc<RefCell<Outbox>>);

impl Host for NativeHost {
    fn kube_request(&mut self, envelope: &[u8]) -> u64 {
        let mut out = self.0.borrow_mut();
        let id = out.next_id;
        out.next_id += 1;
        let call = match Envelope::decode(envelope) {
            Ok(envelope) => HostCall::Request { id, envelope },
            Err(e) => HostCall::Malformed { id, reason: e.to_string() },
        };
        out.calls.push(call);
        id
    }

    fn delay(&mut self, millis: u64) -> u64 {
        let mut out = self.0.borrow_mut();
        let id = out.next_id;
        out.next_id += 1;
        out.calls.push(HostCall::Delay { id, millis });
        id
    }

    fn log(&mut self, line: &str) {
        self.0.borrow_mut().logs.push(line.to_owned());
    }
}

pub struct NativeInstance {
    executor: Executor,
    outbox: Rc<RefCell<Outbox>>,
    program: Option<NativeProgram>,
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = payload.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic".to_owned()
    }
}

impl NativeInstance {
    pub fn new(program: NativeProgram, next_id: u64) -> Self {
        let outbox = Rc::new(RefCell::new(Outbox { next_id, ..Outbox::default() }));
        let executor = Executor::new(Box::new(NativeHost(Rc::clone(&outbox))));
        NativeInstance { executor, outbox, program: Some(program) }
    }

    pub fn run_start(&mut self, config: &[u8]) -> Result<(), String> {
        let program = self.program.take().expect("native start runs once");
        let config = config.to_vec();
        let executor = self.executor.clone();
        panic::catch_unwind(AssertUnwindSafe(move || {
            executor.spawn(program(config));
            executor.run_until_stalled();
        }))
        .map_err(panic_message)
    }

    pub fn run_wakeup(&mut self, id: u64, payload: &[u8]) -> Result<(), String> {
        let executor = self.executor.clone();
        let payload = payload.to_vec();
        panic::catch_unwind(AssertUnwindSafe(move || executor.wakeup(id, payload))).map_err(panic_message)
    }

    pub fn next_id(&self) -> u64 {
        self.outbox.borrow().next_id
    }

    /// Host calls and log lines produced since the last drain.
    pub fn drain(&mut self) -> (Vec<HostCall>, Vec<String>) {
        let mut out = self.outbox.borrow_mut();
        (std::mem::take(&mut out.calls), std::mem::take(&mut out.logs))
    }
}
