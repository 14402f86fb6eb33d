//! Running a [`Runtime`] on its own thread and talking to it from others.

use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::Sender;

use crate::bridge::Transport;
use crate::error::RuntimeError;
use crate::queue::LoopMessage;
use crate::runtime::{Runtime, RuntimeConfig};

/// Owns the event-loop thread. The runtime itself never leaves that thread;
/// callers reach it with [`call`](Self::call).
pub struct RuntimeHandle {
    tx: Sender<LoopMessage>,
    thread: Option<JoinHandle<usize>>,
}

impl RuntimeHandle {
    /// Builds the runtime on a new thread and starts serving.
    pub fn launch(config: RuntimeConfig, transport: Option<Arc<dyn Transport>>) -> Result<Self, RuntimeError> {
        Self::launch_with(config, transport, |_| Ok(()))
    }

    /// Like [`launch`](Self::launch), running `setup` on the loop thread
    /// before serving starts.
    pub fn launch_with(
        config: RuntimeConfig,
        transport: Option<Arc<dyn Transport>>,
        setup: impl FnOnce(&mut Runtime) -> Result<(), RuntimeError> + Send + 'static,
    ) -> Result<Self, RuntimeError> {
        let (ready_tx, ready_rx) = crossbeam_channel::bounded(1);
        let thread = std::thread::Builder::new()
            .name("wop-event-loop".into())
            .spawn(move || {
                let mut runtime = match Runtime::new(config, transport).and_then(|mut rt| setup(&mut rt).map(|()| rt)) {
                    Ok(rt) => rt,
                    Err(e) => {
                        let _ = ready_tx.send(Err(e));
                        return 0;
                    }
                };
                let _ = ready_tx.send(Ok(runtime.sender()));
                runtime.serve()
            })
            .map_err(|e| RuntimeError::io("spawning event loop thread", e))?;
        match ready_rx.recv() {
            Ok(Ok(tx)) => Ok(RuntimeHandle { tx, thread: Some(thread) }),
            Ok(Err(e)) => {
                let _ = thread.join();
                Err(e)
            }
            Err(_) => Err(RuntimeError::Unsupported("event loop thread died during setup".into())),
        }
    }

    /// Runs `f` on the loop thread between turns and returns its result.
    pub fn call<R: Send + 'static>(&self, f: impl FnOnce(&mut Runtime) -> R + Send + 'static) -> Result<R, RuntimeError> {
        let (tx, rx) = crossbeam_channel::bounded(1);
        self.tx
            .send(LoopMessage::Control(Box::new(move |rt| {
                let _ = tx.send(f(rt));
            })))
            .map_err(|_| stopped())?;
        rx.recv().map_err(|_| stopped())
    }

    pub fn sender(&self) -> Sender<LoopMessage> {
        self.tx.clone()
    }

    /// Stops the loop after the current batch. Returns the number of turns it ran.
    pub fn shutdown(mut self) -> usize {
        self.stop()
    }

    fn stop(&mut self) -> usize {
        let _ = self.tx.send(LoopMessage::Shutdown);
        self.thread.take().map_or(0, |t| t.join().unwrap_or(0))
    }
}

fn stopped() -> RuntimeError {
    RuntimeError::Unsupported("event loop has stopped".into())
}

impl Drop for RuntimeHandle {
    fn drop(&mut self) {
        self.stop();
    }
}
