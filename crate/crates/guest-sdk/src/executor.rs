//! Single-threaded cooperative executor.
//!
//! Tasks only ever wait on host completions, so there is no waker plumbing:
//! each outstanding host call is recorded in the pending table together with
//! the task that issued it, and `wakeup` re-queues exactly that task.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use crate::host::Host;

type TaskId = u64;
type BoxFuture = Pin<Box<dyn Future<Output = ()>>>;

#[derive(Default)]
struct Slot {
    /// `None` once the owning future was dropped; deliveries are then discarded.
    task: Option<TaskId>,
    stream: bool,
    queue: VecDeque<Vec<u8>>,
}

pub(crate) struct Inner {
    host: RefCell<Box<dyn Host>>,
    tasks: RefCell<BTreeMap<TaskId, Option<BoxFuture>>>,
    ready: RefCell<VecDeque<TaskId>>,
    pending: RefCell<BTreeMap<u64, Slot>>,
    next_task: Cell<TaskId>,
}

thread_local! {
    static CURRENT: RefCell<Option<(Rc<Inner>, TaskId)>> = const { RefCell::new(None) };
}

/// Runs `f` against the executor and task currently being polled.
///
/// Panics outside a task: host calls are only meaningful from guest code
/// driven by `start` or `wakeup`.
pub(crate) fn with_current<R>(f: impl FnOnce(&Rc<Inner>, TaskId) -> R) -> R {
    CURRENT.with(|c| {
        let cur = c.borrow();
        let (inner, task) = cur.as_ref().expect("host call outside an executor task");
        f(inner, *task)
    })
}

pub(crate) fn try_with_current<R>(f: impl FnOnce(&Rc<Inner>, TaskId) -> R) -> Option<R> {
    CURRENT.with(|c| c.borrow().as_ref().map(|(inner, task)| f(inner, *task)))
}

impl Inner {
    pub(crate) fn host(&self) -> std::cell::RefMut<'_, Box<dyn Host>> {
        self.host.borrow_mut()
    }

    pub(crate) fn register(&self, id: u64, task: TaskId, stream: bool) {
        let prev = self.pending.borrow_mut().insert(id, Slot { task: Some(task), stream, queue: VecDeque::new() });
        assert!(prev.is_none(), "host returned async id {id} twice");
    }

    /// Next delivered payload for `id`. A non-stream slot is removed once its
    /// single payload is taken.
    pub(crate) fn take(&self, id: u64) -> Option<Vec<u8>> {
        let mut pending = self.pending.borrow_mut();
        let slot = pending.get_mut(&id)?;
        let payload = slot.queue.pop_front()?;
        if !slot.stream {
            pending.remove(&id);
        }
        Some(payload)
    }

    /// Stream finished (StreamClosed consumed) or future dropped.
    pub(crate) fn release(&self, id: u64) {
        let mut pending = self.pending.borrow_mut();
        if let Some(slot) = pending.get_mut(&id) {
            if slot.stream || !slot.queue.is_empty() {
                pending.remove(&id);
            } else {
                slot.task = None;
            }
        }
    }

    fn spawn(&self, fut: BoxFuture) {
        let id = self.next_task.get();
        self.next_task.set(id + 1);
        self.tasks.borrow_mut().insert(id, Some(fut));
        self.ready.borrow_mut().push_back(id);
    }
}

/// Owns the tasks of one guest instance.
#[derive(Clone)]
pub struct Executor {
    inner: Rc<Inner>,
}

impl Executor {
    pub fn new(host: Box<dyn Host>) -> Self {
        Executor {
            inner: Rc::new(Inner {
                host: RefCell::new(host),
                tasks: RefCell::new(BTreeMap::new()),
                ready: RefCell::new(VecDeque::new()),
                pending: RefCell::new(BTreeMap::new()),
                next_task: Cell::new(1),
            }),
        }
    }

    /// Queues a task; it first runs on the next [`run_until_stalled`](Self::run_until_stalled).
    pub fn spawn(&self, fut: impl Future<Output = ()> + 'static) {
        self.inner.spawn(Box::pin(fut));
    }

    /// Delivers one completion payload (an encoded envelope) and runs the
    /// resumed task plus anything it unblocks.
    ///
    /// # Panics
    /// If `id` is not outstanding. That is a protocol violation by the host and
    /// must end the guest.
    pub fn wakeup(&self, id: u64, payload: Vec<u8>) {
        let task = {
            let mut pending = self.inner.pending.borrow_mut();
            let Some(slot) = pending.get_mut(&id) else {
                panic!("wakeup for unknown async id {id}");
            };
            match slot.task {
                Some(task) => {
                    slot.queue.push_back(payload);
                    Some(task)
                }
                None => {
                    if !slot.stream {
                        pending.remove(&id);
                    }
                    None
                }
            }
        };
        if let Some(task) = task {
            self.inner.ready.borrow_mut().push_back(task);
        }
        self.run_until_stalled();
    }

    /// Polls ready tasks until every live task waits on the host.
    pub fn run_until_stalled(&self) {
        let waker = Waker::noop();
        let mut cx = Context::from_waker(waker);
        loop {
            let Some(task) = self.inner.ready.borrow_mut().pop_front() else { break };
            let Some(mut fut) = self.inner.tasks.borrow_mut().get_mut(&task).and_then(Option::take) else {
                continue;
            };
            let prev = CURRENT.with(|c| c.borrow_mut().replace((Rc::clone(&self.inner), task)));
            let poll = fut.as_mut().poll(&mut cx);
            CURRENT.with(|c| *c.borrow_mut() = prev);
            match poll {
                Poll::Ready(()) => {
                    self.inner.tasks.borrow_mut().remove(&task);
                }
                Poll::Pending => {
                    if let Some(entry) = self.inner.tasks.borrow_mut().get_mut(&task) {
                        *entry = Some(fut);
                    }
                }
            }
        }
        debug_assert!(self.inner.ready.borrow().is_empty());
    }

    /// No task is left.
    pub fn is_finished(&self) -> bool {
        self.inner.tasks.borrow().is_empty()
    }

    pub fn task_count(&self) -> usize {
        self.inner.tasks.borrow().len()
    }

    /// Ids the guest is still waiting on, ascending.
    pub fn pending_ids(&self) -> Vec<u64> {
        self.inner.pending.borrow().keys().copied().collect()
    }

    /// Live tasks that hold no pending host call. Such a task can never be
    /// resumed; a correct program keeps this at zero between turns.
    pub fn stuck_tasks(&self) -> usize {
        let pending = self.inner.pending.borrow();
        self.inner
            .tasks
            .borrow()
            .keys()
            .filter(|t| !pending.values().any(|s| s.task == Some(**t)))
            .count()
    }
}

/// Spawns a sibling task from inside a running task.
pub fn spawn(fut: impl Future<Output = ()> + 'static) {
    with_current(|inner, _| inner.spawn(Box::pin(fut)));
}
