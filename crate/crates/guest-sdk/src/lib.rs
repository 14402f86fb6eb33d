//! Library for writing controller guests.
//!
//! A guest is an async program driven by a single-threaded [`Executor`]. Each
//! host call ([`client::kube_call`], [`client::delay`], watches) registers an
//! async id and suspends the calling task; when every task is suspended the
//! guest returns to the host, which later pushes completions back through
//! `wakeup`. [`operator_main!`] generates the module exports for wasm32
//! builds.

pub mod client;
mod executor;
pub mod host;
pub mod reconcile;

pub use client::{delay, kube_call, log, watch_testresources, KubeError, ResourceWatch};
pub use executor::{spawn, Executor};
pub use host::Host;
pub use reconcile::{synthetic_reconcile, Ballast, ReconcileContext};
pub use wasm_operator_abi as abi;

#[cfg(target_arch = "wasm32")]
#[doc(hidden)]
pub mod rt {
    use std::cell::RefCell;
    use std::future::Future;

    use crate::executor::Executor;
    use crate::host::ffi::{log_line, FfiHost};

    thread_local! {
        static EXECUTOR: Executor = Executor::new(Box::new(FfiHost));
        static CONFIG: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
    }

    pub fn allocate(len: usize) -> *mut u8 {
        Box::into_raw(vec![0u8; len].into_boxed_slice()).cast()
    }

    /// Takes back a buffer handed out by [`allocate`].
    ///
    /// # Safety
    /// `ptr`/`len` must come from one `allocate` call and be used once.
    pub unsafe fn reclaim(ptr: *mut u8, len: usize) -> Vec<u8> {
        Box::from_raw(std::ptr::slice_from_raw_parts_mut(ptr, len)).into_vec()
    }

    pub unsafe fn config(ptr: *mut u8, len: usize) {
        let bytes = reclaim(ptr, len);
        CONFIG.with(|c| *c.borrow_mut() = bytes);
    }

    pub fn start<F: Future<Output = ()> + 'static>(main: impl FnOnce(Vec<u8>) -> F) {
        std::panic::set_hook(Box::new(|info| log_line(&format!("guest panic: {info}"))));
        let config = CONFIG.with(|c| std::mem::take(&mut *c.borrow_mut()));
        let fut = main(config);
        EXECUTOR.with(|e| {
            e.spawn(fut);
            e.run_until_stalled();
        });
    }

    pub unsafe fn wakeup(id: u64, ptr: *mut u8, len: usize) {
        let payload = reclaim(ptr, len);
        EXECUTOR.with(|e| e.wakeup(id, payload));
    }
}

/// Defines the guest exports (`config`, `start`, `allocate`, `wakeup`) around
/// an entry function `fn(config: Vec<u8>) -> impl Future<Output = ()>`.
///
/// Expands to nothing on non-wasm targets, so guest crates still build (and
/// can be tested) natively.
#[macro_export]
macro_rules! operator_main {
    ($main:path) => {
        #[cfg(target_arch = "wasm32")]
        mod __operator_exports {
            #[allow(unused_imports)]
            use super::*;

            #[no_mangle]
            pub extern "C" fn allocate(len: usize) -> *mut u8 {
                $crate::rt::allocate(len)
            }

            #[no_mangle]
            pub unsafe extern "C" fn config(ptr: *mut u8, len: usize) {
                $crate::rt::config(ptr, len)
            }

            #[no_mangle]
            pub extern "C" fn start() {
                $crate::rt::start($main)
            }

            #[no_mangle]
            pub unsafe extern "C" fn wakeup(id: u64, ptr: *mut u8, len: usize) {
                $crate::rt::wakeup(id, ptr, len)
            }
        }
    };
}
