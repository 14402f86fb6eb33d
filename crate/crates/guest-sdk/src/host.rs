//! Host function backends. In a wasm32 build the calls go to the imports of
//! the host runtime; natively any [`Host`] implementation can drive the
//! executor, which is how the no-isolation benchmark variant and the unit
//! tests run guest code.

/// The three host functions a guest can call.
pub trait Host {
    /// Submits an encoded request envelope; returns its async id.
    fn kube_request(&mut self, envelope: &[u8]) -> u64;
    /// Starts a timer; returns its async id.
    fn delay(&mut self, millis: u64) -> u64;
    fn log(&mut self, line: &str);
}

#[cfg(target_arch = "wasm32")]
pub(crate) mod ffi {
    #[link(wasm_import_module = "wasm_operator")]
    extern "C" {
        fn kube_request(ptr: *const u8, len: usize) -> u64;
        fn delay(millis: u64) -> u64;
        fn log(ptr: *const u8, len: usize);
    }

    pub struct FfiHost;

    impl super::Host for FfiHost {
        fn kube_request(&mut self, envelope: &[u8]) -> u64 {
            unsafe { kube_request(envelope.as_ptr(), envelope.len()) }
        }

        fn delay(&mut self, millis: u64) -> u64 {
            unsafe { delay(millis) }
        }

        fn log(&mut self, line: &str) {
            unsafe { log(line.as_ptr(), line.len()) }
        }
    }

    pub fn log_line(line: &str) {
        unsafe { log(line.as_ptr(), line.len()) }
    }
}
