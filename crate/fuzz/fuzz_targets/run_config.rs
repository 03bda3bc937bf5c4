#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = cdg_core::config::RunConfig::from_json_bytes(data);
});
