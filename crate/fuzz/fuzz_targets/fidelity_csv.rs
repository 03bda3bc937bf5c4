#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = cdg_core::metrics::FidelityMatrix::from_csv(text) {
            let again = cdg_core::metrics::FidelityMatrix::from_csv(&m.to_csv())
                .expect("re-serialized matrix parses");
            assert_eq!(again, m);
        }
    }
});
