#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(s) = cdg_core::schedule::NoiseSchedule::from_json(text) {
            // Accepted schedules re-serialize to something the loader takes back.
            let again = cdg_core::schedule::NoiseSchedule::from_json(&s.to_json())
                .expect("re-serialized schedule loads");
            assert_eq!(again.steps(), s.steps());
        }
    }
});
