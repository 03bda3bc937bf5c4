#![no_main]

use cdg_core::model::Denoiser;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((model, meta)) = Denoiser::decode_checkpoint(data) {
        // Anything the decoder accepts must survive a re-encode cycle.
        let bytes = model.encode_checkpoint(meta.seed, meta.task_index);
        let (again, meta2) = Denoiser::decode_checkpoint(&bytes).expect("re-encode decodes");
        assert_eq!(meta2, meta);
        let bits = |m: &Denoiser| m.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&again), bits(&model));
    }
});
