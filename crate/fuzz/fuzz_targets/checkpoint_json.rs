#![no_main]

use libfuzzer_sys::fuzz_target;
use plat_core::io::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_json(data) {
        let _ = ck.into_model();
    }
});
