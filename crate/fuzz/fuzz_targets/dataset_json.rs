#![no_main]

use libfuzzer_sys::fuzz_target;
use plat_core::io::{dataset_from_json, dataset_to_json};

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = dataset_from_json(data) {
        let again = dataset_from_json(dataset_to_json(&d).as_bytes()).expect("re-encoded dataset decodes");
        assert_eq!(again, d);
    }
});
