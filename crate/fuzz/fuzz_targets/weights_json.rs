#![no_main]

use libfuzzer_sys::fuzz_target;
use plat_core::io::WeightsFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = WeightsFile::from_json(data) {
        let again = WeightsFile::from_json(w.to_json().as_bytes()).expect("re-encoded weights decode");
        assert_eq!(again, w);
    }
});
