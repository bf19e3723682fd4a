#![no_main]

use libfuzzer_sys::fuzz_target;
use plat_core::io::WeightsFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = WeightsFile::from_binary(data) {
        let again = WeightsFile::from_binary(&w.to_binary()).expect("re-encoded weights decode");
        assert_eq!(again, w);
    }
});
