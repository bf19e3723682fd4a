#![no_main]

use libfuzzer_sys::fuzz_target;
use plat_cli::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = ExperimentConfig::from_json(text) {
        let again = ExperimentConfig::from_json(&config.to_json()).expect("resolved echo parses");
        assert_eq!(again, config);
    }
});
