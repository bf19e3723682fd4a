#![no_main]

use libfuzzer_sys::fuzz_target;
use plat_cli::plot::{render_csv, PlotKind};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for kind in [PlotKind::Energy, PlotKind::Ratio, PlotKind::Accuracy] {
        if let Ok(svg) = render_csv(kind, text) {
            assert!(svg.starts_with("<svg"));
        }
    }
});
