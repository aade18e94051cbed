#![no_main]

use dodt_core::trainer::{parse_metrics, render_metrics};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = parse_metrics(text) {
        let again = parse_metrics(&render_metrics(&table.rows)).expect("rendered metrics parse");
        assert_eq!(again.rows.len(), table.rows.len());
    }
});
