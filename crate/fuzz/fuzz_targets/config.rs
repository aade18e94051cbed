#![no_main]

use dodt_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        // Whatever parses must survive a render/parse round trip.
        let again = RunConfig::parse(&cfg.render()).expect("rendered config parses");
        assert_eq!(again, cfg);
    }
});
