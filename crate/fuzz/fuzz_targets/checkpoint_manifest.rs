#![no_main]

use dodt_core::checkpoint::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::parse(text) {
        let again = Manifest::parse(&m.render()).expect("rendered manifest parses");
        assert_eq!(again, m);
        let _ = m.byte_len();
    }
});
