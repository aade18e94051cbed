#![no_main]

use dodt_core::replay::file;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((_, _, trajectories)) = file::parse(text) {
        if let Ok(rendered) = file::render(&trajectories) {
            let (_, _, again) = file::parse(&rendered).expect("rendered file parses");
            assert_eq!(again.len(), trajectories.len());
        }
    }
});
