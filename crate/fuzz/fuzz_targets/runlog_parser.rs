#![no_main]

use harness::runlog::{parse_runlog, write_runlog, Table};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = Table::parse(text);
    if let Ok(rows) = parse_runlog(text) {
        let written = write_runlog(&rows).expect("parsed rows serialise");
        let back = parse_runlog(&written).expect("written log parses");
        assert_eq!(write_runlog(&back).expect("reserialise"), written);
    }
});
