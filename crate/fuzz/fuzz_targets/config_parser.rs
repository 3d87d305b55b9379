#![no_main]

use harness::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::parse(text) {
        // Anything accepted must reach a canonical fixed point.
        let canonical = cfg.canonical();
        let again = ExperimentConfig::parse(&canonical).expect("canonical form parses");
        assert_eq!(again, cfg);
        assert_eq!(again.canonical(), canonical);
    }
});
