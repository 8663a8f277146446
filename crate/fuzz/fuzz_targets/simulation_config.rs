#![no_main]

use libfuzzer_sys::fuzz_target;
use rtpmix::simlab::SimulationConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = SimulationConfig::from_json(text) {
        // A decoded configuration must yield a usable model.
        if config.validate().is_ok() {
            let _ = config.true_model().expect("validated configuration");
        }
    }
});
