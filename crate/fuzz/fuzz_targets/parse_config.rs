#![no_main]

use kollektiv_cli::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = ExperimentConfig::from_json_str(text) {
        // the config echo is a fixed point, so manifests re-run unchanged
        let echo = config.to_value();
        let again = ExperimentConfig::from_value(echo.clone()).unwrap();
        assert_eq!(again.to_value(), echo);
    }
});
