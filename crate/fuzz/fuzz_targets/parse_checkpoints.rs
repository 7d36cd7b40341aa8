#![no_main]

use kollektiv::Checkpoints;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cps) = text.parse::<Checkpoints>() {
        assert!(cps.windows(2).all(|w| w[0] < w[1]));
        let again: Checkpoints = cps.to_string().parse().unwrap();
        assert_eq!(again, cps);
    }
});
