#![no_main]

use kollektiv::fine_rastall::{bell_check, joint_exists, MarginalSystem};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(m) = MarginalSystem::from_json(text) else {
        return;
    };
    assert_eq!(MarginalSystem::from_json(&m.to_json()).unwrap(), m);
    // accepted systems are consistent, so the decision procedures agree
    let v = joint_exists(&m).unwrap();
    assert_eq!(v.is_feasible(), bell_check(&m).pass);
});
