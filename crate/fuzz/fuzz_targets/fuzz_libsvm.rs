#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // Must never panic; any outcome other than a structured error or a
        // dataset satisfying the type invariants is a bug.
        if let Ok(parsed) = duhl::data::parse_libsvm_str(text, None) {
            assert!(parsed.n_features() >= 1);
            assert!(parsed.n_cols() >= 1);
            assert!(parsed.labels().iter().all(|l| l.is_finite()));
        }
        let _ = duhl::data::parse_libsvm_str(text, Some(8));
    }
});
