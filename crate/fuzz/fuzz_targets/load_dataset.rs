#![no_main]

use libfuzzer_sys::fuzz_target;
use rtpmix::io::{load_dataset, DatasetSpec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let spec = DatasetSpec {
        response: "y".into(),
        covariates: vec!["x".into()],
        categoricals: vec!["g".into()],
        ..Default::default()
    };
    if let Ok(d) = load_dataset(text, &spec) {
        assert!(d.responses().iter().all(|&y| y <= d.threshold()));
        assert_eq!(d.design().nrows(), d.n());
    }
});
