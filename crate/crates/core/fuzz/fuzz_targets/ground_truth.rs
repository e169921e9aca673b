#![no_main]

use libfuzzer_sys::fuzz_target;
use ovrescore::io::{parse_ground_truth, to_json_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(doc) = parse_ground_truth(data) {
        let bytes = to_json_bytes(&doc).unwrap();
        assert_eq!(parse_ground_truth(&bytes).unwrap(), doc);
    }
});
