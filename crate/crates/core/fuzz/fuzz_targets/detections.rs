#![no_main]

use libfuzzer_sys::fuzz_target;
use ovrescore::io::{parse_detections, to_json_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(doc) = parse_detections(data) {
        let bytes = to_json_bytes(&doc).unwrap();
        assert_eq!(parse_detections(&bytes).unwrap(), doc);
    }
});
