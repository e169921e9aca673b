#![no_main]

use libfuzzer_sys::fuzz_target;
use ovrescore::io::{encode_dump, parse_dump};

fuzz_target!(|data: &[u8]| {
    if let Ok((header, records)) = parse_dump(data) {
        let again = encode_dump(&header, &records).expect("parsed dumps re-encode");
        let (h2, r2) = parse_dump(&again).expect("re-encoded dumps parse");
        assert_eq!(header, h2);
        assert_eq!(records, r2);
    }
});
