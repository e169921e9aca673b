#![no_main]

use libfuzzer_sys::fuzz_target;
use ovrescore::io::{parse_bank, to_json_bytes, BankDoc};

fuzz_target!(|data: &[u8]| {
    if let Ok(bank) = parse_bank(data) {
        let bytes = to_json_bytes(&BankDoc::from_bank(&bank)).unwrap();
        assert_eq!(parse_bank(&bytes).unwrap(), bank);
    }
});
