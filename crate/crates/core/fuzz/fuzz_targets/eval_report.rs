#![no_main]

use libfuzzer_sys::fuzz_target;
use ovrescore::io::parse_eval;

fuzz_target!(|data: &[u8]| {
    let _ = parse_eval(data);
});
