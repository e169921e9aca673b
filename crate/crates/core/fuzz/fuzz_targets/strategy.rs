#![no_main]

use libfuzzer_sys::fuzz_target;
use ovrescore::pipeline::{Mode, Profile};
use ovrescore::prototypes::SamplingStrategy;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = text.parse::<SamplingStrategy>() {
        let round: SamplingStrategy = s.to_string().parse().unwrap();
        assert_eq!(round.to_string(), s.to_string());
    }
    let _ = text.parse::<Mode>();
    let _ = text.parse::<Profile>();
});
