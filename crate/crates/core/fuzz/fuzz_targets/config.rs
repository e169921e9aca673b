#![no_main]

use libfuzzer_sys::fuzz_target;
use ovrescore::io::{parse_config_text, ConfigFile};
use ovrescore::synthetic::SceneSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for toml in [true, false] {
        if let Ok(cfg) = parse_config_text::<ConfigFile>(text, toml, "fuzz") {
            let _ = cfg.apply(Default::default()).validate();
        }
        if let Ok(spec) = parse_config_text::<SceneSpec>(text, toml, "fuzz") {
            let _ = spec.validate();
        }
    }
});
