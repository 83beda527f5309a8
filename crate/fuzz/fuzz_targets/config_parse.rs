#![no_main]

use libfuzzer_sys::fuzz_target;
use mvfbsde::io::{config_to_toml, parse_config};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Accepted documents must survive a serialize-parse round trip.
    if let Ok(cfg) = parse_config(text) {
        let again = config_to_toml(&cfg).expect("accepted config serializes");
        assert_eq!(parse_config(&again).expect("serialized config parses"), cfg);
    }
});
