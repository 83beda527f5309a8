#![no_main]

use libfuzzer_sys::fuzz_target;
use mvfbsde::io::{checkpoint_to_json, parse_checkpoint};

fuzz_target!(|data: &[u8]| {
    // Loaded checkpoints must reproduce their networks after re-encoding.
    if let Ok((ck, nets)) = parse_checkpoint(data, None) {
        let text = checkpoint_to_json(&ck).expect("loaded checkpoint serializes");
        let (_, back) = parse_checkpoint(text.as_bytes(), Some(&ck.model)).expect("re-encoded checkpoint loads");
        assert_eq!(back, nets);
    }
});
