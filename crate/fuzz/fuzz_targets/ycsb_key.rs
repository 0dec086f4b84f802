#![no_main]

use circtree::kv::parse_ycsb_key;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(k) = parse_ycsb_key(s) {
        assert_eq!(parse_ycsb_key(&format!("user{k}")).unwrap(), k);
    }
});
