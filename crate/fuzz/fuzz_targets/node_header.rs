#![no_main]

use circtree::NodeHeader;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(h) = NodeHeader::decode(data) else {
        return;
    };
    assert_eq!(NodeHeader::decode(&h.encode()).unwrap(), h);
    let cap = u64::from(data.first().copied().unwrap_or(4)).max(4);
    let _ = h.validate(cap, 1 << 20);
});
