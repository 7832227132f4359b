#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.is_empty() {
        return;
    }
    // First byte picks the expected dimension, the rest is the list text.
    let dim = (data[0] % 8) as usize + 1;
    if let Ok(text) = std::str::from_utf8(&data[1..]) {
        let _ = onirl::harness::parse_state_list(text, dim);
    }
});
