#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = nabs::repr::validate_corner_dataset_bytes(data);
});
