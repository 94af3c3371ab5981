#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // A well-formed network must also evaluate without panicking.
    if let Ok(net) = nabs::format::network_from_bytes(data) {
        let x = vec![0.5; net.input_dim()];
        let _ = net.forward(&x);
    }
});
