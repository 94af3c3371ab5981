#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Parsed bundles must also answer queries without panicking.
    if let Ok((cc, _)) = nabs::format::deploy_from_bytes(data) {
        for cell in 0..cc.state_grid.num_cells().min(16) {
            let _ = cc.query(cell);
        }
    }
});
