#![no_main]

use ffae_cli::config::{resolve, FlagOverrides};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = resolve(Some(text), FlagOverrides::default(), None) {
        // The echoed configuration must resolve to itself.
        let again = resolve(Some(&cfg.to_toml()), FlagOverrides::default(), None).expect("echo resolves");
        assert_eq!(again, cfg);
    }
});
