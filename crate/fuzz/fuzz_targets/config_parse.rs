#![no_main]

use libfuzzer_sys::fuzz_target;
use lsaf_cli::config::RunConfig;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = RunConfig::parse(text) {
        let _ = cfg.validate();
        let _ = cfg.data_paths();
    }
});
