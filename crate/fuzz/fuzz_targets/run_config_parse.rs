#![no_main]

use blockquant_cli::config::{parse_run_config, Command};
use libfuzzer_sys::fuzz_target;

const COMMANDS: [Command; 7] = [
    Command::Quantize,
    Command::Eval,
    Command::Density,
    Command::Profile,
    Command::Search,
    Command::Report,
    Command::BuildModel,
];

fuzz_target!(|data: &[u8]| {
    let Some((&pick, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    let command = COMMANDS[pick as usize % COMMANDS.len()];
    if let Ok(mut cfg) = parse_run_config(text, command) {
        cfg.resolve_paths(std::path::Path::new("/base"));
        let _ = (
            cfg.seed(),
            cfg.budget(),
            cfg.patience(),
            cfg.alpha(),
            cfg.out_dir(),
        );
    }
});
