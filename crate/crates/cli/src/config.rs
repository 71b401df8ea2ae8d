//! `--config` files: INI sections whose keys are the long flag names of the
//! subcommands they feed. Values are spliced into argv ahead of the real
//! arguments, so explicit flags win.

use std::path::Path;

use ini::Ini;
use msrnn_core::{Error, Result};

/// Sections, the keys each accepts, and the subcommands each feeds.
const SECTIONS: &[(&str, &[&str], &[&str])] = &[
    (
        "data",
        &["out", "count", "test-count", "size", "digits", "frames", "seed", "idx-train", "idx-test"],
        &["gen-data"],
    ),
    (
        "model",
        &["cell", "variant", "skip", "layers", "hidden", "kernel", "zigzag", "diagonal", "history", "horizon"],
        &["train", "rf"],
    ),
    (
        "train",
        &[
            "train-data", "test-data", "epochs", "batch-size", "lr", "loss", "decay", "seed", "clip", "no-clip",
            "checkpoint", "log", "resume", "stop-after",
        ],
        &["train"],
    ),
    (
        "eval",
        &["checkpoint", "data", "batch-size", "thresholds", "csv", "indices", "out", "montage"],
        &["eval", "export"],
    ),
];

/// Boolean switches: `key = true` becomes a bare flag, `false` drops it.
const SWITCHES: &[&str] = &["zigzag", "diagonal", "no-clip", "montage"];

/// Reads `path` and returns the flags destined for `subcommand`, checking
/// every key of every section (not only the ones used).
pub fn flags_for(path: &Path, subcommand: &str, accepted: &[String]) -> Result<Vec<String>> {
    let ini = Ini::load_from_file(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut flags = Vec::new();
    for (section, props) in ini.iter() {
        let Some(section) = section else {
            if let Some((k, _)) = props.iter().next() {
                return Err(Error::config(format!("key `{k}` appears outside any section")));
            }
            continue;
        };
        let Some((_, keys, targets)) = SECTIONS.iter().find(|(name, _, _)| *name == section) else {
            return Err(Error::config(format!("unknown config section [{section}]")));
        };
        for (key, value) in props.iter() {
            let key = key.replace('_', "-");
            if !keys.contains(&key.as_str()) {
                return Err(Error::config(format!("unknown config key `{key}` in [{section}]")));
            }
            if !targets.contains(&subcommand) || !accepted.contains(&key) {
                continue;
            }
            if SWITCHES.contains(&key.as_str()) {
                match value.trim() {
                    "true" | "yes" | "1" => flags.push(format!("--{key}")),
                    "false" | "no" | "0" => {}
                    v => return Err(Error::config(format!("`{key}` expects true or false, got `{v}`"))),
                }
            } else {
                flags.push(format!("--{key}={}", value.trim()));
            }
        }
    }
    Ok(flags)
}
