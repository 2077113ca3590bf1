//! Layered run configuration: defaults, config file, flags, then `key=value` overrides.

use std::fs;
use std::path::Path;

use mvcnet::trainer::{Family, RunConfig};
use toml::{Table, Value};

use crate::CliError;

fn defaults_table() -> Table {
    let text = toml::to_string(&RunConfig::default()).expect("defaults serialize");
    text.parse::<Table>().expect("defaults parse")
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `dotted.key` to `raw`, creating intermediate tables.
pub fn set_dotted(table: &mut Table, key: &str, raw: &str) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("override {key:?}: {p:?} is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw));
    Ok(())
}

/// Splits `key=value`.
pub fn split_override(s: &str) -> Result<(&str, &str), CliError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| CliError::Config(format!("override {s:?} must look like key=value")))
}

fn strip_nulls(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.retain(|_, x| !x.is_null());
            map.values_mut().for_each(strip_nulls);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_nulls),
        _ => {}
    }
}

pub struct Layers<'a> {
    pub file: Option<&'a Path>,
    pub flags: Vec<(String, String)>,
    pub overrides: &'a [String],
}

/// Resolves and validates the effective configuration.
pub fn resolve(layers: &Layers) -> Result<RunConfig, CliError> {
    let mut table = defaults_table();
    if let Some(path) = layers.file {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let file: Table = if path.extension().is_some_and(|e| e == "json") {
            let manifest: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let mut config = manifest.get("config").cloned().unwrap_or(manifest);
            strip_nulls(&mut config);
            let as_toml = toml::to_string(&config).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            as_toml.parse().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            text.parse().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        };
        merge(&mut table, file);
    }
    for (k, v) in &layers.flags {
        set_dotted(&mut table, k, v)?;
    }
    for o in layers.overrides {
        let (k, v) = split_override(o)?;
        set_dotted(&mut table, k, v)?;
    }
    let config: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().to_string()))?;
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

/// Parses `family-<classes>x<views>` into flag overrides.
pub fn protocol_flags(name: &str) -> Result<Vec<(String, String)>, CliError> {
    let err = || CliError::Config(format!("protocol {name:?} must look like pmnist-10x3"));
    let (fam, shape) = name.split_once('-').ok_or_else(err)?;
    let (c, v) = shape.split_once('x').ok_or_else(err)?;
    let classes: usize = c.parse().map_err(|_| err())?;
    let views: usize = v.parse().map_err(|_| err())?;
    let family: Family = Value::String(fam.to_ascii_lowercase())
        .try_into()
        .map_err(|_| CliError::Config(format!("unknown protocol family {fam:?}")))?;
    let mut flags = vec![
        ("protocol.family".to_string(), format!("\"{}\"", fam.to_ascii_lowercase())),
        ("protocol.num_views".to_string(), views.to_string()),
    ];
    match family {
        Family::Toy => flags.push(("protocol.toy.num_classes".into(), classes.to_string())),
        Family::Features => {}
        _ if classes != 10 => {
            return Err(CliError::Config(format!("{fam} has 10 classes, protocol asks for {classes}")));
        }
        _ => {}
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_with(overrides: &[&str]) -> Result<RunConfig, CliError> {
        let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        resolve(&Layers { file: None, flags: Vec::new(), overrides: &overrides })
    }

    #[test]
    fn overrides_apply() {
        let c = resolve_with(&["fusion.alpha=0.5", "mode=net2", "seed=9"]).unwrap();
        assert_eq!(c.fusion.alpha, 0.5);
        assert_eq!(c.mode, mvcnet::trainer::Mode::Net2);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn overrides_are_schema_checked() {
        assert!(matches!(resolve_with(&["fusion.alhpa=1"]), Err(CliError::Config(_))));
        assert!(matches!(resolve_with(&["fusion.alpha=fast"]), Err(CliError::Config(_))));
        assert!(matches!(resolve_with(&["protocol.num_views=0"]), Err(CliError::Config(_))));
        assert!(matches!(resolve_with(&["noequals"]), Err(CliError::Config(_))));
    }

    #[test]
    fn protocol_names() {
        let f = protocol_flags("pmnist-10x3").unwrap();
        assert!(f.contains(&("protocol.num_views".into(), "3".into())));
        assert!(protocol_flags("pmnist-12x3").is_err());
        assert!(protocol_flags("toy-4x2").unwrap().contains(&("protocol.toy.num_classes".into(), "4".into())));
        assert!(protocol_flags("nope-10x3").is_err());
    }
}
