//! Run settings: command-line flags override `key = value` config-file
//! entries, which override built-in defaults. Every resolved value is kept so
//! the run can write out exactly what it used.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use torlamp_core::synthgen::parse_kv;
use torlamp_core::{Error, Result};

pub const OUT_DIR_ENV: &str = "TORLAMP_OUT_DIR";

/// A value that can come from a config file and be written back to one.
pub trait Setting: Sized {
    fn parse_setting(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_setting {
    ($($t:ty),*) => {$(
        impl Setting for $t {
            fn parse_setting(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e: <$t as FromStr>::Err| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_setting!(u64, usize, f64, bool, String);

impl Setting for PathBuf {
    fn parse_setting(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

#[derive(Debug, Default)]
pub struct Settings {
    path: Option<PathBuf>,
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

fn normalise(key: &str) -> String {
    key.replace('-', "_")
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = parse_kv(&text)?
            .into_iter()
            .map(|(k, v)| (normalise(&k), v))
            .collect();
        Ok(Settings {
            path: Some(path.to_path_buf()),
            file,
            resolved: BTreeMap::new(),
        })
    }

    /// Flag, then config file; records the outcome when present.
    pub fn optional<T: Setting>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(
                    T::parse_setting(raw).map_err(|e| Error::Config(format!("bad value {raw:?} for `{key}`: {e}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.render());
        }
        Ok(value)
    }

    pub fn or<T: Setting>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        match self.optional(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.resolved.insert(key.to_string(), default.render());
                Ok(default)
            }
        }
    }

    pub fn required<T: Setting>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.optional(key, flag)?
            .ok_or_else(|| Error::Config(format!("missing --{} (flag or config key `{key}`)", key.replace('_', "-"))))
    }

    /// Output directory: flag, config file, then the environment.
    pub fn out_dir(&mut self, flag: Option<PathBuf>) -> Result<PathBuf> {
        let env = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
        let dir = self.optional("out", flag)?.or(env).ok_or_else(|| {
            Error::Config(format!("missing --out (flag, config key `out`, or {OUT_DIR_ENV})"))
        })?;
        self.resolved.insert("out".into(), dir.render());
        Ok(dir)
    }

    /// Output file: flag, config file, then `default_name` inside the
    /// environment's output directory.
    pub fn out_file(&mut self, flag: Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
        let env = std::env::var_os(OUT_DIR_ENV).map(|d| PathBuf::from(d).join(default_name));
        let path = self.optional("out", flag)?.or(env).ok_or_else(|| {
            Error::Config(format!("missing --out (flag, config key `out`, or {OUT_DIR_ENV})"))
        })?;
        self.resolved.insert("out".into(), path.render());
        Ok(path)
    }

    /// Rejects config keys the command does not understand.
    pub fn check_keys(&self, known: &[&str], extra: impl Fn(&str) -> bool) -> Result<()> {
        match self.file.keys().find(|k| !known.contains(&k.as_str()) && !extra(k)) {
            Some(k) => Err(Error::Config(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }

    /// The config file this run was given, if any.
    pub fn resolved_config_path(&self) -> Option<PathBuf> {
        self.path.clone()
    }

    /// The resolved settings as a config file that reproduces the run.
    pub fn render(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_text(text: &str) -> Settings {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, text).unwrap();
        Settings::load(Some(&path)).unwrap()
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let mut s = from_text("seed = 7\nbatch-size = 32\n");
        assert_eq!(s.or("seed", Some(3u64), 0).unwrap(), 3);
        assert_eq!(s.or("batch_size", None, 64usize).unwrap(), 32);
        assert_eq!(s.or("epochs", None, 100usize).unwrap(), 100);
        assert_eq!(s.render(), "batch_size = 32\nepochs = 100\nseed = 3\n");
    }

    #[test]
    fn bad_and_unknown_keys_are_config_errors() {
        let mut s = from_text("seed = seven\nfoo = 1\n");
        assert!(matches!(s.or("seed", None, 0u64), Err(Error::Config(_))));
        assert!(matches!(s.check_keys(&["seed"], |_| false), Err(Error::Config(_))));
        assert!(s.check_keys(&["seed"], |k| k == "foo").is_ok());
        assert!(matches!(s.required::<PathBuf>("train", None), Err(Error::Config(_))));
    }
}
