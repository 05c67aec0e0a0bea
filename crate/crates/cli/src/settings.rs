//! Run configuration: plain key=value config files, flag overrides, the
//! LIMN_SEED fallback, and the exact echo every run writes.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Resolution order for every setting: command-line flag, then config-file
/// key, then the built-in default (the seed additionally falls back to the
/// LIMN_SEED environment variable). Every resolved value is recorded and
/// echoed to `config_echo.txt`.
pub struct Settings {
    file: BTreeMap<String, String>,
    echo: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(config: Option<&Path>) -> Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), lineno + 1))?;
                file.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Settings { file, echo: BTreeMap::new() })
    }

    pub fn resolve<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => raw
                    .parse::<T>()
                    .map_err(|e| anyhow!("config key `{key}`: cannot parse `{raw}`: {e}"))?,
                None => default,
            },
        };
        self.echo.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Optional setting with no default; records `none` when absent.
    pub fn resolve_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(
                    raw.parse::<T>()
                        .map_err(|e| anyhow!("config key `{key}`: cannot parse `{raw}`: {e}"))?,
                ),
                None => None,
            },
        };
        self.echo.insert(
            key.to_string(),
            value.as_ref().map_or_else(|| "none".to_string(), T::to_string),
        );
        Ok(value)
    }

    /// Seed resolution: flag, config key `seed`, LIMN_SEED, then 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let env = match std::env::var("LIMN_SEED") {
            Ok(raw) => {
                Some(raw.parse::<u64>().map_err(|e| anyhow!("LIMN_SEED=`{raw}`: {e}"))?)
            }
            Err(_) => None,
        };
        self.resolve("seed", flag, env.unwrap_or(0))
    }

    /// Records a derived (not user-settable) value in the echo.
    pub fn note(&mut self, key: &str, value: impl Display) {
        self.echo.insert(key.to_string(), value.to_string());
    }

    pub fn echo(&self) -> &BTreeMap<String, String> {
        &self.echo
    }

    /// Writes the exact resolved configuration to `<out>/config_echo.txt`.
    pub fn write_echo(&self, out_dir: &Path) -> Result<()> {
        let mut text = String::new();
        for (key, value) in &self.echo {
            text.push_str(key);
            text.push('=');
            text.push_str(value);
            text.push('\n');
        }
        fs::write(out_dir.join("config_echo.txt"), text).context("writing config echo")?;
        Ok(())
    }
}

/// Parses a comma-separated list of strictly increasing ranks.
pub fn parse_ks(raw: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = raw
        .split(',')
        .map(|part| part.trim().parse::<usize>().map_err(|e| anyhow!("rank `{part}`: {e}")))
        .collect::<Result<_>>()?;
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        bail!("ks must be non-empty, positive, strictly increasing; got `{raw}`");
    }
    Ok(ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = std::env::temp_dir().join(format!("limn-settings-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.conf");
        fs::write(&path, "# comment\nepochs = 5\nlr=0.01\n").unwrap();
        let mut s = Settings::load(Some(&path)).unwrap();
        assert_eq!(s.resolve("epochs", Some(9usize), 20).unwrap(), 9);
        assert_eq!(s.resolve("lr", None::<f64>, 1e-4).unwrap(), 0.01);
        assert_eq!(s.resolve("batch", None::<usize>, 32).unwrap(), 32);
        assert_eq!(s.echo().get("epochs").unwrap(), "9");
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ks_must_increase() {
        assert!(parse_ks("1,10,50").is_ok());
        assert!(parse_ks("10,10").is_err());
        assert!(parse_ks("0,5").is_err());
        assert!(parse_ks("").is_err());
    }
}
