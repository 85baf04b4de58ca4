use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::InputError;

pub const KEYS: &[&str] = &[
    "binary",
    "ckpt",
    "dataset",
    "dims",
    "lr",
    "metric",
    "mode",
    "n",
    "out",
    "seed",
    "steps",
    "texture",
    "threads",
    "thresholds",
    "width_factor",
];

/// `key = value` settings read from a config file. Command-line flags win.
#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, InputError> {
        let mut values = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(InputError(format!("config line {}: expected key=value, got {raw:?}", no + 1)));
            };
            let key = k.trim().replace('-', "_");
            if !KEYS.contains(&key.as_str()) {
                return Err(InputError(format!("config line {}: unknown key {key:?}", no + 1)));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| InputError(format!("cannot read config {}: {e}", p.display())))?;
                Ok(Self::parse(&text)?)
            }
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, InputError>
    where
        T::Err: Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| InputError(format!("config key {key}: {e}"))))
            .transpose()
    }

    /// Flag value, else config value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, InputError>
    where
        T::Err: Display,
    {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    /// Flag value, else config value, if either is present.
    pub fn maybe<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, InputError>
    where
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    pub fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, InputError>
    where
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => self.get(key)?.ok_or_else(|| InputError(format!("missing --{} (or `{key}` in the config file)", key.replace('_', "-")))),
        }
    }
}

/// `64` or `48x64` (height x width); both must be positive multiples of 8.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
}

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad dimension {t:?}"));
        let (height, width) = match s.split_once(['x', 'X']) {
            Some((h, w)) => (num(h)?, num(w)?),
            None => {
                let v = num(s)?;
                (v, v)
            }
        };
        for v in [height, width] {
            if v == 0 || v % 8 != 0 {
                return Err(format!("image dimensions must be positive multiples of 8, got {v}"));
            }
        }
        Ok(Self { height, width })
    }
}

pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, InputError>
where
    T::Err: Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| InputError(format!("{t:?}: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims() {
        assert_eq!("64".parse::<Dims>().unwrap(), Dims { height: 64, width: 64 });
        assert_eq!("48x64".parse::<Dims>().unwrap(), Dims { height: 48, width: 64 });
        assert!("60".parse::<Dims>().unwrap_err().contains("multiples of 8"));
        assert!("0".parse::<Dims>().is_err());
    }

    #[test]
    fn settings() {
        let s = Settings::parse("# c\nseed = 5\nwidth-factor=0.5 # trailing\n\n").unwrap();
        assert_eq!(s.get::<u64>("seed").unwrap(), Some(5));
        assert_eq!(s.pick(Some(9u64), "seed", 0).unwrap(), 9);
        assert_eq!(s.pick(None, "seed", 0u64).unwrap(), 5);
        assert_eq!(s.pick(None, "steps", 3usize).unwrap(), 3);
        assert_eq!(s.get::<f64>("width_factor").unwrap(), Some(0.5));
        assert!(Settings::parse("bogus=1").is_err());
        assert!(Settings::parse("seed").is_err());
        assert!(Settings::parse("seed=x").unwrap().get::<u64>("seed").is_err());
    }
}
