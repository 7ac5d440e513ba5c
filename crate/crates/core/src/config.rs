//! `key=value` text files. Blank lines and `#` comments are ignored;
//! entry order is preserved.

use std::str::FromStr;

use crate::error::{HienError, Result};

#[derive(Clone, Debug)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_kv(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| HienError::Parse {
            line: i + 1,
            msg: format!("expected key=value, got `{line}`"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(HienError::Parse {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push(Entry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

impl Entry {
    pub fn parse<T: FromStr>(&self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e: T::Err| HienError::Parse {
            line: self.line,
            msg: format!("bad value for `{}`: {e}", self.key),
        })
    }

    pub fn parse_bool(&self) -> Result<bool> {
        match self.value.as_str() {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(HienError::Parse {
                line: self.line,
                msg: format!("bad boolean for `{}`: {other}", self.key),
            }),
        }
    }

    pub fn unknown(&self) -> HienError {
        HienError::Parse {
            line: self.line,
            msg: format!("unknown key `{}`", self.key),
        }
    }
}
