//! Scheme hyperparameters and their flat `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const DEFAULT_VOCAB_SIZE: u32 = 65536;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WatermarkConfig {
    /// Target fraction of green tokens.
    pub gamma: f64,
    /// Logit bias added to green tokens.
    pub delta: f64,
    pub window: usize,
    pub top_k: usize,
    pub beam_width: usize,
    pub z_threshold: f64,
    /// Standard deviation of the generator's green ratio, folded into the z-test.
    pub sigma: f64,
    pub vocab: Vocabulary,
    pub seed: u64,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        WatermarkConfig {
            gamma: 0.5,
            delta: 2.0,
            window: 5,
            top_k: 20,
            beam_width: 8,
            z_threshold: 1.0,
            sigma: 0.0,
            vocab: Vocabulary::new(DEFAULT_VOCAB_SIZE).expect("default vocabulary"),
            seed: 0,
        }
    }
}

const KEYS: [&str; 9] = [
    "vocab_size",
    "gamma",
    "delta",
    "window",
    "top_k",
    "beam_width",
    "z_threshold",
    "sigma",
    "seed",
];

impl WatermarkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invariant("gamma", format!("must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::invariant("delta", format!("must be non-negative, got {}", self.delta)));
        }
        if self.window == 0 {
            return Err(Error::invariant("window", "must be at least 1"));
        }
        let size = self.vocab.size() as usize;
        if self.top_k == 0 || self.top_k > size {
            return Err(Error::invariant(
                "top_k",
                format!("must lie in [1, {size}], got {}", self.top_k),
            ));
        }
        if self.beam_width == 0 || self.beam_width > self.top_k {
            return Err(Error::invariant(
                "beam_width",
                format!("must lie in [1, top_k = {}], got {}", self.top_k, self.beam_width),
            ));
        }
        if !self.z_threshold.is_finite() {
            return Err(Error::invariant("z_threshold", "must be finite"));
        }
        if !(self.sigma >= 0.0 && self.sigma < self.gamma) {
            return Err(Error::invariant(
                "sigma",
                format!("must lie in [0, gamma), got {}", self.sigma),
            ));
        }
        Ok(())
    }

    /// Parses the flat `key = value` format. Blank lines and `#` comments are
    /// ignored; unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = WatermarkConfig::default();
        let mut vocab_size = DEFAULT_VOCAB_SIZE;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("expected `key = value`, got `{line}`"),
                })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Parse {
                line: line_no,
                message: format!("`{key}` expects {what}, got `{value}`"),
            };
            match key {
                "vocab_size" => vocab_size = value.parse().map_err(|_| bad("an integer"))?,
                "gamma" => cfg.gamma = value.parse().map_err(|_| bad("a number"))?,
                "delta" => cfg.delta = value.parse().map_err(|_| bad("a number"))?,
                "window" => cfg.window = value.parse().map_err(|_| bad("an integer"))?,
                "top_k" => cfg.top_k = value.parse().map_err(|_| bad("an integer"))?,
                "beam_width" => cfg.beam_width = value.parse().map_err(|_| bad("an integer"))?,
                "z_threshold" => cfg.z_threshold = value.parse().map_err(|_| bad("a number"))?,
                "sigma" => cfg.sigma = value.parse().map_err(|_| bad("a number"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("an integer"))?,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("unknown key `{other}` (known: {})", KEYS.join(", ")),
                    })
                }
            }
        }
        cfg.vocab = Vocabulary::new(vocab_size)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "vocab_size = {}", self.vocab.size());
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "delta = {}", self.delta);
        let _ = writeln!(s, "window = {}", self.window);
        let _ = writeln!(s, "top_k = {}", self.top_k);
        let _ = writeln!(s, "beam_width = {}", self.beam_width);
        let _ = writeln!(s, "z_threshold = {}", self.z_threshold);
        let _ = writeln!(s, "sigma = {}", self.sigma);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn with_window(&self, window: usize) -> Self {
        WatermarkConfig { window, ..self.clone() }
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<WatermarkConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    WatermarkConfig::parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(e: Error) -> &'static str {
        match e {
            Error::InvariantViolation { field, .. } => field,
            other => panic!("expected InvariantViolation, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = WatermarkConfig::parse("").unwrap();
        assert_eq!(cfg, WatermarkConfig::default());
        assert_eq!(cfg.gamma, 0.5);
        assert_eq!(cfg.delta, 2.0);
        assert_eq!(cfg.window, 5);
        assert_eq!(cfg.top_k, 20);
        assert_eq!(cfg.beam_width, 8);
        assert_eq!(cfg.z_threshold, 1.0);
        assert_eq!(cfg.vocab.bit_width(), 16);
    }

    #[test]
    fn range_checks_name_the_field() {
        assert_eq!(field_of(WatermarkConfig::parse("gamma = 1.5").unwrap_err()), "gamma");
        assert_eq!(
            field_of(WatermarkConfig::parse("top_k=100000\nvocab_size=65536").unwrap_err()),
            "top_k"
        );
        assert_eq!(field_of(WatermarkConfig::parse("beam_width = 21").unwrap_err()), "beam_width");
        assert_eq!(field_of(WatermarkConfig::parse("sigma = 0.5").unwrap_err()), "sigma");
        assert_eq!(field_of(WatermarkConfig::parse("window = 0").unwrap_err()), "window");
    }

    #[test]
    fn parse_errors_report_line() {
        match WatermarkConfig::parse("gamma = 0.5\ndelta = lots").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e:?}"),
        }
        assert!(matches!(WatermarkConfig::parse("colour = red"), Err(Error::Parse { .. })));
    }

    #[test]
    fn text_round_trip() {
        let cfg = WatermarkConfig::parse(
            "# small\nvocab_size = 256\ngamma = 0.25\ndelta=4\nwindow=2\ntop_k=16\nbeam_width=4\nz_threshold=3\nsigma=0.01\nseed=99\n",
        )
        .unwrap();
        assert_eq!(WatermarkConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn loads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wm.cfg");
        std::fs::write(&p, "delta = 3.5\n").unwrap();
        assert_eq!(load_config(&p).unwrap().delta, 3.5);
        assert!(matches!(load_config(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
