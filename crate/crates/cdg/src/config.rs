//! INI-style run configuration.
//!
//! ```text
//! # comments run to the end of the line
//! [train]
//! epochs = 300
//! scales = 0.75, 1.0, 1.25
//! [model]
//! cdg = true
//! [data]
//! count = 8
//! ```
//!
//! Every key is optional. Unknown keys, keys outside a section and repeated keys
//! are errors, all reported with their line number.

use std::collections::HashSet;
use std::path::Path;

use cdg_core::pipeline::{synth_dataset, Sample, TrainConfig};

use crate::error::{read_file, Error, Result};

const WHAT: &str = "config";

/// The synthetic training set a run draws from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            count: 8,
            height: 64,
            width: 64,
            classes: 5,
        }
    }
}

impl DataConfig {
    pub fn generate(&self) -> Result<Vec<Sample>> {
        Ok(synth_dataset(
            self.seed,
            self.count,
            self.height,
            self.width,
            self.classes,
        )?)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn fail(line: usize, msg: impl Into<String>) -> Error {
    Error::Line {
        what: WHAT,
        line,
        msg: msg.into(),
    }
}

fn number<T: std::str::FromStr>(v: &str, line: usize, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| fail(line, format!("`{key}`: cannot parse `{v}`")))
}

fn real(v: &str, line: usize, key: &str) -> Result<f64> {
    let x: f64 = number(v, line, key)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(fail(line, format!("`{key}` must be finite")))
    }
}

fn reals(v: &str, line: usize, key: &str) -> Result<Vec<f64>> {
    v.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| real(s, line, key))
        .collect()
}

fn boolean(v: &str, line: usize, key: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(fail(
            line,
            format!("`{key}` must be `true` or `false`, found `{v}`"),
        )),
    }
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section: Option<&str> = None;
    let mut seen = HashSet::new();
    let mut sections = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = match name.trim() {
                n @ ("train" | "model" | "data") => n,
                other => return Err(fail(line, format!("unknown section `[{other}]`"))),
            };
            if !sections.insert(name) {
                return Err(fail(line, format!("section `[{name}]` appears twice")));
            }
            section = Some(name);
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(fail(
                line,
                format!("expected `key = value`, found `{content}`"),
            ));
        };
        let (key, v) = (key.trim(), value.trim());
        let sec =
            section.ok_or_else(|| fail(line, format!("`{key}` appears before any section")))?;
        if !seen.insert((sec, key.to_owned())) {
            return Err(fail(line, format!("duplicate key `{key}` in [{sec}]")));
        }
        let t = &mut cfg.train;
        let d = &mut cfg.data;
        match (sec, key) {
            ("train", "epochs") => t.epochs = number(v, line, key)?,
            ("train", "batch_size") => t.batch_size = number(v, line, key)?,
            ("train", "lr") => t.base_lr = real(v, line, key)?,
            ("train", "momentum") => t.momentum = real(v, line, key)?,
            ("train", "weight_decay") => t.weight_decay = real(v, line, key)?,
            ("train", "poly_power") => t.poly_power = real(v, line, key)?,
            ("train", "crop_size") => t.crop_size = number(v, line, key)?,
            ("train", "flip_prob") => t.flip_prob = real(v, line, key)?,
            ("train", "scale_jitter") => match reals(v, line, key)?[..] {
                [lo, hi] => t.scale_range = (lo, hi),
                _ => return Err(fail(line, "`scale_jitter` takes exactly two values")),
            },
            ("train", "scales") => t.scales = reals(v, line, key)?,
            ("train", "seed") => t.seed = number(v, line, key)?,
            ("train", "theta") => t.loss.theta = real(v, line, key)?,
            ("train", "phi") => t.loss.phi = real(v, line, key)?,
            ("train", "tau") => t.loss.tau = real(v, line, key)?,
            ("train", "gamma") => t.loss.gamma = real(v, line, key)?,
            ("model", "channels") => t.channels = number(v, line, key)?,
            ("model", "cdg") => t.cdg_enabled = boolean(v, line, key)?,
            ("model", "edge_head") => t.edge_head_enabled = boolean(v, line, key)?,
            ("data", "seed") => d.seed = number(v, line, key)?,
            ("data", "count") => d.count = number(v, line, key)?,
            ("data", "height") => d.height = number(v, line, key)?,
            ("data", "width") => d.width = number(v, line, key)?,
            ("data", "classes") => d.classes = number(v, line, key)?,
            _ => return Err(fail(line, format!("unknown key `{key}` in [{sec}]"))),
        }
    }
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn read(path: &Path) -> Result<RunConfig> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
        what: WHAT,
        offset: e.valid_up_to(),
        msg: "invalid UTF-8".into(),
    })?;
    parse(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        let t = &c.train;
        assert_eq!(
            (t.base_lr, t.momentum, t.weight_decay, t.poly_power),
            (3e-3, 0.9, 5e-4, 0.9)
        );
        assert_eq!(
            (t.loss.theta, t.loss.phi, t.loss.tau, t.loss.gamma),
            (1.0, 1.0, 1.0, 40.0)
        );
        assert_eq!(t.scales, [0.75, 1.0, 1.25]);
    }

    #[test]
    fn reads_every_section() {
        let c = parse(
            "# ablation\n[train]\ngamma = 0\nscale_jitter = 0.5, 1.0\nscales = 1.0\n\n[model]\ncdg = false # off\n[data]\ncount = 3\n",
        )
        .unwrap();
        assert_eq!(c.train.loss.gamma, 0.0);
        assert_eq!(c.train.scale_range, (0.5, 1.0));
        assert_eq!(c.train.scales, [1.0]);
        assert!(!c.train.cdg_enabled);
        assert_eq!(c.data.count, 3);
    }

    #[test]
    fn strictness_errors_carry_lines() {
        let line = |t: &str| match parse(t).unwrap_err() {
            Error::Line { line, .. } => line,
            e => panic!("{e}"),
        };
        assert_eq!(line("[train]\nepochs = 2\nepochs = 3\n"), 3);
        assert_eq!(line("[train]\n\nlearning_rate = 1\n"), 3);
        assert_eq!(line("epochs = 1\n"), 1);
        assert_eq!(line("[train]\n[optim]\n"), 2);
        assert_eq!(line("[model]\ncdg = yes\n"), 2);
        assert_eq!(line("[train]\nscale_jitter = 1\n"), 2);
        assert_eq!(line("[train]\nlr\n"), 2);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(parse("[train]\nflip_prob = 2\n").is_err());
        assert!(parse("[train]\nlr = nan\n").is_err());
        assert!(parse("[train]\nscales = 1.0, 0\n").is_err());
    }
}
