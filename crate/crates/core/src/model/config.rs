use std::fmt::Write as _;

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};

/// One backbone stage: `repeats` inverted residual blocks, the first with
/// `stride`, all widening to `out_ch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub expansion: usize,
    pub out_ch: usize,
    pub repeats: usize,
    pub stride: usize,
}

impl StageSpec {
    pub const fn new(expansion: usize, out_ch: usize, repeats: usize, stride: usize) -> Self {
        StageSpec {
            expansion,
            out_ch,
            repeats,
            stride,
        }
    }
}

/// Everything that determines the network's shapes and parameter count.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub stem_width: usize,
    /// MobileNetV2 stages up to the 1/16 level; the last three taps give D2..D4.
    pub stages: Vec<StageSpec>,
    pub ext_width: usize,
    pub ext_expansion: usize,
    pub ext_dilations: Vec<usize>,
    pub fc_width: usize,
    /// Entry conv, then D-Blocks 1..3.
    pub decoder_widths: [usize; 4],
    pub attention: AttentionConfig,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_width: 320,
            input_height: 240,
            stem_width: 32,
            stages: vec![
                StageSpec::new(1, 16, 1, 1),
                StageSpec::new(6, 24, 2, 2),
                StageSpec::new(6, 32, 3, 2),
                StageSpec::new(6, 64, 4, 2),
            ],
            ext_width: 128,
            ext_expansion: 4,
            ext_dilations: vec![1, 2, 3, 1, 2, 3],
            fc_width: 32,
            decoder_widths: [64, 64, 32, 24],
            attention: AttentionConfig::default(),
            depth_min: 0.1,
            depth_max: 10.0,
        }
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "input_width",
    "input_height",
    "stem_width",
    "stages",
    "ext_width",
    "ext_expansion",
    "ext_dilations",
    "fc_width",
    "decoder_widths",
    "attention_heads",
    "attention_epsilon",
    "depth_min",
    "depth_max",
];

impl ModelConfig {
    /// Narrow variant with the same topology, for fast tests and gradient checks.
    pub fn tiny(width: usize, height: usize) -> Self {
        ModelConfig {
            input_width: width,
            input_height: height,
            stem_width: 8,
            stages: vec![
                StageSpec::new(1, 4, 1, 1),
                StageSpec::new(2, 6, 1, 2),
                StageSpec::new(2, 8, 1, 2),
                StageSpec::new(2, 12, 1, 2),
            ],
            ext_width: 16,
            ext_expansion: 2,
            ext_dilations: vec![1, 2, 3, 1, 2, 3],
            fc_width: 8,
            decoder_widths: [8, 8, 6, 4],
            attention: AttentionConfig {
                model_dim: 16,
                heads: 2,
                ..AttentionConfig::default()
            },
            depth_min: 0.1,
            depth_max: 10.0,
        }
    }

    pub fn with_input(mut self, width: usize, height: usize) -> Self {
        self.input_width = width;
        self.input_height = height;
        self
    }

    /// Widths of D1..D4 (D5 is `ext_width`).
    pub fn pyramid_widths(&self) -> [usize; 4] {
        let n = self.stages.len();
        [
            self.stem_width,
            self.stages[n - 3].out_ch,
            self.stages[n - 2].out_ch,
            self.stages[n - 1].out_ch,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.input_width == 0 || self.input_height == 0 || self.input_width % 16 != 0 || self.input_height % 16 != 0 {
            return err(format!(
                "input size {}x{} must be non-zero multiples of 16",
                self.input_width, self.input_height
            ));
        }
        if self.stages.len() < 3 {
            return err("at least three backbone stages are needed for D2..D4".into());
        }
        let n = self.stages.len();
        let head_stride: usize = self.stages[..n - 3].iter().map(|s| s.stride).product();
        if head_stride != 1 || self.stages[n - 3..].iter().any(|s| s.stride != 2) {
            return err("backbone stages must keep stride 2 until the last three, which each halve".into());
        }
        if self.stages.iter().any(|s| s.repeats == 0 || s.expansion == 0 || s.out_ch == 0) {
            return err("stage expansion, width and repeats must be positive".into());
        }
        if self.ext_dilations.len() != 6 || self.ext_dilations.iter().any(|&d| d == 0) {
            return err(format!("ext_dilations must hold six positive rates, got {:?}", self.ext_dilations));
        }
        if self.ext_expansion == 0 || self.stem_width == 0 || self.fc_width == 0 || self.decoder_widths.contains(&0) {
            return err("widths and expansion must be positive".into());
        }
        if self.attention.model_dim != self.ext_width {
            return err(format!(
                "attention model_dim {} must equal ext_width {}",
                self.attention.model_dim, self.ext_width
            ));
        }
        self.attention.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return err(format!("depth clamp [{}, {}] is empty", self.depth_min, self.depth_max));
        }
        Ok(())
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "input_width" => self.input_width = parse(key, value)?,
            "input_height" => self.input_height = parse(key, value)?,
            "stem_width" => self.stem_width = parse(key, value)?,
            "stages" => self.stages = parse_stages(value)?,
            "ext_width" => {
                self.ext_width = parse(key, value)?;
                self.attention.model_dim = self.ext_width;
            }
            "ext_expansion" => self.ext_expansion = parse(key, value)?,
            "ext_dilations" => self.ext_dilations = parse_list(key, value)?,
            "fc_width" => self.fc_width = parse(key, value)?,
            "decoder_widths" => {
                let v: Vec<usize> = parse_list(key, value)?;
                self.decoder_widths = v
                    .try_into()
                    .map_err(|v: Vec<usize>| Error::Config(format!("decoder_widths needs 4 values, got {}", v.len())))?;
            }
            "attention_heads" => self.attention.heads = parse(key, value)?,
            "attention_epsilon" => self.attention.epsilon = parse(key, value)?,
            "depth_min" => self.depth_min = parse(key, value)?,
            "depth_max" => self.depth_max = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical `key = value` text, readable by [`ModelConfig::from_kv_text`].
    pub fn to_kv_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let stages = self
            .stages
            .iter()
            .map(|s| format!("{}:{}:{}:{}", s.expansion, s.out_ch, s.repeats, s.stride))
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        let _ = writeln!(s, "input_width = {}", self.input_width);
        let _ = writeln!(s, "input_height = {}", self.input_height);
        let _ = writeln!(s, "stem_width = {}", self.stem_width);
        let _ = writeln!(s, "stages = {stages}");
        let _ = writeln!(s, "ext_width = {}", self.ext_width);
        let _ = writeln!(s, "ext_expansion = {}", self.ext_expansion);
        let _ = writeln!(s, "ext_dilations = {}", join(&self.ext_dilations));
        let _ = writeln!(s, "fc_width = {}", self.fc_width);
        let _ = writeln!(s, "decoder_widths = {}", join(&self.decoder_widths));
        let _ = writeln!(s, "attention_heads = {}", self.attention.heads);
        let _ = writeln!(s, "attention_epsilon = {:e}", self.attention.epsilon);
        let _ = writeln!(s, "depth_min = {}", self.depth_min);
        let _ = writeln!(s, "depth_max = {}", self.depth_max);
        s
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (line, key, value) in parse_kv(text)? {
            if !cfg.apply(&key, &value)? {
                return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key = value` lines; `#` starts a comment, blank lines are skipped.
/// Returns `(line number, key, value)`.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(_, key, _): &(usize, String, String)| key == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub(crate) fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

pub(crate) fn parse_list<V: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_stages(value: &str) -> Result<Vec<StageSpec>> {
    value
        .split(',')
        .map(|item| {
            let parts: Vec<usize> = item
                .trim()
                .split(':')
                .map(|p| parse("stages", p.trim()))
                .collect::<Result<_>>()?;
            match parts[..] {
                [e, c, n, s] => Ok(StageSpec::new(e, c, n, s)),
                _ => Err(Error::Config(format!(
                    "stage `{}` must be expansion:width:repeats:stride",
                    item.trim()
                ))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates_and_roundtrips() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.pyramid_widths(), [32, 24, 32, 64]);
        assert_eq!(ModelConfig::from_kv_text(&cfg.to_kv_text()).unwrap(), cfg);
        let tiny = ModelConfig::tiny(32, 32);
        assert_eq!(ModelConfig::from_kv_text(&tiny.to_kv_text()).unwrap(), tiny);
    }

    #[test]
    fn parses_comments_and_rejects_unknown_keys() {
        let cfg = ModelConfig::from_kv_text("# sizes\ninput_width = 64 # trailing\n\ninput_height=48\n").unwrap();
        assert_eq!((cfg.input_width, cfg.input_height), (64, 48));
        assert!(ModelConfig::from_kv_text("input_widht = 64").is_err());
        assert!(ModelConfig::from_kv_text("input_width 64").is_err());
        assert!(ModelConfig::from_kv_text("input_width = 64\ninput_width = 32").is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ModelConfig::default().with_input(100, 48).validate().is_err());
        let mut c = ModelConfig::default();
        c.ext_dilations = vec![1, 2, 3];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.attention.heads = 3;
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_kv_text("decoder_widths = 1,2,3").is_err());
    }
}
