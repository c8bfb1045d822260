//! Model hyperparameters and the flat `key=value` text format used for
//! config files, checkpoints and run records.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered `key=value` pairs. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Parses `key` from `map` into `slot` if present.
pub fn take<V: FromStr>(map: &BTreeMap<String, String>, key: &str, slot: &mut V) -> Result<()> {
    if let Some(raw) = map.get(key) {
        *slot = raw
            .parse()
            .map_err(|_| Error::Config(format!("cannot parse `{key}` from `{raw}`")))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    #[default]
    Full,
    NoMoe,
    NoSpatial,
    NoGrouping,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoMoe,
        Variant::NoSpatial,
        Variant::NoGrouping,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMoe => "no_moe",
            Variant::NoSpatial => "no_spatial",
            Variant::NoGrouping => "no_grouping",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected full, no_moe, no_spatial or no_grouping)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub nodes: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub channels: usize,
    pub d_feature: usize,
    pub d_node: usize,
    pub d_tod: usize,
    pub d_dow: usize,
    pub steps_per_day: usize,
    pub days_per_week: usize,
    pub groups: usize,
    pub experts: usize,
    pub layers: usize,
    pub variant: Variant,
    pub moe_residual: bool,
    pub grouping_softmax: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            nodes: 170,
            input_len: 12,
            horizon: 12,
            channels: 1,
            d_feature: 32,
            d_node: 32,
            d_tod: 32,
            d_dow: 32,
            steps_per_day: 288,
            days_per_week: 7,
            groups: 10,
            experts: 4,
            layers: 3,
            variant: Variant::Full,
            moe_residual: true,
            grouping_softmax: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Width of the concatenated representation, also the M3 layer width.
    pub fn hidden(&self) -> usize {
        self.d_feature + self.d_node + self.d_tod + self.d_dow
    }

    /// Expert count actually built; `no_moe` is the single-expert case.
    pub fn effective_experts(&self) -> usize {
        if self.variant == Variant::NoMoe {
            1
        } else {
            self.experts
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("d_feature", self.d_feature),
            ("d_node", self.d_node),
            ("d_tod", self.d_tod),
            ("d_dow", self.d_dow),
            ("steps_per_day", self.steps_per_day),
            ("days_per_week", self.days_per_week),
            ("groups", self.groups),
            ("experts", self.experts),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        [
            ("nodes", self.nodes.to_string()),
            ("input_len", self.input_len.to_string()),
            ("horizon", self.horizon.to_string()),
            ("channels", self.channels.to_string()),
            ("d_feature", self.d_feature.to_string()),
            ("d_node", self.d_node.to_string()),
            ("d_tod", self.d_tod.to_string()),
            ("d_dow", self.d_dow.to_string()),
            ("steps_per_day", self.steps_per_day.to_string()),
            ("days_per_week", self.days_per_week.to_string()),
            ("groups", self.groups.to_string()),
            ("experts", self.experts.to_string()),
            ("layers", self.layers.to_string()),
            ("variant", self.variant.to_string()),
            ("moe_residual", self.moe_residual.to_string()),
            ("grouping_softmax", self.grouping_softmax.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Overrides fields present in `map`; absent keys keep their current value.
    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        take(map, "nodes", &mut self.nodes)?;
        take(map, "input_len", &mut self.input_len)?;
        take(map, "horizon", &mut self.horizon)?;
        take(map, "channels", &mut self.channels)?;
        take(map, "d_feature", &mut self.d_feature)?;
        take(map, "d_node", &mut self.d_node)?;
        take(map, "d_tod", &mut self.d_tod)?;
        take(map, "d_dow", &mut self.d_dow)?;
        take(map, "steps_per_day", &mut self.steps_per_day)?;
        take(map, "days_per_week", &mut self.days_per_week)?;
        take(map, "groups", &mut self.groups)?;
        take(map, "experts", &mut self.experts)?;
        take(map, "layers", &mut self.layers)?;
        take(map, "variant", &mut self.variant)?;
        take(map, "moe_residual", &mut self.moe_residual)?;
        take(map, "grouping_softmax", &mut self.grouping_softmax)?;
        take(map, "seed", &mut self.seed)?;
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_kv(text)?)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_give_width_128() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.hidden(), 128);
        assert_eq!((cfg.groups, cfg.experts, cfg.layers), (10, 4, 3));
        assert_eq!((cfg.input_len, cfg.horizon), (12, 12));
    }

    #[test]
    fn text_round_trip() {
        let cfg = ModelConfig {
            nodes: 5,
            variant: Variant::NoGrouping,
            grouping_softmax: true,
            seed: 99,
            ..Default::default()
        };
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_variant_is_a_config_error() {
        assert!(matches!("no_mlp".parse::<Variant>(), Err(Error::Config(_))));
        assert_eq!("no_moe".parse::<Variant>().unwrap(), Variant::NoMoe);
    }

    #[test]
    fn kv_parser_skips_comments() {
        let map = parse_kv("# header\nnodes = 7\n\nlayers=2\n").unwrap();
        assert_eq!(map["nodes"], "7");
        assert_eq!(map["layers"], "2");
        assert!(parse_kv("nodes 7").is_err());
    }
}
