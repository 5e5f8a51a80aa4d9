//! Scenario configuration: flat `key = value` documents with `#` comments.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheme::SchemeId;
use crate::wire::Policy;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("field `{0}` given more than once")]
    Duplicate(String),
    #[error("missing required field `{0}`")]
    Missing(&'static str),
    #[error("field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    None,
    Replay,
    Tamper,
    ForgeKey,
    RevokedSender,
}

impl Attack {
    pub fn name(self) -> &'static str {
        match self {
            Attack::None => "none",
            Attack::Replay => "replay",
            Attack::Tamper => "tamper",
            Attack::ForgeKey => "forge_key",
            Attack::RevokedSender => "revoked_sender",
        }
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attack {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "none" => Attack::None,
            "replay" => Attack::Replay,
            "tamper" => Attack::Tamper,
            "forge_key" => Attack::ForgeKey,
            "revoked_sender" => Attack::RevokedSender,
            _ => return Err(format!("unknown attack `{s}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scheme: SchemeId,
    pub vehicles: u32,
    /// Receivers whose verdicts are recorded. Every receiver hears every
    /// vehicle; the rest of the fleet only transmits.
    pub observers: u32,
    pub rate_hz: u32,
    pub payload_bytes: u32,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub loss_rate: f64,
    pub disclosure_delay: u8,
    pub boot_period: u32,
    pub reveal_window: u8,
    pub slot_ms: u16,
    pub whitelist_ms: u64,
    pub drift_ms: u16,
    pub policy: Policy,
    pub anchor_hz: u32,
    pub seed: u64,
    pub revoked_count: u32,
    pub bloom_fpr: f64,
    pub attack: Attack,
}

impl ScenarioConfig {
    /// Defaults for every field except the seed.
    pub fn with_seed(seed: u64) -> Self {
        ScenarioConfig {
            scheme: SchemeId::SaltV,
            vehicles: 100,
            observers: 10,
            rate_hz: 10,
            payload_bytes: 300,
            duration_s: 10.0,
            warmup_s: 1.0,
            loss_rate: 0.0,
            disclosure_delay: 2,
            boot_period: 10,
            reveal_window: 3,
            slot_ms: 10,
            whitelist_ms: 2000,
            drift_ms: 10,
            policy: Policy::Normal,
            anchor_hz: 1,
            seed,
            revoked_count: 0,
            bloom_fpr: 0.01,
            attack: Attack::None,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() || v.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if pairs.iter().any(|(seen, _)| *seen == k) {
                return Err(ConfigError::Duplicate(k));
            }
            pairs.push((k, v));
        }
        let seed = pairs
            .iter()
            .find(|(k, _)| k == "seed")
            .ok_or(ConfigError::Missing("seed"))?;
        let mut cfg = ScenarioConfig::with_seed(num("seed", &seed.1)?);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "scheme" => {
                self.scheme = value
                    .parse()
                    .map_err(|e: crate::scheme::UnknownScheme| invalid("scheme", e.to_string()))?
            }
            "vehicles" => self.vehicles = num("vehicles", value)?,
            "observers" => self.observers = num("observers", value)?,
            "rate_hz" => self.rate_hz = num("rate_hz", value)?,
            "payload_bytes" => self.payload_bytes = num("payload_bytes", value)?,
            "duration_s" => self.duration_s = num("duration_s", value)?,
            "warmup_s" => self.warmup_s = num("warmup_s", value)?,
            "loss_rate" => self.loss_rate = num("loss_rate", value)?,
            "disclosure_delay" | "d" => self.disclosure_delay = num("disclosure_delay", value)?,
            "boot_period" | "r" => self.boot_period = num("boot_period", value)?,
            "reveal_window" | "w" => self.reveal_window = num("reveal_window", value)?,
            "slot_ms" => self.slot_ms = num("slot_ms", value)?,
            "whitelist_ms" => self.whitelist_ms = num("whitelist_ms", value)?,
            "drift_ms" => self.drift_ms = num("drift_ms", value)?,
            "policy" => {
                self.policy = match value {
                    "normal" => Policy::Normal,
                    "strict" => Policy::Strict,
                    _ => return Err(invalid("policy", "expected `normal` or `strict`")),
                }
            }
            "anchor_hz" => self.anchor_hz = num("anchor_hz", value)?,
            "seed" => self.seed = num("seed", value)?,
            "revoked_count" => self.revoked_count = num("revoked_count", value)?,
            "bloom_fpr" => self.bloom_fpr = num("bloom_fpr", value)?,
            "attack" => self.attack = value.parse().map_err(|e: String| invalid("attack", e))?,
            _ => return Err(ConfigError::UnknownField(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.vehicles == 0 || self.vehicles > 100_000 {
            return Err(invalid("vehicles", "must be in 1..=100000"));
        }
        if self.observers == 0 || self.observers > 1000 {
            return Err(invalid("observers", "must be in 1..=1000"));
        }
        if self.slot_ms == 0 {
            return Err(invalid("slot_ms", "must be positive"));
        }
        if self.rate_hz == 0 || 1000 % self.rate_hz != 0 || (1000 / self.rate_hz) % self.slot_ms as u32 != 0 {
            return Err(invalid("rate_hz", "the send period must be a whole number of slots"));
        }
        if self.payload_bytes as usize > crate::obu::MAX_PAYLOAD {
            return Err(invalid("payload_bytes", format!("at most {}", crate::obu::MAX_PAYLOAD)));
        }
        if !(self.duration_s > 0.0 && self.duration_s <= 3600.0) {
            return Err(invalid("duration_s", "must be in (0, 3600]"));
        }
        if !(self.warmup_s >= 0.0 && self.warmup_s < self.duration_s) {
            return Err(invalid("warmup_s", "must be in [0, duration_s)"));
        }
        if !(0.0..1.0).contains(&self.loss_rate) {
            return Err(invalid("loss_rate", "must be in [0, 1)"));
        }
        if self.disclosure_delay == 0 {
            return Err(invalid("disclosure_delay", "must be at least 1"));
        }
        if self.boot_period == 0 {
            return Err(invalid("boot_period", "must be at least 1"));
        }
        if self.reveal_window == 0 || self.reveal_window > crate::wire::MAX_REVEAL_KEYS {
            return Err(invalid("reveal_window", "must be in 1..=8"));
        }
        if self.whitelist_ms == 0 {
            return Err(invalid("whitelist_ms", "must be positive"));
        }
        if self.drift_ms > self.slot_ms {
            return Err(invalid("drift_ms", "must not exceed slot_ms"));
        }
        if self.anchor_hz == 0 || self.anchor_hz > 5 {
            return Err(invalid("anchor_hz", "must be in 1..=5"));
        }
        if self.revoked_count > self.vehicles {
            return Err(invalid("revoked_count", "cannot exceed vehicles"));
        }
        if !(self.bloom_fpr > 0.0 && self.bloom_fpr < 1.0) {
            return Err(invalid("bloom_fpr", "must be in (0, 1)"));
        }
        Ok(())
    }

    /// Renders the config back into the document format.
    pub fn to_document(&self) -> String {
        let policy = match self.policy {
            Policy::Normal => "normal",
            Policy::Strict => "strict",
        };
        format!(
            "scheme = {}\nvehicles = {}\nobservers = {}\nrate_hz = {}\npayload_bytes = {}\nduration_s = {}\n\
             warmup_s = {}\nloss_rate = {}\ndisclosure_delay = {}\nboot_period = {}\nreveal_window = {}\n\
             slot_ms = {}\nwhitelist_ms = {}\ndrift_ms = {}\npolicy = {}\nanchor_hz = {}\nseed = {}\n\
             revoked_count = {}\nbloom_fpr = {}\nattack = {}\n",
            self.scheme,
            self.vehicles,
            self.observers,
            self.rate_hz,
            self.payload_bytes,
            self.duration_s,
            self.warmup_s,
            self.loss_rate,
            self.disclosure_delay,
            self.boot_period,
            self.reveal_window,
            self.slot_ms,
            self.whitelist_ms,
            self.drift_ms,
            policy,
            self.anchor_hz,
            self.seed,
            self.revoked_count,
            self.bloom_fpr,
            self.attack,
        )
    }
}

fn num<T: FromStr>(field: &'static str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| invalid(field, format!("cannot parse `{value}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_comments_and_defaults() {
        let cfg = ScenarioConfig::parse("# urban\nseed = 42\nvehicles = 50 # fifty\n\nloss_rate=0.1\n").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.vehicles, 50);
        assert_eq!(cfg.loss_rate, 0.1);
        assert_eq!(cfg.rate_hz, 10);
    }

    #[test]
    fn seed_is_mandatory() {
        assert_eq!(ScenarioConfig::parse("vehicles = 5"), Err(ConfigError::Missing("seed")));
    }

    #[test]
    fn errors_name_the_field() {
        let e = ScenarioConfig::parse("seed = 1\nloss_rate = 1.5").unwrap_err();
        assert!(e.to_string().contains("loss_rate"));
        let e = ScenarioConfig::parse("seed = 1\nvehicles = many").unwrap_err();
        assert!(e.to_string().contains("vehicles"));
        let e = ScenarioConfig::parse("seed = 1\ncolour = red").unwrap_err();
        assert_eq!(e, ConfigError::UnknownField("colour".into()));
        assert_eq!(
            ScenarioConfig::parse("seed = 1\nseed = 2").unwrap_err(),
            ConfigError::Duplicate("seed".into())
        );
        assert_eq!(
            ScenarioConfig::parse("seed = 1\nnonsense").unwrap_err(),
            ConfigError::Syntax { line: 2 }
        );
        let e = ScenarioConfig::parse("seed = 1\nrate_hz = 7").unwrap_err();
        assert!(e.to_string().contains("rate_hz"));
    }

    #[test]
    fn document_round_trip() {
        let mut cfg = ScenarioConfig::with_seed(9);
        cfg.scheme = SchemeId::Vast;
        cfg.policy = Policy::Strict;
        cfg.attack = Attack::ForgeKey;
        cfg.loss_rate = 0.25;
        assert_eq!(ScenarioConfig::parse(&cfg.to_document()).unwrap(), cfg);
    }
}
