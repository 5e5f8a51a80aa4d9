//! Self-contained report documents: JSON for machines, an aligned table for
//! people.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::costs::CostTable;
use crate::scheme::SchemeId;
use crate::sim::MetricsReport;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostFingerprint {
    pub os: String,
    pub arch: String,
    pub family: String,
}

impl HostFingerprint {
    pub fn current() -> Self {
        HostFingerprint {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            family: std::env::consts::FAMILY.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub host: HostFingerprint,
    pub config: ScenarioConfig,
    pub schemes: Vec<MetricsReport>,
    pub costs: CostTable,
    pub notes: Vec<String>,
}

impl ReportDocument {
    pub fn new(config: ScenarioConfig, schemes: Vec<MetricsReport>, costs: CostTable) -> Self {
        let notes = notes_for(&config, &schemes);
        ReportDocument {
            schema_version: SCHEMA_VERSION,
            host: HostFingerprint::current(),
            config,
            schemes,
            costs,
            notes,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn render_table(&self) -> String {
        let mut rows: Vec<(String, Vec<String>)> = Vec::new();
        let mut row = |name: &str, f: &dyn Fn(&MetricsReport) -> String| {
            rows.push((name.to_string(), self.schemes.iter().map(f).collect()));
        };
        row("scheme", &|m| m.scheme.to_string());
        row("messages_sent", &|m| m.messages_sent.to_string());
        row("deliveries", &|m| m.deliveries.to_string());
        row("dropped_by_loss", &|m| m.dropped_by_loss.to_string());
        row("avg_message_frame_bytes", &|m| {
            format!("{:.1}", m.avg_message_frame_bytes)
        });
        row("avg_bytes_per_message", &|m| format!("{:.1}", m.avg_bytes_per_message));
        row("immediate_ratio", &|m| format!("{:.4}", m.immediate_ratio));
        row("avg_auth_delay_ms", &|m| format!("{:.3}", m.avg_auth_delay_ms));
        row("mean_disclosure_wait_ms", &|m| {
            format!("{:.3}", m.mean_disclosure_wait_ms)
        });
        row("avg_computation_ms", &|m| format!("{:.5}", m.avg_computation_ms));
        row("receiver_computation_max_ms", &|m| {
            format!("{:.5}", m.per_receiver_computation_ms.max)
        });
        row("strong", &|m| m.strong.to_string());
        row("held", &|m| m.held.to_string());
        row("rejected", &|m| m.rejected.values().sum::<u64>().to_string());
        row("retroactive_rejections", &|m| m.retroactive_rejections.to_string());
        row("unaccounted", &|m| m.unaccounted.to_string());
        row("cache_high_water", &|m| m.memory.cache_entries.to_string());
        row("whitelist_high_water", &|m| m.memory.whitelist_entries.to_string());
        if self.schemes.iter().any(|m| m.attack.is_some()) {
            let attack = |m: &MetricsReport, f: &dyn Fn(&crate::sim::AttackReport) -> String| {
                m.attack.as_ref().map_or("-".to_string(), f)
            };
            row("attack", &|m| attack(m, &|a| a.behavior.to_string()));
            row("attack_frames", &|m| attack(m, &|a| a.attack_frames.to_string()));
            row("attack_frames_accepted", &|m| {
                attack(m, &|a| a.attack_frames_accepted.to_string())
            });
            row("attack_frames_provisional", &|m| {
                attack(m, &|a| a.attack_frames_provisional.to_string())
            });
            row("victim_immediate_ratio", &|m| {
                attack(m, &|a| format!("{:.4}", a.victim_immediate_ratio))
            });
        }

        let label_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        let col_w = rows
            .iter()
            .flat_map(|(_, vs)| vs.iter().map(String::len))
            .max()
            .unwrap_or(0)
            .max(8);
        let mut out = String::new();
        for (name, values) in &rows {
            let _ = write!(out, "{name:<label_w$}");
            for v in values {
                let _ = write!(out, "  {v:>col_w$}");
            }
            out.push('\n');
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

fn notes_for(config: &ScenarioConfig, schemes: &[MetricsReport]) -> Vec<String> {
    let mut notes = Vec::new();
    let wait_ms = config.disclosure_delay as f64 * config.slot_ms as f64;
    if let Some(v) = schemes.iter().find(|m| m.scheme == SchemeId::Vast) {
        let analytic = (1.0 - 1.0 / config.boot_period as f64) * wait_ms;
        notes.push(format!(
            "vast: measured delay {:.2} ms; the signed-fraction mix predicts (1 - 1/r) * d * T_s = {:.2} ms, so 19.8 ms is not reachable with 1/r signed frames",
            v.avg_auth_delay_ms, analytic
        ));
    }
    if schemes.iter().any(|m| m.scheme == SchemeId::Ecdsa) {
        notes.push(
            "ecdsa: authentication delay excludes verification time, which is reported as avg_computation_ms".into(),
        );
    }
    if config.loss_rate > 0.0 {
        notes.push(format!(
            "loss {:.3}: a lost disclosure is not repeated, so the affected frames expire",
            config.loss_rate
        ));
    }
    notes
}
