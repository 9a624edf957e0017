use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Hex characters of payload kept in a rendered prompt.
pub const PAYLOAD_HEX_LIMIT: usize = 64;

/// One flow's observable metadata and its class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficRecord {
    pub protocol: String,
    pub src_ip: String,
    pub dst_ip: String,
    pub src_port: u16,
    pub dst_port: u16,
    pub packet_lengths: Vec<u32>,
    pub inter_arrival_us: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_hex: Option<String>,
    pub label: String,
    pub task_id: String,
}

impl TrafficRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        let expected_iat = self.packet_lengths.len().saturating_sub(1);
        if self.inter_arrival_us.len() != expected_iat {
            return Err(DataError::Invalid(format!(
                "{} packet lengths need {expected_iat} inter-arrival times, got {}",
                self.packet_lengths.len(),
                self.inter_arrival_us.len()
            )));
        }
        if let Some(hex) = &self.payload_hex {
            if hex.len() % 2 != 0 {
                return Err(DataError::Invalid(format!(
                    "payload_hex has odd length {}",
                    hex.len()
                )));
            }
            if !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(DataError::Invalid("payload_hex has non-hex characters".into()));
            }
        }
        if self.protocol.is_empty() {
            return Err(DataError::Invalid("empty protocol".into()));
        }
        Ok(())
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn payload(record: &TrafficRecord) -> Option<&str> {
    record
        .payload_hex
        .as_deref()
        .filter(|p| !p.is_empty())
        .map(|p| &p[..p.len().min(PAYLOAD_HEX_LIMIT)])
}

/// Text fed to the tokenizer for `record`.
///
/// With `cfe` every field is written behind a descriptor:
///
/// ```text
/// protocol: TCP | src: 10.0.0.1:443 | dst: 10.0.0.2:51000 | lens: 60,1500 | iat_us: 120 | payload: none
/// ```
///
/// Without it the bare values are joined by single spaces, in the same order.
pub fn render_prompt(record: &TrafficRecord, cfe: bool) -> String {
    if cfe {
        format!(
            "protocol: {} | src: {}:{} | dst: {}:{} | lens: {} | iat_us: {} | payload: {}",
            record.protocol,
            record.src_ip,
            record.src_port,
            record.dst_ip,
            record.dst_port,
            join(&record.packet_lengths),
            join(&record.inter_arrival_us),
            payload(record).unwrap_or("none"),
        )
    } else {
        let mut out = format!(
            "{} {} {} {} {}",
            record.protocol, record.src_ip, record.src_port, record.dst_ip, record.dst_port
        );
        for l in &record.packet_lengths {
            write!(out, " {l}").unwrap();
        }
        for t in &record.inter_arrival_us {
            write!(out, " {t}").unwrap();
        }
        if let Some(p) = payload(record) {
            write!(out, " {p}").unwrap();
        }
        out
    }
}
