use std::io::{BufRead, Write};
use std::str::FromStr;

use super::{DataError, TrafficRecord};

/// On-disk record encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// One JSON object per line, field names as in [`TrafficRecord`].
    Jsonl,
    /// Tab-separated dissector export: protocol, src_ip, src_port, dst_ip,
    /// dst_port, lengths (comma-joined), inter-arrivals (comma-joined),
    /// payload hex, label, task id.
    Tsv,
}

impl FromStr for Format {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(Format::Jsonl),
            "tsv" => Ok(Format::Tsv),
            other => Err(DataError::Usage(format!("unknown record format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    /// 1-based.
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct Parsed {
    pub records: Vec<TrafficRecord>,
    pub errors: Vec<LineError>,
}

fn parse_list<T: FromStr>(field: &str, name: &str) -> Result<Vec<T>, String> {
    if field.trim().is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| format!("bad {name} value `{v}`"))
        })
        .collect()
}

fn parse_tsv_line(line: &str) -> Result<TrafficRecord, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 10 {
        return Err(format!("expected 10 tab-separated columns, got {}", cols.len()));
    }
    let port = |s: &str, name: &str| -> Result<u16, String> {
        let v: u64 = s
            .trim()
            .parse()
            .map_err(|_| format!("bad {name} `{s}`"))?;
        u16::try_from(v).map_err(|_| format!("{name} {v} outside 0-65535"))
    };
    let payload = cols[7].trim();
    Ok(TrafficRecord {
        protocol: cols[0].trim().to_string(),
        src_ip: cols[1].trim().to_string(),
        src_port: port(cols[2], "src_port")?,
        dst_ip: cols[3].trim().to_string(),
        dst_port: port(cols[4], "dst_port")?,
        packet_lengths: parse_list(cols[5], "packet length")?,
        inter_arrival_us: parse_list(cols[6], "inter-arrival")?,
        payload_hex: (!payload.is_empty() && payload != "none").then(|| payload.to_string()),
        label: cols[8].trim().to_string(),
        task_id: cols[9].trim().to_string(),
    })
}

/// Reads one record per non-blank line.
///
/// Bad lines are collected with their line numbers; the call only fails when
/// every non-blank line is bad.
pub fn parse_records<R: BufRead>(input: R, format: Format) -> Result<Parsed, DataError> {
    let mut parsed = Parsed::default();
    let mut seen = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        let record = match format {
            Format::Jsonl => serde_json::from_str::<TrafficRecord>(&line).map_err(|e| e.to_string()),
            Format::Tsv => parse_tsv_line(&line),
        }
        .and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string()));
        match record {
            Ok(r) => parsed.records.push(r),
            Err(message) => parsed.errors.push(LineError {
                line: i + 1,
                message,
            }),
        }
    }
    if seen > 0 && parsed.records.is_empty() {
        return Err(DataError::Ingestion {
            lines: seen,
            first: parsed.errors[0].clone().message,
        });
    }
    Ok(parsed)
}

pub fn write_records<W: Write>(out: &mut W, records: &[TrafficRecord], format: Format) -> std::io::Result<()> {
    for r in records {
        match format {
            Format::Jsonl => {
                serde_json::to_writer(&mut *out, r)?;
                out.write_all(b"\n")?;
            }
            Format::Tsv => {
                let join = |v: Vec<String>| v.join(",");
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.protocol,
                    r.src_ip,
                    r.src_port,
                    r.dst_ip,
                    r.dst_port,
                    join(r.packet_lengths.iter().map(ToString::to_string).collect()),
                    join(r.inter_arrival_us.iter().map(ToString::to_string).collect()),
                    r.payload_hex.as_deref().unwrap_or(""),
                    r.label,
                    r.task_id
                )?;
            }
        }
    }
    Ok(())
}
