//! Synthetic multi-task flow generator with a closed-form Bayes classifier.
//!
//! Within a task every class draws its protocol from a categorical
//! distribution and every packet length and inter-arrival time from a
//! rounded, clamped Gaussian. Ports and addresses carry no class information.
//! A task's `noise` widens all of its Gaussians by `(1 + noise)` and mixes its
//! protocol weights with the uniform distribution at rate
//! `noise / (1 + noise)`.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{DataError, TrafficRecord};

pub const MIN_PACKET_LEN: u32 = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub len_mean: f64,
    pub len_std: f64,
    pub iat_mean: f64,
    pub iat_std: f64,
    /// Unnormalized protocol weights.
    pub protocols: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    /// Inclusive port range; ranges of different tasks must not overlap.
    pub port_range: [u16; 2],
    pub samples: usize,
    #[serde(default)]
    pub noise: f64,
    pub classes: Vec<ClassSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_packets")]
    pub packets_per_flow: usize,
    pub tasks: Vec<TaskSpec>,
}

fn default_packets() -> usize {
    3
}

fn class(name: &str, len: (f64, f64), iat: (f64, f64), protocols: &[(&str, f64)]) -> ClassSpec {
    ClassSpec {
        name: name.to_string(),
        len_mean: len.0,
        len_std: len.1,
        iat_mean: iat.0,
        iat_std: iat.1,
        protocols: protocols.iter().map(|&(p, w)| (p.to_string(), w)).collect(),
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::three_tasks(2000, 0.0)
    }
}

impl SyntheticSpec {
    /// Three tasks of four classes each with well separated class means.
    pub fn three_tasks(samples: usize, noise: f64) -> Self {
        let task = |name: &str, lo: u16, names: [&str; 4], protos: [&str; 4], shift: f64| TaskSpec {
            name: name.to_string(),
            port_range: [lo, lo + 4999],
            samples,
            noise,
            classes: vec![
                class(names[0], (90.0 + shift, 12.0), (300.0, 60.0), &[(protos[0], 0.7), (protos[1], 0.3)]),
                class(names[1], (380.0 + shift, 40.0), (2500.0, 300.0), &[(protos[1], 0.7), (protos[2], 0.3)]),
                class(names[2], (800.0 + shift, 60.0), (9000.0, 900.0), &[(protos[2], 0.7), (protos[3], 0.3)]),
                class(names[3], (1350.0 - shift, 60.0), (40000.0, 4000.0), &[(protos[3], 0.7), (protos[0], 0.3)]),
            ],
        };
        SyntheticSpec {
            packets_per_flow: 3,
            tasks: vec![
                task("vpn", 20000, ["chat", "email", "streaming", "file"], ["TCP", "UDP", "TLS", "QUIC"], 0.0),
                task("tor", 30000, ["browsing", "audio", "video", "p2p"], ["TLS", "TCP", "UDP", "QUIC"], 20.0),
                task("botnet", 40000, ["benign", "neris", "rbot", "virut"], ["UDP", "TLS", "QUIC", "TCP"], 40.0),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        if self.packets_per_flow == 0 {
            return bad("packets_per_flow must be >= 1".into());
        }
        let mut names = BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if !names.insert(t.name.as_str()) {
                return bad(format!("duplicate task name `{}`", t.name));
            }
            if t.classes.len() < 2 {
                return bad(format!("task `{}` needs at least 2 classes", t.name));
            }
            if t.port_range[0] > t.port_range[1] {
                return bad(format!("task `{}` has an empty port range", t.name));
            }
            if !(t.noise >= 0.0 && t.noise.is_finite()) {
                return bad(format!("task `{}` noise must be >= 0", t.name));
            }
            for other in &self.tasks[..i] {
                if t.port_range[0] <= other.port_range[1] && other.port_range[0] <= t.port_range[1] {
                    return bad(format!(
                        "port ranges of tasks `{}` and `{}` overlap",
                        other.name, t.name
                    ));
                }
            }
            let mut class_names = BTreeSet::new();
            for c in &t.classes {
                if !class_names.insert(c.name.as_str()) {
                    return bad(format!("duplicate class `{}` in task `{}`", c.name, t.name));
                }
                if !(c.len_std > 0.0 && c.iat_std > 0.0) {
                    return bad(format!("class `{}` needs positive standard deviations", c.name));
                }
                if c.protocols.values().any(|&w| !(w >= 0.0 && w.is_finite()))
                    || c.protocols.values().sum::<f64>() <= 0.0
                {
                    return bad(format!("class `{}` needs non-negative protocol weights with a positive sum", c.name));
                }
            }
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.tasks.iter().map(|t| t.samples).sum()
    }

    /// Task whose port range contains `port`.
    pub fn task_for_port(&self, port: u16) -> Option<usize> {
        self.tasks
            .iter()
            .position(|t| (t.port_range[0]..=t.port_range[1]).contains(&port))
    }
}

impl TaskSpec {
    fn protocol_set(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self
            .classes
            .iter()
            .flat_map(|c| c.protocols.keys().map(String::as_str))
            .collect();
        set.into_iter().collect()
    }

    fn spread(&self) -> f64 {
        1.0 + self.noise
    }

    /// Effective protocol distribution of class `c`, over [`Self::protocol_set`].
    fn protocol_probs(&self, c: usize) -> Vec<f64> {
        let protos = self.protocol_set();
        let weights = &self.classes[c].protocols;
        let total: f64 = weights.values().sum();
        let mix = self.noise / (1.0 + self.noise);
        protos
            .iter()
            .map(|p| {
                let w = weights.get(*p).copied().unwrap_or(0.0) / total;
                (1.0 - mix) * w + mix / protos.len() as f64
            })
            .collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

fn random_ip(rng: &mut impl Rng) -> String {
    format!(
        "10.{}.{}.{}",
        rng.random_range(0..=255u8),
        rng.random_range(0..=255u8),
        rng.random_range(1..=254u8)
    )
}

fn draw_rounded(rng: &mut impl Rng, dist: &Normal<f64>, floor: f64) -> f64 {
    dist.sample(rng).round().max(floor)
}

/// Records for every task in spec order; class `i % C` for the task's `i`-th record.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<TrafficRecord>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.total_samples());
    for task in &spec.tasks {
        let protos = task.protocol_set();
        let per_class: Vec<_> = (0..task.classes.len())
            .map(|c| {
                let cs = &task.classes[c];
                let s = task.spread();
                (
                    WeightedIndex::new(task.protocol_probs(c)).expect("validated weights"),
                    Normal::new(cs.len_mean, cs.len_std * s).expect("validated std"),
                    Normal::new(cs.iat_mean, cs.iat_std * s).expect("validated std"),
                )
            })
            .collect();
        for i in 0..task.samples {
            let c = i % task.classes.len();
            let (proto_dist, len_dist, iat_dist) = &per_class[c];
            let protocol = protos[proto_dist.sample(&mut rng)].to_string();
            let src_ip = random_ip(&mut rng);
            let dst_ip = random_ip(&mut rng);
            let src_port = rng.random_range(task.port_range[0]..=task.port_range[1]);
            let dst_port = rng.random_range(task.port_range[0]..=task.port_range[1]);
            let packet_lengths = (0..spec.packets_per_flow)
                .map(|_| draw_rounded(&mut rng, len_dist, MIN_PACKET_LEN as f64) as u32)
                .collect();
            let inter_arrival_us = (1..spec.packets_per_flow)
                .map(|_| draw_rounded(&mut rng, iat_dist, 0.0) as u64)
                .collect();
            out.push(TrafficRecord {
                protocol,
                src_ip,
                dst_ip,
                src_port,
                dst_port,
                packet_lengths,
                inter_arrival_us,
                payload_hex: None,
                label: task.classes[c].name.clone(),
                task_id: task.name.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleDecision {
    pub task: usize,
    pub class: usize,
    pub posterior: Vec<f64>,
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// log P(X = v) for X = max(floor, round(N(mean, std))).
fn log_rounded_gaussian(v: f64, floor: f64, mean: f64, std: f64) -> f64 {
    if v < floor {
        return f64::NEG_INFINITY;
    }
    let hi = (v + 0.5 - mean) / std;
    let p = if v == floor {
        std_normal_cdf(hi)
    } else {
        let lo = (v - 0.5 - mean) / std;
        if lo >= 0.0 {
            std_normal_sf(lo) - std_normal_sf(hi)
        } else if hi <= 0.0 {
            std_normal_cdf(hi) - std_normal_cdf(lo)
        } else {
            1.0 - std_normal_cdf(lo) - std_normal_sf(hi)
        }
    };
    if p > 1e-300 {
        p.ln()
    } else {
        // Deep tail: the unit-width bin mass is its midpoint density.
        let z = if v == floor { hi - 0.5 / std } else { (v - mean) / std };
        -0.5 * z * z - (std * (2.0 * std::f64::consts::PI).sqrt()).ln()
    }
}

/// Exact class posterior of `record` under the generating distributions of
/// the task owning its destination port, with a uniform class prior.
/// Ties go to the lowest class index.
pub fn bayes_oracle(spec: &SyntheticSpec, record: &TrafficRecord) -> Result<OracleDecision, DataError> {
    let t = spec.task_for_port(record.dst_port).ok_or_else(|| {
        DataError::Oracle(format!("port {} is outside every task range", record.dst_port))
    })?;
    let task = &spec.tasks[t];
    let protos = task.protocol_set();
    let proto_idx = protos.iter().position(|p| *p == record.protocol);
    let s = task.spread();
    let loglik: Vec<f64> = (0..task.classes.len())
        .map(|c| {
            let cs = &task.classes[c];
            let mut ll = match proto_idx {
                Some(i) => task.protocol_probs(c)[i].ln(),
                None => f64::NEG_INFINITY,
            };
            for &l in &record.packet_lengths {
                ll += log_rounded_gaussian(l as f64, MIN_PACKET_LEN as f64, cs.len_mean, cs.len_std * s);
            }
            for &iat in &record.inter_arrival_us {
                ll += log_rounded_gaussian(iat as f64, 0.0, cs.iat_mean, cs.iat_std * s);
            }
            ll
        })
        .collect();
    let max = loglik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let posterior: Vec<f64> = if max == f64::NEG_INFINITY {
        vec![1.0 / loglik.len() as f64; loglik.len()]
    } else {
        let w: Vec<f64> = loglik.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    };
    let mut class = 0;
    for (c, &p) in posterior.iter().enumerate() {
        if p > posterior[class] {
            class = c;
        }
    }
    Ok(OracleDecision {
        task: t,
        class,
        posterior,
    })
}
